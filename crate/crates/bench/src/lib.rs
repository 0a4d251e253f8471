//! Shared fixtures for the kernel benchmarks.

use agrohydro::{ColumnGrid, ForcingSchedule, PressureState, SoilParams};

pub const Q_TOP: f64 = 1.944e-3 / 3600.0;

pub fn loam() -> SoilParams {
    SoilParams::loam()
}

pub fn standard_grid() -> ColumnGrid {
    ColumnGrid::standard()
}

pub fn daily_forcing(hours: f64) -> ForcingSchedule {
    ForcingSchedule::daily_cycle(Q_TOP, 8.0 * 3600.0, 24.0 * 3600.0, hours * 3600.0)
}

pub fn initial_state() -> PressureState {
    PressureState::uniform(32, -0.5139)
}
