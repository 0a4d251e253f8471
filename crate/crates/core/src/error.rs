use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid soil parameters: {0}")]
    InvalidParams(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("integration unstable at node {node}: |dh| = {dh:.3e} m exceeds guard {guard:.3e} m (reduce the substep)")]
    Instability { node: usize, dh: f64, guard: f64 },

    #[error("non-finite value in {context} at instant {instant}, unit {unit}")]
    NonFinite {
        context: &'static str,
        instant: usize,
        unit: usize,
    },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{module} failed at instant {instant} (unit {unit}): {source}")]
    Phase {
        module: &'static str,
        instant: usize,
        unit: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data in {path}: {detail}")]
    Malformed { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps an error with the orchestration context (module, sampling
    /// instant, filter/estimator index) that produced it.
    pub fn in_phase(self, module: &'static str, instant: usize, unit: usize) -> Error {
        Error::Phase {
            module,
            instant,
            unit,
            source: Box::new(self),
        }
    }
}
