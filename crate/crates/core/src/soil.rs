//! Van Genuchten–Mualem constitutive relations.
//!
//! All functions are pure and operate in SI units (meters, seconds). The
//! retention formulas are defined for suction (`h < 0`); heads at or above
//! the saturation guard are clamped to [`H_SATURATION_CLAMP`] so that the
//! power terms stay finite. Estimator bounds keep states well below the
//! clamp, so it only engages for truth states pushed around by noise.

use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Heads above this value (toward zero) are clamped before evaluating any
/// constitutive relation.
pub const H_SATURATION_CLAMP: f64 = -1e-9;

/// Hydraulic parameters of a homogeneous soil profile.
///
/// The four retention parameters (`theta_s`, `theta_r`, `alpha`, `n`) form
/// the vector estimated by the distributed EKF; `k_sat` is estimated by the
/// moving horizon scheme; `tortuosity` is the Mualem pore-connectivity
/// exponent, fixed rather than estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoilParams {
    /// Saturated hydraulic conductivity (m/s).
    pub k_sat: f64,
    /// Saturated water content (m/m).
    pub theta_s: f64,
    /// Residual water content (m/m).
    pub theta_r: f64,
    /// Retention shape parameter (1/m).
    pub alpha: f64,
    /// Retention shape parameter (dimensionless, > 1).
    pub n: f64,
    /// Mualem pore-connectivity exponent (dimensionless).
    pub tortuosity: f64,
}

impl SoilParams {
    pub const DEFAULT_TORTUOSITY: f64 = 0.5;

    pub fn new(k_sat: f64, theta_s: f64, theta_r: f64, alpha: f64, n: f64) -> Result<Self> {
        Self::with_tortuosity(k_sat, theta_s, theta_r, alpha, n, Self::DEFAULT_TORTUOSITY)
    }

    pub fn with_tortuosity(
        k_sat: f64,
        theta_s: f64,
        theta_r: f64,
        alpha: f64,
        n: f64,
        tortuosity: f64,
    ) -> Result<Self> {
        let p = SoilParams {
            k_sat,
            theta_s,
            theta_r,
            alpha,
            n,
            tortuosity,
        };
        p.validate()?;
        Ok(p)
    }

    /// Loam profile used by the bundled preset.
    pub fn loam() -> Self {
        SoilParams {
            k_sat: 2.89e-6,
            theta_s: 0.430,
            theta_r: 0.078,
            alpha: 3.60,
            n: 1.56,
            tortuosity: Self::DEFAULT_TORTUOSITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::InvalidParams(msg));
        if !(self.k_sat > 0.0 && self.k_sat.is_finite()) {
            return err(format!("k_sat must be positive, got {}", self.k_sat));
        }
        if !(self.theta_r >= 0.0 && self.theta_r < self.theta_s && self.theta_s <= 1.0) {
            return err(format!(
                "need 0 <= theta_r < theta_s <= 1, got theta_r = {}, theta_s = {}",
                self.theta_r, self.theta_s
            ));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return err(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.n > 1.0 && self.n.is_finite()) {
            return err(format!("n must exceed 1, got {}", self.n));
        }
        if !(self.tortuosity.is_finite()) {
            return err(format!("tortuosity must be finite, got {}", self.tortuosity));
        }
        Ok(())
    }

    /// `m = 1 - 1/n`, always derived, never stored.
    #[inline]
    pub fn m(&self) -> f64 {
        1.0 - 1.0 / self.n
    }

    /// The retention parameter vector `(theta_s, theta_r, alpha, n)`.
    pub fn beta(&self) -> Vector4<f64> {
        Vector4::new(self.theta_s, self.theta_r, self.alpha, self.n)
    }

    /// Replaces the retention parameters, keeping `k_sat` and `tortuosity`.
    pub fn with_beta(&self, beta: &Vector4<f64>) -> SoilParams {
        SoilParams {
            theta_s: beta[0],
            theta_r: beta[1],
            alpha: beta[2],
            n: beta[3],
            ..*self
        }
    }

    pub fn with_k_sat(&self, k_sat: f64) -> SoilParams {
        SoilParams { k_sat, ..*self }
    }
}

/// Partial derivatives of the retention curve with respect to the four
/// retention parameters, evaluated at one head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetentionJacobian {
    /// d theta / d theta_s (dimensionless).
    pub d_theta_s: f64,
    /// d theta / d theta_r (dimensionless).
    pub d_theta_r: f64,
    /// d theta / d alpha (m).
    pub d_alpha: f64,
    /// d theta / d n (dimensionless).
    pub d_n: f64,
}

impl RetentionJacobian {
    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.d_theta_s, self.d_theta_r, self.d_alpha, self.d_n)
    }
}

#[inline]
fn clamp_head(h: f64) -> f64 {
    if h > H_SATURATION_CLAMP {
        H_SATURATION_CLAMP
    } else {
        h
    }
}

/// Soil-water retention curve: moisture content at pressure head `h`.
pub fn water_content(h: f64, p: &SoilParams) -> f64 {
    let h = clamp_head(h);
    let u = (-p.alpha * h).powf(p.n);
    (p.theta_s - p.theta_r) * (1.0 + u).powf(-p.m()) + p.theta_r
}

/// Relative saturation `S_e = (theta - theta_r) / (theta_s - theta_r)`.
pub fn effective_saturation(h: f64, p: &SoilParams) -> f64 {
    let h = clamp_head(h);
    let u = (-p.alpha * h).powf(p.n);
    (1.0 + u).powf(-p.m())
}

/// Mualem hydraulic conductivity at pressure head `h`.
pub fn hydraulic_conductivity(h: f64, p: &SoilParams) -> f64 {
    hydraulic_conductivity_se(effective_saturation(h, p), p)
}

/// Mualem conductivity as a function of relative saturation.
pub fn hydraulic_conductivity_se(se: f64, p: &SoilParams) -> f64 {
    if se <= 0.0 {
        return 0.0;
    }
    if se >= 1.0 {
        return p.k_sat;
    }
    let m = p.m();
    let bracket = 1.0 - (1.0 - se.powf(1.0 / m)).powf(m);
    p.k_sat * se.powf(p.tortuosity) * bracket * bracket
}

/// Capillary capacity `C(h) = d theta / d h` (1/m), strictly positive for
/// unsaturated heads.
pub fn capillary_capacity(h: f64, p: &SoilParams) -> f64 {
    let h = clamp_head(h);
    let m = p.m();
    let v = -p.alpha * h;
    let u = v.powf(p.n);
    p.n * p.alpha * (p.theta_s - p.theta_r) * m * v.powf(p.n - 1.0) * (1.0 + u).powf(-(m + 1.0))
}

/// Conductivity and its head derivative, sharing the power evaluations.
pub fn conductivity_with_dh(h: f64, p: &SoilParams) -> (f64, f64) {
    let h = clamp_head(h);
    let m = p.m();
    let v = -p.alpha * h;
    let u = v.powf(p.n);
    let b = 1.0 + u;
    let se = b.powf(-m);
    let se_pow = se.powf(1.0 / m); // = b^{-1} * ... exact: se^{1/m}
    let one_minus = (1.0 - se_pow).max(0.0);
    let t = 1.0 - one_minus.powf(m);
    let k = p.k_sat * se.powf(p.tortuosity) * t * t;
    // dK/dSe
    let dt_dse = if one_minus > 0.0 {
        one_minus.powf(m - 1.0) * se_pow / se
    } else {
        0.0
    };
    let dk_dse =
        p.k_sat * (p.tortuosity * se.powf(p.tortuosity - 1.0) * t * t
            + se.powf(p.tortuosity) * 2.0 * t * dt_dse);
    // dSe/dh = C(h) / (theta_s - theta_r)
    let dse_dh = p.n * p.alpha * m * v.powf(p.n - 1.0) * b.powf(-(m + 1.0));
    (k, dk_dse * dse_dh)
}

/// Capacity and its head derivative.
pub fn capacity_with_dh(h: f64, p: &SoilParams) -> (f64, f64) {
    let h = clamp_head(h);
    let m = p.m();
    let v = -p.alpha * h;
    let u = v.powf(p.n);
    let b = 1.0 + u;
    let d = p.n * p.alpha * m * (p.theta_s - p.theta_r);
    let c = d * v.powf(p.n - 1.0) * b.powf(-(m + 1.0));
    let dc = d * p.alpha * v.powf(p.n - 2.0) * b.powf(-(m + 2.0))
        * (p.n * (m + 1.0) * u - (p.n - 1.0) * b);
    (c, dc)
}

/// Analytic Jacobian of the retention curve with respect to the retention
/// parameters `(theta_s, theta_r, alpha, n)`.
pub fn retention_jacobian(h: f64, p: &SoilParams) -> RetentionJacobian {
    let h = clamp_head(h);
    let m = p.m();
    let v = -p.alpha * h;
    let u = v.powf(p.n);
    let b = 1.0 + u;
    let a = b.powf(-m); // = S_e, also d theta / d theta_s
    let span = p.theta_s - p.theta_r;
    let d_alpha = -span * m * (p.n / p.alpha) * u * b.powf(-m - 1.0);
    // theta depends on n both through the exponent m and through u = v^n.
    let d_n = span * a * (-b.ln() / (p.n * p.n) - m * u * v.ln() / b);
    RetentionJacobian {
        d_theta_s: a,
        d_theta_r: 1.0 - a,
        d_alpha,
        d_n,
    }
}

/// Inverts the retention curve: the (negative) head at which the soil holds
/// moisture `theta`.
pub fn inverse_retention(theta: f64, p: &SoilParams) -> Result<f64> {
    if !(theta > p.theta_r && theta < p.theta_s) {
        return Err(Error::OutOfRange(format!(
            "theta = {} outside ({}, {})",
            theta, p.theta_r, p.theta_s
        )));
    }
    let se = (theta - p.theta_r) / (p.theta_s - p.theta_r);
    let mut h = -(se.powf(-1.0 / p.m()) - 1.0).powf(1.0 / p.n) / p.alpha;
    h = h.min(H_SATURATION_CLAMP);
    // Newton polish: drives the retention residual to rounding level.
    for _ in 0..2 {
        let next = h - (water_content(h, p) - theta) / capillary_capacity(h, p);
        if next.is_finite() && next < 0.0 {
            h = next.min(H_SATURATION_CLAMP);
        }
    }
    Ok(h)
}
