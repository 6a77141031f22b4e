//! Polynomially decaying learning rates and the rule-of-thumb choice of the
//! initial rate.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::moments::Observation;
use crate::s2sls::InitialMoments;

/// Default decay exponent.
pub const DEFAULT_DECAY: f64 = 0.501;
/// Default quantile level for [`rule_of_thumb_gamma0`].
pub const DEFAULT_ALPHA: f64 = 0.5;

/// `gamma_i = gamma0 * i^(-a)`, `i >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRateSchedule {
    gamma0: f64,
    a: f64,
}

pub fn schedule(gamma0: f64, a: f64) -> Result<LearningRateSchedule> {
    LearningRateSchedule::new(gamma0, a)
}

impl LearningRateSchedule {
    pub fn new(gamma0: f64, a: f64) -> Result<Self> {
        if !(gamma0 > 0.0 && gamma0.is_finite()) {
            return Err(Error::Config(format!("gamma0 must be positive and finite, got {gamma0}")));
        }
        if !(a > 0.5 && a < 1.0) {
            return Err(Error::Config(format!("decay exponent must lie in (1/2, 1), got {a}")));
        }
        Ok(LearningRateSchedule { gamma0, a })
    }

    pub fn gamma0(&self) -> f64 {
        self.gamma0
    }

    pub fn decay(&self) -> f64 {
        self.a
    }

    /// Rate for the `i`-th post-initialization observation; `rate(1) == gamma0`.
    #[inline]
    pub fn rate(&self, i: u64) -> f64 {
        debug_assert!(i >= 1);
        if i == 1 {
            self.gamma0
        } else {
            self.gamma0 * (i as f64).powf(-self.a)
        }
    }
}

/// `gamma0 = 1 / Psi0(alpha)`, where `Psi0(alpha)` is the `(1 - alpha)`
/// quantile over the initialization sample of
/// `|(Phi0' W0 Phi0)^{-1} Phi0' W0 G_0i|_2 / d_beta`.
///
/// Quantiles are order statistics: the value of 1-based rank
/// `floor((1 - alpha) n0) + 1` (capped at `n0`) in the sorted sample.
pub fn rule_of_thumb_gamma0(init_sample: &[Observation], alpha: f64, eta0: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let norms = scaled_moment_norms(init_sample, eta0)?;
    let psi = upper_quantile(norms, 1.0 - alpha);
    if !(psi > 0.0) {
        return Err(Error::DegenerateInitialization);
    }
    Ok(1.0 / psi)
}

/// The per-observation values entering the quantile, in sample order.
pub fn scaled_moment_norms(init_sample: &[Observation], eta0: f64) -> Result<Vec<f64>> {
    let init = InitialMoments::new(init_sample, eta0)?;
    let w0 = init.weight()?;
    let d_beta = init.dims.d_beta;
    let phi_t_w = init.phi0.transpose() * &w0;
    let mut inner = &phi_t_w * &init.phi0;
    linalg::symmetrize(&mut inner);
    let inner_inv = linalg::spd_inverse(&inner)
        .filter(|_| linalg::sym_pinv(&inner).1 == d_beta)
        .ok_or_else(|| Error::SingularDesign("Phi0' W0 Phi0 is not invertible".into()))?;
    let proj: DMatrix<f64> = inner_inv * phi_t_w;
    // G_0i = z x' is rank one, so |P z x'|_2 = |P z| |x|.
    Ok(init_sample.iter().map(|o| (&proj * &o.z).norm() * o.x.norm() / d_beta as f64).collect())
}

fn upper_quantile(mut values: Vec<f64>, p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let rank = ((p * n as f64).floor() as usize + 1).min(n);
    values[rank - 1]
}
