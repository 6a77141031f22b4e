//! Plug-in and random-scaling Wald tests and confidence intervals.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::critical::{critical_value, StatisticForm};
use super::lrv::LrvAccumulator;
use super::{TestResult, Z_975};
use crate::error::{Error, Result};
use crate::linalg;
use crate::s2sls::{OnlineState, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
}

impl ConfidenceInterval {
    pub fn centered(center: f64, half_width: f64) -> Self {
        ConfidenceInterval { lower: center - half_width, upper: center + half_width }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

fn check_len(h: &DVector<f64>, d: usize) -> Result<()> {
    if h.len() != d {
        return Err(Error::InvalidInput(format!("hypothesis has length {}, expected {d}", h.len())));
    }
    Ok(())
}

/// `n (betabar - h)' A (betabar - h)`.
pub fn plug_in_statistic(beta_bar: &DVector<f64>, inner: &DMatrix<f64>, n: u64, h: &DVector<f64>) -> Result<f64> {
    check_len(h, beta_bar.len())?;
    let d = beta_bar - h;
    Ok(n as f64 * d.dot(&(inner * &d)))
}

/// Plug-in Wald test with `n` the number of steps taken.
pub fn wald_plug_in(state: &OnlineState, h: &DVector<f64>) -> Result<TestResult> {
    wald_plug_in_n(state, h, state.step_count())
}

/// Plug-in Wald test with an explicit effective sample size.
pub fn wald_plug_in_n(state: &OnlineState, h: &DVector<f64>, n: u64) -> Result<TestResult> {
    if state.phase() != Phase::Efficient {
        return Err(Error::InvalidPhase { expected: Phase::Efficient, found: state.phase() });
    }
    let stat = plug_in_statistic(state.beta_bar(), &state.inner_matrix(), n, h)?;
    Ok(TestResult::chi_square(stat.max(0.0), h.len()))
}

/// `betabar_k -/+ z_{0.975} sqrt([(Phi' W Phi)^{-1}]_kk / n)`.
pub fn plug_in_intervals(state: &OnlineState, n: u64) -> Vec<ConfidenceInterval> {
    let inv = state.inner_inverse();
    state
        .beta_bar()
        .iter()
        .enumerate()
        .map(|(k, &b)| ConfidenceInterval::centered(b, Z_975 * (inv[(k, k)].max(0.0) / n as f64).sqrt()))
        .collect()
}

/// `(n / q) d' V^{-1} d`; `SingularLrv` when `V` is not positive definite.
pub fn random_scaling_quadratic(d: &DVector<f64>, v: &DMatrix<f64>, n: u64) -> Result<f64> {
    let q = d.len();
    let (_, rank) = linalg::sym_pinv(v);
    if rank < q {
        return Err(Error::SingularLrv);
    }
    let mut vs = v.clone();
    linalg::symmetrize(&mut vs);
    let chol = vs.cholesky().ok_or(Error::SingularLrv)?;
    Ok(n as f64 / q as f64 * d.dot(&chol.solve(d)))
}

/// Random-scaling statistic from explicit `V`.
pub fn random_scaling_statistic(beta_bar: &DVector<f64>, v: &DMatrix<f64>, n: u64, h: &DVector<f64>) -> Result<f64> {
    check_len(h, beta_bar.len())?;
    random_scaling_quadratic(&(beta_bar - h), v, n)
}

/// Random-scaling Wald test against the F-type critical value.
pub fn wald_random_scaling(beta_bar: &DVector<f64>, acc: &LrvAccumulator, h: &DVector<f64>) -> Result<TestResult> {
    if acc.dim() != beta_bar.len() {
        return Err(Error::InvalidInput("accumulator and estimate dimensions differ".into()));
    }
    let stat = random_scaling_statistic(beta_bar, &acc.variance(), acc.count(), h)?;
    let cv = critical_value(h.len(), StatisticForm::FType)?;
    Ok(TestResult::new(stat, h.len(), cv, None))
}

/// `betabar_k -/+ c_t sqrt(V_kk / n)` with the t-type critical value.
pub fn random_scaling_intervals(beta_bar: &DVector<f64>, acc: &LrvAccumulator) -> Result<Vec<ConfidenceInterval>> {
    let cv = critical_value(1, StatisticForm::TType)?;
    let v = acc.variance();
    let n = acc.count().max(1) as f64;
    Ok(beta_bar
        .iter()
        .enumerate()
        .map(|(k, &b)| ConfidenceInterval::centered(b, cv * (v[(k, k)].max(0.0) / n).sqrt()))
        .collect())
}
