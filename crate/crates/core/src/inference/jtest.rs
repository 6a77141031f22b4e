//! Sargan-Hansen over-identification test.

use nalgebra::{DMatrix, DVector};

use super::TestResult;
use crate::error::{Error, Result};
use crate::moments::{Dims, Form, MomentData};

/// Running mean of `g_i(betabar_i)` over the efficient phase, seeded at the
/// end of warm-up with the warm-up moments evaluated at the anchor.
///
/// The sums of `G_i` and `H_i` are kept over the whole stream as well, so the
/// sample moment can also be evaluated at the final average.
#[derive(Debug, Clone)]
pub struct JAccumulator {
    count: u64,
    started: bool,
    /// False when seeded by `from_ghat`, which has no sums.
    has_sums: bool,
    sum_g: DMatrix<f64>,
    sum_h: DVector<f64>,
    ghat: DVector<f64>,
}

impl JAccumulator {
    pub fn new(dims: Dims) -> Self {
        JAccumulator {
            count: 0,
            started: false,
            has_sums: true,
            sum_g: DMatrix::zeros(dims.d_g, dims.d_beta),
            sum_h: DVector::zeros(dims.d_g),
            ghat: DVector::zeros(dims.d_g),
        }
    }

    /// Records a warm-up observation.
    pub fn observe_warmup(&mut self, md: &MomentData) {
        debug_assert!(!self.started);
        self.add_sums(md);
        self.count += 1;
    }

    fn add_sums(&mut self, md: &MomentData) {
        match &md.form {
            Form::Single { x, z, y } => {
                self.sum_g.ger(1.0, z, x, 1.0);
                self.sum_h.axpy(-y, z, 1.0);
            }
            Form::Cluster { .. } => {
                self.sum_g += md.g();
                self.sum_h += md.h();
            }
        }
    }

    /// `ghat_{n1} = (1/n1) sum_{i <= n1} g_i(anchor)`.
    pub fn start(&mut self, anchor: &DVector<f64>) -> Result<()> {
        if self.started {
            return Err(Error::Config("J accumulator already started".into()));
        }
        if self.count == 0 {
            return Err(Error::Config("J accumulator has no warm-up observations".into()));
        }
        self.ghat.copy_from(&self.sum_h);
        self.ghat.gemv(1.0, &self.sum_g, anchor, 1.0);
        self.ghat /= self.count as f64;
        self.started = true;
        Ok(())
    }

    /// Starts directly from a given `ghat` after `count` observations.
    pub fn from_ghat(ghat: DVector<f64>, count: u64, d_beta: usize) -> Self {
        let d_g = ghat.len();
        JAccumulator {
            count,
            started: true,
            has_sums: false,
            sum_g: DMatrix::zeros(d_g, d_beta),
            sum_h: DVector::zeros(d_g),
            ghat,
        }
    }

    /// `ghat_i = (i-1)/i ghat_{i-1} + g_i(betabar_i) / i`.
    pub fn update(&mut self, md: &MomentData, beta_bar: &DVector<f64>) {
        debug_assert!(self.started);
        if self.has_sums {
            self.add_sums(md);
        }
        self.count += 1;
        let t = self.count as f64;
        match &md.form {
            Form::Single { x, z, y } => {
                let r = x.dot(beta_bar) - y;
                self.ghat.axpy(r / t, z, (t - 1.0) / t);
            }
            Form::Cluster { .. } => {
                self.ghat *= (t - 1.0) / t;
                self.ghat.axpy(1.0 / t, md.h(), 1.0);
                self.ghat.gemv(1.0 / t, md.g(), beta_bar, 1.0);
            }
        }
    }

    pub fn ghat(&self) -> &DVector<f64> {
        &self.ghat
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn is_started(&self) -> bool {
        self.started
    }

    /// `J = n ghat' W ghat` against chi-square(`d_g - d_beta`).
    pub fn test(&self, w: &DMatrix<f64>, dims: Dims) -> Result<TestResult> {
        sargan_hansen(&self.ghat, w, self.count, dims.d_g, dims.d_beta)
    }

    /// `n gbar(b)' W gbar(b)` with `gbar(b)` the full-sample mean moment at
    /// `b`. `None` when the accumulator was seeded without sums.
    pub fn test_at(&self, beta: &DVector<f64>, w: &DMatrix<f64>, dims: Dims) -> Option<Result<TestResult>> {
        if !self.has_sums || self.count == 0 {
            return None;
        }
        let mut g = self.sum_h.clone();
        g.gemv(1.0, &self.sum_g, beta, 1.0);
        g /= self.count as f64;
        Some(sargan_hansen(&g, w, self.count, dims.d_g, dims.d_beta))
    }
}

pub fn sargan_hansen(ghat: &DVector<f64>, w: &DMatrix<f64>, n: u64, d_g: usize, d_beta: usize) -> Result<TestResult> {
    if d_g <= d_beta {
        return Err(Error::NotOveridentified { d_g, d_beta });
    }
    if ghat.len() != d_g || w.nrows() != d_g || w.ncols() != d_g {
        return Err(Error::InvalidInput("ghat and W dimensions differ from d_g".into()));
    }
    let stat = n as f64 * ghat.dot(&(w * ghat));
    Ok(TestResult::chi_square(stat.max(0.0), d_g - d_beta))
}
