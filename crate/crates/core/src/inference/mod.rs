//! Online confidence regions and hypothesis tests.

pub mod critical;
pub mod dwh;
pub mod jtest;
pub mod lrv;
pub mod wald;

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub use critical::{critical_value, simulate_critical_values, CriticalValueTable, StatisticForm};
pub use dwh::{dwh_step, dwh_test, DwhState, OlsMode};
pub use jtest::{sargan_hansen, JAccumulator};
pub use lrv::LrvAccumulator;
pub use wald::{
    plug_in_intervals, plug_in_statistic, random_scaling_intervals, wald_plug_in, wald_random_scaling, ConfidenceInterval,
};

/// Two-sided 97.5% standard normal quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    /// Restriction count or degrees of freedom.
    pub q: usize,
    pub critical_value_95: f64,
    pub reject_at_5pct: bool,
    /// Only for chi-square limits.
    pub p_value: Option<f64>,
}

impl TestResult {
    pub fn new(statistic: f64, q: usize, critical_value_95: f64, p_value: Option<f64>) -> Self {
        TestResult { statistic, q, critical_value_95, reject_at_5pct: statistic > critical_value_95, p_value }
    }

    /// Chi-square(`df`) test with exact p-value.
    pub fn chi_square(statistic: f64, df: usize) -> Self {
        let dist = ChiSquared::new(df as f64).expect("df >= 1");
        let cv = dist.inverse_cdf(0.95);
        let p = if statistic <= 0.0 { 1.0 } else { dist.sf(statistic) };
        TestResult::new(statistic, df, cv, Some(p))
    }
}
