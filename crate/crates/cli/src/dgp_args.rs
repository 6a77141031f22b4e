use anyhow::Result;
use clap::Args;
use sgmm_core::dgp::{DgpConfig, Variant};

use crate::config::{List, Settings};

/// Simulated design; unset values take the built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct DgpArgs {
    /// Regressors.
    #[arg(long)]
    pub p: Option<usize>,
    /// Instruments.
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub p_low: Option<usize>,
    #[arg(long)]
    pub q_low: Option<usize>,
    /// Correlation of neighbouring instruments.
    #[arg(long, allow_hyphen_values = true)]
    pub rho: Option<f64>,
    /// One value per regressor.
    #[arg(long, allow_hyphen_values = true)]
    pub beta_star: Option<List<f64>>,
    #[arg(long)]
    pub sigma_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// baseline, exogenous or invalid:INDEX:COEF.
    #[arg(long)]
    pub variant: Option<Variant>,
}

impl DgpArgs {
    /// Design with `n` records and `(p, q)` unless overridden.
    pub fn resolve(&self, s: &Settings, n: u64, dims: (usize, usize)) -> Result<DgpConfig> {
        let p = s.pick_or(self.p, "p", dims.0)?;
        let q = s.pick_or(self.q, "q", dims.1)?;
        self.finish(s, DgpConfig::with_dims(n, p, q))
    }

    /// Applies everything except `p` and `q`.
    pub fn finish(&self, s: &Settings, mut cfg: DgpConfig) -> Result<DgpConfig> {
        cfg.p_low = s.pick_or(self.p_low, "p_low", cfg.p)?;
        cfg.q_low = s.pick_or(self.q_low, "q_low", cfg.q)?;
        cfg.rho = s.pick_or(self.rho, "rho", cfg.rho)?;
        if let Some(List(b)) = s.pick(self.beta_star.clone(), "beta_star")? {
            cfg.beta_star = b;
        }
        cfg.sigma_scale = s.pick_or(self.sigma_scale, "sigma_scale", cfg.sigma_scale)?;
        cfg.seed = s.pick_or(self.seed, "seed", cfg.seed)?;
        cfg.variant = s.pick_or(self.variant, "variant", cfg.variant)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
