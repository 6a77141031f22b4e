//! Synthetic heteroskedastic IV design.
//!
//! For each record, with `z ~ N(0, Sigma)`, `Sigma_ij = rho^|i-j|`:
//!
//! ```text
//! x_j = z_{j-1}                                   j = 2..p
//! x_1 = 0.1 sum_{j=2}^{p_low} x_j + 0.5 sum_{j=p_low}^{q_low} z_j + nu
//! eps = sigma (nu + eta),  sigma = sigma_scale * exp(z_{q_low})
//! y   = x' beta_star + eps
//! ```
//!
//! `nu` and `eta` are independent standard normals, so `x_1` is endogenous
//! through `nu` while every instrument is valid. [`Variant`] switches off the
//! endogeneity or invalidates one instrument.
//!
//! `z` is drawn by the AR(1) recursion `z_1 = e_1`,
//! `z_j = rho z_{j-1} + sqrt(1 - rho^2) e_j`, which is multiplication by the
//! exact lower Cholesky factor of `Sigma` (see [`cholesky_factor`]).

use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{Dims, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum Variant {
    #[default]
    Baseline,
    /// `nu` dropped from `eps`: `x_1` is exogenous.
    Exogenous,
    /// `coef * z_index` (1-based) added to `eps`, so that instrument
    /// violates the moment condition.
    InvalidInstrument { index: usize, coef: f64 },
}

impl std::str::FromStr for Variant {
    type Err = Error;

    /// `baseline`, `exogenous` or `invalid:INDEX:COEF`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown variant '{s}' (baseline, exogenous or invalid:INDEX:COEF)"));
        let lower = s.to_ascii_lowercase();
        match lower.split(':').collect::<Vec<_>>().as_slice() {
            ["baseline"] => Ok(Variant::Baseline),
            ["exogenous"] => Ok(Variant::Exogenous),
            ["invalid", index, coef] => Ok(Variant::InvalidInstrument {
                index: index.parse().map_err(|_| bad())?,
                coef: coef.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: u64,
    pub p: usize,
    pub q: usize,
    pub p_low: usize,
    pub q_low: usize,
    pub rho: f64,
    pub beta_star: Vec<f64>,
    pub sigma_scale: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig::with_dims(10_000, 5, 20)
    }
}

impl DgpConfig {
    /// `p_low = p`, `q_low = q`, `rho = 0.5`, unit coefficients, scale 5.
    pub fn with_dims(n: u64, p: usize, q: usize) -> Self {
        DgpConfig {
            n,
            p,
            q,
            p_low: p,
            q_low: q,
            rho: 0.5,
            beta_star: vec![1.0; p],
            sigma_scale: 5.0,
            seed: 0,
            variant: Variant::Baseline,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims { d_beta: self.p, d_g: self.q }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.p == 0 || self.q < self.p {
            return bad(format!("need 1 <= p <= q, got p = {}, q = {}", self.p, self.q));
        }
        if self.p_low == 0 || self.p_low > self.p {
            return bad(format!("need 1 <= p_low <= p, got p_low = {}", self.p_low));
        }
        if self.q_low < self.p_low || self.q_low > self.q {
            return bad(format!("need p_low <= q_low <= q, got q_low = {}", self.q_low));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (-1, 1), got {}", self.rho));
        }
        if self.beta_star.len() != self.p || self.beta_star.iter().any(|b| !b.is_finite()) {
            return bad(format!("beta_star must hold {} finite values", self.p));
        }
        if !(self.sigma_scale.is_finite() && self.sigma_scale >= 0.0) {
            return bad(format!("sigma_scale must be finite and non-negative, got {}", self.sigma_scale));
        }
        if let Variant::InvalidInstrument { index, coef } = self.variant {
            if index == 0 || index > self.q || !coef.is_finite() {
                return bad(format!("invalid instrument index {index} or coefficient {coef}"));
            }
        }
        Ok(())
    }
}

/// `Sigma_ij = rho^|i-j|`.
pub fn toeplitz_covariance(q: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(q, q, |i, j| rho.powi(i.abs_diff(j) as i32))
}

/// Closed-form lower Cholesky factor of [`toeplitz_covariance`].
pub fn cholesky_factor(q: usize, rho: f64) -> DMatrix<f64> {
    let s = (1.0 - rho * rho).sqrt();
    DMatrix::from_fn(q, q, |i, j| match (i >= j, j) {
        (false, _) => 0.0,
        (true, 0) => rho.powi(i as i32),
        (true, _) => s * rho.powi((i - j) as i32),
    })
}

/// Sequential generator with constant memory.
#[derive(Debug, Clone)]
pub struct DgpStream {
    cfg: DgpConfig,
    rng: ChaCha8Rng,
    remaining: u64,
    innov_sd: f64,
}

/// A stream of `cfg.n` records.
pub fn generate(cfg: &DgpConfig) -> Result<DgpStream> {
    DgpStream::with_len(cfg, cfg.n)
}

impl DgpStream {
    /// A stream of `len` records, ignoring `cfg.n`.
    pub fn with_len(cfg: &DgpConfig, len: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(DgpStream {
            cfg: cfg.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            remaining: len,
            innov_sd: (1.0 - cfg.rho * cfg.rho).sqrt(),
        })
    }

    pub fn config(&self) -> &DgpConfig {
        &self.cfg
    }

    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    /// Writes the next record into `obs`; `false` once the stream is exhausted.
    ///
    /// # Panics
    /// If `obs` does not have the configured dimensions.
    pub fn fill(&mut self, obs: &mut Observation) -> bool {
        if self.remaining == 0 {
            return false;
        }
        self.remaining -= 1;
        let c = &self.cfg;
        assert_eq!(obs.dims(), c.dims(), "buffer dimensions differ from the design");
        let rng = &mut self.rng;
        let mut prev = 0.0;
        for j in 0..c.q {
            let e: f64 = StandardNormal.sample(rng);
            prev = if j == 0 { e } else { c.rho * prev + self.innov_sd * e };
            obs.z[j] = prev;
        }
        let nu: f64 = StandardNormal.sample(rng);
        let eta: f64 = StandardNormal.sample(rng);
        // 0-based: x[j] = z[j-1], sums over 1-based j = 2..p_low and p_low..q_low
        for j in 1..c.p {
            obs.x[j] = obs.z[j - 1];
        }
        let sx: f64 = (1..c.p_low).map(|j| obs.x[j]).sum();
        let sz: f64 = (c.p_low - 1..c.q_low).map(|j| obs.z[j]).sum();
        obs.x[0] = 0.1 * sx + 0.5 * sz + nu;
        let sigma = c.sigma_scale * obs.z[c.q_low - 1].exp();
        let mut eps = match c.variant {
            Variant::Exogenous => sigma * eta,
            _ => sigma * (nu + eta),
        };
        if let Variant::InvalidInstrument { index, coef } = c.variant {
            eps += coef * obs.z[index - 1];
        }
        obs.y = (0..c.p).map(|j| obs.x[j] * c.beta_star[j]).sum::<f64>() + eps;
        true
    }

    /// Collects the next `len` records (fewer if the stream ends).
    pub fn take_vec(&mut self, len: usize) -> Vec<Observation> {
        let mut out = Vec::with_capacity(len.min(self.remaining as usize));
        let mut buf = Observation::zeros(self.cfg.dims());
        while out.len() < len && self.fill(&mut buf) {
            out.push(buf.clone());
        }
        out
    }
}

impl Iterator for DgpStream {
    type Item = Observation;

    fn next(&mut self) -> Option<Observation> {
        let mut obs = Observation::zeros(self.cfg.dims());
        self.fill(&mut obs).then_some(obs)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let r = usize::try_from(self.remaining).unwrap_or(usize::MAX);
        (r, Some(r))
    }
}

/// Header `y, x1..xp, z1..zq`.
pub fn csv_header(dims: Dims) -> Vec<String> {
    std::iter::once("y".to_string())
        .chain((1..=dims.d_beta).map(|j| format!("x{j}")))
        .chain((1..=dims.d_g).map(|j| format!("z{j}")))
        .collect()
}

/// Writes the stream as CSV under [`csv_header`]; returns the record count.
/// Values use shortest round-trip formatting, so parsing recovers them exactly.
pub fn write_csv<W: Write>(writer: W, stream: &mut DgpStream) -> Result<u64> {
    let dims = stream.cfg.dims();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(csv_header(dims))?;
    let mut obs = Observation::zeros(dims);
    let mut row: Vec<String> = Vec::with_capacity(1 + dims.d_beta + dims.d_g);
    let mut count = 0;
    while stream.fill(&mut obs) {
        row.clear();
        row.push(obs.y.to_string());
        row.extend(obs.x.iter().map(|v| v.to_string()));
        row.extend(obs.z.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
        count += 1;
    }
    w.flush()?;
    Ok(count)
}
