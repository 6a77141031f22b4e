//! Critical values of the random-scaling limit laws.
//!
//! With `W` a `q`-dimensional standard Brownian motion on `[0, 1]` and
//! `M = int_0^1 (W(r) - r W(1))(W(r) - r W(1))' dr`:
//!
//! ```text
//! F-type:  W(1)' M^{-1} W(1) / q
//! t-type:  |W_1(1)| / sqrt(M_11)
//! ```
//!
//! `W` is discretized on `grid` equally spaced points. The discrete bridge is
//! independent of `W(1)`, so given a bridge the tail probability of either
//! statistic is a chi-square survival function. The default estimator averages
//! these conditional probabilities over simulated bridges (and, for the F
//! form, over random directions of `W(1)`) and solves for the 95% point. The
//! plain empirical percentile is available as a cross-check.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub const LEVEL: f64 = 0.95;
pub const MIN_GRID: usize = 1000;
pub const MIN_REPS: usize = 10_000;
/// Directions of `W(1)` averaged per bridge for the F form.
const DIRECTIONS: usize = 16;
/// Paths per RNG stream. Fixed so results do not depend on the thread count.
const CHUNK: usize = 256;

const EMBEDDED_TABLE: &str = include_str!("../../assets/critical_values.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StatisticForm {
    FType,
    TType,
}

impl fmt::Display for StatisticForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StatisticForm::FType => "F",
            StatisticForm::TType => "t",
        })
    }
}

impl FromStr for StatisticForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f" | "f_type" | "ftype" => Ok(StatisticForm::FType),
            "t" | "t_type" | "ttype" => Ok(StatisticForm::TType),
            _ => Err(Error::Config(format!("unknown statistic form '{s}' (expected F or t)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SimulationMethod {
    #[default]
    Conditional,
    Percentile,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationConfig {
    pub q: usize,
    pub grid: usize,
    pub reps: usize,
    pub seed: u64,
    pub method: SimulationMethod,
    /// Multiplies every Brownian increment; the statistics do not depend on it.
    pub scale: f64,
}

impl SimulationConfig {
    pub fn new(q: usize, grid: usize, reps: usize, seed: u64) -> Self {
        SimulationConfig { q, grid, reps, seed, method: SimulationMethod::Conditional, scale: 1.0 }
    }

    fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::Config("q must be at least 1".into()));
        }
        if self.grid < MIN_GRID {
            return Err(Error::Config(format!("grid must be at least {MIN_GRID}, got {}", self.grid)));
        }
        if self.reps < MIN_REPS {
            return Err(Error::Config(format!("reps must be at least {MIN_REPS}, got {}", self.reps)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config("scale must be positive".into()));
        }
        Ok(())
    }
}

/// 95% critical values of both forms from one set of simulated paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalPair {
    pub t_type: f64,
    pub f_type: f64,
}

impl CriticalPair {
    pub fn get(&self, form: StatisticForm) -> f64 {
        match form {
            StatisticForm::FType => self.f_type,
            StatisticForm::TType => self.t_type,
        }
    }
}

/// Conditional Monte Carlo estimate of the 95% critical value.
pub fn simulate_critical_values(q: usize, form: StatisticForm, grid: usize, reps: usize, seed: u64) -> Result<f64> {
    Ok(simulate(&SimulationConfig::new(q, grid, reps, seed))?.get(form))
}

pub fn simulate(cfg: &SimulationConfig) -> Result<CriticalPair> {
    cfg.validate()?;
    let paths = simulate_paths(cfg);
    match cfg.method {
        SimulationMethod::Percentile => {
            let t: Vec<f64> = paths.iter().map(|p| p.t_stat).collect();
            let f: Vec<f64> = paths.iter().map(|p| p.f_stat).collect();
            Ok(CriticalPair { t_type: percentile(t, LEVEL), f_type: percentile(f, LEVEL) })
        }
        SimulationMethod::Conditional => {
            let s2 = cfg.scale * cfg.scale;
            // P(|t| > c | M) = P(chi2_1 > c^2 M_11 / s^2)
            let a_t: Vec<f64> = paths.iter().map(|p| p.m11 / s2).collect();
            let c2 = solve_tail(&a_t, 1, 1.0 - LEVEL);
            // P(F > c | M, u) = P(chi2_q > c q / (s^2 u'M^{-1}u))
            let q = cfg.q as f64;
            let a_f: Vec<f64> = paths.iter().flat_map(|p| p.dir_forms.iter().map(move |v| q / (s2 * v))).collect();
            let c = solve_tail(&a_f, cfg.q, 1.0 - LEVEL);
            Ok(CriticalPair { t_type: c2.sqrt(), f_type: c })
        }
    }
}

struct PathSummary {
    m11: f64,
    dir_forms: Vec<f64>,
    t_stat: f64,
    f_stat: f64,
}

fn simulate_paths(cfg: &SimulationConfig) -> Vec<PathSummary> {
    let n_chunks = cfg.reps.div_ceil(CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, c as u64));
            let count = CHUNK.min(cfg.reps - c * CHUNK);
            let mut sim = PathSim::new(cfg.q, cfg.grid, cfg.scale);
            (0..count).map(|_| sim.path(&mut rng, cfg.method)).collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

struct PathSim {
    q: usize,
    grid: usize,
    step_sd: f64,
    w: Vec<f64>,
    /// Row-major `q x q`; only `a >= b` is filled.
    sum_ww: Vec<f64>,
    sum_tw: Vec<f64>,
}

impl PathSim {
    fn new(q: usize, grid: usize, scale: f64) -> Self {
        PathSim {
            q,
            grid,
            step_sd: scale / (grid as f64).sqrt(),
            w: vec![0.0; q],
            sum_ww: vec![0.0; q * q],
            sum_tw: vec![0.0; q],
        }
    }

    fn path(&mut self, rng: &mut ChaCha8Rng, method: SimulationMethod) -> PathSummary {
        let (q, m) = (self.q, self.grid);
        self.w.fill(0.0);
        self.sum_tw.fill(0.0);
        self.sum_ww.fill(0.0);
        let inv_m = 1.0 / m as f64;
        let (w, sum_tw, sum_ww) = (&mut self.w, &mut self.sum_tw, &mut self.sum_ww);
        for j in 1..=m {
            let t = j as f64 * inv_m;
            for (wk, tw) in w.iter_mut().zip(sum_tw.iter_mut()) {
                let e: f64 = rng.sample(StandardNormal);
                *wk += self.step_sd * e;
                *tw += t * *wk;
            }
            for (a, row) in sum_ww.chunks_exact_mut(q).enumerate() {
                let wa = w[a];
                for (cell, &wb) in row[..=a].iter_mut().zip(w.iter()) {
                    *cell += wa * wb;
                }
            }
        }
        // sum_j t_j^2
        let mf = m as f64;
        let sum_t2 = (mf + 1.0) * (2.0 * mf + 1.0) / (6.0 * mf);
        let w1 = &self.w;
        let mut bridge = DMatrix::zeros(q, q);
        for b in 0..q {
            for a in b..q {
                let v = self.sum_ww[a * q + b] - self.sum_tw[a] * w1[b] - w1[a] * self.sum_tw[b] + sum_t2 * w1[a] * w1[b];
                bridge[(a, b)] = v * inv_m;
                bridge[(b, a)] = v * inv_m;
            }
        }
        let m11 = bridge[(0, 0)];
        let chol = bridge.cholesky();
        let quad = |v: &DVector<f64>| -> f64 {
            match &chol {
                Some(c) => v.dot(&c.solve(v)),
                None => f64::INFINITY,
            }
        };
        let mut summary = PathSummary { m11, dir_forms: Vec::new(), t_stat: f64::NAN, f_stat: f64::NAN };
        match method {
            SimulationMethod::Percentile => {
                let w1v = DVector::from_column_slice(w1);
                summary.t_stat = w1[0].abs() / m11.sqrt();
                summary.f_stat = quad(&w1v) / q as f64;
            }
            SimulationMethod::Conditional => {
                if q == 1 {
                    summary.dir_forms.push(1.0 / m11);
                } else {
                    summary.dir_forms.reserve(DIRECTIONS);
                    for _ in 0..DIRECTIONS {
                        let mut u = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
                        let norm = u.norm();
                        u /= norm;
                        summary.dir_forms.push(quad(&u));
                    }
                }
            }
        }
        summary
    }
}

/// Empirical quantile: the order statistic of 1-based rank `ceil(p n)`.
fn percentile(mut v: Vec<f64>, p: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Chi-square(`df`) upper tail. Small integer `df` use the finite series
/// `Q(k, y) = e^-y sum_{j<k} y^j / j!` and its half-integer analogue.
fn chi2_sf(df: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    let y = 0.5 * x;
    if df > 20 || y > 600.0 {
        return gamma_ur(df as f64 / 2.0, y);
    }
    let (head, mut term, j0) = if df % 2 == 0 {
        (0.0, 1.0, 1.0)
    } else {
        // Gamma(3/2) = sqrt(pi) / 2
        (libm::erfc(y.sqrt()), 2.0 * (y / std::f64::consts::PI).sqrt(), 1.5)
    };
    let mut sum = 0.0;
    for j in 0..df / 2 {
        sum += term;
        term *= y / (j as f64 + j0);
    }
    (head + sum * (-y).exp()).min(1.0)
}

/// Mean of `f` over `a`, summed in fixed-size blocks so the result is
/// independent of scheduling.
fn block_mean(a: &[f64], f: impl Fn(f64) -> f64 + Sync) -> f64 {
    let partial: Vec<f64> = a.par_chunks(4096).map(|c| c.iter().map(|&v| f(v)).sum::<f64>()).collect();
    partial.iter().sum::<f64>() / a.len() as f64
}

/// Solves `mean_j P(chi2_df > x a_j) = alpha` for `x`.
fn solve_tail(a: &[f64], df: usize, alpha: f64) -> f64 {
    let tail = |x: f64| block_mean(a, |aj| chi2_sf(df, x * aj));
    let half = df as f64 / 2.0;
    let log_norm = -half * std::f64::consts::LN_2 - ln_gamma(half);
    let pdf = |v: f64| if v > 0.0 { (log_norm + (half - 1.0) * v.ln() - 0.5 * v).exp() } else { 0.0 };
    let slope = |x: f64| -block_mean(a, |aj| if aj.is_finite() { aj * pdf(x * aj) } else { 0.0 });

    let mut sorted: Vec<f64> = a.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let mut lo = 0.0;
    let mut hi = df as f64 / median;
    while tail(hi) > alpha {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fx = tail(x) - alpha;
        if fx > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
        let d = slope(x);
        let newton = if d < 0.0 { x - fx / d } else { f64::NAN };
        if newton > lo && newton < hi {
            // Newton may approach from one side, leaving the bracket wide.
            if (newton - x).abs() <= 1e-13 * x {
                return newton;
            }
            x = newton;
        } else {
            x = 0.5 * (lo + hi);
        }
    }
    0.5 * (lo + hi)
}

/// One line of the critical-value table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub q: usize,
    pub form: StatisticForm,
    pub percentile: f64,
    pub value: f64,
}

/// Plain-text table: `#` comment lines (settings) followed by rows
/// `q form percentile value`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalValueTable {
    pub header: Vec<String>,
    pub entries: Vec<TableEntry>,
}

impl CriticalValueTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut header = Vec::new();
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                header.push(rest.trim().to_string());
                continue;
            }
            let bad = |m: &str| Error::Ingest { line: idx as u64 + 1, message: m.to_string() };
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 4 {
                return Err(bad("expected 4 columns: q form percentile value"));
            }
            entries.push(TableEntry {
                q: cols[0].parse().map_err(|_| bad("bad q"))?,
                form: cols[1].parse().map_err(|_| bad("bad form"))?,
                percentile: cols[2].parse().map_err(|_| bad("bad percentile"))?,
                value: cols[3].parse().map_err(|_| bad("bad value"))?,
            });
        }
        Ok(CriticalValueTable { header, entries })
    }

    pub fn embedded() -> &'static CriticalValueTable {
        static TABLE: OnceLock<CriticalValueTable> = OnceLock::new();
        TABLE.get_or_init(|| CriticalValueTable::parse(EMBEDDED_TABLE).expect("embedded critical-value table parses"))
    }

    pub fn lookup(&self, q: usize, form: StatisticForm) -> Option<f64> {
        self.entries.iter().find(|e| e.q == q && e.form == form && e.percentile == LEVEL).map(|e| e.value)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for h in &self.header {
            out.push_str(&format!("# {h}\n"));
        }
        out.push_str("# q form percentile value\n");
        for e in &self.entries {
            out.push_str(&format!("{} {} {} {:.6}\n", e.q, e.form, e.percentile, e.value));
        }
        out
    }

    /// Simulates a table for `q = 1..=q_max`.
    pub fn generate(q_max: usize, grid: usize, reps: usize, seed: u64) -> Result<Self> {
        let mut entries = Vec::new();
        for q in 1..=q_max {
            let pair = simulate(&SimulationConfig::new(q, grid, reps, seed.wrapping_add(q as u64)))?;
            for form in [StatisticForm::FType, StatisticForm::TType] {
                entries.push(TableEntry { q, form, percentile: LEVEL, value: pair.get(form) });
            }
        }
        Ok(CriticalValueTable {
            header: vec![format!("seed={seed} grid={grid} reps={reps} method=conditional seed_per_q=seed+q")],
            entries,
        })
    }
}

/// Settings used when `q` is not in the embedded table.
pub const FALLBACK_GRID: usize = 1000;
pub const FALLBACK_REPS: usize = 20_000;
pub const FALLBACK_SEED: u64 = 20_240_601;

/// 95% critical value: embedded table, else a deterministic simulation
/// (cached per process).
pub fn critical_value(q: usize, form: StatisticForm) -> Result<f64> {
    if q == 0 {
        return Err(Error::Config("q must be at least 1".into()));
    }
    if let Some(v) = CriticalValueTable::embedded().lookup(q, form) {
        return Ok(v);
    }
    static CACHE: OnceLock<Mutex<HashMap<usize, CriticalPair>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(p) = cache.lock().expect("cache lock").get(&q) {
        return Ok(p.get(form));
    }
    let pair = simulate(&SimulationConfig::new(q, FALLBACK_GRID, FALLBACK_REPS, FALLBACK_SEED))?;
    cache.lock().expect("cache lock").insert(q, pair);
    Ok(pair.get(form))
}
