//! Monte Carlo replication harness.
//!
//! Every replication draws a fresh design from a seed derived from the cell
//! seed and the replication number, runs the requested online estimators in
//! lockstep over one pass of the data and, optionally, the offline baselines
//! over two passes (the second regenerates the data from the same seed). All
//! estimators report on the first coefficient. Replications run in parallel
//! and are collected in order, so everything except timings is reproducible.

use std::fmt::Write as _;
use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::OfflinePass;
use crate::dgp::{DgpConfig, DgpStream};
use crate::error::{Error, Result};
use crate::estimator::{Estimate, EstimatorConfig, EstimatorKind, Gamma0, Inference, OnlineEstimator};
use crate::inference::{ConfidenceInterval, TestResult, Z_975};
use crate::learning_rate::{DEFAULT_ALPHA, DEFAULT_DECAY};
use crate::moments::{MomentData, Observation};
use crate::rng::derive_seed;
use crate::sgmm::N1;

const BATCH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    TwoSls,
    Gmm,
    S2sls,
    SgmmRs,
    SgmmPi,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::TwoSls, Method::Gmm, Method::S2sls, Method::SgmmRs, Method::SgmmPi];

    pub fn label(self) -> &'static str {
        match self {
            Method::TwoSls => "2SLS",
            Method::Gmm => "GMM",
            Method::S2sls => "S2SLS",
            Method::SgmmRs => "SGMM-RS",
            Method::SgmmPi => "SGMM-PI",
        }
    }
}

/// What one replication runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Methods {
    pub offline: bool,
    pub s2sls: bool,
    pub sgmm: bool,
    /// Endogeneity test on the first coefficient, run with S2SLS.
    pub dwh: bool,
    /// Over-identification test, run with SGMM.
    pub jtest: bool,
}

impl Default for Methods {
    fn default() -> Self {
        Methods { offline: true, s2sls: true, sgmm: true, dwh: false, jtest: false }
    }
}

/// One cell of the experiment grid. `dgp.n` is the stream length after the
/// `n0` initialization records and `dgp.seed` the cell seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub dgp: DgpConfig,
    pub n0: usize,
    pub n1: N1,
    pub eta0: f64,
    pub alpha_quantile: f64,
    pub decay: f64,
    pub gamma0: Gamma0,
    pub methods: Methods,
}

impl Cell {
    pub fn new(label: impl Into<String>, dgp: DgpConfig) -> Self {
        Cell {
            label: label.into(),
            dgp,
            n0: 1000,
            n1: N1::Auto,
            eta0: 0.0,
            alpha_quantile: DEFAULT_ALPHA,
            decay: DEFAULT_DECAY,
            gamma0: Gamma0::RuleOfThumb,
            methods: Methods::default(),
        }
    }

    fn estimator(&self, kind: EstimatorKind) -> EstimatorConfig {
        let m = &self.methods;
        let inference = match kind {
            EstimatorKind::S2sls => Inference { random_scaling: true, dwh: m.dwh.then(|| vec![0]), ..Inference::default() },
            EstimatorKind::Sgmm => Inference { plug_in: true, random_scaling: true, dwh: None, jtest: m.jtest },
        };
        EstimatorConfig {
            kind,
            n1: self.n1,
            eta0: self.eta0,
            alpha_quantile: self.alpha_quantile,
            decay: self.decay,
            gamma0: self.gamma0,
            inference,
            ..EstimatorConfig::default()
        }
    }

    pub fn true_coefficient(&self) -> f64 {
        self.dgp.beta_star[0]
    }
}

/// One method's result on the first coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub estimate: f64,
    pub interval: ConfidenceInterval,
    /// Standard error at the sample scale.
    pub std_error: f64,
    pub time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub outcomes: Vec<(Method, std::result::Result<Outcome, String>)>,
    pub dwh: Option<std::result::Result<TestResult, String>>,
    pub jtest: Option<std::result::Result<TestResult, String>>,
    pub jtest_at_average: Option<std::result::Result<TestResult, String>>,
    /// Plug-in SGMM and two-step GMM asymptotic variances, when both ran.
    pub avar_pair: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl ReplicationRecord {
    pub fn outcome(&self, m: Method) -> Option<&Outcome> {
        self.outcomes.iter().find(|(k, _)| *k == m).and_then(|(_, r)| r.as_ref().ok())
    }
}

fn seeded(cell: &Cell, rep: usize) -> (DgpConfig, u64) {
    let seed = derive_seed(cell.dgp.seed, rep as u64);
    (DgpConfig { seed, ..cell.dgp.clone() }, seed)
}

struct Online {
    est: OnlineEstimator,
    failed: Option<Error>,
}

impl Online {
    fn step(&mut self, batch: &[MomentData]) {
        if self.failed.is_none() {
            if let Err(e) = self.est.step_batch(batch) {
                self.failed = Some(e);
            }
        }
    }

    fn finish(self) -> Result<Estimate> {
        match self.failed {
            Some(e) => Err(e),
            None => self.est.finish(None),
        }
    }
}

fn online_outcome(e: &Estimate, pi: bool) -> Result<Outcome> {
    let v = if pi { e.plug_in.as_ref() } else { e.random_scaling.as_ref() };
    let v = v.ok_or_else(|| Error::Config("requested inference missing".into()))?;
    let n = e.n_eff as f64;
    Ok(Outcome {
        estimate: e.beta_bar[0],
        interval: v.intervals[0],
        std_error: (v.avar[(0, 0)].max(0.0) / n).sqrt(),
        time: e.times.total(),
    })
}

/// Runs replication `rep` of `cell`.
pub fn run_replication(cell: &Cell, rep: usize) -> Result<ReplicationRecord> {
    let (dgp, seed) = seeded(cell, rep);
    let n = dgp.n;
    let dims = dgp.dims();
    let mut stream = DgpStream::with_len(&dgp, cell.n0 as u64 + n)?;
    let init = stream.take_vec(cell.n0);
    let m = &cell.methods;
    let start = |kind| -> Result<Online> {
        Ok(Online { est: OnlineEstimator::new(&cell.estimator(kind), &init, Some(n))?, failed: None })
    };
    let mut s2sls = m.s2sls.then(|| start(EstimatorKind::S2sls)).transpose();
    let mut sgmm = m.sgmm.then(|| start(EstimatorKind::Sgmm)).transpose();
    let mut pass = m.offline.then(|| OfflinePass::new(dims));
    let mut offline_time = Duration::ZERO;

    let mut obs = vec![Observation::zeros(dims); BATCH];
    let mut md = vec![MomentData::zeros(dims); BATCH];
    loop {
        let mut len = 0;
        while len < BATCH && stream.fill(&mut obs[len]) {
            md[len].assign(&obs[len])?;
            len += 1;
        }
        if len == 0 {
            break;
        }
        if let Ok(Some(o)) = &mut s2sls {
            o.step(&md[..len]);
        }
        if let Ok(Some(o)) = &mut sgmm {
            o.step(&md[..len]);
        }
        if let Some(p) = &mut pass {
            let t = Instant::now();
            for o in &obs[..len] {
                p.add(o)?;
            }
            offline_time += t.elapsed();
        }
    }

    let mut outcomes = Vec::new();
    let mut dwh = None;
    let mut jtest = None;
    let mut jtest_at_average = None;
    let mut pi_avar = None;
    if m.offline {
        let res = offline(cell, &dgp, pass.take().expect("offline pass"), offline_time);
        match res {
            Ok((a, b, gmm_avar)) => {
                outcomes.push((Method::TwoSls, Ok(a)));
                outcomes.push((Method::Gmm, Ok(b)));
                pi_avar = Some(gmm_avar);
            }
            Err(e) => {
                outcomes.push((Method::TwoSls, Err(e.to_string())));
                outcomes.push((Method::Gmm, Err(e.to_string())));
            }
        }
    }
    if m.s2sls {
        match s2sls.and_then(|o| o.expect("s2sls requested").finish()) {
            Ok(e) => {
                outcomes.push((Method::S2sls, online_outcome(&e, false).map_err(|e| e.to_string())));
                dwh = e.dwh.map(Ok);
            }
            Err(e) => {
                outcomes.push((Method::S2sls, Err(e.to_string())));
                dwh = m.dwh.then(|| Err(e.to_string()));
            }
        }
    }
    let mut avar_pair = None;
    if m.sgmm {
        match sgmm.and_then(|o| o.expect("sgmm requested").finish()) {
            Ok(e) => {
                outcomes.push((Method::SgmmRs, online_outcome(&e, false).map_err(|e| e.to_string())));
                outcomes.push((Method::SgmmPi, online_outcome(&e, true).map_err(|e| e.to_string())));
                jtest = e.jtest.map(Ok);
                jtest_at_average = e.jtest_at_average.map(Ok);
                if let (Some(g), Some(p)) = (pi_avar.take(), e.plug_in.as_ref()) {
                    avar_pair = Some((p.avar.clone(), g));
                }
            }
            Err(e) => {
                outcomes.push((Method::SgmmRs, Err(e.to_string())));
                outcomes.push((Method::SgmmPi, Err(e.to_string())));
                jtest = m.jtest.then(|| Err(e.to_string()));
                jtest_at_average = jtest.clone();
            }
        }
    }
    Ok(ReplicationRecord { replication: rep, seed, outcomes, dwh, jtest, jtest_at_average, avar_pair })
}

/// Finishes the offline baselines with a second pass over regenerated data.
fn offline(cell: &Cell, dgp: &DgpConfig, pass: OfflinePass, mut time: Duration) -> Result<(Outcome, Outcome, DMatrix<f64>)> {
    let t = Instant::now();
    let mut second = pass.first_step()?;
    time += t.elapsed();
    let mut stream = DgpStream::with_len(dgp, cell.n0 as u64 + dgp.n)?;
    let mut o = Observation::zeros(dgp.dims());
    for _ in 0..cell.n0 {
        stream.fill(&mut o);
    }
    let mut buf = vec![Observation::zeros(dgp.dims()); BATCH];
    loop {
        let mut len = 0;
        while len < BATCH && stream.fill(&mut buf[len]) {
            len += 1;
        }
        if len == 0 {
            break;
        }
        let t = Instant::now();
        for o in &buf[..len] {
            second.add(o)?;
        }
        time += t.elapsed();
    }
    let t = Instant::now();
    let (a, b) = second.finish()?;
    time += t.elapsed();
    let out = |e: &crate::baselines::OfflineEstimate| {
        let se = e.std_error(0);
        Outcome {
            estimate: e.beta[0],
            interval: ConfidenceInterval::centered(e.beta[0], Z_975 * se),
            std_error: se,
            time,
        }
    };
    Ok((out(&a), out(&b), b.avar.clone()))
}

/// Summary of one method in one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub cell: String,
    pub method: Method,
    pub n: u64,
    pub replications: usize,
    pub failures: usize,
    pub rmse: f64,
    pub bias: f64,
    /// Sample standard deviation; zero with a single replication.
    pub sd: f64,
    pub coverage: f64,
    pub ci_length: f64,
    pub mean_time_s: f64,
}

/// Rejection summary of a test in one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSummary {
    pub cell: String,
    pub test: &'static str,
    pub replications: usize,
    pub failures: usize,
    pub rejection_rate: f64,
    pub mean_statistic: f64,
    pub df: usize,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub records: Vec<ReplicationRecord>,
    /// Replications that failed before any estimator finished.
    pub failed: Vec<(usize, String)>,
}

impl CellResult {
    pub fn summary(&self) -> Vec<SummaryRow> {
        let truth = self.cell.true_coefficient();
        Method::ALL
            .iter()
            .filter_map(|&m| {
                let ran = self.records.iter().filter(|r| r.outcomes.iter().any(|(k, _)| *k == m)).count();
                if ran == 0 {
                    return None;
                }
                let ok: Vec<&Outcome> = self.records.iter().filter_map(|r| r.outcome(m)).collect();
                Some(summarize(&self.cell, m, truth, &ok, ran - ok.len() + self.failed.len()))
            })
            .collect()
    }

    pub fn tests(&self) -> Vec<TestSummary> {
        let mut out = Vec::new();
        let pick: [(&'static str, fn(&ReplicationRecord) -> Option<&std::result::Result<TestResult, String>>); 3] = [
            ("DWH", |r| r.dwh.as_ref()),
            ("J", |r| r.jtest.as_ref()),
            ("J-at-average", |r| r.jtest_at_average.as_ref()),
        ];
        for (name, get) in pick {
            let all: Vec<_> = self.records.iter().filter_map(get).collect();
            if all.is_empty() {
                continue;
            }
            let ok: Vec<&TestResult> = all.iter().filter_map(|r| r.as_ref().ok()).collect();
            let k = ok.len().max(1) as f64;
            out.push(TestSummary {
                cell: self.cell.label.clone(),
                test: name,
                replications: ok.len(),
                failures: all.len() - ok.len() + self.failed.len(),
                rejection_rate: ok.iter().filter(|t| t.reject_at_5pct).count() as f64 / k,
                mean_statistic: ok.iter().map(|t| t.statistic).sum::<f64>() / k,
                df: ok.first().map_or(0, |t| t.q),
            });
        }
        out
    }
}

fn summarize(cell: &Cell, m: Method, truth: f64, ok: &[&Outcome], failures: usize) -> SummaryRow {
    let k = ok.len();
    let kf = k.max(1) as f64;
    let errs: Vec<f64> = ok.iter().map(|o| o.estimate - truth).collect();
    let bias = errs.iter().sum::<f64>() / kf;
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / kf).sqrt();
    let sd = if k > 1 {
        (errs.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
    } else {
        0.0
    };
    SummaryRow {
        cell: cell.label.clone(),
        method: m,
        n: cell.dgp.n,
        replications: k,
        failures,
        rmse,
        bias,
        sd,
        coverage: ok.iter().filter(|o| o.interval.contains(truth)).count() as f64 / kf,
        ci_length: ok.iter().map(|o| o.interval.length()).sum::<f64>() / kf,
        mean_time_s: ok.iter().map(|o| o.time.as_secs_f64()).sum::<f64>() / kf,
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub cells: Vec<CellResult>,
}

/// Runs every cell `replications` times.
pub fn run_experiment(grid: &[Cell], replications: usize) -> Result<ExperimentReport> {
    if replications == 0 {
        return Err(Error::Config("replications must be at least 1".into()));
    }
    for c in grid {
        c.dgp.validate()?;
        if c.n0 == 0 || c.dgp.n == 0 {
            return Err(Error::Config(format!("cell '{}': n0 and n must be positive", c.label)));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|c| (0..replications).map(move |r| (c, r))).collect();
    let results: Vec<Result<ReplicationRecord>> =
        jobs.par_iter().map(|&(c, r)| run_replication(&grid[c], r)).collect();
    let mut cells: Vec<CellResult> =
        grid.iter().map(|c| CellResult { cell: c.clone(), records: Vec::new(), failed: Vec::new() }).collect();
    for (&(c, r), res) in jobs.iter().zip(results) {
        match res {
            Ok(rec) => cells[c].records.push(rec),
            Err(e) => cells[c].failed.push((r, e.to_string())),
        }
    }
    Ok(ExperimentReport { cells })
}

impl ExperimentReport {
    pub fn summary(&self) -> Vec<SummaryRow> {
        self.cells.iter().flat_map(|c| c.summary()).collect()
    }

    pub fn tests(&self) -> Vec<TestSummary> {
        self.cells.iter().flat_map(|c| c.tests()).collect()
    }

    /// Machine-readable summary: a method table, then a test table.
    pub fn write_csv<W: Write>(&self, writer: W, include_times: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(writer);
        let mut head =
            vec!["cell", "method", "n", "replications", "failures", "rmse", "bias", "sd", "coverage", "ci_length", "note"];
        if include_times {
            head.push("mean_time_s");
        }
        w.write_record(&head)?;
        for r in self.summary() {
            let mut rec = vec![
                r.cell.clone(),
                r.method.label().to_string(),
                r.n.to_string(),
                r.replications.to_string(),
                r.failures.to_string(),
                r.rmse.to_string(),
                r.bias.to_string(),
                r.sd.to_string(),
                r.coverage.to_string(),
                r.ci_length.to_string(),
                if r.replications == 1 { "single_replication".into() } else { String::new() },
            ];
            if include_times {
                rec.push(r.mean_time_s.to_string());
            }
            w.write_record(&rec)?;
        }
        let tests = self.tests();
        if !tests.is_empty() {
            w.write_record(["cell", "test", "df", "replications", "failures", "rejection_rate", "mean_statistic"])?;
            for t in tests {
                w.write_record([
                    t.cell,
                    t.test.to_string(),
                    t.df.to_string(),
                    t.replications.to_string(),
                    t.failures.to_string(),
                    t.rejection_rate.to_string(),
                    t.mean_statistic.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned text tables.
    pub fn pretty(&self) -> String {
        let mut s = String::new();
        let cw = self.cells.iter().map(|c| c.cell.label.len()).max().unwrap_or(0).max(4);
        let _ = writeln!(
            s,
            "{:<cw$} {:<8} {:>9} {:>5} {:>4} {:>9} {:>9} {:>9} {:>8} {:>9} {:>9}",
            "cell", "method", "n", "reps", "fail", "RMSE", "Bias", "SD", "Coverage", "CI len", "Time(s)"
        );
        for r in self.summary() {
            let flag = if r.replications == 1 { "  (single replication: SD set to 0)" } else { "" };
            let _ = writeln!(
                s,
                "{:<cw$} {:<8} {:>9} {:>5} {:>4} {:>9.5} {:>9.5} {:>9.5} {:>8.3} {:>9.5} {:>9.4}{flag}",
                r.cell,
                r.method.label(),
                r.n,
                r.replications,
                r.failures,
                r.rmse,
                r.bias,
                r.sd,
                r.coverage,
                r.ci_length,
                r.mean_time_s
            );
        }
        let tests = self.tests();
        if !tests.is_empty() {
            let tw = tests.iter().map(|t| t.test.len()).max().unwrap_or(0).max(4);
            let _ = writeln!(
                s,
                "\n{:<cw$} {:<tw$} {:>4} {:>5} {:>4} {:>10} {:>10}",
                "cell", "test", "df", "reps", "fail", "reject 5%", "mean stat"
            );
            for t in tests {
                let _ = writeln!(
                    s,
                    "{:<cw$} {:<tw$} {:>4} {:>5} {:>4} {:>10.3} {:>10.4}",
                    t.cell, t.test, t.df, t.replications, t.failures, t.rejection_rate, t.mean_statistic
                );
            }
        }
        for c in &self.cells {
            for (r, e) in &c.failed {
                let _ = writeln!(s, "cell {} replication {r} failed: {e}", c.cell.label);
            }
        }
        s
    }
}
