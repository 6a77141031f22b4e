//! End-to-end runs over a CSV file or a simulated design.
//!
//! The first `n0` units of the input form the initialization sample (flattened
//! when units are clusters); the remaining units are the stream. A single
//! unshuffled epoch reads the input lazily. Shuffled or repeated epochs load
//! the stream into memory and keep one estimator running across epochs, so
//! the step size keeps decaying.

use std::io::Read;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dgp::{DgpConfig, DgpStream};
use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, Gamma0, OnlineEstimator};
use crate::io::{CsvStream, Schema};
use crate::moments::{Dims, MomentData, Observation, Unit};
use crate::report::EstimateReport;
use crate::rng::derive_seed;
use crate::sgmm::N1;

/// Units stepped between timer reads.
const BATCH: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Csv { path: PathBuf, schema: Schema },
    /// Standard input; can be read only once.
    Stdin { schema: Schema },
    /// `cfg.n` simulated records, initialization sample included.
    Dgp(DgpConfig),
}

impl Input {
    pub fn is_rereadable(&self) -> bool {
        !matches!(self, Input::Stdin { .. })
    }

    fn describe(&self) -> String {
        match self {
            Input::Csv { path, .. } => format!("csv:{}", path.display()),
            Input::Stdin { .. } => "stdin".into(),
            Input::Dgp(c) => format!("dgp:n={},p={},q={},seed={},variant={:?}", c.n, c.p, c.q, c.seed, c.variant),
        }
    }

    fn open(&self) -> Result<Box<dyn Iterator<Item = Result<Unit>>>> {
        Ok(match self {
            Input::Csv { path, schema } => Box::new(crate::io::stream_csv(path, schema)?),
            Input::Stdin { schema } => {
                let stdin: Box<dyn Read> = Box::new(std::io::stdin().lock());
                Box::new(CsvStream::from_reader(stdin, schema)?)
            }
            Input::Dgp(c) => Box::new(DgpStream::with_len(c, c.n)?.map(|o| Ok(Unit::Single(o)))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub estimator: EstimatorConfig,
    pub n0: usize,
    pub epochs: u32,
    /// Shuffles the stream within every epoch when set.
    pub shuffle_seed: Option<u64>,
    pub input: Input,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n0 == 0 {
            return Err(Error::Config("n0 must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.epochs > 1 && !self.input.is_rereadable() {
            return Err(Error::Config("several epochs need a re-readable input (a file or a simulated design)".into()));
        }
        if self.estimator.inference.dwh.is_some() {
            if let Input::Csv { schema, .. } | Input::Stdin { schema } = &self.input {
                if schema.cluster_col.is_some() {
                    return Err(Error::Config("the DWH test takes single observations, not clusters".into()));
                }
            }
        }
        Ok(())
    }

    /// Configuration echo for reports.
    pub fn echo(&self) -> Vec<(String, String)> {
        let e = &self.estimator;
        let inf = &e.inference;
        let mut inference = Vec::new();
        if inf.plug_in {
            inference.push("plug_in".to_string());
        }
        if inf.random_scaling {
            inference.push("random_scaling".to_string());
        }
        if let Some(idx) = &inf.dwh {
            let idx: Vec<_> = idx.iter().map(|k| (k + 1).to_string()).collect();
            inference.push(format!("dwh({})", idx.join(" ")));
        }
        if inf.jtest {
            inference.push("jtest".to_string());
        }
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("estimator", e.kind.to_string()),
            kv("n0", self.n0.to_string()),
            kv(
                "n1",
                match e.n1 {
                    N1::Auto => "auto".into(),
                    N1::Fixed(v) => v.to_string(),
                },
            ),
            kv("eta0", e.eta0.to_string()),
            kv("alpha_quantile", e.alpha_quantile.to_string()),
            kv("a", e.decay.to_string()),
            kv(
                "gamma0",
                match e.gamma0 {
                    Gamma0::RuleOfThumb => "rule_of_thumb".into(),
                    Gamma0::Fixed(g) => g.to_string(),
                },
            ),
            kv("epochs", self.epochs.to_string()),
            kv("shuffle_seed", self.shuffle_seed.map_or("none".into(), |s| s.to_string())),
            kv("input", self.input.describe()),
            kv("inference", inference.join(" ")),
        ]
    }
}

fn init_sample(units: &[Unit]) -> Vec<Observation> {
    units.iter().flat_map(|u| u.observations().iter().cloned()).collect()
}

/// Runs `cfg`; one report per epoch.
pub fn run(cfg: &RunConfig) -> Result<Vec<EstimateReport>> {
    cfg.validate()?;
    if cfg.epochs == 1 && cfg.shuffle_seed.is_none() {
        return single_pass(cfg).map(|r| vec![r]);
    }
    let mut units = cfg.input.open()?;
    let init: Vec<Unit> = units.by_ref().take(cfg.n0).collect::<Result<_>>()?;
    let rest: Vec<Unit> = units.collect::<Result<_>>()?;
    multi_epoch(cfg, &init_sample(&init), &rest)
}

fn single_pass(cfg: &RunConfig) -> Result<EstimateReport> {
    let mut units = cfg.input.open()?;
    let init: Vec<Unit> = units.by_ref().take(cfg.n0).collect::<Result<_>>()?;
    if init.len() < cfg.n0 {
        return Err(Error::InvalidInput(format!("input has only {} units, n0 = {}", init.len(), cfg.n0)));
    }
    let init = init_sample(&init);
    let stream_len = stream_len(cfg)?;
    let mut est = OnlineEstimator::new(&cfg.estimator, &init, stream_len)?;
    let dims = est.dims();
    let mut batch: Vec<MomentData> = Vec::with_capacity(BATCH);
    let mut single = MomentData::zeros(dims);
    loop {
        batch.clear();
        for unit in units.by_ref().take(BATCH) {
            match unit? {
                Unit::Single(o) => {
                    single.assign(&o)?;
                    batch.push(single.clone());
                }
                u => batch.push(u.moment_data(dims)?),
            }
        }
        if batch.is_empty() {
            break;
        }
        est.step_batch(&batch)?;
    }
    Ok(EstimateReport { config: cfg.echo(), epoch: None, estimate: est.finish(None)? })
}

/// Stream length after the initialization sample, when SGMM needs it.
fn stream_len(cfg: &RunConfig) -> Result<Option<u64>> {
    if cfg.estimator.kind != crate::estimator::EstimatorKind::Sgmm || cfg.estimator.n1 != N1::Auto {
        return Ok(None);
    }
    match &cfg.input {
        Input::Dgp(c) => Ok(Some(c.n.saturating_sub(cfg.n0 as u64))),
        Input::Csv { .. } => {
            let mut count = 0u64;
            for u in cfg.input.open()? {
                u?;
                count += 1;
            }
            Ok(Some(count.saturating_sub(cfg.n0 as u64)))
        }
        Input::Stdin { .. } => Err(Error::Config("an automatic n1 needs a known stream length; set n1".into())),
    }
}

/// Runs `cfg.epochs` passes over `data`, each in a fresh uniform order when
/// `cfg.shuffle_seed` is set, continuing one estimator throughout. The plug-in
/// variance uses `min(i, n)` as the sample size.
pub fn multi_epoch(cfg: &RunConfig, init: &[Observation], data: &[Unit]) -> Result<Vec<EstimateReport>> {
    if cfg.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidInput("no observations after the initialization sample".into()));
    }
    let first = init.first().ok_or_else(|| Error::InvalidInput("initialization sample is empty".into()))?;
    let dims = Dims::new(first.x.len(), first.z.len())?;
    let md: Vec<MomentData> = data.iter().map(|u| u.moment_data(dims)).collect::<Result<_>>()?;
    let n = md.len() as u64;
    let mut est = OnlineEstimator::new(&cfg.estimator, init, Some(n))?;
    let mut order: Vec<usize> = (0..md.len()).collect();
    let mut reports = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 1..=cfg.epochs {
        if let Some(seed) = cfg.shuffle_seed {
            order.sort_unstable();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64)));
        }
        est.step_batch(order.iter().map(|&i| &md[i]))?;
        let n_eff = est.steps().min(n);
        reports.push(EstimateReport { config: cfg.echo(), epoch: Some(epoch), estimate: est.finish(Some(n_eff))? });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate, write_csv};
    use crate::estimator::{estimate, EstimatorKind, Inference};
    use crate::moments::moment_data;
    use crate::report::write_reports;

    fn dgp(n: u64) -> DgpConfig {
        DgpConfig { seed: 21, ..DgpConfig::with_dims(n, 2, 4) }
    }

    fn cfg(input: Input) -> RunConfig {
        RunConfig {
            estimator: EstimatorConfig {
                kind: EstimatorKind::Sgmm,
                inference: Inference { plug_in: true, random_scaling: true, dwh: None, jtest: true },
                ..EstimatorConfig::default()
            },
            n0: 200,
            epochs: 1,
            shuffle_seed: None,
            input,
        }
    }

    fn schema() -> Schema {
        Schema::new("y", vec!["x1".into(), "x2".into()], (1..=4).map(|j| format!("z{j}")).collect())
    }

    #[test]
    fn csv_and_simulated_inputs_agree() {
        let d = dgp(2200);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(std::fs::File::create(&path).unwrap(), &mut generate(&d).unwrap()).unwrap();
        let a = run(&cfg(Input::Dgp(d))).unwrap();
        let b = run(&cfg(Input::Csv { path, schema: schema() })).unwrap();
        assert_eq!(a[0].estimate.beta_bar, b[0].estimate.beta_bar);
        assert_eq!(a[0].estimate.n1, b[0].estimate.n1);
    }

    #[test]
    fn single_epoch_equals_a_run_on_the_shuffled_stream() {
        let d = dgp(1200);
        let obs: Vec<_> = generate(&d).unwrap().collect();
        let units: Vec<_> = obs[200..].iter().cloned().map(Unit::Single).collect();
        let mut c = cfg(Input::Dgp(d.clone()));
        c.shuffle_seed = Some(5);
        let reports = multi_epoch(&c, &obs[..200], &units).unwrap();
        let mut order: Vec<usize> = (0..1000).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(5, 1)));
        let md: Vec<_> = order.iter().map(|&i| moment_data(&obs[200 + i], d.dims()).unwrap()).collect();
        let direct = estimate(&c.estimator, &obs[..200], &md).unwrap();
        assert_eq!(reports[0].estimate.beta_bar, direct.beta_bar);
        assert_eq!(run(&c).unwrap()[0].estimate.beta_bar, direct.beta_bar);
    }

    #[test]
    fn epochs_continue_the_state() {
        let mut c = cfg(Input::Dgp(dgp(1200)));
        c.epochs = 3;
        c.shuffle_seed = Some(9);
        let reports = run(&c).unwrap();
        assert_eq!(reports.len(), 3);
        let steps: Vec<_> = reports.iter().map(|r| r.estimate.steps).collect();
        assert_eq!(steps, vec![1000, 2000, 3000]);
        assert!(reports.iter().all(|r| r.estimate.n_eff == 1000));
        assert_ne!(reports[0].estimate.beta_bar, reports[1].estimate.beta_bar);
    }

    #[test]
    fn reports_are_reproducible() {
        let mut c = cfg(Input::Dgp(dgp(1200)));
        c.epochs = 2;
        c.shuffle_seed = Some(3);
        let bytes = |c: &RunConfig| {
            let mut out = Vec::new();
            write_reports(&mut out, &run(c).unwrap(), false).unwrap();
            out
        };
        assert_eq!(bytes(&c), bytes(&c));
    }

    #[test]
    fn configuration_errors() {
        let mut c = cfg(Input::Stdin { schema: schema() });
        c.epochs = 2;
        assert!(matches!(run(&c), Err(Error::Config(_))));
        let mut c = cfg(Input::Dgp(dgp(1200)));
        c.epochs = 0;
        assert!(matches!(run(&c), Err(Error::Config(_))));
        let c = RunConfig { n0: 5000, ..cfg(Input::Dgp(dgp(1200))) };
        assert!(run(&c).is_err());
    }
}
