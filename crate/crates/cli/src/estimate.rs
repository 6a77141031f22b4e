use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::Args as ClapArgs;
use sgmm_core::estimator::{EstimatorConfig, EstimatorKind, Gamma0, Inference};
use sgmm_core::inference::OlsMode;
use sgmm_core::io::Schema;
use sgmm_core::report::write_reports;
use sgmm_core::run::{run as run_config, Input, RunConfig};
use sgmm_core::s2sls::Beta0;
use sgmm_core::sgmm::N1;

use crate::config::{List, Settings};
use crate::dgp_args::DgpArgs;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Item {
    PlugIn,
    RandomScaling,
    JTest,
}

impl FromStr for Item {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "pi" | "plug-in" => Ok(Item::PlugIn),
            "rs" | "random-scaling" => Ok(Item::RandomScaling),
            "j" | "jtest" => Ok(Item::JTest),
            _ => Err(format!("unknown inference '{s}' (plug-in, random-scaling, jtest)")),
        }
    }
}

#[derive(Debug, ClapArgs)]
pub struct Args {
    /// key = value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,

    /// CSV file, or `-` for standard input.
    #[arg(long)]
    data: Option<String>,
    /// Outcome column.
    #[arg(long)]
    y: Option<String>,
    /// Regressor columns, comma-separated.
    #[arg(long)]
    x: Option<List<String>>,
    /// Instrument columns, comma-separated.
    #[arg(long)]
    z: Option<List<String>>,
    /// Column whose consecutive equal values form one mini-batch.
    #[arg(long)]
    cluster: Option<String>,

    /// Estimate on the simulated design instead of a file.
    #[arg(long)]
    simulate: bool,
    /// Simulated records, initialization sample included.
    #[arg(long)]
    n: Option<u64>,
    #[command(flatten)]
    dgp: DgpArgs,

    /// s2sls or sgmm.
    #[arg(long)]
    estimator: Option<EstimatorKind>,
    /// Initialization sample size.
    #[arg(long)]
    n0: Option<usize>,
    /// Warm-up length for sgmm: `auto` or a count.
    #[arg(long)]
    n1: Option<N1>,
    /// Ridge added to the initialization Gram matrices.
    #[arg(long)]
    eta0: Option<f64>,
    /// Quantile used by the rule-of-thumb step size.
    #[arg(long)]
    alpha_quantile: Option<f64>,
    /// Step-size decay exponent.
    #[arg(long)]
    a: Option<f64>,
    /// `rule-of-thumb` or a fixed initial step size.
    #[arg(long)]
    gamma0: Option<Gamma0>,
    /// Starting point: `2sls`, `zero` or a list of values.
    #[arg(long, allow_hyphen_values = true)]
    beta0: Option<Beta0>,
    #[arg(long)]
    epochs: Option<u32>,
    /// Reshuffle the data in every epoch with this seed.
    #[arg(long)]
    shuffle_seed: Option<u64>,

    /// Comma-separated subset of plug-in, random-scaling, jtest. Defaults to
    /// random-scaling, plus plug-in for sgmm.
    #[arg(long)]
    inference: Option<List<Item>>,
    /// Endogeneity test on these 1-based coefficients.
    #[arg(long)]
    dwh: Option<List<usize>>,
    /// OLS path of the endogeneity test: preconditioned or plain.
    #[arg(long)]
    ols_mode: Option<OlsMode>,
    /// Null values for the Wald tests; zero by default.
    #[arg(long, allow_hyphen_values = true)]
    hypothesis: Option<List<f64>>,

    /// Write the report CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the report CSV instead of the table.
    #[arg(long)]
    csv: bool,
    /// Include wall-clock timings in the CSV.
    #[arg(long)]
    times: bool,
}

fn input(a: &Args, s: &Settings) -> Result<Input> {
    let simulate = s.switch(a.simulate, "simulate")?;
    let data = s.pick(a.data.clone(), "data")?;
    let y = s.pick_or(a.y.clone(), "y", "y".to_string())?;
    let x = s.pick(a.x.clone(), "x")?;
    let z = s.pick(a.z.clone(), "z")?;
    let cluster = s.pick(a.cluster.clone(), "cluster")?;
    let n = s.pick(a.n, "n")?;
    match (simulate, data) {
        (true, Some(_)) => bail!("--simulate and --data are mutually exclusive"),
        (true, None) => Ok(Input::Dgp(a.dgp.resolve(s, n.unwrap_or(11_000), (5, 20))?)),
        (false, None) => bail!("no input: pass --data FILE (or -) or --simulate"),
        (false, Some(path)) => {
            let (Some(List(x)), Some(List(z))) = (x, z) else {
                bail!("--x and --z name the regressor and instrument columns and are required with --data");
            };
            let mut schema = Schema::new(y, x, z);
            if let Some(c) = cluster {
                schema = schema.with_cluster(c);
            }
            if path == "-" {
                return Ok(Input::Stdin { schema });
            }
            std::fs::metadata(&path).with_context(|| format!("cannot open data file {path}"))?;
            Ok(Input::Csv { path: path.into(), schema })
        }
    }
}

pub fn resolve(a: &Args) -> Result<(RunConfig, Option<PathBuf>, bool, bool)> {
    let s = Settings::load(a.config.as_deref())?;
    let input = input(a, &s)?;
    let d = EstimatorConfig::default();
    let kind = s.pick_or(a.estimator, "estimator", EstimatorKind::Sgmm)?;
    let items = match s.pick(a.inference.clone(), "inference")? {
        Some(List(v)) => v,
        None if kind == EstimatorKind::Sgmm => vec![Item::PlugIn, Item::RandomScaling],
        None => vec![Item::RandomScaling],
    };
    let dwh = match s.pick(a.dwh.clone(), "dwh")? {
        Some(List(idx)) => {
            if idx.contains(&0) {
                bail!("--dwh takes 1-based coefficient indices");
            }
            Some(idx.into_iter().map(|k| k - 1).collect())
        }
        None => None,
    };
    let estimator = EstimatorConfig {
        kind,
        n1: s.pick_or(a.n1, "n1", d.n1)?,
        eta0: s.pick_or(a.eta0, "eta0", d.eta0)?,
        alpha_quantile: s.pick_or(a.alpha_quantile, "alpha_quantile", d.alpha_quantile)?,
        decay: s.pick_or(a.a, "a", d.decay)?,
        gamma0: s.pick_or(a.gamma0, "gamma0", d.gamma0)?,
        beta0: s.pick_or(a.beta0.clone(), "beta0", d.beta0)?,
        inference: Inference {
            plug_in: items.contains(&Item::PlugIn),
            random_scaling: items.contains(&Item::RandomScaling),
            dwh,
            jtest: items.contains(&Item::JTest),
        },
        ols_mode: s.pick_or(a.ols_mode, "ols_mode", d.ols_mode)?,
        hypothesis: s.pick(a.hypothesis.clone(), "hypothesis")?.map(|List(v)| v),
    };
    let cfg = RunConfig {
        estimator,
        n0: s.pick_or(a.n0, "n0", 1000)?,
        epochs: s.pick_or(a.epochs, "epochs", 1)?,
        shuffle_seed: s.pick(a.shuffle_seed, "shuffle_seed")?,
        input,
    };
    let out = s.pick(a.out.clone(), "out")?;
    let csv = s.switch(a.csv, "csv")?;
    let times = s.switch(a.times, "times")?;
    s.finish()?;
    cfg.validate()?;
    Ok((cfg, out, csv, times))
}

pub fn run(a: Args) -> Result<()> {
    let (cfg, out, csv, times) = resolve(&a)?;
    let reports = run_config(&cfg)?;
    if let Some(p) = out {
        write_reports(BufWriter::new(File::create(p)?), &reports, times)?;
    }
    if csv {
        write_reports(std::io::stdout().lock(), &reports, times)?;
    } else {
        for r in &reports {
            print!("{}", r.pretty());
        }
    }
    Ok(())
}
