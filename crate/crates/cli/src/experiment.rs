use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Result};
use clap::Args as ClapArgs;
use sgmm_core::estimator::Gamma0;
use sgmm_core::experiment::{run_experiment, Cell, Methods};
use sgmm_core::rng::derive_seed;
use sgmm_core::sgmm::N1;

use crate::config::{List, Settings};
use crate::dgp_args::DgpArgs;

/// Above this stream length the offline baselines trigger a warning.
const OFFLINE_WARN_N: u64 = 10_000_000;

/// `PxQ`, e.g. `5x20`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(usize, usize);

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (p, q) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected PxQ, got '{s}'"))?;
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("expected PxQ, got '{s}'"));
        Ok(Shape(num(p)?, num(q)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MethodItem {
    Offline,
    S2sls,
    Sgmm,
    Dwh,
    JTest,
}

impl FromStr for MethodItem {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "offline" => Ok(MethodItem::Offline),
            "s2sls" => Ok(MethodItem::S2sls),
            "sgmm" => Ok(MethodItem::Sgmm),
            "dwh" => Ok(MethodItem::Dwh),
            "j" | "jtest" => Ok(MethodItem::JTest),
            _ => Err(format!("unknown method '{s}' (offline, s2sls, sgmm, dwh, jtest)")),
        }
    }
}

#[derive(Debug, ClapArgs)]
pub struct Args {
    /// key = value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stream lengths after the initialization sample, comma-separated.
    #[arg(long)]
    n: Option<List<u64>>,
    /// Designs as PxQ, comma-separated; overrides --p/--q.
    #[arg(long)]
    dims: Option<List<Shape>>,
    /// Replications per cell.
    #[arg(long)]
    reps: Option<usize>,
    /// Subset of offline, s2sls, sgmm, dwh (with s2sls), jtest (with sgmm).
    #[arg(long)]
    methods: Option<List<MethodItem>>,
    #[command(flatten)]
    dgp: DgpArgs,
    #[arg(long)]
    n0: Option<usize>,
    #[arg(long)]
    n1: Option<N1>,
    #[arg(long)]
    eta0: Option<f64>,
    #[arg(long)]
    alpha_quantile: Option<f64>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    gamma0: Option<Gamma0>,
    /// Worker threads; all cores by default.
    #[arg(long)]
    threads: Option<usize>,
    /// Write the summary CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the summary CSV instead of the tables.
    #[arg(long)]
    csv: bool,
    /// Include mean timings in the CSV.
    #[arg(long)]
    times: bool,
}

pub struct Plan {
    pub grid: Vec<Cell>,
    pub reps: usize,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub csv: bool,
    pub times: bool,
}

pub fn resolve(a: &Args) -> Result<Plan> {
    let s = Settings::load(a.config.as_deref())?;
    let ns = s.pick_or(a.n.clone(), "n", List(vec![10_000]))?.0;
    let shapes = match s.pick(a.dims.clone(), "dims")? {
        Some(List(v)) => {
            if a.dgp.p.is_some() || a.dgp.q.is_some() {
                bail!("--dims and --p/--q are mutually exclusive");
            }
            v
        }
        None => vec![Shape(s.pick_or(a.dgp.p, "p", 5)?, s.pick_or(a.dgp.q, "q", 20)?)],
    };
    let items = s
        .pick(a.methods.clone(), "methods")?
        .map_or(vec![MethodItem::Offline, MethodItem::S2sls, MethodItem::Sgmm], |List(v)| v);
    let has = |m| items.contains(&m);
    let methods =
        Methods { offline: has(MethodItem::Offline), s2sls: has(MethodItem::S2sls), sgmm: has(MethodItem::Sgmm), dwh: has(MethodItem::Dwh), jtest: has(MethodItem::JTest) };
    if methods.dwh && !methods.s2sls {
        bail!("the dwh method runs alongside s2sls; add s2sls");
    }
    if methods.jtest && !methods.sgmm {
        bail!("the jtest method runs alongside sgmm; add sgmm");
    }
    let reps = s.pick_or(a.reps, "reps", 100)?;
    let n0 = s.pick(a.n0, "n0")?;
    let n1 = s.pick(a.n1, "n1")?;
    let eta0 = s.pick(a.eta0, "eta0")?;
    let alpha = s.pick(a.alpha_quantile, "alpha_quantile")?;
    let decay = s.pick(a.a, "a")?;
    let gamma0 = s.pick(a.gamma0, "gamma0")?;
    let threads = s.pick(a.threads, "threads")?;
    let out = s.pick(a.out.clone(), "out")?;
    let csv = s.switch(a.csv, "csv")?;
    let times = s.switch(a.times, "times")?;

    let mut grid = Vec::new();
    for &Shape(p, q) in &shapes {
        for &n in &ns {
            let base = sgmm_core::dgp::DgpConfig::with_dims(n, p, q);
            let mut dgp = a.dgp.finish(&s, base)?;
            dgp.seed = derive_seed(dgp.seed, grid.len() as u64);
            let mut cell = Cell::new(format!("n={n} p={p} q={q}"), dgp);
            cell.methods = methods.clone();
            cell.n0 = n0.unwrap_or(cell.n0);
            cell.n1 = n1.unwrap_or(cell.n1);
            cell.eta0 = eta0.unwrap_or(cell.eta0);
            cell.alpha_quantile = alpha.unwrap_or(cell.alpha_quantile);
            cell.decay = decay.unwrap_or(cell.decay);
            cell.gamma0 = gamma0.unwrap_or(cell.gamma0);
            grid.push(cell);
        }
    }
    s.finish()?;
    Ok(Plan { grid, reps, threads, out, csv, times })
}

pub fn run(a: Args) -> Result<()> {
    let plan = resolve(&a)?;
    if plan.grid.iter().any(|c| c.methods.offline && c.dgp.n > OFFLINE_WARN_N) {
        eprintln!(
            "warning: offline baselines above n = {OFFLINE_WARN_N} are slow and are meant for desk-scale comparisons"
        );
    }
    let report = match plan.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| anyhow!("thread pool: {e}"))?
            .install(|| run_experiment(&plan.grid, plan.reps))?,
        None => run_experiment(&plan.grid, plan.reps)?,
    };
    if let Some(p) = &plan.out {
        report.write_csv(BufWriter::new(File::create(p)?), plan.times)?;
    }
    if plan.csv {
        report.write_csv(std::io::stdout().lock(), plan.times)?;
    } else {
        print!("{}", report.pretty());
    }
    Ok(())
}
