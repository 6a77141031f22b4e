use std::path::PathBuf;

use anyhow::Result;
use clap::Args as ClapArgs;
use sgmm_core::inference::critical::{simulate, CriticalValueTable, SimulationConfig, SimulationMethod, StatisticForm};

#[derive(Debug, ClapArgs)]
pub struct Args {
    /// Number of restrictions; omit to build a table for 1..=q-max.
    #[arg(long)]
    q: Option<usize>,
    #[arg(long, default_value_t = 10)]
    q_max: usize,
    /// F or t (single-q mode).
    #[arg(long, default_value = "t")]
    form: StatisticForm,
    #[arg(long, default_value_t = 10_000)]
    grid: usize,
    #[arg(long, default_value_t = 200_000)]
    reps: usize,
    #[arg(long, default_value_t = 20_240_601)]
    seed: u64,
    /// Use the plain empirical percentile instead of conditional Monte Carlo.
    #[arg(long)]
    percentile: bool,
    /// Write the table here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(a: Args) -> Result<()> {
    if let Some(q) = a.q {
        let mut cfg = SimulationConfig::new(q, a.grid, a.reps, a.seed);
        if a.percentile {
            cfg.method = SimulationMethod::Percentile;
        }
        let v = simulate(&cfg)?.get(a.form);
        println!("{q} {} 0.95 {v:.6}", a.form);
        return Ok(());
    }
    let table = CriticalValueTable::generate(a.q_max, a.grid, a.reps, a.seed)?;
    match a.out {
        Some(p) => std::fs::write(p, table.to_text())?,
        None => print!("{}", table.to_text()),
    }
    Ok(())
}
