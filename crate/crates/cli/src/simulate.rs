use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::Result;
use clap::Args as ClapArgs;
use sgmm_core::dgp::{generate, write_csv};

use crate::config::Settings;
use crate::dgp_args::DgpArgs;

#[derive(Debug, ClapArgs)]
pub struct Args {
    /// key = value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Records to write.
    #[arg(long)]
    n: Option<u64>,
    #[command(flatten)]
    dgp: DgpArgs,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(a: Args) -> Result<()> {
    let s = Settings::load(a.config.as_deref())?;
    let n = s.pick_or(a.n, "n", 10_000)?;
    let cfg = a.dgp.resolve(&s, n, (5, 20))?;
    let out = s.pick(a.out, "out")?;
    s.finish()?;
    let mut stream = generate(&cfg)?;
    match out {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            write_csv(&mut w, &mut stream)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            write_csv(&mut w, &mut stream)?;
            w.flush()?;
        }
    }
    Ok(())
}
