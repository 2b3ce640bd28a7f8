use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gdcert::experiments::runners::Prepared;
use gdcert::experiments::selftest::run_selftest;
use gdcert::experiments::{run_baseline_match, run_compare, run_envelope, run_width_sweep, RunConfig, RunOutput};
use gdcert::Result;

#[derive(Parser)]
#[command(version, about = "Certified step sizes for two-factor gradient descent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Loss against the per-step and uniform envelopes.
    Envelope(Common),
    /// adaptive_rho, backtracking and constant_eta0 side by side.
    Compare(Common),
    /// Conditioning of the initial operator across widths and init scales.
    WidthSweep(Common),
    /// Overparametrized against plain GD per-step rates.
    BaselineMatch(Common),
    /// Print eta_max, its components and the init summary for one problem.
    EtaMax(Common),
    /// Run the quick invariant suites.
    Selftest,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// First seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    iters: Option<u64>,
    /// Envelope widths {500, 1000, 4000} instead of {100, 500, 1000}.
    #[arg(long)]
    paper_scale: bool,
    /// Compute spectra every k iterates.
    #[arg(long, value_name = "K")]
    thin_telemetry: Option<u64>,
    /// Also write per-row wallclock times.
    #[arg(long)]
    wallclock: bool,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.problem.seed = seed;
        }
        if let Some(seeds) = self.seeds {
            cfg.seeds = seeds;
        }
        if let Some(iters) = self.iters {
            cfg.iters = iters;
        }
        if let Some(k) = self.thin_telemetry {
            cfg.thin_telemetry = k;
        }
        cfg.paper_scale |= self.paper_scale;
        cfg.wallclock |= self.wallclock;
        cfg.validate()?;
        Ok(cfg)
    }

    fn threads(&self) {
        #[cfg(feature = "parallel")]
        if let Some(n) = self.threads {
            // Only fails if the pool was already built.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn write(out: &RunOutput, common: &Common, name: &str) -> Result<()> {
    let dir = common.out.join(name);
    out.write_to(&dir)?;
    for table in &out.tables {
        println!("{}", dir.join(&table.name).display());
    }
    println!("{}", dir.join("meta.json").display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let runner: fn(&RunConfig) -> Result<RunOutput>;
    let (common, name) = match &cli.command {
        Command::Selftest => {
            let checks = run_selftest()?;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
        Command::EtaMax(common) => {
            let cfg = common.config()?;
            let prep = Prepared::new(&cfg.problem, cfg.c, cfg.d)?;
            let report = json!({
                "eta_max": prep.eta.eta_max,
                "eta0_1": prep.eta.eta0_1,
                "eta0_2": prep.eta.eta0_2,
                "log_bound": prep.eta.log_bound,
                "l0": prep.l0,
                "init": prep.summary.record(),
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
            return Ok(true);
        }
        Command::Envelope(c) => {
            runner = run_envelope;
            (c, "envelope")
        }
        Command::Compare(c) => {
            runner = run_compare;
            (c, "compare")
        }
        Command::WidthSweep(c) => {
            runner = run_width_sweep;
            (c, "width_sweep")
        }
        Command::BaselineMatch(c) => {
            runner = run_baseline_match;
            (c, "baseline_match")
        }
    };
    common.threads();
    let cfg = common.config()?;
    write(&runner(&cfg)?, common, name)?;
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
