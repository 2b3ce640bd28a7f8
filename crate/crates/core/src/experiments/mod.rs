//! Experiment runners, their configuration and CSV output.

pub mod problem;
pub mod runners;
pub mod selftest;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::InitSummaryRecord;
use crate::scheduler::{EtaMax, Policy, SchedulerConfig};
use crate::trainer::LineSearch;

pub use problem::{gen_problem, DataScheme, InitScheme, Problem, ProblemSpec};
pub use runners::{
    baseline_gap_by_width, late_window_rate, run_baseline_match, run_compare, run_envelope, run_width_sweep,
};

pub const DESK_ENVELOPE_WIDTHS: [usize; 3] = [100, 500, 1000];
pub const PAPER_ENVELOPE_WIDTHS: [usize; 3] = [500, 1000, 4000];
pub const WIDTH_SWEEP_WIDTHS: [usize; 4] = [128, 256, 512, 1024];
pub const WIDTH_SWEEP_EXPONENTS: [f64; 3] = [0.275, 0.375, 0.475];
pub const BASELINE_WIDTHS: [usize; 3] = [64, 256, 1024];
pub const DEFAULT_SIGMAS: [f64; 3] = [0.1, 1.0, 3.0];

/// Everything a runner reads. Fields a runner does not use are ignored;
/// `h_list = None` selects the runner's default widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub c: f64,
    pub d: f64,
    /// `η0 = eta0_fraction·η_max`.
    pub eta0_fraction: f64,
    pub seeds: u64,
    pub iters: u64,
    pub sigmas: Vec<f64>,
    pub h_list: Option<Vec<usize>>,
    pub p_list: Vec<f64>,
    pub policies: Vec<Policy>,
    pub line_search: LineSearch,
    pub thin_telemetry: u64,
    pub wallclock: bool,
    pub paper_scale: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemSpec::default(),
            c: 0.5,
            d: 1.01,
            eta0_fraction: 0.5,
            seeds: 30,
            iters: 300,
            sigmas: DEFAULT_SIGMAS.to_vec(),
            h_list: None,
            p_list: WIDTH_SWEEP_EXPONENTS.to_vec(),
            policies: vec![Policy::AdaptiveRho],
            line_search: LineSearch::default(),
            thin_telemetry: 1,
            wallclock: false,
            paper_scale: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        self.line_search.validate()?;
        if !(self.eta0_fraction > 0.0 && self.eta0_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("eta0_fraction = {} must lie in (0, 1]", self.eta0_fraction)));
        }
        if self.seeds == 0 || self.thin_telemetry == 0 {
            return Err(Error::InvalidConfig("seeds and thin_telemetry must be positive".into()));
        }
        if !(self.c > 0.0 && self.c < 1.0 && self.d > 1.0) {
            return Err(Error::InvalidConfig(format!("need 0 < c < 1 and d > 1, got c = {}, d = {}", self.c, self.d)));
        }
        Ok(())
    }

    /// Seeds `problem.seed .. problem.seed + seeds`.
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds).map(|i| self.problem.seed.wrapping_add(i)).collect()
    }
}

/// Per-run metadata written to `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub label: String,
    pub seed: u64,
    pub h: usize,
    #[serde(flatten)]
    pub init: InitSummaryRecord,
    pub l0: f64,
    #[serde(flatten)]
    pub eta: Option<EtaMax>,
    pub eta0: Option<f64>,
    pub c: f64,
    pub d: f64,
    pub policy: Option<Policy>,
}

impl RunMeta {
    pub fn new(
        label: String,
        spec: &ProblemSpec,
        init: InitSummaryRecord,
        l0: f64,
        eta: Option<EtaMax>,
        cfg: Option<&SchedulerConfig>,
        (c, d): (f64, f64),
    ) -> Self {
        Self {
            label,
            seed: spec.seed,
            h: spec.h,
            init,
            l0,
            eta,
            eta0: cfg.map(|s| s.eta0),
            c,
            d,
            policy: cfg.map(|s| s.policy),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub name: String,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub tables: Vec<CsvTable>,
    pub meta: Vec<RunMeta>,
}

impl RunOutput {
    pub fn table(&self, name: &str) -> Option<&CsvTable> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Writes every table plus `meta.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for table in &self.tables {
            fs::write(dir.join(&table.name), &table.body)?;
        }
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&self.meta)?)?;
        Ok(())
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Rayon pool; same as `Sequential` without the `parallel` feature.
    #[default]
    Parallel,
}

/// Order-preserving map over independent jobs.
pub fn fan_out_with<T, R, F>(exec: Execution, jobs: Vec<T>, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            jobs.into_par_iter().map(f).collect()
        }
        _ => jobs.into_iter().map(f).collect(),
    }
}

pub fn fan_out<T, R, F>(jobs: Vec<T>, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync + Send,
{
    fan_out_with(Execution::default(), jobs, f)
}
