//! Sweep and comparison runner with CSV output.
//!
//! Result rows (`<name>.csv`) carry
//! `name,var,value,solver,rep,seed,status,power,feasible,rate_margin,hcrlb_trace,evaluations`
//! and are byte-identical across reruns. Wall times go to `<name>.timing.csv`.
//! CDRL runs also write `<name>_p<point>_r<rep>.curve.csv`, the greedy
//! episode trace `.trace.csv` and the agent checkpoint `.ckpt`.

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{random_search_minimize, zf_fpa, SearchConfig};
use crate::cdrl::{train, write_curve_csv, TrainConfig};
use crate::env::{CisacEnv, EpisodeTrace};
use crate::error::{CisacError, Result};
use crate::problem::Problem;
use crate::scenario::{build_scenario, ScenarioConfig, Stream};

/// Environment variable naming the output directory.
pub const OUT_DIR_VAR: &str = "CISAC_OUT_DIR";

/// Output directory from [`OUT_DIR_VAR`], defaulting to `out`.
pub fn out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_VAR).map_or_else(|| PathBuf::from("out"), PathBuf::from)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    /// Cross-entropy search over beams, layout and selection.
    Random,
    /// Same search with antennas held on the fixed grid.
    RandomFpa,
    /// Zero-forcing beams on the fixed grid.
    ZfFpa,
    Cdrl,
}

impl Solver {
    pub const ALL: [Solver; 4] = [Solver::Random, Solver::RandomFpa, Solver::ZfFpa, Solver::Cdrl];

    pub fn name(self) -> &'static str {
        match self {
            Solver::Random => "random",
            Solver::RandomFpa => "random-fpa",
            Solver::ZfFpa => "zf-fpa",
            Solver::Cdrl => "cdrl",
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Solver {
    type Err = CisacError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" | "random-search" => Ok(Solver::Random),
            "random-fpa" => Ok(Solver::RandomFpa),
            "zf-fpa" | "zf" => Ok(Solver::ZfFpa),
            "cdrl" => Ok(Solver::Cdrl),
            other => Err(CisacError::Usage(format!("unknown solver `{other}` (expected random, random-fpa, zf-fpa or cdrl)"))),
        }
    }
}

/// Swept quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepVar {
    /// Transmit antennas per BS.
    #[serde(rename = "N", alias = "n")]
    N,
    /// CSI gain error bound.
    #[serde(rename = "eps_bar")]
    EpsBar,
    /// Synchronization error std in seconds.
    #[serde(rename = "sigma_xi")]
    SigmaXi,
    #[serde(rename = "gamma_u")]
    GammaU,
    #[serde(rename = "gamma_b")]
    GammaB,
    #[serde(rename = "solver")]
    Solver,
}

impl SweepVar {
    pub fn name(self) -> &'static str {
        match self {
            SweepVar::N => "N",
            SweepVar::EpsBar => "eps_bar",
            SweepVar::SigmaXi => "sigma_xi",
            SweepVar::GammaU => "gamma_u",
            SweepVar::GammaB => "gamma_b",
            SweepVar::Solver => "solver",
        }
    }
}

impl FromStr for SweepVar {
    type Err = CisacError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" | "n" => Ok(SweepVar::N),
            "eps_bar" => Ok(SweepVar::EpsBar),
            "sigma_xi" => Ok(SweepVar::SigmaXi),
            "gamma_u" => Ok(SweepVar::GammaU),
            "gamma_b" => Ok(SweepVar::GammaB),
            "solver" => Ok(SweepVar::Solver),
            other => Err(CisacError::Usage(format!("unknown sweep variable `{other}`"))),
        }
    }
}

/// One sweep value: a number, or a solver name when sweeping solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Num(f64),
    Name(String),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Num(v) => write!(f, "{v}"),
            SweepValue::Name(s) => f.write_str(s),
        }
    }
}

impl SweepValue {
    /// Numbers parse as numbers, anything else is kept as a name.
    pub fn parse(text: &str) -> Self {
        text.trim().parse::<f64>().map_or_else(|_| SweepValue::Name(text.trim().to_string()), SweepValue::Num)
    }

    fn number(&self, var: SweepVar) -> Result<f64> {
        match self {
            SweepValue::Num(v) => Ok(*v),
            SweepValue::Name(s) => Err(CisacError::Usage(format!("`{s}` is not a number for {}", var.name()))),
        }
    }
}

/// Experiment description, readable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    /// Starting configuration when `scenario_file` is absent.
    pub preset: String,
    /// Full scenario TOML replacing the preset.
    pub scenario_file: Option<PathBuf>,
    /// Partial scenario table merged over the base configuration.
    pub scenario: toml::Table,
    pub var: SweepVar,
    pub values: Vec<SweepValue>,
    /// Solver for every point unless `var` is `solver`.
    pub solver: Solver,
    /// Solvers compared at every point by [`compare_solvers`].
    pub solvers: Vec<Solver>,
    pub repetitions: usize,
    /// Repetition `r` runs with seed `seed + r`.
    pub seed: u64,
    /// CSV path, relative to the output directory. Defaults to `<name>.csv`.
    pub output: Option<PathBuf>,
    /// Random-search candidate budget.
    pub budget: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "experiment".into(),
            preset: "desk".into(),
            scenario_file: None,
            scenario: toml::Table::new(),
            var: SweepVar::SigmaXi,
            values: vec![SweepValue::Num(100e-9)],
            solver: Solver::Random,
            solvers: Vec::new(),
            repetitions: 1,
            seed: 0,
            output: None,
            budget: SearchConfig::default().budget,
            train: TrainConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(CisacError::Usage("sweep values must be nonempty".into()));
        }
        if self.repetitions == 0 {
            return Err(CisacError::Usage("repetitions must be >= 1".into()));
        }
        if self.budget == 0 {
            return Err(CisacError::Usage("budget must be >= 1".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(CisacError::Usage(format!("bad experiment name `{}`", self.name)));
        }
        for v in &self.values {
            self.point_solver(v)?;
            if self.var != SweepVar::Solver {
                v.number(self.var)?;
            }
        }
        self.train.validate()
    }

    /// Preset or scenario file with the overrides applied.
    pub fn base_config(&self) -> Result<ScenarioConfig> {
        let base = match &self.scenario_file {
            Some(p) => ScenarioConfig::from_path(p)?,
            None => ScenarioConfig::preset(&self.preset)?,
        };
        if self.scenario.is_empty() {
            return Ok(base);
        }
        let mut table: toml::Table = toml::from_str(&base.to_toml_string())?;
        merge(&mut table, &self.scenario);
        Ok(table.try_into()?)
    }

    fn point_solver(&self, value: &SweepValue) -> Result<Solver> {
        match (self.var, value) {
            (SweepVar::Solver, SweepValue::Name(s)) => s.parse(),
            (SweepVar::Solver, v) => Err(CisacError::Usage(format!("`{v}` is not a solver name"))),
            _ => Ok(self.solver),
        }
    }

    /// Configuration for one sweep value and seed.
    pub fn point_config(&self, value: &SweepValue, seed: u64) -> Result<ScenarioConfig> {
        let mut cfg = self.base_config()?;
        cfg.seed = seed;
        match self.var {
            SweepVar::N => {
                let v = value.number(self.var)?;
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(CisacError::Usage(format!("N must be a positive integer, got {v}")));
                }
                let (nx, ny) = ScenarioConfig::split_count(v as usize);
                cfg.array.n_x = nx;
                cfg.array.n_y = ny;
            }
            SweepVar::EpsBar => cfg.errors.gain_err = value.number(self.var)?,
            SweepVar::SigmaXi => cfg.errors.sync_std = value.number(self.var)?,
            SweepVar::GammaU => cfg.targets.rate = value.number(self.var)?,
            SweepVar::GammaB => cfg.targets.sensing = value.number(self.var)?,
            SweepVar::Solver => {}
        }
        Ok(cfg)
    }

    pub fn output_path(&self, dir: &Path) -> PathBuf {
        dir.join(self.output.clone().unwrap_or_else(|| PathBuf::from(format!("{}.csv", self.name))))
    }
}

/// One result row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub name: String,
    pub var: String,
    pub value: String,
    pub solver: String,
    pub rep: usize,
    pub seed: u64,
    /// `ok`, or the error that stopped the run.
    pub status: String,
    pub power: f64,
    pub feasible: bool,
    pub rate_margin: f64,
    pub hcrlb_trace: f64,
    pub evaluations: usize,
}

impl ResultRow {
    pub fn completed(&self) -> bool {
        self.status == "ok"
    }

    /// The row as it appears in the CSV, without header.
    pub fn csv_line(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.serialize(self)?;
        w.into_inner().map_err(|e| CisacError::Io(e.into_error()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct TimingRow {
    name: String,
    value: String,
    solver: String,
    rep: usize,
    seed: u64,
    wall_time_s: f64,
}

/// Where a CDRL run drops its curve, trace and checkpoint.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub curve: PathBuf,
    pub trace: PathBuf,
    pub checkpoint: PathBuf,
}

impl ArtifactPaths {
    pub fn new(dir: &Path, stem: &str) -> Self {
        ArtifactPaths {
            curve: dir.join(format!("{stem}.curve.csv")),
            trace: dir.join(format!("{stem}.trace.csv")),
            checkpoint: dir.join(format!("{stem}.ckpt")),
        }
    }
}

#[derive(Debug, Clone)]
struct Outcome {
    power: f64,
    feasible: bool,
    rate_margin: f64,
    hcrlb_trace: f64,
    evaluations: usize,
}

fn solve(problem: &Problem, solver: Solver, spec: &ExperimentSpec, artifacts: Option<&ArtifactPaths>) -> Result<Outcome> {
    let s = &problem.scenario;
    let (action, evaluations) = match solver {
        Solver::Random | Solver::RandomFpa => {
            let cfg = SearchConfig { budget: spec.budget, fixed_layout: solver == Solver::RandomFpa, ..SearchConfig::default() };
            let r = random_search_minimize(problem, &cfg, &mut s.rng(Stream::Search))?;
            (r.action, r.evaluations)
        }
        Solver::ZfFpa => {
            let r = zf_fpa(problem)?;
            (r.action, r.evaluations)
        }
        Solver::Cdrl => {
            let mut env = CisacEnv::new(problem.clone())?;
            let report = train(&mut env, &spec.train)?;
            if let Some(diag) = &report.diverged {
                return Err(CisacError::Training(diag.clone()));
            }
            let raw = report.greedy_action(&env)?;
            if let Some(paths) = artifacts {
                write_curve_csv(BufWriter::new(File::create(&paths.curve)?), &report.curve)?;
                report.nets.save(&mut BufWriter::new(File::create(&paths.checkpoint)?))?;
                let mut trace = EpisodeTrace::new(BufWriter::new(File::create(&paths.trace)?))?;
                env.reset();
                for n in 0..env.horizon() {
                    trace.record(n, &env.step_raw(&raw)?)?;
                }
                trace.finish()?;
            }
            (env.decode(&raw)?, report.curve.len() * env.horizon())
        }
    };
    let eval = problem.evaluate(&action);
    Ok(Outcome {
        power: eval.power,
        feasible: eval.feasible(),
        rate_margin: eval.rate.min_margin(s.rate_target),
        hcrlb_trace: eval.max_trace(),
        evaluations,
    })
}

fn run_one(spec: &ExperimentSpec, value: &SweepValue, solver: Solver, rep: usize, artifacts: Option<&ArtifactPaths>) -> (ResultRow, f64) {
    let seed = spec.seed.wrapping_add(rep as u64);
    let start = Instant::now();
    let outcome = spec
        .point_config(value, seed)
        .and_then(|cfg| build_scenario(&cfg))
        .and_then(Problem::new)
        .and_then(|p| solve(&p, solver, spec, artifacts));
    let mut row = ResultRow {
        name: spec.name.clone(),
        var: spec.var.name().into(),
        value: value.to_string(),
        solver: solver.name().into(),
        rep,
        seed,
        status: "ok".into(),
        power: f64::NAN,
        feasible: false,
        rate_margin: f64::NAN,
        hcrlb_trace: f64::NAN,
        evaluations: 0,
    };
    match outcome {
        Ok(o) => {
            row.power = o.power;
            row.feasible = o.feasible;
            row.rate_margin = o.rate_margin;
            row.hcrlb_trace = o.hcrlb_trace;
            row.evaluations = o.evaluations;
        }
        Err(e) => row.status = e.to_string(),
    }
    (row, start.elapsed().as_secs_f64())
}

/// Re-run a single row from its value, solver and seed.
pub fn run_point(spec: &ExperimentSpec, value: &SweepValue, solver: Solver, seed: u64) -> Result<ResultRow> {
    let rep = seed.wrapping_sub(spec.seed) as usize;
    let (row, _) = run_one(spec, value, solver, rep, None);
    Ok(row)
}

/// Rows of one experiment and where they were written.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<ResultRow>,
    pub csv: PathBuf,
    pub timing: PathBuf,
}

impl ExperimentReport {
    pub fn all_completed(&self) -> bool {
        self.rows.iter().all(ResultRow::completed)
    }
}

fn run_tasks(spec: &ExperimentSpec, tasks: Vec<(usize, SweepValue, Solver, usize)>, dir: &Path) -> Result<ExperimentReport> {
    std::fs::create_dir_all(dir)?;
    let csv_path = spec.output_path(dir);
    if let Some(parent) = csv_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    // Fail early on an unwritable path, before any solver runs.
    let sink = File::create(&csv_path)?;
    let results: Vec<(ResultRow, f64)> = tasks
        .into_par_iter()
        .map(|(point, value, solver, rep)| {
            let artifacts = (solver == Solver::Cdrl).then(|| ArtifactPaths::new(dir, &format!("{}_p{point}_{}_r{rep}", spec.name, solver.name())));
            run_one(spec, &value, solver, rep, artifacts.as_ref())
        })
        .collect();

    let mut w = csv::Writer::from_writer(BufWriter::new(sink));
    for (row, _) in &results {
        w.serialize(row)?;
    }
    w.flush()?;
    let timing_path = csv_path.with_extension("timing.csv");
    let mut t = csv::Writer::from_writer(BufWriter::new(File::create(&timing_path)?));
    for (row, secs) in &results {
        t.serialize(TimingRow {
            name: row.name.clone(),
            value: row.value.clone(),
            solver: row.solver.clone(),
            rep: row.rep,
            seed: row.seed,
            wall_time_s: *secs,
        })?;
    }
    t.flush()?;
    Ok(ExperimentReport { rows: results.into_iter().map(|(r, _)| r).collect(), csv: csv_path, timing: timing_path })
}

/// Every sweep point times every repetition, in sweep order.
pub fn run_experiment(spec: &ExperimentSpec, dir: &Path) -> Result<ExperimentReport> {
    spec.validate()?;
    let mut tasks = Vec::new();
    for (i, v) in spec.values.iter().enumerate() {
        let solver = spec.point_solver(v)?;
        for rep in 0..spec.repetitions {
            tasks.push((i, v.clone(), solver, rep));
        }
    }
    run_tasks(spec, tasks, dir)
}

/// Per point and solver: mean power, feasible fraction and power relative
/// to the reference solver.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub value: String,
    pub solver: String,
    pub runs: usize,
    pub completed: usize,
    pub mean_power: f64,
    pub feasible_rate: f64,
    pub reference: String,
    pub power_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub report: ExperimentReport,
    pub summary: Vec<SummaryRow>,
    pub summary_csv: PathBuf,
}

/// Run every listed solver at every sweep point. The reference for the
/// ratio column is `random` when present, otherwise the first solver.
pub fn compare_solvers(spec: &ExperimentSpec, dir: &Path) -> Result<Comparison> {
    if spec.solvers.len() < 2 {
        return Err(CisacError::Usage("compare needs at least two solvers".into()));
    }
    if spec.var == SweepVar::Solver {
        return Err(CisacError::Usage("compare sweeps a scenario variable, not the solver".into()));
    }
    spec.validate()?;
    let mut tasks = Vec::new();
    for (i, v) in spec.values.iter().enumerate() {
        for &solver in &spec.solvers {
            for rep in 0..spec.repetitions {
                tasks.push((i, v.clone(), solver, rep));
            }
        }
    }
    let report = run_tasks(spec, tasks, dir)?;
    let reference = if spec.solvers.contains(&Solver::Random) { Solver::Random } else { spec.solvers[0] };
    let mut summary = Vec::new();
    for v in &spec.values {
        let value = v.to_string();
        let stats = |solver: Solver| {
            let rows: Vec<&ResultRow> = report.rows.iter().filter(|r| r.value == value && r.solver == solver.name()).collect();
            let done: Vec<&&ResultRow> = rows.iter().filter(|r| r.completed()).collect();
            let mean = if done.is_empty() { f64::NAN } else { done.iter().map(|r| r.power).sum::<f64>() / done.len() as f64 };
            let feas = if rows.is_empty() { 0.0 } else { rows.iter().filter(|r| r.feasible).count() as f64 / rows.len() as f64 };
            (rows.len(), done.len(), mean, feas)
        };
        let (_, _, ref_power, _) = stats(reference);
        for &solver in &spec.solvers {
            let (runs, completed, mean_power, feasible_rate) = stats(solver);
            summary.push(SummaryRow {
                value: value.clone(),
                solver: solver.name().into(),
                runs,
                completed,
                mean_power,
                feasible_rate,
                reference: reference.name().into(),
                power_ratio: mean_power / ref_power,
            });
        }
    }
    let summary_csv = report.csv.with_extension("summary.csv");
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&summary_csv)?));
    for row in &summary {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(Comparison { report, summary, summary_csv })
}
