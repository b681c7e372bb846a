//! Python bindings. Scenarios are passed as TOML text or preset names.

use std::collections::HashMap;
use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use cisac::baselines::{random_search_minimize, zf_fpa, SearchConfig, SolveResult};
use cisac::cdrl::{train as train_agent, TrainConfig};
use cisac::env::CisacEnv;
use cisac::harness::{run_experiment as run_spec, ExperimentSpec};
use cisac::problem::Problem;
use cisac::scenario::{build_scenario, ScenarioConfig, Stream};
use cisac::sensing::hcrlb_from_ofim;
use cisac::CisacError;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn py_err(e: CisacError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn load_problem(scenario: &str, seed: Option<u64>) -> PyResult<Problem> {
    let mut cfg = if scenario.contains('=') || scenario.contains('[') {
        ScenarioConfig::from_toml_str(scenario)
    } else {
        ScenarioConfig::preset(scenario)
    }
    .map_err(py_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    build_scenario(&cfg).and_then(Problem::new).map_err(py_err)
}

fn summary(problem: &Problem, r: &SolveResult) -> HashMap<String, f64> {
    let eval = problem.evaluate(&r.action);
    HashMap::from([
        ("power".to_string(), r.power),
        ("feasible".to_string(), if r.feasible { 1.0 } else { 0.0 }),
        ("evaluations".to_string(), r.evaluations as f64),
        ("rate_margin".to_string(), eval.rate.min_margin(problem.scenario.rate_target)),
        ("hcrlb_trace".to_string(), eval.max_trace()),
    ])
}

/// TOML text of a named preset (`full`, `desk`, `toy`).
#[pyfunction]
fn preset_toml(name: &str) -> PyResult<String> {
    Ok(ScenarioConfig::preset(name).map_err(py_err)?.to_toml_string())
}

/// Zero-forcing beams on the fixed grid, scaled to the least feasible power.
#[pyfunction]
#[pyo3(signature = (scenario, seed=None))]
fn zero_forcing(scenario: &str, seed: Option<u64>) -> PyResult<HashMap<String, f64>> {
    let p = load_problem(scenario, seed)?;
    let r = zf_fpa(&p).map_err(py_err)?;
    Ok(summary(&p, &r))
}

/// Cross-entropy power minimization with `budget` evaluations.
#[pyfunction]
#[pyo3(signature = (scenario, budget=10_000, fixed_layout=false, seed=None))]
fn random_search(scenario: &str, budget: usize, fixed_layout: bool, seed: Option<u64>) -> PyResult<HashMap<String, f64>> {
    let p = load_problem(scenario, seed)?;
    let cfg = SearchConfig { budget, fixed_layout, ..SearchConfig::default() };
    let r = random_search_minimize(&p, &cfg, &mut p.scenario.rng(Stream::Search)).map_err(py_err)?;
    Ok(summary(&p, &r))
}

/// Position bound from a square OFIM (row lists). Returns `(trace, 2x2 bound)`.
#[pyfunction]
fn hcrlb(ofim: Vec<Vec<f64>>, sigma_xi: f64) -> PyResult<(f64, [[f64; 2]; 2])> {
    let n = ofim.len();
    if n < 2 || ofim.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("OFIM must be square and at least 2x2"));
    }
    let m = DMatrix::from_fn(n, n, |i, j| ofim[i][j]);
    let r = hcrlb_from_ofim(&m, sigma_xi).map_err(py_err)?;
    Ok((r.trace, [[r.hcrlb[(0, 0)], r.hcrlb[(0, 1)]], [r.hcrlb[(1, 0)], r.hcrlb[(1, 1)]]]))
}

/// Train the agent; returns the learning curve as column lists.
#[pyfunction]
#[pyo3(signature = (scenario="toy", episodes=200, seed=None))]
fn train(scenario: &str, episodes: usize, seed: Option<u64>) -> PyResult<HashMap<String, Vec<f64>>> {
    let p = load_problem(scenario, seed)?;
    let mut env = CisacEnv::new(p).map_err(py_err)?;
    let cfg = TrainConfig { episodes, ..TrainConfig::default() };
    let r = train_agent(&mut env, &cfg).map_err(py_err)?;
    let col = |f: fn(&cisac::cdrl::CurvePoint) -> f64| r.curve.iter().map(f).collect::<Vec<f64>>();
    Ok(HashMap::from([
        ("episode".to_string(), col(|c| c.episode as f64)),
        ("cum_reward".to_string(), col(|c| c.cum_reward)),
        ("cum_cost".to_string(), col(|c| c.cum_cost)),
        ("lambda".to_string(), col(|c| c.lambda)),
        ("power".to_string(), col(|c| c.power)),
        ("gamma_c".to_string(), vec![r.gamma_c]),
    ]))
}

/// Run an experiment spec (TOML text) into `out_dir`; returns the CSV path
/// and whether every run completed.
#[pyfunction]
fn run_experiment(spec: &str, out_dir: PathBuf) -> PyResult<(String, bool)> {
    let spec = ExperimentSpec::from_toml_str(spec).map_err(py_err)?;
    let r = run_spec(&spec, &out_dir).map_err(py_err)?;
    Ok((r.csv.display().to_string(), r.all_completed()))
}

#[pymodule]
fn cisac_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(preset_toml, m)?)?;
    m.add_function(wrap_pyfunction!(zero_forcing, m)?)?;
    m.add_function(wrap_pyfunction!(random_search, m)?)?;
    m.add_function(wrap_pyfunction!(hcrlb, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
