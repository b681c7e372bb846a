use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cisac::baselines::fpa_layout;
use cisac::cdrl::{train, write_curve_csv, TrainConfig};
use cisac::env::{CisacEnv, EpisodeTrace};
use cisac::harness::{compare_solvers, out_dir, run_experiment, ExperimentReport, ExperimentSpec, Solver, SweepValue, SweepVar};
use cisac::problem::Problem;
use cisac::scenario::{build_scenario, ScenarioConfig};
use cisac::sensing::write_fim_csv;
use cisac::{baselines, CisacError, Result};

// glibc malloc fragments badly under the training loop's churn of
// mid-sized matrices.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Movable-antenna cooperative ISAC simulator.
///
/// Results go to the directory named by CISAC_OUT_DIR (default `out`).
#[derive(Debug, Parser)]
#[command(name = "cisac", version)]
struct Cli {
    /// Scenario TOML used instead of the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment spec file.
    Run { spec: PathBuf },
    /// Sweep one variable with one solver.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "random")]
        solver: String,
    },
    /// Run several solvers at each sweep point.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        solvers: Vec<String>,
    },
    /// Train the agent on one scenario and write its curve and checkpoint.
    Train {
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value = "train")]
        name: String,
    },
    /// Dump channels and information matrices at the fixed grid layout.
    Inspect {
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        dump_channels: bool,
        #[arg(long)]
        dump_fim: bool,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long, default_value = "sigma_xi")]
    var: String,
    #[arg(long, value_delimiter = ',', default_value = "1e-7")]
    values: Vec<String>,
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    name: Option<String>,
}

impl Common {
    fn spec(&self, cli: &Cli, default_name: String) -> Result<ExperimentSpec> {
        let mut spec = ExperimentSpec {
            name: self.name.clone().unwrap_or(default_name),
            preset: self.preset.clone(),
            scenario_file: cli.config.clone(),
            var: self.var.parse::<SweepVar>()?,
            values: self.values.iter().map(|v| SweepValue::parse(v)).collect(),
            repetitions: self.reps,
            seed: cli.seed.unwrap_or(0),
            ..ExperimentSpec::default()
        };
        if let Some(b) = self.budget {
            spec.budget = b;
        }
        if let Some(e) = self.episodes {
            spec.train.episodes = e;
        }
        Ok(spec)
    }
}

fn scenario_config(cli: &Cli, preset: &str) -> Result<ScenarioConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ScenarioConfig::from_path(p)?,
        None => ScenarioConfig::preset(preset)?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn report(r: &ExperimentReport) -> bool {
    let failed: Vec<_> = r.rows.iter().filter(|row| !row.completed()).collect();
    println!("wrote {} rows to {}", r.rows.len(), r.csv.display());
    for row in &failed {
        eprintln!("run failed: {}={} solver={} seed={}: {}", row.var, row.value, row.solver, row.seed, row.status);
    }
    failed.is_empty()
}

fn run(cli: &Cli) -> Result<bool> {
    let dir = out_dir();
    match &cli.command {
        Command::Run { spec } => {
            let mut spec = ExperimentSpec::from_path(spec)?;
            if let Some(p) = &cli.config {
                spec.scenario_file = Some(p.clone());
            }
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            if spec.solvers.len() >= 2 {
                let c = compare_solvers(&spec, &dir)?;
                println!("summary in {}", c.summary_csv.display());
                Ok(report(&c.report))
            } else {
                Ok(report(&run_experiment(&spec, &dir)?))
            }
        }
        Command::Sweep { common, solver } => {
            let mut spec = common.spec(cli, format!("sweep_{}", common.var))?;
            spec.solver = solver.parse()?;
            Ok(report(&run_experiment(&spec, &dir)?))
        }
        Command::Compare { common, solvers } => {
            let mut spec = common.spec(cli, "compare".into())?;
            spec.solvers = solvers.iter().map(|s| s.parse::<Solver>()).collect::<Result<_>>()?;
            let c = compare_solvers(&spec, &dir)?;
            for row in &c.summary {
                println!(
                    "{}={} {:<10} power {:.4e} W  feasible {:.2}  ratio to {} {:.3}",
                    spec.var.name(),
                    row.value,
                    row.solver,
                    row.mean_power,
                    row.feasible_rate,
                    row.reference,
                    row.power_ratio
                );
            }
            Ok(report(&c.report))
        }
        Command::Train { preset, episodes, name } => {
            let cfg = scenario_config(cli, preset)?;
            let mut env = CisacEnv::from_scenario(build_scenario(&cfg)?)?;
            let mut tc = TrainConfig::default();
            if let Some(e) = episodes {
                tc.episodes = *e;
            }
            let r = train(&mut env, &tc)?;
            std::fs::create_dir_all(&dir)?;
            let curve = dir.join(format!("{name}.curve.csv"));
            write_curve_csv(BufWriter::new(File::create(&curve)?), &r.curve)?;
            let ckpt = dir.join(format!("{name}.ckpt"));
            r.nets.save(&mut BufWriter::new(File::create(&ckpt)?))?;
            let raw = r.greedy_action(&env)?;
            let trace_path = dir.join(format!("{name}.trace.csv"));
            let mut trace = EpisodeTrace::new(BufWriter::new(File::create(&trace_path)?))?;
            env.reset();
            let mut last = None;
            for n in 0..env.horizon() {
                let o = env.step_raw(&raw)?;
                trace.record(n, &o)?;
                last = Some(o);
            }
            trace.finish()?;
            if let Some(o) = last {
                println!("greedy power {:.4e} W, feasible {}, Γ_c {:.4}", o.power, o.feasible, r.gamma_c);
            }
            println!("wrote {}, {} and {}", curve.display(), ckpt.display(), trace_path.display());
            if let Some(d) = &r.diverged {
                eprintln!("training stopped early: {d}");
                return Ok(false);
            }
            Ok(true)
        }
        Command::Inspect { preset, dump_channels, dump_fim } => {
            let cfg = scenario_config(cli, preset)?;
            let problem = Problem::new(build_scenario(&cfg)?)?;
            let s = &problem.scenario;
            let layout = fpa_layout(s)?;
            println!("B={} U={} N={} M={} seed={}", s.num_bs(), s.num_users(), s.num_tx(), s.num_rx(), s.seed);
            std::fs::create_dir_all(&dir)?;
            if *dump_channels {
                let path = dir.join("channels.csv");
                problem.channels.write_csv(s, &layout, BufWriter::new(File::create(&path)?))?;
                println!("wrote {}", path.display());
            }
            if *dump_fim {
                let z = baselines::zf_fpa(&problem)?;
                let path = dir.join("fim.csv");
                write_fim_csv(s, &z.action.layout, &z.action.w, &z.action.c, BufWriter::new(File::create(&path)?))?;
                println!("wrote {} (zero-forcing beams, feasible {})", path.display(), z.feasible);
            }
            if !dump_channels && !dump_fim {
                return Err(CisacError::Usage("inspect needs --dump-channels and/or --dump-fim".into()));
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
