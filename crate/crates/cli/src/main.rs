use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use riskbound::arm::LinkEllipsoidSpec;
use riskbound::polyrisk::ScalarDistribution;
use riskbound::soscert::{SolverSettings, Verdict};
use riskbound_cli::artifact::ModelArtifact;
use riskbound_cli::commands::{self, Axis, PlanModel};
use riskbound_cli::config::{self, DataGenSpec, RunConfig, SceneFile, TaskSpec, TrainSpec};
use riskbound_cli::{dataset, CliError, CliResult};

#[derive(Parser)]
#[command(name = "riskbound", version, about = "Risk-bounded motion planning for manipulators")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a trajectory dataset around the nominal plan of a task.
    GenData {
        #[arg(long)]
        robot: String,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        l_n: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Gaussian process noise as `mean,std`.
        #[arg(long)]
        noise: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset, or resume training from a saved model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also run a gradient check on the trained model.
        #[arg(long)]
        gradient_check: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every task of a benchmark spec for every seed.
    Bench {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a single episode.
    Plan {
        #[arg(long)]
        robot: String,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Certify the link ellipsoids of one configuration.
    Certify {
        #[arg(long)]
        robot: String,
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Joint configuration, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        q: String,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 1.0)]
        inflation: f64,
        #[arg(long)]
        json: bool,
    },
    /// Evaluate the risk bound of a scene on a grid.
    Contour {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        delta: f64,
        #[arg(long, allow_hyphen_values = true, default_value = "-1:1:21")]
        x: String,
        #[arg(long, allow_hyphen_values = true, default_value = "-1:1:21")]
        y: String,
        #[arg(long, allow_hyphen_values = true, default_value = "0:0:1")]
        z: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic model gradients with finite differences.
    GradientCheck {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        params: usize,
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn scene_or_empty(p: Option<&Path>) -> CliResult<SceneFile> {
    p.map_or(Ok(SceneFile::default()), config::read_toml)
}

fn parse_seeds(s: &str) -> CliResult<Vec<u64>> {
    s.split(',').map(|t| t.trim().parse().map_err(|_| CliError::Usage(format!("bad seed `{t}`")))).collect()
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, bytes).map_err(|e| CliError::Io { path: p.into(), source: e }),
        None => {
            print!("{}", String::from_utf8_lossy(bytes));
            Ok(())
        }
    }
}

fn run(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::GenData { robot, task, config: cfg, l_n, n, horizon, noise, seed, out } => {
            let chain = config::load_robot(&robot)?;
            let task: TaskSpec = config::read_toml(&task)?;
            let mut spec: DataGenSpec = cfg.as_deref().map_or(Ok(DataGenSpec::default()), config::read_toml)?;
            spec.l_n = l_n.unwrap_or(spec.l_n);
            spec.n_per_waypoint = n.unwrap_or(spec.n_per_waypoint);
            spec.horizon = horizon.unwrap_or(spec.horizon);
            if let Some(s) = noise {
                let v = config::parse_list(&s)?;
                if v.len() != 2 {
                    return Err(CliError::Usage("--noise takes mean,std".into()));
                }
                spec.sim.noise = ScalarDistribution::gaussian(v[0], v[1]);
            }
            let d = commands::gen_data(&chain, &task, &spec, seed)?;
            let meta = serde_json::json!({ "robot": robot, "seed": seed, "spec": spec });
            dataset::save(&out, &d, spec.sim.dt, meta)?;
            log::info!("wrote {} trajectories of {} steps to {}", d.len(), d.horizon(), out.display());
            Ok(())
        }
        Cmd::Train { data, config: cfg, epochs, resume, gradient_check, seed, out } => {
            let (d, header) = dataset::load(&data)?;
            let spec: TrainSpec = cfg.as_deref().map_or(Ok(TrainSpec::default()), config::read_toml)?;
            let mut desko = riskbound::desko::DeskoConfig { state_dim: d.state_dim(), control_dim: d.control_dim(), ..spec.desko };
            desko.epochs = epochs.unwrap_or(desko.epochs);
            let resume = resume.as_deref().map(ModelArtifact::load).transpose()?;
            let (artifact, report, summary) = commands::train(&d, header.dt, desko, resume, seed)?;
            commands::write_train(&artifact, &report, &summary, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if gradient_check {
                let worst = commands::gradient_check(&artifact.model, &d, 50, &[seed])?;
                println!("gradient check max relative error {:.3e}", worst[0]);
                if worst[0] > 1e-4 {
                    return Err(CliError::Invariant(format!("gradient error {:.3e} above 1e-4", worst[0])));
                }
            }
            Ok(())
        }
        Cmd::Bench { spec, model, out } => {
            let outcome = commands::bench(&spec, model.as_deref())?;
            commands::write_bench(&outcome, &out)?;
            print!("{}", String::from_utf8_lossy(&outcome.summary_csv()?));
            if !outcome.violations.is_empty() {
                return Err(CliError::Invariant(outcome.violations.join("; ")));
            }
            Ok(())
        }
        Cmd::Plan { robot, scene, task, run: run_cfg, model, delta, seed, out } => {
            let chain = config::load_robot(&robot)?;
            let scene = scene_or_empty(scene.as_deref())?;
            let mut task: TaskSpec = config::read_toml(&task)?;
            task.delta = delta.unwrap_or(task.delta);
            let rc: RunConfig = run_cfg.as_deref().map_or(Ok(RunConfig::default()), config::read_toml)?;
            let model = PlanModel::load_or_integrator(model.as_deref(), &chain, &rc)?;
            let (r, m) = commands::plan(&chain, &scene, &task, &rc, &model, seed)?;
            commands::write_plan(&r, &m, &out)?;
            println!(
                "success {} steps {} ttg {:.2} s length {:.3} m stalls {} delta_o {} delta_ell {}",
                r.success, r.steps, r.ttg, r.ee_path_length, r.stall_count, r.budget.delta_o, r.budget.delta_ell
            );
            Ok(())
        }
        Cmd::Certify { robot, scene, q, delta, inflation, json } => {
            let chain = config::load_robot(&robot)?;
            let scene = scene_or_empty(scene.as_deref())?;
            let q = config::parse_list(&q)?;
            if inflation < 1.0 {
                return Err(CliError::Usage("--inflation must be at least 1".into()));
            }
            let ellipsoids = LinkEllipsoidSpec::for_chain(&chain).with_inflation(inflation);
            let settings = SolverSettings::default();
            let report = commands::certify(&chain, &ellipsoids, &scene.obstacles()?, &scene, &q, delta, &settings, 1000)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                for e in &report.entries {
                    print!(
                        "{:<8} {:<12} {:?} margin {:.3e} residual {:.3e} solves {} {:.1} ms",
                        e.link, e.obstacle, e.verdict, e.margin, e.residual, e.solves, e.wall_ms
                    );
                    if let Some(p) = e.falsified_at {
                        print!(" falsified at ({:.4}, {:.4}, {:.4})", p[0], p[1], p[2]);
                    }
                    println!();
                }
                println!("verdict {:?}, {} solves", report.verdict, report.total_solves);
            }
            if report.verdict == Verdict::SolverFailure {
                return Err(CliError::Core(riskbound::Error::Planning("solver failure during certification".into())));
            }
            Ok(())
        }
        Cmd::Contour { scene, delta, x, y, z, out } => {
            let scene = scene_or_empty(scene.as_deref())?;
            let rows = commands::contour(&scene, delta, [Axis::parse(&x)?, Axis::parse(&y)?, Axis::parse(&z)?])?;
            emit(out.as_deref(), &commands::to_csv(&rows)?)
        }
        Cmd::GradientCheck { data, model, config: cfg, params, seeds, tol } => {
            let (d, _) = dataset::load(&data)?;
            let m = match model {
                Some(p) => ModelArtifact::load(&p)?.model,
                None => {
                    let spec: TrainSpec = cfg.as_deref().map_or(Ok(TrainSpec::default()), config::read_toml)?;
                    commands::fresh_model(&d, spec.desko, 0)?
                }
            };
            let seeds = parse_seeds(&seeds)?;
            let worst = commands::gradient_check(&m, &d, params, &seeds)?;
            for (s, w) in seeds.iter().zip(&worst) {
                println!("seed {s}: max relative error {w:.3e}");
            }
            let max = worst.iter().copied().fold(0.0, f64::max);
            if max > tol {
                return Err(CliError::Invariant(format!("gradient error {max:.3e} above {tol:.1e}")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
