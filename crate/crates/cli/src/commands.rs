//! The command implementations. Each returns its results so the binary
//! and the tests share one code path.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DVector, Vector3};
use ndarray::{Array3, ArrayView3};
use rayon::prelude::*;
use riskbound::arm::{calibrate_ellipsoids, KinematicChain, LinkEllipsoidSpec};
use riskbound::desko::{self, Batch, DeskoModel, Normalization, TrajectoryDataset};
use riskbound::mppi::{IntegratorModel, RolloutModel};
use riskbound::planner::{
    allocate_risk_budget, compute_metrics, run_episode, Metrics, PlanResult, PlanningContext, RiskBudget, Task,
};
use riskbound::polyrisk::{contour_from_obstacle, RiskContourMap, ScalarDistribution, UncertainObstacle, WorkspacePoint};
use riskbound::simenv::at_goal;
use riskbound::soscert::{certify_ellipsoid, sample_falsify, SolverSettings, Verdict};
use serde::Serialize;

use crate::artifact::ModelArtifact;
use crate::config::{BenchmarkSpec, DataGenSpec, RunConfig, SceneFile, TaskSpec};
use crate::datagen;
use crate::dataset;
use crate::{CliError, CliResult};

fn mkdir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// The rollout model used for planning.
#[derive(Clone, Debug)]
pub enum PlanModel {
    /// The simulator's noise-free integrator with the noise as its error.
    Integrator { model: IntegratorModel, error: Vec<ScalarDistribution> },
    Learned(Box<ModelArtifact>),
}

impl PlanModel {
    pub fn integrator(chain: &KinematicChain, run: &RunConfig) -> Self {
        PlanModel::Integrator {
            model: IntegratorModel { dt: run.sim.dt, limits: chain.limits().clone() },
            error: datagen::integrator_error(run.sim.noise, chain.n_q()),
        }
    }

    pub fn load_or_integrator(path: Option<&Path>, chain: &KinematicChain, run: &RunConfig) -> CliResult<Self> {
        match path {
            Some(p) => Ok(PlanModel::Learned(Box::new(ModelArtifact::load(p)?))),
            None => Ok(Self::integrator(chain, run)),
        }
    }

    pub fn one_step_error(&self) -> &[ScalarDistribution] {
        match self {
            PlanModel::Integrator { error, .. } => error,
            PlanModel::Learned(a) => &a.one_step_error,
        }
    }
}

impl RolloutModel for PlanModel {
    fn state_dim(&self) -> usize {
        match self {
            PlanModel::Integrator { model, .. } => model.state_dim(),
            PlanModel::Learned(a) => a.model.state_dim(),
        }
    }

    fn control_dim(&self) -> usize {
        match self {
            PlanModel::Integrator { model, .. } => model.control_dim(),
            PlanModel::Learned(a) => a.model.control_dim(),
        }
    }

    fn rollout(&self, x0: &DVector<f64>, controls: ArrayView3<f64>, seed: Option<u64>) -> riskbound::Result<Array3<f64>> {
        match self {
            PlanModel::Integrator { model, .. } => model.rollout(x0, controls, seed),
            PlanModel::Learned(a) => a.model.rollout(x0, controls, seed),
        }
    }
}

/// Risk budget and calibrated link ellipsoids of one task.
pub struct Prepared {
    pub budget: RiskBudget,
    pub ellipsoids: LinkEllipsoidSpec,
}

pub fn prepare(chain: &KinematicChain, task: &Task, run: &RunConfig, model: &PlanModel) -> CliResult<Prepared> {
    let budget = allocate_risk_budget(task.delta, run.planner.z_bar.unwrap_or(task.max_control_steps.max(1)))?;
    let ellipsoids = calibrate_ellipsoids(
        chain,
        &LinkEllipsoidSpec::for_chain(chain),
        model.one_step_error(),
        budget.delta_ell,
        run.calibration.n_mc,
        run.calibration.seed,
        run.calibration.cap,
    )?;
    Ok(Prepared { budget, ellipsoids })
}

/// Runs one episode per seed, in parallel.
pub fn run_seeds(
    chain: &KinematicChain,
    task: &Task,
    run: &RunConfig,
    model: &PlanModel,
    prepared: &Prepared,
    seeds: &[u64],
) -> CliResult<Vec<PlanResult>> {
    let sim = run.sim.sim_config(2 * chain.n_q(), 0, task.max_control_steps)?;
    let ctx = PlanningContext::new(chain, model, task, &prepared.ellipsoids, &run.planner, &sim)?;
    Ok(seeds.par_iter().map(|&s| run_episode(&ctx, s)).collect::<riskbound::Result<Vec<_>>>()?)
}

/// Invariants every recorded episode must satisfy.
pub fn episode_violations(r: &PlanResult, chain: &KinematicChain, task: &Task) -> Vec<String> {
    let mut v = Vec::new();
    if !r.safety_gate_holds() {
        v.push("an uncertified command was executed".into());
    }
    if r.steps > task.max_control_steps {
        v.push(format!("{} steps exceed the limit {}", r.steps, task.max_control_steps));
    }
    if r.success {
        let q = r.path.last().expect("path holds the start");
        if !at_goal(&chain.end_effector(q), &task.goal) {
            v.push("success reported outside the goal region".into());
        }
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub task: String,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_ttg: Option<f64>,
    pub mean_length: Option<f64>,
    pub mean_ttg_all: f64,
    pub mean_length_all: f64,
    pub empirical_collision_rate: f64,
    pub collision_std_error: f64,
    pub delta: f64,
    pub delta_o: f64,
    pub delta_ell: f64,
    pub guarantee_void: usize,
    pub stalls: usize,
    pub invariant_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeRow {
    pub task: String,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub ttg: f64,
    pub ee_path_length: f64,
    pub stalls: usize,
    pub retries: usize,
    pub guarantee_void: bool,
    pub failure: String,
}

pub struct BenchOutcome {
    pub summary: Vec<SummaryRow>,
    pub episodes: Vec<EpisodeRow>,
    pub results: Vec<(String, Vec<PlanResult>)>,
    pub violations: Vec<String>,
}

impl BenchOutcome {
    pub fn summary_csv(&self) -> CliResult<Vec<u8>> {
        to_csv(&self.summary)
    }

    pub fn episodes_csv(&self) -> CliResult<Vec<u8>> {
        to_csv(&self.episodes)
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| CliError::io("<csv>", e.into_error()))
}

fn task_name(t: &TaskSpec, i: usize) -> String {
    if t.name.is_empty() {
        format!("task{i}")
    } else {
        t.name.clone()
    }
}

/// Runs every task for every seed and checks the episode invariants and
/// the empirical risk bound.
pub fn bench(spec_path: &Path, model_path: Option<&Path>) -> CliResult<BenchOutcome> {
    let b = BenchmarkSpec::load(spec_path)?;
    let model = PlanModel::load_or_integrator(model_path, &b.chain, &b.run)?;
    let mut out = BenchOutcome { summary: Vec::new(), episodes: Vec::new(), results: Vec::new(), violations: Vec::new() };
    for (i, ts) in b.spec.tasks.iter().enumerate() {
        let name = task_name(ts, i);
        let task = ts.build(&b.chain, &b.scene)?;
        let prepared = prepare(&b.chain, &task, &b.run, &model)?;
        let t0 = Instant::now();
        let results = run_seeds(&b.chain, &task, &b.run, &model, &prepared, &b.spec.seeds)?;
        let metrics = compute_metrics(&results, &b.chain, &task.obstacles, b.run.n_omega(), 0xC011 + i as u64)?;
        log::info!("{name}: {} episodes in {:.1} s", results.len(), t0.elapsed().as_secs_f64());
        let mut n_viol = 0;
        for (r, &seed) in results.iter().zip(&b.spec.seeds) {
            for v in episode_violations(r, &b.chain, &task) {
                out.violations.push(format!("{name} seed {seed}: {v}"));
                n_viol += 1;
            }
            out.episodes.push(EpisodeRow {
                task: name.clone(),
                seed,
                success: r.success,
                steps: r.steps,
                ttg: r.ttg,
                ee_path_length: r.ee_path_length,
                stalls: r.stall_count,
                retries: r.trajectory.iter().map(|s| s.retries).sum(),
                guarantee_void: r.guarantee_void,
                failure: r.failure.clone().unwrap_or_default(),
            });
        }
        let void = results.iter().filter(|r| r.guarantee_void).count();
        if void == 0 && metrics.empirical_collision_rate > task.delta + 3.0 * metrics.collision_std_error {
            out.violations.push(format!(
                "{name}: empirical collision rate {} exceeds {} + 3 x {}",
                metrics.empirical_collision_rate, task.delta, metrics.collision_std_error
            ));
            n_viol += 1;
        }
        out.summary.push(summary_row(&name, &metrics, &task, &prepared.budget, &results, n_viol));
        out.results.push((name, results));
    }
    Ok(out)
}

fn summary_row(name: &str, m: &Metrics, task: &Task, budget: &RiskBudget, results: &[PlanResult], n_viol: usize) -> SummaryRow {
    SummaryRow {
        task: name.into(),
        episodes: m.episodes,
        success_rate: m.success_rate,
        mean_ttg: m.mean_ttg,
        mean_length: m.mean_length,
        mean_ttg_all: m.mean_ttg_all,
        mean_length_all: m.mean_length_all,
        empirical_collision_rate: m.empirical_collision_rate,
        collision_std_error: m.collision_std_error,
        delta: task.delta,
        delta_o: budget.delta_o,
        delta_ell: budget.delta_ell,
        guarantee_void: results.iter().filter(|r| r.guarantee_void).count(),
        stalls: results.iter().map(|r| r.stall_count).sum(),
        invariant_violations: n_viol,
    }
}

/// Writes `summary.csv`, `episodes.csv` and one JSON log per episode.
pub fn write_bench(out: &BenchOutcome, dir: &Path) -> CliResult<()> {
    mkdir(dir)?;
    write(&dir.join("summary.csv"), out.summary_csv()?)?;
    write(&dir.join("episodes.csv"), out.episodes_csv()?)?;
    let logs = dir.join("episodes");
    mkdir(&logs)?;
    for ((name, results), rows) in out.results.iter().zip(out.episodes.chunks(out.episodes.len() / out.results.len().max(1))) {
        for (r, row) in results.iter().zip(rows) {
            write(&logs.join(format!("{name}_seed{}.json", row.seed)), serde_json::to_vec_pretty(r)?)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub t: f64,
    pub q: String,
    pub u: String,
    pub ee_x: f64,
    pub ee_y: f64,
    pub ee_z: f64,
    pub certified: bool,
    pub hold: bool,
    pub retries: usize,
    pub margin: f64,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// A single episode; the result is checked against the episode invariants.
pub fn plan(
    chain: &KinematicChain,
    scene: &SceneFile,
    task_spec: &TaskSpec,
    run: &RunConfig,
    model: &PlanModel,
    seed: u64,
) -> CliResult<(PlanResult, Metrics)> {
    let task = task_spec.build(chain, scene)?;
    let prepared = prepare(chain, &task, run, model)?;
    let r = run_seeds(chain, &task, run, model, &prepared, &[seed])?.remove(0);
    let m = compute_metrics(std::slice::from_ref(&r), chain, &task.obstacles, run.n_omega(), seed)?;
    let v = episode_violations(&r, chain, &task);
    if !v.is_empty() {
        return Err(CliError::Invariant(v.join("; ")));
    }
    Ok((r, m))
}

pub fn write_plan(r: &PlanResult, m: &Metrics, dir: &Path) -> CliResult<()> {
    mkdir(dir)?;
    write(&dir.join("plan.json"), serde_json::to_vec_pretty(&serde_json::json!({ "result": r, "metrics": m }))?)?;
    let rows: Vec<TrajectoryRow> = r
        .trajectory
        .iter()
        .map(|s| TrajectoryRow {
            step: s.step,
            t: s.t,
            q: join(&s.q),
            u: join(&s.u),
            ee_x: s.ee[0],
            ee_y: s.ee[1],
            ee_z: s.ee[2],
            certified: s.certified,
            hold: s.hold,
            retries: s.retries,
            margin: s.margin,
        })
        .collect();
    write(&dir.join("trajectory.csv"), to_csv(&rows)?)
}

/// Verdict of one link ellipsoid against one obstacle contour.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CertifyEntry {
    pub link: String,
    pub obstacle: String,
    pub verdict: Verdict,
    pub margin: f64,
    pub residual: f64,
    pub solves: usize,
    pub falsified_at: Option<[f64; 3]>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CertifyReport {
    pub verdict: Verdict,
    pub entries: Vec<CertifyEntry>,
    pub total_solves: usize,
}

/// Certifies every link ellipsoid at `q` against every obstacle's contour.
pub fn certify(
    chain: &KinematicChain,
    ellipsoids: &LinkEllipsoidSpec,
    obstacles: &[UncertainObstacle],
    scene: &SceneFile,
    q: &[f64],
    delta: f64,
    settings: &SolverSettings,
    falsify_samples: usize,
) -> CliResult<CertifyReport> {
    if q.len() != chain.n_q() {
        return Err(CliError::Usage(format!("q has {} entries for {} joints", q.len(), chain.n_q())));
    }
    let maps: Vec<(String, RiskContourMap)> = obstacles
        .iter()
        .map(|o| Ok((o.name.clone(), RiskContourMap::new(vec![contour_from_obstacle(o, delta)?], scene.bounds)?)))
        .collect::<CliResult<_>>()?;
    let mut entries = Vec::new();
    for e in riskbound::arm::link_ellipsoids(chain, ellipsoids, q) {
        for (name, map) in &maps {
            let t0 = Instant::now();
            let entry = if let Some(p) = sample_falsify(map, &e, falsify_samples, 0) {
                CertifyEntry {
                    link: e.label.clone(),
                    obstacle: name.clone(),
                    verdict: Verdict::NotCertified,
                    margin: f64::NEG_INFINITY,
                    residual: f64::NAN,
                    solves: 0,
                    falsified_at: Some([p.x, p.y, p.z]),
                    wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                }
            } else {
                let r = certify_ellipsoid(map, &e, settings)?;
                CertifyEntry {
                    link: e.label.clone(),
                    obstacle: name.clone(),
                    verdict: r.verdict,
                    margin: r.margin,
                    residual: r.residual,
                    solves: r.solves,
                    falsified_at: None,
                    wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                }
            };
            entries.push(entry);
        }
    }
    let verdict = if entries.iter().all(|e| e.verdict == Verdict::Certified) {
        Verdict::Certified
    } else if entries.iter().any(|e| e.verdict == Verdict::NotCertified) {
        Verdict::NotCertified
    } else {
        Verdict::SolverFailure
    };
    let total_solves = entries.iter().map(|e| e.solves).sum();
    Ok(CertifyReport { verdict, entries, total_solves })
}

/// Inclusive grid axis `min:max:n`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn parse(s: &str) -> CliResult<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || CliError::Usage(format!("grid axis `{s}` is not min:max:n"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let min = parts[0].trim().parse().map_err(|_| bad())?;
        let max = parts[1].trim().parse().map_err(|_| bad())?;
        let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if n == 0 || (n == 1 && min != max) || !(max >= min) {
            return Err(bad());
        }
        Ok(Axis { min, max, n })
    }

    pub fn values(&self) -> Vec<f64> {
        if self.n == 1 {
            return vec![self.min];
        }
        (0..self.n).map(|i| self.min + (self.max - self.min) * i as f64 / (self.n - 1) as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ContourRow {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub risk_bound: f64,
    pub safe: bool,
}

/// Map risk bound on a grid; an empty scene is zero everywhere.
pub fn contour(scene: &SceneFile, delta: f64, grid: [Axis; 3]) -> CliResult<Vec<ContourRow>> {
    let map = RiskContourMap::from_obstacles(&scene.obstacles()?, delta, scene.bounds)?;
    let (xs, ys, zs) = (grid[0].values(), grid[1].values(), grid[2].values());
    let mut rows = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                let p = WorkspacePoint::new(x, y, z);
                let risk = map.map_risk(&p);
                rows.push(ContourRow { x, y, z, risk_bound: risk, safe: map.is_safe(&p) });
            }
        }
    }
    Ok(rows)
}

/// Generates a dataset around the nominal trajectory of `task_spec`.
pub fn gen_data(chain: &KinematicChain, task_spec: &TaskSpec, spec: &DataGenSpec, seed: u64) -> CliResult<TrajectoryDataset> {
    let task = task_spec.build(chain, &SceneFile::default())?;
    datagen::generate_dataset(chain, &task, spec, seed)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub epochs: usize,
    pub heldout_mse: f64,
    pub prediction_error: f64,
    pub zero_order_hold_error: f64,
    pub one_step_error: Vec<ScalarDistribution>,
}

/// Trains (or resumes) a model; the one-step error is fitted on the held-out split.
pub fn train(
    data: &TrajectoryDataset,
    dt: f64,
    cfg: desko::DeskoConfig,
    resume: Option<ModelArtifact>,
    seed: u64,
) -> CliResult<(ModelArtifact, desko::TrainReport, TrainSummary)> {
    let report = match resume {
        Some(a) => {
            let mut m = a.model;
            m.config.epochs = cfg.epochs;
            desko::train_from(m, data, seed)
        }
        None => desko::train(cfg, data, seed),
    };
    let report = match report {
        Ok(r) => r,
        Err(riskbound::Error::Diverged { epoch, checkpoint }) => {
            log::warn!("training diverged at epoch {epoch}; keeping the last finite checkpoint");
            let (train_idx, heldout_idx) = data.split(checkpoint.config.holdout_fraction, seed);
            desko::TrainReport { model: *checkpoint, curve: Vec::new(), best_epoch: epoch, train_idx, heldout_idx }
        }
        Err(e) => return Err(e.into()),
    };
    let idx = if report.heldout_idx.is_empty() { &report.train_idx } else { &report.heldout_idx };
    let err = datagen::fit_one_step_error(&report.model, data, idx)?;
    let pe = desko::prediction_error(&report.model, data, idx)?;
    let summary = TrainSummary {
        best_epoch: report.best_epoch,
        epochs: report.curve.len().saturating_sub(1),
        heldout_mse: report.curve.get(report.best_epoch).map_or(f64::NAN, |r| r.heldout_mse),
        prediction_error: pe.model,
        zero_order_hold_error: pe.zero_order_hold,
        one_step_error: err.clone(),
    };
    Ok((ModelArtifact::new(report.model.clone(), dt, err), report, summary))
}

pub fn write_train(artifact: &ModelArtifact, report: &desko::TrainReport, summary: &TrainSummary, dir: &Path) -> CliResult<()> {
    mkdir(dir)?;
    artifact.save(&dir.join("model.json"))?;
    write(&dir.join("curve.csv"), to_csv(&report.curve)?)?;
    write(&dir.join("train_summary.json"), serde_json::to_vec_pretty(summary)?)
}

/// Largest analytic-vs-finite-difference relative gradient error over
/// `n_params` parameters for each seed.
pub fn gradient_check(model: &DeskoModel, data: &TrajectoryDataset, n_params: usize, seeds: &[u64]) -> CliResult<Vec<f64>> {
    let h = model.config.horizon.min(data.horizon());
    let idx: Vec<usize> = (0..data.len().min(32)).collect();
    let batch = Batch::from_indices(data, &model.norm, &idx, h)?;
    Ok(seeds.iter().map(|&s| desko::gradient_check_params(model, &batch, 1e-6, n_params, None, s)).collect())
}

/// A freshly initialized model sized for `data`.
pub fn fresh_model(data: &TrajectoryDataset, cfg: desko::DeskoConfig, seed: u64) -> CliResult<DeskoModel> {
    let cfg = desko::DeskoConfig { state_dim: data.state_dim(), control_dim: data.control_dim(), ..cfg };
    Ok(DeskoModel::init(cfg, Normalization::from_dataset(data), seed)?)
}

pub fn save_dataset(path: &Path, d: &TrajectoryDataset, dt: f64, meta: serde_json::Value) -> CliResult<()> {
    dataset::save(path, d, dt, meta)
}

/// Goal point of a task in workspace coordinates.
pub fn goal_of(chain: &KinematicChain, t: &TaskSpec) -> CliResult<Vector3<f64>> {
    t.goal_point(chain)
}
