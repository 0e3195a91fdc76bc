//! Receding-horizon planning loop with a certified safety gate on every
//! executed step, and the split of the risk budget between obstacles and
//! link-ellipsoid containment.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{link_ellipsoids, JointState, KinematicChain, LinkEllipsoidSpec};
use crate::error::{Error, Result};
use crate::mppi::{
    select_command, shift_policy, ArmScene, CostWeights, InjectedSample, MppiConfig, Optimizer, PolicyParams,
    RolloutModel,
};
use crate::polyrisk::{Aabb, RiskContourMap, ScalarDistribution, UncertainObstacle, WorkspacePoint};
use crate::simenv::{at_goal, collision_cost, true_step, GoalRegion, SimConfig};
use crate::soscert::{certify_ellipsoid, sample_falsify, SolverSettings, Verdict};

/// Split of the total tolerance `Δ` into obstacle risk `delta_o` and a
/// per-cycle containment risk `delta_ell` over at most `z_bar` cycles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskBudget {
    pub delta_o: f64,
    pub delta_ell: f64,
    pub z_bar: usize,
}

/// `delta_ell = min(0.001, Δ / (2 z̄))`, `delta_o = Δ - z̄ · delta_ell`.
pub fn allocate_risk_budget(delta: f64, z_bar: usize) -> Result<RiskBudget> {
    if !(delta > 0.0 && delta < 1.0) || z_bar == 0 {
        return Err(Error::InvalidInput(format!("need 0 < delta < 1 and z_bar >= 1, got {delta}, {z_bar}")));
    }
    let delta_ell = 0.001f64.min(delta / (2.0 * z_bar as f64));
    let mut delta_o = delta - z_bar as f64 * delta_ell;
    // Rounding may push the sum one ulp past Δ; step down until it holds.
    while delta_o > 0.0 && delta_o + z_bar as f64 * delta_ell > delta {
        delta_o = delta_o.next_down();
    }
    if !(delta_o > 0.0) {
        return Err(Error::RiskBudget { delta_o });
    }
    Ok(RiskBudget { delta_o, delta_ell, z_bar })
}

impl RiskBudget {
    /// `delta_o + z · delta_ell`, the bound covering an episode of `z` cycles.
    pub fn episode_bound(&self, z: usize) -> f64 {
        self.delta_o + z as f64 * self.delta_ell
    }
}

/// A reaching problem among uncertain obstacles.
#[derive(Clone, Debug)]
pub struct Task {
    pub start: JointState,
    pub goal: GoalRegion,
    pub goal_axis: Option<Vector3<f64>>,
    pub obstacles: Vec<UncertainObstacle>,
    pub bounds: Aabb,
    pub delta: f64,
    /// Simulated seconds available to reach the goal.
    pub time_budget: f64,
    pub max_control_steps: usize,
}

impl Task {
    /// Validates the tolerance and that the start configuration is safe
    /// with respect to the `Δ` contours.
    pub fn validate(&self, chain: &KinematicChain) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidInput(format!("task delta {} outside (0, 1)", self.delta)));
        }
        if self.start.q.len() != chain.n_q() || !self.start.is_finite() {
            return Err(Error::Shape("start state does not match the robot".into()));
        }
        let map = RiskContourMap::from_obstacles(&self.obstacles, self.delta, self.bounds)?;
        let q: Vec<f64> = self.start.q.iter().copied().collect();
        if collision_cost(&q, chain, &map, 1.0) > 0.0 {
            return Err(Error::InvalidInput("start configuration is not collision-free".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub mppi: MppiConfig,
    pub weights: CostWeights,
    pub solver: SolverSettings,
    pub max_retries: usize,
    /// Consecutive held steps after which the episode is abandoned.
    pub max_consecutive_stalls: usize,
    /// Planning-cycle bound for the risk budget; `max_control_steps` when absent.
    pub z_bar: Option<usize>,
    /// Points tried by the sampling falsifier before any SOS solve.
    pub falsify_samples: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            mppi: MppiConfig::default(),
            weights: CostWeights::default(),
            solver: SolverSettings { early_exit: true, screen: true, ..SolverSettings::default() },
            max_retries: 10,
            max_consecutive_stalls: 20,
            z_bar: None,
            falsify_samples: 256,
        }
    }
}

/// Certificate of one link ellipsoid against the whole map.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinkCertificate {
    pub link: String,
    pub verdict: Verdict,
    pub margin: f64,
    pub residual: f64,
    /// Point found by the sampling falsifier, when it found one.
    pub falsified_at: Option<[f64; 3]>,
    pub solves: usize,
}

/// Gate decision for one configuration: certified iff every link is.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfigCertificate {
    pub verdict: Verdict,
    pub links: Vec<LinkCertificate>,
    pub wall_ms: f64,
}

impl ConfigCertificate {
    pub fn is_certified(&self) -> bool {
        self.verdict == Verdict::Certified
    }

    pub fn solves(&self) -> usize {
        self.links.iter().map(|l| l.solves).sum()
    }

    pub fn margin(&self) -> f64 {
        self.links.iter().map(|l| l.margin).fold(f64::INFINITY, f64::min)
    }
}

/// Falsifies, then certifies, each link ellipsoid at configuration `q`.
/// Stops at the first link that is not certified.
pub fn certify_configuration(
    map: &RiskContourMap,
    chain: &KinematicChain,
    spec: &LinkEllipsoidSpec,
    q: &[f64],
    settings: &SolverSettings,
    falsify_samples: usize,
    seed: u64,
) -> Result<ConfigCertificate> {
    let t0 = Instant::now();
    let mut links = Vec::new();
    let mut verdict = Verdict::Certified;
    for e in link_ellipsoids(chain, spec, q) {
        if let Some(p) = sample_falsify(map, &e, falsify_samples, seed) {
            links.push(LinkCertificate {
                link: e.label.clone(),
                verdict: Verdict::NotCertified,
                margin: f64::NEG_INFINITY,
                residual: f64::NAN,
                falsified_at: Some([p.x, p.y, p.z]),
                solves: 0,
            });
            verdict = Verdict::NotCertified;
            break;
        }
        let r = certify_ellipsoid(map, &e, settings)?;
        links.push(LinkCertificate {
            link: e.label.clone(),
            verdict: r.verdict,
            margin: r.margin,
            residual: r.residual,
            falsified_at: None,
            solves: r.solves,
        });
        if r.verdict != Verdict::Certified {
            verdict = r.verdict;
            break;
        }
    }
    Ok(ConfigCertificate { verdict, links, wall_ms: t0.elapsed().as_secs_f64() * 1e3 })
}

/// Everything that stays fixed over an episode.
pub struct PlanningContext<'a, M: RolloutModel> {
    pub chain: &'a KinematicChain,
    pub model: &'a M,
    pub task: &'a Task,
    pub spec: &'a LinkEllipsoidSpec,
    pub cfg: &'a PlannerConfig,
    pub sim: &'a SimConfig,
    pub budget: RiskBudget,
    /// Contours at `delta_o`, used for costs and certification.
    pub map: RiskContourMap,
}

impl<'a, M: RolloutModel> PlanningContext<'a, M> {
    pub fn new(
        chain: &'a KinematicChain,
        model: &'a M,
        task: &'a Task,
        spec: &'a LinkEllipsoidSpec,
        cfg: &'a PlannerConfig,
        sim: &'a SimConfig,
    ) -> Result<Self> {
        task.validate(chain)?;
        cfg.mppi.validate()?;
        spec.validate(chain)?;
        if model.control_dim() != chain.n_q() || model.state_dim() != 2 * chain.n_q() {
            return Err(Error::Shape("model dimensions do not match the robot".into()));
        }
        let budget = allocate_risk_budget(task.delta, cfg.z_bar.unwrap_or(task.max_control_steps.max(1)))?;
        let map = RiskContourMap::from_obstacles(&task.obstacles, budget.delta_o, task.bounds)?;
        Ok(PlanningContext { chain, model, task, spec, cfg, sim, budget, map })
    }

    fn scene(&self) -> ArmScene<'_> {
        ArmScene {
            chain: self.chain,
            map: &self.map,
            goal: self.task.goal,
            goal_axis: self.task.goal_axis,
            weights: self.cfg.weights.clone(),
        }
    }

    fn predict_q(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<Vec<f64>> {
        let nu = u.len();
        let controls = Array3::from_shape_fn((1, 1, nu), |(_, _, j)| u[j]);
        let next = self.model.rollout(x, controls.view(), None)?;
        Ok((0..self.chain.n_q()).map(|j| next[[0, 0, j]]).collect())
    }
}

/// Outcome of one gated planning step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub u: DVector<f64>,
    pub policy: PolicyParams,
    pub cert: ConfigCertificate,
    pub retries: usize,
    /// True when no certified command was found and the hold command is returned.
    pub hold: bool,
    /// Commands rejected by the gate, in order.
    pub rejected: Vec<DVector<f64>>,
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Optimizes, predicts the next configuration and certifies it; on a
/// failed certificate the rejected sequence is fed back with the
/// certification penalty and the policy re-optimized, up to `max_retries`
/// times, after which the hold command `u = 0` is returned.
pub fn plan_step<M: RolloutModel>(
    ctx: &PlanningContext<'_, M>,
    state: &JointState,
    policy: &PolicyParams,
    step: u64,
    seed: u64,
    max_retries: usize,
) -> Result<StepOutcome> {
    let scene = ctx.scene();
    let u_max = &ctx.chain.limits().u_max;
    let opt = Optimizer { model: ctx.model, cost: &scene, cfg: &ctx.cfg.mppi, u_max };
    let x = state.to_vector();
    let per_step = (ctx.cfg.mppi.iterations + max_retries + 1) as u64;
    let mut iter_index = step * per_step;
    let mut policy = policy.clone();
    for _ in 0..ctx.cfg.mppi.iterations {
        policy = opt.iterate(&policy, &x, iter_index, Some(derive_seed(seed, step, iter_index)), &[])?.policy;
        iter_index += 1;
    }
    let mut injected: Vec<InjectedSample> = Vec::new();
    let mut rejected = Vec::new();
    let mut retries = 0;
    loop {
        let u = select_command(&policy, u_max);
        let q_next = ctx.predict_q(&x, &u)?;
        let cert = certify_configuration(
            &ctx.map,
            ctx.chain,
            ctx.spec,
            &q_next,
            &ctx.cfg.solver,
            ctx.cfg.falsify_samples,
            derive_seed(seed, step, 0xFA15),
        )?;
        if cert.is_certified() {
            return Ok(StepOutcome { u, policy, cert, retries, hold: false, rejected });
        }
        if retries >= max_retries {
            let hold = DVector::zeros(u.len());
            return Ok(StepOutcome { u: hold, policy, cert, retries, hold: true, rejected });
        }
        let mut seq = policy.mean.clone();
        seq.row_mut(0).copy_from(&u.transpose());
        injected.push(InjectedSample { controls: clip_rows(&seq, u_max), penalty: ctx.cfg.weights.alpha_cert });
        rejected.push(u);
        policy = opt.iterate(&policy, &x, iter_index, Some(derive_seed(seed, step, iter_index)), &injected)?.policy;
        iter_index += 1;
        retries += 1;
    }
}

fn clip_rows(m: &DMatrix<f64>, u_max: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |t, j| m[(t, j)].clamp(-u_max[j], u_max[j]))
}

/// Log entry of one executed control step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub u: Vec<f64>,
    pub ee: [f64; 3],
    /// Coarse collision cost of the state reached after the step.
    pub collision_cost: f64,
    pub certified: bool,
    pub hold: bool,
    pub retries: usize,
    pub margin: f64,
    pub solves: usize,
    pub cert_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanResult {
    pub success: bool,
    pub steps: usize,
    /// Simulated time to goal, seconds.
    pub ttg: f64,
    pub ee_path_length: f64,
    /// Configurations visited, starting with the start state.
    pub path: Vec<Vec<f64>>,
    pub trajectory: Vec<StepRecord>,
    pub cert_log: Vec<ConfigCertificate>,
    pub stall_count: usize,
    pub budget: RiskBudget,
    /// Set when the episode ran more cycles than the budget covers.
    pub guarantee_void: bool,
    pub failure: Option<String>,
}

impl PlanResult {
    /// Every executed command other than the hold was certified.
    pub fn safety_gate_holds(&self) -> bool {
        self.trajectory.iter().all(|r| r.hold || r.certified)
    }
}

/// Runs the receding-horizon loop on the simulator until the goal is
/// reached, the step or time budget is exhausted, or the planner stalls.
pub fn run_episode<M: RolloutModel>(ctx: &PlanningContext<'_, M>, seed: u64) -> Result<PlanResult> {
    let task = ctx.task;
    let chain = ctx.chain;
    let lim = chain.limits();
    let nu = chain.n_q();
    let mcfg = &ctx.cfg.mppi;
    let mut sim = ctx.sim.clone();
    sim.seed = seed;
    let mut x = task.start.clone();
    let mut policy = PolicyParams::new(mcfg.horizon, nu, mcfg.init_cov);
    let default_u = vec![0.0; nu];
    let default_cov = vec![mcfg.init_cov; nu];
    let q_of = |s: &JointState| -> Vec<f64> { s.q.iter().copied().collect() };
    let mut ee = chain.end_effector(&q_of(&x));
    let mut result = PlanResult {
        success: false,
        steps: 0,
        ttg: 0.0,
        ee_path_length: 0.0,
        path: vec![q_of(&x)],
        trajectory: Vec::new(),
        cert_log: Vec::new(),
        stall_count: 0,
        budget: ctx.budget,
        guarantee_void: false,
        failure: None,
    };
    let mut consecutive = 0;
    loop {
        if at_goal(&ee, &task.goal) {
            result.success = true;
            break;
        }
        let step = result.steps;
        if step >= task.max_control_steps {
            result.failure = Some("step limit reached".into());
            break;
        }
        if (step + 1) as f64 * sim.dt > task.time_budget + 1e-12 {
            result.failure = Some("time budget exhausted".into());
            break;
        }
        let out = plan_step(ctx, &x, &policy, step as u64, seed, ctx.cfg.max_retries)?;
        x = true_step(&x, &out.u, &sim, lim, step as u64);
        let q = q_of(&x);
        let next_ee = chain.end_effector(&q);
        result.ee_path_length += (next_ee - ee).norm();
        ee = next_ee;
        result.trajectory.push(StepRecord {
            step,
            t: (step + 1) as f64 * sim.dt,
            q: q.clone(),
            qdot: x.qdot.iter().copied().collect(),
            u: out.u.iter().copied().collect(),
            ee: [ee.x, ee.y, ee.z],
            collision_cost: collision_cost(&q, chain, &ctx.map, 1.0),
            certified: out.cert.is_certified(),
            hold: out.hold,
            retries: out.retries,
            margin: out.cert.margin(),
            solves: out.cert.solves(),
            cert_ms: out.cert.wall_ms,
        });
        result.path.push(q);
        result.cert_log.push(out.cert);
        result.steps += 1;
        policy = shift_policy(&out.policy, &default_u, &default_cov);
        if out.hold {
            result.stall_count += 1;
            consecutive += 1;
            if consecutive >= ctx.cfg.max_consecutive_stalls {
                result.failure = Some(format!("{consecutive} consecutive stalls"));
                break;
            }
        } else {
            consecutive = 0;
        }
    }
    result.ttg = result.steps as f64 * sim.dt;
    result.guarantee_void = result.steps > ctx.budget.z_bar;
    Ok(result)
}

/// Benchmark summary over episodes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub episodes: usize,
    pub success_rate: f64,
    /// Means over successful episodes; `None` when there are none.
    pub mean_ttg: Option<f64>,
    pub mean_length: Option<f64>,
    /// Means over all episodes.
    pub mean_ttg_all: f64,
    pub mean_length_all: f64,
    pub empirical_collision_rate: f64,
    /// Monte-Carlo standard error of the collision rate.
    pub collision_std_error: f64,
}

/// True when any link surface point of any visited configuration lies in
/// an obstacle realization.
fn path_collides(points: &[Vec<Vec<f64>>], omegas: &[f64]) -> bool {
    points.iter().any(|per_obstacle| {
        per_obstacle.iter().zip(omegas).any(|(coeffs, &w)| {
            // Horner in ω; coefficients are lowest order first.
            coeffs.iter().rev().fold(0.0, |acc, c| acc * w + c) <= 0.0
        })
    })
}

/// Success statistics plus the post-hoc collision rate: every executed
/// path is checked against `n_omega` independent obstacle realizations.
pub fn compute_metrics(
    results: &[PlanResult],
    chain: &KinematicChain,
    obstacles: &[UncertainObstacle],
    n_omega: usize,
    seed: u64,
) -> Result<Metrics> {
    if results.is_empty() {
        return Err(Error::InvalidInput("no episodes to summarize".into()));
    }
    let n = results.len() as f64;
    let succ: Vec<&PlanResult> = results.iter().filter(|r| r.success).collect();
    let mean = |v: &mut dyn Iterator<Item = f64>, k: usize| if k == 0 { None } else { Some(v.sum::<f64>() / k as f64) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samplers: Vec<_> = obstacles.iter().map(|o| o.omega.sampler()).collect();
    let (mut hits, mut pairs) = (0usize, 0usize);
    for r in results {
        // Per point and obstacle, o(p, ·) as a polynomial in ω.
        let points: Vec<Vec<Vec<f64>>> = r
            .path
            .iter()
            .flat_map(|q| chain.link_occupancy(q).into_iter().flatten())
            .map(|p| obstacles.iter().map(|o| o.omega_coefficients(&WorkspacePoint::from(p))).collect())
            .collect();
        for _ in 0..n_omega {
            let omegas: Vec<f64> = samplers.iter().map(|s| rand::Rng::sample(&mut rng, s)).collect();
            if path_collides(&points, &omegas) {
                hits += 1;
            }
            pairs += 1;
        }
    }
    let rate = if pairs == 0 { 0.0 } else { hits as f64 / pairs as f64 };
    let std_err = if pairs == 0 { 0.0 } else { (rate * (1.0 - rate) / pairs as f64).sqrt() };
    Ok(Metrics {
        episodes: results.len(),
        success_rate: succ.len() as f64 / n,
        mean_ttg: mean(&mut succ.iter().map(|r| r.ttg), succ.len()),
        mean_length: mean(&mut succ.iter().map(|r| r.ee_path_length), succ.len()),
        mean_ttg_all: results.iter().map(|r| r.ttg).sum::<f64>() / n,
        mean_length_all: results.iter().map(|r| r.ee_path_length).sum::<f64>() / n,
        empirical_collision_rate: rate,
        collision_std_error: std_err,
    })
}

/// Gaussian fit of the per-joint one-step position error `q_true - q_pred`
/// of a model over observed transitions `(x, u, x_next)`.
pub fn one_step_error_model<M: RolloutModel>(
    model: &M,
    transitions: &[(DVector<f64>, DVector<f64>, DVector<f64>)],
) -> Result<Vec<ScalarDistribution>> {
    let nu = model.control_dim();
    if transitions.is_empty() {
        return Err(Error::InvalidInput("no transitions".into()));
    }
    let mut errs = vec![Vec::with_capacity(transitions.len()); nu];
    for (x, u, next) in transitions {
        let controls = Array3::from_shape_fn((1, 1, nu), |(_, _, j)| u[j]);
        let pred = model.rollout(x, controls.view(), None)?;
        for j in 0..nu {
            errs[j].push(next[j] - pred[[0, 0, j]]);
        }
    }
    Ok(errs
        .iter()
        .map(|e| {
            let m = e.iter().sum::<f64>() / e.len() as f64;
            let v = e.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / e.len() as f64;
            ScalarDistribution::gaussian(m, v.sqrt())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::RobotConfig;
    use crate::mppi::IntegratorModel;
    use crate::simenv::ProcessNoise;

    #[test]
    fn budget_examples() {
        let b = allocate_risk_budget(0.1, 100).unwrap();
        assert!((b.delta_ell - 0.0005).abs() < 1e-18 && (b.delta_o - 0.05).abs() < 1e-15);
        let b = allocate_risk_budget(0.3, 200).unwrap();
        assert!((b.delta_ell - 0.00075).abs() < 1e-18 && (b.delta_o - 0.15).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_inputs_are_rejected() {
        assert!(allocate_risk_budget(0.0, 10).is_err());
        assert!(allocate_risk_budget(1.0, 10).is_err());
        assert!(allocate_risk_budget(0.1, 0).is_err());
    }

    #[test]
    fn tiny_tolerance_keeps_half_for_obstacles() {
        // With delta_ell = Δ / (2 z̄) the obstacle share is Δ / 2 however large z̄ is.
        let b = allocate_risk_budget(0.001, 1_000_000).unwrap();
        assert!(b.delta_o > 0.0 && b.delta_o + 1e6 * b.delta_ell <= 0.001);
        assert!((b.delta_o - 0.0005).abs() < 1e-12);
    }

    fn setup() -> (KinematicChain, Task, SimConfig) {
        let chain = KinematicChain::new(RobotConfig::planar_three_link()).unwrap();
        let task = Task {
            start: JointState::at_rest(DVector::from_vec(vec![0.3, 0.3, 0.3])),
            goal: GoalRegion::new([0.0, 1.0, 0.0], 0.1),
            goal_axis: None,
            obstacles: vec![],
            bounds: Aabb::default(),
            delta: 0.3,
            time_budget: 30.0,
            max_control_steps: 100,
        };
        let sim = SimConfig::new(0.1, ProcessNoise::zero(6), 0, 100).unwrap();
        (chain, task, sim)
    }

    #[test]
    fn start_at_goal_succeeds_immediately() {
        let (chain, mut task, sim) = setup();
        let q: Vec<f64> = task.start.q.iter().copied().collect();
        task.goal.center = chain.end_effector(&q).into();
        let model = IntegratorModel { dt: 0.1, limits: chain.limits().clone() };
        let spec = LinkEllipsoidSpec::for_chain(&chain);
        let cfg = PlannerConfig::default();
        let ctx = PlanningContext::new(&chain, &model, &task, &spec, &cfg, &sim).unwrap();
        let r = run_episode(&ctx, 1).unwrap();
        assert!(r.success && r.steps == 0 && r.ttg == 0.0);
    }

    #[test]
    fn zero_time_budget_fails_without_steps() {
        let (chain, mut task, sim) = setup();
        task.time_budget = 0.0;
        let model = IntegratorModel { dt: 0.1, limits: chain.limits().clone() };
        let spec = LinkEllipsoidSpec::for_chain(&chain);
        let cfg = PlannerConfig::default();
        let ctx = PlanningContext::new(&chain, &model, &task, &spec, &cfg, &sim).unwrap();
        let r = run_episode(&ctx, 1).unwrap();
        assert!(!r.success && r.steps == 0);
    }

    #[test]
    fn empty_scene_certifies_first_try() {
        let (chain, task, sim) = setup();
        let model = IntegratorModel { dt: 0.1, limits: chain.limits().clone() };
        let spec = LinkEllipsoidSpec::for_chain(&chain);
        let cfg = PlannerConfig { mppi: MppiConfig { n_samples: 50, ..Default::default() }, ..Default::default() };
        let ctx = PlanningContext::new(&chain, &model, &task, &spec, &cfg, &sim).unwrap();
        let p = PolicyParams::new(15, 3, 0.25);
        let out = plan_step(&ctx, &task.start, &p, 0, 3, 10).unwrap();
        assert!(out.cert.is_certified());
        assert_eq!(out.retries, 0);
        assert!(!out.hold);
    }

    #[test]
    fn collision_rate_of_a_path_through_an_obstacle() {
        let chain = KinematicChain::new(RobotConfig::planar_three_link()).unwrap();
        let ob = UncertainObstacle::sphere("s", Vector3::new(0.6, 0.0, 0.0), ScalarDistribution::uniform(0.1, 0.2)).unwrap();
        let mk = |q: Vec<f64>| PlanResult {
            success: true,
            steps: 0,
            ttg: 0.0,
            ee_path_length: 0.0,
            path: vec![q],
            trajectory: vec![],
            cert_log: vec![],
            stall_count: 0,
            budget: allocate_risk_budget(0.3, 10).unwrap(),
            guarantee_void: false,
            failure: None,
        };
        let through = compute_metrics(&[mk(vec![0.0, 0.0, 0.0])], &chain, &[ob.clone()], 200, 1).unwrap();
        assert_eq!(through.empirical_collision_rate, 1.0);
        let away = compute_metrics(&[mk(vec![std::f64::consts::PI, 0.0, 0.0])], &chain, &[ob], 200, 1).unwrap();
        assert_eq!(away.empirical_collision_rate, 0.0);
    }
}
