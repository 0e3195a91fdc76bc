//! Training data around a nominal trajectory: the noise-free planner
//! produces waypoints, each waypoint seeds perturbed starts that are driven
//! by Halton-spline control sequences through the noisy simulator.

use nalgebra::DVector;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use riskbound::arm::{JointState, KinematicChain, LinkEllipsoidSpec};
use riskbound::desko::TrajectoryDataset;
use riskbound::mppi::{halton_spline_samples, IntegratorModel, MppiConfig, PolicyParams, RolloutModel};
use riskbound::planner::{run_episode, PlanResult, PlanningContext, Task};
use riskbound::polyrisk::ScalarDistribution;
use riskbound::simenv::{true_step, ProcessNoise, SimConfig};

use crate::config::DataGenSpec;
use crate::{CliError, CliResult};

/// The obstacle-free, noise-free plan from the task's start.
pub fn nominal_trajectory(chain: &KinematicChain, task: &Task, spec: &DataGenSpec, seed: u64) -> CliResult<PlanResult> {
    let free = Task { obstacles: Vec::new(), max_control_steps: spec.l_n.max(1), time_budget: f64::INFINITY, ..task.clone() };
    let model = IntegratorModel { dt: spec.sim.dt, limits: chain.limits().clone() };
    let sim = SimConfig::new(spec.sim.dt, ProcessNoise::zero(2 * chain.n_q()), seed, spec.l_n.max(1))?;
    let ellipsoids = LinkEllipsoidSpec::for_chain(chain);
    let ctx = PlanningContext::new(chain, &model, &free, &ellipsoids, &spec.nominal, &sim)?;
    let r = run_episode(&ctx, seed)?;
    if !r.success && r.steps < spec.l_n {
        return Err(CliError::Core(riskbound::Error::Planning(format!(
            "nominal trajectory failed after {} steps: {}",
            r.steps,
            r.failure.clone().unwrap_or_default()
        ))));
    }
    Ok(r)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(1 << 32).wrapping_add(b));
    rng.random()
}

/// `min(l_n, path length)` waypoints times `n_per_waypoint` trajectories
/// of `horizon` noisy steps.
pub fn generate_dataset(chain: &KinematicChain, task: &Task, spec: &DataGenSpec, seed: u64) -> CliResult<TrajectoryDataset> {
    if spec.n_per_waypoint == 0 || spec.horizon == 0 || spec.l_n == 0 {
        return Err(CliError::Usage("l_n, n_per_waypoint and horizon must be positive".into()));
    }
    let nominal = nominal_trajectory(chain, task, spec, seed)?;
    let nq = chain.n_q();
    let lim = chain.limits();
    let noise = ProcessNoise::iid(2 * nq, spec.sim.noise);
    let waypoints: Vec<JointState> = nominal
        .path
        .iter()
        .zip(std::iter::once(vec![0.0; nq]).chain(nominal.trajectory.iter().map(|r| r.qdot.clone())))
        .take(spec.l_n)
        .map(|(q, qd)| JointState { q: DVector::from_vec(q.clone()), qdot: DVector::from_vec(qd) })
        .collect();
    let nominal_u: Vec<Vec<f64>> = nominal.trajectory.iter().map(|r| r.u.clone()).collect();
    let (n, h) = (spec.n_per_waypoint, spec.horizon);
    let mcfg = MppiConfig { n_samples: n, horizon: h, ..spec.nominal.mppi.clone() };
    let blocks: Vec<(Array3<f64>, Array3<f64>)> = waypoints
        .par_iter()
        .enumerate()
        .map(|(k, w)| -> CliResult<_> {
            let mean = nalgebra::DMatrix::from_fn(h, nq, |t, j| nominal_u.get(k + t).map_or(0.0, |u| u[j]));
            let policy = PolicyParams { mean, cov_diag: nalgebra::DMatrix::from_element(h, nq, mcfg.init_cov) };
            let controls = halton_spline_samples(&policy, &mcfg, &lim.u_max, k as u64);
            let mut states = Array3::zeros((n, h + 1, 2 * nq));
            for s in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, k as u64, s as u64));
                let mut x = JointState {
                    q: w.q.map(|v| v + rng.random_range(-spec.q_offset..=spec.q_offset)),
                    qdot: w.qdot.map(|v| v + rng.random_range(-spec.qdot_offset..=spec.qdot_offset)),
                };
                let sim = SimConfig::new(spec.sim.dt, noise.clone(), mix(seed ^ 0xD47A, k as u64, s as u64), h)?;
                for (j, v) in x.to_vector().iter().enumerate() {
                    states[[s, 0, j]] = *v;
                }
                for t in 0..h {
                    let u = DVector::from_fn(nq, |j, _| controls[[s, t, j]]);
                    x = true_step(&x, &u, &sim, lim, t as u64);
                    for (j, v) in x.to_vector().iter().enumerate() {
                        states[[s, t + 1, j]] = *v;
                    }
                }
            }
            Ok((states, controls))
        })
        .collect::<CliResult<_>>()?;
    let total = blocks.len() * n;
    let mut states = Array3::zeros((total, h + 1, 2 * nq));
    let mut controls = Array3::zeros((total, h, nq));
    for (b, (s, c)) in blocks.into_iter().enumerate() {
        states.slice_mut(ndarray::s![b * n..(b + 1) * n, .., ..]).assign(&s);
        controls.slice_mut(ndarray::s![b * n..(b + 1) * n, .., ..]).assign(&c);
    }
    Ok(TrajectoryDataset::new(states, controls)?)
}

/// One-step transitions `(x, u, x_next)` over the first `steps` steps of
/// the given trajectories.
pub fn transitions(d: &TrajectoryDataset, idx: &[usize], steps: usize) -> Vec<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let (nx, nu) = (d.state_dim(), d.control_dim());
    let mut out = Vec::new();
    for &i in idx {
        for t in 0..steps.min(d.horizon()) {
            out.push((
                DVector::from_fn(nx, |j, _| d.states[[i, t, j]]),
                DVector::from_fn(nu, |j, _| d.controls[[i, t, j]]),
                DVector::from_fn(nx, |j, _| d.states[[i, t + 1, j]]),
            ));
        }
    }
    out
}

/// One-step position error of the noise-free integrator under iid noise:
/// the position components of the noise itself.
pub fn integrator_error(noise: ScalarDistribution, n_q: usize) -> Vec<ScalarDistribution> {
    vec![noise; n_q]
}

/// Fits the model's one-step error on the first transition of held-out
/// trajectories, whose start states follow the distribution the encoder
/// was trained on.
pub fn fit_one_step_error<M: RolloutModel>(model: &M, d: &TrajectoryDataset, idx: &[usize]) -> CliResult<Vec<ScalarDistribution>> {
    Ok(riskbound::planner::one_step_error_model(model, &transitions(d, idx, 1))?)
}
