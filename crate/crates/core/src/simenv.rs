//! Kinematic ground-truth simulator: noisy velocity-command integration, the
//! coarse collision cost and the goal test.

use nalgebra::{DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{JointState, KinematicChain, Limits};
use crate::error::{Error, Result};
use crate::polyrisk::{RiskContourMap, ScalarDistribution};

/// Independent additive noise on each state component `[q, qdot]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessNoise {
    pub components: Vec<ScalarDistribution>,
}

impl ProcessNoise {
    pub fn iid(state_dim: usize, d: ScalarDistribution) -> Self {
        ProcessNoise { components: vec![d; state_dim] }
    }

    pub fn zero(state_dim: usize) -> Self {
        Self::iid(state_dim, ScalarDistribution::gaussian(0.0, 0.0))
    }

    pub fn validate(&self) -> Result<()> {
        self.components.iter().try_for_each(|d| d.validate())
    }

    /// The noise draw applied at `step` of an episode seeded with `seed`.
    pub fn draw(&self, seed: u64, step: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        DVector::from_iterator(self.components.len(), self.components.iter().map(|d| d.sample(&mut rng)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub noise: ProcessNoise,
    pub seed: u64,
    pub max_steps: usize,
}

impl SimConfig {
    pub fn new(dt: f64, noise: ProcessNoise, seed: u64, max_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || max_steps == 0 {
            return Err(Error::InvalidInput(format!("dt {dt} and max_steps {max_steps} must be positive")));
        }
        noise.validate()?;
        Ok(SimConfig { dt, noise, seed, max_steps })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalRegion {
    pub center: [f64; 3],
    #[serde(default = "default_goal_radius")]
    pub radius: f64,
}

fn default_goal_radius() -> f64 {
    0.1
}

impl GoalRegion {
    pub fn new(center: [f64; 3], radius: f64) -> Self {
        GoalRegion { center, radius }
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }
}

/// Noise-free core of the dynamics: commanded velocity clipped to the
/// control bound, position integrated and clipped to the joint range.
pub fn nominal_step(x: &JointState, u: &DVector<f64>, dt: f64, lim: &Limits) -> JointState {
    let qdot = lim.clip_control(u);
    let q = DVector::from_fn(x.q.len(), |i, _| (x.q[i] + qdot[i] * dt).clamp(lim.q_min[i], lim.q_max[i]));
    JointState { q, qdot }
}

/// One step of the true system: the nominal step plus a process-noise draw
/// on the full state, reproducible from `(cfg.seed, step_index)`.
pub fn true_step(x: &JointState, u: &DVector<f64>, cfg: &SimConfig, lim: &Limits, step_index: u64) -> JointState {
    let next = nominal_step(x, u, cfg.dt, lim);
    let w = cfg.noise.draw(cfg.seed, step_index);
    let n = next.q.len();
    JointState {
        q: DVector::from_fn(n, |i, _| next.q[i] + w[i]),
        qdot: DVector::from_fn(n, |i, _| next.qdot[i] + w[n + i]),
    }
}

/// Cost of one surface point: its risk bound when above tolerance plus the
/// negative part of every contour's mean obstacle value.
pub fn point_collision_cost(pt: &[f64; 3], m: &RiskContourMap) -> f64 {
    let Some(delta) = m.delta() else { return 0.0 };
    let mut risk: f64 = 0.0;
    let mut depth = 0.0;
    for c in m.contours() {
        let mem = c.membership_xyz(pt);
        risk = risk.max(mem.risk_bound);
        depth += (-c.eval_moments(pt).1).max(0.0);
    }
    let over = if risk > delta { risk } else { 0.0 };
    over + depth
}

/// Coarse collision cost of the arm at `q`, zero iff every sampled link
/// point is inside the safe set.
pub fn collision_cost(q: &[f64], chain: &KinematicChain, m: &RiskContourMap, alpha_c: f64) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let total: f64 = chain
        .link_occupancy(q)
        .iter()
        .flatten()
        .map(|p| point_collision_cost(&[p.x, p.y, p.z], m))
        .sum();
    alpha_c * total
}

pub fn at_goal(ee: &Vector3<f64>, g: &GoalRegion) -> bool {
    (ee - g.center()).norm() <= g.radius
}
