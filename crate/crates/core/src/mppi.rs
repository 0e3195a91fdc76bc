//! Sampling-based MPC with a diagonal Gaussian policy over the horizon.
//!
//! Perturbations are drawn from Halton points mapped to normal quantiles,
//! placed on a few B-spline knots per joint and smoothed over the horizon.

use nalgebra::{DMatrix, DVector, Vector3};
use ndarray::{Array2, Array3, ArrayView1, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::arm::{JointState, KinematicChain, Limits};
use crate::desko::DeskoModel;
use crate::error::{Error, Result};
use crate::lowdisc::{primes, radical_inverse};
use crate::polyrisk::RiskContourMap;
use crate::simenv::{collision_cost, nominal_step, GoalRegion};

/// Halton points skipped at the start of every base.
pub const HALTON_BURN_IN: u64 = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MppiConfig {
    pub n_samples: usize,
    pub horizon: usize,
    /// Optimization iterations per control step.
    pub iterations: usize,
    pub gamma: f64,
    pub alpha_mu: f64,
    pub alpha_sigma: f64,
    pub beta_temp: f64,
    pub n_knots: usize,
    pub cov_floor: f64,
    /// Covariance the policy starts from and appends when shifting.
    pub init_cov: f64,
}

impl Default for MppiConfig {
    fn default() -> Self {
        MppiConfig {
            n_samples: 1000,
            horizon: 15,
            iterations: 2,
            gamma: 0.98,
            alpha_mu: 0.7,
            alpha_sigma: 0.3,
            beta_temp: 1.0,
            n_knots: 5,
            cov_floor: 1e-4,
            init_cov: 0.25,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_samples >= 1
            && self.horizon >= 1
            && (0.0..=1.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.alpha_mu)
            && (0.0..=1.0).contains(&self.alpha_sigma)
            && self.beta_temp > 0.0
            && self.n_knots >= 4
            && self.cov_floor > 0.0
            && self.init_cov >= self.cov_floor;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid MPPI configuration {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub alpha_p: f64,
    pub alpha_o: f64,
    pub alpha_c: f64,
    pub alpha_lim: f64,
    /// Penalty attached to a control sequence whose first step failed
    /// certification.
    pub alpha_cert: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { alpha_p: 10.0, alpha_o: 0.1, alpha_c: 10.0, alpha_lim: 10.0, alpha_cert: 1e6 }
    }
}

/// Per-step mean and diagonal covariance of the control policy, both
/// `[H, control_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub mean: DMatrix<f64>,
    pub cov_diag: DMatrix<f64>,
}

impl PolicyParams {
    pub fn new(horizon: usize, control_dim: usize, init_cov: f64) -> Self {
        PolicyParams {
            mean: DMatrix::zeros(horizon, control_dim),
            cov_diag: DMatrix::from_element(horizon, control_dim, init_cov),
        }
    }

    pub fn horizon(&self) -> usize {
        self.mean.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.mean.ncols()
    }
}

/// Costs of one batch of rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutCosts {
    pub per_sample_total: Vec<f64>,
    /// `[N, H]` undiscounted step costs.
    pub per_step: Array2<f64>,
    pub weights: Vec<f64>,
}

/// Basis matrix `[H, n_knots]` of the clamped uniform cubic B-spline,
/// evaluated at `H` evenly spaced parameters in `[0, 1]`.
pub fn bspline_basis(horizon: usize, n_knots: usize) -> DMatrix<f64> {
    const P: usize = 3;
    let n_inner = n_knots - P - 1;
    let mut knots = vec![0.0; P + 1];
    knots.extend((1..=n_inner).map(|i| i as f64 / (n_inner + 1) as f64));
    knots.extend(vec![1.0; P + 1]);
    DMatrix::from_fn(horizon, n_knots, |h, i| {
        let t = if horizon == 1 { 0.0 } else { h as f64 / (horizon - 1) as f64 };
        cox_de_boor(&knots, i, P, t)
    })
}

fn cox_de_boor(knots: &[f64], i: usize, p: usize, t: f64) -> f64 {
    if p == 0 {
        let last = knots[knots.len() - 1];
        let inside = knots[i] <= t && t < knots[i + 1];
        // Close the final non-empty span on the right.
        let at_end = t == last && knots[i] < knots[i + 1] && knots[i + 1] == last;
        return if inside || at_end { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d1 = knots[i + p] - knots[i];
    if d1 > 0.0 {
        v += (t - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, t);
    }
    let d2 = knots[i + p + 1] - knots[i + 1];
    if d2 > 0.0 {
        v += (knots[i + p + 1] - t) / d2 * cox_de_boor(knots, i + 1, p - 1, t);
    }
    v
}

/// `N` control sequences `[N, H, control_dim]`: sample 0 is the clipped
/// mean; the rest add spline-smoothed Gaussian perturbations built from
/// Halton points offset by `iteration_index · N`.
pub fn halton_spline_samples(p: &PolicyParams, cfg: &MppiConfig, u_max: &[f64], iteration_index: u64) -> Array3<f64> {
    let (h, nu, n, nk) = (p.horizon(), p.control_dim(), cfg.n_samples, cfg.n_knots);
    let basis = bspline_basis(h, nk);
    let bases = primes(nu * nk);
    let normal = Normal::standard();
    let knot_step: Vec<usize> =
        (0..nk).map(|k| ((k as f64 / (nk - 1) as f64) * (h - 1) as f64).round() as usize).collect();
    let mut out = Array3::zeros((n, h, nu));
    for s in 0..n {
        let mut knots = DMatrix::zeros(nk, nu);
        if s > 0 {
            let index = HALTON_BURN_IN + iteration_index * n as u64 + s as u64;
            for j in 0..nu {
                for k in 0..nk {
                    let z = normal.inverse_cdf(radical_inverse(index, bases[j * nk + k]));
                    knots[(k, j)] = z * p.cov_diag[(knot_step[k], j)].sqrt();
                }
            }
        }
        let pert = &basis * knots;
        for t in 0..h {
            for j in 0..nu {
                out[[s, t, j]] = (p.mean[(t, j)] + pert[(t, j)]).clamp(-u_max[j], u_max[j]);
            }
        }
    }
    out
}

/// Stage cost `ĉ(x, u)` of a rollout step.
pub trait StepCost: Sync {
    fn step_cost(&self, x: ArrayView1<f64>, u: ArrayView1<f64>) -> f64;
}

/// Reaching cost of a manipulator among risk contours.
#[derive(Clone, Debug)]
pub struct ArmScene<'a> {
    pub chain: &'a KinematicChain,
    pub map: &'a RiskContourMap,
    pub goal: GoalRegion,
    /// Desired end-effector approach axis; no orientation cost when absent.
    pub goal_axis: Option<Vector3<f64>>,
    pub weights: CostWeights,
}

impl StepCost for ArmScene<'_> {
    fn step_cost(&self, x: ArrayView1<f64>, u: ArrayView1<f64>) -> f64 {
        let n = self.chain.n_q();
        let q: Vec<f64> = x.iter().take(n).copied().collect();
        let w = &self.weights;
        let ee = self.chain.end_effector(&q);
        let mut c = w.alpha_p * (ee - self.goal.center()).norm();
        if let Some(axis) = self.goal_axis {
            if w.alpha_o > 0.0 {
                let cos = self.chain.approach_axis(&q).dot(&axis.normalize()).clamp(-1.0, 1.0);
                c += w.alpha_o * cos.acos();
            }
        }
        if w.alpha_c > 0.0 {
            c += collision_cost(&q, self.chain, self.map, w.alpha_c);
        }
        if w.alpha_lim > 0.0 {
            let state = JointState {
                q: DVector::from_vec(q),
                qdot: DVector::from_iterator(n, x.iter().skip(n).take(n).copied()),
            };
            let uu = DVector::from_iterator(n, u.iter().copied());
            c += w.alpha_lim * crate::arm::within_limits(&state, &uu, self.chain.limits()).1;
        }
        c
    }
}

/// Discounted rollout costs and their exponential weights
/// `exp(-(C_i - min C) / β)`.
pub fn evaluate_costs<C: StepCost>(
    states: ArrayView3<f64>,
    controls: ArrayView3<f64>,
    cost: &C,
    cfg: &MppiConfig,
) -> Result<RolloutCosts> {
    let (n, h, _) = states.dim();
    if controls.dim().0 != n || controls.dim().1 != h {
        return Err(Error::Shape(format!("states {:?} vs controls {:?}", states.dim(), controls.dim())));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|s| {
            (0..h)
                .map(|t| cost.step_cost(states.index_axis(Axis(0), s).row(t), controls.index_axis(Axis(0), s).row(t)))
                .collect()
        })
        .collect();
    let mut per_step = Array2::zeros((n, h));
    let mut totals = Vec::with_capacity(n);
    for (s, row) in rows.iter().enumerate() {
        let mut total = 0.0;
        let mut disc = 1.0;
        for (t, &c) in row.iter().enumerate() {
            per_step[[s, t]] = c;
            total += disc * c;
            disc *= cfg.gamma;
        }
        totals.push(if total.is_nan() { f64::INFINITY } else { total });
    }
    let weights = softmax_weights(&totals, cfg.beta_temp);
    Ok(RolloutCosts { per_sample_total: totals, per_step, weights })
}

/// Baseline-subtracted exponential weights.
pub fn softmax_weights(totals: &[f64], beta: f64) -> Vec<f64> {
    let min = totals.iter().copied().fold(f64::INFINITY, f64::min);
    totals.iter().map(|&c| if c.is_finite() { (-(c - min) / beta).exp() } else { 0.0 }).collect()
}

/// Weighted mean / covariance step: the mean moves toward the weighted
/// sample average by `α_μ`, the diagonal covariance toward the weighted
/// spread around the new mean by `α_σ`, floored at `cov_floor`.
pub fn update_policy(p: &PolicyParams, controls: ArrayView3<f64>, costs: &RolloutCosts, cfg: &MppiConfig) -> Result<PolicyParams> {
    let wsum: f64 = costs.weights.iter().sum();
    if !(wsum > 0.0) || !wsum.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let (h, nu) = (p.horizon(), p.control_dim());
    let mut avg = DMatrix::zeros(h, nu);
    for (s, &w) in costs.weights.iter().enumerate() {
        if w > 0.0 {
            for t in 0..h {
                for j in 0..nu {
                    avg[(t, j)] += w * controls[[s, t, j]];
                }
            }
        }
    }
    avg /= wsum;
    let mean = p.mean.scale(1.0 - cfg.alpha_mu) + avg.scale(cfg.alpha_mu);
    let mut spread = DMatrix::zeros(h, nu);
    for (s, &w) in costs.weights.iter().enumerate() {
        if w > 0.0 {
            for t in 0..h {
                for j in 0..nu {
                    let d = controls[[s, t, j]] - mean[(t, j)];
                    spread[(t, j)] += w * d * d;
                }
            }
        }
    }
    spread /= wsum;
    let cov = (p.cov_diag.scale(1.0 - cfg.alpha_sigma) + spread.scale(cfg.alpha_sigma)).map(|v| v.max(cfg.cov_floor));
    Ok(PolicyParams { mean, cov_diag: cov })
}

/// Drops the first step and appends the defaults at the end.
pub fn shift_policy(p: &PolicyParams, default_u: &[f64], default_cov: &[f64]) -> PolicyParams {
    let (h, nu) = (p.horizon(), p.control_dim());
    let shift = |m: &DMatrix<f64>, last: &[f64]| DMatrix::from_fn(h, nu, |t, j| if t + 1 < h { m[(t + 1, j)] } else { last[j] });
    PolicyParams { mean: shift(&p.mean, default_u), cov_diag: shift(&p.cov_diag, default_cov) }
}

/// First mean control, clipped to the control bound.
pub fn select_command(p: &PolicyParams, u_max: &[f64]) -> DVector<f64> {
    DVector::from_fn(p.control_dim(), |j, _| p.mean[(0, j)].clamp(-u_max[j], u_max[j]))
}

/// A model that predicts state trajectories for batches of control sequences.
pub trait RolloutModel: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    /// Predicted states `[N, H, state_dim]` after each control.
    fn rollout(&self, x0: &DVector<f64>, controls: ArrayView3<f64>, seed: Option<u64>) -> Result<Array3<f64>>;
}

impl RolloutModel for DeskoModel {
    fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    fn control_dim(&self) -> usize {
        self.config.control_dim
    }

    fn rollout(&self, x0: &DVector<f64>, controls: ArrayView3<f64>, seed: Option<u64>) -> Result<Array3<f64>> {
        self.rollout_batch(x0, controls, seed)
    }
}

/// The noise-free velocity integrator of the simulator, used as an exact
/// reference model.
#[derive(Clone, Debug)]
pub struct IntegratorModel {
    pub dt: f64,
    pub limits: Limits,
}

impl RolloutModel for IntegratorModel {
    fn state_dim(&self) -> usize {
        2 * self.limits.u_max.len()
    }

    fn control_dim(&self) -> usize {
        self.limits.u_max.len()
    }

    fn rollout(&self, x0: &DVector<f64>, controls: ArrayView3<f64>, _seed: Option<u64>) -> Result<Array3<f64>> {
        let (n, h, nu) = controls.dim();
        let start = JointState::from_vector(x0)?;
        let mut out = Array3::zeros((n, h, 2 * nu));
        for s in 0..n {
            let mut x = start.clone();
            for t in 0..h {
                let u = DVector::from_fn(nu, |j, _| controls[[s, t, j]]);
                x = nominal_step(&x, &u, self.dt, &self.limits);
                for j in 0..nu {
                    out[[s, t, j]] = x.q[j];
                    out[[s, t, nu + j]] = x.qdot[j];
                }
            }
        }
        Ok(out)
    }
}

/// A control sequence forced into the sample set with an extra cost.
#[derive(Clone, Debug)]
pub struct InjectedSample {
    /// `[H, control_dim]`.
    pub controls: DMatrix<f64>,
    pub penalty: f64,
}

/// Result of one sample / rollout / update pass.
#[derive(Clone, Debug)]
pub struct IterationOutcome {
    pub policy: PolicyParams,
    pub best_cost: f64,
    pub mean_cost: f64,
}

/// Model, cost and settings shared by every MPPI iteration of a task.
pub struct Optimizer<'a, M: RolloutModel, C: StepCost> {
    pub model: &'a M,
    pub cost: &'a C,
    pub cfg: &'a MppiConfig,
    pub u_max: &'a [f64],
}

impl<M: RolloutModel, C: StepCost> Optimizer<'_, M, C> {
    /// One sample / rollout / update pass from state `x0`.
    pub fn iterate(
        &self,
        p: &PolicyParams,
        x0: &DVector<f64>,
        iteration_index: u64,
        rollout_seed: Option<u64>,
        injected: &[InjectedSample],
    ) -> Result<IterationOutcome> {
        let (cfg, u_max) = (self.cfg, self.u_max);
        let base = halton_spline_samples(p, cfg, u_max, iteration_index);
        let (n, h, nu) = base.dim();
        let controls = if injected.is_empty() {
            base
        } else {
            let mut all = Array3::zeros((n + injected.len(), h, nu));
            all.slice_mut(ndarray::s![..n, .., ..]).assign(&base);
            for (i, inj) in injected.iter().enumerate() {
                for t in 0..h {
                    for j in 0..nu {
                        all[[n + i, t, j]] = inj.controls[(t, j)];
                    }
                }
            }
            all
        };
        let states = self.model.rollout(x0, controls.view(), rollout_seed)?;
        let mut costs = evaluate_costs(states.view(), controls.view(), self.cost, cfg)?;
        if !injected.is_empty() {
            for (i, inj) in injected.iter().enumerate() {
                costs.per_sample_total[n + i] += inj.penalty;
            }
            costs.weights = softmax_weights(&costs.per_sample_total, cfg.beta_temp);
        }
        let policy = update_policy(p, controls.view(), &costs, cfg)?;
        Ok(IterationOutcome {
            policy,
            best_cost: costs.per_sample_total.iter().copied().fold(f64::INFINITY, f64::min),
            mean_cost: costs.per_sample_total[0],
        })
    }
}
