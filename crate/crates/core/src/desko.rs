//! Stochastic Koopman model of the controlled arm.
//!
//! A state is lifted to observables `ψ = λ(x) + ε ⊙ σ(x)` by two one-layer
//! networks, propagated linearly by `ψ' = Aψ + Bu` and decoded by `x = Cψ`.
//! States and controls are z-scored with dataset statistics stored in the
//! model; the lifted dynamics act on the normalized quantities.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor added to the softplus standard-deviation head.
pub const STD_FLOOR: f64 = 1e-6;
const INIT_STD: f64 = 0.3;
const LN_2PI_E: f64 = 2.837_877_066_409_345_5;

fn default_entropy_target_for(lift_dim: usize) -> f64 {
    lift_dim as f64 * 0.5 * (LN_2PI_E + 0.01f64.ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskoConfig {
    pub state_dim: usize,
    pub control_dim: usize,
    pub lift_dim: usize,
    /// Hidden widths of the encoder networks; exactly one layer is supported.
    pub encoder_widths: Vec<usize>,
    pub horizon: usize,
    /// Adam step for `A`, `B`, `C`.
    pub lr_linear: f64,
    /// Adam step for both encoder networks.
    pub lr_encoder: f64,
    pub entropy_target: f64,
    pub entropy_weight: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub holdout_fraction: f64,
}

impl Default for DeskoConfig {
    fn default() -> Self {
        DeskoConfig::new(6, 3)
    }
}

impl DeskoConfig {
    pub fn new(state_dim: usize, control_dim: usize) -> Self {
        DeskoConfig {
            state_dim,
            control_dim,
            lift_dim: 34,
            encoder_widths: vec![64],
            horizon: 15,
            lr_linear: 1e-2,
            lr_encoder: 1e-3,
            entropy_target: default_entropy_target_for(34),
            entropy_weight: 0.1,
            batch_size: 256,
            epochs: 500,
            holdout_fraction: 0.1,
        }
    }

    /// Sets the lift dimension and the matching default entropy target.
    pub fn with_lift_dim(mut self, lift_dim: usize) -> Self {
        self.lift_dim = lift_dim;
        self.entropy_target = default_entropy_target_for(lift_dim);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.lift_dim <= self.state_dim || self.horizon == 0 || self.state_dim == 0 || self.control_dim == 0 {
            return Err(Error::InvalidInput(format!(
                "need lift_dim > state_dim > 0, control_dim > 0 and horizon >= 1 (got {}, {}, {}, {})",
                self.lift_dim, self.state_dim, self.control_dim, self.horizon
            )));
        }
        if self.encoder_widths.len() != 1 || self.encoder_widths[0] == 0 {
            return Err(Error::InvalidInput("encoder must have exactly one non-empty hidden layer".into()));
        }
        if self.batch_size == 0 || !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::InvalidInput("batch_size must be positive and holdout_fraction in [0, 1)".into()));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        self.encoder_widths[0]
    }
}

/// Per-dimension z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub u_mean: Vec<f64>,
    pub u_std: Vec<f64>,
}

fn stats(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 1e-9 { std } else { 1.0 })
}

impl Normalization {
    pub fn identity(state_dim: usize, control_dim: usize) -> Self {
        Normalization {
            x_mean: vec![0.0; state_dim],
            x_std: vec![1.0; state_dim],
            u_mean: vec![0.0; control_dim],
            u_std: vec![1.0; control_dim],
        }
    }

    pub fn from_dataset(d: &TrajectoryDataset) -> Self {
        let (nx, nu) = (d.state_dim(), d.control_dim());
        let mut n = Normalization::identity(nx, nu);
        for j in 0..nx {
            (n.x_mean[j], n.x_std[j]) = stats(d.states.index_axis(ndarray::Axis(2), j).iter().copied());
        }
        for j in 0..nu {
            (n.u_mean[j], n.u_std[j]) = stats(d.controls.index_axis(ndarray::Axis(2), j).iter().copied());
        }
        n
    }

    fn norm_x(&self, j: usize, v: f64) -> f64 {
        (v - self.x_mean[j]) / self.x_std[j]
    }

    fn norm_u(&self, j: usize, v: f64) -> f64 {
        (v - self.u_mean[j]) / self.u_std[j]
    }

    fn denorm_x(&self, j: usize, v: f64) -> f64 {
        self.x_mean[j] + self.x_std[j] * v
    }
}

/// Trajectories of `H + 1` states driven by `H` controls.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    /// `[n_traj, H + 1, state_dim]`.
    pub states: Array3<f64>,
    /// `[n_traj, H, control_dim]`.
    pub controls: Array3<f64>,
}

impl TrajectoryDataset {
    pub fn new(states: Array3<f64>, controls: Array3<f64>) -> Result<Self> {
        let (n, h1, _) = states.dim();
        let (m, h, _) = controls.dim();
        if n != m || h1 != h + 1 || h == 0 {
            return Err(Error::Shape(format!("states {:?} vs controls {:?}", states.dim(), controls.dim())));
        }
        if states.iter().chain(controls.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset entries".into()));
        }
        Ok(TrajectoryDataset { states, controls })
    }

    pub fn len(&self) -> usize {
        self.states.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizon(&self) -> usize {
        self.controls.dim().1
    }

    pub fn state_dim(&self) -> usize {
        self.states.dim().2
    }

    pub fn control_dim(&self) -> usize {
        self.controls.dim().2
    }

    /// Deterministic train / held-out index split.
    pub fn split(&self, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_hold = ((self.len() as f64 * holdout_fraction).round() as usize).clamp(usize::from(holdout_fraction > 0.0), self.len().saturating_sub(1));
        let held = idx.split_off(self.len() - n_hold);
        (idx, held)
    }
}

/// Normalized minibatch: samples are columns.
#[derive(Clone, Debug)]
pub struct Batch {
    x0: DMatrix<f64>,
    u: Vec<DMatrix<f64>>,
    y: Vec<DMatrix<f64>>,
}

impl Batch {
    pub fn from_indices(d: &TrajectoryDataset, norm: &Normalization, idx: &[usize], horizon: usize) -> Result<Self> {
        if horizon > d.horizon() || idx.is_empty() {
            return Err(Error::Shape(format!("batch of {} with horizon {horizon} > {}", idx.len(), d.horizon())));
        }
        let (nx, nu, b) = (d.state_dim(), d.control_dim(), idx.len());
        let x_at = |k: usize| DMatrix::from_fn(nx, b, |j, s| norm.norm_x(j, d.states[[idx[s], k, j]]));
        Ok(Batch {
            x0: x_at(0),
            u: (0..horizon).map(|k| DMatrix::from_fn(nu, b, |j, s| norm.norm_u(j, d.controls[[idx[s], k, j]]))).collect(),
            y: (1..=horizon).map(x_at).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.x0.ncols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskoModel {
    pub config: DeskoConfig,
    pub norm: Normalization,
    pub w1: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub v1: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    pub v2: DMatrix<f64>,
    pub c2: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

pub const PARAM_NAMES: [&str; 11] = ["w1", "b1", "w2", "b2", "v1", "c1", "v2", "c2", "a", "b", "c"];
/// Tensors trained at the linear-map learning rate.
const LINEAR_PARAMS: [usize; 3] = [8, 9, 10];

/// Lifted encoding of one state.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub psi: DVector<f64>,
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

/// Loss value and its parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub entropy: f64,
    pub entropy_penalty: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Standard-normal lift noise, one column per sample.
pub fn draw_eps(lift_dim: usize, n: usize, seed: u64) -> DMatrix<f64> {
    gaussian_matrix(lift_dim, n, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn add_col(m: &mut DMatrix<f64>, v: &DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        col += v.column(0);
    }
}

fn row_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), 1, |i, _| m.row(i).sum())
}

struct EncoderPass {
    z1: DMatrix<f64>,
    h1: DMatrix<f64>,
    z1s: DMatrix<f64>,
    h1s: DMatrix<f64>,
    spre: DMatrix<f64>,
    mean: DMatrix<f64>,
    std: DMatrix<f64>,
}

struct ForwardPass {
    enc: EncoderPass,
    psi: Vec<DMatrix<f64>>,
    yhat: Vec<DMatrix<f64>>,
    entropy: f64,
}

impl DeskoModel {
    /// Fresh model: `A = I`, small random `B`, scaled-random encoder and
    /// decoder, standard deviations starting near `INIT_STD`.
    pub fn init(config: DeskoConfig, norm: Normalization, seed: u64) -> Result<Self> {
        config.validate()?;
        if norm.x_mean.len() != config.state_dim || norm.u_mean.len() != config.control_dim {
            return Err(Error::Shape("normalization does not match config dimensions".into()));
        }
        let (nx, nu, l, h) = (config.state_dim, config.control_dim, config.lift_dim, config.hidden());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_bias = (INIT_STD.exp() - 1.0).ln();
        Ok(DeskoModel {
            w1: gaussian_matrix(h, nx, (2.0 / nx as f64).sqrt(), &mut rng),
            b1: DMatrix::from_element(h, 1, 0.01),
            w2: gaussian_matrix(l, h, (1.0 / h as f64).sqrt(), &mut rng),
            b2: DMatrix::zeros(l, 1),
            v1: gaussian_matrix(h, nx, (2.0 / nx as f64).sqrt(), &mut rng),
            c1: DMatrix::from_element(h, 1, 0.01),
            v2: gaussian_matrix(l, h, 0.01 / (h as f64).sqrt(), &mut rng),
            c2: DMatrix::from_element(l, 1, std_bias),
            a: DMatrix::identity(l, l),
            b: gaussian_matrix(l, nu, 0.1 / (nu as f64).sqrt(), &mut rng),
            c: gaussian_matrix(nx, l, 1.0 / (l as f64).sqrt(), &mut rng),
            config,
            norm,
        })
    }

    pub fn tensors(&self) -> [&DMatrix<f64>; 11] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.v1, &self.c1, &self.v2, &self.c2, &self.a, &self.b, &self.c]
    }

    pub fn tensors_mut(&mut self) -> [&mut DMatrix<f64>; 11] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.v1,
            &mut self.c1,
            &mut self.v2,
            &mut self.c2,
            &mut self.a,
            &mut self.b,
            &mut self.c,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.config.control_dim
    }

    pub fn lift_dim(&self) -> usize {
        self.config.lift_dim
    }

    fn encode_normalized(&self, x0: &DMatrix<f64>) -> EncoderPass {
        let mut z1 = &self.w1 * x0;
        add_col(&mut z1, &self.b1);
        let h1 = z1.map(|v| v.max(0.0));
        let mut mean = &self.w2 * &h1;
        add_col(&mut mean, &self.b2);
        let mut z1s = &self.v1 * x0;
        add_col(&mut z1s, &self.c1);
        let h1s = z1s.map(|v| v.max(0.0));
        let mut spre = &self.v2 * &h1s;
        add_col(&mut spre, &self.c2);
        let std = spre.map(|v| softplus(v) + STD_FLOOR);
        EncoderPass { z1, h1, z1s, h1s, spre, mean, std }
    }

    fn normalized_state(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::Shape(format!("state of length {} for dimension {}", x.len(), self.state_dim())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state passed to encoder".into()));
        }
        Ok(DMatrix::from_fn(x.len(), 1, |j, _| self.norm.norm_x(j, x[j])))
    }

    fn normalized_control(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |j, _| self.norm.norm_u(j, u[j]))
    }

    /// Lifts a raw state with the given noise draw.
    pub fn encode(&self, x: &DVector<f64>, eps: &DVector<f64>) -> Result<Encoding> {
        if eps.len() != self.lift_dim() {
            return Err(Error::Shape(format!("eps of length {} for lift dimension {}", eps.len(), self.lift_dim())));
        }
        let enc = self.encode_normalized(&self.normalized_state(x)?);
        let mean = enc.mean.column(0).into_owned();
        let std = enc.std.column(0).into_owned();
        Ok(Encoding { psi: &mean + eps.component_mul(&std), mean, std })
    }

    /// `Aψ + Bũ` with `ũ` the normalized control.
    pub fn propagate(&self, psi: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * psi + &self.b * self.normalized_control(u)
    }

    /// Raw state decoded from observables.
    pub fn decode(&self, psi: &DVector<f64>) -> DVector<f64> {
        let z = &self.c * psi;
        DVector::from_fn(z.len(), |j, _| self.norm.denorm_x(j, z[j]))
    }

    /// Deterministic one-step prediction (`ε = 0`).
    pub fn predict_next(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let e = self.encode(x, &DVector::zeros(self.lift_dim()))?;
        Ok(self.decode(&self.propagate(&e.psi, u)))
    }

    /// `N` rollouts from one initial state, each with its own lift noise
    /// (or none when `seed` is `None`). Returns raw states `[N, H, state_dim]`.
    pub fn rollout_batch(&self, x0: &DVector<f64>, controls: ArrayView3<f64>, seed: Option<u64>) -> Result<Array3<f64>> {
        let (n, h, nu) = controls.dim();
        if nu != self.control_dim() {
            return Err(Error::Shape(format!("controls have {nu} channels, model expects {}", self.control_dim())));
        }
        let enc = self.encode_normalized(&self.normalized_state(x0)?);
        let l = self.lift_dim();
        let mut psi = DMatrix::from_fn(l, n, |i, _| enc.mean[(i, 0)]);
        if let Some(seed) = seed {
            let eps = draw_eps(l, n, seed);
            for s in 0..n {
                for i in 0..l {
                    psi[(i, s)] += eps[(i, s)] * enc.std[(i, 0)];
                }
            }
        }
        let nx = self.state_dim();
        let mut out = Array3::zeros((n, h, nx));
        for k in 0..h {
            let u = DMatrix::from_fn(nu, n, |j, s| self.norm.norm_u(j, controls[[s, k, j]]));
            psi = &self.a * &psi + &self.b * u;
            let y = &self.c * &psi;
            for s in 0..n {
                for j in 0..nx {
                    out[[s, k, j]] = self.norm.denorm_x(j, y[(j, s)]);
                }
            }
        }
        Ok(out)
    }

    fn forward(&self, batch: &Batch, eps: Option<&DMatrix<f64>>) -> ForwardPass {
        let enc = self.encode_normalized(&batch.x0);
        let mut psi0 = enc.mean.clone();
        if let Some(eps) = eps {
            psi0 += eps.component_mul(&enc.std);
        }
        let h = batch.u.len();
        let mut psi = Vec::with_capacity(h + 1);
        let mut yhat = Vec::with_capacity(h);
        psi.push(psi0);
        for k in 0..h {
            let next = &self.a * &psi[k] + &self.b * &batch.u[k];
            yhat.push(&self.c * &next);
            psi.push(next);
        }
        let l = self.lift_dim() as f64;
        let entropy = l * 0.5 * LN_2PI_E + enc.std.iter().map(|s| s.ln()).sum::<f64>() / batch.size() as f64;
        ForwardPass { enc, psi, yhat, entropy }
    }

    fn loss_of(&self, batch: &Batch, f: &ForwardPass) -> LossParts {
        let denom = (batch.size() * batch.u.len()) as f64;
        let mse = f.yhat.iter().zip(&batch.y).map(|(p, y)| (p - y).norm_squared()).sum::<f64>() / denom;
        let entropy_penalty = if self.config.entropy_weight > 0.0 {
            self.config.entropy_weight * (self.config.entropy_target - f.entropy).max(0.0)
        } else {
            0.0
        };
        LossParts { total: mse + entropy_penalty, mse, entropy: f.entropy, entropy_penalty }
    }

    /// Loss on a batch with the lift noise drawn from `seed`.
    pub fn loss(&self, batch: &Batch, seed: u64) -> LossParts {
        let eps = draw_eps(self.lift_dim(), batch.size(), seed);
        self.loss_of(batch, &self.forward(batch, Some(&eps)))
    }

    /// Mean-prediction (`ε = 0`) horizon mse on a batch, normalized units.
    pub fn mean_mse(&self, batch: &Batch) -> f64 {
        self.loss_of(batch, &self.forward(batch, None)).mse
    }

    /// Loss and gradients with respect to every tensor, in `PARAM_NAMES` order.
    pub fn loss_and_grad(&self, batch: &Batch, eps: &DMatrix<f64>) -> (LossParts, Vec<DMatrix<f64>>) {
        let f = self.forward(batch, Some(eps));
        let parts = self.loss_of(batch, &f);
        let h = batch.u.len();
        let scale = 2.0 / (batch.size() * h) as f64;
        let mut ga = DMatrix::zeros(self.a.nrows(), self.a.ncols());
        let mut gb = DMatrix::zeros(self.b.nrows(), self.b.ncols());
        let mut gc = DMatrix::zeros(self.c.nrows(), self.c.ncols());
        // lam holds dL/dψ_k while walking the horizon backwards.
        let mut lam = DMatrix::zeros(self.lift_dim(), batch.size());
        for k in (1..=h).rev() {
            let gy = (&f.yhat[k - 1] - &batch.y[k - 1]) * scale;
            gc += &gy * f.psi[k].transpose();
            lam = self.a.transpose() * &lam + self.c.transpose() * &gy;
            ga += &lam * f.psi[k - 1].transpose();
            gb += &lam * batch.u[k - 1].transpose();
        }
        let lam0 = self.a.transpose() * &lam;

        let enc = &f.enc;
        let mut gstd = lam0.component_mul(eps);
        if self.config.entropy_weight > 0.0 && f.entropy < self.config.entropy_target {
            let w = self.config.entropy_weight / batch.size() as f64;
            gstd.zip_apply(&enc.std, |g, s| *g -= w / s);
        }
        let mut gspre = gstd;
        gspre.zip_apply(&enc.spre, |g, z| *g *= sigmoid(z));
        let (gv1, gc1, gv2, gc2) = Self::layer_grads(&self.v2, &gspre, &enc.h1s, &enc.z1s, &batch.x0);
        let (gw1, gb1, gw2, gb2) = Self::layer_grads(&self.w2, &lam0, &enc.h1, &enc.z1, &batch.x0);
        (parts, vec![gw1, gb1, gw2, gb2, gv1, gc1, gv2, gc2, ga, gb, gc])
    }

    /// Gradients of a ReLU hidden layer followed by a linear output layer,
    /// given the gradient at the output.
    fn layer_grads(
        w_out: &DMatrix<f64>,
        gout: &DMatrix<f64>,
        hidden: &DMatrix<f64>,
        pre: &DMatrix<f64>,
        x0: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let g_out_w = gout * hidden.transpose();
        let g_out_b = row_sums(gout);
        let mut gh = w_out.transpose() * gout;
        gh.zip_apply(pre, |g, z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        let g_in_w = &gh * x0.transpose();
        let g_in_b = row_sums(&gh);
        (g_in_w, g_in_b, g_out_w, g_out_b)
    }

    /// Parameter `i` in the flattened `PARAM_NAMES` order.
    pub fn param(&self, i: usize) -> f64 {
        let (t, k) = self.locate(i);
        self.tensors()[t][k]
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        let (t, k) = self.locate(i);
        self.tensors_mut()[t][k] = v;
    }

    /// Tensor index and offset of flattened parameter `i`.
    pub fn locate(&self, mut i: usize) -> (usize, usize) {
        for (t, m) in self.tensors().iter().enumerate() {
            if i < m.len() {
                return (t, i);
            }
            i -= m.len();
        }
        panic!("parameter index out of range");
    }
}

/// Trajectory-level prediction errors in raw state units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PredictionError {
    /// Mean over trajectories and steps of `|x_k - x̂_k|²`.
    pub model: f64,
    /// Same for the zero-order-hold predictor `x̂_k = x_0`.
    pub zero_order_hold: f64,
}

/// Mean-prediction horizon error on the given trajectories.
pub fn prediction_error(m: &DeskoModel, d: &TrajectoryDataset, idx: &[usize]) -> Result<PredictionError> {
    let h = d.horizon();
    let nx = d.state_dim();
    let (mut model, mut zoh) = (0.0, 0.0);
    for &i in idx {
        let x0 = DVector::from_fn(nx, |j, _| d.states[[i, 0, j]]);
        let u = d.controls.slice(ndarray::s![i..i + 1, .., ..]);
        let pred = m.rollout_batch(&x0, u, None)?;
        for k in 0..h {
            for j in 0..nx {
                let truth = d.states[[i, k + 1, j]];
                model += (truth - pred[[0, k, j]]).powi(2);
                zoh += (truth - x0[j]).powi(2);
            }
        }
    }
    let denom = (idx.len() * h).max(1) as f64;
    Ok(PredictionError { model: model / denom, zero_order_hold: zoh / denom })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mse: f64,
    pub heldout_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: DeskoModel,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub train_idx: Vec<usize>,
    pub heldout_idx: Vec<usize>,
}

struct Adam {
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &DeskoModel) -> Self {
        let zeros: Vec<DMatrix<f64>> = model.tensors().iter().map(|t| DMatrix::zeros(t.nrows(), t.ncols())).collect();
        Adam { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, model: &mut DeskoModel, grads: &[DMatrix<f64>]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let (lr_lin, lr_enc) = (model.config.lr_linear, model.config.lr_encoder);
        for (i, p) in model.tensors_mut().into_iter().enumerate() {
            let lr = if LINEAR_PARAMS.contains(&i) { lr_lin } else { lr_enc };
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for k in 0..p.len() {
                m[k] = Self::B1 * m[k] + (1.0 - Self::B1) * g[k];
                v[k] = Self::B2 * v[k] + (1.0 - Self::B2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains a fresh model; see [`train_from`].
pub fn train(config: DeskoConfig, data: &TrajectoryDataset, seed: u64) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let model = DeskoModel::init(config, Normalization::from_dataset(data), seed)?;
    train_from(model, data, seed)
}

/// Minimizes the horizon loss with Adam from `model`, returning the model
/// with the best held-out mean-prediction mse (epoch 0 is the starting
/// model). Deterministic given `seed`.
pub fn train_from(model: DeskoModel, data: &TrajectoryDataset, seed: u64) -> Result<TrainReport> {
    let cfg = model.config.clone();
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    if data.state_dim() != cfg.state_dim || data.control_dim() != cfg.control_dim {
        return Err(Error::Shape("dataset dimensions do not match model".into()));
    }
    let h = cfg.horizon.min(data.horizon());
    let (mut train_idx, held_idx) = data.split(cfg.holdout_fraction, seed);
    let eval_idx = if held_idx.is_empty() { train_idx.clone() } else { held_idx.clone() };
    let held = Batch::from_indices(data, &model.norm, &eval_idx, h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a11);
    let mut model = model;
    let mut adam = Adam::new(&model);
    let mut best = (model.mean_mse(&held), 0usize, model.clone());
    let mut curve = vec![EpochRecord { epoch: 0, train_loss: f64::NAN, train_mse: f64::NAN, heldout_mse: best.0 }];
    let train_sorted = train_idx.clone();
    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let (mut loss_sum, mut mse_sum, mut count) = (0.0, 0.0, 0usize);
        for chunk in train_idx.chunks(cfg.batch_size) {
            let batch = Batch::from_indices(data, &model.norm, chunk, h)?;
            let eps = gaussian_matrix(cfg.lift_dim, chunk.len(), 1.0, &mut rng);
            let (parts, grads) = model.loss_and_grad(&batch, &eps);
            if !parts.total.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch, checkpoint: Box::new(best.2) });
            }
            adam.step(&mut model, &grads);
            loss_sum += parts.total * chunk.len() as f64;
            mse_sum += parts.mse * chunk.len() as f64;
            count += chunk.len();
        }
        let heldout_mse = model.mean_mse(&held);
        if !heldout_mse.is_finite() || !model.is_finite() {
            return Err(Error::Diverged { epoch, checkpoint: Box::new(best.2) });
        }
        curve.push(EpochRecord {
            epoch,
            train_loss: loss_sum / count as f64,
            train_mse: mse_sum / count as f64,
            heldout_mse,
        });
        if heldout_mse < best.0 {
            best = (heldout_mse, epoch, model.clone());
        }
    }
    Ok(TrainReport { model: best.2, curve, best_epoch: best.1, train_idx: train_sorted, heldout_idx: held_idx })
}

/// Largest relative error between analytic gradients and central finite
/// differences over `n` parameters drawn at random (restricted to the
/// tensors named in `only`, when given). The relative error uses
/// `max(|analytic|, |numeric|, 1e-6)` as denominator.
pub fn gradient_check_params(
    m: &DeskoModel,
    batch: &Batch,
    eps_fd: f64,
    n: usize,
    only: Option<&[&str]>,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = gaussian_matrix(m.lift_dim(), batch.size(), 1.0, &mut rng);
    let (_, grads) = m.loss_and_grad(batch, &eps);
    let flat: Vec<usize> = (0..m.param_count())
        .filter(|&i| only.is_none_or(|names| names.contains(&PARAM_NAMES[m.locate(i).0])))
        .collect();
    let mut probe = m.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let i = flat[rng.random_range(0..flat.len())];
        let (t, k) = m.locate(i);
        let analytic = grads[t][k];
        let v = m.param(i);
        probe.set_param(i, v + eps_fd);
        let up = probe.loss_of(batch, &probe.forward(batch, Some(&eps))).total;
        probe.set_param(i, v - eps_fd);
        let down = probe.loss_of(batch, &probe.forward(batch, Some(&eps))).total;
        probe.set_param(i, v);
        let numeric = (up - down) / (2.0 * eps_fd);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// [`gradient_check_params`] over 50 parameters of any tensor.
pub fn gradient_check(m: &DeskoModel, batch: &Batch, eps_fd: f64, seed: u64) -> f64 {
    gradient_check_params(m, batch, eps_fd, 50, None, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(seed: u64) -> DeskoModel {
        let cfg = DeskoConfig { encoder_widths: vec![8], horizon: 3, ..DeskoConfig::new(2, 1).with_lift_dim(5) };
        DeskoModel::init(cfg, Normalization::identity(2, 1), seed).unwrap()
    }

    fn random_dataset(n: usize, h: usize, seed: u64) -> TrajectoryDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states = Array3::from_shape_fn((n, h + 1, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let controls = Array3::from_shape_fn((n, h, 1), |_| rng.sample::<f64, _>(StandardNormal));
        TrajectoryDataset::new(states, controls).unwrap()
    }

    #[test]
    fn zero_noise_encoding_is_the_mean() {
        let m = small_model(1);
        let e = m.encode(&DVector::from_vec(vec![0.3, -0.2]), &DVector::zeros(5)).unwrap();
        assert_eq!(e.psi, e.mean);
        assert!(e.std.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn noise_enters_linearly() {
        let m = small_model(2);
        let x = DVector::from_vec(vec![0.1, 0.4]);
        let e1 = DVector::from_fn(5, |i, _| i as f64 * 0.3);
        let e2 = DVector::from_fn(5, |i, _| 1.0 - i as f64);
        let a = m.encode(&x, &e1).unwrap();
        let b = m.encode(&x, &e2).unwrap();
        let expected = (&e1 - &e2).component_mul(&a.std);
        assert!((&a.psi - &b.psi - expected).amax() < 1e-14);
    }

    #[test]
    fn std_head_is_floored() {
        let mut m = small_model(3);
        m.c2.fill(-1e4);
        m.v2.fill(0.0);
        let e = m.encode(&DVector::from_vec(vec![0.0, 0.0]), &DVector::zeros(5)).unwrap();
        assert!(e.std.iter().all(|&s| s >= STD_FLOOR && s < 2.0 * STD_FLOOR));
    }

    #[test]
    fn encode_rejects_non_finite() {
        let m = small_model(4);
        assert!(m.encode(&DVector::from_vec(vec![f64::NAN, 0.0]), &DVector::zeros(5)).is_err());
    }

    #[test]
    fn identity_dynamics_keep_psi() {
        let mut m = small_model(5);
        m.a = DMatrix::identity(5, 5);
        m.b.fill(0.0);
        let psi = DVector::from_fn(5, |i, _| i as f64);
        assert_eq!(m.propagate(&psi, &DVector::from_vec(vec![3.0])), psi);
    }

    #[test]
    fn entropy_of_unit_std_matches_closed_form() {
        assert!((0.5 * LN_2PI_E - 1.41894).abs() < 1e-5);
        let mut m = DeskoModel::init(DeskoConfig::new(6, 3), Normalization::identity(6, 3), 1).unwrap();
        m.v2.fill(0.0);
        m.c2.fill((1.0f64 - STD_FLOOR).exp_m1().ln());
        let d = {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let s = Array3::from_shape_fn((4, 2, 6), |_| rng.random::<f64>());
            let u = Array3::from_shape_fn((4, 1, 3), |_| rng.random::<f64>());
            TrajectoryDataset::new(s, u).unwrap()
        };
        let batch = Batch::from_indices(&d, &m.norm, &[0, 1, 2, 3], 1).unwrap();
        let parts = m.loss(&batch, 0);
        assert!((parts.entropy - 34.0 * 0.5 * LN_2PI_E).abs() < 1e-9, "{}", parts.entropy);
        assert!((parts.entropy - 48.243).abs() < 1e-3);
    }

    #[test]
    fn inactive_entropy_constraint_adds_nothing() {
        let mut m = small_model(6);
        m.config.entropy_target = f64::NEG_INFINITY;
        let d = random_dataset(8, 3, 1);
        let batch = Batch::from_indices(&d, &m.norm, &[0, 1, 2, 3], 3).unwrap();
        let p = m.loss(&batch, 3);
        assert_eq!(p.entropy_penalty, 0.0);
        assert_eq!(p.total, p.mse);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let d = random_dataset(6, 3, 9);
        for seed in 0..3 {
            let mut m = small_model(seed);
            // Push the entropy constraint active so its gradient is checked.
            m.config.entropy_target = 100.0;
            let batch = Batch::from_indices(&d, &m.norm, &[0, 1, 2, 3, 4, 5], 3).unwrap();
            let err = gradient_check_params(&m, &batch, 1e-5, 200, None, seed);
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn koopman_gradients_are_tight() {
        let d = random_dataset(6, 3, 10);
        let m = small_model(7);
        let batch = Batch::from_indices(&d, &m.norm, &[0, 1, 2, 3, 4, 5], 3).unwrap();
        assert!(gradient_check_params(&m, &batch, 1e-5, 25, Some(&["a"]), 1) <= 1e-6);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let d = random_dataset(20, 3, 11);
        let cfg = DeskoConfig { epochs: 0, encoder_widths: vec![8], horizon: 3, ..DeskoConfig::new(2, 1).with_lift_dim(5) };
        let r = train(cfg.clone(), &d, 4).unwrap();
        let init = DeskoModel::init(cfg, Normalization::from_dataset(&d), 4).unwrap();
        assert_eq!(r.model, init);
        assert_eq!(r.curve.len(), 1);
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let d = random_dataset(50, 2, 12);
        let (a, b) = d.split(0.1, 3);
        assert_eq!(b.len(), 5);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }
}
