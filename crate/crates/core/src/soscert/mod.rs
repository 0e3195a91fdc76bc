//! Sum-of-squares certificates that an ellipsoid lies inside a risk contour.
//!
//! For an ellipsoid `{c + p̂ : p̂ᵀQp̂ ≤ 1}` and a contour `(P1, P2, Δ)` the
//! ellipsoid is safe when both
//!
//! ```text
//!   g1 = P2(c+p̂)² - (1-Δ)·P1(c+p̂) ≥ 0   and   g2 = P2(c+p̂) ≥ 0
//! ```
//!
//! hold wherever `s = 1 - p̂ᵀQp̂ ≥ 0`. Each is certified with a Putinar-type
//! identity `g = σ_0 + σ_m·s` with SOS multipliers, found by a semidefinite
//! program. The program is posed in whitened coordinates `v = Lᵀp̂`
//! (`Q = LLᵀ`), which turns the domain into the unit ball.

mod sdp;

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowdisc::radical_inverse;
use crate::polyrisk::{Monomial, Polynomial, RiskContour, RiskContourMap, WorkspacePoint};
use sdp::{IpmOptions, IpmStatus, SdpBlock, SdpProblem};

/// Names of the whitened ellipsoid coordinates.
pub const WHITENED_VARS: [&str; 3] = ["v1", "v2", "v3"];

/// Default bound on the position degree of certified obstacle polynomials.
pub const DEFAULT_MAX_OBSTACLE_DEGREE: u32 = 6;

/// Closed ellipsoid `{p : (p - center)ᵀ shape (p - center) ≤ 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct EllipsoidRegion {
    pub center: Vector3<f64>,
    pub shape: Matrix3<f64>,
    pub label: String,
}

impl EllipsoidRegion {
    pub fn new(center: Vector3<f64>, shape: Matrix3<f64>, label: impl Into<String>) -> Result<Self> {
        let asym = (shape - shape.transpose()).amax();
        if asym > 1e-12 * shape.amax().max(1.0) {
            return Err(Error::InvalidInput(format!("ellipsoid shape not symmetric (asymmetry {asym:e})")));
        }
        let shape = 0.5 * (shape + shape.transpose());
        let min_eig = shape.symmetric_eigenvalues().min();
        if !(min_eig > 0.0) || !center.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!("ellipsoid shape not positive definite (min eigenvalue {min_eig})")));
        }
        Ok(EllipsoidRegion { center, shape, label: label.into() })
    }

    /// Ball of the given radius.
    pub fn ball(center: Vector3<f64>, radius: f64, label: impl Into<String>) -> Result<Self> {
        EllipsoidRegion::new(center, Matrix3::identity() / (radius * radius), label)
    }

    pub fn contains(&self, p: &WorkspacePoint) -> bool {
        let d = p.coords - self.center;
        d.dot(&(self.shape * d)) <= 1.0
    }

    /// Semi-axis lengths in ascending order.
    pub fn semi_axes(&self) -> Vector3<f64> {
        let mut ax: Vec<f64> = self.shape.symmetric_eigenvalues().iter().map(|l| 1.0 / l.sqrt()).collect();
        ax.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Vector3::new(ax[0], ax[1], ax[2])
    }

    /// Matrix `T` with `p = center + T v` mapping the unit ball onto the ellipsoid.
    pub fn unit_ball_map(&self) -> Matrix3<f64> {
        let l = self.shape.cholesky().expect("validated positive definite").l();
        l.transpose().try_inverse().expect("triangular factor is invertible")
    }

    /// Same center, shape scaled by `k` (radii divided by `√k`).
    pub fn scaled_shape(&self, k: f64) -> Result<Self> {
        EllipsoidRegion::new(self.center, self.shape * k, self.label.clone())
    }
}

/// One SOS multiplier block: `σ(v) = m(v)ᵀ G m(v)` times `weight`.
#[derive(Clone, Debug)]
pub struct Multiplier {
    /// Polynomial the SOS term is multiplied by (`1` or the domain polynomial).
    pub weight: Polynomial,
    /// Degree of the SOS polynomial.
    pub degree: u32,
    pub basis: Vec<Monomial>,
}

/// A polynomial to be certified nonnegative on the unit ball.
#[derive(Clone, Debug)]
pub struct SosTarget {
    pub label: &'static str,
    /// Target normalized to unit max-norm coefficients.
    pub poly: Polynomial,
    /// Normalization factor: original target = `scale · poly`.
    pub scale: f64,
    pub multipliers: Vec<Multiplier>,
}

/// Certificate program for one ellipsoid against one contour.
#[derive(Clone, Debug)]
pub struct SosProblem {
    pub ellipsoid: EllipsoidRegion,
    pub delta: f64,
    /// Unit-ball map used to whiten coordinates.
    pub unit_ball_map: Matrix3<f64>,
    /// `1 - vᵀv` in whitened coordinates.
    pub domain_poly: Polynomial,
    /// Risk target first, mean target second.
    pub targets: Vec<SosTarget>,
}

impl SosProblem {
    pub fn multiplier_degrees(&self) -> Vec<Vec<u32>> {
        self.targets.iter().map(|t| t.multipliers.iter().map(|m| m.degree).collect()).collect()
    }

    pub fn gram_bases(&self) -> Vec<Vec<Vec<Monomial>>> {
        self.targets.iter().map(|t| t.multipliers.iter().map(|m| m.basis.clone()).collect()).collect()
    }
}

/// Gram matrix of an SOS polynomial over a monomial basis.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub basis: Vec<Monomial>,
    pub entries: DMatrix<f64>,
}

impl GramMatrix {
    pub fn min_eigenvalue(&self) -> f64 {
        if self.basis.is_empty() {
            return 0.0;
        }
        self.entries.clone().symmetric_eigenvalues().min()
    }

    /// Expands `m(v)ᵀ G m(v)`.
    pub fn to_polynomial(&self) -> Polynomial {
        let mut p = Polynomial::zero(&WHITENED_VARS);
        for (i, &mi) in self.basis.iter().enumerate() {
            for (j, &mj) in self.basis.iter().enumerate() {
                p.add_term(mi.mul(mj), self.entries[(i, j)]);
            }
        }
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Certified,
    NotCertified,
    SolverFailure,
}

#[derive(Clone, Debug)]
pub struct CertResult {
    pub verdict: Verdict,
    /// Smallest margin `λ` over the solved targets, in normalized units.
    pub margin: f64,
    /// Largest coefficient-matching violation, in normalized units.
    pub residual: f64,
    /// Gram matrices per target and multiplier (risk target first).
    pub gram: Option<Vec<Vec<GramMatrix>>>,
    pub iterations: usize,
    pub solves: usize,
}

impl CertResult {
    pub fn is_certified(&self) -> bool {
        self.verdict == Verdict::Certified
    }

    fn vacuous() -> Self {
        CertResult {
            verdict: Verdict::Certified,
            margin: f64::INFINITY,
            residual: 0.0,
            gram: Some(Vec::new()),
            iterations: 0,
            solves: 0,
        }
    }
}

/// Interior-point settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub tol_eq: f64,
    pub tol_psd: f64,
    pub max_iter: usize,
    /// Stop as soon as the verdict is settled instead of solving to optimality.
    pub early_exit: bool,
    pub max_obstacle_degree: u32,
    /// Accept a contour without solving when the coefficient bound of every
    /// target is already positive on the unit ball.
    pub screen: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol_eq: 1e-7,
            tol_psd: 1e-8,
            max_iter: 200,
            early_exit: false,
            max_obstacle_degree: DEFAULT_MAX_OBSTACLE_DEGREE,
            screen: false,
        }
    }
}

/// All monomials in three variables of degree at most `d`, in graded order.
pub fn monomials_upto(d: u32) -> Vec<Monomial> {
    let mut out = Vec::new();
    for total in 0..=d {
        for a in (0..=total).rev() {
            for b in (0..=(total - a)).rev() {
                let c = total - a - b;
                out.push(Monomial::var_power(0, a).mul(Monomial::var_power(1, b)).mul(Monomial::var_power(2, c)));
            }
        }
    }
    out
}

fn target_with_multipliers(label: &'static str, raw: Polynomial, domain: &Polynomial) -> SosTarget {
    let mut raw = raw;
    let scale = raw.max_abs_coeff();
    raw.prune(1e-15 * scale);
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let poly = raw.scale(1.0 / scale);
    let d = poly.degree();
    let d0 = d + d % 2;
    let mut multipliers = vec![Multiplier {
        weight: Polynomial::constant(&WHITENED_VARS, 1.0),
        degree: d0,
        basis: monomials_upto(d0 / 2),
    }];
    let dom_deg = domain.degree();
    if d >= dom_deg {
        let dm = (d - dom_deg) & !1;
        multipliers.push(Multiplier { weight: domain.clone(), degree: dm, basis: monomials_upto(dm / 2) });
    }
    SosTarget { label, poly, scale, multipliers }
}

/// Builds the certificate program for ellipsoid `e` against contour `c`.
pub fn build_certificate_problem(c: &RiskContour, e: &EllipsoidRegion) -> Result<SosProblem> {
    build_certificate_problem_with(c, e, DEFAULT_MAX_OBSTACLE_DEGREE)
}

pub fn build_certificate_problem_with(c: &RiskContour, e: &EllipsoidRegion, max_degree: u32) -> Result<SosProblem> {
    let deg = c.p2.degree();
    if deg > max_degree {
        return Err(Error::DegreeTooLarge { degree: deg, max: max_degree });
    }
    let t = e.unit_ball_map();
    let offsets = [e.center.x, e.center.y, e.center.z];
    let linear: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| t[(i, j)]).collect()).collect();
    let p1 = c.p1.compose_affine(&WHITENED_VARS, &offsets, &linear);
    let p2 = c.p2.compose_affine(&WHITENED_VARS, &offsets, &linear);
    let g1 = &p2.square() - &p1.scale(1.0 - c.delta);

    let mut domain = Polynomial::constant(&WHITENED_VARS, 1.0);
    for i in 0..3 {
        domain.add_term(Monomial::var_power(i, 2), -1.0);
    }
    let targets = vec![target_with_multipliers("risk", g1, &domain), target_with_multipliers("mean", p2, &domain)];
    Ok(SosProblem { ellipsoid: e.clone(), delta: c.delta, unit_ball_map: t, domain_poly: domain, targets })
}

fn index_map(ms: &[Monomial]) -> HashMap<Monomial, u32> {
    ms.iter().enumerate().map(|(i, &m)| (m, i as u32)).collect()
}

fn sdp_for_target(t: &SosTarget) -> SdpProblem {
    let top = t
        .multipliers
        .iter()
        .map(|m| 2 * (m.degree / 2) + m.weight.degree())
        .max()
        .unwrap_or(0)
        .max(t.poly.degree());
    let rows = monomials_upto(top);
    let row_of = index_map(&rows);
    let mut b = DVector::zeros(rows.len());
    for (m, c) in t.poly.terms() {
        b[row_of[&m] as usize] = c;
    }
    let blocks = t
        .multipliers
        .iter()
        .map(|mult| {
            let n = mult.basis.len();
            let inter = monomials_upto(mult.degree);
            let inter_of = index_map(&inter);
            let mut pair_index = vec![0u32; n * n];
            let mut pairs = vec![Vec::new(); inter.len()];
            for j in 0..n {
                for i in 0..n {
                    let g = inter_of[&mult.basis[i].mul(mult.basis[j])];
                    pair_index[i + j * n] = g;
                    pairs[g as usize].push((i as u32, j as u32));
                }
            }
            let weight: Vec<(Monomial, f64)> = mult.weight.terms().collect();
            let map = inter
                .iter()
                .map(|&g| weight.iter().map(|&(w, c)| (row_of[&g.mul(w)], c)).collect())
                .collect();
            SdpBlock { n, pair_index, pairs, mult: map }
        })
        .collect();
    SdpProblem { m: rows.len(), b, blocks }
}

struct TargetOutcome {
    verdict: Verdict,
    margin: f64,
    residual: f64,
    grams: Vec<GramMatrix>,
    iterations: usize,
}

fn solve_target(t: &SosTarget, s: &SolverSettings) -> TargetOutcome {
    let prob = sdp_for_target(t);
    let sol = prob.solve(&IpmOptions {
        tol_eq: s.tol_eq,
        tol_psd: s.tol_psd,
        max_iter: s.max_iter,
        early_exit: s.early_exit,
    });
    let grams: Vec<GramMatrix> = t
        .multipliers
        .iter()
        .zip(&sol.gram)
        .map(|(m, g)| GramMatrix { basis: m.basis.clone(), entries: g.clone() })
        .collect();
    let has_certificate = sol.residual <= s.tol_eq && sol.margin >= -s.tol_psd;
    let dual_negative = sol.dual_infeasibility <= 1e-8 && sol.dual_bound < -s.tol_psd;
    let (verdict, margin) = match sol.status {
        IpmStatus::MaxIter | IpmStatus::Breakdown => (Verdict::SolverFailure, sol.margin),
        _ if has_certificate => (Verdict::Certified, sol.margin),
        _ if sol.residual <= s.tol_eq && (dual_negative || sol.status == IpmStatus::Converged) => {
            (Verdict::NotCertified, sol.margin)
        }
        _ if dual_negative => (Verdict::NotCertified, sol.dual_bound),
        _ => (Verdict::SolverFailure, sol.margin),
    };
    TargetOutcome { verdict, margin, residual: sol.residual, grams, iterations: sol.iterations }
}

/// Solves the certificate program. The cheap mean target is solved first
/// and a failure there skips the risk target.
pub fn sdp_feasibility_solve(p: &SosProblem, settings: &SolverSettings) -> CertResult {
    let mut margin = f64::INFINITY;
    let mut residual: f64 = 0.0;
    let mut iterations = 0;
    let mut grams: Vec<Vec<GramMatrix>> = vec![Vec::new(); p.targets.len()];
    let mut solves = 0;
    for idx in (0..p.targets.len()).rev() {
        let out = solve_target(&p.targets[idx], settings);
        solves += 1;
        iterations += out.iterations;
        margin = margin.min(out.margin);
        residual = residual.max(out.residual);
        grams[idx] = out.grams;
        if out.verdict != Verdict::Certified {
            return CertResult { verdict: out.verdict, margin, residual, gram: None, iterations, solves };
        }
    }
    CertResult { verdict: Verdict::Certified, margin, residual, gram: Some(grams), iterations, solves }
}

/// Re-expands `σ_0 + σ_m·s` from the Gram matrices and returns the largest
/// coefficient mismatch against the normalized targets.
pub fn identity_residual(p: &SosProblem, grams: &[Vec<GramMatrix>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (t, gs) in p.targets.iter().zip(grams) {
        let mut recon = Polynomial::zero(&WHITENED_VARS);
        for (m, g) in t.multipliers.iter().zip(gs) {
            recon = &recon + &(&g.to_polynomial() * &m.weight);
        }
        let diff = &t.poly - &recon;
        worst = worst.max(diff.max_abs_coeff());
    }
    worst
}

/// Lower bound of `p` on the unit ball from its coefficients alone. Every
/// monomial has magnitude at most one there; monomials with only even
/// exponents are also nonnegative, so positive ones are dropped.
pub fn unit_ball_lower_bound(p: &Polynomial) -> f64 {
    let nv = p.nvars();
    p.terms()
        .map(|(m, c)| {
            if m.degree() == 0 {
                c
            } else if c > 0.0 && m.exponents(nv).iter().all(|e| e % 2 == 0) {
                0.0
            } else {
                -c.abs()
            }
        })
        .sum()
}

/// True when every target of `p` is positive on the unit ball by its
/// coefficient bound, which proves containment without a Gram certificate.
pub fn passes_screen(p: &SosProblem) -> bool {
    p.targets.iter().all(|t| unit_ball_lower_bound(&t.poly) > 0.0)
}

/// Certifies `e` against every contour of `m`, stopping at the first failure.
/// Contours accepted by the coefficient screen contribute no Gram matrices.
pub fn certify_ellipsoid(m: &RiskContourMap, e: &EllipsoidRegion, settings: &SolverSettings) -> Result<CertResult> {
    let mut acc = CertResult::vacuous();
    let mut grams = Vec::new();
    for c in m.contours() {
        let p = build_certificate_problem_with(c, e, settings.max_obstacle_degree)?;
        if settings.screen && passes_screen(&p) {
            let bound = p.targets.iter().map(|t| unit_ball_lower_bound(&t.poly)).fold(f64::INFINITY, f64::min);
            acc.margin = acc.margin.min(bound);
            continue;
        }
        let r = sdp_feasibility_solve(&p, settings);
        acc.margin = acc.margin.min(r.margin);
        acc.residual = acc.residual.max(r.residual);
        acc.iterations += r.iterations;
        acc.solves += r.solves;
        if r.verdict != Verdict::Certified {
            acc.verdict = r.verdict;
            acc.gram = None;
            return Ok(acc);
        }
        if let Some(g) = r.gram {
            grams.extend(g);
        }
    }
    acc.gram = Some(grams);
    Ok(acc)
}

/// Quasi-uniform points of the unit ball: a randomly shifted Halton
/// sequence with rejection of the cube corners.
pub fn unit_ball_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let mut out = Vec::with_capacity(n);
    let mut i = 1u64;
    while out.len() < n {
        let v = Vector3::new(
            2.0 * (radical_inverse(i, 2) + shift[0]).fract() - 1.0,
            2.0 * (radical_inverse(i, 3) + shift[1]).fract() - 1.0,
            2.0 * (radical_inverse(i, 5) + shift[2]).fract() - 1.0,
        );
        i += 1;
        if v.norm_squared() <= 1.0 {
            out.push(v);
        }
    }
    out
}

/// Returns the first of `n` quasi-uniform ellipsoid points that fails
/// contour membership, if any.
pub fn sample_falsify(m: &RiskContourMap, e: &EllipsoidRegion, n: usize, seed: u64) -> Option<WorkspacePoint> {
    if m.is_empty() {
        return None;
    }
    let t = e.unit_ball_map();
    unit_ball_points(n.max(1), seed)
        .into_iter()
        .map(|v| WorkspacePoint::from(e.center + t * v))
        .find(|p| !m.is_safe(p))
}
