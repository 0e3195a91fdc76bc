//! Uncertain polynomial obstacles and their moment-based risk contours.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::distribution::ScalarDistribution;
use super::polynomial::{CompiledPoly3, Monomial, Polynomial};
use crate::error::{Error, Result};

/// A position in the robot workspace, meters.
pub type WorkspacePoint = Point3<f64>;

pub const POSITION_VARS: [&str; 3] = ["x", "y", "z"];

/// An obstacle `{p : o(p, ω) <= 0}` whose shape depends on one random scalar ω.
///
/// The polynomial has exactly four variables: three position coordinates
/// followed by ω.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertainObstacle {
    pub name: String,
    pub poly: Polynomial,
    pub omega: ScalarDistribution,
}

impl UncertainObstacle {
    pub fn new(name: impl Into<String>, poly: Polynomial, omega: ScalarDistribution) -> Result<Self> {
        if poly.nvars() != 4 {
            return Err(Error::InvalidInput(format!(
                "obstacle polynomial must have 4 variables (x, y, z, omega), got {:?}",
                poly.vars()
            )));
        }
        omega.validate()?;
        Ok(UncertainObstacle { name: name.into(), poly, omega })
    }

    /// Sphere of random radius: `|p - c|² - ω²`.
    pub fn sphere(name: impl Into<String>, center: Vector3<f64>, radius: ScalarDistribution) -> Result<Self> {
        let vars = ["x", "y", "z", "w"];
        let mut poly = Polynomial::zero(&vars);
        for i in 0..3 {
            let shifted = &Polynomial::var(&vars, i) - &Polynomial::constant(&vars, center[i]);
            poly = &poly + &shifted.square();
        }
        poly.add_term(Monomial::var_power(3, 2), -1.0);
        Self::new(name, poly, radius)
    }

    /// The heart-shaped obstacle
    /// `(25x² + 225/4 y² + 25z² - 1)³ - 3125x²z³ - 5625/16 y²z³ - ω`.
    pub fn heart(name: impl Into<String>, omega: ScalarDistribution) -> Result<Self> {
        let vars = ["x", "y", "z", "w"];
        let inner = Polynomial::from_terms(
            &vars,
            &[
                (vec![2, 0, 0, 0], 25.0),
                (vec![0, 2, 0, 0], 225.0 / 4.0),
                (vec![0, 0, 2, 0], 25.0),
                (vec![0, 0, 0, 0], -1.0),
            ],
        )?;
        let mut poly = inner.pow(3);
        poly.add_term(Monomial::from_exponents(&[2, 0, 3, 0])?, -3125.0);
        poly.add_term(Monomial::from_exponents(&[0, 2, 3, 0])?, -5625.0 / 16.0);
        poly.add_term(Monomial::var_power(3, 1), -1.0);
        Self::new(name, poly, omega)
    }

    /// Moves and uniformly scales the obstacle: the new obstacle at `p`
    /// matches the old one at `(p - center) / scale`.
    pub fn placed(&self, center: Vector3<f64>, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidInput(format!("placement scale must be positive, got {scale}")));
        }
        let inv = 1.0 / scale;
        let offsets = [-center.x * inv, -center.y * inv, -center.z * inv, 0.0];
        let linear = vec![
            vec![inv, 0.0, 0.0, 0.0],
            vec![0.0, inv, 0.0, 0.0],
            vec![0.0, 0.0, inv, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        let poly = self.poly.compose_affine(self.poly.vars(), &offsets, &linear);
        Self::new(self.name.clone(), poly, self.omega)
    }

    /// Degree in the position variables.
    pub fn position_degree(&self) -> u32 {
        self.poly.degree_in_vars(&[0, 1, 2])
    }

    pub fn omega_degree(&self) -> u32 {
        self.poly.degree_in(3)
    }

    /// `o(p, ω)` for a concrete realization.
    pub fn eval(&self, p: &WorkspacePoint, omega: f64) -> f64 {
        self.poly.eval_slice(&[p.x, p.y, p.z, omega])
    }

    /// Coefficients of `o(p, ·)` as a univariate polynomial in ω, lowest
    /// order first. Useful for Monte-Carlo sweeps at a fixed point.
    pub fn omega_coefficients(&self, p: &WorkspacePoint) -> Vec<f64> {
        let d = self.omega_degree() as usize;
        let mut coeffs = vec![0.0; d + 1];
        let xyz = [p.x, p.y, p.z];
        for (m, c) in self.poly.terms() {
            let mut t = c;
            for (v, x) in xyz.iter().enumerate() {
                t *= x.powi(m.exponent(v) as i32);
            }
            coeffs[m.exponent(3) as usize] += t;
        }
        coeffs
    }
}

/// Moment polynomials `P1 = E[o²]`, `P2 = E[o]` over the position variables
/// together with the risk tolerance they are tested against.
#[derive(Clone, Debug)]
pub struct RiskContour {
    pub p1: Polynomial,
    pub p2: Polynomial,
    pub delta: f64,
    pub source: String,
    fast_p1: CompiledPoly3,
    fast_p2: CompiledPoly3,
    factored: Option<Factored>,
}

/// `o = Σ_k a_k(p) ω^k` with the raw moments of ω, which evaluates both
/// moment polynomials without expanding `o²`.
#[derive(Clone, Debug)]
struct Factored {
    coeffs: Vec<CompiledPoly3>,
    moments: Vec<f64>,
}

impl Factored {
    fn new(ob: &UncertainObstacle, moments: &[f64]) -> Self {
        let mut polys = vec![Polynomial::zero(&POSITION_VARS); ob.omega_degree() as usize + 1];
        for (m, c) in ob.poly.terms() {
            polys[m.exponent(3) as usize].add_term(m.remove_var(3), c);
        }
        Factored { coeffs: polys.iter().map(CompiledPoly3::new).collect(), moments: moments.to_vec() }
    }

    #[inline]
    fn eval(&self, pt: &[f64; 3]) -> (f64, f64) {
        let mut a = [0.0f64; 32];
        let n = self.coeffs.len();
        for (k, c) in self.coeffs.iter().enumerate() {
            a[k] = c.eval(pt);
        }
        let mut v1 = 0.0;
        let mut v2 = 0.0;
        for j in 0..n {
            v2 += a[j] * self.moments[j];
            for k in 0..n {
                v1 += a[j] * a[k] * self.moments[j + k];
            }
        }
        (v1, v2)
    }
}

/// Result of testing a point against one contour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Membership {
    pub safe: bool,
    pub risk_bound: f64,
}

const RISK_DENOM_FLOOR: f64 = 1e-12;

impl RiskContour {
    pub fn new(p1: Polynomial, p2: Polynomial, delta: f64, source: impl Into<String>) -> Result<Self> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::InvalidInput(format!("risk tolerance {delta} outside [0, 1]")));
        }
        if p1.nvars() != 3 || p2.nvars() != 3 {
            return Err(Error::InvalidInput("contour polynomials must be in (x, y, z)".into()));
        }
        let fast_p1 = CompiledPoly3::new(&p1);
        let fast_p2 = CompiledPoly3::new(&p2);
        Ok(RiskContour { p1, p2, delta, source: source.into(), fast_p1, fast_p2, factored: None })
    }

    /// Same polynomials at a different tolerance.
    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::InvalidInput(format!("risk tolerance {delta} outside [0, 1]")));
        }
        Ok(RiskContour { delta, ..self.clone() })
    }

    /// `(P1, P2)` at `pt`. Contours built from an obstacle evaluate through
    /// the ω-coefficients of `o`, which is much cheaper for high degrees.
    #[inline]
    pub fn eval_moments(&self, pt: &[f64; 3]) -> (f64, f64) {
        match &self.factored {
            Some(f) => f.eval(pt),
            None => (self.fast_p1.eval(pt), self.fast_p2.eval(pt)),
        }
    }

    /// Cantelli-based safety test at `pt`.
    #[inline]
    pub fn membership(&self, pt: &WorkspacePoint) -> Membership {
        self.membership_xyz(&[pt.x, pt.y, pt.z])
    }

    #[inline]
    pub fn membership_xyz(&self, pt: &[f64; 3]) -> Membership {
        let (v1, v2) = self.eval_moments(pt);
        membership_from_moments(v1, v2, self.delta)
    }
}

/// Safety verdict and risk bound from the moment values `v1 = P1(p)`,
/// `v2 = P2(p)`.
#[inline]
pub fn membership_from_moments(v1: f64, v2: f64, delta: f64) -> Membership {
    if v2 < 0.0 || !v2.is_finite() || !v1.is_finite() {
        return Membership { safe: false, risk_bound: 1.0 };
    }
    let var = (v1 - v2 * v2).max(0.0);
    let risk_bound = (var / v1.max(RISK_DENOM_FLOOR)).clamp(0.0, 1.0);
    Membership { safe: risk_bound <= delta, risk_bound }
}

/// Builds the risk contour of `ob` at tolerance `delta`.
///
/// `P2` substitutes raw moments of ω into `o`; `P1` squares `o` symbolically
/// first and then substitutes moments.
pub fn contour_from_obstacle(ob: &UncertainObstacle, delta: f64) -> Result<RiskContour> {
    ob.omega.validate()?;
    let dw = ob.omega_degree();
    let moments = ob.omega.raw_moments(2 * dw);
    if moments.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite(format!("moments of {:?}", ob.omega)));
    }
    let p2 = ob.poly.substitute_moments(3, &moments)?.renamed(&POSITION_VARS);
    let p1 = ob.poly.square().substitute_moments(3, &moments)?.renamed(&POSITION_VARS);
    let mut c = RiskContour::new(p1, p2, delta, ob.name.clone())?;
    if dw < 16 {
        c.factored = Some(Factored::new(ob, &moments));
    }
    Ok(c)
}

/// Axis-aligned workspace box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn contains(&self, p: &WorkspacePoint) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

impl Default for Aabb {
    fn default() -> Self {
        Aabb { min: [-2.0, -2.0, -2.0], max: [2.0, 2.0, 2.0] }
    }
}

/// The set of risk contours for all obstacles in a scene.
#[derive(Clone, Debug)]
pub struct RiskContourMap {
    contours: Vec<RiskContour>,
    pub bounds: Aabb,
}

impl RiskContourMap {
    pub fn new(contours: Vec<RiskContour>, bounds: Aabb) -> Result<Self> {
        if let Some(first) = contours.first() {
            if contours.iter().any(|c| c.delta != first.delta) {
                return Err(Error::InvalidInput("all contours in a map must share one risk tolerance".into()));
            }
        }
        Ok(RiskContourMap { contours, bounds })
    }

    pub fn empty(bounds: Aabb) -> Self {
        RiskContourMap { contours: Vec::new(), bounds }
    }

    pub fn from_obstacles(obstacles: &[UncertainObstacle], delta: f64, bounds: Aabb) -> Result<Self> {
        let contours = obstacles
            .iter()
            .map(|o| contour_from_obstacle(o, delta))
            .collect::<Result<Vec<_>>>()?;
        Self::new(contours, bounds)
    }

    pub fn contours(&self) -> &[RiskContour] {
        &self.contours
    }

    pub fn is_empty(&self) -> bool {
        self.contours.is_empty()
    }

    /// Shared tolerance, `None` for an empty map.
    pub fn delta(&self) -> Option<f64> {
        self.contours.first().map(|c| c.delta)
    }

    /// Worst risk bound over all contours; 0 for an empty map.
    pub fn map_risk(&self, pt: &WorkspacePoint) -> f64 {
        self.map_risk_xyz(&[pt.x, pt.y, pt.z])
    }

    pub fn map_risk_xyz(&self, pt: &[f64; 3]) -> f64 {
        self.contours.iter().map(|c| c.membership_xyz(pt).risk_bound).fold(0.0, f64::max)
    }

    /// True iff every contour reports the point safe.
    pub fn is_safe(&self, pt: &WorkspacePoint) -> bool {
        self.contours.iter().all(|c| c.membership(pt).safe)
    }
}

impl Polynomial {
    /// Same terms under new variable names.
    pub fn renamed<S: AsRef<str>>(&self, names: &[S]) -> Polynomial {
        assert_eq!(names.len(), self.nvars());
        let mut out = Polynomial::zero(names);
        for (m, c) in self.terms() {
            out.add_term(m, c);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere_uniform() -> UncertainObstacle {
        UncertainObstacle::sphere("s", Vector3::zeros(), ScalarDistribution::uniform(1.0, 2.0)).unwrap()
    }

    /// Monte-Carlo estimates of E[o] and E[o²] at a point.
    fn mc_moments(ob: &UncertainObstacle, p: &WorkspacePoint, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = ob.omega_coefficients(p);
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let w = ob.omega.sample(&mut rng);
            let v = coeffs.iter().rev().fold(0.0, |acc, c| acc * w + c);
            s1 += v;
            s2 += v * v;
        }
        (s2 / n as f64, s1 / n as f64)
    }

    #[test]
    fn factored_moments_match_expanded_polynomials() {
        let heart = UncertainObstacle::heart("h", ScalarDistribution::gaussian(0.05, 0.01))
            .unwrap()
            .placed(Vector3::new(0.3, -0.2, 0.1), 0.7)
            .unwrap();
        let c = contour_from_obstacle(&heart, 0.2).unwrap();
        for pt in [[0.0, 0.0, 0.0], [0.31, -0.18, 0.12], [0.5, 0.1, -0.3], [-1.0, 1.2, 0.4]] {
            let (f1, f2) = c.eval_moments(&pt);
            let (e1, e2) = (c.p1.eval_slice(&pt), c.p2.eval_slice(&pt));
            assert!((f1 - e1).abs() <= 1e-7 * e1.abs().max(1.0), "{f1} vs {e1}");
            assert!((f2 - e2).abs() <= 1e-7 * e2.abs().max(1.0), "{f2} vs {e2}");
        }
    }

    #[test]
    fn sphere_contour_closed_form() {
        let c = contour_from_obstacle(&sphere_uniform(), 0.3).unwrap();
        let vars = POSITION_VARS;
        let r2 = &(&Polynomial::var(&vars, 0).square() + &Polynomial::var(&vars, 1).square())
            + &Polynomial::var(&vars, 2).square();
        let p2 = &r2 - &Polynomial::constant(&vars, 7.0 / 3.0);
        let p1 = &(&r2.square() - &r2.scale(14.0 / 3.0)) + &Polynomial::constant(&vars, 31.0 / 5.0);
        for pt in [[0.3, -1.2, 0.5], [2.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.1, 1.1, 1.1]] {
            let (v1, v2) = c.eval_moments(&pt);
            assert!((v2 - p2.eval_slice(&pt)).abs() < 1e-12);
            assert!((v1 - p1.eval_slice(&pt)).abs() < 1e-11);
        }
        assert_eq!(c.p2.degree(), 2);
        assert_eq!(c.p1.degree(), 4);
    }

    #[test]
    fn sphere_contour_matches_monte_carlo() {
        let ob = sphere_uniform();
        let c = contour_from_obstacle(&ob, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        use rand::Rng;
        for i in 0..20 {
            let p = WorkspacePoint::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let (m1, m2) = mc_moments(&ob, &p, 1_000_000, 100 + i);
            let (v1, v2) = c.eval_moments(&[p.x, p.y, p.z]);
            assert!((v1 - m1).abs() <= 1e-2 * v1.abs().max(1.0), "P1 at {p:?}: {v1} vs {m1}");
            assert!((v2 - m2).abs() <= 1e-2 * v2.abs().max(1.0), "P2 at {p:?}: {v2} vs {m2}");
        }
    }

    #[test]
    fn membership_examples() {
        let c = contour_from_obstacle(&sphere_uniform(), 0.3).unwrap();
        let m = c.membership(&WorkspacePoint::new(2.0, 0.0, 0.0));
        assert!(m.safe);
        assert!((m.risk_bound - 34.0 / 159.0).abs() < 1e-12);

        let m = c.membership(&WorkspacePoint::origin());
        assert!(!m.safe);
        assert_eq!(m.risk_bound, 1.0);

        let far = c.with_delta(0.01).unwrap().membership(&WorkspacePoint::new(10.0, 0.0, 0.0));
        assert!(far.safe);
        assert!(far.risk_bound < 1e-3);
    }

    #[test]
    fn sphere_point_beyond_max_radius_never_collides() {
        // At r = 2 the obstacle (radius ≤ 2) touches only on a null set.
        let ob = sphere_uniform();
        let p = WorkspacePoint::new(2.0, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hits = (0..100_000).filter(|_| ob.eval(&p, ob.omega.sample(&mut rng)) < 0.0).count();
        assert_eq!(hits, 0);
    }

    #[test]
    fn deterministic_obstacle_has_zero_variance() {
        let ob = UncertainObstacle::sphere("d", Vector3::new(0.5, 0.0, 0.0), ScalarDistribution::gaussian(0.3, 1e-12)).unwrap();
        let c = contour_from_obstacle(&ob, 0.1).unwrap();
        for pt in [[0.0, 0.0, 0.0], [1.0, 0.2, -0.4], [0.5, 0.3, 0.0]] {
            let (v1, v2) = c.eval_moments(&pt);
            assert!((v1 - v2 * v2).abs() < 1e-9 * v1.abs().max(1.0));
        }
    }

    #[test]
    fn heart_contour_mean_substitution() {
        let ob = UncertainObstacle::heart("h1", ScalarDistribution::uniform(-0.1, 0.1)).unwrap();
        assert_eq!(ob.position_degree(), 6);
        let c = contour_from_obstacle(&ob, 0.3).unwrap();
        assert_eq!(c.p2.degree(), 6);
        assert_eq!(c.p1.degree(), 12);
        // Mean of ω is zero so P2 is the heart polynomial itself.
        let heart0 = ob.poly.substitute_moments(3, &[1.0, 0.0]).unwrap().renamed(&POSITION_VARS);
        assert!((&c.p2 - &heart0).max_abs_coeff() < 1e-12);
        assert_eq!(c.p2.eval_slice(&[0.0, 0.0, 0.0]), -1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        use rand::Rng;
        for i in 0..20 {
            let p = WorkspacePoint::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
            let (m1, m2) = mc_moments(&ob, &p, 1_000_000, 200 + i);
            let (v1, v2) = c.eval_moments(&[p.x, p.y, p.z]);
            assert!((v1 - m1).abs() <= 1e-2 * v1.abs().max(1.0));
            assert!((v2 - m2).abs() <= 1e-2 * v2.abs().max(1.0));
        }
    }

    #[test]
    fn placement_translates_and_scales() {
        let ob = UncertainObstacle::heart("h", ScalarDistribution::uniform(-0.1, 0.1)).unwrap();
        let moved = ob.placed(Vector3::new(0.6, 0.2, 0.0), 1.5).unwrap();
        let p = WorkspacePoint::new(0.05, -0.03, 0.1);
        let q = WorkspacePoint::new(0.6 + 1.5 * p.x, 0.2 + 1.5 * p.y, 1.5 * p.z);
        assert!((ob.eval(&p, 0.02) - moved.eval(&q, 0.02)).abs() < 1e-10);
    }

    #[test]
    fn map_risk_takes_maximum() {
        let a = UncertainObstacle::sphere("a", Vector3::new(0.0, 0.0, 0.0), ScalarDistribution::uniform(1.0, 2.0)).unwrap();
        let b = UncertainObstacle::sphere("b", Vector3::new(5.0, 0.0, 0.0), ScalarDistribution::uniform(1.0, 2.0)).unwrap();
        let map = RiskContourMap::from_obstacles(&[a, b], 0.3, Aabb::default()).unwrap();
        let p = WorkspacePoint::new(2.5, 0.0, 0.0);
        let ra = map.contours()[0].membership(&p).risk_bound;
        let rb = map.contours()[1].membership(&p).risk_bound;
        assert_eq!(map.map_risk(&p), ra.max(rb));
        assert_eq!(map.map_risk(&WorkspacePoint::new(0.1, 0.0, 0.0)), 1.0);
        assert_eq!(RiskContourMap::empty(Aabb::default()).map_risk(&p), 0.0);
    }

    #[test]
    fn map_rejects_mixed_tolerances() {
        let c = contour_from_obstacle(&sphere_uniform(), 0.3).unwrap();
        let d = c.with_delta(0.2).unwrap();
        assert!(RiskContourMap::new(vec![c, d], Aabb::default()).is_err());
    }
}
