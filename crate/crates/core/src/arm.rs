//! Serial kinematic chains: forward kinematics, limits, link occupancy and
//! the calibrated link ellipsoids used for certification.

use nalgebra::{DVector, Isometry3, Matrix3, Point3, Rotation3, Translation3, Unit, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polyrisk::ScalarDistribution;
use crate::soscert::EllipsoidRegion;

/// Clearance added to every base ellipsoid semi-axis, meters.
pub const ELLIPSOID_MARGIN: f64 = 0.02;
/// Surface points sampled per link capsule.
pub const POINTS_PER_LINK: usize = 32;
pub const DEFAULT_INFLATION_CAP: f64 = 10.0;
const INFLATION_RESOLUTION: f64 = 1e-3;

/// One revolute joint: fixed transform from the previous joint frame,
/// followed by rotation about `axis`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub xyz: [f64; 3],
    /// Fixed roll/pitch/yaw of the joint frame, radians.
    #[serde(default)]
    pub rpy: [f64; 3],
    pub axis: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub v_max: Vec<f64>,
    pub u_max: Vec<f64>,
}

impl Limits {
    pub fn validate(&self, n: usize) -> Result<()> {
        let lens = [self.q_min.len(), self.q_max.len(), self.v_max.len(), self.u_max.len()];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Shape(format!("limits lengths {lens:?} for {n} joints")));
        }
        for i in 0..n {
            if !(self.q_min[i] < self.q_max[i]) || !(self.v_max[i] > 0.0) || !(self.u_max[i] > 0.0) {
                return Err(Error::InvalidInput(format!("invalid limits on joint {i}")));
            }
        }
        Ok(())
    }

    /// Symmetric limits: `|q| ≤ q`, `|qdot| ≤ v`, `|u| ≤ u` on every joint.
    pub fn symmetric(n: usize, q: f64, v: f64, u: f64) -> Self {
        Limits { q_min: vec![-q; n], q_max: vec![q; n], v_max: vec![v; n], u_max: vec![u; n] }
    }

    pub fn clip_control(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| u[i].clamp(-self.u_max[i], self.u_max[i]))
    }
}

/// Robot description as stored in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotConfig {
    pub name: String,
    pub joints: Vec<JointSpec>,
    /// End-effector point in the last joint frame.
    pub ee_offset: [f64; 3],
    /// Capsule radius per link (one per joint; link `j` runs from joint `j`
    /// to joint `j + 1`, the last one to the end effector).
    pub link_radius: Vec<f64>,
    pub limits: Limits,
    /// Links handed to the certifier; all links when absent. Links left out
    /// are not covered by the safety argument.
    #[serde(default)]
    pub certify_links: Option<Vec<usize>>,
    /// Default starting configuration.
    #[serde(default)]
    pub home: Option<Vec<f64>>,
}

impl RobotConfig {
    /// Planar arm in the `xy` plane rotating about `z`.
    pub fn planar(lengths: &[f64], radius: f64) -> Self {
        let n = lengths.len();
        let mut joints = Vec::with_capacity(n);
        let mut prev = 0.0;
        for &l in lengths {
            joints.push(JointSpec { xyz: [prev, 0.0, 0.0], rpy: [0.0; 3], axis: [0.0, 0.0, 1.0] });
            prev = l;
        }
        RobotConfig {
            name: format!("planar-{n}"),
            joints,
            ee_offset: [prev, 0.0, 0.0],
            link_radius: vec![radius; n],
            limits: Limits::symmetric(n, std::f64::consts::PI, 2.0, 1.0),
            certify_links: None,
            home: None,
        }
    }

    /// The desk-scale default: three links of 0.5, 0.4 and 0.3 m.
    pub fn planar_three_link() -> Self {
        RobotConfig::planar(&[0.5, 0.4, 0.3], 0.03)
    }

    /// Seven-joint arm with Franka Panda modified-DH parameters.
    pub fn franka_like() -> Self {
        use std::f64::consts::FRAC_PI_2;
        let a = [0.0, 0.0, 0.0, 0.0825, -0.0825, 0.0, 0.088];
        let d = [0.333, 0.0, 0.316, 0.0, 0.384, 0.0, 0.0];
        let alpha = [0.0, -FRAC_PI_2, FRAC_PI_2, FRAC_PI_2, -FRAC_PI_2, FRAC_PI_2, FRAC_PI_2];
        let joints = (0..7)
            .map(|i| JointSpec {
                xyz: [a[i], -d[i] * alpha[i].sin(), d[i] * alpha[i].cos()],
                rpy: [alpha[i], 0.0, 0.0],
                axis: [0.0, 0.0, 1.0],
            })
            .collect();
        RobotConfig {
            name: "franka-like".into(),
            joints,
            ee_offset: [0.0, 0.0, 0.107 + 0.1034],
            link_radius: vec![0.08, 0.08, 0.07, 0.07, 0.06, 0.06, 0.05],
            limits: Limits {
                q_min: vec![-2.8973, -1.7628, -2.8973, -3.0718, -2.8973, -0.0175, -2.8973],
                q_max: vec![2.8973, 1.7628, 2.8973, -0.0698, 2.8973, 3.7525, 2.8973],
                v_max: vec![2.175, 2.175, 2.175, 2.175, 2.61, 2.61, 2.61],
                u_max: vec![1.0; 7],
            },
            certify_links: Some(vec![4, 5, 6]),
            home: Some(vec![0.0, -0.785, 0.0, -2.356, 0.0, 1.571, 0.785]),
        }
    }
}

#[derive(Clone, Debug)]
struct Joint {
    origin: Isometry3<f64>,
    axis: Unit<Vector3<f64>>,
}

#[derive(Clone, Debug)]
pub struct KinematicChain {
    joints: Vec<Joint>,
    ee_offset: Vector3<f64>,
    pub link_radius: Vec<f64>,
    pub config: RobotConfig,
}

/// Joint-space state `x = [q, qdot]`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

impl JointState {
    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        JointState { q, qdot: DVector::zeros(n) }
    }

    /// Stacked `[q, qdot]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.q.len();
        DVector::from_fn(2 * n, |i, _| if i < n { self.q[i] } else { self.qdot[i - n] })
    }

    pub fn from_vector(x: &DVector<f64>) -> Result<Self> {
        if x.len() % 2 != 0 {
            return Err(Error::Shape(format!("state vector of odd length {}", x.len())));
        }
        let n = x.len() / 2;
        Ok(JointState { q: x.rows(0, n).into_owned(), qdot: x.rows(n, n).into_owned() })
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite())
    }
}

/// Frames of every joint (after its rotation) and the end-effector position.
#[derive(Clone, Debug)]
pub struct ForwardKinematics {
    pub frames: Vec<Isometry3<f64>>,
    pub ee: Vector3<f64>,
}

impl ForwardKinematics {
    /// Joint origins followed by the end effector: the `n_q + 1` anchor
    /// points bounding the links.
    pub fn anchors(&self) -> Vec<Vector3<f64>> {
        let mut pts: Vec<Vector3<f64>> = self.frames.iter().map(|f| f.translation.vector).collect();
        pts.push(self.ee);
        pts
    }
}

impl KinematicChain {
    pub fn new(config: RobotConfig) -> Result<Self> {
        let n = config.joints.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!("a chain needs at least 2 joints, got {n}")));
        }
        if config.link_radius.len() != n {
            return Err(Error::Shape(format!("{} link radii for {n} links", config.link_radius.len())));
        }
        config.limits.validate(n)?;
        let mut joints = Vec::with_capacity(n);
        for (i, j) in config.joints.iter().enumerate() {
            let axis = Vector3::from(j.axis);
            if (axis.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("joint {i} axis is not unit length")));
            }
            let rot = UnitQuaternion::from_euler_angles(j.rpy[0], j.rpy[1], j.rpy[2]);
            joints.push(Joint {
                origin: Isometry3::from_parts(Translation3::from(Vector3::from(j.xyz)), rot),
                axis: Unit::new_unchecked(axis),
            });
        }
        if let Some(links) = &config.certify_links {
            if links.iter().any(|&l| l >= n) {
                return Err(Error::InvalidInput(format!("certified link index out of range in {links:?}")));
            }
        }
        Ok(KinematicChain {
            joints,
            ee_offset: Vector3::from(config.ee_offset),
            link_radius: config.link_radius.clone(),
            config,
        })
    }

    pub fn n_q(&self) -> usize {
        self.joints.len()
    }

    pub fn limits(&self) -> &Limits {
        &self.config.limits
    }

    pub fn forward_kinematics(&self, q: &[f64]) -> ForwardKinematics {
        assert_eq!(q.len(), self.n_q(), "configuration length");
        let mut t = Isometry3::identity();
        let mut frames = Vec::with_capacity(q.len());
        for (j, &qi) in self.joints.iter().zip(q) {
            t = t * j.origin * UnitQuaternion::from_axis_angle(&j.axis, qi);
            frames.push(t);
        }
        let ee = t.transform_point(&Point3::from(self.ee_offset)).coords;
        ForwardKinematics { frames, ee }
    }

    pub fn end_effector(&self, q: &[f64]) -> Vector3<f64> {
        self.forward_kinematics(q).ee
    }

    /// Approach axis of the end effector (last frame's `z` for spatial arms,
    /// the last link direction for planar ones).
    pub fn approach_axis(&self, q: &[f64]) -> Vector3<f64> {
        let fk = self.forward_kinematics(q);
        let last = fk.frames.last().expect("non-empty chain");
        let d = fk.ee - last.translation.vector;
        if d.norm() > 1e-9 {
            d.normalize()
        } else {
            last.rotation * Vector3::z()
        }
    }

    /// Length of every link (distance between consecutive anchors), which is
    /// configuration independent for a rigid chain.
    pub fn link_lengths(&self) -> Vec<f64> {
        let a = self.forward_kinematics(&vec![0.0; self.n_q()]).anchors();
        a.windows(2).map(|w| (w[1] - w[0]).norm()).collect()
    }

    /// Surface points of every link capsule at `q`, grouped per link.
    pub fn link_occupancy(&self, q: &[f64]) -> Vec<Vec<Vector3<f64>>> {
        let anchors = self.forward_kinematics(q).anchors();
        anchors
            .windows(2)
            .zip(&self.link_radius)
            .map(|(w, &r)| capsule_points(&w[0], &w[1], r))
            .collect()
    }
}

/// Rotation taking the `x` axis onto `dir` (identity for a null direction).
fn align_x(dir: &Vector3<f64>) -> Rotation3<f64> {
    let n = dir.norm();
    if n < 1e-12 {
        return Rotation3::identity();
    }
    Rotation3::rotation_between(&Vector3::x(), &(dir / n))
        .unwrap_or_else(|| Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::PI))
}

/// Five rings of six points along the capsule axis plus the two cap tips.
fn capsule_points(a: &Vector3<f64>, b: &Vector3<f64>, r: f64) -> Vec<Vector3<f64>> {
    let axis = b - a;
    let rot = align_x(&axis);
    let (u, v) = (rot * Vector3::y(), rot * Vector3::z());
    let dir = rot * Vector3::x();
    let mut pts = Vec::with_capacity(POINTS_PER_LINK);
    for k in 0..5 {
        let c = a + axis * (k as f64 / 4.0);
        for s in 0..6 {
            let th = std::f64::consts::TAU * (s as f64 + 0.5 * (k % 2) as f64) / 6.0;
            pts.push(c + r * (th.cos() * u + th.sin() * v));
        }
    }
    pts.push(a - r * dir);
    pts.push(b + r * dir);
    pts
}

/// Per-link ellipsoid description. Link `j` spans anchors `(j, j + 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkEllipsoidSpec {
    pub links: Vec<LinkEllipsoid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkEllipsoid {
    pub anchors: (usize, usize),
    /// Semi-axes of the base shape in the link frame (link direction first).
    pub semi_axes: [f64; 3],
    pub inflation: f64,
}

impl LinkEllipsoid {
    /// Base shape `Q_j` in the link frame.
    pub fn base_shape(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.semi_axes).map(|a| 1.0 / (a * a)))
    }
}

impl LinkEllipsoidSpec {
    /// Default spec for the chain's certified links: semi-axes
    /// `(length/2 + margin, radius + margin, radius + margin)`, no inflation.
    pub fn for_chain(chain: &KinematicChain) -> Self {
        let lengths = chain.link_lengths();
        let ids: Vec<usize> = chain.config.certify_links.clone().unwrap_or_else(|| (0..chain.n_q()).collect());
        let links = ids
            .into_iter()
            .map(|j| {
                let r = chain.link_radius[j] + ELLIPSOID_MARGIN;
                LinkEllipsoid { anchors: (j, j + 1), semi_axes: [lengths[j] / 2.0 + ELLIPSOID_MARGIN, r, r], inflation: 1.0 }
            })
            .collect();
        LinkEllipsoidSpec { links }
    }

    pub fn with_inflation(&self, k: f64) -> Self {
        let mut s = self.clone();
        for l in &mut s.links {
            l.inflation = k;
        }
        s
    }

    pub fn validate(&self, chain: &KinematicChain) -> Result<()> {
        for l in &self.links {
            if !(l.inflation >= 1.0) || l.semi_axes.iter().any(|a| !(*a > 0.0)) {
                return Err(Error::InvalidInput(format!("invalid link ellipsoid {l:?}")));
            }
            if l.anchors.0 > chain.n_q() || l.anchors.1 > chain.n_q() {
                return Err(Error::InvalidInput(format!("anchor out of range in {l:?}")));
            }
        }
        Ok(())
    }
}

/// Link ellipsoids at `q`: centered at the anchor midpoint, base shape
/// rotated onto the link direction and scaled by `1/inflation²`.
pub fn link_ellipsoids(chain: &KinematicChain, spec: &LinkEllipsoidSpec, q: &[f64]) -> Vec<EllipsoidRegion> {
    let anchors = chain.forward_kinematics(q).anchors();
    spec.links
        .iter()
        .map(|l| {
            let (a, b) = (anchors[l.anchors.0], anchors[l.anchors.1]);
            let r = align_x(&(b - a));
            let shape = r.matrix() * (l.base_shape() / (l.inflation * l.inflation)) * r.matrix().transpose();
            let shape = 0.5 * (shape + shape.transpose());
            EllipsoidRegion::new(0.5 * (a + b), shape, format!("link{}", l.anchors.0))
                .expect("rotated positive-definite shape")
        })
        .collect()
}

/// Checks position, velocity and control bounds; `violation` sums the
/// positive exceedances.
pub fn within_limits(x: &JointState, u: &DVector<f64>, lim: &Limits) -> (bool, f64) {
    let mut v = 0.0;
    for i in 0..x.q.len() {
        v += (x.q[i] - lim.q_max[i]).max(0.0) + (lim.q_min[i] - x.q[i]).max(0.0);
        v += (x.qdot[i].abs() - lim.v_max[i]).max(0.0);
        v += (u[i].abs() - lim.u_max[i]).max(0.0);
    }
    (v == 0.0, v)
}

/// Inflation each link would need to contain its own surface points when
/// the true configuration is `q_true` and the ellipsoids sit at `q_nom`.
fn required_inflation(chain: &KinematicChain, spec: &LinkEllipsoidSpec, q_nom: &[f64], q_true: &[f64]) -> Vec<f64> {
    let base = spec.with_inflation(1.0);
    let ells = link_ellipsoids(chain, &base, q_nom);
    let occ = chain.link_occupancy(q_true);
    spec.links
        .iter()
        .zip(&ells)
        .map(|(l, e)| {
            occ[l.anchors.0]
                .iter()
                .map(|p| {
                    let d = p - e.center;
                    d.dot(&(e.shape * d)).sqrt()
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Empirical fraction of draws in which every link is contained.
fn coverage(req: &[Vec<f64>], infl: &[f64]) -> f64 {
    let ok = req.iter().filter(|r| r.iter().zip(infl).all(|(need, k)| need <= k)).count();
    ok as f64 / req.len() as f64
}

/// Draws `n` (nominal, perturbed) configuration pairs: nominal angles
/// uniform in `[-π, π]`, perturbed by independent per-joint errors.
fn draw_required(
    chain: &KinematicChain,
    spec: &LinkEllipsoidSpec,
    pred_error: &[ScalarDistribution],
    n: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pi = std::f64::consts::PI;
    (0..n)
        .map(|_| {
            let q_nom: Vec<f64> = (0..chain.n_q()).map(|_| rng.random_range(-pi..pi)).collect();
            let q_true: Vec<f64> = q_nom.iter().zip(pred_error).map(|(q, d)| q + d.sample(&mut rng)).collect();
            required_inflation(chain, spec, &q_nom, &q_true)
        })
        .collect()
}

/// Fraction of `n` fresh draws in which every link lies in its ellipsoid.
pub fn containment_rate(
    chain: &KinematicChain,
    spec: &LinkEllipsoidSpec,
    pred_error: &[ScalarDistribution],
    n: usize,
    seed: u64,
) -> f64 {
    let req = draw_required(chain, spec, pred_error, n, seed);
    let infl: Vec<f64> = spec.links.iter().map(|l| l.inflation).collect();
    coverage(&req, &infl)
}

/// Smallest per-link inflations under which all link surfaces stay inside
/// their ellipsoids in at least `1 - delta_ell` of `n_mc` draws of the joint
/// prediction error.
///
/// Every link takes the empirical quantile of its required inflation at a
/// common level, and the level is bisected until joint coverage holds.
pub fn calibrate_ellipsoids(
    chain: &KinematicChain,
    spec: &LinkEllipsoidSpec,
    pred_error: &[ScalarDistribution],
    delta_ell: f64,
    n_mc: usize,
    seed: u64,
    cap: f64,
) -> Result<LinkEllipsoidSpec> {
    if !(delta_ell > 0.0 && delta_ell < 1.0) {
        return Err(Error::InvalidInput(format!("delta_ell {delta_ell} outside (0, 1)")));
    }
    if n_mc < 1000 {
        return Err(Error::InvalidInput(format!("calibration needs at least 1000 draws, got {n_mc}")));
    }
    if pred_error.len() != chain.n_q() {
        return Err(Error::Shape(format!("{} error distributions for {} joints", pred_error.len(), chain.n_q())));
    }
    spec.validate(chain)?;
    let req = draw_required(chain, spec, pred_error, n_mc, seed);
    let sorted: Vec<Vec<f64>> = (0..spec.links.len())
        .map(|j| {
            let mut col: Vec<f64> = req.iter().map(|r| r[j]).collect();
            col.sort_by(|a, b| a.total_cmp(b));
            col
        })
        .collect();
    // Round up onto the calibration grid so the reported value still covers.
    let grid = |v: f64| ((v / INFLATION_RESOLUTION).ceil() * INFLATION_RESOLUTION).max(1.0);
    let at_level = |level: f64| -> Vec<f64> {
        sorted
            .iter()
            .map(|col| {
                let idx = ((level * n_mc as f64).ceil() as usize).clamp(1, n_mc) - 1;
                grid(col[idx])
            })
            .collect()
    };
    let target = 1.0 - delta_ell;
    let (mut lo, mut hi) = (target, 1.0);
    if coverage(&req, &at_level(lo)) < target {
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if coverage(&req, &at_level(mid)) >= target {
                hi = mid;
            } else {
                lo = mid;
            }
            if (hi - lo) * (n_mc as f64) < 0.5 {
                break;
            }
        }
    } else {
        hi = lo;
    }
    let infl = at_level(hi);
    if infl.iter().any(|&k| k > cap) {
        return Err(Error::InflationCap { cap });
    }
    let mut out = spec.clone();
    for (l, k) in out.links.iter_mut().zip(infl) {
        l.inflation = k;
    }
    Ok(out)
}
