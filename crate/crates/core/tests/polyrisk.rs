use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use riskbound::polyrisk::{
    contour_from_obstacle, Aabb, Monomial, Polynomial, RiskContourMap, ScalarDistribution, UncertainObstacle,
    WorkspacePoint,
};

fn poly_from(coeffs: &[(u32, u32, u32, f64)]) -> Polynomial {
    let vars = ["x", "y", "z"];
    let mut p = Polynomial::zero(&vars);
    for &(a, b, c, k) in coeffs {
        p.add_term(Monomial::from_exponents(&[a, b, c]).unwrap(), k);
    }
    p
}

fn arb_poly() -> impl Strategy<Value = Polynomial> {
    prop::collection::vec((0u32..3, 0u32..3, 0u32..3, -2.0f64..2.0), 1..8).prop_map(|t| poly_from(&t))
}

fn arb_point() -> impl Strategy<Value = [f64; 3]> {
    [-1.5f64..1.5, -1.5f64..1.5, -1.5f64..1.5]
}

fn arb_distribution() -> impl Strategy<Value = ScalarDistribution> {
    prop_oneof![
        (0.2f64..1.0, 0.05f64..1.0).prop_map(|(lo, w)| ScalarDistribution::uniform(lo, lo + w)),
        (0.2f64..1.0, 0.01f64..0.3).prop_map(|(m, s)| ScalarDistribution::gaussian(m, s)),
        (0.5f64..4.0, 0.5f64..4.0, 0.2f64..0.8).prop_map(|(a, b, lo)| ScalarDistribution::beta(a, b, lo, lo + 0.7)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn product_evaluates_pointwise(p in arb_poly(), q in arb_poly(), pt in arb_point()) {
        let lhs = (&p * &q).eval_slice(&pt);
        let rhs = p.eval_slice(&pt) * q.eval_slice(&pt);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
    }

    #[test]
    fn square_matches_self_product(p in arb_poly()) {
        let diff = &p.square() - &(&p * &p);
        prop_assert!(diff.max_abs_coeff() <= 1e-12);
    }

    #[test]
    fn product_degree_adds(p in arb_poly(), q in arb_poly()) {
        // Leading forms of random real coefficients do not cancel.
        let prod = &p * &q;
        prop_assert_eq!(prod.degree(), p.degree() + q.degree());
    }

    #[test]
    fn sum_degree_is_bounded(p in arb_poly(), q in arb_poly()) {
        prop_assert!((&p + &q).degree() <= p.degree().max(q.degree()));
    }

    #[test]
    fn contour_variance_is_nonnegative(
        d in arb_distribution(),
        c in [-0.5f64..0.5, -0.5f64..0.5, -0.5f64..0.5],
        pt in arb_point(),
    ) {
        let ob = UncertainObstacle::sphere("s", Vector3::new(c[0], c[1], c[2]), d).unwrap();
        let contour = contour_from_obstacle(&ob, 0.2).unwrap();
        let (v1, v2) = contour.eval_moments(&pt);
        prop_assert!(v1 - v2 * v2 >= -1e-9 * (1.0 + v1.abs()));
    }

    #[test]
    fn map_risk_is_worst_contour(pt in arb_point()) {
        let a = UncertainObstacle::sphere("a", Vector3::new(0.5, 0.0, 0.0), ScalarDistribution::uniform(0.2, 0.4)).unwrap();
        let b = UncertainObstacle::sphere("b", Vector3::new(-0.5, 0.2, 0.0), ScalarDistribution::gaussian(0.3, 0.05)).unwrap();
        let m = RiskContourMap::from_obstacles(&[a, b], 0.1, Aabb::default()).unwrap();
        let p = WorkspacePoint::from(pt);
        let worst = m.contours().iter().map(|c| c.membership(&p).risk_bound).fold(0.0, f64::max);
        prop_assert_eq!(m.map_risk(&p), worst);
        prop_assert_eq!(m.is_safe(&p), m.contours().iter().all(|c| c.membership(&p).safe));
    }
}

/// Moments of every supported distribution agree with sample means.
#[test]
fn moments_match_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for d in [
        ScalarDistribution::uniform(-0.1, 0.1),
        ScalarDistribution::gaussian(0.05, 0.01),
        ScalarDistribution::beta(2.0, 5.0, 1.0, 2.0),
    ] {
        let n = 200_000;
        let samples: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
        for k in 1..=4 {
            let est = samples.iter().map(|w| w.powi(k)).sum::<f64>() / n as f64;
            let sd = (samples.iter().map(|w| w.powi(2 * k)).sum::<f64>() / n as f64 - est * est).sqrt();
            let exact = d.raw_moment(k as u32);
            assert!((est - exact).abs() <= 5.0 * sd / (n as f64).sqrt() + 1e-15, "{d:?} k={k}");
        }
    }
}

/// Points the contour calls safe have a sampled collision frequency within
/// the tolerance.
#[test]
fn safe_points_have_bounded_collision_frequency() {
    let ob = UncertainObstacle::heart("h", ScalarDistribution::uniform(-0.1, 0.1)).unwrap();
    let delta = 0.2;
    let c = contour_from_obstacle(&ob, delta).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for i in 0..400 {
        let t = i as f64 / 400.0;
        let p = WorkspacePoint::new(0.15 + 0.2 * t, 0.05 * (t * 17.0).sin(), 0.1 * (t * 5.0).cos());
        if !c.membership(&p).safe {
            continue;
        }
        checked += 1;
        let n = 4000;
        let hits = (0..n).filter(|_| ob.eval(&p, ob.omega.sample(&mut rng)) <= 0.0).count();
        let freq = hits as f64 / n as f64;
        let sigma = (delta * (1.0 - delta) / n as f64).sqrt();
        assert!(freq <= delta + 3.0 * sigma, "point {p:?} frequency {freq}");
    }
    assert!(checked > 50);
}
