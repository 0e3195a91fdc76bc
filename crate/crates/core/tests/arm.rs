use nalgebra::Vector3;
use proptest::prelude::*;
use riskbound::arm::{calibrate_ellipsoids, containment_rate, link_ellipsoids, KinematicChain, LinkEllipsoidSpec, RobotConfig};
use riskbound::polyrisk::{ScalarDistribution, WorkspacePoint};

fn planar3() -> KinematicChain {
    KinematicChain::new(RobotConfig::planar_three_link()).unwrap()
}

/// End effector of a planar arm by summing link vectors at cumulative angles.
fn planar_ee(lengths: &[f64], q: &[f64]) -> Vector3<f64> {
    let mut th = 0.0;
    let mut p = Vector3::zeros();
    for (l, qi) in lengths.iter().zip(q) {
        th += qi;
        p += *l * Vector3::new(th.cos(), th.sin(), 0.0);
    }
    p
}

fn q3() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.1f64..3.1, 3)
}

proptest! {
    #[test]
    fn planar_fk_matches_angle_sum(q in q3()) {
        let ee = planar3().end_effector(&q);
        prop_assert!((ee - planar_ee(&[0.5, 0.4, 0.3], &q)).norm() < 1e-12);
    }

    #[test]
    fn fk_is_lipschitz_in_joint_angles(a in q3(), b in q3()) {
        // Each joint moves everything beyond it on an arc of radius at most
        // the remaining reach.
        let c = planar3();
        let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        prop_assert!((c.end_effector(&a) - c.end_effector(&b)).norm() <= 1.2 * d + 1e-12);
    }

    #[test]
    fn link_lengths_are_rigid(q in q3()) {
        let c = planar3();
        let a = c.forward_kinematics(&q).anchors();
        for (w, l) in a.windows(2).zip([0.5, 0.4, 0.3]) {
            prop_assert!(((w[1] - w[0]).norm() - l).abs() < 1e-12);
        }
    }

    #[test]
    fn link_ellipsoids_sit_on_link_midpoints(q in q3()) {
        let c = planar3();
        let a = c.forward_kinematics(&q).anchors();
        let es = link_ellipsoids(&c, &LinkEllipsoidSpec::for_chain(&c), &q);
        prop_assert_eq!(es.len(), 3);
        for (j, e) in es.iter().enumerate() {
            prop_assert!((e.center - 0.5 * (a[j] + a[j + 1])).norm() < 1e-12);
            // The long axis points along the link.
            let dir = (a[j + 1] - a[j]).normalize();
            let reach = 1.0 / dir.dot(&(e.shape * dir)).sqrt();
            prop_assert!((reach - c.link_lengths()[j] / 2.0 - 0.02).abs() < 1e-9);
        }
    }
}

#[test]
fn franka_like_chain_is_well_formed() {
    let c = KinematicChain::new(RobotConfig::franka_like()).unwrap();
    assert_eq!(c.n_q(), 7);
    let home = RobotConfig::franka_like().home.unwrap();
    let ee = c.end_effector(&home);
    assert!(ee.iter().all(|v| v.is_finite()));
    // The ready pose holds the hand in front of the base, above the table.
    assert!(ee.x > 0.2 && ee.z > 0.2, "{ee:?}");
    assert_eq!(link_ellipsoids(&c, &LinkEllipsoidSpec::for_chain(&c), &home).len(), 3);
}

#[test]
fn calibration_covers_fresh_draws() {
    let c = planar3();
    let err = vec![ScalarDistribution::gaussian(0.0, 0.05); 3];
    let delta_ell = 0.01;
    let spec = calibrate_ellipsoids(&c, &LinkEllipsoidSpec::for_chain(&c), &err, delta_ell, 20_000, 1, 10.0).unwrap();
    assert!(spec.links.iter().all(|l| l.inflation > 1.0));
    let n = 20_000;
    let rate = containment_rate(&c, &spec, &err, n, 777);
    let sigma = (delta_ell * (1.0 - delta_ell) / n as f64).sqrt();
    assert!(rate >= 1.0 - delta_ell - 3.0 * sigma, "fresh containment {rate}");
}

#[test]
fn calibration_without_error_contains_the_links_themselves() {
    let c = planar3();
    let err = vec![ScalarDistribution::gaussian(0.0, 0.0); 3];
    let spec = calibrate_ellipsoids(&c, &LinkEllipsoidSpec::for_chain(&c), &err, 0.001, 2000, 0, 10.0).unwrap();
    let q = [0.3, -0.7, 1.1];
    let es = link_ellipsoids(&c, &spec, &q);
    for (pts, e) in c.link_occupancy(&q).iter().zip(&es) {
        assert!(pts.iter().all(|p| e.contains(&WorkspacePoint::from(*p))));
    }
}

#[test]
fn calibration_rejects_bad_inputs() {
    let c = planar3();
    let spec = LinkEllipsoidSpec::for_chain(&c);
    let err = vec![ScalarDistribution::gaussian(0.0, 0.05); 3];
    assert!(calibrate_ellipsoids(&c, &spec, &err, 0.0, 5000, 0, 10.0).is_err());
    assert!(calibrate_ellipsoids(&c, &spec, &err, 0.01, 10, 0, 10.0).is_err());
    assert!(calibrate_ellipsoids(&c, &spec, &err[..2], 0.01, 5000, 0, 10.0).is_err());
    let huge = vec![ScalarDistribution::gaussian(0.0, 3.0); 3];
    assert!(calibrate_ellipsoids(&c, &spec, &huge, 0.01, 5000, 0, 1.5).is_err());
}
