use nalgebra::{DVector, Vector3};
use proptest::prelude::*;
use riskbound::arm::{JointState, KinematicChain, LinkEllipsoidSpec, RobotConfig};
use riskbound::mppi::{IntegratorModel, MppiConfig, PolicyParams};
use riskbound::planner::{allocate_risk_budget, plan_step, run_episode, PlannerConfig, PlanningContext, Task};
use riskbound::polyrisk::{Aabb, ScalarDistribution, UncertainObstacle};
use riskbound::simenv::{GoalRegion, ProcessNoise, SimConfig};

proptest! {
    #[test]
    fn budget_never_exceeds_the_tolerance(delta in 1e-6f64..0.999, z_bar in 1usize..100_000) {
        let b = allocate_risk_budget(delta, z_bar).unwrap();
        prop_assert!(b.delta_o > 0.0 && b.delta_ell > 0.0);
        prop_assert!(b.delta_o + z_bar as f64 * b.delta_ell <= delta);
        prop_assert!(b.delta_ell <= 0.001);
        prop_assert!(b.episode_bound(z_bar) <= delta);
    }
}

fn chain() -> KinematicChain {
    KinematicChain::new(RobotConfig::planar_three_link()).unwrap()
}

fn config(n: usize) -> PlannerConfig {
    PlannerConfig { mppi: MppiConfig { n_samples: n, ..Default::default() }, ..Default::default() }
}

/// Arm stretched along `x`, goal straight up, and a small ball just above
/// the last link: the first greedy command swings the link into it.
fn blocked_task() -> Task {
    let ball = UncertainObstacle::sphere("ball", Vector3::new(1.09, 0.14, 0.0), ScalarDistribution::uniform(0.02, 0.03)).unwrap();
    Task {
        start: JointState::at_rest(DVector::zeros(3)),
        goal: GoalRegion::new([0.0, 1.2, 0.0], 0.1),
        goal_axis: None,
        obstacles: vec![ball],
        bounds: Aabb::default(),
        delta: 0.2,
        time_budget: 10.0,
        max_control_steps: 50,
    }
}

fn sim() -> SimConfig {
    SimConfig::new(0.1, ProcessNoise::zero(6), 0, 50).unwrap()
}

#[test]
fn rejected_commands_trigger_retries_with_new_commands() {
    let c = chain();
    let model = IntegratorModel { dt: 0.1, limits: c.limits().clone() };
    let task = blocked_task();
    let spec = LinkEllipsoidSpec::for_chain(&c);
    let mut cfg = config(200);
    cfg.weights.alpha_c = 0.0;
    let sim = sim();
    let ctx = PlanningContext::new(&c, &model, &task, &spec, &cfg, &sim).unwrap();
    let out = plan_step(&ctx, &task.start, &PolicyParams::new(15, 3, 0.25), 0, 0, 10).unwrap();
    assert!(out.retries >= 1, "{out:?}");
    assert_eq!(out.rejected.len(), out.retries);
    assert!(out.rejected.iter().all(|r| *r != out.u));
    assert!(out.hold || out.cert.is_certified());
}

#[test]
fn no_retries_means_hold_on_rejection() {
    let c = chain();
    let model = IntegratorModel { dt: 0.1, limits: c.limits().clone() };
    let task = blocked_task();
    let spec = LinkEllipsoidSpec::for_chain(&c);
    let mut cfg = config(200);
    cfg.weights.alpha_c = 0.0;
    let sim = sim();
    let ctx = PlanningContext::new(&c, &model, &task, &spec, &cfg, &sim).unwrap();
    let out = plan_step(&ctx, &task.start, &PolicyParams::new(15, 3, 0.25), 0, 0, 0).unwrap();
    assert!(out.hold);
    assert_eq!(out.retries, 0);
    assert_eq!(out.u, DVector::zeros(3));
    assert!(!out.cert.is_certified());
}

#[test]
fn free_reach_succeeds_and_is_reproducible() {
    let c = chain();
    let model = IntegratorModel { dt: 0.1, limits: c.limits().clone() };
    let goal = c.end_effector(&[0.9, 0.4, 0.2]);
    let task = Task {
        start: JointState::at_rest(DVector::from_vec(vec![0.1, 0.2, 0.0])),
        goal: GoalRegion::new(goal.into(), 0.1),
        obstacles: vec![],
        ..blocked_task()
    };
    let spec = LinkEllipsoidSpec::for_chain(&c);
    let cfg = config(300);
    let sim = SimConfig::new(0.1, ProcessNoise::iid(6, ScalarDistribution::gaussian(0.0, 0.01)), 0, 50).unwrap();
    let ctx = PlanningContext::new(&c, &model, &task, &spec, &cfg, &sim).unwrap();
    let a = run_episode(&ctx, 4).unwrap();
    assert!(a.success, "{:?}", a.failure);
    assert!(a.safety_gate_holds());
    assert_eq!(a.path.len(), a.steps + 1);
    assert!((a.ttg - a.steps as f64 * 0.1).abs() < 1e-12);
    // Everything but wall-clock timings repeats exactly.
    let b = run_episode(&ctx, 4).unwrap();
    assert_eq!(a.path, b.path);
    let us = |r: &riskbound::planner::PlanResult| r.trajectory.iter().map(|s| s.u.clone()).collect::<Vec<_>>();
    assert_eq!(us(&a), us(&b));
}

#[test]
fn start_in_collision_is_rejected() {
    let c = chain();
    let model = IntegratorModel { dt: 0.1, limits: c.limits().clone() };
    let ball = UncertainObstacle::sphere("on-arm", Vector3::new(0.6, 0.0, 0.0), ScalarDistribution::uniform(0.1, 0.2)).unwrap();
    let task = Task { obstacles: vec![ball], ..blocked_task() };
    let spec = LinkEllipsoidSpec::for_chain(&c);
    let cfg = config(50);
    let sim = sim();
    assert!(PlanningContext::new(&c, &model, &task, &spec, &cfg, &sim).is_err());
}
