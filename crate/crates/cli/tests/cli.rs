use std::fs;
use std::path::Path;
use std::process::Command;

use ndarray::Array3;
use proptest::prelude::*;
use riskbound::arm::{KinematicChain, LinkEllipsoidSpec, RobotConfig};
use riskbound::desko::{DeskoConfig, TrajectoryDataset};
use riskbound::polyrisk::{Aabb, ScalarDistribution};
use riskbound::soscert::{SolverSettings, Verdict};
use riskbound_cli::artifact::ModelArtifact;
use riskbound_cli::commands::{self, Axis};
use riskbound_cli::config::{
    self, BenchmarkSpec, DataGenSpec, ObstacleSpec, RobotFile, RunConfig, SceneFile, TaskSpec, TermSpec,
};
use riskbound_cli::{dataset, CliError};

fn planar() -> KinematicChain {
    KinematicChain::new(RobotConfig::planar_three_link()).unwrap()
}

fn scene() -> SceneFile {
    SceneFile {
        bounds: Aabb::default(),
        obstacles: vec![
            ObstacleSpec::Sphere { name: "ball".into(), center: [0.9, -0.8, 0.0], radius: ScalarDistribution::uniform(0.08, 0.12) },
            ObstacleSpec::Heart {
                name: "heart".into(),
                center: [-0.15, 0.95, 0.0],
                scale: 1.0,
                omega: ScalarDistribution::uniform(-0.1, 0.1),
            },
            ObstacleSpec::Polynomial {
                name: "slab".into(),
                terms: vec![TermSpec { exps: [0, 0, 1, 0], coeff: 1.0 }, TermSpec { exps: [0, 0, 0, 1], coeff: -1.0 }],
                omega: ScalarDistribution::gaussian(-1.0, 0.01),
            },
        ],
    }
}

fn reach_task() -> TaskSpec {
    TaskSpec {
        name: "reach".into(),
        start: vec![-0.6, 0.4, 0.3],
        goal: None,
        goal_q: Some(vec![1.2, -0.6, -0.4]),
        goal_radius: 0.1,
        goal_axis: None,
        delta: 0.3,
        time_budget: 20.0,
        max_control_steps: 200,
    }
}

fn roundtrip<T: serde::Serialize + serde::de::DeserializeOwned>(v: &T, dir: &Path, name: &str) -> T {
    let p = dir.join(name);
    config::write_toml(&p, v).unwrap();
    config::read_toml(&p).unwrap()
}

#[test]
fn config_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene();
    assert_eq!(roundtrip(&s, dir.path(), "scene.toml"), s);
    let t = reach_task();
    assert_eq!(roundtrip(&t, dir.path(), "task.toml"), t);
    let r = RunConfig::default();
    assert_eq!(roundtrip(&r, dir.path(), "run.toml"), r);
    let d = DataGenSpec::default();
    assert_eq!(roundtrip(&d, dir.path(), "datagen.toml"), d);
    for robot in [RobotFile::Preset { name: "planar3".into() }, RobotFile::Chain(RobotConfig::franka_like())] {
        let back = roundtrip(&robot, dir.path(), "robot.toml");
        assert_eq!(back, robot);
        assert!(back.chain().is_ok());
    }
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for spec in ["bench_planar3_free.toml", "bench_planar3_obstacles.toml"] {
        let b = BenchmarkSpec::load(&root.join(spec)).unwrap();
        assert_eq!(b.spec.seeds.len(), 10);
        for t in &b.spec.tasks {
            t.build(&b.chain, &b.scene).unwrap();
        }
    }
    let _: DataGenSpec = config::read_toml(&root.join("datagen_planar3.toml")).unwrap();
    assert!(config::load_robot(root.join("robots/planar3.toml").to_str().unwrap()).is_ok());
    assert!(matches!(config::load_robot("no_such_robot"), Err(CliError::Usage(_))));
}

#[test]
fn task_needs_exactly_one_goal() {
    let c = planar();
    let mut t = reach_task();
    t.goal = Some([0.5, 0.5, 0.0]);
    assert!(t.build(&c, &SceneFile::default()).is_err());
    t.goal_q = None;
    assert_eq!(t.goal_point(&c).unwrap(), nalgebra::Vector3::new(0.5, 0.5, 0.0));
    t.start = vec![0.0; 2];
    assert!(t.build(&c, &SceneFile::default()).is_err());
}

fn small_dataset() -> TrajectoryDataset {
    let states = Array3::from_shape_fn((3, 5, 2), |(i, t, j)| (i * 100 + t * 10 + j) as f64 * 0.1 - 1.0 / 3.0);
    let controls = Array3::from_shape_fn((3, 4, 1), |(i, t, _)| (i as f64 - t as f64) * 1e-7);
    TrajectoryDataset::new(states, controls).unwrap()
}

#[test]
fn dataset_roundtrips_bit_for_bit() {
    let d = small_dataset();
    let bytes = dataset::encode(&d, 0.1, serde_json::json!({ "seed": 4 })).unwrap();
    let (back, h) = dataset::decode(&bytes).unwrap();
    assert_eq!(back.states, d.states);
    assert_eq!(back.controls, d.controls);
    assert_eq!((h.trajectories, h.horizon, h.state_dim, h.control_dim, h.dt), (3, 4, 2, 1, 0.1));
    assert_eq!(h.meta["seed"], 4);
}

#[test]
fn corrupt_datasets_are_rejected() {
    let bytes = dataset::encode(&small_dataset(), 0.1, serde_json::Value::Null).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(dataset::decode(&bad), Err(CliError::Parse { .. })));
    assert!(dataset::decode(&bytes[..bytes.len() - 8]).is_err());
    assert!(dataset::decode(&bytes[..6]).is_err());
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = String::from_utf8(bytes[12..12 + hlen].to_vec()).unwrap().replace("\"version\":1", "\"version\":9");
    let mut v9 = bytes[..8].to_vec();
    v9.extend_from_slice(&(header.len() as u32).to_le_bytes());
    v9.extend_from_slice(header.as_bytes());
    v9.extend_from_slice(&bytes[12 + hlen..]);
    assert!(matches!(dataset::decode(&v9), Err(CliError::Parse { msg, .. }) if msg.contains("version")));
}

#[test]
fn model_artifact_roundtrips() {
    let d = small_dataset();
    let cfg = DeskoConfig { encoder_widths: vec![8], horizon: 3, ..DeskoConfig::new(2, 1).with_lift_dim(4) };
    let m = commands::fresh_model(&d, cfg, 3).unwrap();
    let a = ModelArtifact::new(m, 0.1, vec![ScalarDistribution::gaussian(0.01, 0.02)]);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("model.json");
    a.save(&p).unwrap();
    assert_eq!(ModelArtifact::load(&p).unwrap(), a);
    let mut wrong = a.clone();
    wrong.version = 7;
    assert!(ModelArtifact::from_json(&wrong.to_json().unwrap()).is_err());
    assert!(ModelArtifact::load(&dir.path().join("missing.json")).is_err());
}

#[test]
fn noiseless_data_follows_the_integrator() {
    let c = planar();
    let spec = DataGenSpec {
        l_n: 3,
        n_per_waypoint: 4,
        horizon: 5,
        sim: config::SimSpec { dt: 0.1, noise: ScalarDistribution::gaussian(0.0, 0.0) },
        ..Default::default()
    };
    let d = commands::gen_data(&c, &reach_task(), &spec, 2).unwrap();
    assert_eq!((d.len(), d.horizon(), d.state_dim(), d.control_dim()), (12, 5, 6, 3));
    let lim = c.limits();
    for i in 0..d.len() {
        for t in 0..5 {
            for j in 0..3 {
                let u = d.controls[[i, t, j]];
                assert!(u.abs() <= lim.u_max[j]);
                let q = (d.states[[i, t, j]] + u * 0.1).clamp(lim.q_min[j], lim.q_max[j]);
                assert_eq!(d.states[[i, t + 1, j]], q);
                assert_eq!(d.states[[i, t + 1, 3 + j]], u);
            }
        }
    }
    let again = commands::gen_data(&c, &reach_task(), &spec, 2).unwrap();
    assert_eq!(again.states, d.states);
}

#[test]
fn empty_scene_contour_is_zero() {
    let g = [Axis::parse("-1:1:5").unwrap(), Axis::parse("-1:1:5").unwrap(), Axis::parse("0:0:1").unwrap()];
    let rows = commands::contour(&SceneFile::default(), 0.1, g).unwrap();
    assert_eq!(rows.len(), 25);
    assert!(rows.iter().all(|r| r.risk_bound == 0.0 && r.safe));
}

#[test]
fn sphere_contour_is_symmetric() {
    let s = SceneFile {
        bounds: Aabb::default(),
        obstacles: vec![ObstacleSpec::Sphere { name: "s".into(), center: [0.0; 3], radius: ScalarDistribution::uniform(0.3, 0.5) }],
    };
    let a = Axis::parse("-1:1:9").unwrap();
    let rows = commands::contour(&s, 0.2, [a, a, Axis::parse("0:0:1").unwrap()]).unwrap();
    for r in &rows {
        let m = rows.iter().find(|o| o.x == -r.x && o.y == -r.y).unwrap();
        assert!((m.risk_bound - r.risk_bound).abs() <= 1e-12);
        let t = rows.iter().find(|o| o.x == r.y && o.y == r.x).unwrap();
        assert!((t.risk_bound - r.risk_bound).abs() <= 1e-12);
    }
    let center = rows.iter().find(|r| r.x == 0.0 && r.y == 0.0).unwrap();
    assert!(!center.safe && center.risk_bound == 1.0);
    assert!(rows.iter().any(|r| r.safe));
}

#[test]
fn malformed_axes_are_rejected() {
    for s in ["1:0:5", "0:1", "0:1:0", "a:1:3", "0:1:1"] {
        assert!(Axis::parse(s).is_err(), "{s}");
    }
    assert_eq!(Axis::parse("2:2:1").unwrap().values(), vec![2.0]);
}

fn single_sphere(center: [f64; 3]) -> SceneFile {
    SceneFile {
        bounds: Aabb::default(),
        obstacles: vec![ObstacleSpec::Sphere { name: "ball".into(), center, radius: ScalarDistribution::uniform(0.08, 0.12) }],
    }
}

fn certify(s: &SceneFile, q: &[f64]) -> commands::CertifyReport {
    let c = planar();
    let e = LinkEllipsoidSpec::for_chain(&c);
    commands::certify(&c, &e, &s.obstacles().unwrap(), s, q, 0.3, &SolverSettings::default(), 500).unwrap()
}

#[test]
fn certify_reports_per_link_and_obstacle() {
    let empty = certify(&SceneFile::default(), &[0.0; 3]);
    assert_eq!(empty.verdict, Verdict::Certified);
    assert!(empty.entries.is_empty() && empty.total_solves == 0);

    let far = certify(&single_sphere([0.0, -1.5, 0.0]), &[0.0; 3]);
    assert_eq!(far.verdict, Verdict::Certified);
    assert_eq!(far.entries.len(), 3);
    assert!(far.entries.iter().all(|e| e.verdict == Verdict::Certified));

    // The ball sits on the middle of the second link.
    let hit = certify(&single_sphere([0.7, 0.0, 0.0]), &[0.0; 3]);
    assert_eq!(hit.verdict, Verdict::NotCertified);
    let link = hit.entries.iter().find(|e| e.verdict == Verdict::NotCertified).unwrap();
    assert!(link.falsified_at.is_some());

    let c = planar();
    let s = SceneFile::default();
    let r = commands::certify(&c, &LinkEllipsoidSpec::for_chain(&c), &[], &s, &[0.0; 2], 0.3, &SolverSettings::default(), 10);
    assert!(matches!(r, Err(CliError::Usage(_))));
}

const RUN: &str = r#"
n_omega = 200

[sim]
dt = 0.1
noise = { kind = "gaussian", mean = 0.0, std = 0.01 }

[calibration]
n_mc = 2000

[planner.mppi]
n_samples = 100
horizon = 10
iterations = 1
"#;

fn write_bench(dir: &Path) -> std::path::PathBuf {
    fs::write(dir.join("run.toml"), RUN).unwrap();
    fs::write(
        dir.join("scene.toml"),
        toml::to_string(&single_sphere([0.0, -1.5, 0.0])).unwrap(),
    )
    .unwrap();
    let spec = BenchmarkSpec {
        robot: "planar3".into(),
        scene: Some("scene.toml".into()),
        run: Some("run.toml".into()),
        seeds: vec![0, 1],
        tasks: vec![TaskSpec { max_control_steps: 40, time_budget: 4.0, ..reach_task() }],
    };
    let p = dir.join("bench.toml");
    config::write_toml(&p, &spec).unwrap();
    p
}

#[test]
fn bench_is_reproducible_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_bench(dir.path());
    let a = commands::bench(&spec, None).unwrap();
    let b = commands::bench(&spec, None).unwrap();
    assert_eq!(a.summary_csv().unwrap(), b.summary_csv().unwrap());
    assert_eq!(a.episodes_csv().unwrap(), b.episodes_csv().unwrap());
    assert!(a.violations.is_empty(), "{:?}", a.violations);
    assert_eq!(a.episodes.len(), 2);
    assert_eq!(a.summary[0].episodes, 2);
    let row = &a.summary[0];
    assert!(row.delta_o + 40.0 * row.delta_ell <= row.delta);
    for (r, e) in a.results[0].1.iter().zip(&a.episodes) {
        assert!(r.safety_gate_holds());
        assert_eq!(r.steps, e.steps);
        assert_eq!(r.path.len(), r.steps + 1);
    }
    let out = dir.path().join("out");
    commands::write_bench(&a, &out).unwrap();
    assert_eq!(fs::read(out.join("summary.csv")).unwrap(), a.summary_csv().unwrap());
    assert!(out.join("episodes.csv").exists());
    assert_eq!(fs::read_dir(out.join("episodes")).unwrap().count(), 2);
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_riskbound"));
    c.env("RUST_LOG", "error");
    c
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin().arg("--help").status().unwrap().code(), Some(0));
    assert_eq!(bin().args(["certify", "--robot", "planar3"]).output().unwrap().status.code(), Some(1));
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
    let missing = dir.path().join("none.toml");
    let st = bin().args(["bench", "--spec", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    let st = bin().args(["certify", "--robot", "planar3", "--q=0,0", "--delta", "0.3"]).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
}

#[test]
fn binary_contour_and_certify() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.toml");
    config::write_toml(&scene, &single_sphere([0.7, 0.0, 0.0])).unwrap();
    let out = dir.path().join("c.csv");
    let st = bin()
        .args(["contour", "--scene", scene.to_str().unwrap(), "--delta", "0.2", "--x=-1:1:3", "--y=-1:1:3", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x,y,z,risk_bound,safe");
    assert_eq!(text.lines().count(), 10);
    let o = bin()
        .args(["certify", "--robot", "planar3", "--scene", scene.to_str().unwrap(), "--q=0,-0.1,0", "--delta", "0.3", "--json"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["verdict"], "not_certified");
}

#[test]
fn binary_gradient_check_flags_an_impossible_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    let d = Array3::from_shape_fn((8, 4, 2), |(i, t, j)| ((i * 7 + t * 3 + j) % 5) as f64 * 0.2);
    let u = Array3::from_shape_fn((8, 3, 1), |(i, t, _)| ((i + t) % 3) as f64 - 1.0);
    dataset::save(&data, &TrajectoryDataset::new(d, u).unwrap(), 0.1, serde_json::Value::Null).unwrap();
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, "[desko]\nlift_dim = 4\nencoder_widths = [6]\nhorizon = 3\n").unwrap();
    let args = |tol: &str| {
        let mut c = bin();
        c.args(["gradient-check", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
        c.args(["--params", "10", "--seeds", "0,1", "--tol", tol]);
        c.output().unwrap().status.code()
    };
    assert_eq!(args("1e-4"), Some(0));
    assert_eq!(args("0"), Some(3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_codec_is_lossless(
        n in 1usize..4, h in 1usize..4, nx in 1usize..4, nu in 1usize..3,
        seed in any::<u64>(), dt in 1e-3f64..1.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s = Array3::from_shape_fn((n, h + 1, nx), |_| rng.random::<f64>() * 1e6 - 5e5);
        let c = Array3::from_shape_fn((n, h, nu), |_| rng.random::<f64>() - 0.5);
        let d = TrajectoryDataset::new(s, c).unwrap();
        let (back, header) = dataset::decode(&dataset::encode(&d, dt, serde_json::Value::Null).unwrap()).unwrap();
        prop_assert_eq!(back.states, d.states);
        prop_assert_eq!(back.controls, d.controls);
        prop_assert_eq!(header.dt, dt);
    }
}
