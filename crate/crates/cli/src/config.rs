//! TOML configuration files: robots, scenes, tasks, run settings and
//! benchmark specs. Relative paths inside a file resolve against the
//! directory of that file.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector3};
use riskbound::arm::{JointState, KinematicChain, RobotConfig, DEFAULT_INFLATION_CAP};
use riskbound::desko::DeskoConfig;
use riskbound::planner::{PlannerConfig, Task};
use riskbound::polyrisk::{Aabb, Polynomial, ScalarDistribution, UncertainObstacle};
use riskbound::simenv::{GoalRegion, ProcessNoise, SimConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Parse { path: path.into(), msg: e.to_string() })
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = toml::to_string_pretty(value).map_err(|e| CliError::Parse { path: path.into(), msg: e.to_string() })?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// A robot: one of the built-in presets or a full joint description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RobotFile {
    Preset { name: String },
    Chain(RobotConfig),
}

impl RobotFile {
    pub fn robot_config(&self) -> CliResult<RobotConfig> {
        match self {
            RobotFile::Preset { name } => preset(name),
            RobotFile::Chain(c) => Ok(c.clone()),
        }
    }

    pub fn chain(&self) -> CliResult<KinematicChain> {
        Ok(KinematicChain::new(self.robot_config()?)?)
    }
}

pub fn preset(name: &str) -> CliResult<RobotConfig> {
    match name {
        "planar3" => Ok(RobotConfig::planar_three_link()),
        "franka" => Ok(RobotConfig::franka_like()),
        other => Err(CliError::Usage(format!("unknown robot preset `{other}` (planar3, franka)"))),
    }
}

/// Loads a robot from a file path or a preset name.
pub fn load_robot(arg: &str) -> CliResult<KinematicChain> {
    let p = Path::new(arg);
    if p.exists() {
        read_toml::<RobotFile>(p)?.chain()
    } else {
        Ok(KinematicChain::new(preset(arg)?)?)
    }
}

/// One monomial `coeff · x^a y^b z^c ω^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub exps: [u32; 4],
    pub coeff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObstacleSpec {
    /// `|p - center|² - ω²` with random radius ω.
    Sphere { name: String, center: [f64; 3], radius: ScalarDistribution },
    /// The heart polynomial moved to `center` and scaled by `scale`.
    Heart { name: String, center: [f64; 3], scale: f64, omega: ScalarDistribution },
    /// Explicit term list over `(x, y, z, ω)`.
    Polynomial { name: String, terms: Vec<TermSpec>, omega: ScalarDistribution },
}

impl ObstacleSpec {
    pub fn build(&self) -> CliResult<UncertainObstacle> {
        Ok(match self {
            ObstacleSpec::Sphere { name, center, radius } => {
                UncertainObstacle::sphere(name.clone(), Vector3::from(*center), *radius)?
            }
            ObstacleSpec::Heart { name, center, scale, omega } => {
                UncertainObstacle::heart(name.clone(), *omega)?.placed(Vector3::from(*center), *scale)?
            }
            ObstacleSpec::Polynomial { name, terms, omega } => {
                let t: Vec<(Vec<u32>, f64)> = terms.iter().map(|t| (t.exps.to_vec(), t.coeff)).collect();
                UncertainObstacle::new(name.clone(), Polynomial::from_terms(&["x", "y", "z", "w"], &t)?, *omega)?
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneFile {
    #[serde(default)]
    pub bounds: Aabb,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
}

impl SceneFile {
    pub fn obstacles(&self) -> CliResult<Vec<UncertainObstacle>> {
        self.obstacles.iter().map(|o| o.build()).collect()
    }
}

/// A reaching problem; the goal is a point or a joint configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(default)]
    pub name: String,
    pub start: Vec<f64>,
    #[serde(default)]
    pub goal: Option<[f64; 3]>,
    #[serde(default)]
    pub goal_q: Option<Vec<f64>>,
    #[serde(default = "default_goal_radius")]
    pub goal_radius: f64,
    #[serde(default)]
    pub goal_axis: Option<[f64; 3]>,
    pub delta: f64,
    pub time_budget: f64,
    pub max_control_steps: usize,
}

fn default_goal_radius() -> f64 {
    0.1
}

impl TaskSpec {
    pub fn goal_point(&self, chain: &KinematicChain) -> CliResult<Vector3<f64>> {
        match (&self.goal, &self.goal_q) {
            (Some(g), None) => Ok(Vector3::from(*g)),
            (None, Some(q)) if q.len() == chain.n_q() => Ok(chain.end_effector(q)),
            (None, Some(q)) => Err(CliError::Usage(format!("goal_q has {} entries for {} joints", q.len(), chain.n_q()))),
            _ => Err(CliError::Usage(format!("task `{}` needs exactly one of goal, goal_q", self.name))),
        }
    }

    pub fn build(&self, chain: &KinematicChain, scene: &SceneFile) -> CliResult<Task> {
        if self.start.len() != chain.n_q() {
            return Err(CliError::Usage(format!("start has {} entries for {} joints", self.start.len(), chain.n_q())));
        }
        let g = self.goal_point(chain)?;
        Ok(Task {
            start: JointState::at_rest(DVector::from_vec(self.start.clone())),
            goal: GoalRegion::new(g.into(), self.goal_radius),
            goal_axis: self.goal_axis.map(Vector3::from),
            obstacles: scene.obstacles()?,
            bounds: scene.bounds,
            delta: self.delta,
            time_budget: self.time_budget,
            max_control_steps: self.max_control_steps,
        })
    }
}

/// Simulator settings: iid process noise on every state component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSpec {
    pub dt: f64,
    pub noise: ScalarDistribution,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec { dt: 0.1, noise: ScalarDistribution::gaussian(0.2, 0.2) }
    }
}

impl SimSpec {
    pub fn sim_config(&self, state_dim: usize, seed: u64, max_steps: usize) -> CliResult<SimConfig> {
        Ok(SimConfig::new(self.dt, ProcessNoise::iid(state_dim, self.noise), seed, max_steps.max(1))?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSpec {
    pub n_mc: usize,
    pub cap: f64,
    pub seed: u64,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        CalibrationSpec { n_mc: 20_000, cap: DEFAULT_INFLATION_CAP, seed: 0 }
    }
}

/// Everything needed to run episodes besides robot, scene, task and model.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub planner: PlannerConfig,
    pub sim: SimSpec,
    pub calibration: CalibrationSpec,
    /// Obstacle realizations per trajectory in the post-hoc collision check.
    pub n_omega: Option<usize>,
}

impl RunConfig {
    pub fn n_omega(&self) -> usize {
        self.n_omega.unwrap_or(1000)
    }
}

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataGenSpec {
    /// Waypoints taken from the nominal trajectory.
    pub l_n: usize,
    /// Perturbed samples per waypoint.
    pub n_per_waypoint: usize,
    pub horizon: usize,
    /// Half-widths of the uniform start offsets on positions and velocities.
    pub q_offset: f64,
    pub qdot_offset: f64,
    pub sim: SimSpec,
    /// Settings of the noise-free planner producing the nominal trajectory.
    pub nominal: PlannerConfig,
}

impl Default for DataGenSpec {
    fn default() -> Self {
        DataGenSpec {
            l_n: 20,
            n_per_waypoint: 400,
            horizon: 15,
            q_offset: 0.2,
            qdot_offset: 0.05,
            sim: SimSpec::default(),
            nominal: PlannerConfig::default(),
        }
    }
}

/// Training settings file.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub desko: DeskoConfig,
}

/// A list of tasks on one robot and scene, run for every seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub robot: String,
    #[serde(default)]
    pub scene: Option<PathBuf>,
    #[serde(default)]
    pub run: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskSpec>,
}

/// A benchmark spec with its referenced files loaded.
pub struct LoadedBenchmark {
    pub spec: BenchmarkSpec,
    pub chain: KinematicChain,
    pub scene: SceneFile,
    pub run: RunConfig,
}

impl BenchmarkSpec {
    pub fn load(path: &Path) -> CliResult<LoadedBenchmark> {
        let spec: BenchmarkSpec = read_toml(path)?;
        let robot_path = resolve(path, Path::new(&spec.robot));
        let chain = if robot_path.exists() {
            read_toml::<RobotFile>(&robot_path)?.chain()?
        } else {
            KinematicChain::new(preset(&spec.robot)?)?
        };
        let scene = match &spec.scene {
            Some(p) => read_toml(&resolve(path, p))?,
            None => SceneFile::default(),
        };
        let run = match &spec.run {
            Some(p) => read_toml(&resolve(path, p))?,
            None => RunConfig::default(),
        };
        if spec.seeds.is_empty() || spec.tasks.is_empty() {
            return Err(CliError::Usage("benchmark needs at least one seed and one task".into()));
        }
        Ok(LoadedBenchmark { spec, chain, scene, run })
    }
}

/// Parses a comma-separated list of numbers.
pub fn parse_list(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| CliError::Usage(format!("bad number `{t}`: {e}"))))
        .collect()
}
