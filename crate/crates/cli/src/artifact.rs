//! Versioned JSON model artifacts.

use std::fs;
use std::path::Path;

use riskbound::desko::DeskoModel;
use riskbound::polyrisk::ScalarDistribution;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

pub const MODEL_FORMAT: &str = "riskbound-desko";
pub const MODEL_VERSION: u32 = 1;

/// A trained model together with its one-step position error fit, which
/// feeds link-ellipsoid calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: String,
    pub version: u32,
    /// Simulator step the training data was recorded at.
    pub dt: f64,
    pub model: DeskoModel,
    pub one_step_error: Vec<ScalarDistribution>,
}

impl ModelArtifact {
    pub fn new(model: DeskoModel, dt: f64, one_step_error: Vec<ScalarDistribution>) -> Self {
        ModelArtifact { format: MODEL_FORMAT.into(), version: MODEL_VERSION, dt, model, one_step_error }
    }

    pub fn to_json(&self) -> CliResult<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let a: ModelArtifact = serde_json::from_str(text)?;
        if a.format != MODEL_FORMAT || a.version != MODEL_VERSION {
            return Err(CliError::Parse {
                path: "<model>".into(),
                msg: format!("unsupported model artifact {} v{}", a.format, a.version),
            });
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.to_json()?).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Parse { msg, .. } => CliError::Parse { path: path.into(), msg },
            other => other,
        })
    }
}
