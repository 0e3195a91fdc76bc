//! Binary trajectory datasets: an 8-byte magic, a little-endian `u32`
//! header length, a JSON header, then states and controls as
//! little-endian `f64` in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;
use riskbound::desko::TrajectoryDataset;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"RBTRAJ\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub trajectories: usize,
    pub horizon: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub dt: f64,
    /// Free-form provenance, e.g. the generating command's settings.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode(d: &TrajectoryDataset, dt: f64, meta: serde_json::Value) -> CliResult<Vec<u8>> {
    let header = DatasetHeader {
        version: FORMAT_VERSION,
        trajectories: d.len(),
        horizon: d.horizon(),
        state_dim: d.state_dim(),
        control_dim: d.control_dim(),
        dt,
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * (d.states.len() + d.controls.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in d.states.iter().chain(d.controls.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> CliResult<(TrajectoryDataset, DatasetHeader)> {
    let bad = |msg: &str| CliError::Parse { path: "<dataset>".into(), msg: msg.into() };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a trajectory dataset (bad magic)"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let h: DatasetHeader = serde_json::from_slice(body)?;
    if h.version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported dataset version {}", h.version)));
    }
    let ns = h.trajectories * (h.horizon + 1) * h.state_dim;
    let nc = h.trajectories * h.horizon * h.control_dim;
    let mut rest = &bytes[12 + hlen..];
    if rest.len() != 8 * (ns + nc) {
        return Err(bad("payload size does not match header"));
    }
    let mut read = |n: usize| -> Vec<f64> {
        let mut v = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            rest.read_exact(&mut buf).expect("length checked");
            v.push(f64::from_le_bytes(buf));
        }
        v
    };
    let states = Array3::from_shape_vec((h.trajectories, h.horizon + 1, h.state_dim), read(ns)).map_err(|e| bad(&e.to_string()))?;
    let controls = Array3::from_shape_vec((h.trajectories, h.horizon, h.control_dim), read(nc)).map_err(|e| bad(&e.to_string()))?;
    Ok((TrajectoryDataset::new(states, controls)?, h))
}

pub fn save(path: &Path, d: &TrajectoryDataset, dt: f64, meta: serde_json::Value) -> CliResult<()> {
    let bytes = encode(d, dt, meta)?;
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> CliResult<(TrajectoryDataset, DatasetHeader)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        CliError::Parse { msg, .. } => CliError::Parse { path: path.into(), msg },
        other => other,
    })
}
