use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Backbone, ParamInfo};
use crate::autograd::Tensor;
use crate::error::{Result, SealError};
use crate::framing;
use crate::schedule::{BETA_END, BETA_START};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ScheduleHeader {
    kind: String,
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    architecture: Architecture,
    schedule: ScheduleHeader,
    params: Vec<ParamInfo>,
    pretrain_steps: usize,
}

/// Weights are stored as `f32`; a loaded backbone carries the rounded values.
pub fn save_checkpoint(bb: &Backbone, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        architecture: bb.arch.clone(),
        schedule: ScheduleHeader {
            kind: "linear".into(),
            timesteps: bb.arch.timesteps,
            beta_start: BETA_START,
            beta_end: BETA_END,
        },
        params: bb.infos.clone(),
        pretrain_steps: bb.pretrain_steps,
    };
    let payload: Vec<f64> = bb
        .values
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    framing::write(path, &header, &payload)
}

/// Loaded backbones come back frozen.
pub fn load_checkpoint(path: &Path) -> Result<Backbone> {
    let bytes = framing::read_bytes(path)?;
    let version = framing::peek_version(&bytes)?;
    if version != CHECKPOINT_VERSION {
        return Err(SealError::UnsupportedVersion(version));
    }
    let (h, payload): (CheckpointHeader, Vec<f64>) = framing::decode(&bytes)?;
    let expected: usize = h.params.iter().map(|p| p.rows * p.cols).sum();
    if payload.len() < expected {
        return Err(SealError::TruncatedPayload);
    }
    if payload.len() > expected {
        return Err(SealError::MalformedHeader(format!(
            "payload holds {} values but the header declares {expected}",
            payload.len()
        )));
    }
    let reference = Backbone::with_architecture(h.architecture.clone(), 0)?;
    if reference.infos != h.params {
        return Err(SealError::MalformedHeader(
            "parameter table does not match the architecture".into(),
        ));
    }
    let mut values = Vec::with_capacity(h.params.len());
    let mut off = 0;
    for p in &h.params {
        let n = p.rows * p.cols;
        values.push(Tensor::from_vec(
            p.rows,
            p.cols,
            payload[off..off + n].to_vec(),
        ));
        off += n;
    }
    Backbone::assemble(h.architecture, h.params, values, true, h.pretrain_steps)
}
