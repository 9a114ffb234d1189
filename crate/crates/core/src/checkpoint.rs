//! Self-describing JSON checkpoints for both model stages.
//!
//! A checkpoint is `{format, version, kind, model}` where `model` carries the
//! config, every parameter tensor, the epoch counter and the seed. The file
//! bytes are the canonical serialization, so hashing the file and hashing
//! the in-memory model agree.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::Stage1Model;
use crate::error::{Error, Result};
use crate::seq::Stage2Model;

pub const FORMAT: &str = "sketchless-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Stage1,
    Stage2,
}

#[derive(Serialize)]
struct ContainerRef<'a, T> {
    format: &'static str,
    version: u32,
    kind: Kind,
    model: &'a T,
}

#[derive(Deserialize)]
struct Container<T> {
    format: String,
    version: u32,
    kind: Kind,
    model: T,
}

pub(crate) fn encode<T: Serialize>(kind: Kind, model: &T) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(&ContainerRef {
        format: FORMAT,
        version: VERSION,
        kind,
        model,
    })?)
}

fn decode<T: DeserializeOwned>(bytes: &[u8], expected: Kind) -> Result<T> {
    let c: Container<T> = serde_json::from_slice(bytes)?;
    if c.format != FORMAT {
        return Err(Error::CheckpointMismatch(format!("unknown container format {:?}", c.format)));
    }
    if c.version != VERSION {
        return Err(Error::CheckpointMismatch(format!("unsupported checkpoint version {}", c.version)));
    }
    if c.kind != expected {
        return Err(Error::CheckpointMismatch(format!(
            "expected a {expected:?} checkpoint, found {:?}",
            c.kind
        )));
    }
    Ok(c.model)
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_stage1(path: &Path, model: &Stage1Model) -> Result<String> {
    let bytes = model.to_bytes()?;
    write(path, &bytes)?;
    Ok(hash_bytes(&bytes))
}

/// Load a stage-1 checkpoint, optionally insisting on an embedding size.
pub fn load_stage1(path: &Path, expected_d_low: Option<usize>) -> Result<Stage1Model> {
    let model: Stage1Model = decode(&read(path)?, Kind::Stage1)?;
    model.check_shapes()?;
    if let Some(d) = expected_d_low {
        if model.d_low() != d {
            return Err(Error::CheckpointMismatch(format!(
                "{} has d_low {}, expected {d}",
                path.display(),
                model.d_low()
            )));
        }
    }
    Ok(model)
}

pub fn save_stage2(path: &Path, model: &Stage2Model) -> Result<String> {
    let bytes = model.to_bytes()?;
    write(path, &bytes)?;
    Ok(hash_bytes(&bytes))
}

/// Load a stage-2 checkpoint and verify it was trained on `stage1`.
pub fn load_stage2(path: &Path, stage1: &Stage1Model) -> Result<Stage2Model> {
    let model: Stage2Model = decode(&read(path)?, Kind::Stage2)?;
    model.check_shapes()?;
    let expected = stage1.content_hash();
    if model.stage1_hash() != expected {
        return Err(Error::CheckpointMismatch(format!(
            "{} was trained against stage-1 {}, but the loaded stage-1 is {expected}",
            path.display(),
            model.stage1_hash()
        )));
    }
    if model.d_low() != stage1.d_low() {
        return Err(Error::CheckpointMismatch(format!(
            "stage-2 d_low {} does not match stage-1 d_low {}",
            model.d_low(),
            stage1.d_low()
        )));
    }
    Ok(model)
}
