//! Checkpoint persistence: a raw little-endian f32 blob next to a strict
//! JSON manifest.
//!
//! The blob holds every parameter in registration order; the manifest pins
//! the architecture, schedule, seed, and a content hash so a load can verify
//! it reconstructed exactly what was saved. Manifests reject unknown fields.

use super::control::ControlBranch;
use super::param::ParamStore;
use super::unet::{BaseModel, NetworkConfig};
use crate::diffusion::ScheduleParams;
use crate::error::{DecadeError, Result};
use crate::vol::{f32_from_le_bytes, f32_to_le_bytes};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Base,
    Control,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub kind: CheckpointKind,
    /// Training steps completed when this was written.
    pub step: u64,
    pub network: NetworkConfig,
    pub schedule: ScheduleParams,
    /// Seed the parameter store was constructed with.
    pub seed: u64,
    pub param_count: u64,
    pub content_hash: String,
    /// For control checkpoints: hash of the frozen base parameters this
    /// branch was trained against.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub frozen_base_hash: Option<String>,
    /// Hash of the run configuration that produced this checkpoint.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_hash: Option<String>,
}

/// Strict manifest parse; reports the offending key path on failure.
pub fn parse_manifest(bytes: &[u8]) -> Result<CheckpointManifest> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let manifest: CheckpointManifest = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| DecadeError::format(format!("manifest at `{}`: {}", e.path(), e.inner())))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(DecadeError::format(format!(
            "manifest schema {} unsupported (expected {CHECKPOINT_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    manifest.network.validate()?;
    Ok(manifest)
}

fn blob_path(base: &Path) -> std::path::PathBuf {
    base.with_extension("bin")
}

fn manifest_path(base: &Path) -> std::path::PathBuf {
    base.with_extension("json")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `<base>.bin` and `<base>.json`; the manifest content hash and
/// parameter count are taken from the store.
pub fn save_checkpoint(base: &Path, manifest: &CheckpointManifest, store: &ParamStore) -> Result<()> {
    let mut manifest = manifest.clone();
    manifest.schema_version = CHECKPOINT_SCHEMA_VERSION;
    manifest.param_count = store.n_scalars() as u64;
    manifest.content_hash = store.content_hash();
    if let Some(dir) = base.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(&blob_path(base), &f32_to_le_bytes(&store.flat_data()))?;
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&manifest_path(base), &json)?;
    Ok(())
}

/// Reads and validates the manifest plus the raw parameter vector.
pub fn load_checkpoint(base: &Path) -> Result<(CheckpointManifest, Vec<f32>)> {
    let manifest = parse_manifest(&std::fs::read(manifest_path(base))?)?;
    let blob = std::fs::read(blob_path(base))?;
    let flat = f32_from_le_bytes(&blob)?;
    if flat.len() as u64 != manifest.param_count {
        return Err(DecadeError::format(format!(
            "blob holds {} scalars, manifest says {}",
            flat.len(),
            manifest.param_count
        )));
    }
    Ok((manifest, flat))
}

fn rebuild<M>(
    base: &Path,
    want: CheckpointKind,
    register: impl FnOnce(&mut ParamStore, &NetworkConfig) -> Result<M>,
) -> Result<(CheckpointManifest, ParamStore, M)> {
    let (manifest, flat) = load_checkpoint(base)?;
    if manifest.kind != want {
        return Err(DecadeError::format(format!(
            "checkpoint kind {:?}, expected {want:?}",
            manifest.kind
        )));
    }
    let mut store = ParamStore::new(manifest.seed);
    let model = register(&mut store, &manifest.network)?;
    store.load_flat(&flat)?;
    let got = store.content_hash();
    if got != manifest.content_hash {
        return Err(DecadeError::format(format!(
            "checkpoint hash mismatch: manifest {} vs data {got}",
            manifest.content_hash
        )));
    }
    Ok((manifest, store, model))
}

/// Reconstructs a base model and verifies its content hash.
pub fn load_base(base: &Path) -> Result<(CheckpointManifest, ParamStore, BaseModel)> {
    rebuild(base, CheckpointKind::Base, BaseModel::register)
}

/// Reconstructs a control branch and verifies its content hash.
pub fn load_control(base: &Path) -> Result<(CheckpointManifest, ParamStore, ControlBranch)> {
    rebuild(base, CheckpointKind::Control, ControlBranch::register)
}
