use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::flow::{euler_sample_cfg, SamplerConfig};
use crate::numcore::{rng, ParamStore, Tensor};
use crate::synth::EditInstruction;
use crate::voxel::{upsample_coords, DenseGrid, SparseVoxelTensor, OCCUPANCY_THRESHOLD};

use super::cond::CondInput;
use super::net::BoundNet;
use super::slat::{SlatNet, SlatNetConfig};
use super::structure::{StructureNet, StructureNetConfig};
use super::train::{Stage, TrainConfig};

/// Both trained stages.
pub struct EditModel<'a> {
    pub structure: &'a StructureNet,
    pub structure_params: &'a ParamStore,
    pub slat: &'a SlatNet,
    pub slat_params: &'a ParamStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutput {
    /// Binary edited occupancy at structure resolution.
    pub structure: DenseGrid,
    /// Sampled features on the sites implied by `structure`.
    pub slat: SparseVoxelTensor,
}

/// Samples an edited asset: stage 1 integrates the structure flow from noise
/// and thresholds it into active sites; stage 2 integrates the latent flow on
/// those sites. Both stages see the same raw conditioning.
pub fn edit_pipeline(model: &EditModel<'_>, orig: &DenseGrid, instruction: &EditInstruction, sampler: &SamplerConfig, seed: u64) -> Result<EditOutput> {
    let scfg = &model.structure.cfg;
    if orig.resolution() != scfg.resolution {
        return Err(shape_err!("original structure at {}³ for a {}³ structure network", orig.resolution(), scfg.resolution));
    }
    let occ = structure_stage(model.structure, model.structure_params, orig, instruction, sampler, seed)?;
    if occ.occupied(0, OCCUPANCY_THRESHOLD).is_empty() {
        return Err(Error::Empty("the sampled structure has no occupied voxel".into()));
    }
    let slat = slat_stage(model.slat, model.slat_params, &occ, orig, instruction, sampler, seed)?;
    Ok(EditOutput { structure: occ, slat })
}

/// Stage 1 alone: the thresholded edited occupancy grid.
pub fn structure_stage(
    net: &StructureNet,
    params: &ParamStore,
    orig: &DenseGrid,
    instruction: &EditInstruction,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<DenseGrid> {
    let cfg = &net.cfg;
    let cond = CondInput::new(orig, instruction)?;
    let mut r = rng(seed);
    let eps = Tensor::from_fn(&[cfg.resolution.pow(3), cfg.channels], |_| StandardNormal.sample(&mut r));
    let x = euler_sample_cfg(&BoundNet { net, params, coords: &[] }, &cond, sampler, &eps)?;
    let bits = x.data().chunks(cfg.channels).map(|v| if v[0] > OCCUPANCY_THRESHOLD { 1.0 } else { 0.0 }).collect();
    orig.with_values(1, bits)
}

/// Stage 2 alone: features sampled on the children of the occupied voxels of
/// `occupancy`.
pub fn slat_stage(
    net: &SlatNet,
    params: &ParamStore,
    occupancy: &DenseGrid,
    orig: &DenseGrid,
    instruction: &EditInstruction,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<SparseVoxelTensor> {
    let cfg = &net.cfg;
    let coords = upsample_coords(occupancy, cfg.resolution, OCCUPANCY_THRESHOLD)?;
    if coords.is_empty() {
        return Err(Error::Empty("no active sites for the latent stage".into()));
    }
    let cond = CondInput::new(orig, instruction)?;
    let mut r = rng(seed ^ 0x51a7);
    let eps = Tensor::from_fn(&[coords.len(), cfg.channels], |_| StandardNormal.sample(&mut r));
    let x = euler_sample_cfg(&BoundNet { net, params, coords: &coords }, &cond, sampler, &eps)?;
    SparseVoxelTensor::new(cfg.resolution, cfg.channels, coords, x.into_data())
}

/// SHA-256 over `blob <len>\0<bytes>`, the object id git assigns to a file
/// in a SHA-256 repository.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of every regular file directly under `dir`: SHA-256 over sorted
/// `<blob hash> <name>\n` lines.
pub fn directory_hash(dir: &Path) -> Result<String> {
    let mut lines = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            lines.push(format!("{} {}\n", blob_hash(&fs::read(entry.path())?), entry.file_name().to_string_lossy()));
        }
    }
    lines.sort();
    Ok(hex(&Sha256::digest(lines.concat().as_bytes())))
}

/// Record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub stage: Stage,
    pub structure: StructureNetConfig,
    pub slat: SlatNetConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub data_hash: String,
    /// Hash of the checkpoint training continued from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resumed_from: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
