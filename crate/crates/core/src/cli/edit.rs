use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use super::train::{checkpoint_path, manifest_path};
use super::{write_json, GlobalArgs};
use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::models::{blob_hash, edit_pipeline, EditModel, FlowNet, RunManifest, SlatNet, Stage, StructureNet};
use crate::numcore::{rng, ParamStore};
use crate::synth::EditInstruction;
use crate::voxel::io::{read_grid, save_grid, save_sparse};
use crate::voxel::OCCUPANCY_THRESHOLD;

pub const EDIT_GRID: &str = "edit.bveg";
pub const EDIT_SPARSE: &str = "edit.bves";
pub const EDIT_MANIFEST: &str = "edit.manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    /// Directory holding both trained stages.
    pub run: PathBuf,
    /// Original structure grid (BVEG).
    pub orig: PathBuf,
    pub instruction: String,
    pub out: PathBuf,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            run: PathBuf::from("run"),
            orig: PathBuf::from("orig.bveg"),
            instruction: String::new(),
            out: PathBuf::from("edit"),
            sampler: SamplerConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub orig: Option<PathBuf>,
    #[arg(long)]
    pub instruction: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
}

impl EditArgs {
    pub fn apply(self, mut c: EditConfig, g: &GlobalArgs) -> EditConfig {
        c.run = self.run.unwrap_or(c.run);
        c.orig = self.orig.unwrap_or(c.orig);
        c.instruction = self.instruction.unwrap_or(c.instruction);
        c.sampler.steps = self.steps.unwrap_or(c.sampler.steps);
        c.sampler.cfg_scale = self.cfg_scale.unwrap_or(c.sampler.cfg_scale);
        c.seed = g.seed.unwrap_or(c.seed);
        c.out = g.out.clone().unwrap_or(c.out);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditManifest {
    pub config: EditConfig,
    pub orig_hash: String,
    pub structure_checkpoint: String,
    pub slat_checkpoint: String,
    pub occupied: usize,
    pub sites: usize,
}

fn load_stage(run: &Path, stage: Stage) -> Result<(RunManifest, ParamStore, String)> {
    let manifest = RunManifest::load(&manifest_path(run, stage)).map_err(|e| Error::Config(format!("{} stage in {}: {e}", stage.name(), run.display())))?;
    let bytes = fs::read(checkpoint_path(run, stage))?;
    Ok((manifest, ParamStore::read_from(&mut bytes.as_slice())?, blob_hash(&bytes)))
}

/// Both trained stages read from a run directory.
pub struct LoadedModel {
    pub structure: StructureNet,
    pub structure_params: ParamStore,
    pub slat: SlatNet,
    pub slat_params: ParamStore,
    /// Checkpoint blob hashes, structure then latent.
    pub hashes: (String, String),
}

impl LoadedModel {
    pub fn as_edit_model(&self) -> EditModel<'_> {
        EditModel { structure: &self.structure, structure_params: &self.structure_params, slat: &self.slat, slat_params: &self.slat_params }
    }
}

/// Loads both stages, checking every checkpoint tensor against the network
/// described by its manifest.
pub fn load_model(run: &Path) -> Result<LoadedModel> {
    let (sm, sp, sh) = load_stage(run, Stage::Structure)?;
    let (lm, lp, lh) = load_stage(run, Stage::Slat)?;
    let structure = StructureNet::new("ss", sm.structure)?;
    let slat = SlatNet::new("slat", lm.slat)?;
    let mut structure_params = structure.init_params(&mut rng(sm.seed))?;
    structure_params.load_from(&sp)?;
    let mut slat_params = slat.init_params(&mut rng(lm.seed))?;
    slat_params.load_from(&lp)?;
    Ok(LoadedModel { structure, structure_params, slat, slat_params, hashes: (sh, lh) })
}

/// Runs both sampling stages and writes the edited structure, latent and a
/// manifest with the sampler settings.
pub fn edit(cfg: &EditConfig) -> Result<EditManifest> {
    cfg.sampler.validate()?;
    let instruction: EditInstruction = cfg.instruction.parse()?;
    let ob = fs::read(&cfg.orig)?;
    let orig = read_grid(&mut ob.as_slice())?;
    let model = load_model(&cfg.run)?;
    let out = edit_pipeline(&model.as_edit_model(), &orig, &instruction, &cfg.sampler, cfg.seed)?;
    fs::create_dir_all(&cfg.out)?;
    save_grid(&cfg.out.join(EDIT_GRID), &out.structure)?;
    save_sparse(&cfg.out.join(EDIT_SPARSE), &out.slat)?;
    let manifest = EditManifest {
        config: cfg.clone(),
        orig_hash: blob_hash(&ob),
        structure_checkpoint: model.hashes.0,
        slat_checkpoint: model.hashes.1,
        occupied: out.structure.occupied(0, OCCUPANCY_THRESHOLD).len(),
        sites: out.slat.len(),
    };
    write_json(&cfg.out.join(EDIT_MANIFEST), &manifest)?;
    Ok(manifest)
}
