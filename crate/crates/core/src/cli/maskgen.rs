use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use super::{write_json, GlobalArgs};
use crate::error::{Error, Result};
use crate::models::blob_hash;
use crate::registration::{build_masks, MaskConfig, MaskStatus};
use crate::voxel::io::read_grid;

pub const MASKGEN_SUMMARY: &str = "maskgen.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskgenConfig {
    /// Original asset (BVEG occupancy grid).
    pub orig: PathBuf,
    /// Edited asset at the same grid geometry.
    pub edit: PathBuf,
    pub out: PathBuf,
    /// Mask resolutions; empty means the grid resolution only.
    pub resolutions: Vec<usize>,
    pub mask: MaskConfig,
}

impl Default for MaskgenConfig {
    fn default() -> Self {
        Self {
            orig: PathBuf::from("orig.bveg"),
            edit: PathBuf::from("edit.bveg"),
            out: PathBuf::from("masks"),
            resolutions: Vec::new(),
            mask: MaskConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct MaskgenArgs {
    #[arg(long)]
    pub orig: Option<PathBuf>,
    #[arg(long)]
    pub edit: Option<PathBuf>,
    /// Mask resolution; repeat for several.
    #[arg(long = "resolution")]
    pub resolutions: Vec<usize>,
}

impl MaskgenArgs {
    pub fn apply(self, mut c: MaskgenConfig, g: &GlobalArgs) -> MaskgenConfig {
        c.orig = self.orig.unwrap_or(c.orig);
        c.edit = self.edit.unwrap_or(c.edit);
        if !self.resolutions.is_empty() {
            c.resolutions = self.resolutions;
        }
        c.mask.seed = g.seed.unwrap_or(c.mask.seed);
        c.out = g.out.clone().unwrap_or(c.out);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskgenSummary {
    pub config: MaskgenConfig,
    pub orig_hash: String,
    pub edit_hash: String,
    pub ransac_inliers: usize,
    pub icp_inliers: usize,
    pub rmse: f64,
    pub tau: f64,
    /// Row-major `[R | t]`.
    pub transform: [f64; 12],
    pub preserved_fraction: f64,
    pub masks: Vec<String>,
}

/// Registers the edited asset onto the original and writes one BVEM mask per
/// resolution plus a JSON summary.
pub fn maskgen(cfg: &MaskgenConfig) -> Result<MaskgenSummary> {
    let (ob, eb) = (fs::read(&cfg.orig)?, fs::read(&cfg.edit)?);
    let (orig, edited) = (read_grid(&mut ob.as_slice())?, read_grid(&mut eb.as_slice())?);
    let resolutions = if cfg.resolutions.is_empty() { vec![orig.resolution()] } else { cfg.resolutions.clone() };
    let rep = build_masks(&orig, &edited, &resolutions, &cfg.mask)?;
    if rep.status == MaskStatus::EmptyEditCloud {
        return Err(Error::Registration("the edited asset has no occupied voxel".into()));
    }
    if !rep.rmse.is_finite() {
        return Err(Error::Registration("too few occupied voxels to estimate a rigid transform".into()));
    }
    fs::create_dir_all(&cfg.out)?;
    let mut names = Vec::with_capacity(rep.masks.len());
    for m in &rep.masks {
        let name = format!("mask{}.bvem", m.resolution());
        m.save(&cfg.out.join(&name))?;
        names.push(name);
    }
    let summary = MaskgenSummary {
        config: cfg.clone(),
        orig_hash: blob_hash(&ob),
        edit_hash: blob_hash(&eb),
        ransac_inliers: rep.ransac_inliers,
        icp_inliers: rep.icp_inliers,
        rmse: rep.rmse,
        tau: rep.tau,
        transform: rep.transform.to_array(),
        preserved_fraction: rep.preserved_fraction(&orig),
        masks: names,
    };
    write_json(&cfg.out.join(MASKGEN_SUMMARY), &summary)?;
    Ok(summary)
}
