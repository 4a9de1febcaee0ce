use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::rng;
use crate::registration::{build_masks, MaskConfig, PreservationMask};
use crate::voxel::io::{load_grid, load_sparse, save_grid, save_sparse};
use crate::voxel::{DenseGrid, SparseVoxelTensor};

use super::scene::{corpus_verb, gen_pair, random_pair, FINE_RES, STRUCT_RES};
use super::vocab::{EditInstruction, Verb};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Per-pair provenance in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub index: usize,
    pub seed: u64,
    pub verb: Verb,
    pub instruction: String,
    pub ransac_inliers: usize,
    pub icp_inliers: usize,
    pub preserved_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub seed: u64,
    pub count: usize,
    pub verb_counts: BTreeMap<Verb, usize>,
    pub mask: MaskConfig,
    pub items: Vec<CorpusRecord>,
}

/// One pair as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub index: usize,
    pub instruction: EditInstruction,
    pub orig: DenseGrid,
    pub edit: DenseGrid,
    pub orig_slat: SparseVoxelTensor,
    pub edit_slat: SparseVoxelTensor,
    pub mask64: PreservationMask,
    pub mask16: PreservationMask,
}

fn stem(dir: &Path, i: usize) -> String {
    dir.join(format!("{i:04}")).to_string_lossy().into_owned()
}

/// Generates `count` pairs with balanced verbs and writes them with their
/// registration-derived masks and a manifest.
pub fn write_corpus(dir: &Path, count: usize, seed: u64, mask: &MaskConfig) -> Result<CorpusManifest> {
    fs::create_dir_all(dir)?;
    let mut r = rng(seed);
    let mut items = Vec::with_capacity(count);
    let mut verb_counts = BTreeMap::new();
    for i in 0..count {
        let item_seed: u64 = r.random();
        let verb = corpus_verb(i);
        let (spec, instr) = random_pair(item_seed, verb);
        let pair = gen_pair(&spec, &instr)?;
        let (o64, e64) = (pair.orig.occupancy(FINE_RES)?, pair.edit.occupancy(FINE_RES)?);
        let rep = build_masks(&o64, &e64, &[FINE_RES, STRUCT_RES], &MaskConfig { seed: item_seed, ..*mask })?;
        let s = stem(dir, i);
        save_grid(Path::new(&format!("{s}.orig.bveg")), &pair.orig.occupancy(STRUCT_RES)?)?;
        save_grid(Path::new(&format!("{s}.edit.bveg")), &pair.edit.occupancy(STRUCT_RES)?)?;
        save_sparse(Path::new(&format!("{s}.orig.bves")), &pair.orig.slat()?)?;
        save_sparse(Path::new(&format!("{s}.edit.bves")), &pair.edit.slat()?)?;
        fs::write(format!("{s}.instr.txt"), format!("{instr}\n"))?;
        rep.masks[0].save(Path::new(&format!("{s}.mask64.bvem")))?;
        rep.masks[1].save(Path::new(&format!("{s}.mask16.bvem")))?;
        *verb_counts.entry(verb).or_insert(0) += 1;
        items.push(CorpusRecord {
            index: i,
            seed: item_seed,
            verb,
            instruction: instr.to_string(),
            ransac_inliers: rep.ransac_inliers,
            icp_inliers: rep.icp_inliers,
            preserved_fraction: rep.preserved_fraction(&o64),
        });
    }
    let manifest = CorpusManifest { seed, count, verb_counts, mask: *mask, items };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<CorpusItem>)> {
    let manifest: CorpusManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.items.len() != manifest.count {
        return Err(Error::Format(format!("manifest lists {} items but counts {}", manifest.items.len(), manifest.count)));
    }
    let items = manifest
        .items
        .iter()
        .map(|rec| {
            let s = stem(dir, rec.index);
            let p = |suffix: &str| format!("{s}.{suffix}");
            Ok(CorpusItem {
                index: rec.index,
                instruction: fs::read_to_string(p("instr.txt"))?.trim().parse()?,
                orig: load_grid(Path::new(&p("orig.bveg")))?,
                edit: load_grid(Path::new(&p("edit.bveg")))?,
                orig_slat: load_sparse(Path::new(&p("orig.bves")))?,
                edit_slat: load_sparse(Path::new(&p("edit.bves")))?,
                mask64: PreservationMask::load(Path::new(&p("mask64.bvem")))?,
                mask16: PreservationMask::load(Path::new(&p("mask16.bvem")))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, items))
}
