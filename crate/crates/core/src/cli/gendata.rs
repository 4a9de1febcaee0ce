use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use super::GlobalArgs;
use crate::error::Result;
use crate::registration::MaskConfig;
use crate::synth::{write_corpus, CorpusManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GendataConfig {
    pub out: PathBuf,
    pub count: usize,
    pub seed: u64,
    pub mask: MaskConfig,
}

impl Default for GendataConfig {
    fn default() -> Self {
        Self { out: PathBuf::from("corpus"), count: 64, seed: 0, mask: MaskConfig::default() }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GendataArgs {
    /// Number of pairs.
    #[arg(long)]
    pub count: Option<usize>,
}

impl GendataArgs {
    pub fn apply(self, mut c: GendataConfig, g: &GlobalArgs) -> GendataConfig {
        c.count = self.count.unwrap_or(c.count);
        c.seed = g.seed.unwrap_or(c.seed);
        c.out = g.out.clone().unwrap_or(c.out);
        c
    }
}

pub fn gendata(cfg: &GendataConfig) -> Result<CorpusManifest> {
    write_corpus(&cfg.out, cfg.count, cfg.seed, &cfg.mask)
}
