use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockInputs, ConditioningBundle, Layout, Linear, TriAttentionBlock, TriBlockConfig};
use crate::error::{shape_err, Error, Result};
use crate::numcore::{Graph, InitRule, ParamStore, Tensor, Var};
use crate::voxel::patch::{lattice_embedding, patch_maps};
use crate::voxel::{Coord, DenseGrid};

use super::cond::{Conditioner, FinalLayer};
use super::net::FlowNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructureNetConfig {
    pub resolution: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub rank: usize,
    pub ff_mult: usize,
}

impl Default for StructureNetConfig {
    fn default() -> Self {
        Self { resolution: 16, channels: 1, patch: 2, dim: 64, heads: 4, blocks: 4, rank: 4, ff_mult: 4 }
    }
}

impl StructureNetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.resolution, self.channels, self.patch, self.dim, self.heads, self.blocks, self.rank, self.ff_mult];
        if positive.contains(&0) {
            return Err(Error::Config(format!("structure net sizes must be positive: {self:?}")));
        }
        if !self.resolution.is_multiple_of(self.patch) {
            return Err(Error::Config(format!("resolution {} is not divisible by patch {}", self.resolution, self.patch)));
        }
        if !self.resolution.is_multiple_of(4) {
            return Err(Error::Config(format!("resolution {} is not divisible by 4", self.resolution)));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }

    /// Tokens per grid.
    pub fn tokens(&self) -> usize {
        (self.resolution / self.patch).pow(3)
    }

    pub fn token_width(&self) -> usize {
        self.patch.pow(3) * self.channels
    }
}

/// Dense structure-edit transformer: patchify, project, add the lattice
/// embedding, run tri-attention blocks with composed image context, then
/// project back and unpatchify.
#[derive(Debug, Clone)]
pub struct StructureNet {
    pub cfg: StructureNetConfig,
    pub cond: Conditioner,
    pub embed: Linear,
    pub blocks: Vec<TriAttentionBlock>,
    pub head: FinalLayer,
    to_tokens: Arc<[usize]>,
    to_grid: Arc<[usize]>,
    /// Fixed embedding added to the projected tokens, one row per lattice cell.
    pub ape: Tensor,
}

impl StructureNet {
    pub fn new(name: &str, cfg: StructureNetConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let image_width = (cfg.resolution / 4).pow(2);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                TriAttentionBlock::new(
                    &format!("{name}.blocks.{i}"),
                    TriBlockConfig { dim: d, heads: cfg.heads, ff_mult: cfg.ff_mult, cond_dim: d, rank: Some(cfg.rank) },
                )
            })
            .collect::<Result<_>>()?;
        let (to_tokens, to_grid) = patch_maps(cfg.resolution, cfg.channels, cfg.patch)?;
        let side = cfg.resolution / cfg.patch;
        Ok(Self {
            cfg,
            cond: Conditioner::new(&format!("{name}.cond"), image_width, d),
            embed: Linear::new(format!("{name}.embed"), cfg.token_width(), d, true),
            blocks,
            head: FinalLayer::new(&format!("{name}.head"), d, d, cfg.token_width()),
            to_tokens,
            to_grid,
            ape: lattice_embedding([side; 3], d),
        })
    }

    fn batched(idx: &[usize], b: usize) -> Arc<[usize]> {
        let n = idx.len();
        (0..b).flat_map(|s| idx.iter().map(move |&i| i + s * n)).collect()
    }

    /// Velocity for one grid under an already embedded bundle.
    pub fn forward(&self, st: &ParamStore, x_t: &DenseGrid, t: f64, bundle: &ConditioningBundle) -> Result<DenseGrid> {
        let cfg = &self.cfg;
        if x_t.resolution() != cfg.resolution || x_t.channels() != cfg.channels {
            return Err(shape_err!("grid {}³×{} for a {}³×{} network", x_t.resolution(), x_t.channels(), cfg.resolution, cfg.channels));
        }
        if bundle.dim() != cfg.dim {
            return Err(shape_err!("bundle width {} for network width {}", bundle.dim(), cfg.dim));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[cfg.resolution.pow(3), cfg.channels], x_t.values().to_vec())?);
        let inp = BlockInputs {
            c_img: g.constant(bundle.c_img().clone()),
            c_txt: g.constant(bundle.c_txt().clone()),
            g: g.constant(Tensor::new(&[1, cfg.dim], bundle.g().to_vec())?),
            cond: self.cond.time.forward(&mut g, st, &[t])?,
        };
        let out = self.forward_graph(&mut g, st, x, &[&[]], &inp, &[bundle.c_img().rows()], &[bundle.c_txt().rows()])?;
        x_t.with_values(cfg.channels, g.value(out).data().to_vec())
    }
}

impl FlowNet for StructureNet {
    fn conditioner(&self) -> &Conditioner {
        &self.cond
    }

    fn channels(&self) -> usize {
        self.cfg.channels
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.cond.init(store, rng)?;
        self.embed.init(store, InitRule::Standard, rng)?;
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        self.head.init(store, rng)
    }

    fn self_attention_prefixes(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.self_attention_prefix()).collect()
    }

    fn forward_graph(
        &self,
        g: &mut Graph,
        st: &ParamStore,
        x: Var,
        coords: &[&[Coord]],
        inp: &BlockInputs,
        img_lens: &[usize],
        txt_lens: &[usize],
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let b = coords.len();
        let cells = cfg.resolution.pow(3);
        if g.shape(x) != [b * cells, cfg.channels] {
            return Err(shape_err!("input {:?} for {b} grids of {}³×{}", g.shape(x), cfg.resolution, cfg.channels));
        }
        let n = cfg.tokens();
        let raw = g.gather(x, Self::batched(&self.to_tokens, b), &[b * n, cfg.token_width()])?;
        let h = self.embed.forward(g, st, raw)?;
        let ape = g.constant(Tensor::new(&[b * n, cfg.dim], (0..b).flat_map(|_| self.ape.data().iter().copied()).collect())?);
        let mut h = g.add(h, ape)?;
        let lay = Layout::new(&vec![n; b], img_lens, txt_lens)?;
        for block in &self.blocks {
            h = block.forward(g, st, h, inp, &lay)?;
        }
        let out = self.head.forward(g, st, h, inp.cond, &lay.token_rows)?;
        g.gather(out, Self::batched(&self.to_grid, b), &[b * cells, cfg.channels])
    }
}
