use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockInputs, ConditioningBundle, Layout, Linear, TriAttentionBlock, TriBlockConfig, LN_EPS};
use crate::error::{shape_err, Error, Result};
use crate::numcore::{ConvMap, Graph, InitRule, ParamStore, Tensor, Var};
use crate::voxel::conv::{conv_map_stride1, conv_map_stride2, conv_map_transposed, stack_conv_maps, TAPS};
use crate::voxel::patch::position_embedding;
use crate::voxel::{Coord, SparseVoxelTensor};

use super::cond::{Conditioner, FinalLayer};
use super::net::FlowNet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlatNetConfig {
    pub resolution: usize,
    pub channels: usize,
    /// Feature width of each level, finest first; the decoder mirrors them.
    pub widths: Vec<usize>,
    pub levels: usize,
    pub bottleneck_blocks: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Resolution of the structure grid the image condition is encoded from.
    pub cond_resolution: usize,
}

impl Default for SlatNetConfig {
    fn default() -> Self {
        Self { resolution: 32, channels: 8, widths: vec![32, 64], levels: 1, bottleneck_blocks: 2, heads: 4, ff_mult: 4, cond_resolution: 16 }
    }
}

impl SlatNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != self.levels + 1 {
            return Err(Error::Config(format!("{} widths for {} downsample levels", self.widths.len(), self.levels)));
        }
        let positive = [self.resolution, self.channels, self.bottleneck_blocks, self.heads, self.ff_mult, self.cond_resolution];
        if positive.contains(&0) || self.widths.contains(&0) {
            return Err(Error::Config(format!("slat net sizes must be positive: {self:?}")));
        }
        if !self.resolution.is_multiple_of(1 << self.levels) {
            return Err(Error::Config(format!("resolution {} does not survive {} halvings", self.resolution, self.levels)));
        }
        if !self.cond_resolution.is_multiple_of(4) {
            return Err(Error::Config(format!("condition resolution {} is not divisible by 4", self.cond_resolution)));
        }
        if !self.bottleneck_width().is_multiple_of(self.heads) {
            return Err(Error::Config(format!("bottleneck width {} is not divisible by {} heads", self.bottleneck_width(), self.heads)));
        }
        Ok(())
    }

    pub fn bottleneck_width(&self) -> usize {
        self.widths[self.levels]
    }
}

/// Weight `[27, cin, cout]` plus bias of one sparse convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseConv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
}

impl SparseConv {
    pub fn new(name: String, cin: usize, cout: usize) -> Self {
        Self { name, cin, cout }
    }

    pub fn init(&self, store: &mut ParamStore, rule: InitRule, rng: &mut impl Rng) -> Result<()> {
        store.init(&format!("{}.w", self.name), &[TAPS, self.cin, self.cout], rule, rng)?;
        store.init(&format!("{}.b", self.name), &[self.cout], InitRule::Zero, rng)
    }

    pub fn forward(&self, g: &mut Graph, st: &ParamStore, x: Var, map: &Arc<ConvMap>) -> Result<Var> {
        let w = g.param(st, &format!("{}.w", self.name))?;
        let b = g.param(st, &format!("{}.b", self.name))?;
        g.sparse_conv(x, w, Some(b), map.clone())
    }
}

/// `x + conv2(SiLU(LN(conv1(SiLU(LN(x))) + W·SiLU(cond))))` with a zero-init
/// second convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv1: SparseConv,
    pub conv2: SparseConv,
    pub time: Linear,
}

impl ResBlock {
    pub fn new(name: &str, width: usize, cond_dim: usize) -> Self {
        Self {
            conv1: SparseConv::new(format!("{name}.conv1"), width, width),
            conv2: SparseConv::new(format!("{name}.conv2"), width, width),
            time: Linear::new(format!("{name}.time"), cond_dim, width, true),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.conv1.init(store, InitRule::Standard, rng)?;
        self.conv2.init(store, InitRule::Zero, rng)?;
        self.time.init(store, InitRule::Standard, rng)
    }

    pub fn forward(&self, g: &mut Graph, st: &ParamStore, x: Var, cond: Var, rows: &Arc<[usize]>, map: &Arc<ConvMap>) -> Result<Var> {
        let h = g.layer_norm(x, None, None, LN_EPS)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, st, h, map)?;
        let c = g.silu(cond);
        let c = self.time.forward(g, st, c)?;
        let c = g.gather_rows(c, rows.clone())?;
        let h = g.add(h, c)?;
        let h = g.layer_norm(h, None, None, LN_EPS)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, st, h, map)?;
        g.add(x, h)
    }
}

/// Per-level site sets and convolution plans for one batch.
#[derive(Debug, Clone)]
pub struct Pyramid {
    /// Sites per level and sample.
    pub coords: Vec<Vec<Vec<Coord>>>,
    /// Owning sample of every stacked row, per level.
    pub rows: Vec<Arc<[usize]>>,
    pub same: Vec<Arc<ConvMap>>,
    pub down: Vec<Arc<ConvMap>>,
    pub up: Vec<Arc<ConvMap>>,
}

impl Pyramid {
    pub fn new(coords: &[&[Coord]], resolution: usize, levels: usize) -> Result<Self> {
        let mut per_level: Vec<Vec<Vec<Coord>>> = vec![coords.iter().map(|c| c.to_vec()).collect()];
        let (mut same, mut down, mut up, mut rows) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut res = resolution;
        for l in 0..=levels {
            let cur = &per_level[l];
            rows.push(cur.iter().enumerate().flat_map(|(b, c)| std::iter::repeat_n(b, c.len())).collect());
            same.push(Arc::new(stack_conv_maps(&cur.iter().map(|c| conv_map_stride1(c, res)).collect::<Result<Vec<_>>>()?)));
            if l == levels {
                break;
            }
            let mut maps = Vec::new();
            let mut next = Vec::new();
            for c in cur {
                let (m, n) = conv_map_stride2(c, res)?;
                maps.push(m);
                next.push(n);
            }
            let coarse = res.div_ceil(2);
            let ups = cur.iter().zip(&next).map(|(f, c)| conv_map_transposed(c, coarse, f, res)).collect::<Result<Vec<_>>>()?;
            down.push(Arc::new(stack_conv_maps(&maps)));
            up.push(Arc::new(stack_conv_maps(&ups)));
            per_level.push(next);
            res = coarse;
        }
        Ok(Self { coords: per_level, rows, same, down, up })
    }
}

/// Sparse latent U-Net: residual sparse-conv encoder with strided
/// downsampling, a tri-attention bottleneck over the coarsest sites, and a
/// transposed-conv decoder with level-matched skips. Output rows sit on the
/// input sites.
#[derive(Debug, Clone)]
pub struct SlatNet {
    pub cfg: SlatNetConfig,
    pub cond: Conditioner,
    pub input: Linear,
    pub encoder: Vec<ResBlock>,
    pub down: Vec<SparseConv>,
    pub blocks: Vec<TriAttentionBlock>,
    pub up: Vec<SparseConv>,
    pub fuse: Vec<Linear>,
    pub decoder: Vec<ResBlock>,
    pub head: FinalLayer,
}

impl SlatNet {
    pub fn new(name: &str, cfg: SlatNetConfig) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.widths;
        let d = cfg.bottleneck_width();
        let blocks = (0..cfg.bottleneck_blocks)
            .map(|i| {
                TriAttentionBlock::new(
                    &format!("{name}.blocks.{i}"),
                    TriBlockConfig { dim: d, heads: cfg.heads, ff_mult: cfg.ff_mult, cond_dim: d, rank: None },
                )
            })
            .collect::<Result<_>>()?;
        let levels = cfg.levels;
        Ok(Self {
            cond: Conditioner::new(&format!("{name}.cond"), (cfg.cond_resolution / 4).pow(2), d),
            input: Linear::new(format!("{name}.input"), cfg.channels, w[0], true),
            encoder: (0..=levels).map(|l| ResBlock::new(&format!("{name}.enc.{l}"), w[l], d)).collect(),
            down: (0..levels).map(|l| SparseConv::new(format!("{name}.down.{l}"), w[l], w[l + 1])).collect(),
            blocks,
            up: (0..levels).map(|l| SparseConv::new(format!("{name}.up.{l}"), w[l + 1], w[l])).collect(),
            fuse: (0..levels).map(|l| Linear::new(format!("{name}.fuse.{l}"), 2 * w[l], w[l], true)).collect(),
            decoder: (0..levels).map(|l| ResBlock::new(&format!("{name}.dec.{l}"), w[l], d)).collect(),
            head: FinalLayer::new(&format!("{name}.head"), d, w[0], cfg.channels),
            cfg,
        })
    }

    /// Velocity on the sites of `x_t` under an already embedded bundle. An
    /// empty tensor yields an empty result.
    pub fn forward(&self, st: &ParamStore, x_t: &SparseVoxelTensor, t: f64, bundle: &ConditioningBundle) -> Result<SparseVoxelTensor> {
        let cfg = &self.cfg;
        if x_t.resolution() != cfg.resolution || x_t.channels() != cfg.channels {
            return Err(shape_err!("sparse tensor {}³×{} for a {}³×{} network", x_t.resolution(), x_t.channels(), cfg.resolution, cfg.channels));
        }
        if x_t.is_empty() {
            return Ok(x_t.clone());
        }
        let d = cfg.bottleneck_width();
        if bundle.dim() != d {
            return Err(shape_err!("bundle width {} for bottleneck width {d}", bundle.dim()));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[x_t.len(), cfg.channels], x_t.feats().to_vec())?);
        let inp = BlockInputs {
            c_img: g.constant(bundle.c_img().clone()),
            c_txt: g.constant(bundle.c_txt().clone()),
            g: g.constant(Tensor::new(&[1, d], bundle.g().to_vec())?),
            cond: self.cond.time.forward(&mut g, st, &[t])?,
        };
        let out = self.forward_graph(&mut g, st, x, &[x_t.coords()], &inp, &[bundle.c_img().rows()], &[bundle.c_txt().rows()])?;
        x_t.with_feats(cfg.channels, g.value(out).data().to_vec())
    }
}

impl FlowNet for SlatNet {
    fn conditioner(&self) -> &Conditioner {
        &self.cond
    }

    fn channels(&self) -> usize {
        self.cfg.channels
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.cond.init(store, rng)?;
        self.input.init(store, InitRule::Standard, rng)?;
        for r in &self.encoder {
            r.init(store, rng)?;
        }
        for c in &self.down {
            c.init(store, InitRule::Standard, rng)?;
        }
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        for c in &self.up {
            c.init(store, InitRule::Standard, rng)?;
        }
        for f in &self.fuse {
            f.init(store, InitRule::Standard, rng)?;
        }
        for r in &self.decoder {
            r.init(store, rng)?;
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
        let total: usize = coords.iter().map(|c| c.len()).sum();
        if g.shape(x) != [total, cfg.channels] {
            return Err(shape_err!("input {:?} for {total} sites of {} channels", g.shape(x), cfg.channels));
        }
        if coords.iter().any(|c| c.is_empty()) {
            return Err(Error::Empty("a batched sample has no sites".into()));
        }
        let pyr = Pyramid::new(coords, cfg.resolution, cfg.levels)?;
        let levels = cfg.levels;
        let mut h = self.input.forward(g, st, x)?;
        let mut skips = Vec::with_capacity(levels);
        for l in 0..=levels {
            h = self.encoder[l].forward(g, st, h, inp.cond, &pyr.rows[l], &pyr.same[l])?;
            if l < levels {
                skips.push(h);
                h = self.down[l].forward(g, st, h, &pyr.down[l])?;
            }
        }
        let coarse = &pyr.coords[levels];
        let pos: Vec<[usize; 3]> = coarse.iter().flatten().map(|c| c.map(usize::from)).collect();
        let ape = g.constant(position_embedding(&pos, cfg.bottleneck_width()));
        h = g.add(h, ape)?;
        let lens: Vec<usize> = coarse.iter().map(Vec::len).collect();
        let lay = Layout::new(&lens, img_lens, txt_lens)?;
        for b in &self.blocks {
            h = b.forward(g, st, h, inp, &lay)?;
        }
        for l in (0..levels).rev() {
            let u = self.up[l].forward(g, st, h, &pyr.up[l])?;
            let cat = g.concat_cols(&[u, skips[l]])?;
            h = self.fuse[l].forward(g, st, cat)?;
            h = self.decoder[l].forward(g, st, h, inp.cond, &pyr.rows[l], &pyr.same[l])?;
        }
        self.head.forward(g, st, h, inp.cond, &pyr.rows[0])
    }
}
