use rand::Rng;

use crate::error::{shape_err, Result};
use crate::numcore::{Graph, InitRule, ParamStore, Tensor, Var};
use crate::voxel::SparseVoxelTensor;

use super::adaln::{gated_residual, modulate, AdaLn};
use super::attention::MultiHeadAttention;
use super::bundle::ConditioningBundle;
use super::compose::KvComposer;
use super::layout::Layout;
use super::linear::Linear;

/// Hyper-parameters of one tri-attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriBlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Width of the timestep conditioning vector.
    pub cond_dim: usize,
    /// Composer rank; `None` selects the late-fusion variant without composition.
    pub rank: Option<usize>,
}

/// Graph inputs shared by every block of a network.
#[derive(Debug, Clone, Copy)]
pub struct BlockInputs {
    /// Image context rows, `[ΣL_img, D]`.
    pub c_img: Var,
    /// Text context rows, `[ΣL_txt, D]`.
    pub c_txt: Var,
    /// Pooled text vector per sample, `[B, D]`.
    pub g: Var,
    /// Timestep conditioning per sample, `[B, cond_dim]`.
    pub cond: Var,
}

/// Self-attention, dual cross-attention fused by a zero-init mixer, and a
/// feed-forward layer, each behind a gated adaLN residual.
#[derive(Debug, Clone, PartialEq)]
pub struct TriAttentionBlock {
    pub name: String,
    pub dim: usize,
    pub self_attn: MultiHeadAttention,
    pub cross_img: MultiHeadAttention,
    pub cross_txt: MultiHeadAttention,
    pub mixer: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
    pub adaln: AdaLn,
    pub composer: Option<KvComposer>,
}

impl TriAttentionBlock {
    pub fn new(name: &str, cfg: TriBlockConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            name: name.to_string(),
            dim: d,
            self_attn: MultiHeadAttention::new(&format!("{name}.self"), d, cfg.heads)?,
            cross_img: MultiHeadAttention::new(&format!("{name}.img"), d, cfg.heads)?,
            cross_txt: MultiHeadAttention::new(&format!("{name}.txt"), d, cfg.heads)?,
            mixer: Linear::new(format!("{name}.mixer"), 2 * d, d, true),
            ff1: Linear::new(format!("{name}.ff1"), d, cfg.ff_mult * d, true),
            ff2: Linear::new(format!("{name}.ff2"), cfg.ff_mult * d, d, true),
            adaln: AdaLn::new(&format!("{name}.adaln"), cfg.cond_dim, d, 3),
            composer: cfg.rank.map(|r| KvComposer::new(&format!("{name}.composer"), d, r)).transpose()?,
        })
    }

    pub fn self_attention_prefix(&self) -> String {
        format!("{}.self.", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for a in [&self.self_attn, &self.cross_img, &self.cross_txt] {
            a.init(store, rng)?;
        }
        self.mixer.init(store, InitRule::Zero, rng)?;
        self.ff1.init(store, InitRule::Standard, rng)?;
        self.ff2.init(store, InitRule::Standard, rng)?;
        self.adaln.init(store, rng)?;
        if let Some(c) = &self.composer {
            c.init(store, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, st: &ParamStore, x: Var, inp: &BlockInputs, lay: &Layout) -> Result<Var> {
        let d = self.dim;
        for (what, v) in [("tokens", x), ("image context", inp.c_img), ("text context", inp.c_txt)] {
            if g.value(v).cols() != d {
                return Err(shape_err!("{what} {:?} for block width {d}", g.shape(v)));
            }
        }
        let m = self.adaln.forward(g, st, inp.cond, &lay.token_rows)?;

        let h = modulate(g, x, &m[0])?;
        let a = self.self_attn.forward(g, st, h, h, &lay.self_segs)?;
        let x = gated_residual(g, x, a, m[0].gate)?;

        let h = modulate(g, x, &m[1])?;
        let ctx = match &self.composer {
            Some(c) => c.forward(g, st, inp.c_img, inp.g, &lay.img_offs, &lay.img_rows)?,
            None => inp.c_img,
        };
        let a_img = self.cross_img.forward(g, st, h, ctx, &lay.img_segs)?;
        let a_txt = self.cross_txt.forward(g, st, h, inp.c_txt, &lay.txt_segs)?;
        let both = g.concat_cols(&[a_img, a_txt])?;
        let delta = self.mixer.forward(g, st, both)?;
        let a = g.add(a_img, delta)?;
        let x = gated_residual(g, x, a, m[1].gate)?;

        let h = modulate(g, x, &m[2])?;
        let f = self.ff1.forward(g, st, h)?;
        let f = g.gelu(f);
        let f = self.ff2.forward(g, st, f)?;
        gated_residual(g, x, f, m[2].gate)
    }
}

fn eval_single(block: &TriAttentionBlock, st: &ParamStore, x: &Tensor, bundle: &ConditioningBundle, t_emb: &[f64]) -> Result<Tensor> {
    if bundle.dim() != block.dim {
        return Err(shape_err!("bundle width {} for block width {}", bundle.dim(), block.dim));
    }
    let lay = Layout::new(&[x.rows()], &[bundle.c_img().rows()], &[bundle.c_txt().rows()])?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let inp = BlockInputs {
        c_img: g.constant(bundle.c_img().clone()),
        c_txt: g.constant(bundle.c_txt().clone()),
        g: g.constant(Tensor::new(&[1, bundle.dim()], bundle.g().to_vec())?),
        cond: g.constant(Tensor::new(&[1, t_emb.len()], t_emb.to_vec())?),
    };
    let out = block.forward(&mut g, st, xv, &inp, &lay)?;
    Ok(g.value(out).clone())
}

/// One block applied to a single token sequence `[N, D]`.
pub fn tri_attention_block(block: &TriAttentionBlock, st: &ParamStore, x: &Tensor, bundle: &ConditioningBundle, t_emb: &[f64]) -> Result<Tensor> {
    eval_single(block, st, x, bundle, t_emb)
}

/// One block applied to the feature rows of a sparse tensor. An empty tensor
/// is returned unchanged.
pub fn sparse_tri_attention(
    block: &TriAttentionBlock,
    st: &ParamStore,
    x: &SparseVoxelTensor,
    bundle: &ConditioningBundle,
    t_emb: &[f64],
) -> Result<SparseVoxelTensor> {
    if x.is_empty() {
        return Ok(x.clone());
    }
    let feats = Tensor::new(&[x.len(), x.channels()], x.feats().to_vec())?;
    let out = eval_single(block, st, &feats, bundle, t_emb)?;
    x.with_feats(x.channels(), out.into_data())
}

/// Composer applied to a single context.
pub fn kv_compose(composer: &KvComposer, st: &ParamStore, bundle: &ConditioningBundle) -> Result<Tensor> {
    composer.apply(st, bundle.c_img(), bundle.g())
}

/// `(LN(x)·(1 + scale) + shift, gate)` for each sub-layer of `adaln`.
pub fn adaln_modulate(adaln: &AdaLn, st: &ParamStore, x: &Tensor, t_emb: &[f64]) -> Result<Vec<(Tensor, Tensor)>> {
    adaln.modulate_plain(st, x, t_emb)
}
