use std::sync::Arc;

use rand::Rng;

use crate::blocks::{BlockInputs, ConditioningBundle, TimeEmbedder};
use crate::error::{shape_err, Result};
use crate::flow::DropDecision;
use crate::numcore::{Graph, InitRule, ParamStore, Tensor, Var};
use crate::synth::{encode_image_condition, encode_instruction, EditInstruction, ImageEmbedder, TextEncoder, IMAGE_TOKENS, PAD};
use crate::voxel::DenseGrid;

/// Raw conditioning of one example: projection tokens of the original
/// structure and instruction token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct CondInput {
    pub image: Tensor,
    pub tokens: Vec<u32>,
}

impl CondInput {
    pub fn new(orig_structure: &DenseGrid, instr: &EditInstruction) -> Result<Self> {
        Ok(Self { image: encode_image_condition(orig_structure)?, tokens: encode_instruction(instr) })
    }
}

/// Which branch of classifier-free guidance a forward pass evaluates.
pub fn guidance_drop(conditional: bool) -> DropDecision {
    DropDecision { img: !conditional, txt: !conditional }
}

/// Turns raw conditioning into block inputs. Dropped text becomes the single
/// padding-token embedding; dropped images a learned null token.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioner {
    pub dim: usize,
    pub image: ImageEmbedder,
    pub text: TextEncoder,
    pub time: TimeEmbedder,
    pub null_img: String,
}

/// Sinusoid width fed to the time embedder.
pub const TIME_FREQ_DIM: usize = 64;

impl Conditioner {
    pub fn new(name: &str, image_width: usize, dim: usize) -> Self {
        Self {
            dim,
            image: ImageEmbedder::new(&format!("{name}.img"), image_width, dim),
            text: TextEncoder::new(&format!("{name}.txt"), dim),
            time: TimeEmbedder::new(&format!("{name}.time"), TIME_FREQ_DIM, dim),
            null_img: format!("{name}.null_img"),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.image.init(store, rng)?;
        self.text.init(store, rng)?;
        self.time.init(store, rng)?;
        store.init(&self.null_img, &[1, self.dim], InitRule::Standard, rng)
    }

    /// Block inputs for a batch, plus the per-sample context lengths.
    pub fn build(
        &self,
        g: &mut Graph,
        st: &ParamStore,
        conds: &[&CondInput],
        drops: &[DropDecision],
        ts: &[f64],
    ) -> Result<(BlockInputs, Vec<usize>, Vec<usize>)> {
        let b = conds.len();
        if drops.len() != b || ts.len() != b || b == 0 {
            return Err(shape_err!("{b} conditions, {} drop decisions, {} timesteps", drops.len(), ts.len()));
        }
        let width = self.image.proj.din;
        let kept: Vec<usize> = (0..b).filter(|&i| !drops[i].img).collect();
        let mut raw = Vec::with_capacity(kept.len() * IMAGE_TOKENS * width);
        for &i in &kept {
            let im = &conds[i].image;
            if im.shape() != [IMAGE_TOKENS, width] {
                return Err(shape_err!("image tokens {:?}, expected [{IMAGE_TOKENS}, {width}]", im.shape()));
            }
            raw.extend_from_slice(im.data());
        }
        let null = g.param(st, &self.null_img)?;
        let pool = if kept.is_empty() {
            null
        } else {
            let raw = g.constant(Tensor::new(&[kept.len() * IMAGE_TOKENS, width], raw)?);
            let emb = self.image.forward(g, st, raw)?;
            g.concat_rows(&[emb, null])?
        };
        let null_row = kept.len() * IMAGE_TOKENS;
        let mut img_rows = Vec::new();
        let mut img_lens = Vec::with_capacity(b);
        let mut slot = 0;
        for d in drops {
            if d.img {
                img_rows.push(null_row);
                img_lens.push(1);
            } else {
                img_rows.extend(slot * IMAGE_TOKENS..(slot + 1) * IMAGE_TOKENS);
                img_lens.push(IMAGE_TOKENS);
                slot += 1;
            }
        }
        let c_img = g.gather_rows(pool, img_rows.into())?;

        let mut tokens = Vec::new();
        let mut txt_lens = Vec::with_capacity(b);
        for (c, d) in conds.iter().zip(drops) {
            let t: &[u32] = if d.txt || c.tokens.is_empty() { &[PAD] } else { &c.tokens };
            tokens.extend_from_slice(t);
            txt_lens.push(t.len());
        }
        let c_txt = self.text.forward(g, st, &tokens)?;
        let total: usize = txt_lens.iter().sum();
        let mut avg = vec![0.0; b * total];
        let mut off = 0;
        for (s, &n) in txt_lens.iter().enumerate() {
            avg[s * total + off..s * total + off + n].fill(1.0 / n as f64);
            off += n;
        }
        let avg = g.constant(Tensor::new(&[b, total], avg)?);
        let gvec = g.matmul(avg, c_txt)?;
        let cond = self.time.forward(g, st, ts)?;
        Ok((BlockInputs { c_img, c_txt, g: gvec, cond }, img_lens, txt_lens))
    }

    /// Evaluated contexts of one example.
    pub fn bundle(&self, st: &ParamStore, cond: &CondInput, drop: DropDecision) -> Result<ConditioningBundle> {
        let mut g = Graph::new();
        let (inp, _, _) = self.build(&mut g, st, &[cond], &[drop], &[0.0])?;
        ConditioningBundle::new(g.value(inp.c_img).clone(), g.value(inp.c_txt).clone())
    }
}

/// Final adaLN: `LN(h)·(1 + scale) + shift` from a zero-initialized map.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalLayer {
    pub modulation: crate::blocks::Linear,
    pub out: crate::blocks::Linear,
    pub dim: usize,
}

impl FinalLayer {
    pub fn new(name: &str, cond_dim: usize, dim: usize, out: usize) -> Self {
        Self {
            modulation: crate::blocks::Linear::new(format!("{name}.mod"), cond_dim, 2 * dim, true),
            out: crate::blocks::Linear::new(format!("{name}.out"), dim, out, true),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.modulation.init(store, InitRule::Zero, rng)?;
        self.out.init(store, InitRule::Zero, rng)
    }

    pub fn forward(&self, g: &mut Graph, st: &ParamStore, h: Var, cond: Var, rows: &Arc<[usize]>) -> Result<Var> {
        let c = g.silu(cond);
        let m = self.modulation.forward(g, st, c)?;
        let m = g.gather_rows(m, rows.clone())?;
        let shift = g.slice_cols(m, 0, self.dim)?;
        let scale = g.slice_cols(m, self.dim, self.dim)?;
        let mods = crate::blocks::Modulation { shift, scale, gate: shift };
        let h = crate::blocks::modulate(g, h, &mods)?;
        self.out.forward(g, st, h)
    }
}
