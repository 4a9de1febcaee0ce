use std::sync::Arc;

use rand::Rng;

use crate::blocks::BlockInputs;
use crate::error::{shape_err, Result};
use crate::flow::{DropDecision, VelocityField};
use crate::numcore::{Graph, ParamStore, Tensor, Var};
use crate::voxel::Coord;

use super::cond::{guidance_drop, CondInput, Conditioner};

/// A conditional velocity network over stacked latent rows.
pub trait FlowNet {
    fn conditioner(&self) -> &Conditioner;

    /// Latent channels per row.
    fn channels(&self) -> usize;

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()>;

    /// Parameter-name prefixes held fixed when self-attention is frozen.
    fn self_attention_prefixes(&self) -> Vec<String>;

    /// `x: [ΣN_b, C]` holds the rows of every sample in order; `coords[b]`
    /// are the sites of sample `b` (ignored by dense networks, which take
    /// `R³` rows each).
    #[allow(clippy::too_many_arguments)]
    fn forward_graph(
        &self,
        g: &mut Graph,
        st: &ParamStore,
        x: Var,
        coords: &[&[Coord]],
        inp: &BlockInputs,
        img_lens: &[usize],
        txt_lens: &[usize],
    ) -> Result<Var>;

    /// Fresh parameters drawn from `rng`.
    fn init_params(&self, rng: &mut impl Rng) -> Result<ParamStore> {
        let mut st = ParamStore::new();
        self.init(&mut st, rng)?;
        Ok(st)
    }
}

/// One forward input: latent rows, their sites, timestep, conditioning and
/// which contexts are replaced by null tokens.
#[derive(Debug, Clone, Copy)]
pub struct NetInput<'a> {
    pub x: &'a Tensor,
    pub coords: &'a [Coord],
    pub t: f64,
    pub cond: &'a CondInput,
    pub drop: DropDecision,
}

/// Builds the batched forward graph and returns the output node with the
/// row offset of each sample.
pub fn forward_batch<N: FlowNet>(net: &N, g: &mut Graph, st: &ParamStore, batch: &[NetInput<'_>]) -> Result<(Var, Vec<usize>)> {
    let c = net.channels();
    let mut data = Vec::new();
    let mut offs = vec![0];
    for b in batch {
        if b.x.rank() != 2 || b.x.cols() != c {
            return Err(shape_err!("latent {:?} for a {c}-channel network", b.x.shape()));
        }
        data.extend_from_slice(b.x.data());
        offs.push(offs.last().copied().unwrap_or(0) + b.x.rows());
    }
    let rows = *offs.last().unwrap_or(&0);
    let x = g.constant(Tensor::new(&[rows, c], data)?);
    let conds: Vec<&CondInput> = batch.iter().map(|b| b.cond).collect();
    let drops: Vec<DropDecision> = batch.iter().map(|b| b.drop).collect();
    let ts: Vec<f64> = batch.iter().map(|b| b.t).collect();
    let (inp, img_lens, txt_lens) = net.conditioner().build(g, st, &conds, &drops, &ts)?;
    let coords: Vec<&[Coord]> = batch.iter().map(|b| b.coords).collect();
    let out = net.forward_graph(g, st, x, &coords, &inp, &img_lens, &txt_lens)?;
    if g.shape(out) != [rows, c] {
        return Err(shape_err!("network output {:?}, expected [{rows}, {c}]", g.shape(out)));
    }
    Ok((out, offs))
}

/// Evaluated velocities, one tensor per input.
pub fn predict<N: FlowNet>(net: &N, st: &ParamStore, batch: &[NetInput<'_>]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let (out, offs) = forward_batch(net, &mut g, st, batch)?;
    let v = g.value(out);
    let c = v.cols();
    offs.windows(2).map(|w| Tensor::new(&[w[1] - w[0], c], v.data()[w[0] * c..w[1] * c].to_vec())).collect()
}

/// Row indices `offs[b]..offs[b+1]`.
pub fn row_range(offs: &[usize], b: usize) -> Arc<[usize]> {
    (offs[b]..offs[b + 1]).collect()
}

/// A trained network bound to its parameters and a fixed site set, usable
/// by the sampler.
pub struct BoundNet<'a, N> {
    pub net: &'a N,
    pub params: &'a ParamStore,
    pub coords: &'a [Coord],
}

impl<N: FlowNet> BoundNet<'_, N> {
    fn null_cond(&self) -> CondInput {
        CondInput { image: Tensor::zeros(&[0, 0]), tokens: Vec::new() }
    }
}

impl<N: FlowNet> VelocityField for BoundNet<'_, N> {
    type Cond = CondInput;

    fn velocity(&self, x: &Tensor, t: f64, cond: Option<&CondInput>) -> Result<Tensor> {
        let null = self.null_cond();
        let (c, drop) = match cond {
            Some(c) => (c, guidance_drop(true)),
            None => (&null, guidance_drop(false)),
        };
        let mut out = predict(self.net, self.params, &[NetInput { x, coords: self.coords, t, cond: c, drop }])?;
        Ok(out.remove(0))
    }

    fn velocity_pair(&self, x: &Tensor, t: f64, cond: &CondInput) -> Result<(Tensor, Tensor)> {
        let batch =
            [NetInput { x, coords: self.coords, t, cond, drop: guidance_drop(true) }, NetInput { x, coords: self.coords, t, cond, drop: guidance_drop(false) }];
        let mut out = predict(self.net, self.params, &batch)?;
        let u = out.pop().expect("two outputs");
        Ok((out.pop().expect("two outputs"), u))
    }
}
