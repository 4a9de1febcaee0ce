use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::flow::{draw_dropout, edit_loss_graph, sample_t_logit_normal, DropDecision, DropMode, FlowSample, DEFAULT_DROP_RATE, MU_SPARSE, MU_STRUCTURE};
use crate::numcore::{rng, AdamWConfig, ClipConfig, Graph, OptimizerState, ParamStore, Rng, Tensor, Var};
use crate::synth::CorpusItem;
use crate::voxel::{Coord, SparseVoxelTensor};

use super::cond::CondInput;
use super::net::{forward_batch, row_range, FlowNet, NetInput};

/// Which of the two flow networks is being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[serde(alias = "ss")]
    Structure,
    Slat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub drop_rate: f64,
    pub drop_mode: DropMode,
    pub mu_structure: f64,
    pub sigma_structure: f64,
    pub mu_slat: f64,
    pub sigma_slat: f64,
    pub clip_cap: f64,
    pub seed: u64,
    /// Include the preservation term of the edit loss.
    pub use_mask: bool,
    pub freeze_self_attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 8,
            steps: 2000,
            drop_rate: DEFAULT_DROP_RATE,
            drop_mode: DropMode::Joint,
            mu_structure: MU_STRUCTURE,
            sigma_structure: 1.0,
            mu_slat: MU_SPARSE,
            sigma_slat: 1.0,
            clip_cap: 2.0,
            seed: 0,
            use_mask: true,
            freeze_self_attention: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} in {self:?}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return bad("drop rate must lie in [0, 1)");
        }
        if !(self.sigma_structure > 0.0 && self.sigma_slat > 0.0) {
            return bad("logit-normal spreads must be positive");
        }
        if !(self.clip_cap > 0.0) {
            return bad("clip cap must be positive");
        }
        Ok(())
    }

    /// `(μ, σ)` of the timestep distribution for `stage`.
    pub fn timestep_params(&self, stage: Stage) -> (f64, f64) {
        match stage {
            Stage::Structure => (self.mu_structure, self.sigma_structure),
            Stage::Slat => (self.mu_slat, self.sigma_slat),
        }
    }

    pub fn optimizer(&self) -> OptimizerState {
        OptimizerState::new(AdamWConfig { lr: self.lr, ..AdamWConfig::default() }, ClipConfig { cap: self.clip_cap, ..ClipConfig::default() })
    }
}

/// Clean latents of one corpus pair in row form, ready for noising.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub edit: Tensor,
    pub orig: Tensor,
    /// Preservation weight per row.
    pub mask: Vec<f64>,
    /// Sites of the rows; empty for dense latents.
    pub coords: Vec<Coord>,
    pub cond: CondInput,
}

impl TrainPair {
    /// Occupancy grids `[R³, 1]` with the structure-resolution mask.
    pub fn structure(item: &CorpusItem) -> Result<Self> {
        let rows = |g: &crate::voxel::DenseGrid| Tensor::new(&[g.resolution().pow(3), g.channels()], g.values().to_vec());
        if item.mask16.resolution() != item.edit.resolution() {
            return Err(shape_err!("mask resolution {} for grid resolution {}", item.mask16.resolution(), item.edit.resolution()));
        }
        Ok(Self {
            edit: rows(&item.edit)?,
            orig: rows(&item.orig)?,
            mask: item.mask16.to_weights(),
            coords: Vec::new(),
            cond: CondInput::new(&item.orig, &item.instruction)?,
        })
    }

    /// Latents on the edited sites. Original features are read at those sites
    /// (zero where the original has none); each site takes the mask bit of its
    /// parent structure voxel.
    pub fn slat(item: &CorpusItem) -> Result<Self> {
        let e = &item.edit_slat;
        let factor = e.resolution() / item.mask16.resolution();
        if factor == 0 || !e.resolution().is_multiple_of(item.mask16.resolution()) {
            return Err(shape_err!("mask resolution {} does not divide latent resolution {}", item.mask16.resolution(), e.resolution()));
        }
        let orig = resample(&item.orig_slat, e.coords())?;
        let mask =
            e.coords().iter().map(|c| f64::from(u8::from(item.mask16.get(c[0] as usize / factor, c[1] as usize / factor, c[2] as usize / factor)))).collect();
        Ok(Self {
            edit: Tensor::new(&[e.len(), e.channels()], e.feats().to_vec())?,
            orig,
            mask,
            coords: e.coords().to_vec(),
            cond: CondInput::new(&item.orig, &item.instruction)?,
        })
    }

    /// A noised training sample at time `t`.
    pub fn noised(&self, t: f64, rng: &mut Rng) -> Result<FlowSample> {
        let eps = Tensor::from_fn(self.edit.shape(), |_| StandardNormal.sample(rng));
        FlowSample::new(self.edit.clone(), self.orig.clone(), eps, t, self.mask.clone())
    }
}

/// Features of `s` at `coords`, zero rows where `s` has no site.
pub fn resample(s: &SparseVoxelTensor, coords: &[Coord]) -> Result<Tensor> {
    let c = s.channels();
    let mut out = vec![0.0; coords.len() * c];
    for (row, p) in out.chunks_mut(c.max(1)).zip(coords) {
        if let Some(i) = s.find(p) {
            row.copy_from_slice(s.row(i));
        }
    }
    Tensor::new(&[coords.len(), c], out)
}

/// One element of a training batch.
#[derive(Debug, Clone)]
pub struct TrainExample<'a> {
    pub sample: FlowSample,
    pub coords: &'a [Coord],
    pub cond: &'a CondInput,
    pub drop: DropDecision,
}

/// Mean over the batch of each sample's edit loss.
pub fn batch_loss<N: FlowNet>(net: &N, g: &mut Graph, st: &ParamStore, batch: &[TrainExample<'_>], use_mask: bool) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    let inputs: Vec<NetInput<'_>> = batch.iter().map(|e| NetInput { x: &e.sample.x_t, coords: e.coords, t: e.sample.t, cond: e.cond, drop: e.drop }).collect();
    let (out, offs) = forward_batch(net, g, st, &inputs)?;
    let mut total: Option<Var> = None;
    for (b, e) in batch.iter().enumerate() {
        let v = if batch.len() == 1 { out } else { g.gather_rows(out, row_range(&offs, b))? };
        let l = edit_loss_graph(g, v, &e.sample, use_mask)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Loss before the update.
    pub loss: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// Forward, edit loss, backward, adaptive clipping and one AdamW update.
pub fn train_step<N: FlowNet>(net: &N, params: &mut ParamStore, opt: &mut OptimizerState, batch: &[TrainExample<'_>], cfg: &TrainConfig) -> Result<StepReport> {
    let mut g = if cfg.freeze_self_attention { Graph::with_frozen(net.self_attention_prefixes()) } else { Graph::new() };
    let loss = batch_loss(net, &mut g, params, batch, cfg.use_mask)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        let ts: Vec<f64> = batch.iter().map(|e| e.sample.t).collect();
        return Err(Error::Training(format!("non-finite loss {value} at optimizer step {} with timesteps {ts:?}", opt.step())));
    }
    let grads = g.backward(loss)?;
    let mut grads = g.param_grads(&grads);
    for (name, p) in params.iter() {
        grads.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
    }
    let clip = opt.adaptive_clip(&mut grads);
    if !clip.pre_norm.is_finite() {
        return Err(Error::Training(format!("non-finite gradient norm at optimizer step {} (loss {value})", opt.step())));
    }
    opt.adamw_step(params, &grads)?;
    Ok(StepReport { loss: value, grad_norm: clip.pre_norm, clip_scale: clip.scale })
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Structure => "structure",
            Stage::Slat => "slat",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ss" | "structure" => Ok(Stage::Structure),
            "slat" => Ok(Stage::Slat),
            _ => Err(Error::Config(format!("unknown stage `{s}` (expected ss or slat)"))),
        }
    }
}

/// Sequential optimizer loop over a fixed set of pairs.
pub struct Trainer<'n, N> {
    pub net: &'n N,
    pub params: ParamStore,
    pub opt: OptimizerState,
    pub cfg: TrainConfig,
    pub stage: Stage,
    rng: Rng,
}

impl<'n, N: FlowNet> Trainer<'n, N> {
    /// Parameters are initialized from the configured seed.
    pub fn new(net: &'n N, cfg: TrainConfig, stage: Stage) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng(cfg.seed);
        let params = net.init_params(&mut r)?;
        Ok(Self { net, params, opt: cfg.optimizer(), cfg, stage, rng: r })
    }

    /// Continues from existing parameters.
    pub fn resume(net: &'n N, params: ParamStore, cfg: TrainConfig, stage: Stage) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { net, params, opt: cfg.optimizer(), cfg, stage, rng: rng(cfg.seed ^ 0x5eed) })
    }

    /// Replaces the fresh optimizer, e.g. with state restored from a checkpoint.
    pub fn with_optimizer(mut self, opt: OptimizerState) -> Self {
        self.opt = opt;
        self
    }

    /// Draws a batch without replacement (with replacement if the pool is
    /// smaller than the batch), noises it and applies one update.
    pub fn step(&mut self, pairs: &[TrainPair]) -> Result<StepReport> {
        if pairs.is_empty() {
            return Err(Error::Empty("no training pairs".into()));
        }
        let b = self.cfg.batch;
        let picks: Vec<usize> =
            if pairs.len() >= b { sample(&mut self.rng, pairs.len(), b).into_vec() } else { (0..b).map(|_| self.rng.random_range(0..pairs.len())).collect() };
        let (mu, sigma) = self.cfg.timestep_params(self.stage);
        let mut batch = Vec::with_capacity(b);
        for i in picks {
            let t = sample_t_logit_normal(mu, sigma, &mut self.rng)?;
            let p = &pairs[i];
            let sample = p.noised(t, &mut self.rng)?;
            let drop = draw_dropout(self.cfg.drop_rate, self.cfg.drop_mode, &mut self.rng)?;
            batch.push(TrainExample { sample, coords: &p.coords, cond: &p.cond, drop });
        }
        train_step(self.net, &mut self.params, &mut self.opt, &batch, &self.cfg)
    }

    /// Runs the configured number of steps, calling `log` after each.
    pub fn run(&mut self, pairs: &[TrainPair], mut log: impl FnMut(usize, &StepReport)) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.cfg.steps);
        for s in 0..self.cfg.steps {
            let r = self.step(pairs)?;
            log(s, &r);
            losses.push(r.loss);
        }
        Ok(losses)
    }
}

/// Mean of the first and of the last `window` entries.
pub fn smoothed_endpoints(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    let w = window.min(losses.len());
    if w == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}
