use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use super::GlobalArgs;
use crate::error::{Error, Result};
use crate::models::{
    blob_hash, directory_hash, smoothed_endpoints, FlowNet, RunManifest, SlatNet, SlatNetConfig, Stage, StructureNet, StructureNetConfig, TrainConfig,
    TrainPair, Trainer,
};
use crate::numcore::{rng, OptimizerState, ParamStore};
use crate::synth::load_corpus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub stage: Stage,
    pub structure: StructureNetConfig,
    pub slat: SlatNetConfig,
    pub train: TrainConfig,
    /// Run directory holding a checkpoint of the same stage to continue from.
    pub resume: Option<PathBuf>,
    /// Steps between progress lines.
    pub log_every: usize,
    /// Window of the smoothed loss recorded in the manifest.
    pub smoothing_window: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            out: PathBuf::from("run"),
            stage: Stage::Structure,
            structure: StructureNetConfig::default(),
            slat: SlatNetConfig::default(),
            train: TrainConfig::default(),
            resume: None,
            log_every: 50,
            smoothing_window: 50,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Corpus directory written by `gendata`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// `ss` (structure) or `slat`.
    #[arg(long)]
    pub stage: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Run directory to resume from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Keep every self-attention parameter at its initial value.
    #[arg(long)]
    pub freeze_self_attn: bool,
    /// Train without the preservation term.
    #[arg(long)]
    pub no_mask: bool,
}

impl TrainArgs {
    pub fn apply(self, mut c: TrainRunConfig, g: &GlobalArgs) -> Result<TrainRunConfig> {
        if let Some(s) = &self.stage {
            c.stage = s.parse()?;
        }
        c.corpus = self.corpus.unwrap_or(c.corpus);
        c.train.steps = self.steps.unwrap_or(c.train.steps);
        c.train.lr = self.lr.unwrap_or(c.train.lr);
        c.train.batch = self.batch.unwrap_or(c.train.batch);
        c.resume = self.resume.or(c.resume);
        c.train.freeze_self_attention |= self.freeze_self_attn;
        c.train.use_mask &= !self.no_mask;
        c.train.seed = g.seed.unwrap_or(c.train.seed);
        c.out = g.out.clone().unwrap_or(c.out);
        Ok(c)
    }
}

pub fn checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.bvec", stage.name()))
}

pub fn optimizer_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.opt.bvec", stage.name()))
}

pub fn loss_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.loss.csv", stage.name()))
}

pub fn manifest_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.manifest.json", stage.name()))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Losses of the steps taken in this invocation.
    pub losses: Vec<f64>,
    pub initial: f64,
    pub last: f64,
    pub manifest: RunManifest,
}

const CSV_HEADER: &str = "step,loss,grad_norm,clip_scale\n";

struct Resumed {
    params: ParamStore,
    opt: Option<OptimizerState>,
    trace: String,
    hash: String,
}

fn load_resume(dir: &Path, stage: Stage, cfg: &TrainConfig) -> Result<Resumed> {
    let ckpt = checkpoint_path(dir, stage);
    let bytes = fs::read(&ckpt).map_err(|e| Error::Config(format!("{}: {e}", ckpt.display())))?;
    let params = ParamStore::read_from(&mut bytes.as_slice())?;
    let opt_path = optimizer_path(dir, stage);
    let opt = if opt_path.exists() {
        let o = cfg.optimizer();
        Some(OptimizerState::from_store(o.config, o.clip, &ParamStore::load(&opt_path)?)?)
    } else {
        None
    };
    let trace = fs::read_to_string(loss_path(dir, stage)).unwrap_or_default();
    let trace = trace.strip_prefix(CSV_HEADER).unwrap_or("").to_string();
    Ok(Resumed { params, opt, trace, hash: blob_hash(&bytes) })
}

struct StageRun {
    params: ParamStore,
    opt: OptimizerState,
    losses: Vec<f64>,
    trace: String,
    resumed_from: Option<String>,
}

fn run_stage<N: FlowNet>(net: &N, pairs: &[TrainPair], cfg: &TrainRunConfig) -> Result<StageRun> {
    let stage = cfg.stage;
    let (mut trainer, mut trace, resumed_from) = match &cfg.resume {
        None => (Trainer::new(net, cfg.train, stage)?, String::new(), None),
        Some(dir) => {
            let r = load_resume(dir, stage, &cfg.train)?;
            let mut params = net.init_params(&mut rng(cfg.train.seed))?;
            params.load_from(&r.params)?;
            // A distinct stream per resume point keeps segments from replaying batches.
            let mut tc = cfg.train;
            tc.seed = tc.seed.wrapping_add(r.opt.as_ref().map_or(0, OptimizerState::step));
            let mut t = Trainer::resume(net, params, tc, stage)?;
            if let Some(o) = r.opt {
                t = t.with_optimizer(o);
            }
            (t, r.trace, Some(r.hash))
        }
    };
    let every = cfg.log_every.max(1);
    let mut losses = Vec::with_capacity(cfg.train.steps);
    for i in 0..cfg.train.steps {
        let r = trainer.step(pairs)?;
        let step = trainer.opt.step();
        writeln!(trace, "{step},{},{},{}", r.loss, r.grad_norm, r.clip_scale).expect("writing to a String");
        if (i + 1) % every == 0 || i + 1 == cfg.train.steps {
            eprintln!("[{}] step {step} loss {:.5} grad {:.4}", stage.name(), r.loss, r.grad_norm);
        }
        losses.push(r.loss);
    }
    Ok(StageRun { params: trainer.params, opt: trainer.opt, losses, trace, resumed_from })
}

/// Trains one stage on a corpus and writes the checkpoint, optimizer state,
/// CSV loss trace and manifest to the output directory.
pub fn train(cfg: &TrainRunConfig) -> Result<TrainOutcome> {
    cfg.train.validate()?;
    if !cfg.corpus.is_dir() {
        return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("corpus directory {} not found", cfg.corpus.display()))));
    }
    let (_, items) = load_corpus(&cfg.corpus)?;
    let data_hash = directory_hash(&cfg.corpus)?;
    let result = match cfg.stage {
        Stage::Structure => {
            let net = StructureNet::new("ss", cfg.structure)?;
            let pairs = items.iter().map(TrainPair::structure).collect::<Result<Vec<_>>>()?;
            run_stage(&net, &pairs, cfg)?
        }
        Stage::Slat => {
            let net = SlatNet::new("slat", cfg.slat.clone())?;
            let pairs = items.iter().map(TrainPair::slat).collect::<Result<Vec<_>>>()?;
            run_stage(&net, &pairs, cfg)?
        }
    };
    let StageRun { params, opt, losses, trace, resumed_from } = result;
    let (initial, last) = smoothed_endpoints(&losses, cfg.smoothing_window).unwrap_or((f64::NAN, f64::NAN));
    fs::create_dir_all(&cfg.out)?;
    let stage = cfg.stage;
    params.save(&checkpoint_path(&cfg.out, stage))?;
    opt.to_store()?.save(&optimizer_path(&cfg.out, stage))?;
    fs::write(loss_path(&cfg.out, stage), format!("{CSV_HEADER}{trace}"))?;
    let mut metrics = BTreeMap::new();
    metrics.insert("steps".to_string(), opt.step() as f64);
    if !losses.is_empty() {
        metrics.insert("smoothed_loss_initial".to_string(), initial);
        metrics.insert("smoothed_loss_final".to_string(), last);
    }
    let manifest =
        RunManifest { stage, structure: cfg.structure, slat: cfg.slat.clone(), train: cfg.train, seed: cfg.train.seed, data_hash, resumed_from, metrics };
    manifest.save(&manifest_path(&cfg.out, stage))?;
    Ok(TrainOutcome { losses, initial, last, manifest })
}
