//! AdamW with decoupled weight decay and history-based gradient clipping.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::params::{InitRule, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Clip threshold `min(cap, factor × median(last window pre-clip norms))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub cap: f64,
    pub factor: f64,
    pub window: usize,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { cap: 2.0, factor: 3.0, window: 32 }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter AdamW moments plus the clipping norm history.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub clip: ClipConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
    history: VecDeque<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipReport {
    pub pre_norm: f64,
    pub threshold: f64,
    pub scale: f64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, clip: ClipConfig) -> Self {
        Self { config, clip, step: 0, moments: BTreeMap::new(), history: VecDeque::new() }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn norm_history(&self) -> impl Iterator<Item = f64> + '_ {
        self.history.iter().copied()
    }

    /// Moments, step count and norm history as a parameter store
    /// (`m.<name>`, `v.<name>`, `step`, `history`), for checkpointing.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut st = ParamStore::new();
        st.insert("step", Tensor::new(&[1], vec![self.step as f64])?, InitRule::Zero)?;
        let h: Vec<f64> = self.history.iter().copied().collect();
        st.insert("history", Tensor::new(&[h.len()], h)?, InitRule::Zero)?;
        for (name, mo) in &self.moments {
            st.insert(&format!("m.{name}"), Tensor::new(&[mo.m.len()], mo.m.clone())?, InitRule::Zero)?;
            st.insert(&format!("v.{name}"), Tensor::new(&[mo.v.len()], mo.v.clone())?, InitRule::Zero)?;
        }
        Ok(st)
    }

    /// Inverse of [`OptimizerState::to_store`].
    pub fn from_store(config: AdamWConfig, clip: ClipConfig, st: &ParamStore) -> Result<Self> {
        let field = |n: &str| st.get(n).ok_or_else(|| Error::Format(format!("optimizer state lacks `{n}`")));
        let step = field("step")?.data().first().copied().unwrap_or(0.0);
        if !(step >= 0.0) || step.fract() != 0.0 {
            return Err(Error::Format(format!("optimizer step {step}")));
        }
        let history = field("history")?.data().iter().copied().collect();
        let mut moments = BTreeMap::new();
        for (name, m) in st.iter() {
            if let Some(param) = name.strip_prefix("m.") {
                let v = field(&format!("v.{param}"))?;
                if v.len() != m.len() {
                    return Err(Error::Format(format!("moment lengths differ for `{param}`")));
                }
                moments.insert(param.to_string(), Moments { m: m.data().to_vec(), v: v.data().to_vec() });
            }
        }
        Ok(Self { config, clip, step: step as u64, moments, history })
    }

    /// Current clip threshold given the recorded history.
    pub fn clip_threshold(&self) -> f64 {
        if self.history.is_empty() {
            return self.clip.cap;
        }
        let mut h: Vec<f64> = self.history.iter().copied().collect();
        h.sort_by(f64::total_cmp);
        let n = h.len();
        let median = if n % 2 == 1 { h[n / 2] } else { 0.5 * (h[n / 2 - 1] + h[n / 2]) };
        let adaptive = self.clip.factor * median;
        // A zero median (e.g. all-zero gradients so far) would freeze training.
        if adaptive > 0.0 {
            adaptive.min(self.clip.cap)
        } else {
            self.clip.cap
        }
    }

    /// Scales `grads` so their global norm does not exceed the threshold, then
    /// records the pre-clip norm.
    pub fn adaptive_clip(&mut self, grads: &mut GradMap) -> ClipReport {
        let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
        let threshold = self.clip_threshold();
        let scale = if norm > threshold && norm > 0.0 { threshold / norm } else { 1.0 };
        if scale != 1.0 {
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
        }
        self.history.push_back(norm);
        while self.history.len() > self.clip.window.max(1) {
            self.history.pop_front();
        }
        ClipReport { pre_norm: norm, threshold, scale }
    }

    /// One AdamW update. Every parameter in `params` needs a gradient.
    pub fn adamw_step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<()> {
        for (name, p) in params.iter() {
            match grads.get(name) {
                None => return Err(Error::Training(format!("missing gradient for `{name}`"))),
                Some(g) if g.shape() != p.shape() => return Err(Error::Training(format!("gradient shape {:?} for `{name}` {:?}", g.shape(), p.shape()))),
                Some(g) if !g.is_finite() => return Err(Error::Training(format!("non-finite gradient for `{name}`"))),
                _ => {}
            }
        }
        self.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let mo = self.moments.entry(name.to_string()).or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()] });
            for (((theta, &gi), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut mo.m).zip(&mut mo.v) {
                *theta -= lr * weight_decay * *theta;
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *theta -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
