use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 25, cfg_scale: 3.0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.cfg_scale >= 0.0) || !self.cfg_scale.is_finite() {
            return Err(Error::Config(format!("cfg scale {} must be finite and non-negative", self.cfg_scale)));
        }
        Ok(())
    }
}

/// A learned velocity `v(x, t)`. `cond = None` asks for the unconditional
/// prediction.
pub trait VelocityField {
    type Cond;

    fn velocity(&self, x: &Tensor, t: f64, cond: Option<&Self::Cond>) -> Result<Tensor>;

    /// `(conditional, unconditional)`; override to share work between the two.
    fn velocity_pair(&self, x: &Tensor, t: f64, cond: &Self::Cond) -> Result<(Tensor, Tensor)> {
        Ok((self.velocity(x, t, Some(cond))?, self.velocity(x, t, None)?))
    }
}

/// `v_u + s·(v_c − v_u)`.
pub fn guided_velocity(v_cond: &Tensor, v_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(shape_err!("guidance: {:?} vs {:?}", v_cond.shape(), v_uncond.shape()));
    }
    Tensor::new(v_cond.shape(), v_cond.data().iter().zip(v_uncond.data()).map(|(c, u)| u + scale * (c - u)).collect())
}

/// Integrates from `t = 1` to `t = 0` with uniform Euler steps
/// `x ← x − Δt·v_g`. Scales 0 and 1 evaluate a single branch.
pub fn euler_sample_cfg<M: VelocityField>(model: &M, cond: &M::Cond, cfg: &SamplerConfig, eps_init: &Tensor) -> Result<Tensor> {
    cfg.validate()?;
    let dt = 1.0 / cfg.steps as f64;
    let mut x = eps_init.clone();
    for k in 0..cfg.steps {
        let t = 1.0 - k as f64 * dt;
        let s = cfg.cfg_scale;
        let v = if s == 1.0 {
            model.velocity(&x, t, Some(cond))?
        } else if s == 0.0 {
            model.velocity(&x, t, None)?
        } else {
            let (c, u) = model.velocity_pair(&x, t, cond)?;
            guided_velocity(&c, &u, s)?
        };
        if v.shape() != x.shape() {
            return Err(shape_err!("model velocity {:?} for state {:?}", v.shape(), x.shape()));
        }
        x.data_mut().iter_mut().zip(v.data()).for_each(|(a, b)| *a -= dt * b);
    }
    Ok(x)
}
