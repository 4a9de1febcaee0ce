use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::numcore::Tensor;

/// Logit-normal location for the structure stage.
pub const MU_STRUCTURE: f64 = 0.0;
/// Logit-normal location for the sparse latent stage.
pub const MU_SPARSE: f64 = 1.0;

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn logit(t: f64) -> f64 {
    (t / (1.0 - t)).ln()
}

/// `t = logistic(z)` with `z ~ Normal(mu, sigma)`, kept strictly inside (0, 1).
pub fn sample_t_logit_normal(mu: f64, sigma: f64, rng: &mut impl Rng) -> Result<f64> {
    if !(sigma > 0.0) || !mu.is_finite() || !sigma.is_finite() {
        return Err(Error::Domain(format!("logit-normal needs finite mu and sigma > 0, got ({mu}, {sigma})")));
    }
    let z = Normal::new(mu, sigma).map_err(|e| Error::Domain(e.to_string()))?.sample(rng);
    Ok(logistic(z).clamp(f64::EPSILON, 1.0 - f64::EPSILON))
}

/// `(1 − t)·x₀ + t·ε`.
pub fn interpolate(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    if x0.shape() != eps.shape() {
        return Err(shape_err!("interpolate: x0 {:?} and eps {:?}", x0.shape(), eps.shape()));
    }
    let data = x0.data().iter().zip(eps.data()).map(|(a, e)| (1.0 - t) * a + t * e).collect();
    Tensor::new(x0.shape(), data)
}
