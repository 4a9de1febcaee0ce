//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is zero are judged by absolute error.
    pub floor: f64,
    /// Check at most this many coordinates per parameter (sampled), or all.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, floor: 1e-6, coords_per_param: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

fn eval<F>(loss_fn: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    let v = g.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::Numerical(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Worst relative error between reverse-mode and central-difference gradients
/// over every coordinate of `params`.
pub fn grad_check<F>(params: &ParamStore, h: f64, loss_fn: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_with(params, GradCheckOptions { h, ..Default::default() }, loss_fn).map(|r| r.max_rel_error)
}

pub fn grad_check_with<F>(params: &ParamStore, opts: GradCheckOptions, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    let grads = g.backward(loss)?;
    let analytic = g.param_grads(&grads);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst: None, checked: 0 };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.len());
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_iter().collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            let orig = work.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + opts.h;
            let fp = eval(&loss_fn, &work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - opts.h;
            let fm = eval(&loss_fn, &work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * opts.h);
            let abs = (a - num).abs();
            let rel = abs / a.abs().max(num.abs()).max(opts.floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
