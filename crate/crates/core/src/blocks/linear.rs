use rand::Rng;

use crate::error::Result;
use crate::numcore::{Graph, InitRule, ParamStore, Var};

/// Affine map `x·W + b` with parameters `{name}.w` (`[din, dout]`) and
/// optionally `{name}.b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize, bias: bool) -> Self {
        Self { name: name.into(), din, dout, bias }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    /// Registers the weight under `rule`; the bias always starts at zero.
    pub fn init(&self, store: &mut ParamStore, rule: InitRule, rng: &mut impl Rng) -> Result<()> {
        store.init(&self.weight_name(), &[self.din, self.dout], rule, rng)?;
        if self.bias {
            store.init(&self.bias_name(), &[self.dout], InitRule::Zero, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, st: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(st, &self.weight_name())?;
        let b = if self.bias { Some(g.param(st, &self.bias_name())?) } else { None };
        g.linear(x, w, b)
    }
}
