use rand::Rng;

use super::uniform;
use crate::error::Result;
use crate::tensor::{Graph, ParamKind, ParamStore, Real, Tensor, Var};

/// Fully connected layer `y = x·Wᵀ + b` with `W: out×in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub prefix: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Linear { prefix: prefix.into(), in_features, out_features }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    /// Uniform `±1/sqrt(in)` weights, zero bias.
    pub fn init<S: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) {
        let bound = 1.0 / (self.in_features as f64).sqrt();
        store.insert(
            self.weight_name(),
            uniform(&[self.out_features, self.in_features], bound, rng),
            ParamKind::Weight,
        );
        store.insert(self.bias_name(), Tensor::zeros([self.out_features]), ParamKind::Bias);
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        g.linear(x, w, Some(b))
    }
}
