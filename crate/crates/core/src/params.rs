//! Named parameter tensors and their per-step binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Parameters keyed by canonical dotted path, e.g. `t.attn.q.w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Tensor) {
        self.params.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Result<&Tensor> {
        self.params
            .get(key)
            .ok_or_else(|| Error::Contract(format!("missing parameter {key}")))
    }

    pub fn get_mut(&mut self, key: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(key)
            .ok_or_else(|| Error::Contract(format!("missing parameter {key}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Registers every parameter on `tape`, as trainable leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        self.bind_prefix(tape, "", trainable)
    }

    /// Like [`ParamStore::bind`], restricted to keys starting with `prefix`.
    pub fn bind_prefix<'t>(&self, tape: &'t Tape, prefix: &str, trainable: bool) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { tape, vars }
    }

    /// LeCun-normal weights `[fan_in, fan_out]` (variance `1/fan_in`) and zero bias.
    pub fn init_linear(&mut self, rng: &mut impl Rng, prefix: &str, fan_in: usize, fan_out: usize) {
        let std = (1.0 / fan_in as f64).sqrt();
        let w = Tensor::from_fn(&[fan_in, fan_out], |_| std * rng.sample::<f64, _>(StandardNormal));
        self.insert(format!("{prefix}.w"), w);
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn init_zero_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.insert(format!("{prefix}.w"), Tensor::zeros(&[fan_in, fan_out]));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }
}

/// A [`ParamStore`] registered on one tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, key: &str) -> Result<Var<'t>> {
        self.vars
            .get(key)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {key}")))
    }

    /// `(weight, bias)` of a linear layer stored under `prefix`.
    pub fn linear(&self, prefix: &str) -> Result<(Var<'t>, Var<'t>)> {
        Ok((self.get(&format!("{prefix}.w"))?, self.get(&format!("{prefix}.b"))?))
    }

    /// Gradients of every bound parameter, keyed like the store.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), grads.get(*v))).collect()
    }
}
