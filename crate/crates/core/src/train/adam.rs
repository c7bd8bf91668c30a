use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias-corrected moments, one moment pair per parameter key.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (key, p) in params.iter_mut() {
            let g = grads
                .get(key)
                .ok_or_else(|| Error::Contract(format!("no gradient for {key}")))?;
            if g.shape() != p.shape() {
                return Err(Error::Dimension(format!(
                    "gradient {:?} for {key} does not match {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m.entry(key.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(key.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *w -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}
