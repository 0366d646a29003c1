use std::collections::BTreeMap;

use crate::error::{shape_err, Result};
use crate::graph::Gradients;
use crate::params::ParamSet;

/// SGD with heavy-ball momentum and L2 weight decay:
///
/// ```text
/// g ← grad + weight_decay·p
/// v ← momentum·v + g
/// p ← p − lr·v
/// ```
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every parameter that has an entry in `grads`; others are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            if p.shape() != g.shape() {
                return Err(shape_err(
                    "sgd_step",
                    format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            if v.len() != g.len() {
                return Err(shape_err(
                    "sgd_step",
                    format!("{name}: velocity length {} vs {}", v.len(), g.len()),
                ));
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + d;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}
