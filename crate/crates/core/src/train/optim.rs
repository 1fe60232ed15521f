use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub updates: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            updates: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// Clamps every gradient element to `[-threshold, threshold]`.
pub fn clip_gradients<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, threshold: f64) {
    let t = T::from_f64(threshold);
    let lo = T::from_f64(-threshold);
    for g in grads.values_mut() {
        for x in g.data_mut() {
            if *x > t {
                *x = t;
            } else if *x < lo {
                *x = lo;
            }
        }
    }
}

/// One bias-corrected Adam step over `params`, each paired with its
/// gradient by name. Nothing is modified if any gradient is NaN.
pub fn adam_update<'a, T: Scalar + 'a>(
    state: &mut AdamState,
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    grads: &BTreeMap<String, Tensor<T>>,
    lr: f64,
) -> Result<()> {
    let update = state.updates + 1;
    if let Some((name, _)) = grads
        .iter()
        .find(|(_, g)| g.data().iter().any(|x| x.to_f64().is_nan()))
    {
        return Err(Error::NanGradient {
            name: name.clone(),
            update,
        });
    }
    state.updates = update;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(update as i32);
    let c2 = 1.0 - beta2.powi(update as i32);
    for (name, p) in params {
        let Some(g) = grads.get(name) else { continue };
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.len()]);
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gi = gi.to_f64();
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let step = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            *w = T::from_f64(w.to_f64() - step);
        }
    }
    Ok(())
}
