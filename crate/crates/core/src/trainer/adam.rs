use std::collections::BTreeMap;

use crate::denoiser::Model;
use crate::error::{dim_err, Result};
use crate::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<Real>>,
    pub v: BTreeMap<String, Vec<Real>>,
}

impl AdamState {
    /// Starts a new update: increments the step used for bias correction.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one Adam update to `param` in place. Call [`Self::begin_step`]
    /// once per optimizer step before updating any parameter.
    pub fn update(&mut self, name: &str, param: &mut [Real], grad: &[Real], lr: f64) -> Result<()> {
        if param.len() != grad.len() {
            return Err(dim_err!("{name}: param {} vs grad {}", param.len(), grad.len()));
        }
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        if m.len() != param.len() || v.len() != param.len() {
            return Err(dim_err!("{name}: moment length {} vs param {}", m.len(), param.len()));
        }
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for i in 0..param.len() {
            let g = grad[i] as f64;
            let mi = BETA1 * m[i] as f64 + (1.0 - BETA1) * g;
            let vi = BETA2 * v[i] as f64 + (1.0 - BETA2) * g * g;
            m[i] = mi as Real;
            v[i] = vi as Real;
            let step = lr * (mi / c1) / ((vi / c2).sqrt() + EPSILON);
            param[i] = (param[i] as f64 - step) as Real;
        }
        Ok(())
    }
}

/// Updates every trainable parameter of `model` from its accumulated
/// gradient. Parameters without a gradient are left untouched.
pub fn adam_update(model: &mut Model, state: &mut AdamState, lr: f64, grad_clip: Option<f64>) -> Result<()> {
    let names = model.trainable_names();
    let grads: Vec<(String, Vec<Real>)> = names
        .into_iter()
        .filter_map(|n| {
            let g = model.params()[&n].grad()?;
            Some((n, g))
        })
        .collect();
    let scale = match grad_clip {
        Some(max_norm) => {
            let norm = grads
                .iter()
                .flat_map(|(_, g)| g.iter())
                .map(|&x| (x as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.begin_step();
    for (name, mut g) in grads {
        if scale != 1.0 {
            g.iter_mut().for_each(|x| *x = (*x as f64 * scale) as Real);
        }
        let mut p = model.params()[&name].to_vec();
        state.update(&name, &mut p, &g, lr)?;
        model.set_param(&name, p)?;
    }
    Ok(())
}
