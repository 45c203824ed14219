use std::collections::BTreeMap;

use super::{ParamStore, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// One decoupled-weight-decay Adam update of a flat parameter slice.
///
/// `step` is 1-based and drives bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    weight_decay: f64,
    betas: (f64, f64),
    eps: f64,
    step: u64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *p *= 1.0 - lr * weight_decay;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// AdamW with per-parameter moment buffers keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored on `params`, then clears them.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        self.step += 1;
        let cfg = self.config;
        for (name, t) in params.iter_mut() {
            let Some(grad) = t.grad.take() else { continue };
            let n = t.numel();
            let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(TensorError::Contract(format!("optimizer state shape mismatch for {name}")));
            }
            adamw_step(t.data_mut(), &grad, m, v, cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps, self.step);
            if t.data().iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite { op: "adamw_step" });
            }
        }
        Ok(())
    }
}
