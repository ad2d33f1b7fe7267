use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { alpha: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam with per-parameter moment arrays. Moments start at
/// zero on a parameter's first update.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, t: 0, moments: BTreeMap::new() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// Moment arrays in path order, for checkpointing.
    pub fn moment_entries(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.moments
            .iter()
            .map(|(path, (m, v))| (path.as_str(), m.as_slice(), v.as_slice()))
    }

    pub fn restore(
        cfg: AdamConfig,
        t: u64,
        moments: Vec<(String, Vec<f64>, Vec<f64>)>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (path, m, v) in moments {
            if m.len() != v.len() {
                return Err(Error::Contract(format!(
                    "optimizer moments for {path} disagree in length"
                )));
            }
            map.insert(path, (m, v));
        }
        Ok(Self { cfg, t, moments: map })
    }

    /// One update over every gradient entry. Gradients must be finite; a
    /// non-finite gradient aborts and names the parameter.
    pub fn step(
        &mut self,
        params: &mut Parameters,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (path, g) in grads {
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient on parameter {path}"
                )));
            }
        }
        self.t += 1;
        let AdamConfig { alpha, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (path, g) in grads {
            let p = params.get_mut(path)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter {path} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = self
                .moments
                .entry(path.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let data = p.data_mut();
            for ((x, gi), (mi, vi)) in
                data.iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= alpha * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over all gradient entries together.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients so the global norm does not exceed `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
