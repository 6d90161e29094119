//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment state is keyed by parameter name and created on first update.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    steps: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, steps: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update to every parameter named in `grads`.
    pub fn step<'a>(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
    ) -> Result<()> {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (c.lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = c.eps as f32;
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("optimizer got gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::invalid(format!("gradient shape {:?} for parameter {name} {:?}", g.shape(), p.shape())));
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamStore::default();
        p.insert("w", Tensor::new([3], vec![1.0, -2.0, 0.5]));
        let g = Tensor::new([3], vec![0.3, -4.0, 0.0]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, [("w", &g)]).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-6);
        assert!((w[1] - (-2.0 + 1e-3)).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::default();
        p.insert("x", Tensor::new([2], vec![3.0, -1.0]));
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..2000 {
            let x = p.get("x").unwrap().data().to_vec();
            let g = Tensor::new([2], vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] + 2.0)]);
            opt.step(&mut p, [("x", &g)]).unwrap();
        }
        let x = p.get("x").unwrap().data();
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 2.0).abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn unknown_parameter_is_an_error() {
        let mut p = ParamStore::default();
        let g = Tensor::new([1], vec![1.0]);
        assert!(Adam::new(AdamConfig::default()).step(&mut p, [("nope", &g)]).is_err());
    }
}
