use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdadeltaConfig {
    pub rho: f32,
    pub eps: f32,
    pub lr: f32,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self {
            rho: 0.95,
            eps: 1e-6,
            lr: 1.0,
        }
    }
}

/// Adadelta: per-coordinate step sizes from running averages of squared
/// gradients and squared updates.
#[derive(Clone, Debug)]
pub struct Adadelta {
    config: AdadeltaConfig,
    sq_grad: Vec<Vec<f32>>,
    sq_delta: Vec<Vec<f32>>,
}

impl Adadelta {
    pub fn new(config: AdadeltaConfig, params: &Params) -> Self {
        let zeros = || params.tensors().iter().map(|t| alloc::vec![0.0; t.len()]).collect();
        Self {
            config,
            sq_grad: zeros(),
            sq_delta: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(alloc::format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let AdadeltaConfig { rho, eps, lr } = self.config;
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (eg, ed) = (&mut self.sq_grad[i], &mut self.sq_delta[i]);
            for (j, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                eg[j] = rho * eg[j] + (1.0 - rho) * gv * gv;
                let delta = -libm::sqrtf(ed[j] + eps) / libm::sqrtf(eg[j] + eps) * gv;
                ed[j] = rho * ed[j] + (1.0 - rho) * delta * delta;
                *w += lr * delta;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = Params::new();
        let id = params.add("w", Tensor::row(&[3.0, -2.0]));
        let mut opt = Adadelta::new(AdadeltaConfig { eps: 1e-4, ..Default::default() }, &params);
        for _ in 0..2000 {
            let g = params.get(id).map(|w| 2.0 * w);
            opt.step(&mut params, &[g]).unwrap();
        }
        assert!(params.get(id).data().iter().all(|w| w.abs() < 0.1), "{:?}", params.get(id));
    }
}
