use serde::{Deserialize, Serialize};

use super::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `p -= lr * wd * p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter slot in
/// registration order.
#[derive(Clone, Debug)]
pub struct Adam<T: Float = f32> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Float> Adam<T> {
    pub fn new(cfg: AdamConfig, shapes: &[&[usize]]) -> Self {
        let zeros = || {
            shapes
                .iter()
                .map(|s| vec![0.0; s.iter().product()])
                .collect::<Vec<_>>()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim("optimizer slots", self.m.len(), params.len()));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::dim(format!("gradient slot {slot}"), p.len(), g.len()));
            }
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv.as_f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gv;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gv * gv;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let x = pv.as_f64();
                let next = x - c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * x);
                *pv = T::of(next);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = Tensor::<f64>::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::<f64>::new(vec![2], vec![0.5, -3.0]).unwrap();
        let mut opt = Adam::new(cfg, &[p.shape()]);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.data()[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn decay_shrinks_without_gradient() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut p = Tensor::<f64>::new(vec![1], vec![2.0]).unwrap();
        let g = Tensor::<f64>::zeros(&[1]);
        let mut opt = Adam::new(cfg, &[p.shape()]);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] - 1.9).abs() < 1e-12);
    }
}
