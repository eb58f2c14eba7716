use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::layers::lit;
use super::{Network, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers mirror the network layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Network<T>,
    v: Network<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(net: &Network<T>, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: net.zeros_like(),
            v: net.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Network<T>, grads: &Network<T>) {
        self.step += 1;
        let c = self.cfg;
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let bc1 = lit::<T>(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = lit::<T>(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (lit::<T>(c.learning_rate), lit::<T>(c.eps));
        let one = T::one();
        let g = grads.trainable();
        for ((((_, mut p), (_, gt)), (_, mut m)), (_, mut v)) in params
            .trainable_mut()
            .into_iter()
            .zip(g)
            .zip(self.m.trainable_mut())
            .zip(self.v.trainable_mut())
        {
            Zip::from(&mut p)
                .and(&gt)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}
