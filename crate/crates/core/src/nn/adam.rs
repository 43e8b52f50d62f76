use super::network::Network;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplicative learning-rate decay applied every `decay_interval` steps.
    pub decay: f64,
    pub decay_interval: u64,
    pub lr_floor: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.925,
            decay_interval: 215,
            lr_floor: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    /// Learning rate in effect after `step` completed updates.
    pub fn lr_at(&self, step: u64) -> f64 {
        let periods = step / self.decay_interval.max(1);
        (self.lr * self.decay.powf(periods as f64)).max(self.lr_floor)
    }
}

pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub(crate) m: Vec<Tensor<T>>,
    pub(crate) v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn set_moments(&mut self, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Shape("first and second moments disagree".into()));
        }
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One bias-corrected Adam update over the parameters of `nets`, in order.
    /// Moments are allocated on the first call.
    pub fn step(&mut self, nets: &mut [&mut Network<T>]) -> Result<()> {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        let (lr, eps, wd) = (T::from_f64(lr), T::from_f64(c.eps), T::from_f64(c.weight_decay));
        let one = T::one();

        let fresh = self.m.is_empty();
        let mut slot = 0;
        for net in nets.iter_mut() {
            for (p, g) in net.param_grad_pairs() {
                if fresh {
                    self.m.push(Tensor::zeros(p.shape()));
                    self.v.push(Tensor::zeros(p.shape()));
                }
                let (m, v) = match (self.m.get_mut(slot), self.v.get_mut(slot)) {
                    (Some(m), Some(v)) if m.shape() == p.shape() => (m, v),
                    _ => return Err(Error::Shape(format!("optimizer state does not match parameter {slot}"))),
                };
                for (((pv, &gv), mv), vv) in
                    p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
                {
                    let gd = gv + wd * *pv;
                    *mv = b1 * *mv + (one - b1) * gd;
                    *vv = b2 * *vv + (one - b2) * gd * gd;
                    *pv = *pv - lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
                }
                slot += 1;
            }
        }
        if slot != self.m.len() {
            return Err(Error::Shape(format!("optimizer holds {} moments for {slot} parameters", self.m.len())));
        }
        Ok(())
    }
}
