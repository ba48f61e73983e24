use serde::{Deserialize, Serialize};

use super::{Gradients, Network};
use crate::{Error, Result};

/// SGD with classical momentum and coupled weight decay:
///
/// ```text
/// buffer <- momentum * buffer + grad + weight_decay * param
/// param  <- param - lr * buffer
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(skip)]
    buffers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Sgd {
    pub fn new(net: &Network, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        let buffers = net.layers().iter().map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()])).collect();
        Ok(Sgd { lr, momentum, weight_decay, buffers })
    }

    /// Refuses the step (leaving both `net` and the buffers untouched) when
    /// any gradient is non-finite.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if !grads.matches(net) || self.buffers.len() != grads.layers.len() {
            return Err(Error::Shape("gradient shapes do not match the network".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient, step refused".into()));
        }
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        for ((layer, g), (bw, bb)) in net.layers_mut().iter_mut().zip(&grads.layers).zip(&mut self.buffers) {
            update(&mut layer.weights, &g.weights, bw, lr, mu, wd);
            update(&mut layer.bias, &g.bias, bb, lr, mu, wd);
        }
        Ok(())
    }

    pub fn buffer_shapes(&self) -> Vec<(usize, usize)> {
        self.buffers.iter().map(|(w, b)| (w.len(), b.len())).collect()
    }
}

fn update(params: &mut [f64], grads: &[f64], buf: &mut [f64], lr: f64, mu: f64, wd: f64) {
    for ((p, g), b) in params.iter_mut().zip(grads).zip(buf.iter_mut()) {
        *b = mu * *b + g + wd * *p;
        *p -= lr * *b;
    }
}
