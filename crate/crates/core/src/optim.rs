use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Classical (heavy-ball) momentum SGD:
/// `v <- momentum * v + g`, `p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub const DEFAULT_LR: f64 = 0.02;
    pub const DEFAULT_MOMENTUM: f64 = 0.8;

    /// Zero velocity shaped like `params`.
    pub fn new(learning_rate: f64, momentum: f64, params: &[Tensor]) -> Self {
        SgdMomentum {
            learning_rate,
            momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "sgd_momentum_step",
                &[params.len(), self.velocity.len()],
                &[grads.len()],
            ));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::shape("sgd_momentum_step", p.shape(), g.shape()));
            }
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pp, &gg), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gg;
                *pp -= lr * *vv;
            }
        }
        Ok(())
    }
}
