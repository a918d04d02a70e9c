use serde::{Deserialize, Serialize};

use super::{FeedForwardNet, Gradients};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    beta1: T,
    beta2: T,
    eps: T,
    step: i32,
    m: Gradients<T>,
    v: Gradients<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, beta1: f64, beta2: f64, net: &FeedForwardNet<T>) -> Self {
        Self {
            kind,
            beta1: T::lit(beta1),
            beta2: T::lit(beta2),
            eps: T::lit(1e-8),
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    /// Applies one update with learning rate `lr`.
    pub fn step(&mut self, net: &mut FeedForwardNet<T>, grads: &Gradients<T>, lr: T) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let mut update = grads.clone();
                update.scale(lr);
                net.apply_update(&update);
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                let c1 = T::one() - b1.powi(self.step);
                let c2 = T::one() - b2.powi(self.step);
                let mut update = grads.clone();
                for (((u, g), m), v) in update
                    .layers
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(&mut self.m.layers)
                    .zip(&mut self.v.layers)
                {
                    adam_block(u.weight.as_slice_mut(), g.weight.as_slice(), m.weight.as_slice_mut(), v.weight.as_slice_mut(), b1, b2, c1, c2, eps, lr);
                    adam_block(u.bias.as_slice_mut(), g.bias.as_slice(), m.bias.as_slice_mut(), v.bias.as_slice_mut(), b1, b2, c1, c2, eps, lr);
                }
                net.apply_update(&update);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn adam_block<T: Scalar>(
    update: Option<&mut [T]>,
    grad: Option<&[T]>,
    m: Option<&mut [T]>,
    v: Option<&mut [T]>,
    b1: T,
    b2: T,
    c1: T,
    c2: T,
    eps: T,
    lr: T,
) {
    let (update, grad, m, v) = (
        update.expect("contiguous"),
        grad.expect("contiguous"),
        m.expect("contiguous"),
        v.expect("contiguous"),
    );
    for i in 0..grad.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        update[i] = lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: T) -> T {
    let norm = grads.norm();
    if norm > max_norm && norm > T::zero() {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, OutputHead};

    #[test]
    fn clipping_caps_the_global_norm() {
        let net = FeedForwardNet::<f64>::zeros(&[2, 2], Activation::Silu, OutputHead::Linear).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weight.fill(3.0);
        g.layers[0].bias.fill(4.0);
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - (4.0 * 9.0 + 2.0 * 16.0f64).sqrt()).abs() < 1e-12);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut net = FeedForwardNet::<f64>::zeros(&[1, 1], Activation::Silu, OutputHead::Linear).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weight.fill(0.3);
        g.layers[0].bias.fill(-2.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.9, 0.999, &net);
        opt.step(&mut net, &g, 0.01);
        assert!((net.layers()[0].weight[[0, 0]] + 0.01).abs() < 1e-6);
        assert!((net.layers()[0].bias[0] - 0.01).abs() < 1e-6);
    }
}
