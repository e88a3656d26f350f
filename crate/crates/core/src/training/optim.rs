use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total {
        return Err(Error::Contract(format!("lr step {step} beyond schedule length {total}")));
    }
    if total == 0 {
        return Ok(lr_max);
    }
    let c = (std::f64::consts::PI * step as f64 / total as f64).cos();
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + c))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(ps: &ParamStore) -> Self {
        let zeros = || ps.leaves().iter().map(|l| vec![0.0; l.value.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, ps: &mut ParamStore, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((leaf, m), v) in ps.leaves_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = leaf.grad.data();
            let mut upd = vec![0.0; g.len()];
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                upd[i] = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            for (p, u) in leaf.value.data_mut().iter_mut().zip(upd) {
                *p -= u;
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(ps: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = ps.grad_norm();
    if norm > max_norm {
        ps.scale_grads(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 0.0).unwrap(), 1e-4);
        assert!((cosine_lr(100, 100, 1e-4, 1e-6).unwrap() - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-4, 0.0).unwrap() - 0.5e-4).abs() < 1e-18);
        assert!(cosine_lr(101, 100, 1e-4, 0.0).is_err());
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", Tensor::vector(vec![1.5]));
        let mut opt = Adam::new(&ps);
        // reference: minimize (x − 0.3)² with a literal transcription
        let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g = 2.0 * (x - 0.3);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);

            ps.zero_grad();
            let cur = ps.value(id).data()[0];
            ps.grad_mut(id).data_mut()[0] = 2.0 * (cur - 0.3);
            opt.step(&mut ps, 0.01);
            assert!((ps.value(id).data()[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", Tensor::vector(vec![0.0, 0.0]));
        ps.grad_mut(a).data_mut().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut ps, 1.0), 5.0);
        assert!((ps.grad_norm() - 1.0).abs() < 1e-15);
    }
}
