//! Dense, layer-norm and feed-forward layers with explicit backward passes.
//!
//! Every `forward` returns the output and a cache owning whatever the
//! matching `backward` needs; `backward` accumulates parameter gradients into
//! the store and returns the gradient w.r.t. the layer input.

use crate::error::{dim_err, Result};
use crate::nn::params::{Builder, ParamId, ParamStore};
use crate::tensor::{mm_acc, mm_nt_acc, mm_tn_acc, Tensor};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn new(b: &mut Builder<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = b.scope(name);
        let w = s.glorot("W", d_in, d_out);
        let bias = s.zeros("b", &[d_out]);
        Self { w, b: Some(bias), d_in, d_out }
    }

    pub fn no_bias(b: &mut Builder<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = b.scope(name);
        let w = s.glorot("W", d_in, d_out);
        Self { w, b: None, d_in, d_out }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w = ps.value(self.w);
        let b = self.b.map(|id| ps.value(id));
        dense(x, w, b)
    }

    /// Accumulates dW, db and returns dx.
    pub fn backward(&self, ps: &mut ParamStore, x: &Tensor, dy: &Tensor) -> Tensor {
        self.backward_params(ps, x, dy);
        self.backward_input(ps, dy)
    }

    /// `dx` only; parameter gradients are left untouched.
    pub fn backward_input(&self, ps: &ParamStore, dy: &Tensor) -> Tensor {
        let n = dy.rows();
        let mut dx = vec![0.0; n * self.d_in];
        mm_nt_acc(dy.data(), ps.value(self.w).data(), n, self.d_out, self.d_in, &mut dx);
        Tensor::matrix(n, self.d_in, dx)
    }

    /// Parameter gradients only (for layers whose input is not differentiable).
    pub fn backward_params(&self, ps: &mut ParamStore, x: &Tensor, dy: &Tensor) {
        let n = x.rows();
        mm_tn_acc(x.data(), dy.data(), n, self.d_in, self.d_out, ps.grad_mut(self.w).data_mut());
        if let Some(b) = self.b {
            let g = ps.grad_mut(b).data_mut();
            for i in 0..n {
                for (gj, d) in g.iter_mut().zip(dy.row(i)) {
                    *gj += d;
                }
            }
        }
    }
}

/// `x W + b` applied row-wise.
pub fn dense(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, d_in) = (x.rows(), x.cols());
    if w.shape().len() != 2 || w.rows() != d_in {
        return Err(dim_err("dense input vs weight", &[n, d_in], w.shape()));
    }
    let d_out = w.cols();
    let mut out = vec![0.0; n * d_out];
    if let Some(b) = b {
        if b.len() != d_out {
            return Err(dim_err("dense bias", b.shape(), &[d_out]));
        }
        for i in 0..n {
            out[i * d_out..(i + 1) * d_out].copy_from_slice(b.data());
        }
    }
    mm_acc(x.data(), w.data(), n, d_in, d_out, &mut out);
    Ok(Tensor::matrix(n, d_out, out))
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

pub struct NormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(b: &mut Builder<'_>, name: &str, d: usize) -> Self {
        let mut s = b.scope(name);
        let gamma = s.ones("gamma", &[d]);
        let beta = s.zeros("beta", &[d]);
        Self { gamma, beta, eps: Self::DEFAULT_EPS }
    }

    /// Forward without a cache.
    pub fn apply(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        layer_norm(x, ps.value(self.gamma).data(), ps.value(self.beta).data(), self.eps)
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> (Tensor, NormCache) {
        let (xhat, inv_std) = standardize(x, self.eps);
        let (g, b) = (ps.value(self.gamma).data(), ps.value(self.beta).data());
        let mut y = xhat.clone();
        for i in 0..y.rows() {
            for ((v, gj), bj) in y.row_mut(i).iter_mut().zip(g).zip(b) {
                *v = *v * gj + bj;
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, ps: &mut ParamStore, cache: &NormCache, dy: &Tensor) -> Tensor {
        let n = dy.rows();
        {
            let dg = ps.grad_mut(self.gamma).data_mut();
            for i in 0..n {
                for ((g, d), xh) in dg.iter_mut().zip(dy.row(i)).zip(cache.xhat.row(i)) {
                    *g += d * xh;
                }
            }
        }
        {
            let db = ps.grad_mut(self.beta).data_mut();
            for i in 0..n {
                for (g, d) in db.iter_mut().zip(dy.row(i)) {
                    *g += d;
                }
            }
        }
        let gamma = ps.value(self.gamma).data();
        let mut dxhat = dy.clone();
        for i in 0..n {
            for (v, g) in dxhat.row_mut(i).iter_mut().zip(gamma) {
                *v *= g;
            }
        }
        standardize_backward(cache, &dxhat)
    }
}

/// Functional layer norm for tests and oracles.
pub fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let (mut y, _) = standardize(x, eps);
    for i in 0..y.rows() {
        for ((v, g), b) in y.row_mut(i).iter_mut().zip(gamma).zip(beta) {
            *v = *v * g + b;
        }
    }
    y
}

/// Per-row zero-mean, unit-population-variance normalization.
pub fn standardize(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let d = x.cols() as f64;
    let mut y = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = y.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv.push(is);
    }
    (y, inv)
}

pub fn standardize_cache(xhat: Tensor, inv_std: Vec<f64>) -> NormCache {
    NormCache { xhat, inv_std }
}

pub fn standardize_backward(cache: &NormCache, dxhat: &Tensor) -> Tensor {
    let d = dxhat.cols() as f64;
    let mut dx = dxhat.clone();
    for i in 0..dx.rows() {
        let xh = cache.xhat.row(i);
        let g = dxhat.row(i);
        let mean_g = g.iter().sum::<f64>() / d;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        let is = cache.inv_std[i];
        for ((o, gj), xj) in dx.row_mut(i).iter_mut().zip(g).zip(xh) {
            *o = is * (gj - mean_g - xj * mean_gx);
        }
    }
    dx
}

/// Position-wise two-layer MLP with GELU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Dense,
    pub down: Dense,
}

pub struct FfnCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl FeedForward {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize, hidden: usize) -> Self {
        let mut s = b.scope(name);
        Self { up: Dense::new(&mut s, "up", d, hidden), down: Dense::new(&mut s, "down", hidden, d) }
    }

    pub fn infer(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.down.forward(ps, &self.up.forward(ps, x)?.map(gelu))
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<(Tensor, FfnCache)> {
        let pre = self.up.forward(ps, x)?;
        let act = pre.map(gelu);
        let y = self.down.forward(ps, &act)?;
        Ok((y, FfnCache { x: x.clone(), pre, act }))
    }

    pub fn backward(&self, ps: &mut ParamStore, c: &FfnCache, dy: &Tensor) -> Tensor {
        let mut da = self.down.backward(ps, &c.act, dy);
        for (g, p) in da.data_mut().iter_mut().zip(c.pre.data()) {
            *g *= gelu_grad(*p);
        }
        self.up.backward(ps, &c.x, &da)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_examples() {
        let x = Tensor::from_rows(&[&[1.0, 2.0]]);
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let zero_b = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(dense(&x, &eye, Some(&zero_b)).unwrap().data(), &[1.0, 2.0]);

        let zw = Tensor::zeros(&[2, 2]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(dense(&x, &zw, Some(&b)).unwrap().data(), &[3.0, 4.0]);

        // [1,2]·[[1,2],[3,4]] = [7,10], plus bias 1.
        let w = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let ones = Tensor::vector(vec![1.0, 1.0]);
        assert_eq!(dense(&x, &w, Some(&ones)).unwrap().data(), &[8.0, 11.0]);
    }

    #[test]
    fn dense_shape_error_names_both_shapes() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 2]);
        let msg = dense(&x, &w, None).unwrap_err().to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn layer_norm_examples() {
        let c = Tensor::from_rows(&[&[5.0, 5.0, 5.0]]);
        let y = layer_norm(&c, &[1.0; 3], &[0.0; 3], 1e-5);
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));

        let x = Tensor::from_rows(&[&[1.0, -1.0]]);
        let y = layer_norm(&x, &[1.0; 2], &[0.0; 2], 1e-5);
        assert!((y.at(0, 0) - 1.0).abs() < 1e-4 && (y.at(0, 1) + 1.0).abs() < 1e-4);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!(sigmoid(-20.0) < 1e-8 && sigmoid(20.0) > 1.0 - 1e-8);
    }
}
