//! Scaled dot-product attention over grouped row blocks.
//!
//! Queries and keys are stacked matrices. `Groups` says how rows split into
//! independent sequences: query group `g` attends only to key group
//! `g / (count / kv_count)`, so one layout covers per-example self-attention,
//! per-example cross-attention, and many query groups sharing one memory
//! (ensemble members reading the same context).

use crate::error::{dim_err, Error, Result};
use crate::nn::layers::Dense;
use crate::nn::params::{Builder, ParamStore};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Groups {
    pub count: usize,
    pub q_len: usize,
    pub kv_count: usize,
    pub kv_len: usize,
}

impl Groups {
    pub fn single(q_len: usize, kv_len: usize) -> Self {
        Self { count: 1, q_len, kv_count: 1, kv_len }
    }

    /// `count` independent sequences attending within themselves.
    pub fn selfattn(count: usize, len: usize) -> Self {
        Self { count, q_len: len, kv_count: count, kv_len: len }
    }

    fn kv_of(&self, g: usize) -> usize {
        g / (self.count / self.kv_count)
    }

    fn validate(&self, q_rows: usize, kv_rows: usize) -> Result<()> {
        if self.kv_len == 0 {
            return Err(Error::EmptyKeys);
        }
        if self.kv_count == 0 || self.count % self.kv_count != 0 {
            return Err(Error::Dimension(format!(
                "{} query groups cannot share {} key groups",
                self.count, self.kv_count
            )));
        }
        if q_rows != self.count * self.q_len || kv_rows != self.kv_count * self.kv_len {
            return Err(dim_err(
                "attention rows vs grouping",
                &[q_rows, kv_rows],
                &[self.count * self.q_len, self.kv_count * self.kv_len],
            ));
        }
        Ok(())
    }
}

/// Softmax weights, laid out `[group][head][q][k]`.
#[derive(Clone, Debug)]
pub struct AttnWeights {
    pub probs: Vec<f64>,
    pub groups: Groups,
    pub heads: usize,
}

impl AttnWeights {
    pub fn row(&self, g: usize, h: usize, i: usize) -> &[f64] {
        let l = self.groups.kv_len;
        let base = ((g * self.heads + h) * self.groups.q_len + i) * l;
        &self.probs[base..base + l]
    }
}

/// Multi-head attention without projections: columns of `q`, `k`, `v` split
/// evenly into `heads`; each head uses scale `1/sqrt(d_head)`.
pub fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    groups: Groups,
    heads: usize,
) -> Result<(Tensor, AttnWeights)> {
    groups.validate(q.rows(), k.rows())?;
    if k.rows() != v.rows() {
        return Err(dim_err("keys vs values", k.shape(), v.shape()));
    }
    let d = q.cols();
    if k.cols() != d || d == 0 || d % heads != 0 || v.cols() % heads != 0 {
        return Err(dim_err("query/key widths by heads", &[d, k.cols(), v.cols()], &[heads]));
    }
    let (dh, dvh) = (d / heads, v.cols() / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let (lq, lk) = (groups.q_len, groups.kv_len);
    let mut out = Tensor::zeros(&[q.rows(), v.cols()]);
    let mut probs = vec![0.0; groups.count * heads * lq * lk];
    let mut scores = vec![0.0; lk];
    for g in 0..groups.count {
        let kg = groups.kv_of(g);
        for h in 0..heads {
            for i in 0..lq {
                let qi = &q.row(g * lq + i)[h * dh..(h + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k.row(kg * lk + j)[h * dh..(h + 1) * dh];
                    *s = dot(qi, kj) * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let base = ((g * heads + h) * lq + i) * lk;
                let orow = &mut out.row_mut(g * lq + i)[h * dvh..(h + 1) * dvh];
                for (j, s) in scores.iter().enumerate() {
                    let p = s / z;
                    probs[base + j] = p;
                    let vj = &v.row(kg * lk + j)[h * dvh..(h + 1) * dvh];
                    for (o, vv) in orow.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    Ok((out, AttnWeights { probs, groups, heads }))
}

/// Single-head convenience form of [`attend`].
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if k.rows() == 0 {
        return Err(Error::EmptyKeys);
    }
    attend(q, k, v, Groups::single(q.rows(), k.rows()), 1).map(|(o, _)| o)
}

/// Gradients of [`attend`] w.r.t. `q`, `k`, `v`.
pub fn attend_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    w: &AttnWeights,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let groups = w.groups;
    let heads = w.heads;
    let (dh, dvh) = (q.cols() / heads, v.cols() / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let (lq, lk) = (groups.q_len, groups.kv_len);
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dp = vec![0.0; lk];
    for g in 0..groups.count {
        let kg = groups.kv_of(g);
        for h in 0..heads {
            for i in 0..lq {
                let p = w.row(g, h, i);
                let doi = &dout.row(g * lq + i)[h * dvh..(h + 1) * dvh];
                let mut pdp = 0.0;
                for j in 0..lk {
                    let vj = &v.row(kg * lk + j)[h * dvh..(h + 1) * dvh];
                    dp[j] = dot(doi, vj);
                    pdp += p[j] * dp[j];
                    let dvj = &mut dv.row_mut(kg * lk + j)[h * dvh..(h + 1) * dvh];
                    for (a, b) in dvj.iter_mut().zip(doi) {
                        *a += p[j] * b;
                    }
                }
                let qi: Vec<f64> = q.row(g * lq + i)[h * dh..(h + 1) * dh].to_vec();
                for j in 0..lk {
                    let ds = p[j] * (dp[j] - pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &k.row(kg * lk + j)[h * dh..(h + 1) * dh];
                    let dqi = &mut dq.row_mut(g * lq + i)[h * dh..(h + 1) * dh];
                    for (a, b) in dqi.iter_mut().zip(kj) {
                        *a += ds * b;
                    }
                    let dkj = &mut dk.row_mut(kg * lk + j)[h * dh..(h + 1) * dh];
                    for (a, b) in dkj.iter_mut().zip(&qi) {
                        *a += ds * b;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Projected multi-head attention: `softmax(QKᵀ/√d)V` then an output map.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Dense,
    pub wk: Dense,
    pub wv: Dense,
    pub wo: Dense,
    pub heads: usize,
}

pub struct MhaCache {
    xq: Tensor,
    xkv: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    ctx: Tensor,
    weights: AttnWeights,
}

impl MhaCache {
    pub fn weights(&self) -> &AttnWeights {
        &self.weights
    }
}

/// Precomputed key/value projections of a memory reused across calls.
#[derive(Clone, Debug)]
pub struct KvMemory {
    pub k: Tensor,
    pub v: Tensor,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize, heads: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            wq: Dense::no_bias(&mut s, "q", d, d),
            wk: Dense::no_bias(&mut s, "k", d, d),
            wv: Dense::no_bias(&mut s, "v", d, d),
            wo: Dense::new(&mut s, "o", d, d),
            heads,
        }
    }

    pub fn memory(&self, ps: &ParamStore, xkv: &Tensor) -> Result<KvMemory> {
        Ok(KvMemory { k: self.wk.forward(ps, xkv)?, v: self.wv.forward(ps, xkv)? })
    }

    /// Inference path with precomputed memory projections; no cache kept.
    pub fn forward_with_memory(
        &self,
        ps: &ParamStore,
        xq: &Tensor,
        mem: &KvMemory,
        groups: Groups,
    ) -> Result<Tensor> {
        let q = self.wq.forward(ps, xq)?;
        let (ctx, _) = attend(&q, &mem.k, &mem.v, groups, self.heads)?;
        self.wo.forward(ps, &ctx)
    }

    /// Forward without a cache.
    pub fn infer(&self, ps: &ParamStore, xq: &Tensor, xkv: &Tensor, groups: Groups) -> Result<Tensor> {
        self.forward_with_memory(ps, xq, &self.memory(ps, xkv)?, groups)
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        xq: &Tensor,
        xkv: &Tensor,
        groups: Groups,
    ) -> Result<(Tensor, MhaCache)> {
        let q = self.wq.forward(ps, xq)?;
        let k = self.wk.forward(ps, xkv)?;
        let v = self.wv.forward(ps, xkv)?;
        let (ctx, weights) = attend(&q, &k, &v, groups, self.heads)?;
        let y = self.wo.forward(ps, &ctx)?;
        let cache = MhaCache { xq: xq.clone(), xkv: xkv.clone(), q, k, v, ctx, weights };
        Ok((y, cache))
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(&self, ps: &mut ParamStore, c: &MhaCache, dy: &Tensor) -> (Tensor, Tensor) {
        let dctx = self.wo.backward(ps, &c.ctx, dy);
        let (dq, dk, dv) = attend_backward(&c.q, &c.k, &c.v, &c.weights, &dctx);
        let dxq = self.wq.backward(ps, &c.xq, &dq);
        let mut dxkv = self.wk.backward(ps, &c.xkv, &dk);
        dxkv.add_assign(&self.wv.backward(ps, &c.xkv, &dv));
        (dxq, dxkv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_returns_its_value() {
        let q = Tensor::from_rows(&[&[0.3, -2.0], &[5.0, 1.0]]);
        let k = Tensor::from_rows(&[&[1.0, 1.0]]);
        let v = Tensor::from_rows(&[&[3.0, 7.0]]);
        let out = attention(&q, &k, &v).unwrap();
        for i in 0..2 {
            assert!((out.at(i, 0) - 3.0).abs() < 1e-15 && (out.at(i, 1) - 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Tensor::from_rows(&[&[1.0, 2.0], &[-4.0, 0.5]]);
        let k = Tensor::from_rows(&[&[0.2, 0.9], &[0.2, 0.9]]);
        let v = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let out = attention(&q, &k, &v).unwrap();
        assert!(out.data().iter().all(|x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn scalar_softmax_oracle() {
        let q = Tensor::from_rows(&[&[10.0, 0.0]]);
        let k = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let out = attention(&q, &k, &v).unwrap();
        let a = 10.0 / 2f64.sqrt();
        let w0 = a.exp() / (a.exp() + 1.0);
        assert!((out.at(0, 0) - w0).abs() < 1e-15);
        assert!((out.at(0, 0) - 0.99915).abs() < 5e-6 && (out.at(0, 1) - 0.00085).abs() < 5e-6);
    }

    #[test]
    fn empty_keys_is_an_error() {
        let q = Tensor::zeros(&[1, 2]);
        let k = Tensor::zeros(&[0, 2]);
        assert!(matches!(attention(&q, &k, &k), Err(Error::EmptyKeys)));
    }

    #[test]
    fn shared_memory_matches_per_group_memory() {
        let mut rng = crate::rng::seeded(5);
        let q = Tensor::matrix(6, 4, crate::rng::normal_vec(&mut rng, 24));
        let k = Tensor::matrix(3, 4, crate::rng::normal_vec(&mut rng, 12));
        let v = Tensor::matrix(3, 4, crate::rng::normal_vec(&mut rng, 12));
        let shared = Groups { count: 2, q_len: 3, kv_count: 1, kv_len: 3 };
        let (a, _) = attend(&q, &k, &v, shared, 2).unwrap();
        let k2 = Tensor::concat_rows(&[&k, &k]);
        let v2 = Tensor::concat_rows(&[&v, &v]);
        let (b, _) = attend(&q, &k2, &v2, Groups::selfattn(2, 3), 2).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }
}
