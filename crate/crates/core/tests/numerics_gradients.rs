//! Analytic backward passes vs central differences over random shapes.

use physdiff::nn::gradcheck::{all_coords, gradient_check, DEFAULT_EPS};
use physdiff::nn::{attend, attend_backward, Builder, Dense, FeedForward, Groups, GruCell, LayerNorm, MultiHeadAttention, ParamId, ParamStore};
use physdiff::rng::{normal_vec, seeded, Prng};
use physdiff::Tensor;
use rand::Rng;

const TOL: f64 = 1e-4;
const CASES: u64 = 100;

fn randn(rng: &mut Prng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, normal_vec(rng, r * c))
}

/// Weighted-sum readout `Σ y ⊙ R` so `dL/dy = R`.
fn readout(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn set_grad(ps: &mut ParamStore, id: ParamId, g: &Tensor) {
    ps.grad_mut(id).data_mut().copy_from_slice(g.data());
}

#[test]
fn dense_gradients() {
    for seed in 0..CASES {
        let mut rng = seeded(seed);
        let (n, din, dout) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
        let mut ps = ParamStore::new();
        let layer = Dense::new(&mut Builder::new(&mut ps, &mut rng.clone()), "d", din, dout);
        let x = ps.add("x", randn(&mut rng, n, din));
        let r = randn(&mut rng, n, dout);
        let xin = ps.value(x).clone();
        let dx = layer.backward(&mut ps, &xin, &r);
        set_grad(&mut ps, x, &dx);
        let coords = all_coords(&ps);
        let rep = gradient_check(&mut ps, &coords, DEFAULT_EPS, |p| {
            Ok(readout(&layer.forward(p, p.value(x))?, &r))
        })
        .unwrap();
        assert!(rep.max_rel_err < TOL, "seed {seed}: {rep:?}");
    }
}

#[test]
fn grouped_multihead_attention_gradients() {
    for seed in 0..CASES {
        let mut rng = seeded(1000 + seed);
        let heads = rng.random_range(1..3);
        let dh = rng.random_range(1..4);
        let d = heads * dh;
        let count = rng.random_range(1..4);
        let kv_count = if rng.random_bool(0.5) { 1 } else { count };
        let groups = Groups { count, q_len: rng.random_range(1..4), kv_count, kv_len: rng.random_range(1..4) };
        let mut ps = ParamStore::new();
        let q = ps.add("q", randn(&mut rng, count * groups.q_len, d));
        let k = ps.add("k", randn(&mut rng, kv_count * groups.kv_len, d));
        let v = ps.add("v", randn(&mut rng, kv_count * groups.kv_len, d));
        let (out, w) = attend(ps.value(q), ps.value(k), ps.value(v), groups, heads).unwrap();
        let r = randn(&mut rng, out.rows(), out.cols());
        let (dq, dk, dv) = attend_backward(ps.value(q), ps.value(k), ps.value(v), &w, &r);
        set_grad(&mut ps, q, &dq);
        set_grad(&mut ps, k, &dk);
        set_grad(&mut ps, v, &dv);
        let coords = all_coords(&ps);
        let rep = gradient_check(&mut ps, &coords, DEFAULT_EPS, |p| {
            let (o, _) = attend(p.value(q), p.value(k), p.value(v), groups, heads)?;
            Ok(readout(&o, &r))
        })
        .unwrap();
        assert!(rep.max_rel_err < TOL, "seed {seed}: {rep:?}");
    }
}

#[test]
fn projected_attention_gradients() {
    for seed in 0..CASES {
        let mut rng = seeded(2000 + seed);
        let heads = rng.random_range(1..3);
        let d = heads * rng.random_range(1..4);
        let (nq, nk) = (rng.random_range(1..4), rng.random_range(1..5));
        let mut ps = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut Builder::new(&mut ps, &mut rng.clone()), "mha", d, heads);
        let xq = ps.add("xq", randn(&mut rng, nq, d));
        let xkv = ps.add("xkv", randn(&mut rng, nk, d));
        let g = Groups::single(nq, nk);
        let (y, cache) = mha.forward(&ps, ps.value(xq), ps.value(xkv), g).unwrap();
        let r = randn(&mut rng, y.rows(), y.cols());
        let (dxq, dxkv) = mha.backward(&mut ps, &cache, &r);
        set_grad(&mut ps, xq, &dxq);
        set_grad(&mut ps, xkv, &dxkv);
        let coords = all_coords(&ps);
        let rep = gradient_check(&mut ps, &coords, DEFAULT_EPS, |p| {
            Ok(readout(&mha.forward(p, p.value(xq), p.value(xkv), g)?.0, &r))
        })
        .unwrap();
        assert!(rep.max_rel_err < TOL, "seed {seed}: {rep:?}");
    }
}

#[test]
fn layer_norm_gradients() {
    for seed in 0..CASES {
        let mut rng = seeded(3000 + seed);
        // d = 2 is degenerate: outputs are ±1 up to eps and gradients sit below FD roundoff.
        let (n, d) = (rng.random_range(1..4), rng.random_range(3..8));
        let mut ps = ParamStore::new();
        let ln = LayerNorm::new(&mut Builder::new(&mut ps, &mut rng.clone()), "ln", d);
        // non-trivial affine
        let gv = normal_vec(&mut rng, d);
        ps.value_mut(ln.gamma).data_mut().copy_from_slice(&gv);
        let x = ps.add("x", randn(&mut rng, n, d));
        let (y, cache) = ln.forward(&ps, ps.value(x));
        let r = randn(&mut rng, y.rows(), y.cols());
        let dx = ln.backward(&mut ps, &cache, &r);
        set_grad(&mut ps, x, &dx);
        let coords = all_coords(&ps);
        let rep = gradient_check(&mut ps, &coords, DEFAULT_EPS, |p| Ok(readout(&ln.forward(p, p.value(x)).0, &r)))
            .unwrap();
        assert!(rep.max_rel_err < TOL, "seed {seed}: {rep:?}");
    }
}

#[test]
fn feed_forward_gradients() {
    for seed in 0..CASES {
        let mut rng = seeded(4000 + seed);
        let (n, d, h) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..7));
        let mut ps = ParamStore::new();
        let ffn = FeedForward::new(&mut Builder::new(&mut ps, &mut rng.clone()), "ffn", d, h);
        let x = ps.add("x", randn(&mut rng, n, d));
        let (y, cache) = ffn.forward(&ps, ps.value(x)).unwrap();
        let r = randn(&mut rng, y.rows(), y.cols());
        let dx = ffn.backward(&mut ps, &cache, &r);
        set_grad(&mut ps, x, &dx);
        let coords = all_coords(&ps);
        let rep = gradient_check(&mut ps, &coords, DEFAULT_EPS, |p| Ok(readout(&ffn.forward(p, p.value(x))?.0, &r)))
            .unwrap();
        assert!(rep.max_rel_err < TOL, "seed {seed}: {rep:?}");
    }
}

#[test]
fn gru_sequence_gradients() {
    for seed in 0..CASES {
        let mut rng = seeded(5000 + seed);
        let (n, din, dh, steps) =
            (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..5));
        let mut ps = ParamStore::new();
        let gru = GruCell::new(&mut Builder::new(&mut ps, &mut rng.clone()), "gru", din, dh);
        // non-zero biases so every gate path is exercised
        for id in [gru.bz, gru.br, gru.bh] {
            let b = normal_vec(&mut rng, dh);
            ps.value_mut(id).data_mut().copy_from_slice(&b);
        }
        let xs: Vec<ParamId> = (0..steps).map(|t| ps.add(format!("x{t}"), randn(&mut rng, n, din))).collect();
        let inputs: Vec<Tensor> = xs.iter().map(|&id| ps.value(id).clone()).collect();
        let (h, cache) = gru.run(&ps, &inputs).unwrap();
        let r = randn(&mut rng, h.rows(), h.cols());
        let dxs = gru.run_backward(&mut ps, &cache, &r);
        for (id, dx) in xs.iter().zip(&dxs) {
            set_grad(&mut ps, *id, dx);
        }
        let coords = all_coords(&ps);
        let rep = gradient_check(&mut ps, &coords, DEFAULT_EPS, |p| {
            let inputs: Vec<Tensor> = xs.iter().map(|&id| p.value(id).clone()).collect();
            Ok(readout(&gru.run(p, &inputs)?.0, &r))
        })
        .unwrap();
        assert!(rep.max_rel_err < TOL, "seed {seed}: {rep:?}");
    }
}
