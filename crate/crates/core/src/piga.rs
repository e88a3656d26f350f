//! Physics-inspired gated attention.
//!
//! The decoder state is projected into trajectory, wind and pressure
//! streams; each stream attends to the other two, a sigmoid gate blends the
//! stream with what it attended to, and a per-position dense map fuses the
//! three results back to `d_model`.

use crate::error::{Error, Result};
use crate::nn::attention::AttnWeights;
use crate::nn::layers::{gelu, gelu_grad};
use crate::nn::{attend, attend_backward, sigmoid, Builder, Dense, Groups, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Traj = 0,
    Wind = 1,
    Pres = 2,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Traj, Task::Wind, Task::Pres];

    pub fn name(self) -> &'static str {
        match self {
            Task::Traj => "traj",
            Task::Wind => "wind",
            Task::Pres => "pres",
        }
    }

    /// Key/value streams in concatenation order.
    pub fn others(self) -> [Task; 2] {
        match self {
            Task::Traj => [Task::Wind, Task::Pres],
            Task::Wind => [Task::Traj, Task::Pres],
            Task::Pres => [Task::Traj, Task::Wind],
        }
    }

    /// Output channels of the 4-vector `(lat, lon, wind, pressure)`.
    pub fn channels(self) -> std::ops::Range<usize> {
        match self {
            Task::Traj => 0..2,
            Task::Wind => 2..3,
            Task::Pres => 3..4,
        }
    }
}

/// Gradient routing for one backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    /// Gradients flow everywhere.
    All,
    /// Only this task's projection accumulates parameter gradients; the
    /// foreign projections still pass gradients through to their input.
    Only(Task),
}

impl Route {
    fn blocks(self, t: Task) -> bool {
        matches!(self, Route::Only(k) if k != t)
    }
}

/// Row-wise `[a; b]` per group of `n` rows.
fn stack_groups(a: &Tensor, b: &Tensor, n: usize) -> Tensor {
    let (count, d) = (a.rows() / n, a.cols());
    let mut out = Vec::with_capacity(2 * a.len());
    for g in 0..count {
        out.extend_from_slice(&a.data()[g * n * d..(g + 1) * n * d]);
        out.extend_from_slice(&b.data()[g * n * d..(g + 1) * n * d]);
    }
    Tensor::matrix(2 * a.rows(), d, out)
}

fn unstack_groups(s: &Tensor, n: usize) -> (Tensor, Tensor) {
    let (count, d) = (s.rows() / (2 * n), s.cols());
    let (mut a, mut b) = (Vec::with_capacity(s.len() / 2), Vec::with_capacity(s.len() / 2));
    for g in 0..count {
        let base = 2 * g * n * d;
        a.extend_from_slice(&s.data()[base..base + n * d]);
        b.extend_from_slice(&s.data()[base + n * d..base + 2 * n * d]);
    }
    (Tensor::matrix(count * n, d, a), Tensor::matrix(count * n, d, b))
}

/// Single-head attention of one stream over the other two.
#[derive(Clone, Debug)]
pub struct CrossTaskAttention {
    pub wq: Dense,
    pub wk: Dense,
    pub wv: Dense,
}

pub struct CtaCache {
    fq: Tensor,
    kv: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    weights: AttnWeights,
    n: usize,
}

impl CrossTaskAttention {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize) -> Self {
        let mut s = b.scope(name);
        Self { wq: Dense::no_bias(&mut s, "q", d, d), wk: Dense::no_bias(&mut s, "k", d, d), wv: Dense::no_bias(&mut s, "v", d, d) }
    }

    /// `A = attention(f_q W_Q, [f_a; f_b] W_K, [f_a; f_b] W_V)` within each
    /// group of `n` rows.
    pub fn forward(&self, ps: &ParamStore, fq: &Tensor, fa: &Tensor, fb: &Tensor, n: usize) -> Result<(Tensor, CtaCache)> {
        if fa.shape() != fq.shape() || fb.shape() != fq.shape() {
            return Err(crate::error::dim_err("cross-task streams", fq.shape(), fa.shape()));
        }
        if n == 0 || fq.rows() % n != 0 {
            return Err(Error::Dimension(format!("{} rows do not split into sequences of {n}", fq.rows())));
        }
        let count = fq.rows() / n;
        let kv = stack_groups(fa, fb, n);
        let q = self.wq.forward(ps, fq)?;
        let k = self.wk.forward(ps, &kv)?;
        let v = self.wv.forward(ps, &kv)?;
        let (a, weights) = attend(&q, &k, &v, Groups { count, q_len: n, kv_count: count, kv_len: 2 * n }, 1)?;
        Ok((a, CtaCache { fq: fq.clone(), kv, q, k, v, weights, n }))
    }

    /// Returns `(d f_q, d f_a, d f_b)`.
    pub fn backward(&self, ps: &mut ParamStore, c: &CtaCache, da: &Tensor) -> (Tensor, Tensor, Tensor) {
        let (dq, dk, dv) = attend_backward(&c.q, &c.k, &c.v, &c.weights, da);
        let dfq = self.wq.backward(ps, &c.fq, &dq);
        let mut dkv = self.wk.backward(ps, &c.kv, &dk);
        dkv.add_assign(&self.wv.backward(ps, &c.kv, &dv));
        let (dfa, dfb) = unstack_groups(&dkv, c.n);
        (dfq, dfa, dfb)
    }
}

/// `g = σ(MLP([f, A]))` with one GELU hidden layer of width `2·d_sub`.
#[derive(Clone, Debug)]
pub struct Gate {
    pub hidden: Dense,
    pub out: Dense,
}

pub struct GateCache {
    inp: Tensor,
    pre: Tensor,
    act: Tensor,
    g: Tensor,
}

impl Gate {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize) -> Self {
        let mut s = b.scope(name);
        Self { hidden: Dense::new(&mut s, "hidden", 2 * d, 2 * d), out: Dense::new(&mut s, "out", 2 * d, d) }
    }

    pub fn forward(&self, ps: &ParamStore, f: &Tensor, a: &Tensor) -> Result<(Tensor, GateCache)> {
        let inp = Tensor::concat_cols(&[f, a]);
        let pre = self.hidden.forward(ps, &inp)?;
        let act = pre.map(gelu);
        let g = self.out.forward(ps, &act)?.map(sigmoid);
        Ok((g.clone(), GateCache { inp, pre, act, g }))
    }

    /// Returns `(d f, d A)` given `d g`.
    pub fn backward(&self, ps: &mut ParamStore, c: &GateCache, dg: &Tensor) -> (Tensor, Tensor) {
        let mut ds = dg.clone();
        for (v, g) in ds.data_mut().iter_mut().zip(c.g.data()) {
            *v *= g * (1.0 - g);
        }
        let mut dact = self.out.backward(ps, &c.act, &ds);
        for (v, p) in dact.data_mut().iter_mut().zip(c.pre.data()) {
            *v *= gelu_grad(*p);
        }
        let dinp = self.hidden.backward(ps, &c.inp, &dact);
        let d = dg.cols();
        (dinp.slice_cols(0, d), dinp.slice_cols(d, 2 * d))
    }
}

/// `(1 − g) ⊙ f + g ⊙ A`.
pub fn gated_fuse(f: &Tensor, a: &Tensor, g: &Tensor) -> Result<Tensor> {
    if f.shape() != a.shape() || f.shape() != g.shape() {
        return Err(crate::error::dim_err("gated fuse", f.shape(), g.shape()));
    }
    let data = f.data().iter().zip(a.data()).zip(g.data()).map(|((f, a), g)| (1.0 - g) * f + g * a).collect();
    Tensor::from_vec(f.shape(), data)
}

#[derive(Clone, Debug)]
pub struct Piga {
    pub proj: [Dense; 3],
    pub attn: [CrossTaskAttention; 3],
    pub gate: [Gate; 3],
    pub fuse: Dense,
    pub d_sub: usize,
}

/// Intermediate values of one PIGA pass; `fused` rows are post-gate
/// streams `[f'_traj, f'_wind, f'_pres]`.
pub struct PigaCache {
    x: Tensor,
    f: [Tensor; 3],
    a: [Tensor; 3],
    g: [Tensor; 3],
    attn: [CtaCache; 3],
    gate: [GateCache; 3],
    pub fused: Tensor,
}

impl Piga {
    pub fn new(b: &mut Builder<'_>, d_model: usize) -> Result<Self> {
        if d_model % 3 != 0 {
            return Err(Error::Config(format!("d_model = {d_model} is not divisible by 3")));
        }
        let d = d_model / 3;
        let mut s = b.scope("piga");
        let proj = Task::ALL.map(|t| Dense::new(&mut s, &format!("proj_{}", t.name()), d_model, d));
        let attn = Task::ALL.map(|t| CrossTaskAttention::new(&mut s, &format!("attn_{}", t.name()), d));
        let gate = Task::ALL.map(|t| Gate::new(&mut s, &format!("gate_{}", t.name()), d));
        let fuse = Dense::new(&mut s, "fuse", 3 * d, d_model);
        Ok(Self { proj, attn, gate, fuse, d_sub: d })
    }

    /// Three task streams `N×d_sub` from `X_cross`.
    pub fn decompose(&self, ps: &ParamStore, x: &Tensor) -> Result<[Tensor; 3]> {
        let f: Vec<Tensor> = self.proj.iter().map(|p| p.forward(ps, x)).collect::<Result<_>>()?;
        Ok(f.try_into().expect("three streams"))
    }

    /// Per-position dense map of `[f'_traj, f'_wind, f'_pres]` to `d_model`.
    pub fn fuse_streams(&self, ps: &ParamStore, fp: [&Tensor; 3]) -> Result<Tensor> {
        self.fuse.forward(ps, &Tensor::concat_cols(&fp))
    }

    /// `x` stacks sequences of `n` rows.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor, n: usize) -> Result<(Tensor, PigaCache)> {
        let f = self.decompose(ps, x)?;
        let mut a = Vec::with_capacity(3);
        let mut attn = Vec::with_capacity(3);
        let mut g = Vec::with_capacity(3);
        let mut gate = Vec::with_capacity(3);
        let mut fp = Vec::with_capacity(3);
        for t in Task::ALL {
            let [o1, o2] = t.others();
            let (at, c) = self.attn[t as usize].forward(ps, &f[t as usize], &f[o1 as usize], &f[o2 as usize], n)?;
            let (gt, gc) = self.gate[t as usize].forward(ps, &f[t as usize], &at)?;
            fp.push(gated_fuse(&f[t as usize], &at, &gt)?);
            a.push(at);
            attn.push(c);
            g.push(gt);
            gate.push(gc);
        }
        let fused = Tensor::concat_cols(&[&fp[0], &fp[1], &fp[2]]);
        let y = self.fuse.forward(ps, &fused)?;
        let arr = |v: Vec<Tensor>| -> [Tensor; 3] { v.try_into().expect("three") };
        let cache = PigaCache {
            x: x.clone(),
            f,
            a: arr(a),
            g: arr(g),
            attn: attn.try_into().ok().expect("three"),
            gate: gate.try_into().ok().expect("three"),
            fused,
        };
        Ok((y, cache))
    }

    pub fn infer(&self, ps: &ParamStore, x: &Tensor, n: usize) -> Result<Tensor> {
        Ok(self.forward(ps, x, n)?.0)
    }

    pub fn backward(&self, ps: &mut ParamStore, c: &PigaCache, dy: &Tensor, route: Route) -> Tensor {
        let d = self.d_sub;
        let dfused = self.fuse.backward(ps, &c.fused, dy);
        let mut df: [Tensor; 3] = Task::ALL.map(|_| Tensor::zeros(c.f[0].shape()));
        for t in Task::ALL {
            let k = t as usize;
            let dfp = dfused.slice_cols(k * d, (k + 1) * d);
            let (f, a, g) = (&c.f[k], &c.a[k], &c.g[k]);
            let n = dfp.len();
            let (mut dfk, mut da, mut dg) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for i in 0..n {
                let (dv, gv) = (dfp.data()[i], g.data()[i]);
                dfk[i] = (1.0 - gv) * dv;
                da[i] = gv * dv;
                dg[i] = (a.data()[i] - f.data()[i]) * dv;
            }
            let shape = dfp.shape().to_vec();
            let mut da = Tensor::from_vec(&shape, da).expect("shape");
            let mut dfk = Tensor::from_vec(&shape, dfk).expect("shape");
            let (gf, ga) = self.gate[k].backward(ps, &c.gate[k], &Tensor::from_vec(&shape, dg).expect("shape"));
            dfk.add_assign(&gf);
            da.add_assign(&ga);
            let (dq, d1, d2) = self.attn[k].backward(ps, &c.attn[k], &da);
            dfk.add_assign(&dq);
            df[k].add_assign(&dfk);
            let [o1, o2] = t.others();
            df[o1 as usize].add_assign(&d1);
            df[o2 as usize].add_assign(&d2);
        }
        let mut dx = Tensor::zeros(c.x.shape());
        for t in Task::ALL {
            let (proj, dft) = (&self.proj[t as usize], &df[t as usize]);
            if route.blocks(t) {
                dx.add_assign(&proj.backward_input(ps, dft));
            } else {
                dx.add_assign(&proj.backward(ps, &c.x, dft));
            }
        }
        dx
    }
}
