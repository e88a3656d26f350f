//! GRU cell with a hand-written backward pass.
//!
//! Gate convention used everywhere in this crate:
//!
//! ```text
//! z  = σ(W_z x + U_z h + b_z)
//! r  = σ(W_r x + U_r h + b_r)
//! h̃  = tanh(W_h x + U_h (r ⊙ h) + b_h)
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```

use crate::error::{dim_err, Result};
use crate::nn::layers::sigmoid;
use crate::nn::params::{Builder, ParamId, ParamStore};
use crate::tensor::{mm_acc, mm_nt_acc, mm_tn_acc, Tensor};

#[derive(Clone, Debug)]
pub struct GruCell {
    pub wz: ParamId,
    pub wr: ParamId,
    pub wh: ParamId,
    pub uz: ParamId,
    pub ur: ParamId,
    pub uh: ParamId,
    pub bz: ParamId,
    pub br: ParamId,
    pub bh: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

/// Values saved by one step for the backward pass. Rows are batch entries.
pub struct GruStep {
    x: Tensor,
    h: Tensor,
    z: Tensor,
    r: Tensor,
    rh: Tensor,
    cand: Tensor,
}

fn affine(ps: &ParamStore, x: &Tensor, w: ParamId, h: &Tensor, u: ParamId, b: ParamId) -> Vec<f64> {
    let (n, d_in) = (x.rows(), x.cols());
    let d_h = h.cols();
    let mut out = vec![0.0; n * d_h];
    let bias = ps.value(b).data();
    for i in 0..n {
        out[i * d_h..(i + 1) * d_h].copy_from_slice(bias);
    }
    mm_acc(x.data(), ps.value(w).data(), n, d_in, d_h, &mut out);
    mm_acc(h.data(), ps.value(u).data(), n, d_h, d_h, &mut out);
    out
}

impl GruCell {
    pub fn new(b: &mut Builder<'_>, name: &str, d_in: usize, d_h: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            wz: s.glorot("W_z", d_in, d_h),
            wr: s.glorot("W_r", d_in, d_h),
            wh: s.glorot("W_h", d_in, d_h),
            uz: s.orthogonal("U_z", d_h),
            ur: s.orthogonal("U_r", d_h),
            uh: s.orthogonal("U_h", d_h),
            bz: s.zeros("b_z", &[d_h]),
            br: s.zeros("b_r", &[d_h]),
            bh: s.zeros("b_h", &[d_h]),
            d_in,
            d_h,
        }
    }

    /// One step for a batch of rows: `x: n×d_in`, `h: n×d_h`.
    pub fn step(&self, ps: &ParamStore, x: &Tensor, h: &Tensor) -> Result<(Tensor, GruStep)> {
        if x.cols() != self.d_in || h.cols() != self.d_h || x.rows() != h.rows() {
            return Err(dim_err("gru step x/h", &[x.rows(), x.cols(), h.rows(), h.cols()], &[
                self.d_in, self.d_h,
            ]));
        }
        let n = x.rows();
        let z: Vec<f64> = affine(ps, x, self.wz, h, self.uz, self.bz).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = affine(ps, x, self.wr, h, self.ur, self.br).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h.data()).map(|(a, b)| a * b).collect();
        let rh = Tensor::matrix(n, self.d_h, rh);
        let cand: Vec<f64> = affine(ps, x, self.wh, &rh, self.uh, self.bh).into_iter().map(f64::tanh).collect();
        let hn: Vec<f64> = h
            .data()
            .iter()
            .zip(&z)
            .zip(&cand)
            .map(|((hv, zv), cv)| (1.0 - zv) * hv + zv * cv)
            .collect();
        let step = GruStep {
            x: x.clone(),
            h: h.clone(),
            z: Tensor::matrix(n, self.d_h, z),
            r: Tensor::matrix(n, self.d_h, r),
            rh,
            cand: Tensor::matrix(n, self.d_h, cand),
        };
        Ok((Tensor::matrix(n, self.d_h, hn), step))
    }

    /// Backward through one step given `dh'`; returns `(dx, dh_prev)`.
    pub fn step_backward(&self, ps: &mut ParamStore, s: &GruStep, dhn: &Tensor) -> (Tensor, Tensor) {
        let (n, dh) = (dhn.rows(), self.d_h);
        let di = self.d_in;
        let mut dh_prev = vec![0.0; n * dh];
        let mut da_z = vec![0.0; n * dh];
        let mut da_h = vec![0.0; n * dh];
        for idx in 0..n * dh {
            let g = dhn.data()[idx];
            let (z, c, h) = (s.z.data()[idx], s.cand.data()[idx], s.h.data()[idx]);
            dh_prev[idx] = g * (1.0 - z);
            da_z[idx] = g * (c - h) * z * (1.0 - z);
            da_h[idx] = g * z * (1.0 - c * c);
        }
        // candidate branch
        let mut d_rh = vec![0.0; n * dh];
        mm_nt_acc(&da_h, ps.value(self.uh).data(), n, dh, dh, &mut d_rh);
        let mut da_r = vec![0.0; n * dh];
        for idx in 0..n * dh {
            let (r, h) = (s.r.data()[idx], s.h.data()[idx]);
            dh_prev[idx] += d_rh[idx] * r;
            da_r[idx] = d_rh[idx] * h * r * (1.0 - r);
        }
        mm_nt_acc(&da_z, ps.value(self.uz).data(), n, dh, dh, &mut dh_prev);
        mm_nt_acc(&da_r, ps.value(self.ur).data(), n, dh, dh, &mut dh_prev);

        let mut dx = vec![0.0; n * di];
        mm_nt_acc(&da_z, ps.value(self.wz).data(), n, dh, di, &mut dx);
        mm_nt_acc(&da_r, ps.value(self.wr).data(), n, dh, di, &mut dx);
        mm_nt_acc(&da_h, ps.value(self.wh).data(), n, dh, di, &mut dx);

        for (w, u, b, da, hin) in [
            (self.wz, self.uz, self.bz, &da_z, &s.h),
            (self.wr, self.ur, self.br, &da_r, &s.h),
            (self.wh, self.uh, self.bh, &da_h, &s.rh),
        ] {
            mm_tn_acc(s.x.data(), da, n, di, dh, ps.grad_mut(w).data_mut());
            mm_tn_acc(hin.data(), da, n, dh, dh, ps.grad_mut(u).data_mut());
            let gb = ps.grad_mut(b).data_mut();
            for i in 0..n {
                for (g, d) in gb.iter_mut().zip(&da[i * dh..(i + 1) * dh]) {
                    *g += d;
                }
            }
        }
        (Tensor::matrix(n, di, dx), Tensor::matrix(n, dh, dh_prev))
    }

    /// Runs the cell over `xs` (one `n×d_in` matrix per time step) from `h₀ = 0`.
    pub fn run(&self, ps: &ParamStore, xs: &[Tensor]) -> Result<(Tensor, Vec<GruStep>)> {
        let n = xs.first().map_or(0, |x| x.rows());
        let mut h = Tensor::zeros(&[n, self.d_h]);
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            let (hn, st) = self.step(ps, x, &h)?;
            steps.push(st);
            h = hn;
        }
        Ok((h, steps))
    }

    /// Backpropagates `dh_final` through all steps; returns per-step `dx`.
    pub fn run_backward(&self, ps: &mut ParamStore, steps: &[GruStep], dh_final: &Tensor) -> Vec<Tensor> {
        let mut dh = dh_final.clone();
        let mut dxs = vec![Tensor::zeros(&[0]); steps.len()];
        for (t, st) in steps.iter().enumerate().rev() {
            let (dx, dprev) = self.step_backward(ps, st, &dh);
            dxs[t] = dx;
            dh = dprev;
        }
        dxs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded};

    fn cell(seed: u64, d_in: usize, d_h: usize) -> (ParamStore, GruCell) {
        let mut ps = ParamStore::new();
        let mut rng = seeded(seed);
        let c = GruCell::new(&mut Builder::new(&mut ps, &mut rng), "gru", d_in, d_h);
        (ps, c)
    }

    fn zero_all(ps: &mut ParamStore) {
        for l in ps.leaves_mut() {
            l.value.fill(0.0);
        }
    }

    #[test]
    fn zero_weights_halve_the_state() {
        let (mut ps, c) = cell(0, 3, 2);
        zero_all(&mut ps);
        let x = Tensor::from_rows(&[&[0.4, -1.0, 2.0]]);
        let h = Tensor::from_rows(&[&[0.8, -0.6]]);
        let (hn, _) = c.step(&ps, &x, &h).unwrap();
        assert!((hn.at(0, 0) - 0.4).abs() < 1e-15 && (hn.at(0, 1) + 0.3).abs() < 1e-15);
    }

    #[test]
    fn saturated_update_gate_takes_candidate() {
        let (mut ps, c) = cell(0, 2, 2);
        zero_all(&mut ps);
        ps.value_mut(c.bz).fill(20.0);
        let x = Tensor::from_rows(&[&[1.0, 1.0]]);
        let h = Tensor::from_rows(&[&[0.9, -0.9]]);
        let (hn, _) = c.step(&ps, &x, &h).unwrap();
        assert!(hn.data().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn matches_scalar_loop_transcription() {
        let (ps, c) = cell(11, 2, 2);
        let mut rng = seeded(12);
        let x = normal_vec(&mut rng, 2);
        let h = normal_vec(&mut rng, 2);
        let v = |id: ParamId, i: usize, j: usize| ps.value(id).at(i, j);
        let b = |id: ParamId, j: usize| ps.value(id).data()[j];
        let sig = |a: f64| 1.0 / (1.0 + (-a).exp());
        let mut want = [0.0; 2];
        let mut r = [0.0; 2];
        let mut z = [0.0; 2];
        for j in 0..2 {
            let mut az = b(c.bz, j);
            let mut ar = b(c.br, j);
            for i in 0..2 {
                az += x[i] * v(c.wz, i, j) + h[i] * v(c.uz, i, j);
                ar += x[i] * v(c.wr, i, j) + h[i] * v(c.ur, i, j);
            }
            z[j] = sig(az);
            r[j] = sig(ar);
        }
        for j in 0..2 {
            let mut ah = b(c.bh, j);
            for i in 0..2 {
                ah += x[i] * v(c.wh, i, j) + r[i] * h[i] * v(c.uh, i, j);
            }
            want[j] = (1.0 - z[j]) * h[j] + z[j] * ah.tanh();
        }
        let (hn, _) = c
            .step(&ps, &Tensor::matrix(1, 2, x), &Tensor::matrix(1, 2, h))
            .unwrap();
        assert!((hn.at(0, 0) - want[0]).abs() < 1e-14);
        assert!((hn.at(0, 1) - want[1]).abs() < 1e-14);
    }
}
