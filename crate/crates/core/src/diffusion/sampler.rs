//! Ancestral sampling loop shared by single forecasts and ensembles.

use crate::diffusion::schedule::{reverse_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{normal_vec, Prng};
use crate::tensor::Tensor;

/// Runs `t = T..1` starting from `z_T` drawn member-wise.
///
/// `rngs[j]` owns rows `j·rows_per..(j+1)·rows_per` of the latent: it draws
/// that block of `z_T` first, then one block of `w` per step with `t > 1`.
/// Member streams therefore never depend on how many members run together.
/// `eps` maps `(z_t, t)` to `ε̂`.
pub fn ancestral_sample<F>(
    sched: &NoiseSchedule,
    rngs: &mut [Prng],
    rows_per: usize,
    cols: usize,
    mut eps: F,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let block = rows_per * cols;
    let draw = |rngs: &mut [Prng]| {
        let data: Vec<f64> = rngs.iter_mut().flat_map(|r| normal_vec(r, block)).collect();
        Tensor::matrix(rngs.len() * rows_per, cols, data)
    };
    let mut z = draw(rngs);
    for t in (1..=sched.t_max).rev() {
        let eps_hat = eps(&z, t)?;
        let w = if t > 1 { Some(draw(rngs)) } else { None };
        z = reverse_step(&z, t, &eps_hat, sched, w.as_ref())?;
        if !z.is_finite() {
            return Err(Error::Divergence { t });
        }
    }
    Ok(z)
}
