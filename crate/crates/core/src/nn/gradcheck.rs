//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::rng::Prng;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub param: ParamId,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<Worst>,
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Every scalar of every leaf.
pub fn all_coords(ps: &ParamStore) -> Vec<Coord> {
    ps.ids()
        .flat_map(|id| (0..ps.value(id).len()).map(move |index| Coord { param: id, index }))
        .collect()
}

/// `n` distinct scalars drawn uniformly over all parameters.
pub fn sample_coords(ps: &ParamStore, n: usize, rng: &mut Prng) -> Vec<Coord> {
    let all = all_coords(ps);
    let n = n.min(all.len());
    let mut picked: Vec<usize> = sample(rng, all.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

/// Compares the gradients currently stored in `ps` against central
/// differences of `loss` at each coordinate. Parameter values are restored
/// exactly afterwards.
pub fn gradient_check<F>(ps: &mut ParamStore, coords: &[Coord], eps: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    for c in coords {
        let analytic = ps.grad(c.param).data()[c.index];
        let orig = ps.value(c.param).data()[c.index];
        ps.value_mut(c.param).data_mut()[c.index] = orig + eps;
        let up = loss(ps)?;
        ps.value_mut(c.param).data_mut()[c.index] = orig - eps;
        let down = loss(ps)?;
        ps.value_mut(c.param).data_mut()[c.index] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss while perturbing {}[{}]",
                ps.leaf(c.param).name,
                c.index
            )));
        }
        let numeric = (up - down) / (2.0 * eps);
        let e = rel_err(analytic, numeric);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some(Worst {
                name: ps.leaf(c.param).name.clone(),
                index: c.index,
                analytic,
                numeric,
            });
        }
    }
    Ok(report)
}
