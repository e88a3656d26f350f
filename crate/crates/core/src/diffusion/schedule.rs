use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest ᾱ_t for which `predict_x0` is defined.
pub const ALPHA_BAR_FLOOR: f64 = 1e-12;

/// Linear-β DDPM schedule. Arrays are indexed by `t − 1` for `t ∈ 1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("schedule needs T >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(beta))
    }

    /// Schedule from explicit β values. Values are not range-checked, so
    /// degenerate test schedules (β = 0) can be expressed.
    pub fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Self { t_max: beta.len(), beta, alpha, alpha_bar, sigma }
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.t_max {
            return Err(Error::Contract(format!("diffusion step {t} outside 1..={}", self.t_max)));
        }
        Ok(t - 1)
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.idx(t)?])
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(crate::error::dim_err(what, a.shape(), b.shape()));
    }
    Ok(())
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse(z0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape(z0, eps, "forward_diffuse z0 vs eps")?;
    let ab = s.alpha_bar_at(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect();
    Tensor::from_vec(z0.shape(), data)
}

/// One ancestral step. `w` must be `None` (or all zero) at `t = 1`.
pub fn reverse_step(
    z_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    s: &NoiseSchedule,
    w: Option<&Tensor>,
) -> Result<Tensor> {
    let i = s.idx(t)?;
    same_shape(z_t, eps_hat, "reverse_step z_t vs eps_hat")?;
    if let Some(w) = w {
        same_shape(z_t, w, "reverse_step z_t vs w")?;
        if t == 1 && w.data().iter().any(|v| *v != 0.0) {
            return Err(Error::Contract("reverse step at t=1 must not add noise".into()));
        }
    }
    let (alpha, ab, sigma) = (s.alpha[i], s.alpha_bar[i], s.sigma[i]);
    let coef = if ab < 1.0 { (1.0 - alpha) / (1.0 - ab).sqrt() } else { 0.0 };
    let inv = 1.0 / alpha.sqrt();
    let mut out: Vec<f64> = z_t.data().iter().zip(eps_hat.data()).map(|(z, e)| (z - coef * e) * inv).collect();
    if let Some(w) = w {
        for (o, wv) in out.iter_mut().zip(w.data()) {
            *o += sigma * wv;
        }
    }
    Tensor::from_vec(z_t.shape(), out)
}

/// `ẑ0 = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn predict_x0(z_t: &Tensor, t: usize, eps_hat: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape(z_t, eps_hat, "predict_x0 z_t vs eps_hat")?;
    let ab = s.alpha_bar_at(t)?;
    if ab <= ALPHA_BAR_FLOOR {
        return Err(Error::Contract(format!("alpha_bar at t={t} is {ab:e}, below the inversion floor")));
    }
    let (a, b) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt());
    let data = z_t.data().iter().zip(eps_hat.data()).map(|(z, e)| (z - b * e) * a).collect();
    Tensor::from_vec(z_t.shape(), data)
}

/// Coefficients `(∂ẑ0/∂z_t, ∂ẑ0/∂ε̂)` of the affine map in [`predict_x0`].
pub fn predict_x0_coefs(t: usize, s: &NoiseSchedule) -> Result<(f64, f64)> {
    let ab = s.alpha_bar_at(t)?;
    Ok((1.0 / ab.sqrt(), -(1.0 - ab).sqrt() / ab.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::vector(vec![v])
    }

    #[test]
    fn alpha_bar_products() {
        assert_eq!(NoiseSchedule::build(1, 0.1, 0.1).unwrap().alpha_bar, vec![0.9]);
        let s = NoiseSchedule::build(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-15 && (s.alpha_bar[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn bad_ranges_are_config_errors() {
        for (t, a, b) in [(0, 0.1, 0.2), (5, 0.0, 0.2), (5, 0.3, 0.2), (5, 0.1, 1.0)] {
            assert!(matches!(NoiseSchedule::build(t, a, b), Err(Error::Config(_))));
        }
    }

    #[test]
    fn scalar_examples() {
        let s = NoiseSchedule::from_betas(vec![0.75]);
        let zt = forward_diffuse(&scalar(1.0), 1, &scalar(2.0), &s).unwrap();
        assert!((zt.data()[0] - (0.5 + 0.75f64.sqrt() * 2.0)).abs() < 1e-15);
        assert!((zt.data()[0] - 2.23205).abs() < 1e-5);
        let z0 = predict_x0(&zt, 1, &scalar(2.0), &s).unwrap();
        assert!((z0.data()[0] - 1.0).abs() < 1e-12);

        let s = NoiseSchedule::from_betas(vec![0.1]);
        let z = reverse_step(&scalar(1.0), 1, &scalar(0.5), &s, None).unwrap();
        let want = (1.0 - (0.1 / 0.1f64.sqrt()) * 0.5) / 0.9f64.sqrt();
        assert!((z.data()[0] - want).abs() < 1e-15);
        assert!((z.data()[0] - 0.887426).abs() < 1e-6);
    }

    #[test]
    fn degenerate_schedule_is_identity() {
        let s = NoiseSchedule::from_betas(vec![0.0, 0.0]);
        let z = Tensor::vector(vec![1.5, -2.0]);
        let e = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(forward_diffuse(&z, 2, &e, &s).unwrap(), z);
        assert_eq!(reverse_step(&z, 2, &e, &s, Some(&Tensor::zeros(&[2]))).unwrap(), z);
        assert_eq!(predict_x0(&z, 1, &e, &s).unwrap(), z);
    }

    #[test]
    fn noise_at_t1_is_rejected() {
        let s = NoiseSchedule::build(3, 0.1, 0.2).unwrap();
        let z = scalar(1.0);
        assert!(matches!(reverse_step(&z, 1, &z, &s, Some(&z)), Err(Error::Contract(_))));
        assert!(reverse_step(&z, 4, &z, &s, None).is_err());
        assert!(forward_diffuse(&z, 0, &z, &s).is_err());
    }

    #[test]
    fn reverse_step_is_linear() {
        let s = NoiseSchedule::build(4, 0.05, 0.3).unwrap();
        let (z, e, w) = (Tensor::vector(vec![0.3, -1.2]), Tensor::vector(vec![2.0, 0.7]), Tensor::vector(vec![-0.4, 0.9]));
        let a = reverse_step(&z, 3, &e, &s, Some(&w)).unwrap();
        let dbl = |t: &Tensor| t.map(|v| 2.0 * v);
        let b = reverse_step(&dbl(&z), 3, &dbl(&e), &s, Some(&dbl(&w))).unwrap();
        assert!(b.max_abs_diff(&dbl(&a)) < 1e-14);
    }

    #[test]
    fn floor_is_enforced() {
        let s = NoiseSchedule::from_betas(vec![1.0]);
        assert!(predict_x0(&scalar(1.0), 1, &scalar(0.0), &s).is_err());
    }
}
