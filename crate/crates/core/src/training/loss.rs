use crate::error::{dim_err, Result};
use crate::piga::Task;
use crate::tensor::Tensor;

/// Mean squared error over all elements.
pub fn diffusion_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<f64> {
    if eps.shape() != eps_hat.shape() {
        return Err(dim_err("diffusion loss", eps.shape(), eps_hat.shape()));
    }
    let n = eps.len().max(1) as f64;
    Ok(eps.data().iter().zip(eps_hat.data()).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / n)
}

/// `(L_traj, L_wind, L_pres)`: MSE over each task's channels of `n×4` rows.
pub fn recon_loss(x_hat: &Tensor, x0: &Tensor) -> Result<(f64, f64, f64)> {
    if x_hat.shape() != x0.shape() || x0.cols() != crate::data::ATTRS {
        return Err(dim_err("recon loss", x_hat.shape(), x0.shape()));
    }
    let l = Task::ALL.map(|t| task_mse(x_hat, x0, t));
    Ok((l[0], l[1], l[2]))
}

pub fn task_mse(x_hat: &Tensor, x0: &Tensor, t: Task) -> f64 {
    let ch = t.channels();
    let count = (x0.rows() * ch.len()).max(1) as f64;
    let mut s = 0.0;
    for r in 0..x0.rows() {
        for c in ch.clone() {
            let d = x_hat.at(r, c) - x0.at(r, c);
            s += d * d;
        }
    }
    s / count
}

/// `∂(weight·L_task)/∂x̂`, zero outside the task's channels.
pub fn task_mse_grad(x_hat: &Tensor, x0: &Tensor, t: Task, weight: f64) -> Tensor {
    let ch = t.channels();
    let count = (x0.rows() * ch.len()).max(1) as f64;
    let mut g = Tensor::zeros(x0.shape());
    for r in 0..x0.rows() {
        for c in ch.clone() {
            g.row_mut(r)[c] = weight * 2.0 * (x_hat.at(r, c) - x0.at(r, c)) / count;
        }
    }
    g
}

/// `½e^{−2 s_d} L_diff + ½e^{−2 s_r} L_recon + s_d + s_r`, i.e. the
/// uncertainty-weighted objective with `σ = e^s`.
pub fn total_loss(l_diff: f64, l_recon: f64, s_diff: f64, s_recon: f64) -> f64 {
    0.5 * (-2.0 * s_diff).exp() * l_diff + 0.5 * (-2.0 * s_recon).exp() * l_recon + s_diff + s_recon
}

/// `(∂/∂s_diff, ∂/∂s_recon)` of [`total_loss`].
pub fn total_loss_grad(l_diff: f64, l_recon: f64, s_diff: f64, s_recon: f64) -> (f64, f64) {
    (1.0 - l_diff * (-2.0 * s_diff).exp(), 1.0 - l_recon * (-2.0 * s_recon).exp())
}
