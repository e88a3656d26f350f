//! Kernel-3, same-padded 1-D convolution over stacked sequences, as a dense
//! map on an im2col buffer.

use crate::error::{Error, Result};
use crate::nn::layers::Dense;
use crate::nn::params::{Builder, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub lin: Dense,
    pub d_in: usize,
    pub d_out: usize,
}

pub struct ConvCache {
    cols: Tensor,
    seq_len: usize,
}

/// `(B·n)×d` → `(B·n)×3d` rows `[x_{t−1}, x_t, x_{t+1}]`, zero outside each sequence.
pub fn im2col(x: &Tensor, seq_len: usize) -> Result<Tensor> {
    let (rows, d) = (x.rows(), x.cols());
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::Dimension(format!("{rows} rows do not split into sequences of {seq_len}")));
    }
    let mut out = vec![0.0; rows * 3 * d];
    for r in 0..rows {
        let t = r % seq_len;
        let dst = &mut out[r * 3 * d..(r + 1) * 3 * d];
        if t > 0 {
            dst[..d].copy_from_slice(x.row(r - 1));
        }
        dst[d..2 * d].copy_from_slice(x.row(r));
        if t + 1 < seq_len {
            dst[2 * d..].copy_from_slice(x.row(r + 1));
        }
    }
    Ok(Tensor::matrix(rows, 3 * d, out))
}

fn col2im(dcols: &Tensor, seq_len: usize, d: usize) -> Tensor {
    let rows = dcols.rows();
    let mut dx = Tensor::zeros(&[rows, d]);
    for r in 0..rows {
        let t = r % seq_len;
        let src = dcols.row(r);
        for (o, g) in dx.row_mut(r).iter_mut().zip(&src[d..2 * d]) {
            *o += g;
        }
        if t > 0 {
            for (o, g) in dx.row_mut(r - 1).iter_mut().zip(&src[..d]) {
                *o += g;
            }
        }
        if t + 1 < seq_len {
            for (o, g) in dx.row_mut(r + 1).iter_mut().zip(&src[2 * d..]) {
                *o += g;
            }
        }
    }
    dx
}

impl Conv1d {
    pub fn new(b: &mut Builder<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self { lin: Dense::new(b, name, 3 * d_in, d_out), d_in, d_out }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor, seq_len: usize) -> Result<(Tensor, ConvCache)> {
        if x.cols() != self.d_in {
            return Err(crate::error::dim_err("conv1d input", x.shape(), &[x.rows(), self.d_in]));
        }
        let cols = im2col(x, seq_len)?;
        let y = self.lin.forward(ps, &cols)?;
        Ok((y, ConvCache { cols, seq_len }))
    }

    pub fn backward(&self, ps: &mut ParamStore, c: &ConvCache, dy: &Tensor) -> Tensor {
        let dcols = self.lin.backward(ps, &c.cols, dy);
        col2im(&dcols, c.seq_len, self.d_in)
    }
}
