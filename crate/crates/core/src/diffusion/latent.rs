//! Latent autoencoder between normalized attribute sequences (`n×4`) and the
//! diffusion latent (`n×D_embedding`).
//!
//! Encoder: conv(k=3) → GELU → dense → per-row standardization. The last step
//! has no parameters; it pins every latent row to zero mean and unit variance
//! so joint training cannot shrink the latent until noise prediction becomes
//! trivial. Decoder: conv(k=3) → GELU → dense back to 4 channels.

use crate::data::ATTRS;
use crate::error::Result;
use crate::nn::layers::{gelu, gelu_grad, standardize, standardize_backward, standardize_cache, NormCache};
use crate::nn::{Builder, Conv1d, Dense, ParamStore};
use crate::tensor::Tensor;

const STD_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LatentEncoder {
    pub conv: Conv1d,
    pub out: Dense,
}

#[derive(Clone, Debug)]
pub struct LatentDecoder {
    pub conv: Conv1d,
    pub out: Dense,
}

pub struct EncCache {
    conv: crate::nn::conv::ConvCache,
    pre: Tensor,
    act: Tensor,
    norm: NormCache,
}

pub struct DecCache {
    conv: crate::nn::conv::ConvCache,
    pre: Tensor,
    act: Tensor,
}

fn gelu_backward(pre: &Tensor, mut d: Tensor) -> Tensor {
    for (g, p) in d.data_mut().iter_mut().zip(pre.data()) {
        *g *= gelu_grad(*p);
    }
    d
}

impl LatentEncoder {
    pub fn new(b: &mut Builder<'_>, hidden: usize, d_emb: usize) -> Self {
        let mut s = b.scope("latent_enc");
        Self { conv: Conv1d::new(&mut s, "conv", ATTRS, hidden), out: Dense::new(&mut s, "out", hidden, d_emb) }
    }

    /// `x0` stacks sequences of `seq_len` rows.
    pub fn forward(&self, ps: &ParamStore, x0: &Tensor, seq_len: usize) -> Result<(Tensor, EncCache)> {
        let (pre, conv) = self.conv.forward(ps, x0, seq_len)?;
        let act = pre.map(gelu);
        let h = self.out.forward(ps, &act)?;
        let (z, inv) = standardize(&h, STD_EPS);
        let norm = standardize_cache(z.clone(), inv);
        Ok((z, EncCache { conv, pre, act, norm }))
    }

    pub fn encode(&self, ps: &ParamStore, x0: &Tensor, seq_len: usize) -> Result<Tensor> {
        Ok(self.forward(ps, x0, seq_len)?.0)
    }

    pub fn backward(&self, ps: &mut ParamStore, c: &EncCache, dz: &Tensor) -> Tensor {
        let dh = standardize_backward(&c.norm, dz);
        let dact = self.out.backward(ps, &c.act, &dh);
        self.conv.backward(ps, &c.conv, &gelu_backward(&c.pre, dact))
    }
}

impl LatentDecoder {
    pub fn new(b: &mut Builder<'_>, hidden: usize, d_emb: usize) -> Self {
        let mut s = b.scope("latent_dec");
        Self { conv: Conv1d::new(&mut s, "conv", d_emb, hidden), out: Dense::new(&mut s, "out", hidden, ATTRS) }
    }

    pub fn forward(&self, ps: &ParamStore, z: &Tensor, seq_len: usize) -> Result<(Tensor, DecCache)> {
        let (pre, conv) = self.conv.forward(ps, z, seq_len)?;
        let act = pre.map(gelu);
        let x = self.out.forward(ps, &act)?;
        Ok((x, DecCache { conv, pre, act }))
    }

    pub fn decode(&self, ps: &ParamStore, z: &Tensor, seq_len: usize) -> Result<Tensor> {
        Ok(self.forward(ps, z, seq_len)?.0)
    }

    pub fn backward(&self, ps: &mut ParamStore, c: &DecCache, dx: &Tensor) -> Tensor {
        let dact = self.out.backward(ps, &c.act, dx);
        self.conv.backward(ps, &c.conv, &gelu_backward(&c.pre, dact))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded};

    fn setup() -> (ParamStore, LatentEncoder, LatentDecoder) {
        let mut ps = ParamStore::new();
        let mut rng = seeded(1);
        let mut b = Builder::new(&mut ps, &mut rng);
        let e = LatentEncoder::new(&mut b, 12, 8);
        let d = LatentDecoder::new(&mut b, 12, 8);
        (ps, e, d)
    }

    #[test]
    fn shapes() {
        let (ps, e, d) = setup();
        let x = Tensor::matrix(4, 4, normal_vec(&mut seeded(3), 16));
        let z = e.encode(&ps, &x, 4).unwrap();
        assert_eq!(z.shape(), &[4, 8]);
        assert_eq!(d.decode(&ps, &z, 4).unwrap().shape(), &[4, 4]);
        assert!(e.encode(&ps, &Tensor::zeros(&[4, 3]), 4).is_err());
    }

    #[test]
    fn interior_rows_are_shift_equivariant() {
        let (ps, e, _) = setup();
        let v = normal_vec(&mut seeded(4), 9 * 4);
        let a = Tensor::matrix(8, 4, v[..32].to_vec());
        let b = Tensor::matrix(8, 4, v[4..].to_vec()); // a shifted by one step
        let (za, zb) = (e.encode(&ps, &a, 8).unwrap(), e.encode(&ps, &b, 8).unwrap());
        for r in 1..6 {
            for (x, y) in za.row(r + 1).iter().zip(zb.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
