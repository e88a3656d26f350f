//! The denoising network ε_θ: decoder blocks of self-attention, cross-attention
//! to the context memory, PIGA and a feed-forward sublayer, all pre-LN
//! residual.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::attention::MhaCache;
use crate::nn::layers::{FfnCache, NormCache};
use crate::nn::{Builder, Dense, FeedForward, Groups, KvMemory, LayerNorm, MultiHeadAttention, ParamId, ParamStore};
use crate::piga::{Piga, PigaCache, Route};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    /// `None` when PIGA is ablated (identity passthrough).
    pub piga: Option<(LayerNorm, Piga)>,
    pub ln4: LayerNorm,
    pub ffn: FeedForward,
}

pub struct DecBlockCache {
    ln1: NormCache,
    sa: MhaCache,
    ln2: NormCache,
    ca: MhaCache,
    piga: Option<(NormCache, PigaCache)>,
    ln4: NormCache,
    ffn: FfnCache,
}

impl DecBlockCache {
    pub fn piga(&self) -> Option<&PigaCache> {
        self.piga.as_ref().map(|(_, c)| c)
    }
}

/// How decoder rows map onto context rows: `count` sequences of `n` rows,
/// consecutive runs of `count / kv_count` sequences sharing one context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub count: usize,
    pub n: usize,
    pub kv_count: usize,
    pub ctx_len: usize,
}

impl Layout {
    fn self_groups(&self) -> Groups {
        Groups::selfattn(self.count, self.n)
    }

    fn cross_groups(&self) -> Groups {
        Groups { count: self.count, q_len: self.n, kv_count: self.kv_count, kv_len: self.ctx_len }
    }
}

impl DecoderBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope(name);
        let d = cfg.d_model;
        let ln1 = LayerNorm::new(&mut s, "ln1", d);
        let self_attn = MultiHeadAttention::new(&mut s, "self_attn", d, cfg.heads);
        let ln2 = LayerNorm::new(&mut s, "ln2", d);
        let cross_attn = MultiHeadAttention::new(&mut s, "cross_attn", d, cfg.heads);
        let piga = if cfg.piga_enabled {
            let ln3 = LayerNorm::new(&mut s, "ln3", d);
            Some((ln3, Piga::new(&mut s, d)?))
        } else {
            None
        };
        Ok(Self {
            ln1,
            self_attn,
            ln2,
            cross_attn,
            piga,
            ln4: LayerNorm::new(&mut s, "ln4", d),
            ffn: FeedForward::new(&mut s, "ffn", d, cfg.ffn_mult * d),
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor, c: &Tensor, lay: Layout) -> Result<(Tensor, DecBlockCache)> {
        let (h, ln1) = self.ln1.forward(ps, x);
        let (a, sa) = self.self_attn.forward(ps, &h, &h, lay.self_groups())?;
        let mut x = x.clone();
        x.add_assign(&a);
        let (h, ln2) = self.ln2.forward(ps, &x);
        let (a, ca) = self.cross_attn.forward(ps, &h, c, lay.cross_groups())?;
        x.add_assign(&a);
        let piga = match &self.piga {
            Some((ln3, p)) => {
                let (h, n3) = ln3.forward(ps, &x);
                let (a, pc) = p.forward(ps, &h, lay.n)?;
                x.add_assign(&a);
                Some((n3, pc))
            }
            None => None,
        };
        let (h, ln4) = self.ln4.forward(ps, &x);
        let (a, ffn) = self.ffn.forward(ps, &h)?;
        x.add_assign(&a);
        Ok((x, DecBlockCache { ln1, sa, ln2, ca, piga, ln4, ffn }))
    }

    /// Returns `(d x, d context)`.
    pub fn backward(&self, ps: &mut ParamStore, c: &DecBlockCache, dy: &Tensor, route: Route) -> (Tensor, Tensor) {
        let mut dx = dy.clone();
        let dh = self.ffn.backward(ps, &c.ffn, dy);
        dx.add_assign(&self.ln4.backward(ps, &c.ln4, &dh));
        if let (Some((ln3, p)), Some((n3, pc))) = (&self.piga, &c.piga) {
            let dh = p.backward(ps, pc, &dx, route);
            dx.add_assign(&ln3.backward(ps, n3, &dh));
        }
        let (dh, dc) = self.cross_attn.backward(ps, &c.ca, &dx);
        dx.add_assign(&self.ln2.backward(ps, &c.ln2, &dh));
        let (dq, dkv) = self.self_attn.backward(ps, &c.sa, &dx);
        let mut dh = dq;
        dh.add_assign(&dkv);
        dx.add_assign(&self.ln1.backward(ps, &c.ln1, &dh));
        (dx, dc)
    }

    /// Cache-free forward with precomputed cross-attention memory. When
    /// `features` is given, the post-gate PIGA streams are stored there.
    pub fn infer(
        &self,
        ps: &ParamStore,
        x: &Tensor,
        mem: &KvMemory,
        lay: Layout,
        features: Option<&mut Option<Tensor>>,
    ) -> Result<Tensor> {
        let h = self.ln1.apply(ps, x);
        let mut x = x.clone();
        x.add_assign(&self.self_attn.infer(ps, &h, &h, lay.self_groups())?);
        let h = self.ln2.apply(ps, &x);
        x.add_assign(&self.cross_attn.forward_with_memory(ps, &h, mem, lay.cross_groups())?);
        if let Some((ln3, p)) = &self.piga {
            let h = ln3.apply(ps, &x);
            match features {
                Some(slot) => {
                    let (a, pc) = p.forward(ps, &h, lay.n)?;
                    *slot = Some(pc.fused);
                    x.add_assign(&a);
                }
                None => x.add_assign(&p.infer(ps, &h, lay.n)?),
            }
        }
        let h = self.ln4.apply(ps, &x);
        x.add_assign(&self.ffn.infer(ps, &h)?);
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct EpsilonTheta {
    pub in_proj: Dense,
    pub pos: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub ln_f: LayerNorm,
    pub head: Dense,
    pub n: usize,
}

pub struct EpsCache {
    z: Tensor,
    blocks: Vec<DecBlockCache>,
    ln: NormCache,
    h: Tensor,
    lay: Layout,
}

impl EpsCache {
    pub fn blocks(&self) -> &[DecBlockCache] {
        &self.blocks
    }
}

impl EpsilonTheta {
    pub fn new(b: &mut Builder<'_>, cfg: &ModelConfig, n: usize) -> Result<Self> {
        let mut s = b.scope("decoder");
        let d = cfg.d_model;
        Ok(Self {
            in_proj: Dense::new(&mut s, "in_proj", cfg.d_embedding, d),
            pos: s.normal("pos", &[n, d], 0.02),
            blocks: (0..cfg.k_dec).map(|k| DecoderBlock::new(&mut s, &format!("block{k}"), cfg)).collect::<Result<_>>()?,
            ln_f: LayerNorm::new(&mut s, "ln_f", d),
            head: Dense::new(&mut s, "head", d, cfg.d_embedding),
            n,
        })
    }

    fn layout(&self, z: &Tensor, c: &Tensor, ctx_len: usize) -> Result<Layout> {
        let n = self.n;
        if z.rows() == 0 || z.rows() % n != 0 || ctx_len == 0 || c.rows() % ctx_len != 0 {
            return Err(Error::Dimension(format!(
                "decoder input {} rows (N = {n}), context {} rows (L = {ctx_len})",
                z.rows(),
                c.rows()
            )));
        }
        let (count, kv_count) = (z.rows() / n, c.rows() / ctx_len);
        if kv_count == 0 || count % kv_count != 0 {
            return Err(Error::Dimension(format!("{count} sequences cannot share {kv_count} contexts")));
        }
        Ok(Layout { count, n, kv_count, ctx_len })
    }

    fn embed(&self, ps: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let mut x = self.in_proj.forward(ps, z)?;
        let pos = ps.value(self.pos);
        for r in 0..x.rows() {
            for (v, p) in x.row_mut(r).iter_mut().zip(pos.row(r % self.n)) {
                *v += p;
            }
        }
        Ok(x)
    }

    /// `z` stacks sequences of `N` rows; `c` stacks contexts of `ctx_len` rows.
    pub fn forward(&self, ps: &ParamStore, z: &Tensor, c: &Tensor, ctx_len: usize) -> Result<(Tensor, EpsCache)> {
        let lay = self.layout(z, c, ctx_len)?;
        let mut x = self.embed(ps, z)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, bc) = b.forward(ps, &x, c, lay)?;
            caches.push(bc);
            x = y;
        }
        let (h, ln) = self.ln_f.forward(ps, &x);
        let eps = self.head.forward(ps, &h)?;
        Ok((eps, EpsCache { z: z.clone(), blocks: caches, ln, h, lay }))
    }

    /// Returns `(d z_t, d context)`.
    pub fn backward(&self, ps: &mut ParamStore, c: &EpsCache, deps: &Tensor, route: Route) -> (Tensor, Tensor) {
        let dh = self.head.backward(ps, &c.h, deps);
        let mut dx = self.ln_f.backward(ps, &c.ln, &dh);
        let mut dctx: Option<Tensor> = None;
        for (b, bc) in self.blocks.iter().zip(&c.blocks).rev() {
            let (d, dc) = b.backward(ps, bc, &dx, route);
            dx = d;
            match dctx.as_mut() {
                Some(acc) => acc.add_assign(&dc),
                None => dctx = Some(dc),
            }
        }
        {
            let gpos = ps.grad_mut(self.pos);
            for r in 0..dx.rows() {
                for (g, v) in gpos.row_mut(r % c.lay.n).iter_mut().zip(dx.row(r)) {
                    *g += v;
                }
            }
        }
        let dz = self.in_proj.backward(ps, &c.z, &dx);
        let dctx = dctx.unwrap_or_else(|| Tensor::zeros(&[c.lay.kv_count * c.lay.ctx_len, dx.cols()]));
        (dz, dctx)
    }

    /// Cross-attention memories for every block.
    pub fn memories(&self, ps: &ParamStore, c: &Tensor) -> Result<Vec<KvMemory>> {
        self.blocks.iter().map(|b| b.cross_attn.memory(ps, c)).collect()
    }

    /// Cache-free forward. `features`, when given, receives the post-gate
    /// PIGA streams of the last block.
    pub fn infer(
        &self,
        ps: &ParamStore,
        z: &Tensor,
        c: &Tensor,
        mems: &[KvMemory],
        ctx_len: usize,
        mut features: Option<&mut Option<Tensor>>,
    ) -> Result<Tensor> {
        let lay = self.layout(z, c, ctx_len)?;
        let mut x = self.embed(ps, z)?;
        let last = self.blocks.len().saturating_sub(1);
        for (i, (b, m)) in self.blocks.iter().zip(mems).enumerate() {
            let f = if i == last { features.as_deref_mut() } else { None };
            x = b.infer(ps, &x, m, lay, f)?;
        }
        let h = self.ln_f.apply(ps, &x);
        self.head.forward(ps, &h)
    }
}
