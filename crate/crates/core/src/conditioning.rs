//! Context memory: history token (GRU), one pooled token per environment
//! field (patch attention), and a diffusion-timestep token, fused by a
//! pre-LN Transformer encoder.
//!
//! Token layout per window: `[history, env_1 .. env_{M+N}, timestep]`.
//! Batches stack windows as consecutive blocks of `L = M + N + 2` rows.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::attention::MhaCache;
use crate::nn::gru::GruStep;
use crate::nn::layers::{FfnCache, NormCache};
use crate::nn::{Builder, Dense, FeedForward, Groups, GruCell, LayerNorm, MultiHeadAttention, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Pre-LN self-attention + feed-forward block over grouped sequences.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

pub struct BlockCache {
    ln1: NormCache,
    attn: MhaCache,
    ln2: NormCache,
    ffn: FfnCache,
}

impl EncoderBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize, heads: usize, hidden: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            ln1: LayerNorm::new(&mut s, "ln1", d),
            attn: MultiHeadAttention::new(&mut s, "attn", d, heads),
            ln2: LayerNorm::new(&mut s, "ln2", d),
            ffn: FeedForward::new(&mut s, "ffn", d, hidden),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor, groups: Groups) -> Result<(Tensor, BlockCache)> {
        let (h, ln1) = self.ln1.forward(ps, x);
        let (a, attn) = self.attn.forward(ps, &h, &h, groups)?;
        let mut x1 = x.clone();
        x1.add_assign(&a);
        let (h2, ln2) = self.ln2.forward(ps, &x1);
        let (f, ffn) = self.ffn.forward(ps, &h2)?;
        x1.add_assign(&f);
        Ok((x1, BlockCache { ln1, attn, ln2, ffn }))
    }

    pub fn backward(&self, ps: &mut ParamStore, c: &BlockCache, dy: &Tensor) -> Tensor {
        let dh2 = self.ffn.backward(ps, &c.ffn, dy);
        let mut dx1 = dy.clone();
        dx1.add_assign(&self.ln2.backward(ps, &c.ln2, &dh2));
        let (dq, dkv) = self.attn.backward(ps, &c.attn, &dx1);
        let mut dh = dq;
        dh.add_assign(&dkv);
        let mut dx = dx1;
        dx.add_assign(&self.ln1.backward(ps, &c.ln1, &dh));
        dx
    }
}

/// `F` fields of `C·H·W` values → `(F·n_patches)×(C·P·P)`; patches in
/// row-major grid order, each flattened channel-major.
pub fn patchify(fields: &[&[f64]], dims: (usize, usize, usize), p: usize) -> Result<Tensor> {
    let (c, h, w) = dims;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("env grid {h}×{w} is not divisible into {p}×{p} patches")));
    }
    let (ph, pw) = (h / p, w / p);
    let width = c * p * p;
    let mut out = Vec::with_capacity(fields.len() * ph * pw * width);
    for f in fields {
        if f.len() != c * h * w {
            return Err(crate::error::dim_err("env field", &[f.len()], &[c, h, w]));
        }
        for py in 0..ph {
            for px in 0..pw {
                for ch in 0..c {
                    for y in 0..p {
                        let row = (ch * h + py * p + y) * w + px * p;
                        out.extend_from_slice(&f[row..row + p]);
                    }
                }
            }
        }
    }
    Ok(Tensor::matrix(fields.len() * ph * pw, width, out))
}

/// Simplified environment backbone: patch embedding + kind flag, one
/// attention block over patches (no positional encoding), mean pool.
#[derive(Clone, Debug)]
pub struct EnvEncoder {
    pub embed: Dense,
    pub kind: ParamId,
    pub block: EncoderBlock,
    pub out: Dense,
    pub dims: (usize, usize, usize),
    pub patch: usize,
}

pub struct EnvCache {
    patches: Tensor,
    kinds: Vec<usize>,
    n_patches: usize,
    block: BlockCache,
    pooled: Tensor,
}

impl EnvEncoder {
    pub const HISTORICAL: usize = 0;
    pub const FUTURE: usize = 1;

    pub fn new(b: &mut Builder<'_>, cfg: &ModelConfig) -> Self {
        let mut s = b.scope("env");
        let (c, p) = (cfg.env_channels, cfg.patch);
        let d = cfg.d_env;
        Self {
            embed: Dense::new(&mut s, "embed", c * p * p, d),
            kind: s.normal("kind", &[2, d], 0.02),
            block: EncoderBlock::new(&mut s, "block", d, cfg.heads, cfg.ffn_mult * d),
            out: Dense::new(&mut s, "out", d, cfg.d_model),
            dims: (c, cfg.env_grid, cfg.env_grid),
            patch: p,
        }
    }

    pub fn n_patches(&self) -> usize {
        (self.dims.1 / self.patch) * (self.dims.2 / self.patch)
    }

    /// One token per field; `kinds[i]` is [`Self::HISTORICAL`] or [`Self::FUTURE`].
    pub fn forward(&self, ps: &ParamStore, fields: &[&[f64]], kinds: &[usize]) -> Result<(Tensor, EnvCache)> {
        let patches = patchify(fields, self.dims, self.patch)?;
        self.forward_patches(ps, patches, kinds, self.n_patches())
    }

    /// Same as [`Self::forward`] on pre-cut patches (`n_patches` rows per field).
    pub fn forward_patches(
        &self,
        ps: &ParamStore,
        patches: Tensor,
        kinds: &[usize],
        n_patches: usize,
    ) -> Result<(Tensor, EnvCache)> {
        let f = kinds.len();
        if patches.rows() != f * n_patches {
            return Err(crate::error::dim_err("env patches", patches.shape(), &[f * n_patches]));
        }
        let mut e = self.embed.forward(ps, &patches)?;
        let kind = ps.value(self.kind);
        for (i, &k) in kinds.iter().enumerate() {
            for r in 0..n_patches {
                for (v, kv) in e.row_mut(i * n_patches + r).iter_mut().zip(kind.row(k)) {
                    *v += kv;
                }
            }
        }
        let (y, block) = self.block.forward(ps, &e, Groups::selfattn(f, n_patches))?;
        let d = y.cols();
        let mut pooled = Tensor::zeros(&[f, d]);
        for i in 0..f {
            let dst = pooled.row_mut(i);
            for r in 0..n_patches {
                for (a, b) in dst.iter_mut().zip(y.row(i * n_patches + r)) {
                    *a += b / n_patches as f64;
                }
            }
        }
        let tokens = self.out.forward(ps, &pooled)?;
        Ok((tokens, EnvCache { patches, kinds: kinds.to_vec(), n_patches, block, pooled }))
    }

    pub fn backward(&self, ps: &mut ParamStore, c: &EnvCache, dtokens: &Tensor) {
        let dpooled = self.out.backward(ps, &c.pooled, dtokens);
        let (f, np) = (c.kinds.len(), c.n_patches);
        let d = dpooled.cols();
        let mut dy = Tensor::zeros(&[f * np, d]);
        for i in 0..f {
            for r in 0..np {
                for (a, b) in dy.row_mut(i * np + r).iter_mut().zip(dpooled.row(i)) {
                    *a = b / np as f64;
                }
            }
        }
        let de = self.block.backward(ps, &c.block, &dy);
        let gk = ps.grad_mut(self.kind);
        for (i, &k) in c.kinds.iter().enumerate() {
            for r in 0..np {
                for (a, b) in gk.row_mut(k).iter_mut().zip(de.row(i * np + r)) {
                    *a += b;
                }
            }
        }
        self.embed.backward_params(ps, &c.patches, &de);
    }
}

/// GRU over the history, final state projected to `d_model`.
#[derive(Clone, Debug)]
pub struct HistoryEncoder {
    pub gru: GruCell,
    pub proj: Dense,
}

pub struct HistCache {
    steps: Vec<GruStep>,
    h: Tensor,
}

impl HistoryEncoder {
    pub fn new(b: &mut Builder<'_>, cfg: &ModelConfig) -> Self {
        let mut s = b.scope("history");
        Self {
            gru: GruCell::new(&mut s, "gru", crate::data::ATTRS, cfg.gru_hidden),
            proj: Dense::new(&mut s, "proj", cfg.gru_hidden, cfg.d_model),
        }
    }

    /// `hist` stacks `B` windows of `m` rows; returns `B×d_model`.
    pub fn forward(&self, ps: &ParamStore, hist: &Tensor, m: usize) -> Result<(Tensor, HistCache)> {
        if m == 0 || hist.rows() == 0 || hist.rows() % m != 0 {
            return Err(Error::Dimension(format!("history of {} rows with M = {m}", hist.rows())));
        }
        let b = hist.rows() / m;
        let xs: Vec<Tensor> = (0..m)
            .map(|t| {
                let data = (0..b).flat_map(|w| hist.row(w * m + t).to_vec()).collect();
                Tensor::matrix(b, hist.cols(), data)
            })
            .collect();
        let (h, steps) = self.gru.run(ps, &xs)?;
        let token = self.proj.forward(ps, &h)?;
        Ok((token, HistCache { steps, h }))
    }

    pub fn backward(&self, ps: &mut ParamStore, c: &HistCache, dtoken: &Tensor) {
        let dh = self.proj.backward(ps, &c.h, dtoken);
        self.gru.run_backward(ps, &c.steps, &dh);
    }
}

/// Sinusoidal embedding with interleaved `(sin, cos)` pairs at frequencies
/// `10000^(−2k/d)`; an odd trailing slot holds `sin`.
pub fn timestep_embedding(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let k = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * k / d as f64);
            if i % 2 == 0 { angle.sin() } else { angle.cos() }
        })
        .collect()
}

/// Which env slots carry real tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvMask {
    /// All `M + N` fields encoded.
    None,
    /// Future fields replaced by the null token.
    Future,
    /// Every env slot replaced by the null token.
    All,
}

/// Inputs for a batch of `B` windows.
pub struct ContextInput<'a> {
    /// `B·M × 4`.
    pub hist: &'a Tensor,
    /// Per window, `M + N` z-scored fields (`None` when the dataset has no fields).
    pub env: Option<Vec<&'a [f64]>>,
}

/// The time-independent part of the context, computed once per batch.
pub struct ContextParts {
    pub hist: Tensor,
    pub env: Option<Tensor>,
    /// `slot_row[b·(M+N) + s]` = row in `env`, or `None` for the null token.
    slot_row: Vec<Option<usize>>,
    hist_cache: HistCache,
    env_cache: Option<EnvCache>,
}

pub struct ContextCache {
    times: Tensor,
    blocks: Vec<BlockCache>,
    ln: NormCache,
    batch: usize,
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub history: HistoryEncoder,
    pub env: EnvEncoder,
    pub time: Dense,
    pub null_env: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_f: LayerNorm,
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub future_env: bool,
}

impl ContextEncoder {
    pub fn new(b: &mut Builder<'_>, cfg: &ModelConfig, m: usize, n: usize) -> Self {
        let history = HistoryEncoder::new(b, cfg);
        let env = EnvEncoder::new(b, cfg);
        let mut s = b.scope("context");
        let d = cfg.d_model;
        let l = m + n + 2;
        Self {
            history,
            env,
            time: Dense::new(&mut s, "time", d, d),
            null_env: s.normal("null_env", &[1, d], 0.02),
            pos: s.normal("pos", &[l, d], 0.02),
            blocks: (0..cfg.k_enc).map(|k| EncoderBlock::new(&mut s, &format!("block{k}"), d, cfg.heads, cfg.ffn_mult * d)).collect(),
            ln_f: LayerNorm::new(&mut s, "ln_f", d),
            m,
            n,
            d,
            future_env: cfg.future_env_enabled,
        }
    }

    pub fn len(&self) -> usize {
        self.m + self.n + 2
    }

    pub fn mask_for(&self, has_env: bool) -> EnvMask {
        match (has_env, self.future_env) {
            (false, _) => EnvMask::All,
            (true, false) => EnvMask::Future,
            (true, true) => EnvMask::None,
        }
    }

    pub fn parts(&self, ps: &ParamStore, input: &ContextInput<'_>) -> Result<ContextParts> {
        let (hist, hist_cache) = self.history.forward(ps, input.hist, self.m)?;
        let b = hist.rows();
        let slots = self.m + self.n;
        let mask = self.mask_for(input.env.is_some());
        let mut slot_row = vec![None; b * slots];
        let (env, env_cache) = match (&input.env, mask) {
            (Some(fields), m) if m != EnvMask::All => {
                if fields.len() != b * slots {
                    return Err(crate::error::dim_err("env fields per batch", &[fields.len()], &[b, slots]));
                }
                let keep = if m == EnvMask::Future { self.m } else { slots };
                let mut chosen = Vec::with_capacity(b * keep);
                let mut kinds = Vec::with_capacity(b * keep);
                for w in 0..b {
                    for s in 0..keep {
                        slot_row[w * slots + s] = Some(chosen.len());
                        chosen.push(fields[w * slots + s]);
                        kinds.push(if s < self.m { EnvEncoder::HISTORICAL } else { EnvEncoder::FUTURE });
                    }
                }
                let (tok, cache) = self.env.forward(ps, &chosen, &kinds)?;
                (Some(tok), Some(cache))
            }
            _ => (None, None),
        };
        Ok(ContextParts { hist, env, slot_row, hist_cache, env_cache })
    }

    /// Fuses the parts with timestep tokens for `ts[b]` (one per window).
    pub fn assemble(&self, ps: &ParamStore, parts: &ContextParts, ts: &[usize]) -> Result<(Tensor, ContextCache)> {
        let b = parts.hist.rows();
        if ts.len() != b {
            return Err(crate::error::dim_err("timesteps per batch", &[ts.len()], &[b]));
        }
        let (l, d, slots) = (self.len(), self.d, self.m + self.n);
        let times = Tensor::matrix(b, d, ts.iter().flat_map(|&t| timestep_embedding(t, d)).collect());
        let tt = self.time.forward(ps, &times)?;
        let null = ps.value(self.null_env).data();
        let pos = ps.value(self.pos);
        let mut x = Tensor::zeros(&[b * l, d]);
        for w in 0..b {
            x.row_mut(w * l).copy_from_slice(parts.hist.row(w));
            for s in 0..slots {
                let src = match (parts.slot_row[w * slots + s], &parts.env) {
                    (Some(r), Some(e)) => e.row(r),
                    _ => null,
                };
                x.row_mut(w * l + 1 + s).copy_from_slice(src);
            }
            x.row_mut(w * l + l - 1).copy_from_slice(tt.row(w));
            for k in 0..l {
                for (v, p) in x.row_mut(w * l + k).iter_mut().zip(pos.row(k)) {
                    *v += p;
                }
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, c) = blk.forward(ps, &x, Groups::selfattn(b, l))?;
            caches.push(c);
            x = y;
        }
        let (c, ln) = self.ln_f.forward(ps, &x);
        Ok((c, ContextCache { times, blocks: caches, ln, batch: b }))
    }

    /// Backward through [`Self::assemble`]; returns `(d hist tokens, d env tokens)`.
    pub fn assemble_backward(
        &self,
        ps: &mut ParamStore,
        parts: &ContextParts,
        cache: &ContextCache,
        dc: &Tensor,
    ) -> (Tensor, Option<Tensor>) {
        let (b, l, d, slots) = (cache.batch, self.len(), self.d, self.m + self.n);
        let mut dx = self.ln_f.backward(ps, &cache.ln, dc);
        for (blk, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dx = blk.backward(ps, c, &dx);
        }
        let mut dhist = Tensor::zeros(&[b, d]);
        let mut denv = parts.env.as_ref().map(|e| Tensor::zeros(e.shape()));
        let mut dtt = Tensor::zeros(&[b, d]);
        let mut dnull = vec![0.0; d];
        {
            let gpos = ps.grad_mut(self.pos);
            for w in 0..b {
                for k in 0..l {
                    for (g, v) in gpos.row_mut(k).iter_mut().zip(dx.row(w * l + k)) {
                        *g += v;
                    }
                }
            }
        }
        for w in 0..b {
            dhist.row_mut(w).copy_from_slice(dx.row(w * l));
            for s in 0..slots {
                let src = dx.row(w * l + 1 + s);
                match (parts.slot_row[w * slots + s], denv.as_mut()) {
                    (Some(r), Some(de)) => de.row_mut(r).copy_from_slice(src),
                    _ => dnull.iter_mut().zip(src).for_each(|(a, b)| *a += b),
                }
            }
            dtt.row_mut(w).copy_from_slice(dx.row(w * l + l - 1));
        }
        ps.grad_mut(self.null_env).data_mut().iter_mut().zip(&dnull).for_each(|(a, b)| *a += b);
        self.time.backward_params(ps, &cache.times, &dtt);
        (dhist, denv)
    }

    pub fn parts_backward(&self, ps: &mut ParamStore, parts: &ContextParts, dhist: &Tensor, denv: Option<&Tensor>) {
        self.history.backward(ps, &parts.hist_cache, dhist);
        if let (Some(cache), Some(de)) = (&parts.env_cache, denv) {
            self.env.backward(ps, cache, de);
        }
    }

    /// Convenience: full context for one batch.
    pub fn build(&self, ps: &ParamStore, input: &ContextInput<'_>, ts: &[usize]) -> Result<Tensor> {
        let parts = self.parts(ps, input)?;
        Ok(self.assemble(ps, &parts, ts)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_zero_alternates() {
        let e = timestep_embedding(0, 8);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(timestep_embedding(7, 48), timestep_embedding(7, 48));
    }

    #[test]
    fn timesteps_are_distinct() {
        let embs: Vec<Vec<f64>> = (0..=50).map(|t| timestep_embedding(t, 48)).collect();
        let mut min = f64::INFINITY;
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                min = min.min(d);
            }
        }
        assert!(min > 0.0);
    }

    #[test]
    fn patchify_layout_and_divisibility() {
        // one channel 4×4, patches 2×2
        let f: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let p = patchify(&[&f], (1, 4, 4), 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
        assert!(matches!(patchify(&[&f], (1, 4, 4), 3), Err(Error::Config(_))));
    }
}
