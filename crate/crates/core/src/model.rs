//! The full forecaster: latent autoencoder, context encoder and ε_θ, with
//! the composite training loss and its gradient (including task-specific
//! routing) and the ancestral sampler.

use crate::conditioning::{ContextEncoder, ContextInput};
use crate::config::{DiffusionConfig, ModelConfig};
use crate::data::{NormWindow, ATTRS};
use crate::decoder::EpsilonTheta;
use crate::diffusion::{ancestral_sample, predict_x0_coefs, LatentDecoder, LatentEncoder, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::gradcheck::{gradient_check, sample_coords, GradCheckReport, DEFAULT_EPS};
use crate::nn::{Builder, ParamId, ParamStore};
use crate::piga::{Route, Task};
use crate::rng::{normal_vec, stream, Prng};
use crate::tensor::Tensor;
use crate::training::loss::{diffusion_loss, recon_loss, task_mse_grad, total_loss, total_loss_grad};

const INIT_KEY: u64 = 0x1417;

/// Stacked inputs for `B` normalized windows.
pub struct Batch<'a> {
    pub windows: Vec<&'a NormWindow>,
    pub hist: Tensor,
    pub fut: Tensor,
}

impl<'a> Batch<'a> {
    pub fn new(windows: Vec<&'a NormWindow>) -> Result<Self> {
        let first = windows.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (m, n) = (first.m(), first.n());
        if windows.iter().any(|w| w.m() != m || w.n() != n || w.env.is_some() != first.env.is_some()) {
            return Err(Error::Dimension("windows in one batch differ in M, N or env presence".into()));
        }
        let hist = Tensor::concat_rows(&windows.iter().map(|w| &w.hist).collect::<Vec<_>>());
        let fut = Tensor::concat_rows(&windows.iter().map(|w| &w.fut).collect::<Vec<_>>());
        Ok(Self { windows, hist, fut })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn context_input(&self) -> ContextInput<'_> {
        let env = self.windows[0].env.as_ref().map(|_| {
            self.windows
                .iter()
                .flat_map(|w| (0..w.m() + w.n()).map(move |i| w.field(i).expect("env present")))
                .collect()
        });
        ContextInput { hist: &self.hist, env }
    }
}

/// Per-example diffusion step and noise for one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub ts: Vec<usize>,
    pub eps: Tensor,
}

impl Noise {
    pub fn draw(rng: &mut Prng, batch: usize, n: usize, d_emb: usize, t_max: usize) -> Self {
        let ts = (0..batch).map(|_| 1 + (crate::rng::uniform(rng, 0.0, t_max as f64) as usize).min(t_max - 1)).collect();
        let eps = Tensor::matrix(batch * n, d_emb, normal_vec(rng, batch * n * d_emb));
        Self { ts, eps }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub diff: f64,
    pub traj: f64,
    pub wind: f64,
    pub pres: f64,
    pub s_diff: f64,
    pub s_recon: f64,
}

impl LossParts {
    pub fn recon(&self) -> f64 {
        self.traj + self.wind + self.pres
    }
}

/// What each reconstruction pass contributed to each task's PIGA projection
/// gradients: `delta[pass][proj]` is the max absolute change.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingProbe {
    pub delta: [[f64; 3]; 3],
}

impl RoutingProbe {
    /// Largest gradient any task's loss sent into a foreign projection.
    pub fn max_foreign(&self) -> f64 {
        let mut m: f64 = 0.0;
        for p in 0..3 {
            for q in 0..3 {
                if p != q {
                    m = m.max(self.delta[p][q]);
                }
            }
        }
        m
    }

    pub fn min_own(&self) -> f64 {
        (0..3).map(|p| self.delta[p][p]).fold(f64::INFINITY, f64::min)
    }
}

pub struct PhysDiff {
    pub cfg: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub m: usize,
    pub n: usize,
    pub sched: NoiseSchedule,
    pub ps: ParamStore,
    pub enc: LatentEncoder,
    pub dec: LatentDecoder,
    pub ctx: ContextEncoder,
    pub eps: EpsilonTheta,
    pub s_diff: ParamId,
    pub s_recon: ParamId,
}

struct Forward {
    z_t: Tensor,
    eps_hat: Tensor,
    x_hat: Tensor,
    coefs: Vec<(f64, f64, f64)>,
    enc: crate::diffusion::latent::EncCache,
    dec: crate::diffusion::latent::DecCache,
    parts: crate::conditioning::ContextParts,
    ctx: crate::conditioning::ContextCache,
    eps_cache: crate::decoder::EpsCache,
    loss: LossParts,
}

impl PhysDiff {
    pub fn new(cfg: &ModelConfig, diffusion: &DiffusionConfig, m: usize, n: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if m == 0 || n == 0 {
            return Err(Error::Config("M and N must be positive".into()));
        }
        let sched = NoiseSchedule::build(diffusion.steps, diffusion.beta_start, diffusion.beta_end)?;
        let mut ps = ParamStore::new();
        let mut rng = stream(seed, INIT_KEY, 0);
        let mut b = Builder::new(&mut ps, &mut rng);
        let enc = LatentEncoder::new(&mut b, cfg.latent_hidden, cfg.d_embedding);
        let dec = LatentDecoder::new(&mut b, cfg.latent_hidden, cfg.d_embedding);
        let ctx = ContextEncoder::new(&mut b, cfg, m, n);
        let eps = EpsilonTheta::new(&mut b, cfg, n)?;
        let mut u = b.scope("uncertainty");
        let s_diff = u.zeros("s_diff", &[1]);
        let s_recon = u.zeros("s_recon", &[1]);
        Ok(Self { cfg: cfg.clone(), diffusion: diffusion.clone(), m, n, sched, ps, enc, dec, ctx, eps, s_diff, s_recon })
    }

    pub fn hash(&self) -> String {
        crate::config::model_hash(&self.cfg, &self.diffusion, (self.m, self.n))
    }

    /// Projection parameter ids of every PIGA block, indexed by task.
    pub fn piga_projection_ids(&self) -> [Vec<ParamId>; 3] {
        let mut out: [Vec<ParamId>; 3] = Default::default();
        for blk in &self.eps.blocks {
            if let Some((_, p)) = &blk.piga {
                for t in Task::ALL {
                    let d = &p.proj[t as usize];
                    out[t as usize].push(d.w);
                    out[t as usize].extend(d.b);
                }
            }
        }
        out
    }

    fn check_batch(&self, batch: &Batch<'_>, noise: &Noise) -> Result<()> {
        let b = batch.len();
        if batch.hist.rows() != b * self.m || batch.fut.rows() != b * self.n {
            return Err(Error::Dimension(format!("batch windows do not match model M = {}, N = {}", self.m, self.n)));
        }
        if noise.ts.len() != b || noise.eps.rows() != b * self.n || noise.eps.cols() != self.cfg.d_embedding {
            return Err(crate::error::dim_err("noise vs batch", noise.eps.shape(), &[b * self.n, self.cfg.d_embedding]));
        }
        Ok(())
    }

    fn forward(&self, ps: &ParamStore, batch: &Batch<'_>, noise: &Noise) -> Result<Forward> {
        self.check_batch(batch, noise)?;
        let n = self.n;
        let (z0, enc) = self.enc.forward(ps, &batch.fut, n)?;
        let mut coefs = Vec::with_capacity(batch.len());
        let mut z_t = z0.clone();
        for (b, &t) in noise.ts.iter().enumerate() {
            let ab = self.sched.alpha_bar_at(t)?;
            let (cz, ce) = predict_x0_coefs(t, &self.sched)?;
            coefs.push((ab.sqrt(), cz, ce));
            let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
            for r in b * n..(b + 1) * n {
                let e = noise.eps.row(r).to_vec();
                for (v, ev) in z_t.row_mut(r).iter_mut().zip(e) {
                    *v = a * *v + s * ev;
                }
            }
        }
        let parts = self.ctx.parts(ps, &batch.context_input())?;
        let (c, ctx) = self.ctx.assemble(ps, &parts, &noise.ts)?;
        let (eps_hat, eps_cache) = self.eps.forward(ps, &z_t, &c, self.ctx.len())?;
        let mut z0_hat = z_t.clone();
        for (b, &(_, cz, ce)) in coefs.iter().enumerate() {
            for r in b * n..(b + 1) * n {
                let e = eps_hat.row(r).to_vec();
                for (v, ev) in z0_hat.row_mut(r).iter_mut().zip(e) {
                    *v = cz * *v + ce * ev;
                }
            }
        }
        let (x_hat, dec) = self.dec.forward(ps, &z0_hat, n)?;
        let diff = diffusion_loss(&noise.eps, &eps_hat)?;
        let (traj, wind, pres) = recon_loss(&x_hat, &batch.fut)?;
        let (s_diff, s_recon) = (ps.value(self.s_diff).data()[0], ps.value(self.s_recon).data()[0]);
        let total = total_loss(diff, traj + wind + pres, s_diff, s_recon);
        let loss = LossParts { total, diff, traj, wind, pres, s_diff, s_recon };
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("training loss {total}")));
        }
        Ok(Forward { z_t, eps_hat, x_hat, coefs, enc, dec, parts, ctx, eps_cache, loss })
    }

    /// Loss without gradients.
    pub fn loss(&self, batch: &Batch<'_>, noise: &Noise) -> Result<LossParts> {
        self.loss_with(&self.ps, batch, noise)
    }

    /// Loss under an externally held copy of the parameters (same layout).
    pub fn loss_with(&self, ps: &ParamStore, batch: &Batch<'_>, noise: &Noise) -> Result<LossParts> {
        Ok(self.forward(ps, batch, noise)?.loss)
    }

    /// Zeroes all gradients, then fills them with `∂L_total/∂θ`.
    ///
    /// With `routing` on (and PIGA present), each reconstruction component
    /// is backpropagated through ε_θ in its own pass in which the other two
    /// tasks' PIGA projections pass gradients to their inputs but accumulate
    /// no parameter gradient; the diffusion term uses an unrestricted pass. Everything outside ε_θ is linear in the incoming
    /// gradient, so those parts run once on the summed signal.
    pub fn loss_and_grad(
        &mut self,
        batch: &Batch<'_>,
        noise: &Noise,
        routing: bool,
        mut probe: Option<&mut RoutingProbe>,
    ) -> Result<LossParts> {
        let f = self.forward(&self.ps, batch, noise)?;
        let n = self.n;
        let proj_ids = if probe.is_some() { self.piga_projection_ids() } else { Default::default() };
        let ps = &mut self.ps;
        ps.zero_grad();
        let l = f.loss;
        let (gsd, gsr) = total_loss_grad(l.diff, l.recon(), l.s_diff, l.s_recon);
        ps.grad_mut(self.s_diff).data_mut()[0] += gsd;
        ps.grad_mut(self.s_recon).data_mut()[0] += gsr;
        let wd = 0.5 * (-2.0 * l.s_diff).exp();
        let wr = 0.5 * (-2.0 * l.s_recon).exp();

        let count = noise.eps.len() as f64;
        let mut deps_diff = f.eps_hat.clone();
        for (g, e) in deps_diff.data_mut().iter_mut().zip(noise.eps.data()) {
            *g = wd * 2.0 * (*g - e) / count;
        }

        let mut dz_t = Tensor::zeros(f.z_t.shape());
        let mut deps_task: Vec<Tensor> = Vec::with_capacity(3);
        for t in Task::ALL {
            let dx = task_mse_grad(&f.x_hat, &batch.fut, t, wr);
            let dz0_hat = self.dec.backward(ps, &f.dec, &dx);
            let mut de = Tensor::zeros(dz0_hat.shape());
            for (b, &(_, cz, ce)) in f.coefs.iter().enumerate() {
                for r in b * n..(b + 1) * n {
                    for ((d_e, d_z), g) in de.row_mut(r).iter_mut().zip(dz_t.row_mut(r)).zip(dz0_hat.row(r)) {
                        *d_e = ce * g;
                        *d_z += cz * g;
                    }
                }
            }
            deps_task.push(de);
        }

        let routed = routing && self.cfg.piga_enabled;
        let mut passes: Vec<(Route, Tensor)> = Vec::with_capacity(4);
        if routed {
            passes.push((Route::All, deps_diff));
            for (t, de) in Task::ALL.into_iter().zip(deps_task) {
                passes.push((Route::Only(t), de));
            }
        } else {
            let mut sum = deps_diff;
            deps_task.iter().for_each(|d| sum.add_assign(d));
            passes.push((Route::All, sum));
        }
        let mut dc: Option<Tensor> = None;
        for (route, de) in &passes {
            let before: Option<Vec<Vec<Tensor>>> = match (route, &probe) {
                (Route::Only(_), Some(_)) => {
                    Some(proj_ids.iter().map(|ids| ids.iter().map(|&id| ps.grad(id).clone()).collect()).collect())
                }
                _ => None,
            };
            let (dz, dcp) = self.eps.backward(ps, &f.eps_cache, de, *route);
            dz_t.add_assign(&dz);
            match dc.as_mut() {
                Some(acc) => acc.add_assign(&dcp),
                None => dc = Some(dcp),
            }
            if let (Route::Only(t), Some(before), Some(pr)) = (route, before, probe.as_deref_mut()) {
                for (q, ids) in proj_ids.iter().enumerate() {
                    let mut mx: f64 = 0.0;
                    for (id, old) in ids.iter().zip(&before[q]) {
                        for (a, b) in ps.grad(*id).data().iter().zip(old.data()) {
                            mx = mx.max((a - b).abs());
                        }
                    }
                    pr.delta[*t as usize][q] = mx;
                }
            }
        }

        let mut dz0 = dz_t;
        for (b, &(sa, _, _)) in f.coefs.iter().enumerate() {
            for r in b * n..(b + 1) * n {
                dz0.row_mut(r).iter_mut().for_each(|v| *v *= sa);
            }
        }
        self.enc.backward(ps, &f.enc, &dz0);
        let dc = dc.expect("at least one pass");
        let (dhist, denv) = self.ctx.assemble_backward(ps, &f.parts, &f.ctx, &dc);
        self.ctx.parts_backward(ps, &f.parts, &dhist, denv.as_ref());
        Ok(l)
    }

    /// Central-difference check of the unrouted `∂L_total/∂θ` at `samples`
    /// randomly chosen scalars.
    pub fn check_gradients(
        &mut self,
        batch: &Batch<'_>,
        noise: &Noise,
        samples: usize,
        rng: &mut Prng,
    ) -> Result<GradCheckReport> {
        self.loss_and_grad(batch, noise, false, None)?;
        let mut ps = std::mem::take(&mut self.ps);
        let coords = sample_coords(&ps, samples, rng);
        let rep = gradient_check(&mut ps, &coords, DEFAULT_EPS, |p| Ok(self.loss_with(p, batch, noise)?.total));
        self.ps = ps;
        rep
    }

    /// Ancestral sampling for `B` windows × `members`; `rngs[b·members + j]`
    /// drives member `j` of window `b`. Returns normalized `N×4` forecasts in
    /// the same order.
    pub fn sample_windows(&self, windows: &[&NormWindow], members: usize, rngs: &mut [Prng]) -> Result<Vec<Tensor>> {
        if members == 0 || rngs.len() != windows.len() * members {
            return Err(Error::Contract(format!("{} rng streams for {} windows × {members} members", rngs.len(), windows.len())));
        }
        let batch = Batch::new(windows.to_vec())?;
        let ps = &self.ps;
        let parts = self.ctx.parts(ps, &batch.context_input())?;
        let l = self.ctx.len();
        let ts_for = |t: usize| vec![t; windows.len()];
        let z = ancestral_sample(&self.sched, rngs, self.n, self.cfg.d_embedding, |z, t| {
            let (c, _) = self.ctx.assemble(ps, &parts, &ts_for(t))?;
            let mems = self.eps.memories(ps, &c)?;
            self.eps.infer(ps, z, &c, &mems, l, None)
        })?;
        let x = self.dec.decode(ps, &z, self.n)?;
        if !x.is_finite() {
            return Err(Error::Divergence { t: 0 });
        }
        Ok((0..windows.len() * members).map(|i| x.slice_rows(i * self.n, (i + 1) * self.n)).collect())
    }

    /// Post-gate PIGA streams of the last decoder block, averaged over the
    /// horizon, for each window denoised at step `t`. Returns one
    /// `[traj, wind, pres]` triple of `d_sub` vectors per window, or `None`
    /// when PIGA is disabled.
    pub fn stream_features(&self, windows: &[&NormWindow], t: usize, rng: &mut Prng) -> Result<Option<Vec<[Vec<f64>; 3]>>> {
        if !self.cfg.piga_enabled {
            return Ok(None);
        }
        let batch = Batch::new(windows.to_vec())?;
        let ps = &self.ps;
        let z0 = self.enc.encode(ps, &batch.fut, self.n)?;
        let eps = Tensor::matrix(z0.rows(), z0.cols(), normal_vec(rng, z0.len()));
        let z_t = crate::diffusion::forward_diffuse(&z0, t, &eps, &self.sched)?;
        let c = self.ctx.build(ps, &batch.context_input(), &vec![t; windows.len()])?;
        let mems = self.eps.memories(ps, &c)?;
        let mut feats = None;
        self.eps.infer(ps, &z_t, &c, &mems, self.ctx.len(), Some(&mut feats))?;
        let fused = feats.ok_or_else(|| Error::Contract("no PIGA features captured".into()))?;
        let d = self.cfg.d_sub();
        Ok(Some(
            (0..windows.len())
                .map(|w| {
                    Task::ALL.map(|task| {
                        let k = task as usize;
                        let mut v = vec![0.0; d];
                        for r in w * self.n..(w + 1) * self.n {
                            for (a, b) in v.iter_mut().zip(&fused.row(r)[k * d..(k + 1) * d]) {
                                *a += b / self.n as f64;
                            }
                        }
                        v
                    })
                })
                .collect(),
        ))
    }

    pub fn attrs(&self) -> usize {
        ATTRS
    }
}
