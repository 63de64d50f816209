//! Flow-matching semantic-to-mel generator.
//!
//! The velocity network is a bidirectional transformer over frames. The
//! prompt mel is placed before the target frames on the time axis and
//! flagged as such; target frames carry the noisy state `x_t` and the
//! fused semantic features upsampled to frame rate. The speaker vector
//! `c` is appended to every frame, and a sinusoidal embedding of `t` is
//! added before every block.
//!
//! Training uses straight paths `x_t = (1 - t) x_0 + t x_1` with
//! `x_0 ~ N(0, I)`; the L1 distance is taken either between velocities
//! or between one-step reconstructions of `x_1`.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::SemanticTokenSeq;
use crate::conditioners::Conditioners;
use crate::error::{Error, Result};
use crate::mel::Mel;
use crate::nn::{additive_mask, harmonic_table, time_features, Block, LayerNorm, Linear};
use crate::optim::{OptimConfig, Trainer};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTarget {
    /// L1 between predicted and straight-path velocity.
    Velocity,
    /// L1 between `x_t + (1 - t) v` and `x_1`.
    Reconstruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct S2MConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub n_mels: usize,
    /// Width of the token-model latents and speaker vectors.
    pub cond_dim: usize,
    pub v_sem: usize,
    pub downsample_rate: usize,
    pub fusion_hidden: usize,
    pub fusion_prob: f64,
    pub ode_steps: usize,
    pub solver: Solver,
    pub loss_target: LossTarget,
    pub min_prompt_frames: usize,
    pub max_frames: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Largest mean absolute change accepted when doubling ODE steps.
    pub convergence_tol: f64,
    pub seed: u64,
}

impl Default for S2MConfig {
    fn default() -> Self {
        Self {
            width: 128,
            layers: 3,
            heads: 4,
            n_mels: 80,
            cond_dim: 128,
            v_sem: 64,
            downsample_rate: 4,
            fusion_hidden: 256,
            fusion_prob: 0.5,
            ode_steps: 16,
            solver: Solver::Euler,
            loss_target: LossTarget::Velocity,
            min_prompt_frames: 8,
            max_frames: 512,
            train_steps: 1600,
            batch_size: 12,
            optim: OptimConfig {
                lr: 1e-3,
                ..OptimConfig::default()
            },
            convergence_tol: 0.25,
            seed: 51,
        }
    }
}

/// Semantic features handed to the generator.
#[derive(Debug, Clone)]
pub struct FusedSemantic {
    /// `[tokens, cond_dim]`.
    pub q_fin: Tensor,
    pub fused: bool,
}

/// Everything the velocity field is conditioned on for one utterance.
#[derive(Debug, Clone)]
pub struct FlowContext {
    /// `[prompt frames, n_mels]`; may have zero rows.
    pub prompt: Tensor,
    pub q_fin: Tensor,
    /// `[cond_dim]`.
    pub c: Tensor,
}

pub struct S2MModel {
    cfg: S2MConfig,
    store: ParamStore,
    sem_table: Tensor,
    fuse1: Linear,
    fuse2: Linear,
    input: Linear,
    time_proj: Vec<Linear>,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    out: Linear,
    positions: Tensor,
}

impl std::fmt::Debug for S2MModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("S2MModel").field("cfg", &self.cfg).finish()
    }
}

impl S2MModel {
    pub fn new(cfg: &S2MConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: &S2MConfig, dtype: DType) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.fusion_prob) {
            return Err(Error::Config(format!("fusion_prob {} outside [0, 1]", cfg.fusion_prob)));
        }
        if cfg.downsample_rate == 0 || cfg.ode_steps == 0 {
            return Err(Error::Config("downsample_rate and ode_steps must be >= 1".into()));
        }
        let mut store = ParamStore::new("s2m", cfg.seed, dtype);
        let d = cfg.cond_dim;
        let w = cfg.width;
        let sem_table = store.param("sem_table", (cfg.v_sem, d), Init::Normal(1.0))?;
        let fuse1 = Linear::new(&mut store, "fuse1", d, cfg.fusion_hidden)?;
        let fuse2 = Linear::new(&mut store, "fuse2", cfg.fusion_hidden, d)?;
        let input = Linear::new(&mut store, "input", cfg.n_mels + 2 * d + 1, w)?;
        let time_proj = (0..cfg.layers)
            .map(|i| Linear::new(&mut store, &format!("time{i}"), w, w))
            .collect::<Result<Vec<_>>>()?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&mut store, &format!("block{i}"), w, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut store, "ln_f", w)?;
        let out = Linear::new(&mut store, "out", w, cfg.n_mels)?;
        let positions = Tensor::from_vec(
            harmonic_table(cfg.max_frames, w),
            (cfg.max_frames, w),
            &Device::Cpu,
        )?
        .to_dtype(dtype)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            sem_table,
            fuse1,
            fuse2,
            input,
            time_proj,
            blocks,
            ln_f,
            out,
            positions,
        })
    }

    pub fn config(&self) -> &S2MConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Projected semantic-token embeddings `Q_sem`, `[tokens, cond_dim]`.
    pub fn embed(&self, tokens: &SemanticTokenSeq) -> Result<Tensor> {
        crate::codec::embed_tokens(&self.sem_table, tokens)
    }

    /// `q_fin = MLP(h_gpt + q_sem)` when `fuse`, else `MLP(q_sem)`.
    pub fn fuse_latents(
        &self,
        h_gpt: Option<&Tensor>,
        q_sem: &Tensor,
        fuse: bool,
    ) -> Result<FusedSemantic> {
        let q_sem = q_sem.to_dtype(self.dtype())?;
        let x = match (fuse, h_gpt) {
            (true, Some(h)) => {
                if h.dims() != q_sem.dims() {
                    return Err(Error::shape(format!(
                        "h_gpt {:?} vs q_sem {:?}",
                        h.dims(),
                        q_sem.dims()
                    )));
                }
                (h.to_dtype(self.dtype())? + &q_sem)?
            }
            (true, None) => return Err(Error::invalid("fusion requested without GPT latents")),
            (false, _) => q_sem,
        };
        if x.dims()[0] == 0 {
            return Ok(FusedSemantic { q_fin: x, fused: fuse });
        }
        let q_fin = self.fuse2.forward(&self.fuse1.forward(&x)?.silu()?)?;
        Ok(FusedSemantic { q_fin, fused: fuse })
    }

    /// Velocity predictions for a batch; item `i` of the result has the
    /// shape of `x_t[i]`.
    pub fn velocity(&self, ctxs: &[FlowContext], x_t: &[Tensor], t: &[f64]) -> Result<Vec<Tensor>> {
        let b = ctxs.len();
        if b == 0 || x_t.len() != b || t.len() != b {
            return Err(Error::invalid("velocity: empty or ragged batch"));
        }
        let dt = self.dtype();
        let d = self.cfg.cond_dim;
        let ds = self.cfg.downsample_rate;
        let mut rows = Vec::with_capacity(b);
        let mut spans = Vec::with_capacity(b);
        for (ctx, x) in ctxs.iter().zip(x_t) {
            let (ft, bins) = x.dims2()?;
            let (tokens, qd) = ctx.q_fin.dims2()?;
            if bins != self.cfg.n_mels || qd != d || tokens * ds != ft {
                return Err(Error::shape(format!(
                    "x_t {:?} with q_fin {:?} (downsample {ds})",
                    x.dims(),
                    ctx.q_fin.dims()
                )));
            }
            let fp = ctx.prompt.dims2()?.0;
            let c = ctx.c.to_dtype(dt)?.reshape((1, d))?;
            let q_up = ctx
                .q_fin
                .unsqueeze(1)?
                .broadcast_as((tokens, ds, d))?
                .reshape((ft, d))?;
            let target = Tensor::cat(
                &[
                    x.to_dtype(dt)?,
                    q_up,
                    c.broadcast_as((ft, d))?,
                    Tensor::zeros((ft, 1), dt, &Device::Cpu)?,
                ],
                1,
            )?;
            let seq = if fp > 0 {
                let prompt = Tensor::cat(
                    &[
                        ctx.prompt.to_dtype(dt)?,
                        Tensor::zeros((fp, d), dt, &Device::Cpu)?,
                        c.broadcast_as((fp, d))?,
                        Tensor::ones((fp, 1), dt, &Device::Cpu)?,
                    ],
                    1,
                )?;
                Tensor::cat(&[prompt, target], 0)?
            } else {
                target
            };
            spans.push((fp, ft));
            rows.push(seq);
        }
        let len = spans.iter().map(|(p, t)| p + t).max().unwrap_or(0);
        if len > self.cfg.max_frames {
            return Err(Error::invalid(format!(
                "{len} frames exceed max_frames {}",
                self.cfg.max_frames
            )));
        }
        let padded = rows
            .iter()
            .map(|r| {
                let n = r.dims()[0];
                Ok(r.pad_with_zeros(0, 0, len - n)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor::stack(&padded, 0)?;
        let pos = Tensor::stack(
            &spans
                .iter()
                .map(|&(fp, ft)| {
                    let p = self.positions.narrow(0, 0, fp.max(1))?.narrow(0, 0, fp)?;
                    let q = self.positions.narrow(0, 0, ft)?;
                    let both = Tensor::cat(&[p, q], 0)?;
                    Ok(both.pad_with_zeros(0, 0, len - fp - ft)?)
                })
                .collect::<Result<Vec<_>>>()?,
            0,
        )?;
        let mut h = (self.input.forward(&x)? + pos)?;
        let allowed: Vec<bool> = spans
            .iter()
            .flat_map(|&(fp, ft)| (0..len * len).map(move |i| i % len < fp + ft))
            .collect();
        let mask = additive_mask(&allowed, (b, len, len), dt)?;
        let tf = Tensor::from_vec(time_features(t, self.cfg.width), (b, 1, self.cfg.width), &Device::Cpu)?
            .to_dtype(dt)?;
        for (blk, tp) in self.blocks.iter().zip(&self.time_proj) {
            h = h.broadcast_add(&tp.forward(&tf)?)?;
            h = blk.forward(&h, Some(&mask))?;
        }
        let y = self.out.forward(&self.ln_f.forward(&h)?)?;
        spans
            .iter()
            .enumerate()
            .map(|(i, &(fp, ft))| Ok(y.get(i)?.narrow(0, fp, ft)?))
            .collect()
    }
}

/// `(1 / (F * D_mel)) * sum |pred - tar|`.
pub fn l1_loss(pred: &Mel, tar: &Mel) -> Result<f64> {
    pred.mean_abs_diff(tar)
}

/// Tensor form of [`l1_loss`].
pub fn l1_tensor(pred: &Tensor, tar: &Tensor) -> Result<Tensor> {
    if pred.dims() != tar.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", pred.dims(), tar.dims())));
    }
    Ok((pred - tar)?.abs()?.mean_all()?)
}

/// One flow-matching training example with all random draws fixed.
#[derive(Debug, Clone)]
pub struct CfmItem {
    pub ctx: FlowContext,
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
}

/// Batch loss: per-item L1 in the configured form, averaged over items.
pub fn cfm_loss(model: &S2MModel, items: &[CfmItem]) -> Result<Tensor> {
    let ctxs: Vec<FlowContext> = items.iter().map(|it| it.ctx.clone()).collect();
    let dt = model.dtype();
    let xs = items
        .iter()
        .map(|it| {
            let x0 = it.x0.to_dtype(dt)?;
            let x1 = it.x1.to_dtype(dt)?;
            Ok(((x0 * (1.0 - it.t))? + (x1 * it.t)?)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let ts: Vec<f64> = items.iter().map(|it| it.t).collect();
    let v = model.velocity(&ctxs, &xs, &ts)?;
    let mut total: Option<Tensor> = None;
    for ((it, vh), xt) in items.iter().zip(&v).zip(&xs) {
        let x0 = it.x0.to_dtype(dt)?;
        let x1 = it.x1.to_dtype(dt)?;
        let term = match model.cfg.loss_target {
            LossTarget::Velocity => l1_tensor(vh, &(&x1 - &x0)?)?,
            LossTarget::Reconstruction => l1_tensor(&(xt + (vh * (1.0 - it.t))?)?, &x1)?,
        };
        total = Some(match total {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    Ok((total.expect("non-empty batch") / items.len() as f64)?)
}

/// Standard-normal matrix drawn from `rng`.
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, dtype: DType) -> Result<Tensor> {
    let v: Vec<f32> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, (rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn draw_fusion<R: Rng + ?Sized>(rng: &mut R, prob: f64) -> bool {
    rng.random::<f64>() < prob
}

/// Integrates `dx/dt = field(x, t)` from `t = 0` to `t = 1` in `steps`
/// uniform steps.
pub fn integrate<F>(x0: &Tensor, steps: usize, solver: Solver, mut field: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::invalid("ODE steps must be >= 1"));
    }
    let h = 1.0 / steps as f64;
    let mut x = x0.clone();
    for i in 0..steps {
        let t = i as f64 * h;
        x = match solver {
            Solver::Euler => (&x + (field(&x, t)? * h)?)?,
            Solver::Midpoint => {
                let k1 = field(&x, t)?;
                let mid = (&x + (k1 * (h / 2.0))?)?;
                (&x + (field(&mid, t + h / 2.0)? * h)?)?
            }
        };
    }
    Ok(x)
}

/// Generates `n_frames` of mel from Gaussian noise.
pub fn generate_mel<R: Rng + ?Sized>(
    model: &S2MModel,
    q_fin: &Tensor,
    c: &Tensor,
    prompt: &Mel,
    n_frames: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Mel> {
    let ds = model.cfg.downsample_rate;
    let tokens = q_fin.dims2()?.0;
    if n_frames != tokens * ds {
        return Err(Error::shape(format!(
            "{n_frames} frames requested for {tokens} tokens at rate {ds}"
        )));
    }
    let dt = model.dtype();
    let ctx = FlowContext {
        prompt: prompt.to_tensor(dt)?,
        q_fin: q_fin.detach(),
        c: c.to_dtype(dt)?.detach(),
    };
    let x0 = gaussian(rng, n_frames, model.cfg.n_mels, dt)?;
    let x1 = integrate(&x0, steps, model.cfg.solver, |x, t| {
        let v = model.velocity(std::slice::from_ref(&ctx), std::slice::from_ref(x), &[t])?;
        Ok(v.into_iter().next().expect("one item").detach())
    })?;
    Mel::from_tensor(&x1)
}

/// Training material for one utterance: its mel trimmed to whole tokens,
/// its tokens and the token model's latents for them.
#[derive(Debug, Clone)]
pub struct S2MExample {
    pub mel: Mel,
    pub tokens: SemanticTokenSeq,
    pub h_gpt: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct S2MReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub fused_fraction: f64,
}

/// Splits an example at a token boundary so that the prompt keeps at
/// least `min_frames` frames and the target at least one token.
fn split_example<R: Rng + ?Sized>(ex: &S2MExample, ds: usize, min_frames: usize, rng: &mut R) -> Option<usize> {
    let n = ex.tokens.len();
    let lo = min_frames.div_ceil(ds);
    if n < lo + 1 {
        return None;
    }
    Some(rng.random_range(lo..n))
}

/// Trains the generator on `examples`; `conds` supplies frozen speaker
/// vectors for the prompt segments.
pub fn train_s2m(
    model: &mut S2MModel,
    conds: &Conditioners,
    examples: &[S2MExample],
    cfg: &S2MConfig,
) -> Result<S2MReport> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let ds = cfg.downsample_rate;
    let mut trainer = Trainer::new(model.store.trainable_vars()?, &cfg.optim, cfg.train_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf10);
    let mut losses = Vec::with_capacity(cfg.train_steps);
    let (mut fused, mut drawn) = (0usize, 0usize);
    let dt = model.dtype();
    for step in 0..cfg.train_steps {
        let mut items = Vec::with_capacity(cfg.batch_size);
        let mut prompts = Vec::with_capacity(cfg.batch_size);
        let mut pending = Vec::with_capacity(cfg.batch_size);
        while pending.len() < cfg.batch_size {
            let ex = &examples[rng.random_range(0..examples.len())];
            let Some(k) = split_example(ex, ds, cfg.min_prompt_frames, &mut rng) else {
                continue;
            };
            let fuse = draw_fusion(&mut rng, cfg.fusion_prob);
            drawn += 1;
            fused += usize::from(fuse);
            let t: f64 = rng.random();
            let target_frames = (ex.tokens.len() - k) * ds;
            let x0 = gaussian(&mut rng, target_frames, cfg.n_mels, dt)?;
            prompts.push(ex.mel.slice(0, k * ds)?);
            pending.push((ex, k, fuse, t, x0));
        }
        let prompt_refs: Vec<&Mel> = prompts.iter().collect();
        let c = conds.speaker.forward(&prompt_refs, false)?.detach();
        for (i, (ex, k, fuse, t, x0)) in pending.into_iter().enumerate() {
            let n = ex.tokens.len();
            let tail = SemanticTokenSeq::new(ex.tokens.tokens[k..].to_vec());
            let q_sem = model.embed(&tail)?;
            let h = ex.h_gpt.narrow(0, k, n - k)?;
            let q = model.fuse_latents(Some(&h), &q_sem, fuse)?;
            items.push(CfmItem {
                ctx: FlowContext {
                    prompt: prompts[i].to_tensor(dt)?,
                    q_fin: q.q_fin,
                    c: c.get(i)?,
                },
                x0,
                x1: ex.mel.slice(k * ds, n * ds)?.to_tensor(dt)?,
                t,
            });
        }
        let loss = cfm_loss(model, &items)?;
        let v = trainer.step(&loss).map_err(|e| Error::Stage {
            stage: "s2m".into(),
            source: Box::new(e),
        })?;
        losses.push(v);
        if step % 50 == 0 || step + 1 == cfg.train_steps {
            log::info!("s2m step {step}: loss {v:.4}");
        }
    }
    Ok(S2MReport {
        steps: cfg.train_steps,
        losses,
        fused_fraction: fused as f64 / drawn.max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> S2MConfig {
        S2MConfig {
            width: 8,
            layers: 2,
            heads: 2,
            n_mels: 4,
            cond_dim: 6,
            v_sem: 5,
            downsample_rate: 2,
            fusion_hidden: 10,
            max_frames: 32,
            ..Default::default()
        }
    }

    fn ctx(model: &S2MModel, tokens: &[u32], fuse: bool, h: Option<&Tensor>) -> FlowContext {
        let q = model.embed(&SemanticTokenSeq::new(tokens.to_vec())).unwrap();
        let dt = model.dtype();
        FlowContext {
            prompt: Tensor::from_vec(
                (0..12).map(|i| (i as f64 * 0.3).cos()).collect::<Vec<f64>>(),
                (3, 4),
                &Device::Cpu,
            )
            .unwrap()
            .to_dtype(dt)
            .unwrap(),
            q_fin: model.fuse_latents(h, &q, fuse).unwrap().q_fin,
            c: Tensor::from_vec(vec![0.2f64, -0.1, 0.4, 0.0, 0.3, -0.5], 6, &Device::Cpu)
                .unwrap()
                .to_dtype(dt)
                .unwrap(),
        }
    }

    #[test]
    fn l1_hand_values() {
        let a = Mel::new(2, 3, vec![0.0; 6]).unwrap();
        let b = Mel::new(2, 3, vec![0.0, 1.0, -2.0, 3.0, -4.0, 5.0]).unwrap();
        assert!((l1_loss(&a, &b).unwrap() - 2.5).abs() < 1e-12);
        let c = Mel::new(2, 3, vec![1.0; 6]).unwrap();
        assert!((l1_loss(&c, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(l1_loss(&b, &b).unwrap(), 0.0);
        let tar = Mel::new(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let pred = Mel::new(2, 2, vec![1.5, -0.5, 2.5, 0.5]).unwrap();
        assert!((l1_loss(&pred, &tar).unwrap() - 1.0).abs() < 1e-12);
        assert!(l1_loss(&a, &tar).is_err());
    }

    #[test]
    fn unfused_output_ignores_latents() {
        let m = S2MModel::new(&toy_cfg()).unwrap();
        let q = m.embed(&SemanticTokenSeq::new(vec![1, 2, 3])).unwrap();
        let h1 = Tensor::ones((3, 6), DType::F32, &Device::Cpu).unwrap();
        let h2 = (h1.clone() * 7.0).unwrap();
        let a = m.fuse_latents(Some(&h1), &q, false).unwrap().q_fin.to_vec2::<f32>().unwrap();
        let b = m.fuse_latents(Some(&h2), &q, false).unwrap().q_fin.to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
        let zero = Tensor::zeros((3, 6), DType::F32, &Device::Cpu).unwrap();
        let z = m.fuse_latents(Some(&zero), &q, true).unwrap().q_fin.to_vec2::<f32>().unwrap();
        assert_eq!(a, z);
        let c = m.fuse_latents(Some(&h2), &q, true).unwrap().q_fin.to_vec2::<f32>().unwrap();
        assert_ne!(a, c);
        assert!(m.fuse_latents(Some(&h1.narrow(0, 0, 2).unwrap()), &q, true).is_err());
    }

    #[test]
    fn planted_constant_field_is_integrated_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = gaussian(&mut rng, 5, 4, DType::F64).unwrap();
        let y = gaussian(&mut rng, 5, 4, DType::F64).unwrap();
        let v = (&y - &x0).unwrap();
        for solver in [Solver::Euler, Solver::Midpoint] {
            for steps in [1, 3, 16, 32] {
                let out = integrate(&x0, steps, solver, |_, _| Ok(v.clone())).unwrap();
                let err = (out - &y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
                assert!(err < 1e-12, "{solver:?} {steps}: {err}");
            }
        }
    }

    #[test]
    fn planted_velocity_gives_zero_loss_and_zero_field_gives_mean_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = gaussian(&mut rng, 6, 4, DType::F64).unwrap();
        let x1 = gaussian(&mut rng, 6, 4, DType::F64).unwrap();
        let u = (&x1 - &x0).unwrap();
        assert_eq!(l1_tensor(&u, &u).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let zero = u.zeros_like().unwrap();
        let got = l1_tensor(&zero, &u).unwrap().to_scalar::<f64>().unwrap();
        let a = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = x1.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let want = a.iter().zip(&b).map(|(p, q)| (q - p).abs()).sum::<f64>() / 24.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn generation_is_seeded() {
        let m = S2MModel::new(&toy_cfg()).unwrap();
        let c = ctx(&m, &[0, 4], true, Some(&Tensor::ones((2, 6), DType::F32, &Device::Cpu).unwrap()));
        let prompt = Mel::filled(3, 4, 0.2).unwrap();
        let gen = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            generate_mel(&m, &c.q_fin, &c.c, &prompt, 4, 4, &mut rng).unwrap()
        };
        assert_eq!(gen(1), gen(1));
        assert_ne!(gen(1), gen(2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate_mel(&m, &c.q_fin, &c.c, &prompt, 5, 4, &mut rng).is_err());
    }

    #[test]
    fn fusion_draws_match_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 10_000;
        let k = (0..n).filter(|_| draw_fusion(&mut rng, 0.5)).count();
        assert!(((k as f64 / n as f64) - 0.5).abs() <= 0.02);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = S2MModel::with_dtype(&toy_cfg(), DType::F64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = gaussian(&mut rng, 3, 6, DType::F64).unwrap();
        let x0 = gaussian(&mut rng, 6, 4, DType::F64).unwrap();
        let x1 = gaussian(&mut rng, 6, 4, DType::F64).unwrap();
        let loss = |m: &S2MModel| {
            let item = CfmItem {
                ctx: ctx(m, &[1, 0, 3], true, Some(&h)),
                x0: x0.clone(),
                x1: x1.clone(),
                t: 0.37,
            };
            cfm_loss(m, &[item]).unwrap()
        };
        let grads = loss(&m).backward().unwrap();
        let mut checked = 0;
        for name in ["input.weight", "block1.ff.fc1.weight", "fuse1.weight", "sem_table", "out.bias"] {
            let p = m.store().get(name).unwrap();
            let g = grads.get(&p).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = p.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for idx in [0, base.len() / 2, base.len() - 1] {
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[idx] += delta;
                    m.store()
                        .set(name, &Tensor::from_vec(v, p.dims(), &Device::Cpu).unwrap())
                        .unwrap();
                    let l = loss(&m).to_scalar::<f64>().unwrap();
                    m.store()
                        .set(name, &Tensor::from_vec(base.clone(), p.dims(), &Device::Cpu).unwrap())
                        .unwrap();
                    l
                };
                let eps = 1e-6;
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = g[idx];
                if fd.abs() < 1e-9 && an.abs() < 1e-9 {
                    continue;
                }
                let rel = (an - fd).abs() / an.abs().max(fd.abs());
                assert!(rel < 1e-3, "{name}[{idx}]: analytic {an} vs fd {fd}");
                checked += 1;
            }
        }
        assert!(checked >= 10);
    }
}
