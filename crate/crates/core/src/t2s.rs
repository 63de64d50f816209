//! Autoregressive text-to-semantic transformer with duration control.
//!
//! Every input sequence has the layout
//! `[cond, p, <BT>, text..., <BA>, s_0, ..., s_{T-1}]`. The prefix up to
//! and including the text is visible to every position; the `<BA>` and
//! semantic positions are causal among themselves. Output at `<BA>`
//! predicts `s_0`, output at `s_j` predicts `s_{j+1}` and output at
//! `s_{T-1}` predicts `<EA>`.
//!
//! One table serves two roles. Row `i` is added as the positional encoding
//! of the `i`-th position of the semantic segment (`<BA>` is position 0),
//! and row `T` is the duration embedding `p` for a target of `T` tokens.
//! The position that must emit `<EA>` therefore carries exactly the row
//! that was placed in the prefix as `p`.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecModel, SemanticTokenSeq};
use crate::conditioners::{Conditioners, EmotionEmbedding, GrlConfig, SpeakerEmbedding};
use crate::corpus::{speed_perturb, Corpus};
use crate::error::{Error, Result};
use crate::mel::Mel;
use crate::nn::{additive_mask, grl, harmonic_table, log_softmax_last, Block, LayerNorm, Linear};
use crate::optim::{OptimConfig, Trainer};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct T2SConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub v_text: usize,
    pub v_sem: usize,
    /// Rows of the tied duration/position table.
    pub l_speech: usize,
    pub max_text: usize,
    /// Largest total input length accepted by the model.
    pub context: usize,
    pub seed: u64,
}

impl Default for T2SConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            layers: 4,
            heads: 4,
            v_text: 32,
            v_sem: 64,
            l_speech: 64,
            max_text: 64,
            context: 512,
            seed: 31,
        }
    }
}

/// Semantic tokens plus the final-layer hidden state at each of them.
#[derive(Debug, Clone)]
pub struct T2SOutput {
    pub tokens: SemanticTokenSeq,
    /// `[tokens, dim]`.
    pub h_gpt: Tensor,
    /// Generation hit `max_len` before `<EA>`.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DurationMode {
    /// No constraint on `<EA>`; the model decides when to stop.
    Learned,
    /// `<EA>` is masked before step `T` and forced at step `T`.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sampling {
    Greedy,
    TopK { k: usize, temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub max_len: usize,
    pub mode: DurationMode,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            max_len: 60,
            mode: DurationMode::Learned,
            sampling: Sampling::Greedy,
            seed: 0,
        }
    }
}

/// One fully embedded input sequence.
#[derive(Debug, Clone)]
pub struct T2SInputSequence {
    pub cond: Tensor,
    pub p: Tensor,
    pub text: Vec<u32>,
    pub sem: Vec<u32>,
}

impl T2SInputSequence {
    /// Row offsets of `(cond, p, <BT>, text start, <BA>, sem start)`.
    pub fn offsets(&self) -> [usize; 6] {
        let ba = 3 + self.text.len();
        [0, 1, 2, 3, ba, ba + 1]
    }

    pub fn len(&self) -> usize {
        4 + self.text.len() + self.sem.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Batched teacher-forcing input. `cond` and `p` are `[b, dim]`.
#[derive(Debug, Clone)]
pub struct T2SBatch {
    pub cond: Tensor,
    pub p: Tensor,
    pub texts: Vec<Vec<u32>>,
    pub sems: Vec<Vec<u32>>,
}

/// Teacher-forced outputs for a batch.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[b, ls + 1, v_sem + 1]`; position `t` predicts semantic token `t`.
    pub logits: Tensor,
    /// Final-layer states over the semantic segment `[b, ls + 1, dim]`;
    /// index 0 is `<BA>`, index `j + 1` is token `j`.
    pub states: Tensor,
    pub sem_lens: Vec<usize>,
}

impl Forward {
    /// `H_GPT` of batch item `i`: states at the inputs of its tokens.
    pub fn h_gpt(&self, i: usize) -> Result<Tensor> {
        let t = self.sem_lens[i];
        Ok(self.states.get(i)?.narrow(0, 1, t)?)
    }
}

pub struct T2SModel {
    cfg: T2SConfig,
    store: ParamStore,
    text_emb: Tensor,
    text_pos: Tensor,
    sem_emb: Tensor,
    bt: Tensor,
    ba: Tensor,
    tied: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
    stages_done: u8,
}

impl std::fmt::Debug for T2SModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("T2SModel")
            .field("cfg", &self.cfg)
            .field("stages_done", &self.stages_done)
            .finish()
    }
}

impl T2SModel {
    pub fn new(cfg: &T2SConfig) -> Result<Self> {
        if cfg.l_speech < 2 || cfg.v_sem < 2 || cfg.v_text < 1 {
            return Err(Error::invalid("t2s: l_speech, v_sem must be >= 2 and v_text >= 1"));
        }
        let d = cfg.dim;
        let mut store = ParamStore::new("t2s", cfg.seed, DType::F32);
        let text_emb = store.param("text_emb", (cfg.v_text, d), Init::Normal(1.0))?;
        let text_pos = store.param(
            "text_pos",
            (cfg.max_text, d),
            Init::Values(harmonic_table(cfg.max_text, d)),
        )?;
        let sem_emb = store.param("sem_emb", (cfg.v_sem, d), Init::Normal(1.0))?;
        let bt = store.param("bt", d, Init::Normal(1.0))?;
        let ba = store.param("ba", d, Init::Normal(1.0))?;
        let tied = store.param(
            "tied",
            (cfg.l_speech, d),
            Init::Values(harmonic_table(cfg.l_speech, d)),
        )?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&mut store, &format!("block{i}"), d, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut store, "ln_f", d)?;
        let head = Linear::new(&mut store, "head", d, cfg.v_sem + 1)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            text_emb,
            text_pos,
            sem_emb,
            bt,
            ba,
            tied,
            blocks,
            ln_f,
            head,
            stages_done: 0,
        })
    }

    pub fn config(&self) -> &T2SConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn stages_done(&self) -> u8 {
        self.stages_done
    }

    pub fn set_stages_done(&mut self, s: u8) {
        self.stages_done = s;
    }

    /// Id of `<EA>` in the output vocabulary.
    pub fn ea(&self) -> u32 {
        self.cfg.v_sem as u32
    }

    /// Semantic token embedding table `[v_sem, dim]`.
    pub fn sem_embedding(&self) -> &Tensor {
        &self.sem_emb
    }

    /// The tied table `[l_speech, dim]`.
    pub fn tied_table(&self) -> &Tensor {
        &self.tied
    }

    /// `p = W_num h(T)`: row `T` of the tied table.
    pub fn duration_embedding(&self, t: usize) -> Result<Tensor> {
        if t >= self.cfg.l_speech {
            return Err(Error::invalid(format!(
                "duration {t} outside tied table of {} rows",
                self.cfg.l_speech
            )));
        }
        Ok(self.tied.get(t)?)
    }

    /// Positional encoding added at position `i` of the semantic segment.
    pub fn semantic_position(&self, i: usize) -> Result<Tensor> {
        if i >= self.cfg.l_speech {
            return Err(Error::invalid(format!("semantic position {i} outside tied table")));
        }
        Ok(self.tied.get(i)?)
    }

    pub fn zero_p(&self) -> Result<Tensor> {
        Ok(Tensor::zeros(self.cfg.dim, DType::F32, &Device::Cpu)?)
    }

    fn check_tokens(&self, texts: &[Vec<u32>], sems: &[Vec<u32>]) -> Result<()> {
        for t in texts {
            if t.len() > self.cfg.max_text {
                return Err(Error::invalid(format!(
                    "text of {} tokens exceeds max_text {}",
                    t.len(),
                    self.cfg.max_text
                )));
            }
            if let Some(x) = t.iter().find(|&&x| x as usize >= self.cfg.v_text) {
                return Err(Error::invalid(format!("text token {x} >= {}", self.cfg.v_text)));
            }
        }
        for s in sems {
            if s.len() + 1 > self.cfg.l_speech {
                return Err(Error::invalid(format!(
                    "{} semantic tokens need more than {} positions",
                    s.len(),
                    self.cfg.l_speech
                )));
            }
            if let Some(x) = s.iter().find(|&&x| x as usize >= self.cfg.v_sem) {
                return Err(Error::invalid(format!("semantic token {x} >= {}", self.cfg.v_sem)));
            }
        }
        Ok(())
    }

    /// Teacher-forced pass over a batch.
    pub fn forward(&self, batch: &T2SBatch) -> Result<Forward> {
        let b = batch.texts.len();
        if b == 0 || batch.sems.len() != b {
            return Err(Error::invalid("empty or ragged t2s batch"));
        }
        self.check_tokens(&batch.texts, &batch.sems)?;
        let d = self.cfg.dim;
        let (cb, cd) = batch.cond.dims2()?;
        let (pb, pd) = batch.p.dims2()?;
        if cb != b || pb != b || cd != d || pd != d {
            return Err(Error::shape(format!(
                "cond {:?} / p {:?} for batch {b} of width {d}",
                batch.cond.dims(),
                batch.p.dims()
            )));
        }
        let lt = batch.texts.iter().map(|t| t.len()).max().unwrap_or(0).max(1);
        let ls = batch.sems.iter().map(|s| s.len()).max().unwrap_or(0);
        let prefix = 3 + lt;
        let total = prefix + 1 + ls;
        if total > self.cfg.context {
            return Err(Error::invalid(format!(
                "sequence of {total} positions exceeds context {}",
                self.cfg.context
            )));
        }
        let dev = Device::Cpu;
        let text_ids: Vec<u32> = batch
            .texts
            .iter()
            .flat_map(|t| t.iter().copied().chain(std::iter::repeat(0)).take(lt))
            .collect();
        let text = self
            .text_emb
            .index_select(&Tensor::from_vec(text_ids, b * lt, &dev)?, 0)?
            .reshape((b, lt, d))?
            .broadcast_add(&self.text_pos.narrow(0, 0, lt)?)?;
        let mut parts = vec![
            batch.cond.unsqueeze(1)?,
            batch.p.unsqueeze(1)?,
            self.bt.reshape((1, 1, d))?.broadcast_as((b, 1, d))?,
            text,
            (&self.ba + self.tied.get(0)?)?
                .reshape((1, 1, d))?
                .broadcast_as((b, 1, d))?,
        ];
        if ls > 0 {
            let sem_ids: Vec<u32> = batch
                .sems
                .iter()
                .flat_map(|s| s.iter().copied().chain(std::iter::repeat(0)).take(ls))
                .collect();
            let sem = self
                .sem_emb
                .index_select(&Tensor::from_vec(sem_ids, b * ls, &dev)?, 0)?
                .reshape((b, ls, d))?
                .broadcast_add(&self.tied.narrow(0, 1, ls)?)?;
            parts.push(sem);
        }
        let mut x = Tensor::cat(&parts, 1)?.contiguous()?;

        let mut allowed = vec![false; b * total * total];
        for (bi, t) in batch.texts.iter().enumerate() {
            let key_ok = |j: usize| j < 3 || j >= prefix || j - 3 < t.len();
            for i in 0..total {
                for j in 0..total {
                    let visible = if i < prefix { j < prefix } else { j < prefix || j <= i };
                    allowed[(bi * total + i) * total + j] = visible && key_ok(j);
                }
            }
        }
        let mask = additive_mask(&allowed, (b, total, total), DType::F32)?;
        for blk in &self.blocks {
            x = blk.forward(&x, Some(&mask))?;
        }
        let states = self.ln_f.forward(&x.narrow(1, prefix, ls + 1)?)?;
        let logits = self.head.forward(&states)?;
        Ok(Forward {
            logits,
            states,
            sem_lens: batch.sems.iter().map(|s| s.len()).collect(),
        })
    }

    /// Single-sequence teacher forcing: logits `[T + 1, v_sem + 1]` and
    /// `H_GPT` `[T, dim]`.
    pub fn forward_teacher_forced(&self, seq: &T2SInputSequence) -> Result<(Tensor, Tensor)> {
        let batch = T2SBatch {
            cond: seq.cond.unsqueeze(0)?,
            p: seq.p.unsqueeze(0)?,
            texts: vec![seq.text.clone()],
            sems: vec![seq.sem.clone()],
        };
        let out = self.forward(&batch)?;
        Ok((out.logits.get(0)?, out.h_gpt(0)?))
    }
}

/// Builds the conditioning segment of one input sequence.
///
/// `cond` is `c` alone or `c + e`. Passing `e` while the speaker
/// conditioner is still trainable is rejected: emotion conditioning
/// belongs to the stages that follow speaker pre-training.
pub fn assemble(
    model: &T2SModel,
    conds: &Conditioners,
    c: &SpeakerEmbedding,
    e: Option<&EmotionEmbedding>,
    duration: Option<usize>,
    text: &[u32],
    sem: &[u32],
) -> Result<T2SInputSequence> {
    let d = model.cfg.dim;
    if c.dim() != d {
        return Err(Error::shape(format!("c has width {}, model {d}", c.dim())));
    }
    let mut cond = c.to_tensor()?;
    if let Some(e) = e {
        if !conds.speaker.store().is_frozen() {
            return Err(Error::Config(
                "emotion conditioning requires a frozen speaker conditioner".into(),
            ));
        }
        if e.dim() != d {
            return Err(Error::shape(format!("e has width {}, model {d}", e.dim())));
        }
        cond = (cond + e.to_tensor()?)?;
    }
    let p = match duration {
        Some(t) => model.duration_embedding(t)?,
        None => model.zero_p()?,
    };
    model.check_tokens(&[text.to_vec()], &[sem.to_vec()])?;
    Ok(T2SInputSequence {
        cond,
        p,
        text: text.to_vec(),
        sem: sem.to_vec(),
    })
}

/// Autoregressive loss of one sequence: mean token negative
/// log-likelihood over the `T + 1` targets (tokens then `<EA>`) minus `alpha * ln q(e)`.
///
/// `q_e` is floored at `1e-12` before the logarithm.
pub fn ar_loss(logits: &Tensor, targets: &[u32], q_e: f64, alpha: f64) -> Result<f64> {
    let (n, _) = logits.dims2()?;
    if n != targets.len() || n == 0 {
        return Err(Error::shape(format!(
            "{n} logit rows for {} targets",
            targets.len()
        )));
    }
    if !(q_e >= 0.0 && q_e <= 1.0) {
        return Err(Error::invalid(format!("q(e) = {q_e} outside [0, 1]")));
    }
    let lp = log_softmax_last(&logits.to_dtype(DType::F64)?)?;
    let ids = Tensor::from_vec(targets.to_vec(), (n, 1), &Device::Cpu)?;
    let nll = lp.gather(&ids, 1)?.mean_all()?.neg()?.to_scalar::<f64>()?;
    let q = if q_e < 1e-12 {
        log::warn!("q(e) = {q_e} floored at 1e-12");
        1e-12
    } else {
        q_e
    };
    Ok(nll - alpha * q.ln())
}

/// Batched token term of [`ar_loss`]: per-sequence mean NLL over `T_b + 1`
/// targets, averaged over the batch. Also returns the number of correct
/// argmax predictions and the number of scored positions.
pub fn token_loss(fwd: &Forward, sems: &[Vec<u32>], ea: u32) -> Result<(Tensor, usize, usize)> {
    let (b, s, _) = fwd.logits.dims3()?;
    let mut ids = vec![0u32; b * s];
    let mut weights = vec![0f32; b * s];
    for (bi, sem) in sems.iter().enumerate() {
        let w = 1.0 / (sem.len() + 1) as f32 / b as f32;
        for t in 0..=sem.len() {
            ids[bi * s + t] = if t < sem.len() { sem[t] } else { ea };
            weights[bi * s + t] = w;
        }
    }
    let lp = log_softmax_last(&fwd.logits)?;
    let idt = Tensor::from_vec(ids.clone(), (b, s, 1), &Device::Cpu)?;
    let picked = lp.gather(&idt, 2)?.squeeze(2)?;
    let wt = Tensor::from_vec(weights.clone(), (b, s), &Device::Cpu)?;
    let loss = (picked * wt)?.sum_all()?.neg()?;
    let pred = fwd.logits.argmax(D::Minus1)?.to_vec2::<u32>()?;
    let mut correct = 0;
    let mut total = 0;
    for bi in 0..b {
        for t in 0..s {
            if weights[bi * s + t] > 0.0 {
                total += 1;
                if pred[bi][t] == ids[bi * s + t] {
                    correct += 1;
                }
            }
        }
    }
    Ok((loss, correct, total))
}

/// One item of a batched decode.
#[derive(Debug, Clone)]
pub struct DecodeRequest {
    /// `c` or `c + e`.
    pub cond: Vec<f32>,
    /// Target token count, or `None` for free-form generation (`p = 0`).
    pub duration: Option<usize>,
    pub text: Vec<u32>,
}

/// Lock-step batched generation.
///
/// Rows that have finished keep receiving a placeholder token so the
/// batch stays rectangular; causal masking keeps it from influencing
/// anything they already produced.
pub fn decode_batch(
    model: &T2SModel,
    reqs: &[DecodeRequest],
    opts: &DecodeOptions,
) -> Result<Vec<T2SOutput>> {
    if reqs.is_empty() {
        return Ok(Vec::new());
    }
    let d = model.cfg.dim;
    let max_len = opts.max_len.min(model.cfg.l_speech - 1);
    for r in reqs {
        if r.cond.len() != d {
            return Err(Error::shape(format!("cond width {} != {d}", r.cond.len())));
        }
        if let Some(t) = r.duration {
            if t >= model.cfg.l_speech {
                return Err(Error::invalid(format!(
                    "duration {t} >= table size {}",
                    model.cfg.l_speech
                )));
            }
        }
        if opts.mode == DurationMode::Strict && r.duration.is_none() {
            return Err(Error::invalid("strict decoding needs a target duration"));
        }
    }
    let b = reqs.len();
    let cond = Tensor::from_vec(
        reqs.iter().flat_map(|r| r.cond.iter().copied()).collect::<Vec<_>>(),
        (b, d),
        &Device::Cpu,
    )?;
    let p = Tensor::stack(
        &reqs
            .iter()
            .map(|r| match r.duration {
                Some(t) => model.duration_embedding(t),
                None => model.zero_p(),
            })
            .collect::<Result<Vec<_>>>()?,
        0,
    )?
    .detach();
    let texts: Vec<Vec<u32>> = reqs.iter().map(|r| r.text.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ea = model.ea() as usize;
    let limit: Vec<usize> = reqs
        .iter()
        .map(|r| match opts.mode {
            DurationMode::Strict => r.duration.expect("checked above"),
            DurationMode::Learned => max_len,
        })
        .collect();
    let mut generated: Vec<Vec<u32>> = vec![Vec::new(); b];
    let mut fed: Vec<Vec<u32>> = vec![Vec::new(); b];
    let mut done = vec![false; b];
    let mut truncated = vec![false; b];
    let mut step = 0;
    while !done.iter().all(|&x| x) {
        let fwd = model.forward(&T2SBatch {
            cond: cond.clone(),
            p: p.clone(),
            texts: texts.clone(),
            sems: fed.clone(),
        })?;
        let rows = fwd.logits.narrow(1, step, 1)?.squeeze(1)?.detach().to_vec2::<f32>()?;
        for i in 0..b {
            if !done[i] {
                let mut row = rows[i].clone();
                let tok = match opts.mode {
                    DurationMode::Strict if step >= limit[i] => ea,
                    DurationMode::Strict => {
                        row[ea] = f32::NEG_INFINITY;
                        pick(&row, &opts.sampling, &mut rng)
                    }
                    DurationMode::Learned => pick(&row, &opts.sampling, &mut rng),
                };
                if tok == ea {
                    done[i] = true;
                } else if step >= limit[i] {
                    done[i] = true;
                    truncated[i] = true;
                } else {
                    generated[i].push(tok as u32);
                }
            }
            let next = generated[i].get(step).copied().unwrap_or(0);
            fed[i].push(next);
        }
        step += 1;
    }
    let mut outs = Vec::with_capacity(b);
    for (i, tokens) in generated.into_iter().enumerate() {
        if truncated[i] {
            log::warn!("decode item {i}: no <EA> within {max_len} tokens");
        }
        let fwd = model.forward(&T2SBatch {
            cond: cond.narrow(0, i, 1)?,
            p: p.narrow(0, i, 1)?,
            texts: vec![texts[i].clone()],
            sems: vec![tokens.clone()],
        })?;
        outs.push(T2SOutput {
            h_gpt: fwd.h_gpt(0)?.detach(),
            tokens: SemanticTokenSeq {
                tokens,
                terminated_eos: !truncated[i],
            },
            truncated: truncated[i],
        });
    }
    Ok(outs)
}

/// Single-utterance generation with `cond = c` or `c + e`.
#[allow(clippy::too_many_arguments)]
pub fn decode(
    model: &T2SModel,
    c: &SpeakerEmbedding,
    e: Option<&EmotionEmbedding>,
    duration: Option<usize>,
    text: &[u32],
    max_len: usize,
    mode: DurationMode,
) -> Result<T2SOutput> {
    let mut cond = c.0.clone();
    if let Some(e) = e {
        if e.dim() != cond.len() {
            return Err(Error::shape("c and e widths differ"));
        }
        for (a, b) in cond.iter_mut().zip(&e.0) {
            *a += b;
        }
    }
    let opts = DecodeOptions {
        max_len,
        mode,
        ..Default::default()
    };
    let mut out = decode_batch(
        model,
        &[DecodeRequest {
            cond,
            duration,
            text: text.to_vec(),
        }],
        &opts,
    )?;
    Ok(out.remove(0))
}

fn pick(row: &[f32], sampling: &Sampling, rng: &mut ChaCha8Rng) -> usize {
    let argmax = |r: &[f32]| {
        let mut best = 0;
        for (k, v) in r.iter().enumerate() {
            if *v > r[best] {
                best = k;
            }
        }
        best
    };
    match *sampling {
        Sampling::Greedy => argmax(row),
        Sampling::TopK { k, temperature } => {
            let mut idx: Vec<usize> = (0..row.len()).filter(|&i| row[i].is_finite()).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(k.max(1));
            let t = temperature.max(1e-6);
            let m = row[idx[0]] as f64;
            let w: Vec<f64> = idx.iter().map(|&i| ((row[i] as f64 - m) / t).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (i, wi) in idx.iter().zip(&w) {
                if u < *wi {
                    return *i;
                }
                u -= wi;
            }
            *idx.last().unwrap()
        }
    }
}

// ---------------------------------------------------------------------------
// Three-stage training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Probability that `p` is replaced by the zero vector for a sample.
    pub p_zero_prob: f64,
    /// Interval for the independent speed factors of target and prompt.
    pub speed_range: (f64, f64),
    /// Probability that a sample is speed-perturbed at all.
    pub speed_prob: f64,
    pub alpha: f64,
    pub grl_lambda: f64,
    /// Extra classifier-only updates per stage-2 step, on the detached `e`.
    pub adversary_steps: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 24,
            p_zero_prob: 0.3,
            speed_range: (0.9, 1.1),
            speed_prob: 0.5,
            alpha: 0.1,
            grl_lambda: 1.0,
            adversary_steps: 20,
            optim: OptimConfig::default(),
            seed: 41,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p_zero_prob", self.p_zero_prob),
            ("speed_prob", self.speed_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        let (lo, hi) = self.speed_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("bad speed range ({lo}, {hi})")));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        GrlConfig::new(self.grl_lambda)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-sample random choices of a training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditioningDraw {
    pub p_zero: bool,
    pub r_target: f64,
    pub r_prompt: f64,
}

pub fn draw_conditioning<R: Rng + ?Sized>(cfg: &StageConfig, rng: &mut R) -> ConditioningDraw {
    let p_zero = rng.random::<f64>() < cfg.p_zero_prob;
    let perturb = rng.random::<f64>() < cfg.speed_prob;
    let (lo, hi) = cfg.speed_range;
    let r_target = rng.random_range(lo..=hi);
    let r_prompt = rng.random_range(lo..=hi);
    if perturb {
        ConditioningDraw {
            p_zero,
            r_target,
            r_prompt,
        }
    } else {
        ConditioningDraw {
            p_zero,
            r_target: 1.0,
            r_prompt: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub p_zero_fraction: f64,
    /// Teacher-forced token accuracy over the last tenth of training.
    pub final_accuracy: f64,
}

/// Deterministic prompt choices used for evaluation: the timbre prompt is
/// the next utterance of the same speaker and the style prompt is the
/// first utterance with the same label from another speaker (falling back
/// to the same speaker, then to the utterance itself).
pub fn reference_prompts(corpus: &Corpus) -> Vec<(usize, usize)> {
    let utts = corpus.utterances();
    (0..utts.len())
        .map(|i| {
            let u = &utts[i];
            let same: Vec<usize> = (0..utts.len())
                .filter(|&j| utts[j].speaker_id == u.speaker_id)
                .collect();
            let pos = same.iter().position(|&j| j == i).unwrap_or(0);
            let prompt = same[(pos + 1) % same.len()];
            let style = (0..utts.len())
                .find(|&j| utts[j].emotion == u.emotion && utts[j].speaker_id != u.speaker_id)
                .or_else(|| (0..utts.len()).find(|&j| j != i && utts[j].emotion == u.emotion))
                .unwrap_or(i);
            (prompt, style)
        })
        .collect()
}

struct Pools {
    by_speaker: HashMap<String, Vec<usize>>,
    by_emotion: HashMap<crate::Emotion, Vec<usize>>,
}

impl Pools {
    fn new(corpus: &Corpus) -> Self {
        let mut by_speaker: HashMap<String, Vec<usize>> = HashMap::new();
        let mut by_emotion: HashMap<crate::Emotion, Vec<usize>> = HashMap::new();
        for (i, u) in corpus.utterances().iter().enumerate() {
            by_speaker.entry(u.speaker_id.clone()).or_default().push(i);
            by_emotion.entry(u.emotion).or_default().push(i);
        }
        Self {
            by_speaker,
            by_emotion,
        }
    }

    fn prompt_for<R: Rng + ?Sized>(&self, corpus: &Corpus, i: usize, rng: &mut R) -> usize {
        let u = &corpus.utterances()[i];
        let others: Vec<usize> = self.by_speaker[&u.speaker_id]
            .iter()
            .copied()
            .filter(|&j| j != i)
            .collect();
        others[rng.random_range(0..others.len())]
    }

    fn style_for<R: Rng + ?Sized>(&self, corpus: &Corpus, i: usize, rng: &mut R) -> usize {
        let utts = corpus.utterances();
        let u = &utts[i];
        let pool = &self.by_emotion[&u.emotion];
        let cross: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&j| utts[j].speaker_id != u.speaker_id)
            .collect();
        let other: Vec<usize> = pool.iter().copied().filter(|&j| j != i).collect();
        let pick_from = if !cross.is_empty() {
            cross
        } else if !other.is_empty() {
            other
        } else {
            vec![i]
        };
        pick_from[rng.random_range(0..pick_from.len())]
    }
}

fn stack_p(model: &T2SModel, durations: &[Option<usize>]) -> Result<Tensor> {
    let rows = durations
        .iter()
        .map(|d| match d {
            Some(t) => model.duration_embedding(*t),
            None => model.zero_p(),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&rows, 0)?)
}

fn encode_checked(codec: &CodecModel, model: &T2SModel, mel: &Mel) -> Result<Vec<u32>> {
    let toks = codec.encode(mel)?.tokens;
    if toks.len() + 1 > model.cfg.l_speech {
        return Err(Error::invalid(format!(
            "{} tokens do not fit a tied table of {} rows",
            toks.len(),
            model.cfg.l_speech
        )));
    }
    Ok(toks)
}

/// Runs one training stage in place.
///
/// Stage 1 trains the token model and the speaker conditioner with
/// `cond = c`. Stage 2 freezes the speaker conditioner and trains the
/// token model, the emotion conditioner and the adversarial speaker
/// classifier with `cond = c + e`. Stage 3 freezes every conditioner.
pub fn stage_train(
    stage: u8,
    corpus: &Corpus,
    model: &mut T2SModel,
    conds: &mut Conditioners,
    codec: &CodecModel,
    cfg: &StageConfig,
) -> Result<StageReport> {
    cfg.validate()?;
    corpus.check_pairable()?;
    corpus.validate_text(model.cfg.v_text)?;
    match stage {
        1 => {}
        2 | 3 if model.stages_done >= stage - 1 => {}
        2 | 3 => {
            return Err(Error::Config(format!(
                "stage {stage} needs stage {} to be complete",
                stage - 1
            )))
        }
        _ => return Err(Error::invalid(format!("unknown stage {stage}"))),
    }
    let speaker_ids = corpus.speaker_ids();
    let mut vars = model.store.trainable_vars()?;
    match stage {
        1 => vars.extend(conds.speaker.store().trainable_vars()?),
        2 => {
            conds.speaker.store_mut().freeze();
            vars.extend(conds.emotion.store().trainable_vars()?);
            vars.extend(conds.classifier.store().trainable_vars()?);
        }
        _ => {
            conds.speaker.store_mut().freeze();
            conds.emotion.store_mut().freeze();
            conds.classifier.store_mut().freeze();
        }
    }
    let mut trainer = Trainer::new(vars, &cfg.optim, cfg.steps)?;
    let mut adversary = if stage == 2 && cfg.adversary_steps > 0 {
        Some(Trainer::new(
            conds.classifier.store().trainable_vars()?,
            &cfg.optim,
            cfg.steps * cfg.adversary_steps,
        )?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(stage as u64 * 1_000_003));
    let pools = Pools::new(corpus);
    let utts = corpus.utterances();
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut zeroed = 0usize;
    let mut drawn = 0usize;
    let tail_from = cfg.steps - cfg.steps / 10;
    let (mut tail_correct, mut tail_total) = (0usize, 0usize);
    for step in 0..cfg.steps {
        let mut targets = Vec::with_capacity(cfg.batch_size);
        while targets.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..utts.len()).collect();
                for i in (1..order.len()).rev() {
                    let j = rng.random_range(0..=i);
                    order.swap(i, j);
                }
            }
            targets.push(order.pop().expect("refilled"));
        }
        let mut prompt_mels = Vec::with_capacity(targets.len());
        let mut style_mels = Vec::new();
        let mut style_speakers = Vec::new();
        let mut texts = Vec::new();
        let mut sems = Vec::new();
        let mut durations = Vec::new();
        for &i in &targets {
            let draw = draw_conditioning(cfg, &mut rng);
            drawn += 1;
            zeroed += usize::from(draw.p_zero);
            let prompt = pools.prompt_for(corpus, i, &mut rng);
            let tgt = speed_perturb(&utts[i].mel, draw.r_target)?;
            prompt_mels.push(speed_perturb(&utts[prompt].mel, draw.r_prompt)?);
            if stage >= 2 {
                let style = pools.style_for(corpus, i, &mut rng);
                style_mels.push(speed_perturb(&utts[style].mel, draw.r_prompt)?);
                let spk = corpus
                    .speaker_index(&utts[style].speaker_id)
                    .expect("speaker of a corpus utterance");
                style_speakers.push(spk as u32);
            }
            let toks = encode_checked(codec, model, &tgt)?;
            durations.push((!draw.p_zero).then_some(toks.len()));
            texts.push(utts[i].text_tokens.clone());
            sems.push(toks);
        }
        let prompt_refs: Vec<&Mel> = prompt_mels.iter().collect();
        let mut c = conds.speaker.forward(&prompt_refs, false)?;
        if stage >= 2 {
            c = c.detach();
        }
        let (cond, e) = if stage >= 2 {
            let style_refs: Vec<&Mel> = style_mels.iter().collect();
            let mut e = conds.emotion.forward(&style_refs, false)?;
            if stage == 3 {
                e = e.detach();
            }
            ((&c + &e)?, Some(e))
        } else {
            (c, None)
        };
        let p = stack_p(model, &durations)?;
        let fwd = model.forward(&T2SBatch {
            cond,
            p,
            texts,
            sems: sems.clone(),
        })?;
        let (mut loss, correct, total) = token_loss(&fwd, &sems, model.ea())?;
        if step >= tail_from {
            tail_correct += correct;
            tail_total += total;
        }
        let mut adv_input = None;
        if stage == 2 && cfg.alpha > 0.0 {
            let e = e.expect("stage 2 has e");
            let logits = conds.classifier.logits(&grl(&e, cfg.grl_lambda)?)?;
            let labels = Tensor::from_vec(style_speakers, targets.len(), &Device::Cpu)?;
            let adv = crate::nn::cross_entropy(&logits, &labels)?;
            loss = (loss + (adv * cfg.alpha)?)?;
            adv_input = Some((e.detach(), labels));
        }
        let stage_err = |err| Error::Stage {
            stage: format!("t2s-stage{stage}"),
            source: Box::new(err),
        };
        let v = trainer.step(&loss).map_err(stage_err)?;
        if let (Some(adversary), Some((e, labels))) = (adversary.as_mut(), adv_input) {
            for _ in 0..cfg.adversary_steps {
                let logits = conds.classifier.logits(&e)?;
                adversary
                    .step(&crate::nn::cross_entropy(&logits, &labels)?)
                    .map_err(stage_err)?;
            }
        }
        losses.push(v);
        if step % 50 == 0 || step + 1 == cfg.steps {
            log::info!("t2s stage {stage} step {step}: loss {v:.4}");
        }
    }
    model.stages_done = model.stages_done.max(stage);
    let _ = speaker_ids;
    Ok(StageReport {
        stage,
        steps: cfg.steps,
        losses,
        p_zero_fraction: zeroed as f64 / drawn.max(1) as f64,
        final_accuracy: tail_correct as f64 / tail_total.max(1) as f64,
    })
}

/// Conditioning vectors (`c`, or `c + e` once emotion training has run)
/// for every utterance of `corpus` under [`reference_prompts`].
pub fn reference_conditions(
    model: &T2SModel,
    conds: &Conditioners,
    corpus: &Corpus,
) -> Result<Vec<Vec<f32>>> {
    let utts = corpus.utterances();
    let refs = reference_prompts(corpus);
    let prompts: Vec<&Mel> = refs.iter().map(|&(p, _)| &utts[p].mel).collect();
    let mut cond = conds.speaker.forward(&prompts, false)?.detach();
    if model.stages_done >= 2 {
        let styles: Vec<&Mel> = refs.iter().map(|&(_, s)| &utts[s].mel).collect();
        cond = (cond + conds.emotion.forward(&styles, false)?.detach())?;
    }
    Ok(cond.to_vec2::<f32>()?)
}

/// Teacher-forced argmax accuracy over every target (tokens and `<EA>`),
/// with `p` set to the true length and the reference prompts.
pub fn teacher_forced_accuracy(
    model: &T2SModel,
    conds: &Conditioners,
    codec: &CodecModel,
    corpus: &Corpus,
) -> Result<f64> {
    let cond = reference_conditions(model, conds, corpus)?;
    let mut correct = 0;
    let mut total = 0;
    for (chunk_idx, chunk) in corpus.utterances().chunks(8).enumerate() {
        let base = chunk_idx * 8;
        let mut sems = Vec::new();
        for u in chunk {
            sems.push(encode_checked(codec, model, &u.mel)?);
        }
        let durations: Vec<Option<usize>> = sems.iter().map(|s| Some(s.len())).collect();
        let c: Vec<f32> = cond[base..base + chunk.len()].concat();
        let fwd = model.forward(&T2SBatch {
            cond: Tensor::from_vec(c, (chunk.len(), model.cfg.dim), &Device::Cpu)?,
            p: stack_p(model, &durations)?,
            texts: chunk.iter().map(|u| u.text_tokens.clone()).collect(),
            sems: sems.clone(),
        })?;
        let (_, c, t) = token_loss(&fwd, &sems, model.ea())?;
        correct += c;
        total += t;
    }
    Ok(correct as f64 / total.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioners::ConditionerConfig;

    fn tiny() -> T2SConfig {
        T2SConfig {
            dim: 16,
            layers: 2,
            heads: 2,
            v_text: 8,
            v_sem: 6,
            l_speech: 24,
            max_text: 12,
            context: 64,
            seed: 5,
        }
    }

    fn batch(model: &T2SModel, text: Vec<u32>, sem: Vec<u32>) -> T2SBatch {
        let d = model.cfg.dim;
        T2SBatch {
            cond: Tensor::from_vec((0..d).map(|i| (i as f32 * 0.37).sin()).collect(), (1, d), &Device::Cpu).unwrap(),
            p: model.duration_embedding(sem.len()).unwrap().unsqueeze(0).unwrap(),
            texts: vec![text],
            sems: vec![sem],
        }
    }

    fn logits_of(model: &T2SModel, b: &T2SBatch) -> Vec<Vec<f32>> {
        model.forward(b).unwrap().logits.get(0).unwrap().to_vec2().unwrap()
    }

    #[test]
    fn tied_views_share_storage() {
        let m = T2SModel::new(&tiny()).unwrap();
        for t in [0usize, 5, 23] {
            let a = m.duration_embedding(t).unwrap().to_vec1::<f32>().unwrap();
            let b = m.semantic_position(t).unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(a, b);
        }
        let fresh = Tensor::ones((24, 16), DType::F32, &Device::Cpu).unwrap();
        m.store().set("tied", &fresh).unwrap();
        assert_eq!(m.semantic_position(7).unwrap().to_vec1::<f32>().unwrap(), vec![1.0; 16]);
        assert!(m.duration_embedding(24).is_err());
    }

    #[test]
    fn semantic_segment_is_causal_and_text_is_visible() {
        let m = T2SModel::new(&tiny()).unwrap();
        let base = batch(&m, vec![1, 2, 3], vec![0, 1, 2, 3, 4]);
        let l0 = logits_of(&m, &base);
        let mut alt = base.clone();
        alt.sems[0][2] = 5;
        let l1 = logits_of(&m, &alt);
        // Input token k sits at semantic position k + 1.
        for t in 0..l0.len() {
            let same = l0[t] == l1[t];
            assert_eq!(same, t <= 2, "position {t}");
        }
        let mut txt = base.clone();
        txt.texts[0][2] = 7;
        let l2 = logits_of(&m, &txt);
        assert!(l0.iter().zip(&l2).all(|(a, b)| a != b));
    }

    #[test]
    fn padding_is_invisible() {
        let m = T2SModel::new(&tiny()).unwrap();
        let one = batch(&m, vec![1, 2], vec![3, 4, 0]);
        let two = batch(&m, vec![5, 6, 7, 1, 2], vec![1, 1, 1, 1, 1, 1]);
        let joint = T2SBatch {
            cond: Tensor::cat(&[&one.cond, &two.cond], 0).unwrap(),
            p: Tensor::cat(&[&one.p, &two.p], 0).unwrap(),
            texts: vec![one.texts[0].clone(), two.texts[0].clone()],
            sems: vec![one.sems[0].clone(), two.sems[0].clone()],
        };
        let alone = logits_of(&m, &one);
        let both: Vec<Vec<f32>> = m.forward(&joint).unwrap().logits.get(0).unwrap().to_vec2().unwrap();
        for (a, b) in alone.iter().zip(&both) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn h_gpt_has_one_row_per_token() {
        let m = T2SModel::new(&tiny()).unwrap();
        let f = m.forward(&batch(&m, vec![1], vec![2, 3, 4, 5])).unwrap();
        assert_eq!(f.h_gpt(0).unwrap().dims(), &[4, 16]);
    }

    #[test]
    fn ar_loss_hand_cases() {
        let uniform = Tensor::zeros((4, 7), DType::F64, &Device::Cpu).unwrap();
        let l = ar_loss(&uniform, &[0, 1, 2, 6], 1.0, 0.0).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
        let l2 = ar_loss(&uniform, &[0, 1, 2, 6], 0.5, 0.1).unwrap();
        assert!((l2 - l - 0.1 * 2f64.ln()).abs() < 1e-12);
        let mut v = vec![-1e4f64; 2 * 3];
        v[1] = 0.0;
        v[3 + 2] = 0.0;
        let sharp = Tensor::from_vec(v, (2, 3), &Device::Cpu).unwrap();
        assert!(ar_loss(&sharp, &[1, 2], 1.0, 0.1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn assemble_segments() {
        let m = T2SModel::new(&tiny()).unwrap();
        let mut conds = Conditioners::new(
            &ConditionerConfig {
                dim: 16,
                n_mels: 16,
                heads: 2,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let c = SpeakerEmbedding(vec![0.5; 16]);
        let e = EmotionEmbedding((0..16).map(|i| i as f32).collect());
        let s = assemble(&m, &conds, &c, None, Some(3), &[1], &[2, 3, 4]).unwrap();
        assert_eq!(s.cond.to_vec1::<f32>().unwrap(), c.0);
        assert_eq!(
            s.p.to_vec1::<f32>().unwrap(),
            m.duration_embedding(3).unwrap().to_vec1::<f32>().unwrap()
        );
        assert!(assemble(&m, &conds, &c, Some(&e), None, &[1], &[]).is_err());
        conds.speaker.store_mut().freeze();
        let s = assemble(&m, &conds, &c, Some(&e), None, &[1], &[]).unwrap();
        let want: Vec<f32> = (0..16).map(|i| i as f32 + 0.5).collect();
        assert_eq!(s.cond.to_vec1::<f32>().unwrap(), want);
        assert!(s.p.to_vec1::<f32>().unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(s.offsets(), [0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn strict_decoding_hits_the_target_length() {
        let m = T2SModel::new(&tiny()).unwrap();
        let c = SpeakerEmbedding(vec![0.1; 16]);
        for t in [1usize, 4, 9, 23] {
            let out = decode(&m, &c, None, Some(t), &[1, 2], 30, DurationMode::Strict).unwrap();
            assert_eq!(out.tokens.len(), t);
            assert!(out.tokens.terminated_eos);
            assert_eq!(out.h_gpt.dims(), &[t, 16]);
        }
    }

    #[test]
    fn learned_decoding_flags_truncation() {
        let m = T2SModel::new(&tiny()).unwrap();
        // Make <EA> unreachable by zeroing its head row and bias to a huge negative.
        let head_b = m.store().get("head.bias").unwrap();
        let mut b = head_b.to_vec1::<f32>().unwrap();
        b[6] = -1e6;
        m.store()
            .set("head.bias", &Tensor::new(b, &Device::Cpu).unwrap())
            .unwrap();
        let out = decode(&m, &SpeakerEmbedding(vec![0.0; 16]), None, None, &[3], 5, DurationMode::Learned)
            .unwrap();
        assert!(out.truncated);
        assert!(!out.tokens.terminated_eos);
        assert_eq!(out.tokens.len(), 5);
    }

    #[test]
    fn conditioning_draw_frequencies() {
        let cfg = StageConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let zeros = (0..n).filter(|_| draw_conditioning(&cfg, &mut rng).p_zero).count();
        let f = zeros as f64 / n as f64;
        assert!((f - 0.3).abs() <= 0.02, "{f}");
    }
}
