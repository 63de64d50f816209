//! Evaluation harnesses over a trained checkpoint.
//!
//! The duration metric is the mean absolute relative deviation between
//! generated and requested token counts, in percent. The share of
//! utterances whose length misses the target is reported next to it.

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::emotion::{Emotion, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::mel::Mel;
use crate::probe::{LinearProbe, NearestCentroid};
use crate::s2m::gaussian;
use crate::t2e::{mix_emotion_vector, EmotionDistribution};
use crate::t2s::{decode_batch, reference_conditions, reference_prompts, DecodeOptions, DecodeRequest, DurationMode};

use super::checkpoint::{Checkpoint, StageTag};
use super::config::EvalConfig;
use super::synth::render_mel;
use super::train::s2m_examples;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationEntry {
    pub utterance: String,
    pub factor: f64,
    pub target_len: usize,
    pub generated_len: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSummary {
    pub factor: f64,
    /// `100 * mean |generated - target| / target`.
    pub error_rate_pct: f64,
    /// Percentage of utterances whose length differs from the target.
    pub mismatch_rate_pct: f64,
    pub evaluated: usize,
    /// Targets at or beyond the duration table, or zero.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationReport {
    pub mode: DurationMode,
    pub factors: Vec<FactorSummary>,
    pub entries: Vec<DurationEntry>,
}

/// `100 * mean |g - t| / t` over `(target, generated)` pairs.
pub fn error_rate(pairs: &[(usize, usize)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let s: f64 = pairs
        .iter()
        .map(|&(t, g)| (g as f64 - t as f64).abs() / t as f64)
        .sum();
    100.0 * s / pairs.len() as f64
}

pub fn mismatch_rate(pairs: &[(usize, usize)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    100.0 * pairs.iter().filter(|(t, g)| t != g).count() as f64 / pairs.len() as f64
}

impl DurationReport {
    pub fn summary(&self, factor: f64) -> Option<&FactorSummary> {
        self.factors.iter().find(|f| (f.factor - factor).abs() < 1e-12)
    }

    /// One row per factor.
    pub fn summary_tsv(&self) -> String {
        let mut s = String::from("factor\terror_rate_pct\tmismatch_rate_pct\tevaluated\tskipped\n");
        for f in &self.factors {
            s.push_str(&format!(
                "{}\t{:.4}\t{:.4}\t{}\t{}\n",
                f.factor, f.error_rate_pct, f.mismatch_rate_pct, f.evaluated, f.skipped
            ));
        }
        s
    }

    /// One row per utterance and factor.
    pub fn entries_tsv(&self) -> String {
        let mut s = String::from("utterance\tfactor\ttarget_len\tgenerated_len\ttruncated\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.utterance, e.factor, e.target_len, e.generated_len, e.truncated
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Decodes every utterance at `round(f * ground_truth_len)` tokens for
/// each factor, with the utterance's reference prompts.
pub fn eval_duration(
    ck: &Checkpoint,
    corpus: &Corpus,
    factors: &[f64],
    mode: DurationMode,
    cfg: &EvalConfig,
) -> Result<DurationReport> {
    ck.require(StageTag::T2SStage1)?;
    if factors.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::invalid("duration factors must be positive"));
    }
    let codec = ck.codec()?;
    let l_speech = ck.t2s.config().l_speech;
    let conds = reference_conditions(&ck.t2s, &ck.conds, corpus)?;
    let utts = corpus.utterances();
    let gts: Vec<usize> = utts
        .iter()
        .map(|u| Ok(codec.encode(&u.mel)?.len()))
        .collect::<Result<_>>()?;
    let opts = DecodeOptions {
        max_len: cfg.max_len,
        mode,
        seed: cfg.seed,
        ..Default::default()
    };
    let mut summaries = Vec::with_capacity(factors.len());
    let mut entries = Vec::new();
    for &f in factors {
        let mut jobs = Vec::new();
        let mut skipped = 0;
        for (i, gt) in gts.iter().enumerate() {
            let t = (f * *gt as f64).round() as usize;
            if t == 0 || t >= l_speech {
                skipped += 1;
                continue;
            }
            jobs.push((i, t));
        }
        let mut pairs = Vec::with_capacity(jobs.len());
        for chunk in jobs.chunks(cfg.batch_size.max(1)) {
            let reqs: Vec<DecodeRequest> = chunk
                .iter()
                .map(|&(i, t)| DecodeRequest {
                    cond: conds[i].clone(),
                    duration: Some(t),
                    text: utts[i].text_tokens.clone(),
                })
                .collect();
            let outs = decode_batch(&ck.t2s, &reqs, &opts)?;
            for (&(i, t), out) in chunk.iter().zip(outs) {
                pairs.push((t, out.tokens.len()));
                entries.push(DurationEntry {
                    utterance: utts[i].id.clone(),
                    factor: f,
                    target_len: t,
                    generated_len: out.tokens.len(),
                    truncated: out.truncated,
                });
            }
        }
        summaries.push(FactorSummary {
            factor: f,
            error_rate_pct: error_rate(&pairs),
            mismatch_rate_pct: mismatch_rate(&pairs),
            evaluated: pairs.len(),
            skipped,
        });
    }
    Ok(DurationReport {
        mode,
        factors: summaries,
        entries,
    })
}

/// Scores produced by models that live outside this crate (speech
/// recognizers, speaker verifiers, emotion classifiers, listener panels).
pub trait ExternalMetric {
    fn name(&self) -> &str;
    fn score(&self, wave: &[f32], sample_rate: u32, reference: Option<&[f32]>, transcript: Option<&str>) -> Result<f64>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub speaker_acc_from_c: f64,
    pub speaker_acc_from_e: f64,
    pub emotion_acc_from_e: f64,
}

/// Linear probes fitted on `train` and scored on `held_out`: speaker
/// identity from both conditioner outputs and emotion from `e`.
pub fn disentanglement(ck: &Checkpoint, train: &Corpus, held_out: &Corpus, seed: u64) -> Result<DisentanglementReport> {
    let feats = |corpus: &Corpus| -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>, Vec<usize>, Vec<usize>)> {
        let mut c = Vec::new();
        let mut e = Vec::new();
        let mut spk = Vec::new();
        let mut emo = Vec::new();
        for chunk in corpus.utterances().chunks(16) {
            let mels: Vec<&Mel> = chunk.iter().map(|u| &u.mel).collect();
            c.extend(ck.conds.speaker.forward(&mels, false)?.to_vec2::<f32>()?);
            e.extend(ck.conds.emotion.forward(&mels, false)?.to_vec2::<f32>()?);
            for u in chunk {
                spk.push(
                    ck.speaker_ids
                        .iter()
                        .position(|s| *s == u.speaker_id)
                        .ok_or_else(|| Error::UnknownSpeaker(u.speaker_id.clone()))?,
                );
                emo.push(u.emotion.index());
            }
        }
        Ok((c, e, spk, emo))
    };
    let (c_tr, e_tr, s_tr, m_tr) = feats(train)?;
    let (c_te, e_te, s_te, m_te) = feats(held_out)?;
    let n_spk = ck.speaker_ids.len();
    let spk_c = LinearProbe::fit(&c_tr, &s_tr, n_spk, 300, seed)?;
    let spk_e = LinearProbe::fit(&e_tr, &s_tr, n_spk, 300, seed)?;
    let emo_e = LinearProbe::fit(&e_tr, &m_tr, NUM_EMOTIONS, 300, seed)?;
    Ok(DisentanglementReport {
        speaker_acc_from_c: spk_c.accuracy(&c_te, &s_te),
        speaker_acc_from_e: spk_e.accuracy(&e_te, &s_te),
        emotion_acc_from_e: emo_e.accuracy(&e_te, &m_te),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorReport {
    /// Mean L1 between generated and ground-truth target frames.
    pub generated_l1: f64,
    /// Mean L1 between the initial Gaussian draw and the target frames.
    pub noise_l1: f64,
    pub items: usize,
}

/// Regenerates the second half of every utterance from its ground-truth
/// tokens and latents, prompted with the first half.
pub fn generator_vs_noise(ck: &Checkpoint, corpus: &Corpus, ode_steps: usize, seed: u64) -> Result<GeneratorReport> {
    ck.require(StageTag::S2M)?;
    let ds = ck.s2m.config().downsample_rate;
    let examples = s2m_examples(ck, corpus)?;
    let c_all = {
        let mels: Vec<&Mel> = examples.iter().map(|e| &e.mel).collect();
        let mut rows = Vec::new();
        for chunk in mels.chunks(16) {
            let halves: Vec<Mel> = chunk
                .iter()
                .map(|m| m.slice(0, (m.frames() / ds / 2).max(1) * ds))
                .collect::<Result<_>>()?;
            let refs: Vec<&Mel> = halves.iter().collect();
            rows.extend(ck.conds.speaker.forward(&refs, false)?.to_vec2::<f32>()?);
        }
        rows
    };
    let (mut gen, mut noise, mut n) = (0.0, 0.0, 0usize);
    for (i, (ex, c)) in examples.iter().zip(c_all).enumerate() {
        let k = (ex.tokens.len() / 2).max(1);
        if k >= ex.tokens.len() {
            continue;
        }
        let prompt = ex.mel.slice(0, k * ds)?;
        let target = ex.mel.slice(k * ds, ex.tokens.len() * ds)?;
        let tail = crate::codec::SemanticTokenSeq::new(ex.tokens.tokens[k..].to_vec());
        let h = ex.h_gpt.narrow(0, k, ex.tokens.len() - k)?;
        let c_t = Tensor::from_vec(c, ck.s2m.config().cond_dim, &Device::Cpu)?;
        let item_seed = seed.wrapping_add(i as u64);
        let out = render_mel(ck, &tail, &h, &prompt, &c_t, ode_steps, item_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
        let x0 = Mel::from_tensor(&gaussian(&mut rng, target.frames(), target.bins(), candle_core::DType::F32)?)?;
        gen += out.mean_abs_diff(&target)?;
        noise += x0.mean_abs_diff(&target)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(GeneratorReport {
        generated_l1: gen / n as f64,
        noise_l1: noise / n as f64,
        items: n,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteeringReport {
    pub trials: usize,
    pub matches: usize,
    pub rate: f64,
    /// `(target, trials, matches)` per emotion.
    pub per_emotion: Vec<(Emotion, usize, usize)>,
}

/// Nearest-centroid emotion classifier over utterance mean frames.
pub fn emotion_centroids(corpus: &Corpus) -> Result<NearestCentroid> {
    let feats: Vec<Vec<f32>> = corpus.utterances().iter().map(|u| u.mel.mean_frame()).collect();
    let labels: Vec<usize> = corpus.utterances().iter().map(|u| u.emotion.index()).collect();
    NearestCentroid::fit(&feats, &labels, NUM_EMOTIONS)
}

/// A target emotion per utterance that differs from its own label and
/// cycles through the other six.
pub fn steering_targets(corpus: &Corpus) -> Vec<Emotion> {
    corpus
        .utterances()
        .iter()
        .enumerate()
        .map(|(i, u)| Emotion::ALL[(u.emotion.index() + 1 + i % (NUM_EMOTIONS - 1)) % NUM_EMOTIONS])
        .collect()
}

/// Synthesizes each utterance's text with its reference timbre prompt, the
/// true token count and `e = mix(one_hot(target))`, then classifies the
/// generated mel against centroids of the corpus. Utterances whose own
/// emotion is the target are skipped.
pub fn emotion_steering(
    ck: &Checkpoint,
    corpus: &Corpus,
    targets: &[Emotion],
    cfg: &EvalConfig,
) -> Result<SteeringReport> {
    ck.require(StageTag::T2E)?;
    let utts = corpus.utterances();
    if targets.len() != utts.len() {
        return Err(Error::invalid("one steering target per utterance"));
    }
    let bank = ck.bank.as_ref().ok_or_else(|| Error::Checkpoint("no emotion bank".into()))?;
    let centroids = emotion_centroids(corpus)?;
    let codec = ck.codec()?;
    let refs = reference_prompts(corpus);
    let opts = DecodeOptions {
        max_len: cfg.max_len,
        mode: DurationMode::Strict,
        seed: cfg.seed,
        ..Default::default()
    };
    let mut per_emotion: Vec<(Emotion, usize, usize)> = Emotion::ALL.iter().map(|e| (*e, 0, 0)).collect();
    for (i, (u, target)) in utts.iter().zip(targets).enumerate() {
        if u.emotion == *target {
            continue;
        }
        let e = mix_emotion_vector(&EmotionDistribution::one_hot(*target), bank);
        let timbre = &utts[refs[i].0].mel;
        let c = ck.conds.speaker_embed(timbre)?;
        let cond: Vec<f32> = c.as_slice().iter().zip(e.as_slice()).map(|(a, b)| a + b).collect();
        let t = codec.encode(&u.mel)?.len();
        let out = decode_batch(
            &ck.t2s,
            &[DecodeRequest {
                cond,
                duration: Some(t),
                text: u.text_tokens.clone(),
            }],
            &opts,
        )?
        .remove(0);
        let c_t = c.to_tensor()?;
        let mel = render_mel(ck, &out.tokens, &out.h_gpt, timbre, &c_t, cfg.ode_steps, cfg.seed.wrapping_add(i as u64))?;
        let slot = &mut per_emotion[target.index()];
        slot.1 += 1;
        if centroids.predict(&mel.mean_frame()) == target.index() {
            slot.2 += 1;
        }
    }
    let matches = per_emotion.iter().map(|s| s.2).sum();
    let trials = per_emotion.iter().map(|s| s.1).sum();
    Ok(SteeringReport {
        trials,
        matches,
        rate: matches as f64 / trials.max(1) as f64,
        per_emotion,
    })
}

/// Generator examples, one per utterance in corpus order.
fn aligned_examples(ck: &Checkpoint, corpus: &Corpus) -> Result<Vec<crate::s2m::S2MExample>> {
    let examples = s2m_examples(ck, corpus)?;
    if examples.len() != corpus.len() {
        return Err(Error::invalid("an utterance is too short to yield a semantic token"));
    }
    Ok(examples)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeakerSwapReport {
    pub trials: usize,
    /// Own prompt and own `c`: classified as the utterance's speaker.
    pub unswapped: usize,
    /// Own prompt with the next speaker's `c`: classified as that speaker.
    pub c_only: usize,
    /// The next speaker's prompt and its `c`: classified as that speaker.
    pub c_and_prompt: usize,
}

/// Regenerates every utterance from its ground-truth tokens and latents
/// while handing the generator the speaker vector of the next speaker,
/// and classifies the result with speaker centroids over mean frames.
pub fn speaker_swap(ck: &Checkpoint, corpus: &Corpus, ode_steps: usize, seed: u64) -> Result<SpeakerSwapReport> {
    ck.require(StageTag::S2M)?;
    let utts = corpus.utterances();
    let n_spk = corpus.speakers().len();
    if n_spk < 2 {
        return Err(Error::invalid("speaker swap needs two speakers"));
    }
    let spk: Vec<usize> = utts
        .iter()
        .map(|u| corpus.speaker_index(&u.speaker_id).expect("speaker of a corpus utterance"))
        .collect();
    let feats: Vec<Vec<f32>> = utts.iter().map(|u| u.mel.mean_frame()).collect();
    let centroids = NearestCentroid::fit(&feats, &spk, n_spk)?;
    let examples = aligned_examples(ck, corpus)?;
    let refs = reference_prompts(corpus);
    let mut report = SpeakerSwapReport {
        trials: 0,
        unswapped: 0,
        c_only: 0,
        c_and_prompt: 0,
    };
    for (i, ex) in examples.iter().enumerate() {
        let other = (spk[i] + 1) % n_spk;
        let j = refs
            .iter()
            .map(|r| r.0)
            .find(|&j| spk[j] == other)
            .ok_or_else(|| Error::invalid("speaker without utterances"))?;
        let own_prompt = &utts[refs[i].0].mel;
        let c_own = ck.conds.speaker_embed(own_prompt)?.to_tensor()?;
        let c_swap = ck.conds.speaker_embed(&utts[j].mel)?.to_tensor()?;
        let item_seed = seed.wrapping_add(i as u64);
        let class = |prompt: &Mel, c: &Tensor| -> Result<usize> {
            let mel = render_mel(ck, &ex.tokens, &ex.h_gpt, prompt, c, ode_steps, item_seed)?;
            Ok(centroids.predict(&mel.mean_frame()))
        };
        report.trials += 1;
        report.unswapped += usize::from(class(own_prompt, &c_own)? == spk[i]);
        report.c_only += usize::from(class(own_prompt, &c_swap)? == other);
        report.c_and_prompt += usize::from(class(&utts[j].mel, &c_swap)? == other);
    }
    Ok(report)
}

/// Mean absolute change of generated mels when the ODE step count is
/// doubled, with the same initial draw and the utterances' own prompts.
pub fn step_doubling_change(ck: &Checkpoint, corpus: &Corpus, steps: usize, seed: u64) -> Result<f64> {
    ck.require(StageTag::S2M)?;
    let utts = corpus.utterances();
    let refs = reference_prompts(corpus);
    let examples = aligned_examples(ck, corpus)?;
    let mut total = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let prompt = &utts[refs[i].0].mel;
        let c = ck.conds.speaker_embed(prompt)?.to_tensor()?;
        let item_seed = seed.wrapping_add(i as u64);
        let a = render_mel(ck, &ex.tokens, &ex.h_gpt, prompt, &c, steps, item_seed)?;
        let b = render_mel(ck, &ex.tokens, &ex.h_gpt, prompt, &c, 2 * steps, item_seed)?;
        total += a.mean_abs_diff(&b)?;
    }
    Ok(total / examples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_rate_hand_values() {
        assert_eq!(error_rate(&[(10, 10), (20, 20)]), 0.0);
        assert!((error_rate(&[(10, 11), (20, 20)]) - 5.0).abs() < 1e-12);
        assert!((error_rate(&[(4, 2)]) - 50.0).abs() < 1e-12);
        assert!((mismatch_rate(&[(10, 11), (20, 20)]) - 50.0).abs() < 1e-12);
        assert_eq!(error_rate(&[]), 0.0);
    }

    #[test]
    fn tsv_and_json_layouts() {
        let r = DurationReport {
            mode: DurationMode::Learned,
            factors: vec![FactorSummary {
                factor: 1.0,
                error_rate_pct: 0.5,
                mismatch_rate_pct: 4.0,
                evaluated: 24,
                skipped: 0,
            }],
            entries: vec![DurationEntry {
                utterance: "u0".into(),
                factor: 1.0,
                target_len: 20,
                generated_len: 21,
                truncated: false,
            }],
        };
        let tsv = r.summary_tsv();
        assert_eq!(tsv.lines().count(), 2);
        assert!(tsv.lines().nth(1).unwrap().starts_with("1\t0.5000\t4.0000\t24\t0"));
        assert_eq!(r.entries_tsv().lines().nth(1).unwrap(), "u0\t1\t20\t21\tfalse");
        let back: DurationReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.summary(1.0).is_some() && r.summary(0.5).is_none());
    }
}
