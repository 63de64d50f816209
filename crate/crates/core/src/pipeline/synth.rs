//! Text tokens plus prompts to mel and waveform.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::SemanticTokenSeq;
use crate::conditioners::EmotionEmbedding;
use crate::error::{Error, Result};
use crate::mel::Mel;
use crate::s2m::generate_mel;
use crate::t2e::{mix_emotion_vector, EmotionDistribution};
use crate::t2s::{decode_batch, DecodeOptions, DecodeRequest, DurationMode, Sampling};

use super::checkpoint::{Checkpoint, StageTag};
use super::vocoder::Vocoder;

/// Source of the emotion vector.
#[derive(Debug, Clone)]
pub enum Style {
    /// Reference audio read by the emotion conditioner.
    Audio(Mel),
    /// Free text classified by the distilled student.
    Text(String),
    /// Explicit distribution over the seven emotions.
    Vector(EmotionDistribution),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DurationSpec {
    Tokens(usize),
    Auto,
}

#[derive(Debug, Clone)]
pub struct SynthRequest {
    pub text: Vec<u32>,
    pub timbre: Mel,
    pub style: Style,
    pub duration: DurationSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    /// Length handling when a token count is given.
    pub mode: DurationMode,
    pub max_len: usize,
    pub sampling: Sampling,
    pub ode_steps: usize,
    pub griffin_lim_iters: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            mode: DurationMode::Strict,
            max_len: 60,
            sampling: Sampling::Greedy,
            ode_steps: 16,
            griffin_lim_iters: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub wave: Vec<f32>,
    pub mel: Mel,
    pub tokens: SemanticTokenSeq,
    /// Decoding stopped at the length budget without `<EA>`.
    pub truncated: bool,
    /// Distribution used for the emotion vector, when one was involved.
    pub emotion: Option<EmotionDistribution>,
}

/// Emotion vector for `style`, plus the distribution it came from.
pub fn style_vector(ck: &Checkpoint, style: &Style) -> Result<(EmotionEmbedding, Option<EmotionDistribution>)> {
    match style {
        Style::Audio(mel) => Ok((ck.conds.emotion_embed(mel)?, None)),
        Style::Text(text) => {
            let student = ck
                .student
                .as_ref()
                .ok_or_else(|| Error::Config("text style needs a trained text-to-emotion student".into()))?;
            let bank = ck.bank.as_ref().ok_or_else(|| Error::Config("checkpoint has no emotion bank".into()))?;
            let p = student.predict(text)?;
            Ok((mix_emotion_vector(&p, bank), Some(p)))
        }
        Style::Vector(p) => {
            let bank = ck
                .bank
                .as_ref()
                .ok_or_else(|| Error::Config("vector style needs the emotion bank from the text-to-emotion phase".into()))?;
            Ok((mix_emotion_vector(p, bank), Some(*p)))
        }
    }
}

/// Mel generation from tokens and latents; shared by synthesis and the
/// evaluation harnesses.
pub fn render_mel(
    ck: &Checkpoint,
    tokens: &SemanticTokenSeq,
    h_gpt: &Tensor,
    timbre: &Mel,
    c: &Tensor,
    ode_steps: usize,
    seed: u64,
) -> Result<Mel> {
    if tokens.is_empty() {
        return Err(Error::invalid("no semantic tokens to render"));
    }
    let s2m = &ck.s2m;
    let n_frames = tokens.len() * s2m.config().downsample_rate;
    let room = s2m.config().max_frames.saturating_sub(n_frames);
    if room == 0 {
        return Err(Error::invalid(format!("{n_frames} frames leave no room for the prompt")));
    }
    let prompt = timbre.slice(0, timbre.frames().min(room))?;
    let q = s2m.embed(tokens)?;
    let fused = s2m.fuse_latents(Some(h_gpt), &q, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_mel(s2m, &fused.q_fin, c, &prompt, n_frames, ode_steps, &mut rng)
}

pub fn synthesize(ck: &Checkpoint, req: &SynthRequest, opts: &SynthOptions) -> Result<Synthesis> {
    ck.require(StageTag::S2M)?;
    let l_speech = ck.t2s.config().l_speech;
    if let DurationSpec::Tokens(t) = req.duration {
        if t == 0 || t >= l_speech {
            return Err(Error::invalid(format!("duration {t} outside 1..{l_speech}")));
        }
    }
    let c = ck.conds.speaker_embed(&req.timbre)?;
    let (e, emotion) = style_vector(ck, &req.style)?;
    let cond: Vec<f32> = c.as_slice().iter().zip(e.as_slice()).map(|(a, b)| a + b).collect();
    let (duration, mode) = match req.duration {
        DurationSpec::Tokens(t) => (Some(t), opts.mode),
        DurationSpec::Auto => (None, DurationMode::Learned),
    };
    let decode_opts = DecodeOptions {
        max_len: opts.max_len,
        mode,
        sampling: opts.sampling,
        seed: req.seed,
    };
    let out = decode_batch(
        &ck.t2s,
        &[DecodeRequest {
            cond,
            duration,
            text: req.text.clone(),
        }],
        &decode_opts,
    )?
    .remove(0);
    let c_t = Tensor::from_vec(c.0.clone(), c.dim(), &Device::Cpu)?.to_dtype(DType::F32)?;
    let mel = render_mel(ck, &out.tokens, &out.h_gpt, &req.timbre, &c_t, opts.ode_steps, req.seed)?;
    let vocoder = Vocoder::new(&ck.config.audio)?;
    let wave = vocoder.griffin_lim(&mel, opts.griffin_lim_iters)?.wave;
    Ok(Synthesis {
        wave,
        mel,
        tokens: out.tokens,
        truncated: out.truncated,
        emotion,
    })
}
