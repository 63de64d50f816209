//! Speaker and emotion prompt encoders, plus the adversarial speaker head.
//!
//! Both encoders end in the same attention pooling: one learned query
//! scores every frame, the softmax of those scores weights the per-frame
//! values, and a linear map produces the `D`-vector. The speaker encoder
//! computes values frame by frame; the emotion encoder runs a small
//! Conformer-style block (feed-forward, self-attention, depthwise
//! convolution, feed-forward) first so that values see temporal context.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mel::Mel;
use crate::nn::{additive_mask, softmax_last, FeedForward, LayerNorm, Linear, SelfAttention};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionerConfig {
    pub dim: usize,
    pub n_mels: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub classifier_hidden: usize,
    pub seed: u64,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            n_mels: 80,
            heads: 4,
            conv_kernel: 5,
            classifier_hidden: 128,
            seed: 21,
        }
    }
}

/// Gradient-reversal settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrlConfig {
    pub lambda: f64,
}

impl GrlConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("GRL lambda must be >= 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }
}

impl Default for GrlConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

/// Speaker embedding `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding(pub Vec<f32>);

/// Emotion embedding `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionEmbedding(pub Vec<f32>);

macro_rules! embedding_common {
    ($t:ty) => {
        impl $t {
            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn as_slice(&self) -> &[f32] {
                &self.0
            }

            pub fn to_tensor(&self) -> Result<Tensor> {
                Ok(Tensor::from_vec(self.0.clone(), self.0.len(), &Device::Cpu)?)
            }

            pub fn from_tensor(t: &Tensor) -> Result<Self> {
                let v = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numerical("non-finite embedding".into()));
                }
                Ok(Self(v))
            }
        }
    };
}

embedding_common!(SpeakerEmbedding);
embedding_common!(EmotionEmbedding);

/// Zero-padded batch of mels `[b, f_max, bins]` with per-item lengths.
pub fn pad_batch(mels: &[&Mel]) -> Result<(Tensor, Vec<usize>)> {
    if mels.is_empty() {
        return Err(Error::invalid("empty mel batch"));
    }
    let bins = mels[0].bins();
    let f_max = mels.iter().map(|m| m.frames()).max().unwrap_or(0);
    let mut data = vec![0f32; mels.len() * f_max * bins];
    for (i, m) in mels.iter().enumerate() {
        if m.bins() != bins {
            return Err(Error::shape("mixed bin counts in batch"));
        }
        let start = i * f_max * bins;
        data[start..start + m.data().len()].copy_from_slice(m.data());
    }
    let lens = mels.iter().map(|m| m.frames()).collect();
    Ok((Tensor::from_vec(data, (mels.len(), f_max, bins), &Device::Cpu)?, lens))
}

fn length_mask(lens: &[usize], f_max: usize) -> Result<Tensor> {
    let v: Vec<f32> = lens
        .iter()
        .flat_map(|&l| (0..f_max).map(move |f| if f < l { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(v, (lens.len(), f_max), &Device::Cpu)?)
}

/// One-query attention pooling over frames.
#[derive(Debug, Clone)]
struct AttentionPool {
    query: Tensor,
    key: Linear,
    out: Linear,
    dim: usize,
}

impl AttentionPool {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            query: store.param(&format!("{name}.query"), dim, Init::Normal(1.0))?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim)?,
            dim,
        })
    }

    /// `values`: `[b, f, d]`; `valid`: `[b, f]` with 1 for real frames.
    fn forward(&self, values: &Tensor, valid: &Tensor, uniform: bool) -> Result<Tensor> {
        let (b, f, d) = values.dims3()?;
        let neg = ((valid.ones_like()? - valid)? * -1e9)?;
        let logits = if uniform {
            neg
        } else {
            let k = self.key.forward(values)?;
            let s = k
                .reshape((b * f, d))?
                .matmul(&self.query.unsqueeze(1)?)?
                .reshape((b, f))?;
            ((s * (1.0 / (self.dim as f64).sqrt()))? + neg)?
        };
        let w = softmax_last(&logits)?;
        let pooled = w.unsqueeze(1)?.matmul(values)?.squeeze(1)?;
        Ok(self.out.forward(&pooled)?)
    }
}

/// Frame-wise MLP followed by attention pooling.
pub struct SpeakerPerceiver {
    store: ParamStore,
    fc1: Linear,
    fc2: Linear,
    pool: AttentionPool,
}

impl SpeakerPerceiver {
    pub fn new(cfg: &ConditionerConfig) -> Result<Self> {
        let mut store = ParamStore::new("speaker_conditioner", cfg.seed, DType::F32);
        let fc1 = Linear::new(&mut store, "fc1", cfg.n_mels, cfg.dim)?;
        let fc2 = Linear::new(&mut store, "fc2", cfg.dim, cfg.dim)?;
        let pool = AttentionPool::new(&mut store, "pool", cfg.dim)?;
        Ok(Self {
            store,
            fc1,
            fc2,
            pool,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn values(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(x)?.silu()?)?)
    }

    /// Batched embeddings `[b, d]`.
    pub fn forward(&self, mels: &[&Mel], uniform: bool) -> Result<Tensor> {
        let (x, lens) = pad_batch(mels)?;
        let valid = length_mask(&lens, x.dims()[1])?;
        let v = self.values(&x)?;
        self.pool.forward(&v, &valid, uniform)
    }

    /// Per-frame values before pooling, `[f, d]`.
    pub fn frame_values(&self, mel: &Mel) -> Result<Tensor> {
        self.values(&mel.to_tensor(DType::F32)?)
    }
}

/// Half-step feed-forward, self-attention, depthwise convolution and
/// feed-forward, each residual, followed by a layer norm.
struct ConformerBlock {
    ff1_ln: LayerNorm,
    ff1: FeedForward,
    att_ln: LayerNorm,
    att: SelfAttention,
    conv_ln: LayerNorm,
    conv_w: Tensor,
    conv_proj: Linear,
    ff2_ln: LayerNorm,
    ff2: FeedForward,
    out_ln: LayerNorm,
    kernel: usize,
}

impl ConformerBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &ConditionerConfig) -> Result<Self> {
        let d = cfg.dim;
        if cfg.conv_kernel % 2 == 0 {
            return Err(Error::invalid("conv_kernel must be odd"));
        }
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            ff1_ln: LayerNorm::new(store, &n("ff1_ln"), d)?,
            ff1: FeedForward::new(store, &n("ff1"), d, 2 * d)?,
            att_ln: LayerNorm::new(store, &n("att_ln"), d)?,
            att: SelfAttention::new(store, &n("att"), d, cfg.heads)?,
            conv_ln: LayerNorm::new(store, &n("conv_ln"), d)?,
            conv_w: store.param(
                &n("conv_w"),
                (cfg.conv_kernel, d),
                Init::Normal(1.0 / (cfg.conv_kernel as f64).sqrt()),
            )?,
            conv_proj: Linear::new(store, &n("conv_proj"), d, d)?,
            ff2_ln: LayerNorm::new(store, &n("ff2_ln"), d)?,
            ff2: FeedForward::new(store, &n("ff2"), d, 2 * d)?,
            out_ln: LayerNorm::new(store, &n("out_ln"), d)?,
            kernel: cfg.conv_kernel,
        })
    }

    fn depthwise(&self, x: &Tensor) -> Result<Tensor> {
        let (_, f, _) = x.dims3()?;
        let half = self.kernel / 2;
        let padded = x.pad_with_zeros(1, half, half)?;
        let mut acc: Option<Tensor> = None;
        for k in 0..self.kernel {
            let w = self.conv_w.get(k)?;
            let term = padded.narrow(1, k, f)?.broadcast_mul(&w)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        Ok(acc.expect("kernel >= 1"))
    }

    fn forward(&self, x: &Tensor, valid: &Tensor, att_mask: &Tensor) -> Result<Tensor> {
        let keep = valid.unsqueeze(2)?;
        let x = (x + (self.ff1.forward(&self.ff1_ln.forward(x)?)? * 0.5)?)?;
        let x = (&x + self.att.forward(&self.att_ln.forward(&x)?, Some(att_mask))?)?;
        let c = self.conv_ln.forward(&x)?.broadcast_mul(&keep)?;
        let c = self.conv_proj.forward(&self.depthwise(&c)?.silu()?)?;
        let x = (&x + c)?;
        let x = (&x + (self.ff2.forward(&self.ff2_ln.forward(&x)?)? * 0.5)?)?;
        Ok(self.out_ln.forward(&x)?.broadcast_mul(&keep)?)
    }
}

/// Conformer-style trunk followed by attention pooling.
pub struct EmotionPerceiver {
    store: ParamStore,
    input: Linear,
    block: ConformerBlock,
    pool: AttentionPool,
}

impl EmotionPerceiver {
    pub fn new(cfg: &ConditionerConfig) -> Result<Self> {
        let mut store = ParamStore::new("emotion_conditioner", cfg.seed.wrapping_add(1), DType::F32);
        let input = Linear::new(&mut store, "input", cfg.n_mels, cfg.dim)?;
        let block = ConformerBlock::new(&mut store, "block0", cfg)?;
        let pool = AttentionPool::new(&mut store, "pool", cfg.dim)?;
        Ok(Self {
            store,
            input,
            block,
            pool,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn forward(&self, mels: &[&Mel], uniform: bool) -> Result<Tensor> {
        let (x, lens) = pad_batch(mels)?;
        let (b, f, _) = x.dims3()?;
        let valid = length_mask(&lens, f)?;
        let allowed: Vec<bool> = lens
            .iter()
            .flat_map(|&l| (0..f * f).map(move |i| i % f < l))
            .collect();
        let att_mask = additive_mask(&allowed, (b, f, f), DType::F32)?;
        let h = self.input.forward(&x)?;
        let h = self.block.forward(&h, &valid, &att_mask)?;
        self.pool.forward(&h, &valid, uniform)
    }
}

/// MLP head predicting the speaker from an embedding.
pub struct SpeakerClassifier {
    store: ParamStore,
    fc1: Linear,
    fc2: Linear,
    n_speakers: usize,
    dim: usize,
}

impl SpeakerClassifier {
    pub fn new(cfg: &ConditionerConfig, n_speakers: usize) -> Result<Self> {
        if n_speakers < 2 {
            return Err(Error::invalid("speaker classifier needs >= 2 speakers"));
        }
        let mut store = ParamStore::new("speaker_classifier", cfg.seed.wrapping_add(2), DType::F32);
        let fc1 = Linear::new(&mut store, "fc1", cfg.dim, cfg.classifier_hidden)?;
        let fc2 = Linear::new(&mut store, "fc2", cfg.classifier_hidden, n_speakers)?;
        Ok(Self {
            store,
            fc1,
            fc2,
            n_speakers,
            dim: cfg.dim,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn n_speakers(&self) -> usize {
        self.n_speakers
    }

    /// Logits `[b, n_speakers]` for embeddings `[b, d]`.
    pub fn logits(&self, e: &Tensor) -> Result<Tensor> {
        let d = *e.dims().last().unwrap_or(&0);
        if d != self.dim {
            return Err(Error::shape(format!(
                "speaker classifier expects width {}, got {d}",
                self.dim
            )));
        }
        Ok(self.fc2.forward(&self.fc1.forward(e)?.silu()?)?)
    }

    pub fn posterior(&self, e: &EmotionEmbedding) -> Result<Vec<f32>> {
        let logits = self.logits(&e.to_tensor()?.unsqueeze(0)?)?;
        posterior_from_logits(&logits.squeeze(0)?)
    }
}

pub fn posterior_from_logits(logits: &Tensor) -> Result<Vec<f32>> {
    Ok(softmax_last(&logits.to_dtype(DType::F32)?)?.to_vec1::<f32>()?)
}

/// All prompt encoders used by the token model.
pub struct Conditioners {
    cfg: ConditionerConfig,
    pub speaker: SpeakerPerceiver,
    pub emotion: EmotionPerceiver,
    pub classifier: SpeakerClassifier,
}

impl Conditioners {
    pub fn new(cfg: &ConditionerConfig, n_speakers: usize) -> Result<Self> {
        let speaker = SpeakerPerceiver::new(cfg)?;
        let emotion = EmotionPerceiver::new(cfg)?;
        let classifier = SpeakerClassifier::new(cfg, n_speakers)?;
        Ok(Self {
            cfg: cfg.clone(),
            speaker,
            emotion,
            classifier,
        })
    }

    pub fn config(&self) -> &ConditionerConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn speaker_embed(&self, prompt: &Mel) -> Result<SpeakerEmbedding> {
        SpeakerEmbedding::from_tensor(&self.speaker.forward(&[prompt], false)?)
    }

    pub fn emotion_embed(&self, style: &Mel) -> Result<EmotionEmbedding> {
        EmotionEmbedding::from_tensor(&self.emotion.forward(&[style], false)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grl;
    use candle_core::Var;

    fn cfg() -> ConditionerConfig {
        ConditionerConfig {
            dim: 16,
            n_mels: 12,
            heads: 2,
            classifier_hidden: 8,
            ..Default::default()
        }
    }

    fn mel(frames: usize, seed: u32) -> Mel {
        let data = (0..frames * 12)
            .map(|i| (((i as u32).wrapping_mul(2654435761u32) ^ seed) % 1000) as f32 / 500.0 - 1.0)
            .collect();
        Mel::new(frames, 12, data).unwrap()
    }

    #[test]
    fn single_frame_pools_to_its_value() {
        let sp = SpeakerPerceiver::new(&cfg()).unwrap();
        let m = mel(1, 3);
        let c = sp.forward(&[&m], false).unwrap().squeeze(0).unwrap();
        let v = sp.frame_values(&m).unwrap();
        let direct = sp.pool.out.forward(&v).unwrap().squeeze(0).unwrap();
        let diff = (c - direct).unwrap().abs().unwrap().max(0).unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() < 1e-6);
    }

    #[test]
    fn uniform_pooling_ignores_frame_duplication() {
        let sp = SpeakerPerceiver::new(&cfg()).unwrap();
        let m = mel(5, 9);
        let mut doubled = Vec::new();
        for f in 0..m.frames() {
            doubled.extend_from_slice(m.row(f));
            doubled.extend_from_slice(m.row(f));
        }
        let d = Mel::new(10, 12, doubled).unwrap();
        let a = sp.forward(&[&m], true).unwrap().to_vec2::<f32>().unwrap();
        let b = sp.forward(&[&d], true).unwrap().to_vec2::<f32>().unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn padding_does_not_change_embeddings() {
        let c = Conditioners::new(&cfg(), 2).unwrap();
        let short = mel(4, 1);
        let long = mel(9, 2);
        for enc in [
            |c: &Conditioners, m: &[&Mel]| c.speaker.forward(m, false),
            |c: &Conditioners, m: &[&Mel]| c.emotion.forward(m, false),
        ] {
            let alone = enc(&c, &[&short]).unwrap().to_vec2::<f32>().unwrap();
            let batched = enc(&c, &[&short, &long]).unwrap().to_vec2::<f32>().unwrap();
            for (x, y) in alone[0].iter().zip(&batched[0]) {
                assert!((x - y).abs() < 1e-4, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn emotion_embedding_is_deterministic_and_finite_on_zeros() {
        let c = Conditioners::new(&cfg(), 2).unwrap();
        let m = mel(7, 4);
        assert_eq!(c.emotion_embed(&m).unwrap(), c.emotion_embed(&m).unwrap());
        let z = Mel::filled(6, 12, 0.0).unwrap();
        assert!(c.emotion_embed(&z).unwrap().0.iter().all(|v| v.is_finite()));
        assert_eq!(c.speaker_embed(&m).unwrap().dim(), c.emotion_embed(&m).unwrap().dim());
    }

    #[test]
    fn classifier_is_a_distribution() {
        let c = Conditioners::new(&cfg(), 3).unwrap();
        let e = c.emotion_embed(&mel(5, 8)).unwrap();
        let p = c.classifier.posterior(&e).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let u = posterior_from_logits(&Tensor::new(&[0.3f32; 4], &Device::Cpu).unwrap()).unwrap();
        assert!(u.iter().all(|v| (v - 0.25).abs() < 1e-7));
        assert!(c
            .classifier
            .posterior(&EmotionEmbedding(vec![0.0; 5]))
            .is_err());
    }

    #[test]
    fn grl_reverses_the_gradient() {
        let x = Var::from_tensor(&Tensor::new(&[0.5f64, -1.0, 2.0], &Device::Cpu).unwrap()).unwrap();
        let f = |t: &Tensor| t.sqr().unwrap().sin().unwrap().sum_all().unwrap();
        let y = grl(x.as_tensor(), 1.0).unwrap();
        assert_eq!(
            y.to_vec1::<f64>().unwrap(),
            x.as_tensor().to_vec1::<f64>().unwrap()
        );
        let g = f(&y).backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let base = x.as_tensor().to_vec1::<f64>().unwrap();
        for i in 0..3 {
            let h = 1e-3;
            let eval = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                f(&Tensor::new(v, &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((g[i] + fd).abs() <= 1e-4 * fd.abs().max(1e-8), "{} vs {}", g[i], -fd);
        }
    }

    #[test]
    fn grl_config_rejects_negative_lambda() {
        assert!(GrlConfig::new(-0.1).is_err());
        assert!(GrlConfig::new(0.0).is_ok());
    }
}
