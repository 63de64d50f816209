//! Text-to-emotion: emotion distributions, the embedding bank, teacher
//! backends, distillation data and the low-rank-adapted student.
//!
//! A sentence is mapped to a distribution over the seven emotions. The
//! distribution then weights the per-emotion mean embeddings of the bank
//! to give the emotion vector consumed by the token model.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use candle_core::{DType, Device, Tensor};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioners::{Conditioners, EmotionEmbedding};
use crate::corpus::Corpus;
use crate::emotion::{Emotion, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::nn::{additive_mask, harmonic_table, log_softmax_last, softmax_last, FeedForward, LayerNorm, Linear};
use crate::optim::{OptimConfig, Trainer};
use crate::params::{Init, ParamStore};

pub const DESCRIPTIVE_PROMPT: &str = "Please generate descriptive sentences that express {emotion}.";
pub const SCRIPT_PROMPT: &str = "Please generate script-like utterances that express {emotion}.";
pub const CLASSIFY_PROMPT: &str = "Given the input sentence, return a JSON object with probabilities for each of the 7 emotions. Probabilities must sum to 1 and be rounded to two decimal places.";

/// Largest deviation of a teacher response from unit mass that is still
/// repaired rather than rejected.
pub const SIMPLEX_DRIFT: f64 = 0.02;

const SIMPLEX_TOL: f64 = 1e-6;

/// A point on the 7-simplex, in canonical emotion order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmotionDistribution([f64; NUM_EMOTIONS]);

impl EmotionDistribution {
    pub fn new(p: [f64; NUM_EMOTIONS]) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!("negative or non-finite probability in {p:?}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("probabilities sum to {s}")));
        }
        Ok(Self(p))
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(w: &[f64]) -> Result<Self> {
        if w.len() != NUM_EMOTIONS || w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!("bad emotion weights {w:?}")));
        }
        let s: f64 = w.iter().sum();
        if s <= 0.0 {
            return Err(Error::invalid("emotion weights sum to zero"));
        }
        let mut p = [0.0; NUM_EMOTIONS];
        for (o, v) in p.iter_mut().zip(w) {
            *o = v / s;
        }
        Self::new(p)
    }

    /// Validates a raw teacher answer and rounds it to hundredths.
    ///
    /// Answers whose mass is within [`SIMPLEX_DRIFT`] of one are repaired
    /// by moving the rounding residual onto the largest entry, so every
    /// entry keeps two decimals and the total is exactly one hundredth
    /// times one hundred.
    pub fn from_teacher(raw: &[f64]) -> Result<Self> {
        if raw.len() != NUM_EMOTIONS {
            return Err(Error::Teacher(format!("expected 7 probabilities, got {}", raw.len())));
        }
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Teacher(format!("negative or non-finite probability in {raw:?}")));
        }
        let s: f64 = raw.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_DRIFT + 1e-9 {
            return Err(Error::Teacher(format!("probabilities sum to {s:.4}")));
        }
        let mut cents: Vec<i64> = raw.iter().map(|v| (v / s * 100.0).round() as i64).collect();
        let residual = 100 - cents.iter().sum::<i64>();
        let top = argmax(raw);
        cents[top] += residual;
        let mut p = [0.0; NUM_EMOTIONS];
        for (o, c) in p.iter_mut().zip(&cents) {
            *o = *c as f64 / 100.0;
        }
        Self::new(p)
    }

    pub fn one_hot(e: Emotion) -> Self {
        let mut p = [0.0; NUM_EMOTIONS];
        p[e.index()] = 1.0;
        Self(p)
    }

    pub fn uniform() -> Self {
        Self([1.0 / NUM_EMOTIONS as f64; NUM_EMOTIONS])
    }

    pub fn probs(&self) -> &[f64; NUM_EMOTIONS] {
        &self.0
    }

    pub fn get(&self, e: Emotion) -> f64 {
        self.0[e.index()]
    }

    pub fn argmax(&self) -> Emotion {
        Emotion::ALL[argmax(&self.0)]
    }

    /// `-sum p ln p`, natural log.
    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
    }

    /// Convex combination `w * self + (1 - w) * other`.
    pub fn blend(&self, other: &Self, w: f64) -> Result<Self> {
        let mut p = [0.0; NUM_EMOTIONS];
        for i in 0..NUM_EMOTIONS {
            p[i] = w * self.0[i] + (1.0 - w) * other.0[i];
        }
        Self::new(p)
    }
}

impl TryFrom<Vec<f64>> for EmotionDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        let p: [f64; NUM_EMOTIONS] = v
            .try_into()
            .map_err(|v: Vec<f64>| Error::invalid(format!("expected 7 probabilities, got {}", v.len())))?;
        Self::new(p)
    }
}

impl From<EmotionDistribution> for Vec<f64> {
    fn from(p: EmotionDistribution) -> Self {
        p.0.to_vec()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-emotion sets of emotion-conditioner outputs with cached means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionBank {
    members: Vec<Vec<Vec<f32>>>,
    means: Vec<Vec<f32>>,
}

impl EmotionBank {
    /// `members[i]` holds the vectors for `Emotion::ALL[i]`.
    pub fn from_members(members: Vec<Vec<Vec<f32>>>) -> Result<Self> {
        if members.len() != NUM_EMOTIONS {
            return Err(Error::invalid(format!("bank needs 7 classes, got {}", members.len())));
        }
        let dim = members
            .iter()
            .flatten()
            .map(Vec::len)
            .next()
            .ok_or_else(|| Error::invalid("empty emotion bank"))?;
        let mut means = Vec::with_capacity(NUM_EMOTIONS);
        for (e, set) in Emotion::ALL.iter().zip(&members) {
            if set.is_empty() {
                return Err(Error::invalid(format!("no reference embedding for {e}")));
            }
            let mut acc = vec![0.0f64; dim];
            for v in set {
                if v.len() != dim {
                    return Err(Error::shape(format!("{e}: vector of width {} in a bank of width {dim}", v.len())));
                }
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += *x as f64;
                }
            }
            means.push(acc.iter().map(|a| (a / set.len() as f64) as f32).collect());
        }
        Ok(Self { members, means })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn members(&self, e: Emotion) -> &[Vec<f32>] {
        &self.members[e.index()]
    }

    pub fn mean(&self, e: Emotion) -> &[f32] {
        &self.means[e.index()]
    }
}

/// Embeds every labeled utterance with the emotion conditioner, one
/// vector per utterance.
pub fn build_bank(corpus: &Corpus, conds: &Conditioners) -> Result<EmotionBank> {
    let mut members: Vec<Vec<Vec<f32>>> = vec![Vec::new(); NUM_EMOTIONS];
    for chunk in corpus.utterances().chunks(16) {
        let mels: Vec<_> = chunk.iter().map(|u| &u.mel).collect();
        let e = conds.emotion.forward(&mels, false)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        for (u, v) in chunk.iter().zip(e) {
            members[u.emotion.index()].push(v);
        }
    }
    EmotionBank::from_members(members)
}

/// `e = sum_i p_i * mean(V_i)`.
pub fn mix_emotion_vector(p: &EmotionDistribution, bank: &EmotionBank) -> EmotionEmbedding {
    let mut acc = vec![0.0f64; bank.dim()];
    for (w, mean) in p.probs().iter().zip(&bank.means) {
        for (a, m) in acc.iter_mut().zip(mean) {
            *a += w * *m as f64;
        }
    }
    EmotionEmbedding(acc.into_iter().map(|v| v as f32).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptKind {
    #[serde(rename = "descriptive")]
    Descriptive,
    #[serde(rename = "script-like")]
    ScriptLike,
}

impl PromptKind {
    pub fn template(self) -> &'static str {
        match self {
            PromptKind::Descriptive => DESCRIPTIVE_PROMPT,
            PromptKind::ScriptLike => SCRIPT_PROMPT,
        }
    }

    /// Generation request for `emotion`.
    pub fn prompt(self, emotion: Emotion) -> String {
        self.template().replace("{emotion}", &emotion.name().to_lowercase())
    }
}

/// Sentence generator plus soft emotion classifier.
pub trait Teacher: Send + Sync {
    /// Produces sentence number `index` for the given request.
    fn generate(&self, emotion: Emotion, kind: PromptKind, index: usize) -> Result<String>;
    fn classify(&self, text: &str) -> Result<EmotionDistribution>;
}

pub fn teacher_predict(teacher: &dyn Teacher, text: &str) -> Result<EmotionDistribution> {
    teacher.classify(text)
}

/// Keyword lists used by [`MockTeacher`], indexed like `Emotion::ALL`.
pub const LEXICON: [&[&str]; NUM_EMOTIONS] = [
    &["furious", "angry", "rage", "outraged", "livid", "resent"],
    &["happy", "delighted", "joyful", "cheerful", "thrilled", "glad"],
    &["afraid", "terrified", "scared", "frightened", "panic", "dread"],
    &["disgusted", "revolting", "gross", "repulsive", "nauseating", "vile"],
    &["sad", "heartbroken", "gloomy", "grief", "miserable", "tearful"],
    &["surprised", "astonished", "shocked", "unexpected", "amazed", "startled"],
    &["calm", "ordinary", "plain", "routine", "steady", "usual"],
];

const FILLER_SUBJECTS: &[&str] = &["the old man", "my sister", "the neighbor", "our teacher", "the driver", "a stranger"];
const FILLER_SCENES: &[&str] = &["at the market", "after the meeting", "on the train", "in the kitchen", "near the river", "during dinner"];
const FILLER_SAY: &[&str] = &["I can't believe this", "look at that", "listen to me", "what is going on", "you did it again", "not today"];

/// Offline teacher: sentences are assembled from the lexicon and scored
/// by keyword counts.
///
/// Scoring gives each emotion `(hits + 0.05) / (total + 0.35)`. Text with
/// no keyword gets 0.58 Neutral and 0.07 for each other emotion.
#[derive(Debug, Clone)]
pub struct MockTeacher {
    pub seed: u64,
    /// Chance that a generated sentence also contains a keyword of a
    /// second emotion.
    pub mix_prob: f64,
}

impl Default for MockTeacher {
    fn default() -> Self {
        Self { seed: 71, mix_prob: 0.35 }
    }
}

impl MockTeacher {
    pub const FALLBACK_NEUTRAL: f64 = 0.58;

    pub fn keyword_hits(text: &str) -> [usize; NUM_EMOTIONS] {
        let mut hits = [0; NUM_EMOTIONS];
        for word in text.split(|c: char| !c.is_alphabetic()).filter(|w| !w.is_empty()) {
            let w = word.to_lowercase();
            for (i, words) in LEXICON.iter().enumerate() {
                if words.contains(&w.as_str()) {
                    hits[i] += 1;
                }
            }
        }
        hits
    }
}

impl Teacher for MockTeacher {
    fn generate(&self, emotion: Emotion, kind: PromptKind, index: usize) -> Result<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).expect("non-empty");
        let kw = pick(&mut rng, LEXICON[emotion.index()]);
        let extra = if rng.random::<f64>() < self.mix_prob {
            let other = Emotion::ALL[rng.random_range(0..NUM_EMOTIONS)];
            Some(pick(&mut rng, LEXICON[other.index()]))
        } else {
            None
        };
        let subject = pick(&mut rng, FILLER_SUBJECTS);
        let scene = pick(&mut rng, FILLER_SCENES);
        let text = match kind {
            PromptKind::Descriptive => match extra {
                Some(x) => format!("{subject} looked {kw} {scene}, almost {x}."),
                None => format!("{subject} looked {kw} {scene}."),
            },
            PromptKind::ScriptLike => {
                let say = pick(&mut rng, FILLER_SAY);
                match extra {
                    Some(x) => format!("\"{say}! I am so {kw}, even {x}.\""),
                    None => format!("\"{say}! I am so {kw}.\""),
                }
            }
        };
        let mut chars = text.chars();
        Ok(match chars.next() {
            Some(c) => c.to_uppercase().chain(chars).collect(),
            None => text,
        })
    }

    fn classify(&self, text: &str) -> Result<EmotionDistribution> {
        let hits = Self::keyword_hits(text);
        let total: usize = hits.iter().sum();
        if total == 0 {
            let mut p = [0.07; NUM_EMOTIONS];
            p[Emotion::Neutral.index()] = Self::FALLBACK_NEUTRAL;
            return EmotionDistribution::from_teacher(&p);
        }
        let raw: Vec<f64> = hits
            .iter()
            .map(|h| (*h as f64 + 0.05) / (total as f64 + 0.35))
            .collect();
        EmotionDistribution::from_teacher(&raw)
    }
}

/// Client for an OpenAI-style chat-completions endpoint.
#[derive(Debug, Clone)]
pub struct HttpTeacher {
    /// Base URL; `/chat/completions` is appended.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retries: usize,
}

impl HttpTeacher {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(60),
            retries: 2,
        }
    }

    fn chat(&self, messages: serde_json::Value) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let url = format!("{}/chat/completions", self.endpoint.trim_end_matches('/'));
        let body = serde_json::json!({ "model": self.model, "messages": messages });
        let mut last = String::new();
        for attempt in 0..=self.retries {
            let mut req = agent.post(&url);
            if let Some(k) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {k}"));
            }
            match req.send_json(&body) {
                Ok(mut resp) => match resp.body_mut().read_json::<serde_json::Value>() {
                    Ok(v) => {
                        return v["choices"][0]["message"]["content"]
                            .as_str()
                            .map(str::to_owned)
                            .ok_or_else(|| Error::Teacher("response has no message content".into()))
                    }
                    Err(e) => last = e.to_string(),
                },
                Err(e) => last = e.to_string(),
            }
            log::warn!("teacher call {attempt} failed: {last}");
        }
        Err(Error::Teacher(format!("{} attempts failed: {last}", self.retries + 1)))
    }
}

/// Parses the first JSON object in `content` and checks that its keys are
/// exactly the seven emotion names.
pub fn parse_teacher_json(content: &str) -> Result<EmotionDistribution> {
    let start = content.find('{');
    let end = content.rfind('}');
    let (Some(s), Some(e)) = (start, end) else {
        return Err(Error::Teacher(format!("no JSON object in {content:?}")));
    };
    if e < s {
        return Err(Error::Teacher(format!("no JSON object in {content:?}")));
    }
    let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&content[s..=e])
        .map_err(|err| Error::Teacher(format!("bad JSON from teacher: {err}")))?;
    if obj.len() != NUM_EMOTIONS {
        return Err(Error::Teacher(format!("expected 7 keys, got {}", obj.len())));
    }
    let mut raw = [0.0; NUM_EMOTIONS];
    for e in Emotion::ALL {
        raw[e.index()] = obj
            .get(e.name())
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| Error::Teacher(format!("missing or non-numeric `{}`", e.name())))?;
    }
    EmotionDistribution::from_teacher(&raw)
}

impl Teacher for HttpTeacher {
    fn generate(&self, emotion: Emotion, kind: PromptKind, index: usize) -> Result<String> {
        let messages = serde_json::json!([
            { "role": "system", "content": format!("Reply with exactly one sentence and nothing else. Variation {index}.") },
            { "role": "user", "content": kind.prompt(emotion) },
        ]);
        let out = self.chat(messages)?;
        out.lines()
            .map(|l| l.trim().trim_start_matches(|c: char| c.is_ascii_digit() || c == '.' || c == '-').trim())
            .find(|l| !l.is_empty())
            .map(str::to_owned)
            .ok_or_else(|| Error::Teacher("empty generation".into()))
    }

    fn classify(&self, text: &str) -> Result<EmotionDistribution> {
        let names: Vec<&str> = Emotion::ALL.iter().map(|e| e.name()).collect();
        let messages = serde_json::json!([
            { "role": "system", "content": format!("{CLASSIFY_PROMPT} Use exactly these keys: {}.", names.join(", ")) },
            { "role": "user", "content": text },
        ]);
        parse_teacher_json(&self.chat(messages)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillPair {
    pub text: String,
    pub kind: PromptKind,
    pub p: EmotionDistribution,
}

/// `(emotion, kind)` for generation slot `i`. Every prefix of the slot
/// sequence is balanced to within one across emotions, across kinds and
/// across the fourteen combinations.
pub fn slot(i: usize) -> (Emotion, PromptKind) {
    let s = i % (2 * NUM_EMOTIONS);
    let kind = if (s % NUM_EMOTIONS + s / NUM_EMOTIONS) % 2 == 0 {
        PromptKind::Descriptive
    } else {
        PromptKind::ScriptLike
    };
    (Emotion::ALL[s % NUM_EMOTIONS], kind)
}

/// Generates and labels `n` pairs with at most `parallelism` teacher
/// calls in flight. Output order follows the slot index.
pub fn build_distill_dataset(n: usize, teacher: &dyn Teacher, parallelism: usize) -> Result<Vec<DistillPair>> {
    if n < NUM_EMOTIONS {
        return Err(Error::invalid(format!("dataset size {n} below 7")));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<DistillPair>>>> = Mutex::new((0..n).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= n {
            break;
        }
        let (emotion, kind) = slot(i);
        let item = teacher.generate(emotion, kind, i).and_then(|text| match teacher.classify(&text) {
            Ok(p) => Ok(DistillPair { text, kind, p }),
            Err(e) => Err(Error::Teacher(format!("labeling {text:?}: {e}"))),
        });
        let failed = item.is_err();
        results.lock().expect("results lock")[i] = Some(item);
        if failed {
            next.store(n, Ordering::SeqCst);
        }
    };
    std::thread::scope(|s| {
        for _ in 0..parallelism.max(1) {
            s.spawn(&work);
        }
    });
    let results = results.into_inner().expect("results lock");
    let mut out = Vec::with_capacity(n);
    for r in results {
        match r {
            Some(Ok(p)) => out.push(p),
            Some(Err(e)) => return Err(e),
            None => return Err(Error::Teacher("generation aborted after an earlier failure".into())),
        }
    }
    Ok(out)
}

pub fn write_jsonl(path: &std::path::Path, pairs: &[DistillPair]) -> Result<()> {
    std::fs::write(path, to_jsonl(pairs)?)?;
    Ok(())
}

pub fn to_jsonl(pairs: &[DistillPair]) -> Result<String> {
    let mut s = String::new();
    for p in pairs {
        s.push_str(&serde_json::to_string(p)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_jsonl(path: &std::path::Path) -> Result<Vec<DistillPair>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    /// Hash buckets for character trigrams.
    pub buckets: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_tokens: usize,
    pub rank: usize,
    pub lora_alpha: f64,
    /// Attention projections that receive adapters: any of q, k, v, o.
    pub targets: Vec<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            buckets: 1024,
            dim: 64,
            layers: 2,
            heads: 4,
            max_tokens: 96,
            rank: 4,
            lora_alpha: 8.0,
            targets: vec!["q".into(), "v".into()],
            epochs: 12,
            batch_size: 32,
            optim: OptimConfig {
                lr: 2e-2,
                warmup_steps: 10,
                ..OptimConfig::default()
            },
            seed: 61,
        }
    }
}

/// Hashed character trigrams of the lowercased text framed by spaces.
/// Bucket 0 is reserved for texts too short to have a trigram.
pub fn trigram_ids(text: &str, buckets: usize, max_tokens: usize) -> Vec<u32> {
    let chars: Vec<char> = std::iter::once(' ')
        .chain(text.to_lowercase().chars())
        .chain(std::iter::once(' '))
        .collect();
    let mut ids: Vec<u32> = chars
        .windows(3)
        .take(max_tokens)
        .map(|w| {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for c in w {
                for b in (*c as u32).to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
            1 + (h % (buckets as u64 - 1)) as u32
        })
        .collect();
    if ids.is_empty() {
        ids.push(0);
    }
    ids
}

struct LoraLinear {
    base: Linear,
    adapter: Option<(Tensor, Tensor)>,
    scale: f64,
}

impl LoraLinear {
    fn new(
        base_store: &mut ParamStore,
        adapter_store: &mut ParamStore,
        name: &str,
        dim: usize,
        rank: usize,
        alpha: f64,
        adapted: bool,
    ) -> Result<Self> {
        let base = Linear::new(base_store, name, dim, dim)?;
        let adapter = if adapted {
            let a = adapter_store.param(
                &format!("{name}.lora_a"),
                (rank, dim),
                Init::Normal(1.0 / (dim as f64).sqrt()),
            )?;
            let b = adapter_store.param(&format!("{name}.lora_b"), (dim, rank), Init::Zeros)?;
            Some((a, b))
        } else {
            None
        };
        Ok(Self {
            base,
            adapter,
            scale: alpha / rank as f64,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.base.forward(x)?;
        Ok(match &self.adapter {
            Some((a, b)) => {
                let (bsz, s, d) = x.dims3()?;
                let flat = x.reshape((bsz * s, d))?;
                let delta = flat.matmul(&a.t()?)?.matmul(&b.t()?)?.reshape((bsz, s, d))?;
                (y + (delta * self.scale)?)?
            }
            None => y,
        })
    }
}

struct StudentLayer {
    ln1: LayerNorm,
    q: LoraLinear,
    k: LoraLinear,
    v: LoraLinear,
    o: LoraLinear,
    ln2: LayerNorm,
    ff: FeedForward,
}

/// Small text classifier: frozen base encoder plus trainable adapters
/// and output head.
pub struct Student {
    cfg: StudentConfig,
    base: ParamStore,
    adapter: ParamStore,
    embed: Tensor,
    layers: Vec<StudentLayer>,
    ln_f: LayerNorm,
    head: Linear,
    positions: Tensor,
}

impl std::fmt::Debug for Student {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Student").field("cfg", &self.cfg).finish()
    }
}

impl Student {
    pub fn new(cfg: &StudentConfig) -> Result<Self> {
        if cfg.rank == 0 || cfg.rank >= cfg.dim {
            return Err(Error::Config(format!(
                "adapter rank {} must be in 1..{}",
                cfg.rank, cfg.dim
            )));
        }
        for t in &cfg.targets {
            if !["q", "k", "v", "o"].contains(&t.as_str()) {
                return Err(Error::Config(format!("unknown adapter target `{t}`")));
            }
        }
        if cfg.buckets < 2 {
            return Err(Error::Config("need at least 2 trigram buckets".into()));
        }
        let mut base = ParamStore::new("t2e_base", cfg.seed, DType::F32);
        let mut adapter = ParamStore::new("t2e_adapter", cfg.seed + 1, DType::F32);
        let d = cfg.dim;
        let embed = base.param("embed", (cfg.buckets, d), Init::Normal(1.0))?;
        let head = Linear::new(&mut adapter, "head", d, NUM_EMOTIONS)?;
        let has = |t: &str| cfg.targets.iter().any(|x| x == t);
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let mut proj = |p: &str| {
                LoraLinear::new(&mut base, &mut adapter, &format!("layer{i}.{p}"), d, cfg.rank, cfg.lora_alpha, has(p))
            };
            let (q, k, v, o) = (proj("q")?, proj("k")?, proj("v")?, proj("o")?);
            layers.push(StudentLayer {
                ln1: LayerNorm::new(&mut base, &format!("layer{i}.ln1"), d)?,
                q,
                k,
                v,
                o,
                ln2: LayerNorm::new(&mut base, &format!("layer{i}.ln2"), d)?,
                ff: FeedForward::new(&mut base, &format!("layer{i}.ff"), d, 4 * d)?,
            });
        }
        let ln_f = LayerNorm::new(&mut base, "ln_f", d)?;
        base.freeze();
        let positions = Tensor::from_vec(harmonic_table(cfg.max_tokens, d), (cfg.max_tokens, d), &Device::Cpu)?
            .to_dtype(DType::F32)?;
        Ok(Self {
            cfg: cfg.clone(),
            base,
            adapter,
            embed,
            layers,
            ln_f,
            head,
            positions,
        })
    }

    pub fn config(&self) -> &StudentConfig {
        &self.cfg
    }

    pub fn base(&self) -> &ParamStore {
        &self.base
    }

    pub fn adapter(&self) -> &ParamStore {
        &self.adapter
    }

    pub fn base_checksum(&self) -> Result<String> {
        self.base.checksum()
    }

    /// Logits `[b, 7]`.
    pub fn logits(&self, texts: &[&str]) -> Result<Tensor> {
        let b = texts.len();
        if b == 0 {
            return Err(Error::invalid("no texts"));
        }
        let ids: Vec<Vec<u32>> = texts
            .iter()
            .map(|t| trigram_ids(t, self.cfg.buckets, self.cfg.max_tokens))
            .collect();
        let s = ids.iter().map(Vec::len).max().unwrap_or(1);
        let d = self.cfg.dim;
        let flat: Vec<u32> = ids
            .iter()
            .flat_map(|r| r.iter().copied().chain(std::iter::repeat(0)).take(s))
            .collect();
        let idx = Tensor::from_vec(flat, b * s, &Device::Cpu)?;
        let pos = self.positions.narrow(0, 0, s)?.unsqueeze(0)?;
        let mut h = self.embed.index_select(&idx, 0)?.reshape((b, s, d))?.broadcast_add(&pos)?;
        let allowed: Vec<bool> = ids
            .iter()
            .flat_map(|r| (0..s * s).map(move |i| i % s < r.len()))
            .collect();
        let mask = additive_mask(&allowed, (b, s, s), DType::F32)?;
        let heads = self.cfg.heads;
        let hd = d / heads;
        for l in &self.layers {
            let x = l.ln1.forward(&h)?;
            let split = |t: Tensor| -> Result<Tensor> {
                Ok(t.reshape((b, s, heads, hd))?.transpose(1, 2)?.contiguous()?)
            };
            let q = split(l.q.forward(&x)?)?;
            let k = split(l.k.forward(&x)?)?;
            let v = split(l.v.forward(&x)?)?;
            let att = softmax_last(&(q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?.broadcast_add(&mask)?)?;
            let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, s, d))?;
            h = (h + l.o.forward(&y)?)?;
            h = (&h + l.ff.forward(&l.ln2.forward(&h)?)?)?;
        }
        let h = self.ln_f.forward(&h)?;
        let weights: Vec<f32> = ids
            .iter()
            .flat_map(|r| (0..s).map(move |i| if i < r.len() { 1.0 / r.len() as f32 } else { 0.0 }))
            .collect();
        let w = Tensor::from_vec(weights, (b, 1, s), &Device::Cpu)?;
        let pooled = w.matmul(&h)?.squeeze(1)?;
        Ok(self.head.forward(&pooled)?)
    }

    pub fn predict(&self, text: &str) -> Result<EmotionDistribution> {
        let p = softmax_last(&self.logits(&[text])?)?.squeeze(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        EmotionDistribution::from_weights(&p)
    }

    /// Mean soft cross-entropy against the pairs' distributions.
    pub fn cross_entropy(&self, pairs: &[DistillPair]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in pairs.chunks(64) {
            let loss = self.batch_loss(chunk)?.to_scalar::<f32>()? as f64;
            total += loss * chunk.len() as f64;
        }
        Ok(total / pairs.len().max(1) as f64)
    }

    fn batch_loss(&self, pairs: &[DistillPair]) -> Result<Tensor> {
        let texts: Vec<&str> = pairs.iter().map(|p| p.text.as_str()).collect();
        let logits = self.logits(&texts)?;
        let targets: Vec<f32> = pairs.iter().flat_map(|p| p.p.probs().map(|v| v as f32)).collect();
        let t = Tensor::from_vec(targets, (pairs.len(), NUM_EMOTIONS), &Device::Cpu)?;
        soft_cross_entropy(&logits, &t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let base = self.base.to_bytes()?;
        let adapter = self.adapter.to_bytes()?;
        let mut out = Vec::with_capacity(base.len() + adapter.len() + 8);
        out.extend_from_slice(&(base.len() as u64).to_le_bytes());
        out.extend_from_slice(&base);
        out.extend_from_slice(&adapter);
        Ok(out)
    }

    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        if bytes.len() < 8 {
            return Err(Error::Checkpoint("student blob truncated".into()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        if bytes.len() < 8 + n {
            return Err(Error::Checkpoint("student blob truncated".into()));
        }
        self.base.unfreeze();
        let r = self.base.load_bytes(&bytes[8..8 + n]);
        self.base.freeze();
        r?;
        self.adapter.load_bytes(&bytes[8 + n..])
    }
}

/// `mean_b -sum_i p_bi log softmax(logits)_bi`.
pub fn soft_cross_entropy(logits: &Tensor, p: &Tensor) -> Result<Tensor> {
    let lp = log_softmax_last(logits)?;
    Ok((p.to_dtype(lp.dtype())? * lp)?.sum(1)?.neg()?.mean_all()?)
}

/// Scalar form of the distillation objective on explicit distributions.
pub fn soft_cross_entropy_dist(p: &[EmotionDistribution], q: &[EmotionDistribution]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::invalid("mismatched or empty distribution lists"));
    }
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q) {
        for (pi, qi) in a.probs().iter().zip(b.probs()) {
            if *pi > 0.0 {
                total -= pi * qi.max(1e-300).ln();
            }
        }
    }
    Ok(total / p.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillReport {
    pub epoch_losses: Vec<f64>,
    pub base_checksum_before: String,
    pub base_checksum_after: String,
}

/// Trains adapters and head on `dataset`; the base encoder is untouched.
pub fn distill_student(student: &mut Student, dataset: &[DistillPair]) -> Result<DistillReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty distillation dataset"));
    }
    let cfg = student.cfg.clone();
    let before = student.base_checksum()?;
    let per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let mut trainer = Trainer::new(student.adapter.trainable_vars()?, &cfg.optim, cfg.epochs * per_epoch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd157);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<DistillPair> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let loss = student.batch_loss(&batch)?;
            sum += trainer.step(&loss)? * batch.len() as f64;
        }
        let mean = sum / dataset.len() as f64;
        log::info!("distill epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let after = student.base_checksum()?;
    if after != before {
        return Err(Error::Frozen("t2e_base changed during distillation".into()));
    }
    Ok(DistillReport {
        epoch_losses,
        base_checksum_before: before,
        base_checksum_after: after,
    })
}
