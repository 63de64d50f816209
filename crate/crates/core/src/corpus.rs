//! Corpus ingestion, the deterministic synthetic corpus, and the sampling
//! helpers used to build prompt/target training pairs.
//!
//! Synthetic utterances are generated directly as log-mel-like matrices:
//!
//! * each speaker owns a spectral band (a formant-like bump plus a weaker
//!   harmonic) at a bin fixed by the speaker index;
//! * each emotion adds a global offset, a spectral tilt and a periodic
//!   frame-energy envelope;
//! * each text token is a "phone" with its own pair of bumps, held for a
//!   random number of frames.
//!
//! Speaker and emotion effects therefore do not depend on the seed, so two
//! corpora built with different seeds share speakers and emotions but not
//! timing or noise.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::emotion::{Emotion, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::mel::Mel;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub emotion: Emotion,
    pub text_tokens: Vec<u32>,
    pub mel: Mel,
    pub sample_rate: u32,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.mel.frames()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    speakers: BTreeMap<String, Vec<String>>,
    by_id: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Every speaker needs at least two utterances.
    Training,
    Inference,
}

impl Corpus {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut speakers: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut by_id = HashMap::new();
        for (i, u) in utterances.iter().enumerate() {
            if u.mel.frames() < 2 {
                return Err(Error::invalid(format!(
                    "utterance `{}` has {} frame(s), need at least 2",
                    u.id,
                    u.mel.frames()
                )));
            }
            if by_id.insert(u.id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate utterance id `{}`", u.id)));
            }
            speakers
                .entry(u.speaker_id.clone())
                .or_default()
                .push(u.id.clone());
        }
        Ok(Self {
            utterances,
            speakers,
            by_id,
        })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn speakers(&self) -> &BTreeMap<String, Vec<String>> {
        &self.speakers
    }

    pub fn speaker_ids(&self) -> Vec<String> {
        self.speakers.keys().cloned().collect()
    }

    pub fn speaker_index(&self, speaker_id: &str) -> Option<usize> {
        self.speakers.keys().position(|s| s == speaker_id)
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.by_id.get(id).map(|&i| &self.utterances[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn n_mels(&self) -> usize {
        self.utterances[0].mel.bins()
    }

    /// Checks the training-mode pairing precondition.
    pub fn check_pairable(&self) -> Result<()> {
        for (spk, ids) in &self.speakers {
            if ids.len() < 2 {
                return Err(Error::TooFewUtterances {
                    speaker: spk.clone(),
                    count: ids.len(),
                });
            }
        }
        Ok(())
    }

    pub fn validate_text(&self, v_text: usize) -> Result<()> {
        for u in &self.utterances {
            if let Some(t) = u.text_tokens.iter().find(|&&t| t as usize >= v_text) {
                return Err(Error::invalid(format!(
                    "utterance `{}`: text token {t} outside vocabulary of {v_text}",
                    u.id
                )));
            }
        }
        Ok(())
    }

    /// A new corpus with the utterances selected by `keep`.
    pub fn filter(&self, keep: impl Fn(&Utterance) -> bool) -> Result<Corpus> {
        Corpus::new(self.utterances.iter().filter(|u| keep(u)).cloned().collect())
    }
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub n_mels: usize,
    pub v_text: usize,
    pub noise: f32,
    pub sample_rate: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_speakers: 3,
            utts_per_speaker: 8,
            min_frames: 48,
            max_frames: 96,
            n_mels: 80,
            v_text: 32,
            noise: 0.1,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

// (offset, tilt, envelope amplitude, envelope period in frames)
const EMOTION_PROFILES: [(f32, f32, f32, f32); NUM_EMOTIONS] = [
    (1.2, 1.6, 0.6, 6.0),    // Anger
    (0.7, 0.4, 0.4, 10.0),   // Happiness
    (-0.3, 1.2, 0.8, 4.0),   // Fear
    (-0.6, -0.8, 0.3, 12.0), // Disgust
    (-1.3, -1.4, 0.2, 16.0), // Sadness
    (1.1, -0.9, 0.7, 8.0),   // Surprise
    (0.0, 0.0, 0.1, 20.0),   // Neutral
];

const SPEAKER_AMP: f32 = 2.0;
const PHONE_AMP: f32 = 1.5;

fn bump(bin: usize, center: f32, width: f32) -> f32 {
    let d = bin as f32 - center;
    (-(d * d) / (2.0 * width * width)).exp()
}

/// Center bin of speaker `s`'s band.
pub fn speaker_band(s: usize, n_mels: usize) -> f32 {
    let span = n_mels.saturating_sub(24).max(1);
    8.0 * n_mels as f32 / 80.0 + ((s * 13) % span) as f32
}

fn phone_centers(tok: u32, n_mels: usize) -> (f32, f32) {
    let span = n_mels.saturating_sub(8).max(1);
    let c1 = 4.0 + ((tok as usize * 23) % span) as f32;
    let c2 = 2.0 + ((c1 as usize + 30) % (n_mels.saturating_sub(4).max(1))) as f32;
    (c1, c2)
}

/// Emotion of utterance `u` of speaker `s`: consecutive utterances (which
/// share a sentence) always differ, and speakers are offset so each
/// speaker cycles through every emotion.
pub fn synth_emotion(s: usize, u: usize) -> Emotion {
    Emotion::ALL[(u + 2 * s) % NUM_EMOTIONS]
}

/// Renders one synthetic utterance.
fn render_mel(
    speaker: usize,
    emotion: Emotion,
    phones: &[(u32, usize)],
    n_mels: usize,
    noise: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Mel> {
    let frames: usize = phones.iter().map(|p| p.1).sum();
    let (off, tilt, env_amp, period) = EMOTION_PROFILES[emotion.index()];
    let band = speaker_band(speaker, n_mels);
    let harmonic = band + 12.0 * n_mels as f32 / 80.0;
    let phase = rng.random::<f32>() * std::f32::consts::TAU;
    let mut data = Vec::with_capacity(frames * n_mels);
    let mut f = 0usize;
    for &(tok, dur) in phones {
        let (c1, c2) = phone_centers(tok, n_mels);
        for _ in 0..dur {
            let env = env_amp * (std::f32::consts::TAU * f as f32 / period + phase).sin();
            for b in 0..n_mels {
                let ramp = 2.0 * b as f32 / (n_mels - 1).max(1) as f32 - 1.0;
                let z: f32 = StandardNormal.sample(rng);
                let v = SPEAKER_AMP * (bump(b, band, 2.5) + 0.6 * bump(b, harmonic, 2.5))
                    + PHONE_AMP * (bump(b, c1, 2.0) + 0.5 * bump(b, c2, 2.0))
                    + off
                    + tilt * ramp
                    + env
                    + noise * z;
                data.push(v);
            }
            f += 1;
        }
    }
    Mel::new(frames, n_mels, data)
}

/// Deterministic synthetic corpus.
///
/// Utterances `2m` and `2m + 1` of every speaker read sentence `m` of a
/// shared pool with two different emotions, so text and speaker alone do
/// not determine the emotion.
pub fn synth_corpus_with(spec: &SynthSpec) -> Result<Corpus> {
    if spec.n_speakers == 0 {
        return Err(Error::invalid("n_speakers must be >= 1"));
    }
    if spec.utts_per_speaker < 2 {
        return Err(Error::invalid("utts_per_speaker must be >= 2"));
    }
    if spec.min_frames < 8 || spec.min_frames > spec.max_frames {
        return Err(Error::invalid(format!(
            "invalid frames range ({}, {})",
            spec.min_frames, spec.max_frames
        )));
    }
    if spec.n_mels < 16 || spec.v_text < 2 {
        return Err(Error::invalid("n_mels must be >= 16 and v_text >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_sentences = spec.utts_per_speaker.div_ceil(2);
    // Sentence lengths in phones, about four frames per phone on average.
    let sentences: Vec<Vec<u32>> = (0..n_sentences)
        .map(|_| {
            let target = rng.random_range(spec.min_frames..=spec.max_frames);
            let n = (target / 4).max(2);
            (0..n)
                .map(|_| rng.random_range(0..spec.v_text as u32))
                .collect()
        })
        .collect();
    let mut utts = Vec::with_capacity(spec.n_speakers * spec.utts_per_speaker);
    for s in 0..spec.n_speakers {
        for u in 0..spec.utts_per_speaker {
            let text = sentences[u / 2].clone();
            let mut durs: Vec<usize> = text.iter().map(|_| rng.random_range(3..=5)).collect();
            let mut total: usize = durs.iter().sum();
            while total < spec.min_frames {
                let i = rng.random_range(0..durs.len());
                if durs[i] < 8 {
                    durs[i] += 1;
                    total += 1;
                }
            }
            while total > spec.max_frames {
                let i = rng.random_range(0..durs.len());
                if durs[i] > 1 {
                    durs[i] -= 1;
                    total -= 1;
                }
            }
            let emotion = synth_emotion(s, u);
            let phones: Vec<(u32, usize)> = text.iter().copied().zip(durs).collect();
            let mel = render_mel(s, emotion, &phones, spec.n_mels, spec.noise, &mut rng)?;
            utts.push(Utterance {
                id: format!("spk{s}_utt{u:03}"),
                speaker_id: format!("spk{s}"),
                emotion,
                text_tokens: text,
                mel,
                sample_rate: spec.sample_rate,
            });
        }
    }
    Corpus::new(utts)
}

pub fn synth_corpus(
    seed: u64,
    n_speakers: usize,
    utts_per_speaker: usize,
    frames_range: (usize, usize),
) -> Result<Corpus> {
    synth_corpus_with(&SynthSpec {
        seed,
        n_speakers,
        utts_per_speaker,
        min_frames: frames_range.0,
        max_frames: frames_range.1,
        ..SynthSpec::default()
    })
}

// ---------------------------------------------------------------------------
// Sampling helpers

/// Time-scales a mel by factor `r` (> 1 speeds up) using linear
/// interpolation along the frame axis. Output length is `round(F / r)`.
pub fn speed_perturb(mel: &Mel, r: f64) -> Result<Mel> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::invalid(format!("speed factor must be > 0, got {r}")));
    }
    let f_in = mel.frames();
    let f_out = (f_in as f64 / r).round() as usize;
    if f_out == 0 {
        return Err(Error::invalid(format!(
            "speed factor {r} leaves no frames of {f_in}"
        )));
    }
    if f_out == f_in {
        return Ok(mel.clone());
    }
    let bins = mel.bins();
    let scale = if f_out > 1 {
        (f_in - 1) as f64 / (f_out - 1) as f64
    } else {
        0.0
    };
    let mut data = Vec::with_capacity(f_out * bins);
    for i in 0..f_out {
        let pos = i as f64 * scale;
        let lo = (pos.floor() as usize).min(f_in - 1);
        let frac = (pos - lo as f64) as f32;
        if frac == 0.0 || lo + 1 >= f_in {
            data.extend_from_slice(mel.row(lo));
        } else {
            let (a, b) = (mel.row(lo), mel.row(lo + 1));
            data.extend(a.iter().zip(b).map(|(x, y)| x + frac * (y - x)));
        }
    }
    Mel::new(f_out, bins, data)
}

/// Draws an ordered (prompt, target) pair of distinct utterances of one speaker.
pub fn partition_pair<'a, R: Rng + ?Sized>(
    corpus: &'a Corpus,
    speaker_id: &str,
    rng: &mut R,
) -> Result<(&'a Utterance, &'a Utterance)> {
    let ids = corpus
        .speakers()
        .get(speaker_id)
        .ok_or_else(|| Error::UnknownSpeaker(speaker_id.to_string()))?;
    if ids.len() < 2 {
        return Err(Error::TooFewUtterances {
            speaker: speaker_id.to_string(),
            count: ids.len(),
        });
    }
    let i = rng.random_range(0..ids.len());
    let mut j = rng.random_range(0..ids.len() - 1);
    if j >= i {
        j += 1;
    }
    let get = |k: usize| corpus.get(&ids[k]).expect("speaker index consistent");
    Ok((get(i), get(j)))
}

/// Splits an utterance into a prefix prompt and suffix target, both at
/// least `min_frames` long; the split point is uniform over valid positions.
pub fn split_prompt_target<R: Rng + ?Sized>(
    utterance: &Utterance,
    rng: &mut R,
    min_frames: usize,
) -> Result<(Mel, Mel)> {
    let f = utterance.mel.frames();
    if min_frames == 0 || f < 2 * min_frames {
        return Err(Error::invalid(format!(
            "utterance `{}` has {f} frames, split needs {}",
            utterance.id,
            2 * min_frames.max(1)
        )));
    }
    let cut = rng.random_range(min_frames..=f - min_frames);
    Ok((utterance.mel.slice(0, cut)?, utterance.mel.slice(cut, f)?))
}

// ---------------------------------------------------------------------------
// Manifest I/O

/// Reads a feature file: `u32 frames`, `u32 bins`, then row-major f32, all LE.
pub fn read_features(path: &Path) -> Result<Mel> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::invalid(format!("{}: truncated header", path.display())));
    }
    let frames = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let bins = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != frames * bins * 4 {
        return Err(Error::invalid(format!(
            "{}: header says {frames}x{bins} but body has {} bytes",
            path.display(),
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Mel::new(frames, bins, data)
}

pub fn write_features(path: &Path, mel: &Mel) -> Result<()> {
    let mut out = Vec::with_capacity(8 + mel.data().len() * 4);
    out.extend_from_slice(&(mel.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(mel.bins() as u32).to_le_bytes());
    for v in mel.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses a manifest of `id | speaker_id | emotion_label | text_token_csv | feature_file`
/// lines. Relative feature paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path, mode: LoadMode) -> Result<Corpus> {
    let file = fs::File::open(path)?;
    let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let shown = path.display().to_string();
    let err = |line: usize, msg: String| Error::Manifest {
        path: shown.clone(),
        line,
        msg,
    };
    let mut utts = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('|').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(err(line_no, format!("expected 5 fields, found {}", fields.len())));
        }
        let emotion: Emotion = fields[2]
            .parse()
            .map_err(|e: Error| err(line_no, e.to_string()))?;
        let text_tokens = if fields[3].is_empty() {
            Vec::new()
        } else {
            fields[3]
                .split(',')
                .map(|t| t.trim().parse::<u32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(line_no, format!("bad text token list: {e}")))?
        };
        let feat = base.join(fields[4]);
        let mel = read_features(&feat).map_err(|e| err(line_no, e.to_string()))?;
        if mel.frames() < 2 {
            return Err(err(line_no, "mel has fewer than 2 frames".into()));
        }
        utts.push(Utterance {
            id: fields[0].to_string(),
            speaker_id: fields[1].to_string(),
            emotion,
            text_tokens,
            mel,
            sample_rate: DEFAULT_SAMPLE_RATE,
        });
    }
    let corpus = Corpus::new(utts)?;
    if mode == LoadMode::Training {
        corpus.check_pairable()?;
    }
    Ok(corpus)
}

/// Writes `manifest.txt` plus one `.feat` file per utterance into `dir`.
pub fn write_manifest(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("features"))?;
    let manifest = dir.join("manifest.txt");
    let mut out = fs::File::create(&manifest)?;
    for u in corpus.utterances() {
        let rel = format!("features/{}.feat", u.id);
        write_features(&dir.join(&rel), &u.mel)?;
        let toks: Vec<String> = u.text_tokens.iter().map(|t| t.to_string()).collect();
        writeln!(
            out,
            "{} | {} | {} | {} | {}",
            u.id,
            u.speaker_id,
            u.emotion,
            toks.join(","),
            rel
        )?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_mel(frames: usize, bins: usize) -> Mel {
        let data = (0..frames * bins).map(|i| (i as f32 * 0.37).sin()).collect();
        Mel::new(frames, bins, data).unwrap()
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_corpus(7, 2, 3, (16, 32)).unwrap();
        let b = synth_corpus(7, 2, 3, (16, 32)).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(8, 2, 3, (16, 32)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_counts() {
        let c = synth_corpus(1, 3, 4, (16, 32)).unwrap();
        assert_eq!(c.len(), 12);
        assert_eq!(c.speakers().len(), 3);
        for u in c.utterances() {
            assert!((16..=32).contains(&u.frames()));
        }
    }

    #[test]
    fn synth_rejects_bad_ranges() {
        assert!(synth_corpus(1, 0, 4, (16, 32)).is_err());
        assert!(synth_corpus(1, 2, 1, (16, 32)).is_err());
        assert!(synth_corpus(1, 2, 4, (40, 32)).is_err());
    }

    #[test]
    fn paired_utterances_share_text_but_not_emotion() {
        let c = synth_corpus(3, 2, 6, (16, 32)).unwrap();
        let u = c.utterances();
        for s in 0..2 {
            for m in 0..3 {
                let a = &u[s * 6 + 2 * m];
                let b = &u[s * 6 + 2 * m + 1];
                assert_eq!(a.text_tokens, b.text_tokens);
                assert_ne!(a.emotion, b.emotion);
            }
        }
    }

    #[test]
    fn speed_perturb_identity_and_lengths() {
        let m = ramp_mel(100, 5);
        assert_eq!(speed_perturb(&m, 1.0).unwrap(), m);
        assert_eq!(speed_perturb(&m, 1.25).unwrap().frames(), 80);
        for r in [0.8, 0.9, 1.0, 1.1, 1.25] {
            let out = speed_perturb(&m, r).unwrap();
            assert_eq!(out.frames(), (100.0f64 / r).round() as usize);
            assert_eq!(out.bins(), 5);
        }
        assert!(speed_perturb(&m, 0.0).is_err());
        assert!(speed_perturb(&m, -1.0).is_err());
    }

    #[test]
    fn speed_perturb_constant_stays_constant() {
        let m = Mel::filled(37, 4, 0.625).unwrap();
        for r in [0.8, 0.93, 1.17, 1.25] {
            let out = speed_perturb(&m, r).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.625));
        }
    }

    #[test]
    fn partition_pair_two_utterances() {
        let c = synth_corpus(2, 1, 2, (16, 24)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ab = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let (p, t) = partition_pair(&c, "spk0", &mut rng).unwrap();
            assert_ne!(p.id, t.id);
            assert_eq!(p.speaker_id, "spk0");
            if p.id.ends_with("000") {
                ab += 1;
            }
        }
        let freq = ab as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 0.02, "frequency {freq}");
    }

    #[test]
    fn partition_pair_errors() {
        let c = synth_corpus(2, 1, 2, (16, 24)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            partition_pair(&c, "nobody", &mut rng),
            Err(Error::UnknownSpeaker(_))
        ));
        let single = c.filter(|u| u.id.ends_with("000")).unwrap();
        assert!(matches!(
            partition_pair(&single, "spk0", &mut rng),
            Err(Error::TooFewUtterances { .. })
        ));
    }

    #[test]
    fn split_forced_when_exactly_twice_min() {
        let c = synth_corpus(2, 1, 2, (20, 20)).unwrap();
        let u = &c.utterances()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (p, t) = split_prompt_target(u, &mut rng, 10).unwrap();
            assert_eq!((p.frames(), t.frames()), (10, 10));
            assert_eq!(p.row(0), u.mel.row(0));
            assert_eq!(t.row(0), u.mel.row(10));
        }
        assert!(split_prompt_target(u, &mut rng, 11).is_err());
    }
}
