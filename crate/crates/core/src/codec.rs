//! Trainable vector-quantization codec producing the semantic tokens.
//!
//! Non-overlapping windows of `downsample_rate` mel frames are flattened,
//! mapped to a `d_code` vector by a linear encoder and snapped to the
//! nearest codebook row. Training is VQ-VAE style: a linear decoder
//! reconstructs the window from the quantized vector, gradients pass the
//! quantizer with the straight-through estimator, and codebook/commitment
//! terms pull codes and encodings together. Unused codes are re-seeded
//! from live encodings so the codebook does not collapse.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::mel::Mel;
use crate::nn::Linear;
use crate::optim::{OptimConfig, Trainer};
use crate::params::{read_u32, Init, ParamStore};

const MAGIC: &[u8; 4] = b"DTC1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub v_sem: usize,
    pub d_code: usize,
    pub downsample_rate: usize,
    pub n_mels: usize,
    pub max_steps: usize,
    pub lr: f64,
    pub commitment: f64,
    /// Stop once the relative MSE improvement over `check_every` steps drops below this.
    pub plateau_tol: f64,
    pub check_every: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            v_sem: 64,
            d_code: 32,
            downsample_rate: 4,
            n_mels: 80,
            max_steps: 800,
            lr: 3e-3,
            commitment: 0.25,
            plateau_tol: 1e-3,
            check_every: 50,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct SemanticTokenSeq {
    pub tokens: Vec<u32>,
    /// Whether generation ended with the end-of-audio token.
    pub terminated_eos: bool,
}

impl SemanticTokenSeq {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self {
            tokens,
            terminated_eos: false,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, v_sem: usize) -> Result<()> {
        match self.tokens.iter().find(|&&t| t as usize >= v_sem) {
            Some(t) => Err(Error::invalid(format!("semantic token {t} >= vocabulary {v_sem}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub recon_mse: f64,
    pub frame_variance: f64,
    pub codes_used: usize,
}

pub struct CodecModel {
    cfg: CodecConfig,
    store: ParamStore,
    encoder: Linear,
    decoder: Linear,
    codebook: Tensor,
}

impl std::fmt::Debug for CodecModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CodecModel").field("cfg", &self.cfg).finish()
    }
}

impl CodecModel {
    pub fn new(cfg: &CodecConfig) -> Result<Self> {
        if cfg.v_sem < 2 {
            return Err(Error::invalid("v_sem must be >= 2"));
        }
        if cfg.downsample_rate == 0 {
            return Err(Error::invalid("downsample_rate must be >= 1"));
        }
        let window = cfg.downsample_rate * cfg.n_mels;
        let mut store = ParamStore::new("codec", cfg.seed, DType::F32);
        let encoder = Linear::new(&mut store, "encoder", window, cfg.d_code)?;
        let decoder = Linear::new(&mut store, "decoder", cfg.d_code, window)?;
        let codebook = store.param("codebook", (cfg.v_sem, cfg.d_code), Init::Normal(1.0))?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            decoder,
            codebook,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn v_sem(&self) -> usize {
        self.cfg.v_sem
    }

    pub fn downsample_rate(&self) -> usize {
        self.cfg.downsample_rate
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn codebook(&self) -> &Tensor {
        &self.codebook
    }

    fn windows(&self, mel: &Mel) -> Result<Tensor> {
        let ds = self.cfg.downsample_rate;
        if mel.bins() != self.cfg.n_mels {
            return Err(Error::shape(format!(
                "codec expects {} mel bins, got {}",
                self.cfg.n_mels,
                mel.bins()
            )));
        }
        if mel.frames() < ds {
            return Err(Error::invalid(format!(
                "mel has {} frames, codec window is {ds}",
                mel.frames()
            )));
        }
        let n = mel.frames() / ds;
        let data = mel.data()[..n * ds * mel.bins()].to_vec();
        Ok(Tensor::from_vec(data, (n, ds * mel.bins()), &Device::Cpu)?)
    }

    /// Encoder output for every full window, `[n, d_code]`.
    pub fn encode_windows(&self, mel: &Mel) -> Result<Tensor> {
        Ok(self.encoder.forward(&self.windows(mel)?)?)
    }

    /// Index of the nearest codebook row for each row of `z`.
    pub fn nearest(&self, z: &Tensor) -> Result<Vec<u32>> {
        let z2 = z.sqr()?.sum_keepdim(1)?;
        let c2 = self.codebook.sqr()?.sum_keepdim(1)?.t()?;
        let cross = z.matmul(&self.codebook.t()?)?;
        let d = z2.broadcast_add(&c2)?.broadcast_sub(&(cross * 2.0)?)?;
        let rows = d.to_vec2::<f32>()?;
        Ok(rows
            .iter()
            .map(|r| {
                let mut best = 0usize;
                for (k, v) in r.iter().enumerate() {
                    if *v < r[best] {
                        best = k;
                    }
                }
                best as u32
            })
            .collect())
    }

    pub fn encode(&self, mel: &Mel) -> Result<SemanticTokenSeq> {
        let z = self.encode_windows(mel)?;
        Ok(SemanticTokenSeq::new(self.nearest(&z)?))
    }

    /// Decoder output for the codebook rows of `seq`, as a mel of
    /// `len * downsample_rate` frames.
    pub fn reconstruct(&self, seq: &SemanticTokenSeq) -> Result<Mel> {
        seq.validate(self.cfg.v_sem)?;
        if seq.is_empty() {
            return Err(Error::invalid("cannot reconstruct an empty token sequence"));
        }
        let ids = Tensor::from_vec(seq.tokens.clone(), seq.len(), &Device::Cpu)?;
        let q = self.codebook.index_select(&ids, 0)?;
        let w = self.decoder.forward(&q)?;
        let frames = seq.len() * self.cfg.downsample_rate;
        let data = w.flatten_all()?.to_vec1::<f32>()?;
        Mel::new(frames, self.cfg.n_mels, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        for v in [
            VERSION,
            self.cfg.v_sem as u32,
            self.cfg.d_code as u32,
            self.cfg.downsample_rate as u32,
            self.cfg.n_mels as u32,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        let mut put = |t: &Tensor| -> Result<()> {
            for v in t.flatten_all()?.to_vec1::<f32>()? {
                out.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        put(&self.codebook)?;
        for name in ["encoder.weight", "encoder.bias", "decoder.weight", "decoder.bias"] {
            put(&self.store.get(name).expect("codec parameter"))?;
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, None)
    }

    /// Parses a `DTC1` blob. Training hyperparameters come from `base` when given.
    pub fn from_bytes(bytes: &[u8], base: Option<&CodecConfig>) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a codec file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported codec version {version}")));
        }
        let mut cfg = base.cloned().unwrap_or_default();
        cfg.v_sem = read_u32(&mut r)? as usize;
        cfg.d_code = read_u32(&mut r)? as usize;
        cfg.downsample_rate = read_u32(&mut r)? as usize;
        cfg.n_mels = read_u32(&mut r)? as usize;
        let model = Self::new(&cfg)?;
        let window = cfg.downsample_rate * cfg.n_mels;
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                v.push(f32::from_le_bytes(b));
            }
            Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
        };
        let codebook = take(&[cfg.v_sem, cfg.d_code])?;
        let ew = take(&[cfg.d_code, window])?;
        let eb = take(&[cfg.d_code])?;
        let dw = take(&[window, cfg.d_code])?;
        let db = take(&[window])?;
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes in codec file".into()));
        }
        model.store.set("codebook", &codebook)?;
        model.store.set("encoder.weight", &ew)?;
        model.store.set("encoder.bias", &eb)?;
        model.store.set("decoder.weight", &dw)?;
        model.store.set("decoder.bias", &db)?;
        Ok(model)
    }
}

fn collect_windows(corpus: &Corpus, ds: usize, n_mels: usize) -> Result<(Vec<f32>, usize)> {
    let mut data = Vec::new();
    let mut n = 0;
    for u in corpus.utterances() {
        if u.mel.bins() != n_mels {
            return Err(Error::shape(format!(
                "utterance `{}` has {} bins, codec expects {n_mels}",
                u.id,
                u.mel.bins()
            )));
        }
        let w = u.mel.frames() / ds;
        data.extend_from_slice(&u.mel.data()[..w * ds * n_mels]);
        n += w;
    }
    Ok((data, n))
}

/// Trains a codec on every full window of `corpus`.
pub fn train_vq(corpus: &Corpus, cfg: &CodecConfig) -> Result<(CodecModel, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let model = CodecModel::new(cfg)?;
    let ds = cfg.downsample_rate;
    let width = ds * cfg.n_mels;
    let (data, n) = collect_windows(corpus, ds, cfg.n_mels)?;
    if cfg.v_sem > n {
        return Err(Error::invalid(format!(
            "v_sem = {} exceeds the {n} training windows",
            cfg.v_sem
        )));
    }
    let distinct: HashSet<Vec<u32>> = data
        .chunks(width)
        .map(|w| w.iter().map(|v| v.to_bits()).collect())
        .collect();
    let x = Tensor::from_vec(data, (n, width), &Device::Cpu)?;
    let mean = x.mean_keepdim(0)?;
    let frame_variance = x
        .broadcast_sub(&mean)?
        .sqr()?
        .mean_all()?
        .to_scalar::<f32>()? as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    // Codebook starts at the encodings of randomly chosen windows.
    {
        let z = model.encoder.forward(&x)?;
        let picks = sample_rows(&mut rng, n, cfg.v_sem);
        let ids = Tensor::from_vec(picks, cfg.v_sem, &Device::Cpu)?;
        model.store.set("codebook", &z.index_select(&ids, 0)?)?;
    }

    let vars = model.store.trainable_vars()?;
    let opt_cfg = OptimConfig {
        lr: cfg.lr,
        warmup_steps: 10,
        final_lr_ratio: 0.1,
        clip_norm: 0.0,
        ..Default::default()
    };
    let mut trainer = Trainer::new(vars, &opt_cfg, cfg.max_steps)?;
    let mut last_check = f64::INFINITY;
    let mut steps = 0;
    for step in 0..cfg.max_steps {
        let z = model.encoder.forward(&x)?;
        let idx = model.nearest(&z)?;
        if step > 0 && step % cfg.check_every == 0 && step + cfg.check_every < cfg.max_steps {
            reseed_dead_codes(&model, &z, &idx, &mut rng)?;
        }
        let ids = Tensor::from_vec(idx, n, &Device::Cpu)?;
        let q = model.codebook.index_select(&ids, 0)?;
        let st = (&z + (&q - &z)?.detach())?;
        let recon = model.decoder.forward(&st)?;
        let rec = (&recon - &x)?.sqr()?.mean_all()?;
        let codebook_term = (&q - z.detach())?.sqr()?.mean_all()?;
        let commit = (&z - q.detach())?.sqr()?.mean_all()?;
        let loss = ((&rec + &codebook_term)? + (commit * cfg.commitment)?)?;
        trainer.step(&loss)?;
        let recon_mse = rec.to_scalar::<f32>()? as f64;
        steps = step + 1;
        if steps % cfg.check_every == 0 {
            if last_check.is_finite() && (last_check - recon_mse) / last_check.max(1e-12) < cfg.plateau_tol {
                break;
            }
            last_check = recon_mse;
        }
    }
    let final_idx = model.nearest(&model.encoder.forward(&x)?)?;
    let codes_used = final_idx.iter().collect::<HashSet<_>>().len();
    let recon_mse = {
        let ids = Tensor::from_vec(final_idx, n, &Device::Cpu)?;
        let q = model.codebook.index_select(&ids, 0)?;
        let recon = model.decoder.forward(&q)?;
        (&recon - &x)?.sqr()?.mean_all()?.to_scalar::<f32>()? as f64
    };
    log::info!(
        "codec: {steps} steps, recon mse {recon_mse:.4} (frame variance {frame_variance:.4}), {codes_used}/{} codes used, {} distinct windows",
        cfg.v_sem,
        distinct.len()
    );
    Ok((
        model,
        TrainReport {
            steps,
            recon_mse,
            frame_variance,
            codes_used,
        },
    ))
}

fn sample_rows(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<u32> {
    let mut all: Vec<u32> = (0..n as u32).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        all.swap(i, j);
    }
    all.truncate(k);
    all
}

fn reseed_dead_codes(model: &CodecModel, z: &Tensor, idx: &[u32], rng: &mut ChaCha8Rng) -> Result<()> {
    let used: HashSet<u32> = idx.iter().copied().collect();
    let dead: Vec<usize> = (0..model.cfg.v_sem).filter(|k| !used.contains(&(*k as u32))).collect();
    if dead.is_empty() {
        return Ok(());
    }
    let mut book = model.codebook.to_vec2::<f32>()?;
    let zs = z.to_vec2::<f32>()?;
    for k in dead {
        let src = rng.random_range(0..zs.len());
        book[k] = zs[src].iter().map(|v| v + 1e-3 * (rng.random::<f32>() - 0.5)).collect();
    }
    let t = Tensor::new(book, &Device::Cpu)?;
    model.store.set("codebook", &t)
}

/// Row `i` of the result is `table[seq[i]]`; `table` is `[V_sem, D]`.
pub fn embed_tokens(table: &Tensor, seq: &SemanticTokenSeq) -> Result<Tensor> {
    let (v, d) = table.dims2()?;
    seq.validate(v)?;
    if seq.is_empty() {
        return Ok(Tensor::zeros((0, d), table.dtype(), &Device::Cpu)?);
    }
    let ids = Tensor::from_vec(seq.tokens.clone(), seq.len(), &Device::Cpu)?;
    Ok(table.index_select(&ids, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;
    use crate::emotion::Emotion;

    fn small_cfg(v_sem: usize) -> CodecConfig {
        CodecConfig {
            v_sem,
            d_code: 8,
            n_mels: 16,
            max_steps: 60,
            ..Default::default()
        }
    }

    fn small_corpus() -> Corpus {
        crate::corpus::synth_corpus_with(&crate::corpus::SynthSpec {
            seed: 3,
            n_speakers: 2,
            utts_per_speaker: 2,
            min_frames: 16,
            max_frames: 24,
            n_mels: 16,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn token_count_is_floor_of_frames() {
        let (m, _) = train_vq(&small_corpus(), &small_cfg(4)).unwrap();
        for f in [4usize, 7, 8, 13] {
            let mel = Mel::filled(f, 16, 0.3).unwrap();
            assert_eq!(m.encode(&mel).unwrap().len(), f / 4);
        }
        assert!(m.encode(&Mel::filled(3, 16, 0.0).unwrap()).is_err());
    }

    #[test]
    fn constant_corpus_uses_one_code() {
        let utts = (0..2)
            .map(|i| Utterance {
                id: format!("u{i}"),
                speaker_id: "s".into(),
                emotion: Emotion::Neutral,
                text_tokens: vec![1],
                mel: Mel::filled(16, 16, 0.5).unwrap(),
                sample_rate: 16_000,
            })
            .collect();
        let corpus = Corpus::new(utts).unwrap();
        let (m, report) = train_vq(&corpus, &small_cfg(2)).unwrap();
        assert_eq!(report.codes_used, 1);
        let toks = m.encode(&corpus.utterances()[0].mel).unwrap();
        assert!(toks.tokens.iter().all(|&t| t == toks.tokens[0]));
    }

    #[test]
    fn too_many_codes_is_an_error() {
        let c = small_corpus();
        assert!(train_vq(&c, &small_cfg(1000)).is_err());
        assert!(CodecModel::new(&small_cfg(1)).is_err());
    }

    #[test]
    fn codebook_row_probe_maps_to_its_index() {
        let (m, _) = train_vq(&small_corpus(), &small_cfg(4)).unwrap();
        // For a window w with encoder(w) = codebook[k] the nearest code is k.
        // Build w by least squares: w = W^T (W W^T)^-1 (c_k - b).
        let w = m.store.get("encoder.weight").unwrap().to_dtype(DType::F64).unwrap();
        let b = m.store.get("encoder.bias").unwrap().to_dtype(DType::F64).unwrap();
        let book = m.codebook.to_dtype(DType::F64).unwrap();
        let gram = w.matmul(&w.t().unwrap()).unwrap().to_vec2::<f64>().unwrap();
        let inv = invert(&gram);
        let inv = Tensor::new(inv, &Device::Cpu).unwrap();
        for k in 0..4 {
            let target = (book.get(k).unwrap() - &b).unwrap().unsqueeze(1).unwrap();
            let win = w.t().unwrap().matmul(&inv.matmul(&target).unwrap()).unwrap();
            let win: Vec<f32> = win
                .flatten_all()
                .unwrap()
                .to_dtype(DType::F32)
                .unwrap()
                .to_vec1()
                .unwrap();
            let mel = Mel::new(4, 16, win).unwrap();
            assert_eq!(m.encode(&mel).unwrap().tokens, vec![k as u32]);
        }
    }

    fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut row = r.clone();
                row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for c in 0..n {
            let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
            m.swap(c, p);
            let d = m[c][c];
            for v in m[c].iter_mut() {
                *v /= d;
            }
            for r in 0..n {
                if r != c {
                    let f = m[r][c];
                    let row_c = m[c].clone();
                    for (v, x) in m[r].iter_mut().zip(row_c) {
                        *v -= f * x;
                    }
                }
            }
        }
        m.into_iter().map(|r| r[n..].to_vec()).collect()
    }

    #[test]
    fn embed_tokens_selects_rows() {
        let table = Tensor::new(&[[1f32, 0.0], [0.0, 1.0], [2.0, 3.0]], &Device::Cpu).unwrap();
        let e = embed_tokens(&table, &SemanticTokenSeq::new(vec![2, 0, 2])).unwrap();
        assert_eq!(
            e.to_vec2::<f32>().unwrap(),
            vec![vec![2.0, 3.0], vec![1.0, 0.0], vec![2.0, 3.0]]
        );
        let empty = embed_tokens(&table, &SemanticTokenSeq::default()).unwrap();
        assert_eq!(empty.dims(), &[0, 2]);
        assert!(embed_tokens(&table, &SemanticTokenSeq::new(vec![3])).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, _) = train_vq(&small_corpus(), &small_cfg(4)).unwrap();
        let bytes = m.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DTC1");
        let back = CodecModel::from_bytes(&bytes, None).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(CodecModel::from_bytes(b"NOPE", None).is_err());
    }
}
