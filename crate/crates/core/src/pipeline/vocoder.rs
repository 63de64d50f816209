//! Mel analysis and Griffin-Lim waveform reconstruction.
//!
//! Mels are natural-log magnitudes of HTK-scale triangular filters applied
//! to a Hann-windowed, centered STFT. Synthesis maps mel magnitudes back
//! onto linear bins with the transposed filterbank, then iterates phase
//! estimates starting from zero phase.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mel::Mel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Magnitude floor before taking the log.
    pub floor: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 512,
            hop: 128,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8_000.0,
            floor: 1e-5,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters, `[n_mels][n_fft / 2 + 1]`, peak value one.
pub fn mel_filterbank(cfg: &AudioConfig) -> Vec<Vec<f32>> {
    let bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    };
                    w as f32
                })
                .collect()
        })
        .collect()
}

/// Result of a Griffin-Lim run.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub wave: Vec<f32>,
    /// Spectral convergence after each iteration.
    pub convergence: Vec<f64>,
}

pub struct Vocoder {
    cfg: AudioConfig,
    fb: Vec<Vec<f32>>,
    window: Vec<f32>,
    fwd: Arc<dyn Fft<f32>>,
    inv: Arc<dyn Fft<f32>>,
}

impl std::fmt::Debug for Vocoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Vocoder").field("cfg", &self.cfg).finish()
    }
}

impl Vocoder {
    pub fn new(cfg: &AudioConfig) -> Result<Self> {
        if cfg.n_fft < 4 || cfg.hop == 0 || cfg.hop > cfg.n_fft || cfg.n_mels == 0 {
            return Err(Error::Config(format!("bad audio config {cfg:?}")));
        }
        if cfg.f_max <= cfg.f_min || cfg.f_max > cfg.sample_rate as f64 / 2.0 {
            return Err(Error::Config("mel band limits outside (0, nyquist]".into()));
        }
        let n = cfg.n_fft;
        let window = (0..n)
            .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32)
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg: cfg.clone(),
            fb: mel_filterbank(cfg),
            window,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        })
    }

    pub fn config(&self) -> &AudioConfig {
        &self.cfg
    }

    fn bins(&self) -> usize {
        self.cfg.n_fft / 2 + 1
    }

    /// Centered STFT with reflect padding; `1 + len / hop` frames.
    pub fn stft(&self, wave: &[f32]) -> Vec<Vec<Complex32>> {
        let n = self.cfg.n_fft;
        let pad = n / 2;
        let len = wave.len();
        let at = |i: isize| -> f32 {
            if len == 0 {
                return 0.0;
            }
            if len == 1 {
                return wave[0];
            }
            let period = 2 * (len as isize - 1);
            let mut j = i.rem_euclid(period);
            if j >= len as isize {
                j = period - j;
            }
            wave[j as usize]
        };
        let frames = 1 + len / self.cfg.hop;
        let mut out = Vec::with_capacity(frames);
        let mut buf = vec![Complex32::new(0.0, 0.0); n];
        for f in 0..frames {
            let start = (f * self.cfg.hop) as isize - pad as isize;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex32::new(at(start + i as isize) * self.window[i], 0.0);
            }
            self.fwd.process(&mut buf);
            out.push(buf[..self.bins()].to_vec());
        }
        out
    }

    /// Inverse of [`Vocoder::stft`] by windowed overlap-add.
    pub fn istft(&self, spec: &[Vec<Complex32>], len: usize) -> Vec<f32> {
        let n = self.cfg.n_fft;
        let pad = n / 2;
        let total = (spec.len().saturating_sub(1)) * self.cfg.hop + n;
        let mut acc = vec![0.0f32; total];
        let mut norm = vec![0.0f32; total];
        let mut buf = vec![Complex32::new(0.0, 0.0); n];
        for (f, frame) in spec.iter().enumerate() {
            for k in 0..n {
                buf[k] = if k < frame.len() {
                    frame[k]
                } else {
                    frame[n - k].conj()
                };
            }
            self.inv.process(&mut buf);
            let off = f * self.cfg.hop;
            for i in 0..n {
                let w = self.window[i];
                acc[off + i] += buf[i].re / n as f32 * w;
                norm[off + i] += w * w;
            }
        }
        (0..len)
            .map(|i| {
                let j = i + pad;
                if j < total && norm[j] > 1e-8 {
                    acc[j] / norm[j]
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn magnitudes(&self, wave: &[f32]) -> Vec<Vec<f32>> {
        self.stft(wave)
            .iter()
            .map(|fr| fr.iter().map(|c| c.norm()).collect())
            .collect()
    }

    /// Log-mel analysis of a waveform.
    pub fn mel_spectrogram(&self, wave: &[f32]) -> Result<Mel> {
        let mags = self.magnitudes(wave);
        let floor = self.cfg.floor as f32;
        let mut data = Vec::with_capacity(mags.len() * self.cfg.n_mels);
        for frame in &mags {
            for filt in &self.fb {
                let e: f32 = filt.iter().zip(frame).map(|(w, m)| w * m).sum();
                data.push(e.max(floor).ln());
            }
        }
        Mel::new(mags.len(), self.cfg.n_mels, data)
    }

    /// Linear-bin magnitudes implied by a log-mel frame sequence.
    pub fn mel_to_linear(&self, mel: &Mel) -> Result<Vec<Vec<f32>>> {
        if mel.bins() != self.cfg.n_mels {
            return Err(Error::shape(format!(
                "mel has {} bins, vocoder expects {}",
                mel.bins(),
                self.cfg.n_mels
            )));
        }
        let bins = self.bins();
        let weight: Vec<f32> = (0..bins)
            .map(|k| self.fb.iter().map(|f| f[k]).sum::<f32>())
            .collect();
        Ok((0..mel.frames())
            .map(|t| {
                let row = mel.row(t);
                let mut lin = vec![0.0f32; bins];
                for (filt, v) in self.fb.iter().zip(row) {
                    let mag = v.exp();
                    for (l, w) in lin.iter_mut().zip(filt) {
                        *l += w * mag;
                    }
                }
                for (l, w) in lin.iter_mut().zip(&weight) {
                    if *w > 1e-6 {
                        *l /= w;
                    }
                }
                lin
            })
            .collect())
    }

    /// `|| |STFT(wave)| - target ||_F / || target ||_F`.
    pub fn spectral_convergence(&self, target: &[Vec<f32>], wave: &[f32]) -> f64 {
        let got = self.magnitudes(wave);
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (a, b) in target.iter().zip(&got) {
            for (x, y) in a.iter().zip(b) {
                num += ((x - y) as f64).powi(2);
                den += (*x as f64).powi(2);
            }
        }
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }

    pub fn griffin_lim(&self, mel: &Mel, iters: usize) -> Result<Reconstruction> {
        if iters == 0 {
            return Err(Error::invalid("griffin_lim needs at least one iteration"));
        }
        let target = self.mel_to_linear(mel)?;
        let len = mel.frames().saturating_sub(1) * self.cfg.hop;
        let mut spec: Vec<Vec<Complex32>> = target
            .iter()
            .map(|fr| fr.iter().map(|m| Complex32::new(*m, 0.0)).collect())
            .collect();
        let mut wave = self.istft(&spec, len);
        let mut convergence = Vec::with_capacity(iters);
        for _ in 0..iters {
            let est = self.stft(&wave);
            for ((s, e), m) in spec.iter_mut().zip(&est).zip(&target) {
                for ((sv, ev), mv) in s.iter_mut().zip(e).zip(m) {
                    let n = ev.norm();
                    *sv = if n > 1e-12 {
                        ev * (*mv / n)
                    } else {
                        Complex32::new(*mv, 0.0)
                    };
                }
            }
            wave = self.istft(&spec, len);
            convergence.push(self.spectral_convergence(&target, &wave));
        }
        Ok(Reconstruction { wave, convergence })
    }
}

/// Griffin-Lim with the default analysis parameters.
pub fn griffin_lim(mel: &Mel, iters: usize) -> Result<Vec<f32>> {
    Ok(Vocoder::new(&AudioConfig::default())?.griffin_lim(mel, iters)?.wave)
}

/// Writes 16-bit PCM mono; samples are clipped to `[-1, 1]`.
pub fn write_wav(path: &Path, wave: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for s in wave {
        w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)
            .map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut r = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = r.spec();
    if spec.bits_per_sample != 16 || spec.channels != 1 {
        return Err(Error::invalid(format!("expected 16-bit mono PCM, got {spec:?}")));
    }
    let wave = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / i16::MAX as f32))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Ok((wave, spec.sample_rate))
}

fn wav_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::invalid(format!("wav: {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64) -> Vec<f32> {
        let sr = 16_000.0;
        (0..(sr * secs) as usize)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin()) as f32)
            .collect()
    }

    fn peak_bin(v: &Vocoder, wave: &[f32]) -> usize {
        let mags = v.magnitudes(wave);
        let mid = &mags[mags.len() / 2];
        let mut best = 0;
        for (k, m) in mid.iter().enumerate() {
            if *m > mid[best] {
                best = k;
            }
        }
        best
    }

    #[test]
    fn stft_round_trip_is_exact() {
        let v = Vocoder::new(&AudioConfig::default()).unwrap();
        let w = tone(300.0, 0.2);
        let back = v.istft(&v.stft(&w), w.len());
        let err = w.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn silence_gives_near_zero_wave() {
        let v = Vocoder::new(&AudioConfig::default()).unwrap();
        let floor = Mel::filled(20, 80, (1e-5f32).ln()).unwrap();
        let r = v.griffin_lim(&floor, 4).unwrap();
        assert!(r.wave.iter().map(|s| s.abs()).fold(0.0, f32::max) < 1e-3);
    }

    #[test]
    fn tone_peak_survives_analysis_and_synthesis() {
        let v = Vocoder::new(&AudioConfig::default()).unwrap();
        let w = tone(440.0, 0.5);
        let expected = (440.0 / (16_000.0 / 512.0) as f64).round() as isize;
        assert_eq!(peak_bin(&v, &w) as isize, expected);
        let mel = v.mel_spectrogram(&w).unwrap();
        let out = v.griffin_lim(&mel, 32).unwrap();
        let got = peak_bin(&v, &out.wave) as isize;
        assert!((got - expected).abs() <= 1, "peak bin {got} vs {expected}");
    }

    #[test]
    fn more_iterations_do_not_hurt_convergence() {
        let v = Vocoder::new(&AudioConfig::default()).unwrap();
        let mut w = tone(440.0, 0.3);
        for (i, s) in tone(1250.0, 0.3).iter().enumerate() {
            w[i] += 0.5 * s;
        }
        let mel = v.mel_spectrogram(&w).unwrap();
        let one = v.griffin_lim(&mel, 1).unwrap();
        let many = v.griffin_lim(&mel, 32).unwrap();
        assert!(many.convergence.last().unwrap() <= one.convergence.last().unwrap());
        assert_eq!(v.griffin_lim(&mel, 3).unwrap().wave, v.griffin_lim(&mel, 3).unwrap().wave);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = tone(440.0, 0.05);
        write_wav(&p, &w, 16_000).unwrap();
        let (back, sr) = read_wav(&p).unwrap();
        assert_eq!(sr, 16_000);
        assert_eq!(back.len(), w.len());
        assert!(w.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-4));
    }
}
