use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Frame-major real matrix `[frames x bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mel {
    frames: usize,
    bins: usize,
    data: Vec<f32>,
}

impl Mel {
    pub fn new(frames: usize, bins: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || bins == 0 {
            return Err(Error::invalid(format!("empty mel ({frames} x {bins})")));
        }
        if data.len() != frames * bins {
            return Err(Error::shape(format!(
                "mel {frames}x{bins} given {} values",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite mel value at frame {}, bin {}",
                i / bins,
                i % bins
            )));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn filled(frames: usize, bins: usize, value: f32) -> Result<Self> {
        Self::new(frames, bins, vec![value; frames * bins])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, frame: usize, bin: usize) -> f32 {
        self.data[frame * self.bins + bin]
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.data[frame * self.bins..(frame + 1) * self.bins]
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Mel> {
        if start >= end || end > self.frames {
            return Err(Error::invalid(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frames
            )));
        }
        Mel::new(
            end - start,
            self.bins,
            self.data[start * self.bins..end * self.bins].to_vec(),
        )
    }

    pub fn mean_frame(&self) -> Vec<f32> {
        let mut acc = vec![0f64; self.bins];
        for f in 0..self.frames {
            for (a, v) in acc.iter_mut().zip(self.row(f)) {
                *a += *v as f64;
            }
        }
        acc.into_iter()
            .map(|a| (a / self.frames as f64) as f32)
            .collect()
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(
            Tensor::from_vec(self.data.clone(), (self.frames, self.bins), &Device::Cpu)?
                .to_dtype(dtype)?,
        )
    }

    pub fn from_tensor(t: &Tensor) -> Result<Mel> {
        let (f, b) = t.dims2()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Mel::new(f, b, data)
    }

    pub fn mean_abs_diff(&self, other: &Mel) -> Result<f64> {
        if self.frames != other.frames || self.bins != other.bins {
            return Err(Error::shape(format!(
                "{}x{} vs {}x{}",
                self.frames, self.bins, other.frames, other.bins
            )));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum();
        Ok(s / self.data.len() as f64)
    }
}
