//! Small layer toolkit on top of candle tensors.
//!
//! Only differentiable building blocks live here. The fused softmax and
//! layer-norm kernels shipped with candle-nn do not propagate gradients,
//! so this module carries its own versions.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, D};

use crate::error::Result;
use crate::params::{Init, ParamStore};

type CResult<T> = candle_core::Result<T>;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_bias(store, name, d_in, d_out, true)
    }

    pub fn with_bias(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        let weight = store.param(&format!("{name}.weight"), (d_out, d_in), Init::Normal(std))?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), d_out, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.d_out();
        y.reshape(out_dims)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.gamma"), dim, Init::Ones)?,
            beta: store.param(&format!("{name}.beta"), dim, Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

/// Row-wise softmax over the last axis, with a backward pass.
struct SoftmaxLast;

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last-bwd"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (o1, o2) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("softmax input must be contiguous".into()))?;
        let dim = *layout.dims().last().unwrap();
        fn run<T: num_like::Float>(src: &[T], dim: usize) -> Vec<T> {
            let mut out = vec![T::zero(); src.len()];
            for (row, dst) in src.chunks(dim).zip(out.chunks_mut(dim)) {
                let mut max = row[0];
                for &v in row.iter() {
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = T::zero();
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = (v - max).exp();
                    sum = sum + *d;
                }
                for d in dst.iter_mut() {
                    *d = *d / sum;
                }
            }
            out
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(run(&v[o1..o2], dim)),
            CpuStorage::F64(v) => CpuStorage::F64(run(&v[o1..o2], dim)),
            _ => candle_core::bail!("softmax: unsupported dtype"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> CResult<Option<Tensor>> {
        let dot = (grad_res * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some((res * grad_res.broadcast_sub(&dot)?)?))
    }
}

mod num_like {
    pub trait Float:
        Copy
        + PartialOrd
        + std::ops::Sub<Output = Self>
        + std::ops::Add<Output = Self>
        + std::ops::Div<Output = Self>
    {
        fn zero() -> Self;
        fn exp(self) -> Self;
    }
    impl Float for f32 {
        fn zero() -> Self {
            0.0
        }
        fn exp(self) -> Self {
            f32::exp(self)
        }
    }
    impl Float for f64 {
        fn zero() -> Self {
            0.0
        }
        fn exp(self) -> Self {
            f64::exp(self)
        }
    }
}

pub fn softmax_last(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(SoftmaxLast)
}

/// Identity forward, `-lambda * grad` backward.
struct GradReverse {
    lambda: f64,
}

impl CustomOp1 for GradReverse {
    fn name(&self) -> &'static str {
        "grad-reverse"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (o1, o2) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("grl input must be contiguous".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[o1..o2].to_vec()),
            CpuStorage::F64(v) => CpuStorage::F64(v[o1..o2].to_vec()),
            _ => candle_core::bail!("grl: unsupported dtype"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(grad_res.affine(-self.lambda, 0.0)?))
    }
}

/// Gradient reversal layer.
pub fn grl(x: &Tensor, lambda: f64) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(GradReverse { lambda })
}

pub fn log_softmax_last(x: &Tensor) -> CResult<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    shifted.broadcast_sub(&lse)
}

/// Mean negative log-likelihood of `targets` (u32, shape `[n]`) under `logits` `[n, v]`.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> CResult<Tensor> {
    let lp = log_softmax_last(logits)?;
    let picked = lp.gather(&targets.unsqueeze(1)?, 1)?;
    picked.mean_all()?.neg()
}

/// Additive attention mask from a boolean "may attend" matrix.
pub fn additive_mask(allowed: &[bool], shape: (usize, usize, usize), dtype: DType) -> CResult<Tensor> {
    let v: Vec<f32> = allowed.iter().map(|&a| if a { 0.0 } else { -1e9 }).collect();
    Tensor::from_vec(v, shape, &candle_core::Device::Cpu)?
        .to_dtype(dtype)?
        .unsqueeze(1)
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(crate::Error::invalid(format!(
                "width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    /// `x`: `[b, s, d]`; `mask`: additive, broadcastable to `[b, h, s, s]`.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> CResult<Tensor> {
        let (b, s, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, s, 3, self.heads, hd))?;
        let pick = |i: usize| -> CResult<Tensor> {
            qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()
        };
        let (q, k, v) = (pick(0)?, pick(1)?, pick(2)?);
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let scores = match mask {
            Some(m) => scores.broadcast_add(m)?,
            None => scores,
        };
        let att = softmax_last(&scores)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, s, d))?;
        self.out.forward(&y)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.silu()?)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, 4 * dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> CResult<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, mask)?)?;
        &x + self.ff.forward(&self.ln2.forward(&x)?)?
    }
}

/// Rows `[sin(w_k i), cos(w_k i)]` with `w_k = pi k / (K + 1)`, `K = dim / 2`.
///
/// Dot products between rows depend only on the index difference and
/// vanish (to within one unit) for every nonzero difference below
/// `2 (K + 1)`, so distinct positions start out near-orthogonal.
pub fn harmonic_table(rows: usize, dim: usize) -> Vec<f64> {
    let k_count = dim / 2;
    let mut out = vec![0.0; rows * dim];
    for i in 0..rows {
        for k in 0..k_count {
            let w = std::f64::consts::PI * (k + 1) as f64 / (k_count + 1) as f64;
            out[i * dim + 2 * k] = (w * i as f64).sin();
            out[i * dim + 2 * k + 1] = (w * i as f64).cos();
        }
    }
    out
}

/// Sinusoidal features of a scalar time `t` in `[0, 1]`.
pub fn time_features(t: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        for k in 0..half {
            let freq = (1000f64).powf(-(k as f64) / half as f64) * 1000.0;
            out.push((tv * freq).sin());
        }
        for k in 0..half {
            let freq = (1000f64).powf(-(k as f64) / half as f64) * 1000.0;
            out.push((tv * freq).cos());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn softmax_matches_reference_and_gradient() {
        let x = Var::new(&[[1.0f64, 2.0, 0.5], [0.0, -1.0, 3.0]], &Device::Cpu).unwrap();
        let w = Tensor::new(&[[0.3f64, -0.2, 0.9], [1.0, 0.1, -0.4]], &Device::Cpu).unwrap();
        let y = softmax_last(x.as_tensor()).unwrap();
        let reference = candle_nn::ops::softmax(x.as_tensor(), 1).unwrap();
        let diff = (&y - &reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
        let loss = (&y * &w).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
        let base = x.as_tensor().to_vec2::<f64>().unwrap();
        let f = |m: &Vec<Vec<f64>>| -> f64 {
            let t = Tensor::new(m.clone(), &Device::Cpu).unwrap();
            let s = candle_nn::ops::softmax(&t, 1).unwrap();
            (&s * &w).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        for i in 0..2 {
            for j in 0..3 {
                let mut p = base.clone();
                let mut m = base.clone();
                p[i][j] += 1e-6;
                m[i][j] -= 1e-6;
                let fd = (f(&p) - f(&m)) / 2e-6;
                assert!((fd - g[i][j]).abs() < 1e-7, "{fd} vs {}", g[i][j]);
            }
        }
    }

    #[test]
    fn harmonic_rows_are_near_orthogonal() {
        let dim = 128;
        let t = harmonic_table(100, dim);
        let dot = |a: usize, b: usize| -> f64 {
            (0..dim).map(|k| t[a * dim + k] * t[b * dim + k]).sum()
        };
        for a in 0..100 {
            assert!((dot(a, a) - 64.0).abs() < 1e-9);
            for b in 0..100 {
                if a != b {
                    assert!(dot(a, b).abs() <= 1.0 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn layer_norm_normalises() {
        let mut s = ParamStore::new("ln", 0, DType::F64);
        let ln = LayerNorm::new(&mut s, "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
