//! Named, seeded parameter groups.
//!
//! Every trainable component owns one [`ParamStore`]. Initialisation draws
//! from a per-group ChaCha stream so model construction is reproducible
//! from config seeds alone. A frozen store refuses every mutation path
//! (optimizer hand-out, `set`, blob loading).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Explicit row-major values.
    Values(Vec<f64>),
}

pub struct ParamStore {
    group: String,
    vars: BTreeMap<String, Var>,
    frozen: bool,
    dtype: DType,
    rng: ChaCha8Rng,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("group", &self.group)
            .field("params", &self.vars.len())
            .field("frozen", &self.frozen)
            .finish()
    }
}

impl ParamStore {
    pub fn new(group: &str, seed: u64, dtype: DType) -> Self {
        Self {
            group: group.to_string(),
            vars: BTreeMap::new(),
            frozen: false,
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &Device::Cpu
    }

    /// Creates (or returns the existing) parameter `name`.
    pub fn param(&mut self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let shape: Shape = shape.into();
        if let Some(v) = self.vars.get(name) {
            if v.shape() != &shape {
                return Err(Error::shape(format!(
                    "{}.{name}: existing {:?}, requested {:?}",
                    self.group,
                    v.shape(),
                    shape
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        if self.frozen {
            return Err(Error::Frozen(self.group.clone()));
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::shape(format!(
                        "{}.{name}: {} values for shape {:?}",
                        self.group,
                        v.len(),
                        shape
                    )));
                }
                v
            }
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.vars.get(name).map(|v| v.as_tensor().clone())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Variables handed to an optimizer. Fails on a frozen group.
    pub fn trainable_vars(&self) -> Result<Vec<Var>> {
        if self.frozen {
            return Err(Error::Frozen(self.group.clone()));
        }
        Ok(self.vars.values().cloned().collect())
    }

    /// Overwrites a parameter in place; every tensor view sees the change.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(self.group.clone()));
        }
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("{}: no parameter `{name}`", self.group)))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// SHA-256 over the serialized group, hex encoded.
    pub fn checksum(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.write_all(&(self.vars.len() as u32).to_le_bytes())?;
        for (name, var) in &self.vars {
            let nb = name.as_bytes();
            out.write_all(&(nb.len() as u16).to_le_bytes())?;
            out.write_all(nb)?;
            let dims = var.dims();
            out.write_all(&[dtype_tag(self.dtype)?, dims.len() as u8])?;
            for d in dims {
                out.write_all(&(*d as u32).to_le_bytes())?;
            }
            let flat = var.as_tensor().flatten_all()?;
            match self.dtype {
                DType::F64 => {
                    for x in flat.to_vec1::<f64>()? {
                        out.write_all(&x.to_le_bytes())?;
                    }
                }
                _ => {
                    for x in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        out.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Loads values for every parameter of this (already built) group.
    /// Names and shapes must match exactly.
    pub fn load_bytes(&mut self, mut bytes: &[u8]) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(self.group.clone()));
        }
        let r = &mut bytes;
        let n = read_u32(r)? as usize;
        if n != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "group `{}`: blob has {n} params, model has {}",
                self.group,
                self.vars.len()
            )));
        }
        for _ in 0..n {
            let name_len = read_u16(r)? as usize;
            let mut nb = vec![0u8; name_len];
            r.read_exact(&mut nb)?;
            let name = String::from_utf8(nb)
                .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
            let mut tag = [0u8; 2];
            r.read_exact(&mut tag)?;
            let dtype = tag_dtype(tag[0])?;
            let rank = tag[1] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(r)? as usize);
            }
            let count: usize = dims.iter().product();
            let t = match dtype {
                DType::F64 => {
                    let mut v = Vec::with_capacity(count);
                    for _ in 0..count {
                        let mut b = [0u8; 8];
                        r.read_exact(&mut b)?;
                        v.push(f64::from_le_bytes(b));
                    }
                    Tensor::from_vec(v, dims.clone(), &Device::Cpu)?
                }
                _ => {
                    let mut v = Vec::with_capacity(count);
                    for _ in 0..count {
                        let mut b = [0u8; 4];
                        r.read_exact(&mut b)?;
                        v.push(f32::from_le_bytes(b));
                    }
                    Tensor::from_vec(v, dims.clone(), &Device::Cpu)?
                }
            };
            let var = self.vars.get(&name).ok_or_else(|| {
                Error::Checkpoint(format!("group `{}`: unexpected param `{name}`", self.group))
            })?;
            if var.dims() != dims.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "group `{}`: `{name}` has shape {:?}, blob {:?}",
                    self.group,
                    var.dims(),
                    dims
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!(
                "group `{}`: {} trailing bytes",
                self.group,
                r.len()
            )));
        }
        Ok(())
    }
}

fn dtype_tag(d: DType) -> Result<u8> {
    match d {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::invalid(format!("unsupported parameter dtype {other:?}"))),
    }
}

fn tag_dtype(t: u8) -> Result<DType> {
    match t {
        0 => Ok(DType::F32),
        1 => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
    }
}

pub(crate) fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u16(r: &mut &[u8]) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}
