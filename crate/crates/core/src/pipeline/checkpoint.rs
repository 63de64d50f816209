//! The trained system and its on-disk container.
//!
//! Layout (little endian):
//!
//! ```text
//! "DTT2" | version u32 | stage u32 | config hash (64 hex bytes) | n u32
//! n x (name_len u16 | name | offset u64 | length u64)
//! section payloads, offsets relative to the end of the table
//! ```
//!
//! Sections are written in a fixed order and only when populated, so
//! loading and saving again reproduces the same bytes.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::CodecModel;
use crate::conditioners::Conditioners;
use crate::error::{Error, Result};
use crate::s2m::S2MModel;
use crate::t2e::{EmotionBank, Student};
use crate::t2s::T2SModel;

use super::config::RunConfig;

pub const MAGIC: &[u8; 4] = b"DTT2";
pub const VERSION: u32 = 1;

/// Last completed training phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u32)]
pub enum StageTag {
    Empty = 0,
    Codec = 1,
    T2SStage1 = 2,
    T2SStage2 = 3,
    T2SStage3 = 4,
    S2M = 5,
    T2E = 6,
}

impl StageTag {
    pub const ALL: [StageTag; 7] = [
        StageTag::Empty,
        StageTag::Codec,
        StageTag::T2SStage1,
        StageTag::T2SStage2,
        StageTag::T2SStage3,
        StageTag::S2M,
        StageTag::T2E,
    ];

    pub fn from_u32(v: u32) -> Result<Self> {
        Self::ALL
            .get(v as usize)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("unknown stage tag {v}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            StageTag::Empty => "empty",
            StageTag::Codec => "codec",
            StageTag::T2SStage1 => "t2s-stage1",
            StageTag::T2SStage2 => "t2s-stage2",
            StageTag::T2SStage3 => "t2s-stage3",
            StageTag::S2M => "s2m",
            StageTag::T2E => "t2e",
        }
    }
}

impl std::fmt::Display for StageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    speaker_ids: Vec<String>,
    t2s_stages_done: u8,
    reports: BTreeMap<String, serde_json::Value>,
}

/// Every trained component plus the configuration that produced it.
pub struct Checkpoint {
    pub config: RunConfig,
    pub stage: StageTag,
    pub speaker_ids: Vec<String>,
    pub codec: Option<CodecModel>,
    pub conds: Conditioners,
    pub t2s: T2SModel,
    pub s2m: S2MModel,
    pub bank: Option<EmotionBank>,
    pub student: Option<Student>,
    /// Per-phase training summaries keyed by stage name.
    pub reports: BTreeMap<String, serde_json::Value>,
}

impl std::fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Checkpoint")
            .field("stage", &self.stage)
            .field("speakers", &self.speaker_ids)
            .finish()
    }
}

impl Checkpoint {
    /// Untrained components sized by `config`.
    pub fn fresh(config: &RunConfig, speaker_ids: Vec<String>) -> Result<Self> {
        config.validate()?;
        if speaker_ids.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self {
            conds: Conditioners::new(&config.conditioners, speaker_ids.len())?,
            t2s: T2SModel::new(&config.t2s)?,
            s2m: S2MModel::new(&config.s2m)?,
            config: config.clone(),
            stage: StageTag::Empty,
            speaker_ids,
            codec: None,
            bank: None,
            student: None,
            reports: BTreeMap::new(),
        })
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn codec(&self) -> Result<&CodecModel> {
        self.codec
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no trained codec".into()))
    }

    pub fn require(&self, stage: StageTag) -> Result<()> {
        if self.stage < stage {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at stage `{}`, `{stage}` required",
                self.stage
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<(&str, Vec<u8>)> = Vec::new();
        sections.push(("config", serde_json::to_vec(&self.config)?));
        let meta = Meta {
            speaker_ids: self.speaker_ids.clone(),
            t2s_stages_done: self.t2s.stages_done(),
            reports: self.reports.clone(),
        };
        sections.push(("meta", serde_json::to_vec(&meta)?));
        if let Some(c) = &self.codec {
            sections.push(("codec", c.to_bytes()?));
        }
        sections.push(("cond.speaker", self.conds.speaker.store().to_bytes()?));
        sections.push(("cond.emotion", self.conds.emotion.store().to_bytes()?));
        sections.push(("cond.classifier", self.conds.classifier.store().to_bytes()?));
        sections.push(("t2s", self.t2s.store().to_bytes()?));
        sections.push(("s2m", self.s2m.store().to_bytes()?));
        if let Some(b) = &self.bank {
            sections.push(("t2e.bank", serde_json::to_vec(b)?));
        }
        if let Some(s) = &self.student {
            sections.push(("t2e.student", s.to_bytes()?));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.stage as u32).to_le_bytes());
        out.extend_from_slice(self.config_hash().as_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, data) in &sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            offset += data.len() as u64;
        }
        for (_, data) in &sections {
            out.extend_from_slice(data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a DTT2 checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let stage = StageTag::from_u32(read_u32(&mut r)?)?;
        let mut hash = [0u8; 64];
        r.read_exact(&mut hash).map_err(truncated)?;
        let hash = String::from_utf8(hash.to_vec()).map_err(|_| Error::Checkpoint("corrupt config hash".into()))?;
        let n = read_u32(&mut r)? as usize;
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            let mut l = [0u8; 2];
            r.read_exact(&mut l).map_err(truncated)?;
            let mut name = vec![0u8; u16::from_le_bytes(l) as usize];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non-utf8 section name".into()))?;
            let off = read_u64(&mut r)? as usize;
            let len = read_u64(&mut r)? as usize;
            table.push((name, off, len));
        }
        let data = r;
        let mut sections: BTreeMap<String, &[u8]> = BTreeMap::new();
        for (name, off, len) in table {
            let end = off.checked_add(len).filter(|e| *e <= data.len()).ok_or_else(|| {
                Error::Checkpoint(format!("section `{name}` runs past the end of the file"))
            })?;
            sections.insert(name, &data[off..end]);
        }
        let get = |name: &str| -> Result<&[u8]> {
            sections
                .get(name)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
        };

        let config: RunConfig = serde_json::from_slice(get("config")?)?;
        if config.hash() != hash {
            return Err(Error::Checkpoint("stored config does not match its hash".into()));
        }
        let meta: Meta = serde_json::from_slice(get("meta")?)?;
        let mut ck = Checkpoint::fresh(&config, meta.speaker_ids)?;
        ck.stage = stage;
        ck.reports = meta.reports;
        if let Some(b) = sections.get("codec") {
            ck.codec = Some(CodecModel::from_bytes(b, Some(&config.codec))?);
        }
        ck.conds.speaker.store_mut().load_bytes(get("cond.speaker")?)?;
        ck.conds.emotion.store_mut().load_bytes(get("cond.emotion")?)?;
        ck.conds.classifier.store_mut().load_bytes(get("cond.classifier")?)?;
        ck.t2s.store_mut().load_bytes(get("t2s")?)?;
        ck.t2s.set_stages_done(meta.t2s_stages_done);
        ck.s2m.store_mut().load_bytes(get("s2m")?)?;
        if let Some(b) = sections.get("t2e.bank") {
            ck.bank = Some(serde_json::from_slice(b)?);
        }
        if let Some(b) = sections.get("t2e.student") {
            let mut s = Student::new(&config.t2e.student)?;
            s.load_bytes(b)?;
            ck.student = Some(s);
        }
        if meta.t2s_stages_done >= 2 {
            ck.conds.speaker.store_mut().freeze();
        }
        if meta.t2s_stages_done >= 3 {
            ck.conds.emotion.store_mut().freeze();
            ck.conds.classifier.store_mut().freeze();
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn truncated(_: std::io::Error) -> Error {
    Error::Checkpoint("checkpoint truncated".into())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.t2s.dim = 16;
        cfg.t2s.layers = 1;
        cfg.t2s.heads = 2;
        cfg.conditioners.dim = 16;
        cfg.conditioners.heads = 2;
        cfg.conditioners.classifier_hidden = 8;
        cfg.s2m.cond_dim = 16;
        cfg.s2m.width = 16;
        cfg.s2m.layers = 1;
        cfg.s2m.heads = 2;
        cfg.s2m.fusion_hidden = 8;
        cfg.t2e.student.dim = 16;
        cfg.t2e.student.buckets = 64;
        cfg
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = Checkpoint::fresh(&small(), vec!["a".into(), "b".into()]).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.stage, StageTag::Empty);
        assert_eq!(back.speaker_ids, vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let ck = Checkpoint::fresh(&small(), vec!["a".into(), "b".into()]).unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[12] ^= 1;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn stage_requirements() {
        let mut ck = Checkpoint::fresh(&small(), vec!["a".into(), "b".into()]).unwrap();
        assert!(ck.require(StageTag::S2M).is_err());
        ck.stage = StageTag::T2E;
        assert!(ck.require(StageTag::S2M).is_ok());
        for (i, t) in StageTag::ALL.iter().enumerate() {
            assert_eq!(StageTag::from_u32(i as u32).unwrap(), *t);
        }
        assert!(StageTag::from_u32(7).is_err());
    }
}
