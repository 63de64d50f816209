//! Run configuration: one TOML document with a section per component.
//!
//! Every key is optional; missing keys take the defaults below. Dotted
//! `key=value` overrides are applied on top of the file before parsing, so
//! `--set stage1.steps=50` and `--set t2e.teacher.backend="http"` work
//! without editing it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodecConfig;
use crate::conditioners::ConditionerConfig;
use crate::corpus::SynthSpec;
use crate::error::{Error, Result};
use crate::optim::OptimConfig;
use crate::s2m::S2MConfig;
use crate::t2e::StudentConfig;
use crate::t2s::{StageConfig, T2SConfig};

use super::vocoder::AudioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherBackend {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub backend: TeacherBackend,
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub retries: usize,
    pub mock_seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            backend: TeacherBackend::Mock,
            endpoint: "http://127.0.0.1:8000/v1".into(),
            model: "teacher".into(),
            api_key_env: "TEACHER_API_KEY".into(),
            timeout_secs: 60,
            retries: 2,
            mock_seed: 71,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct T2EConfig {
    pub dataset_size: usize,
    pub parallelism: usize,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
}

impl Default for T2EConfig {
    fn default() -> Self {
        Self {
            dataset_size: 1000,
            parallelism: 4,
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Duration scaling factors applied to ground-truth token counts.
    pub factors: Vec<f64>,
    /// Decode budget in learned mode.
    pub max_len: usize,
    pub batch_size: usize,
    pub ode_steps: usize,
    pub griffin_lim_iters: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            factors: vec![0.75, 0.875, 1.0, 1.125, 1.25],
            max_len: 60,
            batch_size: 24,
            ode_steps: 16,
            griffin_lim_iters: 32,
            seed: 81,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Manifest directory; the synthetic corpus is used when unset.
    pub corpus: Option<PathBuf>,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            checkpoints: PathBuf::from("runs/checkpoints"),
            output: PathBuf::from("runs/output"),
        }
    }
}

fn stage(seed: u64) -> StageConfig {
    StageConfig {
        speed_range: (0.75, 1.35),
        optim: OptimConfig {
            lr: 1e-3,
            ..OptimConfig::default()
        },
        seed,
        ..StageConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: SynthSpec,
    pub codec: CodecConfig,
    pub conditioners: ConditionerConfig,
    pub t2s: T2SConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub s2m: S2MConfig,
    pub t2e: T2EConfig,
    pub eval: EvalConfig,
    pub audio: AudioConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: SynthSpec::default(),
            codec: CodecConfig::default(),
            conditioners: ConditionerConfig::default(),
            t2s: T2SConfig::default(),
            stage1: stage(41),
            stage2: stage(42),
            stage3: stage(43),
            s2m: S2MConfig::default(),
            t2e: T2EConfig::default(),
            eval: EvalConfig::default(),
            audio: AudioConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Sections that influence trained parameters; the config hash covers
/// exactly these.
#[derive(Serialize)]
struct HashedView<'a> {
    corpus: &'a SynthSpec,
    codec: &'a CodecConfig,
    conditioners: &'a ConditionerConfig,
    t2s: &'a T2SConfig,
    stage1: &'a StageConfig,
    stage2: &'a StageConfig,
    stage3: &'a StageConfig,
    s2m: &'a S2MConfig,
    t2e: &'a T2EConfig,
}

impl RunConfig {
    /// Parses a TOML document and applies `key=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default())
            .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?;
        let file: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        merge(&mut table, file);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("config schema error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2), ("stage3", &self.stage3)] {
            s.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if !(0.0..=1.0).contains(&self.s2m.fusion_prob) {
            return Err(Error::Config(format!("s2m.fusion_prob {} outside [0, 1]", self.s2m.fusion_prob)));
        }
        if let Some(f) = self.eval.factors.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
            return Err(Error::Config(format!("duration factor {f} must be positive")));
        }
        if self.conditioners.dim != self.t2s.dim || self.s2m.cond_dim != self.t2s.dim {
            return Err(Error::Config(format!(
                "conditioner ({}), token model ({}) and generator conditioning ({}) widths differ",
                self.conditioners.dim, self.t2s.dim, self.s2m.cond_dim
            )));
        }
        if self.codec.v_sem != self.t2s.v_sem || self.s2m.v_sem != self.t2s.v_sem {
            return Err(Error::Config("codec, token model and generator disagree on V_sem".into()));
        }
        if self.codec.downsample_rate != self.s2m.downsample_rate {
            return Err(Error::Config("codec and generator disagree on downsample_rate".into()));
        }
        let mels = [self.codec.n_mels, self.conditioners.n_mels, self.s2m.n_mels, self.audio.n_mels];
        if mels.iter().any(|m| *m != self.corpus.n_mels) {
            return Err(Error::Config(format!("mel widths disagree: {mels:?} vs corpus {}", self.corpus.n_mels)));
        }
        if self.t2e.dataset_size < 7 {
            return Err(Error::Config("t2e.dataset_size must be at least 7".into()));
        }
        Ok(())
    }

    /// SHA-256 over the training-relevant sections, hex encoded.
    pub fn hash(&self) -> String {
        let view = HashedView {
            corpus: &self.corpus,
            codec: &self.codec,
            conditioners: &self.conditioners,
            t2s: &self.t2s,
            stage1: &self.stage1,
            stage2: &self.stage2,
            stage3: &self.stage3,
            s2m: &self.s2m,
            t2e: &self.t2e,
        };
        let bytes = serde_json::to_vec(&view).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies one `dotted.key=value` override. Values are read as TOML and
/// fall back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{key}`: `{p}` is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text, &[]).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml_str("", &[]).unwrap(), cfg);
    }

    #[test]
    fn quoted_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.stage1.p_zero_prob, 0.3);
        assert_eq!(cfg.s2m.fusion_prob, 0.5);
        assert_eq!(cfg.stage2.alpha, 0.1);
        assert_eq!(cfg.eval.factors, vec![0.75, 0.875, 1.0, 1.125, 1.25]);
        assert_eq!(cfg.t2e.dataset_size, 1000);
    }

    #[test]
    fn overrides_and_hash() {
        let base = RunConfig::default();
        let cfg = RunConfig::from_toml_str(
            "[stage1]\nsteps = 10\n",
            &["stage2.alpha=0.2".into(), "t2e.teacher.backend=http".into(), "eval.factors=[1.0]".into()],
        )
        .unwrap();
        assert_eq!(cfg.stage1.steps, 10);
        assert_eq!(cfg.stage2.alpha, 0.2);
        assert_eq!(cfg.t2e.teacher.backend, TeacherBackend::Http);
        assert_eq!(cfg.eval.factors, vec![1.0]);
        assert_ne!(cfg.hash(), base.hash());
        let eval_only = RunConfig::from_toml_str("", &["eval.max_len=30".into()]).unwrap();
        assert_eq!(eval_only.hash(), base.hash());
        assert_eq!(base.hash(), RunConfig::default().hash());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            "stage1.p_zero_prob=1.5",
            "s2m.fusion_prob=-0.1",
            "eval.factors=[0.0]",
            "t2s.dim=64",
            "stage1.steps=\"many\"",
            "nonsense",
        ] {
            assert!(RunConfig::from_toml_str("", &[bad.into()]).is_err(), "{bad}");
        }
    }
}
