//! Phase-by-phase training driver with resumable checkpoints.

use std::time::Duration;

use candle_core::{Device, Tensor};

use crate::codec::train_vq;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::s2m::{train_s2m, S2MExample};
use crate::t2e::{build_bank, build_distill_dataset, distill_student, HttpTeacher, MockTeacher, Student, Teacher};
use crate::t2s::{reference_conditions, stage_train, teacher_forced_accuracy, T2SInputSequence};

use super::checkpoint::{Checkpoint, StageTag};
use super::config::{RunConfig, T2EConfig, TeacherBackend};

/// Builds the teacher selected by the configuration.
pub fn make_teacher(cfg: &T2EConfig) -> Box<dyn Teacher> {
    match cfg.teacher.backend {
        TeacherBackend::Mock => Box::new(MockTeacher {
            seed: cfg.teacher.mock_seed,
            ..MockTeacher::default()
        }),
        TeacherBackend::Http => {
            let mut t = HttpTeacher::new(cfg.teacher.endpoint.clone(), cfg.teacher.model.clone());
            t.api_key = std::env::var(&cfg.teacher.api_key_env).ok();
            t.timeout = Duration::from_secs(cfg.teacher.timeout_secs);
            t.retries = cfg.teacher.retries;
            Box::new(t)
        }
    }
}

/// Teacher-forced latents for every utterance, with the reference
/// prompts and the true token count as duration.
pub fn s2m_examples(ck: &Checkpoint, corpus: &Corpus) -> Result<Vec<S2MExample>> {
    let codec = ck.codec()?;
    let ds = codec.downsample_rate();
    let conds = reference_conditions(&ck.t2s, &ck.conds, corpus)?;
    let mut out = Vec::with_capacity(corpus.len());
    for (u, cond) in corpus.utterances().iter().zip(conds) {
        let tokens = codec.encode(&u.mel)?;
        let n = tokens.len();
        if n == 0 {
            continue;
        }
        let seq = T2SInputSequence {
            cond: Tensor::from_vec(cond, ck.t2s.config().dim, &Device::Cpu)?,
            p: ck.t2s.duration_embedding(n)?,
            text: u.text_tokens.clone(),
            sem: tokens.tokens.clone(),
        };
        let (_, h) = ck.t2s.forward_teacher_forced(&seq)?;
        out.push(S2MExample {
            mel: u.mel.slice(0, n * ds)?,
            tokens,
            h_gpt: h.detach(),
        });
    }
    Ok(out)
}

fn tagged<T>(stage: StageTag, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: stage.name().into(),
            source: Box::new(other),
        },
    })
}

/// Runs every phase after `resume`'s stage (or all of them) in order:
/// codec, token-model stages 1 to 3, generator, text-to-emotion. `sink`
/// receives the checkpoint after each phase.
pub fn train_all(
    config: &RunConfig,
    corpus: &Corpus,
    resume: Option<Checkpoint>,
    sink: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    config.validate()?;
    corpus.check_pairable()?;
    corpus.validate_text(config.t2s.v_text)?;
    let speakers = corpus.speaker_ids();
    let mut ck = match resume {
        Some(mut ck) => {
            if ck.config_hash() != config.hash() {
                return Err(Error::Config(format!(
                    "config hash {} differs from the checkpoint's {}; refusing to resume",
                    config.hash(),
                    ck.config_hash()
                )));
            }
            if ck.speaker_ids != speakers {
                return Err(Error::Config("corpus speakers differ from the checkpoint's".into()));
            }
            ck.config = config.clone();
            ck
        }
        None => Checkpoint::fresh(config, speakers)?,
    };

    if ck.stage < StageTag::Codec {
        let (codec, report) = tagged(StageTag::Codec, train_vq(corpus, &config.codec))?;
        log::info!("codec: {report:?}");
        ck.reports.insert(StageTag::Codec.name().into(), serde_json::to_value(&report)?);
        ck.codec = Some(codec);
        ck.stage = StageTag::Codec;
        sink(&ck)?;
    }

    for (n, tag, stage_cfg) in [
        (1u8, StageTag::T2SStage1, &config.stage1),
        (2, StageTag::T2SStage2, &config.stage2),
        (3, StageTag::T2SStage3, &config.stage3),
    ] {
        if ck.stage >= tag {
            continue;
        }
        let Checkpoint { codec, conds, t2s, .. } = &mut ck;
        let codec = codec.as_ref().expect("codec trained before the token model");
        let report = tagged(tag, stage_train(n, corpus, t2s, conds, codec, stage_cfg))?;
        let acc = tagged(tag, teacher_forced_accuracy(t2s, conds, codec, corpus))?;
        log::info!("{tag}: final loss {:?}, teacher-forced accuracy {acc:.4}", report.losses.last());
        let mut value = serde_json::to_value(&report)?;
        value["teacher_forced_accuracy"] = serde_json::json!(acc);
        ck.reports.insert(tag.name().into(), value);
        ck.stage = tag;
        sink(&ck)?;
    }

    if ck.stage < StageTag::S2M {
        let examples = tagged(StageTag::S2M, s2m_examples(&ck, corpus))?;
        let report = tagged(
            StageTag::S2M,
            train_s2m(&mut ck.s2m, &ck.conds, &examples, &config.s2m),
        )?;
        ck.reports.insert(StageTag::S2M.name().into(), serde_json::to_value(&report)?);
        ck.stage = StageTag::S2M;
        sink(&ck)?;
    }

    if ck.stage < StageTag::T2E {
        let bank = tagged(StageTag::T2E, build_bank(corpus, &ck.conds))?;
        let teacher = make_teacher(&config.t2e);
        let data = tagged(
            StageTag::T2E,
            build_distill_dataset(config.t2e.dataset_size, teacher.as_ref(), config.t2e.parallelism),
        )?;
        let mut student = tagged(StageTag::T2E, Student::new(&config.t2e.student))?;
        let report = tagged(StageTag::T2E, distill_student(&mut student, &data))?;
        ck.reports.insert(StageTag::T2E.name().into(), serde_json::to_value(&report)?);
        ck.bank = Some(bank);
        ck.student = Some(student);
        ck.stage = StageTag::T2E;
        sink(&ck)?;
    }
    Ok(ck)
}

/// Sink that writes `stage-<tag>.dtt2` and `latest.dtt2` into `dir`.
pub fn directory_sink(dir: std::path::PathBuf) -> impl FnMut(&Checkpoint) -> Result<()> {
    move |ck: &Checkpoint| {
        std::fs::create_dir_all(&dir)?;
        ck.save(&dir.join(format!("stage-{}.dtt2", ck.stage.name())))?;
        ck.save(&dir.join("latest.dtt2"))?;
        log::info!("checkpoint `{}` written to {}", ck.stage, dir.display());
        Ok(())
    }
}
