//! `cascade` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cascade_core::corpus::{load_manifest, read_features, synth_corpus_with, write_manifest, Corpus, LoadMode};
use cascade_core::pipeline::checkpoint::Checkpoint;
use cascade_core::pipeline::synth::{synthesize, DurationSpec, Style, SynthOptions, SynthRequest};
use cascade_core::pipeline::train::{directory_sink, make_teacher, train_all};
use cascade_core::pipeline::vocoder::{read_wav, write_wav, Vocoder};
use cascade_core::pipeline::{eval_duration, RunConfig};
use cascade_core::t2e::{build_distill_dataset, distill_student, read_jsonl, write_jsonl, EmotionDistribution, Student};
use cascade_core::t2s::DurationMode;
use cascade_core::Mel;

#[derive(Parser)]
#[command(name = "cascade", version, about = "Duration-controllable cascaded text-to-speech")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML configuration file; omitted sections keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one value, e.g. `--set stage1.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic toy corpus as a manifest plus feature files.
    SynthCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every phase, writing a checkpoint after each one.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from this checkpoint; finished phases are skipped.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render one utterance to a WAV file.
    Synthesize(SynthArgs),
    /// Token-count error rates under duration scaling.
    EvalDuration {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "learned")]
        mode: Mode,
        /// Directory for `duration.tsv`, `duration_entries.tsv` and `duration.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the teacher-labelled dataset and train the text-to-emotion student.
    DistillT2e {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Reuse an existing JSONL dataset instead of querying the teacher.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated text token ids.
    #[arg(long)]
    text: String,
    /// Timbre prompt: a `.wav` file or a `.feat` mel file.
    #[arg(long)]
    timbre: PathBuf,
    /// Style prompt audio (`.wav` or `.feat`).
    #[arg(long, group = "style")]
    style_audio: Option<PathBuf>,
    /// Free-text style instruction, classified by the distilled student.
    #[arg(long, group = "style")]
    style_text: Option<String>,
    /// Seven comma-separated emotion weights in label order.
    #[arg(long, group = "style")]
    style_vector: Option<String>,
    /// Token count, or `auto` to let the model stop.
    #[arg(long, default_value = "auto")]
    duration: String,
    #[arg(long, value_enum, default_value = "strict")]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Learned,
    Strict,
}

impl From<Mode> for DurationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Learned => DurationMode::Learned,
            Mode::Strict => DurationMode::Strict,
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(args.config.as_deref(), &args.overrides).context("loading configuration")
}

/// Configuration for read-only commands: the checkpoint's own settings
/// unless a file is given, and the training sections must still match.
fn config_for(ck: &Checkpoint, args: &ConfigArgs) -> Result<RunConfig> {
    let cfg = match &args.config {
        Some(_) => load_config(args)?,
        None => RunConfig::from_toml_str(&ck.config.to_toml()?, &args.overrides)?,
    };
    if cfg.hash() != ck.config_hash() {
        bail!("configuration does not match the checkpoint's training settings");
    }
    Ok(cfg)
}

fn load_corpus(cfg: &RunConfig, mode: LoadMode) -> Result<Corpus> {
    match &cfg.paths.corpus {
        Some(p) => load_manifest(p, mode).with_context(|| format!("loading {}", p.display())),
        None => Ok(synth_corpus_with(&cfg.corpus)?),
    }
}

fn read_mel(path: &Path, cfg: &RunConfig) -> Result<Mel> {
    let is_wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        let (wave, sr) = read_wav(path)?;
        if sr != cfg.audio.sample_rate {
            bail!("{} is {sr} Hz, expected {}", path.display(), cfg.audio.sample_rate);
        }
        Ok(Vocoder::new(&cfg.audio)?.mel_spectrogram(&wave)?)
    } else {
        read_features(path).with_context(|| format!("reading {}", path.display()))
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| t.trim().parse::<T>().map_err(|_| anyhow::anyhow!("bad {what} value `{t}`")))
        .collect()
}

fn run_synthesize(a: SynthArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = config_for(&ck, &a.cfg)?;
    let style = match (&a.style_audio, &a.style_text, &a.style_vector) {
        (Some(p), _, _) => Style::Audio(read_mel(p, &cfg)?),
        (_, Some(t), _) => Style::Text(t.clone()),
        (_, _, Some(v)) => Style::Vector(EmotionDistribution::from_weights(&parse_list::<f64>(v, "emotion weight")?)?),
        _ => bail!("one of --style-audio, --style-text or --style-vector is required"),
    };
    let duration = match a.duration.as_str() {
        "auto" => DurationSpec::Auto,
        n => DurationSpec::Tokens(n.parse().context("--duration must be a token count or `auto`")?),
    };
    let req = SynthRequest {
        text: parse_list(&a.text, "text token")?,
        timbre: read_mel(&a.timbre, &cfg)?,
        style,
        duration,
        seed: a.seed,
    };
    let opts = SynthOptions {
        mode: a.mode.into(),
        max_len: cfg.eval.max_len,
        ode_steps: cfg.eval.ode_steps,
        griffin_lim_iters: cfg.eval.griffin_lim_iters,
        ..SynthOptions::default()
    };
    let out = synthesize(&ck, &req, &opts)?;
    write_wav(&a.out, &out.wave, cfg.audio.sample_rate)?;
    println!(
        "{}: {} tokens, {} frames, {} samples{}",
        a.out.display(),
        out.tokens.len(),
        out.mel.frames(),
        out.wave.len(),
        if out.truncated { " (truncated)" } else { "" }
    );
    if let Some(p) = out.emotion {
        println!("emotion distribution: {:?}", p.probs());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::SynthCorpus { cfg, out } => {
            let cfg = load_config(&cfg)?;
            let corpus = synth_corpus_with(&cfg.corpus)?;
            let manifest = write_manifest(&corpus, &out)?;
            println!("{} utterances -> {}", corpus.len(), manifest.display());
        }
        Command::Train { cfg, resume } => {
            let cfg = load_config(&cfg)?;
            let corpus = load_corpus(&cfg, LoadMode::Training)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let dir = cfg.paths.checkpoints.clone();
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
            let mut sink = directory_sink(dir.clone());
            let ck = train_all(&cfg, &corpus, resume, &mut sink)?;
            for (name, report) in &ck.reports {
                if let Some(acc) = report.get("teacher_forced_accuracy") {
                    println!("{name}: teacher-forced accuracy {acc}");
                }
            }
            println!("finished at `{}`; checkpoints in {}", ck.stage, dir.display());
        }
        Command::Synthesize(a) => run_synthesize(a)?,
        Command::EvalDuration {
            cfg,
            checkpoint,
            mode,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = config_for(&ck, &cfg)?;
            let corpus = load_corpus(&cfg, LoadMode::Inference)?;
            let report = eval_duration(&ck, &corpus, &cfg.eval.factors, mode.into(), &cfg.eval)?;
            print!("{}", report.summary_tsv());
            let out = out.unwrap_or_else(|| cfg.paths.output.clone());
            fs::create_dir_all(&out)?;
            fs::write(out.join("duration.tsv"), report.summary_tsv())?;
            fs::write(out.join("duration_entries.tsv"), report.entries_tsv())?;
            fs::write(out.join("duration.json"), report.to_json()?)?;
        }
        Command::DistillT2e { cfg, dataset, out } => {
            let cfg = load_config(&cfg)?;
            fs::create_dir_all(&out)?;
            let data = match dataset {
                Some(p) => read_jsonl(&p)?,
                None => {
                    let teacher = make_teacher(&cfg.t2e);
                    let data = build_distill_dataset(cfg.t2e.dataset_size, teacher.as_ref(), cfg.t2e.parallelism)?;
                    write_jsonl(&out.join("distill.jsonl"), &data)?;
                    data
                }
            };
            let mut student = Student::new(&cfg.t2e.student)?;
            let report = distill_student(&mut student, &data)?;
            fs::write(out.join("student.bin"), student.to_bytes()?)?;
            fs::write(out.join("distill_report.json"), serde_json::to_string_pretty(&report)?)?;
            println!(
                "{} pairs; loss {:.4} -> {:.4}",
                data.len(),
                report.epoch_losses.first().copied().unwrap_or(f64::NAN),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
