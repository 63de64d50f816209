//! End-to-end orchestration: configuration, training driver, checkpoints,
//! synthesis, evaluation and waveform rendering.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod synth;
pub mod train;
pub mod vocoder;

pub use checkpoint::{Checkpoint, StageTag};
pub use config::RunConfig;
pub use eval::{eval_duration, DurationReport, ExternalMetric};
pub use synth::{synthesize, DurationSpec, Style, SynthOptions, SynthRequest, Synthesis};
pub use train::{directory_sink, train_all};
pub use vocoder::{griffin_lim, write_wav, AudioConfig, Vocoder};
