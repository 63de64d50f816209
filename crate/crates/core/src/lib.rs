//! Desk-scale cascaded text-to-speech.
//!
//! The cascade has three learned stages plus a text-to-emotion side path:
//!
//! * [`t2s`]: autoregressive transformer from text (and speaker/emotion
//!   conditions, and an optional target length) to discrete semantic tokens;
//! * [`s2m`]: conditional flow-matching generator from semantic tokens to mel;
//! * [`pipeline`]: Griffin-Lim rendering, training driver, checkpoints, CLI glue;
//! * [`t2e`]: emotion distributions from text, distilled from a teacher into a
//!   low-rank-adapted student, mixed over an emotion embedding bank.
//!
//! Semantic tokens come from a small trainable VQ [`codec`]; speaker and
//! emotion embeddings come from attention-pooling [`conditioners`].

pub mod codec;
pub mod conditioners;
pub mod corpus;
pub mod emotion;
pub mod error;
pub mod mel;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod probe;
pub mod s2m;
pub mod t2e;


pub mod t2s;


pub use emotion::Emotion;
pub use error::{Error, Result};
pub use mel::Mel;
