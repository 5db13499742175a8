//! Emotion-transfer acoustic modelling with a diffusion decoder.
//!
//! Text is encoded into a speaker-irrelevant linguistic representation,
//! expanded by durations and turned into an emotion-conditioned prior mean
//! `mu`. A score-based diffusion decoder starts from `N(mu, I)` and walks
//! back to a mel-spectrum, conditioned on a speaker table entry and an
//! emotion embedding extracted from a reference mel.
//!
//! Everything runs on a synthetic corpus whose latent speaker and emotion
//! signatures are known, so each mechanism can be checked against an oracle.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod op_edm;
pub mod text_prior;
pub mod training;

pub use error::{Error, Result};
