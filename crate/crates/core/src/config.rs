//! Run configuration shared by every command.
//!
//! One JSON document with the sections `corpus`, `model`, `schedule`,
//! `train` and `eval` fully describes a run. Missing keys fall back to the
//! toy preset.

use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Synthetic corpus generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub n_speakers: usize,
    /// The first `n_emotional_speakers` speakers record every emotion; the
    /// rest only record the pooled non-emotional neutral category.
    pub n_emotional_speakers: usize,
    /// Emotion categories of the emotional speakers. The first entry is
    /// their neutral style.
    pub emotions: Vec<String>,
    /// Per-emotion duration multiplier, parallel to `emotions`.
    pub duration_multipliers: Vec<f64>,
    /// Per-emotion modulation period in frames, parallel to `emotions`.
    pub modulation_periods: Vec<f64>,
    pub modulation_amplitude: f64,
    pub utts_per_cell: usize,
    pub test_fraction: f64,
    pub vocab_per_language: usize,
    pub tokens_per_utt: (usize, usize),
    pub base_duration: (u32, u32),
    pub n_bands: usize,
    pub noise_sigma: f64,
    pub speaker_scale: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_speakers: 4,
            n_emotional_speakers: 1,
            emotions: ["neutral", "happy", "sad", "angry"].map(String::from).to_vec(),
            duration_multipliers: vec![1.0, 0.7, 1.4, 1.0],
            modulation_periods: vec![4.0, 4.0, 10.0, 6.0],
            modulation_amplitude: 0.8,
            utts_per_cell: 115,
            test_fraction: 0.3,
            vocab_per_language: 12,
            tokens_per_utt: (6, 10),
            base_duration: (2, 5),
            n_bands: 20,
            noise_sigma: 0.3,
            speaker_scale: 0.7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_speakers == 0 {
            return bad("n_speakers must be at least 1");
        }
        if self.emotions.is_empty() {
            return bad("emotions must not be empty");
        }
        if self.n_emotional_speakers > self.n_speakers {
            return bad("n_emotional_speakers exceeds n_speakers");
        }
        if self.utts_per_cell == 0 {
            return bad("utts_per_cell must be at least 1");
        }
        if self.n_bands < 4 {
            return bad("n_bands must be at least 4");
        }
        if self.vocab_per_language == 0 {
            return bad("vocab_per_language must be at least 1");
        }
        if self.duration_multipliers.len() != self.emotions.len()
            || self.modulation_periods.len() != self.emotions.len()
        {
            return bad("duration_multipliers and modulation_periods must parallel emotions");
        }
        if self.duration_multipliers.iter().any(|r| !(*r > 0.0)) {
            return bad("duration multipliers must be positive");
        }
        if self.duration_multipliers[0] != 1.0 {
            return bad("the neutral duration multiplier must be 1");
        }
        if self.modulation_periods.iter().any(|p| !(*p > 0.0)) {
            return bad("modulation periods must be positive");
        }
        let (tmin, tmax) = self.tokens_per_utt;
        if tmin == 0 || tmin > tmax {
            return bad("tokens_per_utt must be a nonempty range starting at 1 or more");
        }
        let (dmin, dmax) = self.base_duration;
        if dmin == 0 || dmin > dmax {
            return bad("base_duration must be a nonempty range starting at 1 or more");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1)");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be nonnegative");
        }
        Ok(())
    }

    /// Emotion categories plus the pooled `neutral_N` category (last).
    pub fn n_categories(&self) -> usize {
        self.emotions.len() + 1
    }

    pub fn vocab_size(&self) -> usize {
        2 * self.vocab_per_language
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Network widths and depths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub precision: Precision,
    pub vocab_size: usize,
    pub n_speakers: usize,
    pub n_emotions: usize,
    pub n_bands: usize,
    pub text_dim: usize,
    pub text_blocks: usize,
    pub text_heads: usize,
    pub text_ffn_dim: usize,
    pub adversary_gru_dim: usize,
    pub duration_hidden: usize,
    /// Train the duration predictor on `ln(1 + d)` instead of frame counts.
    pub log_duration: bool,
    pub adaptor_dim: usize,
    pub adaptor_blocks: usize,
    pub adaptor_heads: usize,
    pub emotion_dim: usize,
    pub ref_channels: Vec<usize>,
    pub ref_gru_dim: usize,
    pub speaker_dim: usize,
    pub unet_base: usize,
    pub unet_mults: Vec<usize>,
    pub time_embed_dim: usize,
    pub grl_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            vocab_size: 24,
            n_speakers: 4,
            n_emotions: 5,
            n_bands: 20,
            text_dim: 64,
            text_blocks: 2,
            text_heads: 2,
            text_ffn_dim: 128,
            adversary_gru_dim: 32,
            duration_hidden: 64,
            log_duration: false,
            adaptor_dim: 64,
            adaptor_blocks: 2,
            adaptor_heads: 2,
            emotion_dim: 32,
            ref_channels: vec![8, 16, 16],
            ref_gru_dim: 32,
            speaker_dim: 32,
            unet_base: 32,
            unet_mults: vec![1, 2, 4],
            time_embed_dim: 32,
            grl_scale: 3.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.n_speakers == 0 {
            return bad("vocab_size and n_speakers must be positive".into());
        }
        if self.n_emotions < 2 {
            return bad("at least two emotion categories are required".into());
        }
        if self.n_bands < 4 {
            return bad("n_bands must be at least 4".into());
        }
        if self.text_heads == 0 || self.text_dim % self.text_heads != 0 {
            return bad(format!(
                "text_dim {} not divisible by text_heads {}",
                self.text_dim, self.text_heads
            ));
        }
        if self.adaptor_heads == 0 || self.adaptor_dim % self.adaptor_heads != 0 {
            return bad(format!(
                "adaptor_dim {} not divisible by adaptor_heads {}",
                self.adaptor_dim, self.adaptor_heads
            ));
        }
        if self.ref_channels.is_empty() {
            return bad("ref_channels must not be empty".into());
        }
        if self.unet_mults.is_empty() {
            return bad("unet_mults must not be empty".into());
        }
        if self.unet_base < 4 || self.unet_base % 4 != 0 {
            return bad("unet_base must be a positive multiple of 4".into());
        }
        if !(self.grl_scale > 0.0) {
            return bad("grl_scale must be positive".into());
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    /// Frame and band extents must be multiples of this for the decoder.
    pub fn unet_stride(&self) -> usize {
        1 << (self.unet_mults.len() - 1)
    }

    /// Full-size widths; not exercised at desk scale.
    pub fn paper_scale() -> Self {
        Self {
            n_bands: 80,
            text_dim: 448,
            text_blocks: 6,
            text_heads: 8,
            text_ffn_dim: 1536,
            adaptor_dim: 448,
            adaptor_heads: 8,
            emotion_dim: 256,
            ref_channels: vec![32, 32, 64, 64, 128, 128],
            ref_gru_dim: 128,
            speaker_dim: 64,
            unet_base: 64,
            time_embed_dim: 64,
            ..Self::default()
        }
    }
}

/// Noise schedule and sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub beta0: f64,
    pub beta1: f64,
    /// Lower end of the uniform training time distribution.
    pub t_eps: f64,
    pub inference_steps: usize,
    pub temperature: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            beta0: 0.05,
            beta1: 20.0,
            t_eps: 1e-3,
            inference_steps: 50,
            temperature: 1.0,
        }
    }
}

/// Ablations mirroring the variants without content loss, emotional
/// adaptor, orthogonal projection loss, or per-block decoder conditioning.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub no_content_loss: bool,
    pub no_emotional_adaptor: bool,
    pub no_opl: bool,
    pub no_per_block_conditioning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Random decoder crop length in frames; `None` trains on whole utterances.
    pub decoder_segment_frames: Option<usize>,
    pub checkpoint_every: u64,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            batch_size: 8,
            steps: 5000,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
            decoder_segment_frames: Some(16),
            checkpoint_every: 1000,
            ablations: Ablations::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let Some(seg) = self.decoder_segment_frames {
            if seg == 0 {
                return Err(Error::Config("decoder_segment_frames must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split_seed: u64,
    pub oracle_paths: usize,
    pub synth_trials: usize,
    pub synth_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split_seed: 99,
            oracle_paths: 100_000,
            synth_trials: 50,
            synth_seed: 4242,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: GenConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Desk-scale preset: four speakers, one of them emotional, 20 bands.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.sync_model_with_corpus();
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.sync_model_with_corpus();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Label-space and vocabulary sizes are owned by the corpus section.
    pub fn sync_model_with_corpus(&mut self) {
        self.model.vocab_size = self.corpus.vocab_size();
        self.model.n_speakers = self.corpus.n_speakers;
        self.model.n_emotions = self.corpus.n_categories();
        self.model.n_bands = self.corpus.n_bands;
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if !(self.schedule.beta0 > 0.0 && self.schedule.beta1 > self.schedule.beta0) {
            return Err(Error::Config("schedule requires 0 < beta0 < beta1".into()));
        }
        if !(self.schedule.t_eps > 0.0 && self.schedule.t_eps < 1.0) {
            return Err(Error::Config("t_eps must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_preset_is_valid() {
        let cfg = RunConfig::toy();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.n_emotions, 5);
        assert_eq!(cfg.model.vocab_size, 24);
    }

    #[test]
    fn partial_json_falls_back_to_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"train": {"steps": 10}, "corpus": {"n_bands": 8}}"#).unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.corpus.n_bands, 8);
        assert_eq!(cfg.schedule.beta1, 20.0);
    }

    #[test]
    fn rejects_bad_counts() {
        let mut c = GenConfig::default();
        c.n_speakers = 0;
        assert!(c.validate().is_err());
        let mut c = GenConfig::default();
        c.emotions.clear();
        c.duration_multipliers.clear();
        c.modulation_periods.clear();
        assert!(c.validate().is_err());
        let mut c = GenConfig::default();
        c.n_bands = 3;
        assert!(c.validate().is_err());
    }
}
