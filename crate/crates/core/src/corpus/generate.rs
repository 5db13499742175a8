//! Seeded synthetic corpus with known latent factors.
//!
//! Every frame is `p[token] + w[speaker] + a * v[emotion] * sin(2 pi t / P[emotion]) + noise`
//! and token durations are `max(1, round(base * rho[emotion]))`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{save_manifest, Corpus, Split, Utterance};
use super::mel::{write_mel, MelSpectrum};
use crate::config::GenConfig;
use crate::error::{Error, Result};
use crate::op_edm::EmotionCategorySet;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SIGNATURES_FILE: &str = "signatures.json";

/// Ground-truth generative factors of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSignatures {
    pub seed: u64,
    pub noise_sigma: f64,
    pub modulation_amplitude: f64,
    /// Category names; the last one is the pooled `neutral_N`.
    pub emotion_names: Vec<String>,
    pub speaker_envelopes: Vec<Vec<f64>>,
    pub emotion_modulations: Vec<Vec<f64>>,
    pub duration_multipliers: Vec<f64>,
    pub modulation_periods: Vec<f64>,
    pub token_patterns: Vec<Vec<f64>>,
    pub speaker_languages: Vec<usize>,
    pub n_emotional_speakers: usize,
    pub vocab_per_language: usize,
}

impl LatentSignatures {
    /// Draws signatures from the config seed. Neutral categories carry no
    /// modulation and a unit duration multiplier.
    pub fn draw(cfg: &GenConfig) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.n_bands;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gauss = |n: usize, scale: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<f64>>()
        };
        let token_patterns = (0..cfg.vocab_size()).map(|_| gauss(f, 1.0, &mut rng)).collect();
        let speaker_envelopes = (0..cfg.n_speakers)
            .map(|_| gauss(f, cfg.speaker_scale, &mut rng))
            .collect();
        let mut emotion_modulations = Vec::new();
        for e in 0..cfg.n_categories() {
            let v = gauss(f, 1.0, &mut rng);
            if e == 0 || e == cfg.emotions.len() {
                emotion_modulations.push(vec![0.0; f]);
            } else {
                let rms = (v.iter().map(|x| x * x).sum::<f64>() / f as f64).sqrt();
                emotion_modulations.push(v.iter().map(|x| x / rms).collect());
            }
        }
        let mut emotion_names = cfg.emotions.clone();
        emotion_names.push(EmotionCategorySet::NEUTRAL_N.to_string());
        let mut duration_multipliers = cfg.duration_multipliers.clone();
        duration_multipliers.push(1.0);
        let mut modulation_periods = cfg.modulation_periods.clone();
        modulation_periods.push(cfg.modulation_periods[0]);
        let speaker_languages = (0..cfg.n_speakers)
            .map(|s| {
                if s < cfg.n_emotional_speakers {
                    0
                } else {
                    (s - cfg.n_emotional_speakers) % 2
                }
            })
            .collect();
        Ok(Self {
            seed: cfg.seed,
            noise_sigma: cfg.noise_sigma,
            modulation_amplitude: cfg.modulation_amplitude,
            emotion_names,
            speaker_envelopes,
            emotion_modulations,
            duration_multipliers,
            modulation_periods,
            token_patterns,
            speaker_languages,
            n_emotional_speakers: cfg.n_emotional_speakers,
            vocab_per_language: cfg.vocab_per_language,
        })
    }

    pub fn n_bands(&self) -> usize {
        self.speaker_envelopes[0].len()
    }

    pub fn n_speakers(&self) -> usize {
        self.speaker_envelopes.len()
    }

    pub fn categories(&self) -> EmotionCategorySet {
        EmotionCategorySet::new(self.emotion_names.clone()).expect("signatures carry neutral_N")
    }

    pub fn neutral_n(&self) -> usize {
        self.emotion_names.len() - 1
    }

    pub fn language_tokens(&self, language: usize) -> std::ops::Range<u32> {
        let v = self.vocab_per_language as u32;
        language as u32 * v..(language as u32 + 1) * v
    }

    /// Deterministic part of frame `t` for a token, without the speaker.
    fn emotion_term(&self, emotion: usize, t: usize, band: usize) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * t as f64 / self.modulation_periods[emotion];
        self.modulation_amplitude * self.emotion_modulations[emotion][band] * phase.sin()
    }

    pub fn scaled_durations(&self, base: &[u32], emotion: usize) -> Vec<u32> {
        let rho = self.duration_multipliers[emotion];
        base.iter()
            .map(|&b| ((b as f64 * rho).round() as u32).max(1))
            .collect()
    }

    /// Renders a mel for given tokens and durations. Noise is drawn from `rng`.
    pub fn render<R: Rng + ?Sized>(
        &self,
        tokens: &[u32],
        durations: &[u32],
        speaker: usize,
        emotion: usize,
        rng: &mut R,
    ) -> Result<MelSpectrum> {
        let f = self.n_bands();
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0))
            .map_err(|e| Error::Invalid(e.to_string()))?;
        let mut values = Vec::new();
        let mut t = 0usize;
        for (&tok, &d) in tokens.iter().zip(durations) {
            let pattern = &self.token_patterns[tok as usize];
            for _ in 0..d {
                for b in 0..f {
                    let mut x = pattern[b]
                        + self.speaker_envelopes[speaker][b]
                        + self.emotion_term(emotion, t, b);
                    if self.noise_sigma > 0.0 {
                        x += noise.sample(rng);
                    }
                    values.push(x as f32);
                }
                t += 1;
            }
        }
        MelSpectrum::new(t, f, values)
    }

    /// Time-averaged mel minus token terms (and the emotion term when the
    /// emotion is known). Equals the speaker envelope for noise-free data.
    pub fn speaker_residual(
        &self,
        mel: &MelSpectrum,
        tokens: &[u32],
        durations: &[u32],
        emotion: Option<usize>,
    ) -> Result<Vec<f64>> {
        let total: usize = durations.iter().map(|&d| d as usize).sum();
        if total != mel.frames() || tokens.len() != durations.len() {
            return Err(Error::Shape(format!(
                "{} frames vs durations summing to {total}",
                mel.frames()
            )));
        }
        let f = self.n_bands();
        let mut acc = vec![0.0f64; f];
        let mut t = 0usize;
        for (&tok, &d) in tokens.iter().zip(durations) {
            for _ in 0..d {
                let frame = mel.frame(t);
                for b in 0..f {
                    let mut r = frame[b] as f64 - self.token_patterns[tok as usize][b];
                    if let Some(e) = emotion {
                        r -= self.emotion_term(e, t, b);
                    }
                    acc[b] += r;
                }
                t += 1;
            }
        }
        acc.iter_mut().for_each(|a| *a /= total as f64);
        Ok(acc)
    }

    /// Least-squares coefficients of the speaker residual on the envelope set.
    pub fn speaker_coefficients(
        &self,
        mel: &MelSpectrum,
        tokens: &[u32],
        durations: &[u32],
        emotion: Option<usize>,
    ) -> Result<Vec<f64>> {
        let r = self.speaker_residual(mel, tokens, durations, emotion)?;
        let f = self.n_bands();
        let s = self.n_speakers();
        let w = DMatrix::from_fn(f, s, |b, k| self.speaker_envelopes[k][b]);
        let svd = w.svd(true, true);
        let c = svd
            .solve(&DVector::from_vec(r), 1e-12)
            .map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(c.iter().copied().collect())
    }

    /// Speaker with the largest regression coefficient.
    pub fn assign_speaker(
        &self,
        mel: &MelSpectrum,
        tokens: &[u32],
        durations: &[u32],
        emotion: Option<usize>,
    ) -> Result<usize> {
        let c = self.speaker_coefficients(mel, tokens, durations, emotion)?;
        Ok(argmax(&c))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Random token sequence and base durations for one utterance.
pub fn draw_text<R: Rng + ?Sized>(
    cfg: &GenConfig,
    sig: &LatentSignatures,
    language: usize,
    rng: &mut R,
) -> (Vec<u32>, Vec<u32>) {
    let n = rng.random_range(cfg.tokens_per_utt.0..=cfg.tokens_per_utt.1);
    let range = sig.language_tokens(language);
    let tokens = (0..n).map(|_| rng.random_range(range.clone())).collect();
    let base = (0..n)
        .map(|_| rng.random_range(cfg.base_duration.0..=cfg.base_duration.1))
        .collect();
    (tokens, base)
}

/// Generates the corpus under `out_dir`: `mels/*.dmel`, `manifest.jsonl`
/// and `signatures.json`.
pub fn generate_corpus(cfg: &GenConfig, out_dir: &Path) -> Result<(Corpus, LatentSignatures)> {
    let sig = LatentSignatures::draw(cfg)?;
    let mel_dir = out_dir.join("mels");
    fs::create_dir_all(&mel_dir).map_err(|e| Error::io(&mel_dir, e))?;

    let mut cells = Vec::new();
    for s in 0..cfg.n_speakers {
        if s < cfg.n_emotional_speakers {
            cells.extend((0..cfg.emotions.len()).map(|e| (s, e)));
        } else {
            cells.push((s, sig.neutral_n()));
        }
    }
    let n_test = (cfg.utts_per_cell as f64 * cfg.test_fraction).round() as usize;
    let n_train = cfg.utts_per_cell - n_test;

    let mut utterances = Vec::new();
    for (cell_idx, &(speaker, emotion)) in cells.iter().enumerate() {
        for u in 0..cfg.utts_per_cell {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1 + (cell_idx * cfg.utts_per_cell + u) as u64);
            let language = sig.speaker_languages[speaker];
            let (tokens, base) = draw_text(cfg, &sig, language, &mut rng);
            let durations = sig.scaled_durations(&base, emotion);
            let mel = sig.render(&tokens, &durations, speaker, emotion, &mut rng)?;
            let id = format!("s{speaker}_e{emotion}_{u:04}");
            let mel_path = format!("mels/{id}.dmel");
            write_mel(&mel, &out_dir.join(&mel_path))?;
            utterances.push(Utterance {
                id,
                speaker_id: speaker,
                emotion_id: emotion,
                language_id: language,
                tokens,
                durations,
                mel_path,
                split: if u < n_train { Split::Train } else { Split::Test },
            });
        }
    }
    let corpus = Corpus {
        root: out_dir.to_path_buf(),
        utterances,
    };
    save_manifest(&corpus, &out_dir.join(MANIFEST_FILE))?;
    sig.save(&out_dir.join(SIGNATURES_FILE))?;
    Ok((corpus, sig))
}
