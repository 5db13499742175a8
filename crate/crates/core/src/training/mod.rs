//! Joint optimisation of the prior text encoder, the emotion disentangler
//! and the diffusion decoder, plus checkpointing and synthesis.

mod adam;
mod checkpoint;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, model_config_mismatch, save_checkpoint, CHECKPOINT_METADATA_KEY};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{Corpus, MelSpectrum, Split, Utterance};
use crate::diffusion::{diffusion_loss, reverse_ode_sample, ConditionedScore, DiffusionSchedule, ScoreNetwork, SpeakerTable};
use crate::error::{Error, Result};
use crate::nn::{scalar, sequence_mask, ParamStore};
use crate::op_edm::{EmotionDisentangler, ReferenceBatch, EDM_WEIGHTS};
use crate::text_prior::{TextPrior, TokenBatch, PRIOR_WEIGHTS};

/// `prior + edm + diff`.
pub fn total_loss(prior: f64, edm: f64, diff: f64) -> f64 {
    prior + edm + diff
}

/// Every model component and the parameter store behind them.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub prior: TextPrior,
    pub edm: EmotionDisentangler,
    pub speakers: SpeakerTable,
    pub decoder: ScoreNetwork,
    pub schedule: DiffusionSchedule,
}

impl Model {
    /// Fresh parameters drawn from the training seed.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let ab = &config.train.ablations;
        let store = ParamStore::new(config.train.seed, m.precision.dtype());
        let root = store.root();
        Ok(Self {
            prior: TextPrior::new(&root.pp("prior"), m, ab)?,
            edm: EmotionDisentangler::new(&root.pp("edm"), m, !ab.no_opl)?,
            speakers: SpeakerTable::new(&root.pp("speakers"), m.n_speakers, m.speaker_dim)?,
            decoder: ScoreNetwork::new(&root.pp("decoder"), m, !ab.no_per_block_conditioning)?,
            schedule: DiffusionSchedule::from_config(&config.schedule)?,
            config: config.clone(),
            store,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Emotion embeddings `[B, E]` of reference mels.
    pub fn embed_references(&self, mels: &[&MelSpectrum]) -> Result<Tensor> {
        self.edm
            .encoder
            .forward(&ReferenceBatch::from_mels(mels, self.dtype(), self.device())?)
    }

    /// Embeddings of many references, computed in chunks.
    pub fn embed_all(&self, mels: &[&MelSpectrum]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(mels.len());
        for chunk in mels.chunks(32) {
            let e = self.embed_references(chunk)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            out.extend(e);
        }
        Ok(out)
    }
}

/// Utterances of one split with their mels in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub mels: Vec<MelSpectrum>,
}

impl Dataset {
    pub fn load(corpus: &Corpus, split: Split) -> Result<Self> {
        let utterances: Vec<Utterance> = corpus.split(split).cloned().collect();
        let mels = utterances
            .iter()
            .map(|u| corpus.read_mel(u))
            .collect::<Result<Vec<_>>>()?;
        if utterances.is_empty() {
            return Err(Error::Invalid(format!("the {split:?} split is empty")));
        }
        Ok(Self { utterances, mels })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// A padded training batch.
pub struct Batch {
    pub tokens: TokenBatch,
    pub token_lists: Vec<Vec<u32>>,
    pub durations: Vec<Vec<u32>>,
    pub speakers: Vec<usize>,
    pub emotions: Vec<usize>,
    /// `[B, T, F]`
    pub mels: Tensor,
    pub frames: Vec<usize>,
}

impl Batch {
    pub fn new(data: &Dataset, indices: &[usize], vocab: usize, dtype: DType, dev: &Device) -> Result<Self> {
        let utts: Vec<&Utterance> = indices.iter().map(|&i| &data.utterances[i]).collect();
        let mels: Vec<&MelSpectrum> = indices.iter().map(|&i| &data.mels[i]).collect();
        let lists: Vec<&[u32]> = utts.iter().map(|u| u.tokens.as_slice()).collect();
        let refs = ReferenceBatch::from_mels(&mels, dtype, dev)?;
        Ok(Self {
            tokens: TokenBatch::new(&lists, vocab, dtype, dev)?,
            token_lists: utts.iter().map(|u| u.tokens.clone()).collect(),
            durations: utts.iter().map(|u| u.durations.clone()).collect(),
            speakers: utts.iter().map(|u| u.speaker_id).collect(),
            emotions: utts.iter().map(|u| u.emotion_id).collect(),
            mels: refs.mels,
            frames: refs.lengths,
        })
    }
}

/// Component losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(rename = "L_ladv")]
    pub ladv: f64,
    #[serde(rename = "L_c")]
    pub content: f64,
    #[serde(rename = "L_dur")]
    pub duration: f64,
    #[serde(rename = "L_mel")]
    pub mel: f64,
    #[serde(rename = "L_prior")]
    pub prior: f64,
    #[serde(rename = "L_sadv")]
    pub sadv: f64,
    #[serde(rename = "L_emo")]
    pub emotion: f64,
    #[serde(rename = "L_opl")]
    pub opl: f64,
    #[serde(rename = "L_opedm")]
    pub opedm: f64,
    #[serde(rename = "L_diff")]
    pub diff: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

impl StepMetrics {
    fn all_finite(&self) -> bool {
        [
            self.ladv, self.content, self.duration, self.mel, self.prior, self.sadv, self.emotion,
            self.opl, self.opedm, self.diff, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Largest deviation between logged aggregates and their recomposition
    /// from logged components.
    pub fn recomposition_error(&self) -> f64 {
        let prior = crate::text_prior::prior_loss(self.ladv, self.content, self.duration, self.mel);
        let edm = crate::op_edm::edm_loss(self.sadv, self.emotion, self.opl);
        let total = total_loss(self.prior, self.opedm, self.diff);
        (prior - self.prior)
            .abs()
            .max((edm - self.opedm).abs())
            .max((total - self.total).abs())
    }
}

/// Model, optimizer, step counter and the data/noise stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

fn weighted(terms: &[(&Tensor, f64)]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for (t, w) in terms {
        let x = t.to_dtype(DType::F64)?;
        let x = if *w == 1.0 { x } else { (x * *w)? };
        acc = Some(match acc {
            Some(a) => (a + x)?,
            None => x,
        });
    }
    acc.ok_or_else(|| Error::Invalid("empty weighted sum".into()))
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let t = &config.train;
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        rng.set_stream(1);
        Ok(Self {
            model: Model::new(config)?,
            optimizer: Adam::new(t.learning_rate, t.adam_beta1, t.adam_beta2, t.adam_eps, t.grad_clip),
            step: 0,
            rng,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.model.config
    }

    /// Losses of a batch as graph nodes plus their logged values.
    pub fn losses(&mut self, batch: &Batch) -> Result<(Tensor, StepMetrics)> {
        let model = &self.model;
        let cfg = &model.config;
        let refs = ReferenceBatch::new(batch.mels.clone(), batch.frames.clone())?;
        let (e, edm) = model.edm.forward_train(&refs, &batch.speakers, &batch.emotions)?;
        // only the disentangling losses train the reference encoder
        let e = e.detach();
        let lists: Vec<&[u32]> = batch.token_lists.iter().map(|v| v.as_slice()).collect();
        let prior = model.prior.forward_train(
            &batch.tokens,
            &lists,
            &batch.durations,
            &batch.speakers,
            &e,
            &batch.mels,
        )?;

        let seg = cfg.train.decoder_segment_frames;
        let (x0, mu, mask) = decoder_crop(seg, &mut self.rng, &batch.mels, &prior.mu, &batch.frames)?;
        let speaker = model.speakers.lookup(&batch.speakers)?;
        let score = ConditionedScore {
            net: &model.decoder,
            speaker: &speaker,
            emotion: &e,
            mask: &mask,
        };
        let l_diff = diffusion_loss(&score, &model.schedule, &x0, &mu, &mask, cfg.schedule.t_eps, &mut self.rng)?;

        let dtype = e.dtype();
        let zero = Tensor::zeros((), dtype, e.device())?;
        let content = if cfg.train.ablations.no_content_loss {
            &zero
        } else {
            &prior.losses.content
        };
        let opl = edm.projection.as_ref().unwrap_or(&zero);
        let l_prior = weighted(&[
            (&prior.losses.adversarial, PRIOR_WEIGHTS[0]),
            (content, PRIOR_WEIGHTS[1]),
            (&prior.losses.duration, PRIOR_WEIGHTS[2]),
            (&prior.losses.mel, PRIOR_WEIGHTS[3]),
        ])?;
        let l_edm = weighted(&[
            (&edm.speaker_adversarial, EDM_WEIGHTS[0]),
            (&edm.emotion, EDM_WEIGHTS[1]),
            (opl, EDM_WEIGHTS[2]),
        ])?;
        let l_diff64 = l_diff.to_dtype(DType::F64)?;
        let total = ((&l_prior + &l_edm)? + &l_diff64)?;
        let f = |t: &Tensor| scalar(t);
        let metrics = StepMetrics {
            step: self.step,
            ladv: f(&prior.losses.adversarial)?,
            content: f(content)?,
            duration: f(&prior.losses.duration)?,
            mel: f(&prior.losses.mel)?,
            prior: f(&l_prior)?,
            sadv: f(&edm.speaker_adversarial)?,
            emotion: f(&edm.emotion)?,
            opl: f(opl)?,
            opedm: f(&l_edm)?,
            diff: f(&l_diff64)?,
            total: f(&total)?,
        };
        Ok((total, metrics))
    }

    /// Draws a batch, applies one optimizer update and returns the losses
    /// that produced it.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(Error::Invalid("no training utterances".into()));
        }
        let bs = self.model.config.train.batch_size;
        let indices: Vec<usize> = (0..bs).map(|_| self.rng.random_range(0..data.len())).collect();
        let m = &self.model.config.model;
        let batch = Batch::new(data, &indices, m.vocab_size, self.model.dtype(), self.model.device())?;
        let (total, metrics) = self.losses(&batch)?;
        if !metrics.all_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                breakdown: serde_json::to_string(&metrics)?,
            });
        }
        let grads = total.backward()?;
        self.optimizer.step(&self.model.store.vars(), &grads)?;
        self.step += 1;
        Ok(metrics)
    }

    /// Runs `steps` updates, handing each step's metrics to `on_step`.
    pub fn train<F: FnMut(&Trainer, &StepMetrics) -> Result<()>>(
        &mut self,
        data: &Dataset,
        steps: u64,
        mut on_step: F,
    ) -> Result<()> {
        for _ in 0..steps {
            let m = self.train_step(data)?;
            on_step(self, &m)?;
        }
        Ok(())
    }
}

/// A synthesized mel with the intermediate prior.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub mel: MelSpectrum,
    pub prior_mean: MelSpectrum,
    pub durations: Vec<u32>,
}

fn to_mel(t: &Tensor) -> Result<MelSpectrum> {
    let (_, frames, bands) = t.dims3()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    MelSpectrum::new(frames, bands, v)
}

/// Text, speaker id and an emotion reference to a mel: encode the text,
/// predict durations with the reference's emotion, expand, adapt, then run
/// the reverse ODE from the prior.
pub fn synthesize<R: Rng + ?Sized>(
    model: &Model,
    tokens: &[u32],
    speaker: usize,
    reference: &MelSpectrum,
    n_steps: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Synthesis> {
    if tokens.is_empty() {
        return Err(Error::Invalid("no tokens to synthesize".into()));
    }
    let spk = model.speakers.lookup(&[speaker])?;
    let e = model.embed_references(&[reference])?;
    let (mu, durations) = model.prior.infer(tokens, &e)?;
    let frames = mu.dim(1)?;
    let mask = Tensor::ones((1, frames), mu.dtype(), mu.device())?;
    let score = ConditionedScore {
        net: &model.decoder,
        speaker: &spk,
        emotion: &e,
        mask: &mask,
    };
    let x = reverse_ode_sample(&score, &model.schedule, &mu, n_steps, temperature, rng)?;
    Ok(Synthesis {
        mel: to_mel(&x)?,
        prior_mean: to_mel(&mu)?,
        durations,
    })
}

/// Random fixed-length windows of the target and prior mean for the
/// decoder; whole utterances when no segment length is configured.
fn decoder_crop(
segment: Option<usize>,
rng: &mut ChaCha8Rng,
mels: &Tensor, mu: &Tensor, frames: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, t, _) = mels.dims3()?;
    let Some(seg) = segment else {
        let mask = sequence_mask(frames, t, mels.dtype(), mels.device())?;
        return Ok((mels.clone(), mu.clone(), mask));
    };
    let seg = seg.min(t);
    let mut xs = Vec::with_capacity(b);
    let mut ms = Vec::with_capacity(b);
    let mut lens = Vec::with_capacity(b);
    for (i, &len) in frames.iter().enumerate() {
        let start = if len > seg { rng.random_range(0..=len - seg) } else { 0 };
        xs.push(mels.get(i)?.narrow(0, start, seg)?);
        ms.push(mu.get(i)?.narrow(0, start, seg)?);
        lens.push(len.min(seg));
    }
    let mask = sequence_mask(&lens, seg, mels.dtype(), mels.device())?;
    Ok((Tensor::stack(&xs, 0)?, Tensor::stack(&ms, 0)?, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_is_unweighted_sum() {
        assert_eq!(total_loss(1.0, 1.0, 1.0), 3.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn recomposition_error_of_consistent_metrics_is_zero() {
        let mut m = StepMetrics {
            step: 0,
            ladv: 1.2,
            content: 3.0,
            duration: 0.5,
            mel: 0.25,
            prior: 0.0,
            sadv: 1.1,
            emotion: 1.3,
            opl: 0.4,
            opedm: 0.0,
            diff: 0.9,
            total: 0.0,
        };
        m.prior = crate::text_prior::prior_loss(m.ladv, m.content, m.duration, m.mel);
        m.opedm = crate::op_edm::edm_loss(m.sadv, m.emotion, m.opl);
        m.total = total_loss(m.prior, m.opedm, m.diff);
        assert_eq!(m.recomposition_error(), 0.0);
        m.total += 1e-3;
        assert!(m.recomposition_error() > 9e-4);
    }

    #[test]
    fn metrics_serialize_with_loss_names() {
        let m = StepMetrics {
            step: 3,
            ladv: 0.0,
            content: 0.0,
            duration: 0.0,
            mel: 0.0,
            prior: 0.0,
            sadv: 0.0,
            emotion: 0.0,
            opl: 0.0,
            opedm: 0.0,
            diff: 0.0,
            total: 0.0,
        };
        let v: serde_json::Value = serde_json::to_value(m).unwrap();
        for k in ["step", "L_ladv", "L_c", "L_dur", "L_mel", "L_prior", "L_sadv", "L_emo", "L_opl", "L_opedm", "L_diff", "L_total"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}
