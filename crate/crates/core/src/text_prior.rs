//! Prior text encoder: tokens to a speaker-irrelevant, emotion-conditioned
//! prior mean `mu` with the same shape as the target mel.
//!
//! The pieces are the text encoder, a speaker-adversarial classifier behind
//! a gradient-reversal gate, a per-position content classifier, an
//! emotion-aware duration predictor, the length regulator and the emotional
//! adaptor (FFT blocks with conditional layer norm).

use candle_core::{DType, Device, Tensor};

use crate::config::{Ablations, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy, layer_normalize, nll_per_row, sequence_mask, sinusoidal_positions, Conv1d,
    Embedding, FftBlock, GradientReversal, Gru, LayerNorm, Linear, Params, LN_EPS,
};

/// Weights of the adversarial, content, duration and mel terms in the
/// prior objective.
pub const PRIOR_WEIGHTS: [f64; 4] = [0.01, 1.0, 1.0, 1.0];

/// `0.01 * ladv + content + duration + mel`.
pub fn prior_loss(ladv: f64, content: f64, duration: f64, mel: f64) -> f64 {
    PRIOR_WEIGHTS[0] * ladv + PRIOR_WEIGHTS[1] * content + PRIOR_WEIGHTS[2] * duration
        + PRIOR_WEIGHTS[3] * mel
}

/// Padded token ids with masks.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub ids: Tensor,
    pub lengths: Vec<usize>,
    /// `[B, C, 1]`
    pub mask: Tensor,
    /// `[B, C]`
    pub key_mask: Tensor,
}

impl TokenBatch {
    pub fn new(seqs: &[&[u32]], vocab: usize, dtype: DType, dev: &Device) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Invalid("empty token batch".into()));
        }
        let c = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![0u32; seqs.len() * c];
        for (b, s) in seqs.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Invalid("empty token sequence".into()));
            }
            for (j, &tok) in s.iter().enumerate() {
                if tok as usize >= vocab {
                    return Err(Error::UnknownToken { id: tok, vocab });
                }
                ids[b * c + j] = tok;
            }
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let key_mask = sequence_mask(&lengths, c, dtype, dev)?;
        Ok(Self {
            ids: Tensor::from_vec(ids, (seqs.len(), c), dev)?,
            mask: key_mask.unsqueeze(2)?,
            key_mask,
            lengths,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.key_mask.dims()[1]
    }
}

/// Embedding, convolutional pre-net, self-attention blocks and a final
/// projection. Output `[B, C, d]`, zero on padding.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    vocab: usize,
    dim: usize,
    embed: Embedding,
    prenet: Vec<(Conv1d, LayerNorm)>,
    prenet_out: Linear,
    blocks: Vec<FftBlock>,
    proj: Linear,
}

impl TextEncoder {
    pub fn new(p: &Params, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.text_dim;
        let prenet = (0..3)
            .map(|i| -> Result<_> {
                let q = p.pp(format!("prenet{i}"));
                Ok((Conv1d::new(&q.pp("conv"), d, d, 3)?, LayerNorm::new(&q.pp("norm"), d)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let blocks = (0..cfg.text_blocks)
            .map(|i| FftBlock::new(&p.pp(format!("block{i}")), d, cfg.text_heads, cfg.text_ffn_dim, None))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            vocab: cfg.vocab_size,
            dim: d,
            embed: Embedding::new(&p.pp("embed"), cfg.vocab_size, d)?,
            prenet,
            prenet_out: Linear::new(&p.pp("prenet_out"), d, d)?,
            blocks,
            proj: Linear::new(&p.pp("proj"), d, d)?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward(&self, tokens: &TokenBatch) -> Result<Tensor> {
        let mask = &tokens.mask;
        let x = self.embed.forward(&tokens.ids)?.broadcast_mul(mask)?;
        let mut h = x.clone();
        for (conv, norm) in &self.prenet {
            h = norm.forward(&conv.forward(&h, mask)?.relu()?)?.broadcast_mul(mask)?;
        }
        let x = (x + self.prenet_out.forward(&h)?)?;
        let pos = sinusoidal_positions(tokens.max_len(), self.dim, x.dtype(), x.device())?;
        let mut x = x.broadcast_add(&pos.unsqueeze(0)?)?.broadcast_mul(mask)?;
        for block in &self.blocks {
            x = block.forward(&x, mask, &tokens.key_mask, None)?;
        }
        Ok(self.proj.forward(&x)?.broadcast_mul(mask)?)
    }
}

/// Recurrent summary of the linguistic representation, a gradient-reversal
/// gate, then a linear speaker classifier.
#[derive(Debug, Clone)]
pub struct TextSpeakerAdversary {
    gru: Gru,
    pub gate: GradientReversal,
    fc: Linear,
}

impl TextSpeakerAdversary {
    pub fn new(p: &Params, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            gru: Gru::new(&p.pp("gru"), cfg.text_dim, cfg.adversary_gru_dim)?,
            gate: GradientReversal::new(cfg.grl_scale),
            fc: Linear::new(&p.pp("fc"), cfg.adversary_gru_dim, cfg.n_speakers)?,
        })
    }

    pub fn logits(&self, repr: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        let summary = self.gru.final_state(repr, lengths)?;
        Ok(self.fc.forward(&self.gate.forward(&summary)?)?)
    }

    /// Mean negative log-likelihood of the true speakers.
    pub fn loss(&self, repr: &Tensor, lengths: &[usize], speakers: &[usize]) -> Result<Tensor> {
        let logits = self.logits(repr, lengths)?;
        check_labels(speakers, logits.dims()[1])?;
        Ok(cross_entropy(&logits, speakers)?)
    }
}

pub(crate) fn check_labels(labels: &[usize], count: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= count) {
        Some(&label) => Err(Error::LabelOutOfRange { label, count }),
        None => Ok(()),
    }
}

/// Two-layer per-position token classifier.
#[derive(Debug, Clone)]
pub struct ContentClassifier {
    fc1: Linear,
    fc2: Linear,
}

impl ContentClassifier {
    pub fn new(p: &Params, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&p.pp("fc1"), cfg.text_dim, cfg.text_dim)?,
            fc2: Linear::new(&p.pp("fc2"), cfg.text_dim, cfg.vocab_size)?,
        })
    }

    pub fn logits(&self, repr: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(repr)?.relu()?)?)
    }

    /// Negative log-likelihood summed over positions, averaged over the batch.
    pub fn loss(&self, repr: &Tensor, tokens: &TokenBatch, token_lists: &[&[u32]]) -> Result<Tensor> {
        let (b, c, _) = repr.dims3()?;
        if b != tokens.batch_size() || c != tokens.max_len() {
            return Err(Error::Shape(format!(
                "representation has {b}x{c} rows, tokens {}x{}",
                tokens.batch_size(),
                tokens.max_len()
            )));
        }
        content_loss_from_logits(&self.logits(repr)?, token_lists, &tokens.key_mask)
    }
}

/// Content loss given per-position logits `[B, C, V]`.
pub fn content_loss_from_logits(
    logits: &Tensor,
    token_lists: &[&[u32]],
    key_mask: &Tensor,
) -> Result<Tensor> {
    let (b, c, v) = logits.dims3()?;
    if token_lists.len() != b {
        return Err(Error::Shape(format!("{} token lists for batch {b}", token_lists.len())));
    }
    let mut labels = vec![0usize; b * c];
    for (i, toks) in token_lists.iter().enumerate() {
        if toks.len() > c {
            return Err(Error::Shape(format!("{} tokens but {c} positions", toks.len())));
        }
        for (j, &t) in toks.iter().enumerate() {
            labels[i * c + j] = t as usize;
        }
    }
    check_labels(&labels, v)?;
    let nll = nll_per_row(&logits.reshape((b * c, v))?, &labels)?.reshape((b, c))?;
    Ok((nll * key_mask)?.sum_all()?.affine(1.0 / b as f64, 0.0)?)
}

/// Predicted per-token frame counts, clamped to be nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationPrediction {
    pub predicted: Vec<f64>,
}

impl DurationPrediction {
    /// Rounded to the nearest integer, at least one frame per token.
    pub fn to_frames(&self) -> Vec<u32> {
        self.predicted
            .iter()
            .map(|d| (d.round() as u32).max(1))
            .collect()
    }
}

/// Convolutional duration predictor that also sees the emotion embedding.
#[derive(Debug, Clone)]
pub struct DurationPredictor {
    emotion_proj: Linear,
    conv1: Conv1d,
    norm1: LayerNorm,
    conv2: Conv1d,
    norm2: LayerNorm,
    out: Linear,
    log_domain: bool,
}

impl DurationPredictor {
    pub fn new(p: &Params, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.duration_hidden;
        Ok(Self {
            emotion_proj: Linear::new(&p.pp("emotion_proj"), cfg.emotion_dim, cfg.text_dim)?,
            conv1: Conv1d::new(&p.pp("conv1"), cfg.text_dim, h, 3)?,
            norm1: LayerNorm::new(&p.pp("norm1"), h)?,
            conv2: Conv1d::new(&p.pp("conv2"), h, h, 3)?,
            norm2: LayerNorm::new(&p.pp("norm2"), h)?,
            out: Linear::new(&p.pp("out"), h, 1)?,
            log_domain: cfg.log_duration,
        })
    }

    /// Raw outputs `[B, C]` in the training domain. The representation is
    /// detached so duration errors do not shape the text encoder.
    pub fn forward(&self, repr: &Tensor, emotion: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let x = repr
            .detach()
            .broadcast_add(&self.emotion_proj.forward(emotion)?.unsqueeze(1)?)?;
        let h = self.norm1.forward(&self.conv1.forward(&x, mask)?.relu()?)?;
        let h = self.norm2.forward(&self.conv2.forward(&h, mask)?.relu()?)?;
        Ok(self.out.forward(&h)?.squeeze(2)?.broadcast_mul(&mask.squeeze(2)?)?)
    }

    /// Ground-truth frame counts mapped into the training domain.
    pub fn target(&self, durations: &[Vec<u32>], c: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
        let mut v = vec![0f64; durations.len() * c];
        for (b, ds) in durations.iter().enumerate() {
            for (j, &d) in ds.iter().enumerate() {
                v[b * c + j] = if self.log_domain { (1.0 + d as f64).ln() } else { d as f64 };
            }
        }
        Ok(Tensor::from_vec(v, (durations.len(), c), dev)?.to_dtype(dtype)?)
    }

    /// Frame-domain predictions for each sequence.
    pub fn predict(&self, repr: &Tensor, emotion: &Tensor, tokens: &TokenBatch) -> Result<Vec<DurationPrediction>> {
        let raw = self
            .forward(repr, emotion, &tokens.mask)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;
        Ok(raw
            .into_iter()
            .zip(&tokens.lengths)
            .map(|(row, &len)| DurationPrediction {
                predicted: row[..len]
                    .iter()
                    .map(|&x| if self.log_domain { x.exp() - 1.0 } else { x }.max(0.0))
                    .collect(),
            })
            .collect())
    }
}

/// Mean squared error over valid tokens; `key_mask: [B, C]`.
pub fn duration_loss(predicted: &Tensor, target: &Tensor, key_mask: &Tensor) -> Result<Tensor> {
    masked_mse(predicted, target, key_mask)
}

pub(crate) fn masked_mse(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let sq = (a - b)?.sqr()?.broadcast_mul(mask)?;
    let per_elem = a.elem_count() as f64 / mask.elem_count() as f64;
    let denom = crate::nn::scalar(&mask.sum_all()?)? * per_elem;
    Ok((sq.sum_all()? / denom.max(1.0))?)
}

/// Repeats row `j` of `repr` `durations[j]` times. Returns the expanded
/// `[B, T, d]` tensor (zero beyond each sequence) and frame counts.
pub fn length_regulate(repr: &Tensor, durations: &[Vec<u32>]) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, d) = repr.dims3()?;
    if durations.len() != b {
        return Err(Error::Shape(format!("{} duration lists for batch {b}", durations.len())));
    }
    let mut frames = Vec::with_capacity(b);
    for ds in durations {
        if ds.len() > c {
            return Err(Error::Duration(format!("{} durations for {c} positions", ds.len())));
        }
        if ds.iter().any(|&x| x == 0) {
            return Err(Error::Duration("durations must be positive".into()));
        }
        frames.push(ds.iter().map(|&x| x as usize).sum::<usize>());
    }
    let t = frames.iter().copied().max().unwrap_or(0);
    let mut index = vec![0u32; b * t];
    for (i, ds) in durations.iter().enumerate() {
        let mut pos = 0;
        for (j, &dur) in ds.iter().enumerate() {
            for _ in 0..dur {
                index[i * t + pos] = (i * c + j) as u32;
                pos += 1;
            }
        }
    }
    let index = Tensor::from_vec(index, b * t, repr.device())?;
    let expanded = repr
        .reshape((b * c, d))?
        .index_select(&index, 0)?
        .reshape((b, t, d))?;
    let mask = sequence_mask(&frames, t, repr.dtype(), repr.device())?.unsqueeze(2)?;
    Ok((expanded.broadcast_mul(&mask)?, frames))
}

/// Single-sequence form: `[C, d]` to `[sum(durations), d]`.
pub fn length_regulate_one(repr: &Tensor, durations: &[u32]) -> Result<Tensor> {
    let (c, _) = repr.dims2()?;
    if durations.len() != c {
        return Err(Error::Duration(format!("{} durations for {c} rows", durations.len())));
    }
    let (out, _) = length_regulate(&repr.unsqueeze(0)?, &[durations.to_vec()])?;
    Ok(out.squeeze(0)?)
}

/// Convolution in, FFT blocks with conditional layer norm, convolution out
/// to mel bands.
#[derive(Debug, Clone)]
pub struct EmotionalAdaptor {
    dim: usize,
    input: Conv1d,
    blocks: Vec<FftBlock>,
    output: Conv1d,
}

impl EmotionalAdaptor {
    pub fn new(p: &Params, cfg: &ModelConfig) -> Result<Self> {
        let a = cfg.adaptor_dim;
        let blocks = (0..cfg.adaptor_blocks)
            .map(|i| {
                FftBlock::new(&p.pp(format!("block{i}")), a, cfg.adaptor_heads, 2 * a, Some(cfg.emotion_dim))
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            dim: a,
            input: Conv1d::new(&p.pp("input"), cfg.text_dim, a, 3)?,
            blocks,
            output: Conv1d::new(&p.pp("output"), a, cfg.n_bands, 1)?,
        })
    }

    /// `expanded: [B, T, d]`, `emotion: [B, E]`, `frame_key_mask: [B, T]`.
    pub fn forward(&self, expanded: &Tensor, emotion: &Tensor, frame_key_mask: &Tensor) -> Result<Tensor> {
        let mask = frame_key_mask.unsqueeze(2)?;
        let t = expanded.dim(1)?;
        let x = self.input.forward(expanded, &mask)?;
        let pos = sinusoidal_positions(t, self.dim, x.dtype(), x.device())?;
        let mut x = x.broadcast_add(&pos.unsqueeze(0)?)?.broadcast_mul(&mask)?;
        for block in &self.blocks {
            x = block.forward(&x, &mask, frame_key_mask, Some(emotion))?;
        }
        Ok(self.output.forward(&x, &mask)?)
    }
}

/// Maps expanded linguistic frames to the prior mean. The ablated variant
/// is a plain frame-wise projection that ignores the emotion.
#[derive(Debug, Clone)]
pub enum PriorHead {
    Adaptor(EmotionalAdaptor),
    Projection(Conv1d),
}

impl PriorHead {
    pub fn forward(&self, expanded: &Tensor, emotion: &Tensor, frame_key_mask: &Tensor) -> Result<Tensor> {
        match self {
            PriorHead::Adaptor(a) => a.forward(expanded, emotion, frame_key_mask),
            PriorHead::Projection(p) => Ok(p.forward(expanded, &frame_key_mask.unsqueeze(2)?)?),
        }
    }
}

/// Mean squared error between the prior mean and the target mel over
/// valid frames; `frame_key_mask: [B, T]`.
pub fn prior_mel_loss(mu: &Tensor, mel: &Tensor, frame_key_mask: &Tensor) -> Result<Tensor> {
    masked_mse(mu, mel, &frame_key_mask.unsqueeze(2)?)
}

/// Per-term losses of the prior text encoder.
#[derive(Debug, Clone)]
pub struct PriorLosses {
    pub adversarial: Tensor,
    pub content: Tensor,
    pub duration: Tensor,
    pub mel: Tensor,
}

/// Outputs of a teacher-forced prior pass.
#[derive(Debug, Clone)]
pub struct PriorOutput {
    pub repr: Tensor,
    /// `[B, T, F]`
    pub mu: Tensor,
    pub frames: Vec<usize>,
    /// `[B, T]`
    pub frame_mask: Tensor,
    pub losses: PriorLosses,
}

/// All prior text encoder components.
#[derive(Debug, Clone)]
pub struct TextPrior {
    pub encoder: TextEncoder,
    pub adversary: TextSpeakerAdversary,
    pub content: ContentClassifier,
    pub duration: DurationPredictor,
    pub head: PriorHead,
}

impl TextPrior {
    pub fn new(p: &Params, cfg: &ModelConfig, ablations: &Ablations) -> Result<Self> {
        let head = if ablations.no_emotional_adaptor {
            PriorHead::Projection(Conv1d::new(&p.pp("prior_proj"), cfg.text_dim, cfg.n_bands, 1)?)
        } else {
            PriorHead::Adaptor(EmotionalAdaptor::new(&p.pp("adaptor"), cfg)?)
        };
        Ok(Self {
            encoder: TextEncoder::new(&p.pp("encoder"), cfg)?,
            adversary: TextSpeakerAdversary::new(&p.pp("adversary"), cfg)?,
            content: ContentClassifier::new(&p.pp("content"), cfg)?,
            duration: DurationPredictor::new(&p.pp("duration"), cfg)?,
            head,
        })
    }

    /// Teacher-forced pass with ground-truth durations. `mel: [B, T, F]`
    /// padded to the longest utterance.
    pub fn forward_train(
        &self,
        tokens: &TokenBatch,
        token_lists: &[&[u32]],
        durations: &[Vec<u32>],
        speakers: &[usize],
        emotion: &Tensor,
        mel: &Tensor,
    ) -> Result<PriorOutput> {
        let repr = self.encoder.forward(tokens)?;
        let adversarial = self.adversary.loss(&repr, &tokens.lengths, speakers)?;
        let content = self.content.loss(&repr, tokens, token_lists)?;
        let pred = self.duration.forward(&repr, emotion, &tokens.mask)?;
        let target = self
            .duration
            .target(durations, tokens.max_len(), repr.dtype(), repr.device())?;
        let duration = duration_loss(&pred, &target, &tokens.key_mask)?;
        let (expanded, frames) = length_regulate(&repr, durations)?;
        let t = expanded.dim(1)?;
        if mel.dim(1)? != t {
            return Err(Error::Shape(format!("mel has {} frames, durations give {t}", mel.dim(1)?)));
        }
        let frame_mask = sequence_mask(&frames, t, repr.dtype(), repr.device())?;
        let mu = self.head.forward(&expanded, emotion, &frame_mask)?;
        let mel_loss = prior_mel_loss(&mu, mel, &frame_mask)?;
        Ok(PriorOutput {
            repr,
            mu,
            frames,
            frame_mask,
            losses: PriorLosses {
                adversarial,
                content,
                duration,
                mel: mel_loss,
            },
        })
    }

    /// Inference: predicted durations, then the prior mean. Returns
    /// `(mu [1, T, F], durations)`.
    pub fn infer(&self, tokens: &[u32], emotion: &Tensor) -> Result<(Tensor, Vec<u32>)> {
        let batch = TokenBatch::new(&[tokens], self.encoder.vocab(), emotion.dtype(), emotion.device())?;
        let repr = self.encoder.forward(&batch)?;
        let durations = self.duration.predict(&repr, emotion, &batch)?.remove(0).to_frames();
        let (expanded, frames) = length_regulate(&repr, &[durations.clone()])?;
        let mask = sequence_mask(&frames, frames[0], repr.dtype(), repr.device())?;
        let mu = self.head.forward(&expanded, emotion, &mask)?;
        Ok((mu, durations))
    }
}

/// The normalisation sub-step of conditional layer norm, exposed for checks.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    Ok(layer_normalize(x, LN_EPS)?)
}
