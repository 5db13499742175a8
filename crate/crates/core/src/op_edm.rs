//! Emotion disentangling: a reference encoder that maps a mel to an
//! emotion embedding, trained with an emotion classifier, a speaker
//! classifier behind gradient reversal, and an orthogonal projection loss
//! over pairwise cosine similarities.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, scalar, sequence_mask, GradientReversal, Gru, Linear, Params, StridedConv2d};
use crate::text_prior::check_labels;

/// Weights of the speaker-adversarial, emotion and projection terms.
pub const EDM_WEIGHTS: [f64; 3] = [0.2, 0.8, 1.0];

/// `0.2 * sadv + 0.8 * emo + opl`.
pub fn edm_loss(sadv: f64, emo: f64, opl: f64) -> f64 {
    EDM_WEIGHTS[0] * sadv + EDM_WEIGHTS[1] * emo + EDM_WEIGHTS[2] * opl
}

/// Ordered emotion category names. The last-resort neutral category of the
/// non-emotional speakers is always present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionCategorySet {
    names: Vec<String>,
}

impl EmotionCategorySet {
    pub const NEUTRAL_N: &'static str = "neutral_N";

    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Invalid(format!(
                "an emotion category set needs at least 2 categories, got {}",
                names.len()
            )));
        }
        if !names.iter().any(|n| n == Self::NEUTRAL_N) {
            return Err(Error::Invalid(format!("emotion categories must include {}", Self::NEUTRAL_N)));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Invalid(format!("duplicate emotion category {n}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn neutral_n(&self) -> usize {
        self.index_of(Self::NEUTRAL_N).expect("checked in new")
    }
}

/// Mel references `[B, T, F]` padded to the longest, with frame counts.
#[derive(Debug, Clone)]
pub struct ReferenceBatch {
    pub mels: Tensor,
    pub lengths: Vec<usize>,
}

impl ReferenceBatch {
    /// Pads row-major `[T_i, F]` mels into one batch.
    pub fn from_mels(mels: &[&crate::corpus::MelSpectrum], dtype: DType, dev: &Device) -> Result<Self> {
        let first = mels.first().ok_or_else(|| Error::Invalid("empty reference batch".into()))?;
        let f = first.bands();
        let t = mels.iter().map(|m| m.frames()).max().unwrap_or(0);
        let mut v = vec![0f32; mels.len() * t * f];
        for (b, m) in mels.iter().enumerate() {
            if m.frames() == 0 {
                return Err(Error::Invalid("reference mel has no frames".into()));
            }
            if m.bands() != f {
                return Err(Error::Shape(format!("reference widths {} and {f}", m.bands())));
            }
            v[b * t * f..b * t * f + m.frames() * f].copy_from_slice(m.values());
        }
        Ok(Self {
            mels: Tensor::from_vec(v, (mels.len(), t, f), dev)?.to_dtype(dtype)?,
            lengths: mels.iter().map(|m| m.frames()).collect(),
        })
    }

    /// Wraps an already padded tensor.
    pub fn new(mels: Tensor, lengths: Vec<usize>) -> Result<Self> {
        let (b, t, _) = mels.dims3()?;
        if lengths.len() != b {
            return Err(Error::Shape(format!("{} lengths for batch {b}", lengths.len())));
        }
        if lengths.iter().any(|&l| l == 0 || l > t) {
            return Err(Error::Invalid("reference lengths must lie in 1..=T".into()));
        }
        Ok(Self { mels, lengths })
    }
}

/// Strided 2-D convolutions over (time, band), a GRU over the downsampled
/// time axis, then a linear projection with tanh.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    n_bands: usize,
    convs: Vec<StridedConv2d>,
    gru: Gru,
    proj: Linear,
}

fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

impl ReferenceEncoder {
    pub fn new(p: &Params, cfg: &ModelConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = 1;
        let mut f = cfg.n_bands;
        for (i, &c) in cfg.ref_channels.iter().enumerate() {
            convs.push(StridedConv2d::new(&p.pp(format!("conv{i}")), cin, c)?);
            cin = c;
            f = halve(f);
        }
        Ok(Self {
            n_bands: cfg.n_bands,
            convs,
            gru: Gru::new(&p.pp("gru"), cin * f, cfg.ref_gru_dim)?,
            proj: Linear::new(&p.pp("proj"), cfg.ref_gru_dim, cfg.emotion_dim)?,
        })
    }

    /// Embeddings `[B, E]`.
    pub fn forward(&self, refs: &ReferenceBatch) -> Result<Tensor> {
        let (b, t, f) = refs.mels.dims3()?;
        if f != self.n_bands {
            return Err(Error::Shape(format!(
                "reference mel has {f} bands, the encoder expects {}",
                self.n_bands
            )));
        }
        if t == 0 || refs.lengths.iter().any(|&l| l == 0) {
            return Err(Error::Invalid("reference mel has no frames".into()));
        }
        let mut lengths = refs.lengths.clone();
        let mask = sequence_mask(&lengths, t, refs.mels.dtype(), refs.mels.device())?;
        let mut x = refs.mels.broadcast_mul(&mask.unsqueeze(2)?)?.unsqueeze(1)?;
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?;
            lengths.iter_mut().for_each(|l| *l = halve(*l));
            let t = x.dim(2)?;
            let mask = sequence_mask(&lengths, t, x.dtype(), x.device())?;
            x = x.broadcast_mul(&mask.reshape((b, 1, t, 1))?)?;
        }
        let (_, c, t, f) = x.dims4()?;
        let seq = x.permute((0, 2, 1, 3))?.reshape((b, t, c * f))?;
        let h = self.gru.final_state(&seq, &lengths)?;
        Ok(self.proj.forward(&h)?.tanh()?)
    }

    /// Single unpadded mel `[T, F]` to `[1, E]`.
    pub fn encode(&self, mel: &crate::corpus::MelSpectrum, dtype: DType, dev: &Device) -> Result<Tensor> {
        self.forward(&ReferenceBatch::from_mels(&[mel], dtype, dev)?)
    }
}

/// Linear classifier over embeddings; the speaker variant sits behind a
/// gradient-reversal gate.
#[derive(Debug, Clone)]
pub struct EmbeddingClassifier {
    pub gate: Option<GradientReversal>,
    fc: Linear,
}

impl EmbeddingClassifier {
    pub fn new(p: &Params, in_dim: usize, classes: usize, gate: Option<GradientReversal>) -> Result<Self> {
        Ok(Self {
            gate,
            fc: Linear::new(p, in_dim, classes)?,
        })
    }

    pub fn logits(&self, e: &Tensor) -> Result<Tensor> {
        let x = match &self.gate {
            Some(g) => g.forward(e)?,
            None => e.clone(),
        };
        Ok(self.fc.forward(&x)?)
    }

    /// Mean negative log-likelihood of `labels`.
    pub fn loss(&self, e: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let logits = self.logits(e)?;
        check_labels(labels, logits.dim(1)?)?;
        Ok(cross_entropy(&logits, labels)?)
    }
}

/// Pair statistics behind the projection loss.
#[derive(Debug, Clone)]
pub struct OplTerms {
    /// Mean cosine over same-label pairs, if any exist.
    pub same: Option<Tensor>,
    /// Mean cosine over different-label pairs, if any exist.
    pub diff: Option<Tensor>,
    pub loss: Tensor,
}

/// `(1 - E_same) + 0.5 * |E_diff|` over unordered pairs `i != j` of the
/// batch. Terms without any contributing pair are dropped.
pub fn orthogonal_projection_terms(e: &Tensor, labels: &[usize]) -> Result<OplTerms> {
    let (n, _) = e.dims2()?;
    if n < 2 {
        return Err(Error::Invalid(format!("projection loss needs a batch of at least 2, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    let norms = e.sqr()?.sum_keepdim(1)?.sqrt()?;
    let nv = norms.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(i) = nv.iter().position(|&x| x == 0.0 || !x.is_finite()) {
        return Err(Error::ZeroNorm(i));
    }
    let u = e.broadcast_div(&norms)?;
    let cos = u.matmul(&u.t()?)?;
    let mut same = vec![0f64; n * n];
    let mut diff = vec![0f64; n * n];
    let (mut n_same, mut n_diff) = (0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                same[i * n + j] = 1.0;
                n_same += 1;
            } else {
                diff[i * n + j] = 1.0;
                n_diff += 1;
            }
        }
    }
    let pair_mean = |sel: Vec<f64>, count: usize| -> Result<Option<Tensor>> {
        if count == 0 {
            return Ok(None);
        }
        let sel = Tensor::from_vec(sel, (n, n), e.device())?.to_dtype(e.dtype())?;
        Ok(Some(((&cos * sel)?.sum_all()? / count as f64)?))
    };
    let same = pair_mean(same, n_same)?;
    let diff = pair_mean(diff, n_diff)?;
    let mut loss = Tensor::zeros((), e.dtype(), e.device())?;
    if let Some(s) = &same {
        loss = (loss + s.affine(-1.0, 1.0)?)?;
    }
    if let Some(d) = &diff {
        loss = (loss + (d.abs()? * 0.5)?)?;
    }
    Ok(OplTerms { same, diff, loss })
}

pub fn orthogonal_projection_loss(e: &Tensor, labels: &[usize]) -> Result<Tensor> {
    Ok(orthogonal_projection_terms(e, labels)?.loss)
}

/// Per-term disentangling losses.
#[derive(Debug, Clone)]
pub struct EdmLosses {
    pub speaker_adversarial: Tensor,
    pub emotion: Tensor,
    /// `None` when the projection loss is switched off.
    pub projection: Option<Tensor>,
}

/// Reference encoder plus its two heads.
#[derive(Debug, Clone)]
pub struct EmotionDisentangler {
    pub encoder: ReferenceEncoder,
    pub speaker_head: EmbeddingClassifier,
    pub emotion_head: EmbeddingClassifier,
    pub use_projection_loss: bool,
}

impl EmotionDisentangler {
    pub fn new(p: &Params, cfg: &ModelConfig, use_projection_loss: bool) -> Result<Self> {
        Ok(Self {
            encoder: ReferenceEncoder::new(&p.pp("encoder"), cfg)?,
            speaker_head: EmbeddingClassifier::new(
                &p.pp("speaker_head"),
                cfg.emotion_dim,
                cfg.n_speakers,
                Some(GradientReversal::new(cfg.grl_scale)),
            )?,
            emotion_head: EmbeddingClassifier::new(&p.pp("emotion_head"), cfg.emotion_dim, cfg.n_emotions, None)?,
            use_projection_loss,
        })
    }

    /// Embeddings and the three losses for a labelled batch.
    pub fn forward_train(
        &self,
        refs: &ReferenceBatch,
        speakers: &[usize],
        emotions: &[usize],
    ) -> Result<(Tensor, EdmLosses)> {
        let e = self.encoder.forward(refs)?;
        let speaker_adversarial = self.speaker_head.loss(&e, speakers)?;
        let emotion = self.emotion_head.loss(&e, emotions)?;
        let projection = if self.use_projection_loss {
            Some(orthogonal_projection_loss(&e, emotions)?)
        } else {
            None
        };
        Ok((
            e,
            EdmLosses {
                speaker_adversarial,
                emotion,
                projection,
            },
        ))
    }
}

/// One line of an embedding dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub utterance_id: String,
    pub speaker_id: usize,
    pub emotion_id: usize,
    pub embedding: Vec<f32>,
}

pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::ManifestRecord {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Mean cosine similarity terms as plain numbers, for reports.
pub fn opl_values(e: &Tensor, labels: &[usize]) -> Result<(Option<f64>, Option<f64>, f64)> {
    let t = orthogonal_projection_terms(e, labels)?;
    let same = t.same.as_ref().map(scalar).transpose()?;
    let diff = t.diff.as_ref().map(scalar).transpose()?;
    Ok((same, diff, scalar(&t.loss)?))
}
