use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Conv2d, Embedding, GroupNorm, Linear, Params};

use super::ScoreModel;

/// One trainable vector per speaker.
#[derive(Debug, Clone)]
pub struct SpeakerTable {
    table: Embedding,
}

impl SpeakerTable {
    pub fn new(p: &Params, n_speakers: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: Embedding::new(p, n_speakers, dim)?,
        })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// `[B, dim]` rows for `ids`.
    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.len()) {
            return Err(Error::UnknownSpeaker { id, count: self.len() });
        }
        let idx = Tensor::from_vec(ids.iter().map(|&i| i as u32).collect(), ids.len(), self.table.weight().device())?;
        Ok(self.table.forward(&idx)?)
    }
}

fn groups_for(channels: usize) -> usize {
    [8, 4, 2].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

/// Per-channel bias from a conditioning vector.
#[derive(Debug, Clone)]
struct CondProj(Linear);

impl CondProj {
    fn forward(&self, c: &Tensor) -> Result<Tensor> {
        let (b, _) = c.dims2()?;
        let y = self.0.forward(&candle_nn::ops::silu(c)?)?;
        let ch = self.0.out_dim();
        Ok(y.reshape((b, ch, 1, 1))?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    time: CondProj,
    speaker: Option<CondProj>,
    emotion: Option<CondProj>,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(p: &Params, cin: usize, cout: usize, time_dim: usize, cond: Option<(usize, usize)>) -> Result<Self> {
        let (speaker, emotion) = match cond {
            Some((s, e)) => (
                Some(CondProj(Linear::new(&p.pp("speaker_proj"), s, cout)?)),
                Some(CondProj(Linear::new(&p.pp("emotion_proj"), e, cout)?)),
            ),
            None => (None, None),
        };
        Ok(Self {
            conv1: Conv2d::new(&p.pp("conv1"), cin, cout, 3)?,
            norm1: GroupNorm::new(&p.pp("norm1"), groups_for(cout), cout)?,
            conv2: Conv2d::new(&p.pp("conv2"), cout, cout, 3)?,
            norm2: GroupNorm::new(&p.pp("norm2"), groups_for(cout), cout)?,
            time: CondProj(Linear::new(&p.pp("time_proj"), time_dim, cout)?),
            speaker,
            emotion,
            skip: if cin == cout {
                None
            } else {
                Some(Conv2d::new(&p.pp("skip"), cin, cout, 1)?)
            },
        })
    }

    /// `x: [B, C, F, T]`, `mask: [B, 1, 1, T]`.
    fn forward(&self, x: &Tensor, mask: &Tensor, cond: &BlockConditioning) -> Result<Tensor> {
        let h = self.conv1.forward(&x.broadcast_mul(mask)?)?;
        let mut h = candle_nn::ops::silu(&self.norm1.forward(&h)?)?;
        h = h.broadcast_add(&self.time.forward(&cond.time)?)?;
        if let (Some(proj), Some(spk)) = (&self.speaker, &cond.speaker) {
            h = h.broadcast_add(&proj.forward(spk)?)?;
        }
        if let (Some(proj), Some(e)) = (&self.emotion, &cond.emotion) {
            h = h.broadcast_add(&proj.forward(e)?)?;
        }
        let h = self.conv2.forward(&h.broadcast_mul(mask)?)?;
        let h = candle_nn::ops::silu(&self.norm2.forward(&h)?)?;
        let res = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + res)?.broadcast_mul(mask)?)
    }
}

struct BlockConditioning {
    time: Tensor,
    speaker: Option<Tensor>,
    emotion: Option<Tensor>,
}

/// U-shaped convolutional score network over `(band, frame)` images.
///
/// Speaker and emotion vectors are projected and added inside every
/// residual block next to the time embedding. With per-block conditioning
/// off they are instead projected to one extra input channel.
#[derive(Debug, Clone)]
pub struct ScoreNetwork {
    n_bands: usize,
    time_dim: usize,
    time_mlp1: Linear,
    time_mlp2: Linear,
    input_cond: Option<Linear>,
    downs: Vec<ResBlock>,
    mids: Vec<ResBlock>,
    ups: Vec<ResBlock>,
    out: Conv2d,
}

/// Network outputs together with the output of each residual block.
pub struct ProbedScore {
    pub score: Tensor,
    pub block_outputs: Vec<Tensor>,
}

impl ScoreNetwork {
    pub fn new(p: &Params, cfg: &ModelConfig, per_block_conditioning: bool) -> Result<Self> {
        let td = cfg.time_embed_dim;
        let widths: Vec<usize> = cfg.unet_mults.iter().map(|m| m * cfg.unet_base).collect();
        let cond = per_block_conditioning.then_some((cfg.speaker_dim, cfg.emotion_dim));
        let in_ch = if per_block_conditioning { 2 } else { 3 };
        let mut downs = Vec::new();
        let mut prev = in_ch;
        for (i, &w) in widths.iter().enumerate() {
            downs.push(ResBlock::new(&p.pp(format!("down{i}")), prev, w, td, cond)?);
            prev = w;
        }
        let last = *widths.last().expect("validated nonempty");
        let mids = (0..2)
            .map(|i| ResBlock::new(&p.pp(format!("mid{i}")), last, last, td, cond))
            .collect::<Result<Vec<_>>>()?;
        let mut ups = Vec::new();
        for i in (0..widths.len() - 1).rev() {
            ups.push(ResBlock::new(&p.pp(format!("up{i}")), prev + widths[i], widths[i], td, cond)?);
            prev = widths[i];
        }
        let input_cond = if per_block_conditioning {
            None
        } else {
            Some(Linear::new(&p.pp("input_cond"), cfg.speaker_dim + cfg.emotion_dim, cfg.n_bands)?)
        };
        Ok(Self {
            n_bands: cfg.n_bands,
            time_dim: td,
            time_mlp1: Linear::new(&p.pp("time_mlp1"), td, 4 * td)?,
            time_mlp2: Linear::new(&p.pp("time_mlp2"), 4 * td, td)?,
            input_cond,
            downs,
            mids,
            ups,
            out: Conv2d::new(&p.pp("out"), widths[0], 1, 1)?,
        })
    }

    pub fn per_block_conditioning(&self) -> bool {
        self.input_cond.is_none()
    }

    fn stride(&self) -> usize {
        1 << (self.downs.len() - 1)
    }

    /// Score estimate `[B, T, F]` for states `x` and prior means `mu` of the
    /// same shape; `speaker: [B, S]`, `emotion: [B, E]`, `mask: [B, T]`.
    pub fn forward(
        &self,
        x: &Tensor,
        mu: &Tensor,
        t: &[f64],
        speaker: &Tensor,
        emotion: &Tensor,
        mask: &Tensor,
    ) -> Result<Tensor> {
        Ok(self.forward_probed(x, mu, t, speaker, emotion, mask)?.score)
    }

    pub fn forward_probed(
        &self,
        x: &Tensor,
        mu: &Tensor,
        t: &[f64],
        speaker: &Tensor,
        emotion: &Tensor,
        mask: &Tensor,
    ) -> Result<ProbedScore> {
        let (b, frames, bands) = x.dims3()?;
        if mu.dims() != x.dims() {
            return Err(Error::Shape(format!("state {:?} vs prior mean {:?}", x.dims(), mu.dims())));
        }
        if bands != self.n_bands {
            return Err(Error::Shape(format!("{bands} bands, the network expects {}", self.n_bands)));
        }
        if t.len() != b || speaker.dim(0)? != b || emotion.dim(0)? != b || mask.dims() != [b, frames] {
            return Err(Error::Shape("conditioning batch does not match the state batch".into()));
        }
        let s = self.stride();
        let pad_t = frames.div_ceil(s) * s - frames;
        let pad_f = bands.div_ceil(s) * s - bands;
        let to_image = |y: &Tensor| -> Result<Tensor> {
            Ok(y.transpose(1, 2)?
                .pad_with_zeros(1, 0, pad_f)?
                .pad_with_zeros(2, 0, pad_t)?
                .unsqueeze(1)?)
        };
        let mut mask = mask.pad_with_zeros(1, 0, pad_t)?;
        let (fp, tp) = (bands + pad_f, frames + pad_t);

        let tv = Tensor::from_vec(t.to_vec(), b, x.device())?.to_dtype(x.dtype())?;
        let temb = timestep_embedding(&tv, self.time_dim, 1000.0)?;
        let temb = self.time_mlp2.forward(&candle_nn::ops::silu(&self.time_mlp1.forward(&temb)?)?)?;
        let cond = BlockConditioning {
            time: temb,
            speaker: self.per_block_conditioning().then(|| speaker.clone()),
            emotion: self.per_block_conditioning().then(|| emotion.clone()),
        };

        let mut channels = vec![to_image(x)?, to_image(mu)?];
        if let Some(proj) = &self.input_cond {
            let c = proj.forward(&Tensor::cat(&[speaker, emotion], 1)?)?;
            let c = c.pad_with_zeros(1, 0, pad_f)?.reshape((b, 1, fp, 1))?.broadcast_as((b, 1, fp, tp))?;
            channels.push(c.contiguous()?);
        }
        let mut h = Tensor::cat(&channels, 1)?;

        let image_mask = |m: &Tensor| -> Result<Tensor> {
            let w = m.dim(1)?;
            Ok(m.reshape((b, 1, 1, w))?)
        };
        let mut probes = Vec::new();
        let mut skips = Vec::new();
        let mut masks = Vec::new();
        for (i, block) in self.downs.iter().enumerate() {
            let m = image_mask(&mask)?;
            h = block.forward(&h, &m, &cond)?;
            probes.push(h.clone());
            if i + 1 < self.downs.len() {
                skips.push(h.clone());
                masks.push(mask.clone());
                h = h.avg_pool2d(2)?;
                let w = mask.dim(1)?;
                mask = mask.reshape((b, w / 2, 2))?.narrow(2, 0, 1)?.squeeze(2)?;
            }
        }
        let m = image_mask(&mask)?;
        for block in &self.mids {
            h = block.forward(&h, &m, &cond)?;
            probes.push(h.clone());
        }
        for block in &self.ups {
            let skip = skips.pop().expect("one skip per upsampling");
            mask = masks.pop().expect("one mask per upsampling");
            let (_, _, sh, sw) = skip.dims4()?;
            h = h.upsample_nearest2d(sh, sw)?;
            h = block.forward(&Tensor::cat(&[&h, &skip], 1)?, &image_mask(&mask)?, &cond)?;
            probes.push(h.clone());
        }
        let out = self.out.forward(&h)?.broadcast_mul(&image_mask(&mask)?)?;
        let score = out
            .squeeze(1)?
            .narrow(1, 0, bands)?
            .narrow(2, 0, frames)?
            .transpose(1, 2)?
            .contiguous()?;
        Ok(ProbedScore {
            score,
            block_outputs: probes,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.downs.len() + self.mids.len() + self.ups.len()
    }
}

/// The score network bound to fixed speaker and emotion conditioning.
pub struct ConditionedScore<'a> {
    pub net: &'a ScoreNetwork,
    pub speaker: &'a Tensor,
    pub emotion: &'a Tensor,
    pub mask: &'a Tensor,
}

impl ScoreModel for ConditionedScore<'_> {
    fn score(&self, x: &Tensor, mu: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.net.forward(x, mu, t, self.speaker, self.emotion, self.mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scalar, ParamStore};
    use candle_core::{DType, Device};

    fn tiny() -> ModelConfig {
        ModelConfig {
            precision: crate::config::Precision::F64,
            n_speakers: 3,
            n_bands: 8,
            unet_base: 4,
            speaker_dim: 5,
            emotion_dim: 6,
            time_embed_dim: 8,
            ..ModelConfig::default()
        }
    }

    struct Inputs {
        x: Tensor,
        mu: Tensor,
        spk: Tensor,
        e: Tensor,
        mask: Tensor,
    }

    fn inputs(b: usize, t: usize) -> Inputs {
        let d = &Device::Cpu;
        Inputs {
            x: crate::nn::test_randn(1., (b, t, 8)).unwrap(),
            mu: crate::nn::test_randn(1., (b, t, 8)).unwrap(),
            spk: crate::nn::test_randn(1., (b, 5)).unwrap(),
            e: crate::nn::test_randn(1., (b, 6)).unwrap(),
            mask: Tensor::ones((b, t), DType::F64, d).unwrap(),
        }
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
    }

    #[test]
    fn output_shape_matches_state() {
        let store = ParamStore::new(0, DType::F64);
        let net = ScoreNetwork::new(&store.root(), &tiny(), true).unwrap();
        for t in [8usize, 64, 13] {
            let i = inputs(2, t);
            let s = net.forward(&i.x, &i.mu, &[0.3, 0.9], &i.spk, &i.e, &i.mask).unwrap();
            assert_eq!(s.dims(), i.x.dims());
        }
    }

    #[test]
    fn zeroed_conditioning_projections_remove_dependence() {
        let store = ParamStore::new(0, DType::F64);
        let net = ScoreNetwork::new(&store.root(), &tiny(), true).unwrap();
        for (name, var) in store.vars() {
            if name.contains("speaker_proj") || name.contains("emotion_proj") {
                store.set(&name, &var.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
        let i = inputs(1, 8);
        let other = inputs(1, 8);
        let a = net.forward(&i.x, &i.mu, &[0.5], &i.spk, &i.e, &i.mask).unwrap();
        let b = net.forward(&i.x, &i.mu, &[0.5], &other.spk, &other.e, &i.mask).unwrap();
        assert_eq!(max_abs_diff(&a, &b), 0.0);
    }

    #[test]
    fn emotion_reaches_every_block() {
        let store = ParamStore::new(0, DType::F64);
        let net = ScoreNetwork::new(&store.root(), &tiny(), true).unwrap();
        let i = inputs(1, 16);
        let e2 = (&i.e + 1.0).unwrap();
        let a = net.forward_probed(&i.x, &i.mu, &[0.5], &i.spk, &i.e, &i.mask).unwrap();
        let b = net.forward_probed(&i.x, &i.mu, &[0.5], &i.spk, &e2, &i.mask).unwrap();
        assert_eq!(a.block_outputs.len(), net.n_blocks());
        for (x, y) in a.block_outputs.iter().zip(&b.block_outputs) {
            assert!(max_abs_diff(x, y) > 0.0);
        }
        // the first block's input carries no emotion without per-block conditioning
        let store = ParamStore::new(0, DType::F64);
        let plain = ScoreNetwork::new(&store.root(), &tiny(), false).unwrap();
        let a = plain.forward_probed(&i.x, &i.mu, &[0.5], &i.spk, &i.e, &i.mask).unwrap();
        let b = plain.forward_probed(&i.x, &i.mu, &[0.5], &i.spk, &e2, &i.mask).unwrap();
        assert!(max_abs_diff(&a.score, &b.score) > 0.0);
    }

    #[test]
    fn padded_frames_do_not_leak() {
        let store = ParamStore::new(0, DType::F64);
        let net = ScoreNetwork::new(&store.root(), &tiny(), true).unwrap();
        let i = inputs(1, 8);
        let mask = Tensor::new(&[[1f64, 1., 1., 1., 1., 1., 0., 0.]], &Device::Cpu).unwrap();
        let s = net.forward(&i.x, &i.mu, &[0.5], &i.spk, &i.e, &mask).unwrap();
        let tail = s.narrow(1, 6, 2).unwrap();
        assert_eq!(scalar(&tail.abs().unwrap().max_all().unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn unknown_speaker_is_rejected() {
        let store = ParamStore::new(0, DType::F64);
        let table = SpeakerTable::new(&store.root(), 3, 4).unwrap();
        assert_eq!(table.lookup(&[0, 2]).unwrap().dims(), &[2, 4]);
        assert!(matches!(table.lookup(&[3]).unwrap_err(), Error::UnknownSpeaker { id: 3, count: 3 }));
    }
}
