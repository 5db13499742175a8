use candle_core::{DType, Device, IndexOp, Result, Tensor, D};

use super::{Init, Params};

/// Affine map over the last dimension; weight stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Option<Tensor>,
}

impl Linear {
    pub fn new(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::with_init(p, in_dim, out_dim, Init::Uniform(bound), Some(Init::Uniform(bound)))
    }

    pub fn with_init(
        p: &Params,
        in_dim: usize,
        out_dim: usize,
        w_init: Init,
        b_init: Option<Init>,
    ) -> Result<Self> {
        let w = p.get((out_dim, in_dim), "weight", w_init)?;
        let b = match b_init {
            Some(init) => Some(p.get(out_dim, "bias", init)?),
            None => None,
        };
        Ok(Self { w, b })
    }

    pub fn out_dim(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().unwrap();
        let rows = x.elem_count() / in_dim.max(1);
        let y = x.reshape((rows, in_dim))?.matmul(&self.w.t()?)?;
        let y = match &self.b {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        y.reshape(out_dims)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    w: Tensor,
}

impl Embedding {
    pub fn new(p: &Params, n: usize, dim: usize) -> Result<Self> {
        let w = p.get((n, dim), "weight", Init::Normal(1.0 / (dim as f64).sqrt()))?;
        Ok(Self { w })
    }

    pub fn len(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `ids` is a u32 tensor of any shape; output appends the width.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut dims = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let rows = self.w.index_select(&flat, 0)?;
        dims.push(self.w.dims()[1]);
        rows.reshape(dims)
    }

    pub fn weight(&self) -> &Tensor {
        &self.w
    }
}

/// Same-padded 1-D convolution over the time axis of `[B, T, C]` inputs,
/// written as shifted views plus one matmul.
#[derive(Debug, Clone)]
pub struct Conv1d {
    kernel: usize,
    lin: Linear,
}

impl Conv1d {
    pub fn new(p: &Params, in_dim: usize, out_dim: usize, kernel: usize) -> Result<Self> {
        assert!(kernel % 2 == 1, "odd kernels only");
        Ok(Self {
            kernel,
            lin: Linear::new(p, kernel * in_dim, out_dim)?,
        })
    }

    /// `mask` is `[B, T, 1]`; padded frames are zeroed before and after.
    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let x = x.broadcast_mul(mask)?;
        let cols = if self.kernel == 1 {
            x
        } else {
            let t = x.dim(1)?;
            let half = self.kernel / 2;
            let xp = x.pad_with_zeros(1, half, half)?;
            let views = (0..self.kernel)
                .map(|i| xp.narrow(1, i, t))
                .collect::<Result<Vec<_>>>()?;
            Tensor::cat(&views, 2)?
        };
        self.lin.forward(&cols)?.broadcast_mul(mask)
    }
}

/// Same-padded stride-1 2-D convolution on `[B, C, H, W]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    kernel: usize,
    w: Tensor,
    b: Tensor,
}

impl Conv2d {
    pub fn new(p: &Params, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = in_ch * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            kernel,
            w: p.get((out_ch, fan_in), "weight", Init::Uniform(bound))?,
            b: p.get(out_ch, "bias", Init::Uniform(bound))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bs, c, h, w) = x.dims4()?;
        let cols = if self.kernel == 1 {
            x.transpose(0, 1)?.contiguous()?.reshape((c, bs * h * w))?
        } else {
            super::im2col::im2col(x, self.kernel)?
        };
        let cout = self.w.dim(0)?;
        let y = self.w.matmul(&cols)?.broadcast_add(&self.b.reshape((cout, 1))?)?;
        y.reshape((cout, bs, h, w))?.transpose(0, 1)?.contiguous()
    }
}

/// 3x3, stride 2, padding 1 convolution; halves both spatial extents (rounding up).
#[derive(Debug, Clone)]
pub struct StridedConv2d {
    w: Tensor,
    b: Tensor,
}

impl StridedConv2d {
    pub fn new(p: &Params, in_ch: usize, out_ch: usize) -> Result<Self> {
        let bound = 1.0 / ((in_ch * 9) as f64).sqrt();
        Ok(Self {
            w: p.get((out_ch, in_ch, 3, 3), "weight", Init::Uniform(bound))?,
            b: p.get(out_ch, "bias", Init::Uniform(bound))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // pad to even extents
        let (_, _, h, w) = x.dims4()?;
        let x = x.pad_with_zeros(2, 0, h % 2)?.pad_with_zeros(3, 0, w % 2)?;
        let y = x.conv2d(&self.w, 1, 2, 1, 1)?;
        let c = self.b.dim(0)?;
        y.broadcast_add(&self.b.reshape((1, c, 1, 1))?)
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Zero mean, unit variance over the last dimension (no affine).
pub fn layer_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    centered.broadcast_div(&(var + eps)?.sqrt()?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.get(dim, "gamma", Init::Const(1.0))?,
            beta: p.get(dim, "beta", Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_normalize(x, LN_EPS)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)
    }
}

/// Layer normalization whose scale and shift are affine functions of a
/// conditioning vector. Initialised to scale 1, shift 0.
#[derive(Debug, Clone)]
pub struct CondLayerNorm {
    scale: Linear,
    shift: Linear,
}

impl CondLayerNorm {
    pub fn new(p: &Params, dim: usize, cond_dim: usize) -> Result<Self> {
        Ok(Self {
            scale: Linear::with_init(&p.pp("scale"), cond_dim, dim, Init::Const(0.0), Some(Init::Const(1.0)))?,
            shift: Linear::with_init(&p.pp("shift"), cond_dim, dim, Init::Const(0.0), Some(Init::Const(0.0)))?,
        })
    }

    /// `x: [B, T, C]`, `cond: [B, E]`.
    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let scale = self.scale.forward(cond)?.unsqueeze(1)?;
        let shift = self.shift.forward(cond)?.unsqueeze(1)?;
        layer_normalize(x, LN_EPS)?
            .broadcast_mul(&scale)?
            .broadcast_add(&shift)
    }
}

#[derive(Debug, Clone)]
pub enum Norm {
    Plain(LayerNorm),
    Conditional(CondLayerNorm),
}

impl Norm {
    pub fn forward(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        match (self, cond) {
            (Norm::Plain(n), _) => n.forward(x),
            (Norm::Conditional(n), Some(c)) => n.forward(x, c),
            (Norm::Conditional(_), None) => {
                candle_core::bail!("conditional layer norm called without a condition")
            }
        }
    }
}

/// Group normalization on `[B, C, H, W]`.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

impl GroupNorm {
    pub fn new(p: &Params, groups: usize, channels: usize) -> Result<Self> {
        assert!(channels % groups == 0);
        Ok(Self {
            groups,
            gamma: p.get((1, channels, 1, 1), "gamma", Init::Const(1.0))?,
            beta: p.get((1, channels, 1, 1), "beta", Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        layer_normalize(&g, LN_EPS)?
            .reshape((b, c, h, w))?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)
    }
}

/// Single-layer GRU over `[B, T, in]` with PyTorch gate conventions.
#[derive(Debug, Clone)]
pub struct Gru {
    hidden: usize,
    ih: Linear,
    hh: Linear,
}

impl Gru {
    pub fn new(p: &Params, in_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            hidden,
            ih: Linear::new(&p.pp("ih"), in_dim, 3 * hidden)?,
            hh: Linear::new(&p.pp("hh"), hidden, 3 * hidden)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// All hidden states, `[B, T, H]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let gi = self.ih.forward(x)?;
        let hsz = self.hidden;
        let mut h = Tensor::zeros((b, hsz), x.dtype(), x.device())?;
        let mut states = Vec::with_capacity(t);
        for step in 0..t {
            let gi_t = gi.i((.., step, ..))?;
            let gh = self.hh.forward(&h)?;
            let r = candle_nn::ops::sigmoid(&(gi_t.narrow(1, 0, hsz)? + gh.narrow(1, 0, hsz)?)?)?;
            let z = candle_nn::ops::sigmoid(&(gi_t.narrow(1, hsz, hsz)? + gh.narrow(1, hsz, hsz)?)?)?;
            let n = (gi_t.narrow(1, 2 * hsz, hsz)? + (r * gh.narrow(1, 2 * hsz, hsz)?)?)?.tanh()?;
            h = (&n + (z * (&h - &n)?)?)?;
            states.push(h.clone());
        }
        Tensor::stack(&states, 1)
    }

    /// Hidden state after the last valid step of each sequence, `[B, H]`.
    pub fn final_state(&self, x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        let states = self.forward(x)?;
        let t = states.dim(1)?;
        let pick = last_step_selector(lengths, t, x.dtype(), x.device())?;
        states.broadcast_mul(&pick)?.sum(1)
    }
}

/// One-hot `[B, T, 1]` selecting position `len - 1` of each row.
fn last_step_selector(lengths: &[usize], t: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut v = vec![0f64; lengths.len() * t];
    for (b, &len) in lengths.iter().enumerate() {
        let idx = len.clamp(1, t) - 1;
        v[b * t + idx] = 1.0;
    }
    Tensor::from_vec(v, (lengths.len(), t, 1), dev)?.to_dtype(dtype)
}

/// `[B, T]` float mask, 1 on valid positions.
pub fn sequence_mask(lengths: &[usize], t: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut v = vec![0f64; lengths.len() * t];
    for (b, &len) in lengths.iter().enumerate() {
        for i in 0..len.min(t) {
            v[b * t + i] = 1.0;
        }
    }
    Tensor::from_vec(v, (lengths.len(), t), dev)?.to_dtype(dtype)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl MultiHeadAttention {
    pub fn new(p: &Params, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            heads,
            q: Linear::new(&p.pp("q"), dim, dim)?,
            k: Linear::new(&p.pp("k"), dim, dim)?,
            v: Linear::new(&p.pp("v"), dim, dim)?,
            o: Linear::new(&p.pp("o"), dim, dim)?,
        })
    }

    /// `x: [B, T, C]`; `key_mask: [B, T]` with 1 on attendable positions.
    pub fn forward(&self, x: &Tensor, key_mask: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let dh = c / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            y.reshape((b, t, self.heads, dh))?.transpose(1, 2)?.contiguous()
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
        let bias = ((key_mask - 1.0)? * 1e9)?.reshape((b, 1, 1, t))?;
        let attn = candle_nn::ops::softmax(&scores.broadcast_add(&bias)?, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, c))?;
        self.o.forward(&out)
    }
}

/// Self-attention plus convolutional feed-forward, each followed by a
/// residual connection and a (possibly conditional) layer norm.
#[derive(Debug, Clone)]
pub struct FftBlock {
    attn: MultiHeadAttention,
    norm1: Norm,
    conv1: Conv1d,
    conv2: Conv1d,
    norm2: Norm,
}

impl FftBlock {
    pub fn new(
        p: &Params,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        cond_dim: Option<usize>,
    ) -> Result<Self> {
        let norm = |name: &str| -> Result<Norm> {
            Ok(match cond_dim {
                Some(e) => Norm::Conditional(CondLayerNorm::new(&p.pp(name), dim, e)?),
                None => Norm::Plain(LayerNorm::new(&p.pp(name), dim)?),
            })
        };
        Ok(Self {
            attn: MultiHeadAttention::new(&p.pp("attn"), dim, heads)?,
            norm1: norm("norm1")?,
            conv1: Conv1d::new(&p.pp("ffn1"), dim, ffn_dim, 3)?,
            conv2: Conv1d::new(&p.pp("ffn2"), ffn_dim, dim, 1)?,
            norm2: norm("norm2")?,
        })
    }

    /// `mask: [B, T, 1]`, `key_mask: [B, T]`.
    pub fn forward(
        &self,
        x: &Tensor,
        mask: &Tensor,
        key_mask: &Tensor,
        cond: Option<&Tensor>,
    ) -> Result<Tensor> {
        let h = self.attn.forward(x, key_mask)?;
        let x = self.norm1.forward(&(x + h)?, cond)?.broadcast_mul(mask)?;
        let h = self.conv1.forward(&x, mask)?.relu()?;
        let h = self.conv2.forward(&h, mask)?;
        self.norm2.forward(&(x + h)?, cond)?.broadcast_mul(mask)
    }
}

/// Sinusoidal position table `[T, dim]`.
pub fn sinusoidal_positions(t: usize, dim: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut v = vec![0f64; t * dim];
    for pos in 0..t {
        for i in 0..dim / 2 {
            let freq = (10000f64).powf(-((2 * i) as f64) / dim as f64);
            v[pos * dim + 2 * i] = (pos as f64 * freq).sin();
            v[pos * dim + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    Tensor::from_vec(v, (t, dim), dev)?.to_dtype(dtype)
}

/// Sinusoidal embedding of diffusion times `t: [B]` scaled by `scale`, `[B, dim]`.
pub fn timestep_embedding(t: &Tensor, dim: usize, scale: f64) -> Result<Tensor> {
    let half = dim / 2;
    let step = (10000f64).ln() / (half.max(2) - 1) as f64;
    let freqs: Vec<f64> = (0..half).map(|i| (-(i as f64) * step).exp()).collect();
    let freqs = Tensor::from_vec(freqs, (1, half), t.device())?.to_dtype(t.dtype())?;
    let args = (t.unsqueeze(1)? * scale)?.broadcast_mul(&freqs)?;
    Tensor::cat(&[args.sin()?, args.cos()?], 1)
}
