//! Parameter storage and the small layer set the models are built from.
//!
//! Parameters are candle [`Var`]s drawn from a seeded ChaCha stream in
//! creation order, so a model built twice from the same seed is bitwise
//! identical.

mod grl;
mod im2col;
mod layers;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Result, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

pub use grl::GradientReversal;
pub use layers::*;

/// Per-row negative log-likelihood of `labels` under `log_softmax(logits)`,
/// `logits: [N, K]`. Returns `[N]`.
pub fn nll_per_row(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        candle_core::bail!("{} labels for {n} rows", labels.len());
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        candle_core::bail!("label {bad} out of range for {k} classes");
    }
    let logp = candle_nn::ops::log_softmax(logits, candle_core::D::Minus1)?;
    let idx = Tensor::from_vec(labels.iter().map(|&l| l as u32).collect(), (n, 1), logits.device())?;
    logp.gather(&idx, 1)?.squeeze(1)?.neg()
}

/// Mean cross-entropy over rows.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    nll_per_row(logits, labels)?.mean_all()
}

/// Scalar tensor to f64 regardless of dtype.
pub fn scalar(t: &Tensor) -> Result<f64> {
    t.to_dtype(DType::F64)?.to_scalar::<f64>()
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named, seeded parameter store shared by every layer of a model.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("parameters", &self.num_parameters())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn root(&self) -> Params {
        Params {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// All parameters sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place; layers holding it see the new value.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .var(name)
            .ok_or_else(|| candle_core::Error::Msg(format!("no parameter named {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)
    }

    fn create(&self, name: String, shape: Shape, init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(v) = inner.vars.get(&name) {
            if v.shape() != &shape {
                candle_core::bail!("parameter {name} exists with shape {:?}", v.shape());
            }
            return Ok(v.as_tensor().clone());
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform(bound) => {
                let dist = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut inner.rng)).collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| std * inner.rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(out)
    }
}

/// A path into a [`ParamStore`], in the style of a var builder.
#[derive(Clone)]
pub struct Params {
    store: ParamStore,
    prefix: String,
}

impl Params {
    pub fn pp(&self, name: impl AsRef<str>) -> Params {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Params {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.create(full, shape.into(), init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}


#[cfg(test)]
thread_local! {
    static TEST_RNG: std::cell::RefCell<ChaCha8Rng> = std::cell::RefCell::new(ChaCha8Rng::seed_from_u64(0));
}

/// Standard-normal test tensor from a per-thread seeded stream.
#[cfg(test)]
pub(crate) fn test_randn<S: Into<Shape>>(std: f64, shape: S) -> Result<Tensor> {
    let shape = shape.into();
    let v: Vec<f64> = TEST_RNG.with(|r| {
        let mut r = r.borrow_mut();
        (0..shape.elem_count()).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect()
    });
    Tensor::from_vec(v, shape, &Device::Cpu)
}
