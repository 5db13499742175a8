//! Score-based diffusion with a data-dependent terminal distribution.
//!
//! The forward process drifts a mel `X0` towards the prior mean `mu` while
//! adding noise:
//!
//! ```text
//! dX = 0.5 * (mu - X) * beta(t) dt + sqrt(beta(t)) dW
//! ```
//!
//! Its marginal at time `t` is Gaussian with mean
//! `mu + (X0 - mu) * exp(-B(t) / 2)` and variance `lambda(t) = 1 - exp(-B(t))`,
//! where `B` is the integral of `beta`. Sampling runs the reverse ODE or SDE
//! from `N(mu, I / temperature)` at `t = 1` down to `t = 0`.

mod unet;

pub use unet::{ConditionedScore, ProbedScore, ScoreNetwork, SpeakerTable};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::ScheduleConfig;
use crate::error::{Error, Result};

/// Linear noise schedule `beta(t) = beta0 + (beta1 - beta0) t` on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSchedule {
    pub beta0: f64,
    pub beta1: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        let c = ScheduleConfig::default();
        Self {
            beta0: c.beta0,
            beta1: c.beta1,
        }
    }
}

impl DiffusionSchedule {
    pub fn new(beta0: f64, beta1: f64) -> Result<Self> {
        if !(beta0 > 0.0 && beta1 > beta0 && beta1.is_finite()) {
            return Err(Error::Config(format!(
                "schedule needs 0 < beta0 < beta1, got {beta0} and {beta1}"
            )));
        }
        Ok(Self { beta0, beta1 })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::new(cfg.beta0, cfg.beta1)
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta0 + (self.beta1 - self.beta0) * t
    }

    /// Integral of `beta` from 0 to `t`.
    pub fn big_b(&self, t: f64) -> f64 {
        self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t
    }

    /// Marginal variance `1 - exp(-B(t))`.
    pub fn lambda(&self, t: f64) -> f64 {
        -(-self.big_b(t)).exp_m1()
    }

    /// Weight of `X0` in the marginal mean, `exp(-B(t) / 2)`.
    pub fn mean_coeff(&self, t: f64) -> f64 {
        (-0.5 * self.big_b(t)).exp()
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::InvalidTime(t))
    }
}

/// Standard normal tensor drawn from `rng` in row-major order.
pub fn standard_normal<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    dtype: DType,
    dev: &Device,
) -> Result<Tensor> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, dev)?.to_dtype(dtype)?)
}

/// Per-row time tensor `[B]` broadcastable against `[B, T, F]` states.
fn per_row(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let b = values.len();
    Ok(Tensor::from_vec(values.to_vec(), (b, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

/// Mean of the forward marginal at per-row times `t`.
pub fn marginal_mean(schedule: &DiffusionSchedule, x0: &Tensor, mu: &Tensor, t: &[f64]) -> Result<Tensor> {
    for &ti in t {
        check_time(ti)?;
    }
    let a: Vec<f64> = t.iter().map(|&ti| schedule.mean_coeff(ti)).collect();
    Ok((mu + (x0 - mu)?.broadcast_mul(&per_row(&a, x0)?)?)?)
}

/// Forward marginal sample plus the noise `xi` used to draw it. States are
/// `[B, T, F]` and `t` holds one time per row.
pub fn forward_marginal_with_noise<R: Rng + ?Sized>(
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    mu: &Tensor,
    t: &[f64],
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    if x0.dims() != mu.dims() {
        return Err(Error::Shape(format!("X0 {:?} vs mu {:?}", x0.dims(), mu.dims())));
    }
    if t.len() != x0.dim(0)? {
        return Err(Error::Shape(format!("{} times for batch {}", t.len(), x0.dim(0)?)));
    }
    let mean = marginal_mean(schedule, x0, mu, t)?;
    let xi = standard_normal(rng, x0.dims(), x0.dtype(), x0.device())?;
    let sd: Vec<f64> = t.iter().map(|&ti| schedule.lambda(ti).sqrt()).collect();
    let xt = (mean + xi.broadcast_mul(&per_row(&sd, x0)?)?)?;
    Ok((xt, xi))
}

pub fn forward_marginal<R: Rng + ?Sized>(
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    mu: &Tensor,
    t: &[f64],
    rng: &mut R,
) -> Result<Tensor> {
    Ok(forward_marginal_with_noise(schedule, x0, mu, t, rng)?.0)
}

/// Gradient of `log p_t(X_t | X0)`, `-(X_t - mean_t) / lambda(t)`.
pub fn true_conditional_score(
    schedule: &DiffusionSchedule,
    xt: &Tensor,
    x0: &Tensor,
    mu: &Tensor,
    t: &[f64],
) -> Result<Tensor> {
    let mut inv = Vec::with_capacity(t.len());
    for &ti in t {
        check_time(ti)?;
        if ti == 0.0 {
            return Err(Error::InvalidTime(ti));
        }
        inv.push(-1.0 / schedule.lambda(ti));
    }
    let mean = marginal_mean(schedule, x0, mu, t)?;
    Ok((xt - mean)?.broadcast_mul(&per_row(&inv, xt)?)?)
}

/// Anything that estimates the score of `X_t` given the prior mean.
pub trait ScoreModel {
    /// `x`, `mu`: `[B, T, F]`; `t`: one time per row.
    fn score(&self, x: &Tensor, mu: &Tensor, t: &[f64]) -> Result<Tensor>;
}

/// The exact conditional score for known clean data; a zero-loss oracle.
pub struct ConditionalScoreOracle<'a> {
    pub schedule: DiffusionSchedule,
    pub x0: &'a Tensor,
}

impl ScoreModel for ConditionalScoreOracle<'_> {
    fn score(&self, x: &Tensor, mu: &Tensor, t: &[f64]) -> Result<Tensor> {
        true_conditional_score(&self.schedule, x, self.x0, mu, t)
    }
}

/// Exact score of the marginal when `X0 ~ N(m, sigma^2 I)` independently of
/// `mu`.
pub struct GaussianScoreOracle {
    pub schedule: DiffusionSchedule,
    pub m: f64,
    pub sigma2: f64,
}

impl GaussianScoreOracle {
    /// Mean and variance of `X_t`.
    pub fn moments(&self, mu: f64, t: f64) -> (f64, f64) {
        let a = self.schedule.mean_coeff(t);
        (mu + (self.m - mu) * a, self.sigma2 * a * a + self.schedule.lambda(t))
    }
}

impl ScoreModel for GaussianScoreOracle {
    fn score(&self, x: &Tensor, mu: &Tensor, t: &[f64]) -> Result<Tensor> {
        let a: Vec<f64> = t.iter().map(|&ti| self.schedule.mean_coeff(ti)).collect();
        let inv: Vec<f64> = t
            .iter()
            .zip(&a)
            .map(|(&ti, &ai)| -1.0 / (self.sigma2 * ai * ai + self.schedule.lambda(ti)))
            .collect();
        let a = per_row(&a, x)?;
        let mean = (mu + (mu.affine(-1.0, self.m)?).broadcast_mul(&a)?)?;
        Ok((x - mean)?.broadcast_mul(&per_row(&inv, x)?)?)
    }
}

/// A model that always predicts a zero score.
pub struct ZeroScore;

impl ScoreModel for ZeroScore {
    fn score(&self, x: &Tensor, _mu: &Tensor, _t: &[f64]) -> Result<Tensor> {
        Ok(x.zeros_like()?)
    }
}

/// Draws `t ~ U(t_eps, 1)` per row.
pub fn sample_times<R: Rng + ?Sized>(rng: &mut R, n: usize, t_eps: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(t_eps..1.0)).collect()
}

/// `lambda(t) * |s - grad log p_t(X_t | X0)|^2`, averaged over valid
/// elements. Since the true score is `-xi / sqrt(lambda)` this equals
/// `(s * sqrt(lambda) + xi)^2`, which stays finite as `lambda -> 0`.
/// `mask: [B, T]` marks valid frames.
pub fn diffusion_loss_at<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    mu: &Tensor,
    mask: &Tensor,
    t: &[f64],
    rng: &mut R,
) -> Result<Tensor> {
    let (xt, xi) = forward_marginal_with_noise(schedule, x0, mu, t, rng)?;
    let s = model.score(&xt, mu, t)?;
    if s.dims() != xt.dims() {
        return Err(Error::Shape(format!("score {:?} vs state {:?}", s.dims(), xt.dims())));
    }
    let sd: Vec<f64> = t.iter().map(|&ti| schedule.lambda(ti).sqrt()).collect();
    let err = (s.broadcast_mul(&per_row(&sd, &s)?)? + xi)?.sqr()?;
    let mask = mask.unsqueeze(2)?;
    let count = crate::nn::scalar(&mask.sum_all()?)? * x0.dim(2)? as f64;
    Ok((err.broadcast_mul(&mask)?.sum_all()? / count.max(1.0))?)
}

pub fn diffusion_loss<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    mu: &Tensor,
    mask: &Tensor,
    t_eps: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if !(t_eps > 0.0 && t_eps < 1.0) {
        return Err(Error::Config(format!("t_eps must lie in (0, 1), got {t_eps}")));
    }
    let t = sample_times(rng, x0.dim(0)?, t_eps);
    diffusion_loss_at(model, schedule, x0, mu, mask, &t, rng)
}

/// Initial reverse-time state `mu + z / sqrt(temperature)`.
fn terminal_sample<R: Rng + ?Sized>(mu: &Tensor, temperature: f64, rng: &mut R) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let z = standard_normal(rng, mu.dims(), mu.dtype(), mu.device())?;
    Ok((mu + (z / temperature.sqrt())?)?)
}

/// Uniform grid of `n` steps from 1 to 0, evaluated at step midpoints.
fn step_times(n: usize) -> impl Iterator<Item = f64> {
    let h = 1.0 / n as f64;
    (0..n).map(move |i| 1.0 - (i as f64 + 0.5) * h)
}

/// Euler integration of `dX = 0.5 * (mu - X - s) * beta(t) dt` from 1 to 0.
pub fn reverse_ode_sample<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    mu: &Tensor,
    n_steps: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(Error::Config("at least one reverse step is required".into()));
    }
    let b = mu.dim(0)?;
    let h = 1.0 / n_steps as f64;
    let mut x = terminal_sample(mu, temperature, rng)?;
    for t in step_times(n_steps) {
        let s = model.score(&x, mu, &vec![t; b])?;
        let drift = ((mu - &x)? - s)?;
        x = (x - (drift * (0.5 * schedule.beta(t) * h))?)?;
    }
    Ok(x)
}

/// Euler-Maruyama integration of the reverse SDE
/// `dX = (0.5 * (mu - X) - s) * beta(t) dt + sqrt(beta(t)) dW` from 1 to 0.
pub fn reverse_sde_sample<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    mu: &Tensor,
    n_steps: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(Error::Config("at least one reverse step is required".into()));
    }
    let b = mu.dim(0)?;
    let h = 1.0 / n_steps as f64;
    let mut x = terminal_sample(mu, temperature, rng)?;
    for t in step_times(n_steps) {
        let beta = schedule.beta(t);
        let s = model.score(&x, mu, &vec![t; b])?;
        let drift = (((mu - &x)? * 0.5)? - s)?;
        let z = standard_normal(rng, mu.dims(), mu.dtype(), mu.device())?;
        x = ((x - (drift * (beta * h))?)? + (z * (beta * h).sqrt())?)?;
    }
    Ok(x)
}

/// Euler-Maruyama simulation of the forward SDE from `X0` to time `t_end`.
pub fn simulate_forward_sde<R: Rng + ?Sized>(
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    mu: &Tensor,
    t_end: f64,
    n_steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    check_time(t_end)?;
    let h = t_end / n_steps.max(1) as f64;
    let mut x = x0.clone();
    for i in 0..n_steps {
        let beta = schedule.beta(i as f64 * h);
        let z = standard_normal(rng, x.dims(), x.dtype(), x.device())?;
        x = ((&x + ((mu - &x)? * (0.5 * beta * h))?)? + (z * (beta * h).sqrt())?)?;
    }
    Ok(x)
}
