use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
/// Chosen so that ᾱ_T < 1e-3 at T=200.
pub const DEFAULT_BETA_END: f64 = 0.07;

/// β, α and ᾱ tables for `t = 1..=T`, with ᾱ_0 = 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// Index 0 holds ᾱ_0.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Invalid("schedule needs T ≥ 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Invalid(format!("beta {b} outside (0,1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    /// Linear β from `beta_start` to `beta_end`, both endpoints included.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Invalid("schedule needs T ≥ 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Invalid(format!(
                "need 0 < beta_start ≤ beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        NoiseSchedule::from_betas(betas)
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// ᾱ_t for `t = 1..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }

    /// β_t for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        if t == 0 {
            return Err(Error::Invalid("β_0 is undefined".into()));
        }
        Ok(self.betas[t - 1])
    }

    /// ᾱ_t for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bars[t])
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return Err(Error::Invalid(format!("step {t} outside 0..={}", self.t_max())));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

pub fn make_linear_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(t_max, beta_start, beta_end)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn diffuse_to(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape("diffuse_to", x0, eps)?;
    let ab = sched.alpha_bar(t)?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// `√(1−β_t)·x_t + √β_t·eps`.
pub fn diffuse_step(x_t: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape("diffuse_step", x_t, eps)?;
    let beta = sched.beta(t)?;
    let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
    x_t.zip_map(eps, |x, e| a * x + b * e)
}

/// Mean squared error between true and predicted noise.
pub fn dsm_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<f64> {
    same_shape("dsm_loss", eps, eps_hat)?;
    let s: f64 = eps.data().iter().zip(eps_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / eps.numel() as f64)
}
