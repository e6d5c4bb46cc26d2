//! Noise schedules, training sub-sequences and DDIM coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How betas are interpolated between `beta_start` and `beta_end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    Linear,
    /// Linear in `sqrt(beta)`, the Stable Diffusion convention.
    ScaledLinear,
}

/// Everything needed to rebuild a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: BetaKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { total_steps: 1000, beta_start: 8.5e-4, beta_end: 1.2e-2, kind: BetaKind::ScaledLinear }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.total_steps, self.beta_start, self.beta_end, self.kind)
    }
}

/// Betas and their cumulative products over `T` steps (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(total_steps: usize, beta_start: f64, beta_end: f64, kind: BetaKind) -> Result<NoiseSchedule> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let frac = |i: usize| {
        if total_steps == 1 {
            0.0
        } else {
            i as f64 / (total_steps - 1) as f64
        }
    };
    let betas: Vec<f64> = (0..total_steps)
        .map(|i| match kind {
            BetaKind::Linear => beta_start + (beta_end - beta_start) * frac(i),
            BetaKind::ScaledLinear => {
                let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                (a + (b - a) * frac(i)).powi(2)
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(total_steps);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

impl NoiseSchedule {
    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Cumulative product at step `t`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.total_steps() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::InvalidArgument(format!("step {t} outside 0..={}", self.total_steps()))),
        }
    }

    /// Whether the last step leaves less than `threshold` of the signal power.
    pub fn reaches_noise(&self, threshold: f64) -> bool {
        self.alpha_bars.last().is_some_and(|&a| a < threshold)
    }
}

/// Evenly spaced training steps `{k, 2k, ..., T}` with `k = T / T'`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSubsequence {
    pub interval: usize,
    pub steps: Vec<usize>,
}

impl StepSubsequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last(&self) -> usize {
        *self.steps.last().expect("subsequence is never empty")
    }
}

pub fn subsequence(total_steps: usize, length: usize) -> Result<StepSubsequence> {
    if length == 0 || length > total_steps {
        return Err(Error::InvalidArgument(format!("subsequence length {length} must lie in 1..={total_steps}")));
    }
    if !total_steps.is_multiple_of(length) {
        return Err(Error::InvalidArgument(format!("T = {total_steps} is not divisible by T' = {length}")));
    }
    let k = total_steps / length;
    Ok(StepSubsequence { interval: k, steps: (1..=length).map(|i| i * k).collect() })
}

/// Longest sampling run used at inference.
pub const MAX_INFERENCE_STEPS: usize = 50;

/// Sub-sequence to sample with after training on `T'` steps: the training
/// sub-sequence itself when `T' <= 50`, otherwise a 50-step one.
pub fn inference_subsequence(total_steps: usize, train_length: usize) -> Result<StepSubsequence> {
    subsequence(total_steps, train_length.min(MAX_INFERENCE_STEPS))
}

/// Noise injected by a DDIM step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stochasticity {
    Deterministic,
    /// Standard `eta` family; `eta = 1` matches ancestral DDPM variance.
    Eta(f64),
}

/// Coefficients of one DDIM update from `tau` to `tau_prev`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimCoeffs {
    /// `sqrt(alpha_bar(tau_prev))`
    pub sqrt_abar_prev: f64,
    /// Weight of the direction term, `sqrt(1 - alpha_bar(tau_prev) - sigma^2)`.
    pub w_tau: f64,
    pub sigma_tau: f64,
}

pub fn ddim_coeffs(s: &NoiseSchedule, tau: usize, tau_prev: usize, noise: Stochasticity) -> Result<DdimCoeffs> {
    if tau == 0 || tau > s.total_steps() || tau_prev >= tau {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= tau <= {} and tau_prev < tau, got tau={tau}, tau_prev={tau_prev}",
            s.total_steps()
        )));
    }
    let a_t = s.alpha_bar(tau)?;
    let a_prev = s.alpha_bar(tau_prev)?;
    let sigma = match noise {
        Stochasticity::Deterministic => 0.0,
        Stochasticity::Eta(eta) => eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt(),
    };
    Ok(DdimCoeffs {
        sqrt_abar_prev: a_prev.sqrt(),
        w_tau: (1.0 - a_prev - sigma * sigma).max(0.0).sqrt(),
        sigma_tau: sigma,
    })
}
