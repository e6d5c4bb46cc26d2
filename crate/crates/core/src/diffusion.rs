//! Forward noising, parameterization targets, clean-sample recovery and DDIM
//! sampling.
//!
//! Conventions: `abar` is the cumulative signal fraction at a step,
//! `z_t = sqrt(abar) * z + sqrt(1 - abar) * eps`, and the v target is
//! `sqrt(abar) * eps - sqrt(1 - abar) * z`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{TaskSwitch, Variant};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_grid, pfm, Grid, RandomSource};
use crate::schedule::{ddim_coeffs, DdimCoeffs, NoiseSchedule, StepSubsequence, Stochasticity};

/// What the denoiser regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// The added noise.
    Epsilon,
    /// The clean sample.
    X0,
    /// `sqrt(abar) * eps - sqrt(1 - abar) * z`.
    V,
}

impl Parameterization {
    pub const ALL: [Parameterization; 3] = [Parameterization::Epsilon, Parameterization::V, Parameterization::X0];

    pub fn label(self) -> &'static str {
        match self {
            Parameterization::Epsilon => "epsilon",
            Parameterization::X0 => "x0",
            Parameterization::V => "v",
        }
    }
}

/// A network usable by the samplers: maps (noisy annotation, image, step,
/// switch) to a model output interpreted under some [`Parameterization`].
pub trait Denoiser: Sync {
    fn variant(&self) -> Variant;

    /// Channel count of annotations (and of the noise input).
    fn annotation_channels(&self) -> usize;

    fn predict(&self, noisy: Option<&Grid>, image: &Grid, t: usize, switch: TaskSwitch) -> Result<Grid>;
}

fn check_abar(abar: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&abar) || !abar.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha-bar {abar} outside [0, 1]")));
    }
    Ok(())
}

pub fn forward_noise(z: &Grid, eps: &Grid, abar_t: f64) -> Result<Grid> {
    check_abar(abar_t)?;
    z.lincomb(abar_t.sqrt(), eps, (1.0 - abar_t).sqrt())
}

/// Regression target of the denoiser under `p`.
pub fn target_for(p: Parameterization, z: &Grid, eps: &Grid, abar_t: f64) -> Result<Grid> {
    check_abar(abar_t)?;
    z.ensure_shape(eps, "target_for")?;
    Ok(match p {
        Parameterization::Epsilon => eps.clone(),
        Parameterization::X0 => z.clone(),
        Parameterization::V => eps.lincomb(abar_t.sqrt(), z, -(1.0 - abar_t).sqrt())?,
    })
}

/// Clean-sample estimate from one model output.
pub fn predict_clean(p: Parameterization, model_out: &Grid, z_t: &Grid, abar: f64) -> Result<Grid> {
    check_abar(abar)?;
    model_out.ensure_shape(z_t, "predict_clean")?;
    match p {
        Parameterization::X0 => Ok(model_out.clone()),
        Parameterization::Epsilon => {
            if abar <= 0.0 {
                return Err(Error::Singularity("epsilon recovery divides by sqrt(alpha-bar) = 0".into()));
            }
            let inv = 1.0 / abar.sqrt();
            z_t.lincomb(inv, model_out, -(1.0 - abar).sqrt() * inv)
        }
        Parameterization::V => z_t.lincomb(abar.sqrt(), model_out, -(1.0 - abar).sqrt()),
    }
}

/// Noise estimate implied by one model output.
pub fn predict_noise(p: Parameterization, model_out: &Grid, z_t: &Grid, abar: f64) -> Result<Grid> {
    check_abar(abar)?;
    model_out.ensure_shape(z_t, "predict_noise")?;
    match p {
        Parameterization::Epsilon => Ok(model_out.clone()),
        Parameterization::X0 => {
            if abar >= 1.0 {
                return Err(Error::Singularity("x0 direction divides by sqrt(1 - alpha-bar) = 0".into()));
            }
            let inv = 1.0 / (1.0 - abar).sqrt();
            z_t.lincomb(inv, model_out, -abar.sqrt() * inv)
        }
        Parameterization::V => model_out.lincomb(abar.sqrt(), z_t, (1.0 - abar).sqrt()),
    }
}

/// The DDIM term pointing back at `z_tau`: `w_tau` times the implied noise.
pub fn direction_term(
    p: Parameterization,
    model_out: &Grid,
    z_tau: &Grid,
    abar_tau: f64,
    coeffs: &DdimCoeffs,
) -> Result<Grid> {
    let eps = predict_noise(p, model_out, z_tau, abar_tau)?;
    Ok(eps.scale(coeffs.w_tau))
}

/// `sqrt(abar_prev) * z_hat + dir + sigma * noise`.
pub fn ddim_step(z_hat: &Grid, dir: &Grid, coeffs: &DdimCoeffs, noise: Option<&Grid>) -> Result<Grid> {
    z_hat.ensure_shape(dir, "ddim_step")?;
    let mut out = if coeffs.sqrt_abar_prev == 1.0 { z_hat.clone() } else { z_hat.scale(coeffs.sqrt_abar_prev) };
    if coeffs.w_tau != 0.0 {
        out = out.add(dir)?;
    }
    match (coeffs.sigma_tau > 0.0, noise) {
        (true, Some(n)) => out = out.lincomb(1.0, n, coeffs.sigma_tau)?,
        (true, None) => return Err(Error::InvalidArgument("stochastic DDIM step needs a noise grid".into())),
        (false, Some(_)) => return Err(Error::InvalidArgument("noise grid given to a deterministic DDIM step".into())),
        (false, None) => {}
    }
    Ok(out)
}

/// Sampler knobs shared by multi-step and single-step inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerOptions {
    pub parameterization: Parameterization,
    /// Clamp clean-sample estimates to `[-1, 1]` before each update.
    pub clamp: bool,
    pub stochasticity: Stochasticity,
}

impl SamplerOptions {
    pub fn new(parameterization: Parameterization) -> Self {
        SamplerOptions { parameterization, clamp: true, stochasticity: Stochasticity::Deterministic }
    }
}

/// Per-step clean-sample estimates of one sampling run, largest step first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryRecord {
    pub taus: Vec<usize>,
    pub z_hats: Vec<Grid>,
    pub z_taus: Vec<Grid>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// Writes `zhat_<tau>.pfm`, `ztau_<tau>.pfm` and `index.csv`
    /// (`step_tau,zhat_path,ztau_path`) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = String::from("step_tau,zhat_path,ztau_path\n");
        for ((tau, zh), zt) in self.taus.iter().zip(&self.z_hats).zip(&self.z_taus) {
            let (a, b) = (format!("zhat_{tau:04}.pfm"), format!("ztau_{tau:04}.pfm"));
            pfm::write_pfm(&dir.join(&a), zh)?;
            pfm::write_pfm(&dir.join(&b), zt)?;
            let _ = writeln!(index, "{tau},{a},{b}");
        }
        let path = dir.join("index.csv");
        fs::write(&path, index).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut rec = TrajectoryRecord::default();
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::Format { what: "trajectory index", detail: line.to_string() });
            }
            rec.taus.push(
                cols[0].parse().map_err(|_| Error::Format {
                    what: "trajectory index",
                    detail: format!("bad tau {:?}", cols[0]),
                })?,
            );
            rec.z_hats.push(pfm::read_pfm(&dir.join(cols[1]))?);
            rec.z_taus.push(pfm::read_pfm(&dir.join(cols[2]))?);
        }
        Ok(rec)
    }
}

fn initial_noise(net: &dyn Denoiser, z_x: &Grid, rng: RandomSource) -> Result<Grid> {
    gaussian_grid(rng.derive_named("initial-noise"), z_x.height(), z_x.width(), net.annotation_channels())
}

/// DDIM sampling of an annotation for image `z_x` along `subseq`.
///
/// Starts from Gaussian noise and performs one denoiser call per step; the
/// clean estimate and the direction both come from that single output.
pub fn sample(
    net: &dyn Denoiser,
    z_x: &Grid,
    sched: &NoiseSchedule,
    subseq: &StepSubsequence,
    opts: &SamplerOptions,
    rng: RandomSource,
    record: bool,
) -> Result<(Grid, Option<TrajectoryRecord>)> {
    if net.variant() != Variant::Generative {
        return Err(Error::InvalidArgument("multi-step sampling needs a generative denoiser".into()));
    }
    if subseq.is_empty() || subseq.last() > sched.total_steps() {
        return Err(Error::InvalidArgument(format!(
            "sub-sequence does not fit a {}-step schedule",
            sched.total_steps()
        )));
    }
    let mut z = initial_noise(net, z_x, rng)?;
    let mut trace = record.then(TrajectoryRecord::default);
    let steps = &subseq.steps;
    for i in (0..steps.len()).rev() {
        let tau = steps[i];
        let tau_prev = if i == 0 { 0 } else { steps[i - 1] };
        let abar = sched.alpha_bar(tau)?;
        let coeffs = ddim_coeffs(sched, tau, tau_prev, opts.stochasticity)?;
        let out = net.predict(Some(&z), z_x, tau, TaskSwitch::Annotate)?;
        let mut z_hat = predict_clean(opts.parameterization, &out, &z, abar)?;
        if opts.clamp {
            z_hat = z_hat.clamp(-1.0, 1.0);
        }
        let dir = direction_term(opts.parameterization, &out, &z, abar, &coeffs)?;
        let noise = if coeffs.sigma_tau > 0.0 {
            Some(gaussian_grid(rng.derive(tau as u64), z.height(), z.width(), z.channels())?)
        } else {
            None
        };
        let next = ddim_step(&z_hat, &dir, &coeffs, noise.as_ref())?;
        if let Some(t) = trace.as_mut() {
            t.taus.push(tau);
            t.z_hats.push(z_hat);
            t.z_taus.push(z.clone());
        }
        z = next;
    }
    Ok((z, trace))
}

/// One denoiser call at step `t` (normally `T`), switch set to annotation.
///
/// Generative nets see Gaussian noise concatenated to the image and need
/// `rng`; discriminative nets see only the image and ignore it.
pub fn single_step_infer_at(
    net: &dyn Denoiser,
    z_x: &Grid,
    sched: &NoiseSchedule,
    t: usize,
    rng: Option<RandomSource>,
    opts: &SamplerOptions,
) -> Result<Grid> {
    let abar = sched.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::InvalidArgument("single-step inference needs t >= 1".into()));
    }
    let (out, z_t) = match net.variant() {
        Variant::Generative => {
            let rng = rng.ok_or_else(|| Error::InvalidArgument("generative inference needs a random source".into()))?;
            let z_t = initial_noise(net, z_x, rng)?;
            (net.predict(Some(&z_t), z_x, t, TaskSwitch::Annotate)?, z_t)
        }
        Variant::Discriminative => {
            let out = net.predict(None, z_x, t, TaskSwitch::Annotate)?;
            let zeros = Grid::zeros(out.height(), out.width(), out.channels());
            (out, zeros)
        }
    };
    let mut z_hat = predict_clean(opts.parameterization, &out, &z_t, abar)?;
    if opts.clamp {
        z_hat = z_hat.clamp(-1.0, 1.0);
    }
    Ok(z_hat)
}

pub fn single_step_infer(
    net: &dyn Denoiser,
    z_x: &Grid,
    sched: &NoiseSchedule,
    rng: Option<RandomSource>,
    opts: &SamplerOptions,
) -> Result<Grid> {
    single_step_infer_at(net, z_x, sched, sched.total_steps(), rng, opts)
}
