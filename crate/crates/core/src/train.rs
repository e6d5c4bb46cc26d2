//! Training protocols, from direct adaptation through the full single-step
//! recipe with the reconstruction regularizer.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Checkpoint, Tape, Var};
use crate::denoiser::{DenoiserNet, InitMode, NetConfig, TaskSwitch, Variant};
use crate::diffusion::{forward_noise, target_for, Parameterization};
use crate::error::{Error, Result};
use crate::eval;
use crate::numerics::{gaussian_grid, Grid, RandomSource};
use crate::scenes::{annotation_target, choose_by_probability, AnnotationTask, Domain, MixtureMode, Sample};
use crate::schedule::{subsequence, NoiseSchedule, ScheduleConfig};

/// Learning rate of the toy budget.
pub const TOY_LR: f64 = 1e-3;

/// Probabilities of (indoor-like, outdoor-like) batches when mixing.
pub const DEFAULT_MIXTURE: [f64; 2] = [0.9, 0.1];

/// One named, reproducible training recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub name: String,
    pub parameterization: Parameterization,
    /// Length of the training step sub-sequence.
    pub t_prime: usize,
    /// Step used when `t_prime = 1`; defaults to `T`.
    #[serde(default)]
    pub fixed_t: Option<usize>,
    pub preserver: bool,
    pub variant: Variant,
    pub init: InitMode,
    pub task: AnnotationTask,
    /// Batch source probabilities over domains; `None` trains on the
    /// indoor-like domain only.
    #[serde(default)]
    pub mixture: Option<[f64; 2]>,
    #[serde(default)]
    pub mixture_mode: MixtureMode,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub net: NetConfig,
    pub schedule: ScheduleConfig,
    /// Validate every this many steps (0 disables periodic validation).
    pub validation_every: usize,
    /// Held-out samples scored at each validation.
    pub validation_count: usize,
}

/// Rows of the adaptation ladder, in order.
pub const LADDER: [&str; 6] = ["direct_adaptation", "x0", "single_step", "preserver", "mixture", "lotus_g"];

/// Every preset name understood by [`ProtocolConfig::preset`].
pub const PRESETS: [&str; 7] = ["direct_adaptation", "x0", "single_step", "preserver", "mixture", "lotus_g", "lotus_d"];

impl ProtocolConfig {
    /// Named configuration. Each ladder row changes exactly one field of the
    /// row before it.
    pub fn preset(name: &str) -> Result<Self> {
        let schedule = ScheduleConfig::default();
        let mut c = ProtocolConfig {
            name: name.to_string(),
            parameterization: Parameterization::Epsilon,
            t_prime: schedule.total_steps,
            fixed_t: None,
            preserver: false,
            variant: Variant::Generative,
            init: InitMode::DuplicatedInput,
            task: AnnotationTask::Depth,
            mixture: None,
            mixture_mode: MixtureMode::PerBatch,
            steps: 3000,
            batch_size: 8,
            lr: TOY_LR,
            seed: 0,
            net: NetConfig { total_steps: schedule.total_steps, ..NetConfig::default() },
            schedule,
            validation_every: 250,
            validation_count: 8,
        };
        let rank = match name {
            "direct_adaptation" => 0,
            "x0" => 1,
            "single_step" => 2,
            "preserver" => 3,
            "mixture" => 4,
            "lotus_g" | "lotus_d" => 5,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        if rank >= 1 {
            c.parameterization = Parameterization::X0;
        }
        if rank >= 2 {
            c.t_prime = 1;
        }
        if rank >= 3 {
            c.preserver = true;
        }
        if rank >= 4 {
            c.mixture = Some(DEFAULT_MIXTURE);
        }
        if rank >= 5 {
            c.task = AnnotationTask::DepthDisparity;
        }
        if name == "lotus_d" {
            c.variant = Variant::Discriminative;
            c.init = InitMode::Fresh;
        }
        c.net.variant = c.variant;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.schedule.total_steps;
        if self.net.total_steps != t {
            return Err(Error::InvalidArgument(format!(
                "net.total_steps = {} but schedule has {t} steps",
                self.net.total_steps
            )));
        }
        if self.net.variant != self.variant {
            return Err(Error::InvalidArgument("net.variant differs from variant".into()));
        }
        subsequence(t, self.t_prime)?;
        if let Some(ft) = self.fixed_t {
            if self.t_prime != 1 {
                return Err(Error::InvalidArgument("fixed_t applies only with t_prime = 1".into()));
            }
            if ft == 0 || ft > t {
                return Err(Error::InvalidArgument(format!("fixed_t {ft} outside 1..={t}")));
            }
        }
        if self.variant == Variant::Discriminative {
            if self.t_prime != 1 {
                return Err(Error::InvalidArgument("discriminative nets need t_prime = 1".into()));
            }
            if self.init == InitMode::DuplicatedInput {
                return Err(Error::InvalidArgument("discriminative nets have no input to duplicate".into()));
            }
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("steps and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(m) = self.mixture {
            choose_by_probability(&m, RandomSource::new(0, 0))
                .map_err(|e| Error::InvalidArgument(format!("mixture: {e}")))?;
        }
        Ok(())
    }

    /// Combinations outside the canonical ladder, described for the log.
    pub fn non_canonical(&self) -> Vec<String> {
        let mut notes = Vec::new();
        if self.preserver && self.t_prime != 1 {
            notes.push("preserver with multi-step training".to_string());
        }
        if self.preserver && self.parameterization != Parameterization::X0 {
            notes.push("preserver without x0 parameterization".to_string());
        }
        if self.fixed_t.is_some_and(|t| t != self.schedule.total_steps) {
            notes.push("single step fixed below T".to_string());
        }
        notes
    }

    /// Step every single-step training sample uses.
    pub fn single_step(&self) -> usize {
        self.fixed_t.unwrap_or(self.schedule.total_steps)
    }

    pub fn sampler_options(&self) -> crate::diffusion::SamplerOptions {
        crate::diffusion::SamplerOptions::new(self.parameterization)
    }
}

/// Network input for an image: `[0, 1]` mapped to `[-1, 1]`.
pub fn image_latent(image: &Grid) -> Grid {
    image.map(|v| 2.0 * v - 1.0)
}

/// `mean((target_for(p) - f(z_t, x, t, s_y))^2)` for one sample and one step.
pub fn standard_loss<'a>(
    tape: &mut Tape<'a>,
    net: &'a DenoiserNet,
    sched: &NoiseSchedule,
    p: Parameterization,
    z_x: &Grid,
    z_y: &Grid,
    t: usize,
    rng: RandomSource,
) -> Result<Var> {
    let abar = sched.alpha_bar(t)?;
    let (noisy, target) = match net.config().variant {
        Variant::Generative => {
            let eps = gaussian_grid(rng, z_y.height(), z_y.width(), z_y.channels())?;
            (Some(forward_noise(z_y, &eps, abar)?), target_for(p, z_y, &eps, abar)?)
        }
        Variant::Discriminative => {
            (None, target_for(p, z_y, &Grid::zeros(z_y.height(), z_y.width(), z_y.channels()), abar)?)
        }
    };
    let out = net.forward(tape, noisy.as_ref(), z_x, t, TaskSwitch::Annotate)?;
    tape.mse(out, &target)
}

/// Loss nodes of the two-term regularized objective.
#[derive(Debug, Clone, Copy)]
pub struct PreserverLoss {
    pub total: Var,
    pub recon: Var,
    pub anno: Var,
}

/// `mean((z_x - f(., s_x))^2) + mean((z_y - f(., s_y))^2)` at `t = T`
/// (or the configured single step). Both terms share one noise draw.
pub fn preserver_loss<'a>(
    tape: &mut Tape<'a>,
    net: &'a DenoiserNet,
    sched: &NoiseSchedule,
    p: Parameterization,
    t: usize,
    z_x: &Grid,
    z_y: &Grid,
    rng: RandomSource,
) -> Result<PreserverLoss> {
    z_x.ensure_shape(z_y, "preserver_loss")?;
    let abar = sched.alpha_bar(t)?;
    let (h, w, c) = (z_y.height(), z_y.width(), z_y.channels());
    let eps = match net.config().variant {
        Variant::Generative => Some(gaussian_grid(rng, h, w, c)?),
        Variant::Discriminative => None,
    };
    let zero = Grid::zeros(h, w, c);
    let e = eps.as_ref().unwrap_or(&zero);
    // the network input is the annotation's noised state in both calls
    let noisy = match eps.as_ref() {
        Some(e) => Some(forward_noise(z_y, e, abar)?),
        None => None,
    };
    let recon_target = target_for(p, z_x, e, abar)?;
    let anno_target = target_for(p, z_y, e, abar)?;
    let out_x = net.forward(tape, noisy.as_ref(), z_x, t, TaskSwitch::Reconstruct)?;
    let recon = tape.mse(out_x, &recon_target)?;
    let out_y = net.forward(tape, noisy.as_ref(), z_x, t, TaskSwitch::Annotate)?;
    let anno = tape.mse(out_y, &anno_target)?;
    let total = tape.add(recon, anno)?;
    Ok(PreserverLoss { total, recon, anno })
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub recon_loss: Option<f64>,
    pub anno_loss: Option<f64>,
    pub val_absrel: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub protocol: String,
    pub param_count: usize,
    pub lr: f64,
    pub notes: Vec<String>,
    pub rows: Vec<LogRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9e}")).unwrap_or_default()
}

impl TrainLog {
    /// `step,loss,recon_loss,anno_loss,val_absrel,seconds`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,recon_loss,anno_loss,val_absrel,seconds\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.9e},{},{},{},{:.6}",
                r.step,
                r.loss,
                opt(r.recon_loss),
                opt(r.anno_loss),
                opt(r.val_absrel),
                r.seconds
            );
        }
        s
    }

    /// Mean loss over the first and last `window` steps.
    pub fn loss_ends(&self, window: usize) -> (f64, f64) {
        let n = self.rows.len();
        let w = window.min(n / 2).max(1);
        let mean = |rows: &[LogRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
        (mean(&self.rows[..w]), mean(&self.rows[n - w..]))
    }

    /// Last recorded validation score.
    pub fn final_validation(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.val_absrel)
    }
}

/// Model metadata stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub protocol: ProtocolConfig,
    pub param_count: usize,
    /// Annotation range that `[-1, 1]` outputs are mapped back to.
    pub output_range: (f64, f64),
}

impl ModelMeta {
    pub fn new(protocol: &ProtocolConfig, param_count: usize) -> Self {
        let output_range = match protocol.task {
            AnnotationTask::DepthDisparity => (1.0 / crate::scenes::DEPTH_MAX, 1.0 / crate::scenes::DEPTH_MIN),
            AnnotationTask::Depth => (crate::scenes::DEPTH_MIN, crate::scenes::DEPTH_MAX),
            AnnotationTask::Normals => (-1.0, 1.0),
        };
        ModelMeta { protocol: protocol.clone(), param_count, output_range }
    }
}

/// A trained model with its optimizer state and log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: DenoiserNet,
    pub adam: AdamState,
    pub log: TrainLog,
}

impl TrainOutcome {
    pub fn checkpoint(&self, protocol: &ProtocolConfig) -> Result<Checkpoint> {
        let meta = ModelMeta::new(protocol, self.net.param_count());
        Ok(Checkpoint {
            metadata: serde_json::to_string(&meta)?,
            params: self.net.params().clone(),
            adam: Some(self.adam.clone()),
        })
    }
}

/// Rebuilds a net and its protocol from a checkpoint.
pub fn net_from_checkpoint(ck: &Checkpoint) -> Result<(DenoiserNet, ModelMeta)> {
    let meta: ModelMeta = serde_json::from_str(&ck.metadata)
        .map_err(|e| Error::Format { what: "checkpoint metadata", detail: e.to_string() })?;
    let net = DenoiserNet::from_params(meta.protocol.net.clone(), ck.params.clone())?;
    Ok((net, meta))
}

/// Pools of training sample indices per domain.
fn domain_pools(samples: &[Sample]) -> [Vec<usize>; 2] {
    let mut pools = [Vec::new(), Vec::new()];
    for (i, s) in samples.iter().enumerate() {
        let k = if s.domain == Domain::AIndoorLike { 0 } else { 1 };
        pools[k].push(i);
    }
    pools
}

/// Indices of one training batch.
fn draw_batch(cfg: &ProtocolConfig, pools: &[Vec<usize>; 2], all: usize, rng: RandomSource) -> Result<Vec<usize>> {
    let mut r = rng.derive_named("index").rng();
    let pick = |pool: &[usize], r: &mut rand_chacha::ChaCha8Rng| pool[r.random_range(0..pool.len())];
    match cfg.mixture {
        None => {
            let pool: Vec<usize> = if pools[0].is_empty() { (0..all).collect() } else { pools[0].clone() };
            Ok((0..cfg.batch_size).map(|_| pick(&pool, &mut r)).collect())
        }
        Some(probs) => {
            let choose = |k: u64| -> Result<usize> {
                let mut p = probs;
                for (i, pool) in pools.iter().enumerate() {
                    if pool.is_empty() {
                        p[i] = 0.0;
                    }
                }
                let total: f64 = p.iter().sum();
                if total <= 0.0 {
                    return Err(Error::MissingData("no training samples in any mixture domain".into()));
                }
                choose_by_probability(&[p[0] / total, 1.0 - p[0] / total], rng.derive_named("source").derive(k))
            };
            let batch_src = choose(u64::MAX)?;
            (0..cfg.batch_size)
                .map(|i| {
                    let src = match cfg.mixture_mode {
                        MixtureMode::PerBatch => batch_src,
                        MixtureMode::PerSample => choose(i as u64)?,
                    };
                    Ok(pick(&pools[src], &mut r))
                })
                .collect()
        }
    }
}

/// Per-sample loss values and parameter gradients.
struct SampleGrad {
    loss: f64,
    recon: Option<f64>,
    anno: Option<f64>,
    grads: Vec<Grid>,
}

fn sample_grad(
    cfg: &ProtocolConfig,
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    steps: &[usize],
    z_x: &Grid,
    z_y: &Grid,
    rng: RandomSource,
) -> Result<SampleGrad> {
    let mut tape = Tape::new();
    let t = if cfg.t_prime == 1 {
        cfg.single_step()
    } else {
        steps[rng.derive_named("t").rng().random_range(0..steps.len())]
    };
    let noise = rng.derive_named("noise");
    let (loss, recon, anno) = if cfg.preserver {
        let l = preserver_loss(&mut tape, net, sched, cfg.parameterization, t, z_x, z_y, noise)?;
        (l.total, Some(tape.value(l.recon).data()[0]), Some(tape.value(l.anno).data()[0]))
    } else {
        (standard_loss(&mut tape, net, sched, cfg.parameterization, z_x, z_y, t, noise)?, None, None)
    };
    let grads = tape.backward(loss)?;
    let mut acc = net.params().zeros_like();
    grads.accumulate_params(&tape, &mut acc);
    Ok(SampleGrad { loss: tape.value(loss).data()[0], recon, anno, grads: acc })
}

/// Runs `cfg` on `train` and scores validation on `held_out`.
///
/// Deterministic in `(cfg, train, held_out)`: each step's batch, noise and
/// time steps come from streams keyed by the step index, and per-sample
/// gradients are summed in batch order.
pub fn train_protocol(cfg: &ProtocolConfig, train: &[Sample], held_out: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::MissingData("training set is empty".into()));
    }
    let sched = cfg.schedule.build()?;
    let steps = subsequence(cfg.schedule.total_steps, cfg.t_prime)?.steps;
    let root = RandomSource::new(cfg.seed, 0);
    let mut net = DenoiserNet::init(cfg.net.clone(), root.derive_named("init"), cfg.init)?;
    let mut adam = AdamState::new(net.params().values());
    let pools = domain_pools(train);
    let targets: Vec<(Grid, Grid)> =
        train.iter().map(|s| Ok((image_latent(&s.image), annotation_target(s, cfg.task)?))).collect::<Result<_>>()?;
    let mut log = TrainLog {
        protocol: cfg.name.clone(),
        param_count: net.param_count(),
        lr: cfg.lr,
        notes: cfg.non_canonical(),
        rows: Vec::with_capacity(cfg.steps),
    };
    let val: &[Sample] = &held_out[..cfg.validation_count.min(held_out.len())];

    for step in 0..cfg.steps {
        let started = Instant::now();
        let srng = root.derive_named("step").derive(step as u64);
        let batch = draw_batch(cfg, &pools, train.len(), srng)?;
        let per: Vec<SampleGrad> = batch
            .par_iter()
            .enumerate()
            .map(|(i, &idx)| {
                let (zx, zy) = &targets[idx];
                sample_grad(cfg, &net, &sched, &steps, zx, zy, srng.derive_named("sample").derive(i as u64))
            })
            .collect::<Result<_>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grads = net.params().zeros_like();
        let (mut loss, mut recon, mut anno) = (0.0, 0.0, 0.0);
        for s in &per {
            loss += s.loss * scale;
            recon += s.recon.unwrap_or(0.0) * scale;
            anno += s.anno.unwrap_or(0.0) * scale;
            for (g, d) in grads.iter_mut().zip(&s.grads) {
                for (a, b) in g.data_mut().iter_mut().zip(d.data()) {
                    *a += b * scale;
                }
            }
        }
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, detail: format!("protocol {:?}: loss = {loss}", cfg.name) });
        }
        adam_step(net.params_mut().values_mut(), &grads, &mut adam, cfg.lr)?;

        let last = step + 1 == cfg.steps;
        let validate =
            !val.is_empty() && ((cfg.validation_every > 0 && (step + 1) % cfg.validation_every == 0) || last);
        let val_absrel = if validate {
            Some(eval::validation_score(&net, cfg, &sched, val, root.derive_named("validation"))?)
        } else {
            None
        };
        log.rows.push(LogRow {
            step,
            loss,
            recon_loss: cfg.preserver.then_some(recon),
            anno_loss: cfg.preserver.then_some(anno),
            val_absrel,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::debug!("{} step {step}: loss {loss:.5}", cfg.name);
    }
    Ok(TrainOutcome { net, adam, log })
}
