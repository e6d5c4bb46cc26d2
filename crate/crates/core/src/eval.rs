//! Dense-prediction metrics and the analyses built on them: trajectory
//! error per denoising step, seed uncertainty, frequency-band energy and
//! training ablations.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserNet, Variant};
use crate::diffusion::{sample, single_step_infer_at, Denoiser, Parameterization, SamplerOptions};
use crate::error::{Error, Result};
use crate::numerics::{band_energy, band_partition, fft2_power, is_valid, lstsq_scale_shift, Grid, RandomSource};
use crate::scenes::{annotation_target, AnnotationTask, Sample, DEPTH_MAX, DEPTH_MIN};
use crate::schedule::{inference_subsequence, NoiseSchedule, StepSubsequence};
use crate::train::{image_latent, train_protocol, ProtocolConfig, TrainLog};

fn check_masked(pred: &Grid, gt: &Grid, mask: &Grid, op: &'static str) -> Result<()> {
    pred.ensure_shape(gt, op)?;
    if mask.height() != pred.height() || mask.width() != pred.width() || mask.channels() != 1 {
        return Err(Error::shape(op, format!("{}x{}x1 mask", pred.height(), pred.width()), mask.shape()));
    }
    Ok(())
}

/// `scale * pred + shift` with the least-squares fit over `mask`.
pub fn align_affine(pred: &Grid, gt: &Grid, mask: &Grid) -> Result<Grid> {
    let (s, b) = lstsq_scale_shift(pred, gt, mask)?;
    Ok(pred.map(|v| s * v + b))
}

/// Masked mean of `|pred - gt| / gt`.
pub fn absrel(pred: &Grid, gt: &Grid, mask: &Grid) -> Result<f64> {
    check_masked(pred, gt, mask, "absrel")?;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        if is_valid(m) {
            if !(g > 0.0) {
                return Err(Error::InvalidArgument(format!("ground truth {g} <= 0 under mask")));
            }
            sum += (p - g).abs() / g;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("absrel over an empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// Fraction of masked pixels with `max(pred/gt, gt/pred) < thresh`.
pub fn delta_acc(pred: &Grid, gt: &Grid, mask: &Grid, thresh: f64) -> Result<f64> {
    check_masked(pred, gt, mask, "delta_acc")?;
    let (mut hit, mut n) = (0usize, 0usize);
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        if is_valid(m) {
            if !(p > 0.0 && g > 0.0) {
                return Err(Error::InvalidArgument(format!("nonpositive depth under mask (pred {p}, gt {g})")));
            }
            if (p / g).max(g / p) < thresh {
                hit += 1;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("delta accuracy over an empty mask".into()));
    }
    Ok(hit as f64 / n as f64)
}

/// Angular error statistics of predicted normals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalScores {
    pub mean_deg: f64,
    pub pct_below_11_25: f64,
    pub pct_below_30: f64,
    /// Pixels scored.
    pub n: usize,
    /// Masked pixels skipped because the prediction was the zero vector.
    pub excluded: usize,
}

pub fn normal_metrics(pred: &Grid, gt: &Grid, mask: &Grid) -> Result<NormalScores> {
    pred.ensure_channels(3, "normal_metrics")?;
    check_masked(pred, gt, mask, "normal_metrics")?;
    let (mut sum, mut below11, mut below30, mut n, mut excluded) = (0.0, 0usize, 0usize, 0usize, 0usize);
    for (px, &m) in mask.data().iter().enumerate() {
        if !is_valid(m) {
            continue;
        }
        let p = &pred.data()[3 * px..3 * px + 3];
        let g = &gt.data()[3 * px..3 * px + 3];
        let len = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if len == 0.0 || !len.is_finite() {
            excluded += 1;
            continue;
        }
        let dot = (p[0] * g[0] + p[1] * g[1] + p[2] * g[2]) / len;
        let deg = dot.clamp(-1.0, 1.0).acos().to_degrees();
        sum += deg;
        below11 += (deg < 11.25) as usize;
        below30 += (deg < 30.0) as usize;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Degenerate("no scorable normal under the mask".into()));
    }
    let nf = n as f64;
    Ok(NormalScores {
        mean_deg: sum / nf,
        pct_below_11_25: below11 as f64 / nf,
        pct_below_30: below30 as f64 / nf,
        n,
        excluded,
    })
}

/// Depth scores of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthScores {
    /// AbsRel on depth after aligning in the prediction's own space.
    pub absrel: f64,
    /// AbsRel in the prediction's own space (disparity or depth).
    pub absrel_native: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub n: usize,
}

/// Aligns a `[-1, 1]` depth-like prediction (any channel count; channels are
/// averaged) to the sample's ground truth in the space of `task`, converts
/// it to depth and scores it.
pub fn score_depth(pred: &Grid, s: &Sample, task: AnnotationTask) -> Result<DepthScores> {
    let p = if pred.channels() == 1 { pred.clone() } else { pred.channel_mean() };
    let (native_gt, to_depth): (&Grid, fn(f64) -> f64) = match task {
        AnnotationTask::Depth => (&s.depth, |v| v.clamp(DEPTH_MIN, DEPTH_MAX)),
        AnnotationTask::DepthDisparity => (&s.disparity, |v| 1.0 / v.clamp(1.0 / DEPTH_MAX, 1.0 / DEPTH_MIN)),
        AnnotationTask::Normals => return Err(Error::InvalidArgument("depth scores of a normals model".into())),
    };
    let aligned = align_affine(&p, native_gt, &s.mask)?;
    let absrel_native = absrel(&aligned, native_gt, &s.mask)?;
    let depth = aligned.map(to_depth);
    Ok(DepthScores {
        absrel: absrel(&depth, &s.depth, &s.mask)?,
        absrel_native,
        delta1: delta_acc(&depth, &s.depth, &s.mask, 1.25)?,
        delta2: delta_acc(&depth, &s.depth, &s.mask, 1.25 * 1.25)?,
        n: s.mask.data().iter().filter(|&&m| is_valid(m)).count(),
    })
}

/// Unit normals from a `[-1, 1]` prediction; zero vectors stay zero.
pub fn decode_normals(pred: &Grid) -> Result<Grid> {
    pred.ensure_channels(3, "decode_normals")?;
    let mut out = pred.clone();
    for px in out.data_mut().chunks_mut(3) {
        let len = (px[0] * px[0] + px[1] * px[1] + px[2] * px[2]).sqrt();
        if len > 0.0 {
            px.iter_mut().for_each(|v| *v /= len);
        }
    }
    Ok(out)
}

/// Prediction of a trained model for one image, in `[-1, 1]`.
///
/// Single-step protocols make one call at their training step; multi-step
/// protocols run DDIM along the inference sub-sequence.
pub fn predict_annotation(
    net: &DenoiserNet,
    cfg: &ProtocolConfig,
    sched: &NoiseSchedule,
    image: &Grid,
    rng: RandomSource,
) -> Result<Grid> {
    let z_x = image_latent(image);
    let opts = cfg.sampler_options();
    if cfg.t_prime == 1 {
        single_step_infer_at(net, &z_x, sched, cfg.single_step(), Some(rng), &opts)
    } else {
        let sub = inference_subsequence(cfg.schedule.total_steps, cfg.t_prime)?;
        Ok(sample(net, &z_x, sched, &sub, &opts, rng, false)?.0)
    }
}

/// Held-out score logged during training: mean depth AbsRel, or mean
/// angular error for normals.
pub fn validation_score(
    net: &DenoiserNet,
    cfg: &ProtocolConfig,
    sched: &NoiseSchedule,
    samples: &[Sample],
    rng: RandomSource,
) -> Result<f64> {
    let report = evaluate(net, cfg, sched, samples, rng)?;
    Ok(if cfg.task.is_depth() {
        report.absrel.unwrap_or(f64::NAN)
    } else {
        report.mean_angular_deg.unwrap_or(f64::NAN)
    })
}

/// Per-image line of an [`EvalReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub index: usize,
    pub depth: Option<DepthScores>,
    pub normals: Option<NormalScores>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub absrel: Option<f64>,
    pub absrel_native: Option<f64>,
    pub delta1: Option<f64>,
    pub delta2: Option<f64>,
    pub mean_angular_deg: Option<f64>,
    pub pct_below_11_25: Option<f64>,
    pub pct_below_30: Option<f64>,
    pub n_pixels: usize,
    pub n_excluded: usize,
    pub per_image: Vec<ImageScore>,
}

impl EvalReport {
    /// Pixel-weighted aggregate of per-image scores.
    pub fn from_images(per_image: Vec<ImageScore>) -> Self {
        let mut r = EvalReport::default();
        let depth: Vec<&DepthScores> = per_image.iter().filter_map(|s| s.depth.as_ref()).collect();
        if !depth.is_empty() {
            let n: usize = depth.iter().map(|d| d.n).sum();
            let w = |f: fn(&DepthScores) -> f64| depth.iter().map(|d| f(d) * d.n as f64).sum::<f64>() / n as f64;
            r.absrel = Some(w(|d| d.absrel));
            r.absrel_native = Some(w(|d| d.absrel_native));
            r.delta1 = Some(w(|d| d.delta1));
            r.delta2 = Some(w(|d| d.delta2));
            r.n_pixels = n;
        }
        let normals: Vec<&NormalScores> = per_image.iter().filter_map(|s| s.normals.as_ref()).collect();
        if !normals.is_empty() {
            let n: usize = normals.iter().map(|d| d.n).sum();
            let w = |f: fn(&NormalScores) -> f64| normals.iter().map(|d| f(d) * d.n as f64).sum::<f64>() / n as f64;
            r.mean_angular_deg = Some(w(|d| d.mean_deg));
            r.pct_below_11_25 = Some(w(|d| d.pct_below_11_25));
            r.pct_below_30 = Some(w(|d| d.pct_below_30));
            r.n_pixels = n;
            r.n_excluded = normals.iter().map(|d| d.excluded).sum();
        }
        r.per_image = per_image;
        r
    }

    /// `metric,value,n` rows for every metric present.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value,n\n");
        let rows = [
            ("absrel", self.absrel),
            ("absrel_native", self.absrel_native),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("mean_angular_deg", self.mean_angular_deg),
            ("pct_below_11_25", self.pct_below_11_25),
            ("pct_below_30", self.pct_below_30),
        ];
        for (name, v) in rows {
            if let Some(v) = v {
                let _ = writeln!(s, "{name},{v:.9e},{}", self.n_pixels);
            }
        }
        if self.mean_angular_deg.is_some() {
            let _ = writeln!(s, "excluded_pixels,{},{}", self.n_excluded, self.n_pixels);
        }
        s
    }
}

/// Scores one prediction against a sample for `task`.
pub fn score_prediction(pred: &Grid, s: &Sample, task: AnnotationTask, index: usize) -> Result<ImageScore> {
    Ok(match task {
        AnnotationTask::Normals => ImageScore {
            index,
            depth: None,
            normals: Some(normal_metrics(&decode_normals(pred)?, &s.normals, &s.mask)?),
        },
        _ => ImageScore { index, depth: Some(score_depth(pred, s, task)?), normals: None },
    })
}

/// Predicts every sample (image `i` uses stream `rng.derive(i)`) and scores it.
pub fn evaluate(
    net: &DenoiserNet,
    cfg: &ProtocolConfig,
    sched: &NoiseSchedule,
    samples: &[Sample],
    rng: RandomSource,
) -> Result<EvalReport> {
    let per: Vec<ImageScore> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let pred = predict_annotation(net, cfg, sched, &s.image, rng.derive(i as u64))?;
            score_prediction(&pred, s, cfg.task, i)
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_images(per))
}

/// Error of the clean estimate at one denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub tau: usize,
    /// Mean AbsRel over images and seeds.
    pub mean_absrel: f64,
    /// Across-seed standard deviation of per-image AbsRel, averaged over images.
    pub std_absrel: f64,
}

/// Runs DDIM with each seed on each image, scoring every step's clean
/// estimate (aligned per step). Image `j` under seed `s` uses stream
/// `RandomSource::new(s, 0).derive(j)`.
pub fn trajectory_metrics(
    net: &dyn Denoiser,
    sched: &NoiseSchedule,
    subseq: &StepSubsequence,
    p: Parameterization,
    task: AnnotationTask,
    samples: &[Sample],
    seeds: &[u64],
) -> Result<Vec<TrajectoryRow>> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument("trajectory study needs at least 2 seeds".into()));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("trajectory study over zero images".into()));
    }
    let opts = SamplerOptions::new(p);
    let jobs: Vec<(usize, usize)> = (0..seeds.len()).flat_map(|s| (0..samples.len()).map(move |j| (s, j))).collect();
    // scores[job][step], steps in sampling order (largest tau first)
    let scores: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(s, j)| {
            let smp = &samples[j];
            let rng = RandomSource::new(seeds[s], 0).derive(j as u64);
            let (_, rec) = sample(net, &image_latent(&smp.image), sched, subseq, &opts, rng, true)?;
            let rec = rec.expect("recording was requested");
            rec.z_hats.iter().map(|zh| Ok(score_depth(zh, smp, task)?.absrel)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let taus: Vec<usize> = subseq.steps.iter().rev().copied().collect();
    let (ns, ni) = (seeds.len(), samples.len());
    Ok(taus
        .iter()
        .enumerate()
        .map(|(k, &tau)| {
            let at = |s: usize, j: usize| scores[s * ni + j][k];
            let mean = (0..ns).flat_map(|s| (0..ni).map(move |j| (s, j))).map(|(s, j)| at(s, j)).sum::<f64>()
                / (ns * ni) as f64;
            let std = (0..ni)
                .map(|j| {
                    let m = (0..ns).map(|s| at(s, j)).sum::<f64>() / ns as f64;
                    ((0..ns).map(|s| (at(s, j) - m).powi(2)).sum::<f64>() / (ns - 1) as f64).sqrt()
                })
                .sum::<f64>()
                / ni as f64;
            TrajectoryRow { tau, mean_absrel: mean, std_absrel: std }
        })
        .collect())
}

/// `tau,mean_absrel,std_absrel,param`
pub fn trajectory_csv(rows: &[TrajectoryRow], p: Parameterization) -> String {
    let mut s = String::from("tau,mean_absrel,std_absrel,param\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.9e},{:.9e},{}", r.tau, r.mean_absrel, r.std_absrel, p.label());
    }
    s
}

/// Per-pixel across-seed standard deviation of single-step predictions
/// (channel-averaged). Seed `k` draws its noise from `RandomSource::new(seeds[k], 0)`.
pub fn uncertainty_map(
    net: &dyn Denoiser,
    z_x: &Grid,
    sched: &NoiseSchedule,
    t: usize,
    opts: &SamplerOptions,
    seeds: &[u64],
) -> Result<Grid> {
    if net.variant() == Variant::Discriminative {
        return Err(Error::InvalidArgument(
            "a discriminative net is deterministic; its uncertainty is undefined".into(),
        ));
    }
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument("uncertainty needs at least 2 seeds".into()));
    }
    let preds: Vec<Grid> = seeds
        .iter()
        .map(|&s| Ok(single_step_infer_at(net, z_x, sched, t, Some(RandomSource::new(s, 0)), opts)?.channel_mean()))
        .collect::<Result<_>>()?;
    let n = preds.len() as f64;
    let mut out = Grid::zeros(z_x.height(), z_x.width(), 1);
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let m = preds.iter().map(|p| p.data()[i]).sum::<f64>() / n;
        *v = (preds.iter().map(|p| (p.data()[i] - m).powi(2)).sum::<f64>() / n).sqrt();
    }
    Ok(out)
}

/// Pixels within `radius` (Chebyshev) of a depth discontinuity, where a jump
/// to a 4-neighbour exceeds `rel_jump` of the masked depth range. Pixels
/// outside `mask` never count as edges.
pub fn edge_band(depth: &Grid, mask: &Grid, rel_jump: f64, radius: usize) -> Result<Grid> {
    depth.ensure_channels(1, "edge_band")?;
    depth.ensure_shape(mask, "edge_band")?;
    let (h, w) = (depth.height(), depth.width());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&d, &m) in depth.data().iter().zip(mask.data()) {
        if is_valid(m) {
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    let jump = rel_jump * (hi - lo);
    let mut seed = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = depth.get(y, x, 0);
            for (yy, xx) in [(y + 1, x), (y, x + 1)] {
                if yy < h && xx < w && (depth.get(yy, xx, 0) - d).abs() > jump {
                    seed[y * w + x] = true;
                    seed[yy * w + xx] = true;
                }
            }
        }
    }
    let r = radius as isize;
    Ok(Grid::from_fn(h, w, 1, |y, x, _| {
        if !is_valid(mask.get(y, x, 0)) {
            return 0.0;
        }
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && seed[yy as usize * w + xx as usize] {
                    return 1.0;
                }
            }
        }
        0.0
    }))
}

/// Mean uncertainty in the edge band and in the remaining valid interior.
pub fn edge_interior_means(unc: &Grid, band: &Grid, mask: &Grid) -> Result<(f64, f64)> {
    unc.ensure_shape(band, "edge_interior_means")?;
    let (mut se, mut ne, mut si, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for ((&u, &b), &m) in unc.data().iter().zip(band.data()).zip(mask.data()) {
        if !is_valid(m) {
            continue;
        }
        if b > 0.5 {
            se += u;
            ne += 1;
        } else {
            si += u;
            ni += 1;
        }
    }
    if ne == 0 || ni == 0 {
        return Err(Error::Degenerate("scene has no edge band or no interior".into()));
    }
    Ok((se / ne as f64, si / ni as f64))
}

/// One frequency group of a [`BandRatioReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub group: usize,
    pub radius_lo: f64,
    pub radius_hi: f64,
    /// Mean energies over the set.
    pub image_energy: f64,
    pub pred_energy: f64,
    pub gt_energy: f64,
    /// Mean over images of per-image ratios; `None` for empty groups.
    pub pred_gt_ratio: Option<f64>,
    pub image_gt_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRatioReport {
    pub size: usize,
    pub rows: Vec<BandRow>,
}

pub const BAND_GROUPS: usize = 8;

impl BandRatioReport {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("group,radius_lo,radius_hi,image_energy,pred_energy,gt_energy,pred_gt_ratio,image_gt_ratio\n");
        let o = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.9e},{:.9e},{:.9e},{},{}",
                r.group,
                r.radius_lo,
                r.radius_hi,
                r.image_energy,
                r.pred_energy,
                r.gt_energy,
                o(r.pred_gt_ratio),
                o(r.image_gt_ratio)
            );
        }
        s
    }
}

/// Per-group spectral energy of images, predictions and ground truths,
/// each channel-averaged and zero-padded to `size x size` (a power of two).
pub fn band_ratio_report(preds: &[Grid], gts: &[Grid], images: &[Grid], size: usize) -> Result<BandRatioReport> {
    if preds.len() != gts.len() || preds.len() != images.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "band report needs equal nonzero counts, got {} / {} / {}",
            preds.len(),
            gts.len(),
            images.len()
        )));
    }
    let bands = band_partition(size, size, 2.0, BAND_GROUPS)?;
    let energy = |g: &Grid| -> Result<Vec<f64>> {
        let g = if g.channels() == 1 { g.clone() } else { g.channel_mean() };
        band_energy(&fft2_power(&g.pad_to(size, size)?)?, &bands)
    };
    let sizes = bands.group_sizes();
    let mut sums = [[0.0f64; 3]; BAND_GROUPS];
    let mut ratios = [[0.0f64; 2]; BAND_GROUPS];
    for ((p, g), x) in preds.iter().zip(gts).zip(images) {
        if p.height() != g.height() || p.width() != g.width() || x.height() != g.height() || x.width() != g.width() {
            return Err(Error::shape("band_ratio_report", g.shape(), p.shape()));
        }
        let (ep, eg, ex) = (energy(p)?, energy(g)?, energy(x)?);
        for k in 0..BAND_GROUPS {
            sums[k][0] += ex[k];
            sums[k][1] += ep[k];
            sums[k][2] += eg[k];
            ratios[k][0] += ep[k] / eg[k];
            ratios[k][1] += ex[k] / eg[k];
        }
    }
    let n = preds.len() as f64;
    let rows = (0..BAND_GROUPS)
        .map(|k| {
            let (lo, hi) = bands.bounds(k);
            let filled = sizes[k] > 0;
            BandRow {
                group: k,
                radius_lo: lo,
                radius_hi: hi,
                image_energy: sums[k][0] / n,
                pred_energy: sums[k][1] / n,
                gt_energy: sums[k][2] / n,
                pred_gt_ratio: filled.then(|| ratios[k][0] / n),
                image_gt_ratio: filled.then(|| ratios[k][1] / n),
            }
        })
        .collect();
    Ok(BandRatioReport { size, rows })
}

/// Band report of a trained model's affinely aligned predictions on `samples`.
pub fn frequency_report(
    net: &DenoiserNet,
    cfg: &ProtocolConfig,
    sched: &NoiseSchedule,
    samples: &[Sample],
    rng: RandomSource,
    size: usize,
) -> Result<BandRatioReport> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    let mut imgs = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let pred = predict_annotation(net, cfg, sched, &s.image, rng.derive(i as u64))?;
        let gt = annotation_target(s, cfg.task)?.channel_mean();
        preds.push(align_affine(&pred.channel_mean(), &gt, &s.mask)?);
        gts.push(gt);
        imgs.push(image_latent(&s.image).channel_mean());
    }
    band_ratio_report(&preds, &gts, &imgs, size)
}

/// Relative jump and dilation radius of the depth-discontinuity band used by
/// [`edge_uncertainty`].
pub const EDGE_REL_JUMP: f64 = 0.1;
pub const EDGE_RADIUS: usize = 2;

/// Uncertainty map of one sample with its edge-band and interior means
/// (`None` when the scene has no edge band or no interior).
pub fn edge_uncertainty(
    net: &DenoiserNet,
    cfg: &ProtocolConfig,
    sched: &NoiseSchedule,
    s: &Sample,
    seeds: &[u64],
) -> Result<(Grid, Option<(f64, f64)>)> {
    let unc = uncertainty_map(net, &image_latent(&s.image), sched, cfg.single_step(), &cfg.sampler_options(), seeds)?;
    let band = edge_band(&s.depth, &s.mask, EDGE_REL_JUMP, EDGE_RADIUS)?;
    let means = match edge_interior_means(&unc, &band, &s.mask) {
        Ok(m) => Some(m),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((unc, means))
}

/// Ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Training sub-sequence length `T'`.
    TPrimeSweep,
    /// Single-step training step `t` (with `T' = 1`).
    TChoiceSweep,
    /// The named protocol ladder.
    Ladder,
}

pub const T_PRIME_VALUES: [usize; 4] = [1000, 100, 10, 1];
pub const T_CHOICE_VALUES: [usize; 5] = [1000, 750, 500, 250, 1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub report: EvalReport,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// `axis,label,absrel,delta1,delta2,mean_angular_deg,final_loss,param_count`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis,label,absrel,delta1,delta2,mean_angular_deg,final_loss,param_count\n");
        let o = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        let axis =
            serde_json::to_value(self.axis).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{axis},{},{},{},{},{},{},{}",
                r.label,
                o(r.report.absrel),
                o(r.report.delta1),
                o(r.report.delta2),
                o(r.report.mean_angular_deg),
                o(r.log.rows.last().map(|l| l.loss)),
                r.log.param_count
            );
        }
        s
    }

    pub fn absrel(&self, label: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.label == label).and_then(|r| r.report.absrel)
    }
}

/// The configuration of one ablation value, derived from `base`.
pub fn ablation_config(axis: AblationAxis, base: &ProtocolConfig, value: &str) -> Result<ProtocolConfig> {
    let bad = || Error::InvalidArgument(format!("{value:?} is not a valid value for {axis:?}"));
    let mut c = base.clone();
    match axis {
        AblationAxis::TPrimeSweep => {
            c.t_prime = value.parse().map_err(|_| bad())?;
            c.fixed_t = None;
        }
        AblationAxis::TChoiceSweep => {
            c.t_prime = 1;
            c.fixed_t = Some(value.parse().map_err(|_| bad())?);
        }
        AblationAxis::Ladder => {
            let mut p = ProtocolConfig::preset(value)?;
            p.steps = base.steps;
            p.batch_size = base.batch_size;
            p.lr = base.lr;
            p.seed = base.seed;
            p.schedule = base.schedule;
            p.net = crate::denoiser::NetConfig { variant: p.variant, ..base.net.clone() };
            p.validation_every = base.validation_every;
            p.validation_count = base.validation_count;
            c = p;
        }
    }
    c.name = format!("{}:{value}", base.name);
    c.validate()?;
    Ok(c)
}

/// Default values of an axis.
pub fn default_values(axis: AblationAxis) -> Vec<String> {
    match axis {
        AblationAxis::TPrimeSweep => T_PRIME_VALUES.iter().map(|v| v.to_string()).collect(),
        AblationAxis::TChoiceSweep => T_CHOICE_VALUES.iter().map(|v| v.to_string()).collect(),
        AblationAxis::Ladder => crate::train::LADDER.iter().map(|v| v.to_string()).collect(),
    }
}

/// Trains one model per value (all sharing `base.seed`) and evaluates each
/// on `held_out` with the same inference streams.
pub fn ablate(
    axis: AblationAxis,
    base: &ProtocolConfig,
    values: &[String],
    train: &[Sample],
    held_out: &[Sample],
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let cfg = ablation_config(axis, base, v)?;
        let out = train_protocol(&cfg, train, held_out)?;
        let sched = cfg.schedule.build()?;
        let report =
            evaluate(&out.net, &cfg, &sched, held_out, RandomSource::new(base.seed, 0).derive_named("evaluation"))?;
        rows.push(AblationRow { label: v.clone(), report, log: out.log });
    }
    Ok(AblationTable { axis, rows })
}

/// Fixed-layout SVG line plot: 640x400 canvas, 60 px margins, one polyline
/// per series in a fixed palette, legend at the top right.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 60.0;
    const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="30" text-anchor="middle" font-size="16">{}</text>"#, W / 2.0, esc(title));
    let _ = writeln!(s, r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - M, W - M, H - M);
    let _ = writeln!(s, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#, H - M);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
        W / 2.0,
        H - 15.0,
        esc(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 15 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        esc(y_label)
    );
    for (v, anchor, x, y) in [(x0, "start", M, H - M + 15.0), (x1, "end", W - M, H - M + 15.0)] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-size="10">{v:.4}</text>"#);
    }
    for (v, y) in [(y0, H - M), (y1, M)] {
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end" font-size="10">{v:.4}</text>"#, M - 4.0);
    }
    for (k, (label, p)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let coords: Vec<String> = p
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ =
            writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, coords.join(" "));
        let ly = M + 15.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            W - M - 100.0,
            W - M - 80.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11">{}</text>"#, W - M - 75.0, ly + 4.0, esc(label));
    }
    s.push_str("</svg>\n");
    s
}
