use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use densediff::autodiff::Checkpoint;
use densediff::denoiser::DenoiserNet;
use densediff::denoiser::Variant;
use densediff::diffusion::Parameterization;
use densediff::eval::{
    ablate, decode_normals, default_values, edge_uncertainty, evaluate, frequency_report, line_plot_svg,
    predict_annotation, trajectory_csv, trajectory_metrics,
};
use densediff::numerics::{pfm, Grid, RandomSource};
use densediff::scenes::{denormalize_annotation, read_dataset, write_dataset, AnnotationTask, Sample};
use densediff::schedule::subsequence;
use densediff::train::{net_from_checkpoint, train_protocol, ModelMeta};
use densediff::{Error, Result};
use log::{info, warn};

use crate::experiment::{fan_out, io, Resolved};

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

pub fn generate_data(r: &Resolved) -> Result<()> {
    r.write_copy()?;
    for (dir, spec) in [(r.data_dir(), &r.dataset), (r.held_out_dir(), &r.held_out)] {
        let samples = spec.generate()?;
        write_dataset(&dir, spec, &samples)?;
        info!("wrote {} samples to {}", samples.len(), dir.display());
    }
    Ok(())
}

fn training_data(r: &Resolved) -> Result<Vec<Sample>> {
    Ok(read_dataset(&r.data_dir())?.1)
}

/// Held-out samples from disk when generated, otherwise regenerated from the experiment file.
fn held_out_data(r: &Resolved) -> Result<Vec<Sample>> {
    if r.held_out_dir().join(densediff::scenes::MANIFEST_FILE).exists() {
        Ok(read_dataset(&r.held_out_dir())?.1)
    } else {
        r.held_out.generate()
    }
}

pub fn train(r: &Resolved) -> Result<()> {
    let data = training_data(r)?;
    let held = held_out_data(r)?;
    r.write_copy()?;
    info!("training {:?} on {} samples", r.protocol.name, data.len());
    let out = train_protocol(&r.protocol, &data, &held)?;
    let ck = out.checkpoint(&r.protocol)?;
    ck.save(&r.checkpoint_path())?;
    write_text(&r.output_dir.join("train_log.csv"), &out.log.to_csv())?;
    let summary = serde_json::json!({
        "protocol": out.log.protocol,
        "param_count": out.log.param_count,
        "lr": out.log.lr,
        "steps": out.log.rows.len(),
        "final_loss": out.log.rows.last().map(|r| r.loss),
        "final_validation": out.log.final_validation(),
        "notes": out.log.notes,
    });
    write_json(&r.output_dir.join("train_summary.json"), &summary)?;
    for n in &out.log.notes {
        warn!("non-canonical protocol: {n}");
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(DenoiserNet, ModelMeta)> {
    if !path.exists() {
        return Err(Error::MissingData(format!("no checkpoint at {}", path.display())));
    }
    net_from_checkpoint(&Checkpoint::load(path)?)
}

/// Maps a `[-1, 1]` prediction to annotation units recorded in the checkpoint.
fn decode_output(pred: &Grid, meta: &ModelMeta) -> Result<Grid> {
    match meta.protocol.task {
        AnnotationTask::Normals => decode_normals(pred),
        _ => denormalize_annotation(&pred.channel_mean(), meta.output_range.0, meta.output_range.1),
    }
}

pub struct InferArgs<'a> {
    pub ckpt: &'a Path,
    pub image: &'a Path,
    pub seeds: usize,
    pub seed: u64,
    pub out: &'a Path,
}

pub fn infer(a: &InferArgs<'_>) -> Result<Vec<PathBuf>> {
    let (net, meta) = load_model(a.ckpt)?;
    let mut image = pfm::read_pfm(a.image)?;
    if image.channels() == 1 {
        image = image.replicate_channels(3)?;
    }
    fs::create_dir_all(a.out).map_err(|e| io(a.out, e))?;
    let sched = meta.protocol.schedule.build()?;
    let runs: Vec<(PathBuf, RandomSource)> = match meta.protocol.variant {
        Variant::Discriminative => {
            if a.seeds > 1 {
                warn!("discriminative model is deterministic; ignoring {} seeds and writing one prediction", a.seeds);
            }
            vec![(a.out.join("pred.pfm"), RandomSource::new(a.seed, 0))]
        }
        Variant::Generative => (0..a.seeds.max(1))
            .map(|k| (a.out.join(format!("pred_seed{k}.pfm")), RandomSource::new(a.seed, 0).derive(k as u64)))
            .collect(),
    };
    let mut written = Vec::new();
    for (path, rng) in runs {
        let pred = predict_annotation(&net, &meta.protocol, &sched, &image, rng)?;
        pfm::write_pfm(&path, &decode_output(&pred, &meta)?)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AnalysisKind {
    Trajectory,
    Uncertainty,
    Frequency,
    Ablate,
    Eval,
}

fn analysis_seeds(r: &Resolved) -> Vec<u64> {
    (0..r.file.eval.n_seeds).map(|k| fan_out(r.file.seed, &format!("analysis-seed-{k}"))).collect()
}

pub fn analyze(kind: AnalysisKind, r: &Resolved, ckpt: Option<&Path>) -> Result<()> {
    r.write_copy()?;
    let held = held_out_data(r)?;
    let images = &held[..r.file.eval.images.min(held.len())];
    let ckpt_path = ckpt.map(Path::to_path_buf).unwrap_or_else(|| r.checkpoint_path());
    let out = &r.output_dir;
    match kind {
        AnalysisKind::Eval => {
            let (net, meta) = load_model(&ckpt_path)?;
            let sched = meta.protocol.schedule.build()?;
            let report = evaluate(
                &net,
                &meta.protocol,
                &sched,
                images,
                RandomSource::new(fan_out(r.file.seed, "evaluation"), 0),
            )?;
            write_json(&out.join("eval_report.json"), &report)?;
            write_text(&out.join("eval_report.csv"), &report.to_csv())?;
        }
        AnalysisKind::Trajectory => {
            if r.protocol.t_prime == 1 {
                return Err(Error::InvalidArgument(
                    "trajectory study needs a multi-step protocol (t_prime > 1)".into(),
                ));
            }
            let data = training_data(r)?;
            let seeds = analysis_seeds(r);
            let mut series = Vec::new();
            for p in Parameterization::ALL {
                let mut cfg = r.protocol.clone();
                cfg.parameterization = p;
                cfg.name = format!("{}:{}", cfg.name, p.label());
                let trained = train_protocol(&cfg, &data, &held)?;
                let sched = cfg.schedule.build()?;
                let sub =
                    subsequence(cfg.schedule.total_steps, cfg.t_prime.min(densediff::schedule::MAX_INFERENCE_STEPS))?;
                let rows = trajectory_metrics(&trained.net, &sched, &sub, p, cfg.task, images, &seeds)?;
                write_text(&out.join(format!("trajectory_{}.csv", p.label())), &trajectory_csv(&rows, p))?;
                series.push((p.label().to_string(), rows.iter().map(|r| (r.tau as f64, r.mean_absrel)).collect()));
            }
            write_text(
                &out.join("trajectory.svg"),
                &line_plot_svg("AbsRel of the clean estimate per step", "tau", "AbsRel", &series),
            )?;
        }
        AnalysisKind::Uncertainty => {
            let (net, meta) = load_model(&ckpt_path)?;
            let sched = meta.protocol.schedule.build()?;
            let seeds = analysis_seeds(r);
            let mut csv = String::from("index,edge_mean,interior_mean\n");
            for (i, s) in images.iter().enumerate() {
                let (unc, means) = edge_uncertainty(&net, &meta.protocol, &sched, s, &seeds)?;
                pfm::write_pfm(&out.join(format!("uncertainty_{i:04}.pfm")), &unc)?;
                let _ = match means {
                    Some((e, n)) => writeln!(csv, "{i},{e:.9e},{n:.9e}"),
                    None => writeln!(csv, "{i},,"),
                };
            }
            write_text(&out.join("uncertainty.csv"), &csv)?;
        }
        AnalysisKind::Frequency => {
            let (net, meta) = load_model(&ckpt_path)?;
            let sched = meta.protocol.schedule.build()?;
            let rng = RandomSource::new(fan_out(r.file.seed, "evaluation"), 0);
            let report = frequency_report(&net, &meta.protocol, &sched, images, rng, r.file.eval.band_size)?;
            write_text(&out.join("band_ratio.csv"), &report.to_csv())?;
        }
        AnalysisKind::Ablate => {
            let section = r
                .file
                .eval
                .ablation
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("eval.ablation: required for ablate".into()))?;
            let values = section.values.clone().unwrap_or_else(|| default_values(section.axis));
            let data = training_data(r)?;
            let table = ablate(section.axis, &r.protocol, &values, &data, images)?;
            let axis = serde_json::to_value(section.axis)?.as_str().unwrap_or("axis").to_string();
            write_text(&out.join(format!("ablation_{axis}.csv")), &table.to_csv())?;
            write_json(&out.join(format!("ablation_{axis}.json")), &table)?;
        }
    }
    Ok(())
}
