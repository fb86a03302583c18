//! The single-run commands: generate, train, eval, predict.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use handprime::eval::{
    evaluate_model, model_probability_maps, postprocess, write_overlay, EvalTask,
};
use handprime::models::Variant;
use handprime::nn::{load_checkpoint, save_checkpoint, ParameterSet};
use handprime::synth::{generate_dataset, read_dataset, write_dataset, Dataset, Split};
use handprime::train::{train_hand_net, train_localization_net, LogEntry};
use handprime::{Error, Result};

use crate::config::RunConfig;

/// Create `dir` if needed; refuse to write into a non-empty one unless
/// `force` is set.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if fs::read_dir(dir)?.next().is_some() && !force {
            return Err(Error::config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub fn generate(mut cfg: RunConfig, out: &Path, force: bool) -> Result<()> {
    prepare_out(out, force)?;
    let ds = generate_dataset(cfg.data.n_scenes, cfg.seed, &cfg.data.scene)?;
    write_dataset(&ds, out)?;
    cfg.data.dataset = None;
    cfg.save(&out.join("config.json"))?;
    println!(
        "wrote {} scenes to {}: {} train, {} val, {} test",
        ds.len(),
        out.display(),
        ds.splits.train.len(),
        ds.splits.val.len(),
        ds.splits.test.len()
    );
    Ok(())
}

/// The trained weights of a checkpoint: the best-validation snapshot when
/// one was kept, the final parameters otherwise.
pub fn best_of(ckpt: &handprime::nn::Checkpoint) -> &ParameterSet {
    ckpt.best_params.as_ref().unwrap_or(&ckpt.params)
}

pub fn train(
    mut cfg: RunConfig,
    data: &Path,
    variant_flag: Option<&str>,
    hand_checkpoint: Option<&Path>,
    preset: Option<&str>,
    out: &Path,
    force: bool,
) -> Result<()> {
    if let Some(p) = preset {
        cfg.train.preset = Some(p.to_owned());
    }
    let name = variant_flag
        .or(cfg.model.variant.as_deref())
        .ok_or_else(|| Error::config("no variant selected; pass --variant or set model.variant"))?
        .to_owned();
    let variant = Variant::parse(&name)?;
    let train_cfg = cfg.resolve_train(variant)?;

    // Resolve the hand checkpoint before any expensive work so a missing
    // one fails immediately.
    let hand_ckpt = match (variant.needs_hand_checkpoint(), hand_checkpoint) {
        (true, None) => {
            return Err(Error::config(format!(
                "variant {variant} needs --hand-checkpoint <dir> from a handseg run"
            )))
        }
        (_, Some(dir)) => Some(load_checkpoint(dir)?),
        (false, None) => None,
    };
    let hand_params = hand_ckpt.as_ref().map(best_of);

    prepare_out(out, force)?;
    let dataset = read_dataset(data)?;
    cfg.model.variant = Some(name);
    cfg.materialize_train(&train_cfg);
    cfg.save(&out.join("config.json"))?;

    let mut log_file = fs::File::create(out.join("train_log.jsonl"))?;
    let mut sink = |e: &LogEntry| {
        let line = serde_json::to_string(e).expect("log entry serializes");
        writeln!(log_file, "{line}").expect("log write");
        eprintln!("{line}");
    };
    let ckpt = if variant == Variant::HandSeg {
        train_hand_net(&dataset, &train_cfg, &mut sink)?
    } else {
        train_localization_net(&dataset, hand_params, variant, &train_cfg, &mut sink)?
    };
    save_checkpoint(out, &ckpt)?;
    match (ckpt.manifest.best_val_miou, ckpt.manifest.best_step) {
        (Some(miou), Some(step)) => println!(
            "trained {variant} for {} steps; best validation mIoU {miou:.4} at step {step}",
            ckpt.manifest.step
        ),
        _ => println!("trained {variant} for {} steps", ckpt.manifest.step),
    }
    Ok(())
}

fn resolve_task(variant: Variant, task_flag: Option<&str>) -> Result<EvalTask> {
    match task_flag {
        Some(t) => EvalTask::parse(t),
        None => Ok(if variant == Variant::HandSeg {
            EvalTask::Hand
        } else {
            EvalTask::Localization
        }),
    }
}

/// Binarized predicted mask for one probability map under the task's
/// extraction rule.
fn predicted_mask(
    task: EvalTask,
    prob: &[f32],
    h: usize,
    w: usize,
    rule: handprime::eval::ConfidenceRule,
) -> handprime::eval::RegionPrediction {
    match task {
        EvalTask::Localization => postprocess(prob, h, w, 0.5, rule),
        EvalTask::Hand => {
            let mask: Vec<u8> = prob.iter().map(|&p| u8::from(p >= 0.5)).collect();
            let kept: Vec<f64> = prob
                .iter()
                .filter(|&&p| p >= 0.5)
                .map(|&p| p as f64)
                .collect();
            let empty = kept.is_empty();
            let confidence = if empty {
                0.0
            } else {
                match rule {
                    handprime::eval::ConfidenceRule::MeanProb => {
                        kept.iter().sum::<f64>() / kept.len() as f64
                    }
                    handprime::eval::ConfidenceRule::MaxProb => {
                        kept.iter().cloned().fold(f64::MIN, f64::max)
                    }
                }
            };
            handprime::eval::RegionPrediction {
                mask,
                confidence,
                empty,
            }
        }
    }
}

struct LoadedRun {
    dataset: Dataset,
    variant: Variant,
    params: ParameterSet,
    batch_size: usize,
}

fn load_run(checkpoint: &Path, data: &Path) -> Result<LoadedRun> {
    let ckpt = load_checkpoint(checkpoint)?;
    let variant = Variant::parse(&ckpt.manifest.variant)?;
    let batch_size = ckpt.manifest.config.batch_size;
    let params = best_of(&ckpt).clone();
    let dataset = read_dataset(data)?;
    Ok(LoadedRun {
        dataset,
        variant,
        params,
        batch_size,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    cfg: RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: &str,
    task_flag: Option<&str>,
    overlays: bool,
    out: &Path,
    force: bool,
) -> Result<()> {
    let split = Split::parse(split)?;
    let run = load_run(checkpoint, data)?;
    let task = resolve_task(run.variant, task_flag)?;
    prepare_out(out, force)?;

    let report = evaluate_model(
        &run.params,
        run.variant,
        &run.dataset,
        split,
        task,
        cfg.eval.confidence_rule,
        run.batch_size,
    )?;
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::config(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    fs::write(out.join("report.json"), text)?;

    if overlays || cfg.eval.overlays {
        let overlay_dir = out.join("overlays");
        fs::create_dir_all(&overlay_dir)?;
        let indices = run.dataset.split_indices(split);
        let maps = model_probability_maps(
            &run.params,
            run.variant,
            task,
            &run.dataset,
            indices,
            run.batch_size,
        )?;
        let (h, w) = (run.dataset.spec.height, run.dataset.spec.width);
        for (k, &i) in indices.iter().enumerate() {
            let pred = predicted_mask(task, &maps[k], h, w, cfg.eval.confidence_rule);
            write_overlay(
                &overlay_dir.join(format!("overlay_{i:06}.ppm")),
                &run.dataset.images[i],
                &pred.mask,
                &run.dataset.hand_masks[i],
            )?;
        }
    }
    println!(
        "{} {} on {}: mIoU {:.4}, AP {:.4}, AP50 {:.4}, AP75 {:.4}",
        report.variant, report.task, report.split, report.miou, report.ap, report.ap50, report.ap75
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct PredictionRecord {
    index: usize,
    confidence: f64,
    empty: bool,
    pixels: usize,
}

pub fn predict(
    cfg: RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: &str,
    task_flag: Option<&str>,
    out: &Path,
    force: bool,
) -> Result<()> {
    let split = Split::parse(split)?;
    let run = load_run(checkpoint, data)?;
    let task = resolve_task(run.variant, task_flag)?;
    prepare_out(out, force)?;

    let indices = run.dataset.split_indices(split);
    let maps = model_probability_maps(
        &run.params,
        run.variant,
        task,
        &run.dataset,
        indices,
        run.batch_size,
    )?;
    let (h, w) = (run.dataset.spec.height, run.dataset.spec.width);
    let mut records = Vec::with_capacity(indices.len());
    for (k, &i) in indices.iter().enumerate() {
        let pred = predicted_mask(task, &maps[k], h, w, cfg.eval.confidence_rule);
        handprime::synth::write_pgm(&out.join(format!("pred_{i:06}.pgm")), &pred.mask, h, w)?;
        records.push(PredictionRecord {
            index: i,
            confidence: pred.confidence,
            empty: pred.empty,
            pixels: pred.mask.iter().filter(|&&m| m != 0).count(),
        });
    }
    let mut text = serde_json::to_string_pretty(&records)
        .map_err(|e| Error::config(format!("cannot serialize predictions: {e}")))?;
    text.push('\n');
    fs::write(out.join("predictions.json"), text)?;
    println!("wrote {} predictions to {}", records.len(), out.display());
    Ok(())
}
