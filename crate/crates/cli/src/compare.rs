//! The full experiment: one shared dataset, a hand network per seed,
//! every localization variant per seed, and a table of per-variant
//! medians over seeds in Markdown and JSON.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;

use handprime::eval::{evaluate_model, report_from_probability_maps, EvalReport, EvalTask};
use handprime::models::{Variant, ALL_VARIANTS};
use handprime::nn::{save_checkpoint, Checkpoint};
use handprime::synth::{generate_dataset, read_dataset, write_dataset, Dataset, Split};
use handprime::train::{train_hand_net, train_localization_net, LogEntry};
use handprime::{Error, Result};

use crate::commands::{best_of, prepare_out};
use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub miou: f64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub variant: String,
    pub task: String,
    pub miou: f64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_seed: Vec<SeedMetrics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareTable {
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub rows: Vec<CompareRow>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("metrics are finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().inspect_err(|_| eprintln!("stage failed: {name}"))
}

fn natural_task(variant: Variant) -> EvalTask {
    if variant == Variant::HandSeg {
        EvalTask::Hand
    } else {
        EvalTask::Localization
    }
}

fn metrics_of(seed: u64, report: &EvalReport) -> SeedMetrics {
    SeedMetrics {
        seed,
        miou: report.miou,
        ap: report.ap,
        ap50: report.ap50,
        ap75: report.ap75,
    }
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::config(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    fs::write(dir.join("report.json"), text)?;
    Ok(())
}

/// Train one run, evaluate it on the test split, and leave its log and
/// report (plus the checkpoint, when `keep_checkpoint`) in `dir`.
fn train_and_eval(
    dataset: &Dataset,
    variant: Variant,
    hand: Option<&handprime::nn::ParameterSet>,
    cfg: &RunConfig,
    seed: u64,
    dir: &Path,
    keep_checkpoint: bool,
) -> Result<(Checkpoint, EvalReport)> {
    fs::create_dir_all(dir)?;
    let mut run_cfg = cfg.clone();
    run_cfg.seed = seed;
    let train_cfg = run_cfg.resolve_train(variant)?;
    run_cfg.model.variant = Some(variant.name().to_owned());
    run_cfg.materialize_train(&train_cfg);
    run_cfg.save(&dir.join("config.json"))?;

    let mut log_file = fs::File::create(dir.join("train_log.jsonl"))?;
    let mut sink = |e: &LogEntry| {
        let line = serde_json::to_string(e).expect("log entry serializes");
        writeln!(log_file, "{line}").expect("log write");
        eprintln!("[seed {seed} {variant}] {line}");
    };
    let ckpt = if variant == Variant::HandSeg {
        train_hand_net(dataset, &train_cfg, &mut sink)?
    } else {
        train_localization_net(dataset, hand, variant, &train_cfg, &mut sink)?
    };
    if keep_checkpoint {
        save_checkpoint(dir, &ckpt)?;
    }
    let report = evaluate_model(
        best_of(&ckpt),
        variant,
        dataset,
        Split::Test,
        natural_task(variant),
        cfg.eval.confidence_rule,
        train_cfg.batch_size,
    )?;
    write_report(dir, &report)?;
    Ok((ckpt, report))
}

/// Ground-truth probability maps for the test split: a plumbing check
/// that must score a perfect table without any training.
fn oracle_metrics(
    dataset: &Dataset,
    variant: Variant,
    seed: u64,
    rule: handprime::eval::ConfidenceRule,
) -> Result<SeedMetrics> {
    let task = natural_task(variant);
    let indices = dataset.split_indices(Split::Test);
    let mut maps = Vec::with_capacity(indices.len());
    let mut gts = Vec::with_capacity(indices.len());
    for &i in indices {
        let gt = match task {
            EvalTask::Hand => dataset.hand_masks[i].clone(),
            EvalTask::Localization => dataset.center_gt_mask(i),
        };
        maps.push(gt.iter().map(|&m| m as f32).collect::<Vec<f32>>());
        gts.push(gt);
    }
    let report = report_from_probability_maps(
        variant.name(),
        task,
        Split::Test.name(),
        &maps,
        &gts,
        dataset.spec.height,
        dataset.spec.width,
        rule,
    )?;
    Ok(metrics_of(seed, &report))
}

fn run_dir(out: &Path, seed: u64, variant: Variant) -> PathBuf {
    out.join("runs")
        .join(format!("seed{seed}"))
        .join(variant.name())
}

pub fn run(
    mut cfg: RunConfig,
    out: &Path,
    n_seeds: usize,
    jobs: usize,
    oracle: bool,
    force: bool,
) -> Result<()> {
    if n_seeds == 0 {
        return Err(Error::config("--seeds must be at least 1"));
    }
    prepare_out(out, force)?;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| cfg.seed + i).collect();

    let dataset = stage("dataset", || match &cfg.data.dataset {
        Some(dir) => read_dataset(dir),
        None => {
            let ds = generate_dataset(cfg.data.n_scenes, cfg.seed, &cfg.data.scene)?;
            write_dataset(&ds, &out.join("dataset"))?;
            Ok(ds)
        }
    })?;
    // Persist the shared scalars; per-run configs carry the per-variant
    // class weights.
    let scalars = cfg.resolve_train(Variant::NoHand)?;
    let authored_class_weights = cfg.train.loss_class_weights.clone();
    let authored_task_weights = cfg.train.task_loss_weights.clone();
    cfg.materialize_train(&scalars);
    cfg.train.loss_class_weights = authored_class_weights;
    cfg.train.task_loss_weights = authored_task_weights;
    cfg.save(&out.join("config.json"))?;

    let loc_variants: Vec<Variant> = ALL_VARIANTS
        .iter()
        .copied()
        .filter(|v| *v != Variant::HandSeg)
        .collect();
    let mut by_variant: Vec<(Variant, Vec<SeedMetrics>)> =
        ALL_VARIANTS.iter().map(|v| (*v, Vec::new())).collect();

    if oracle {
        for seed in &seeds {
            for (variant, acc) in by_variant.iter_mut() {
                let m = stage(&format!("oracle {variant}"), || {
                    oracle_metrics(&dataset, *variant, *seed, cfg.eval.confidence_rule)
                })?;
                acc.push(m);
            }
        }
    } else {
        for &seed in &seeds {
            let (hand_ckpt, hand_report) = stage(&format!("seed {seed}: train handseg"), || {
                train_and_eval(
                    &dataset,
                    Variant::HandSeg,
                    None,
                    &cfg,
                    seed,
                    &run_dir(out, seed, Variant::HandSeg),
                    true,
                )
            })?;
            by_variant[0].1.push(metrics_of(seed, &hand_report));
            let hand_params = best_of(&hand_ckpt);

            // The localization variants of one seed are independent; farm
            // them out to `jobs` workers, each internally single-threaded.
            let work: Mutex<Vec<(usize, Variant)>> =
                Mutex::new(loc_variants.iter().copied().enumerate().rev().collect());
            let results: Mutex<Vec<Option<Result<SeedMetrics>>>> =
                Mutex::new((0..loc_variants.len()).map(|_| None).collect());
            std::thread::scope(|scope| {
                for _ in 0..jobs.max(1) {
                    scope.spawn(|| loop {
                        let item = work.lock().expect("worklist lock").pop();
                        let Some((idx, variant)) = item else { break };
                        let outcome = train_and_eval(
                            &dataset,
                            variant,
                            Some(hand_params),
                            &cfg,
                            seed,
                            &run_dir(out, seed, variant),
                            false,
                        )
                        .map(|(_, report)| metrics_of(seed, &report));
                        results.lock().expect("results lock")[idx] = Some(outcome);
                    });
                }
            });
            for (k, slot) in results
                .into_inner()
                .expect("results lock")
                .into_iter()
                .enumerate()
            {
                let variant = loc_variants[k];
                let m = stage(&format!("seed {seed}: train {variant}"), || {
                    slot.expect("worker visited every variant")
                })?;
                by_variant[k + 1].1.push(m);
            }
        }
    }

    let rows: Vec<CompareRow> = by_variant
        .iter()
        .map(|(variant, per_seed)| CompareRow {
            variant: variant.name().to_owned(),
            task: natural_task(*variant).name().to_owned(),
            miou: median(&per_seed.iter().map(|m| m.miou).collect::<Vec<_>>()),
            ap: median(&per_seed.iter().map(|m| m.ap).collect::<Vec<_>>()),
            ap50: median(&per_seed.iter().map(|m| m.ap50).collect::<Vec<_>>()),
            ap75: median(&per_seed.iter().map(|m| m.ap75).collect::<Vec<_>>()),
            per_seed: per_seed.clone(),
        })
        .collect();
    let table = CompareTable {
        config: cfg,
        seeds,
        rows,
    };

    let mut json = serde_json::to_string_pretty(&table)
        .map_err(|e| Error::config(format!("cannot serialize table: {e}")))?;
    json.push('\n');
    fs::write(out.join("compare.json"), json)?;
    fs::write(out.join("compare.md"), markdown(&table))?;
    println!("{}", markdown(&table));
    Ok(())
}

fn markdown(table: &CompareTable) -> String {
    let mut md = String::new();
    md.push_str(&format!(
        "# Variant comparison (medians over {} seed{})\n\n",
        table.seeds.len(),
        if table.seeds.len() == 1 { "" } else { "s" }
    ));
    md.push_str("| variant | task | mIoU | AP | AP50 | AP75 |\n");
    md.push_str("|---|---|---:|---:|---:|---:|\n");
    for row in &table.rows {
        md.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            row.variant, row.task, row.miou, row.ap, row.ap50, row.ap75
        ));
    }
    md
}
