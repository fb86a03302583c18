//! Scratch harness for measuring training quality and wall time on the
//! desk-scale configuration without going through the command-line crate.
//!
//! Usage: calibrate <task> [steps] [seed] [n] [hand_dir]
//!   task     "hand" or a localization variant name
//!   steps    training steps (default 2000)
//!   seed     dataset and training seed (default 0)
//!   n        dataset size (default 512)
//!   hand_dir checkpoint dir: written when task=hand, read otherwise

use std::time::Instant;

use handprime::eval::{evaluate_model, ConfidenceRule, EvalTask};
use handprime::models::Variant;
use handprime::nn::{load_checkpoint, save_checkpoint, TrainConfig};
use handprime::synth::{generate_dataset, SceneSpec, Split};
use handprime::train::{train_hand_net, train_localization_net};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let task = args.get(1).cloned().unwrap_or_else(|| "hand".to_owned());
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let n: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(512);
    let hand_dir = args.get(5).cloned();

    let spec = SceneSpec::default();
    let t0 = Instant::now();
    let ds = generate_dataset(n, seed, &spec).unwrap();
    eprintln!("dataset of {n}: {:.1}s", t0.elapsed().as_secs_f64());

    let cfg = TrainConfig {
        steps,
        seed,
        ..TrainConfig::desk()
    };
    let mut log = |e: &handprime::train::LogEntry| {
        eprintln!("{}", serde_json::to_string(e).unwrap());
    };
    let t1 = Instant::now();
    if task == "hand" {
        let ckpt = train_hand_net(&ds, &cfg, &mut log).unwrap();
        eprintln!("train: {:.1}s", t1.elapsed().as_secs_f64());
        eprintln!(
            "best val miou {:?} at step {:?}",
            ckpt.manifest.best_val_miou, ckpt.manifest.best_step
        );
        let best = ckpt.best_params.as_ref().unwrap_or(&ckpt.params);
        let report = evaluate_model(
            best,
            Variant::HandSeg,
            &ds,
            Split::Test,
            EvalTask::Hand,
            ConfidenceRule::MeanProb,
            8,
        )
        .unwrap();
        eprintln!("test hand miou {:.4}", report.miou);
        if let Some(dir) = hand_dir {
            save_checkpoint(std::path::Path::new(&dir), &ckpt).unwrap();
            eprintln!("saved {dir}");
        }
    } else {
        let variant = Variant::parse(&task).unwrap();
        let hand_ckpt = hand_dir
            .as_ref()
            .map(|d| load_checkpoint(std::path::Path::new(d)).unwrap());
        let hand_params = hand_ckpt
            .as_ref()
            .map(|c| c.best_params.as_ref().unwrap_or(&c.params));
        let cfg = TrainConfig {
            loss_class_weights: variant.loss_class_weights(),
            task_loss_weights: variant.task_loss_weights(),
            ..cfg
        };
        let ckpt = train_localization_net(&ds, hand_params, variant, &cfg, &mut log).unwrap();
        eprintln!("train: {:.1}s", t1.elapsed().as_secs_f64());
        eprintln!(
            "best val miou {:?} at step {:?}",
            ckpt.manifest.best_val_miou, ckpt.manifest.best_step
        );
        let best = ckpt.best_params.as_ref().unwrap_or(&ckpt.params);
        let report = evaluate_model(
            best,
            variant,
            &ds,
            Split::Test,
            EvalTask::Localization,
            ConfidenceRule::MeanProb,
            8,
        )
        .unwrap();
        eprintln!(
            "test loc miou {:.4} ap {:.4} ap50 {:.4} ap75 {:.4}",
            report.miou, report.ap, report.ap50, report.ap75
        );
    }
}
