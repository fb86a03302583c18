//! Scratch diagnostic: load a hand checkpoint, score the validation
//! split, and render the worst images as ASCII grids (B = both, G = GT
//! only, P = prediction only).
//!
//! Usage: diag <ckpt_dir> [n_scenes] [seed]

use handprime::eval::{evaluate_model, model_probability_maps, ConfidenceRule, EvalTask};
use handprime::models::Variant;
use handprime::nn::load_checkpoint;
use handprime::synth::{generate_dataset, SceneSpec, Split};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let dir = args.get(1).expect("usage: diag <ckpt_dir> [n] [seed]");
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(512);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);

    let ds = generate_dataset(n, seed, &SceneSpec::default()).unwrap();
    let ckpt = load_checkpoint(std::path::Path::new(dir)).unwrap();
    let params = ckpt.best_params.as_ref().unwrap_or(&ckpt.params);
    let report = evaluate_model(
        params,
        Variant::HandSeg,
        &ds,
        Split::Val,
        EvalTask::Hand,
        ConfidenceRule::MeanProb,
        8,
    )
    .unwrap();

    let mut per: Vec<(f64, usize)> = report
        .per_image
        .iter()
        .map(|im| (im.iou, im.index))
        .collect();
    per.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    println!("val miou {:.4}", report.miou);
    let k = per.len();
    println!(
        "quartiles: min {:.3} p25 {:.3} med {:.3} p75 {:.3} max {:.3}",
        per[0].0,
        per[k / 4].0,
        per[k / 2].0,
        per[3 * k / 4].0,
        per[k - 1].0
    );

    let indices = ds.split_indices(Split::Val).to_vec();
    let maps =
        model_probability_maps(params, Variant::HandSeg, EvalTask::Hand, &ds, &indices, 8).unwrap();
    let (h, w) = (ds.spec.height, ds.spec.width);
    let gt_area: f64 = indices
        .iter()
        .map(|&i| ds.hand_masks[i].iter().filter(|&&m| m != 0).count() as f64)
        .sum::<f64>()
        / indices.len() as f64;
    println!(
        "mean GT hand area: {:.0} px of {} ({:.1}%)",
        gt_area,
        h * w,
        100.0 * gt_area / (h * w) as f64
    );

    for &(iou, split_rank) in per.iter().take(3) {
        // `index` in the report is the position within the split.
        let ds_index = indices[split_rank];
        let pos = split_rank;
        println!("\nimage {ds_index} iou {iou:.3}");
        let gt = &ds.hand_masks[ds_index];
        let prob = &maps[pos];
        for y in 0..h {
            let mut line = String::with_capacity(w);
            for x in 0..w {
                let g = gt[y * w + x] != 0;
                let p = prob[y * w + x] >= 0.5;
                line.push(match (g, p) {
                    (true, true) => 'B',
                    (true, false) => 'G',
                    (false, true) => 'P',
                    (false, false) => '.',
                });
            }
            println!("{line}");
        }
    }
}
