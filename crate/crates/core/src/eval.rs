//! Inference post-processing and metrics: threshold-and-biggest-cluster
//! region extraction, mask IoU, COCO-style average precision, and full
//! model evaluation reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::softmax_channels;
use crate::models::{forward_localization, hand_probability, Variant};
use crate::nn::ParameterSet;
use crate::synth::{write_ppm, Dataset, Split};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// How a region's detection confidence is derived from the probability map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceRule {
    /// Mean foreground probability over the kept pixels (default).
    #[default]
    MeanProb,
    /// Maximum foreground probability over the kept pixels.
    MaxProb,
}

/// One extracted region: a single 8-connected component, or empty when no
/// pixel cleared the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPrediction {
    /// Binary mask, `h*w` row-major.
    pub mask: Vec<u8>,
    pub confidence: f64,
    pub empty: bool,
}

/// 8-connected components of a binary mask, as pixel-index lists in
/// row-major scan order.
fn connected_components(mask: &[u8], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        let mut pixels = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            pixels.push(idx);
            let (y, x) = (idx / w, idx % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let nidx = (ny as usize) * w + nx as usize;
                    if mask[nidx] == 1 && !seen[nidx] {
                        seen[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        components.push(pixels);
    }
    components
}

/// Binarize a probability map at `tau` and keep the biggest 8-connected
/// component. Ties go to the larger summed probability, then to the
/// component whose topmost-leftmost pixel comes first in row-major order.
/// Inputs are expected in `[0,1]`; an empty result is valid, not an error.
pub fn postprocess(
    prob: &[f32],
    h: usize,
    w: usize,
    tau: f32,
    rule: ConfidenceRule,
) -> RegionPrediction {
    assert_eq!(prob.len(), h * w, "probability map must be h*w");
    let bin: Vec<u8> = prob.iter().map(|&p| u8::from(p >= tau)).collect();
    let components = connected_components(&bin, h, w);
    let mut best: Option<(usize, f64, usize, &Vec<usize>)> = None;
    for comp in &components {
        let size = comp.len();
        let sum: f64 = comp.iter().map(|&i| prob[i] as f64).sum();
        let first = *comp.iter().min().unwrap();
        let better = match &best {
            None => true,
            Some((bs, bsum, bfirst, _)) => {
                size > *bs
                    || (size == *bs && sum > *bsum)
                    || (size == *bs && sum == *bsum && first < *bfirst)
            }
        };
        if better {
            best = Some((size, sum, first, comp));
        }
    }
    match best {
        None => RegionPrediction {
            mask: vec![0; h * w],
            confidence: 0.0,
            empty: true,
        },
        Some((size, sum, _, comp)) => {
            let mut mask = vec![0u8; h * w];
            for &i in comp {
                mask[i] = 1;
            }
            let confidence = match rule {
                ConfidenceRule::MeanProb => sum / size as f64,
                ConfidenceRule::MaxProb => comp
                    .iter()
                    .map(|&i| prob[i] as f64)
                    .fold(f64::MIN, f64::max),
            };
            RegionPrediction {
                mask,
                confidence,
                empty: false,
            }
        }
    }
}

/// Intersection over union of two binary masks of the same shape. Both
/// empty counts as a perfect match (1.0); exactly one empty scores 0.0.
pub fn mask_iou(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "mask_iou",
            format!("mask sizes {} vs {}", a.len(), b.len()),
        ));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Average-precision summary over the COCO threshold grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApScores {
    /// Mean AP over IoU thresholds 0.50, 0.55, ..., 0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// The IoU thresholds AP averages over.
pub const AP_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

struct Detection {
    confidence: f64,
    image: usize,
    iou: f64,
}

/// 101-point interpolated AP at one IoU threshold. `detections` must be
/// sorted by descending confidence (ties by ascending image index);
/// `n_positives` is the ground-truth region count (one per image).
fn ap_at_threshold(detections: &[Detection], n_positives: usize, t: f64) -> f64 {
    // Walk the prefix cut-offs once, recording (recall, precision), then
    // take the running maximum of precision from the high-recall end.
    let mut points = Vec::with_capacity(detections.len());
    let mut tp = 0usize;
    for (k, det) in detections.iter().enumerate() {
        if det.iou >= t {
            tp += 1;
        }
        let recall = tp as f64 / n_positives as f64;
        let precision = tp as f64 / (k + 1) as f64;
        points.push((recall, precision));
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(recall, _)| *recall >= r - 1e-12)
            .map(|(_, precision)| *precision)
            .fold(0.0, f64::max);
        sum += p;
    }
    sum / 101.0
}

/// COCO-style average precision for a single-region-per-image task. Each
/// image contributes exactly one ground-truth region; an empty prediction
/// contributes a missed ground truth and no detection.
pub fn average_precision(
    predictions: &[RegionPrediction],
    gt_masks: &[Vec<u8>],
) -> Result<ApScores> {
    if predictions.is_empty() {
        return Err(Error::config("average_precision needs at least one image"));
    }
    if predictions.len() != gt_masks.len() {
        return Err(Error::dim(
            "average_precision",
            format!(
                "{} predictions vs {} ground truths",
                predictions.len(),
                gt_masks.len()
            ),
        ));
    }
    let mut detections = Vec::new();
    for (i, (pred, gt)) in predictions.iter().zip(gt_masks).enumerate() {
        if pred.empty {
            continue;
        }
        detections.push(Detection {
            confidence: pred.confidence,
            image: i,
            iou: mask_iou(&pred.mask, gt)?,
        });
    }
    detections.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.image.cmp(&b.image))
    });
    let n = predictions.len();
    let per_t: Vec<f64> = AP_THRESHOLDS
        .iter()
        .map(|&t| ap_at_threshold(&detections, n, t))
        .collect();
    Ok(ApScores {
        ap: per_t.iter().sum::<f64>() / per_t.len() as f64,
        ap50: per_t[0],
        ap75: per_t[5],
    })
}

/// Per-image evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    /// Index into the evaluated split's sample list.
    pub index: usize,
    pub iou: f64,
    #[serde(rename = "matched@0.5")]
    pub matched50: bool,
    #[serde(rename = "matched@0.75")]
    pub matched75: bool,
    pub confidence: f64,
}

/// Full evaluation report for one checkpoint on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub task: String,
    pub split: String,
    pub miou: f64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    #[serde(rename = "false_positives@0.5")]
    pub false_positives_50: usize,
    #[serde(rename = "false_negatives@0.5")]
    pub false_negatives_50: usize,
    pub per_image: Vec<ImageEval>,
}

/// The evaluated task of a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTask {
    Hand,
    Localization,
}

impl EvalTask {
    pub fn parse(s: &str) -> Result<EvalTask> {
        match s {
            "hand" => Ok(EvalTask::Hand),
            "localization" | "loc" => Ok(EvalTask::Localization),
            other => Err(Error::config(format!(
                "unknown task {other:?}; expected hand or localization"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalTask::Hand => "hand",
            EvalTask::Localization => "localization",
        }
    }
}

/// Metric core shared by model evaluation and oracle plumbing checks:
/// aggregate per-image probability maps against ground-truth masks.
/// `cluster` selects biggest-cluster extraction (localization) versus
/// whole-mask binarization (hand task).
#[allow(clippy::too_many_arguments)]
pub fn report_from_probability_maps(
    variant: &str,
    task: EvalTask,
    split: &str,
    prob_maps: &[Vec<f32>],
    gt_masks: &[Vec<u8>],
    h: usize,
    w: usize,
    rule: ConfidenceRule,
) -> Result<EvalReport> {
    if prob_maps.is_empty() {
        return Err(Error::config("evaluation needs at least one image"));
    }
    if prob_maps.len() != gt_masks.len() {
        return Err(Error::dim(
            "evaluate",
            format!(
                "{} probability maps vs {} ground truths",
                prob_maps.len(),
                gt_masks.len()
            ),
        ));
    }
    let cluster = task == EvalTask::Localization;
    let mut predictions = Vec::with_capacity(prob_maps.len());
    for prob in prob_maps {
        if cluster {
            predictions.push(postprocess(prob, h, w, 0.5, rule));
        } else {
            // Hand task: the raw 0.5-binarized mask, no cluster selection.
            let mask: Vec<u8> = prob.iter().map(|&p| u8::from(p >= 0.5)).collect();
            let kept: Vec<f64> = mask
                .iter()
                .zip(prob)
                .filter(|(m, _)| **m == 1)
                .map(|(_, &p)| p as f64)
                .collect();
            let empty = kept.is_empty();
            let confidence = if empty {
                0.0
            } else {
                match rule {
                    ConfidenceRule::MeanProb => kept.iter().sum::<f64>() / kept.len() as f64,
                    ConfidenceRule::MaxProb => kept.iter().cloned().fold(f64::MIN, f64::max),
                }
            };
            predictions.push(RegionPrediction {
                mask,
                confidence,
                empty,
            });
        }
    }

    let mut per_image = Vec::with_capacity(predictions.len());
    let mut miou = 0.0;
    let mut fp50 = 0usize;
    let mut fn50 = 0usize;
    for (i, (pred, gt)) in predictions.iter().zip(gt_masks).enumerate() {
        let iou = mask_iou(&pred.mask, gt)?;
        let matched50 = !pred.empty && iou >= 0.5;
        let matched75 = !pred.empty && iou >= 0.75;
        if !pred.empty && iou < 0.5 {
            fp50 += 1;
        }
        if !matched50 {
            fn50 += 1;
        }
        miou += iou;
        per_image.push(ImageEval {
            index: i,
            iou,
            matched50,
            matched75,
            confidence: pred.confidence,
        });
    }
    miou /= predictions.len() as f64;
    let scores = average_precision(&predictions, gt_masks)?;
    Ok(EvalReport {
        variant: variant.to_owned(),
        task: task.name().to_owned(),
        split: split.to_owned(),
        miou,
        ap: scores.ap,
        ap50: scores.ap50,
        ap75: scores.ap75,
        false_positives_50: fp50,
        false_negatives_50: fn50,
        per_image,
    })
}

/// Foreground-probability maps of a model on a list of samples, one
/// `h*w` map per sample, produced in batches.
pub fn model_probability_maps(
    params: &ParameterSet,
    variant: Variant,
    task: EvalTask,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<Vec<f32>>> {
    let (h, w) = (dataset.spec.height, dataset.spec.width);
    let hw = h * w;
    let mut maps = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let images = dataset.batch_images(chunk)?;
        let n = chunk.len();
        let probs: Vec<f32> = match (task, variant) {
            (
                EvalTask::Hand,
                Variant::HandSeg | Variant::Finetune | Variant::HpAll | Variant::HpLate,
            ) => {
                // These checkpoints carry a complete hand network.
                let prob = hand_probability(params, &images)?;
                prob.into_data()
            }
            (EvalTask::Hand, Variant::MultiTask | Variant::MultiTask2x) => {
                let mut tape = Tape::new();
                let out = forward_localization(&mut tape, params, variant, &images, None)?;
                let logits = out
                    .hand_logits
                    .expect("multi-task forward always has a hand head");
                let p = softmax_channels(tape.data(logits), n, 2, hw);
                channel_slice(&p, n, 2, hw, 1)
            }
            (EvalTask::Hand, Variant::MultiClass | Variant::MultiClass2x) => {
                let mut tape = Tape::new();
                let out = forward_localization(&mut tape, params, variant, &images, None)?;
                let p = softmax_channels(tape.data(out.loc_logits), n, 3, hw);
                channel_slice(&p, n, 3, hw, 1)
            }
            (EvalTask::Hand, Variant::NoHand) => {
                return Err(Error::config(
                    "the no-hand baseline has no hand output to evaluate",
                ));
            }
            (EvalTask::Localization, Variant::HandSeg) => {
                return Err(Error::config(
                    "handseg has no localization output to evaluate",
                ));
            }
            (EvalTask::Localization, _) => {
                let hand_prob = if variant.infused_blocks().is_empty() {
                    None
                } else {
                    Some(hand_probability(params, &images)?)
                };
                let mut tape = Tape::new();
                let out =
                    forward_localization(&mut tape, params, variant, &images, hand_prob.as_ref())?;
                let kc = variant.loc_classes();
                let p = softmax_channels(tape.data(out.loc_logits), n, kc, hw);
                // The center-area class: channel 1 for 2-class heads,
                // channel 2 for the 3-class variants.
                channel_slice(&p, n, kc, hw, kc - 1)
            }
        };
        for i in 0..n {
            maps.push(probs[i * hw..(i + 1) * hw].to_vec());
        }
    }
    Ok(maps)
}

fn channel_slice(probs: &[f32], n: usize, kc: usize, hw: usize, channel: usize) -> Vec<f32> {
    let mut out = vec![0f32; n * hw];
    for i in 0..n {
        let base = (i * kc + channel) * hw;
        out[i * hw..(i + 1) * hw].copy_from_slice(&probs[base..base + hw]);
    }
    out
}

/// Evaluate a checkpoint's parameters on one split of a dataset.
pub fn evaluate_model(
    params: &ParameterSet,
    variant: Variant,
    dataset: &Dataset,
    split: Split,
    task: EvalTask,
    rule: ConfidenceRule,
    batch_size: usize,
) -> Result<EvalReport> {
    match task {
        EvalTask::Hand if !variant.supports_hand_eval() => {
            return Err(Error::config(format!(
                "variant {variant} does not support the hand task"
            )));
        }
        EvalTask::Localization if !variant.supports_loc_eval() => {
            return Err(Error::config(format!(
                "variant {variant} does not support the localization task"
            )));
        }
        _ => {}
    }
    let indices = dataset.split_indices(split);
    if indices.is_empty() {
        return Err(Error::config(format!("split {} is empty", split.name())));
    }
    let maps = model_probability_maps(params, variant, task, dataset, indices, batch_size)?;
    let gts: Vec<Vec<u8>> = indices
        .iter()
        .map(|&i| match task {
            EvalTask::Hand => dataset.hand_masks[i].clone(),
            EvalTask::Localization => dataset.center_gt_mask(i),
        })
        .collect();
    report_from_probability_maps(
        variant.name(),
        task,
        split.name(),
        &maps,
        &gts,
        dataset.spec.height,
        dataset.spec.width,
        rule,
    )
}

/// Mean IoU only, for validation during training (cheaper than a full
/// report, same forward pass).
pub fn validation_miou(
    params: &ParameterSet,
    variant: Variant,
    dataset: &Dataset,
    task: EvalTask,
    batch_size: usize,
) -> Result<f64> {
    let report = evaluate_model(
        params,
        variant,
        dataset,
        Split::Val,
        task,
        ConfidenceRule::MeanProb,
        batch_size,
    )?;
    Ok(report.miou)
}

/// Write a prediction overlay: the input image with the predicted region
/// blended toward blue and the hand mask blended toward green.
pub fn write_overlay(
    path: &Path,
    image: &Tensor<f32>,
    prediction: &[u8],
    hand_mask: &[u8],
) -> Result<()> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let mut out = image.data().to_vec();
    for idx in 0..h * w {
        if prediction[idx] != 0 {
            blend(&mut out, h * w, idx, [0.0, 0.0, 1.0]);
        }
        if hand_mask[idx] != 0 {
            blend(&mut out, h * w, idx, [0.0, 1.0, 0.0]);
        }
    }
    write_ppm(path, &Tensor::new(vec![3, h, w], out)?)
}

fn blend(data: &mut [f32], plane: usize, idx: usize, color: [f32; 3]) {
    for (c, &tint) in color.iter().enumerate() {
        let v = &mut data[c * plane + idx];
        *v = 0.5 * *v + 0.5 * tint;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, set: &[(usize, usize)]) -> Vec<u8> {
        let mut m = vec![0u8; h * w];
        for &(y, x) in set {
            m[y * w + x] = 1;
        }
        m
    }

    fn prob_from_mask(mask: &[u8], hi: f32, lo: f32) -> Vec<f32> {
        mask.iter().map(|&v| if v != 0 { hi } else { lo }).collect()
    }

    #[test]
    fn biggest_component_wins() {
        // A 12-pixel block and a 5-pixel run, separated by background.
        let mut prob = vec![0.1f32; 64];
        for y in 0..3 {
            for x in 0..4 {
                prob[y * 8 + x] = 0.9;
            }
        }
        for x in 0..5 {
            prob[7 * 8 + x] = 0.95;
        }
        let pred = postprocess(&prob, 8, 8, 0.5, ConfidenceRule::MeanProb);
        assert!(!pred.empty);
        assert_eq!(pred.mask.iter().map(|&v| v as usize).sum::<usize>(), 12);
        assert_eq!(pred.mask[0], 1);
        assert_eq!(pred.mask[7 * 8], 0);
        assert!((pred.confidence - 0.9).abs() < 1e-6);
    }

    #[test]
    fn all_below_threshold_is_empty() {
        let prob = vec![0.49f32; 16];
        let pred = postprocess(&prob, 4, 4, 0.5, ConfidenceRule::MeanProb);
        assert!(pred.empty);
        assert_eq!(pred.confidence, 0.0);
        assert!(pred.mask.iter().all(|&v| v == 0));
    }

    #[test]
    fn size_tie_breaks_on_summed_probability() {
        // Two 4-pixel components: sums 3.2 and 2.8.
        let mut prob = vec![0.0f32; 8 * 8];
        prob[..4].fill(0.7); // sum 2.8, first in scan order
        prob[4 * 8..4 * 8 + 4].fill(0.8); // sum 3.2
        let pred = postprocess(&prob, 8, 8, 0.5, ConfidenceRule::MeanProb);
        assert_eq!(pred.mask[4 * 8], 1, "larger summed probability wins");
        assert_eq!(pred.mask[0], 0);
    }

    #[test]
    fn full_tie_breaks_on_topmost_leftmost() {
        let mut prob = vec![0.0f32; 8 * 8];
        prob[4..6].fill(0.75);
        prob[3 * 8..3 * 8 + 2].fill(0.75);
        let pred = postprocess(&prob, 8, 8, 0.5, ConfidenceRule::MeanProb);
        assert_eq!(
            pred.mask[4], 1,
            "row 0 component precedes row 3 in scan order"
        );
        assert_eq!(pred.mask[3 * 8], 0);
    }

    #[test]
    fn max_prob_rule_reports_the_peak() {
        let mut prob = vec![0.0f32; 16];
        prob[5] = 0.6;
        prob[6] = 0.9;
        let pred = postprocess(&prob, 4, 4, 0.5, ConfidenceRule::MaxProb);
        assert!((pred.confidence - 0.9).abs() < 1e-7);
    }

    #[test]
    fn diagonal_pixels_are_one_component() {
        let mask = grid(4, 4, &[(0, 0), (1, 1), (2, 2)]);
        let comps = connected_components(&mask, 4, 4);
        assert_eq!(comps.len(), 1, "8-connectivity joins diagonals");
    }

    #[test]
    fn monotone_transform_fixing_the_superlevel_set_keeps_the_mask() {
        // x^2 is strictly monotone on [0,1] and maps {0.25, 0.75} to
        // {0.0625, 0.5625}, preserving which pixels clear tau = 0.5.
        let mut any_unique = 0;
        for seed in 0..200u64 {
            let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
            let mut next = || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                state
            };
            let prob: Vec<f32> = (0..16)
                .map(|_| if next() % 2 == 0 { 0.25 } else { 0.75 })
                .collect();
            let bin: Vec<u8> = prob.iter().map(|&p| u8::from(p >= 0.5)).collect();
            let comps = connected_components(&bin, 4, 4);
            let mut sizes: Vec<usize> = comps.iter().map(|c| c.len()).collect();
            sizes.sort_unstable_by(|a, b| b.cmp(a));
            let unique_largest = sizes.len() == 1 || (sizes.len() > 1 && sizes[0] > sizes[1]);
            if !unique_largest {
                continue;
            }
            any_unique += 1;
            let squared: Vec<f32> = prob.iter().map(|&p| p * p).collect();
            let a = postprocess(&prob, 4, 4, 0.5, ConfidenceRule::MeanProb);
            let b = postprocess(&squared, 4, 4, 0.5, ConfidenceRule::MeanProb);
            assert_eq!(a.mask, b.mask, "seed {seed}");
            assert_eq!(a.empty, b.empty);
        }
        assert!(
            any_unique > 50,
            "got only {any_unique} unique-largest instances"
        );
    }

    #[test]
    fn iou_examples() {
        let a = grid(4, 4, &[(1, 1), (1, 2), (2, 1), (2, 2)]);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let b = grid(4, 4, &[(1, 2), (1, 3), (2, 2), (2, 3)]);
        let iou = mask_iou(&a, &b).unwrap();
        assert!((iou - 2.0 / 6.0).abs() < 1e-12);
        let empty = vec![0u8; 16];
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &empty).unwrap(), 0.0);
        assert_eq!(mask_iou(&a, &[0u8; 9]).unwrap_err().exit_code(), 2);
    }

    fn region(mask: Vec<u8>, confidence: f64) -> RegionPrediction {
        let empty = mask.iter().all(|&v| v == 0);
        RegionPrediction {
            mask,
            confidence,
            empty,
        }
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let gt = grid(4, 4, &[(1, 1), (1, 2)]);
        let preds: Vec<RegionPrediction> = (0..3).map(|_| region(gt.clone(), 1.0)).collect();
        let gts = vec![gt.clone(), gt.clone(), gt];
        let s = average_precision(&preds, &gts).unwrap();
        assert_eq!((s.ap, s.ap50, s.ap75), (1.0, 1.0, 1.0));
    }

    #[test]
    fn worked_three_image_example() {
        // IoUs {0.8, 0.6, 0.3} at confidences {0.9, 0.8, 0.7}: ap50 is
        // 67/101, ap75 is 34/101. Each prediction is a k-pixel subset of a
        // 10-pixel ground truth, so its IoU is exactly k/10.
        let w = 20;
        let gt: Vec<u8> = (0..w).map(|x| u8::from(x < 10)).collect();
        let pred_mask = |k: usize| -> Vec<u8> { (0..w).map(|x| u8::from(x < k)).collect() };
        let preds = vec![
            region(pred_mask(8), 0.9),
            region(pred_mask(6), 0.8),
            region(pred_mask(3), 0.7),
        ];
        let gts = vec![gt.clone(), gt.clone(), gt];
        for (p, want) in preds.iter().zip([0.8, 0.6, 0.3]) {
            assert!((mask_iou(&p.mask, &gts[0]).unwrap() - want).abs() < 1e-12);
        }
        let s = average_precision(&preds, &gts).unwrap();
        assert!((s.ap50 - 67.0 / 101.0).abs() < 1e-9, "ap50 {}", s.ap50);
        assert!((s.ap75 - 34.0 / 101.0).abs() < 1e-9, "ap75 {}", s.ap75);
        assert!(s.ap <= s.ap50 && s.ap75 <= s.ap50);
    }

    #[test]
    fn empty_prediction_caps_recall() {
        let gt = grid(2, 2, &[(0, 0)]);
        let preds = vec![region(gt.clone(), 0.9), region(vec![0; 4], 0.0)];
        let gts = vec![gt.clone(), gt];
        let s = average_precision(&preds, &gts).unwrap();
        assert!(
            (s.ap50 - 51.0 / 101.0).abs() < 1e-9,
            "101-point ap50 {}",
            s.ap50
        );
    }

    #[test]
    fn confidence_rescaling_keeps_ap() {
        let gt = grid(4, 4, &[(0, 0), (0, 1)]);
        let shifted = grid(4, 4, &[(0, 1), (0, 2)]);
        let preds = vec![region(gt.clone(), 0.9), region(shifted.clone(), 0.6)];
        let gts = vec![gt.clone(), gt.clone()];
        let a = average_precision(&preds, &gts).unwrap();
        let scaled = vec![region(gt.clone(), 0.45), region(shifted, 0.3)];
        let b = average_precision(&scaled, &gts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_input_is_a_config_error() {
        assert_eq!(average_precision(&[], &[]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn oracle_probability_maps_score_one() {
        let gt1 = grid(4, 4, &[(1, 1), (1, 2), (2, 1)]);
        let gt2 = grid(4, 4, &[(0, 3), (1, 3)]);
        let maps = vec![
            prob_from_mask(&gt1, 1.0, 0.0),
            prob_from_mask(&gt2, 1.0, 0.0),
        ];
        let gts = vec![gt1, gt2];
        let report = report_from_probability_maps(
            "oracle",
            EvalTask::Localization,
            "test",
            &maps,
            &gts,
            4,
            4,
            ConfidenceRule::MeanProb,
        )
        .unwrap();
        assert_eq!(report.miou, 1.0);
        assert_eq!((report.ap, report.ap50, report.ap75), (1.0, 1.0, 1.0));
        assert_eq!(report.false_positives_50, 0);
        assert_eq!(report.false_negatives_50, 0);
        assert!(report
            .per_image
            .iter()
            .all(|pi| pi.matched50 && pi.matched75));
    }

    #[test]
    fn hand_task_uses_the_whole_mask() {
        // Two separate blobs in the probability map: the hand task keeps
        // both; the localization task would keep only the bigger one.
        let mut prob = vec![0.1f32; 8 * 8];
        prob[..3].fill(0.9);
        prob[7 * 8 + 7] = 0.9;
        let gt: Vec<u8> = prob.iter().map(|&p| u8::from(p >= 0.5)).collect();
        let hand = report_from_probability_maps(
            "handseg",
            EvalTask::Hand,
            "val",
            &[prob.clone()],
            std::slice::from_ref(&gt),
            8,
            8,
            ConfidenceRule::MeanProb,
        )
        .unwrap();
        assert_eq!(hand.miou, 1.0);
        let loc = report_from_probability_maps(
            "nohand",
            EvalTask::Localization,
            "val",
            &[prob],
            &[gt],
            8,
            8,
            ConfidenceRule::MeanProb,
        )
        .unwrap();
        assert!(loc.miou < 1.0);
    }

    #[test]
    fn report_json_shape_is_stable() {
        let gt = grid(2, 2, &[(0, 0)]);
        let report = report_from_probability_maps(
            "nohand",
            EvalTask::Localization,
            "test",
            &[prob_from_mask(&gt, 0.9, 0.1)],
            &[gt],
            2,
            2,
            ConfidenceRule::MeanProb,
        )
        .unwrap();
        let json = serde_json::to_string(&report).unwrap();
        for key in [
            "\"miou\"",
            "\"ap\"",
            "\"ap50\"",
            "\"ap75\"",
            "\"matched@0.5\"",
            "\"matched@0.75\"",
            "\"false_positives@0.5\"",
            "\"false_negatives@0.5\"",
            "\"per_image\"",
        ] {
            assert!(json.contains(key), "missing {key} in {json}");
        }
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
