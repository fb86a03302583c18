//! The two-stage training loop: hand segmentation first, then object
//! localization with variant-specific initialization and freezing.
//!
//! Determinism contract: the batch for step `t` is a pure function of
//! `(seed, t)` (a per-epoch permutation stream indexed by global position),
//! every kernel is deterministic, and validation runs on a fixed cadence.
//! Training from a checkpoint saved at step `k` therefore reproduces an
//! uninterrupted run bit for bit.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{validation_miou, EvalTask};
use crate::models::init_variant;
use crate::models::{
    forward_hand, forward_localization, hand_probability, loss_for_variant, SampleLabels, Variant,
};
use crate::nn::{AdamState, Checkpoint, CheckpointManifest, ParameterSet, TrainConfig};
use crate::synth::Dataset;
use crate::tensor::Tensor;

/// One training-log record; serialized as a JSON line every 100 steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Receives log entries as they are produced.
pub type LogSink<'a> = &'a mut dyn FnMut(&LogEntry);

/// A no-op sink for callers that do not keep logs.
pub fn discard_log() -> impl FnMut(&LogEntry) {
    |_: &LogEntry| {}
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic batch scheduler: an infinite stream of sample indices made
/// of per-epoch shuffles of the training split, addressed by step number
/// alone so training can resume from any step without replaying history.
#[derive(Debug)]
pub struct BatchStream {
    indices: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl BatchStream {
    pub fn new(train_indices: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if train_indices.is_empty() {
            return Err(Error::config("training split is empty"));
        }
        if batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        Ok(BatchStream {
            indices: train_indices.to_vec(),
            batch_size,
            seed,
        })
    }

    fn epoch_perm(&self, epoch: u64) -> Vec<usize> {
        let mut perm = self.indices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ splitmix64(epoch.wrapping_add(1)));
        perm.shuffle(&mut rng);
        perm
    }

    /// Sample indices of batch `step` (0-based).
    pub fn batch(&self, step: usize) -> Vec<usize> {
        let n = self.indices.len() as u64;
        let b = self.batch_size as u64;
        let start = step as u64 * b;
        let mut out = Vec::with_capacity(self.batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for pos in start..start + b {
            let epoch = pos / n;
            let offset = (pos % n) as usize;
            let perm = match &cached {
                Some((e, p)) if *e == epoch => p,
                _ => {
                    cached = Some((epoch, self.epoch_perm(epoch)));
                    &cached.as_ref().unwrap().1
                }
            };
            out.push(perm[offset]);
        }
        out
    }
}

/// Per-image cache of the frozen hand network's foreground probability,
/// filled lazily. Per-sample activations are independent of batch
/// composition, so cached values are bit-identical to freshly computed
/// ones.
struct HandProbCache {
    maps: BTreeMap<usize, Vec<f32>>,
}

impl HandProbCache {
    fn new() -> Self {
        HandProbCache {
            maps: BTreeMap::new(),
        }
    }

    fn batch(
        &mut self,
        params: &ParameterSet,
        dataset: &Dataset,
        indices: &[usize],
    ) -> Result<Tensor<f32>> {
        let missing: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|i| !self.maps.contains_key(i))
            .collect();
        if !missing.is_empty() {
            let images = dataset.batch_images(&missing)?;
            let prob = hand_probability(params, &images)?;
            let hw = dataset.spec.height * dataset.spec.width;
            let data = prob.data();
            for (k, &i) in missing.iter().enumerate() {
                self.maps.insert(i, data[k * hw..(k + 1) * hw].to_vec());
            }
        }
        let hw = dataset.spec.height * dataset.spec.width;
        let mut data = Vec::with_capacity(indices.len() * hw);
        for i in indices {
            data.extend_from_slice(&self.maps[i]);
        }
        Tensor::new(
            vec![indices.len(), 1, dataset.spec.height, dataset.spec.width],
            data,
        )
    }
}

fn batch_labels(dataset: &Dataset, indices: &[usize]) -> SampleLabels {
    let mut hand = Vec::new();
    let mut center = Vec::new();
    let mut three_way = Vec::new();
    for &i in indices {
        hand.extend(dataset.hand_labels(i));
        center.extend(dataset.center_labels(i));
        three_way.extend(dataset.three_way_labels(i));
    }
    SampleLabels {
        hand,
        center,
        three_way,
    }
}

const LOG_EVERY: usize = 100;
const VALIDATE_EVERY: usize = 200;

fn validation_task(variant: Variant) -> EvalTask {
    if variant == Variant::HandSeg {
        EvalTask::Hand
    } else {
        EvalTask::Localization
    }
}

/// Core loop shared by fresh runs and resumes: advance `state` from
/// `manifest.step` to `manifest.config.steps`.
fn run_training(mut ckpt: Checkpoint, dataset: &Dataset, sink: LogSink) -> Result<Checkpoint> {
    let cfg = ckpt.manifest.config.clone();
    cfg.validate()?;
    let variant = Variant::parse(&ckpt.manifest.variant)?;
    let stream = BatchStream::new(&dataset.splits.train, cfg.batch_size, cfg.seed)?;
    let mut cache = HandProbCache::new();
    let needs_prob = !variant.infused_blocks().is_empty();
    let has_val = !dataset.splits.val.is_empty();

    for step in ckpt.manifest.step..cfg.steps {
        let indices = stream.batch(step);
        let images = dataset.batch_images(&indices)?;
        let labels = batch_labels(dataset, &indices);
        let hand_prob = if needs_prob {
            Some(cache.batch(&ckpt.params, dataset, &indices)?)
        } else {
            None
        };

        let mut tape = crate::tape::Tape::new();
        let (loss_id, bound) = if variant == Variant::HandSeg {
            let (logits, bound) = forward_hand(&mut tape, &ckpt.params, &images)?;
            let loss = tape.softmax_cross_entropy(logits, &labels.hand, &cfg.loss_class_weights)?;
            (loss, bound)
        } else {
            let out = forward_localization(
                &mut tape,
                &ckpt.params,
                variant,
                &images,
                hand_prob.as_ref(),
            )?;
            let loss = loss_for_variant(
                &mut tape,
                variant,
                &out,
                &labels,
                &cfg.loss_class_weights,
                &cfg.task_loss_weights,
            )?;
            (loss, out.bound)
        };
        let loss_value = tape.data(loss_id)[0] as f64;
        tape.backward(loss_id)?;
        let mut grads = BTreeMap::new();
        for (path, id) in &bound {
            if let Some(g) = tape.grad(*id) {
                grads.insert(path.clone(), g.to_vec());
            }
        }
        ckpt.adam.step(&mut ckpt.params, &grads, &cfg)?;
        ckpt.manifest.step = step + 1;
        ckpt.manifest.adam_t = ckpt.adam.t;

        if (step + 1) % LOG_EVERY == 0 {
            sink(&LogEntry {
                step: step + 1,
                loss: loss_value,
                lr: cfg.learning_rate,
            });
        }
        if has_val && (step + 1) % VALIDATE_EVERY == 0 {
            let miou = validation_miou(
                &ckpt.params,
                variant,
                dataset,
                validation_task(variant),
                cfg.batch_size,
            )?;
            if ckpt.manifest.best_val_miou.is_none_or(|best| miou > best) {
                ckpt.manifest.best_val_miou = Some(miou);
                ckpt.manifest.best_step = Some(step + 1);
                ckpt.best_params = Some(ckpt.params.clone());
            }
        }
    }
    Ok(ckpt)
}

fn fresh_checkpoint(
    variant: Variant,
    cfg: &TrainConfig,
    hand: Option<&ParameterSet>,
) -> Result<Checkpoint> {
    let params = init_variant(variant, cfg.seed, hand)?;
    Ok(Checkpoint {
        manifest: CheckpointManifest {
            variant: variant.name().to_owned(),
            config: cfg.clone(),
            step: 0,
            adam_t: 0,
            params: params.paths().map(str::to_owned).collect(),
            frozen: params.frozen_prefixes().to_vec(),
            best_val_miou: None,
            best_step: None,
        },
        params,
        adam: AdamState::new(),
        best_params: None,
    })
}

fn check_dataset(dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() || dataset.splits.train.is_empty() {
        return Err(Error::config(
            "training needs a dataset with a non-empty train split",
        ));
    }
    Ok(())
}

/// Stage one: train the hand-segmentation network from scratch.
pub fn train_hand_net(dataset: &Dataset, cfg: &TrainConfig, sink: LogSink) -> Result<Checkpoint> {
    check_dataset(dataset)?;
    cfg.validate()?;
    if cfg.loss_class_weights.len() != 2 {
        return Err(Error::config(format!(
            "hand segmentation is 2-class; got {} class weights",
            cfg.loss_class_weights.len()
        )));
    }
    run_training(
        fresh_checkpoint(Variant::HandSeg, cfg, None)?,
        dataset,
        sink,
    )
}

/// Stage two: train a localization variant. `hand` is the trained hand
/// network, required by every variant except the no-hand baseline; it is
/// checked before any compute happens.
pub fn train_localization_net(
    dataset: &Dataset,
    hand: Option<&ParameterSet>,
    variant: Variant,
    cfg: &TrainConfig,
    sink: LogSink,
) -> Result<Checkpoint> {
    check_dataset(dataset)?;
    cfg.validate()?;
    if variant == Variant::HandSeg {
        return Err(Error::config(
            "use the hand training entry point for handseg",
        ));
    }
    if cfg.loss_class_weights.len() != variant.loc_classes() {
        return Err(Error::config(format!(
            "variant {variant} has {} classes; got {} class weights",
            variant.loc_classes(),
            cfg.loss_class_weights.len()
        )));
    }
    run_training(fresh_checkpoint(variant, cfg, hand)?, dataset, sink)
}

/// Resume a loaded checkpoint and train to its configured step count.
/// Produces bit-identical results to a run that never stopped.
pub fn continue_training(ckpt: Checkpoint, dataset: &Dataset, sink: LogSink) -> Result<Checkpoint> {
    check_dataset(dataset)?;
    run_training(ckpt, dataset, sink)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn batch_stream_is_deterministic_and_covers_each_epoch() {
        let indices: Vec<usize> = (0..10).collect();
        let s = BatchStream::new(&indices, 3, 7).unwrap();
        // Steps 0..10 cover positions 0..30 = three full epochs.
        let mut seen_by_epoch = vec![Vec::new(); 3];
        for step in 0..10 {
            assert_eq!(s.batch(step), s.batch(step), "pure function of step");
            for (k, idx) in s.batch(step).into_iter().enumerate() {
                let pos = step * 3 + k;
                seen_by_epoch[pos / 10].push(idx);
            }
        }
        for (e, seen) in seen_by_epoch.iter().enumerate() {
            let set: BTreeSet<usize> = seen.iter().copied().collect();
            assert_eq!(set.len(), 10, "epoch {e} visits every sample once");
        }
        assert_ne!(seen_by_epoch[0], seen_by_epoch[1], "epochs reshuffle");
        let other = BatchStream::new(&indices, 3, 8).unwrap();
        assert_ne!(s.batch(0), other.batch(0), "seed changes the stream");
    }

    #[test]
    fn batch_stream_rejects_empty_split() {
        assert_eq!(BatchStream::new(&[], 4, 0).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn epoch_boundary_batches_split_cleanly() {
        let indices: Vec<usize> = (0..5).collect();
        let s = BatchStream::new(&indices, 4, 1).unwrap();
        // Batch 1 covers positions 4..8: one sample from epoch 0, three
        // from epoch 1.
        let b = s.batch(1);
        assert_eq!(b.len(), 4);
        let epoch0 = s.epoch_perm(0);
        assert_eq!(b[0], epoch0[4]);
        let epoch1 = s.epoch_perm(1);
        assert_eq!(&b[1..], &epoch1[..3]);
    }

    #[test]
    fn missing_hand_checkpoint_fails_before_compute() {
        let ds = crate::synth::generate_dataset(4, 3, &crate::synth::SceneSpec::default()).unwrap();
        let cfg = TrainConfig {
            steps: 1,
            ..TrainConfig::desk()
        };
        let err = train_localization_net(&ds, None, Variant::HpLate, &cfg, &mut discard_log())
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("hand"), "{err}");
    }

    #[test]
    fn class_weight_arity_is_validated_up_front() {
        let ds = crate::synth::generate_dataset(4, 3, &crate::synth::SceneSpec::default()).unwrap();
        let hand_params = crate::models::init_variant(Variant::HandSeg, 0, None).unwrap();
        let cfg = TrainConfig {
            steps: 1,
            ..TrainConfig::desk()
        };
        let err = train_localization_net(
            &ds,
            Some(&hand_params),
            Variant::MultiClass,
            &cfg,
            &mut discard_log(),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("class weights"), "{err}");
    }
}
