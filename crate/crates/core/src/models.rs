//! Network definitions: the desk-scale FCN-8s backbone, the hand-priming
//! infusion mechanism, and the comparison variants.
//!
//! There are two networks, addressed by path prefix inside one
//! [`ParameterSet`]: the hand-segmentation network under `hand/` and the
//! object-localization network under `loc/`. Each is a five-block VGG-style
//! trunk (two 3x3 convs plus relu, then a 2x2 maxpool, per block) with an
//! FCN-8s decoder: 1x1 score heads over the last three pool outputs, fused
//! by learnable 2x / 2x / 8x transposed-conv upsampling back to input
//! resolution. Hand priming concatenates the hand network's foreground
//! probability, nearest-neighbor resized to each infused block's input
//! resolution, as one extra input channel of that block's first conv.

use crate::error::{Error, Result};
use crate::kernels::{nearest_resize, softmax_channels};
use crate::nn::{bilinear_weight, conv_weight_init, layer_rng, ParameterSet};
use crate::tape::{BufId, Tape};
use crate::tensor::Tensor;

use rand_distr::{Distribution, Normal};

/// Channel widths of the five trunk blocks.
pub const BLOCK_WIDTHS: [usize; 5] = [16, 32, 64, 128, 128];
/// RGB input channels.
pub const IMAGE_CHANNELS: usize = 3;

/// The hand-segmentation model and the eight localization variants, by the
/// names they carry in configs and on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    HandSeg,
    NoHand,
    Finetune,
    MultiClass,
    MultiClass2x,
    MultiTask,
    MultiTask2x,
    HpAll,
    HpLate,
}

/// Every variant, in comparison-table order: the hand model first, then the
/// localization models from no-hand baseline to late priming.
pub const ALL_VARIANTS: [Variant; 9] = [
    Variant::HandSeg,
    Variant::NoHand,
    Variant::Finetune,
    Variant::MultiClass,
    Variant::MultiClass2x,
    Variant::MultiTask,
    Variant::MultiTask2x,
    Variant::HpAll,
    Variant::HpLate,
];

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::HandSeg => "handseg",
            Variant::NoHand => "nohand",
            Variant::Finetune => "finetune",
            Variant::MultiClass => "multiclass",
            Variant::MultiClass2x => "multiclass2x",
            Variant::MultiTask => "multitask",
            Variant::MultiTask2x => "multitask2x",
            Variant::HpAll => "hpall",
            Variant::HpLate => "hplate",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        ALL_VARIANTS
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = ALL_VARIANTS.iter().map(|v| v.name()).collect();
                Error::config(format!(
                    "unknown variant {s:?}; expected one of {}",
                    names.join(",")
                ))
            })
    }

    /// Localization variants that initialize or prime from a trained hand
    /// network. Everything except the hand model itself and the no-hand
    /// baseline.
    pub fn needs_hand_checkpoint(self) -> bool {
        !matches!(self, Variant::HandSeg | Variant::NoHand)
    }

    /// Trunk blocks that receive the hand-probability channel.
    pub fn infused_blocks(self) -> &'static [usize] {
        match self {
            Variant::HpAll => &[1, 2, 3, 4, 5],
            Variant::HpLate => &[4, 5],
            _ => &[],
        }
    }

    /// Class count of the localization output.
    pub fn loc_classes(self) -> usize {
        match self {
            Variant::MultiClass | Variant::MultiClass2x => 3,
            _ => 2,
        }
    }

    pub fn is_multitask(self) -> bool {
        matches!(self, Variant::MultiTask | Variant::MultiTask2x)
    }

    /// Whether a checkpoint of this variant can produce a hand mask. The
    /// no-hand baseline is the only model with no hand signal anywhere.
    pub fn supports_hand_eval(self) -> bool {
        !matches!(self, Variant::NoHand)
    }

    pub fn supports_loc_eval(self) -> bool {
        !matches!(self, Variant::HandSeg)
    }

    /// Per-class cross-entropy weights for the localization loss.
    pub fn loss_class_weights(self) -> Vec<f32> {
        match self {
            Variant::MultiClass => vec![1.0, 1.0, 1.0],
            Variant::MultiClass2x => vec![1.0, 1.0, 2.0],
            _ => vec![1.0, 1.0],
        }
    }

    /// (hand, localization) loss weights for the multi-task variants.
    pub fn task_loss_weights(self) -> Vec<f32> {
        match self {
            Variant::MultiTask2x => vec![1.0, 2.0],
            _ => vec![1.0, 1.0],
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn score_weight_init(seed: u64, path: &str, cout: usize, cin: usize) -> Tensor<f32> {
    conv_weight_init(seed, path, cout, cin, 1)
}

fn zero_bias(n: usize) -> Tensor<f32> {
    Tensor::zeros(vec![n])
}

/// Initialize one trunk (`{prefix}conv{1..5}/{a,b}/{weight,bias}`).
/// `infused` lists block numbers whose first conv takes one extra channel.
fn init_trunk(params: &mut ParameterSet, seed: u64, prefix: &str, infused: &[usize]) {
    let mut cin = IMAGE_CHANNELS;
    for (i, &width) in BLOCK_WIDTHS.iter().enumerate() {
        let b = i + 1;
        let cin_a = cin + usize::from(infused.contains(&b));
        let wa = format!("{prefix}conv{b}/a/weight");
        params.insert(wa.clone(), conv_weight_init(seed, &wa, width, cin_a, 3));
        params.insert(format!("{prefix}conv{b}/a/bias"), zero_bias(width));
        let wb = format!("{prefix}conv{b}/b/weight");
        params.insert(wb.clone(), conv_weight_init(seed, &wb, width, width, 3));
        params.insert(format!("{prefix}conv{b}/b/bias"), zero_bias(width));
        cin = width;
    }
}

/// Initialize one FCN-8s decoder (`{prefix}score{5,4,3}/...`, `{prefix}up{2a,2b,8}/weight`)
/// with `k` output classes. Score weights are fan-in scaled, upsampling
/// kernels start as bilinear interpolation (and remain trainable).
fn init_decoder(params: &mut ParameterSet, seed: u64, prefix: &str, k: usize) {
    for (head, cin) in [
        ("score5", BLOCK_WIDTHS[4]),
        ("score4", BLOCK_WIDTHS[3]),
        ("score3", BLOCK_WIDTHS[2]),
    ] {
        let w = format!("{prefix}{head}/weight");
        params.insert(w.clone(), score_weight_init(seed, &w, k, cin));
        params.insert(format!("{prefix}{head}/bias"), zero_bias(k));
    }
    params.insert(format!("{prefix}up2a/weight"), bilinear_weight(k, k, 2));
    params.insert(format!("{prefix}up2b/weight"), bilinear_weight(k, k, 2));
    params.insert(format!("{prefix}up8/weight"), bilinear_weight(k, k, 8));
}

/// Build the parameter set for a variant. `hand` is the trained hand
/// network's parameters, required by every variant that primes from,
/// fine-tunes, or multi-task-shares the hand model.
pub fn init_variant(
    variant: Variant,
    seed: u64,
    hand: Option<&ParameterSet>,
) -> Result<ParameterSet> {
    let mut params = ParameterSet::new();
    let hand = if variant.needs_hand_checkpoint() {
        Some(hand.ok_or_else(|| {
            Error::config(format!(
                "variant {variant} requires a trained hand checkpoint"
            ))
        })?)
    } else {
        None
    };
    match variant {
        Variant::HandSeg => {
            init_trunk(&mut params, seed, "hand/", &[]);
            init_decoder(&mut params, seed, "hand/", 2);
        }
        Variant::NoHand => {
            init_trunk(&mut params, seed, "loc/", &[]);
            init_decoder(&mut params, seed, "loc/", 2);
        }
        Variant::Finetune => {
            // The complete hand network rides along frozen: its trunk is the
            // localization trunk, and keeping its decoder preserves the
            // ability to evaluate the hand task from this checkpoint.
            params.adopt(hand.unwrap(), "hand/", "hand/");
            params.freeze_prefix("hand/");
            init_decoder(&mut params, seed, "loc/", 2);
        }
        Variant::MultiClass | Variant::MultiClass2x => {
            // Trunk starts from the hand network's weights; the 3-class
            // decoder cannot (class arity differs) and starts fresh. Nothing
            // is frozen.
            params.adopt(hand.unwrap(), "hand/conv", "loc/conv");
            init_decoder(&mut params, seed, "loc/", 3);
        }
        Variant::MultiTask | Variant::MultiTask2x => {
            // Shared trunk plus hand decoder start from the hand network;
            // the localization head starts fresh. Everything trains.
            params.adopt(hand.unwrap(), "hand/conv", "loc/conv");
            params.adopt(hand.unwrap(), "hand/score", "loc/hand_head/score");
            params.adopt(hand.unwrap(), "hand/up", "loc/hand_head/up");
            init_decoder(&mut params, seed, "loc/loc_head/", 2);
        }
        Variant::HpAll | Variant::HpLate => {
            params.adopt(hand.unwrap(), "hand/", "hand/");
            params.freeze_prefix("hand/");
            init_trunk(&mut params, seed, "loc/", variant.infused_blocks());
            init_decoder(&mut params, seed, "loc/", 2);
        }
    }
    Ok(params)
}

/// One forward pass under construction: the tape, plus the mapping from
/// parameter path to tape buffer for every trainable parameter bound so far
/// (frozen parameters enter as constants and are not listed).
pub struct NetGraph<'a> {
    pub tape: &'a mut Tape<f32>,
    params: &'a ParameterSet,
    pub bound: Vec<(String, BufId)>,
}

impl<'a> NetGraph<'a> {
    pub fn new(tape: &'a mut Tape<f32>, params: &'a ParameterSet) -> Self {
        NetGraph {
            tape,
            params,
            bound: Vec::new(),
        }
    }

    fn bind(&mut self, path: &str) -> Result<BufId> {
        let t = self.params.expect(path)?;
        if self.params.is_frozen(path) {
            Ok(self.tape.constant(t))
        } else {
            let id = self.tape.param(t);
            self.bound.push((path.to_owned(), id));
            Ok(id)
        }
    }

    fn conv(&mut self, x: BufId, prefix: &str, pad: usize) -> Result<BufId> {
        let w = self.bind(&format!("{prefix}/weight"))?;
        let b = self.bind(&format!("{prefix}/bias"))?;
        self.tape.conv2d(x, w, b, 1, pad)
    }

    fn upsample(&mut self, x: BufId, prefix: &str, factor: usize) -> Result<BufId> {
        let w = self.bind(&format!("{prefix}/weight"))?;
        self.tape.upsample(x, w, factor)
    }

    /// Run the five-block trunk from an already-registered image buffer.
    /// `hand_prob` is the `[N,1,H,W]` hand foreground probability, consumed
    /// as a detached constant, resized to each infused block's resolution.
    fn trunk(
        &mut self,
        prefix: &str,
        image: BufId,
        hand_prob: Option<&Tensor<f32>>,
        infused: &[usize],
    ) -> Result<[BufId; 5]> {
        let mut x = image;
        let mut pools = [BufId::default(); 5];
        for (i, _) in BLOCK_WIDTHS.iter().enumerate() {
            let b = i + 1;
            if infused.contains(&b) {
                let prob = hand_prob.ok_or_else(|| {
                    Error::config("hand-priming forward needs a hand probability map")
                })?;
                let [n, c, h, w] = [
                    prob.shape()[0],
                    prob.shape()[1],
                    prob.shape()[2],
                    prob.shape()[3],
                ];
                let xs = self.tape.shape(x);
                let (th, tw) = (xs[2], xs[3]);
                let resized = nearest_resize(prob.data(), n, c, h, w, th, tw)?;
                let channel = Tensor::new(vec![n, c, th, tw], resized)?;
                let cid = self.tape.constant(&channel);
                x = self.tape.concat_channels(&[x, cid])?;
            }
            x = self.conv(x, &format!("{prefix}conv{b}/a"), 1)?;
            x = self.tape.relu(x);
            x = self.conv(x, &format!("{prefix}conv{b}/b"), 1)?;
            x = self.tape.relu(x);
            x = self.tape.maxpool2d(x, 2, 2)?;
            pools[i] = x;
        }
        Ok(pools)
    }

    /// FCN-8s decoder: score the last three pool outputs at 1x1, fuse with
    /// learnable 2x upsampling twice, then return to input resolution at 8x.
    fn decoder(&mut self, prefix: &str, pools: &[BufId; 5]) -> Result<BufId> {
        let s5 = self.conv(pools[4], &format!("{prefix}score5"), 0)?;
        let s4 = self.conv(pools[3], &format!("{prefix}score4"), 0)?;
        let s3 = self.conv(pools[2], &format!("{prefix}score3"), 0)?;
        let u = self.upsample(s5, &format!("{prefix}up2a"), 2)?;
        let f = self.tape.add(u, s4)?;
        let u = self.upsample(f, &format!("{prefix}up2b"), 2)?;
        let f = self.tape.add(u, s3)?;
        self.upsample(f, &format!("{prefix}up8"), 8)
    }

    fn check_divisible(&self, image: &Tensor<f32>) -> Result<()> {
        let s = image.shape();
        if s.len() != 4 || s[1] != IMAGE_CHANNELS {
            return Err(Error::dim(
                "forward",
                format!("want [N,3,H,W] image, got {s:?}"),
            ));
        }
        if !s[2].is_multiple_of(32) || !s[3].is_multiple_of(32) {
            return Err(Error::dim(
                "forward",
                format!(
                    "input height and width must be divisible by 32, got {}x{}",
                    s[2], s[3]
                ),
            ));
        }
        Ok(())
    }
}

/// Outputs of one localization forward pass.
#[derive(Debug)]
pub struct LocForward {
    /// Per-pixel localization logits, `[N,K,H,W]`.
    pub loc_logits: BufId,
    /// Hand-head logits for the multi-task variants, absent otherwise.
    pub hand_logits: Option<BufId>,
    /// Trainable parameters bound into the graph, for gradient extraction.
    pub bound: Vec<(String, BufId)>,
}

/// Hand-segmentation forward pass: `[N,3,H,W]` to 2-class logits at input
/// resolution. Returns the logits buffer and the trainable-parameter
/// bindings.
pub fn forward_hand(
    tape: &mut Tape<f32>,
    params: &ParameterSet,
    image: &Tensor<f32>,
) -> Result<(BufId, Vec<(String, BufId)>)> {
    let mut g = NetGraph::new(tape, params);
    g.check_divisible(image)?;
    let x = g.tape.constant(image);
    let pools = g.trunk("hand/", x, None, &[])?;
    let logits = g.decoder("hand/", &pools)?;
    Ok((logits, g.bound))
}

/// Localization forward pass for any localization variant. `hand_prob` is
/// required exactly for the priming variants and ignored otherwise.
pub fn forward_localization(
    tape: &mut Tape<f32>,
    params: &ParameterSet,
    variant: Variant,
    image: &Tensor<f32>,
    hand_prob: Option<&Tensor<f32>>,
) -> Result<LocForward> {
    if variant == Variant::HandSeg {
        return Err(Error::config(
            "handseg has no localization head; use the hand forward pass",
        ));
    }
    if !variant.infused_blocks().is_empty() && hand_prob.is_none() {
        return Err(Error::config(format!(
            "variant {variant} requires the hand probability map as forward input"
        )));
    }
    let mut g = NetGraph::new(tape, params);
    g.check_divisible(image)?;
    let x = g.tape.constant(image);
    if variant == Variant::Finetune {
        // The frozen hand trunk feeds a trainable localization decoder.
        let pools = g.trunk("hand/", x, None, &[])?;
        let loc_logits = g.decoder("loc/", &pools)?;
        return Ok(LocForward {
            loc_logits,
            hand_logits: None,
            bound: g.bound,
        });
    }
    let pools = g.trunk("loc/", x, hand_prob, variant.infused_blocks())?;
    if variant.is_multitask() {
        let hand_logits = g.decoder("loc/hand_head/", &pools)?;
        let loc_logits = g.decoder("loc/loc_head/", &pools)?;
        return Ok(LocForward {
            loc_logits,
            hand_logits: Some(hand_logits),
            bound: g.bound,
        });
    }
    let loc_logits = g.decoder("loc/", &pools)?;
    Ok(LocForward {
        loc_logits,
        hand_logits: None,
        bound: g.bound,
    })
}

/// Run the hand network in inference mode and return the foreground
/// probability map `[N,1,H,W]` (softmax channel 1). Used to compute the
/// priming signal and to evaluate the hand task of checkpoints that carry a
/// frozen hand network.
pub fn hand_probability(params: &ParameterSet, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let (logits, _) = forward_hand(&mut tape, params, image)?;
    let s = tape.shape(logits).to_vec();
    let (n, kc, h, w) = (s[0], s[1], s[2], s[3]);
    let probs = softmax_channels(tape.data(logits), n, kc, h * w);
    let mut fg = vec![0f32; n * h * w];
    for i in 0..n {
        let base = (i * kc + 1) * h * w;
        fg[i * h * w..(i + 1) * h * w].copy_from_slice(&probs[base..base + h * w]);
    }
    Tensor::new(vec![n, 1, h, w], fg)
}

/// Labels for one training sample, precomputed from the dataset.
pub struct SampleLabels {
    /// 2-class hand labels (0 background, 1 hand), row-major over `N*H*W`.
    pub hand: Vec<u32>,
    /// 2-class center-area labels (0 background, 1 center).
    pub center: Vec<u32>,
    /// 3-class labels (0 background, 1 hand, 2 center; hand wins overlap).
    pub three_way: Vec<u32>,
}

/// Attach the variant's loss to a finished forward pass and return the
/// scalar loss buffer.
pub fn loss_for_variant(
    tape: &mut Tape<f32>,
    variant: Variant,
    out: &LocForward,
    labels: &SampleLabels,
    class_weights: &[f32],
    task_weights: &[f32],
) -> Result<BufId> {
    let k = variant.loc_classes();
    if class_weights.len() != k {
        return Err(Error::config(format!(
            "variant {variant} has {k} classes but {} class weights were given",
            class_weights.len()
        )));
    }
    if variant.is_multitask() {
        if task_weights.len() != 2 {
            return Err(Error::config(format!(
                "multi-task training takes 2 task weights, got {}",
                task_weights.len()
            )));
        }
        let hand_logits = out
            .hand_logits
            .ok_or_else(|| Error::config("multi-task forward produced no hand head"))?;
        let l_hand = tape.softmax_cross_entropy(hand_logits, &labels.hand, &[1.0, 1.0])?;
        let l_loc = tape.softmax_cross_entropy(out.loc_logits, &labels.center, class_weights)?;
        let sh = tape.scale(l_hand, task_weights[0]);
        let sl = tape.scale(l_loc, task_weights[1]);
        return tape.add(sh, sl);
    }
    let labels = match k {
        3 => &labels.three_way,
        _ => &labels.center,
    };
    tape.softmax_cross_entropy(out.loc_logits, labels, class_weights)
}

/// Deterministic per-layer weight noise used by structural tests to perturb
/// one decoder head without touching any other parameter.
pub fn perturb_prefix(params: &mut ParameterSet, prefix: &str, seed: u64, magnitude: f32) {
    let paths: Vec<String> = params
        .paths()
        .filter(|p| p.starts_with(prefix))
        .map(str::to_owned)
        .collect();
    for path in paths {
        let mut rng = layer_rng(seed, &path);
        let normal = Normal::new(0.0, magnitude as f64).unwrap();
        let t = params.get_mut(&path).unwrap();
        for v in t.data_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::TrainConfig;
    use std::collections::BTreeMap;

    fn test_image(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = layer_rng(seed, "test/image");
        let normal = Normal::new(0.5, 0.2).unwrap();
        let data = (0..n * IMAGE_CHANNELS * h * w)
            .map(|_| (normal.sample(&mut rng) as f32).clamp(0.0, 1.0))
            .collect();
        Tensor::new(vec![n, IMAGE_CHANNELS, h, w], data).unwrap()
    }

    fn flat_labels(n: usize, hw: usize, val: u32) -> Vec<u32> {
        vec![val; n * hw]
    }

    #[test]
    fn variant_names_round_trip() {
        for v in ALL_VARIANTS {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert_eq!(Variant::parse("fcn").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn hand_forward_shape_and_softmax_normalization() {
        let params = init_variant(Variant::HandSeg, 7, None).unwrap();
        let image = test_image(2, 64, 64, 1);
        let mut tape = Tape::new();
        let (logits, bound) = forward_hand(&mut tape, &params, &image).unwrap();
        assert_eq!(tape.shape(logits), &[2, 2, 64, 64]);
        assert_eq!(bound.len(), params.len(), "every parameter is trainable");
        let probs = softmax_channels(tape.data(logits), 2, 2, 64 * 64);
        for px in 0..64 * 64 {
            let s = probs[px] + probs[64 * 64 + px];
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn indivisible_input_is_a_dimension_error() {
        let params = init_variant(Variant::HandSeg, 7, None).unwrap();
        let image = test_image(1, 48, 64, 1);
        let mut tape = Tape::new();
        let err = forward_hand(&mut tape, &params, &image).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("divisible by 32"), "{err}");
    }

    #[test]
    fn hand_dependent_variants_refuse_missing_checkpoint() {
        for v in [
            Variant::Finetune,
            Variant::MultiClass,
            Variant::MultiTask2x,
            Variant::HpAll,
            Variant::HpLate,
        ] {
            let err = init_variant(v, 0, None).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{v}");
        }
        assert!(init_variant(Variant::NoHand, 0, None).is_ok());
    }

    #[test]
    fn priming_census_matches_extra_channel_arithmetic() {
        let hand = init_variant(Variant::HandSeg, 3, None).unwrap();
        let nohand = init_variant(Variant::NoHand, 3, None).unwrap();
        let hpall = init_variant(Variant::HpAll, 3, Some(&hand)).unwrap();
        let hplate = init_variant(Variant::HpLate, 3, Some(&hand)).unwrap();
        // One extra input channel in block b's first conv costs 3*3*width_b
        // weights; biases are unchanged.
        let all_extra: usize = BLOCK_WIDTHS.iter().map(|w| 9 * w).sum();
        let late_extra: usize = 9 * (BLOCK_WIDTHS[3] + BLOCK_WIDTHS[4]);
        assert_eq!(hpall.census("loc/"), nohand.census("loc/") + all_extra);
        assert_eq!(hplate.census("loc/"), nohand.census("loc/") + late_extra);
        // The frozen hand network rides along in full.
        assert_eq!(hpall.census("hand/"), hand.census("hand/"));
        assert!(hpall.is_frozen("hand/conv3/a/weight"));
        assert!(!hpall.is_frozen("loc/conv3/a/weight"));
    }

    #[test]
    fn finetune_freezes_trunk_and_trains_decoder_only() {
        let hand = init_variant(Variant::HandSeg, 3, None).unwrap();
        let ft = init_variant(Variant::Finetune, 4, Some(&hand)).unwrap();
        assert_eq!(
            ft.get("hand/conv2/a/weight").unwrap(),
            hand.get("hand/conv2/a/weight").unwrap(),
            "trunk adopted bitwise"
        );
        assert!(ft.is_frozen("hand/conv5/b/weight"));
        assert!(!ft.is_frozen("loc/score5/weight"));
        let image = test_image(1, 64, 64, 2);
        let mut tape = Tape::new();
        let out = forward_localization(&mut tape, &ft, Variant::Finetune, &image, None).unwrap();
        assert_eq!(tape.shape(out.loc_logits), &[1, 2, 64, 64]);
        // Only the fresh decoder is trainable: 3 score heads (weight+bias)
        // plus 3 upsampling kernels.
        assert_eq!(out.bound.len(), 9);
        assert!(out.bound.iter().all(|(p, _)| p.starts_with("loc/")));
    }

    #[test]
    fn multitask_heads_share_trunk_but_not_decoders() {
        let hand = init_variant(Variant::HandSeg, 3, None).unwrap();
        let mut mt = init_variant(Variant::MultiTask, 5, Some(&hand)).unwrap();
        assert_eq!(
            mt.get("loc/hand_head/score5/weight").unwrap(),
            hand.get("hand/score5/weight").unwrap()
        );
        let image = test_image(1, 64, 64, 3);
        let mut tape = Tape::new();
        let before =
            forward_localization(&mut tape, &mt, Variant::MultiTask, &image, None).unwrap();
        let loc_before = tape.data(before.loc_logits).to_vec();
        let hand_before = tape.data(before.hand_logits.unwrap()).to_vec();

        perturb_prefix(&mut mt, "loc/hand_head/", 99, 0.05);
        let mut tape = Tape::new();
        let after = forward_localization(&mut tape, &mt, Variant::MultiTask, &image, None).unwrap();
        assert_eq!(
            tape.data(after.loc_logits),
            &loc_before[..],
            "localization head ignores hand-head perturbation"
        );
        assert_ne!(tape.data(after.hand_logits.unwrap()), &hand_before[..]);
    }

    #[test]
    fn infusion_channel_is_constant_and_detached() {
        let hand = init_variant(Variant::HandSeg, 3, None).unwrap();
        let hp = init_variant(Variant::HpLate, 6, Some(&hand)).unwrap();
        let image = test_image(1, 64, 64, 4);
        let prob = Tensor::filled(vec![1, 1, 64, 64], 0.5f32);
        let mut tape = Tape::new();
        let out =
            forward_localization(&mut tape, &hp, Variant::HpLate, &image, Some(&prob)).unwrap();
        assert_eq!(tape.shape(out.loc_logits), &[1, 2, 64, 64]);
        assert!(
            out.bound.iter().all(|(p, _)| p.starts_with("loc/")),
            "no hand parameter is trainable under priming"
        );
        // Missing probability map is rejected before any compute.
        let mut tape = Tape::new();
        let err = forward_localization(&mut tape, &hp, Variant::HpLate, &image, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn hplate_with_zero_prob_matches_nohand_shape_contract() {
        // A zero probability map contributes a constant zero channel, so the
        // priming net differs from a no-hand net only by that channel's
        // weights; shapes and graph structure line up exactly.
        let hand = init_variant(Variant::HandSeg, 3, None).unwrap();
        let hp = init_variant(Variant::HpLate, 6, Some(&hand)).unwrap();
        let image = test_image(1, 64, 64, 4);
        let zero = Tensor::zeros(vec![1, 1, 64, 64]);
        let mut tape = Tape::new();
        let out =
            forward_localization(&mut tape, &hp, Variant::HpLate, &image, Some(&zero)).unwrap();
        assert_eq!(tape.shape(out.loc_logits), &[1, 2, 64, 64]);
        assert_eq!(
            hp.get("loc/conv4/a/weight").unwrap().shape(),
            &[128, 65, 3, 3]
        );
        assert_eq!(
            hp.get("loc/conv1/a/weight").unwrap().shape(),
            &[16, 3, 3, 3]
        );
    }

    #[test]
    fn multiclass_output_argmax_is_three_way() {
        let hand = init_variant(Variant::HandSeg, 3, None).unwrap();
        let mc = init_variant(Variant::MultiClass, 8, Some(&hand)).unwrap();
        let image = test_image(1, 64, 64, 5);
        let mut tape = Tape::new();
        let out = forward_localization(&mut tape, &mc, Variant::MultiClass, &image, None).unwrap();
        assert_eq!(tape.shape(out.loc_logits), &[1, 3, 64, 64]);
        assert!(out.hand_logits.is_none());
        assert_eq!(
            mc.get("loc/conv1/a/weight").unwrap(),
            hand.get("hand/conv1/a/weight").unwrap(),
            "trunk starts from the hand network"
        );
        assert!(!mc.is_frozen("loc/conv1/a/weight"));
    }

    #[test]
    fn multitask_2x_loss_is_weighted_sum_of_head_losses() {
        let hand = init_variant(Variant::HandSeg, 3, None).unwrap();
        let mt = init_variant(Variant::MultiTask2x, 5, Some(&hand)).unwrap();
        let image = test_image(1, 64, 64, 6);
        let labels = SampleLabels {
            hand: flat_labels(1, 64 * 64, 0),
            center: flat_labels(1, 64 * 64, 1),
            three_way: flat_labels(1, 64 * 64, 0),
        };
        let mut tape = Tape::new();
        let out = forward_localization(&mut tape, &mt, Variant::MultiTask2x, &image, None).unwrap();
        let l_hand = tape
            .softmax_cross_entropy(out.hand_logits.unwrap(), &labels.hand, &[1.0, 1.0])
            .unwrap();
        let l_loc = tape
            .softmax_cross_entropy(out.loc_logits, &labels.center, &[1.0, 1.0])
            .unwrap();
        let (vh, vl) = (tape.data(l_hand)[0] as f64, tape.data(l_loc)[0] as f64);

        let mut tape = Tape::new();
        let out = forward_localization(&mut tape, &mt, Variant::MultiTask2x, &image, None).unwrap();
        let total = loss_for_variant(
            &mut tape,
            Variant::MultiTask2x,
            &out,
            &labels,
            &[1.0, 1.0],
            &Variant::MultiTask2x.task_loss_weights(),
        )
        .unwrap();
        let got = tape.data(total)[0] as f64;
        assert!(
            (got - (vh + 2.0 * vl)).abs() < 1e-6,
            "{got} vs {vh} + 2*{vl}"
        );
    }

    #[test]
    fn class_weight_arity_mismatch_is_a_config_error() {
        let hand = init_variant(Variant::HandSeg, 3, None).unwrap();
        let mc = init_variant(Variant::MultiClass, 8, Some(&hand)).unwrap();
        let image = test_image(1, 64, 64, 7);
        let labels = SampleLabels {
            hand: flat_labels(1, 64 * 64, 0),
            center: flat_labels(1, 64 * 64, 0),
            three_way: flat_labels(1, 64 * 64, 0),
        };
        let mut tape = Tape::new();
        let out = forward_localization(&mut tape, &mc, Variant::MultiClass, &image, None).unwrap();
        let err = loss_for_variant(
            &mut tape,
            Variant::MultiClass,
            &out,
            &labels,
            &[1.0, 1.0],
            &[1.0, 1.0],
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn forward_is_deterministic_for_fixed_inputs() {
        let params = init_variant(Variant::NoHand, 11, None).unwrap();
        let image = test_image(2, 64, 64, 8);
        let run = || {
            let mut tape = Tape::new();
            let out =
                forward_localization(&mut tape, &params, Variant::NoHand, &image, None).unwrap();
            tape.data(out.loc_logits).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn hand_probability_is_a_valid_probability_map() {
        let params = init_variant(Variant::HandSeg, 13, None).unwrap();
        let image = test_image(1, 64, 64, 9);
        let prob = hand_probability(&params, &image).unwrap();
        assert_eq!(prob.shape(), &[1, 1, 64, 64]);
        assert!(prob.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn frozen_hand_net_survives_a_priming_training_step() {
        let hand = init_variant(Variant::HandSeg, 3, None).unwrap();
        let mut hp = init_variant(Variant::HpLate, 6, Some(&hand)).unwrap();
        let image = test_image(1, 64, 64, 10);
        let prob = hand_probability(&hp, &image).unwrap();
        let labels = SampleLabels {
            hand: flat_labels(1, 64 * 64, 0),
            center: flat_labels(1, 64 * 64, 1),
            three_way: flat_labels(1, 64 * 64, 0),
        };
        let before: Vec<(String, Tensor<f32>)> = hp
            .iter()
            .filter(|(p, _)| p.starts_with("hand/"))
            .map(|(p, t)| (p.to_owned(), t.clone()))
            .collect();

        let mut tape = Tape::new();
        let out =
            forward_localization(&mut tape, &hp, Variant::HpLate, &image, Some(&prob)).unwrap();
        let loss = loss_for_variant(
            &mut tape,
            Variant::HpLate,
            &out,
            &labels,
            &[1.0, 1.0],
            &[1.0, 1.0],
        )
        .unwrap();
        tape.backward(loss).unwrap();
        let mut grads = BTreeMap::new();
        for (path, id) in &out.bound {
            if let Some(g) = tape.grad(*id) {
                grads.insert(path.clone(), g.to_vec());
            }
        }
        let mut adam = crate::nn::AdamState::new();
        adam.step(&mut hp, &grads, &TrainConfig::desk()).unwrap();
        for (path, t) in before {
            assert_eq!(hp.get(&path).unwrap(), &t, "{path} changed under freezing");
        }
        assert_ne!(
            hp.get("loc/score5/weight").unwrap(),
            init_variant(Variant::HpLate, 6, Some(&hand))
                .unwrap()
                .get("loc/score5/weight")
                .unwrap(),
            "trainable parameters did move"
        );
    }
}
