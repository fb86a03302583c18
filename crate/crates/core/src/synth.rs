//! Seeded procedural generator of desk scenes for hand-primed object
//! localization: one hand enters from the image border and touches exactly
//! one of several objects. Ground truth per scene is a binary hand mask and
//! a Gaussian heatmap peaked at the touched object's center.
//!
//! Scenes are deterministic per seed. Layout constraints (no object
//! overlap, distractors far from the hand tip, a reachable contact point)
//! are met by rejection sampling over whole layouts; because every attempt
//! redraws all object positions and the interacted index together, the
//! accepted index stays uniform over the objects. The touched object is
//! therefore not inferable from object geometry alone, which is exactly
//! what makes the hand signal informative.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tnsr, write_tnsr, Tensor};

/// Generator parameters for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Objects per scene, drawn uniformly from `n_objects_min..=n_objects_max`.
    pub n_objects_min: usize,
    pub n_objects_max: usize,
    /// Heatmap standard deviation as a fraction of `min(height, width)`.
    pub sigma_frac: f64,
    /// Maximum gap, in pixels, between the hand tip and the touched
    /// object's boundary.
    pub contact_distance: f64,
    /// Low-contrast value-noise background texture.
    pub clutter: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            n_objects_min: 2,
            n_objects_max: 3,
            sigma_frac: 0.12,
            contact_distance: 2.5,
            clutter: true,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::config("scene height and width must be at least 32"));
        }
        if self.n_objects_min < 1
            || self.n_objects_max > 3
            || self.n_objects_min > self.n_objects_max
        {
            return Err(Error::config(format!(
                "object count range must satisfy 1 <= min <= max <= 3, got {}..={}",
                self.n_objects_min, self.n_objects_max
            )));
        }
        if !(self.sigma_frac > 0.0 && self.sigma_frac < 0.5) {
            return Err(Error::config("sigma_frac must lie in (0, 0.5)"));
        }
        if !self.contact_distance.is_finite() || self.contact_distance <= 0.0 {
            return Err(Error::config("contact_distance must be positive"));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_frac * self.height.min(self.width) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectShape {
    Disc,
    Square,
    Capsule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: ObjectShape,
    pub center: (f64, f64),
    /// Circumscribed radius in pixels.
    pub size: f64,
    pub color: [f32; 3],
    /// Capsule orientation in radians (unused for discs and squares).
    pub angle: f64,
}

/// One generated scene with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// RGB image, `[3,H,W]`, values in `[0,1]`.
    pub image: Tensor<f32>,
    /// Binary hand mask, `H*W` row-major, values 0/1.
    pub hand_mask: Vec<u8>,
    /// Center heatmap, `[H,W]`, peak exactly 1.0 at the touched object's
    /// center pixel.
    pub center_heatmap: Tensor<f32>,
    pub objects: Vec<SceneObject>,
    pub interacted_object: usize,
    /// Fingertip that makes contact, in pixel coordinates.
    pub hand_tip: (f64, f64),
    /// Point on the image border where the arm enters.
    pub wrist: (f64, f64),
    pub seed: u64,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Squared distance from point `p` to segment `ab`.
fn segment_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((px * vx + py * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (px - t * vx, py - t * vy);
    dx * dx + dy * dy
}

struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    r: f64,
}

impl Capsule {
    fn covers(&self, p: (f64, f64)) -> bool {
        segment_dist2(p, self.a, self.b) <= self.r * self.r
    }
}

struct HandGeometry {
    arm: Capsule,
    palm: ((f64, f64), f64),
    fingers: Vec<Capsule>,
    color: [f32; 3],
}

impl HandGeometry {
    fn covers(&self, p: (f64, f64)) -> bool {
        if self.arm.covers(p) {
            return true;
        }
        if dist(p, self.palm.0) <= self.palm.1 {
            return true;
        }
        self.fingers.iter().any(|f| f.covers(p))
    }
}

fn object_covers(o: &SceneObject, p: (f64, f64)) -> bool {
    match o.shape {
        ObjectShape::Disc => dist(p, o.center) <= o.size,
        ObjectShape::Square => {
            let half = o.size / std::f64::consts::SQRT_2;
            (p.0 - o.center.0).abs() <= half && (p.1 - o.center.1).abs() <= half
        }
        ObjectShape::Capsule => {
            let r = o.size * 0.55;
            let half = o.size - r;
            let (dx, dy) = (o.angle.cos() * half, o.angle.sin() * half);
            let a = (o.center.0 - dx, o.center.1 - dy);
            let b = (o.center.0 + dx, o.center.1 + dy);
            segment_dist2(p, a, b) <= r * r
        }
    }
}

/// Object colors avoid the skin ordering R > G > B and stay saturated, so
/// the hand is chromatically identifiable but objects vary freely.
fn sample_object_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    for _ in 0..64 {
        let c = [
            rng.gen_range(0.10..0.95) as f32,
            rng.gen_range(0.10..0.95) as f32,
            rng.gen_range(0.10..0.95) as f32,
        ];
        let skin_like = c[0] > c[1] && c[1] > c[2];
        let spread = (c[0] - c[1])
            .abs()
            .max((c[1] - c[2]).abs())
            .max((c[0] - c[2]).abs());
        if !skin_like && spread > 0.25 {
            return c;
        }
    }
    [0.2, 0.4, 0.8]
}

/// Skin tones span pale to dark but always order R > G > B.
fn sample_hand_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let r = rng.gen_range(0.45..0.95);
    let g = r * rng.gen_range(0.62..0.80);
    let b = g * rng.gen_range(0.55..0.80);
    [r as f32, g as f32, b as f32]
}

/// Smooth seeded value noise: a coarse random grid, bilinearly upsampled.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    const GRID: usize = 8;
    let mut grid = [[0f64; GRID + 1]; GRID + 1];
    for row in grid.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
    }
    let mut out = vec![0f64; h * w];
    for y in 0..h {
        let fy = y as f64 / h as f64 * GRID as f64;
        let (gy, ty) = (fy as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / w as f64 * GRID as f64;
            let (gx, tx) = (fx as usize, fx.fract());
            let top = grid[gy][gx] * (1.0 - tx) + grid[gy][gx + 1] * tx;
            let bot = grid[gy + 1][gx] * (1.0 - tx) + grid[gy + 1][gx + 1] * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

struct Layout {
    objects: Vec<SceneObject>,
    interacted: usize,
    hand: HandGeometry,
    tip: (f64, f64),
    wrist: (f64, f64),
}

/// One rejection-sampling attempt. Draws everything fresh so acceptance is
/// symmetric in the object index.
fn try_layout(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Option<Layout> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let scale = spec.height.min(spec.width) as f64;
    let sigma = spec.sigma();
    let n = rng.gen_range(spec.n_objects_min..=spec.n_objects_max);

    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let size = rng.gen_range(0.080..0.125) * scale;
        let shape = match rng.gen_range(0..3) {
            0 => ObjectShape::Disc,
            1 => ObjectShape::Square,
            _ => ObjectShape::Capsule,
        };
        let margin = size + 1.5;
        let center = (
            rng.gen_range(margin..w - margin),
            rng.gen_range(margin..h - margin),
        );
        let color = sample_object_color(rng);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        objects.push(SceneObject {
            shape,
            center,
            size,
            color,
            angle,
        });
    }
    for i in 0..n {
        for j in i + 1..n {
            if dist(objects[i].center, objects[j].center) < objects[i].size + objects[j].size + 3.0
            {
                return None;
            }
        }
    }

    let interacted = rng.gen_range(0..n);
    let target = objects[interacted].center;

    let wrist = match rng.gen_range(0..4) {
        0 => (rng.gen_range(0.0..w), 0.0),
        1 => (rng.gen_range(0.0..w), h),
        2 => (0.0, rng.gen_range(0.0..h)),
        _ => (w, rng.gen_range(0.0..h)),
    };
    let reach = dist(wrist, target);
    let finger_len = rng.gen_range(0.11..0.15) * scale;
    let palm_r = rng.gen_range(0.085..0.115) * scale;
    let finger_r = palm_r * rng.gen_range(0.42..0.55);
    let gap = rng.gen_range(0.25..1.0) * spec.contact_distance;
    // The arm must actually fit between the border and the contact point.
    if reach < objects[interacted].size + gap + finger_r + finger_len + 2.0 * palm_r + 4.0 {
        return None;
    }
    let away = ((wrist.0 - target.0) / reach, (wrist.1 - target.1) / reach);
    // `tip` is the contact point: where the fingertip surface sits, `gap`
    // off the object boundary. The finger's center line ends one radius
    // further out so the drawn surface touches exactly there.
    let tip_dist = objects[interacted].size + gap;
    let tip = (target.0 + away.0 * tip_dist, target.1 + away.1 * tip_dist);
    let tip_end = (tip.0 + away.0 * finger_r, tip.1 + away.1 * finger_r);

    // Distractors keep their whole boundary at least 3 sigma away from the
    // fingertip, so contact alone identifies the touched object.
    for (i, o) in objects.iter().enumerate() {
        if i != interacted && dist(tip, o.center) - o.size < 3.0 * sigma {
            return None;
        }
    }

    let palm = (
        (
            tip_end.0 + away.0 * (finger_len + 0.3 * palm_r),
            tip_end.1 + away.1 * (finger_len + 0.3 * palm_r),
        ),
        palm_r,
    );
    let arm_r = palm_r * rng.gen_range(0.80..0.95);
    let arm = Capsule {
        a: wrist,
        b: palm.0,
        r: arm_r,
    };
    let n_fingers = rng.gen_range(2..=3);
    let mut fingers = Vec::with_capacity(n_fingers);
    let base_angle = (tip_end.1 - palm.0 .1).atan2(tip_end.0 - palm.0 .0);
    fingers.push(Capsule {
        a: palm.0,
        b: tip_end,
        r: finger_r,
    });
    for k in 1..n_fingers {
        let side = if k % 2 == 1 { 1.0 } else { -1.0 };
        let ang = base_angle + side * rng.gen_range(0.30..0.55);
        let len = finger_len * rng.gen_range(0.70..0.90);
        let end = (palm.0 .0 + ang.cos() * len, palm.0 .1 + ang.sin() * len);
        fingers.push(Capsule {
            a: palm.0,
            b: end,
            r: finger_r * 0.9,
        });
    }
    let hand = HandGeometry {
        arm,
        palm,
        fingers,
        color: sample_hand_color(rng),
    };

    Some(Layout {
        objects,
        interacted,
        hand,
        tip,
        wrist,
    })
}

fn rasterize(layout: &Layout, spec: &SceneSpec, rng: &mut ChaCha8Rng, seed: u64) -> Scene {
    let (h, w) = (spec.height, spec.width);
    let sigma = spec.sigma();

    let base = [
        rng.gen_range(0.35..0.60) as f32,
        rng.gen_range(0.35..0.60) as f32,
        rng.gen_range(0.35..0.60) as f32,
    ];
    let noise = if spec.clutter {
        Some(value_noise(rng, h, w))
    } else {
        None
    };

    let mut image = vec![0f32; 3 * h * w];
    let mut hand_mask = vec![0u8; h * w];
    let target = layout.objects[layout.interacted].center;
    let (cx, cy) = (
        target.0.floor().clamp(0.0, w as f64 - 1.0),
        target.1.floor().clamp(0.0, h as f64 - 1.0),
    );
    let mut heat = vec![0f32; h * w];

    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let mut color = base;
            if let Some(nz) = &noise {
                let v = (nz[idx] - 0.5) as f32 * 0.35;
                for c in color.iter_mut() {
                    *c += v;
                }
            }
            for o in &layout.objects {
                if object_covers(o, p) {
                    color = o.color;
                }
            }
            if layout.hand.covers(p) {
                color = layout.hand.color;
                hand_mask[idx] = 1;
            }
            for (c, v) in color.iter().enumerate() {
                image[c * h * w + idx] = v.clamp(0.0, 1.0);
            }
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            heat[idx] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp() as f32;
        }
    }

    Scene {
        image: Tensor::new(vec![3, h, w], image).unwrap(),
        hand_mask,
        center_heatmap: Tensor::new(vec![h, w], heat).unwrap(),
        objects: layout.objects.clone(),
        interacted_object: layout.interacted,
        hand_tip: layout.tip,
        wrist: layout.wrist,
        seed,
    }
}

const MAX_ATTEMPTS: u32 = 100;

/// Generate one scene. Deterministic per `(seed, spec)`; fails with a
/// generation error when 100 layout attempts cannot satisfy the placement
/// constraints (the caller is expected to retry with `seed + 1`).
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(layout) = try_layout(&mut rng, spec) {
            return Ok(rasterize(&layout, spec, &mut rng, seed));
        }
    }
    Err(Error::Generation {
        seed,
        attempts: MAX_ATTEMPTS,
    })
}

/// Binarize a heatmap at `tau`: pixel set iff `value >= tau`.
pub fn heatmap_to_label(heatmap: &[f32], tau: f32) -> Vec<u8> {
    heatmap.iter().map(|&v| u8::from(v >= tau)).collect()
}

/// Center-area training label: the 0.5-binarized heatmap with hand pixels
/// removed (the hand wins overlaps, keeping the two label sets disjoint).
pub fn center_label(heatmap: &[f32], hand_mask: &[u8]) -> Vec<u8> {
    heatmap
        .iter()
        .zip(hand_mask)
        .map(|(&v, &hm)| u8::from(v >= 0.5 && hm == 0))
        .collect()
}

/// Three-class label: 0 background, 1 hand, 2 center area; hand wins
/// overlaps.
pub fn three_way_label(heatmap: &[f32], hand_mask: &[u8]) -> Vec<u8> {
    heatmap
        .iter()
        .zip(hand_mask)
        .map(|(&v, &hm)| if hm == 1 { 1 } else { u8::from(v >= 0.5) * 2 })
        .collect()
}

/// Train/validation/test partition as index lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// 80/10/10 split; validation and test take `n/10` each (floor) and train
/// keeps the remainder.
pub fn make_splits(n: usize) -> DatasetSplit {
    let tenth = n / 10;
    let n_train = n - 2 * tenth;
    DatasetSplit {
        train: (0..n_train).collect(),
        val: (n_train..n_train + tenth).collect(),
        test: (n_train + tenth..n).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!(
                "unknown split {other:?}; expected train, val, or test"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A full dataset held in memory: per-sample image, hand mask, and heatmap,
/// plus the split lists and the seed that produced each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub splits: DatasetSplit,
    pub seeds: Vec<u64>,
    pub images: Vec<Tensor<f32>>,
    pub hand_masks: Vec<Vec<u8>>,
    pub heatmaps: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    /// 0/1 hand labels for sample `i`.
    pub fn hand_labels(&self, i: usize) -> Vec<u32> {
        self.hand_masks[i].iter().map(|&v| v as u32).collect()
    }

    /// 0/1 center-area labels for sample `i` (hand wins overlap). Used for
    /// both training and as the localization ground-truth mask.
    pub fn center_labels(&self, i: usize) -> Vec<u32> {
        center_label(self.heatmaps[i].data(), &self.hand_masks[i])
            .into_iter()
            .map(|v| v as u32)
            .collect()
    }

    pub fn three_way_labels(&self, i: usize) -> Vec<u32> {
        three_way_label(self.heatmaps[i].data(), &self.hand_masks[i])
            .into_iter()
            .map(|v| v as u32)
            .collect()
    }

    /// Binary localization ground-truth mask for sample `i`.
    pub fn center_gt_mask(&self, i: usize) -> Vec<u8> {
        center_label(self.heatmaps[i].data(), &self.hand_masks[i])
    }

    /// Stack the listed samples into one `[N,3,H,W]` batch tensor.
    pub fn batch_images(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        if indices.is_empty() {
            return Err(Error::config("batch must contain at least one sample"));
        }
        let (h, w) = (self.spec.height, self.spec.width);
        let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::config(format!(
                    "sample index {i} out of range for a {}-sample dataset",
                    self.len()
                )));
            }
            data.extend_from_slice(self.images[i].data());
        }
        Tensor::new(vec![indices.len(), 3, h, w], data)
    }
}

/// Generate `n` scenes from a base seed. Per-sample seeds are drawn from a
/// seeded stream; a scene seed that cannot produce a valid layout is
/// retried at `seed + 1` until one succeeds, and the seed that actually
/// produced each sample is recorded.
pub fn generate_dataset(n: usize, seed: u64, spec: &SceneSpec) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("dataset size must be at least 1"));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut hand_masks = Vec::with_capacity(n);
    let mut heatmaps = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = master.next_u64();
        let scene = loop {
            match generate_scene(s, spec) {
                Ok(scene) => break scene,
                Err(Error::Generation { .. }) => s = s.wrapping_add(1),
                Err(e) => return Err(e),
            }
        };
        seeds.push(s);
        images.push(scene.image);
        hand_masks.push(scene.hand_mask);
        heatmaps.push(scene.center_heatmap);
    }
    Ok(Dataset {
        spec: spec.clone(),
        splits: make_splits(n),
        seeds,
        images,
        hand_masks,
        heatmaps,
    })
}

fn image_name(i: usize) -> String {
    format!("image_{i:06}.ppm")
}

fn hand_name(i: usize) -> String {
    format!("hand_{i:06}.pgm")
}

fn heat_name(i: usize) -> String {
    format!("heat_{i:06}.tnsr")
}

/// Binary PPM (P6) writer; values are quantized to 8 bits.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim(
            "write_ppm",
            format!("want [3,H,W] image, got {s:?}"),
        ));
    }
    let (h, w) = (s[1], s[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    for idx in 0..h * w {
        for c in 0..3 {
            let v = (data[c * h * w + idx].clamp(0.0, 1.0) * 255.0).round() as u8;
            bytes.push(v);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Binary PGM (P5) writer for 0/1 masks, stored as 0/255.
pub fn write_pgm(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<()> {
    if mask.len() != h * w {
        return Err(Error::dim(
            "write_pgm",
            format!("mask len {} != {h}x{w}", mask.len()),
        ));
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(mask.iter().map(|&v| if v != 0 { 255u8 } else { 0 }));
    fs::write(path, bytes)?;
    Ok(())
}

/// Parse a PNM header (`P6`/`P5`): magic, whitespace-and-comment separated
/// width, height, maxval, then one whitespace byte before the payload.
/// Returns (width, height, payload offset).
fn parse_pnm_header(bytes: &[u8], magic: &[u8], path: &Path) -> Result<(usize, usize, usize)> {
    let fail = |detail: String| Error::format(path.display().to_string(), detail);
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(fail(format!(
            "expected {} magic",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and # comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(fail("truncated header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| fail("header field is not a number".into()))?;
    }
    if fields[2] != 255 {
        return Err(fail(format!(
            "only maxval 255 is supported, got {}",
            fields[2]
        )));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail("missing whitespace after maxval".into()));
    }
    Ok((fields[0], fields[1], pos + 1))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let (w, h, offset) = parse_pnm_header(&bytes, b"P6", path)?;
    let want = 3 * h * w;
    let payload = &bytes[offset..];
    if payload.len() != want {
        return Err(Error::format(
            path.display().to_string(),
            format!("payload is {} bytes, want {want}", payload.len()),
        ));
    }
    let mut data = vec![0f32; want];
    for idx in 0..h * w {
        for c in 0..3 {
            data[c * h * w + idx] = payload[idx * 3 + c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = fs::read(path)?;
    let (w, h, offset) = parse_pnm_header(&bytes, b"P5", path)?;
    let payload = &bytes[offset..];
    if payload.len() != h * w {
        return Err(Error::format(
            path.display().to_string(),
            format!("payload is {} bytes, want {}", payload.len(), h * w),
        ));
    }
    Ok((payload.iter().map(|&v| u8::from(v >= 128)).collect(), h, w))
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    spec: SceneSpec,
    splits: DatasetSplit,
    seeds: Vec<u64>,
}

/// Write a dataset as one PPM + PGM + TNSR triple per sample plus
/// `index.json` (written last).
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w) = (dataset.spec.height, dataset.spec.width);
    for i in 0..dataset.len() {
        write_ppm(&dir.join(image_name(i)), &dataset.images[i])?;
        write_pgm(&dir.join(hand_name(i)), &dataset.hand_masks[i], h, w)?;
        write_tnsr(&dir.join(heat_name(i)), &dataset.heatmaps[i])?;
    }
    let index = IndexFile {
        spec: dataset.spec.clone(),
        splits: dataset.splits.clone(),
        seeds: dataset.seeds.clone(),
    };
    let text = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::format(dir.join("index.json").display().to_string(), e.to_string()))?;
    fs::write(dir.join("index.json"), text + "\n")?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join("index.json");
    let text = fs::read_to_string(&index_path)
        .map_err(|e| Error::format(index_path.display().to_string(), e.to_string()))?;
    let index: IndexFile = serde_json::from_str(&text)
        .map_err(|e| Error::format(index_path.display().to_string(), e.to_string()))?;
    index.spec.validate()?;
    let n = index.seeds.len();
    let listed: BTreeSet<usize> = index
        .splits
        .train
        .iter()
        .chain(&index.splits.val)
        .chain(&index.splits.test)
        .copied()
        .collect();
    let total = index.splits.train.len() + index.splits.val.len() + index.splits.test.len();
    if listed.len() != total || total != n || listed.last().is_some_and(|&m| m >= n) {
        return Err(Error::format(
            index_path.display().to_string(),
            "split lists must partition the sample indices",
        ));
    }

    let mut images = Vec::with_capacity(n);
    let mut hand_masks = Vec::with_capacity(n);
    let mut heatmaps = Vec::with_capacity(n);
    for i in 0..n {
        let image = read_ppm(&dir.join(image_name(i)))?;
        let (mask, mh, mw) = read_pgm(&dir.join(hand_name(i)))?;
        let heat = read_tnsr(&dir.join(heat_name(i)))?;
        let (h, w) = (index.spec.height, index.spec.width);
        if image.shape() != [3, h, w] || (mh, mw) != (h, w) || heat.shape() != [h, w] {
            return Err(Error::format(
                dir.join(image_name(i)).display().to_string(),
                format!("sample {i} does not match the {h}x{w} dataset geometry"),
            ));
        }
        images.push(image);
        hand_masks.push(mask);
        heatmaps.push(heat);
    }
    Ok(Dataset {
        spec: index.spec,
        splits: index.splits,
        seeds: index.seeds,
        images,
        hand_masks,
        heatmaps,
    })
}
