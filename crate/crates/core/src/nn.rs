//! Parameter storage with freezing, weight initialization, the Adam
//! optimizer, and checkpoint serialization.
//!
//! Parameters live in a [`ParameterSet`]: a sorted map from slash-separated
//! layer paths (for example `hand/conv3/a/weight`) to tensors, plus a set of
//! frozen path prefixes. Freezing is absolute: a frozen parameter is skipped
//! by the optimizer entirely, moments included, so its bytes never change.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tnsr, write_tnsr, Tensor};

/// Named parameter tensors plus frozen-prefix bookkeeping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor<f32>>,
    frozen: Vec<String>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(path)
    }

    pub fn expect(&self, path: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::config(format!("missing parameter {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(path)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total element count over parameters whose path starts with `prefix`
    /// (every parameter for an empty prefix).
    pub fn census(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(p, _)| p.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Exclude every parameter under `prefix` from optimization.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        let prefix = prefix.into();
        if !self.frozen.contains(&prefix) {
            self.frozen.push(prefix);
            self.frozen.sort();
        }
    }

    pub fn is_frozen(&self, path: &str) -> bool {
        self.frozen.iter().any(|p| path.starts_with(p.as_str()))
    }

    pub fn frozen_prefixes(&self) -> &[String] {
        &self.frozen
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(p, t)| (p.as_str(), t))
    }

    /// Copy every parameter under `src_prefix` of `other` into this set under
    /// `dst_prefix`, preserving the remainder of each path.
    pub fn adopt(&mut self, other: &ParameterSet, src_prefix: &str, dst_prefix: &str) {
        for (path, t) in other.tensors.iter() {
            if let Some(rest) = path.strip_prefix(src_prefix) {
                self.tensors
                    .insert(format!("{dst_prefix}{rest}"), t.clone());
            }
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Independent deterministic RNG stream for one layer: the same (seed, path)
/// pair always yields the same stream, and adding or removing other layers
/// does not shift it.
pub fn layer_rng(seed: u64, path: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(path))
}

/// Convolution weight initialization: zero-mean normal with standard
/// deviation `1/sqrt(cin * k * k)` (fan-in scaling).
pub fn conv_weight_init(seed: u64, path: &str, cout: usize, cin: usize, k: usize) -> Tensor<f32> {
    let std = 1.0 / ((cin * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let mut rng = layer_rng(seed, path);
    let data: Vec<f32> = (0..cout * cin * k * k)
        .map(|_| normal.sample(&mut rng) as f32)
        .collect();
    Tensor::new(vec![cout, cin, k, k], data).unwrap()
}

/// Transposed-convolution kernel performing bilinear interpolation for the
/// given factor (`k = 2 * factor`), laid out `[cin][cout][k][k]` with the
/// bilinear stencil on matching channel pairs and zero elsewhere.
pub fn bilinear_weight(cin: usize, cout: usize, factor: usize) -> Tensor<f32> {
    let k = 2 * factor;
    let center = factor as f64 - 0.5;
    let axis: Vec<f64> = (0..k)
        .map(|i| 1.0 - (i as f64 - center).abs() / factor as f64)
        .collect();
    let mut data = vec![0f32; cin * cout * k * k];
    for ci in 0..cin.min(cout) {
        for ky in 0..k {
            for kx in 0..k {
                data[((ci * cout + ci) * k + ky) * k + kx] = (axis[ky] * axis[kx]) as f32;
            }
        }
    }
    Tensor::new(vec![cin, cout, k, k], data).unwrap()
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    /// Per-class cross-entropy weights; length must match the class count of
    /// the trained head.
    pub loss_class_weights: Vec<f32>,
    /// Multi-task only: weights for (hand loss, localization loss).
    pub task_loss_weights: Vec<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale defaults: short runs that finish in minutes on a CPU.
    pub fn desk() -> Self {
        TrainConfig {
            steps: 2000,
            learning_rate: 1e-4,
            batch_size: 8,
            adam_eps: 1e-9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            seed: 0,
            loss_class_weights: vec![1.0, 1.0],
            task_loss_weights: vec![1.0, 1.0],
        }
    }

    /// Full-fidelity hand-segmentation preset.
    pub fn paper_hand() -> Self {
        TrainConfig {
            steps: 10_000,
            learning_rate: 1e-5,
            batch_size: 16,
            ..Self::desk()
        }
    }

    /// Full-fidelity localization preset.
    pub fn paper_loc() -> Self {
        TrainConfig {
            steps: 20_000,
            learning_rate: 1e-5,
            batch_size: 8,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("steps must be at least 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !self.adam_eps.is_finite() || self.adam_eps <= 0.0 {
            return Err(Error::config("adam_eps must be positive"));
        }
        if self
            .loss_class_weights
            .iter()
            .any(|&w| !w.is_finite() || w <= 0.0)
        {
            return Err(Error::config("loss_class_weights must all be positive"));
        }
        if self
            .task_loss_weights
            .iter()
            .any(|&w| !w.is_finite() || w <= 0.0)
        {
            return Err(Error::config("task_loss_weights must all be positive"));
        }
        Ok(())
    }
}

/// Per-parameter moment buffers, keyed by parameter path.
pub type MomentMap = BTreeMap<String, Vec<f32>>;

/// Adam optimizer state: first and second moment per parameter, plus the
/// step counter used for bias correction.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: MomentMap,
    v: MomentMap,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One optimization step. Parameters under a frozen prefix are skipped
    /// entirely; a parameter with no gradient entry is treated as having a
    /// zero gradient. A non-finite gradient aborts, naming the layer.
    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &BTreeMap<String, Vec<f32>>,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.t += 1;
        let b1 = cfg.adam_beta1 as f32;
        let b2 = cfg.adam_beta2 as f32;
        let lr = cfg.learning_rate as f32;
        let eps = cfg.adam_eps as f32;
        let corr1 = 1.0 - (cfg.adam_beta1).powi(self.t as i32) as f32;
        let corr2 = 1.0 - (cfg.adam_beta2).powi(self.t as i32) as f32;

        let paths: Vec<String> = params.paths().map(str::to_owned).collect();
        let zero_len = |n: usize| vec![0f32; n];
        for path in paths {
            if params.is_frozen(&path) {
                continue;
            }
            let p = params.get_mut(&path).unwrap();
            let n = p.numel();
            let g_owned;
            let g: &[f32] = match grads.get(&path) {
                Some(g) => {
                    if g.len() != n {
                        return Err(Error::config(format!(
                            "gradient for {path} has {} elements, parameter has {n}",
                            g.len()
                        )));
                    }
                    g
                }
                None => {
                    g_owned = zero_len(n);
                    &g_owned
                }
            };
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "gradient of {path} at flat index {i}"
                )));
            }
            let m = self.m.entry(path.clone()).or_insert_with(|| zero_len(n));
            let v = self.v.entry(path.clone()).or_insert_with(|| zero_len(n));
            let data = p.data_mut();
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> (&MomentMap, &MomentMap) {
        (&self.m, &self.v)
    }
}

/// Everything `manifest.json` records about a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub variant: String,
    pub config: TrainConfig,
    pub step: usize,
    pub adam_t: u64,
    pub params: Vec<String>,
    pub frozen: Vec<String>,
    pub best_val_miou: Option<f64>,
    pub best_step: Option<usize>,
}

/// A checkpoint directory: `manifest.json` plus one TNSR file per parameter
/// under `params/` and per Adam moment under `adam_m/` and `adam_v/`.
#[derive(Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParameterSet,
    pub adam: AdamState,
    /// Parameters of the best-validation snapshot, when one was recorded.
    pub best_params: Option<ParameterSet>,
}

fn path_to_file(path: &str) -> String {
    format!("{}.tnsr", path.replace('/', "."))
}

fn file_to_path(file: &str) -> String {
    file.trim_end_matches(".tnsr").replace('.', "/")
}

fn write_tensor_dir(
    dir: &Path,
    entries: impl Iterator<Item = (String, Tensor<f32>)>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (path, t) in entries {
        write_tnsr(&dir.join(path_to_file(&path)), &t)?;
    }
    Ok(())
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&ckpt.manifest).map_err(|e| {
        Error::format(
            dir.join("manifest.json").display().to_string(),
            e.to_string(),
        )
    })?;
    fs::write(dir.join("manifest.json"), manifest + "\n")?;
    write_tensor_dir(
        &dir.join("params"),
        ckpt.params.iter().map(|(p, t)| (p.to_owned(), t.clone())),
    )?;
    let (m, v) = ckpt.adam.moments();
    let as_tensor = |map: &BTreeMap<String, Vec<f32>>| {
        map.iter()
            .map(|(p, data)| {
                let shape = vec![data.len()];
                (p.clone(), Tensor::new(shape, data.clone()).unwrap())
            })
            .collect::<Vec<_>>()
    };
    write_tensor_dir(&dir.join("adam_m"), as_tensor(m).into_iter())?;
    write_tensor_dir(&dir.join("adam_v"), as_tensor(v).into_iter())?;
    if let Some(best) = &ckpt.best_params {
        write_tensor_dir(
            &dir.join("best"),
            best.iter().map(|(p, t)| (p.to_owned(), t.clone())),
        )?;
    }
    Ok(())
}

fn read_tensor_dir(dir: &Path, expected: &[String]) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut out = BTreeMap::new();
    for path in expected {
        let file = dir.join(path_to_file(path));
        if !file.exists() {
            return Err(Error::format(
                file.display().to_string(),
                "listed in manifest but missing on disk",
            ));
        }
        out.insert(path.clone(), read_tnsr(&file)?);
    }
    Ok(out)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::format(manifest_path.display().to_string(), e.to_string()))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(manifest_path.display().to_string(), e.to_string()))?;

    let mut params = ParameterSet::new();
    for (path, t) in read_tensor_dir(&dir.join("params"), &manifest.params)? {
        params.insert(path, t);
    }
    for prefix in &manifest.frozen {
        params.freeze_prefix(prefix.clone());
    }

    let mut adam = AdamState {
        t: manifest.adam_t,
        ..AdamState::new()
    };
    for (which, store) in [("adam_m", 0usize), ("adam_v", 1usize)] {
        let sub = dir.join(which);
        if !sub.exists() {
            continue;
        }
        let listed: Vec<String> = fs::read_dir(&sub)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|f| f.ends_with(".tnsr"))
            .map(|f| file_to_path(&f))
            .collect();
        for path in listed {
            let t = read_tnsr(&sub.join(path_to_file(&path)))?;
            let data = t.into_data();
            if store == 0 {
                adam.m.insert(path, data);
            } else {
                adam.v.insert(path, data);
            }
        }
    }

    let best_dir = dir.join("best");
    let best_params = if best_dir.exists() {
        let mut best = ParameterSet::new();
        for (path, t) in read_tensor_dir(&best_dir, &manifest.params)? {
            best.insert(path, t);
        }
        for prefix in &manifest.frozen {
            best.freeze_prefix(prefix.clone());
        }
        Some(best)
    } else {
        None
    };

    Ok(Checkpoint {
        manifest,
        params,
        adam,
        best_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_path_is_bit_identical() {
        let a = conv_weight_init(17, "net/conv1/weight", 8, 4, 3);
        let b = conv_weight_init(17, "net/conv1/weight", 8, 4, 3);
        assert_eq!(a, b);
        let c = conv_weight_init(17, "net/conv2/weight", 8, 4, 3);
        assert_ne!(
            a.data(),
            c.data(),
            "different layers draw different streams"
        );
        let d = conv_weight_init(18, "net/conv1/weight", 8, 4, 3);
        assert_ne!(a.data(), d.data(), "different seeds draw different streams");
    }

    #[test]
    fn fan_in_scaling_matches_sampled_stddev() {
        // 10^4 samples: cout*cin*k*k = 16 * 70 * 3 * 3 = 10080.
        let t = conv_weight_init(3, "probe/weight", 16, 70, 3);
        assert!(t.numel() >= 10_000);
        let want = 1.0 / ((70.0f64 * 9.0).sqrt());
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        let var = t
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / t.numel() as f64;
        let got = var.sqrt();
        assert!(
            (got - want).abs() / want < 0.10,
            "sampled std {got}, expected {want} within 10%"
        );
    }

    #[test]
    fn bilinear_kernel_center_values_dominate() {
        let t = bilinear_weight(1, 1, 2);
        let d = t.data();
        assert_eq!(t.shape(), &[1, 1, 4, 4]);
        let mut sorted: Vec<f32> = d.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let center: Vec<f32> = [(1, 1), (1, 2), (2, 1), (2, 2)]
            .iter()
            .map(|&(y, x)| d[y * 4 + x])
            .collect();
        for v in &center {
            assert_eq!(*v, 0.75 * 0.75);
            assert!(sorted[..4].contains(v));
        }
        // Off-diagonal channel pairs stay zero so each channel upsamples
        // independently.
        let multi = bilinear_weight(2, 2, 2);
        assert_eq!(multi.at4(0, 1, 1, 1), 0.0);
        assert_eq!(multi.at4(1, 0, 1, 1), 0.0);
        assert_eq!(multi.at4(1, 1, 1, 1), 0.75 * 0.75);
    }

    #[test]
    fn zero_gradient_from_fresh_state_changes_nothing() {
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
        let before = params.get("w").unwrap().clone();
        let mut adam = AdamState::new();
        let grads = BTreeMap::from([("w".to_string(), vec![0.0; 3])]);
        adam.step(&mut params, &grads, &TrainConfig::desk())
            .unwrap();
        assert_eq!(params.get("w").unwrap(), &before);
    }

    #[test]
    fn first_step_magnitude_is_bounded_by_learning_rate() {
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::new(vec![2], vec![0.5, -0.5]).unwrap());
        let mut adam = AdamState::new();
        let cfg = TrainConfig::desk();
        let grads = BTreeMap::from([("w".to_string(), vec![0.3f32, -4.0])]);
        adam.step(&mut params, &grads, &cfg).unwrap();
        let w = params.get("w").unwrap().data();
        let lr = cfg.learning_rate as f32;
        // First-step Adam moves each coordinate by almost exactly lr against
        // the gradient sign, regardless of gradient magnitude.
        assert!((w[0] - (0.5 - lr)).abs() < lr * 1e-3, "got {}", w[0]);
        assert!((w[1] - (-0.5 + lr)).abs() < lr * 1e-3, "got {}", w[1]);
    }

    #[test]
    fn quadratic_descent_matches_scalar_reference_and_decreases() {
        // Loss x^2 from x = 1 with lr 0.1: gradient 2x. The reference below
        // is an independent transcription of the Adam update equations.
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::desk()
        };
        let mut params = ParameterSet::new();
        params.insert("x", Tensor::new(vec![1], vec![1.0f32]).unwrap());
        let mut adam = AdamState::new();

        let (mut rm, mut rv, mut rx) = (0f64, 0f64, 1f64);
        let mut prev = 1f64;
        for t in 1..=10 {
            let g = 2.0 * params.get("x").unwrap().data()[0];
            let grads = BTreeMap::from([("x".to_string(), vec![g])]);
            adam.step(&mut params, &grads, &cfg).unwrap();

            let rg = 2.0 * rx;
            rm = 0.9 * rm + 0.1 * rg;
            rv = 0.999 * rv + 0.001 * rg * rg;
            let mh = rm / (1.0 - 0.9f64.powi(t));
            let vh = rv / (1.0 - 0.999f64.powi(t));
            rx -= 0.1 * mh / (vh.sqrt() + 1e-9);

            let x = params.get("x").unwrap().data()[0] as f64;
            assert!((x - rx).abs() < 1e-5, "step {t}: {x} vs reference {rx}");
            assert!(x.abs() < prev.abs(), "step {t}: |x| must strictly decrease");
            prev = x;
        }
    }

    #[test]
    fn frozen_prefixes_are_never_touched() {
        let mut params = ParameterSet::new();
        params.insert(
            "hand/conv1/weight",
            Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(),
        );
        params.insert(
            "loc/conv1/weight",
            Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(),
        );
        params.freeze_prefix("hand/");
        let before = params.get("hand/conv1/weight").unwrap().clone();
        let mut adam = AdamState::new();
        let grads = BTreeMap::from([
            ("hand/conv1/weight".to_string(), vec![5.0f32, 5.0]),
            ("loc/conv1/weight".to_string(), vec![5.0f32, 5.0]),
        ]);
        adam.step(&mut params, &grads, &TrainConfig::desk())
            .unwrap();
        assert_eq!(params.get("hand/conv1/weight").unwrap(), &before);
        assert_ne!(params.get("loc/conv1/weight").unwrap().data(), &[3.0, 4.0]);
        let (m, _) = adam.moments();
        assert!(
            !m.contains_key("hand/conv1/weight"),
            "frozen layers get no moments"
        );
    }

    #[test]
    fn non_finite_gradient_names_the_layer() {
        let mut params = ParameterSet::new();
        params.insert("loc/conv2/bias", Tensor::new(vec![1], vec![0.0]).unwrap());
        let mut adam = AdamState::new();
        let grads = BTreeMap::from([("loc/conv2/bias".to_string(), vec![f32::NAN])]);
        let err = adam
            .step(&mut params, &grads, &TrainConfig::desk())
            .unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("loc/conv2/bias"), "{err}");
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = TrainConfig::desk();
        cfg.learning_rate = 0.0;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        let mut cfg = TrainConfig::desk();
        cfg.adam_beta2 = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.loss_class_weights = vec![1.0, -1.0];
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::desk().validate().is_ok());
        assert_eq!(TrainConfig::paper_hand().steps, 10_000);
        assert_eq!(TrainConfig::paper_loc().batch_size, 8);
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParameterSet::new();
        params.insert("net/a/weight", conv_weight_init(5, "net/a/weight", 4, 2, 3));
        params.insert("net/a/bias", Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        params.freeze_prefix("net/a/bias");
        let mut adam = AdamState::new();
        let grads = BTreeMap::from([(
            "net/a/weight".to_string(),
            vec![0.25f32; params.get("net/a/weight").unwrap().numel()],
        )]);
        adam.step(&mut params, &grads, &TrainConfig::desk())
            .unwrap();

        let ckpt = Checkpoint {
            manifest: CheckpointManifest {
                variant: "handseg".into(),
                config: TrainConfig::desk(),
                step: 1,
                adam_t: adam.t,
                params: params.paths().map(str::to_owned).collect(),
                frozen: params.frozen_prefixes().to_vec(),
                best_val_miou: Some(0.5),
                best_step: Some(1),
            },
            params: params.clone(),
            adam: adam.clone(),
            best_params: Some(params.clone()),
        };
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.params, params);
        assert_eq!(loaded.adam.moments().0, adam.moments().0);
        assert_eq!(loaded.adam.moments().1, adam.moments().1);
        assert_eq!(loaded.adam.t, adam.t);
        assert_eq!(loaded.manifest.step, 1);
        assert!(loaded.params.is_frozen("net/a/bias"));
        assert_eq!(loaded.best_params.unwrap(), params);
    }

    #[test]
    fn missing_tensor_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParameterSet::new();
        params.insert("net/w", Tensor::new(vec![1], vec![1.0]).unwrap());
        let ckpt = Checkpoint {
            manifest: CheckpointManifest {
                variant: "handseg".into(),
                config: TrainConfig::desk(),
                step: 0,
                adam_t: 0,
                params: vec!["net/w".into()],
                frozen: vec![],
                best_val_miou: None,
                best_step: None,
            },
            params,
            adam: AdamState::new(),
            best_params: None,
        };
        save_checkpoint(dir.path(), &ckpt).unwrap();
        std::fs::remove_file(dir.path().join("params").join("net.w.tnsr")).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
