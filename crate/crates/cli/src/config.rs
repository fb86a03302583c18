//! Run configuration: one JSON document describing data, model, training,
//! and evaluation choices. Unknown keys are rejected, and the copy
//! persisted next to a run's artifacts has every default filled in so the
//! run is self-describing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use handprime::eval::ConfidenceRule;
use handprime::models::Variant;
use handprime::nn::TrainConfig;
use handprime::synth::SceneSpec;
use handprime::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Existing dataset directory; commands that can consume one use it
    /// instead of generating scenes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Number of scenes to generate; split 80/10/10.
    pub n_scenes: usize,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        // 640 scenes split into 512 train, 64 validation, 64 test.
        DataConfig {
            dataset: None,
            n_scenes: 640,
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Network variant name; the `--variant` flag overrides it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

/// Training hyperparameters, all optional: unset fields fall back to the
/// preset (default "desk"), and class weights fall back to the variant's
/// own defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_class_weights: Option<Vec<f32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_loss_weights: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub confidence_rule: ConfidenceRule,
    pub overlays: bool,
}

fn preset_base(name: &str) -> Result<TrainConfig> {
    match name {
        "desk" => Ok(TrainConfig::desk()),
        "paper-hand" => Ok(TrainConfig::paper_hand()),
        "paper-loc" => Ok(TrainConfig::paper_loc()),
        other => Err(Error::config(format!(
            "unknown preset {other:?}; expected desk, paper-hand, or paper-loc"
        ))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("bad config {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::config(format!("cannot serialize config: {e}")))?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Concrete training hyperparameters for `variant`, resolving the
    /// preset, explicit overrides, and variant-specific weight defaults in
    /// that order.
    pub fn resolve_train(&self, variant: Variant) -> Result<TrainConfig> {
        let t = &self.train;
        let base = preset_base(t.preset.as_deref().unwrap_or("desk"))?;
        let cfg = TrainConfig {
            steps: t.steps.unwrap_or(base.steps),
            learning_rate: t.learning_rate.unwrap_or(base.learning_rate),
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            adam_eps: t.adam_eps.unwrap_or(base.adam_eps),
            adam_beta1: t.adam_beta1.unwrap_or(base.adam_beta1),
            adam_beta2: t.adam_beta2.unwrap_or(base.adam_beta2),
            seed: self.seed,
            loss_class_weights: t
                .loss_class_weights
                .clone()
                .unwrap_or_else(|| variant.loss_class_weights()),
            task_loss_weights: t
                .task_loss_weights
                .clone()
                .unwrap_or_else(|| variant.task_loss_weights()),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fill every optional training field with its resolved value so the
    /// persisted copy carries no implicit defaults.
    pub fn materialize_train(&mut self, resolved: &TrainConfig) {
        let t = &mut self.train;
        t.preset = Some(t.preset.clone().unwrap_or_else(|| "desk".to_owned()));
        t.steps = Some(resolved.steps);
        t.learning_rate = Some(resolved.learning_rate);
        t.batch_size = Some(resolved.batch_size);
        t.adam_eps = Some(resolved.adam_eps);
        t.adam_beta1 = Some(resolved.adam_beta1);
        t.adam_beta2 = Some(resolved.adam_beta2);
        t.loss_class_weights = Some(resolved.loss_class_weights.clone());
        t.task_loss_weights = Some(resolved.task_loss_weights.clone());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"sede": 3}"#).unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {"step": 10}}"#).unwrap_err();
        assert!(err.to_string().contains("step"), "{err}");
    }

    #[test]
    fn presets_and_overrides_compose() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"seed": 9, "train": {"preset": "paper-loc", "batch_size": 4}}"#,
        )
        .unwrap();
        let resolved = cfg.resolve_train(Variant::NoHand).unwrap();
        assert_eq!(resolved.steps, 20000);
        assert!((resolved.learning_rate - 1e-5).abs() < 1e-12);
        assert_eq!(resolved.batch_size, 4);
        assert_eq!(resolved.seed, 9);
        assert_eq!(resolved.loss_class_weights, vec![1.0, 1.0]);
    }

    #[test]
    fn variant_defaults_fill_weights() {
        let cfg = RunConfig::default();
        let mc2 = cfg.resolve_train(Variant::MultiClass2x).unwrap();
        assert_eq!(mc2.loss_class_weights, vec![1.0, 1.0, 2.0]);
        let mt2 = cfg.resolve_train(Variant::MultiTask2x).unwrap();
        assert_eq!(mt2.task_loss_weights, vec![1.0, 2.0]);
    }

    #[test]
    fn bad_preset_is_a_config_error() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"preset": "huge"}}"#).unwrap();
        let err = cfg.resolve_train(Variant::NoHand).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("huge"), "{err}");
    }

    #[test]
    fn materialized_copy_has_no_gaps() {
        let mut cfg = RunConfig::default();
        let resolved = cfg.resolve_train(Variant::HandSeg).unwrap();
        cfg.materialize_train(&resolved);
        let text = serde_json::to_string(&cfg).unwrap();
        let round: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(round.train.steps, Some(2000));
        assert_eq!(round.train.preset.as_deref(), Some("desk"));
        assert!(round.train.loss_class_weights.is_some());
    }
}
