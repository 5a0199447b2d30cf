//! Run configuration: one declarative document covering every pipeline
//! stage, with preset defaults, JSON-file overrides, and a global seed that
//! derives per-stage seeds. Precedence: CLI flags > config file > preset.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::agent::DistillConfig;
use crate::counterfactual::XtMode;
use crate::data::DataConfig;
use crate::diffae::DiffAEConfig;
use crate::error::{Error, Result};
use crate::eval::CriteriaConfig;
use crate::teacher::TeacherConfig;

/// Which defaults a run starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// CPU-sized: 32x32 images, K=1, d=128, runnable end to end on a desk
    /// machine.
    Desk,
    /// The reference geometry: 256x256, K=4, d=512. Checkpoint shapes and
    /// configs only; training at this scale is out of desk budget.
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected desk or paper)"))),
        }
    }
}

/// Explain/sweep-stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    /// Class whose score manipulations push up by default.
    pub target_class: usize,
    /// Agent-logit shift per auto-grid step (the c in alpha = k*c/||g||^2).
    pub alpha_scale: f64,
    /// Gaussian sigma for heatmap smoothing at export; <= 0 disables.
    pub heatmap_sigma: f64,
    pub xt_mode: XtMode,
    /// Noise seed, used only in stochastic x_T mode.
    pub xt_seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            target_class: 1,
            alpha_scale: 1.0,
            heatmap_sigma: 1.0,
            xt_mode: XtMode::Invert,
            xt_seed: 0,
        }
    }
}

/// Every stage's configuration in one document. Unknown keys are rejected
/// anywhere in the tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; `derive_seeds` fans it out per stage.
    pub seed: u64,
    pub data: DataConfig,
    pub diffae: DiffAEConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub explain: ExplainConfig,
    pub eval: CriteriaConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => RunConfig::desk(),
            Preset::Paper => RunConfig::paper(),
        }
    }

    pub fn desk() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::desk(),
            diffae: DiffAEConfig::desk(),
            teacher: TeacherConfig::desk(),
            distill: DistillConfig::desk(),
            explain: ExplainConfig::default(),
            eval: CriteriaConfig::default(),
        }
    }

    pub fn paper() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::paper(),
            diffae: DiffAEConfig::paper(),
            teacher: TeacherConfig::paper(),
            distill: DistillConfig::paper(),
            explain: ExplainConfig::default(),
            eval: CriteriaConfig::default(),
        }
    }

    /// Fan the global seed out to every stage with fixed offsets, so one
    /// `--seed` changes the whole pipeline coherently.
    pub fn derive_seeds(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.diffae.seed = seed ^ 0x00d1_ffae;
        self.teacher.seed = seed ^ 0x007e_ac4e;
        self.distill.seed = seed ^ 0x00d1_5711;
        self.explain.xt_seed = seed ^ 0x0000_c0f7;
        self.eval.xt_seed = self.explain.xt_seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.diffae.validate()?;
        self.teacher.validate()?;
        self.distill.validate()?;
        if self.explain.target_class > 1 || self.eval.target_class > 1 {
            return Err(Error::Config("target_class must be 0 or 1".into()));
        }
        if !(self.explain.alpha_scale.is_finite() && self.explain.alpha_scale > 0.0) {
            return Err(Error::Config("explain.alpha_scale must be positive".into()));
        }
        // cross-stage consistency: one geometry end to end
        if self.diffae.image_size != self.data.image_size
            || self.teacher.image_size != self.data.image_size
        {
            return Err(Error::Config(format!(
                "image sizes disagree: data {}, diffae {}, teacher {}",
                self.data.image_size, self.diffae.image_size, self.teacher.image_size
            )));
        }
        if self.teacher.k != self.data.k {
            return Err(Error::Config(format!(
                "slice counts disagree: data K={}, teacher K={}",
                self.data.k, self.teacher.k
            )));
        }
        Ok(())
    }
}

/// Recursive JSON merge: objects merge key-by-key, everything else is
/// replaced by the overlay.
fn merge_value(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_value(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset defaults overridden by an optional JSON file. Unknown keys in the
/// file surface as config errors when the merged document is re-typed.
pub fn load_config(preset: Preset, file: Option<&Path>) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::preset(preset))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Config(format!("config file not found: {}", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        let overlay: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !overlay.is_object() {
            return Err(Error::Config(format!(
                "{}: top level must be a JSON object",
                path.display()
            )));
        }
        merge_value(&mut value, overlay);
    }
    let config: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
    }

    #[test]
    fn seed_derivation_changes_every_stage() {
        let mut a = RunConfig::desk();
        a.derive_seeds(7);
        let mut b = RunConfig::desk();
        b.derive_seeds(8);
        assert_ne!(a.data.seed, b.data.seed);
        assert_ne!(a.diffae.seed, b.diffae.seed);
        assert_ne!(a.teacher.seed, b.teacher.seed);
        assert_ne!(a.distill.seed, b.distill.seed);
        assert_ne!(a.explain.xt_seed, b.explain.xt_seed);
        // stages differ from each other under one seed
        assert_ne!(a.data.seed, a.diffae.seed);
        assert_ne!(a.diffae.seed, a.teacher.seed);
    }

    #[test]
    fn file_overrides_preset_and_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 42, "data": {"n": 128}}"#).unwrap();
        let cfg = load_config(Preset::Desk, Some(&path)).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.data.n, 128);
        // untouched fields keep preset defaults
        assert_eq!(cfg.data.image_size, DataConfig::desk().image_size);
        assert_eq!(cfg.diffae, DiffAEConfig::desk());

        std::fs::write(&path, r#"{"data": {"zzz": 1}}"#).unwrap();
        let err = load_config(Preset::Desk, Some(&path)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");

        std::fs::write(&path, r#"[1, 2]"#).unwrap();
        assert!(load_config(Preset::Desk, Some(&path)).is_err());

        let missing = dir.path().join("absent.json");
        let err = load_config(Preset::Desk, Some(&missing)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn cross_stage_mismatch_rejected() {
        let mut cfg = RunConfig::desk();
        cfg.teacher.image_size = 64;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk();
        cfg.teacher.k = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_roundtrip_is_exact() {
        let mut cfg = RunConfig::desk();
        cfg.derive_seeds(123);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
