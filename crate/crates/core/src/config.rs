//! Flat run configuration: one struct drives model shape, objective weights,
//! perturbations, schedule, seeds, and ablation toggles. Every field has a
//! default, so partial JSON configs work and flags can override single keys.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::masking::{MaskSpec, PerturbConfig};
use crate::nets::NetConfig;
use crate::objective::{LossWeights, SemanticLossKind};
use crate::rng::tag;
use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    // model shape
    pub classes: usize,
    pub in_channels: usize,
    pub e_dim: usize,
    pub d_prime: usize,
    pub use_bias: bool,
    pub head_kernel: usize,

    // objective
    pub lambda_u: f64,
    pub lambda_mp: f64,
    pub lambda_mf: f64,
    pub lambda_ms: f64,
    pub psi: f64,
    pub tau: f64,
    pub alpha: f64,

    // masking and perturbation
    pub patch: usize,
    pub ratio: f64,
    pub drop_p: f64,
    pub flip_prob: f64,
    pub max_shift: usize,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_std: f64,
    pub channel_shuffle_prob: f64,

    // schedule
    pub batch: usize,
    pub iterations: usize,
    pub lr_main: f64,
    pub lr_pid: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling, 0 disables.
    pub clip_norm: f64,

    // seeds
    pub seed_model: u64,
    pub seed_data: u64,
    pub seed_mask: u64,

    // component toggles
    pub enable_unlabeled: bool,
    pub enable_mimpi: bool,
    pub enable_mimfea: bool,
    pub enable_mimse: bool,
    /// Off: reconstruction skips class grouping (single shared head path).
    pub classwise_mim: bool,
    /// Off: feature loss targets per-batch prototypes instead of the EMA memory.
    pub use_dictionary: bool,
    /// Off: uniform weights replace confidence in prototype and aggregation.
    pub use_confidence: bool,
    /// Eq-style mean over gated positions; off divides by all positions.
    pub gated_mean: bool,
    /// Confidence-gate the semantic consistency targets (ablation variant).
    pub semantic_gated: bool,
    pub semantic_loss: SemanticLossKind,
    pub detach_fp_target: bool,
    /// Reuse the first batch draw for the masked-stream phase.
    pub share_phase_batch: bool,

    // reporting
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            classes: 4,
            in_channels: 3,
            e_dim: 32,
            d_prime: 32,
            use_bias: true,
            head_kernel: 3,

            lambda_u: 0.5,
            lambda_mp: 1.0 / 3.0,
            lambda_mf: 0.05,
            lambda_ms: 0.1 / 3.0,
            psi: 0.95,
            tau: 10.0,
            alpha: 0.99,

            patch: 6,
            ratio: 0.4,
            drop_p: 0.5,
            flip_prob: 0.5,
            max_shift: 4,
            brightness: 0.2,
            contrast: 0.2,
            noise_std: 0.05,
            channel_shuffle_prob: 0.2,

            batch: 4,
            iterations: 2000,
            lr_main: 0.1,
            lr_pid: 0.02,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 5.0,

            seed_model: 1,
            seed_data: 2,
            seed_mask: 3,

            enable_unlabeled: true,
            enable_mimpi: true,
            enable_mimfea: true,
            enable_mimse: true,
            classwise_mim: true,
            use_dictionary: true,
            use_confidence: true,
            gated_mean: true,
            semantic_gated: false,
            semantic_loss: SemanticLossKind::CrossEntropy,
            detach_fp_target: true,
            share_phase_batch: false,

            eval_interval: 0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            in_channels: self.in_channels,
            num_classes: self.classes,
            e_dim: self.e_dim,
            d_prime: self.d_prime,
            use_bias: self.use_bias,
            head_kernel: self.head_kernel,
        }
    }

    pub fn mask_spec(&self) -> Result<MaskSpec> {
        MaskSpec::new(self.patch, self.ratio)
    }

    pub fn perturb_config(&self) -> PerturbConfig {
        PerturbConfig {
            flip_prob: self.flip_prob,
            max_shift: self.max_shift,
            brightness: self.brightness,
            contrast: self.contrast,
            noise_std: self.noise_std,
            channel_shuffle_prob: self.channel_shuffle_prob,
        }
    }

    /// Weights as they enter the combined objective: a disabled component
    /// drops its lambda from both the numerator and the normalizer.
    pub fn active_weights(&self) -> LossWeights {
        let gate = |on: bool, v: f64| if on { v } else { 0.0 };
        LossWeights {
            lambda_u: gate(self.enable_unlabeled, self.lambda_u),
            lambda_mp: gate(self.enable_mimpi, self.lambda_mp),
            lambda_mf: gate(self.enable_mimfea, self.lambda_mf),
            lambda_ms: gate(self.enable_mimse, self.lambda_ms),
        }
    }

    pub fn any_mim(&self) -> bool {
        self.enable_mimpi || self.enable_mimfea || self.enable_mimse
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TensorError::InvalidArgument(m));
        if self.classes < 2 {
            return bad(format!("classes {} < 2", self.classes));
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(0.0 < self.psi && self.psi <= 1.0) {
            return bad(format!("psi {} outside (0, 1]", self.psi));
        }
        if self.tau <= 0.0 {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1)", self.alpha));
        }
        if !(0.0..1.0).contains(&self.drop_p) {
            return bad(format!("drop_p {} outside [0, 1)", self.drop_p));
        }
        for (name, v) in [
            ("lambda_u", self.lambda_u),
            ("lambda_mp", self.lambda_mp),
            ("lambda_mf", self.lambda_mf),
            ("lambda_ms", self.lambda_ms),
            ("lr_main", self.lr_main),
            ("lr_pid", self.lr_pid),
            ("poly_power", self.poly_power),
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be finite and nonnegative"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        self.mask_spec()?;
        Ok(())
    }

    /// Stable fingerprint of the serialized config, embedded in checkpoints
    /// so resumes against a different config can be flagged.
    pub fn hash(&self) -> u64 {
        tag(&serde_json::to_string(self).expect("config serializes"))
    }
}

/// Applies JSON-typed overrides onto an existing config. Keys follow the
/// serde field names; unknown keys and type mismatches are rejected.
pub fn apply_overrides(
    base: &TrainConfig,
    overrides: &BTreeMap<String, serde_json::Value>,
) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(base).expect("config serializes");
    let obj = value.as_object_mut().expect("config is an object");
    for (key, v) in overrides {
        obj.insert(key.clone(), v.clone());
    }
    let cfg: TrainConfig = serde_json::from_value(value)
        .map_err(|e| TensorError::InvalidArgument(format!("override: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a config file (all keys optional), then applies `key=value`
/// overrides using the same JSON names.
pub fn load_config(file_json: Option<&str>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let mut value: serde_json::Value = match file_json {
        Some(text) => serde_json::from_str(text)
            .map_err(|e| TensorError::InvalidArgument(format!("config parse: {e}")))?,
        None => serde_json::json!({}),
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| TensorError::InvalidArgument("config root must be an object".into()))?;
    for (key, raw) in overrides {
        // Typed scalars first, string as the fallback (semantic_loss etc).
        let v = if let Ok(b) = raw.parse::<bool>() {
            serde_json::json!(b)
        } else if let Ok(i) = raw.parse::<u64>() {
            serde_json::json!(i)
        } else if let Ok(f) = raw.parse::<f64>() {
            serde_json::json!(f)
        } else {
            serde_json::json!(raw)
        };
        obj.insert(key.clone(), v);
    }
    let cfg: TrainConfig = serde_json::from_value(value)
        .map_err(|e| TensorError::InvalidArgument(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
