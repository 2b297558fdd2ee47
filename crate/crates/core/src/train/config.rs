//! Training configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::PreprocessConfig;
use crate::error::{Error, Result};
use crate::losses::{CcrReduction, FocalConfig};
use crate::model::BackboneConfig;
use crate::srm_fl::SrmFlConfig;
use crate::style::SrmIlConfig;

use super::optim::AdamConfig;

/// Independent method components; every ablation row is a setting of
/// these four flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub use_srm_il: bool,
    pub use_srm_fl: bool,
    pub use_l_ccr: bool,
    pub use_l_pdr: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::full()
    }
}

impl Toggles {
    pub fn full() -> Self {
        Self {
            use_srm_il: true,
            use_srm_fl: true,
            use_l_ccr: true,
            use_l_pdr: true,
        }
    }

    pub fn base() -> Self {
        Self {
            use_srm_il: false,
            use_srm_fl: false,
            use_l_ccr: false,
            use_l_pdr: false,
        }
    }

    /// Whether the clean branch has to run at all.
    pub fn needs_clean_branch(&self) -> bool {
        self.use_l_ccr || self.use_l_pdr
    }
}

/// Source of the feature-level affine parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleEmbedding {
    /// Pixel-wise maps from the learned style nets.
    Learned,
    /// Channel statistics of the partner sample (plain AdaIN).
    Adain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Micro-batch size.
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub epochs: usize,
    pub ema_decay: f64,
    /// Ramp the EMA decay up from 0.1 over the first optimizer steps.
    pub ema_warmup: bool,
    pub focal: FocalConfig,
    pub ccr_reduction: CcrReduction,
    pub srm_il: SrmIlConfig,
    pub srm_fl: SrmFlConfig,
    pub style_embedding: StyleEmbedding,
    pub toggles: Toggles,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub preprocess: PreprocessConfig,
    pub precision: Precision,
    /// Domains used for training; `None` means every domain in the manifest.
    pub train_domains: Option<Vec<usize>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            grad_accum_steps: 4,
            epochs: 10,
            ema_decay: 0.997,
            ema_warmup: true,
            focal: FocalConfig::default(),
            ccr_reduction: CcrReduction::InstanceSum,
            srm_il: SrmIlConfig::default(),
            srm_fl: SrmFlConfig::default(),
            style_embedding: StyleEmbedding::Learned,
            toggles: Toggles::full(),
            seed: 0,
            backbone: BackboneConfig::default(),
            preprocess: PreprocessConfig::default(),
            precision: Precision::F32,
            train_domains: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Channel count at the feature-level insertion point.
    pub fn insertion_channels(&self) -> usize {
        self.backbone
            .channels_after(self.srm_fl.insertion_stage.stage())
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.epochs == 0 {
            return Err(Error::config(
                "batch_size, grad_accum_steps and epochs must be >= 1",
            ));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::config("ema_decay must lie in (0, 1)"));
        }
        self.focal.validate()?;
        self.srm_il.validate()?;
        self.srm_fl.validate(self.insertion_channels())?;
        self.backbone.validate()?;
        self.preprocess.validate()?;
        if self.preprocess.crop_to != self.backbone.input_size {
            return Err(Error::config(format!(
                "crop_to {} must equal backbone input_size {}",
                self.preprocess.crop_to, self.backbone.input_size
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: TrainConfig =
            serde_json::from_str(r#"{"lr": 0.001, "toggles": {"use_srm_fl": false}}"#).unwrap();
        assert_eq!(cfg.lr, 0.001);
        assert!(!cfg.toggles.use_srm_fl && cfg.toggles.use_srm_il);
        assert_eq!(cfg.batch_size, 16);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            TrainConfig {
                lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                grad_accum_steps: 0,
                ..Default::default()
            },
            TrainConfig {
                ema_decay: 1.0,
                ..Default::default()
            },
            TrainConfig {
                srm_fl: SrmFlConfig {
                    reduction: 3,
                    ..Default::default()
                },
                ..Default::default()
            },
            TrainConfig {
                preprocess: PreprocessConfig {
                    crop_to: 32,
                    ..Default::default()
                },
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
