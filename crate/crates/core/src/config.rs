//! Run configuration: every stage's settings in one JSON document.
//!
//! Missing keys take their defaults and unknown keys are rejected, so `{}`
//! is a complete desk-scale configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::AdaptConfig;
use crate::backbone::CombineMode;
use crate::data::BundleSpec;
use crate::embed::EpisodeConfig;
use crate::error::{Error, Result};
use crate::gaa::GaaConfig;
use crate::numcore::SgdConfig;
use crate::openset::LofConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub hidden: Vec<usize>,
    pub dim: usize,
    pub episode: EpisodeConfig,
    pub sgd: SgdConfig,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            dim: 32,
            episode: EpisodeConfig::default(),
            sgd: SgdConfig { lr_max: 0.05, lr_min: 1e-4, ..SgdConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub hidden: Vec<usize>,
    pub feat_dim: usize,
    pub combine_mode: CombineMode,
    pub use_domain_embedding: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], feat_dim: 32, combine_mode: CombineMode::Concat, use_domain_embedding: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self { steps: 600, batch_size: 64, sgd: SgdConfig { lr_max: 0.02, lr_min: 1e-4, ..SgdConfig::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// LOF input widths swept by the `lof_dim` study.
    pub lof_dims: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { lof_dims: vec![8, 16, 32, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Overridden by the command line when given there.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: BundleSpec,
    pub embedding: EmbeddingConfig,
    pub backbone: BackboneConfig,
    pub warmup: WarmupConfig,
    pub gaa: GaaConfig,
    pub lof: LofConfig,
    pub adapt: AdaptConfig,
    pub adapt_sgd: SgdConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            data: BundleSpec::default(),
            embedding: EmbeddingConfig::default(),
            backbone: BackboneConfig::default(),
            warmup: WarmupConfig::default(),
            gaa: GaaConfig::default(),
            lof: LofConfig::default(),
            adapt: AdaptConfig::default(),
            adapt_sgd: SgdConfig { lr_max: 0.005, lr_min: 1e-4, ..SgdConfig::default() },
            ablation: AblationConfig::default(),
        }
    }
}

fn prefixed(section: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{section}: {msg}")),
        other => other,
    })
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        prefixed("data", self.data.validate())?;
        prefixed("embedding.episode", self.embedding.episode.validate())?;
        if self.embedding.dim == 0 || self.embedding.hidden.contains(&0) {
            return Err(Error::config("embedding: dim and hidden widths must be >= 1"));
        }
        self.embedding.sgd.validate("embedding.sgd")?;
        if self.backbone.feat_dim == 0 || self.backbone.hidden.contains(&0) {
            return Err(Error::config("backbone: feat_dim and hidden widths must be >= 1"));
        }
        if self.backbone.combine_mode == CombineMode::ElementwiseMul && self.embedding.dim != self.data.in_dim {
            return Err(Error::config(format!(
                "backbone.combine_mode elementwise_mul needs embedding.dim == data.in_dim, got {} and {}",
                self.embedding.dim, self.data.in_dim
            )));
        }
        if self.warmup.batch_size == 0 {
            return Err(Error::config("warmup.batch_size must be >= 1"));
        }
        self.warmup.sgd.validate("warmup.sgd")?;
        self.gaa.validate("gaa", self.backbone.feat_dim)?;
        self.lof.validate("lof")?;
        self.adapt.validate("adapt")?;
        self.adapt_sgd.validate("adapt_sgd")?;
        if self.ablation.lof_dims.contains(&0) {
            return Err(Error::config("ablation.lof_dims entries must be >= 1"));
        }
        Ok(())
    }

    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON, output directory excluded.
    pub fn hash(&self) -> String {
        let canonical = Self { output_dir: None, ..self.clone() };
        let bytes = serde_json::to_vec(&canonical).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn negative_lambda_is_named() {
        let err = RunConfig::from_json(r#"{"adapt":{"lambda":-1}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("lambda must be >= 0"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"adapt":{"lamda":1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra":1}"#).is_err());
    }

    #[test]
    fn malformed_json_reports_line() {
        let err = RunConfig::from_json("{\n\"seed\": ,\n}").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn round_trip_and_hash() {
        let cfg = RunConfig::from_json(r#"{"seed": 4, "lof": {"threshold": "inf"}, "gaa": {"aggregation": "affinity"}}"#)
            .unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(cfg.hash(), cfg.with_seed(5).hash());
        let moved = RunConfig { output_dir: Some("elsewhere".into()), ..cfg.clone() };
        assert_eq!(moved.hash(), cfg.hash());
    }

    #[test]
    fn multiplicative_combine_needs_matching_widths() {
        let err = RunConfig::from_json(r#"{"backbone":{"combine_mode":"elementwise_mul"},"embedding":{"dim":8}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("embedding.dim"), "{err}");
        assert!(RunConfig::from_json(r#"{"backbone":{"combine_mode":"elementwise_mul"},"embedding":{"dim":16}}"#).is_ok());
    }
}
