//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::backends::http::BackendConfig;
use crate::backends::templates::TemplateRegistry;
use crate::backends::{DEFAULT_MAX_TOKENS, DEFAULT_TOP_LOGPROBS};
use crate::baselines::Method;
use crate::perturb::{DistortionConfig, NoisePreset, TransformPreset, WeakTransformConfig};
use crate::semantic::SpdConfig;
use crate::vcse::{Placement, VcseConfig};

/// Where model calls go. Either a mock script (served in-process) or one
/// HTTP endpoint per capability.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vlm: Option<BackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nli: Option<BackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<BackendConfig>,
    /// Other VLMs consulted by the cross-checking baseline.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub auxiliary: Vec<BackendConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Responses sampled per branch.
    pub samples: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub transform_preset: TransformPreset,
    pub distortion_preset: NoisePreset,
    pub placement: Placement,
    pub length_normalize: bool,
    pub raw_masses: bool,
    pub binarize_threshold: f64,
    pub seed: u64,
    pub max_tokens: u32,
    pub top_logprobs: u32,
    /// Records processed concurrently.
    pub workers: usize,
    pub methods: Vec<Method>,
    /// Name used in report rows; defaults to the dataset file stem.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_name: Option<String>,
    pub backends: BackendsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            samples: 10,
            temperature: 1.0,
            lambda: 1.0,
            transform_preset: TransformPreset::Trans1,
            distortion_preset: NoisePreset::Noise3,
            placement: Placement::Both,
            length_normalize: false,
            raw_masses: false,
            binarize_threshold: 0.0,
            seed: 0,
            max_tokens: DEFAULT_MAX_TOKENS,
            top_logprobs: DEFAULT_TOP_LOGPROBS,
            workers: 4,
            methods: Method::ALL.to_vec(),
            dataset_name: None,
            backends: BackendsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file; a relative mock script path is resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        if let (Some(script), Some(dir)) = (&cfg.backends.mock_script, path.parent()) {
            if script.is_relative() {
                cfg.backends.mock_script = Some(dir.join(script));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.binarize_threshold) {
            return bad(format!("binarize_threshold {} outside [0, 1]", self.binarize_threshold));
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        let b = &self.backends;
        if b.mock_script.is_none() && (b.vlm.is_none() || b.nli.is_none() || b.llm.is_none()) {
            return bad("backends need either mock_script or all of vlm, nli and llm".into());
        }
        for c in [&b.vlm, &b.nli, &b.llm].into_iter().flatten().chain(&b.auxiliary) {
            c.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        self.vcse_config()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn vcse_config(&self) -> VcseConfig {
        VcseConfig {
            spd: SpdConfig {
                samples: self.samples,
                temperature: self.temperature,
                length_normalize: self.length_normalize,
                raw_masses: self.raw_masses,
                max_tokens: self.max_tokens,
                top_logprobs: self.top_logprobs,
            },
            lambda: self.lambda,
            weak: WeakTransformConfig::preset(self.transform_preset),
            distortion: DistortionConfig::preset(self.distortion_preset),
            placement: self.placement,
        }
    }

    /// Hex SHA-256 over the canonical JSON of the config and the template
    /// hashes.
    pub fn config_hash(&self, templates: &TemplateRegistry) -> String {
        let body = serde_json::json!({
            "config": serde_json::to_value(self).expect("config serializes"),
            "templates": templates.fingerprint(),
        });
        hex::encode(Sha256::digest(serde_json::to_vec(&body).expect("hash body serializes")))
    }
}
