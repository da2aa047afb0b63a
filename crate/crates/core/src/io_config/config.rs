//! Run configuration.
//!
//! A run is reproducible from its config file alone: every constant of the
//! objective and schedule is a field here with its default filled in.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    /// Replicate the outermost row/column.
    Edge,
    Zero,
}

/// Scope of the saliency sum used to normalize the saliency-weighted terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyNormalizer {
    /// Sum over the atlas pixels that are valid for the image.
    Valid,
    /// Sum over the whole atlas.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Vit,
    Synthetic,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Layer widths of the two spatial transformer networks.
///
/// The number of stride-2 residual blocks follows from the input resolution:
/// the rigid network reduces to a 4x4 map, the non-rigid one to the coarse
/// flow grid, so `rigid_widths` must have `log2(input/4)` entries and
/// `nonrigid_widths` `log2(input/coarse_grid)` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StnConfig {
    /// Resolution the networks see; 0 means the atlas resolution.
    pub input_res: usize,
    pub coarse_grid: usize,
    pub rigid_stem: usize,
    pub rigid_widths: Vec<usize>,
    pub rigid_hidden: usize,
    pub nonrigid_stem: usize,
    pub nonrigid_widths: Vec<usize>,
    pub nonrigid_trunk: usize,
    pub head_hidden: usize,
    pub leaky_slope: f64,
}

impl Default for StnConfig {
    fn default() -> Self {
        Self {
            input_res: 0,
            coarse_grid: 16,
            rigid_stem: 64,
            rigid_widths: vec![128, 512, 512, 512, 512],
            rigid_hidden: 512,
            nonrigid_stem: 64,
            nonrigid_widths: vec![128, 512, 512],
            nonrigid_trunk: 512,
            head_hidden: 512,
            leaky_slope: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub backend: BackendKind,
    /// Descriptor dimension D.
    pub dim: usize,
    pub patch: usize,
    pub stride: usize,
    pub kmeans_k: usize,
    pub kmeans_iters: usize,
    /// Safetensors weights of the ViT backend; empty means "use the
    /// `CONGEAL_VIT_WEIGHTS` environment variable".
    pub weights_path: String,
    /// Directory of precomputed feature dumps (backend = precomputed).
    pub precomputed_dir: String,
    /// Optional directory of `<name>.saliency.png` masks replacing the
    /// clustering estimate.
    pub saliency_override_dir: String,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Vit,
            dim: 384,
            patch: 8,
            stride: 4,
            kmeans_k: 10,
            kmeans_iters: 50,
            weights_path: String::new(),
            precomputed_dir: String::new(),
            saliency_override_dir: String::new(),
        }
    }
}

/// Loss-term ablation switches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_keys: bool,
    /// Atlas saliency fixed at one and the saliency loss dropped.
    pub no_saliency: bool,
    pub no_reg_mapping: bool,
    pub no_reg_atlas: bool,
    pub no_sparsity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub padding: PadMode,
    pub atlas_res: usize,
    pub epochs: usize,
    pub bootstrap_epochs: usize,
    pub lr_stn: f64,
    pub lr_atlas: f64,
    pub allow_flips: bool,
    /// With flips on, epochs during which only the first image updates the
    /// atlas so that the atlas takes that image's orientation.
    pub flip_warmup: usize,
    pub gradual_atlas: bool,
    /// Epochs between two additions to the active set in gradual mode.
    pub gradual_interval: usize,
    pub fixed_atlas: bool,
    pub extreme_deformation_mode: bool,
    pub saliency_normalizer: SaliencyNormalizer,
    /// Snapshot period in epochs; 0 disables snapshots.
    pub snapshot_every: usize,
    pub weights: LossWeights,
    pub optimizer: AdamConfig,
    pub stn: StnConfig,
    pub features: FeatureConfig,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 256,
            padding: PadMode::Edge,
            atlas_res: 128,
            epochs: 8000,
            bootstrap_epochs: 1000,
            lr_stn: 1e-4,
            lr_atlas: 8e-4,
            allow_flips: false,
            flip_warmup: 100,
            gradual_atlas: false,
            gradual_interval: 100,
            fixed_atlas: false,
            extreme_deformation_mode: false,
            saliency_normalizer: SaliencyNormalizer::Valid,
            snapshot_every: 500,
            weights: LossWeights::default(),
            optimizer: AdamConfig::default(),
            stn: StnConfig::default(),
            features: FeatureConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// STN input resolution after resolving the "same as atlas" default.
    pub fn stn_input_res(&self) -> usize {
        if self.stn.input_res == 0 {
            self.atlas_res
        } else {
            self.stn.input_res
        }
    }

    /// Weights actually used by the objective (extreme mode and ablations applied).
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights.clone();
        if self.extreme_deformation_mode {
            w = crate::trainer::apply_extreme_mode(&w);
        }
        if self.ablation.no_reg_mapping {
            w.lambda_reg_mapping = 0.0;
        }
        if self.ablation.no_reg_atlas {
            w.lambda_reg_atlas = 0.0;
        }
        if self.ablation.no_sparsity {
            w.lambda_sparsity = 0.0;
        }
        if self.ablation.no_saliency {
            w.lambda_saliency = 0.0;
        }
        w
    }

    /// Apply a `dotted.key=value` override. The key must already exist and the
    /// value must parse to the same TOML type.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        let parsed = parse_scalar(raw);
        let new_value = match (&*slot, parsed) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (toml::Value::String(_), v) if !v.is_str() => toml::Value::String(raw.to_string()),
            (old, v) if old.same_type(&v) => v,
            (old, _) => {
                return Err(Error::Config(format!(
                    "override `{key}` expects a {} value, got `{raw}`",
                    old.type_str()
                )))
            }
        };
        *slot = new_value;
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let coarse = self.stn.coarse_grid;
        if self.atlas_res == 0 || coarse == 0 || self.atlas_res % coarse != 0 {
            return Err(Error::Config(format!(
                "atlas_res {} must be a positive multiple of stn.coarse_grid {}",
                self.atlas_res, coarse
            )));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        for (name, v) in [("lr_stn", self.lr_stn), ("lr_atlas", self.lr_atlas)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number")));
            }
        }
        let input = self.stn_input_res();
        let rigid_blocks = downsample_steps(input, 4)
            .ok_or_else(|| Error::Config(format!("stn input resolution {input} must be 4 times a power of two")))?;
        if rigid_blocks != self.stn.rigid_widths.len() {
            return Err(Error::Config(format!(
                "stn.rigid_widths needs {rigid_blocks} entries for input resolution {input}, got {}",
                self.stn.rigid_widths.len()
            )));
        }
        let nonrigid_blocks = downsample_steps(input, coarse).ok_or_else(|| {
            Error::Config(format!("stn input resolution {input} must be coarse_grid times a power of two"))
        })?;
        if nonrigid_blocks != self.stn.nonrigid_widths.len() {
            return Err(Error::Config(format!(
                "stn.nonrigid_widths needs {nonrigid_blocks} entries for input resolution {input}, got {}",
                self.stn.nonrigid_widths.len()
            )));
        }
        if self.features.kmeans_k == 0 {
            return Err(Error::Config("features.kmeans_k must be positive".into()));
        }
        if self.gradual_atlas && self.gradual_interval == 0 {
            return Err(Error::Config("gradual_interval must be positive".into()));
        }
        Ok(())
    }
}

/// Number of halvings taking `from` to `to`, if `from = to * 2^k`.
pub(crate) fn downsample_steps(from: usize, to: usize) -> Option<usize> {
    if to == 0 || from < to || from % to != 0 {
        return None;
    }
    let ratio = from / to;
    ratio.is_power_of_two().then(|| ratio.trailing_zeros() as usize)
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
