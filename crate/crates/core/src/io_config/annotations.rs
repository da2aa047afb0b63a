use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the PCK distance threshold is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `max(h, w)` of the target object's bounding box.
    Bbox,
    /// `max(h, w)` of the target image.
    Image,
}

/// Axis-aligned box `[x0, y0, x1, y1]` in original-image pixels.
pub type BBox = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointPair {
    pub source: String,
    pub target: String,
    pub source_keypoints: Vec<[f64; 2]>,
    pub target_keypoints: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointAnnotations {
    pub threshold_mode: ThresholdMode,
    pub pairs: Vec<KeypointPair>,
}

impl KeypointAnnotations {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ann: KeypointAnnotations = serde_json::from_str(&text)?;
        ann.validate()?;
        Ok(ann)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, pair) in self.pairs.iter().enumerate() {
            if pair.source_keypoints.len() != pair.target_keypoints.len() {
                return Err(Error::InvalidInput(format!(
                    "pair {i} ({} -> {}): {} source keypoints but {} target keypoints",
                    pair.source,
                    pair.target,
                    pair.source_keypoints.len(),
                    pair.target_keypoints.len()
                )));
            }
            if self.threshold_mode == ThresholdMode::Bbox && pair.target_bbox.is_none() {
                return Err(Error::InvalidInput(format!("pair {i} has no target_bbox in bbox mode")));
            }
        }
        Ok(())
    }

    /// Check keypoints against original image sizes `(width, height)` looked up by name.
    pub fn check_bounds(&self, size_of: impl Fn(&str) -> Option<(usize, usize)>) -> Result<()> {
        for pair in &self.pairs {
            for (name, kps) in [(&pair.source, &pair.source_keypoints), (&pair.target, &pair.target_keypoints)] {
                let (w, h) = size_of(name)
                    .ok_or_else(|| Error::InvalidInput(format!("annotation refers to unknown image `{name}`")))?;
                if let Some(p) = kps
                    .iter()
                    .find(|p| p[0] < 0.0 || p[1] < 0.0 || p[0] > w as f64 || p[1] > h as f64)
                {
                    return Err(Error::InvalidInput(format!(
                        "keypoint ({}, {}) outside image `{name}` of size {w}x{h}",
                        p[0], p[1]
                    )));
                }
            }
        }
        Ok(())
    }
}
