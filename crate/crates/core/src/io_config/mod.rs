//! Image-set loading, run configuration, annotations and checkpoints.

pub mod annotations;
pub mod checkpoint;
pub mod config;
pub mod images;

pub use annotations::{BBox, KeypointAnnotations, KeypointPair, ThresholdMode};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest, TensorRecord, SCHEMA_VERSION};
pub use config::{Ablation, AdamConfig, BackendKind, FeatureConfig, PadMode, RunConfig, SaliencyNormalizer, StnConfig};
pub use images::{load_image_set, ImageSet, PadInfo, RgbImage};
