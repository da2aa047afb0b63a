//! Atlas-to-image mappings: a similarity composed with a dense flow.

pub mod grid;
pub mod similarity;
pub mod stn;
pub mod upsample;
pub mod warp;

pub use grid::{
    backward_warp, bilinear, forward_splat, invert_flow_nn, Direction, ImageMapping, MappedPoint, MappingGrid, Splat,
};
pub use similarity::{apply_affine, compose_affine, invert_rigid, Affine, SimilarityParams, IDENTITY_AFFINE};
pub use stn::{FlowOutput, NonRigidStn, RigidStn};
pub use upsample::convex_upsample;
pub use warp::{base_grid, compose_tensor, sample_bilinear, Sampled, SimilarityTensor};
