//! Training-signal terms and their weighted combination.

pub mod photometric;
pub mod point3d;
pub mod prior;
pub mod semantic;
pub mod ssim;
pub mod total;

pub use photometric::{
    automask, identity_error_floor, masked_image_loss, min_reprojection_loss, recon_error, recon_loss, ImageLossMaps,
    Reconstruction,
};
pub use point3d::{point_error, point_loss_3d, PointLossMaps, PointSource};
pub use prior::{road_ordering_loss, smoothness_loss, RoadOrdering};
pub use semantic::{semantic_loss, semantic_mask};
pub use ssim::{ssim, ssim_channels};
pub use total::{
    evaluate, objective_gradient, total_loss, FrameView, Gradients, LossConfig, LossReport, LossTerms, LossWeights,
    Selection, SnippetInputs, SourceInput,
};
