//! Evaluation formulas over point clouds, images and caller-supplied
//! feature matrices.

mod features;
mod geometry;
mod image;
mod report;

pub use features::{cosine_alignment, frechet, layered_perceptual, FeatureMatrix, LayerFeatures, FEATURE_MAGIC};
pub use geometry::{chamfer, subsample, CHAMFER_POINTS};
pub use image::{axis_projections, projection_ssim, ssim, ssim_default, ssim_from_moments, Image, ImagePair, SSIM_K1, SSIM_K2, SSIM_WINDOW};
pub use report::MetricReport;
