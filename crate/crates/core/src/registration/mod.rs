//! Rigid alignment of point clouds and preservation-mask derivation.

pub mod icp;
pub mod kdtree;
pub mod mask;
pub mod ransac;
pub mod rigid;

pub use icp::{icp_refine, IcpOptions, IcpResult};
pub use kdtree::NnIndex;
pub use mask::{build_masks, mask_downsample, preservation_mask, MaskConfig, MaskReport, MaskStatus, PreservationMask};
pub use ransac::{ransac_rigid, RansacOptions, RansacResult};
pub use rigid::{kabsch_fit, RigidTransform};
