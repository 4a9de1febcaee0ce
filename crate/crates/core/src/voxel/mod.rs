//! Dense and sparse voxel lattices, tokenization and sparse convolution.

pub mod conv;
pub mod grid;
pub mod io;
pub mod patch;

pub use conv::{sparse_neighborhood_conv, sparse_transposed_conv};
pub use grid::{upsample_coords, Coord, DenseGrid, Point, PointCloud, SparseVoxelTensor};
pub use patch::{patchify, unpatchify, TokenSequence};

/// Occupancy threshold on `[0, 1]`-scaled occupancy channels.
pub const OCCUPANCY_THRESHOLD: f64 = 0.5;

/// World-space centers of the voxels whose `channel` exceeds `threshold`.
pub fn grid_to_points(g: &DenseGrid, channel: usize, threshold: f64) -> crate::Result<PointCloud> {
    g.to_points(channel, threshold)
}
