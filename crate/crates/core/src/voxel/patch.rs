use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::numcore::{gemm::matmul, Tensor};

use super::grid::DenseGrid;

/// Base of the geometric frequency ladder used by the position embeddings.
/// Lattices here are at most a few dozen cells per axis.
pub const APE_BASE: f64 = 64.0;

/// Tokens laid out on a 3-D patch lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub grid_shape: [usize; 3],
}

impl TokenSequence {
    pub fn new(tokens: Tensor, grid_shape: [usize; 3]) -> Result<Self> {
        let n: usize = grid_shape.iter().product();
        if tokens.rank() != 2 || tokens.shape()[0] != n {
            return Err(shape_err!("{:?} tokens for patch lattice {grid_shape:?}", tokens.shape()));
        }
        Ok(Self { tokens, grid_shape })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// For each element of the raw token matrix `[N, p³·C]`, the flat index of the
/// grid value it reads. Tokens follow patch-lattice order; within a token the
/// layout is `(dx, dy, dz, c)`. The map is a permutation of `0..R³·C`.
pub fn patchify_index(resolution: usize, channels: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || !resolution.is_multiple_of(patch) {
        return Err(shape_err!("resolution {resolution} is not divisible by patch {patch}"));
    }
    let (r, g) = (resolution, resolution / patch);
    let mut idx = Vec::with_capacity(r * r * r * channels);
    for px in 0..g {
        for py in 0..g {
            for pz in 0..g {
                for dx in 0..patch {
                    for dy in 0..patch {
                        for dz in 0..patch {
                            let (x, y, z) = (px * patch + dx, py * patch + dy, pz * patch + dz);
                            let v = (x * r + y) * r + z;
                            idx.extend((0..channels).map(|c| v * channels + c));
                        }
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse permutation of [`patchify_index`]: for each grid value, the raw
/// token element holding it.
pub fn unpatchify_index(resolution: usize, channels: usize, patch: usize) -> Result<Vec<usize>> {
    let fwd = patchify_index(resolution, channels, patch)?;
    let mut inv = vec![0; fwd.len()];
    for (t, &g) in fwd.iter().enumerate() {
        inv[g] = t;
    }
    Ok(inv)
}

/// Patchify and unpatchify gather indices.
pub type PatchMaps = (Arc<[usize]>, Arc<[usize]>);

/// Shared index maps as `Arc` slices, ready for graph gathers.
pub fn patch_maps(resolution: usize, channels: usize, patch: usize) -> Result<PatchMaps> {
    Ok((patchify_index(resolution, channels, patch)?.into(), unpatchify_index(resolution, channels, patch)?.into()))
}

/// Sinusoids of one scalar position: `width/2` sines then `width/2` cosines
/// over frequencies `APE_BASE^(-k / (width/2))`.
pub fn sinusoid(pos: f64, width: usize, out: &mut [f64]) {
    let half = width / 2;
    for k in 0..half {
        let w = APE_BASE.powf(-(k as f64) / half as f64);
        out[k] = (pos * w).sin();
        out[half + k] = (pos * w).cos();
    }
}

/// Per-axis slice width of a `dim`-wide 3-D embedding; trailing columns are 0.
pub fn axis_width(dim: usize) -> usize {
    2 * (dim / 6)
}

/// Fixed 3-D sinusoidal embedding: the concatenation of one sinusoid block
/// per axis, zero-padded to `dim`.
pub fn position_embedding(positions: &[[usize; 3]], dim: usize) -> Tensor {
    let w = axis_width(dim);
    let mut t = Tensor::zeros(&[positions.len(), dim]);
    for (row, p) in t.data_mut().chunks_mut(dim.max(1)).zip(positions) {
        for a in 0..3 {
            sinusoid(p[a] as f64, w, &mut row[a * w..(a + 1) * w]);
        }
    }
    t
}

/// Embedding for every cell of a patch lattice, in lattice order.
pub fn lattice_embedding(grid_shape: [usize; 3], dim: usize) -> Tensor {
    let mut pos = Vec::with_capacity(grid_shape.iter().product());
    for x in 0..grid_shape[0] {
        for y in 0..grid_shape[1] {
            for z in 0..grid_shape[2] {
                pos.push([x, y, z]);
            }
        }
    }
    position_embedding(&pos, dim)
}

/// Splits `g` into non-overlapping `patch³` blocks. With `projection`
/// (`[patch³·C, D]`) the raw tokens are mapped to width `D`; with `ape` the
/// fixed lattice embedding is added.
pub fn patchify(g: &DenseGrid, patch: usize, projection: Option<&Tensor>, ape: bool) -> Result<TokenSequence> {
    let (r, c) = (g.resolution(), g.channels());
    let idx = patchify_index(r, c, patch)?;
    let side = r / patch;
    let n = side.pow(3);
    let raw_w = patch.pow(3) * c;
    let raw: Vec<f64> = idx.iter().map(|&i| g.values()[i]).collect();
    let (mut data, d) = match projection {
        Some(p) => {
            if p.rank() != 2 || p.shape()[0] != raw_w {
                return Err(shape_err!("projection {:?} for raw token width {raw_w}", p.shape()));
            }
            let d = p.shape()[1];
            (matmul(&raw, p.data(), n, raw_w, d), d)
        }
        None => (raw, raw_w),
    };
    if ape {
        let pe = lattice_embedding([side; 3], d);
        data.iter_mut().zip(pe.data()).for_each(|(x, e)| *x += e);
    }
    TokenSequence::new(Tensor::new(&[n, d], data)?, [side; 3])
}

/// Places each token's `patch³·C_out` values back into its block.
pub fn unpatchify(t: &TokenSequence, patch: usize, c_out: usize) -> Result<DenseGrid> {
    let [gx, gy, gz] = t.grid_shape;
    if gx != gy || gy != gz || gx == 0 {
        return Err(shape_err!("patch lattice {:?} is not a cube", t.grid_shape));
    }
    if t.tokens.rank() != 2 || t.len() != gx * gy * gz {
        return Err(shape_err!("{:?} tokens for lattice {:?}", t.tokens.shape(), t.grid_shape));
    }
    if t.width() != patch.pow(3) * c_out {
        return Err(shape_err!("token width {} for patch {patch} and {c_out} channels", t.width()));
    }
    let r = gx * patch;
    let inv = unpatchify_index(r, c_out, patch)?;
    let values = inv.iter().map(|&i| t.tokens.data()[i]).collect();
    let vs = 1.0 / r as f64;
    DenseGrid::from_values(r, c_out, values, vs, [0.5 * vs; 3])
}
