use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::numcore::{ConvMap, Graph, Tensor};

use super::grid::{Coord, SparseVoxelTensor};

/// Number of taps in a 3³ kernel.
pub const TAPS: usize = 27;
/// Tap index of offset (0, 0, 0).
pub const CENTER_TAP: usize = 13;

/// Offset of tap `t`; taps run lexicographically over `{-1, 0, 1}³`.
pub fn tap_offset(t: usize) -> [i32; 3] {
    [(t / 9) as i32 - 1, ((t / 3) % 3) as i32 - 1, (t % 3) as i32 - 1]
}

/// Dense `R³` lookup from coordinate to row, `u32::MAX` when absent.
struct Lookup {
    r: usize,
    table: Vec<u32>,
}

impl Lookup {
    fn new(coords: &[Coord], r: usize) -> Self {
        let mut table = vec![u32::MAX; r * r * r];
        for (i, c) in coords.iter().enumerate() {
            table[(c[0] as usize * r + c[1] as usize) * r + c[2] as usize] = i as u32;
        }
        Self { r, table }
    }

    fn get(&self, p: [i64; 3]) -> Option<u32> {
        let r = self.r as i64;
        if p.iter().any(|&v| v < 0 || v >= r) {
            return None;
        }
        let i = self.table[((p[0] * r + p[1]) * r + p[2]) as usize];
        (i != u32::MAX).then_some(i)
    }
}

fn check_coords(coords: &[Coord], r: usize) -> Result<()> {
    match coords.iter().find(|c| c.iter().any(|&v| v as usize >= r)) {
        Some(c) => Err(shape_err!("coordinate {c:?} outside {r}³")),
        None => Ok(()),
    }
}

/// Coordinates at half resolution with at least one occupied child.
pub fn downsample_coords(coords: &[Coord]) -> Vec<Coord> {
    let mut out: Vec<Coord> = coords.iter().map(|c| c.map(|v| v / 2)).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Submanifold plan: outputs sit on the input sites, each reading its occupied
/// 3³ neighbourhood.
pub fn conv_map_stride1(coords: &[Coord], resolution: usize) -> Result<ConvMap> {
    check_coords(coords, resolution)?;
    let look = Lookup::new(coords, resolution);
    let mut taps = vec![Vec::new(); TAPS];
    for (o, c) in coords.iter().enumerate() {
        for (t, pairs) in taps.iter_mut().enumerate() {
            let d = tap_offset(t);
            if let Some(i) = look.get([0, 1, 2].map(|a| c[a] as i64 + d[a] as i64)) {
                pairs.push((i, o as u32));
            }
        }
    }
    Ok(ConvMap { in_rows: coords.len(), out_rows: coords.len(), taps })
}

/// Strided plan: output `p` reads input sites `2p + offset`. Returns the plan
/// and the output coordinates at resolution `⌈R/2⌉`.
pub fn conv_map_stride2(coords: &[Coord], resolution: usize) -> Result<(ConvMap, Vec<Coord>)> {
    check_coords(coords, resolution)?;
    let look = Lookup::new(coords, resolution);
    let out = downsample_coords(coords);
    let mut taps = vec![Vec::new(); TAPS];
    for (o, c) in out.iter().enumerate() {
        for (t, pairs) in taps.iter_mut().enumerate() {
            let d = tap_offset(t);
            if let Some(i) = look.get([0, 1, 2].map(|a| 2 * c[a] as i64 + d[a] as i64)) {
                pairs.push((i, o as u32));
            }
        }
    }
    Ok((ConvMap { in_rows: coords.len(), out_rows: out.len(), taps }, out))
}

/// Transpose of the strided plan: coarse site `p` writes fine site
/// `2p + offset` whenever that site is among `targets`.
pub fn conv_map_transposed(coarse: &[Coord], coarse_res: usize, targets: &[Coord], fine_res: usize) -> Result<ConvMap> {
    check_coords(coarse, coarse_res)?;
    check_coords(targets, fine_res)?;
    let look = Lookup::new(targets, fine_res);
    let mut taps = vec![Vec::new(); TAPS];
    for (i, c) in coarse.iter().enumerate() {
        for (t, pairs) in taps.iter_mut().enumerate() {
            let d = tap_offset(t);
            if let Some(o) = look.get([0, 1, 2].map(|a| 2 * c[a] as i64 + d[a] as i64)) {
                pairs.push((i as u32, o));
            }
        }
    }
    Ok(ConvMap { in_rows: coarse.len(), out_rows: targets.len(), taps })
}

fn run(feats: &SparseVoxelTensor, kernel: &Tensor, map: ConvMap) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[feats.len(), feats.channels()], feats.feats().to_vec())?);
    let w = g.constant(kernel.clone());
    let y = g.sparse_conv(x, w, None, Arc::new(map))?;
    Ok(g.value(y).data().to_vec())
}

fn kernel_out(s: &SparseVoxelTensor, kernel: &Tensor) -> Result<usize> {
    if kernel.rank() != 3 || kernel.shape()[0] != TAPS || kernel.shape()[1] != s.channels() {
        return Err(shape_err!("kernel {:?} for {} input channels", kernel.shape(), s.channels()));
    }
    Ok(kernel.shape()[2])
}

/// Gather-scatter 3³ convolution over occupied neighbours. `kernel` is
/// `[27, C_in, C_out]`. Stride 2 halves the resolution under the union rule.
pub fn sparse_neighborhood_conv(s: &SparseVoxelTensor, kernel: &Tensor, stride: usize) -> Result<SparseVoxelTensor> {
    let cout = kernel_out(s, kernel)?;
    match stride {
        1 => {
            let map = conv_map_stride1(s.coords(), s.resolution())?;
            SparseVoxelTensor::new(s.resolution(), cout, s.coords().to_vec(), run(s, kernel, map)?)
        }
        2 => {
            let (map, out) = conv_map_stride2(s.coords(), s.resolution())?;
            SparseVoxelTensor::new(s.resolution().div_ceil(2), cout, out, run(s, kernel, map)?)
        }
        _ => Err(shape_err!("unsupported stride {stride}")),
    }
}

/// Stride-2 transposed convolution onto `target_coords` at twice the
/// resolution; the output coordinates are exactly the targets.
pub fn sparse_transposed_conv(s: &SparseVoxelTensor, kernel: &Tensor, target_coords: &[Coord]) -> Result<SparseVoxelTensor> {
    let cout = kernel_out(s, kernel)?;
    let fine = 2 * s.resolution();
    if target_coords.windows(2).any(|w| w[0] >= w[1]) {
        return Err(shape_err!("target coordinates must be unique and sorted"));
    }
    let map = conv_map_transposed(s.coords(), s.resolution(), target_coords, fine)?;
    SparseVoxelTensor::new(fine, cout, target_coords.to_vec(), run(s, kernel, map)?)
}

/// Block-diagonal union of per-sample plans whose input and output rows are
/// stacked in sample order.
pub fn stack_conv_maps(maps: &[ConvMap]) -> ConvMap {
    let mut taps = vec![Vec::new(); TAPS];
    let (mut ri, mut ro) = (0u32, 0u32);
    for m in maps {
        for (dst, src) in taps.iter_mut().zip(&m.taps) {
            dst.extend(src.iter().map(|&(i, o)| (i + ri, o + ro)));
        }
        ri += m.in_rows as u32;
        ro += m.out_rows as u32;
    }
    ConvMap { in_rows: ri as usize, out_rows: ro as usize, taps }
}
