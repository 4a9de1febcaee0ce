use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::params::{read_f64, read_u32};

use super::grid::{DenseGrid, PointCloud, SparseVoxelTensor};

pub const GRID_MAGIC: &[u8; 4] = b"BVEG";
pub const SPARSE_MAGIC: &[u8; 4] = b"BVES";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn expect_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!("expected {} magic", String::from_utf8_lossy(magic))));
    }
    let v = read_u32(r)?;
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {v}")));
    }
    Ok(())
}

pub(crate) fn write_header(w: &mut impl Write, magic: &[u8; 4]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64s(w: &mut impl Write, vals: &[f64]) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
}

fn dim(v: usize) -> Result<[u8; 4]> {
    u32::try_from(v).map(u32::to_le_bytes).map_err(|_| Error::Format(format!("size {v} exceeds u32")))
}

pub fn write_grid(w: &mut impl Write, g: &DenseGrid) -> Result<()> {
    write_header(w, GRID_MAGIC)?;
    w.write_all(&dim(g.resolution())?)?;
    w.write_all(&dim(g.channels())?)?;
    write_f64s(w, &[g.voxel_size])?;
    write_f64s(w, &g.origin)?;
    write_f64s(w, g.values())
}

pub fn read_grid(r: &mut impl Read) -> Result<DenseGrid> {
    expect_header(r, GRID_MAGIC)?;
    let res = read_u32(r)? as usize;
    let ch = read_u32(r)? as usize;
    let vs = read_f64(r)?;
    let o = read_f64s(r, 3)?;
    let n = res.checked_pow(3).and_then(|v| v.checked_mul(ch)).ok_or_else(|| Error::Format("grid too large".into()))?;
    let values = read_f64s(r, n)?;
    DenseGrid::from_values(res, ch, values, vs, [o[0], o[1], o[2]]).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_sparse(w: &mut impl Write, s: &SparseVoxelTensor) -> Result<()> {
    write_header(w, SPARSE_MAGIC)?;
    w.write_all(&dim(s.resolution())?)?;
    w.write_all(&dim(s.channels())?)?;
    w.write_all(&dim(s.len())?)?;
    for c in s.coords() {
        for v in c {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    write_f64s(w, s.feats())
}

pub fn read_sparse(r: &mut impl Read) -> Result<SparseVoxelTensor> {
    expect_header(r, SPARSE_MAGIC)?;
    let res = read_u32(r)? as usize;
    let ch = read_u32(r)? as usize;
    let len = read_u32(r)? as usize;
    let mut raw = vec![0u8; len * 6];
    r.read_exact(&mut raw)?;
    let coords = raw.chunks_exact(6).map(|b| [0, 1, 2].map(|a| u16::from_le_bytes([b[2 * a], b[2 * a + 1]]))).collect();
    let feats = read_f64s(r, len * ch)?;
    SparseVoxelTensor::new(res, ch, coords, feats).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_grid(path: &Path, g: &DenseGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grid(&mut w, g)?;
    w.flush()?;
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<DenseGrid> {
    read_grid(&mut BufReader::new(File::open(path)?))
}

pub fn save_sparse(path: &Path, s: &SparseVoxelTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_sparse(&mut w, s)?;
    w.flush()?;
    Ok(())
}

pub fn load_sparse(path: &Path) -> Result<SparseVoxelTensor> {
    read_sparse(&mut BufReader::new(File::open(path)?))
}

pub fn save_xyz(path: &Path, pc: &PointCloud) -> Result<()> {
    std::fs::write(path, pc.to_xyz())?;
    Ok(())
}

pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    PointCloud::from_xyz(&std::fs::read_to_string(path)?)
}
