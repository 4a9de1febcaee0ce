//! C interface to `bve-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_load` /
//! `*_build` functions and released with the matching `*_free`. Every
//! fallible call returns a [`BveStatus`]; on failure a message is available
//! from [`bve_last_error`] on the same thread. Panics are caught and reported
//! as [`BveStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use bve_core::cli::{load_model, LoadedModel};
use bve_core::error::Error;
use bve_core::flow::SamplerConfig;
use bve_core::metrics::{chamfer, frechet, projection_ssim, subsample, FeatureMatrix};
use bve_core::models::edit_pipeline;
use bve_core::numcore::rng;
use bve_core::registration::{build_masks, MaskConfig, PreservationMask};
use bve_core::synth::EditInstruction;
use bve_core::voxel::io::{load_grid, save_grid};
use bve_core::voxel::{DenseGrid, OCCUPANCY_THRESHOLD};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BveStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidString = 2,
    Shape = 3,
    Config = 4,
    Domain = 5,
    Empty = 6,
    Degenerate = 7,
    Registration = 8,
    Training = 9,
    Numerical = 10,
    Encoding = 11,
    Generation = 12,
    Format = 13,
    Io = 14,
    Json = 15,
    Panic = 16,
}

impl From<&Error> for BveStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => Self::Shape,
            Error::Config(_) => Self::Config,
            Error::Domain(_) => Self::Domain,
            Error::Empty(_) => Self::Empty,
            Error::Degenerate(_) => Self::Degenerate,
            Error::Registration(_) => Self::Registration,
            Error::Training(_) => Self::Training,
            Error::Numerical(_) => Self::Numerical,
            Error::Encoding(_) => Self::Encoding,
            Error::Generation(_) => Self::Generation,
            Error::Format(_) => Self::Format,
            Error::Io(_) => Self::Io,
            Error::Json(_) => Self::Json,
        }
    }
}

/// Dense occupancy grid.
pub struct BveGrid(DenseGrid);

/// Preservation mask at one resolution.
pub struct BveMask(PreservationMask);

/// Both trained stages of an edit model.
pub struct BveModel(LoadedModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(BveStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(BveStatus::from(&e), e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> BveStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BveStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned()).unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            BveStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(BveStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(BveStatus::InvalidString, format!("`{what}` is not UTF-8")))
}

unsafe fn to_path(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    string(p, what).map(PathBuf::from)
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bve_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bve_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Reads a BVEG grid file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bve_grid_load(path: *const c_char, out: *mut *mut BveGrid) -> BveStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let g = load_grid(&to_path(path, "path")?)?;
        *out = boxed(BveGrid(g));
        Ok(())
    })
}

/// Writes a grid as BVEG.
///
/// # Safety
/// `grid` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bve_grid_save(grid: *const BveGrid, path: *const c_char) -> BveStatus {
    guard(|| {
        save_grid(&to_path(path, "path")?, &borrow(grid, "grid")?.0)?;
        Ok(())
    })
}

/// # Safety
/// `grid` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bve_grid_free(grid: *mut BveGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Edge length in voxels, or 0 for a null handle.
///
/// # Safety
/// `grid` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bve_grid_resolution(grid: *const BveGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.0.resolution())
}

/// Number of voxels above the occupancy threshold, or 0 for a null handle.
///
/// # Safety
/// `grid` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bve_grid_occupied(grid: *const BveGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.0.occupied(0, OCCUPANCY_THRESHOLD).len())
}

/// Registers `edit` onto `orig` and returns the preservation mask at
/// `resolution` (0 for the grid resolution).
///
/// # Safety
/// Grid handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bve_mask_build(
    orig: *const BveGrid,
    edit: *const BveGrid,
    resolution: usize,
    tau_voxels: f64,
    seed: u64,
    out: *mut *mut BveMask,
) -> BveStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (o, e) = (&borrow(orig, "orig")?.0, &borrow(edit, "edit")?.0);
        let res = if resolution == 0 { o.resolution() } else { resolution };
        let cfg = MaskConfig { tau_voxels, seed, ..MaskConfig::default() };
        let mut rep = build_masks(o, e, &[res], &cfg)?;
        *out = boxed(BveMask(rep.masks.remove(0)));
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bve_mask_load(path: *const c_char, out: *mut *mut BveMask) -> BveStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(BveMask(PreservationMask::load(&to_path(path, "path")?)?));
        Ok(())
    })
}

/// # Safety
/// `mask` must be live; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bve_mask_save(mask: *const BveMask, path: *const c_char) -> BveStatus {
    guard(|| {
        borrow(mask, "mask")?.0.save(&to_path(path, "path")?)?;
        Ok(())
    })
}

/// Number of preserved voxels, or 0 for a null handle.
///
/// # Safety
/// `mask` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bve_mask_count(mask: *const BveMask) -> usize {
    mask.as_ref().map_or(0, |m| m.0.count())
}

/// Intersection over union of two masks at the same resolution.
///
/// # Safety
/// Mask handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bve_mask_iou(a: *const BveMask, b: *const BveMask, out: *mut f64) -> BveStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = borrow(a, "a")?.0.iou(&borrow(b, "b")?.0)?;
        Ok(())
    })
}

/// # Safety
/// `mask` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bve_mask_free(mask: *mut BveMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Loads both trained stages from a run directory written by `bve train`.
///
/// # Safety
/// `run_dir` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bve_model_load(run_dir: *const c_char, out: *mut *mut BveModel) -> BveStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(BveModel(load_model(&to_path(run_dir, "run_dir")?)?));
        Ok(())
    })
}

/// Samples an edited structure for `orig` under `instruction`; the result is
/// a new grid handle.
///
/// # Safety
/// Handles must be live; `instruction` must be NUL-terminated; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn bve_model_edit(
    model: *const BveModel,
    orig: *const BveGrid,
    instruction: *const c_char,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
    out: *mut *mut BveGrid,
) -> BveStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = &borrow(model, "model")?.0;
        let instr: EditInstruction = string(instruction, "instruction")?.parse()?;
        let sampler = SamplerConfig { steps, cfg_scale };
        sampler.validate()?;
        let res = edit_pipeline(&m.as_edit_model(), &borrow(orig, "orig")?.0, &instr, &sampler, seed)?;
        *out = boxed(BveGrid(res.structure));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bve_model_free(model: *mut BveModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Chamfer distance between the occupied voxel centres of two grids, each
/// subsampled to at most `points` (0 for all).
///
/// # Safety
/// Grid handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bve_chamfer(a: *const BveGrid, b: *const BveGrid, points: usize, seed: u64, out: *mut f64) -> BveStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let mut r = rng(seed);
        let n = if points == 0 { usize::MAX } else { points };
        let pa = subsample(&borrow(a, "a")?.0.to_points(0, OCCUPANCY_THRESHOLD)?, n, &mut r);
        let pb = subsample(&borrow(b, "b")?.0.to_points(0, OCCUPANCY_THRESHOLD)?, n, &mut r);
        *out = chamfer(&pa, &pb)?;
        Ok(())
    })
}

/// Mean SSIM of the three axis projections of two grids.
///
/// # Safety
/// Grid handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bve_projection_ssim(a: *const BveGrid, b: *const BveGrid, out: *mut f64) -> BveStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = projection_ssim(&borrow(a, "a")?.0, &borrow(b, "b")?.0, 0)?;
        Ok(())
    })
}

unsafe fn features(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<FeatureMatrix, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let n = rows.checked_mul(cols).ok_or_else(|| Failure(BveStatus::Shape, format!("`{what}` size overflows")))?;
    Ok(FeatureMatrix::new(rows, cols, std::slice::from_raw_parts(p, n).to_vec(), what)?)
}

/// Fréchet distance between Gaussian fits of two row-major feature matrices
/// with the same column count.
///
/// # Safety
/// `real` must point to `real_rows × cols` doubles, `gen` to `gen_rows × cols`;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bve_frechet(real: *const f64, real_rows: usize, gen: *const f64, gen_rows: usize, cols: usize, out: *mut f64) -> BveStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = frechet(&features(real, real_rows, cols, "real")?, &features(gen, gen_rows, cols, "gen")?)?;
        Ok(())
    })
}
