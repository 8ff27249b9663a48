//! C ABI over the geotdm library.
//!
//! Every function returns a [`GeotdmStatus`]; on failure a message is kept
//! per thread and read with [`geotdm_last_error`]. Handles are opaque and
//! owned by the caller until passed to their `_free` function. Coordinate
//! buffers are `f32`, frame-major, then node, then dimension.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use geotdm::checkpoint::Checkpoint;
use geotdm::diffusion::{sample_cond, sample_uncond, RngNoise};
use geotdm::egtn::{Condition, EgtnModel, NodeGraph};
use geotdm::error::GeoError;
use geotdm::eval::ade_fde;
use geotdm::geom::{Coords, GeoTrajectory};
use geotdm::gtrj;
use geotdm::sim::{simulate, SystemKind, SystemSpec};
use geotdm::tape::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeotdmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Numerical = 4,
    Corrupt = 5,
    Version = 6,
    ShapeMismatch = 7,
    Config = 8,
    Io = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeotdmSystem {
    Charged = 0,
    Spring = 1,
    Gravity = 2,
}

/// A trained model and its noise schedule.
pub struct GeotdmModel {
    checkpoint: Checkpoint,
    model: EgtnModel<f32>,
}

/// An ordered collection of trajectories.
pub struct GeotdmTrajectories {
    items: Vec<GeoTrajectory<f32>>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &GeoError) -> GeotdmStatus {
    match e {
        GeoError::Dimension(_) => GeotdmStatus::Dimension,
        GeoError::Invalid(_) => GeotdmStatus::InvalidArgument,
        GeoError::Numerical(_) => GeotdmStatus::Numerical,
        GeoError::Corrupt(_) => GeotdmStatus::Corrupt,
        GeoError::Version { .. } => GeotdmStatus::Version,
        GeoError::ShapeMismatch(_) => GeotdmStatus::ShapeMismatch,
        GeoError::Config(_) => GeotdmStatus::Config,
        GeoError::Io(_) => GeotdmStatus::Io,
    }
}

struct Fail(GeotdmStatus, String);

impl From<GeoError> for Fail {
    fn from(e: GeoError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GeotdmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GeotdmStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            GeotdmStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(GeotdmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    // SAFETY: caller passes a nul-terminated string.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(GeotdmStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn out_buf<'a>(p: *mut f32, len: usize, need: usize) -> Result<&'a mut [f32], Fail> {
    if p.is_null() && need > 0 {
        return Err(null("output buffer"));
    }
    if len < need {
        return Err(Fail(GeotdmStatus::BufferTooSmall, format!("buffer holds {len} values, {need} needed")));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    // SAFETY: caller guarantees `len ≥ need` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, need) })
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn geotdm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn geotdm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint into a new model handle.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn geotdm_model_load(path: *const c_char, out: *mut *mut GeotdmModel) -> GeotdmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: forwarded caller contract.
        let path = unsafe { path_arg(path)? };
        let checkpoint = Checkpoint::load(&path)?;
        let model = checkpoint.model()?;
        // SAFETY: `out` checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(GeotdmModel { checkpoint, model })) };
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`geotdm_model_load`] and not be freed twice; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn geotdm_model_free(model: *mut GeotdmModel) {
    if !model.is_null() {
        // SAFETY: pointer originates from Box::into_raw.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Target frames, condition frames and spatial dimension of the model.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn geotdm_model_shape(
    model: *const GeotdmModel,
    frames: *mut usize,
    cond_frames: *mut usize,
    dim: *mut usize,
) -> GeotdmStatus {
    guard(|| {
        // SAFETY: caller contract.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if frames.is_null() || cond_frames.is_null() || dim.is_null() {
            return Err(null("shape output"));
        }
        let meta = &m.checkpoint.meta;
        // SAFETY: checked non-null.
        unsafe {
            *frames = meta.frames;
            *cond_frames = meta.cond_frames;
            *dim = meta.dim;
        }
        Ok(())
    })
}

fn complete_graph(features: &[f32], nodes: usize, feature_dim: usize) -> Result<NodeGraph<f32>, Fail> {
    if nodes == 0 || features.len() != nodes * feature_dim {
        return Err(Fail(GeotdmStatus::Dimension, "features must hold nodes × feature_dim values".into()));
    }
    Ok(NodeGraph::complete(Mat::from_vec(nodes, feature_dim, features.to_vec())))
}

/// Draws `n_samples` unconditional trajectories on a complete graph into `out`
/// (`n_samples × frames × nodes × dim` values).
///
/// # Safety
/// `model` must be a live handle, `features` must hold `nodes × feature_dim`
/// values and `out` `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn geotdm_sample_uncond(
    model: *const GeotdmModel,
    features: *const f32,
    nodes: usize,
    feature_dim: usize,
    n_samples: usize,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> GeotdmStatus {
    guard(|| {
        // SAFETY: caller contract.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let feats = unsafe { slice_arg(features, nodes * feature_dim, "features")? };
        let graph = complete_graph(feats, nodes, feature_dim)?;
        let meta = &m.checkpoint.meta;
        let schedule = meta.schedule.build()?;
        let mut noise = RngNoise(ChaCha8Rng::seed_from_u64(seed));
        let samples = sample_uncond(&m.model, &graph, meta.frames, meta.dim, n_samples, &schedule, &mut noise)?;
        let per = meta.frames * nodes * meta.dim;
        let buf = unsafe { out_buf(out, out_len, per * n_samples)? };
        for (chunk, s) in buf.chunks_mut(per.max(1)).zip(&samples) {
            chunk.copy_from_slice(&s.data);
        }
        Ok(())
    })
}

/// Forecasts `n_samples` continuations of `cond` (`cond_frames × nodes × dim`
/// values, the frames right before the forecast) into `out`.
///
/// # Safety
/// As for [`geotdm_sample_uncond`]; `cond` must hold `cond_frames × nodes × dim` values.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn geotdm_forecast(
    model: *const GeotdmModel,
    cond: *const f32,
    cond_frames: usize,
    features: *const f32,
    nodes: usize,
    feature_dim: usize,
    n_samples: usize,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> GeotdmStatus {
    guard(|| {
        // SAFETY: caller contract.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let meta = &m.checkpoint.meta;
        let d = meta.dim;
        let feats = unsafe { slice_arg(features, nodes * feature_dim, "features")? };
        let graph = complete_graph(feats, nodes, feature_dim)?;
        let c = unsafe { slice_arg(cond, cond_frames * nodes * d, "cond")? };
        let condition = Condition::preceding(Coords::from_vec(cond_frames, nodes, d, c.to_vec())?);
        let schedule = meta.schedule.build()?;
        let mut noise = RngNoise(ChaCha8Rng::seed_from_u64(seed));
        let samples = sample_cond(&m.model, &graph, &condition, meta.frames, n_samples, &schedule, &mut noise)?;
        let per = meta.frames * nodes * d;
        let buf = unsafe { out_buf(out, out_len, per * n_samples)? };
        for (chunk, s) in buf.chunks_mut(per.max(1)).zip(&samples) {
            chunk.copy_from_slice(&s.data);
        }
        Ok(())
    })
}

/// Simulates one trajectory of a default system with `n_bodies` bodies in 3D.
/// Writes `frames × n_bodies × 3` positions into `out`.
///
/// # Safety
/// `out` must hold `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn geotdm_simulate(
    system: GeotdmSystem,
    n_bodies: usize,
    frames: usize,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> GeotdmStatus {
    guard(|| {
        let kind = match system {
            GeotdmSystem::Charged => SystemKind::Charged,
            GeotdmSystem::Spring => SystemKind::Spring,
            GeotdmSystem::Gravity => SystemKind::Gravity,
        };
        let spec = SystemSpec { n_bodies, ..SystemSpec::default_for(kind) };
        spec.validate()?;
        let run = simulate(&spec, frames, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let c = run.trajectory.coords.cast::<f32>();
        let buf = unsafe { out_buf(out, out_len, c.data.len())? };
        buf.copy_from_slice(&c.data);
        Ok(())
    })
}

/// ADE and FDE between two `frames × nodes × dim` buffers.
///
/// # Safety
/// `x` and `y` must hold `frames × nodes × dim` values; `ade` and `fde` must be valid.
#[no_mangle]
pub unsafe extern "C" fn geotdm_ade_fde(
    x: *const f32,
    y: *const f32,
    frames: usize,
    nodes: usize,
    dim: usize,
    ade: *mut f64,
    fde: *mut f64,
) -> GeotdmStatus {
    guard(|| {
        let n = frames * nodes * dim;
        let (xs, ys) = unsafe { (slice_arg(x, n, "x")?, slice_arg(y, n, "y")?) };
        if ade.is_null() || fde.is_null() {
            return Err(null("result pointer"));
        }
        let a = Coords::from_vec(frames, nodes, dim, xs.to_vec())?;
        let b = Coords::from_vec(frames, nodes, dim, ys.to_vec())?;
        let (va, vf) = ade_fde(&a, &b)?;
        // SAFETY: checked non-null.
        unsafe {
            *ade = va;
            *fde = vf;
        }
        Ok(())
    })
}

/// Reads every record of a GTRJ file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn geotdm_gtrj_read(path: *const c_char, out: *mut *mut GeotdmTrajectories) -> GeotdmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { path_arg(path)? };
        let items = gtrj::read_file(&path)?;
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(Box::new(GeotdmTrajectories { items })) };
        Ok(())
    })
}

/// Writes the collection to a GTRJ file.
///
/// # Safety
/// `trajs` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn geotdm_gtrj_write(trajs: *const GeotdmTrajectories, path: *const c_char) -> GeotdmStatus {
    guard(|| {
        let t = unsafe { trajs.as_ref() }.ok_or_else(|| null("trajectories"))?;
        let path = unsafe { path_arg(path)? };
        gtrj::write_file(&path, &t.items)?;
        Ok(())
    })
}

/// Number of trajectories; 0 for a null handle.
///
/// # Safety
/// `trajs` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn geotdm_trajectories_len(trajs: *const GeotdmTrajectories) -> usize {
    unsafe { trajs.as_ref() }.map_or(0, |t| t.items.len())
}

/// Frames, nodes and dimension of trajectory `index`.
///
/// # Safety
/// `trajs` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn geotdm_trajectory_shape(
    trajs: *const GeotdmTrajectories,
    index: usize,
    frames: *mut usize,
    nodes: *mut usize,
    dim: *mut usize,
) -> GeotdmStatus {
    guard(|| {
        let t = unsafe { trajs.as_ref() }.ok_or_else(|| null("trajectories"))?;
        let g = t
            .items
            .get(index)
            .ok_or_else(|| Fail(GeotdmStatus::InvalidArgument, format!("index {index} out of range")))?;
        if frames.is_null() || nodes.is_null() || dim.is_null() {
            return Err(null("shape output"));
        }
        // SAFETY: checked non-null.
        unsafe {
            *frames = g.frames();
            *nodes = g.nodes();
            *dim = g.dim();
        }
        Ok(())
    })
}

/// Copies the coordinates of trajectory `index` into `out`.
///
/// # Safety
/// `trajs` must be a live handle and `out` hold `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn geotdm_trajectory_coords(
    trajs: *const GeotdmTrajectories,
    index: usize,
    out: *mut f32,
    out_len: usize,
) -> GeotdmStatus {
    guard(|| {
        let t = unsafe { trajs.as_ref() }.ok_or_else(|| null("trajectories"))?;
        let g = t
            .items
            .get(index)
            .ok_or_else(|| Fail(GeotdmStatus::InvalidArgument, format!("index {index} out of range")))?;
        let buf = unsafe { out_buf(out, out_len, g.coords.data.len())? };
        buf.copy_from_slice(&g.coords.data);
        Ok(())
    })
}

/// # Safety
/// `trajs` must come from [`geotdm_gtrj_read`] and not be freed twice; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn geotdm_trajectories_free(trajs: *mut GeotdmTrajectories) {
    if !trajs.is_null() {
        // SAFETY: pointer originates from Box::into_raw.
        drop(unsafe { Box::from_raw(trajs) });
    }
}
