//! C interface to the odometry pipeline.
//!
//! Models are opaque handles. Every function returns a [`LodomStatus`]; on
//! failure the message is kept per thread and read with
//! [`lodom_last_error_message`]. Poses cross the boundary as row-major
//! `[R | t]` blocks of 12 doubles.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use lodom::data::sample_to_n;
use lodom::eval::{ate, kitti_rte_rre, rpe};
use lodom::geometry::{relative_gt, Point, RigidTransform};
use lodom::model::{Model, RunOptions};
use lodom::nn::checkpoint;
use lodom::{Config, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LodomStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Numeric = 5,
    Panic = 6,
}

/// Skip the temporal state between pairs.
pub const LODOM_NO_TEMPORAL: u32 = 1;
/// Start every pair from the identity.
pub const LODOM_NO_SEQ_INIT: u32 = 2;
/// Rebuild every pyramid instead of reusing it.
pub const LODOM_NO_CACHE: u32 = 4;

/// Trajectory metrics. `rte` and `rre` are NaN and `kitti_valid` is 0 when
/// the ground-truth path is shorter than the shortest segment.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LodomMetrics {
    pub rte: f64,
    pub rre: f64,
    pub ate: f64,
    pub rpe_t: f64,
    pub rpe_r: f64,
    pub kitti_valid: i32,
}

/// Opaque model handle.
pub struct LodomModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> LodomStatus {
    match e {
        Error::Io(_) => LodomStatus::Io,
        Error::NonFinite(_) | Error::DegenerateQuaternion { .. } => LodomStatus::Numeric,
        Error::Invalid(_) | Error::Config(_) => LodomStatus::InvalidArgument,
        _ => LodomStatus::Data,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (LodomStatus, String)>) -> LodomStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            LodomStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LodomStatus::Panic
        }
    }
}

fn lift<T>(r: lodom::Result<T>) -> Result<T, (LodomStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (LodomStatus, String) {
    (LodomStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (LodomStatus, String) {
    (LodomStatus::InvalidArgument, msg.into())
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap`) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lodom_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates a freshly initialized desk-profile model.
///
/// # Safety
/// `out` must be null or valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn lodom_model_new_desk(seed: u64, out: *mut *mut LodomModel) -> LodomStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg = Config::desk();
        cfg.seed = seed;
        let model = lift(Model::new(cfg))?;
        *out = Box::into_raw(Box::new(LodomModel { model }));
        Ok(())
    })
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` must be null or
/// valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn lodom_model_load(path: *const c_char, out: *mut *mut LodomModel) -> LodomStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let ckpt = lift(checkpoint::load(Path::new(path)))?;
        let model = lift(Model::from_checkpoint(&ckpt))?;
        *out = Box::into_raw(Box::new(LodomModel { model }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lodom_model_free(model: *mut LodomModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of points every frame is resampled to.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lodom_model_points(model: *const LodomModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.input.points)
}

unsafe fn poses_in(ptr: *const f64, frames: usize, what: &str) -> Result<Vec<RigidTransform>, (LodomStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let flat = std::slice::from_raw_parts(ptr, frames * 12);
    flat.chunks_exact(12)
        .map(|c| lift(RigidTransform::from_matrix(c.try_into().expect("chunk of 12"))))
        .collect()
}

/// Estimates world poses for a sequence. Frame `k` has `counts[k]` points,
/// stored consecutively as xyz triples in `points`. `out_poses` receives
/// `12 · frames` doubles. `flags` combines the `LODOM_NO_*` switches.
///
/// # Safety
/// `points` must hold `3 · Σ counts` floats, `counts` `frames` entries and
/// `out_poses` room for `12 · frames` doubles.
#[no_mangle]
pub unsafe extern "C" fn lodom_run_sequence(
    model: *const LodomModel,
    points: *const f32,
    counts: *const usize,
    frames: usize,
    flags: u32,
    out_poses: *mut f64,
) -> LodomStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if points.is_null() {
            return Err(null("points"));
        }
        if counts.is_null() {
            return Err(null("counts"));
        }
        if out_poses.is_null() {
            return Err(null("out_poses"));
        }
        if flags & !(LODOM_NO_TEMPORAL | LODOM_NO_SEQ_INIT | LODOM_NO_CACHE) != 0 {
            return Err(invalid(format!("unknown flags {flags:#x}")));
        }
        let counts = std::slice::from_raw_parts(counts, frames);
        let total: usize = counts.iter().sum();
        let flat = std::slice::from_raw_parts(points, 3 * total);
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        let mut offset = 0;
        let mut seq = Vec::with_capacity(frames);
        for &c in counts {
            let raw: Vec<Point> = flat[3 * offset..3 * (offset + c)]
                .chunks_exact(3)
                .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
                .collect();
            if raw.is_empty() {
                return Err(invalid("frame with no points"));
            }
            offset += c;
            seq.push(lift(sample_to_n(&raw, model.config.input.points, &mut rng))?);
        }
        let run = lift(model.run_sequence(
            &seq,
            &RunOptions {
                temporal: flags & LODOM_NO_TEMPORAL == 0,
                seq_init: flags & LODOM_NO_SEQ_INIT == 0,
                cache: flags & LODOM_NO_CACHE == 0,
                seq_id: 0,
            },
        ))?;
        let out = std::slice::from_raw_parts_mut(out_poses, 12 * frames);
        for (k, w) in run.world.iter().enumerate() {
            out[12 * k..12 * (k + 1)].copy_from_slice(&w.to_matrix());
        }
        Ok(())
    })
}

/// Metrics of `est` against `gt`, both `frames` world poses.
///
/// # Safety
/// `gt` and `est` must hold `12 · frames` doubles; `out` must be valid for
/// one write.
#[no_mangle]
pub unsafe extern "C" fn lodom_eval(
    gt: *const f64,
    est: *const f64,
    frames: usize,
    out: *mut LodomMetrics,
) -> LodomStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let gt = poses_in(gt, frames, "gt")?;
        let est = poses_in(est, frames, "est")?;
        let (rpe_t, rpe_r) = lift(rpe(&gt, &est))?;
        let ate = lift(ate(&gt, &est))?;
        let (rte, rre, valid) = match kitti_rte_rre(&gt, &est) {
            Ok((t, r)) => (t, r, 1),
            Err(Error::PathTooShort { .. }) => (f64::NAN, f64::NAN, 0),
            Err(e) => return Err((status_of(&e), e.to_string())),
        };
        *out = LodomMetrics {
            rte,
            rre,
            ate,
            rpe_t,
            rpe_r,
            kitti_valid: valid,
        };
        Ok(())
    })
}

/// Transform carrying frame-`a` coordinates into frame `b`, from the world
/// poses of both frames.
///
/// # Safety
/// `world_a` and `world_b` must hold 12 doubles; `out` room for 12.
#[no_mangle]
pub unsafe extern "C" fn lodom_relative_pose(
    world_a: *const f64,
    world_b: *const f64,
    out: *mut f64,
) -> LodomStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = poses_in(world_a, 1, "world_a")?[0];
        let b = poses_in(world_b, 1, "world_b")?[0];
        std::slice::from_raw_parts_mut(out, 12).copy_from_slice(&relative_gt(&a, &b).to_matrix());
        Ok(())
    })
}
