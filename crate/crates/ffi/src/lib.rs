//! C ABI over the calibration toolkit.
//!
//! Every fallible function returns a [`CcStatus`]. On failure the message is
//! kept per thread and read with [`cc_last_error`]. Extrinsics cross the
//! boundary as 12 doubles, the row-major top 3×4 block of the LiDAR-to-camera
//! transform. Points are `x, y, z, intensity` float quadruples with intensity
//! on the 0–255 scale.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use consistcal::config::RunConfig;
use consistcal::formats::RgbImage;
use consistcal::geometry::{euler_from_se3, euler_to_se3, project_points, CameraIntrinsics, EulerPose, LidarPoint, PointCloud, SE3Transform};
use consistcal::pseudo::binarize_intensity;
use consistcal::train::Calibrator;
use consistcal::Error;

/// Result codes. `CC_STATUS_OK` is zero; everything else is a failure.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    DegenerateRotation = 6,
    Numeric = 7,
    Internal = 8,
}

/// Pinhole camera model.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CcIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// Opaque calibrator handle; free with [`cc_calibrator_free`].
pub struct CcCalibrator {
    config: RunConfig,
    width: usize,
    height: usize,
    inner: Calibrator,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CcStatus {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Dataset(_) | Error::Generation(_) => CcStatus::InvalidArgument,
        Error::DegenerateRotation { .. } => CcStatus::DegenerateRotation,
        Error::Tensor(_) | Error::NonFiniteLoss { .. } => CcStatus::Numeric,
        Error::Parse { .. } => CcStatus::Parse,
        Error::Io { .. } => CcStatus::Io,
        Error::Checkpoint(_) => CcStatus::Checkpoint,
    }
}

struct Fail(CcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CcStatus::NullArgument, format!("{what} is null"))
}

/// Runs `f`, recording the error message and mapping panics to
/// `CC_STATUS_INTERNAL`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CcStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            CcStatus::Internal
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CcStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn transform_arg(p: *const f64, what: &str) -> Result<SE3Transform, Fail> {
    let v: &[f64; 12] = slice_arg(p, 12, what)?.try_into().expect("length 12");
    Ok(SE3Transform::from_rows_3x4(v, 1e-6)?)
}

fn write_transform(t: &SE3Transform, out: &mut [f64]) {
    out.copy_from_slice(&t.rows_3x4());
}

fn intrinsics_arg(k: *const CcIntrinsics) -> Result<CameraIntrinsics, Fail> {
    // SAFETY: checked for null; the caller guarantees a valid struct.
    let k = unsafe { k.as_ref() }.ok_or_else(|| null("intrinsics"))?;
    Ok(CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width as usize, k.height as usize)?)
}

unsafe fn cloud_arg(points: *const f32, count: usize) -> Result<PointCloud, Fail> {
    let v = slice_arg(points, count.checked_mul(4).ok_or_else(|| Fail(CcStatus::InvalidArgument, "point count overflows".into()))?, "points")?;
    let pts = v
        .chunks_exact(4)
        .map(|p| LidarPoint::new(p[0] as f64, p[1] as f64, p[2] as f64, p[3] as f64))
        .collect();
    Ok(PointCloud::new(pts)?)
}

/// Message of the last failure on this thread, or NULL if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint for images of `width × height`. `config_path` may be
/// NULL, in which case `run.cfg` beside the checkpoint is used if present.
///
/// # Safety
/// String arguments must be NUL-terminated or NULL where allowed; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn cc_calibrator_load(
    checkpoint_path: *const c_char,
    config_path: *const c_char,
    width: u32,
    height: u32,
    out: *mut *mut CcCalibrator,
) -> CcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = path_arg(checkpoint_path, "checkpoint_path")?;
        let explicit = if config_path.is_null() { None } else { Some(path_arg(config_path, "config_path")?) };
        let config = RunConfig::for_checkpoint(ckpt, explicit)?;
        let mut net = config.net.clone();
        net.width = width as usize;
        net.height = height as usize;
        let inner = Calibrator::load(ckpt, &net)?;
        *out = Box::into_raw(Box::new(CcCalibrator {
            config,
            width: width as usize,
            height: height as usize,
            inner,
        }));
        Ok(())
    })
}

/// Releases a calibrator. NULL is ignored.
///
/// # Safety
/// `cal` must come from [`cc_calibrator_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cc_calibrator_free(cal: *mut CcCalibrator) {
    if !cal.is_null() {
        drop(Box::from_raw(cal));
    }
}

/// Intensity threshold stored in the calibrator's run configuration.
///
/// # Safety
/// `cal` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cc_calibrator_threshold(cal: *const CcCalibrator, out: *mut f64) -> CcStatus {
    guard(|| {
        let cal = cal.as_ref().ok_or_else(|| null("calibrator"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = cal.config.train.threshold;
        Ok(())
    })
}

/// Corrects `t_init` in one forward pass. `rgb` holds `width · height · 3`
/// bytes, rows top to bottom; the image size must match the one given at
/// load time.
///
/// # Safety
/// All pointers must be valid for the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn cc_calibrator_calibrate(
    cal: *const CcCalibrator,
    rgb: *const u8,
    intrinsics: *const CcIntrinsics,
    points: *const f32,
    point_count: usize,
    t_init: *const f64,
    t_pred_out: *mut f64,
) -> CcStatus {
    guard(|| {
        let cal = cal.as_ref().ok_or_else(|| null("calibrator"))?;
        let k = intrinsics_arg(intrinsics)?;
        if (k.width, k.height) != (cal.width, cal.height) {
            return Err(Fail(
                CcStatus::InvalidArgument,
                format!("image is {}x{} but the calibrator was loaded for {}x{}", k.width, k.height, cal.width, cal.height),
            ));
        }
        let bytes = slice_arg(rgb, k.width * k.height * 3, "rgb")?;
        let image = RgbImage::new(k.width, k.height, bytes.to_vec())?;
        let cloud = cloud_arg(points, point_count)?;
        let init = transform_arg(t_init, "t_init")?;
        let out = slice_out(t_pred_out, 12, "t_pred_out")?;
        let (pred, _) = cal.inner.calibrate(&image, &cloud, &k, &init)?;
        write_transform(&pred, out);
        Ok(())
    })
}

/// Projects points under extrinsic `t`. Writes `2 · count` pixel coordinates
/// to `uv_out` and one 0/1 validity flag per point to `valid_out`.
///
/// # Safety
/// All pointers must be valid for the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn cc_project_points(
    points: *const f32,
    point_count: usize,
    intrinsics: *const CcIntrinsics,
    t: *const f64,
    uv_out: *mut f64,
    valid_out: *mut u8,
) -> CcStatus {
    guard(|| {
        let k = intrinsics_arg(intrinsics)?;
        let cloud = cloud_arg(points, point_count)?;
        let t = transform_arg(t, "t")?;
        let uv = slice_out(uv_out, point_count * 2, "uv_out")?;
        let valid = slice_out(valid_out, point_count, "valid_out")?;
        for (i, p) in project_points(&cloud, &t, &k).iter().enumerate() {
            uv[2 * i] = p.u;
            uv[2 * i + 1] = p.v;
            valid[i] = u8::from(p.valid);
        }
        Ok(())
    })
}

/// `(roll, pitch, yaw, tx, ty, tz)` in radians and meters to a 3×4 extrinsic.
///
/// # Safety
/// `pose` must hold 6 doubles and `out` 12.
#[no_mangle]
pub unsafe extern "C" fn cc_euler_to_matrix(pose: *const f64, out: *mut f64) -> CcStatus {
    guard(|| {
        let p = slice_arg(pose, 6, "pose")?;
        let out = slice_out(out, 12, "out")?;
        let t = euler_to_se3(&EulerPose::from_array([p[0], p[1], p[2], p[3], p[4], p[5]]))?;
        write_transform(&t, out);
        Ok(())
    })
}

/// Inverse of [`cc_euler_to_matrix`]; fails with
/// `CC_STATUS_DEGENERATE_ROTATION` at gimbal lock.
///
/// # Safety
/// `matrix` must hold 12 doubles and `pose_out` 6.
#[no_mangle]
pub unsafe extern "C" fn cc_matrix_to_euler(matrix: *const f64, pose_out: *mut f64) -> CcStatus {
    guard(|| {
        let t = transform_arg(matrix, "matrix")?;
        let out = slice_out(pose_out, 6, "pose_out")?;
        out.copy_from_slice(&euler_from_se3(&t)?.to_array());
        Ok(())
    })
}

/// Writes 1 where `intensities[i] > threshold`, else 0.
///
/// # Safety
/// `intensities` and `labels_out` must be valid for `count` elements.
#[no_mangle]
pub unsafe extern "C" fn cc_binarize_intensity(intensities: *const f32, count: usize, threshold: f64, labels_out: *mut u8) -> CcStatus {
    guard(|| {
        let v = slice_arg(intensities, count, "intensities")?;
        let out = slice_out(labels_out, count, "labels_out")?;
        if count == 0 {
            return Ok(());
        }
        let cloud = PointCloud::new(v.iter().map(|&i| LidarPoint::new(0.0, 0.0, 0.0, i as f64)).collect())?;
        out.copy_from_slice(&binarize_intensity(&cloud, threshold));
        Ok(())
    })
}
