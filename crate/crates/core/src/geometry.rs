//! Rigid transforms, Euler conversions, pinhole projection and decalibration
//! sampling.
//!
//! All geometry is double precision. Rotations use the fixed-axis X-Y-Z
//! convention, `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Points closer to the camera plane than this (meters) are never valid.
pub const Z_NEAR: f64 = 0.1;

const ORTHO_TOL: f64 = 1e-9;
const GIMBAL_TOL: f64 = 1e-9;

pub type Mat4 = [[f64; 4]; 4];
pub type Mat3 = [[f64; 3]; 3];

/// A 4×4 homogeneous rigid-body transform.
///
/// The rotation block is orthonormal with determinant +1 and the bottom row
/// is exactly `(0, 0, 0, 1)`.
#[derive(Clone, Copy, PartialEq)]
pub struct SE3Transform {
    m: Mat4,
}

impl fmt::Debug for SE3Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SE3Transform")
            .field("rows", &&self.m[..3])
            .finish()
    }
}

impl Default for SE3Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Transform {
    pub const fn identity() -> Self {
        Self {
            m: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
        }
    }

    /// Builds a transform from a rotation block and a translation, checking the
    /// rotation invariants.
    pub fn from_parts(rotation: Mat3, translation: [f64; 3]) -> Result<Self> {
        let t = Self::from_parts_unchecked(rotation, translation);
        t.validate()?;
        Ok(t)
    }

    pub(crate) fn from_parts_unchecked(rotation: Mat3, translation: [f64; 3]) -> Self {
        let mut m = Self::identity().m;
        for r in 0..3 {
            m[r][..3].copy_from_slice(&rotation[r]);
            m[r][3] = translation[r];
        }
        Self { m }
    }

    /// Validates a full 4×4 matrix.
    pub fn from_matrix(m: Mat4) -> Result<Self> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidArgument(format!(
                "bottom row must be (0,0,0,1), got {:?}",
                m[3]
            )));
        }
        let t = Self { m };
        t.validate()?;
        Ok(t)
    }

    /// Builds a transform from a row-major 3×4 block. Rotation blocks that are
    /// orthonormal only to within `tolerance` are re-orthonormalized, which is
    /// what calibration files printed with few digits need.
    pub fn from_rows_3x4(rows: &[f64; 12], tolerance: f64) -> Result<Self> {
        let mut rot = [[0.0; 3]; 3];
        let mut trans = [0.0; 3];
        for r in 0..3 {
            rot[r].copy_from_slice(&rows[r * 4..r * 4 + 3]);
            trans[r] = rows[r * 4 + 3];
        }
        let raw = Self::from_parts_unchecked(rot, trans);
        if raw.validate().is_ok() {
            return Ok(raw);
        }
        let err = raw.orthonormality_error();
        if err.is_finite() && err <= tolerance {
            let fixed = Self::from_parts_unchecked(orthonormalize(rot), trans);
            fixed.validate()?;
            Ok(fixed)
        } else {
            raw.validate().map(|_| raw)
        }
    }

    fn orthonormality_error(&self) -> f64 {
        let r = self.rotation();
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst.max((det3(&r) - 1.0).abs())
    }

    fn validate(&self) -> Result<()> {
        if self.m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("transform has non-finite entries".into()));
        }
        let err = self.orthonormality_error();
        if err > ORTHO_TOL {
            return Err(Error::InvalidArgument(format!(
                "rotation block is not orthonormal with det +1 (error {err:e})"
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.m
    }

    pub fn rotation(&self) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            row.copy_from_slice(&self.m[i][..3]);
        }
        r
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    /// Row-major top 3×4 block.
    pub fn rows_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            out[r * 4..r * 4 + 4].copy_from_slice(&self.m[r]);
        }
        out
    }

    /// Matrix product `self · other`.
    pub fn compose(&self, other: &SE3Transform) -> SE3Transform {
        SE3Transform {
            m: mat4_mul(&self.m, &other.m),
        }
    }

    /// Closed-form rigid inverse `[Rᵀ | −Rᵀt]`.
    pub fn inverse(&self) -> SE3Transform {
        let r = self.rotation();
        let t = self.translation();
        let mut rt = [[0.0; 3]; 3];
        let mut ti = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = r[j][i];
            }
        }
        for i in 0..3 {
            ti[i] = -(rt[i][0] * t[0] + rt[i][1] * t[1] + rt[i][2] * t[2]);
        }
        Self::from_parts_unchecked(rt, ti)
    }

    /// Applies the transform to a 3D point.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    /// KITTI-style single line: 12 whitespace-separated numbers, row-major 3×4.
    /// Numbers are printed with the shortest representation that parses back
    /// to the identical double.
    pub fn to_kitti_line(&self) -> String {
        self.rows_3x4()
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Parses a 12-number line. `origin` names the source in error messages.
    pub fn parse_kitti_line(line: &str, origin: &str) -> Result<Self> {
        let rows = parse_12(line, origin)?;
        Self::from_rows_3x4(&rows, 1e-3)
            .map_err(|e| Error::parse(origin, format!("invalid extrinsic: {e}")))
    }
}

pub(crate) fn parse_12(line: &str, origin: &str) -> Result<[f64; 12]> {
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::parse(origin, format!("bad number {tok:?}")))
        })
        .collect::<Result<_>>()?;
    if values.len() != 12 {
        return Err(Error::parse(
            origin,
            format!("expected 12 numbers, found {}", values.len()),
        ));
    }
    let mut rows = [0.0; 12];
    rows.copy_from_slice(&values);
    Ok(rows)
}

pub fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j] + a[i][3] * b[3][j];
        }
    }
    out
}

fn det3(r: &Mat3) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

// Gram-Schmidt on the rows; the third row is rebuilt as a cross product so the
// result is always right-handed.
fn orthonormalize(r: Mat3) -> Mat3 {
    let norm = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let x = norm(r[0]);
    let d = x[0] * r[1][0] + x[1] * r[1][1] + x[2] * r[1][2];
    let y = norm([r[1][0] - d * x[0], r[1][1] - d * x[1], r[1][2] - d * x[2]]);
    let z = [
        x[1] * y[2] - x[2] * y[1],
        x[2] * y[0] - x[0] * y[2],
        x[0] * y[1] - x[1] * y[0],
    ];
    [x, y, z]
}

/// Six-parameter pose: fixed-axis roll/pitch/yaw in radians plus a
/// translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerPose {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl EulerPose {
    pub fn new(roll: f64, pitch: f64, yaw: f64, tx: f64, ty: f64, tz: f64) -> Self {
        Self {
            roll,
            pitch,
            yaw,
            tx,
            ty,
            tz,
        }
    }

    /// `[roll, pitch, yaw, tx, ty, tz]`
    pub fn to_array(&self) -> [f64; 6] {
        [self.roll, self.pitch, self.yaw, self.tx, self.ty, self.tz]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }
}

/// `R = Rz(yaw) · Ry(pitch) · Rx(roll)`
pub fn euler_rotation(roll: f64, pitch: f64, yaw: f64) -> Mat3 {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    [
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ]
}

/// Partial derivatives of [`euler_rotation`] with respect to roll, pitch and
/// yaw, in that order.
pub fn euler_rotation_derivatives(roll: f64, pitch: f64, yaw: f64) -> [Mat3; 3] {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let d_roll = [
        [0.0, cy * sp * cr + sy * sr, -cy * sp * sr + sy * cr],
        [0.0, sy * sp * cr - cy * sr, -sy * sp * sr - cy * cr],
        [0.0, cp * cr, -cp * sr],
    ];
    let d_pitch = [
        [-cy * sp, cy * cp * sr, cy * cp * cr],
        [-sy * sp, sy * cp * sr, sy * cp * cr],
        [-cp, -sp * sr, -sp * cr],
    ];
    let d_yaw = [
        [-sy * cp, -sy * sp * sr - cy * cr, -sy * sp * cr + cy * sr],
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [0.0, 0.0, 0.0],
    ];
    [d_roll, d_pitch, d_yaw]
}

pub fn euler_to_se3(pose: &EulerPose) -> Result<SE3Transform> {
    if pose.to_array().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite pose {pose:?}")));
    }
    Ok(SE3Transform::from_parts_unchecked(
        euler_rotation(pose.roll, pose.pitch, pose.yaw),
        [pose.tx, pose.ty, pose.tz],
    ))
}

pub fn euler_from_se3(t: &SE3Transform) -> Result<EulerPose> {
    let r = t.rotation();
    let r31 = r[2][0];
    if r31.abs() > 1.0 - GIMBAL_TOL {
        return Err(Error::DegenerateRotation { r31 });
    }
    let pitch = (-r31).asin();
    let roll = r[2][1].atan2(r[2][2]);
    let yaw = r[1][0].atan2(r[0][0]);
    let [tx, ty, tz] = t.translation();
    Ok(EulerPose {
        roll,
        pitch,
        yaw,
        tx,
        ty,
        tz,
    })
}

/// Pinhole intrinsics with zero skew.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cy > 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64
            && self.fx.is_finite()
            && self.fy.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Key-value text block, one `key = value` per line.
    pub fn to_kv(&self) -> String {
        format!(
            "fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight = {}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }

    pub fn parse_kv(text: &str, origin: &str) -> Result<Self> {
        let mut vals: [Option<f64>; 6] = [None; 6];
        const KEYS: [&str; 6] = ["fx", "fy", "cx", "cy", "width", "height"];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| Error::parse(origin, format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let slot = KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| Error::parse(origin, format!("line {}: unknown key {key:?}", lineno + 1)))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::parse(origin, format!("line {}: bad value for {key}", lineno + 1)))?;
            vals[slot] = Some(v);
        }
        let get = |i: usize| vals[i].ok_or_else(|| Error::parse(origin, format!("missing key {:?}", KEYS[i])));
        let dim = |i: usize| -> Result<usize> {
            let v = get(i)?;
            if v < 1.0 || v.fract() != 0.0 {
                return Err(Error::parse(origin, format!("{} must be a positive integer", KEYS[i])));
            }
            Ok(v as usize)
        };
        Self::new(get(0)?, get(1)?, get(2)?, get(3)?, dim(4)?, dim(5)?)
            .map_err(|e| Error::parse(origin, e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Return strength on the 0..=255 scale.
    pub intensity: f64,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// A non-empty LiDAR sweep with finite coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("point cloud is empty".into()));
        }
        if let Some(i) = points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.intensity.is_finite()))
        {
            return Err(Error::InvalidArgument(format!("point {i} has non-finite values")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[LidarPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Result of projecting one point. `u`, `v` are meaningless when `valid` is
/// false.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub cam: [f64; 3],
    pub valid: bool,
}

/// Projects a single camera-frame point.
pub fn project_camera_point(cam: [f64; 3], k: &CameraIntrinsics) -> Projection {
    let [x, y, z] = cam;
    let u = k.fx * x / z + k.cx;
    let v = k.fy * y / z + k.cy;
    let valid = z > Z_NEAR && u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64;
    Projection { u, v, cam, valid }
}

/// Transforms every point into the camera frame with `t` and projects it
/// through `k`.
pub fn project_points(cloud: &PointCloud, t: &SE3Transform, k: &CameraIntrinsics) -> Vec<Projection> {
    cloud
        .points()
        .iter()
        .map(|p| project_camera_point(t.apply(p.xyz()), k))
        .collect()
}

/// Per-axis bounds of a uniform decalibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecalibRange {
    /// Meters per axis.
    pub trans_max: f64,
    /// Radians per axis.
    pub rot_max: f64,
}

impl DecalibRange {
    pub fn new(trans_max: f64, rot_max: f64) -> Result<Self> {
        if !(trans_max >= 0.0 && rot_max >= 0.0 && trans_max.is_finite() && rot_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "decalibration range must be finite and non-negative, got ({trans_max}, {rot_max})"
            )));
        }
        Ok(Self { trans_max, rot_max })
    }

    /// ±10 cm, ±1°.
    pub fn standard() -> Self {
        Self {
            trans_max: 0.10,
            rot_max: 1f64.to_radians(),
        }
    }
}

/// Draws a perturbation with every angle uniform in `[-rot_max, rot_max]` and
/// every translation uniform in `[-trans_max, trans_max]`.
pub fn sample_decalibration(range: &DecalibRange, seed: u64) -> SE3Transform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let roll = draw(range.rot_max);
    let pitch = draw(range.rot_max);
    let yaw = draw(range.rot_max);
    let tx = draw(range.trans_max);
    let ty = draw(range.trans_max);
    let tz = draw(range.trans_max);
    SE3Transform::from_parts_unchecked(euler_rotation(roll, pitch, yaw), [tx, ty, tz])
}
