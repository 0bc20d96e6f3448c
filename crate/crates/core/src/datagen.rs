//! Synthetic LiDAR/camera scenes.
//!
//! Scenes are built in the LiDAR frame (x forward, y left, z up) from a
//! ground plane, an optional frontal wall, axis-aligned boxes and vertical
//! poles. Every surface carries a two-class pattern; the class sets both the
//! LiDAR intensity band and the rendered albedo, so image texture and point
//! intensity are correlated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::formats::{quantize_point, RgbImage};
use crate::geometry::{sample_decalibration, CameraIntrinsics, DecalibRange, LidarPoint, PointCloud, SE3Transform};
use crate::pseudo::CalibSample;

/// A scene before decalibration: sensors, data and the true extrinsic.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: RgbImage,
    pub cloud: PointCloud,
    pub intrinsics: CameraIntrinsics,
    /// LiDAR-to-camera extrinsic, when known.
    pub t_gt: Option<SE3Transform>,
}

/// Draws `ΔT` from `range` and pairs the scene with `T_init = ΔT · T_gt`.
pub fn decalibrate(scene: &Scene, range: &DecalibRange, seed: u64, threshold: f64) -> Result<CalibSample> {
    let t_gt = scene
        .t_gt
        .ok_or_else(|| Error::Dataset(format!("scene {} has no ground-truth extrinsic", scene.id)))?;
    let delta = sample_decalibration(range, seed);
    Ok(CalibSample::new(
        scene.id.clone(),
        scene.image.clone(),
        scene.cloud.clone(),
        scene.intrinsics,
        t_gt,
        delta.compose(&t_gt),
        threshold,
    ))
}

/// Camera mounted looking along LiDAR +x: camera x = −y, camera y = −z,
/// camera z = x, centered 0.08 m above and 0.27 m behind the LiDAR.
pub fn default_extrinsic() -> SE3Transform {
    let r = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
    let center = [-0.27, 0.0, 0.08];
    let t = std::array::from_fn(|i| -(0..3).map(|j| r[i][j] * center[j]).sum::<f64>());
    SE3Transform::from_parts(r, t).expect("permutation is a rotation")
}

pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(80.0, 80.0, 64.0, 32.0, 128, 64).expect("valid")
}

/// Inclusive `[min, max]` range for a random draw.
pub type Span = (f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub t_lc: SE3Transform,
    pub points: usize,
    pub ground: bool,
    /// Height of the LiDAR above the ground, meters.
    pub lidar_height: f64,
    pub wall: bool,
    pub wall_distance: Span,
    pub boxes: (usize, usize),
    pub box_size: Span,
    pub poles: (usize, usize),
    pub pole_radius: Span,
    pub pole_height: Span,
    /// Forward and lateral placement of boxes and poles.
    pub object_x: Span,
    pub object_y: Span,
    pub checker_period: Span,
    pub high_intensity: Span,
    pub low_intensity: Span,
    /// Half-width of the uniform per-point intensity noise.
    pub intensity_noise: f64,
    /// Maximum LiDAR range, meters.
    pub max_range: f64,
    /// Sub-samples per pixel side when rendering.
    pub supersample: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            intrinsics: default_intrinsics(),
            t_lc: default_extrinsic(),
            points: 2000,
            ground: true,
            lidar_height: 1.7,
            wall: true,
            wall_distance: (12.0, 25.0),
            boxes: (2, 5),
            box_size: (0.6, 2.5),
            poles: (2, 5),
            pole_radius: (0.08, 0.25),
            pole_height: (2.0, 5.0),
            object_x: (4.0, 16.0),
            object_y: (-7.0, 7.0),
            checker_period: (0.5, 2.0),
            high_intensity: (60.0, 120.0),
            low_intensity: (5.0, 20.0),
            intensity_noise: 5.0,
            max_range: 40.0,
            supersample: 3,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let spans = [
            ("wall_distance", self.wall_distance),
            ("box_size", self.box_size),
            ("pole_radius", self.pole_radius),
            ("pole_height", self.pole_height),
            ("object_x", self.object_x),
            ("object_y", self.object_y),
            ("checker_period", self.checker_period),
            ("high_intensity", self.high_intensity),
            ("low_intensity", self.low_intensity),
        ];
        for (name, (lo, hi)) in spans {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Generation(format!("{name} range [{lo}, {hi}] is empty or not finite")));
            }
        }
        if self.boxes.0 > self.boxes.1 || self.poles.0 > self.poles.1 {
            return Err(Error::Generation("primitive count ranges must satisfy min ≤ max".into()));
        }
        if !self.ground && !self.wall && self.boxes.1 == 0 && self.poles.1 == 0 {
            return Err(Error::Generation("scene needs at least one primitive".into()));
        }
        if self.points < 100 {
            return Err(Error::Generation(format!("points per scene must be ≥ 100, got {}", self.points)));
        }
        if self.checker_period.0 <= 0.0 || self.box_size.0 <= 0.0 || self.pole_radius.0 <= 0.0 {
            return Err(Error::Generation("sizes and periods must be positive".into()));
        }
        if !(self.intensity_noise >= 0.0 && self.max_range > 0.0 && self.lidar_height > 0.0) || self.supersample == 0 {
            return Err(Error::Generation("noise, range, height and supersampling must be positive".into()));
        }
        Ok(())
    }
}

/// Two-class surface pattern over surface coordinates in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pattern {
    Checker { period: f64, phase: f64 },
    /// Bands alternating along the second surface coordinate.
    Bands { period: f64, phase: f64 },
    /// Bands alternating along the first surface coordinate.
    Stripes { period: f64, phase: f64 },
    Solid { high: bool },
}

impl Pattern {
    pub fn is_high(&self, s: f64, t: f64) -> bool {
        let cell = |x: f64, p: f64, ph: f64| ((x + ph) / p).floor() as i64;
        match *self {
            Pattern::Checker { period, phase } => (cell(s, period, phase) + cell(t, period, phase)).rem_euclid(2) == 0,
            Pattern::Bands { period, phase } => cell(t, period, phase).rem_euclid(2) == 0,
            Pattern::Stripes { period, phase } => cell(s, period, phase).rem_euclid(2) == 0,
            Pattern::Solid { high } => high,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Horizontal plane `z = z`, surface coordinates `(x, y)`.
    Ground { z: f64 },
    /// Plane `x = x` facing the sensors, `|y| ≤ half_width`, `z0 ≤ z ≤ z1`;
    /// surface coordinates `(y, z)`.
    Wall { x: f64, half_width: f64, z0: f64, z1: f64 },
    /// Axis-aligned box.
    Cuboid { min: [f64; 3], max: [f64; 3] },
    /// Vertical cylinder with a top cap; surface coordinates
    /// `(arc length, z)`.
    Pole { center: [f64; 2], radius: f64, z0: f64, z1: f64 },
}

/// A scene primitive with its appearance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surface {
    pub shape: Shape,
    pub pattern: Pattern,
    pub high_intensity: f64,
    pub low_intensity: f64,
    pub high_color: [f64; 3],
    pub low_color: [f64; 3],
}

/// Ray hit: distance along the unit direction, outward normal and surface
/// coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub t: f64,
    pub normal: [f64; 3],
    pub st: [f64; 2],
}

const EPS: f64 = 1e-9;

impl Shape {
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<Hit> {
        match *self {
            Shape::Ground { z } => {
                if d[2].abs() < EPS {
                    return None;
                }
                let t = (z - o[2]) / d[2];
                (t > EPS).then(|| {
                    let p = at(o, d, t);
                    Hit {
                        t,
                        normal: [0.0, 0.0, if o[2] > z { 1.0 } else { -1.0 }],
                        st: [p[0], p[1]],
                    }
                })
            }
            Shape::Wall { x, half_width, z0, z1 } => {
                if d[0].abs() < EPS {
                    return None;
                }
                let t = (x - o[0]) / d[0];
                let p = at(o, d, t);
                (t > EPS && p[1].abs() <= half_width && p[2] >= z0 && p[2] <= z1).then_some(Hit {
                    t,
                    normal: [if o[0] < x { -1.0 } else { 1.0 }, 0.0, 0.0],
                    st: [p[1], p[2]],
                })
            }
            Shape::Cuboid { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut axis0, mut axis1) = (0, 0);
                for a in 0..3 {
                    if d[a].abs() < EPS {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis0 = a;
                    }
                    if tb < t1 {
                        t1 = tb;
                        axis1 = a;
                    }
                }
                if t0 > t1 || t1 <= EPS {
                    return None;
                }
                let (t, axis) = if t0 > EPS { (t0, axis0) } else { (t1, axis1) };
                let p = at(o, d, t);
                let mut normal = [0.0; 3];
                normal[axis] = if d[axis] > 0.0 { -1.0 } else { 1.0 };
                let st = match axis {
                    0 => [p[1], p[2]],
                    1 => [p[0], p[2]],
                    _ => [p[0], p[1]],
                };
                Some(Hit { t, normal, st })
            }
            Shape::Pole { center, radius, z0, z1 } => {
                let mut best: Option<Hit> = None;
                let (ox, oy) = (o[0] - center[0], o[1] - center[1]);
                let a = d[0] * d[0] + d[1] * d[1];
                if a > EPS {
                    let b = 2.0 * (ox * d[0] + oy * d[1]);
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                            let p = at(o, d, t);
                            if t > EPS && p[2] >= z0 && p[2] <= z1 {
                                let (nx, ny) = ((p[0] - center[0]) / radius, (p[1] - center[1]) / radius);
                                best = Some(Hit {
                                    t,
                                    normal: [nx, ny, 0.0],
                                    st: [ny.atan2(nx) * radius, p[2]],
                                });
                                break;
                            }
                        }
                    }
                }
                if d[2].abs() > EPS {
                    let t = (z1 - o[2]) / d[2];
                    let p = at(o, d, t);
                    let r2 = (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2);
                    if t > EPS && r2 <= radius * radius && best.is_none_or(|h| t < h.t) {
                        best = Some(Hit {
                            t,
                            normal: [0.0, 0.0, 1.0],
                            st: [p[0], p[1]],
                        });
                    }
                }
                best
            }
        }
    }

    /// Whether `p` lies strictly inside the solid (or below the ground).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Shape::Ground { z } => p[2] < z,
            Shape::Wall { .. } => false,
            Shape::Cuboid { min, max } => (0..3).all(|a| p[a] > min[a] && p[a] < max[a]),
            Shape::Pole { center, radius, z0, z1 } => {
                (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) < radius * radius && p[2] > z0 && p[2] < z1
            }
        }
    }

    /// Distance from `p` to the surface, for membership checks.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            Shape::Ground { z } => (p[2] - z).abs(),
            Shape::Wall { x, .. } => (p[0] - x).abs(),
            Shape::Cuboid { min, max } => {
                // distance to the closest face plane of a point on or near the box
                (0..3)
                    .flat_map(|a| [(p[a] - min[a]).abs(), (p[a] - max[a]).abs()])
                    .fold(f64::INFINITY, f64::min)
            }
            Shape::Pole { center, radius, z1, .. } => {
                let r = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt();
                (r - radius).abs().min((p[2] - z1).abs())
            }
        }
    }
}

fn at(o: [f64; 3], d: [f64; 3], t: f64) -> [f64; 3] {
    [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Nearest hit over all surfaces within `max_t`.
pub fn cast(surfaces: &[Surface], o: [f64; 3], d: [f64; 3], max_t: f64) -> Option<(usize, Hit)> {
    let mut best: Option<(usize, Hit)> = None;
    for (i, s) in surfaces.iter().enumerate() {
        if let Some(h) = s.shape.intersect(o, d) {
            if h.t <= max_t && best.as_ref().is_none_or(|(_, b)| h.t < b.t) {
                best = Some((i, h));
            }
        }
    }
    best
}

const SKY_TOP: [f64; 3] = [120.0, 160.0, 225.0];
const SKY_HORIZON: [f64; 3] = [205.0, 220.0, 240.0];
const LIGHT: [f64; 3] = [-0.45, 0.3, 0.84];
const RENDER_RANGE: f64 = 120.0;

/// A generated scene with the geometry needed by analytic oracles.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub scene: Scene,
    pub surfaces: Vec<Surface>,
    /// Index into `surfaces` of the primitive each point was sampled on.
    pub point_surface: Vec<usize>,
    /// Camera center in the LiDAR frame.
    pub camera_center: [f64; 3],
}

impl SyntheticScene {
    /// Surface index visible through each pixel center, `None` for sky.
    pub fn visibility_mask(&self) -> Vec<Option<usize>> {
        let k = &self.scene.intrinsics;
        let rot = self.scene.t_gt.expect("synthetic scenes carry the truth").rotation();
        let mut mask = Vec::with_capacity(k.width * k.height);
        for y in 0..k.height {
            for x in 0..k.width {
                let d = pixel_ray(&rot, k, x as f64 + 0.5, y as f64 + 0.5);
                mask.push(cast(&self.surfaces, self.camera_center, d, RENDER_RANGE).map(|(i, _)| i));
            }
        }
        mask
    }
}

/// Unit LiDAR-frame direction of the camera ray through pixel `(u, v)`.
fn pixel_ray(rot: &[[f64; 3]; 3], k: &CameraIntrinsics, u: f64, v: f64) -> [f64; 3] {
    let c = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
    // Rᵀ maps camera directions into the LiDAR frame
    normalize(std::array::from_fn(|i| (0..3).map(|j| rot[j][i] * c[j]).sum()))
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): Span) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn colors(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    let hue: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..=1.0));
    let high = hue.map(|h| 235.0 * h);
    let low = hue.map(|h| 70.0 * h);
    (high, low)
}

fn surface(rng: &mut ChaCha8Rng, spec: &SceneSpec, shape: Shape, pattern: Pattern) -> Surface {
    let (high_color, low_color) = colors(rng);
    Surface {
        shape,
        pattern,
        high_intensity: uniform(rng, spec.high_intensity),
        low_intensity: uniform(rng, spec.low_intensity),
        high_color,
        low_color,
    }
}

fn random_pattern(rng: &mut ChaCha8Rng, spec: &SceneSpec, allow_solid: bool) -> Pattern {
    let period = uniform(rng, spec.checker_period);
    let phase = rng.random_range(0.0..period);
    match rng.random_range(0..if allow_solid { 4 } else { 3 }) {
        0 => Pattern::Checker { period, phase },
        1 => Pattern::Bands { period, phase },
        2 => Pattern::Stripes { period, phase },
        _ => Pattern::Solid { high: rng.random_bool(0.5) },
    }
}

fn layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Surface> {
    let ground_z = -spec.lidar_height;
    let mut out = Vec::new();
    if spec.ground {
        let pattern = random_pattern(rng, spec, false);
        out.push(surface(rng, spec, Shape::Ground { z: ground_z }, pattern));
    }
    if spec.wall {
        let x = uniform(rng, spec.wall_distance);
        let shape = Shape::Wall {
            x,
            half_width: 60.0,
            z0: ground_z,
            z1: ground_z + 30.0,
        };
        let pattern = random_pattern(rng, spec, false);
        out.push(surface(rng, spec, shape, pattern));
    }
    let n_boxes = rng.random_range(spec.boxes.0..=spec.boxes.1);
    for _ in 0..n_boxes {
        let size: [f64; 3] = std::array::from_fn(|_| uniform(rng, spec.box_size));
        let cx = uniform(rng, spec.object_x);
        let cy = uniform(rng, spec.object_y);
        let shape = Shape::Cuboid {
            min: [cx - size[0] / 2.0, cy - size[1] / 2.0, ground_z],
            max: [cx + size[0] / 2.0, cy + size[1] / 2.0, ground_z + size[2]],
        };
        let pattern = random_pattern(rng, spec, true);
        out.push(surface(rng, spec, shape, pattern));
    }
    let n_poles = rng.random_range(spec.poles.0..=spec.poles.1);
    for _ in 0..n_poles {
        let shape = Shape::Pole {
            center: [uniform(rng, spec.object_x), uniform(rng, spec.object_y)],
            radius: uniform(rng, spec.pole_radius),
            z0: ground_z,
            z1: ground_z + uniform(rng, spec.pole_height),
        };
        let period = uniform(rng, spec.checker_period) * 0.5;
        let pattern = if rng.random_bool(0.7) {
            Pattern::Bands {
                period,
                phase: rng.random_range(0.0..period),
            }
        } else {
            Pattern::Solid { high: rng.random_bool(0.5) }
        };
        out.push(surface(rng, spec, shape, pattern));
    }
    out
}

/// Builds the scene described by `spec`; identical specs give bit-identical
/// scenes.
pub fn generate_scene(spec: &SceneSpec, id: impl Into<String>) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let surfaces = layout(spec, &mut rng);
    generate_with_surfaces(spec, id, surfaces, &mut rng)
}

/// Like [`generate_scene`] but with a caller-provided layout.
pub fn generate_with_surfaces(spec: &SceneSpec, id: impl Into<String>, surfaces: Vec<Surface>, rng: &mut ChaCha8Rng) -> Result<SyntheticScene> {
    if surfaces.is_empty() {
        return Err(Error::Generation("scene needs at least one primitive".into()));
    }
    let k = spec.intrinsics;
    let rot = spec.t_lc.rotation();
    let tr = spec.t_lc.translation();
    let camera_center: [f64; 3] = std::array::from_fn(|i| -(0..3).map(|j| rot[j][i] * tr[j]).sum::<f64>());
    for (name, p) in [("camera", camera_center), ("LiDAR", [0.0; 3])] {
        if let Some(i) = surfaces.iter().position(|s| s.shape.contains(p)) {
            return Err(Error::Generation(format!("{name} center lies inside primitive {i} ({:?})", surfaces[i].shape)));
        }
    }

    let image = render(&surfaces, &k, &rot, camera_center, spec.supersample);

    // LiDAR rays through a margin-enlarged camera frustum
    let margin_u = 0.15 * k.width as f64;
    let margin_v = 0.15 * k.height as f64;
    let mut points = Vec::with_capacity(spec.points);
    let mut point_surface = Vec::with_capacity(spec.points);
    let mut attempts = 0usize;
    while points.len() < spec.points {
        attempts += 1;
        if attempts > spec.points * 1000 {
            return Err(Error::Generation(format!(
                "only {} of {} LiDAR rays hit a surface; scene covers too little of the view",
                points.len(),
                spec.points
            )));
        }
        let u = rng.random_range(-margin_u..k.width as f64 + margin_u);
        let v = rng.random_range(-margin_v..k.height as f64 + margin_v);
        let d = pixel_ray(&rot, &k, u, v);
        let Some((i, hit)) = cast(&surfaces, [0.0; 3], d, spec.max_range) else {
            continue;
        };
        let s = &surfaces[i];
        let base = if s.pattern.is_high(hit.st[0], hit.st[1]) {
            s.high_intensity
        } else {
            s.low_intensity
        };
        let noise = if spec.intensity_noise > 0.0 {
            rng.random_range(-spec.intensity_noise..=spec.intensity_noise)
        } else {
            0.0
        };
        let p = at([0.0; 3], d, hit.t);
        points.push(quantize_point(&LidarPoint::new(p[0], p[1], p[2], (base + noise).clamp(0.0, 255.0))));
        point_surface.push(i);
    }
    Ok(SyntheticScene {
        scene: Scene {
            id: id.into(),
            image,
            cloud: PointCloud::new(points)?,
            intrinsics: k,
            t_gt: Some(spec.t_lc),
        },
        surfaces,
        point_surface,
        camera_center,
    })
}

fn render(surfaces: &[Surface], k: &CameraIntrinsics, rot: &[[f64; 3]; 3], center: [f64; 3], ss: usize) -> RgbImage {
    let light = normalize(LIGHT);
    let mut data = Vec::with_capacity(k.width * k.height * 3);
    for y in 0..k.height {
        for x in 0..k.width {
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let u = x as f64 + (sx as f64 + 0.5) / ss as f64;
                    let v = y as f64 + (sy as f64 + 0.5) / ss as f64;
                    let d = pixel_ray(rot, k, u, v);
                    let c = match cast(surfaces, center, d, RENDER_RANGE) {
                        Some((i, hit)) => {
                            let s = &surfaces[i];
                            let albedo = if s.pattern.is_high(hit.st[0], hit.st[1]) {
                                s.high_color
                            } else {
                                s.low_color
                            };
                            let n = hit.normal;
                            let lambert = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
                            let shade = 0.55 + 0.45 * lambert;
                            albedo.map(|a| a * shade)
                        }
                        None => {
                            let up = d[2].clamp(0.0, 1.0);
                            std::array::from_fn(|i| SKY_HORIZON[i] + (SKY_TOP[i] - SKY_HORIZON[i]) * up)
                        }
                    };
                    for i in 0..3 {
                        acc[i] += c[i];
                    }
                }
            }
            let n = (ss * ss) as f64;
            data.extend(acc.iter().map(|a| (a / n).round().clamp(0.0, 255.0) as u8));
        }
    }
    RgbImage::new(k.width, k.height, data).expect("sized from intrinsics")
}
