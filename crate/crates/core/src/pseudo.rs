//! The 7-channel network input and the per-point supervision labels.

use crate::formats::RgbImage;
use crate::geometry::{project_points, CameraIntrinsics, PointCloud, SE3Transform};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 7;

/// Default intensity thresholds on the 0..=255 scale.
pub const KITTI_THRESHOLD: f64 = 30.0;
pub const MTADV_THRESHOLD: f64 = 10.0;

/// Channel-major `7×H×W` grid: r, g, b in `[0, 1]`, then camera-frame x, y, z
/// in meters and raw intensity. LiDAR channels are 0 where no point lands.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl PseudoImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    /// `[1, 7, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, CHANNELS, self.height, self.width], self.data.clone()).expect("pseudo-image shape")
    }

    /// Number of cells holding a LiDAR point.
    pub fn occupied_cells(&self) -> usize {
        let plane = self.width * self.height;
        // occupied cells always have depth above the near plane
        self.data[5 * plane..6 * plane].iter().filter(|&&z| z != 0.0).count()
    }
}

/// Rasterizes `cloud` under `t_init` on top of `image`.
///
/// A valid point lands in the pixel containing its continuous projection.
/// When several points share a pixel the one with the smallest camera depth
/// wins; equal depths keep the lower point index.
pub fn build_pseudo_image(image: &RgbImage, cloud: &PointCloud, k: &CameraIntrinsics, t_init: &SE3Transform) -> PseudoImage {
    let (w, h) = (k.width, k.height);
    debug_assert_eq!((image.width(), image.height()), (w, h));
    let plane = w * h;
    let mut data = vec![0f32; CHANNELS * plane];
    for (i, px) in image.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    let projections = project_points(cloud, t_init, k);
    let mut nearest: Vec<Option<(f64, usize)>> = vec![None; plane];
    for (idx, p) in projections.iter().enumerate() {
        if !p.valid {
            continue;
        }
        let cell = p.v.floor() as usize * w + p.u.floor() as usize;
        match nearest[cell] {
            Some((z, _)) if z <= p.cam[2] => {}
            _ => nearest[cell] = Some((p.cam[2], idx)),
        }
    }
    for (cell, hit) in nearest.iter().enumerate() {
        if let Some((_, idx)) = *hit {
            let cam = projections[idx].cam;
            data[3 * plane + cell] = cam[0] as f32;
            data[4 * plane + cell] = cam[1] as f32;
            data[5 * plane + cell] = cam[2] as f32;
            data[6 * plane + cell] = cloud.points()[idx].intensity as f32;
        }
    }
    PseudoImage {
        width: w,
        height: h,
        data,
    }
}

/// 1 where intensity is strictly greater than `threshold`.
pub fn binarize_intensity(cloud: &PointCloud, threshold: f64) -> Vec<u8> {
    cloud.points().iter().map(|p| u8::from(p.intensity > threshold)).collect()
}

/// Per-point targets for both loss branches, indexed like the cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointLabels {
    pub binary_intensity: Vec<u8>,
    /// Camera depth under the true extrinsic, meters.
    pub gt_depth: Vec<f64>,
    /// Continuous `(u, v)` under the true extrinsic.
    pub gt_pixel: Vec<[f64; 2]>,
    pub valid_gt: Vec<bool>,
}

impl PointLabels {
    pub fn valid_count(&self) -> usize {
        self.valid_gt.iter().filter(|&&v| v).count()
    }
}

pub fn make_labels(cloud: &PointCloud, k: &CameraIntrinsics, t_gt: &SE3Transform, threshold: f64) -> PointLabels {
    let proj = project_points(cloud, t_gt, k);
    PointLabels {
        binary_intensity: binarize_intensity(cloud, threshold),
        gt_depth: proj.iter().map(|p| p.cam[2]).collect(),
        gt_pixel: proj.iter().map(|p| [p.u, p.v]).collect(),
        valid_gt: proj.iter().map(|p| p.valid).collect(),
    }
}

/// One training or inference unit.
#[derive(Debug, Clone)]
pub struct CalibSample {
    pub id: String,
    pub image: RgbImage,
    pub cloud: PointCloud,
    pub intrinsics: CameraIntrinsics,
    pub t_gt: SE3Transform,
    pub t_init: SE3Transform,
    pub labels: PointLabels,
}

impl CalibSample {
    pub fn new(
        id: impl Into<String>,
        image: RgbImage,
        cloud: PointCloud,
        intrinsics: CameraIntrinsics,
        t_gt: SE3Transform,
        t_init: SE3Transform,
        threshold: f64,
    ) -> Self {
        let labels = make_labels(&cloud, &intrinsics, &t_gt, threshold);
        Self {
            id: id.into(),
            image,
            cloud,
            intrinsics,
            t_gt,
            t_init,
            labels,
        }
    }

    pub fn pseudo_image(&self) -> PseudoImage {
        build_pseudo_image(&self.image, &self.cloud, &self.intrinsics, &self.t_init)
    }
}
