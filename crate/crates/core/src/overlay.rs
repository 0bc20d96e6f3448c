//! Projection overlays: LiDAR points drawn over the camera image, colored by
//! intensity.

use crate::formats::RgbImage;
use crate::geometry::{project_points, CameraIntrinsics, PointCloud, SE3Transform};

/// 256-entry jet colormap, dark blue through cyan, yellow and red. Entry `i`
/// has channels `round(255 · clamp(1.5 − |4t − c|, 0, 1))` with `t = i / 255`
/// and `c` = 3, 2, 1 for red, green and blue.
pub fn jet_colormap() -> [[u8; 3]; 256] {
    std::array::from_fn(|i| {
        let t = i as f64 / 255.0;
        let ch = |c: f64| (255.0 * (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0)).round() as u8;
        [ch(3.0), ch(2.0), ch(1.0)]
    })
}

/// Colormap index of a reflectance on the 0–255 scale.
pub fn intensity_index(intensity: f64) -> u8 {
    intensity.clamp(0.0, 255.0).round() as u8
}

/// Draws every point that projects into the image under `extrinsic` as a
/// `splat × splat` square. Far points are drawn first so near points stay
/// on top; equal depths keep cloud order.
pub fn render_overlay(image: &RgbImage, cloud: &PointCloud, k: &CameraIntrinsics, extrinsic: &SE3Transform, splat: usize) -> RgbImage {
    let mut out = image.clone();
    let cmap = jet_colormap();
    let proj = project_points(cloud, extrinsic, k);
    let mut order: Vec<usize> = (0..proj.len()).filter(|&i| proj[i].valid).collect();
    order.sort_by(|&a, &b| proj[b].cam[2].total_cmp(&proj[a].cam[2]).then(a.cmp(&b)));
    let splat = splat.max(1) as isize;
    let lo = -(splat - 1) / 2;
    for i in order {
        let color = cmap[intensity_index(cloud.points()[i].intensity) as usize];
        let (x0, y0) = (proj[i].u.floor() as isize, proj[i].v.floor() as isize);
        for dy in lo..lo + splat {
            for dx in lo..lo + splat {
                let (x, y) = (x0 + dx, y0 + dy);
                if x >= 0 && y >= 0 && (x as usize) < k.width && (y as usize) < k.height {
                    out.set_pixel(x as usize, y as usize, color);
                }
            }
        }
    }
    out
}
