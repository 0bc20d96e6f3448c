//! Dataset directories: the synthetic scene layout and KITTI odometry
//! sequences.
//!
//! Synthetic layout, one subdirectory per scene:
//!
//! ```text
//! manifest.txt          scene directory names and generator seeds
//! scene_00000/
//!     image.ppm         binary PPM (P6)
//!     cloud.bin         KITTI velodyne format
//!     intrinsics.txt    fx, fy, cx, cy, width, height as key = value
//!     extrinsic_gt.txt  12 numbers, row-major 3×4 LiDAR-to-camera
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::datagen::Scene;
use crate::error::{Error, Result};
use crate::formats::{read_kitti_cloud, write_kitti_cloud, RgbImage};
use crate::geometry::{CameraIntrinsics, SE3Transform};

pub const MANIFEST: &str = "manifest.txt";
pub const IMAGE_FILE: &str = "image.ppm";
pub const CLOUD_FILE: &str = "cloud.bin";
pub const INTRINSICS_FILE: &str = "intrinsics.txt";
pub const EXTRINSIC_FILE: &str = "extrinsic_gt.txt";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads the first non-empty, non-comment line of an extrinsic file.
pub fn read_extrinsic(path: &Path) -> Result<SE3Transform> {
    let text = read_text(path)?;
    let (n, line) = text
        .lines()
        .enumerate()
        .find(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .ok_or_else(|| Error::parse(path.display(), "no extrinsic line"))?;
    SE3Transform::parse_kitti_line(line, &format!("{}:{}", path.display(), n + 1))
}

pub fn write_extrinsic(path: &Path, t: &SE3Transform) -> Result<()> {
    write_text(path, &format!("{}\n", t.to_kitti_line()))
}

pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scene.image.write_ppm(&dir.join(IMAGE_FILE))?;
    write_kitti_cloud(&scene.cloud, &dir.join(CLOUD_FILE))?;
    write_text(&dir.join(INTRINSICS_FILE), &scene.intrinsics.to_kv())?;
    if let Some(t) = &scene.t_gt {
        write_extrinsic(&dir.join(EXTRINSIC_FILE), t)?;
    }
    Ok(())
}

/// Reads one scene directory. The ground-truth extrinsic is optional.
pub fn read_scene(dir: &Path) -> Result<Scene> {
    let image = RgbImage::read_ppm(&dir.join(IMAGE_FILE))?;
    let cloud = read_kitti_cloud(&dir.join(CLOUD_FILE))?;
    let kpath = dir.join(INTRINSICS_FILE);
    let intrinsics = CameraIntrinsics::parse_kv(&read_text(&kpath)?, &kpath.display().to_string())?;
    if (image.width(), image.height()) != (intrinsics.width, intrinsics.height) {
        return Err(Error::Dataset(format!(
            "{}: image is {}x{} but intrinsics say {}x{}",
            dir.display(),
            image.width(),
            image.height(),
            intrinsics.width,
            intrinsics.height
        )));
    }
    let epath = dir.join(EXTRINSIC_FILE);
    let t_gt = if epath.exists() { Some(read_extrinsic(&epath)?) } else { None };
    let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Scene {
        id,
        image,
        cloud,
        intrinsics,
        t_gt,
    })
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
}

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = format!("# scenes: {}\n", entries.len());
    for e in entries {
        text.push_str(&format!("{} {}\n", e.name, e.seed));
    }
    write_text(&dir.join(MANIFEST), &text)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = read_text(&path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(name), Some(seed), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::parse(format!("{}:{}", path.display(), n + 1), "expected `<scene> <seed>`"));
        };
        let seed = seed
            .parse()
            .map_err(|_| Error::parse(format!("{}:{}", path.display(), n + 1), format!("bad seed {seed:?}")))?;
        out.push(ManifestEntry { name: name.to_owned(), seed });
    }
    Ok(out)
}

/// Scene directories of a dataset: the manifest order when a manifest
/// exists, otherwise every subdirectory holding a cloud, sorted by name.
pub fn scene_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(MANIFEST).exists() {
        return Ok(read_manifest(dir)?.into_iter().map(|e| dir.join(e.name)).collect());
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CLOUD_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Dataset(format!("{} contains no scenes", dir.display())));
    }
    Ok(dirs)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    scene_dirs(dir)?.iter().map(|d| read_scene(d)).collect()
}

/// Numbers following `key:` in a KITTI calibration file.
fn calib_entry(text: &str, key: &str, origin: &str) -> Result<[f64; 12]> {
    let line = text
        .lines()
        .find_map(|l| {
            let (k, rest) = l.split_once(':')?;
            (k.trim() == key).then_some(rest)
        })
        .ok_or_else(|| Error::parse(origin, format!("missing calibration key {key}")))?;
    let nums: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::parse(origin, format!("{key}: bad number {t:?}"))))
        .collect::<Result<_>>()?;
    nums.try_into()
        .map_err(|v: Vec<f64>| Error::parse(origin, format!("{key}: expected 12 numbers, found {}", v.len())))
}

/// Camera model and LiDAR-to-camera extrinsic of one KITTI camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KittiCalib {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Maps LiDAR points into the frame of the chosen camera, including that
    /// camera's baseline from the reference camera.
    pub t_lc: SE3Transform,
}

/// Parses `P{camera}` and `Tr` from a KITTI odometry `calib.txt`.
pub fn parse_kitti_calib(text: &str, camera: u8, origin: &str) -> Result<KittiCalib> {
    let p = calib_entry(text, &format!("P{camera}"), origin)?;
    let tr = calib_entry(text, "Tr", origin)?;
    let (fx, fy, cx, cy) = (p[0], p[5], p[2], p[6]);
    if !(fx > 0.0 && fy > 0.0) {
        return Err(Error::parse(origin, format!("P{camera} has non-positive focal length")));
    }
    // P = K·[I | b]; the baseline b moves the reference camera frame into
    // this camera's frame
    let bz = p[11];
    let bx = (p[3] - cx * bz) / fx;
    let by = (p[7] - cy * bz) / fy;
    let offset = SE3Transform::from_parts([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [bx, by, bz])?;
    let tr = SE3Transform::from_rows_3x4(&tr, 1e-3).map_err(|e| Error::parse(origin, format!("Tr: {e}")))?;
    Ok(KittiCalib {
        fx,
        fy,
        cx,
        cy,
        t_lc: offset.compose(&tr),
    })
}

/// Lazily loaded frames of a KITTI odometry sequence directory holding
/// `velodyne/`, `image_{camera}/` and `calib.txt`.
pub struct KittiSequence {
    calib: KittiCalib,
    image_dir: PathBuf,
    frames: std::vec::IntoIter<PathBuf>,
}

impl KittiSequence {
    pub fn open(dir: &Path, camera: u8) -> Result<Self> {
        let calib_path = dir.join("calib.txt");
        let calib = parse_kitti_calib(&read_text(&calib_path)?, camera, &calib_path.display().to_string())?;
        let velo = dir.join("velodyne");
        let mut frames: Vec<PathBuf> = fs::read_dir(&velo)
            .map_err(|e| Error::io(&velo, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        frames.sort();
        Ok(Self {
            calib,
            image_dir: dir.join(format!("image_{camera}")),
            frames: frames.into_iter(),
        })
    }

    pub fn calib(&self) -> &KittiCalib {
        &self.calib
    }

    fn load(&self, cloud_path: &Path) -> Result<Scene> {
        let stem = cloud_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let cloud = read_kitti_cloud(cloud_path)?;
        let image = RgbImage::read_png(&self.image_dir.join(format!("{stem}.png")))?;
        let c = &self.calib;
        let intrinsics = CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy, image.width(), image.height())?;
        Ok(Scene {
            id: stem,
            image,
            cloud,
            intrinsics,
            t_gt: Some(c.t_lc),
        })
    }
}

impl Iterator for KittiSequence {
    type Item = Result<Scene>;

    fn next(&mut self) -> Option<Self::Item> {
        let path = self.frames.next()?;
        Some(self.load(&path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const IDENTITY_TR: &str = "Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n";

    #[test]
    fn identity_tr_gives_identity() {
        let text = format!("P0: 700 0 600 0 0 700 180 0 0 0 1 0\nP2: 700 0 600 0 0 700 180 0 0 0 1 0\n{IDENTITY_TR}");
        let c = parse_kitti_calib(&text, 2, "calib.txt").unwrap();
        assert_eq!(c.t_lc, SE3Transform::identity());
        assert_eq!((c.fx, c.fy, c.cx, c.cy), (700.0, 700.0, 600.0, 180.0));
    }

    #[test]
    fn missing_key_is_named() {
        let err = parse_kitti_calib(IDENTITY_TR, 2, "calib.txt").unwrap_err().to_string();
        assert!(err.contains("P2"), "{err}");
        let err = parse_kitti_calib("P2: 1 0 1 0 0 1 1 0 0 0 1 0\n", 2, "calib.txt").unwrap_err().to_string();
        assert!(err.contains("Tr"), "{err}");
    }

    #[test]
    fn camera_baseline_is_applied() {
        // P2 of KITTI sequence 00: 44.857 / 718.856 ≈ 0.0624 m baseline
        let text = format!("P2: 718.856 0 607.1928 44.85728 0 718.856 185.2157 0.2163791 0 0 1 0.002745884\n{IDENTITY_TR}");
        let c = parse_kitti_calib(&text, 2, "calib.txt").unwrap();
        let t = c.t_lc.translation();
        let bz = 0.002745884;
        assert!((t[2] - bz).abs() < 1e-15);
        assert!((t[0] - (44.85728 - 607.1928 * bz) / 718.856).abs() < 1e-15);
        assert!((t[1] - (0.2163791 - 185.2157 * bz) / 718.856).abs() < 1e-15);
    }
}
