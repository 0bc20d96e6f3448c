//! On-disk formats: binary PPM images, KITTI velodyne clouds, PNG input.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{LidarPoint, PointCloud};

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "RGB buffer of {} bytes does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary `P6` encoding with maxval 255.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else if bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::parse(origin, "truncated PPM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if fields[0] != "P6" {
            return Err(Error::parse(origin, format!("expected P6 magic, found {:?}", fields[0])));
        }
        let num = |i: usize, what: &str| -> Result<usize> {
            fields[i]
                .parse()
                .map_err(|_| Error::parse(origin, format!("bad PPM {what} {:?}", fields[i])))
        };
        let (w, h, maxval) = (num(1, "width")?, num(2, "height")?, num(3, "maxval")?);
        if maxval != 255 {
            return Err(Error::parse(origin, format!("only maxval 255 is supported, found {maxval}")));
        }
        let need = w * h * 3;
        let raster = bytes.get(pos..).unwrap_or_default();
        if raster.len() != need {
            return Err(Error::parse(
                origin,
                format!("expected {need} raster bytes for {w}x{h}, found {}", raster.len()),
            ));
        }
        Self::new(w, h, raster.to_vec()).map_err(|e| Error::parse(origin, e.to_string()))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes, &path.display().to_string())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    /// Reads any 8-bit image the `image` crate understands (PNG for KITTI).
    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::parse(path.display(), e.to_string()))?
            .into_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }
}

/// Decodes KITTI velodyne bytes: consecutive little-endian `f32` quadruples
/// `(x, y, z, reflectance)` with reflectance in `[0, 1]`, rescaled to the
/// 0..=255 intensity convention.
pub fn decode_kitti_cloud(bytes: &[u8], origin: &str) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        let offset = bytes.len() - bytes.len() % 16;
        return Err(Error::parse(
            origin,
            format!("incomplete point record at byte offset {offset} (file length {})", bytes.len()),
        ));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]) as f64;
            LidarPoint::new(f(0), f(4), f(8), f(12) * 255.0)
        })
        .collect();
    PointCloud::new(points).map_err(|e| Error::parse(origin, e.to_string()))
}

/// Inverse of [`decode_kitti_cloud`]. Values are stored as `f32`; reflectance
/// is `intensity / 255`.
pub fn encode_kitti_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in cloud.points() {
        for v in [p.x as f32, p.y as f32, p.z as f32, (p.intensity / 255.0) as f32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_kitti_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_kitti_cloud(&bytes, &path.display().to_string())
}

pub fn write_kitti_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    std::fs::write(path, encode_kitti_cloud(cloud)).map_err(|e| Error::io(path, e))
}

/// Rounds a point to the values a KITTI file round trip reproduces.
pub fn quantize_point(p: &LidarPoint) -> LidarPoint {
    LidarPoint::new(
        p.x as f32 as f64,
        p.y as f32 as f64,
        p.z as f32 as f64,
        ((p.intensity / 255.0) as f32) as f64 * 255.0,
    )
}
