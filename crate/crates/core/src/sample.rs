//! One calibrated frame and its on-disk container.
//!
//! A sample directory holds raw little-endian arrays plus a JSON sidecar:
//!
//! ```text
//! <sample>/image.f32    H×W×3 colors in [0, 1]
//! <sample>/points.f32   N×4 (x, y, z, intensity) or N×3 without intensity
//! <sample>/labels.i32   N class ids, -1 = ignore
//! <sample>/uv.f32       N×2 continuous pixel coordinates
//! <sample>/meta.json    shapes, domain id, frame id, camera model
//! ```

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{CameraModel, PointCloud};

/// Label value excluded from every loss and metric.
pub const IGNORE: i32 = -1;

/// Channels-last RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 3] }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mean_intensity(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub domain: String,
    pub frame_id: u64,
}

/// Image, point cloud, per-point labels and point→pixel coordinates of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub cloud: PointCloud,
    pub labels: Vec<i32>,
    pub pixel_uv: Vec<[f64; 2]>,
    pub camera: CameraModel,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    /// Stable identifier, also used as the directory name.
    pub fn key(&self) -> String {
        sample_key(&self.meta.domain, self.meta.frame_id)
    }

    pub fn check_consistent(&self) -> bool {
        self.labels.len() == self.cloud.len() && self.pixel_uv.len() == self.cloud.len()
    }
}

pub fn sample_key(domain: &str, frame_id: u64) -> String {
    format!("{domain}_{frame_id:06}")
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shapes: Shapes,
    domain: String,
    frame_id: u64,
    camera: CameraModel,
}

#[derive(Debug, Serialize, Deserialize)]
struct Shapes {
    image: [usize; 3],
    points: [usize; 2],
    labels: [usize; 1],
    uv: [usize; 2],
}

pub fn write_f32(path: &Path, values: impl IntoIterator<Item = f32>) -> io::Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes)
}

pub fn write_i32(path: &Path, values: &[i32]) -> io::Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)
}

pub fn read_f32(path: &Path) -> io::Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(invalid(format!("{}: length not a multiple of 4", path.display())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn read_i32(path: &Path) -> io::Result<Vec<i32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(invalid(format!("{}: length not a multiple of 4", path.display())));
    }
    Ok(bytes.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn invalid(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

/// Writes the sample into `dir` (created if missing).
pub fn write_sample(sample: &Sample, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let n = sample.len();
    let (h, w) = (sample.image.height, sample.image.width);
    write_f32(&dir.join("image.f32"), sample.image.data.iter().copied())?;
    let point_cols = if sample.cloud.intensity.is_some() { 4 } else { 3 };
    let mut pts = Vec::with_capacity(n * point_cols);
    for (i, p) in sample.cloud.coords.iter().enumerate() {
        pts.extend(p.iter().map(|&v| v as f32));
        if let Some(int) = &sample.cloud.intensity {
            pts.push(int[i] as f32);
        }
    }
    write_f32(&dir.join("points.f32"), pts)?;
    write_i32(&dir.join("labels.i32"), &sample.labels)?;
    write_f32(&dir.join("uv.f32"), sample.pixel_uv.iter().flat_map(|uv| uv.map(|v| v as f32)))?;
    let sidecar = Sidecar {
        shapes: Shapes { image: [h, w, 3], points: [n, point_cols], labels: [n], uv: [n, 2] },
        domain: sample.meta.domain.clone(),
        frame_id: sample.meta.frame_id,
        camera: sample.camera.clone(),
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| invalid(e.to_string()))?;
    fs::write(dir.join("meta.json"), json + "\n")
}

pub fn read_sample(dir: &Path) -> io::Result<Sample> {
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)
        .map_err(|e| invalid(format!("{}: {e}", dir.display())))?;
    let s = &sidecar.shapes;
    let image = read_f32(&dir.join("image.f32"))?;
    let pts = read_f32(&dir.join("points.f32"))?;
    let labels = read_i32(&dir.join("labels.i32"))?;
    let uv = read_f32(&dir.join("uv.f32"))?;
    let n = s.labels[0];
    if image.len() != s.image.iter().product::<usize>()
        || pts.len() != s.points[0] * s.points[1]
        || labels.len() != n
        || uv.len() != n * 2
        || s.points[0] != n
        || !(3..=4).contains(&s.points[1])
    {
        return Err(invalid(format!("{}: array sizes disagree with meta.json", dir.display())));
    }
    let cols = s.points[1];
    let coords = pts.chunks_exact(cols).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
    let intensity = (cols == 4).then(|| pts.chunks_exact(4).map(|c| c[3] as f64).collect());
    Ok(Sample {
        image: Image { height: s.image[0], width: s.image[1], data: image },
        cloud: PointCloud { coords, intensity },
        labels,
        pixel_uv: uv.chunks_exact(2).map(|c| [c[0] as f64, c[1] as f64]).collect(),
        camera: sidecar.camera,
        meta: SampleMeta { domain: sidecar.domain, frame_id: sidecar.frame_id },
    })
}
