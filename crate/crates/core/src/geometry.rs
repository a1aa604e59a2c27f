//! Camera projection, field-of-view filtering, voxelization and 2D feature lifting.
//!
//! These operations couple the image stream and the point stream point for
//! point: after [`fov_filter`], row `i` of the lifted image features and row
//! `i` of the point features describe the same 3D point.
//!
//! Pixel convention: pixel `(row, col)` covers the half-open square
//! `[col, col + 1) × [row, row + 1)` in continuous `(u, v)` coordinates, so the
//! pixel holding a projected coordinate is `(floor(v), floor(u))`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sample::Sample;
use crate::tensor::{Mat, Real};

/// Default voxel edge length in meters.
pub const DEFAULT_VOXEL_SIZE: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("no point of the frame lies inside the camera field of view")]
    EmptyFov,
    #[error("voxel resolution must be positive, got {0}")]
    InvalidResolution(f64),
    #[error("pixel coordinate ({u}, {v}) lies outside the {height}x{width} feature map")]
    OutOfBounds { u: f64, v: f64, height: usize, width: usize },
    #[error("feature map has {got} values, expected {expected}")]
    FeatureMapSize { got: usize, expected: usize },
}

/// Pinhole camera with a rigid world→camera transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Row-major 3×3 intrinsic matrix `[[fx, s, cx], [0, fy, cy], [0, 0, 1]]`.
    pub intrinsics: [[f64; 3]; 3],
    /// Rotation taking world coordinates to camera coordinates.
    pub rotation: [[f64; 3]; 3],
    /// Translation (meters) applied after the rotation.
    pub translation: [f64; 3],
    /// Image size as `(height, width)` in pixels.
    pub image_size: (usize, usize),
}

impl CameraModel {
    /// Camera with identity extrinsics.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, height: usize, width: usize) -> Self {
        Self {
            intrinsics: [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]],
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            image_size: (height, width),
        }
    }

    pub fn height(&self) -> usize {
        self.image_size.0
    }

    pub fn width(&self) -> usize {
        self.image_size.1
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let k = &self.intrinsics;
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(GeometryError::InvalidCamera("empty image".into()));
        }
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(0.0..=w as f64).contains(&k[0][2]) || !(0.0..=h as f64).contains(&k[1][2]) {
            return Err(GeometryError::InvalidCamera("principal point outside the image".into()));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|m| r[i][m] * r[j][m]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(GeometryError::InvalidCamera("rotation is not orthonormal".into()));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(GeometryError::InvalidCamera("rotation determinant is not +1".into()));
        }
        if self.intrinsics.iter().flatten().chain(self.rotation.iter().flatten()).chain(&self.translation).any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite parameter".into()));
        }
        Ok(())
    }

    /// World point expressed in camera coordinates.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Camera center in world coordinates (`-Rᵀ t`).
    pub fn center(&self) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        let mut c = [0.0; 3];
        for (j, cj) in c.iter_mut().enumerate() {
            *cj = -(r[0][j] * t[0] + r[1][j] * t[1] + r[2][j] * t[2]);
        }
        c
    }

    /// Unit-free world-space direction of the ray through continuous pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> [f64; 3] {
        let k = &self.intrinsics;
        // Invert the upper-triangular intrinsics.
        let y = (v - k[1][2]) / k[1][1];
        let x = (u - k[0][2] - k[0][1] * y) / k[0][0];
        let d_cam = [x, y, 1.0];
        let r = &self.rotation;
        let mut d = [0.0; 3];
        for (j, dj) in d.iter_mut().enumerate() {
            *dj = r[0][j] * d_cam[0] + r[1][j] * d_cam[1] + r[2][j] * d_cam[2];
        }
        d
    }
}

/// Point positions (meters) with optional per-point intensity in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub coords: Vec<[f64; 3]>,
    pub intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>) -> Self {
        Self { coords, intensity: None }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().flatten().all(|v| v.is_finite())
    }

    /// Keeps the points selected by `keep`, preserving relative order.
    pub fn select(&self, keep: &[bool]) -> Self {
        let coords = self.coords.iter().zip(keep).filter(|(_, &k)| k).map(|(c, _)| *c).collect();
        let intensity = self
            .intensity
            .as_ref()
            .map(|int| int.iter().zip(keep).filter(|(_, &k)| k).map(|(v, _)| *v).collect());
        Self { coords, intensity }
    }
}

/// Result of [`project_points`].
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Continuous `(u, v)` pixel coordinates, present only for in-FoV points.
    pub pixel_uv: Vec<Option<[f64; 2]>>,
    /// Depth along the optical axis (camera z).
    pub depth: Vec<f64>,
    pub in_fov: Vec<bool>,
}

/// Projects every point through the pinhole camera.
///
/// A point is in the field of view iff its depth is positive and its
/// projection satisfies `0 <= u < W` and `0 <= v < H`.
pub fn project_points(cloud: &PointCloud, cam: &CameraModel) -> Projection {
    let (h, w) = cam.image_size;
    let k = &cam.intrinsics;
    let n = cloud.len();
    let mut pixel_uv = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    let mut in_fov = Vec::with_capacity(n);
    for &p in &cloud.coords {
        let pc = cam.to_camera(p);
        let hx = k[0][0] * pc[0] + k[0][1] * pc[1] + k[0][2] * pc[2];
        let hy = k[1][0] * pc[0] + k[1][1] * pc[1] + k[1][2] * pc[2];
        let hz = k[2][0] * pc[0] + k[2][1] * pc[1] + k[2][2] * pc[2];
        depth.push(pc[2]);
        let inside = if pc[2] > 0.0 {
            let (u, v) = (hx / hz, hy / hz);
            (0.0..w as f64).contains(&u) && (0.0..h as f64).contains(&v)
        } else {
            false
        };
        pixel_uv.push(inside.then(|| [hx / hz, hy / hz]));
        in_fov.push(inside);
    }
    Projection { pixel_uv, depth, in_fov }
}

/// Keeps exactly the points that project into the image, in original order.
pub fn fov_filter(sample: &Sample) -> Result<Sample, GeometryError> {
    sample.camera.validate()?;
    let proj = project_points(&sample.cloud, &sample.camera);
    if !proj.in_fov.iter().any(|&k| k) {
        return Err(GeometryError::EmptyFov);
    }
    let keep = &proj.in_fov;
    let mut out = sample.clone();
    out.cloud = sample.cloud.select(keep);
    out.labels = sample.labels.iter().zip(keep).filter(|(_, &k)| k).map(|(l, _)| *l).collect();
    out.pixel_uv = proj.pixel_uv.into_iter().flatten().collect();
    Ok(out)
}

/// Integer voxel coordinate of a point: componentwise mathematical floor.
#[inline]
pub fn voxel_coord(p: [f64; 3], resolution: f64) -> [i64; 3] {
    [
        (p[0] / resolution).floor() as i64,
        (p[1] / resolution).floor() as i64,
        (p[2] / resolution).floor() as i64,
    ]
}

/// Sparse voxel hash: occupied cell → indices of the points inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub resolution: f64,
    pub cells: BTreeMap<[i64; 3], Vec<usize>>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Cell of every point, in point order.
    pub fn point_cells(&self, n_points: usize) -> Vec<[i64; 3]> {
        let mut out = vec![[0; 3]; n_points];
        for (cell, idx) in &self.cells {
            for &i in idx {
                out[i] = *cell;
            }
        }
        out
    }
}

pub fn voxelize(cloud: &PointCloud, resolution: f64) -> Result<VoxelGrid, GeometryError> {
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(GeometryError::InvalidResolution(resolution));
    }
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, &p) in cloud.coords.iter().enumerate() {
        cells.entry(voxel_coord(p, resolution)).or_default().push(i);
    }
    Ok(VoxelGrid { resolution, cells })
}

/// Flat `row * width + col` index of the pixel containing `(u, v)`.
#[inline]
pub fn pixel_index(uv: [f64; 2], height: usize, width: usize) -> Result<usize, GeometryError> {
    let [u, v] = uv;
    if !(u >= 0.0 && u < width as f64 && v >= 0.0 && v < height as f64) {
        return Err(GeometryError::OutOfBounds { u, v, height, width });
    }
    Ok(v.floor() as usize * width + u.floor() as usize)
}

/// Gathers one feature row per point from a channels-last `H×W×F` map.
pub fn lift_2d_features<T: Real>(
    feature_map: &[T],
    height: usize,
    width: usize,
    channels: usize,
    pixel_uv: &[[f64; 2]],
) -> Result<Mat<T>, GeometryError> {
    let expected = height * width * channels;
    if feature_map.len() != expected {
        return Err(GeometryError::FeatureMapSize { got: feature_map.len(), expected });
    }
    let mut out = Mat::zeros(pixel_uv.len(), channels);
    for (i, &uv) in pixel_uv.iter().enumerate() {
        let p = pixel_index(uv, height, width)?;
        out.row_mut(i).copy_from_slice(&feature_map[p * channels..(p + 1) * channels]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::{Image, SampleMeta};
    use rand::{Rng, SeedableRng};

    fn cam() -> CameraModel {
        CameraModel::pinhole(50.0, 50.0, 32.0, 24.0, 48, 64)
    }

    fn sample_with(coords: Vec<[f64; 3]>) -> Sample {
        let n = coords.len();
        Sample {
            image: Image::new(48, 64),
            cloud: PointCloud::new(coords),
            labels: (0..n as i32).collect(),
            pixel_uv: vec![[0.0, 0.0]; n],
            camera: cam(),
            meta: SampleMeta { domain: "test".into(), frame_id: 0 },
        }
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let p = project_points(&PointCloud::new(vec![[0.0, 0.0, 2.0]]), &cam());
        assert_eq!(p.pixel_uv[0], Some([32.0, 24.0]));
        assert_eq!(p.depth[0], 2.0);
        assert!(p.in_fov[0]);
    }

    #[test]
    fn point_behind_camera_is_flagged() {
        let p = project_points(&PointCloud::new(vec![[0.0, 0.0, -1.0]]), &cam());
        assert!(!p.in_fov[0]);
        assert_eq!(p.pixel_uv[0], None);
    }

    #[test]
    fn image_boundary_is_half_open() {
        // u = fx * x / z + cx = 64 exactly at x = 0.64, z = 1.
        let p = project_points(&PointCloud::new(vec![[0.64, 0.0, 1.0], [-0.64, 0.0, 1.0]]), &cam());
        assert!(!p.in_fov[0]);
        assert!(p.in_fov[1]);
    }

    #[test]
    fn random_projection_matches_scalar_pinhole() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = 0.3f64;
        let mut c = cam();
        c.rotation = [[a.cos(), 0.0, a.sin()], [0.0, 1.0, 0.0], [-a.sin(), 0.0, a.cos()]];
        c.translation = [0.1, -0.2, 0.5];
        c.intrinsics[0][1] = 0.7;
        let pts: Vec<[f64; 3]> =
            (0..50).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..6.0)]).collect();
        let proj = project_points(&PointCloud::new(pts.clone()), &c);
        for (i, p) in pts.iter().enumerate() {
            let r = &c.rotation;
            let t = &c.translation;
            let xc = r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0];
            let yc = r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1];
            let zc = r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2];
            let u = (50.0 * xc + 0.7 * yc + 32.0 * zc) / zc;
            let v = (50.0 * yc + 24.0 * zc) / zc;
            let inside = zc > 0.0 && (0.0..64.0).contains(&u) && (0.0..48.0).contains(&v);
            assert_eq!(proj.in_fov[i], inside);
            if inside {
                let [pu, pv] = proj.pixel_uv[i].unwrap();
                assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_cameras_are_rejected() {
        let mut c = cam();
        c.intrinsics[0][0] = 0.0;
        assert!(c.validate().is_err());
        let mut c = cam();
        c.rotation[0][0] = -1.0;
        assert!(c.validate().is_err());
        let mut c = cam();
        c.intrinsics[0][2] = 100.0;
        assert!(c.validate().is_err());
        assert!(cam().validate().is_ok());
    }

    #[test]
    fn fov_filter_identity_when_all_visible() {
        let s = sample_with(vec![[0.0, 0.0, 1.0], [0.1, 0.1, 2.0]]);
        let f = fov_filter(&s).unwrap();
        assert_eq!(f.cloud, s.cloud);
        assert_eq!(f.labels, s.labels);
        assert_eq!(f.pixel_uv, vec![[32.0, 24.0], [34.5, 26.5]]);
    }

    #[test]
    fn fov_filter_drops_points_behind_camera() {
        let coords: Vec<[f64; 3]> =
            (0..10).map(|i| [0.01 * i as f64, 0.0, if i % 2 == 0 { 1.0 } else { -1.0 }]).collect();
        let f = fov_filter(&sample_with(coords)).unwrap();
        assert_eq!(f.labels, vec![0, 2, 4, 6, 8]);
        assert_eq!(f.cloud.len(), 5);
    }

    #[test]
    fn fov_filter_errors_when_nothing_visible() {
        let s = sample_with(vec![[0.0, 0.0, -1.0], [1.0, 0.0, -3.0]]);
        assert_eq!(fov_filter(&s), Err(GeometryError::EmptyFov));
    }

    #[test]
    fn voxel_floor_semantics() {
        let cloud = PointCloud::new(vec![[0.01, 0.01, 0.01], [0.04, 0.04, 0.04], [-0.01, 0.0, 0.0]]);
        let g = voxelize(&cloud, 0.05).unwrap();
        assert_eq!(g.cells[&[0, 0, 0]], vec![0, 1]);
        assert_eq!(g.cells[&[-1, 0, 0]], vec![2]);
        assert_eq!(voxelize(&cloud, 0.0), Err(GeometryError::InvalidResolution(0.0)));
        assert!(voxelize(&cloud, -1.0).is_err());
    }

    #[test]
    fn lifting_checks_bounds_and_gathers() {
        let map: Vec<f64> = (0..2 * 3 * 2).map(|v| v as f64).collect();
        let out = lift_2d_features(&map, 2, 3, 2, &[[0.0, 0.0], [2.0, 1.0], [1.7, 0.2]]).unwrap();
        assert_eq!(out.data, vec![0.0, 1.0, 10.0, 11.0, 2.0, 3.0]);
        assert!(matches!(
            lift_2d_features(&map, 2, 3, 2, &[[3.0, 0.0]]),
            Err(GeometryError::OutOfBounds { .. })
        ));
        assert!(lift_2d_features(&map, 2, 3, 2, &[[-0.1, 0.0]]).is_err());
    }

    #[test]
    fn lifting_constant_map() {
        let map = vec![0.25f32; 4 * 5 * 3];
        let out = lift_2d_features(&map, 4, 5, 3, &[[0.5, 0.5], [4.9, 3.9]]).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.25));
    }
}
