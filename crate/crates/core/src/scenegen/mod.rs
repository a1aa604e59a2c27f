//! Paired, calibrated image/point-cloud frames with controllable domain shift.
//!
//! Each frame is a grid world (see [`world`]) observed by a LiDAR and a
//! camera sharing one optical center. The camera image is rendered by casting
//! one ray per pixel center; the point cloud by casting `lidar_rings ×
//! points_per_ring` rays across the camera's horizontal field of view. Points
//! whose containing pixel shows a different surface (silhouette edges) are
//! dropped, so before noise every point's pixel carries its own class color.

pub mod mapping;
pub mod presets;
pub mod world;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mapping::{apply_class_mapping, ClassMapping, LabelTable, MappingError};
pub use presets::{
    make_scenario, make_scenario_with_seed, read_split, Preset, ScenarioKind, SplitName, SplitSet, SplitSizes,
};

use crate::geometry::{pixel_index, project_points, CameraModel, PointCloud};
use crate::rng;
use crate::sample::{Image, Sample, SampleMeta};
use world::{World, NUM_ARCHETYPES, PALETTE, REFLECTIVITY, SKY};

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

fn default_gamma() -> f64 {
    1.0
}
fn default_intensity_noise() -> f64 {
    0.03
}
fn default_image_height() -> usize {
    24
}
fn default_image_width() -> usize {
    32
}
fn default_hfov() -> f64 {
    90.0
}
fn default_pitch() -> f64 {
    10.0
}
fn default_elev_min() -> f64 {
    -25.0
}
fn default_elev_max() -> f64 {
    3.0
}
fn default_max_range() -> f64 {
    25.0
}
fn default_grid_start() -> f64 {
    2.0
}
fn default_grid_depth() -> f64 {
    16.0
}
fn default_grid_width() -> f64 {
    16.0
}

/// Parameters of one synthetic domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Domain id, recorded in every sample's metadata.
    pub name: String,
    pub seed: u64,
    pub num_classes: usize,
    pub class_priors: Vec<f64>,
    /// Number of LiDAR elevation rings.
    pub lidar_rings: usize,
    /// Azimuth samples per ring across the camera's horizontal field of view.
    pub points_per_ring: usize,
    /// Multiplicative image brightness in `(0, 2]`.
    pub brightness: f64,
    pub texture_noise_std: f64,
    /// Edge length of a world cell in meters; larger cells mean fewer, bigger objects.
    pub layout_scale: f64,
    /// Height of the shared camera/LiDAR center above the ground (meters).
    pub sensor_height: f64,
    /// Exponent applied to colors before brightness scaling.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_intensity_noise")]
    pub intensity_noise_std: f64,
    #[serde(default = "default_image_height")]
    pub image_height: usize,
    #[serde(default = "default_image_width")]
    pub image_width: usize,
    #[serde(default = "default_hfov")]
    pub hfov_deg: f64,
    /// Downward tilt of the camera.
    #[serde(default = "default_pitch")]
    pub camera_pitch_deg: f64,
    #[serde(default = "default_elev_min")]
    pub elevation_min_deg: f64,
    #[serde(default = "default_elev_max")]
    pub elevation_max_deg: f64,
    #[serde(default = "default_max_range")]
    pub max_range: f64,
    #[serde(default = "default_grid_start")]
    pub grid_start: f64,
    #[serde(default = "default_grid_depth")]
    pub grid_depth: f64,
    #[serde(default = "default_grid_width")]
    pub grid_width: f64,
    /// Mirror the layout left/right (left- vs right-hand traffic).
    #[serde(default)]
    pub mirror: bool,
}

impl DomainSpec {
    /// A plain daylight domain with the default sensor rig.
    pub fn new(name: &str, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            seed,
            num_classes: NUM_ARCHETYPES,
            class_priors: vec![0.10, 0.40, 0.16, 0.16, 0.08, 0.10],
            lidar_rings: 16,
            points_per_ring: 40,
            brightness: 1.0,
            texture_noise_std: 0.05,
            layout_scale: 2.0,
            sensor_height: 1.8,
            gamma: default_gamma(),
            intensity_noise_std: default_intensity_noise(),
            image_height: default_image_height(),
            image_width: default_image_width(),
            hfov_deg: default_hfov(),
            camera_pitch_deg: default_pitch(),
            elevation_min_deg: default_elev_min(),
            elevation_max_deg: default_elev_max(),
            max_range: default_max_range(),
            grid_start: default_grid_start(),
            grid_depth: default_grid_depth(),
            grid_width: default_grid_width(),
            mirror: false,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidSpec(format!("{}: {m}", self.name)));
        if self.num_classes != NUM_ARCHETYPES {
            return bad(&format!("the generator models exactly {NUM_ARCHETYPES} classes"));
        }
        if self.class_priors.len() != self.num_classes {
            return bad("class_priors length differs from num_classes");
        }
        if self.class_priors.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return bad("class priors must be nonnegative");
        }
        if (self.class_priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("class priors must sum to 1");
        }
        if self.lidar_rings < 1 || self.points_per_ring < 1 {
            return bad("lidar_rings and points_per_ring must be at least 1");
        }
        if !(self.brightness > 0.0 && self.brightness <= 2.0) {
            return bad("brightness must lie in (0, 2]");
        }
        if !(self.texture_noise_std >= 0.0) || !(self.intensity_noise_std >= 0.0) {
            return bad("noise levels must be nonnegative");
        }
        if !(self.layout_scale > 0.0) || !(self.gamma > 0.0) || !(self.sensor_height > 0.0) {
            return bad("layout_scale, gamma and sensor_height must be positive");
        }
        if self.image_height == 0 || self.image_width == 0 || !(0.0 < self.hfov_deg && self.hfov_deg < 180.0) {
            return bad("invalid camera geometry");
        }
        if !(self.elevation_min_deg < self.elevation_max_deg) {
            return bad("elevation range is empty");
        }
        Ok(())
    }

    /// Forward-looking pinhole camera at the sensor center.
    pub fn camera(&self) -> CameraModel {
        let (h, w) = (self.image_height, self.image_width);
        let f = (w as f64 / 2.0) / (self.hfov_deg.to_radians() / 2.0).tan();
        let (s, c) = self.camera_pitch_deg.to_radians().sin_cos();
        // Rows are the camera axes (right, down, forward) in world coordinates,
        // with world x forward, y left, z up.
        let rotation = [[0.0, -1.0, 0.0], [-s, 0.0, -c], [c, 0.0, -s]];
        let center = [0.0, 0.0, self.sensor_height];
        let mut translation = [0.0; 3];
        for (i, t) in translation.iter_mut().enumerate() {
            *t = -(rotation[i][0] * center[0] + rotation[i][1] * center[1] + rotation[i][2] * center[2]);
        }
        CameraModel {
            intrinsics: [[f, 0.0, w as f64 / 2.0], [0.0, f, h as f64 / 2.0], [0.0, 0.0, 1.0]],
            rotation,
            translation,
            image_size: (h, w),
        }
    }

    /// Unit direction of every LiDAR ray, ring-major.
    pub fn lidar_rays(&self) -> Vec<[f64; 3]> {
        let half_az = self.hfov_deg.to_radians() / 2.0;
        let (e0, e1) = (self.elevation_min_deg.to_radians(), self.elevation_max_deg.to_radians());
        let mut rays = Vec::with_capacity(self.lidar_rings * self.points_per_ring);
        for r in 0..self.lidar_rings {
            let elev = e0 + (e1 - e0) * (r as f64 + 0.5) / self.lidar_rings as f64;
            for a in 0..self.points_per_ring {
                let az = -half_az + 2.0 * half_az * (a as f64 + 0.5) / self.points_per_ring as f64;
                rays.push([elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()]);
            }
        }
        rays
    }
}

/// Applies texture noise and the brightness/gamma transform to a class color.
fn shade(base: [f32; 3], spec: &DomainSpec, noise: Option<&Normal<f64>>, rng: &mut rng::Rng) -> [f32; 3] {
    let mut out = base;
    for c in &mut out {
        let mut v = *c as f64;
        if let Some(n) = noise {
            v += n.sample(rng);
        }
        v = v.clamp(0.0, 1.0);
        if spec.gamma != 1.0 {
            v = v.powf(spec.gamma);
        }
        if spec.brightness != 1.0 {
            v *= spec.brightness;
        }
        *c = v.clamp(0.0, 1.0) as f32;
    }
    out
}

/// Renders the class visible at every pixel center (`None` = sky).
pub fn render_class_map(world: &World, cam: &CameraModel) -> Vec<Option<usize>> {
    let (h, w) = cam.image_size;
    let origin = cam.center();
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let dir = cam.pixel_ray(col as f64 + 0.5, row as f64 + 0.5);
            out.push(world.cast(origin, dir).map(|hit| hit.class));
        }
    }
    out
}

/// LiDAR returns before any camera-side filtering: positions and classes.
pub fn cast_lidar(world: &World, spec: &DomainSpec) -> (Vec<[f64; 3]>, Vec<usize>) {
    let origin = [0.0, 0.0, spec.sensor_height];
    let mut coords = Vec::new();
    let mut classes = Vec::new();
    for d in spec.lidar_rays() {
        if let Some(hit) = world.cast(origin, d) {
            if hit.t <= spec.max_range {
                let p = [origin[0] + hit.t * d[0], origin[1] + hit.t * d[1], origin[2] + hit.t * d[2]];
                // Stored as f32 on disk; keep the in-memory frame identical.
                coords.push(p.map(|v| v as f32 as f64));
                classes.push(hit.class);
            }
        }
    }
    (coords, classes)
}

/// Generates frame `frame_id` of the domain. Pure in `(spec, frame_id)`.
pub fn generate_scene(spec: &DomainSpec, frame_id: u64) -> Result<Sample, SceneError> {
    spec.validate()?;
    let mut rng = rng::indexed(spec.seed, "frame", frame_id);
    let world = World::sample(spec, &mut rng);
    let cam = spec.camera();
    let class_map = render_class_map(&world, &cam);
    let (h, w) = cam.image_size;

    let tex = (spec.texture_noise_std > 0.0).then(|| Normal::new(0.0, spec.texture_noise_std).expect("std >= 0"));
    let mut image = Image::new(h, w);
    for row in 0..h {
        for col in 0..w {
            let base = class_map[row * w + col].map_or(SKY, |c| PALETTE[c]);
            image.set_pixel(row, col, shade(base, spec, tex.as_ref(), &mut rng));
        }
    }

    let (coords, classes) = cast_lidar(&world, spec);
    let proj = project_points(&PointCloud::new(coords.clone()), &cam);
    let int_noise =
        (spec.intensity_noise_std > 0.0).then(|| Normal::new(0.0, spec.intensity_noise_std).expect("std >= 0"));
    let mut kept = Vec::new();
    let mut labels = Vec::new();
    let mut uvs = Vec::new();
    let mut intensity = Vec::new();
    for (i, uv) in proj.pixel_uv.iter().enumerate() {
        let Some(uv) = uv else { continue };
        let uv = uv.map(|v| v as f32 as f64);
        let Ok(pix) = pixel_index(uv, h, w) else { continue };
        if class_map[pix] != Some(classes[i]) {
            continue;
        }
        let mut int = REFLECTIVITY[classes[i]];
        if let Some(n) = &int_noise {
            int += n.sample(&mut rng);
        }
        kept.push(coords[i]);
        labels.push(classes[i] as i32);
        uvs.push(uv);
        intensity.push(int.clamp(0.0, 1.0) as f32 as f64);
    }
    Ok(Sample {
        image,
        cloud: PointCloud { coords: kept, intensity: Some(intensity) },
        labels,
        pixel_uv: uvs,
        camera: cam,
        meta: SampleMeta { domain: spec.name.clone(), frame_id },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::fov_filter;

    fn spec() -> DomainSpec {
        DomainSpec::new("unit", 11)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(&spec(), 3).unwrap();
        let b = generate_scene(&spec(), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(&spec(), 4).unwrap());
        assert!(a.check_consistent());
        assert!(a.len() > 50, "frame too sparse: {}", a.len());
    }

    #[test]
    fn camera_is_valid() {
        spec().camera().validate().unwrap();
    }

    #[test]
    fn noiseless_pixels_carry_palette_colors() {
        let mut s = spec();
        s.texture_noise_std = 0.0;
        s.brightness = 1.0;
        for frame in 0..5 {
            let sample = generate_scene(&s, frame).unwrap();
            for (uv, &label) in sample.pixel_uv.iter().zip(&sample.labels) {
                let (row, col) = (uv[1].floor() as usize, uv[0].floor() as usize);
                assert_eq!(sample.image.pixel(row, col), PALETTE[label as usize]);
            }
        }
    }

    #[test]
    fn palette_classifier_recovers_labels() {
        let mut s = spec();
        s.texture_noise_std = 0.0;
        let sample = generate_scene(&s, 9).unwrap();
        for (uv, &label) in sample.pixel_uv.iter().zip(&sample.labels) {
            let rgb = sample.image.pixel(uv[1].floor() as usize, uv[0].floor() as usize);
            let guess = PALETTE.iter().position(|p| *p == rgb).unwrap();
            assert_eq!(guess as i32, label);
        }
    }

    #[test]
    fn generated_frames_pass_fov_filter_unchanged() {
        let sample = generate_scene(&spec(), 1).unwrap();
        let filtered = fov_filter(&sample).unwrap();
        assert_eq!(filtered.labels, sample.labels);
        assert_eq!(filtered.cloud, sample.cloud);
    }

    #[test]
    fn ring_count_halves_point_count() {
        // Brute-force oracle: count the rays of each rig that hit something in range.
        let mut dense = spec();
        dense.lidar_rings = 64;
        let mut sparse = dense.clone();
        sparse.lidar_rings = 32;
        let mut rng = rng::indexed(dense.seed, "frame", 0);
        let world = World::sample(&dense, &mut rng);
        let count = |s: &DomainSpec| {
            let origin = [0.0, 0.0, s.sensor_height];
            s.lidar_rays().iter().filter(|&&d| world.cast(origin, d).is_some_and(|h| h.t <= s.max_range)).count()
        };
        let (n64, n32) = (count(&dense), count(&sparse));
        assert_eq!(n64, cast_lidar(&world, &dense).0.len());
        assert_eq!(n32, cast_lidar(&world, &sparse).0.len());
        let ratio = n32 as f64 / n64 as f64;
        assert!((0.45..=0.55).contains(&ratio), "ratio {ratio}");
        let a = generate_scene(&dense, 0).unwrap().len() as f64;
        let b = generate_scene(&sparse, 0).unwrap().len() as f64;
        assert!((0.45..=0.55).contains(&(b / a)), "filtered ratio {}", b / a);
    }

    #[test]
    fn brightness_is_monotone() {
        for seed in 0..3 {
            let mut prev = f64::INFINITY;
            for b in [1.5, 1.0, 0.6, 0.3] {
                let mut s = DomainSpec::new("b", seed);
                s.brightness = b;
                let m = generate_scene(&s, 0).unwrap().image.mean_intensity();
                assert!(m < prev);
                prev = m;
            }
        }
    }

    #[test]
    fn fewer_rings_fewer_points() {
        for seed in 0..3 {
            let mut s = DomainSpec::new("r", seed);
            let mut prev = usize::MAX;
            for rings in [24, 16, 8, 4] {
                s.lidar_rings = rings;
                let n = generate_scene(&s, 2).unwrap().len();
                assert!(n < prev);
                prev = n;
            }
        }
    }

    #[test]
    fn cell_classes_follow_priors() {
        let s = spec();
        let mut counts = [0usize; NUM_ARCHETYPES];
        let mut total = 0;
        for frame in 0..100 {
            let mut rng = rng::indexed(s.seed, "frame", frame);
            let world = World::sample(&s, &mut rng);
            for &c in &world.cell_classes {
                counts[c] += 1;
                total += 1;
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            let freq = n as f64 / total as f64;
            assert!((freq - s.class_priors[c]).abs() < 0.05, "class {c}: {freq}");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec();
        s.class_priors[0] += 0.1;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.lidar_rings = 0;
        assert!(generate_scene(&s, 0).is_err());
        let mut s = spec();
        s.brightness = 0.0;
        assert!(s.validate().is_err());
    }
}
