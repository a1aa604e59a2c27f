//! Procedural grid world and ray casting.
//!
//! The ground plane `z = 0` carries the ground class. The area in front of
//! the sensor is tiled into square cells; each cell draws one class from the
//! domain's priors and receives that class's archetype primitive (nothing,
//! a slab, a box or a cylinder).

use rand::Rng as _;
use rand::distr::weighted::WeightedIndex;
use rand_distr::Distribution;

use super::DomainSpec;
use crate::rng::Rng;

/// Class ids of the generator's six archetypes. The order follows the
/// nuScenes-Lidarseg mapping shipped in `data/mappings`.
pub const VEHICLE: usize = 0;
pub const DRIVEABLE: usize = 1;
pub const SIDEWALK: usize = 2;
pub const TERRAIN: usize = 3;
pub const MANMADE: usize = 4;
pub const VEGETATION: usize = 5;
pub const NUM_ARCHETYPES: usize = 6;

pub const CLASS_NAMES: [&str; NUM_ARCHETYPES] =
    ["vehicle", "driveable_surface", "sidewalk", "terrain", "manmade", "vegetation"];

/// Canonical noiseless color of each class.
pub const PALETTE: [[f32; 3]; NUM_ARCHETYPES] = [
    [0.20, 0.35, 0.85],
    [0.35, 0.35, 0.38],
    [0.70, 0.65, 0.60],
    [0.55, 0.45, 0.25],
    [0.80, 0.30, 0.25],
    [0.20, 0.65, 0.25],
];

pub const SKY: [f32; 3] = [0.60, 0.80, 0.95];

/// Mean LiDAR reflectivity of each class.
pub const REFLECTIVITY: [f64; NUM_ARCHETYPES] = [0.80, 0.20, 0.40, 0.30, 0.60, 0.50];

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Slab { min: [f64; 3], max: [f64; 3] },
    Cylinder { center: [f64; 2], radius: f64, height: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub class: usize,
    pub shape: Shape,
}

#[derive(Clone, Debug)]
pub struct World {
    /// Class drawn for every cell, row-major over (forward, lateral).
    pub cell_classes: Vec<usize>,
    pub primitives: Vec<Primitive>,
    pub ground_class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub class: usize,
}

const EPS: f64 = 1e-9;

impl World {
    pub fn sample(spec: &DomainSpec, rng: &mut Rng) -> Self {
        let cell = spec.layout_scale;
        let nx = (spec.grid_depth / cell).round().max(1.0) as usize;
        let ny = (spec.grid_width / cell).round().max(1.0) as usize;
        let x0 = spec.grid_start;
        let y0 = -(ny as f64) * cell / 2.0;
        let picker = WeightedIndex::new(&spec.class_priors).expect("validated priors");
        let mut cell_classes = Vec::with_capacity(nx * ny);
        let mut primitives = Vec::new();
        for ix in 0..nx {
            for iy in 0..ny {
                let class = picker.sample(rng);
                cell_classes.push(class);
                let jitter: f64 = rng.random_range(0.9..1.1);
                let (lo_x, lo_y) = (x0 + ix as f64 * cell, y0 + iy as f64 * cell);
                let (lo_y, hi_y) = if spec.mirror { (-(lo_y + cell), -lo_y) } else { (lo_y, lo_y + cell) };
                let hi_x = lo_x + cell;
                let slab = |inset: f64, height: f64| Shape::Slab {
                    min: [lo_x + inset, lo_y + inset, 0.0],
                    max: [hi_x - inset, hi_y - inset, height],
                };
                let shape = match class {
                    DRIVEABLE => None,
                    SIDEWALK => Some(slab(0.0, 0.15 * jitter)),
                    TERRAIN => Some(slab(0.0, 0.30 * jitter)),
                    VEHICLE => Some(slab(0.15 * cell, 1.4 * jitter)),
                    MANMADE => Some(slab(0.05 * cell, 3.0 * jitter)),
                    VEGETATION => Some(Shape::Cylinder {
                        center: [(lo_x + hi_x) / 2.0, (lo_y + hi_y) / 2.0],
                        radius: 0.35 * cell,
                        height: 2.2 * jitter,
                    }),
                    _ => unreachable!("class outside archetype table"),
                };
                if let Some(shape) = shape {
                    primitives.push(Primitive { class, shape });
                }
            }
        }
        Self { cell_classes, primitives, ground_class: DRIVEABLE }
    }

    /// First intersection along `origin + t * dir` with `t > 0`.
    pub fn cast(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if dir[2] < 0.0 && origin[2] > 0.0 {
            best = Some(Hit { t: -origin[2] / dir[2], class: self.ground_class });
        }
        for p in &self.primitives {
            let t = match &p.shape {
                Shape::Slab { min, max } => ray_box(origin, dir, min, max),
                Shape::Cylinder { center, radius, height } => ray_cylinder(origin, dir, *center, *radius, *height),
            };
            if let Some(t) = t {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, class: p.class });
                }
            }
        }
        best
    }
}

fn ray_box(o: [f64; 3], d: [f64; 3], min: &[f64; 3], max: &[f64; 3]) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < min[a] || o[a] > max[a] {
                return None;
            }
        } else {
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((min[a] - o[a]) * inv, (max[a] - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    if t0 > t1 || t1 <= EPS {
        return None;
    }
    // The sensor never starts inside a primitive, so the entry point is the hit.
    (t0 > EPS).then_some(t0)
}

fn ray_cylinder(o: [f64; 3], d: [f64; 3], c: [f64; 2], r: f64, h: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let (px, py) = (o[0] - c[0], o[1] - c[1]);
    let a = d[0] * d[0] + d[1] * d[1];
    if a > 1e-15 {
        let b = 2.0 * (px * d[0] + py * d[1]);
        let cc = px * px + py * py - r * r;
        let disc = b * b - 4.0 * a * cc;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / (2.0 * a);
            let z = o[2] + t * d[2];
            if t > EPS && (0.0..=h).contains(&z) {
                best = Some(t);
            }
        }
    }
    if d[2].abs() > 1e-15 {
        let t = (h - o[2]) / d[2];
        let (x, y) = (px + t * d[0], py + t * d[1]);
        if t > EPS && x * x + y * y <= r * r && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    }
    best
}
