//! Sparse voxel encoder-decoder over the point cloud.
//!
//! Points are encoded individually, averaged into level-0 voxels, processed by
//! a sparse U-Net (submanifold convolution per level, strided convolution
//! between levels, nearest-copy upsampling with skip concatenation) and copied
//! back to the points, where a final layer mixes them with the point encoding.

use serde::{Deserialize, Serialize};

use super::layers::{he_bound, join, relu, relu_backward, Linear, Module, Param};
use super::sparse::{gather_rows, pool_points, pool_points_backward, scatter_rows, SparseConv, VoxelHierarchy};
use crate::rng::Rng;
use crate::tensor::{Mat, Real};

/// Per-point input features: intensity and height above ground.
pub const POINT_FEATURES: usize = 2;

/// Scale of the height feature in meters.
pub const HEIGHT_SCALE: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stream3DConfig {
    /// Level-0 voxel edge length in meters.
    pub voxel_size: f64,
    /// Channel width of each level; the length minus one is the number of downsamplings.
    pub widths: Vec<usize>,
    /// Output feature dimension `F_3D`.
    pub out_dim: usize,
}

impl Default for Stream3DConfig {
    fn default() -> Self {
        Self { voxel_size: 0.05, widths: vec![16, 16, 16, 16], out_dim: 16 }
    }
}

impl Stream3DConfig {
    pub fn levels(&self) -> usize {
        self.widths.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream3D<T> {
    pub point_in: Linear<T>,
    pub enc: Vec<SparseConv<T>>,
    pub down: Vec<SparseConv<T>>,
    pub dec: Vec<SparseConv<T>>,
    pub point_out: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct Cache3D<T> {
    input: Mat<T>,
    point_enc: Mat<T>,
    /// Per level: conv input and output.
    enc: Vec<(Mat<T>, Mat<T>)>,
    /// Per downsampling: output (its input is the previous level's encoder output).
    down: Vec<Mat<T>>,
    /// Per decoder level: conv input and output.
    dec: Vec<Option<(Mat<T>, Mat<T>)>>,
    head_in: Mat<T>,
    out: Mat<T>,
}

impl<T: Real> Stream3D<T> {
    pub fn new(cfg: &Stream3DConfig, rng: &mut Rng) -> Self {
        let w = &cfg.widths;
        assert!(!w.is_empty(), "3D stream needs at least one level");
        let point_in = Linear::new(POINT_FEATURES, w[0], he_bound(POINT_FEATURES), rng);
        let mut enc = vec![SparseConv::new(27, w[0], w[0], rng)];
        let mut down = Vec::new();
        for l in 1..w.len() {
            down.push(SparseConv::new(8, w[l - 1], w[l], rng));
            enc.push(SparseConv::new(27, w[l], w[l], rng));
        }
        let mut dec = Vec::new();
        for l in 0..w.len() - 1 {
            dec.push(SparseConv::new(27, w[l + 1] + w[l], w[l], rng));
        }
        let point_out = Linear::new(2 * w[0], cfg.out_dim, he_bound(2 * w[0]), rng);
        Self { point_in, enc, down, dec, point_out }
    }

    pub fn out_dim(&self) -> usize {
        self.point_out.fan_out()
    }

    pub fn forward(&self, features: &[f32], hier: &VoxelHierarchy) -> (Mat<T>, Cache3D<T>) {
        let n = hier.point_voxel.len();
        let input = Mat::from_vec(n, POINT_FEATURES, features.iter().map(|&v| T::lit(v as f64)).collect());
        let point_enc = relu(self.point_in.forward(&input));
        let levels = self.enc.len();
        let mut enc: Vec<(Mat<T>, Mat<T>)> = Vec::with_capacity(levels);
        let mut down = Vec::new();
        for l in 0..levels {
            let x = if l == 0 {
                pool_points(hier, &point_enc)
            } else {
                let d = relu(self.down[l - 1].forward(&enc[l - 1].1, &hier.down[l - 1]));
                down.push(d.clone());
                d
            };
            let y = relu(self.enc[l].forward(&x, &hier.subm[l]));
            enc.push((x, y));
        }
        let mut dec = vec![None; levels.saturating_sub(1)];
        let mut below = enc[levels - 1].1.clone();
        for l in (0..levels - 1).rev() {
            let up = gather_rows(&below, &hier.parent[l]);
            let x = Mat::hcat(&up, &enc[l].1);
            let y = relu(self.dec[l].forward(&x, &hier.subm[l]));
            below = y.clone();
            dec[l] = Some((x, y));
        }
        let voxel_out = below;
        let head_in = Mat::hcat(&gather_rows(&voxel_out, &hier.point_voxel), &point_enc);
        let out = relu(self.point_out.forward(&head_in));
        (out.clone(), Cache3D { input, point_enc, enc, down, dec, head_in, out })
    }

    pub fn backward(&mut self, cache: &Cache3D<T>, hier: &VoxelHierarchy, d_out: Mat<T>) {
        let levels = self.enc.len();
        let dy = relu_backward(&cache.out, d_out);
        let d_head = self.point_out.backward(&cache.head_in, &dy);
        let w0 = self.enc[0].cout;
        let (d_vox_pts, mut d_point_enc) = d_head.hsplit(d_head.cols - w0);
        let mut d_below = scatter_rows(&d_vox_pts, &hier.point_voxel, hier.num_voxels(0));
        let mut d_enc: Vec<Option<Mat<T>>> = vec![None; levels];
        let acc = |slot: &mut Option<Mat<T>>, g: Mat<T>| match slot {
            Some(s) => s.add_assign(&g),
            None => *slot = Some(g),
        };
        if levels == 1 {
            acc(&mut d_enc[0], d_below);
        } else {
            for l in 0..levels - 1 {
                let (x, y) = cache.dec[l].as_ref().expect("decoder level cached");
                let g = relu_backward(y, d_below);
                let dx = self.dec[l].backward(x, &hier.subm[l], &g);
                let up_width = self.dec[l].cin - self.enc[l].cout;
                let (d_up, d_skip) = dx.hsplit(up_width);
                acc(&mut d_enc[l], d_skip);
                let d_src = scatter_rows(&d_up, &hier.parent[l], hier.num_voxels(l + 1));
                if l + 1 == levels - 1 {
                    acc(&mut d_enc[l + 1], d_src);
                    d_below = Mat::zeros(0, 0);
                } else {
                    d_below = d_src;
                }
            }
        }
        for l in (0..levels).rev() {
            let Some(g) = d_enc[l].take() else { continue };
            let (x, y) = &cache.enc[l];
            let g = relu_backward(y, g);
            let dx = self.enc[l].backward(x, &hier.subm[l], &g);
            if l == 0 {
                d_point_enc.add_assign(&pool_points_backward(hier, &dx));
            } else {
                let g = relu_backward(&cache.down[l - 1], dx);
                let d_prev = self.down[l - 1].backward(&cache.enc[l - 1].1, &hier.down[l - 1], &g);
                acc(&mut d_enc[l - 1], d_prev);
            }
        }
        let g = relu_backward(&cache.point_enc, d_point_enc);
        self.point_in.backward_params(&cache.input, &g);
    }
}

impl<T: Real> Module<T> for Stream3D<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.point_in.visit(&join(prefix, "point_in"), f);
        for (l, c) in self.enc.iter().enumerate() {
            c.visit(&join(prefix, &format!("enc{l}")), f);
        }
        for (l, c) in self.down.iter().enumerate() {
            c.visit(&join(prefix, &format!("down{l}")), f);
        }
        for (l, c) in self.dec.iter().enumerate() {
            c.visit(&join(prefix, &format!("dec{l}")), f);
        }
        self.point_out.visit(&join(prefix, "point_out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.point_in.visit_mut(&join(prefix, "point_in"), f);
        for (l, c) in self.enc.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("enc{l}")), f);
        }
        for (l, c) in self.down.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("down{l}")), f);
        }
        for (l, c) in self.dec.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("dec{l}")), f);
        }
        self.point_out.visit_mut(&join(prefix, "point_out"), f);
    }
}
