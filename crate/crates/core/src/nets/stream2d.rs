//! Image encoder-decoder with skip connections.
//!
//! Encoder level 0 is two 3×3 convolutions at full resolution; every further
//! level max-pools by two and applies one 3×3 convolution. The decoder
//! upsamples, concatenates the encoder skip and convolves (3×3, except 1×1 at
//! full resolution to keep the per-pixel cost low). All convolutions are
//! followed by a rectifier.

use serde::{Deserialize, Serialize};

use super::layers::{
    join, maxpool2, maxpool2_backward, relu_map, relu_map_backward, upsample2, upsample2_backward, Conv2d, FeatureMap,
    Module, Param,
};
use crate::rng::Rng;
use crate::tensor::{Mat, Real};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stream2DConfig {
    /// Channel width of each encoder level; the length minus one is the
    /// number of downsamplings.
    pub widths: Vec<usize>,
    /// Output feature dimension `F_2D`.
    pub out_dim: usize,
}

impl Default for Stream2DConfig {
    fn default() -> Self {
        Self { widths: vec![8, 8, 16, 16], out_dim: 16 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream2D<T> {
    pub stem: Conv2d<T>,
    pub enc: Vec<Conv2d<T>>,
    pub dec: Vec<Conv2d<T>>,
}

/// Intermediate values of one image's forward pass.
#[derive(Clone, Debug)]
pub struct Cache2D<T> {
    input: FeatureMap<T>,
    stem_cols: Option<Mat<T>>,
    stem_out: FeatureMap<T>,
    /// Per encoder level: conv input, im2col, output.
    enc: Vec<(FeatureMap<T>, Option<Mat<T>>, FeatureMap<T>)>,
    pool_arg: Vec<Vec<usize>>,
    /// Per decoder level (index = level): conv input, im2col, output.
    dec: Vec<(FeatureMap<T>, Option<Mat<T>>, FeatureMap<T>)>,
}

fn concat<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T> {
    FeatureMap { h: a.h, w: a.w, data: Mat::hcat(&a.data, &b.data) }
}

fn split<T: Real>(x: FeatureMap<T>, at: usize) -> (FeatureMap<T>, FeatureMap<T>) {
    let (a, b) = x.data.hsplit(at);
    (FeatureMap { h: x.h, w: x.w, data: a }, FeatureMap { h: x.h, w: x.w, data: b })
}

fn add<T: Real>(a: &mut FeatureMap<T>, b: &FeatureMap<T>) {
    a.data.add_assign(&b.data);
}

impl<T: Real> Stream2D<T> {
    pub fn new(cfg: &Stream2DConfig, rng: &mut Rng) -> Self {
        let w = &cfg.widths;
        assert!(!w.is_empty(), "2D stream needs at least one level");
        let stem = Conv2d::new(3, 3, w[0], rng);
        let mut enc = vec![Conv2d::new(3, w[0], w[0], rng)];
        for l in 1..w.len() {
            enc.push(Conv2d::new(3, w[l - 1], w[l], rng));
        }
        // dec[l] produces level l from level l + 1 and the level-l skip.
        let mut dec = Vec::new();
        for l in 0..w.len() - 1 {
            let cin = w[l + 1] + w[l];
            let (k, cout) = if l == 0 { (1, cfg.out_dim) } else { (3, w[l]) };
            dec.push(Conv2d::new(k, cin, cout, rng));
        }
        if w.len() == 1 {
            dec.push(Conv2d::new(1, w[0], cfg.out_dim, rng));
        }
        Self { stem, enc, dec }
    }

    pub fn out_dim(&self) -> usize {
        self.dec[0].cout
    }

    /// Full-resolution feature map of an `h × w` RGB image (channels last).
    pub fn forward(&self, image: &[f32], h: usize, w: usize) -> (FeatureMap<T>, Cache2D<T>) {
        let input = FeatureMap { h, w, data: Mat::from_vec(h * w, 3, image.iter().map(|&v| T::lit(v as f64)).collect()) };
        let (s, stem_cols) = self.stem.forward(&input);
        let stem_out = relu_map(s);
        let levels = self.enc.len();
        let mut enc: Vec<(FeatureMap<T>, Option<Mat<T>>, FeatureMap<T>)> = Vec::with_capacity(levels);
        let mut pool_arg = Vec::new();
        for l in 0..levels {
            let x = if l == 0 {
                stem_out.clone()
            } else {
                let (p, arg) = maxpool2(&enc[l - 1].2);
                pool_arg.push(arg);
                p
            };
            let (y, cols) = self.enc[l].forward(&x);
            enc.push((x, cols, relu_map(y)));
        }
        let mut dec: Vec<Option<(FeatureMap<T>, Option<Mat<T>>, FeatureMap<T>)>> = vec![None; self.dec.len()];
        if levels == 1 {
            let x = enc[0].2.clone();
            let (y, cols) = self.dec[0].forward(&x);
            dec[0] = Some((x, cols, relu_map(y)));
        } else {
            let mut below = enc[levels - 1].2.clone();
            for l in (0..levels - 1).rev() {
                let skip = &enc[l].2;
                let x = concat(&upsample2(&below, skip.h, skip.w), skip);
                let (y, cols) = self.dec[l].forward(&x);
                let y = relu_map(y);
                below = y.clone();
                dec[l] = Some((x, cols, y));
            }
        }
        let dec: Vec<_> = dec.into_iter().map(|d| d.expect("every decoder level ran")).collect();
        let out = dec[0].2.clone();
        (out, Cache2D { input, stem_cols, stem_out, enc, pool_arg, dec })
    }

    /// Backpropagates the gradient of the full-resolution output map.
    pub fn backward(&mut self, cache: &Cache2D<T>, d_out: FeatureMap<T>) {
        let levels = self.enc.len();
        let mut d_enc: Vec<Option<FeatureMap<T>>> = vec![None; levels];
        let accumulate = |slot: &mut Option<FeatureMap<T>>, g: FeatureMap<T>| match slot {
            Some(s) => add(s, &g),
            None => *slot = Some(g),
        };
        if levels == 1 {
            let (x, cols, y) = &cache.dec[0];
            let dy = relu_map_backward(y, d_out);
            let dx = self.dec[0].backward(x, cols.as_ref(), &dy);
            accumulate(&mut d_enc[0], dx);
        } else {
            let mut d_below = d_out;
            for l in 0..levels - 1 {
                let (x, cols, y) = &cache.dec[l];
                let dy = relu_map_backward(y, d_below);
                let dx = self.dec[l].backward(x, cols.as_ref(), &dy);
                let up_width = self.dec[l].cin - cache.enc[l].2.channels();
                let (d_up, d_skip) = split(dx, up_width);
                accumulate(&mut d_enc[l], d_skip);
                let src = if l + 1 == levels - 1 { &cache.enc[l + 1].2 } else { &cache.dec[l + 1].2 };
                let d_src = upsample2_backward(&d_up, src.h, src.w);
                if l + 1 == levels - 1 {
                    accumulate(&mut d_enc[l + 1], d_src);
                    d_below = FeatureMap::zeros(0, 0, 0);
                } else {
                    d_below = d_src;
                }
            }
        }
        let mut d_stem = None;
        for l in (0..levels).rev() {
            let (x, cols, y) = &cache.enc[l];
            let Some(g) = d_enc[l].take() else { continue };
            let dy = relu_map_backward(y, g);
            let dx = self.enc[l].backward(x, cols.as_ref(), &dy);
            if l == 0 {
                d_stem = Some(dx);
            } else {
                let below = &cache.enc[l - 1].2;
                let d = maxpool2_backward(&cache.pool_arg[l - 1], &dx, below.h, below.w);
                accumulate(&mut d_enc[l - 1], d);
            }
        }
        if let Some(g) = d_stem {
            let dy = relu_map_backward(&cache.stem_out, g);
            self.stem.backward_params(&cache.input, cache.stem_cols.as_ref(), &dy);
        }
    }
}

impl<T: Real> Module<T> for Stream2D<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (l, c) in self.enc.iter().enumerate() {
            c.visit(&join(prefix, &format!("enc{l}")), f);
        }
        for (l, c) in self.dec.iter().enumerate() {
            c.visit(&join(prefix, &format!("dec{l}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (l, c) in self.enc.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("enc{l}")), f);
        }
        for (l, c) in self.dec.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("dec{l}")), f);
        }
    }
}
