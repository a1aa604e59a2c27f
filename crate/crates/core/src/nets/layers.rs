//! Dense building blocks with hand-written backward passes.
//!
//! Forward functions take `&self` and return whatever the backward pass
//! needs; backward functions accumulate parameter gradients into `&mut self`
//! and return the input gradient.

use rand::Rng as _;

use crate::rng::Rng;
use crate::tensor::{gemm, Mat, Real};

/// A parameter tensor and its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), value: vec![T::zero(); n], grad: vec![T::zero(); n] }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(shape);
        for v in &mut p.value {
            *v = T::lit(rng.random_range(-bound..=bound));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Visits parameters by path. Implemented by every layer and network.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Weight bound for layers followed by a rectifier.
pub(crate) fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

/// Weight bound for output (head) layers.
pub(crate) fn head_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in.max(1) as f64).sqrt()
}

/// `y = x·W + b` applied rowwise; `W` is stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(fan_in: usize, fan_out: usize, bound: f64, rng: &mut Rng) -> Self {
        Self { w: Param::uniform(&[fan_in, fan_out], bound, rng), b: Param::zeros(&[fan_out]) }
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape[1]
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        assert_eq!(x.cols, self.fan_in(), "linear input width");
        let n = self.fan_out();
        let mut y = Mat::from_vec(x.rows, n, self.b.value.repeat(x.rows));
        gemm(x.rows, x.cols, n, &x.data, false, &self.w.value, false, &mut y.data, true);
        y
    }

    pub fn backward(&mut self, x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
        self.backward_params(x, dy);
        let (k, n) = (self.fan_in(), self.fan_out());
        let mut dx = Mat::zeros(x.rows, k);
        gemm(x.rows, n, k, &dy.data, false, &self.w.value, true, &mut dx.data, false);
        dx
    }
}

impl<T: Real> Linear<T> {
    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn backward_params(&mut self, x: &Mat<T>, dy: &Mat<T>) {
        let (k, n) = (self.fan_in(), self.fan_out());
        gemm(k, x.rows, n, &x.data, true, &dy.data, false, &mut self.w.grad, true);
        for r in 0..dy.rows {
            for (g, &d) in self.b.grad.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

pub fn relu<T: Real>(mut x: Mat<T>) -> Mat<T> {
    x.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
    x
}

/// Gradient through a rectifier given its output.
pub fn relu_backward<T: Real>(y: &Mat<T>, mut dy: Mat<T>) -> Mat<T> {
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dy
}

/// Channels-last feature map: `data` has `h·w` rows of `c` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub h: usize,
    pub w: usize,
    pub data: Mat<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, data: Mat::zeros(h * w, c) }
    }

    pub fn channels(&self) -> usize {
        self.data.cols
    }
}

/// Same-padded `k×k` convolution, `k ∈ {1, 3}`; weights stored `(k·k·cin) × cout`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(k: usize, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        assert!(k == 1 || k == 3, "only 1×1 and 3×3 kernels");
        let fan_in = k * k * cin;
        Self {
            k,
            cin,
            cout,
            w: Param::uniform(&[fan_in, cout], he_bound(fan_in), rng),
            b: Param::zeros(&[cout]),
        }
    }

    fn im2col(&self, x: &FeatureMap<T>) -> Mat<T> {
        let (h, w, c) = (x.h, x.w, self.cin);
        let mut data = Vec::with_capacity(h * w * 9 * c);
        let zeros = vec![T::zero(); c];
        for y in 0..h {
            for xx in 0..w {
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                            data.extend_from_slice(&zeros);
                        } else {
                            data.extend_from_slice(x.data.row(sy as usize * w + sx as usize));
                        }
                    }
                }
            }
        }
        Mat::from_vec(h * w, 9 * c, data)
    }

    /// Returns the output and the (possibly im2col-expanded) input for backward.
    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, Option<Mat<T>>) {
        assert_eq!(x.channels(), self.cin, "conv input channels");
        let cols = (self.k == 3).then(|| self.im2col(x));
        let a = cols.as_ref().unwrap_or(&x.data);
        let mut y = FeatureMap { h: x.h, w: x.w, data: Mat::from_vec(x.h * x.w, self.cout, self.b.value.repeat(x.h * x.w)) };
        gemm(a.rows, a.cols, self.cout, &a.data, false, &self.w.value, false, &mut y.data.data, true);
        (y, cols)
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn backward_params(&mut self, x: &FeatureMap<T>, cols: Option<&Mat<T>>, dy: &FeatureMap<T>) {
        let a = cols.unwrap_or(&x.data);
        gemm(a.cols, a.rows, self.cout, &a.data, true, &dy.data.data, false, &mut self.w.grad, true);
        for r in 0..dy.data.rows {
            for (g, &d) in self.b.grad.iter_mut().zip(dy.data.row(r)) {
                *g += d;
            }
        }
    }

    pub fn backward(&mut self, x: &FeatureMap<T>, cols: Option<&Mat<T>>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        self.backward_params(x, cols, dy);
        let (h, w, c) = (x.h, x.w, self.cin);
        let mut dx = FeatureMap::zeros(h, w, c);
        if self.k == 1 {
            gemm(h * w, self.cout, c, &dy.data.data, false, &self.w.value, true, &mut dx.data.data, false);
            return dx;
        }
        // Gradient of every im2col column at once, then scattered back tap by tap.
        let mut dcols = Mat::zeros(h * w, 9 * c);
        gemm(h * w, self.cout, 9 * c, &dy.data.data, false, &self.w.value, true, &mut dcols.data, false);
        for t in 0..9 {
            let (oy, ox) = (t as isize / 3 - 1, t as isize % 3 - 1);
            for y in 0..h {
                let sy = y as isize + oy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let sx = xx as isize + ox;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = dx.data.row_mut(sy as usize * w + sx as usize);
                    for (d, &g) in dst.iter_mut().zip(&dcols.row(y * w + xx)[t * c..(t + 1) * c]) {
                        *d += g;
                    }
                }
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

pub fn relu_map<T: Real>(x: FeatureMap<T>) -> FeatureMap<T> {
    FeatureMap { h: x.h, w: x.w, data: relu(x.data) }
}

pub fn relu_map_backward<T: Real>(y: &FeatureMap<T>, dy: FeatureMap<T>) -> FeatureMap<T> {
    FeatureMap { h: dy.h, w: dy.w, data: relu_backward(&y.data, dy.data) }
}

/// 2×2 max pooling with ceil-mode borders. Returns the argmax source pixel
/// of every output element for the backward pass.
pub fn maxpool2<T: Real>(x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<usize>) {
    let (oh, ow, c) = (x.h.div_ceil(2), x.w.div_ceil(2), x.channels());
    let mut y = FeatureMap::zeros(oh, ow, c);
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = oy * ow + ox;
            for ch in 0..c {
                let mut best = T::neg_infinity();
                let mut best_i = 0;
                for sy in 2 * oy..(2 * oy + 2).min(x.h) {
                    for sx in 2 * ox..(2 * ox + 2).min(x.w) {
                        let i = sy * x.w + sx;
                        let v = x.data.data[i * c + ch];
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                }
                y.data.data[o * c + ch] = best;
                arg[o * c + ch] = best_i;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<T: Real>(arg: &[usize], dy: &FeatureMap<T>, h: usize, w: usize) -> FeatureMap<T> {
    let c = dy.channels();
    let mut dx = FeatureMap::zeros(h, w, c);
    for (j, &g) in dy.data.data.iter().enumerate() {
        let ch = j % c;
        dx.data.data[arg[j] * c + ch] += g;
    }
    dx
}

/// Nearest-neighbor 2× upsampling cropped to `h × w`.
pub fn upsample2<T: Real>(x: &FeatureMap<T>, h: usize, w: usize) -> FeatureMap<T> {
    let c = x.channels();
    let mut y = FeatureMap::zeros(h, w, c);
    for yy in 0..h {
        for xx in 0..w {
            let src = x.data.row((yy / 2) * x.w + xx / 2);
            y.data.row_mut(yy * w + xx).copy_from_slice(src);
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &FeatureMap<T>, h: usize, w: usize) -> FeatureMap<T> {
    let c = dy.channels();
    let mut dx = FeatureMap::zeros(h, w, c);
    for yy in 0..dy.h {
        for xx in 0..dy.w {
            let dst = dx.data.row_mut((yy / 2) * w + xx / 2);
            for (d, &g) in dst.iter_mut().zip(dy.data.row(yy * dy.w + xx)) {
                *d += g;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap<f64> {
        let mut r = rng::substream(seed, "t");
        let data = (0..h * w * c).map(|_| r.random_range(-1.0..1.0)).collect();
        FeatureMap { h, w, data: Mat::from_vec(h * w, c, data) }
    }

    #[test]
    fn conv3x3_matches_direct_loop() {
        let mut r = rng::substream(1, "init");
        let conv = Conv2d::<f64>::new(3, 2, 3, &mut r);
        let x = rand_map(4, 5, 2, 2);
        let (y, _) = conv.forward(&x);
        for oy in 0..4 {
            for ox in 0..5 {
                for co in 0..3 {
                    let mut want = conv.b.value[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                            if sy < 0 || sy >= 4 || sx < 0 || sx >= 5 {
                                continue;
                            }
                            for ci in 0..2 {
                                want += x.data.get(sy as usize * 5 + sx as usize, ci)
                                    * conv.w.value[((ky * 3 + kx) * 2 + ci) * 3 + co];
                            }
                        }
                    }
                    assert!((y.data.get(oy * 5 + ox, co) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for k in [1, 3] {
            let mut r = rng::substream(3, "init");
            let mut conv = Conv2d::<f64>::new(k, 2, 2, &mut r);
            let x = rand_map(3, 3, 2, 4);
            let g = rand_map(3, 3, 2, 5);
            let loss = |c: &Conv2d<f64>, x: &FeatureMap<f64>| -> f64 {
                c.forward(x).0.data.data.iter().zip(&g.data.data).map(|(a, b)| a * b).sum()
            };
            let (_, cols) = conv.forward(&x);
            let dx = conv.backward(&x, cols.as_ref(), &g);
            let h = 1e-6;
            for i in 0..x.data.data.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data.data[i] += h;
                xm.data.data[i] -= h;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
                assert!((fd - dx.data.data[i]).abs() < 1e-7);
            }
            for i in 0..conv.w.len() {
                let (mut cp, mut cm) = (conv.clone(), conv.clone());
                cp.w.value[i] += h;
                cm.w.value[i] -= h;
                let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
                assert!((fd - conv.w.grad[i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn pooling_and_upsampling_are_adjoint_shaped() {
        let x = rand_map(5, 3, 2, 6);
        let (y, arg) = maxpool2(&x);
        assert_eq!((y.h, y.w), (3, 2));
        let dx = maxpool2_backward(&arg, &y, 5, 3);
        // Every pooled maximum routes back to exactly its source element.
        let total: f64 = dx.data.data.iter().sum();
        assert!((total - y.data.data.iter().sum::<f64>()).abs() < 1e-12);
        let up = upsample2(&y, 5, 3);
        assert_eq!(up.data.row(4 * 3 + 2), y.data.row(2 * 2 + 1));
        let back = upsample2_backward(&up, 3, 2);
        assert_eq!(back.data.rows, 6);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut r = rng::substream(9, "init");
        let mut lin = Linear::<f64>::new(3, 2, 1.0, &mut r);
        lin.b.value = vec![0.3, -0.2];
        let x = Mat::from_vec(2, 3, vec![0.1, -0.4, 0.7, 1.2, 0.0, -0.5]);
        let g = Mat::from_vec(2, 2, vec![0.5, -1.0, 0.25, 2.0]);
        let loss = |l: &Linear<f64>| -> f64 { l.forward(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum() };
        lin.backward(&x, &g);
        let h = 1e-6;
        for i in 0..2 {
            let (mut p, mut m) = (lin.clone(), lin.clone());
            p.b.value[i] += h;
            m.b.value[i] -= h;
            assert!(((loss(&p) - loss(&m)) / (2.0 * h) - lin.b.grad[i]).abs() < 1e-8);
        }
    }
}
