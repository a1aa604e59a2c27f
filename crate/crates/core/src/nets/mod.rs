//! The two modality streams, their segmentation heads and the fusion variants.
//!
//! Parameters live in three disjoint groups, named by the first component of
//! their path: `2d` (image stream and its heads), `3d` (point stream and its
//! heads) and `fusion`.

pub mod checkpoint;
pub mod layers;
pub mod sparse;
pub mod stream2d;
pub mod stream3d;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{lift_2d_features, pixel_index, GeometryError};
use crate::rng::{self, Rng};
use crate::sample::Sample;
use crate::tensor::{softmax_backward, softmax_rows, Mat, Real};
use layers::{head_bound, he_bound, join, relu, relu_backward, FeatureMap, Linear, Module, Param};
use sparse::{scatter_rows, VoxelHierarchy};
pub use stream2d::{Stream2D, Stream2DConfig};
pub use stream3d::{Stream3D, Stream3DConfig, HEIGHT_SCALE};

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("empty sample")]
    EmptySample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Separate main and mimicry heads per stream.
    Dual,
    /// The mimicry prediction is the main prediction.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Concatenated features → linear + rectifier → linear + softmax.
    Vanilla,
    /// Vanilla plus one mimicry head per modality predicting the fused output.
    XmudaFusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Width of the mixing layer.
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub stream2d: Stream2DConfig,
    pub stream3d: Stream3DConfig,
    pub head: HeadMode,
    /// Fusion models replace the per-stream heads with one fused head.
    pub fusion: Option<FusionConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            stream2d: Stream2DConfig::default(),
            stream3d: Stream3DConfig::default(),
            head: HeadMode::Dual,
            fusion: None,
        }
    }
}

/// A sample converted into network inputs, with no access to its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub key: String,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub pixel_uv: Vec<[f64; 2]>,
    /// Flat pixel index of every point.
    pub pixels: Vec<u32>,
    pub point_features: Vec<f32>,
    pub hier: VoxelHierarchy,
}

impl PreparedSample {
    pub fn new(sample: &Sample, cfg: &Stream3DConfig) -> Result<Self, NetError> {
        if sample.is_empty() {
            return Err(NetError::EmptySample);
        }
        if !sample.check_consistent() {
            return Err(NetError::ShapeMismatch("labels, points and pixels differ in length".into()));
        }
        let (h, w) = (sample.image.height, sample.image.width);
        let pixels = sample
            .pixel_uv
            .iter()
            .map(|&uv| pixel_index(uv, h, w).map(|i| i as u32))
            .collect::<Result<Vec<_>, _>>()?;
        let mut point_features = Vec::with_capacity(sample.len() * stream3d::POINT_FEATURES);
        for (i, p) in sample.cloud.coords.iter().enumerate() {
            let intensity = sample.cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
            point_features.push(intensity as f32);
            point_features.push((p[2] / HEIGHT_SCALE) as f32);
        }
        Ok(Self {
            key: sample.key(),
            height: h,
            width: w,
            image: sample.image.data.clone(),
            pixel_uv: sample.pixel_uv.clone(),
            pixels,
            point_features,
            hier: VoxelHierarchy::build(&sample.cloud, cfg.voxel_size, cfg.levels())?,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Main and mimicry heads on top of one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct DualHead<T> {
    pub main: Linear<T>,
    /// `None` in single-head mode.
    pub mimic: Option<Linear<T>>,
}

impl<T: Real> DualHead<T> {
    pub fn new(features: usize, classes: usize, mode: HeadMode, rng: &mut Rng) -> Self {
        let main = Linear::new(features, classes, head_bound(features), rng);
        let mimic = (mode == HeadMode::Dual).then(|| Linear::new(features, classes, head_bound(features), rng));
        Self { main, mimic }
    }
}

impl<T: Real> Module<T> for DualHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.main.visit(&join(prefix, "main"), f);
        if let Some(m) = &self.mimic {
            m.visit(&join(prefix, "mimic"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.main.visit_mut(&join(prefix, "main"), f);
        if let Some(m) = &mut self.mimic {
            m.visit_mut(&join(prefix, "mimic"), f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead<T> {
    pub mode: FusionMode,
    pub mix: Linear<T>,
    pub out: Linear<T>,
    pub mimic_2d: Option<Linear<T>>,
    pub mimic_3d: Option<Linear<T>>,
}

impl<T: Real> FusionHead<T> {
    pub fn new(f2: usize, f3: usize, classes: usize, cfg: &FusionConfig, rng: &mut Rng) -> Self {
        let mix = Linear::new(f2 + f3, cfg.width, he_bound(f2 + f3), rng);
        let out = Linear::new(cfg.width, classes, head_bound(cfg.width), rng);
        let (mimic_2d, mimic_3d) = match cfg.mode {
            FusionMode::Vanilla => (None, None),
            FusionMode::XmudaFusion => (
                Some(Linear::new(f2, classes, head_bound(f2), rng)),
                Some(Linear::new(f3, classes, head_bound(f3), rng)),
            ),
        };
        Self { mode: cfg.mode, mix, out, mimic_2d, mimic_3d }
    }
}

impl<T: Real> Module<T> for FusionHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.mix.visit(&join(prefix, "mix"), f);
        self.out.visit(&join(prefix, "out"), f);
        if let Some(m) = &self.mimic_2d {
            m.visit(&join(prefix, "mimic_2d"), f);
        }
        if let Some(m) = &self.mimic_3d {
            m.visit(&join(prefix, "mimic_3d"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.mix.visit_mut(&join(prefix, "mix"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
        if let Some(m) = &mut self.mimic_2d {
            m.visit_mut(&join(prefix, "mimic_2d"), f);
        }
        if let Some(m) = &mut self.mimic_3d {
            m.visit_mut(&join(prefix, "mimic_3d"), f);
        }
    }
}

/// The four per-point probability maps of the dual-head architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet<T> {
    pub p_2d: Mat<T>,
    pub p_3d: Mat<T>,
    /// Mimicry head of the 2D stream, estimating `p_3d`.
    pub p_2d_to_3d: Mat<T>,
    /// Mimicry head of the 3D stream, estimating `p_2d`.
    pub p_3d_to_2d: Mat<T>,
}

impl<T: Real> PredictionSet<T> {
    pub fn zeros_like(other: &Self) -> Self {
        let z = |m: &Mat<T>| Mat::zeros(m.rows, m.cols);
        Self { p_2d: z(&other.p_2d), p_3d: z(&other.p_3d), p_2d_to_3d: z(&other.p_2d_to_3d), p_3d_to_2d: z(&other.p_3d_to_2d) }
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        Self {
            p_2d: self.p_2d.slice_rows(start, len),
            p_3d: self.p_3d.slice_rows(start, len),
            p_2d_to_3d: self.p_2d_to_3d.slice_rows(start, len),
            p_3d_to_2d: self.p_3d_to_2d.slice_rows(start, len),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionPredictions<T> {
    pub p_fuse: Mat<T>,
    pub p_2d_to_fuse: Option<Mat<T>>,
    pub p_3d_to_fuse: Option<Mat<T>>,
}

impl<T: Real> FusionPredictions<T> {
    pub fn zeros_like(other: &Self) -> Self {
        let z = |m: &Mat<T>| Mat::zeros(m.rows, m.cols);
        Self {
            p_fuse: z(&other.p_fuse),
            p_2d_to_fuse: other.p_2d_to_fuse.as_ref().map(z),
            p_3d_to_fuse: other.p_3d_to_fuse.as_ref().map(z),
        }
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        Self {
            p_fuse: self.p_fuse.slice_rows(start, len),
            p_2d_to_fuse: self.p_2d_to_fuse.as_ref().map(|m| m.slice_rows(start, len)),
            p_3d_to_fuse: self.p_3d_to_fuse.as_ref().map(|m| m.slice_rows(start, len)),
        }
    }
}

/// Network outputs for a batch, rows concatenated in batch order. The same
/// type carries loss gradients with respect to each map.
#[derive(Clone, Debug, PartialEq)]
pub enum Outputs<T> {
    Dual(PredictionSet<T>),
    Fusion(FusionPredictions<T>),
}

impl<T: Real> Outputs<T> {
    pub fn zeros_like(&self) -> Self {
        match self {
            Outputs::Dual(p) => Outputs::Dual(PredictionSet::zeros_like(p)),
            Outputs::Fusion(p) => Outputs::Fusion(FusionPredictions::zeros_like(p)),
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            Outputs::Dual(p) => p.p_2d.rows,
            Outputs::Fusion(p) => p.p_fuse.rows,
        }
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        match self {
            Outputs::Dual(p) => Outputs::Dual(p.slice_rows(start, len)),
            Outputs::Fusion(p) => Outputs::Fusion(p.slice_rows(start, len)),
        }
    }

    pub fn dual(&self) -> Option<&PredictionSet<T>> {
        match self {
            Outputs::Dual(p) => Some(p),
            Outputs::Fusion(_) => None,
        }
    }

    pub fn fusion(&self) -> Option<&FusionPredictions<T>> {
        match self {
            Outputs::Fusion(p) => Some(p),
            Outputs::Dual(_) => None,
        }
    }
}

/// Elementwise mean of two probability maps.
pub fn ensemble<T: Real>(p_2d: &Mat<T>, p_3d: &Mat<T>) -> Result<Mat<T>, NetError> {
    if p_2d.shape() != p_3d.shape() {
        return Err(NetError::ShapeMismatch(format!("{:?} vs {:?}", p_2d.shape(), p_3d.shape())));
    }
    let half = T::lit(0.5);
    Ok(Mat::from_vec(p_2d.rows, p_2d.cols, p_2d.data.iter().zip(&p_3d.data).map(|(&a, &b)| (a + b) * half).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub stream_2d: Stream2D<T>,
    pub stream_3d: Stream3D<T>,
    pub head_2d: Option<DualHead<T>>,
    pub head_3d: Option<DualHead<T>>,
    pub fusion: Option<FusionHead<T>>,
}

/// Everything the backward pass needs from one batch forward.
pub struct ForwardCache<T> {
    c2d: Vec<stream2d::Cache2D<T>>,
    c3d: stream3d::Cache3D<T>,
    /// The batch's voxel hierarchies, concatenated.
    hier: VoxelHierarchy,
    offsets: Vec<usize>,
    f2: Mat<T>,
    f3: Mat<T>,
    fusion_in: Option<Mat<T>>,
    fusion_hidden: Option<Mat<T>>,
}

impl<T: Real> Model<T> {
    /// Fresh parameters drawn from the `init` substream of `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = rng::substream(seed, rng::INIT);
        Self::with_rng(cfg, &mut rng)
    }

    pub fn with_rng(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let stream_2d = Stream2D::new(&cfg.stream2d, rng);
        let stream_3d = Stream3D::new(&cfg.stream3d, rng);
        let c = cfg.num_classes;
        let (f2, f3) = (stream_2d.out_dim(), stream_3d.out_dim());
        let (head_2d, head_3d, fusion) = match &cfg.fusion {
            None => (Some(DualHead::new(f2, c, cfg.head, rng)), Some(DualHead::new(f3, c, cfg.head, rng)), None),
            Some(fc) => (None, None, Some(FusionHead::new(f2, f3, c, fc, rng))),
        };
        Self { cfg: cfg.clone(), stream_2d, stream_3d, head_2d, head_3d, fusion }
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    /// Per-point features of both streams for a batch, rows concatenated.
    #[allow(clippy::type_complexity)]
    fn features(
        &self,
        batch: &[&PreparedSample],
    ) -> Result<(Mat<T>, Mat<T>, Vec<stream2d::Cache2D<T>>, stream3d::Cache3D<T>, VoxelHierarchy, Vec<usize>), NetError> {
        if batch.is_empty() {
            return Err(NetError::ShapeMismatch("empty batch".into()));
        }
        let mut f2_parts = Vec::with_capacity(batch.len());
        let mut c2d = Vec::with_capacity(batch.len());
        let mut offsets = Vec::with_capacity(batch.len() + 1);
        offsets.push(0);
        for s in batch {
            let (map, cache) = self.stream_2d.forward(&s.image, s.height, s.width);
            let lifted = lift_2d_features(&map.data.data, map.h, map.w, map.channels(), &s.pixel_uv)?;
            if lifted.rows != s.hier.point_voxel.len() {
                return Err(NetError::ShapeMismatch(format!("{}: {} lifted rows vs {} points", s.key, lifted.rows, s.hier.point_voxel.len())));
            }
            offsets.push(offsets.last().unwrap() + lifted.rows);
            f2_parts.push(lifted);
            c2d.push(cache);
        }
        let f2 = Mat::vstack(&f2_parts.iter().collect::<Vec<_>>());
        // The 3D stream runs once over the disjoint union of the batch's clouds.
        let hier = VoxelHierarchy::concat(&batch.iter().map(|s| &s.hier).collect::<Vec<_>>());
        let features: Vec<f32> = batch.iter().flat_map(|s| s.point_features.iter().copied()).collect();
        let (f3, c3d) = self.stream_3d.forward(&features, &hier);
        Ok((f2, f3, c2d, c3d, hier, offsets))
    }

    pub fn forward(&self, batch: &[&PreparedSample]) -> Result<(Outputs<T>, ForwardCache<T>), NetError> {
        let (f2, f3, c2d, c3d, hier, offsets) = self.features(batch)?;
        let mut cache = ForwardCache { c2d, c3d, hier, offsets, f2, f3, fusion_in: None, fusion_hidden: None };
        let out = match &self.fusion {
            None => {
                let (h2, h3) = (self.head_2d.as_ref().unwrap(), self.head_3d.as_ref().unwrap());
                let p_2d = softmax_rows(&h2.main.forward(&cache.f2));
                let p_3d = softmax_rows(&h3.main.forward(&cache.f3));
                let p_2d_to_3d = h2.mimic.as_ref().map_or_else(|| p_2d.clone(), |m| softmax_rows(&m.forward(&cache.f2)));
                let p_3d_to_2d = h3.mimic.as_ref().map_or_else(|| p_3d.clone(), |m| softmax_rows(&m.forward(&cache.f3)));
                Outputs::Dual(PredictionSet { p_2d, p_3d, p_2d_to_3d, p_3d_to_2d })
            }
            Some(fh) => {
                let x = Mat::hcat(&cache.f2, &cache.f3);
                let hidden = relu(fh.mix.forward(&x));
                let p_fuse = softmax_rows(&fh.out.forward(&hidden));
                let p_2d_to_fuse = fh.mimic_2d.as_ref().map(|m| softmax_rows(&m.forward(&cache.f2)));
                let p_3d_to_fuse = fh.mimic_3d.as_ref().map(|m| softmax_rows(&m.forward(&cache.f3)));
                cache.fusion_in = Some(x);
                cache.fusion_hidden = Some(hidden);
                Outputs::Fusion(FusionPredictions { p_fuse, p_2d_to_fuse, p_3d_to_fuse })
            }
        };
        Ok((out, cache))
    }

    /// Inference only; identical numbers to [`Model::forward`].
    pub fn predict(&self, batch: &[&PreparedSample]) -> Result<Outputs<T>, NetError> {
        Ok(self.forward(batch)?.0)
    }

    /// Accumulates parameter gradients for the loss gradients `grads` taken
    /// with respect to the probability maps in `outputs`.
    pub fn backward(&mut self, batch: &[&PreparedSample], cache: ForwardCache<T>, outputs: &Outputs<T>, grads: &Outputs<T>) {
        let (mut d_f2, mut d_f3) = (Mat::zeros(cache.f2.rows, cache.f2.cols), Mat::zeros(cache.f3.rows, cache.f3.cols));
        match (outputs, grads) {
            (Outputs::Dual(p), Outputs::Dual(g)) => {
                let h2 = self.head_2d.as_mut().expect("dual model");
                head_backward(h2, &cache.f2, &p.p_2d, &g.p_2d, &p.p_2d_to_3d, &g.p_2d_to_3d, &mut d_f2);
                let h3 = self.head_3d.as_mut().expect("dual model");
                head_backward(h3, &cache.f3, &p.p_3d, &g.p_3d, &p.p_3d_to_2d, &g.p_3d_to_2d, &mut d_f3);
            }
            (Outputs::Fusion(p), Outputs::Fusion(g)) => {
                let fh = self.fusion.as_mut().expect("fusion model");
                let d_logits = softmax_backward(&p.p_fuse, &g.p_fuse);
                let hidden = cache.fusion_hidden.as_ref().unwrap();
                let d_hidden = relu_backward(hidden, fh.out.backward(hidden, &d_logits));
                let d_x = fh.mix.backward(cache.fusion_in.as_ref().unwrap(), &d_hidden);
                let (a, b) = d_x.hsplit(cache.f2.cols);
                d_f2.add_assign(&a);
                d_f3.add_assign(&b);
                if let (Some(m), Some(pp), Some(gg)) = (&mut fh.mimic_2d, &p.p_2d_to_fuse, &g.p_2d_to_fuse) {
                    d_f2.add_assign(&m.backward(&cache.f2, &softmax_backward(pp, gg)));
                }
                if let (Some(m), Some(pp), Some(gg)) = (&mut fh.mimic_3d, &p.p_3d_to_fuse, &g.p_3d_to_fuse) {
                    d_f3.add_assign(&m.backward(&cache.f3, &softmax_backward(pp, gg)));
                }
            }
            _ => panic!("gradient layout does not match the outputs"),
        }
        // Inputs without gradient would only add zeros.
        for (i, c2) in cache.c2d.iter().enumerate() {
            let s = batch[i];
            let (start, end) = (cache.offsets[i], cache.offsets[i + 1]);
            let g2 = d_f2.slice_rows(start, end - start);
            if g2.data.iter().any(|v| *v != T::zero()) {
                let d_map = scatter_rows(&g2, &s.pixels, s.height * s.width);
                self.stream_2d.backward(c2, FeatureMap { h: s.height, w: s.width, data: d_map });
            }
        }
        if d_f3.data.iter().any(|v| *v != T::zero()) {
            self.stream_3d.backward(&cache.c3d, &cache.hier, d_f3);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    /// Number of scalar parameters per group.
    pub fn group_sizes(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        self.visit("", &mut |path, p| {
            let g = group_of(path).to_string();
            match out.iter_mut().find(|(n, _)| *n == g) {
                Some((_, c)) => *c += p.len(),
                None => out.push((g, p.len())),
            }
        });
        out
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut m = Model::<U>::with_rng(&self.cfg, &mut rng::substream(0, rng::INIT));
        let mut values = Vec::new();
        self.visit("", &mut |_, p| values.push(p.value.iter().map(|v| U::lit(v.as_f64())).collect::<Vec<_>>()));
        let mut it = values.into_iter();
        m.visit_mut("", &mut |_, p| p.value = it.next().expect("same architecture"));
        m
    }
}

/// Group (`2d`, `3d` or `fusion`) of a parameter path.
pub fn group_of(path: &str) -> &str {
    path.split('.').next().unwrap_or(path)
}

fn head_backward<T: Real>(
    head: &mut DualHead<T>,
    f: &Mat<T>,
    p_main: &Mat<T>,
    g_main: &Mat<T>,
    p_mimic: &Mat<T>,
    g_mimic: &Mat<T>,
    d_f: &mut Mat<T>,
) {
    match &mut head.mimic {
        Some(m) => {
            d_f.add_assign(&head.main.backward(f, &softmax_backward(p_main, g_main)));
            d_f.add_assign(&m.backward(f, &softmax_backward(p_mimic, g_mimic)));
        }
        None => {
            let mut g = g_main.clone();
            g.add_assign(g_mimic);
            d_f.add_assign(&head.main.backward(f, &softmax_backward(p_main, &g)));
        }
    }
}

impl<T: Real> Module<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stream_2d.visit(&join(prefix, "2d.stream"), f);
        if let Some(h) = &self.head_2d {
            h.visit(&join(prefix, "2d.head"), f);
        }
        self.stream_3d.visit(&join(prefix, "3d.stream"), f);
        if let Some(h) = &self.head_3d {
            h.visit(&join(prefix, "3d.head"), f);
        }
        if let Some(h) = &self.fusion {
            h.visit(&join(prefix, "fusion"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stream_2d.visit_mut(&join(prefix, "2d.stream"), f);
        if let Some(h) = &mut self.head_2d {
            h.visit_mut(&join(prefix, "2d.head"), f);
        }
        self.stream_3d.visit_mut(&join(prefix, "3d.stream"), f);
        if let Some(h) = &mut self.head_3d {
            h.visit_mut(&join(prefix, "3d.head"), f);
        }
        if let Some(h) = &mut self.fusion {
            h.visit_mut(&join(prefix, "fusion"), f);
        }
    }
}
