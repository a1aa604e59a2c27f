//! Segmentation, cross-modal, pseudo-label and entropy losses, and the
//! per-stream objectives built from them.
//!
//! Every loss comes in two forms: a value-only function and a `*_grad`
//! variant that also adds `scale · ∂loss/∂input` into a gradient buffer. The
//! cross-modal loss treats its first argument (the main prediction) as a
//! constant, so its gradient only reaches the mimicry prediction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::{FusionPredictions, PredictionSet};
use crate::sample::IGNORE;
use crate::tensor::{Mat, Real};

/// Probability floor inside logarithms.
pub const EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("every label is ignored")]
    AllIgnored,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {0} outside [0, {1})")]
    InvalidLabel(i32, usize),
}

fn default_one() -> f64 {
    1.0
}
fn default_tenth() -> f64 {
    0.1
}
fn default_ent() -> f64 {
    0.01
}

/// Weights of the loss terms. `lambda_ent` weights the entropy term of the
/// MinEnt comparison method and is unused by the cross-modal objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(default = "default_one")]
    pub lambda_s: f64,
    #[serde(default = "default_tenth")]
    pub lambda_t: f64,
    #[serde(default = "default_one")]
    pub lambda_tl: f64,
    #[serde(default = "default_tenth")]
    pub lambda_tu: f64,
    #[serde(default = "default_one")]
    pub lambda_pl: f64,
    #[serde(default = "default_ent")]
    pub lambda_ent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_s: 1.0, lambda_t: 0.1, lambda_tl: 1.0, lambda_tu: 0.1, lambda_pl: 1.0, lambda_ent: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.lambda_s, self.lambda_t, self.lambda_tl, self.lambda_tu, self.lambda_pl, self.lambda_ent];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err("loss weights must be finite and nonnegative".into())
        }
    }

    /// SSDA weights with the labeled-target weight tied to the source weight.
    pub fn ssda_tied(lambda_s: f64, lambda_tu: f64) -> Self {
        Self { lambda_s, lambda_tl: lambda_s, lambda_tu, ..Self::default() }
    }
}

/// Per-class multipliers of the segmentation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self { w: vec![1.0; classes] }
    }

    /// `1 / ln(1.02 + f_c)` with `f_c` the relative class frequency,
    /// normalized to mean 1. Ignored labels are not counted.
    pub fn log_smoothed(labels: &[i32], classes: usize) -> Self {
        let mut counts = vec![0usize; classes];
        for &y in labels {
            if y != IGNORE {
                counts[y as usize] += 1;
            }
        }
        Self::from_counts(&counts)
    }

    pub fn from_counts(counts: &[usize]) -> Self {
        let total = counts.iter().sum::<usize>().max(1) as f64;
        let raw: Vec<f64> = counts.iter().map(|&n| 1.0 / (1.02 + n as f64 / total).ln()).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        Self { w: raw.iter().map(|v| v / mean).collect() }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

fn check_labels(p_cols: usize, p_rows: usize, y: &[i32], w: &ClassWeights) -> Result<usize, LossError> {
    if y.len() != p_rows {
        return Err(LossError::ShapeMismatch(format!("{} labels for {} rows", y.len(), p_rows)));
    }
    if w.len() != p_cols {
        return Err(LossError::ShapeMismatch(format!("{} class weights for {} classes", w.len(), p_cols)));
    }
    let mut valid = 0;
    for &c in y {
        if c == IGNORE {
            continue;
        }
        if c < 0 || c as usize >= p_cols {
            return Err(LossError::InvalidLabel(c, p_cols));
        }
        valid += 1;
    }
    if valid == 0 {
        return Err(LossError::AllIgnored);
    }
    Ok(valid)
}

/// Weighted cross-entropy `−(1/N') Σ w[y] log P[n, y]` over non-ignored points.
pub fn seg_loss<T: Real>(p: &Mat<T>, y: &[i32], w: &ClassWeights) -> Result<T, LossError> {
    let valid = check_labels(p.cols, p.rows, y, w)?;
    let eps = T::lit(EPS);
    let mut sum = T::zero();
    for (n, &c) in y.iter().enumerate() {
        if c != IGNORE {
            sum += T::lit(w.w[c as usize]) * p.get(n, c as usize).max(eps).ln();
        }
    }
    Ok(-sum / T::lit(valid as f64))
}

pub fn seg_loss_grad<T: Real>(p: &Mat<T>, y: &[i32], w: &ClassWeights, scale: T, grad: &mut Mat<T>) -> Result<T, LossError> {
    let loss = seg_loss(p, y, w)?;
    let valid = y.iter().filter(|&&c| c != IGNORE).count();
    let eps = T::lit(EPS);
    let k = scale / T::lit(valid as f64);
    for (n, &c) in y.iter().enumerate() {
        if c == IGNORE {
            continue;
        }
        let v = p.get(n, c as usize);
        // Below the floor the loss is constant in P.
        if v > eps {
            grad.data[n * p.cols + c as usize] -= k * T::lit(w.w[c as usize]) / v;
        }
    }
    Ok(loss)
}

fn check_same(p: &Mat<impl Real>, q: &Mat<impl Real>) -> Result<(), LossError> {
    if (p.rows, p.cols) != (q.rows, q.cols) {
        return Err(LossError::ShapeMismatch(format!("{:?} vs {:?}", (p.rows, p.cols), (q.rows, q.cols))));
    }
    Ok(())
}

/// `(1/N) Σ_n Σ_c P log(P / Q)`, the nonnegative KL divergence of the
/// mimicry prediction `q` from the main prediction `p`.
pub fn xm_loss<T: Real>(p: &Mat<T>, q: &Mat<T>) -> Result<T, LossError> {
    check_same(p, q)?;
    if p.rows == 0 {
        return Ok(T::zero());
    }
    let eps = T::lit(EPS);
    let mut sum = T::zero();
    for (&a, &b) in p.data.iter().zip(&q.data) {
        if a > T::zero() {
            sum += a * (a.ln() - b.max(eps).ln());
        }
    }
    Ok(sum / T::lit(p.rows as f64))
}

/// Gradient with respect to `q` only.
pub fn xm_loss_grad<T: Real>(p: &Mat<T>, q: &Mat<T>, scale: T, grad_q: &mut Mat<T>) -> Result<T, LossError> {
    let loss = xm_loss(p, q)?;
    if p.rows == 0 {
        return Ok(loss);
    }
    let eps = T::lit(EPS);
    let k = scale / T::lit(p.rows as f64);
    for ((g, &a), &b) in grad_q.data.iter_mut().zip(&p.data).zip(&q.data) {
        if a > T::zero() && b > eps {
            *g -= k * a / b;
        }
    }
    Ok(loss)
}

/// Mean Shannon entropy `(1/N) Σ_n Σ_c −P log P`.
pub fn entropy_loss<T: Real>(p: &Mat<T>) -> T {
    if p.rows == 0 {
        return T::zero();
    }
    let eps = T::lit(EPS);
    let sum: T = p.data.iter().map(|&v| -v * v.max(eps).ln()).sum();
    sum / T::lit(p.rows as f64)
}

pub fn entropy_loss_grad<T: Real>(p: &Mat<T>, scale: T, grad: &mut Mat<T>) -> T {
    let loss = entropy_loss(p);
    if p.rows == 0 {
        return loss;
    }
    let eps = T::lit(EPS);
    let k = scale / T::lit(p.rows as f64);
    for (g, &v) in grad.data.iter_mut().zip(&p.data) {
        let d = if v > eps { -(v.ln() + T::one()) } else { -eps.ln() };
        *g += k * d;
    }
    loss
}

/// Per-modality pseudo-labels of one batch part.
#[derive(Clone, Copy, Debug)]
pub struct PseudoLabels<'a> {
    pub pl_2d: &'a [i32],
    pub pl_3d: &'a [i32],
}

/// One batch part (e.g. the source half) and the weights of its terms.
#[derive(Clone, Copy, Debug)]
pub struct Part<'a, T> {
    pub name: &'a str,
    pub preds: &'a PredictionSet<T>,
    pub labels: Option<&'a [i32]>,
    pub seg_weight: f64,
    pub xm_weight: f64,
    pub pseudo: Option<PseudoLabels<'a>>,
    pub pl_weight: f64,
    pub ent_weight: f64,
}

impl<'a, T> Part<'a, T> {
    pub fn new(name: &'a str, preds: &'a PredictionSet<T>) -> Self {
        Self { name, preds, labels: None, seg_weight: 0.0, xm_weight: 0.0, pseudo: None, pl_weight: 0.0, ent_weight: 0.0 }
    }
}

/// Values of both stream objectives, each term, and the gradients with
/// respect to every prediction map of every part.
#[derive(Clone, Debug)]
pub struct ObjectiveValue<T> {
    pub loss_2d: T,
    pub loss_3d: T,
    pub terms: BTreeMap<String, f64>,
    pub grads: Vec<PredictionSet<T>>,
}

/// Sums the weighted terms of every part, per stream:
///
/// * 2D: `seg(P_2D, y) + λ_xM KL(P_3D ‖ P_2D→3D) + λ_PL seg(P_2D, ŷ_2D) + λ_ent H(P_2D)`
/// * 3D: `seg(P_3D, y) + λ_xM KL(P_2D ‖ P_3D→2D) + λ_PL seg(P_3D, ŷ_3D) + λ_ent H(P_3D)`
///
/// Zero-weight terms are skipped. A pseudo-label term whose labels are all
/// ignored contributes zero.
pub fn dual_objective<T: Real>(parts: &[Part<'_, T>], cw: &ClassWeights) -> Result<ObjectiveValue<T>, LossError> {
    let mut loss_2d = T::zero();
    let mut loss_3d = T::zero();
    let mut terms = BTreeMap::new();
    let mut grads = Vec::with_capacity(parts.len());
    for part in parts {
        let p = part.preds;
        let mut g = PredictionSet::zeros_like(p);
        let name = part.name;
        if part.seg_weight != 0.0 {
            let y = part.labels.ok_or_else(|| LossError::ShapeMismatch(format!("{name}: segmentation term without labels")))?;
            let s = T::lit(part.seg_weight);
            let a = seg_loss_grad(&p.p_2d, y, cw, s, &mut g.p_2d)?;
            let b = seg_loss_grad(&p.p_3d, y, cw, s, &mut g.p_3d)?;
            loss_2d += s * a;
            loss_3d += s * b;
            terms.insert(format!("{name}/seg_2d"), a.as_f64());
            terms.insert(format!("{name}/seg_3d"), b.as_f64());
        }
        if part.xm_weight != 0.0 {
            let s = T::lit(part.xm_weight);
            let a = xm_loss_grad(&p.p_3d, &p.p_2d_to_3d, s, &mut g.p_2d_to_3d)?;
            let b = xm_loss_grad(&p.p_2d, &p.p_3d_to_2d, s, &mut g.p_3d_to_2d)?;
            loss_2d += s * a;
            loss_3d += s * b;
            terms.insert(format!("{name}/xm_2d"), a.as_f64());
            terms.insert(format!("{name}/xm_3d"), b.as_f64());
        }
        if part.pl_weight != 0.0 {
            let pl = part.pseudo.ok_or_else(|| LossError::ShapeMismatch(format!("{name}: pseudo-label term without labels")))?;
            let s = T::lit(part.pl_weight);
            let zero_if_empty = |r: Result<T, LossError>| match r {
                Err(LossError::AllIgnored) => Ok(T::zero()),
                other => other,
            };
            let a = zero_if_empty(seg_loss_grad(&p.p_2d, pl.pl_2d, cw, s, &mut g.p_2d))?;
            let b = zero_if_empty(seg_loss_grad(&p.p_3d, pl.pl_3d, cw, s, &mut g.p_3d))?;
            loss_2d += s * a;
            loss_3d += s * b;
            terms.insert(format!("{name}/pl_2d"), a.as_f64());
            terms.insert(format!("{name}/pl_3d"), b.as_f64());
        }
        if part.ent_weight != 0.0 {
            let s = T::lit(part.ent_weight);
            let a = entropy_loss_grad(&p.p_2d, s, &mut g.p_2d);
            let b = entropy_loss_grad(&p.p_3d, s, &mut g.p_3d);
            loss_2d += s * a;
            loss_3d += s * b;
            terms.insert(format!("{name}/ent_2d"), a.as_f64());
            terms.insert(format!("{name}/ent_3d"), b.as_f64());
        }
        grads.push(g);
    }
    Ok(ObjectiveValue { loss_2d, loss_3d, terms, grads })
}

/// Unsupervised objective on a labeled source batch and an unlabeled target
/// batch, optionally with target pseudo-labels. Gradients are returned for
/// `[source, target]`.
pub fn uda_objective<T: Real>(
    src: &PredictionSet<T>,
    src_labels: &[i32],
    trg: &PredictionSet<T>,
    pseudo: Option<PseudoLabels<'_>>,
    weights: &LossWeights,
    cw: &ClassWeights,
) -> Result<ObjectiveValue<T>, LossError> {
    let mut s = Part::new("src", src);
    s.labels = Some(src_labels);
    s.seg_weight = 1.0;
    s.xm_weight = weights.lambda_s;
    let mut t = Part::new("trg", trg);
    t.xm_weight = weights.lambda_t;
    if pseudo.is_some() {
        t.pseudo = pseudo;
        t.pl_weight = weights.lambda_pl;
    }
    dual_objective(&[s, t], cw)
}

/// Semi-supervised objective on source, labeled-target and unlabeled-target
/// batches. Gradients are returned for `[source, labeled, unlabeled]`.
#[allow(clippy::too_many_arguments)]
pub fn ssda_objective<T: Real>(
    src: &PredictionSet<T>,
    src_labels: &[i32],
    tl: &PredictionSet<T>,
    tl_labels: &[i32],
    tu: &PredictionSet<T>,
    pseudo: Option<PseudoLabels<'_>>,
    weights: &LossWeights,
    cw: &ClassWeights,
) -> Result<ObjectiveValue<T>, LossError> {
    let mut s = Part::new("src", src);
    s.labels = Some(src_labels);
    s.seg_weight = 1.0;
    s.xm_weight = weights.lambda_s;
    let mut l = Part::new("trg_l", tl);
    l.labels = Some(tl_labels);
    l.seg_weight = 1.0;
    l.xm_weight = weights.lambda_tl;
    let mut u = Part::new("trg_u", tu);
    u.xm_weight = weights.lambda_tu;
    if pseudo.is_some() {
        u.pseudo = pseudo;
        u.pl_weight = weights.lambda_pl;
    }
    dual_objective(&[s, l, u], cw)
}

/// One batch part of a fusion model.
#[derive(Clone, Copy, Debug)]
pub struct FusionPart<'a, T> {
    pub name: &'a str,
    pub preds: &'a FusionPredictions<T>,
    pub labels: Option<&'a [i32]>,
    pub seg_weight: f64,
    /// Weight of `KL(P_fuse ‖ P_2D→fuse) + KL(P_fuse ‖ P_3D→fuse)`.
    pub xm_weight: f64,
}

#[derive(Clone, Debug)]
pub struct FusionObjectiveValue<T> {
    pub loss: T,
    pub terms: BTreeMap<String, f64>,
    pub grads: Vec<FusionPredictions<T>>,
}

pub fn fusion_objective<T: Real>(parts: &[FusionPart<'_, T>], cw: &ClassWeights) -> Result<FusionObjectiveValue<T>, LossError> {
    let mut loss = T::zero();
    let mut terms = BTreeMap::new();
    let mut grads = Vec::with_capacity(parts.len());
    for part in parts {
        let p = part.preds;
        let mut g = FusionPredictions::zeros_like(p);
        let name = part.name;
        if part.seg_weight != 0.0 {
            let y = part.labels.ok_or_else(|| LossError::ShapeMismatch(format!("{name}: segmentation term without labels")))?;
            let s = T::lit(part.seg_weight);
            let a = seg_loss_grad(&p.p_fuse, y, cw, s, &mut g.p_fuse)?;
            loss += s * a;
            terms.insert(format!("{name}/seg_fuse"), a.as_f64());
        }
        if part.xm_weight != 0.0 {
            let s = T::lit(part.xm_weight);
            if let (Some(q), Some(gq)) = (&p.p_2d_to_fuse, &mut g.p_2d_to_fuse) {
                let a = xm_loss_grad(&p.p_fuse, q, s, gq)?;
                loss += s * a;
                terms.insert(format!("{name}/xm_2d"), a.as_f64());
            }
            if let (Some(q), Some(gq)) = (&p.p_3d_to_fuse, &mut g.p_3d_to_fuse) {
                let a = xm_loss_grad(&p.p_fuse, q, s, gq)?;
                loss += s * a;
                terms.insert(format!("{name}/xm_3d"), a.as_f64());
            }
        }
        grads.push(g);
    }
    Ok(FusionObjectiveValue { loss, terms, grads })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Mat<f64> {
        Mat::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn seg_loss_trivial_cases() {
        let p = m(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(seg_loss(&p, &[0, 2], &ClassWeights::uniform(3)).unwrap(), 0.0);
        let u = Mat::filled(4, 3, 1.0 / 3.0);
        assert!((seg_loss(&u, &[0, 1, 2, -1], &ClassWeights::uniform(3)).unwrap() - 3f64.ln()).abs() < 1e-15);
        assert_eq!(seg_loss(&u, &[-1, -1, -1, -1], &ClassWeights::uniform(3)), Err(LossError::AllIgnored));
    }

    #[test]
    fn kl_hand_value() {
        let p = m(1, 2, &[1.0, 0.0]);
        let q = m(1, 2, &[0.5, 0.5]);
        assert!((xm_loss(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(xm_loss(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn entropy_extremes() {
        assert_eq!(entropy_loss(&m(1, 3, &[0.0, 1.0, 0.0])), 0.0);
        assert!((entropy_loss(&Mat::filled(2, 4, 0.25)) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn class_weights_favor_rare_classes() {
        let w = ClassWeights::from_counts(&[100, 10, 1000, 0]);
        assert!(w.w[3] > w.w[1] && w.w[1] > w.w[0] && w.w[0] > w.w[2]);
        assert!((w.w.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_leave_only_source_segmentation() {
        let p = m(2, 2, &[0.7, 0.3, 0.2, 0.8]);
        let q = m(2, 2, &[0.4, 0.6, 0.9, 0.1]);
        let set = PredictionSet { p_2d: p.clone(), p_3d: q.clone(), p_2d_to_3d: q.clone(), p_3d_to_2d: p.clone() };
        let w = LossWeights { lambda_s: 0.0, lambda_t: 0.0, lambda_pl: 0.0, ..Default::default() };
        let cw = ClassWeights::uniform(2);
        let pl = PseudoLabels { pl_2d: &[0, 1], pl_3d: &[1, 1] };
        let v = uda_objective(&set, &[0, 1], &set, Some(pl), &w, &cw).unwrap();
        assert_eq!(v.loss_2d, seg_loss(&p, &[0, 1], &cw).unwrap());
        assert_eq!(v.loss_3d, seg_loss(&q, &[0, 1], &cw).unwrap());
    }

    #[test]
    fn all_ignored_pseudo_labels_contribute_nothing() {
        let p = m(2, 2, &[0.7, 0.3, 0.2, 0.8]);
        let set = PredictionSet { p_2d: p.clone(), p_3d: p.clone(), p_2d_to_3d: p.clone(), p_3d_to_2d: p.clone() };
        let cw = ClassWeights::uniform(2);
        let pl = PseudoLabels { pl_2d: &[-1, -1], pl_3d: &[-1, -1] };
        let with = uda_objective(&set, &[0, 1], &set, Some(pl), &LossWeights::default(), &cw).unwrap();
        let without = uda_objective(&set, &[0, 1], &set, None, &LossWeights::default(), &cw).unwrap();
        assert_eq!(with.loss_2d, without.loss_2d);
        assert_eq!(with.grads[1], without.grads[1]);
    }
}
