//! Segmentation losses recorded as single tape nodes. Each computes
//! `dL/dprobs` in closed form and maps it through the softmax Jacobian.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Smoothing added to numerator and denominator of the soft IoU so that
/// classes absent from target and prediction score 1.
pub const IOU_SMOOTH: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalIouConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub focal_weight: f64,
    pub iou_weight: f64,
    /// Average per-image soft IoU instead of pooling the whole batch.
    pub iou_per_image: bool,
}

impl Default for FocalIouConfig {
    fn default() -> Self {
        FocalIouConfig { gamma: 2.0, alpha: 1.0, focal_weight: 1.0, iou_weight: 1.0, iou_per_image: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LossConfig {
    FocalIou(FocalIouConfig),
    WeightedCe { class_weights: Vec<f64> },
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::FocalIou(FocalIouConfig::default())
    }
}

impl LossConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self {
            LossConfig::FocalIou(c) => {
                for (name, v) in [("gamma", c.gamma), ("alpha", c.alpha), ("focal_weight", c.focal_weight), ("iou_weight", c.iou_weight)] {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(Error::config(format!("loss {name} must be finite and >= 0, got {v}")));
                    }
                }
                Ok(())
            }
            LossConfig::WeightedCe { class_weights } => check_weights(class_weights, num_classes),
        }
    }
}

fn check_weights(w: &[f64], k: usize) -> Result<()> {
    if w.len() != k {
        return Err(Error::config(format!("{} class weights for {k} classes", w.len())));
    }
    if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::config(format!("class weights must be positive, got {bad}")));
    }
    Ok(())
}

/// Softmax over the class axis of `(n, K, h, w)` logits, pixel-major:
/// `probs[i * K + k]` with pixel `i = (b * h + y) * w + x`. Also returns
/// `log p` for the target class of each pixel.
struct PixelSoftmax {
    n: usize,
    k: usize,
    hw: usize,
    probs: Vec<f64>,
    log_pt: Vec<f64>,
}

fn pixel_softmax<T: Real>(logits: &Tensor<T>, target: &[u8]) -> Result<PixelSoftmax> {
    let (n, k, h, w) = logits.dims();
    let hw = h * w;
    if target.len() != n * hw {
        return Err(Error::shape(format!(
            "target has {} labels for logits {:?}",
            target.len(),
            logits.shape()
        )));
    }
    if let Some(t) = target.iter().find(|&&t| t as usize >= k) {
        return Err(Error::Label(format!("target label {t} outside [0, {k})")));
    }
    let data = logits.data();
    let mut probs = vec![0.0; n * hw * k];
    let mut log_pt = vec![0.0; n * hw];
    let mut z = vec![0.0; k];
    for b in 0..n {
        for s in 0..hw {
            let i = b * hw + s;
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = data[(b * k + c) * hw + s].to_f64();
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for c in 0..k {
                probs[i * k + c] = (z[c] - lse).exp();
            }
            log_pt[i] = z[target[i] as usize] - lse;
        }
    }
    Ok(PixelSoftmax { n, k, hw, probs, log_pt })
}

/// Loss node whose backward scales a precomputed `dL/dlogits`.
struct LossBack {
    grad: Vec<f64>,
}

impl<T: Real> Backward<T> for LossBack {
    fn backward(&self, ctx: &BackwardCtx<T>) -> Vec<Option<Vec<T>>> {
        let g = ctx.grad_out[0].to_f64();
        vec![Some(self.grad.iter().map(|v| T::from_f64(v * g)).collect())]
    }
}

impl PixelSoftmax {
    /// Maps pixel-major `dL/dprobs` to NCHW `dL/dlogits`.
    fn logits_grad(&self, dprobs: &[f64]) -> Vec<f64> {
        let (k, hw) = (self.k, self.hw);
        let mut out = vec![0.0; self.n * k * hw];
        for b in 0..self.n {
            for s in 0..hw {
                let i = b * hw + s;
                let p = &self.probs[i * k..(i + 1) * k];
                let g = &dprobs[i * k..(i + 1) * k];
                let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                for c in 0..k {
                    out[(b * k + c) * hw + s] = p[c] * (g[c] - dot);
                }
            }
        }
        out
    }
}

fn push_loss<T: Real>(tape: &mut Tape<T>, name: &'static str, logits: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
    if !value.is_finite() {
        return Err(Error::Numerical(format!("{name} evaluated to {value}")));
    }
    tape.push(name, Tensor::scalar(T::from_f64(value)), vec![logits], LossBack { grad })
}

/// `focal_weight * mean_i(-alpha (1 - p_t)^gamma ln p_t)
///  + iou_weight * mean_k(1 - soft_iou_k)`, with
/// `soft_iou_k = (sum p y + s) / (sum (p + y - p y) + s)` and `s` =
/// [`IOU_SMOOTH`].
pub fn focal_iou_loss<T: Real>(tape: &mut Tape<T>, logits: Var, target: &[u8], cfg: &FocalIouConfig) -> Result<Var> {
    tape.check(logits)?;
    LossConfig::FocalIou(cfg.clone()).validate(0)?;
    let sm = pixel_softmax(tape.value(logits), target)?;
    let (k, pixels) = (sm.k, sm.n * sm.hw);
    let mut dprobs = vec![0.0; pixels * k];

    let mut focal = 0.0;
    for i in 0..pixels {
        let t = target[i] as usize;
        let (lp, pt) = (sm.log_pt[i], sm.probs[i * k + t]);
        let q = 1.0 - pt;
        let mod_ = q.powf(cfg.gamma);
        focal += -cfg.alpha * mod_ * lp;
        // d/dp_t of -alpha (1-p)^g ln p = alpha g (1-p)^(g-1) ln p - alpha (1-p)^g / p.
        let slope = if cfg.gamma == 0.0 || q <= 0.0 { 0.0 } else { cfg.alpha * cfg.gamma * q.powf(cfg.gamma - 1.0) * lp };
        dprobs[i * k + t] += cfg.focal_weight * (slope - cfg.alpha * mod_ / pt) / pixels as f64;
    }
    focal /= pixels as f64;

    let mut iou_loss = 0.0;
    if cfg.iou_weight > 0.0 {
        let groups: Vec<(usize, usize)> = if cfg.iou_per_image {
            (0..sm.n).map(|b| (b * sm.hw, (b + 1) * sm.hw)).collect()
        } else {
            vec![(0, pixels)]
        };
        let scale = cfg.iou_weight / (k * groups.len()) as f64;
        for &(lo, hi) in &groups {
            for c in 0..k {
                let (mut inter, mut union) = (IOU_SMOOTH, IOU_SMOOTH);
                for i in lo..hi {
                    let p = sm.probs[i * k + c];
                    let y = f64::from(target[i] as usize == c);
                    inter += p * y;
                    union += p + y - p * y;
                }
                iou_loss += (1.0 - inter / union) / (k * groups.len()) as f64;
                for i in lo..hi {
                    let y = f64::from(target[i] as usize == c);
                    let d_iou = (y * union - inter * (1.0 - y)) / (union * union);
                    dprobs[i * k + c] -= scale * d_iou;
                }
            }
        }
    }
    let value = cfg.focal_weight * focal + cfg.iou_weight * iou_loss;
    let grad = sm.logits_grad(&dprobs);
    push_loss(tape, "focal_iou_loss", logits, value, grad)
}

/// `sum_i w[t_i] (-ln p_t_i) / sum_i w[t_i]`.
pub fn weighted_ce<T: Real>(tape: &mut Tape<T>, logits: Var, target: &[u8], class_weights: &[f64]) -> Result<Var> {
    tape.check(logits)?;
    let k = tape.value(logits).shape()[1];
    check_weights(class_weights, k)?;
    let sm = pixel_softmax(tape.value(logits), target)?;
    let pixels = sm.n * sm.hw;
    let norm: f64 = target.iter().map(|&t| class_weights[t as usize]).sum();
    let mut value = 0.0;
    let mut grad = vec![0.0; pixels * k];
    for i in 0..pixels {
        let t = target[i] as usize;
        let w = class_weights[t] / norm;
        value -= w * sm.log_pt[i];
        // d(-ln p_t)/dz_c = p_c - [c == t], laid out NCHW.
        let (b, s) = (i / sm.hw, i % sm.hw);
        for c in 0..k {
            let delta = f64::from(c == t);
            grad[(b * k + c) * sm.hw + s] = w * (sm.probs[i * k + c] - delta);
        }
    }
    push_loss(tape, "weighted_ce", logits, value, grad)
}

pub fn loss<T: Real>(tape: &mut Tape<T>, logits: Var, target: &[u8], cfg: &LossConfig) -> Result<Var> {
    match cfg {
        LossConfig::FocalIou(c) => focal_iou_loss(tape, logits, target, c),
        LossConfig::WeightedCe { class_weights } => weighted_ce(tape, logits, target, class_weights),
    }
}
