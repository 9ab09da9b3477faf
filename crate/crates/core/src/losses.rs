//! Joint refinement loss: relative squared depth error plus cross-entropy,
//! both averaged over the valid pixels only.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixels that carry both a depth and a label annotation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    count: usize,
}

impl ValidMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask for {height}x{width} needs {} entries, got {}",
                height * width,
                bits.len()
            )));
        }
        let count = bits.iter().filter(|&&b| b).count();
        Ok(Self { height, width, bits, count })
    }

    pub fn all_valid(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width], count: height * width }
    }

    /// Number of valid pixels.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn is_valid(&self, pixel: usize) -> bool {
        self.bits[pixel]
    }

    pub fn valid_pixels(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

/// Ground-truth depth (meters), class labels and the valid mask of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth<T> {
    depth: Tensor<T>,
    labels: Vec<u32>,
    mask: ValidMask,
}

impl<T: Scalar> GroundTruth<T> {
    /// Validates shapes and that depth is strictly positive on valid pixels.
    pub fn new(depth: Tensor<T>, labels: Vec<u32>, mask: ValidMask) -> Result<Self> {
        let (c, h, w) = depth.shape();
        if c != 1 {
            return Err(Error::Shape(format!("ground-truth depth must have 1 channel, got {c}")));
        }
        if labels.len() != h * w {
            return Err(Error::Shape(format!("label map has {} pixels, depth map has {}", labels.len(), h * w)));
        }
        if mask.height() != h || mask.width() != w {
            return Err(Error::Shape(format!("mask is {}x{}, depth map is {h}x{w}", mask.height(), mask.width())));
        }
        for p in mask.valid_pixels() {
            let d = depth.data()[p];
            if !d.is_finite() || d <= T::zero() {
                return Err(Error::Data(format!(
                    "ground-truth depth {d} at valid pixel {p} must be positive and finite"
                )));
            }
        }
        Ok(Self { depth, labels, mask })
    }

    pub fn depth(&self) -> &Tensor<T> {
        &self.depth
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn mask(&self) -> &ValidMask {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn cast<U: Scalar>(&self) -> GroundTruth<U> {
        GroundTruth { depth: self.depth.cast(), labels: self.labels.clone(), mask: self.mask.clone() }
    }

    /// Errors if any valid pixel carries a label outside `0..num_classes`.
    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        for p in self.mask.valid_pixels() {
            if self.labels[p] as usize >= num_classes {
                return Err(Error::Data(format!(
                    "label {} at pixel {p} is not below the class count {num_classes}",
                    self.labels[p]
                )));
            }
        }
        Ok(())
    }

    fn require_valid(&self) -> Result<usize> {
        match self.mask.count() {
            0 => Err(Error::Data("ground truth has no valid pixels".into())),
            n => Ok(n),
        }
    }
}

fn check_depth_pred<T: Scalar>(pred: &Tensor<T>, gt: &GroundTruth<T>) -> Result<()> {
    if pred.shape() != gt.depth.shape() {
        return Err(Error::Shape(format!(
            "depth prediction {:?} does not match ground truth {:?}",
            pred.shape(),
            gt.depth.shape()
        )));
    }
    Ok(())
}

fn check_logits<T: Scalar>(logits: &Tensor<T>, gt: &GroundTruth<T>) -> Result<()> {
    if logits.height() != gt.height() || logits.width() != gt.width() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match the {}x{} ground truth",
            logits.shape(),
            gt.height(),
            gt.width()
        )));
    }
    gt.check_labels(logits.channels())
}

/// `(1/n) Σ (D' − D*)² / D*` over valid pixels.
pub fn depth_loss<T: Scalar>(pred: &Tensor<T>, gt: &GroundTruth<T>) -> Result<f64> {
    check_depth_pred(pred, gt)?;
    let n = gt.require_valid()?;
    let p = pred.data();
    let d = gt.depth.data();
    let total: f64 = gt
        .mask
        .valid_pixels()
        .map(|i| {
            let diff = p[i].widen() - d[i].widen();
            diff * diff / d[i].widen()
        })
        .sum();
    Ok(total / n as f64)
}

/// d(depth_loss)/dD' scaled by `upstream`.
pub fn depth_loss_grad<T: Scalar>(pred: &Tensor<T>, gt: &GroundTruth<T>, upstream: f64) -> Result<Tensor<T>> {
    check_depth_pred(pred, gt)?;
    let n = gt.require_valid()? as f64;
    let mut g = Tensor::zeros_like(pred);
    let p = pred.data();
    let d = gt.depth.data();
    let gd = g.data_mut();
    for i in gt.mask.valid_pixels() {
        gd[i] = T::narrow(upstream * 2.0 * (p[i].widen() - d[i].widen()) / (d[i].widen() * n));
    }
    Ok(g)
}

/// Log-sum-exp over the channels at `pixel`.
#[inline]
fn log_sum_exp<T: Scalar>(z: &[T], channels: usize, plane: usize, pixel: usize) -> f64 {
    let max = (0..channels).map(|c| z[c * plane + pixel].widen()).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = (0..channels).map(|c| (z[c * plane + pixel].widen() - max).exp()).sum();
    max + s.ln()
}

/// Mean cross-entropy of the true class under softmax(logits), over valid pixels.
pub fn semantic_loss<T: Scalar>(logits: &Tensor<T>, gt: &GroundTruth<T>) -> Result<f64> {
    check_logits(logits, gt)?;
    let n = gt.require_valid()?;
    let (k, h, w) = logits.shape();
    let plane = h * w;
    let z = logits.data();
    let total: f64 = gt
        .mask
        .valid_pixels()
        .map(|i| log_sum_exp(z, k, plane, i) - z[gt.labels[i] as usize * plane + i].widen())
        .sum();
    Ok(total / n as f64)
}

/// d(semantic_loss)/dz = (softmax − onehot)/n on valid pixels, scaled by `upstream`.
pub fn semantic_loss_grad<T: Scalar>(logits: &Tensor<T>, gt: &GroundTruth<T>, upstream: f64) -> Result<Tensor<T>> {
    check_logits(logits, gt)?;
    let n = gt.require_valid()? as f64;
    let (k, h, w) = logits.shape();
    let plane = h * w;
    let z = logits.data();
    let mut g = Tensor::zeros_like(logits);
    let gd = g.data_mut();
    for i in gt.mask.valid_pixels() {
        let lse = log_sum_exp(z, k, plane, i);
        let label = gt.labels[i] as usize;
        for c in 0..k {
            let prob = (z[c * plane + i].widen() - lse).exp();
            let target = if c == label { 1.0 } else { 0.0 };
            gd[c * plane + i] = T::narrow(upstream * (prob - target) / n);
        }
    }
    Ok(g)
}

/// Unweighted sum of the depth and semantic terms.
pub fn joint_loss<T: Scalar>(depth_pred: &Tensor<T>, logits: &Tensor<T>, gt: &GroundTruth<T>) -> Result<f64> {
    Ok(depth_loss(depth_pred, gt)? + semantic_loss(logits, gt)?)
}
