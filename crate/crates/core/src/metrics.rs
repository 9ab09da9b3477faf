//! Depth error/accuracy measures and segmentation IOU / pixel accuracy.
//!
//! Everything is pooled over the valid pixels of the whole evaluation set;
//! per-image values are never averaged.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::losses::GroundTruth;
use crate::model::{JrnNetwork, PredictionPair};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to predicted depth before log and ratio based measures.
pub const MIN_EVAL_DEPTH: f64 = 1e-3;

/// Accuracy thresholds 1.25, 1.25², 1.25³.
pub const DELTA_THRESHOLDS: [f64; 3] = [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    pub rel: f64,
    pub rel_sqr: f64,
    pub log10: f64,
    pub rms_linear: f64,
    pub rms_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub fn as_array(&self) -> [f64; 8] {
        [self.rel, self.rel_sqr, self.log10, self.rms_linear, self.rms_log, self.delta1, self.delta2, self.delta3]
    }
}

/// Running sums behind [`DepthMetrics`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepthAccumulator {
    count: u64,
    abs_rel: f64,
    sq_rel: f64,
    log10: f64,
    sq: f64,
    sq_log: f64,
    within: [u64; 3],
}

impl DepthAccumulator {
    pub fn add_pixel(&mut self, pred: f64, gt: f64) -> Result<()> {
        if !gt.is_finite() || gt <= 0.0 {
            return Err(Error::Data(format!("ground-truth depth {gt} must be positive")));
        }
        if !pred.is_finite() || pred < 0.0 {
            return Err(Error::Data(format!("predicted depth {pred} must be finite and non-negative")));
        }
        let diff = gt - pred;
        self.count += 1;
        self.abs_rel += diff.abs() / gt;
        self.sq_rel += diff * diff / gt;
        self.sq += diff * diff;
        let guarded = pred.max(MIN_EVAL_DEPTH);
        self.log10 += (gt.log10() - guarded.log10()).abs();
        let dl = gt.ln() - guarded.ln();
        self.sq_log += dl * dl;
        let ratio = (gt / guarded).max(guarded / gt);
        for (n, thr) in self.within.iter_mut().zip(DELTA_THRESHOLDS) {
            if ratio < thr {
                *n += 1;
            }
        }
        Ok(())
    }

    pub fn add<T: Scalar>(&mut self, pred: &Tensor<T>, gt: &GroundTruth<T>) -> Result<()> {
        if pred.shape() != gt.depth().shape() {
            return Err(Error::Shape(format!(
                "depth prediction {:?} does not match ground truth {:?}",
                pred.shape(),
                gt.depth().shape()
            )));
        }
        let (p, d) = (pred.data(), gt.depth().data());
        for i in gt.mask().valid_pixels() {
            self.add_pixel(p[i].widen(), d[i].widen())?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        self.count += other.count;
        self.abs_rel += other.abs_rel;
        self.sq_rel += other.sq_rel;
        self.log10 += other.log10;
        self.sq += other.sq;
        self.sq_log += other.sq_log;
        for (a, b) in self.within.iter_mut().zip(other.within) {
            *a += b;
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(&self) -> Result<DepthMetrics> {
        if self.count == 0 {
            return Err(Error::Data("no valid pixels to evaluate".into()));
        }
        let n = self.count as f64;
        Ok(DepthMetrics {
            rel: self.abs_rel / n,
            rel_sqr: self.sq_rel / n,
            log10: self.log10 / n,
            rms_linear: (self.sq / n).sqrt(),
            rms_log: (self.sq_log / n).sqrt(),
            delta1: self.within[0] as f64 / n,
            delta2: self.within[1] as f64 / n,
            delta3: self.within[2] as f64 / n,
        })
    }
}

pub fn depth_metrics<T: Scalar>(pred: &Tensor<T>, gt: &GroundTruth<T>) -> Result<DepthMetrics> {
    let mut acc = DepthAccumulator::default();
    acc.add(pred, gt)?;
    acc.finish()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    /// IOU per class; `None` where the class is absent from both label maps.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
}

/// `k × k` counts, rows indexed by ground truth, columns by prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn add_pair(&mut self, gt: usize, pred: usize) -> Result<()> {
        if gt >= self.k || pred >= self.k {
            return Err(Error::Data(format!("label pair ({gt}, {pred}) outside {} classes", self.k)));
        }
        self.counts[gt * self.k + pred] += 1;
        Ok(())
    }

    /// Adds the argmax labels of `probs` against `gt` over valid pixels.
    pub fn add<T: Scalar>(&mut self, probs: &Tensor<T>, gt: &GroundTruth<T>) -> Result<()> {
        let (k, h, w) = probs.shape();
        if k != self.k {
            return Err(Error::Shape(format!("prediction has {k} classes, matrix has {}", self.k)));
        }
        if h != gt.height() || w != gt.width() {
            return Err(Error::Shape(format!("prediction is {h}x{w}, ground truth is {}x{}", gt.height(), gt.width())));
        }
        let labels = argmax_labels(probs);
        for i in gt.mask().valid_pixels() {
            self.add_pair(gt.labels()[i] as usize, labels[i] as usize)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        debug_assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn finish(&self) -> Result<SegMetrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data("no valid pixels to evaluate".into()));
        }
        let k = self.k;
        let per_class_iou: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let gt_c: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let pred_c: u64 = (0..k).map(|g| self.get(g, c)).sum();
                let union = gt_c + pred_c - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let mean_iou = present.iter().sum::<f64>() / present.len() as f64;
        let correct: u64 = (0..k).map(|c| self.get(c, c)).sum();
        Ok(SegMetrics { per_class_iou, mean_iou, pixel_accuracy: correct as f64 / total as f64 })
    }
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn argmax_labels<T: Scalar>(probs: &Tensor<T>) -> Vec<u32> {
    let (k, h, w) = probs.shape();
    let plane = h * w;
    let d = probs.data();
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

pub fn seg_metrics<T: Scalar>(pred_probs: &Tensor<T>, gt: &GroundTruth<T>) -> Result<SegMetrics> {
    let mut m = ConfusionMatrix::new(pred_probs.channels());
    m.add(pred_probs, gt)?;
    m.finish()
}

/// Depth and segmentation measures of one prediction set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub depth: DepthMetrics,
    pub seg: SegMetrics,
}

/// Pooled accumulators over many predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluator {
    depth: DepthAccumulator,
    confusion: ConfusionMatrix,
}

impl Evaluator {
    pub fn new(num_classes: usize) -> Self {
        Self { depth: DepthAccumulator::default(), confusion: ConfusionMatrix::new(num_classes) }
    }

    pub fn add<T: Scalar>(&mut self, pred: &PredictionPair<T>, gt: &GroundTruth<T>) -> Result<()> {
        self.depth.add(&pred.depth, gt)?;
        self.confusion.add(&pred.semantics, gt)
    }

    pub fn merge(&mut self, other: &Self) {
        self.depth.merge(&other.depth);
        self.confusion.merge(&other.confusion);
    }

    pub fn finish(&self) -> Result<MetricReport> {
        Ok(MetricReport { depth: self.depth.finish()?, seg: self.confusion.finish()? })
    }
}

/// Evaluates one prediction per sample, produced by `predict`.
///
/// Predictions run in parallel; the per-sample sums are merged in sample
/// order so the result does not depend on the thread count.
pub fn evaluate_with<T: Scalar>(
    samples: &[Sample<T>],
    num_classes: usize,
    predict: impl Fn(&Sample<T>) -> Result<PredictionPair<T>> + Sync,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Usage("evaluation needs at least one sample".into()));
    }
    let parts: Vec<Evaluator> = samples
        .par_iter()
        .map(|s| {
            let pred = predict(s)?;
            let mut e = Evaluator::new(num_classes);
            e.add(&pred, &s.gt)?;
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let mut total = Evaluator::new(num_classes);
    for p in &parts {
        total.merge(p);
    }
    total.finish()
}

/// Metrics of the raw input predictions themselves.
pub fn evaluate_inputs<T: Scalar>(samples: &[Sample<T>]) -> Result<MetricReport> {
    let k = samples.first().map(Sample::num_classes).unwrap_or(0);
    evaluate_with(samples, k, |s| Ok(s.input.clone()))
}

/// Metrics of the network's refined outputs.
pub fn evaluate_network<T: Scalar>(network: &JrnNetwork<T>, samples: &[Sample<T>]) -> Result<MetricReport> {
    let k = network.num_classes();
    check_classes(samples, k)?;
    evaluate_with(samples, k, |s| network.forward(&s.input.depth, &s.input.semantics))
}

pub(crate) fn check_classes<T: Scalar>(samples: &[Sample<T>], k: usize) -> Result<()> {
    for s in samples {
        if s.num_classes() != k {
            return Err(Error::Config(format!(
                "sample `{}` has {} classes, network expects {k}",
                s.id,
                s.num_classes()
            )));
        }
    }
    Ok(())
}

/// CSV header for metric rows with `k` classes.
pub fn csv_header(k: usize) -> String {
    let mut h =
        String::from("variant,rel,rel_sqr,log10,rms_linear,rms_log,delta1,delta2,delta3,mean_iou,pixel_accuracy");
    for c in 0..k {
        write!(h, ",iou_{c}").unwrap();
    }
    h
}

/// One CSV row: name, the eight depth fields, mean IOU, pixel accuracy, then
/// per-class IOU (empty for classes absent everywhere).
pub fn csv_row(name: &str, report: &MetricReport) -> String {
    let mut row = name.to_string();
    for v in report.depth.as_array() {
        write!(row, ",{v}").unwrap();
    }
    write!(row, ",{},{}", report.seg.mean_iou, report.seg.pixel_accuracy).unwrap();
    for iou in &report.seg.per_class_iou {
        match iou {
            Some(v) => write!(row, ",{v}").unwrap(),
            None => row.push(','),
        }
    }
    row
}
