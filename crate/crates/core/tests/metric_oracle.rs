//! Pooled metrics against straightforward per-pixel reimplementations.

// index loops keep the oracle as literal as possible
#![allow(clippy::needless_range_loop)]

use jrn_core::metrics::{depth_metrics, seg_metrics, MIN_EVAL_DEPTH};
use jrn_core::{GroundTruth, Tensor, ValidMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 16;
const K: usize = 4;

struct Case {
    pred: Vec<f64>,
    gt: Vec<f64>,
    valid: Vec<bool>,
    probs: Vec<Vec<f64>>,
    labels: Vec<u32>,
}

fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = N * N;
    let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..10.0)).collect();
    let pred = gt
        .iter()
        .map(|&g| match rng.random_range(0..10) {
            0 => 0.0,
            1 => rng.random_range(0.0..12.0),
            _ => g * rng.random_range(0.6..1.6),
        })
        .collect();
    let mut valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.85)).collect();
    valid[0] = true;
    // class 3 never appears in truth and rarely in predictions
    let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
    let probs = (0..n)
        .map(|_| {
            let mut p: Vec<f64> = (0..K).map(|c| if c == 3 { 0.0 } else { rng.random_range(0.0..1.0) }).collect();
            if rng.random_bool(0.02) {
                p[3] = 2.0;
            }
            let s: f64 = p.iter().sum();
            p.iter().map(|v| v / s).collect()
        })
        .collect();
    Case { pred, gt, valid, probs, labels }
}

fn brute_depth(c: &Case) -> [f64; 8] {
    let mut m = [0.0; 8];
    let mut n = 0.0;
    for i in 0..c.gt.len() {
        if !c.valid[i] {
            continue;
        }
        let g = c.gt[i];
        let p = c.pred[i];
        let pl = if p < MIN_EVAL_DEPTH { MIN_EVAL_DEPTH } else { p };
        n += 1.0;
        m[0] += (g - p).abs() / g;
        m[1] += (g - p) * (g - p) / g;
        m[2] += (g.log10() - pl.log10()).abs();
        m[3] += (g - p) * (g - p);
        m[4] += (g.ln() - pl.ln()) * (g.ln() - pl.ln());
        let ratio = if g / pl > pl / g { g / pl } else { pl / g };
        for (j, t) in [1.25f64, 1.5625, 1.953125].iter().enumerate() {
            if ratio < *t {
                m[5 + j] += 1.0;
            }
        }
    }
    for v in m.iter_mut() {
        *v /= n;
    }
    m[3] = m[3].sqrt();
    m[4] = m[4].sqrt();
    m
}

fn brute_seg(c: &Case) -> (f64, f64) {
    let argmax = |p: &Vec<f64>| {
        let mut best = 0;
        for j in 1..p.len() {
            if p[j] > p[best] {
                best = j;
            }
        }
        best as u32
    };
    let predicted: Vec<u32> = c.probs.iter().map(argmax).collect();
    let (mut correct, mut total) = (0.0, 0.0);
    let mut ious = Vec::new();
    for class in 0..K as u32 {
        let (mut inter, mut union) = (0.0, 0.0);
        for i in 0..c.labels.len() {
            if !c.valid[i] {
                continue;
            }
            let a = predicted[i] == class;
            let b = c.labels[i] == class;
            if a && b {
                inter += 1.0;
            }
            if a || b {
                union += 1.0;
            }
        }
        if union > 0.0 {
            ious.push(inter / union);
        }
    }
    for i in 0..c.labels.len() {
        if c.valid[i] {
            total += 1.0;
            if predicted[i] == c.labels[i] {
                correct += 1.0;
            }
        }
    }
    (ious.iter().sum::<f64>() / ious.len() as f64, correct / total)
}

#[test]
fn fifty_random_maps_agree_with_brute_force() {
    for seed in 0..50 {
        let c = random_case(seed);
        let mask = ValidMask::new(N, N, c.valid.clone()).unwrap();
        let gt = GroundTruth::new(Tensor::new(1, N, N, c.gt.clone()).unwrap(), c.labels.clone(), mask).unwrap();
        let pred = Tensor::new(1, N, N, c.pred.clone()).unwrap();
        let probs = Tensor::from_fn(K, N, N, |k, y, x| c.probs[y * N + x][k]);

        let got = depth_metrics(&pred, &gt).unwrap().as_array();
        let want = brute_depth(&c);
        for (j, (g, w)) in got.iter().zip(&want).enumerate() {
            assert!((g - w).abs() < 1e-6, "seed {seed} metric {j}: {g} vs {w}");
        }
        assert!(got[5] <= got[6] && got[6] <= got[7], "seed {seed}: deltas not monotone");

        let seg = seg_metrics(&probs, &gt).unwrap();
        let (miou, acc) = brute_seg(&c);
        assert!((seg.mean_iou - miou).abs() < 1e-6, "seed {seed}: mean IOU {} vs {miou}", seg.mean_iou);
        assert!((seg.pixel_accuracy - acc).abs() < 1e-6, "seed {seed}: accuracy");
    }
}

#[test]
fn hand_evaluated_cases() {
    let one = |p: Vec<f64>, g: Vec<f64>| {
        let n = p.len();
        let gt = GroundTruth::new(Tensor::new(1, 1, n, g).unwrap(), vec![0; n], ValidMask::all_valid(1, n)).unwrap();
        depth_metrics(&Tensor::new(1, 1, n, p).unwrap(), &gt).unwrap()
    };
    let m = one(vec![1.0, 2.0], vec![1.2, 5.0]);
    assert_eq!((m.delta1, m.delta2, m.delta3), (0.5, 0.5, 0.5));
    let m = one(vec![10.0], vec![1.0]);
    assert!((m.log10 - 1.0).abs() < 1e-12);
    assert!((m.rms_linear - 9.0).abs() < 1e-12);
    let m = one(vec![3.0, 4.0], vec![3.0, 4.0]);
    assert_eq!(m.as_array(), [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
}
