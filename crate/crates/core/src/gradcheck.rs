//! Central finite-difference checks of the tape's analytic gradients.
//!
//! Every case builds a small random problem in `f64` from a seed, reduces
//! the output to a scalar `J = Σ w ⊙ out` with random weights `w` (or uses a
//! loss directly), and compares the backward pass against
//! `(J(x + h) − J(x − h)) / 2h` on the checked coordinates.
//!
//! ReLU kinks make the function non-smooth inside some `±h` windows. When a
//! coordinate's estimate disagrees with the analytic value, it is
//! re-estimated with tenfold smaller steps for as long as the estimate keeps
//! moving; a wrong analytic gradient stays wrong once the estimate settles.
//!
//! The reported error is the max-norm relative error
//! `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)` over all checked coordinates.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::losses::{GroundTruth, ValidMask};
use crate::model::{build_jrn, JrnConfig, JrnNetwork, Variant};
use crate::ops;
use crate::tape::{Gradients, ParamId, Tape, Var};
use crate::tensor::{ConvParams, Tensor};

/// Step used by the central difference.
pub const STEP: f64 = 1e-3;

/// Relative agreement at which two estimates count as equal.
const CONVERGED: f64 = 1e-5;

/// Maximum number of tenfold step reductions per coordinate.
const REFINEMENTS: usize = 2;

/// Coordinates checked per network case.
const NETWORK_PARAM_COORDS: usize = 24;
const NETWORK_INPUT_COORDS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCase {
    Conv3x3,
    Conv1x1,
    Relu,
    Scale,
    Concat,
    Add,
    Resize,
    Softmax,
    Sum,
    DepthLoss,
    SemanticLoss,
    /// Full network forward followed by the joint loss.
    Network(Variant),
}

impl GradCase {
    /// Every primitive operation plus the full network in both fusion modes.
    pub const ALL: [GradCase; 13] = [
        GradCase::Conv3x3,
        GradCase::Conv1x1,
        GradCase::Relu,
        GradCase::Scale,
        GradCase::Concat,
        GradCase::Add,
        GradCase::Resize,
        GradCase::Softmax,
        GradCase::Sum,
        GradCase::DepthLoss,
        GradCase::SemanticLoss,
        GradCase::Network(Variant::Sum60),
        GradCase::Network(Variant::Cat5),
    ];
}

impl fmt::Display for GradCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradCase::Network(v) => write!(f, "network({v})"),
            other => write!(f, "{other:?}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    pub relative_error: f64,
    pub coordinates: usize,
}

#[derive(Clone, Copy, Debug)]
enum Coord {
    Leaf(usize, usize),
    /// Parameter block, flat index into weights followed by bias.
    Param(usize, usize),
}

struct Problem {
    case: GradCase,
    leaves: Vec<Tensor<f64>>,
    params: Vec<ConvParams<f64>>,
    weights: Option<Tensor<f64>>,
    gt: Option<GroundTruth<f64>>,
    resize_to: (usize, usize),
    factor: f64,
    network: Option<JrnConfig>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let data = (0..c * h * w).map(|_| normal(rng)).collect();
    Tensor::new(c, h, w, data).expect("sizes match")
}

/// Values bounded away from the ReLU kink so `±h` never crosses it.
fn kink_free_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let data = (0..c * h * w)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(c, h, w, data).expect("sizes match")
}

fn random_params(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> ConvParams<f64> {
    let weights = (0..out * inp * k * k).map(|_| normal(rng) * 0.5).collect();
    let bias = (0..out).map(|_| normal(rng) * 0.1).collect();
    ConvParams::new(out, inp, k, weights, bias).expect("valid kernel")
}

fn random_gt(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> GroundTruth<f64> {
    let depth = Tensor::from_fn(1, h, w, |_, _, _| rng.random_range(1.0..5.0));
    let labels = (0..h * w).map(|_| rng.random_range(0..k as u32)).collect();
    let mut bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.8)).collect();
    bits[rng.random_range(0..h * w)] = true;
    let mask = ValidMask::new(h, w, bits).expect("mask size");
    GroundTruth::new(depth, labels, mask).expect("positive depth")
}

impl Problem {
    fn new(case: GradCase, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
        let (c, h, w) = (dim(1, 5), dim(2, 8), dim(2, 8));
        let mut p = Problem {
            case,
            leaves: vec![],
            params: vec![],
            weights: None,
            gt: None,
            resize_to: (0, 0),
            factor: 1.0,
            network: None,
        };
        match case {
            GradCase::Conv3x3 | GradCase::Conv1x1 => {
                let k = if case == GradCase::Conv3x3 { 3 } else { 1 };
                let out = rng.random_range(1..=5);
                p.leaves.push(random_tensor(&mut rng, c, h, w));
                p.params.push(random_params(&mut rng, out, c, k));
            }
            GradCase::Relu => p.leaves.push(kink_free_tensor(&mut rng, c, h, w)),
            GradCase::Scale => {
                p.factor = rng.random_range(-2.0..2.0);
                p.leaves.push(random_tensor(&mut rng, c, h, w));
            }
            GradCase::Concat => {
                let c2 = rng.random_range(1..=5);
                p.leaves.push(random_tensor(&mut rng, c, h, w));
                p.leaves.push(random_tensor(&mut rng, c2, h, w));
            }
            GradCase::Add => {
                p.leaves.push(random_tensor(&mut rng, c, h, w));
                p.leaves.push(random_tensor(&mut rng, c, h, w));
            }
            GradCase::Resize => {
                p.resize_to = (rng.random_range(1..=8), rng.random_range(1..=8));
                p.leaves.push(random_tensor(&mut rng, c, h, w));
            }
            GradCase::Softmax => {
                let k = rng.random_range(2..=5);
                p.leaves.push(random_tensor(&mut rng, k, h, w));
            }
            GradCase::Sum => p.leaves.push(random_tensor(&mut rng, c, h, w)),
            GradCase::DepthLoss => {
                p.leaves.push(Tensor::from_fn(1, h, w, |_, _, _| rng.random_range(0.5..6.0)));
                p.gt = Some(random_gt(&mut rng, 2, h, w));
            }
            GradCase::SemanticLoss => {
                let k = rng.random_range(2..=5);
                p.leaves.push(random_tensor(&mut rng, k, h, w));
                p.gt = Some(random_gt(&mut rng, k, h, w));
            }
            GradCase::Network(variant) => {
                let k = rng.random_range(2..=5);
                let config = JrnConfig::for_variant(variant, k, rng.random());
                let mut params: Vec<ConvParams<f64>> =
                    build_jrn::<f64>(&config)?.params().into_iter().cloned().collect();
                for b in params.iter_mut().flat_map(|p| p.bias_mut().iter_mut()) {
                    *b = normal(&mut rng) * 0.05;
                }
                p.params = params;
                p.leaves.push(Tensor::from_fn(1, 8, 8, |_, _, _| rng.random_range(1.0..9.0)));
                p.leaves.push(ops::softmax_channels(&random_tensor(&mut rng, k, 8, 8)));
                p.gt = Some(random_gt(&mut rng, k, 8, 8));
                p.network = Some(config);
            }
        }
        if !matches!(case, GradCase::DepthLoss | GradCase::SemanticLoss | GradCase::Network(_)) {
            let (oc, oh, ow) = output_shape(&p);
            p.weights = Some(random_tensor(&mut rng, oc, oh, ow));
        }
        Ok(p)
    }

    /// Records the case on a fresh tape and returns (J, gradients).
    fn run(
        &self,
        leaves: &[Tensor<f64>],
        params: &[ConvParams<f64>],
        with_grads: bool,
    ) -> Result<(f64, Option<Gradients<f64>>, Vec<Var>)> {
        let network = match &self.network {
            Some(cfg) => Some(JrnNetwork::from_params(cfg.clone(), params.to_vec())?),
            None => None,
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.input(t.clone())).collect();
        let ids: Vec<ParamId> = if network.is_none() { params.iter().map(|p| tape.param(p)).collect() } else { vec![] };
        let out = match self.case {
            GradCase::Conv3x3 | GradCase::Conv1x1 => tape.conv2d(vars[0], ids[0])?,
            GradCase::Relu => tape.relu(vars[0])?,
            GradCase::Scale => tape.scale(vars[0], self.factor)?,
            GradCase::Concat => tape.concat_channels(vars[0], vars[1])?,
            GradCase::Add => tape.add(vars[0], vars[1])?,
            GradCase::Resize => tape.resize_bilinear(vars[0], self.resize_to.0, self.resize_to.1)?,
            GradCase::Softmax => tape.softmax_channels(vars[0])?,
            GradCase::Sum => tape.sum(vars[0])?,
            GradCase::DepthLoss => tape.depth_loss(vars[0], self.gt.as_ref().expect("gt"))?,
            GradCase::SemanticLoss => tape.semantic_loss(vars[0], self.gt.as_ref().expect("gt"))?,
            GradCase::Network(_) => {
                let net = network.as_ref().expect("network");
                let gt = self.gt.as_ref().expect("gt");
                let heads = net.record(&mut tape, vars[0], vars[1])?;
                let ld = tape.depth_loss(heads.depth, gt)?;
                let ls = tape.semantic_loss(heads.logits, gt)?;
                tape.add(ld, ls)?
            }
        };
        let value = tape.value(out)?;
        let (j, upstream) = match &self.weights {
            Some(w) => {
                let j = value.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
                (j, w.clone())
            }
            None => (value.data()[0], Tensor::scalar(1.0)),
        };
        let grads = if with_grads { Some(tape.backward(out, upstream)?) } else { None };
        Ok((j, grads, vars))
    }

    fn coordinates(&self, rng: &mut ChaCha8Rng) -> Vec<Coord> {
        let mut coords = Vec::new();
        let sampled = self.network.is_some();
        for (i, t) in self.leaves.iter().enumerate() {
            if sampled {
                coords.extend(
                    sample(rng, t.len(), NETWORK_INPUT_COORDS.min(t.len())).into_iter().map(|j| Coord::Leaf(i, j)),
                );
            } else {
                coords.extend((0..t.len()).map(|j| Coord::Leaf(i, j)));
            }
        }
        let sizes: Vec<usize> = self.params.iter().map(|p| p.weights().len() + p.bias().len()).collect();
        if sampled {
            let total: usize = sizes.iter().sum();
            for flat in sample(rng, total, NETWORK_PARAM_COORDS) {
                let (mut block, mut j) = (0, flat);
                while j >= sizes[block] {
                    j -= sizes[block];
                    block += 1;
                }
                coords.push(Coord::Param(block, j));
            }
        } else {
            for (i, &n) in sizes.iter().enumerate() {
                coords.extend((0..n).map(|j| Coord::Param(i, j)));
            }
        }
        coords
    }
}

fn output_shape(p: &Problem) -> (usize, usize, usize) {
    let (c, h, w) = p.leaves[0].shape();
    match p.case {
        GradCase::Conv3x3 | GradCase::Conv1x1 => (p.params[0].out_channels(), h, w),
        GradCase::Concat => (c + p.leaves[1].channels(), h, w),
        GradCase::Resize => (c, p.resize_to.0, p.resize_to.1),
        GradCase::Sum => (1, 1, 1),
        _ => (c, h, w),
    }
}

fn nudge(leaves: &mut [Tensor<f64>], params: &mut [ConvParams<f64>], coord: Coord, delta: f64) {
    match coord {
        Coord::Leaf(i, j) => leaves[i].data_mut()[j] += delta,
        Coord::Param(i, j) => {
            let nw = params[i].weights().len();
            if j < nw {
                params[i].weights_mut()[j] += delta;
            } else {
                params[i].bias_mut()[j - nw] += delta;
            }
        }
    }
}

fn analytic(grads: &Gradients<f64>, vars: &[Var], params: &[ConvParams<f64>], coord: Coord) -> f64 {
    match coord {
        Coord::Leaf(i, j) => grads.input(vars[i]).map_or(0.0, |g| g.data()[j]),
        Coord::Param(i, j) => {
            let g = &grads.params()[i];
            let nw = params[i].weights().len();
            if j < nw {
                g.weights()[j]
            } else {
                g.bias()[j - nw]
            }
        }
    }
}

/// Runs one gradient check.
pub fn check(case: GradCase, seed: u64) -> Result<GradReport> {
    let problem = Problem::new(case, seed)?;
    let (_, grads, vars) = problem.run(&problem.leaves, &problem.params, true)?;
    let grads = grads.expect("requested gradients");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let coords = problem.coordinates(&mut rng);

    let (mut leaves, mut params) = (problem.leaves.clone(), problem.params.clone());
    let mut central = |coord: Coord, h: f64| -> Result<f64> {
        nudge(&mut leaves, &mut params, coord, h);
        let plus = problem.run(&leaves, &params, false)?.0;
        nudge(&mut leaves, &mut params, coord, -2.0 * h);
        let minus = problem.run(&leaves, &params, false)?.0;
        nudge(&mut leaves, &mut params, coord, h);
        Ok((plus - minus) / (2.0 * h))
    };
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for &coord in &coords {
        let a = analytic(&grads, &vars, &problem.params, coord);
        let mut step = STEP;
        let mut numeric = central(coord, step)?;
        // A disagreement may come from a kink inside the window: refine while
        // the estimate is still moving between successive steps.
        for _ in 0..REFINEMENTS {
            if (a - numeric).abs() <= CONVERGED * a.abs().max(numeric.abs()).max(1e-10) {
                break;
            }
            let finer = central(coord, step * 0.1)?;
            let moving = (finer - numeric).abs() > CONVERGED * finer.abs().max(numeric.abs()).max(1e-10);
            step *= 0.1;
            numeric = finer;
            if !moving {
                break;
            }
        }
        if !a.is_finite() || !numeric.is_finite() {
            return Err(Error::Diverged { iteration: 0, message: format!("{case} seed {seed}: non-finite gradient") });
        }
        diff = diff.max((a - numeric).abs());
        scale = scale.max(a.abs()).max(numeric.abs());
    }
    let relative_error = if scale == 0.0 { 0.0 } else { diff / scale };
    Ok(GradReport { relative_error, coordinates: coords.len() })
}
