//! The joint refinement network: three scale branches that fuse depth and
//! semantic features, a merge stage at half resolution, and two output heads.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::{ConvParams, Tensor};

/// Upper bound of the refined depth output, in meters.
pub const MAX_DEPTH: f64 = 10.0;

/// Depth inputs enter the network divided by [`MAX_DEPTH`], so both input
/// modalities live on roughly unit scale; outputs stay in meters.
pub const DEPTH_INPUT_SCALE: f64 = 1.0 / MAX_DEPTH;

/// Feature channels extracted from each modality before fusion.
pub const BRANCH_FEATURE_CHANNELS: usize = 20;

/// Branch resolutions as divisors of the input size: 1/8, 1/4, 1/2.
pub const SCALE_DIVISORS: [usize; 3] = [8, 4, 2];

/// Divisor of the resolution the branch outputs are merged at.
const MERGE_DIVISOR: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionOp {
    Concatenate,
    Sum,
}

/// The five architectures studied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Cat60,
    Sum60,
    Cat10,
    Cat5,
    Cat1,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Cat60, Variant::Sum60, Variant::Cat10, Variant::Cat5, Variant::Cat1];

    pub fn fusion(self) -> FusionOp {
        match self {
            Variant::Sum60 => FusionOp::Sum,
            _ => FusionOp::Concatenate,
        }
    }

    pub fn branch_output_channels(self) -> usize {
        match self {
            Variant::Cat60 | Variant::Sum60 => 60,
            Variant::Cat10 => 10,
            Variant::Cat5 => 5,
            Variant::Cat1 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cat60 => "cat60",
            Variant::Sum60 => "sum60",
            Variant::Cat10 => "cat10",
            Variant::Cat5 => "cat5",
            Variant::Cat1 => "cat1",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s)).ok_or_else(|| {
            Error::Config(format!("unknown variant `{s}`, expected one of cat60, sum60, cat10, cat5, cat1"))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct JrnConfig {
    pub fusion: FusionOp,
    /// Channels right after fusion: 40 for concatenation, 20 for sum.
    pub post_fusion_channels: usize,
    /// Channels each scale branch emits.
    pub branch_output_channels: usize,
    pub num_classes: usize,
    /// Branch resolutions as divisors of the input size.
    pub scales: Vec<usize>,
    pub branch_feature_channels: usize,
    pub rng_seed: u64,
}

impl JrnConfig {
    pub fn for_variant(variant: Variant, num_classes: usize, rng_seed: u64) -> Self {
        let fusion = variant.fusion();
        Self {
            fusion,
            post_fusion_channels: match fusion {
                FusionOp::Concatenate => 2 * BRANCH_FEATURE_CHANNELS,
                FusionOp::Sum => BRANCH_FEATURE_CHANNELS,
            },
            branch_output_channels: variant.branch_output_channels(),
            num_classes,
            scales: SCALE_DIVISORS.to_vec(),
            branch_feature_channels: BRANCH_FEATURE_CHANNELS,
            rng_seed,
        }
    }

    /// The named variant this configuration reduces to.
    pub fn variant(&self) -> Result<Variant> {
        if self.branch_feature_channels != BRANCH_FEATURE_CHANNELS {
            return Err(Error::Config(format!(
                "branch feature channels must be {BRANCH_FEATURE_CHANNELS}, got {}",
                self.branch_feature_channels
            )));
        }
        if self.scales != SCALE_DIVISORS {
            return Err(Error::Config(format!("scales must be 1/8, 1/4, 1/2, got divisors {:?}", self.scales)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        let expected_c0 = match self.fusion {
            FusionOp::Concatenate => 2 * self.branch_feature_channels,
            FusionOp::Sum => self.branch_feature_channels,
        };
        if self.post_fusion_channels != expected_c0 {
            return Err(Error::Config(format!(
                "{:?} fusion yields {expected_c0} channels, config says {}",
                self.fusion, self.post_fusion_channels
            )));
        }
        Variant::ALL
            .into_iter()
            .find(|v| v.fusion() == self.fusion && v.branch_output_channels() == self.branch_output_channels)
            .ok_or_else(|| {
                Error::Config(format!(
                    "{:?} fusion with {} branch channels is not one of cat60, sum60, cat10, cat5, cat1",
                    self.fusion, self.branch_output_channels
                ))
            })
    }

    pub fn validate(&self) -> Result<()> {
        self.variant().map(|_| ())
    }
}

/// Closed-form count of trainable scalars.
pub fn param_count(config: &JrnConfig) -> usize {
    let f = config.branch_feature_channels;
    let k = config.num_classes;
    let c0 = config.post_fusion_channels;
    let c = config.branch_output_channels;
    let conv = |out: usize, inp: usize, ks: usize| out * inp * ks * ks + out;
    let branch = conv(f, 1, 3) + conv(f, k, 3) + conv(c, c0, 3) + conv(c, c, 3);
    let merged = config.scales.len() * c;
    config.scales.len() * branch + conv(merged, merged, 3) + conv(1, merged, 1) + conv(k, merged, 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleBranch<T> {
    pub depth_in: ConvParams<T>,
    pub sem_in: ConvParams<T>,
    pub fuse: ConvParams<T>,
    pub refine: ConvParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JrnNetwork<T> {
    config: JrnConfig,
    pub branches: Vec<ScaleBranch<T>>,
    pub merge: ConvParams<T>,
    pub depth_head: ConvParams<T>,
    pub sem_head: ConvParams<T>,
}

/// Refined depth (meters, clamped to `[0, 10]`) and per-pixel class
/// probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionPair<T> {
    pub depth: Tensor<T>,
    pub semantics: Tensor<T>,
}

impl<T: Scalar> PredictionPair<T> {
    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn num_classes(&self) -> usize {
        self.semantics.channels()
    }

    pub fn cast<U: Scalar>(&self) -> PredictionPair<U> {
        PredictionPair { depth: self.depth.cast(), semantics: self.semantics.cast() }
    }
}

/// Unclamped depth head output and semantic logits, both at full resolution.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub depth: Var,
    pub logits: Var,
}

fn init_conv<T: Scalar>(out: usize, inp: usize, kernel: usize, seed: u64, layer: u64) -> ConvParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer);
    let fan_in = (inp * kernel * kernel) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    let weights = (0..out * inp * kernel * kernel).map(|_| T::narrow(normal.sample(&mut rng))).collect();
    ConvParams::new(out, inp, kernel, weights, vec![T::zero(); out]).expect("valid layer shape")
}

/// Weight dimensions `[out, in, k, k]` of every layer in declaration order:
/// per branch (depth input, semantic input, fuse, refine), then merge, depth
/// head, semantic head.
pub fn layer_shapes(config: &JrnConfig) -> Vec<[usize; 4]> {
    let f = config.branch_feature_channels;
    let k = config.num_classes;
    let c = config.branch_output_channels;
    let merged = config.scales.len() * c;
    let mut shapes = Vec::with_capacity(4 * config.scales.len() + 3);
    for _ in &config.scales {
        shapes.extend([[f, 1, 3, 3], [f, k, 3, 3], [c, config.post_fusion_channels, 3, 3], [c, c, 3, 3]]);
    }
    shapes.extend([[merged, merged, 3, 3], [1, merged, 1, 1], [k, merged, 1, 1]]);
    shapes
}

/// Builds a network with He-scaled Gaussian weights and zero biases.
///
/// Every layer draws from its own ChaCha8 stream keyed by its declaration
/// index, so variants sharing a seed share every layer whose shape agrees.
pub fn build_jrn<T: Scalar>(config: &JrnConfig) -> Result<JrnNetwork<T>> {
    config.validate()?;
    let params = layer_shapes(config)
        .iter()
        .enumerate()
        .map(|(i, s)| init_conv(s[0], s[1], s[2], config.rng_seed, i as u64))
        .collect();
    JrnNetwork::from_params(config.clone(), params)
}

impl<T: Scalar> JrnNetwork<T> {
    pub fn config(&self) -> &JrnConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant().expect("network built from a validated config")
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Parameter blocks in declaration order: per branch (depth input,
    /// semantic input, fuse, refine), then merge, depth head, semantic head.
    pub fn params(&self) -> Vec<&ConvParams<T>> {
        let mut out = Vec::with_capacity(4 * self.branches.len() + 3);
        for b in &self.branches {
            out.extend([&b.depth_in, &b.sem_in, &b.fuse, &b.refine]);
        }
        out.extend([&self.merge, &self.depth_head, &self.sem_head]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ConvParams<T>> {
        let mut out = Vec::with_capacity(4 * self.branches.len() + 3);
        for b in &mut self.branches {
            out.extend([&mut b.depth_in, &mut b.sem_in, &mut b.fuse, &mut b.refine]);
        }
        out.extend([&mut self.merge, &mut self.depth_head, &mut self.sem_head]);
        out
    }

    /// Human-readable names matching [`JrnNetwork::params`].
    pub fn layer_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for &d in &self.config.scales {
            for l in ["depth_in", "sem_in", "fuse", "refine"] {
                out.push(format!("branch_1/{d}.{l}"));
            }
        }
        out.extend(["merge", "depth_head", "sem_head"].map(String::from));
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Assembles a network from explicit parameter blocks in declaration order.
    pub fn from_params(config: JrnConfig, params: Vec<ConvParams<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = layer_shapes(&config);
        if params.len() != shapes.len() {
            return Err(Error::Config(format!("expected {} parameter blocks, got {}", shapes.len(), params.len())));
        }
        for (i, (p, s)) in params.iter().zip(&shapes).enumerate() {
            if p.weight_dims() != *s {
                return Err(Error::Config(format!(
                    "parameter block {i} has shape {:?}, expected {s:?}",
                    p.weight_dims()
                )));
            }
        }
        let mut it = params.into_iter();
        let mut take = || it.next().expect("count checked");
        let branches = config
            .scales
            .iter()
            .map(|_| ScaleBranch { depth_in: take(), sem_in: take(), fuse: take(), refine: take() })
            .collect();
        Ok(Self { config, branches, merge: take(), depth_head: take(), sem_head: take() })
    }

    pub fn cast<U: Scalar>(&self) -> JrnNetwork<U> {
        JrnNetwork::from_params(self.config.clone(), self.params().iter().map(|p| p.cast()).collect())
            .expect("same shapes")
    }

    /// Hash of the configuration and every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.config.hash(&mut h);
        for p in self.params() {
            for v in p.weights().iter().chain(p.bias()) {
                v.widen().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn check_inputs(&self, depth: &Tensor<T>, sem: &Tensor<T>) -> Result<()> {
        let k = self.config.num_classes;
        let (dc, h, w) = depth.shape();
        if dc != 1 {
            return Err(Error::Input(format!("depth input must have 1 channel, got {dc}")));
        }
        if sem.shape() != (k, h, w) {
            return Err(Error::Input(format!("semantic input must be {k}x{h}x{w}, got {:?}", sem.shape())));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Input(format!("input size {h}x{w} must be divisible by 8")));
        }
        Ok(())
    }

    /// Records one scale branch: per-modality conv+ReLU to 20 channels,
    /// fusion, then two conv+ReLU layers at the branch width.
    pub fn record_branch<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        ids: &BranchIds,
        depth_in: Var,
        sem_in: Var,
    ) -> Result<Var> {
        let d = tape.conv2d(depth_in, ids.depth_in)?;
        let d = tape.relu(d)?;
        let s = tape.conv2d(sem_in, ids.sem_in)?;
        let s = tape.relu(s)?;
        let fused = match self.config.fusion {
            FusionOp::Concatenate => tape.concat_channels(d, s)?,
            FusionOp::Sum => tape.add(d, s)?,
        };
        let x = tape.conv2d(fused, ids.fuse)?;
        let x = tape.relu(x)?;
        let x = tape.conv2d(x, ids.refine)?;
        tape.relu(x)
    }

    /// Registers every parameter block on `tape` in declaration order.
    pub fn register<'p>(&'p self, tape: &mut Tape<'p, T>) -> NetworkIds {
        let branches = self
            .branches
            .iter()
            .map(|b| BranchIds {
                depth_in: tape.param(&b.depth_in),
                sem_in: tape.param(&b.sem_in),
                fuse: tape.param(&b.fuse),
                refine: tape.param(&b.refine),
            })
            .collect();
        NetworkIds {
            branches,
            merge: tape.param(&self.merge),
            depth_head: tape.param(&self.depth_head),
            sem_head: tape.param(&self.sem_head),
        }
    }

    /// Records the full forward pass and returns the raw head outputs.
    pub fn record<'p>(&'p self, tape: &mut Tape<'p, T>, depth: Var, sem: Var) -> Result<HeadVars> {
        let (h, w) = {
            let d = tape.value(depth)?;
            self.check_inputs(d, tape.value(sem)?)?;
            (d.height(), d.width())
        };
        let ids = self.register(tape);
        let depth = tape.scale(depth, T::narrow(DEPTH_INPUT_SCALE))?;
        let (mh, mw) = (h / MERGE_DIVISOR, w / MERGE_DIVISOR);

        let mut merged: Option<Var> = None;
        for (&div, bid) in self.config.scales.iter().zip(&ids.branches) {
            let (bh, bw) = (h / div, w / div);
            let d = tape.resize_bilinear(depth, bh, bw)?;
            let s = tape.resize_bilinear(sem, bh, bw)?;
            let mut out = self.record_branch(tape, bid, d, s)?;
            if (bh, bw) != (mh, mw) {
                out = tape.resize_bilinear(out, mh, mw)?;
            }
            merged = Some(match merged {
                None => out,
                Some(acc) => tape.concat_channels(acc, out)?,
            });
        }
        let merged = merged.ok_or_else(|| Error::Config("network has no scale branches".into()))?;
        let x = tape.conv2d(merged, ids.merge)?;
        let x = tape.relu(x)?;
        let d = tape.conv2d(x, ids.depth_head)?;
        let z = tape.conv2d(x, ids.sem_head)?;
        let d = tape.resize_bilinear(d, h, w)?;
        let z = tape.resize_bilinear(z, h, w)?;
        Ok(HeadVars { depth: d, logits: z })
    }

    /// Raw depth head output and semantic logits at input resolution.
    pub fn forward_raw(&self, depth: &Tensor<T>, sem: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let d = tape.input(depth.clone());
        let s = tape.input(sem.clone());
        let heads = self.record(&mut tape, d, s)?;
        Ok((tape.value(heads.depth)?.clone(), tape.value(heads.logits)?.clone()))
    }

    /// Refines a (depth, semantic probabilities) input pair.
    pub fn forward(&self, depth: &Tensor<T>, sem: &Tensor<T>) -> Result<PredictionPair<T>> {
        let (d, z) = self.forward_raw(depth, sem)?;
        Ok(PredictionPair { depth: clamp_depth(&d), semantics: ops::softmax_channels(&z) })
    }
}

/// Runs one scale branch on inputs already resampled to its resolution.
pub fn scale_branch_forward<T: Scalar>(
    depth_in: &Tensor<T>,
    sem_in: &Tensor<T>,
    branch: &ScaleBranch<T>,
    fusion: FusionOp,
) -> Result<Tensor<T>> {
    if depth_in.height() != sem_in.height() || depth_in.width() != sem_in.width() {
        return Err(Error::Shape(format!(
            "branch inputs differ in size: {:?} vs {:?}",
            depth_in.shape(),
            sem_in.shape()
        )));
    }
    let fused = {
        let d = ops::relu(&ops::conv2d(depth_in, &branch.depth_in)?);
        let s = ops::relu(&ops::conv2d(sem_in, &branch.sem_in)?);
        match fusion {
            FusionOp::Concatenate => ops::concat_channels(&d, &s)?,
            FusionOp::Sum => ops::add_elementwise(&d, &s)?,
        }
    };
    if fused.channels() != branch.fuse.in_channels() {
        return Err(Error::Shape(format!(
            "fusion produced {} channels, branch expects {}",
            fused.channels(),
            branch.fuse.in_channels()
        )));
    }
    let x = ops::relu(&ops::conv2d(&fused, &branch.fuse)?);
    Ok(ops::relu(&ops::conv2d(&x, &branch.refine)?))
}

/// Parameter ids of one branch on a tape.
#[derive(Clone, Debug)]
pub struct BranchIds {
    pub depth_in: ParamId,
    pub sem_in: ParamId,
    pub fuse: ParamId,
    pub refine: ParamId,
}

#[derive(Clone, Debug)]
pub struct NetworkIds {
    pub branches: Vec<BranchIds>,
    pub merge: ParamId,
    pub depth_head: ParamId,
    pub sem_head: ParamId,
}

pub fn clamp_depth<T: Scalar>(raw: &Tensor<T>) -> Tensor<T> {
    let hi = T::narrow(MAX_DEPTH);
    raw.map(|v| {
        if v < T::zero() {
            T::zero()
        } else if v > hi {
            hi
        } else {
            v
        }
    })
}

/// Convenience wrapper for [`JrnNetwork::forward`].
pub fn jrn_forward<T: Scalar>(
    network: &JrnNetwork<T>,
    depth: &Tensor<T>,
    sem: &Tensor<T>,
) -> Result<PredictionPair<T>> {
    network.forward(depth, sem)
}
