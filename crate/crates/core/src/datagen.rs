//! Deterministic synthetic indoor scenes and corrupted single-modality
//! predictions standing in for the outputs of separate depth and
//! segmentation networks.
//!
//! Scenes are box rooms seen by a pinhole camera: floor, ceiling, side walls
//! and a back wall, with up to four fronto-parallel rectangles (furniture and
//! small objects) in front of them. All randomness comes from ChaCha8 streams
//! keyed by the scene seed:
//!
//! | stream | draws                          |
//! |--------|--------------------------------|
//! | 0      | room geometry                  |
//! | 1      | occluders                      |
//! | 2      | depth noise (Gaussian)         |
//! | 3      | label flips                    |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{GroundTruth, ValidMask};
use crate::model::{PredictionPair, MAX_DEPTH};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The five geometric label categories, in label-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum SceneClass {
    Ground = 0,
    Vertical = 1,
    Ceiling = 2,
    Furniture = 3,
    Object = 4,
}

impl SceneClass {
    pub const ALL: [SceneClass; 5] =
        [SceneClass::Ground, SceneClass::Vertical, SceneClass::Ceiling, SceneClass::Furniture, SceneClass::Object];

    pub fn label(self) -> u32 {
        self as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            SceneClass::Ground => "ground",
            SceneClass::Vertical => "vertical",
            SceneClass::Ceiling => "ceiling",
            SceneClass::Furniture => "furniture",
            SceneClass::Object => "object",
        }
    }
}

pub const NUM_CLASSES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub max_depth: f64,
}

impl SceneSpec {
    pub fn new(seed: u64, height: usize, width: usize) -> Self {
        Self { seed, height, width, num_classes: NUM_CLASSES, max_depth: MAX_DEPTH }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "scene size {}x{} must be positive and divisible by 8",
                self.height, self.width
            )));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "scenes use exactly {NUM_CLASSES} classes (ground, vertical, ceiling, furniture, object), got {}",
                self.num_classes
            )));
        }
        if self.max_depth != MAX_DEPTH {
            return Err(Error::Config(format!("scene depth range is fixed to {MAX_DEPTH} m")));
        }
        Ok(())
    }
}

/// How the stand-in input predictions deviate from ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseConfig {
    /// Standard deviation of additive depth noise, meters.
    pub depth_noise_sigma: f64,
    /// Box blur radius applied to depth before noise, pixels.
    pub depth_blur_radius: usize,
    /// Fraction of pixels whose label is replaced by a random wrong class.
    pub label_flip_rate: f64,
    /// Softmax temperature applied to the one-hot label map.
    pub sem_smoothing: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { depth_noise_sigma: 0.3, depth_blur_radius: 2, label_flip_rate: 0.15, sem_smoothing: 0.5 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.depth_noise_sigma.is_finite() || self.depth_noise_sigma < 0.0 {
            return Err(Error::Config(format!("depth noise sigma must be >= 0, got {}", self.depth_noise_sigma)));
        }
        if !(0.0..1.0).contains(&self.label_flip_rate) {
            return Err(Error::Config(format!("label flip rate must be in [0, 1), got {}", self.label_flip_rate)));
        }
        if !self.sem_smoothing.is_finite() || self.sem_smoothing <= 0.0 {
            return Err(Error::Config(format!("semantic temperature must be > 0, got {}", self.sem_smoothing)));
        }
        Ok(())
    }
}

/// One scene: input predictions, ground truth and an identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub input: PredictionPair<T>,
    pub gt: GroundTruth<T>,
}

impl<T: Scalar> Sample<T> {
    /// Checks that every map shares one size and that the class counts agree.
    pub fn new(id: impl Into<String>, input: PredictionPair<T>, gt: GroundTruth<T>) -> Result<Self> {
        let id = id.into();
        let (h, w) = (gt.height(), gt.width());
        if input.depth.shape() != (1, h, w) {
            return Err(Error::Shape(format!(
                "sample `{id}`: input depth {:?} does not match the {h}x{w} ground truth",
                input.depth.shape()
            )));
        }
        if input.semantics.height() != h || input.semantics.width() != w {
            return Err(Error::Shape(format!(
                "sample `{id}`: input semantics {:?} do not match the {h}x{w} ground truth",
                input.semantics.shape()
            )));
        }
        gt.check_labels(input.semantics.channels())?;
        Ok(Self { id, input, gt })
    }

    pub fn num_classes(&self) -> usize {
        self.input.semantics.channels()
    }

    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        Sample { id: self.id.clone(), input: self.input.cast(), gt: self.gt.cast() }
    }
}

struct Room {
    focal: f64,
    cx: f64,
    cy: f64,
    camera_height: f64,
    ceiling_above: f64,
    left: f64,
    right: f64,
    back: f64,
}

impl Room {
    fn sample(spec: &SceneSpec) -> Self {
        let mut rng = stream(spec.seed, 0);
        let (h, w) = (spec.height as f64, spec.width as f64);
        Room {
            focal: 0.9 * w,
            cx: w / 2.0 + rng.random_range(-0.1..0.1) * w,
            cy: h / 2.0 + rng.random_range(-0.1..0.1) * h,
            camera_height: rng.random_range(1.2..1.6),
            ceiling_above: rng.random_range(1.0..1.4),
            left: rng.random_range(1.5..3.0),
            right: rng.random_range(1.5..3.0),
            back: rng.random_range(5.0..9.5),
        }
    }

    /// Nearest surface along the ray through the centre of pixel `(y, x)`.
    fn trace(&self, y: usize, x: usize) -> (f64, SceneClass) {
        let u = (x as f64 + 0.5 - self.cx) / self.focal;
        let v = (y as f64 + 0.5 - self.cy) / self.focal;
        let mut best = (self.back, SceneClass::Vertical);
        let mut consider = |t: f64, class: SceneClass| {
            if t > 0.0 && t < best.0 {
                best = (t, class);
            }
        };
        if v > 0.0 {
            consider(self.camera_height / v, SceneClass::Ground);
        }
        if v < 0.0 {
            consider(self.ceiling_above / -v, SceneClass::Ceiling);
        }
        if u < 0.0 {
            consider(self.left / -u, SceneClass::Vertical);
        }
        if u > 0.0 {
            consider(self.right / u, SceneClass::Vertical);
        }
        best
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Depth and labels of a scene as plain row-major vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneMaps {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
    pub labels: Vec<u32>,
}

impl SceneMaps {
    pub fn to_ground_truth<T: Scalar>(&self) -> GroundTruth<T> {
        let depth = Tensor::new(1, self.height, self.width, self.depth.iter().map(|&d| T::narrow(d)).collect())
            .expect("scene maps are well formed");
        GroundTruth::new(depth, self.labels.clone(), ValidMask::all_valid(self.height, self.width))
            .expect("scene depth is positive")
    }
}

/// The empty room: floor, ceiling and walls without any occluders.
pub fn generate_room(spec: &SceneSpec) -> Result<SceneMaps> {
    spec.validate()?;
    let room = Room::sample(spec);
    let (h, w) = (spec.height, spec.width);
    let mut depth = Vec::with_capacity(h * w);
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (d, class) = room.trace(y, x);
            depth.push(d.min(spec.max_depth));
            labels.push(class.label());
        }
    }
    Ok(SceneMaps { height: h, width: w, depth, labels })
}

/// Full scene: the room plus 1–4 rectangles placed strictly in front of
/// whatever background they cover.
pub fn generate_scene_maps(spec: &SceneSpec) -> Result<SceneMaps> {
    let mut maps = generate_room(spec)?;
    let background = maps.depth.clone();
    let (h, w) = (spec.height, spec.width);
    let mut rng = stream(spec.seed, 1);
    let count = rng.random_range(1..=4usize);
    for _ in 0..count {
        let furniture = rng.random_bool(0.5);
        let (rw, rh, top) = if furniture {
            let rw = rng.random_range(w / 6..=w / 2).max(1);
            let rh = rng.random_range(h / 6..=h / 3).max(1);
            let bottom = rng.random_range(h / 2..=h);
            (rw, rh, bottom.saturating_sub(rh))
        } else {
            let rw = rng.random_range(w / 12..=w / 5).max(1);
            let rh = rng.random_range(h / 12..=h / 5).max(1);
            (rw, rh, rng.random_range(h / 4..=h - rh))
        };
        let left = rng.random_range(0..=w - rw);
        let nearest_background = (top..(top + rh).min(h))
            .flat_map(|y| (left..left + rw).map(move |x| y * w + x))
            .map(|i| background[i])
            .fold(f64::INFINITY, f64::min);
        let depth = nearest_background * rng.random_range(0.5..0.9);
        let class = if furniture { SceneClass::Furniture } else { SceneClass::Object };
        for y in top..(top + rh).min(h) {
            for x in left..left + rw {
                let i = y * w + x;
                if depth < maps.depth[i] {
                    maps.depth[i] = depth;
                    maps.labels[i] = class.label();
                }
            }
        }
    }
    Ok(maps)
}

pub fn generate_scene<T: Scalar>(spec: &SceneSpec) -> Result<GroundTruth<T>> {
    Ok(generate_scene_maps(spec)?.to_ground_truth())
}

/// Mean over the `(2r+1)²` window, clipped at the borders.
fn box_blur(src: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return src.to_vec();
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            let mut sum = 0.0;
            for yy in y0..=y1 {
                sum += src[yy * w + x0..=yy * w + x1].iter().sum::<f64>();
            }
            out[y * w + x] = sum / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        }
    }
    out
}

/// Degrades ground truth into a plausible pair of input predictions.
///
/// Depth is box blurred, perturbed with Gaussian noise and clamped to
/// `[0, 10]`. Labels are flipped to a uniformly chosen wrong class at the
/// configured rate, then turned into probabilities by a softmax of the
/// one-hot map divided by the temperature.
pub fn corrupt_predictions<T: Scalar>(
    gt: &GroundTruth<T>,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<PredictionPair<T>> {
    noise.validate()?;
    let (h, w) = (gt.height(), gt.width());
    let k = NUM_CLASSES.max(gt.labels().iter().copied().max().unwrap_or(0) as usize + 1);

    let clean: Vec<f64> = gt.depth().data().iter().map(|v| v.widen()).collect();
    let mut depth = box_blur(&clean, h, w, noise.depth_blur_radius);
    if noise.depth_noise_sigma > 0.0 {
        let mut rng = stream(seed, 2);
        let normal = Normal::new(0.0, noise.depth_noise_sigma).expect("validated sigma");
        for d in &mut depth {
            *d += normal.sample(&mut rng);
        }
    }
    let depth = Tensor::new(1, h, w, depth.into_iter().map(|d| T::narrow(d.clamp(0.0, MAX_DEPTH))).collect())?;

    let mut rng = stream(seed, 3);
    let mut logits = Tensor::<f64>::zeros(k, h, w);
    let hot = 1.0 / noise.sem_smoothing;
    for (p, &label) in gt.labels().iter().enumerate() {
        let mut label = label as usize;
        if noise.label_flip_rate > 0.0 && rng.random_bool(noise.label_flip_rate) {
            let shift = rng.random_range(1..k);
            label = (label + shift) % k;
        }
        logits.data_mut()[label * h * w + p] = hot;
    }
    let semantics = ops::softmax_channels(&logits).cast();
    Ok(PredictionPair { depth, semantics })
}

/// Scene seed for the `index`-th scene of a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

pub fn sample_id(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Scene `index` of a dataset: ground truth plus its corrupted inputs.
pub fn generate_sample<T: Scalar>(seed: u64, index: usize, size: usize, noise: &NoiseConfig) -> Result<Sample<T>> {
    let s = scene_seed(seed, index);
    let gt = generate_scene::<T>(&SceneSpec::new(s, size, size))?;
    let input = corrupt_predictions(&gt, noise, s ^ 0xC0FF_EE00_D15E_A5E5)?;
    Sample::new(sample_id(index), input, gt)
}

/// `count` square scenes of side `size`, generated in parallel.
pub fn generate_dataset<T: Scalar>(
    count: usize,
    size: usize,
    seed: u64,
    noise: &NoiseConfig,
) -> Result<Vec<Sample<T>>> {
    SceneSpec::new(seed, size, size).validate()?;
    noise.validate()?;
    (0..count).into_par_iter().map(|i| generate_sample(seed, i, size, noise)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        let spec = SceneSpec::new(17, 32, 48);
        assert_eq!(generate_scene_maps(&spec).unwrap(), generate_scene_maps(&spec).unwrap());
        assert_ne!(generate_scene_maps(&spec).unwrap(), generate_scene_maps(&SceneSpec::new(18, 32, 48)).unwrap());
    }

    #[test]
    fn every_pixel_labelled_with_valid_depth() {
        for seed in 0..20 {
            let m = generate_scene_maps(&SceneSpec::new(seed, 64, 64)).unwrap();
            assert!(m.labels.iter().all(|&l| l < 5));
            assert!(m.depth.iter().all(|&d| d > 0.0 && d <= 10.0));
        }
    }

    #[test]
    fn occluders_are_nearer_than_background() {
        let mut occluded = 0;
        for seed in 0..30 {
            let spec = SceneSpec::new(seed, 64, 64);
            let room = generate_room(&spec).unwrap();
            let scene = generate_scene_maps(&spec).unwrap();
            for i in 0..64 * 64 {
                let l = scene.labels[i];
                if l == SceneClass::Furniture.label() || l == SceneClass::Object.label() {
                    occluded += 1;
                    assert!(scene.depth[i] < room.depth[i]);
                } else {
                    assert_eq!(scene.depth[i], room.depth[i]);
                    assert_eq!(scene.labels[i], room.labels[i]);
                }
            }
        }
        assert!(occluded > 0);
    }

    #[test]
    fn rooms_contain_floor_walls_and_ceiling() {
        let m = generate_scene_maps(&SceneSpec::new(3, 64, 64)).unwrap();
        for class in [SceneClass::Ground, SceneClass::Vertical, SceneClass::Ceiling] {
            assert!(m.labels.contains(&class.label()), "{} missing", class.name());
        }
    }

    #[test]
    fn bad_sizes_rejected() {
        assert!(matches!(generate_room(&SceneSpec::new(0, 60, 64)), Err(Error::Config(_))));
        assert!(matches!(generate_room(&SceneSpec::new(0, 64, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn near_identity_corruption() {
        let gt = generate_scene::<f32>(&SceneSpec::new(5, 64, 64)).unwrap();
        let noise =
            NoiseConfig { depth_noise_sigma: 0.0, depth_blur_radius: 0, label_flip_rate: 0.0, sem_smoothing: 1e-3 };
        let p = corrupt_predictions(&gt, &noise, 1).unwrap();
        assert_eq!(&p.depth, gt.depth());
        for (i, &l) in gt.labels().iter().enumerate() {
            assert!(p.semantics.data()[l as usize * 4096 + i] > 0.999);
        }
    }

    #[test]
    fn flip_rate_matches_expectation() {
        let gt = generate_scene::<f32>(&SceneSpec::new(11, 64, 64)).unwrap();
        let noise = NoiseConfig { label_flip_rate: 0.2, ..NoiseConfig::default() };
        for seed in 0..5 {
            let p = corrupt_predictions(&gt, &noise, seed).unwrap();
            let agree = (0..4096)
                .filter(|&i| {
                    let best = (0..5)
                        .max_by(|&a, &b| p.semantics.data()[a * 4096 + i].total_cmp(&p.semantics.data()[b * 4096 + i]))
                        .unwrap();
                    best as u32 == gt.labels()[i]
                })
                .count();
            let acc = agree as f64 / 4096.0;
            assert!((acc - 0.8).abs() <= 0.02, "accuracy {acc}");
        }
    }

    #[test]
    fn corrupted_inputs_respect_contract() {
        let gt = generate_scene::<f32>(&SceneSpec::new(2, 32, 32)).unwrap();
        let noise = NoiseConfig { depth_noise_sigma: 3.0, ..NoiseConfig::default() };
        let p = corrupt_predictions(&gt, &noise, 9).unwrap();
        assert!(p.depth.data().iter().all(|&d| (0.0..=10.0).contains(&d)));
        for i in 0..1024 {
            let s: f32 = (0..5).map(|c| p.semantics.data()[c * 1024 + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        assert_eq!(p, corrupt_predictions(&gt, &noise, 9).unwrap());
    }

    #[test]
    fn invalid_noise_rejected() {
        let gt = generate_scene::<f32>(&SceneSpec::new(2, 8, 8)).unwrap();
        for bad in [
            NoiseConfig { label_flip_rate: 1.0, ..NoiseConfig::default() },
            NoiseConfig { sem_smoothing: 0.0, ..NoiseConfig::default() },
            NoiseConfig { depth_noise_sigma: -1.0, ..NoiseConfig::default() },
        ] {
            assert!(corrupt_predictions(&gt, &bad, 0).is_err());
        }
    }

    #[test]
    fn box_blur_averages_window() {
        let src: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let b = box_blur(&src, 3, 3, 1);
        assert_eq!(b[4], 4.0);
        assert_eq!(b[0], (0.0 + 1.0 + 3.0 + 4.0) / 4.0);
    }
}
