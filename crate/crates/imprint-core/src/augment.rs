//! Image-editing robustness suite applied between encryption and
//! manipulation/recovery. Every operation gates itself on a probability
//! draw (skip branch is exact identity) and records onto the training
//! graph.
//!
//! Differentiability: blur, resize, crop and noise carry their true
//! adjoints (the integer draws parameterizing a crop are constants of the
//! step, the spatial ops themselves have exact gradients). JPEG has no
//! usable derivative, so it enters the graph through a straight-through
//! node: forward uses the codec round trip, backward is the identity.

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayD, Ix3};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::plane::{self, Image};
use crate::real::Real;
use crate::rng::RngStream;
use crate::{Error, Result};

/// Default gate probability shared by the whole suite.
pub const GATE_P: f64 = 0.5;
/// Largest blur standard deviation.
pub const BLUR_SIGMA_MAX: f64 = 3.0;
/// JPEG quality is drawn uniformly from this inclusive range.
pub const JPEG_QUALITY_RANGE: (u8, u8) = (30, 100);
/// Largest crop, in pixels, removed from one side.
pub const CROP_MAX: usize = 30;
/// Additive noise scale: unit-variance noise expressed in 8-bit units.
pub const NOISE_SCALE: f64 = 1.0 / 255.0;
/// Upsample target of the resize round trip, relative to the input side.
pub const RESIZE_FACTOR: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    GaussianBlur,
    Jpeg,
    BlurJpeg,
    ResizeMix,
    RandomCrop,
    GaussianNoise,
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AugmentKind::GaussianBlur => "gaussian_blur",
            AugmentKind::Jpeg => "jpeg",
            AugmentKind::BlurJpeg => "blur_jpeg",
            AugmentKind::ResizeMix => "resize_mix",
            AugmentKind::RandomCrop => "random_crop",
            AugmentKind::GaussianNoise => "gaussian_noise",
        };
        f.write_str(s)
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blur" => Ok(AugmentKind::GaussianBlur),
            "jpeg" => Ok(AugmentKind::Jpeg),
            "blur_jpeg" => Ok(AugmentKind::BlurJpeg),
            "resize_mix" => Ok(AugmentKind::ResizeMix),
            "random_crop" => Ok(AugmentKind::RandomCrop),
            "gaussian_noise" => Ok(AugmentKind::GaussianNoise),
            other => Err(Error::argument(
                "augmentation",
                format!("unknown operation {other:?}"),
            )),
        }
    }
}

/// One entry of an augmentation recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecipeStep {
    pub op: AugmentKind,
    pub probability: f64,
}

/// Ordered list of augmentation steps applied left to right.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Recipe {
    pub steps: Vec<RecipeStep>,
}

impl Recipe {
    /// No augmentation at all.
    pub fn none() -> Self {
        Recipe { steps: Vec::new() }
    }

    /// A single operation at the standard gate probability.
    pub fn single(op: AugmentKind) -> Self {
        Recipe {
            steps: vec![RecipeStep {
                op,
                probability: GATE_P,
            }],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Applies one gated operation to a (3, H, W) item on the graph.
pub fn apply_op<T: Real>(
    g: &Graph<T>,
    x: Var,
    op: AugmentKind,
    probability: f64,
    rng: &mut RngStream,
) -> Var {
    match op {
        AugmentKind::GaussianBlur => gaussian_blur(g, x, probability, rng),
        AugmentKind::Jpeg => jpeg_compress(g, x, probability, rng),
        AugmentKind::BlurJpeg => {
            let b = gaussian_blur(g, x, probability, rng);
            jpeg_compress(g, b, probability, rng)
        }
        AugmentKind::ResizeMix => resize_mix(g, x, probability, rng),
        AugmentKind::RandomCrop => random_crop(g, x, probability, rng),
        AugmentKind::GaussianNoise => gaussian_noise(g, x, probability, rng),
    }
}

/// Applies a whole recipe in order.
pub fn apply_recipe<T: Real>(g: &Graph<T>, x: Var, recipe: &Recipe, rng: &mut RngStream) -> Var {
    let mut h = x;
    for step in &recipe.steps {
        h = apply_op(g, h, step.op, step.probability, rng);
    }
    h
}

/// Value-level application for corpus preparation and robustness
/// evaluation; same code path as training, minus gradients.
pub fn augment_image_value<T: Real>(
    img: &Image<T>,
    recipe: &Recipe,
    rng: &mut RngStream,
) -> Image<T> {
    let g = Graph::<T>::new();
    let x = g.constant(img.clone().into_dyn());
    let y = apply_recipe(&g, x, recipe, rng);
    g.value(y)
        .as_ref()
        .clone()
        .into_dimensionality::<Ix3>()
        .expect("augmentation preserves rank")
}

/// Gaussian blur with sigma ~ U[0, max], kernel radius ceil(3 sigma),
/// reflective padding. Sigma 0 and the skip branch are identities.
pub fn gaussian_blur<T: Real>(g: &Graph<T>, x: Var, probability: f64, rng: &mut RngStream) -> Var {
    if !rng.bernoulli(probability) {
        return x;
    }
    let sigma = rng.range_f64(0.0, BLUR_SIGMA_MAX);
    if sigma == 0.0 {
        return x;
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let kernel = gaussian_kernel(sigma, radius);
    let padded = g.pad_reflect(x, radius);
    g.sep_corr_valid(padded, &kernel)
}

/// JPEG round trip at quality ~ U{30..100}; straight-through backward.
pub fn jpeg_compress<T: Real>(g: &Graph<T>, x: Var, probability: f64, rng: &mut RngStream) -> Var {
    if !rng.bernoulli(probability) {
        return x;
    }
    let span = (JPEG_QUALITY_RANGE.1 - JPEG_QUALITY_RANGE.0) as usize + 1;
    let quality = JPEG_QUALITY_RANGE.0 + rng.index(span) as u8;
    let v = g.value(x);
    let img = v
        .view()
        .into_dimensionality::<Ix3>()
        .expect("jpeg input must be (3, H, W)");
    let coded = jpeg_round_trip_value(&img.to_owned(), quality)
        .expect("in-memory jpeg round trip cannot fail on valid images");
    g.straight_through(x, coded.into_dyn())
}

/// The codec round trip itself, exposed for measurement tests. Clamps to
/// [0, 1], quantizes to 8-bit, encodes and decodes.
pub fn jpeg_round_trip_value<T: Real>(img: &Image<T>, quality: u8) -> Result<Image<T>> {
    let (c, h, w) = img.dim();
    assert_eq!(c, 3, "jpeg: 3-channel images only");
    use image::ImageEncoder as _;
    let bytes = plane::to_rgb8(&img.view());
    let mut encoded: Vec<u8> = Vec::new();
    let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut encoded, quality);
    enc.write_image(
        &bytes,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(Error::from)?;
    let decoded = image::load_from_memory_with_format(&encoded, image::ImageFormat::Jpeg)
        .map_err(Error::from)?
        .to_rgb8();
    if (decoded.width(), decoded.height()) != (w as u32, h as u32) {
        return Err(Error::Image("jpeg round trip changed dimensions".into()));
    }
    Ok(plane::from_rgb8(decoded.as_raw(), h, w))
}

/// Bilinear round trip through double resolution.
pub fn resize_mix<T: Real>(g: &Graph<T>, x: Var, probability: f64, rng: &mut RngStream) -> Var {
    if !rng.bernoulli(probability) {
        return x;
    }
    let shape = g.value(x).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let up = g.bilinear_resize(x, h * RESIZE_FACTOR, w * RESIZE_FACTOR);
    g.bilinear_resize(up, h, w)
}

/// Independently gated per side: remove U{0..CROP_MAX} rows/columns, then
/// resize back to the original geometry. Amounts additionally cap at just
/// under half the side so reduced-size test images stay non-degenerate; at
/// the standard 128 side the cap is inactive.
pub fn random_crop<T: Real>(g: &Graph<T>, x: Var, probability: f64, rng: &mut RngStream) -> Var {
    let shape = g.value(x).shape().to_vec();
    let cap = (shape[1].min(shape[2]) - 1) / 2;
    let mut amounts = [0usize; 4];
    for a in amounts.iter_mut() {
        if rng.bernoulli(probability) {
            *a = rng.index(CROP_MAX + 1).min(cap);
        }
    }
    let [top, bottom, left, right] = amounts;
    if amounts == [0; 4] {
        return x;
    }
    let (h, w) = (shape[1], shape[2]);
    let cropped = g.crop(x, top, bottom, left, right);
    g.bilinear_resize(cropped, h, w)
}

/// Adds zero-mean unit-variance noise expressed in 8-bit units.
pub fn gaussian_noise<T: Real>(g: &Graph<T>, x: Var, probability: f64, rng: &mut RngStream) -> Var {
    if !rng.bernoulli(probability) {
        return x;
    }
    let shape = g.value(x).shape().to_vec();
    let noise = ArrayD::from_shape_simple_fn(ndarray::IxDyn(&shape), || {
        T::of(rng.normal_f64() * NOISE_SCALE)
    });
    let n = g.constant(noise);
    g.add(x, n)
}

/// Discrete normalized Gaussian taps at integer offsets -r..=r.
fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    assert!(sigma > 0.0);
    let mut k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier;
    use crate::oracle::grad_check;
    use ndarray::{Array2, Array3};

    fn image(seed: u64, side: usize) -> Image<f64> {
        let mut rng = RngStream::new(seed);
        Array3::from_shape_simple_fn((3, side, side), || rng.unit_f64())
    }

    /// Forces the gate open by spinning the stream until the next draw
    /// passes; returns a stream positioned right before a passing draw.
    fn stream_passing_gate(seed: u64) -> RngStream {
        let mut probe = RngStream::new(seed);
        let mut skip = 0usize;
        loop {
            if probe.bernoulli(GATE_P) {
                break;
            }
            skip += 1;
        }
        let mut rng = RngStream::new(seed);
        for _ in 0..skip {
            rng.bernoulli(GATE_P);
        }
        rng
    }

    /// A seed whose stream passes the gate and then draws sigma >= 1, found
    /// by deterministic probing.
    fn seed_with_strong_sigma() -> u64 {
        for seed in 0.. {
            let mut probe = RngStream::new(seed);
            if probe.bernoulli(GATE_P) && probe.range_f64(0.0, BLUR_SIGMA_MAX) >= 1.0 {
                return seed;
            }
        }
        unreachable!()
    }

    fn apply_value(img: &Image<f64>, op: AugmentKind, rng: &mut RngStream) -> Image<f64> {
        let recipe = Recipe {
            steps: vec![RecipeStep {
                op,
                probability: GATE_P,
            }],
        };
        augment_image_value(img, &recipe, rng)
    }

    #[test]
    fn kind_names_round_trip() {
        for op in [
            AugmentKind::GaussianBlur,
            AugmentKind::Jpeg,
            AugmentKind::BlurJpeg,
            AugmentKind::ResizeMix,
            AugmentKind::RandomCrop,
            AugmentKind::GaussianNoise,
        ] {
            assert_eq!(op.to_string().parse::<AugmentKind>().unwrap(), op);
        }
        assert!("sharpen".parse::<AugmentKind>().is_err());
    }

    #[test]
    fn zero_probability_is_identity_for_every_op() {
        let img = image(1, 32);
        for op in [
            AugmentKind::GaussianBlur,
            AugmentKind::Jpeg,
            AugmentKind::BlurJpeg,
            AugmentKind::ResizeMix,
            AugmentKind::RandomCrop,
            AugmentKind::GaussianNoise,
        ] {
            let mut rng = RngStream::new(2);
            let recipe = Recipe {
                steps: vec![RecipeStep {
                    op,
                    probability: 0.0,
                }],
            };
            let out = augment_image_value(&img, &recipe, &mut rng);
            assert_eq!(out, img, "{op}");
        }
    }

    #[test]
    fn empty_recipe_is_identity() {
        let img = image(3, 16);
        let mut rng = RngStream::new(4);
        assert_eq!(augment_image_value(&img, &Recipe::none(), &mut rng), img);
    }

    #[test]
    fn seeded_pipeline_replays_bit_identically() {
        let img = image(5, 32);
        let recipe = Recipe {
            steps: [
                AugmentKind::GaussianBlur,
                AugmentKind::Jpeg,
                AugmentKind::RandomCrop,
                AugmentKind::GaussianNoise,
            ]
            .into_iter()
            .map(|op| RecipeStep {
                op,
                probability: GATE_P,
            })
            .collect(),
        };
        let a = augment_image_value(&img, &recipe, &mut RngStream::new(6));
        let b = augment_image_value(&img, &recipe, &mut RngStream::new(6));
        assert_eq!(a, b);
    }

    #[test]
    fn blur_of_constant_image_is_unchanged() {
        let img = Array3::from_elem((3, 32, 32), 0.42);
        let mut rng = stream_passing_gate(7);
        let out = apply_value(&img, AugmentKind::GaussianBlur, &mut rng);
        for v in out.iter() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_strips_high_frequency_energy_from_a_checkerboard() {
        let side = 32;
        let mut img = Array3::from_elem((3, side, side), 0.0);
        for c in 0..3 {
            for i in 0..side {
                for j in 0..side {
                    img[[c, i, j]] = ((i + j) % 2) as f64;
                }
            }
        }
        let mut rng = RngStream::new(seed_with_strong_sigma());
        let out = apply_value(&img, AugmentKind::GaussianBlur, &mut rng);
        assert_ne!(out, img);
        // Total spectral energy minus the low bin = high-frequency mass.
        let hf = |p: &Array2<f64>| {
            let total = p.iter().map(|v| v * v).sum::<f64>() * (side * side) as f64;
            total - fourier::lowpass_energy_value(&p.view(), side / 4)
        };
        let before = hf(&img.index_axis(ndarray::Axis(0), 0).to_owned());
        let after = hf(&out.index_axis(ndarray::Axis(0), 0).to_owned());
        assert!(
            after < before * 0.5,
            "high-frequency energy {after} vs {before}"
        );
    }

    #[test]
    fn jpeg_at_quality_100_stays_close_on_mid_gray() {
        let img = Array3::from_elem((3, 32, 32), 0.5);
        let out = jpeg_round_trip_value(&img, 100).unwrap();
        let max = (&out - &img).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(max <= 2.0 / 255.0, "max deviation {max}");
    }

    #[test]
    fn jpeg_output_stays_in_unit_range() {
        let img = image(12, 32);
        let out = jpeg_round_trip_value(&img, 35).unwrap();
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn jpeg_backward_is_identity() {
        let img = image(13, 16);
        let g = Graph::<f64>::new();
        let x = g.leaf(img.into_dyn());
        let mut rng = stream_passing_gate(14);
        let y = jpeg_compress(&g, x, GATE_P, &mut rng);
        let s = g.sum(y);
        let mut grads = g.backward(s);
        let gx = grads.take(x).unwrap();
        assert!(gx.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn resize_round_trip_stays_close_on_smooth_images() {
        let side = 32;
        let img = Array3::from_shape_fn((3, side, side), |(c, i, j)| {
            0.3 + 0.2 * ((i as f64) / side as f64) + 0.1 * ((j + c) as f64 / side as f64)
        });
        let mut rng = stream_passing_gate(15);
        let out = apply_value(&img, AugmentKind::ResizeMix, &mut rng);
        let mad = (&out - &img).mapv(f64::abs).mean().unwrap();
        assert!(mad <= 0.1, "mean absolute deviation {mad}");
    }

    #[test]
    fn constant_image_survives_resize_exactly_enough() {
        let img = Array3::from_elem((3, 32, 32), 0.77);
        let mut rng = stream_passing_gate(16);
        let out = apply_value(&img, AugmentKind::ResizeMix, &mut rng);
        for v in out.iter() {
            assert!((v - 0.77).abs() < 1e-9);
        }
    }

    #[test]
    fn crop_geometry_recovers_central_content() {
        // Deterministic geometry check through the graph ops directly:
        // max crop on every side of a 128 image keeps the central 68x68.
        let side = 128;
        let img = image(17, side);
        let g = Graph::<f64>::new();
        let x = g.constant(img.clone().into_dyn());
        let cropped = g.crop(x, CROP_MAX, CROP_MAX, CROP_MAX, CROP_MAX);
        assert_eq!(g.value(cropped).shape(), &[3, 68, 68]);
        let back = g.bilinear_resize(cropped, side, side);
        assert_eq!(g.value(back).shape(), &[3, side, side]);
    }

    #[test]
    fn noise_mean_is_within_clt_bounds() {
        let img = image(18, 128);
        let mut rng = stream_passing_gate(19);
        let out = apply_value(&img, AugmentKind::GaussianNoise, &mut rng);
        let diff = &out - &img;
        let n = diff.len() as f64;
        let mean = diff.iter().sum::<f64>() / n;
        // Added noise has sd NOISE_SCALE per pixel; the sample mean of
        // 3*128^2 draws stays within 4 sigma.
        let bound = 4.0 * NOISE_SCALE / n.sqrt();
        assert!(mean.abs() <= bound, "noise mean {mean} vs bound {bound}");
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn blur_jpeg_composes_both_gates() {
        let img = image(20, 32);
        // probability 1 forces both branches on.
        let g = Graph::<f64>::new();
        let x = g.constant(img.clone().into_dyn());
        let mut rng = RngStream::new(21);
        let y = apply_op(&g, x, AugmentKind::BlurJpeg, 1.0, &mut rng);
        let out = g.value(y);
        assert_ne!(out.as_ref(), &img.clone().into_dyn());
        // probability 0 is the identity.
        let mut rng0 = RngStream::new(22);
        let y0 = apply_op(&g, x, AugmentKind::BlurJpeg, 0.0, &mut rng0);
        assert_eq!(g.value(y0).as_ref(), &img.into_dyn());
    }

    #[test]
    fn differentiable_ops_pass_gradcheck_through_the_gate() {
        let img = image(23, 16);
        for op in [
            AugmentKind::GaussianBlur,
            AugmentKind::ResizeMix,
            AugmentKind::RandomCrop,
            AugmentKind::GaussianNoise,
        ] {
            let r = grad_check(&[img.clone().into_dyn()], 1e-6, |g, vars| {
                // Fresh stream per evaluation so every finite-difference
                // probe sees identical draws.
                let mut rng = RngStream::new(24);
                let y = apply_op(g, vars[0], op, 1.0, &mut rng);
                g.sum_sq(y)
            });
            assert!(r.max_rel <= 1e-4, "{op} rel {}", r.max_rel);
        }
    }

    #[test]
    fn gate_rate_is_near_half_over_many_draws() {
        let mut rng = RngStream::new(25);
        let trials = 4000;
        let hits = (0..trials).filter(|_| rng.bernoulli(GATE_P)).count();
        let rate = hits as f64 / trials as f64;
        assert!((rate - GATE_P).abs() < 0.03, "gate rate {rate}");
    }
}
