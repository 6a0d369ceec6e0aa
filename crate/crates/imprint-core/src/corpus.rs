//! Image sources: a seeded procedural generator producing textured
//! composites at the working resolution, and a loader that pulls a folder
//! of user images and resizes them to the working geometry.
//!
//! Generator images are a function of (corpus seed, image index) only, so
//! any slice of a corpus is stable no matter how many images are built
//! around it, and generation parallelizes per image without changing
//! results.

use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::autograd::Graph;
use crate::par;
use crate::plane::{self, Image};
use crate::real::Real;
use crate::rng::RngStream;
use crate::{Error, Result, CHANNELS, SIDE};

/// Default corpus sizes for desk-scale experiments.
pub const TRAIN_COUNT: usize = 500;
pub const TEST_COUNT: usize = 200;

/// Target mean intensity of generated images; keeps encryption headroom.
const MEAN_TARGET: f64 = 0.45;

/// Builds `count` procedural images from a corpus seed.
pub fn synthetic_corpus<T: Real>(count: usize, seed: u64) -> Vec<Image<T>> {
    par::ordered_map(count, |i| synthetic_image(seed, i as u64))
}

/// The standard disjoint train/test split: the test stream is tagged far
/// away from any train index.
pub fn default_split<T: Real>(seed: u64) -> (Vec<Image<T>>, Vec<Image<T>>) {
    let train = synthetic_corpus(TRAIN_COUNT, seed);
    let test: Vec<Image<T>> =
        par::ordered_map(TEST_COUNT, |i| synthetic_image(seed, (1 << 32) + i as u64));
    (train, test)
}

/// One textured composite: smooth low-frequency ground, a handful of
/// soft-edged shapes, fine sinusoidal texture and pixel grain, renormalized
/// to a controlled brightness.
pub fn synthetic_image<T: Real>(seed: u64, index: u64) -> Image<T> {
    let mut rng = RngStream::new(seed).derive(0x494d47 ^ index);
    let s = SIDE as f64;
    let mut img = Array3::<f64>::zeros((CHANNELS, SIDE, SIDE));

    // Per-channel base level.
    let base: [f64; 3] = std::array::from_fn(|_| 0.25 + 0.4 * rng.unit_f64());

    // Shared low-frequency field with per-channel gains.
    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: f64,
    }
    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            fx: rng.range_f64(0.5, 3.0),
            fy: rng.range_f64(0.5, 3.0),
            phase: rng.range_f64(0.0, std::f64::consts::TAU),
            amp: rng.range_f64(0.03, 0.12),
        })
        .collect();
    let gains: [f64; 3] = std::array::from_fn(|_| rng.range_f64(0.6, 1.4));

    // Fine texture waves.
    let fine: Vec<Wave> = (0..4)
        .map(|_| Wave {
            fx: rng.range_f64(8.0, 24.0),
            fy: rng.range_f64(8.0, 24.0),
            phase: rng.range_f64(0.0, std::f64::consts::TAU),
            amp: rng.range_f64(0.005, 0.03),
        })
        .collect();

    for c in 0..CHANNELS {
        for y in 0..SIDE {
            for x in 0..SIDE {
                let (u, v) = (x as f64 / s, y as f64 / s);
                let mut val = base[c];
                for w in &waves {
                    val += gains[c]
                        * w.amp
                        * (std::f64::consts::TAU * (w.fx * u + w.fy * v) + w.phase).cos();
                }
                for w in &fine {
                    val += w.amp
                        * (std::f64::consts::TAU * (w.fx * u + w.fy * v) + w.phase).cos();
                }
                img[[c, y, x]] = val;
            }
        }
    }

    // Soft-edged shapes with per-channel color offsets.
    let shapes = 3 + rng.index(4);
    for _ in 0..shapes {
        let cx = rng.range_f64(0.1, 0.9) * s;
        let cy = rng.range_f64(0.1, 0.9) * s;
        let rx = rng.range_f64(0.06, 0.28) * s;
        let ry = rng.range_f64(0.06, 0.28) * s;
        let color: [f64; 3] = std::array::from_fn(|_| rng.range_f64(-0.25, 0.25));
        let feather = 0.18;
        for y in 0..SIDE {
            for x in 0..SIDE {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                let d = dx * dx + dy * dy;
                // Smoothstep from d = 1 + feather down to 1 - feather.
                let t = ((1.0 + feather - d) / (2.0 * feather)).clamp(0.0, 1.0);
                let mask = t * t * (3.0 - 2.0 * t);
                if mask > 0.0 {
                    for c in 0..CHANNELS {
                        img[[c, y, x]] += mask * color[c];
                    }
                }
            }
        }
    }

    // Pixel grain.
    for v in img.iter_mut() {
        *v += rng.normal_f64() * 0.012;
    }

    // Controlled brightness: shift to the target mean, then clamp with
    // margin so encryption headroom survives.
    let mean = img.iter().sum::<f64>() / img.len() as f64;
    let shift = MEAN_TARGET - mean;
    for v in img.iter_mut() {
        *v = (*v + shift).clamp(0.02, 0.98);
    }

    img.mapv(T::of)
}

/// Bilinear resample of a loaded image to the working geometry.
pub fn resize_to_side<T: Real>(img: &Image<T>) -> Image<T> {
    let (c, h, w) = img.dim();
    assert_eq!(c, CHANNELS);
    if (h, w) == (SIDE, SIDE) {
        return img.clone();
    }
    let g = Graph::<T>::new();
    let x = g.constant(img.clone().into_dyn());
    let y = g.bilinear_resize(x, SIDE, SIDE);
    g.value(y)
        .as_ref()
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("resize preserves rank")
}

/// Loads one PNG or JPEG as a [0, 1] image resized to the working
/// geometry.
pub fn load_image<T: Real>(path: &Path) -> Result<Image<T>> {
    let decoded = image::open(path)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?
        .to_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let img = plane::from_rgb8::<T>(decoded.as_raw(), h, w);
    Ok(resize_to_side(&img))
}

/// Saves a [0, 1] image as PNG, clamping and quantizing to 8 bits.
pub fn save_png<T: Real>(img: &Image<T>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    assert_eq!(c, CHANNELS);
    let bytes = plane::to_rgb8(&img.view());
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, bytes).expect("sized buffer");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(Error::from)
}

/// True for file names the folder loader takes.
fn is_image_name(name: &str) -> bool {
    let lower = name.to_ascii_lowercase();
    [".png", ".jpg", ".jpeg"].iter().any(|e| lower.ends_with(e))
}

/// Loads every PNG/JPEG in a folder, sorted by file name for stable order,
/// each resized to the working geometry. Errors on an empty result.
pub fn load_folder<T: Real>(dir: &Path) -> Result<(Vec<Image<T>>, Vec<PathBuf>)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(is_image_name)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::argument(
            "folder",
            format!("no images found in {}", dir.display()),
        ));
    }
    let images: Vec<Result<Image<T>>> = par::ordered_map(paths.len(), |i| load_image(&paths[i]));
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        out.push(img?);
    }
    Ok((out, paths))
}
