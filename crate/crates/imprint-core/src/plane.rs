//! Plain (non-autodiff) kernels on image planes. These are the single source
//! of truth for cosine similarity, min-max normalization and value range
//! conventions; the autograd ops and the scoring path both call into here.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayViewD};

use crate::error::Error;
use crate::real::Real;
use crate::{Result, CHANNELS, SIDE};

/// Single channel H x W plane.
pub type Plane<T> = Array2<T>;

/// C x H x W image, values nominally in [0, 1].
pub type Image<T> = Array3<T>;

/// Checks working resolution and finiteness of an image.
pub fn check_image<T: Real>(img: &ArrayView3<T>, context: &'static str) -> Result<()> {
    let dim = img.dim();
    if dim != (CHANNELS, SIDE, SIDE) {
        return Err(Error::shape(
            context,
            format!("{CHANNELS}x{SIDE}x{SIDE}"),
            format!("{}x{}x{}", dim.0, dim.1, dim.2),
        ));
    }
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context));
    }
    Ok(())
}

/// Checks working resolution and finiteness of a template plane.
pub fn check_plane<T: Real>(plane: &ArrayView2<T>, context: &'static str) -> Result<()> {
    let dim = plane.dim();
    if dim != (SIDE, SIDE) {
        return Err(Error::shape(
            context,
            format!("{SIDE}x{SIDE}"),
            format!("{}x{}", dim.0, dim.1),
        ));
    }
    if plane.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context));
    }
    Ok(())
}

/// Dot product over flattened values, accumulated in f64.
pub fn dot_flat<T: Real>(a: ArrayViewD<T>, b: ArrayViewD<T>) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x.to_f64() * y.to_f64();
    }
    acc
}

/// Euclidean norm over flattened values, accumulated in f64.
pub fn norm_flat<T: Real>(a: ArrayViewD<T>) -> f64 {
    let mut acc = 0.0f64;
    for x in a.iter() {
        acc += x.to_f64() * x.to_f64();
    }
    acc.sqrt()
}

/// Cosine similarity of two equally sized arrays viewed as flat vectors.
/// Either operand having zero norm yields 0 by convention, so the value is
/// always defined and bounded in [-1, 1].
pub fn cosine_flat<T: Real>(a: ArrayViewD<T>, b: ArrayViewD<T>) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine over unequal lengths");
    let na = norm_flat(a.view());
    let nb = norm_flat(b.view());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let c = dot_flat(a, b) / (na * nb);
    c.clamp(-1.0, 1.0)
}

/// Location of the first minimum and first maximum in row-major order.
/// Ties resolve to the earliest index; the same rule drives the subgradient
/// of the normalization op.
pub fn min_max_argpos<T: Real>(plane: &ArrayView2<T>) -> (usize, usize, T, T) {
    let flat = plane.as_slice().expect("plane must be contiguous");
    let mut amin = 0;
    let mut amax = 0;
    let mut vmin = flat[0];
    let mut vmax = flat[0];
    for (i, &v) in flat.iter().enumerate().skip(1) {
        if v < vmin {
            vmin = v;
            amin = i;
        }
        if v > vmax {
            vmax = v;
            amax = i;
        }
    }
    (amin, amax, vmin, vmax)
}

/// Min-max normalization (S - min) / (max - min). A constant plane maps to
/// all zeros instead of dividing by zero.
pub fn minmax_normalize<T: Real>(plane: &ArrayView2<T>) -> Plane<T> {
    let (_, _, vmin, vmax) = min_max_argpos(plane);
    let range = vmax - vmin;
    if range == T::ZERO {
        return Array2::from_elem(plane.dim(), T::ZERO);
    }
    plane.mapv(|v| (v - vmin) / range)
}

/// Mean over all values, accumulated in f64.
pub fn mean_flat<T: Real>(a: ArrayViewD<T>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0f64;
    for x in a.iter() {
        acc += x.to_f64();
    }
    acc / a.len() as f64
}

/// Clamps every value into [0, 1]. Used only at export boundaries; training
/// graphs never clamp.
pub fn clamp01<T: Real>(img: &mut Array3<T>) {
    img.mapv_inplace(|v| v.clamp_val(T::ZERO, T::ONE));
}

/// Converts a [0, 1] image to interleaved 8-bit RGB rows, clamping first.
pub fn to_rgb8<T: Real>(img: &ArrayView3<T>) -> Vec<u8> {
    let (c, h, w) = img.dim();
    assert_eq!(c, CHANNELS);
    let mut out = vec![0u8; h * w * CHANNELS];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..CHANNELS {
                let v = img[[ch, y, x]].to_f64().clamp(0.0, 1.0);
                out[(y * w + x) * CHANNELS + ch] = (v * 255.0).round() as u8;
            }
        }
    }
    out
}

/// Converts interleaved 8-bit RGB rows into a [0, 1] image.
pub fn from_rgb8<T: Real>(data: &[u8], h: usize, w: usize) -> Image<T> {
    assert_eq!(data.len(), h * w * CHANNELS);
    let mut out = Array3::from_elem((CHANNELS, h, w), T::ZERO);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..CHANNELS {
                out[[ch, y, x]] = T::of(data[(y * w + x) * CHANNELS + ch] as f64 / 255.0);
            }
        }
    }
    out
}
