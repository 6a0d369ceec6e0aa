//! Unnormalized 2D DFT helpers and the centered low-pass window used by the
//! spectral energy penalty. Conventions: forward transform has no scaling,
//! the spectrum is viewed with DC shifted to the center, and a window of
//! side k starts at n/2 - k/2 (integer division) along each axis.

use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::real::Real;

/// Unnormalized forward DFT of a real plane.
pub fn dft2<T: Real>(plane: &ArrayView2<T>) -> Array2<Complex<T>> {
    let mut data: Array2<Complex<T>> = plane.mapv(|v| Complex::new(v, T::ZERO));
    transform2(&mut data, false);
    data
}

/// Unnormalized inverse DFT (no 1/N factor), complex in and out.
pub fn idft2_unnorm<T: Real>(spec: &Array2<Complex<T>>) -> Array2<Complex<T>> {
    let mut data = spec.clone();
    transform2(&mut data, true);
    data
}

fn transform2<T: Real>(data: &mut Array2<Complex<T>>, inverse: bool) {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::<T>::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    for mut row in data.rows_mut() {
        let buf = row.as_slice_mut().expect("dft rows must be contiguous");
        row_fft.process(buf);
    }
    let mut scratch = vec![Complex::new(T::ZERO, T::ZERO); h];
    for x in 0..w {
        for y in 0..h {
            scratch[y] = data[[y, x]];
        }
        col_fft.process(&mut scratch);
        for y in 0..h {
            data[[y, x]] = scratch[y];
        }
    }
}

/// Whether each unshifted index along an axis of length `n` falls inside the
/// centered window of side `k`.
pub fn axis_window(n: usize, k: usize) -> Vec<bool> {
    assert!(k >= 1 && k <= n, "window side out of range");
    let c0 = n / 2 - k / 2;
    (0..n)
        .map(|u| {
            let shifted = (u + n / 2) % n;
            shifted >= c0 && shifted < c0 + k
        })
        .collect()
}

/// Energy inside the centered k x k window: sum of squared magnitudes of the
/// retained bins, accumulated in f64.
pub fn lowpass_energy_value<T: Real>(plane: &ArrayView2<T>, k: usize) -> f64 {
    let (h, w) = plane.dim();
    let spec = dft2(plane);
    let rows = axis_window(h, k);
    let cols = axis_window(w, k);
    let mut acc = 0.0f64;
    for y in 0..h {
        if !rows[y] {
            continue;
        }
        for x in 0..w {
            if cols[x] {
                let v = spec[[y, x]];
                acc += v.re.to_f64() * v.re.to_f64() + v.im.to_f64() * v.im.to_f64();
            }
        }
    }
    acc
}

/// Gradient of [`lowpass_energy_value`] with respect to the plane:
/// 2 Re(IDFT(window-masked spectrum)) under the unnormalized convention.
pub fn lowpass_energy_grad<T: Real>(plane: &ArrayView2<T>, k: usize) -> Array2<T> {
    let (h, w) = plane.dim();
    let mut spec = dft2(plane);
    let rows = axis_window(h, k);
    let cols = axis_window(w, k);
    for y in 0..h {
        for x in 0..w {
            if !(rows[y] && cols[x]) {
                spec[[y, x]] = Complex::new(T::ZERO, T::ZERO);
            }
        }
    }
    let back = idft2_unnorm(&spec);
    back.mapv(|v| v.re + v.re)
}
