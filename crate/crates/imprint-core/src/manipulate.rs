//! Frozen differentiable image transforms standing in for generative
//! manipulation models. Parameters are drawn once from a seed at
//! construction and never change; gradients flow through the transform to
//! its input, which is what lets template learning see how manipulation
//! destroys the embedded signal.
//!
//! Three families with unrelated mechanics so experiments can hold entire
//! families out as "unseen": a residual convolution stack, a masked
//! inpainting fill, and a color-matrix-plus-warp.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::networks::ParamStore;
use crate::real::Real;
use crate::rng::RngStream;
use crate::{Error, Result, SIDE};

/// Fraction of the image side covered by the inpainting mask per axis.
const MASK_DIVISOR: usize = 4;
/// Coarse flow grid resolution for the warp family.
const FLOW_GRID: usize = 8;
/// Largest per-axis warp displacement in pixels.
const FLOW_LIMIT: f64 = 3.0;
/// Half-width of the color matrix perturbation around identity.
const COLOR_JITTER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipulatorKind {
    FixedConv,
    MaskedInpaint,
    ColorWarp,
}

impl fmt::Display for ManipulatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ManipulatorKind::FixedConv => "fixed_conv",
            ManipulatorKind::MaskedInpaint => "masked_inpaint",
            ManipulatorKind::ColorWarp => "color_warp",
        };
        f.write_str(s)
    }
}

impl FromStr for ManipulatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_conv" => Ok(ManipulatorKind::FixedConv),
            "masked_inpaint" => Ok(ManipulatorKind::MaskedInpaint),
            "color_warp" => Ok(ManipulatorKind::ColorWarp),
            other => Err(Error::argument(
                "manipulator",
                format!("unknown kind {other:?}"),
            )),
        }
    }
}

/// A frozen image-to-image transform. Reentrant; `apply` never mutates.
pub struct Manipulator<T: Real> {
    kind: ManipulatorKind,
    seed: u64,
    side: usize,
    store: ParamStore<T>,
    /// Dense warp field for the color_warp family, kept at f64 for the
    /// sampler; checksummed through its store copy.
    flow: Option<Array3<f64>>,
}

impl<T: Real> Manipulator<T> {
    /// Builds the standard 128-side manipulator for a kind and seed.
    pub fn new(kind: ManipulatorKind, seed: u64) -> Self {
        Self::with_side(kind, seed, SIDE)
    }

    /// Same construction at a reduced image side, for finite-difference
    /// tests.
    pub fn with_side(kind: ManipulatorKind, seed: u64, side: usize) -> Self {
        assert!(side >= 2 * MASK_DIVISOR, "side too small");
        let mut rng = RngStream::new(seed).derive(0x4d414e49);
        let mut store = ParamStore::new();
        let mut flow = None;
        match kind {
            ManipulatorKind::FixedConv => {
                store.insert("c1.w", he_conv(&mut rng, 8, 3, 3), false);
                store.insert("c1.b", zeros(&[8]), false);
                store.insert("c2.w", he_conv(&mut rng, 8, 8, 3), false);
                store.insert("c2.b", zeros(&[8]), false);
                store.insert("c3.w", he_conv(&mut rng, 3, 8, 3), false);
                store.insert("c3.b", zeros(&[3]), false);
            }
            ManipulatorKind::MaskedInpaint => {
                let m = side / MASK_DIVISOR;
                let top = rng.index(side - m + 1);
                let left = rng.index(side - m + 1);
                let corner =
                    ArrayD::from_shape_vec(IxDyn(&[2]), vec![T::of(top as f64), T::of(left as f64)])
                        .unwrap();
                store.insert("mask.corner", corner, false);
                store.insert("smooth.w", binomial_depthwise(), false);
                store.insert("smooth.b", zeros(&[3]), false);
            }
            ManipulatorKind::ColorWarp => {
                let mut color = ArrayD::from_elem(IxDyn(&[3, 3, 1, 1]), T::ZERO);
                for c in 0..3 {
                    for d in 0..3 {
                        let base = if c == d { 1.0 } else { 0.0 };
                        color[IxDyn(&[c, d, 0, 0])] =
                            T::of(base + rng.range_f64(-COLOR_JITTER, COLOR_JITTER));
                    }
                }
                store.insert("color.w", color, false);
                store.insert("color.b", zeros(&[3]), false);
                let f = draw_flow(&mut rng, side);
                store.insert(
                    "flow",
                    f.mapv(|v| T::of(v)).into_dyn(),
                    false,
                );
                flow = Some(f);
            }
        }
        Manipulator {
            kind,
            seed,
            side,
            store,
            flow,
        }
    }

    /// A color_warp with unit color matrix and zero displacement; exact
    /// identity, used to pin the transform's neutral element.
    pub fn identity_color_warp(side: usize) -> Self {
        let mut store = ParamStore::new();
        let mut color = ArrayD::from_elem(IxDyn(&[3, 3, 1, 1]), T::ZERO);
        for c in 0..3 {
            color[IxDyn(&[c, c, 0, 0])] = T::ONE;
        }
        store.insert("color.w", color, false);
        store.insert("color.b", zeros(&[3]), false);
        let f = Array3::<f64>::zeros((2, side, side));
        store.insert("flow", f.mapv(T::of).into_dyn(), false);
        Manipulator {
            kind: ManipulatorKind::ColorWarp,
            seed: 0,
            side,
            store,
            flow: Some(f),
        }
    }

    /// A fixed_conv whose frozen weights are all zero; the tanh residual
    /// vanishes, so this is the identity.
    pub fn zero_fixed_conv(side: usize) -> Self {
        let mut store = ParamStore::new();
        store.insert("c1.w", zeros(&[8, 3, 3, 3]), false);
        store.insert("c1.b", zeros(&[8]), false);
        store.insert("c2.w", zeros(&[8, 8, 3, 3]), false);
        store.insert("c2.b", zeros(&[8]), false);
        store.insert("c3.w", zeros(&[3, 8, 3, 3]), false);
        store.insert("c3.b", zeros(&[3]), false);
        Manipulator {
            kind: ManipulatorKind::FixedConv,
            seed: 0,
            side,
            store,
            flow: None,
        }
    }

    pub fn kind(&self) -> ManipulatorKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Digest of every frozen parameter; constant for the lifetime of the
    /// value, asserted across training epochs.
    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    /// Records the transform of a batch (N, 3, H, W) onto `g`. Output shape
    /// equals input shape; gradients flow to the input.
    pub fn apply(&self, g: &Graph<T>, x: Var) -> Var {
        let shape = g.value(x).shape().to_vec();
        assert_eq!(shape.len(), 4, "manipulate: input must be (N, 3, H, W)");
        assert_eq!(shape[1], 3, "manipulate: input must have 3 channels");
        assert_eq!(
            (shape[2], shape[3]),
            (self.side, self.side),
            "manipulate: wrong image side"
        );
        match self.kind {
            ManipulatorKind::FixedConv => self.apply_fixed_conv(g, x),
            ManipulatorKind::MaskedInpaint => self.apply_masked_inpaint(g, x, &shape),
            ManipulatorKind::ColorWarp => self.apply_color_warp(g, x, shape[0]),
        }
    }

    fn apply_fixed_conv(&self, g: &Graph<T>, x: Var) -> Var {
        let p = |n: &str| g.constant_shared(self.store.arc(n));
        let h1 = g.relu(g.conv2d(x, p("c1.w"), p("c1.b"), 1, 1));
        let h2 = g.relu(g.conv2d(h1, p("c2.w"), p("c2.b"), 1, 1));
        let r = g.tanh(g.conv2d(h2, p("c3.w"), p("c3.b"), 1, 1));
        g.add(x, r)
    }

    fn apply_masked_inpaint(&self, g: &Graph<T>, x: Var, shape: &[usize]) -> Var {
        let corner = self.store.get("mask.corner");
        let (top, left) = (
            corner[IxDyn(&[0])].to_f64() as usize,
            corner[IxDyn(&[1])].to_f64() as usize,
        );
        let m = self.side / MASK_DIVISOR;
        let mut mask = ArrayD::from_elem(IxDyn(shape), T::ZERO);
        let mut inv = ArrayD::from_elem(IxDyn(shape), T::ONE);
        for n in 0..shape[0] {
            for c in 0..3 {
                for i in top..top + m {
                    for j in left..left + m {
                        mask[IxDyn(&[n, c, i, j])] = T::ONE;
                        inv[IxDyn(&[n, c, i, j])] = T::ZERO;
                    }
                }
            }
        }
        let mask = g.constant(mask);
        let inv = g.constant(inv);
        let zeroed = g.mul(x, inv);
        let p = |n: &str| g.constant_shared(self.store.arc(n));
        let smoothed = g.conv2d(zeroed, p("smooth.w"), p("smooth.b"), 1, 2);
        let fill = g.mul(mask, smoothed);
        g.add(zeroed, fill)
    }

    fn apply_color_warp(&self, g: &Graph<T>, x: Var, n: usize) -> Var {
        let flow = self.flow.as_ref().expect("color_warp carries a flow field");
        let warped: Vec<Var> = (0..n)
            .map(|i| {
                let item = g.select0(x, i);
                g.warp_bilinear(item, flow)
            })
            .collect();
        let batch = g.stack0(&warped);
        let p = |nm: &str| g.constant_shared(self.store.arc(nm));
        g.conv2d(batch, p("color.w"), p("color.b"), 1, 0)
    }
}

fn he_conv<T: Real>(rng: &mut RngStream, out_c: usize, in_c: usize, k: usize) -> ArrayD<T> {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(&[out_c, in_c, k, k]), || {
        T::of(rng.normal_f64() * std)
    })
}

fn zeros<T: Real>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::ZERO)
}

/// Depthwise 5x5 binomial smoothing kernel: outer product of
/// [1 4 6 4 1] / 16 on the diagonal channel pairs, zero across channels.
fn binomial_depthwise<T: Real>() -> ArrayD<T> {
    let b = [1.0, 4.0, 6.0, 4.0, 1.0].map(|v| v / 16.0);
    let mut w = ArrayD::from_elem(IxDyn(&[3, 3, 5, 5]), T::ZERO);
    for c in 0..3 {
        for i in 0..5 {
            for j in 0..5 {
                w[IxDyn(&[c, c, i, j])] = T::of(b[i] * b[j]);
            }
        }
    }
    w
}

/// Coarse random displacement grid upsampled to a dense, smooth field.
/// Bilinear interpolation keeps every displacement inside the grid's range.
fn draw_flow(rng: &mut RngStream, side: usize) -> Array3<f64> {
    let mut grid = Array3::<f64>::zeros((2, FLOW_GRID, FLOW_GRID));
    for v in grid.iter_mut() {
        *v = rng.range_f64(-FLOW_LIMIT, FLOW_LIMIT);
    }
    let mut flow = Array3::<f64>::zeros((2, side, side));
    let scale = FLOW_GRID as f64 / side as f64;
    for axis in 0..2 {
        for i in 0..side {
            for j in 0..side {
                let sy = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (FLOW_GRID - 1) as f64);
                let sx = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (FLOW_GRID - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(FLOW_GRID - 1), (x0 + 1).min(FLOW_GRID - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                flow[(axis, i, j)] = grid[(axis, y0, x0)] * (1.0 - fy) * (1.0 - fx)
                    + grid[(axis, y0, x1)] * (1.0 - fy) * fx
                    + grid[(axis, y1, x0)] * fy * (1.0 - fx)
                    + grid[(axis, y1, x1)] * fy * fx;
            }
        }
    }
    flow
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::grad_check;

    fn batch(seed: u64, n: usize, side: usize) -> ArrayD<f64> {
        let mut rng = RngStream::new(seed);
        ArrayD::from_shape_simple_fn(IxDyn(&[n, 3, side, side]), || rng.unit_f64())
    }

    fn run(m: &Manipulator<f64>, x: &ArrayD<f64>) -> ArrayD<f64> {
        let g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let y = m.apply(&g, xv);
        g.value(y).as_ref().clone()
    }

    fn mean_abs_change(m: &Manipulator<f64>, x: &ArrayD<f64>) -> f64 {
        let y = run(m, x);
        (&y - x).mapv(f64::abs).mean().unwrap()
    }

    #[test]
    fn kinds_parse_and_display_round_trip() {
        for kind in [
            ManipulatorKind::FixedConv,
            ManipulatorKind::MaskedInpaint,
            ManipulatorKind::ColorWarp,
        ] {
            assert_eq!(kind.to_string().parse::<ManipulatorKind>().unwrap(), kind);
        }
        assert!("swirl".parse::<ManipulatorKind>().is_err());
    }

    #[test]
    fn same_kind_and_seed_are_bit_identical() {
        let x = batch(1, 2, 32);
        for kind in [
            ManipulatorKind::FixedConv,
            ManipulatorKind::MaskedInpaint,
            ManipulatorKind::ColorWarp,
        ] {
            let a = Manipulator::<f64>::with_side(kind, 9, 32);
            let b = Manipulator::<f64>::with_side(kind, 9, 32);
            assert_eq!(a.checksum(), b.checksum());
            assert_eq!(run(&a, &x), run(&b, &x));
        }
    }

    #[test]
    fn different_seeds_differ_on_a_fixed_image() {
        let x = batch(2, 1, 32);
        for kind in [
            ManipulatorKind::FixedConv,
            ManipulatorKind::MaskedInpaint,
            ManipulatorKind::ColorWarp,
        ] {
            let a = Manipulator::<f64>::with_side(kind, 1, 32);
            let b = Manipulator::<f64>::with_side(kind, 2, 32);
            assert_ne!(run(&a, &x), run(&b, &x), "{kind}");
        }
    }

    #[test]
    fn identity_color_warp_is_exact_identity() {
        let x = batch(3, 2, 32);
        let m = Manipulator::<f64>::identity_color_warp(32);
        assert_eq!(run(&m, &x), x);
    }

    #[test]
    fn zero_fixed_conv_is_identity() {
        let x = batch(4, 1, 32);
        let m = Manipulator::<f64>::zero_fixed_conv(32);
        assert_eq!(run(&m, &x), x);
    }

    #[test]
    fn inpaint_changes_only_the_mask_region() {
        let side = 64;
        let m = Manipulator::<f64>::with_side(ManipulatorKind::MaskedInpaint, 5, side);
        let x = batch(5, 1, side);
        let y = run(&m, &x);
        let corner = m.store.get("mask.corner");
        let (top, left) = (corner[IxDyn(&[0])] as usize, corner[IxDyn(&[1])] as usize);
        let ms = side / MASK_DIVISOR;
        for c in 0..3 {
            for i in 0..side {
                for j in 0..side {
                    let inside = i >= top && i < top + ms && j >= left && j < left + ms;
                    let a = x[IxDyn(&[0, c, i, j])];
                    let b = y[IxDyn(&[0, c, i, j])];
                    if !inside {
                        assert_eq!(a, b, "pixel outside the mask changed at {c},{i},{j}");
                    }
                }
            }
        }
        // The mask interior really is rewritten.
        let center = IxDyn(&[0, 0, top + ms / 2, left + ms / 2]);
        assert_ne!(x[center.clone()], y[center]);
    }

    #[test]
    fn manipulations_are_not_trivial() {
        let x = batch(6, 2, 32);
        for kind in [
            ManipulatorKind::FixedConv,
            ManipulatorKind::MaskedInpaint,
            ManipulatorKind::ColorWarp,
        ] {
            let m = Manipulator::<f64>::with_side(kind, 3, 32);
            let change = mean_abs_change(&m, &x);
            assert!(change >= 0.01, "{kind} mean abs change {change}");
        }
    }

    #[test]
    fn output_shape_matches_input_shape() {
        let x = batch(7, 3, 32);
        for kind in [
            ManipulatorKind::FixedConv,
            ManipulatorKind::MaskedInpaint,
            ManipulatorKind::ColorWarp,
        ] {
            let m = Manipulator::<f64>::with_side(kind, 4, 32);
            assert_eq!(run(&m, &x).shape(), x.shape());
        }
    }

    #[test]
    fn checksum_is_constant_across_applications() {
        let m = Manipulator::<f64>::with_side(ManipulatorKind::FixedConv, 8, 16);
        let before = m.checksum();
        let x = batch(8, 1, 16);
        let _ = run(&m, &x);
        let _ = run(&m, &x);
        assert_eq!(m.checksum(), before);
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        for kind in [
            ManipulatorKind::FixedConv,
            ManipulatorKind::MaskedInpaint,
            ManipulatorKind::ColorWarp,
        ] {
            let m = Manipulator::<f64>::with_side(kind, 6, 16);
            let x = batch(9, 1, 16);
            let r = grad_check(&[x], 1e-6, |g, vars| {
                let y = m.apply(g, vars[0]);
                g.sum(y)
            });
            assert!(r.max_rel <= 1e-3, "{kind} rel {}", r.max_rel);
        }
    }

    #[test]
    fn flow_respects_the_displacement_limit() {
        let m = Manipulator::<f64>::with_side(ManipulatorKind::ColorWarp, 10, 64);
        let f = m.flow.as_ref().unwrap();
        for &v in f.iter() {
            assert!(v.abs() <= FLOW_LIMIT + 1e-12);
        }
    }
}
