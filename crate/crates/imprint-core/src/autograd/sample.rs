//! Resampling ops: bilinear resize, displacement warp, crop, reflective
//! padding and separable correlation. All run on single CxHxW items, with
//! half-pixel-center coordinates and edge clamping for the bilinear pair.

use ndarray::{Array3, ArrayD, ArrayView3, Ix3};

use super::{BackFn, GradSink, Graph, Var};
use crate::real::Real;

fn as3<'a, T: Real>(v: &'a ArrayD<T>, what: &'static str) -> ArrayView3<'a, T> {
    v.view().into_dimensionality::<Ix3>().unwrap_or_else(|_| {
        panic!("{what}: expected 3 axes, got {:?}", v.shape());
    })
}

/// Four-point sampling stencil at a fractional source position.
struct Stencil {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    wy: f64,
    wx: f64,
}

fn stencil(sy: f64, sx: f64, h: usize, w: usize) -> Stencil {
    let fy = sy.floor();
    let fx = sx.floor();
    let clampi = |v: f64, hi: usize| -> usize { (v.max(0.0) as usize).min(hi - 1) };
    Stencil {
        y0: clampi(fy, h),
        y1: clampi(fy + 1.0, h),
        x0: clampi(fx, w),
        x1: clampi(fx + 1.0, w),
        wy: sy - fy,
        wx: sx - fx,
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut v = i;
    if v < 0 {
        v = -v;
    }
    if v >= n {
        v = 2 * n - 2 - v;
    }
    debug_assert!((0..n).contains(&v));
    v as usize
}

impl<T: Real> Graph<T> {
    /// Bilinear resize of a CxHxW item with half-pixel centers and edge
    /// clamping.
    pub fn bilinear_resize(&self, x: Var, out_h: usize, out_w: usize) -> Var {
        let vx = self.value(x);
        let x3 = as3(&vx, "bilinear_resize input");
        let (c, h, w) = x3.dim();
        let sy_scale = h as f64 / out_h as f64;
        let sx_scale = w as f64 / out_w as f64;
        let mut out = Array3::from_elem((c, out_h, out_w), T::ZERO);
        for oy in 0..out_h {
            let sy = (oy as f64 + 0.5) * sy_scale - 0.5;
            for ox in 0..out_w {
                let sx = (ox as f64 + 0.5) * sx_scale - 0.5;
                let st = stencil(sy, sx, h, w);
                for ch in 0..c {
                    let a = x3[[ch, st.y0, st.x0]].to_f64();
                    let b = x3[[ch, st.y0, st.x1]].to_f64();
                    let d = x3[[ch, st.y1, st.x0]].to_f64();
                    let e = x3[[ch, st.y1, st.x1]].to_f64();
                    let top = a + (b - a) * st.wx;
                    let bot = d + (e - d) * st.wx;
                    out[[ch, oy, ox]] = T::of(top + (bot - top) * st.wy);
                }
            }
        }
        let back = self.wants_grad(&[x]).then(|| {
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let g3 = as3(gy, "bilinear_resize gy");
                let mut dx = Array3::from_elem((c, h, w), 0.0f64);
                for oy in 0..out_h {
                    let sy = (oy as f64 + 0.5) * sy_scale - 0.5;
                    for ox in 0..out_w {
                        let sx = (ox as f64 + 0.5) * sx_scale - 0.5;
                        let st = stencil(sy, sx, h, w);
                        for ch in 0..c {
                            let g = g3[[ch, oy, ox]].to_f64();
                            dx[[ch, st.y0, st.x0]] += g * (1.0 - st.wy) * (1.0 - st.wx);
                            dx[[ch, st.y0, st.x1]] += g * (1.0 - st.wy) * st.wx;
                            dx[[ch, st.y1, st.x0]] += g * st.wy * (1.0 - st.wx);
                            dx[[ch, st.y1, st.x1]] += g * st.wy * st.wx;
                        }
                    }
                }
                sink.add(x, dx.mapv(T::of).into_dyn());
            }) as BackFn<T>
        });
        self.interior(out.into_dyn(), back)
    }

    /// Samples each output pixel at (y + dy, x + dx) given a fixed 2xHxW
    /// displacement field (dy plane first). The field is data, not a graph
    /// node; gradients flow to the image only.
    pub fn warp_bilinear(&self, x: Var, flow: &Array3<f64>) -> Var {
        let vx = self.value(x);
        let x3 = as3(&vx, "warp input");
        let (c, h, w) = x3.dim();
        assert_eq!(flow.dim(), (2, h, w), "warp: flow shape mismatch");
        let mut out = Array3::from_elem((c, h, w), T::ZERO);
        for y in 0..h {
            for xx in 0..w {
                let sy = y as f64 + flow[[0, y, xx]];
                let sx = xx as f64 + flow[[1, y, xx]];
                let st = stencil(sy, sx, h, w);
                for ch in 0..c {
                    let a = x3[[ch, st.y0, st.x0]].to_f64();
                    let b = x3[[ch, st.y0, st.x1]].to_f64();
                    let d = x3[[ch, st.y1, st.x0]].to_f64();
                    let e = x3[[ch, st.y1, st.x1]].to_f64();
                    let top = a + (b - a) * st.wx;
                    let bot = d + (e - d) * st.wx;
                    out[[ch, y, xx]] = T::of(top + (bot - top) * st.wy);
                }
            }
        }
        let back = self.wants_grad(&[x]).then(|| {
            let flow = flow.clone();
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let g3 = as3(gy, "warp gy");
                let mut dx = Array3::from_elem((c, h, w), 0.0f64);
                for y in 0..h {
                    for xx in 0..w {
                        let sy = y as f64 + flow[[0, y, xx]];
                        let sx = xx as f64 + flow[[1, y, xx]];
                        let st = stencil(sy, sx, h, w);
                        for ch in 0..c {
                            let g = g3[[ch, y, xx]].to_f64();
                            dx[[ch, st.y0, st.x0]] += g * (1.0 - st.wy) * (1.0 - st.wx);
                            dx[[ch, st.y0, st.x1]] += g * (1.0 - st.wy) * st.wx;
                            dx[[ch, st.y1, st.x0]] += g * st.wy * (1.0 - st.wx);
                            dx[[ch, st.y1, st.x1]] += g * st.wy * st.wx;
                        }
                    }
                }
                sink.add(x, dx.mapv(T::of).into_dyn());
            }) as BackFn<T>
        });
        self.interior(out.into_dyn(), back)
    }

    /// Cuts `top..h-bottom` x `left..w-right` out of a CxHxW item.
    pub fn crop(&self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Var {
        let vx = self.value(x);
        let x3 = as3(&vx, "crop input");
        let (c, h, w) = x3.dim();
        assert!(top + bottom < h && left + right < w, "crop: nothing left");
        let nh = h - top - bottom;
        let nw = w - left - right;
        let mut out = Array3::from_elem((c, nh, nw), T::ZERO);
        for ch in 0..c {
            for y in 0..nh {
                for xx in 0..nw {
                    out[[ch, y, xx]] = x3[[ch, y + top, xx + left]];
                }
            }
        }
        let back = self.wants_grad(&[x]).then(|| {
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let g3 = as3(gy, "crop gy");
                let mut dx = Array3::from_elem((c, h, w), T::ZERO);
                for ch in 0..c {
                    for y in 0..nh {
                        for xx in 0..nw {
                            dx[[ch, y + top, xx + left]] = g3[[ch, y, xx]];
                        }
                    }
                }
                sink.add(x, dx.into_dyn());
            }) as BackFn<T>
        });
        self.interior(out.into_dyn(), back)
    }

    /// Mirror padding by `r` on each side without repeating the edge pixel.
    /// The backward pass folds padded-region gradients back onto their
    /// source pixels.
    pub fn pad_reflect(&self, x: Var, r: usize) -> Var {
        let vx = self.value(x);
        let x3 = as3(&vx, "pad_reflect input");
        let (c, h, w) = x3.dim();
        assert!(r < h && r < w, "pad_reflect: radius too large");
        let mut out = Array3::from_elem((c, h + 2 * r, w + 2 * r), T::ZERO);
        for ch in 0..c {
            for oy in 0..h + 2 * r {
                let sy = reflect(oy as isize - r as isize, h);
                for ox in 0..w + 2 * r {
                    let sx = reflect(ox as isize - r as isize, w);
                    out[[ch, oy, ox]] = x3[[ch, sy, sx]];
                }
            }
        }
        let back = self.wants_grad(&[x]).then(|| {
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let g3 = as3(gy, "pad_reflect gy");
                let mut dx = Array3::from_elem((c, h, w), 0.0f64);
                for ch in 0..c {
                    for oy in 0..h + 2 * r {
                        let sy = reflect(oy as isize - r as isize, h);
                        for ox in 0..w + 2 * r {
                            let sx = reflect(ox as isize - r as isize, w);
                            dx[[ch, sy, sx]] += g3[[ch, oy, ox]].to_f64();
                        }
                    }
                }
                sink.add(x, dx.mapv(T::of).into_dyn());
            }) as BackFn<T>
        });
        self.interior(out.into_dyn(), back)
    }

    /// Valid separable correlation with the same odd 1-D kernel along rows
    /// then columns. Output shrinks by the kernel overhang on each side;
    /// compose with [`Graph::pad_reflect`] for size-preserving smoothing.
    pub fn sep_corr_valid(&self, x: Var, kernel: &[f64]) -> Var {
        let vx = self.value(x);
        let x3 = as3(&vx, "sep_corr input");
        let (c, h, w) = x3.dim();
        let k = kernel.len();
        assert!(k % 2 == 1 && k <= h && k <= w, "sep_corr: bad kernel");
        let oh = h - k + 1;
        let ow = w - k + 1;
        // Rows pass keeps full height; columns pass shrinks it.
        let mut mid = Array3::from_elem((c, h, ow), 0.0f64);
        for ch in 0..c {
            for y in 0..h {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for (j, &kv) in kernel.iter().enumerate() {
                        acc += kv * x3[[ch, y, ox + j]].to_f64();
                    }
                    mid[[ch, y, ox]] = acc;
                }
            }
        }
        let mut out = Array3::from_elem((c, oh, ow), T::ZERO);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for (j, &kv) in kernel.iter().enumerate() {
                        acc += kv * mid[[ch, oy + j, ox]];
                    }
                    out[[ch, oy, ox]] = T::of(acc);
                }
            }
        }
        let back = self.wants_grad(&[x]).then(|| {
            let kernel = kernel.to_vec();
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let g3 = as3(gy, "sep_corr gy");
                // Adjoint of each valid pass is a scatter of the kernel taps.
                let mut dmid = Array3::from_elem((c, h, ow), 0.0f64);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = g3[[ch, oy, ox]].to_f64();
                            for (j, &kv) in kernel.iter().enumerate() {
                                dmid[[ch, oy + j, ox]] += kv * g;
                            }
                        }
                    }
                }
                let mut dx = Array3::from_elem((c, h, w), 0.0f64);
                for ch in 0..c {
                    for y in 0..h {
                        for ox in 0..ow {
                            let g = dmid[[ch, y, ox]];
                            for (j, &kv) in kernel.iter().enumerate() {
                                dx[[ch, y, ox + j]] += kv * g;
                            }
                        }
                    }
                }
                sink.add(x, dx.mapv(T::of).into_dyn());
            }) as BackFn<T>
        });
        self.interior(out.into_dyn(), back)
    }
}
