//! Convolution, fully connected and pooling ops. Convolutions lower to
//! im2col + GEMM; the input gradient is itself a stride-1 convolution with
//! flipped kernels over a zero-stuffed upstream gradient, which keeps every
//! GEMM in a shape the matrix backend handles well.

use ndarray::linalg::general_mat_mul;
use ndarray::{
    Array2, Array4, ArrayD, ArrayView2, ArrayView3, ArrayView4, ArrayViewMut2, Axis, Ix2, Ix4,
    IxDyn,
};

use super::{BackFn, GradSink, Graph, Var};
use crate::par;
use crate::real::Real;

pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Gathers conv windows of one item into a (C*kh*kw, Ho*Wo) matrix.
fn im2col<T: Real>(
    x: &ArrayView3<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut Array2<T>,
) {
    let (c_in, h, w) = x.dim();
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    debug_assert_eq!(col.dim(), (c_in * kh * kw, ho * wo));
    for c in 0..c_in {
        for di in 0..kh {
            for dj in 0..kw {
                let r = (c * kh + di) * kw + dj;
                let mut row = col.row_mut(r);
                let dst_row = row.as_slice_mut().unwrap();
                for oy in 0..ho {
                    let sy = (oy * stride + di) as isize - pad as isize;
                    let dst = &mut dst_row[oy * wo..(oy + 1) * wo];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src_row = x.index_axis(Axis(0), c);
                    let src_row = src_row.index_axis(Axis(0), sy as usize);
                    let src = src_row.to_slice().unwrap();
                    if stride == 1 {
                        let off = dj as isize - pad as isize;
                        let lo = (-off).max(0).min(wo as isize) as usize;
                        let hi = (w as isize - off).clamp(0, wo as isize) as usize;
                        dst[..lo].fill(T::ZERO);
                        if hi > lo {
                            let s0 = (lo as isize + off) as usize;
                            dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                        if hi < wo {
                            dst[hi..].fill(T::ZERO);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let sx = (ox * stride + dj) as isize - pad as isize;
                            *d = if sx < 0 || sx >= w as isize {
                                T::ZERO
                            } else {
                                src[sx as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 conv of one item, one output row at a time. The row accumulator
/// stays cache-hot while every kernel tap folds into it, so each input row
/// is read about kh times total instead of once per tap, and the im2col
/// matrix that dominates memory traffic at these sizes never exists.
fn conv_item_shift<T: Real>(
    x: &ArrayView3<T>,
    w: &ArrayView4<T>,
    bias: Option<&[T]>,
    pad: usize,
    chunk: &mut [T],
) {
    let (c_in, h, w_in) = x.dim();
    let (k_out, _, kh, kw) = w.dim();
    let ho = h + 2 * pad + 1 - kh;
    let wo = w_in + 2 * pad + 1 - kw;
    debug_assert_eq!(chunk.len(), k_out * ho * wo);
    let wflat = w.to_slice().expect("conv weight contiguous");
    let xflat = x.to_slice().expect("conv input contiguous");
    let mut acc = vec![T::ZERO; wo];
    for k in 0..k_out {
        let plane = &mut chunk[k * ho * wo..(k + 1) * ho * wo];
        for oy in 0..ho {
            acc.fill(bias.map_or(T::ZERO, |b| b[k]));
            for c in 0..c_in {
                let src = &xflat[c * h * w_in..(c + 1) * h * w_in];
                for di in 0..kh {
                    let sy = oy + di;
                    if sy < pad || sy >= h + pad {
                        continue;
                    }
                    let row = &src[(sy - pad) * w_in..(sy - pad + 1) * w_in];
                    let taps = &wflat[((k * c_in + c) * kh + di) * kw..][..kw];
                    for (dj, &wv) in taps.iter().enumerate() {
                        let ox_lo = pad.saturating_sub(dj);
                        let ox_hi = (w_in + pad - dj).min(wo);
                        if ox_hi <= ox_lo {
                            continue;
                        }
                        let s0 = ox_lo + dj - pad;
                        let dst = &mut acc[ox_lo..ox_hi];
                        let srow = &row[s0..s0 + (ox_hi - ox_lo)];
                        for (d, s) in dst.iter_mut().zip(srow) {
                            *d = *d + wv * *s;
                        }
                    }
                }
            }
            plane[oy * wo..(oy + 1) * wo].copy_from_slice(&acc);
        }
    }
}

/// Output columns per register tile of the 3x3 fast path.
const TILE_W: usize = 16;

/// One register tile of the 3x3 stride-1 kernel: `KB` output channels by
/// `TILE_W` columns accumulate in registers while each padded input row
/// streams through once, so every load feeds 3*KB multiplies instead of one.
#[inline(always)]
fn tile3<T: Real, const KB: usize>(
    xp: &[T],
    c_in: usize,
    hp: usize,
    wp: usize,
    taps: &[T],
    bias: &[T; KB],
    oy: usize,
    ox: usize,
    out: &mut [[T; TILE_W]; KB],
) {
    let mut acc = [[T::ZERO; TILE_W]; KB];
    for (a, b) in acc.iter_mut().zip(bias) {
        *a = [*b; TILE_W];
    }
    for c in 0..c_in {
        let base = c * hp * wp + oy * wp + ox;
        for di in 0..3 {
            let row = &xp[base + di * wp..base + di * wp + TILE_W + 2];
            for kb in 0..KB {
                let t = &taps[(kb * c_in + c) * 9 + di * 3..][..3];
                let a = &mut acc[kb];
                for i in 0..TILE_W {
                    a[i] = a[i] + t[0] * row[i] + t[1] * row[i + 1] + t[2] * row[i + 2];
                }
            }
        }
    }
    *out = acc;
}

/// 3x3 stride-1 conv of one item through register tiles over a zero-padded
/// copy of the input. Padding up front removes every boundary branch from
/// the hot loop; the last tile of a row shifts left so `wo` needs no
/// alignment, recomputing a few columns instead of branching.
fn conv_item_tiled3<T: Real>(
    x: &ArrayView3<T>,
    w: &ArrayView4<T>,
    bias: Option<&[T]>,
    pad: usize,
    chunk: &mut [T],
) {
    let (c_in, h, w_in) = x.dim();
    let (k_out, _, _, _) = w.dim();
    let ho = h + 2 * pad - 2;
    let wo = w_in + 2 * pad - 2;
    debug_assert!(wo >= TILE_W);
    debug_assert_eq!(chunk.len(), k_out * ho * wo);
    let wflat = w.to_slice().expect("conv weight contiguous");
    let xflat = x.to_slice().expect("conv input contiguous");
    let (hp, wp) = (h + 2 * pad, w_in + 2 * pad);
    let mut xp = vec![T::ZERO; c_in * hp * wp];
    for c in 0..c_in {
        for y in 0..h {
            let src = &xflat[c * h * w_in + y * w_in..][..w_in];
            xp[c * hp * wp + (y + pad) * wp + pad..][..w_in].copy_from_slice(src);
        }
    }
    let ntiles = wo.div_ceil(TILE_W);
    let mut acc2 = [[T::ZERO; TILE_W]; 2];
    let mut acc1 = [[T::ZERO; TILE_W]; 1];
    let mut k = 0;
    while k + 2 <= k_out {
        let taps = &wflat[k * c_in * 9..(k + 2) * c_in * 9];
        let b = [
            bias.map_or(T::ZERO, |b| b[k]),
            bias.map_or(T::ZERO, |b| b[k + 1]),
        ];
        for oy in 0..ho {
            for t in 0..ntiles {
                let ox = (t * TILE_W).min(wo - TILE_W);
                tile3::<T, 2>(&xp, c_in, hp, wp, taps, &b, oy, ox, &mut acc2);
                chunk[k * ho * wo + oy * wo + ox..][..TILE_W].copy_from_slice(&acc2[0]);
                chunk[(k + 1) * ho * wo + oy * wo + ox..][..TILE_W].copy_from_slice(&acc2[1]);
            }
        }
        k += 2;
    }
    if k < k_out {
        let taps = &wflat[k * c_in * 9..(k + 1) * c_in * 9];
        let b = [bias.map_or(T::ZERO, |b| b[k])];
        for oy in 0..ho {
            for t in 0..ntiles {
                let ox = (t * TILE_W).min(wo - TILE_W);
                tile3::<T, 1>(&xp, c_in, hp, wp, taps, &b, oy, ox, &mut acc1);
                chunk[k * ho * wo + oy * wo + ox..][..TILE_W].copy_from_slice(&acc1[0]);
            }
        }
    }
}

/// Plain batched conv forward into a preallocated output slice, one item per
/// chunk. `wmat` is the (K, C*kh*kw) reshaped kernel; `w4` the same buffer
/// in kernel layout for the stride-1 fast paths.
#[allow(clippy::too_many_arguments)]
fn conv_forward_into<T: Real>(
    x: &ArrayView4<T>,
    wmat: &ArrayView2<T>,
    w4: &ArrayView4<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let (n, c_in, h, w) = x.dim();
    let (k_out, _, kh, kw) = w4.dim();
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    let item_len = k_out * ho * wo;
    debug_assert_eq!(out.len(), n * item_len);
    par::for_each_chunk_mut(out, item_len, |i, chunk| {
        let xi = x.index_axis(Axis(0), i);
        if stride == 1 {
            if kh == 3 && kw == 3 && wo >= TILE_W {
                conv_item_tiled3(&xi, w4, bias, pad, chunk);
            } else {
                conv_item_shift(&xi, w4, bias, pad, chunk);
            }
            return;
        }
        let mut col = Array2::from_elem((c_in * kh * kw, ho * wo), T::ZERO);
        im2col(&xi, kh, kw, stride, pad, &mut col);
        let mut o = ArrayViewMut2::from_shape((k_out, ho * wo), chunk).unwrap();
        general_mat_mul(T::ONE, wmat, &col.view(), T::ZERO, &mut o);
        if let Some(b) = bias {
            for (kk, mut row) in o.axis_iter_mut(Axis(0)).enumerate() {
                row.mapv_inplace(|v| v + b[kk]);
            }
        }
    });
}

/// Dot product over independent accumulator lanes so the loop vectorizes;
/// a single running sum would serialize on the floating-point chain.
fn lane_dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    const LANES: usize = 8;
    let mut lanes = [T::ZERO; LANES];
    let whole = a.len() / LANES * LANES;
    for (ca, cb) in a[..whole].chunks_exact(LANES).zip(b[..whole].chunks_exact(LANES)) {
        for l in 0..LANES {
            lanes[l] = lanes[l] + ca[l] * cb[l];
        }
    }
    for i in whole..a.len() {
        lanes[i - whole] = lanes[i - whole] + a[i] * b[i];
    }
    lanes.iter().map(|v| v.to_f64()).sum()
}

/// Stride-1 weight gradient of one item: dw[k,c,di,dj] is the dot of the
/// gy plane with the (di,dj)-shifted input channel, accumulated in f64.
fn weight_grad_item_shift<T: Real>(
    xi: &ArrayView3<T>,
    gyi: &ArrayView3<T>,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Array2<T> {
    let (c_in, h, w_in) = xi.dim();
    let (k_out, ho, wo) = gyi.dim();
    let mut dw = Array2::from_elem((k_out, c_in * kh * kw), T::ZERO);
    for k in 0..k_out {
        let gy2 = gyi.index_axis(Axis(0), k);
        let gy = gy2.to_slice().expect("conv gy contiguous");
        for c in 0..c_in {
            let src2 = xi.index_axis(Axis(0), c);
            let src = src2.to_slice().expect("conv input contiguous");
            for di in 0..kh {
                let oy_lo = pad.saturating_sub(di);
                let oy_hi = (h + pad - di).min(ho);
                for dj in 0..kw {
                    let ox_lo = pad.saturating_sub(dj);
                    let ox_hi = (w_in + pad - dj).min(wo);
                    if ox_hi <= ox_lo {
                        continue;
                    }
                    let len = ox_hi - ox_lo;
                    let mut acc = 0.0f64;
                    for oy in oy_lo..oy_hi {
                        let sy = oy + di - pad;
                        let s0 = sy * w_in + (ox_lo + dj - pad);
                        let grow = &gy[oy * wo + ox_lo..oy * wo + ox_lo + len];
                        let srow = &src[s0..s0 + len];
                        acc += lane_dot(grow, srow);
                    }
                    dw[[k, (c * kh + di) * kw + dj]] = T::of(acc);
                }
            }
        }
    }
    dw
}

/// Weight gradient: sum over items of gy_i · col_iᵀ, accumulated in a fixed
/// order so the parallel backend stays bit-identical to the sequential one.
fn conv_weight_grad<T: Real>(
    x: &ArrayView4<T>,
    gy: &ArrayView4<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let (n, c_in, _, _) = x.dim();
    let (_, k_out, ho, wo) = gy.dim();
    let partials = par::ordered_map(n, |i| {
        let xi = x.index_axis(Axis(0), i);
        let gy3 = gy.index_axis(Axis(0), i);
        if stride == 1 {
            return weight_grad_item_shift(&xi, &gy3, kh, kw, pad);
        }
        let mut col = Array2::from_elem((c_in * kh * kw, ho * wo), T::ZERO);
        im2col(&xi, kh, kw, stride, pad, &mut col);
        let gyi = gy3.into_shape_with_order((k_out, ho * wo)).unwrap();
        let mut dw = Array2::from_elem((k_out, c_in * kh * kw), T::ZERO);
        general_mat_mul(T::ONE, &gyi, &col.t(), T::ZERO, &mut dw);
        dw
    });
    let mut acc = Array2::from_elem((k_out, c_in * kh * kw), T::ZERO);
    for p in partials {
        acc += &p;
    }
    acc
}

/// Input gradient: zero-stuff gy to undo the stride, then run a stride-1
/// conv with channel-swapped, spatially flipped kernels.
fn conv_input_grad<T: Real>(
    gy: &ArrayView4<T>,
    w: &ArrayView4<T>,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> Array4<T> {
    let (n, k_out, ho, wo) = gy.dim();
    let (_, c_in, kh, kw) = w.dim();
    assert!(pad < kh && pad < kw, "conv pad must stay below kernel size");
    // Stuffed size chosen so the flipped conv lands exactly on the input
    // shape even when the stride does not divide the span evenly. At stride
    // 1 the stuffed tensor is gy itself, so the copy is skipped.
    let hs = in_h + 2 * pad - kh + 1;
    let ws = in_w + 2 * pad - kw + 1;
    let stuffed: Option<Array4<T>> = if stride == 1 && gy.to_slice().is_some() {
        debug_assert_eq!((hs, ws), (ho, wo));
        None
    } else {
        let mut st = Array4::from_elem((n, k_out, hs, ws), T::ZERO);
        for i in 0..n {
            for k in 0..k_out {
                for y in 0..ho {
                    for x in 0..wo {
                        st[[i, k, y * stride, x * stride]] = gy[[i, k, y, x]];
                    }
                }
            }
        }
        Some(st)
    };
    let mut wflip = Array4::from_elem((c_in, k_out, kh, kw), T::ZERO);
    for c in 0..c_in {
        for k in 0..k_out {
            for i in 0..kh {
                for j in 0..kw {
                    wflip[[c, k, i, j]] = w[[k, c, kh - 1 - i, kw - 1 - j]];
                }
            }
        }
    }
    let mut out = Array4::from_elem((n, c_in, in_h, in_w), T::ZERO);
    {
        let out_slice = out.as_slice_mut().unwrap();
        let wmat = wflip
            .view()
            .into_shape_with_order((c_in, k_out * kh * kw))
            .unwrap();
        let gsrc = match &stuffed {
            Some(st) => st.view(),
            None => gy.reborrow(),
        };
        conv_forward_into(&gsrc, &wmat, &wflip.view(), None, 1, kh - 1 - pad, out_slice);
    }
    out
}

fn as4<'a, T: Real>(v: &'a ArrayD<T>, what: &'static str) -> ArrayView4<'a, T> {
    v.view().into_dimensionality::<Ix4>().unwrap_or_else(|_| {
        panic!("{what}: expected 4 axes, got {:?}", v.shape());
    })
}

impl<T: Real> Graph<T> {
    /// 2D convolution over NCHW input with an optional-free bias. Weight
    /// layout is (K, C, kh, kw); padding is zeros on all sides.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let x4 = as4(&vx, "conv2d input");
        let w4 = as4(&vw, "conv2d weight");
        let (n, c_in, h, ww) = x4.dim();
        let (k_out, wc, kh, kw) = w4.dim();
        assert_eq!(c_in, wc, "conv2d: channel mismatch");
        assert_eq!(vb.len(), k_out, "conv2d: bias length mismatch");
        assert!(stride >= 1 && pad < kh, "conv2d: bad geometry");
        let ho = conv_out_size(h, kh, stride, pad);
        let wo = conv_out_size(ww, kw, stride, pad);

        let mut out = ArrayD::from_elem(IxDyn(&[n, k_out, ho, wo]), T::ZERO);
        {
            let wmat = w4.into_shape_with_order((k_out, c_in * kh * kw)).unwrap();
            let bias: Vec<T> = vb.iter().copied().collect();
            conv_forward_into(
                &x4,
                &wmat,
                &w4,
                Some(&bias),
                stride,
                pad,
                out.as_slice_mut().unwrap(),
            );
        }

        let back = self.wants_grad(&[x, w, b]).then(|| {
            let needs = (self.needs_grad(x), self.needs_grad(w), self.needs_grad(b));
            let (cx, cw) = (vx.clone(), vw.clone());
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let gy4 = as4(gy, "conv2d gy");
                let x4 = as4(&cx, "conv2d saved input");
                let w4 = as4(&cw, "conv2d saved weight");
                if needs.2 {
                    let mut db = ArrayD::from_elem(IxDyn(&[k_out]), T::ZERO);
                    for k in 0..k_out {
                        let mut acc = 0.0f64;
                        for v in gy4.index_axis(Axis(1), k).iter() {
                            acc += v.to_f64();
                        }
                        db[[k]] = T::of(acc);
                    }
                    sink.add(b, db);
                }
                if needs.1 {
                    let dw = conv_weight_grad(&x4, &gy4, kh, kw, stride, pad);
                    sink.add(
                        w,
                        dw.into_shape_with_order(IxDyn(&[k_out, c_in, kh, kw]))
                            .unwrap(),
                    );
                }
                if needs.0 {
                    let dx = conv_input_grad(&gy4, &w4, stride, pad, h, ww);
                    sink.add(x, dx.into_dyn());
                }
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Fully connected layer y = x·Wᵀ + b with x of shape (N, F) and W of
    /// shape (O, F).
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let x2 = vx.view().into_dimensionality::<Ix2>().expect("linear input");
        let w2 = vw.view().into_dimensionality::<Ix2>().expect("linear weight");
        let (n, f) = x2.dim();
        let (o, wf) = w2.dim();
        assert_eq!(f, wf, "linear: feature mismatch");
        assert_eq!(vb.len(), o, "linear: bias mismatch");
        let mut out = Array2::from_elem((n, o), T::ZERO);
        general_mat_mul(T::ONE, &x2, &w2.t(), T::ZERO, &mut out);
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v + vb[[j]];
            }
        }
        let back = self.wants_grad(&[x, w, b]).then(|| {
            let needs = (self.needs_grad(x), self.needs_grad(w), self.needs_grad(b));
            let (cx, cw) = (vx.clone(), vw.clone());
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let gy2 = gy.view().into_dimensionality::<Ix2>().expect("linear gy");
                if needs.0 {
                    let w2 = cw.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx = Array2::from_elem((n, f), T::ZERO);
                    general_mat_mul(T::ONE, &gy2, &w2, T::ZERO, &mut dx);
                    sink.add(x, dx.into_dyn());
                }
                if needs.1 {
                    let x2 = cx.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dw = Array2::from_elem((o, f), T::ZERO);
                    general_mat_mul(T::ONE, &gy2.t(), &x2, T::ZERO, &mut dw);
                    sink.add(w, dw.into_dyn());
                }
                if needs.2 {
                    let mut db = ArrayD::from_elem(IxDyn(&[o]), T::ZERO);
                    for j in 0..o {
                        let mut acc = 0.0f64;
                        for i in 0..n {
                            acc += gy2[[i, j]].to_f64();
                        }
                        db[[j]] = T::of(acc);
                    }
                    sink.add(b, db);
                }
            }) as BackFn<T>
        });
        self.interior(out.into_dyn(), back)
    }

    /// Mean over the spatial axes of an NCHW tensor, giving (N, C).
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x4 = as4(&vx, "global_avg_pool input");
        let (n, c, h, w) = x4.dim();
        let inv = 1.0 / (h * w) as f64;
        let mut out = Array2::from_elem((n, c), T::ZERO);
        for i in 0..n {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for v in x4.index_axis(Axis(0), i).index_axis(Axis(0), ch).iter() {
                    acc += v.to_f64();
                }
                out[[i, ch]] = T::of(acc * inv);
            }
        }
        let back = self.wants_grad(&[x]).then(|| {
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let gy2 = gy.view().into_dimensionality::<Ix2>().expect("gap gy");
                let scale = T::of(inv);
                let mut dx = Array4::from_elem((n, c, h, w), T::ZERO);
                for i in 0..n {
                    for ch in 0..c {
                        let g = gy2[[i, ch]] * scale;
                        dx.index_axis_mut(Axis(0), i)
                            .index_axis_mut(Axis(0), ch)
                            .fill(g);
                    }
                }
                sink.add(x, dx.into_dyn());
            }) as BackFn<T>
        });
        self.interior(out.into_dyn(), back)
    }
}
