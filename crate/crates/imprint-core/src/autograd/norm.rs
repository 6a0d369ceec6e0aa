//! Batch normalization over NCHW activations. Channel statistics are
//! accumulated in f64 regardless of working precision so both backends and
//! both precisions see the same reduction order.

use ndarray::{ArrayD, Axis, Ix4, IxDyn};

use super::{BackFn, GradSink, Graph, Var};
use crate::real::Real;

/// Per-channel batch statistics of one normalization forward, used by the
/// owning layer to update its running estimates.
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, the quantity used for normalization.
    pub var: Vec<f64>,
    /// Sample count behind each channel statistic.
    pub count: usize,
}

/// Eight-lane f64 sum of `f` over a channel slice. The fixed lane structure
/// keeps the reduction order identical across precisions and backends while
/// the independent lanes break the serial add chain.
fn lane_sum<T: Real, F: Fn(T) -> f64>(s: &[T], f: F) -> f64 {
    const LANES: usize = 8;
    let mut lanes = [0.0f64; LANES];
    let whole = s.len() / LANES * LANES;
    for chunk in s[..whole].chunks_exact(LANES) {
        for l in 0..LANES {
            lanes[l] += f(chunk[l]);
        }
    }
    for (i, &v) in s[whole..].iter().enumerate() {
        lanes[i] += f(v);
    }
    lanes.iter().sum()
}

/// Lane-split pair reduction for the backward pass: plain gy sum and the
/// gy-against-normalized-input dot in one reading of both slices.
fn lane_sum_pair<T: Real>(gy: &[T], x: &[T], mu: f64, inv_std: f64) -> (f64, f64) {
    const LANES: usize = 8;
    let mut s1 = [0.0f64; LANES];
    let mut s2 = [0.0f64; LANES];
    let whole = gy.len() / LANES * LANES;
    for (cg, cx) in gy[..whole]
        .chunks_exact(LANES)
        .zip(x[..whole].chunks_exact(LANES))
    {
        for l in 0..LANES {
            let g = cg[l].to_f64();
            let xhat = (cx[l].to_f64() - mu) * inv_std;
            s1[l] += g;
            s2[l] += g * xhat;
        }
    }
    for i in whole..gy.len() {
        let g = gy[i].to_f64();
        let xhat = (x[i].to_f64() - mu) * inv_std;
        s1[i - whole] += g;
        s2[i - whole] += g * xhat;
    }
    (s1.iter().sum(), s2.iter().sum())
}

fn channel_slice<'a, T: Real>(x: &ndarray::ArrayView4<'a, T>, i: usize, ch: usize) -> &'a [T] {
    x.clone()
        .index_axis_move(Axis(0), i)
        .index_axis_move(Axis(0), ch)
        .to_slice()
        .expect("batchnorm channel contiguous")
}

fn channel_moments<T: Real>(v: &ArrayD<T>) -> BatchStats {
    let x = v.view().into_dimensionality::<Ix4>().expect("batchnorm input");
    let (n, c, h, w) = x.dim();
    let m = n * h * w;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for i in 0..n {
            acc += lane_sum(channel_slice(&x, i, ch), |v| v.to_f64());
        }
        let mu = acc / m as f64;
        let mut acc2 = 0.0f64;
        for i in 0..n {
            acc2 += lane_sum(channel_slice(&x, i, ch), |v| {
                let d = v.to_f64() - mu;
                d * d
            });
        }
        mean[ch] = mu;
        var[ch] = acc2 / m as f64;
    }
    BatchStats { mean, var, count: m }
}

impl<T: Real> Graph<T> {
    /// Training-mode batch norm. Normalizes with the batch statistics and
    /// returns them so the caller can maintain running estimates.
    pub fn batchnorm_train(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let stats = channel_moments(&vx);
        let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = x4.dim();
        assert_eq!(vg.len(), c, "batchnorm: gamma length");
        assert_eq!(vb.len(), c, "batchnorm: beta length");

        let inv_std: Vec<f64> = stats.var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = ArrayD::from_elem(IxDyn(&[n, c, h, w]), T::ZERO);
        {
            let mut o4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
            for i in 0..n {
                for ch in 0..c {
                    let g = vg[[ch]].to_f64();
                    let b = vb[[ch]].to_f64();
                    let mu = stats.mean[ch];
                    let is = inv_std[ch];
                    let src = channel_slice(&x4, i, ch);
                    let mut dst = o4.index_axis_mut(Axis(0), i);
                    let mut dst = dst.index_axis_mut(Axis(0), ch);
                    let dst = dst.as_slice_mut().expect("batchnorm channel contiguous");
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = T::of((v.to_f64() - mu) * is * g + b);
                    }
                }
            }
        }

        let back = self.wants_grad(&[x, gamma, beta]).then(|| {
            let needs = (
                self.needs_grad(x),
                self.needs_grad(gamma),
                self.needs_grad(beta),
            );
            let cx = vx.clone();
            let cg = vg.clone();
            let mean = stats.mean.clone();
            let inv_std = inv_std.clone();
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let gy4 = gy.view().into_dimensionality::<Ix4>().expect("batchnorm gy");
                let x4 = cx.view().into_dimensionality::<Ix4>().unwrap();
                let m = (n * h * w) as f64;
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                let mut dx = ArrayD::from_elem(IxDyn(&[n, c, h, w]), T::ZERO);
                let mut dx4 = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
                for ch in 0..c {
                    let mu = mean[ch];
                    let is = inv_std[ch];
                    let g_scale = cg[[ch]].to_f64();
                    // First pass: the two channel sums the fused formula needs.
                    let mut sum_dy = 0.0f64;
                    let mut sum_dy_xhat = 0.0f64;
                    for i in 0..n {
                        let (s_dy, s_dy_xhat) =
                            lane_sum_pair(channel_slice(&gy4, i, ch), channel_slice(&x4, i, ch), mu, is);
                        sum_dy += s_dy;
                        sum_dy_xhat += s_dy_xhat;
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    if needs.0 {
                        for i in 0..n {
                            let gys = channel_slice(&gy4, i, ch);
                            let xs = channel_slice(&x4, i, ch);
                            let mut dst = dx4.index_axis_mut(Axis(0), i);
                            let mut dst = dst.index_axis_mut(Axis(0), ch);
                            let dst = dst.as_slice_mut().expect("batchnorm channel contiguous");
                            for ((d, &gv), &xvv) in dst.iter_mut().zip(gys).zip(xs) {
                                let xhat = (xvv.to_f64() - mu) * is;
                                let dd = (g_scale * is / m)
                                    * (m * gv.to_f64() - sum_dy - xhat * sum_dy_xhat);
                                *d = T::of(dd);
                            }
                        }
                    }
                }
                if needs.0 {
                    sink.add(x, dx);
                }
                if needs.1 {
                    let dg: Vec<T> = dgamma.iter().map(|&v| T::of(v)).collect();
                    sink.add(gamma, ArrayD::from_shape_vec(IxDyn(&[c]), dg).unwrap());
                }
                if needs.2 {
                    let db: Vec<T> = dbeta.iter().map(|&v| T::of(v)).collect();
                    sink.add(beta, ArrayD::from_shape_vec(IxDyn(&[c]), db).unwrap());
                }
            }) as BackFn<T>
        });
        (self.interior(out, back), stats)
    }

    /// Inference-mode batch norm: a per-channel affine map using frozen
    /// running statistics.
    pub fn batchnorm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Var {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("batchnorm input");
        let (n, c, h, w) = x4.dim();
        assert_eq!(running_mean.len(), c, "batchnorm: running mean length");
        assert_eq!(running_var.len(), c, "batchnorm: running var length");
        let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = ArrayD::from_elem(IxDyn(&[n, c, h, w]), T::ZERO);
        {
            let mut o4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
            for i in 0..n {
                for ch in 0..c {
                    let g = vg[[ch]].to_f64();
                    let b = vb[[ch]].to_f64();
                    let mu = running_mean[ch];
                    let is = inv_std[ch];
                    let src = x4.index_axis(Axis(0), i);
                    let src = src.index_axis(Axis(0), ch);
                    let mut dst = o4.index_axis_mut(Axis(0), i);
                    let mut dst = dst.index_axis_mut(Axis(0), ch);
                    dst.zip_mut_with(&src, |o, &v| {
                        *o = T::of((v.to_f64() - mu) * is * g + b);
                    });
                }
            }
        }
        let back = self.wants_grad(&[x, gamma, beta]).then(|| {
            let needs = (
                self.needs_grad(x),
                self.needs_grad(gamma),
                self.needs_grad(beta),
            );
            let cx = vx.clone();
            let cg = vg.clone();
            let mean: Vec<f64> = running_mean.to_vec();
            let inv_std = inv_std.clone();
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let gy4 = gy.view().into_dimensionality::<Ix4>().expect("batchnorm gy");
                let x4 = cx.view().into_dimensionality::<Ix4>().unwrap();
                if needs.0 {
                    let mut dx = ArrayD::from_elem(IxDyn(&[n, c, h, w]), T::ZERO);
                    let mut dx4 = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
                    for ch in 0..c {
                        let scale = cg[[ch]].to_f64() * inv_std[ch];
                        for i in 0..n {
                            let gyv = gy4.index_axis(Axis(0), i);
                            let gyv = gyv.index_axis(Axis(0), ch);
                            let mut dst = dx4.index_axis_mut(Axis(0), i);
                            let mut dst = dst.index_axis_mut(Axis(0), ch);
                            dst.zip_mut_with(&gyv, |d, &g| *d = T::of(g.to_f64() * scale));
                        }
                    }
                    sink.add(x, dx);
                }
                if needs.1 || needs.2 {
                    let mut dgamma = vec![0.0f64; c];
                    let mut dbeta = vec![0.0f64; c];
                    for ch in 0..c {
                        for i in 0..n {
                            let gyv = gy4.index_axis(Axis(0), i);
                            let gyv = gyv.index_axis(Axis(0), ch);
                            let xv = x4.index_axis(Axis(0), i);
                            let xv = xv.index_axis(Axis(0), ch);
                            for (g, xvv) in gyv.iter().zip(xv.iter()) {
                                dbeta[ch] += g.to_f64();
                                dgamma[ch] += g.to_f64() * (xvv.to_f64() - mean[ch]) * inv_std[ch];
                            }
                        }
                    }
                    if needs.1 {
                        let dg: Vec<T> = dgamma.iter().map(|&v| T::of(v)).collect();
                        sink.add(gamma, ArrayD::from_shape_vec(IxDyn(&[c]), dg).unwrap());
                    }
                    if needs.2 {
                        let db: Vec<T> = dbeta.iter().map(|&v| T::of(v)).collect();
                        sink.add(beta, ArrayD::from_shape_vec(IxDyn(&[c]), db).unwrap());
                    }
                }
            }) as BackFn<T>
        });
        self.interior(out, back)
    }
}
