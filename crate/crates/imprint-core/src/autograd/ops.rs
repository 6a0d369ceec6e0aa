//! Elementwise, reduction, structural and similarity ops.

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::{BackFn, GradSink, Graph, Var};
use crate::plane;
use crate::real::Real;

fn scalar_arr<T: Real>(v: T) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl<T: Real> Graph<T> {
    /// Elementwise sum of two same-shaped nodes.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = &*va + &*vb;
        let back = self.wants_grad(&[a, b]).then(|| {
            let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                if na {
                    sink.add(a, gy.clone());
                }
                if nb {
                    sink.add(b, gy.clone());
                }
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Elementwise difference a - b.
    pub fn sub(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = &*va - &*vb;
        let back = self.wants_grad(&[a, b]).then(|| {
            let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                if na {
                    sink.add(a, gy.clone());
                }
                if nb {
                    sink.add(b, gy.mapv(|v| T::ZERO - v));
                }
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Hadamard product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = &*va * &*vb;
        let back = self.wants_grad(&[a, b]).then(|| {
            let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
            let (ca, cb) = (va.clone(), vb.clone());
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                if na {
                    sink.add(a, gy * &*cb);
                }
                if nb {
                    sink.add(b, gy * &*ca);
                }
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&self, a: Var, c: T) -> Var {
        let va = self.value(a);
        let out = va.mapv(|v| v * c);
        let back = self.wants_grad(&[a]).then(|| {
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                sink.add(a, gy.mapv(|v| v * c));
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let va = self.value(a);
        let out = va.mapv(|v| v + c);
        let back = self.wants_grad(&[a]).then(|| {
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                sink.add(a, gy.clone());
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Rectified linear unit. Subgradient at 0 is 0.
    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|v| v.max_val(T::ZERO));
        let back = self.wants_grad(&[a]).then(|| {
            let cx = va.clone();
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let mut g = gy.clone();
                g.zip_mut_with(&cx, |gv, &xv| {
                    if xv <= T::ZERO {
                        *gv = T::ZERO;
                    }
                });
                sink.add(a, g);
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Hyperbolic tangent.
    pub fn tanh(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = std::sync::Arc::new(va.mapv(|v| v.tanh()));
        let back = self.wants_grad(&[a]).then(|| {
            let cy = out.clone();
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let mut g = gy.clone();
                g.zip_mut_with(&cy, |gv, &yv| {
                    *gv = *gv * (T::ONE - yv * yv);
                });
                sink.add(a, g);
            }) as BackFn<T>
        });
        self.interior_shared(out, back)
    }

    /// Sum of all elements as a 0-dim scalar.
    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let total: f64 = va.iter().map(|v| v.to_f64()).sum();
        let out = scalar_arr(T::of(total));
        let back = self.wants_grad(&[a]).then(|| {
            let shape = va.raw_dim();
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let g = gy[IxDyn(&[])];
                sink.add(a, ArrayD::from_elem(shape, g));
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Arithmetic mean of all elements as a 0-dim scalar.
    pub fn mean(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len();
        assert!(n > 0, "mean of empty array");
        let total: f64 = va.iter().map(|v| v.to_f64()).sum();
        let out = scalar_arr(T::of(total / n as f64));
        let back = self.wants_grad(&[a]).then(|| {
            let shape = va.raw_dim();
            let inv = T::of(1.0 / n as f64);
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let g = gy[IxDyn(&[])] * inv;
                sink.add(a, ArrayD::from_elem(shape, g));
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Squared Euclidean norm of the flattened input, i.e. the sum of
    /// squares over all elements.
    pub fn sum_sq(&self, a: Var) -> Var {
        let va = self.value(a);
        let total: f64 = va.iter().map(|v| v.to_f64() * v.to_f64()).sum();
        let out = scalar_arr(T::of(total));
        let back = self.wants_grad(&[a]).then(|| {
            let cx = va.clone();
            let two = T::of(2.0);
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let g = gy[IxDyn(&[])];
                sink.add(a, cx.mapv(|v| two * v * g));
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Shape change without touching data order.
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let out = (*va)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible shape");
        let back = self.wants_grad(&[a]).then(|| {
            let orig = va.raw_dim();
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let g = gy.clone().into_shape_with_order(orig).expect("reshape back");
                sink.add(a, g);
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Stacks same-shaped items along a fresh leading axis.
    pub fn stack0(&self, items: &[Var]) -> Var {
        assert!(!items.is_empty(), "stack0 of nothing");
        let values: Vec<_> = items.iter().map(|&v| self.value(v)).collect();
        let item_shape = values[0].shape().to_vec();
        for v in &values {
            assert_eq!(v.shape(), &item_shape[..], "stack0: ragged items");
        }
        let mut out_shape = vec![items.len()];
        out_shape.extend_from_slice(&item_shape);
        let mut out = ArrayD::from_elem(IxDyn(&out_shape), T::ZERO);
        for (i, v) in values.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(v);
        }
        let back = self.wants_grad(items).then(|| {
            let items: Vec<Var> = items.to_vec();
            let needs: Vec<bool> = items.iter().map(|&v| self.needs_grad(v)).collect();
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                for (i, (&item, &need)) in items.iter().zip(needs.iter()).enumerate() {
                    if need {
                        sink.add(item, gy.index_axis(Axis(0), i).to_owned());
                    }
                }
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Picks one item off the leading axis.
    pub fn select0(&self, a: Var, index: usize) -> Var {
        let va = self.value(a);
        assert!(index < va.shape()[0], "select0: index out of range");
        let out = va.index_axis(Axis(0), index).to_owned();
        let back = self.wants_grad(&[a]).then(|| {
            let shape = va.raw_dim();
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let mut g = ArrayD::from_elem(shape, T::ZERO);
                g.index_axis_mut(Axis(0), index).assign(gy);
                sink.add(a, g);
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Keeps rows [from, to) of the leading axis.
    pub fn narrow0(&self, a: Var, from: usize, to: usize) -> Var {
        let va = self.value(a);
        assert!(from < to && to <= va.shape()[0], "narrow0: bad range");
        let out = va
            .slice_axis(Axis(0), Slice::from(from..to))
            .to_owned();
        let back = self.wants_grad(&[a]).then(|| {
            let shape = va.raw_dim();
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let mut g = ArrayD::from_elem(shape, T::ZERO);
                g.slice_axis_mut(Axis(0), Slice::from(from..to)).assign(gy);
                sink.add(a, g);
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&self, terms: &[(Var, T)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut acc = 0.0f64;
        for &(v, w) in terms {
            acc += self.scalar(v).to_f64() * w.to_f64();
        }
        let out = scalar_arr(T::of(acc));
        let vars: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
        let back = self.wants_grad(&vars).then(|| {
            let terms: Vec<(Var, T, bool)> = terms
                .iter()
                .map(|&(v, w)| (v, w, self.needs_grad(v)))
                .collect();
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let g = gy[IxDyn(&[])];
                for &(v, w, need) in &terms {
                    if need {
                        sink.add(v, scalar_arr(g * w));
                    }
                }
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Arithmetic mean of scalar nodes.
    pub fn mean_of(&self, vars: &[Var]) -> Var {
        let w = T::of(1.0 / vars.len() as f64);
        let terms: Vec<(Var, T)> = vars.iter().map(|&v| (v, w)).collect();
        self.weighted_sum(&terms)
    }

    /// Maximum over scalar nodes. Ties route the subgradient to the first
    /// maximal entry, matching the argmax reported by the scoring path.
    pub fn max_of(&self, vars: &[Var]) -> (Var, usize) {
        assert!(!vars.is_empty(), "max_of nothing");
        let mut best = 0usize;
        let mut best_v = self.scalar(vars[0]);
        for (i, &v) in vars.iter().enumerate().skip(1) {
            let val = self.scalar(v);
            if val > best_v {
                best_v = val;
                best = i;
            }
        }
        let out = scalar_arr(best_v);
        let winner = vars[best];
        let back = self.wants_grad(vars).then(|| {
            let need = self.needs_grad(winner);
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                if need {
                    sink.add(winner, gy.clone());
                }
            }) as BackFn<T>
        });
        (self.interior(out, back), best)
    }

    /// Cosine similarity of two nodes viewed as flat vectors. Zero-norm
    /// operands give value 0 with zero gradient, the same convention as
    /// [`plane::cosine_flat`].
    pub fn cos_flat(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.len(), vb.len(), "cos_flat: length mismatch");
        let na = plane::norm_flat(va.view());
        let nb = plane::norm_flat(vb.view());
        let degenerate = na == 0.0 || nb == 0.0;
        let c = if degenerate {
            0.0
        } else {
            (plane::dot_flat(va.view(), vb.view()) / (na * nb)).clamp(-1.0, 1.0)
        };
        let out = scalar_arr(T::of(c));
        let back = (!degenerate && self.wants_grad(&[a, b])).then(|| {
            let (need_a, need_b) = (self.needs_grad(a), self.needs_grad(b));
            let (ca, cb) = (va.clone(), vb.clone());
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let g = gy[IxDyn(&[])].to_f64();
                if need_a {
                    let mut da = ArrayD::from_elem(ca.raw_dim(), T::ZERO);
                    for ((d, &av), &bv) in da.iter_mut().zip(ca.iter()).zip(cb.iter()) {
                        let v = bv.to_f64() / (na * nb) - c * av.to_f64() / (na * na);
                        *d = T::of(g * v);
                    }
                    sink.add(a, da);
                }
                if need_b {
                    let mut db = ArrayD::from_elem(cb.raw_dim(), T::ZERO);
                    for ((d, &av), &bv) in db.iter_mut().zip(ca.iter()).zip(cb.iter()) {
                        let v = av.to_f64() / (na * nb) - c * bv.to_f64() / (nb * nb);
                        *d = T::of(g * v);
                    }
                    sink.add(b, db);
                }
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Min-max normalization (x - min) / (max - min) over the whole array.
    /// Constant inputs map to all zeros with zero gradient. Ties for the
    /// extrema resolve to the first occurrence in row-major order.
    pub fn minmax_norm(&self, a: Var) -> Var {
        let va = self.value(a);
        let flat = va.as_slice().expect("minmax_norm: non-contiguous input");
        let mut amin = 0usize;
        let mut amax = 0usize;
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
        let range = vmax - vmin;
        let degenerate = range == T::ZERO;
        let out = if degenerate {
            ArrayD::from_elem(va.raw_dim(), T::ZERO)
        } else {
            va.mapv(|v| (v - vmin) / range)
        };
        let back = (!degenerate && self.wants_grad(&[a])).then(|| {
            let normalized = out.clone();
            let r = range.to_f64();
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let gsum: f64 = gy.iter().map(|v| v.to_f64()).sum();
                let gdotn: f64 = gy
                    .iter()
                    .zip(normalized.iter())
                    .map(|(g, n)| g.to_f64() * n.to_f64())
                    .sum();
                let mut grad = gy.mapv(|v| T::of(v.to_f64() / r));
                let flat = grad.as_slice_mut().unwrap();
                flat[amin] = T::of(flat[amin].to_f64() - (gsum - gdotn) / r);
                flat[amax] = T::of(flat[amax].to_f64() - gdotn / r);
                sink.add(a, grad);
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Adds a scaled single-channel plane to every channel of an image.
    pub fn broadcast_add_plane(&self, img: Var, plane_var: Var, factor: T) -> Var {
        let vi = self.value(img);
        let vp = self.value(plane_var);
        assert_eq!(vi.ndim(), 3, "broadcast_add_plane: image must be CxHxW");
        assert_eq!(
            &vi.shape()[1..],
            vp.shape(),
            "broadcast_add_plane: plane size mismatch"
        );
        let mut out = (*vi).clone();
        for mut ch in out.axis_iter_mut(Axis(0)) {
            ch.zip_mut_with(&vp.view(), |o, &p| *o = *o + factor * p);
        }
        let back = self.wants_grad(&[img, plane_var]).then(|| {
            let (ni, np) = (self.needs_grad(img), self.needs_grad(plane_var));
            let pshape = vp.raw_dim();
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                if ni {
                    sink.add(img, gy.clone());
                }
                if np {
                    let mut gp = ArrayD::from_elem(pshape, T::ZERO);
                    for ch in gy.axis_iter(Axis(0)) {
                        gp.zip_mut_with(&ch, |g, &v| *g = *g + factor * v);
                    }
                    sink.add(plane_var, gp);
                }
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Binary cross entropy of a probability-like score against a fixed
    /// label. The score is clamped into [eps, 1-eps] first; outside the open
    /// interval the gradient is zero.
    pub fn bce_from_score(&self, score: Var, label_real: bool, eps: T) -> Var {
        let s = self.scalar(score).to_f64();
        let e = eps.to_f64();
        let sc = s.clamp(e, 1.0 - e);
        let v = if label_real { -sc.ln() } else { -(1.0 - sc).ln() };
        let out = scalar_arr(T::of(v));
        let back = self.wants_grad(&[score]).then(|| {
            let inside = s > e && s < 1.0 - e;
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                if inside {
                    let g = gy[IxDyn(&[])].to_f64();
                    let d = if label_real { -1.0 / sc } else { 1.0 / (1.0 - sc) };
                    sink.add(score, scalar_arr(T::of(g * d)));
                }
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Mean softmax cross entropy of logit rows (N, C) against class
    /// indices. Stabilized by per-row max subtraction; backward is
    /// (softmax - onehot) / N.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Var {
        let v = self.value(logits);
        assert_eq!(v.ndim(), 2, "softmax_cross_entropy: logits must be (N, C)");
        let (n, c) = (v.shape()[0], v.shape()[1]);
        assert_eq!(labels.len(), n, "softmax_cross_entropy: one label per row");
        assert!(labels.iter().all(|&l| l < c));
        let mut probs = vec![0.0f64; n * c];
        let mut acc = 0.0f64;
        for i in 0..n {
            let row: Vec<f64> = (0..c).map(|j| v[IxDyn(&[i, j])].to_f64()).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - m).exp() / z;
            }
            acc += -(row[labels[i]] - m - z.ln());
        }
        let out = scalar_arr(T::of(acc / n as f64));
        let back = self.wants_grad(&[logits]).then(|| {
            let labels = labels.to_vec();
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                let g = gy[IxDyn(&[])].to_f64() / n as f64;
                let mut dl = ArrayD::from_elem(IxDyn(&[n, c]), T::ZERO);
                for i in 0..n {
                    for j in 0..c {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        dl[IxDyn(&[i, j])] = T::of(g * (probs[i * c + j] - onehot));
                    }
                }
                sink.add(logits, dl);
            }) as BackFn<T>
        });
        self.interior(out, back)
    }

    /// Forward takes `value`, backward pretends the op was the identity.
    /// Carries non-differentiable transforms (JPEG, integer crops) through
    /// the training graph.
    pub fn straight_through(&self, a: Var, value: ArrayD<T>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), value.shape(), "straight_through: shape change");
        let back = self.wants_grad(&[a]).then(|| {
            Box::new(move |gy: &ArrayD<T>, sink: &mut GradSink<T>| {
                sink.add(a, gy.clone());
            }) as BackFn<T>
        });
        self.interior(value, back)
    }
}
