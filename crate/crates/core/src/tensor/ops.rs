//! Operations on [`Var`] handles. Each op records a backward closure.

use super::{Tape, Var};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, Axis, Ix2, Ix4, IxDyn};
use std::rc::Rc;

fn to_std<S: Scalar>(a: ArrayD<S>) -> ArrayD<S> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn reshape_std<S: Scalar>(a: ArrayD<S>, shape: &[usize]) -> ArrayD<S> {
    to_std(a)
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape: element count mismatch")
}

fn as2<S: Scalar>(v: &ArrayD<S>) -> ArrayView2<'_, S> {
    v.view()
        .into_dimensionality::<Ix2>()
        .expect("expected 2-d tensor")
}

impl<'t, S: Scalar> Var<'t, S> {
    fn unary(self, f: impl Fn(S) -> S, df: impl Fn(S) -> S + 'static) -> Var<'t, S> {
        let a = self.value_rc();
        let value = a.mapv(&f);
        let requires = self.tape.requires_grad(self.id);
        let back = requires.then(|| {
            let id = self.id;
            Box::new(move |g: &ArrayD<S>, sink: &mut dyn FnMut(usize, ArrayD<S>)| {
                let mut d = a.mapv(&df);
                d.zip_mut_with(g, |x, &gi| *x = *x * gi);
                sink(id, d);
            }) as super::BackFn<S>
        });
        self.tape.push(value, requires, back)
    }

    pub fn neg(self) -> Var<'t, S> {
        self.unary(|x| -x, |_| -S::one())
    }

    pub fn exp(self) -> Var<'t, S> {
        // d/dx e^x = e^x: capture the output value.
        let a = self.value_rc();
        let value = a.mapv(|x| x.exp());
        let out = Rc::new(value.clone());
        let requires = self.tape.requires_grad(self.id);
        let back = requires.then(|| {
            let id = self.id;
            Box::new(move |g: &ArrayD<S>, sink: &mut dyn FnMut(usize, ArrayD<S>)| {
                let mut d = (*out).clone();
                d.zip_mut_with(g, |x, &gi| *x = *x * gi);
                sink(id, d);
            }) as super::BackFn<S>
        });
        self.tape.push(value, requires, back)
    }

    pub fn square(self) -> Var<'t, S> {
        let two = S::from_f(2.0);
        self.unary(|x| x * x, move |x| two * x)
    }

    pub fn relu(self) -> Var<'t, S> {
        self.unary(
            |x| if x > S::zero() { x } else { S::zero() },
            |x| if x > S::zero() { S::one() } else { S::zero() },
        )
    }

    pub fn leaky_relu(self, alpha: f64) -> Var<'t, S> {
        let a = S::from_f(alpha);
        self.unary(
            move |x| if x > S::zero() { x } else { a * x },
            move |x| if x > S::zero() { S::one() } else { a },
        )
    }

    pub fn silu(self) -> Var<'t, S> {
        fn sigmoid<S: Scalar>(x: S) -> S {
            S::one() / (S::one() + (-x).exp())
        }
        self.unary(
            |x| x * sigmoid(x),
            |x| {
                let s = sigmoid(x);
                s * (S::one() + x * (S::one() - s))
            },
        )
    }

    /// GeLU, tanh approximation.
    pub fn gelu(self) -> Var<'t, S> {
        let c = S::from_f(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k = S::from_f(0.044_715);
        let half = S::from_f(0.5);
        let three = S::from_f(3.0);
        self.unary(
            move |x| {
                let u = c * (x + k * x * x * x);
                half * x * (S::one() + u.tanh())
            },
            move |x| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let du = c * (S::one() + three * k * x * x);
                half * (S::one() + t) + half * x * (S::one() - t * t) * du
            },
        )
    }

    /// Clamp with pass-through gradient strictly inside the range.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, S> {
        let lo = S::from_f(lo);
        let hi = S::from_f(hi);
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x| {
                if x > lo && x < hi {
                    S::one()
                } else {
                    S::zero()
                }
            },
        )
    }

    pub fn scale(self, c: S) -> Var<'t, S> {
        self.unary(move |x| c * x, move |_| c)
    }

    pub fn add_scalar(self, c: S) -> Var<'t, S> {
        self.unary(move |x| x + c, |_| S::one())
    }

    fn binary(
        self,
        other: Var<'t, S>,
        value: ArrayD<S>,
        da: impl FnOnce(&ArrayD<S>) -> ArrayD<S> + 'static,
        db: impl FnOnce(&ArrayD<S>) -> ArrayD<S> + 'static,
    ) -> Var<'t, S> {
        let need_a = self.tape.requires_grad(self.id);
        let need_b = other.tape.requires_grad(other.id);
        let requires = need_a || need_b;
        let back = requires.then(|| {
            let (ia, ib) = (self.id, other.id);
            Box::new(move |g: &ArrayD<S>, sink: &mut dyn FnMut(usize, ArrayD<S>)| {
                if need_a {
                    sink(ia, da(g));
                }
                if need_b {
                    sink(ib, db(g));
                }
            }) as super::BackFn<S>
        });
        self.tape.push(value, requires, back)
    }

    pub fn add(self, other: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value_rc(), other.value_rc());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let value = &*a + &*b;
        self.binary(other, value, |g| g.clone(), |g| g.clone())
    }

    pub fn sub(self, other: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value_rc(), other.value_rc());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let value = &*a - &*b;
        self.binary(other, value, |g| g.clone(), |g| g.mapv(|x| -x))
    }

    pub fn mul(self, other: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value_rc(), other.value_rc());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let value = &*a * &*b;
        self.binary(
            other,
            value,
            move |g| {
                let mut d = (*b).clone();
                d.zip_mut_with(g, |x, &gi| *x = *x * gi);
                d
            },
            move |g| {
                let mut d = (*a).clone();
                d.zip_mut_with(g, |x, &gi| *x = *x * gi);
                d
            },
        )
    }

    pub fn sum_all(self) -> Var<'t, S> {
        let a = self.value_rc();
        let shape = a.raw_dim();
        let value = ArrayD::from_elem(IxDyn(&[]), a.sum());
        let requires = self.tape.requires_grad(self.id);
        let back = requires.then(|| {
            let id = self.id;
            Box::new(move |g: &ArrayD<S>, sink: &mut dyn FnMut(usize, ArrayD<S>)| {
                let gv = *g.iter().next().unwrap();
                sink(id, ArrayD::from_elem(shape, gv));
            }) as super::BackFn<S>
        });
        self.tape.push(value, requires, back)
    }

    pub fn mean_all(self) -> Var<'t, S> {
        let n = self.value_rc().len();
        self.sum_all().scale(S::one() / S::from_usize_(n))
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(self, rhs: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value_rc(), rhs.value_rc());
        let (a2, b2) = (as2(&a), as2(&b));
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dims");
        let value = a2.dot(&b2).into_dyn();
        let need_a = self.tape.requires_grad(self.id);
        let need_b = rhs.tape.requires_grad(rhs.id);
        let requires = need_a || need_b;
        let back = requires.then(|| {
            let (ia, ib) = (self.id, rhs.id);
            Box::new(move |g: &ArrayD<S>, sink: &mut dyn FnMut(usize, ArrayD<S>)| {
                let g2 = as2(g);
                if need_a {
                    sink(ia, g2.dot(&as2(&b).t()).into_dyn());
                }
                if need_b {
                    sink(ib, as2(&a).t().dot(&g2).into_dyn());
                }
            }) as super::BackFn<S>
        });
        self.tape.push(value, requires, back)
    }

    /// `[M, N] + bias[N]` broadcast over rows.
    pub fn add_row_bias(self, bias: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value_rc(), bias.value_rc());
        let a2 = as2(&a);
        assert_eq!(b.len(), a2.ncols(), "add_row_bias: width mismatch");
        let b1 = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let value = (&a2 + &b1).into_dyn();
        self.binary(bias, value, |g| g.clone(), |g| {
            as2(g).sum_axis(Axis(0)).into_dyn()
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, S> {
        let a = self.value_rc();
        let old_shape: Vec<usize> = a.shape().to_vec();
        let value = reshape_std((*a).clone(), shape);
        let requires = self.tape.requires_grad(self.id);
        let back = requires.then(|| {
            let id = self.id;
            Box::new(move |g: &ArrayD<S>, sink: &mut dyn FnMut(usize, ArrayD<S>)| {
                sink(id, reshape_std(g.clone(), &old_shape));
            }) as super::BackFn<S>
        });
        self.tape.push(value, requires, back)
    }

    /// `[B, C, H, W] -> [B*H*W, C]` token rows.
    pub fn nchw_to_tokens(self) -> Var<'t, S> {
        let a = self.value_rc();
        let s = a.shape().to_vec();
        assert_eq!(s.len(), 4, "nchw_to_tokens: expected 4-d");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let value = reshape_std(
            to_std((*a).clone().permuted_axes(IxDyn(&[0, 2, 3, 1]))),
            &[b * h * w, c],
        );
        let requires = self.tape.requires_grad(self.id);
        let back = requires.then(|| {
            let id = self.id;
            Box::new(move |g: &ArrayD<S>, sink: &mut dyn FnMut(usize, ArrayD<S>)| {
                let g4 = reshape_std(g.clone(), &[b, h, w, c]);
                sink(id, to_std(g4.permuted_axes(IxDyn(&[0, 3, 1, 2]))));
            }) as super::BackFn<S>
        });
        self.tape.push(value, requires, back)
    }

    /// `[B*H*W, C] -> [B, C, H, W]`, inverse of [`Var::nchw_to_tokens`].
    pub fn tokens_to_nchw(self, b: usize, h: usize, w: usize) -> Var<'t, S> {
        let a = self.value_rc();
        let s = a.shape().to_vec();
        assert_eq!(s.len(), 2, "tokens_to_nchw: expected 2-d");
        assert_eq!(s[0], b * h * w, "tokens_to_nchw: row count");
        let c = s[1];
        let value = to_std(
            reshape_std((*a).clone(), &[b, h, w, c]).permuted_axes(IxDyn(&[0, 3, 1, 2])),
        );
        let requires = self.tape.requires_grad(self.id);
        let back = requires.then(|| {
            let id = self.id;
            Box::new(move |g: &ArrayD<S>, sink: &mut dyn FnMut(usize, ArrayD<S>)| {
                let gt = to_std(g.clone().permuted_axes(IxDyn(&[0, 2, 3, 1])));
                sink(id, reshape_std(gt, &[b * h * w, c]));
            }) as super::BackFn<S>
        });
        self.tape.push(value, requires, back)
    }

    /// Select channels `[start, start+len)` of an NCHW tensor.
    pub fn narrow_channels(self, start: usize, len: usize) -> Var<'t, S> {
        let a = self.value_rc();
        let s = a.shape().to_vec();
        assert_eq!(s.len(), 4, "narrow_channels: expected 4-d");
        assert!(start + len <= s[1], "narrow_channels: out of range");
        let value = a
            .slice_axis(Axis(1), ndarray::Slice::from(start..start + len))
            .to_owned();
        let requires = self.tape.requires_grad(self.id);
        let back = requires.then(|| {
            let id = self.id;
            Box::new(move |g: &ArrayD<S>, sink: &mut dyn FnMut(usize, ArrayD<S>)| {
                let mut full = ArrayD::zeros(IxDyn(&s));
                full.slice_axis_mut(Axis(1), ndarray::Slice::from(start..start + len))
                    .assign(g);
                sink(id, full);
            }) as super::BackFn<S>
        });
        self.tape.push(value, requires, back)
    }

    /// 2-d convolution, NCHW, with optional bias.
    pub fn conv2d(self, weight: Var<'t, S>, bias: Option<Var<'t, S>>, stride: usize, pad: usize) -> Var<'t, S> {
        let x = self.value_rc();
        let w = weight.value_rc();
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d: input must be 4-d");
        assert_eq!(ws.len(), 4, "conv2d: weight must be 4-d");
        assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
        let (b, ci, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wdt + 2 * pad - kw) / stride + 1;
        let k = ci * kh * kw;

        let cols = Rc::new(im2col(&x, kh, kw, stride, pad, oh, ow));
        let wmat = reshape_std((*w).clone(), &[co, k]);
        // [B*OH*OW, Co]
        let out2 = cols.dot(&as2(&wmat).t());
        let mut out2 = out2;
        if let Some(bv) = bias {
            let bval = bv.value_rc();
            assert_eq!(bval.len(), co, "conv2d: bias length");
            let b1 = bval.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            out2 = out2 + &b1;
        }
        let value = to_std(
            reshape_std(out2.into_dyn(), &[b, oh, ow, co]).permuted_axes(IxDyn(&[0, 3, 1, 2])),
        );

        let need_x = self.tape.requires_grad(self.id);
        let need_w = weight.tape.requires_grad(weight.id);
        let need_b = bias.map(|bv| bv.tape.requires_grad(bv.id)).unwrap_or(false);
        let requires = need_x || need_w || need_b;
        let back = requires.then(|| {
            let ix = self.id;
            let iw = weight.id;
            let ib = bias.map(|bv| bv.id);
            let cols = Rc::clone(&cols);
            Box::new(move |g: &ArrayD<S>, sink: &mut dyn FnMut(usize, ArrayD<S>)| {
                // [B, Co, OH, OW] -> [B*OH*OW, Co]
                let gmat = reshape_std(
                    to_std(g.clone().permuted_axes(IxDyn(&[0, 2, 3, 1]))),
                    &[b * oh * ow, co],
                );
                let gmat2 = as2(&gmat);
                if need_b {
                    sink(ib.unwrap(), gmat2.sum_axis(Axis(0)).into_dyn());
                }
                if need_w {
                    let dw = gmat2.t().dot(&*cols);
                    sink(iw, reshape_std(dw.into_dyn(), &[co, ci, kh, kw]));
                }
                if need_x {
                    let dcols = gmat2.dot(&as2(&wmat));
                    sink(ix, col2im(&dcols, b, ci, h, wdt, kh, kw, stride, pad, oh, ow));
                }
            }) as super::BackFn<S>
        });
        self.tape.push(value, requires, back)
    }

    /// Nearest-neighbour x2 upsampling of an NCHW tensor.
    pub fn upsample_nearest2(self) -> Var<'t, S> {
        let a = self.value_rc();
        let s = a.shape().to_vec();
        assert_eq!(s.len(), 4, "upsample: expected 4-d");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let a4 = a.view().into_dimensionality::<Ix4>().unwrap();
        let mut out = Array4::<S>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = a4[[bi, ci, i, j]];
                        out[[bi, ci, 2 * i, 2 * j]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j]] = v;
                        out[[bi, ci, 2 * i, 2 * j + 1]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        let requires = self.tape.requires_grad(self.id);
        let back = requires.then(|| {
            let id = self.id;
            Box::new(move |g: &ArrayD<S>, sink: &mut dyn FnMut(usize, ArrayD<S>)| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<S>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                dx[[bi, ci, i, j]] = g4[[bi, ci, 2 * i, 2 * j]]
                                    + g4[[bi, ci, 2 * i + 1, 2 * j]]
                                    + g4[[bi, ci, 2 * i, 2 * j + 1]]
                                    + g4[[bi, ci, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                }
                sink(id, dx.into_dyn());
            }) as super::BackFn<S>
        });
        self.tape.push(out.into_dyn(), requires, back)
    }

    /// Spatial mean of an NCHW tensor: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(self) -> Var<'t, S> {
        let a = self.value_rc();
        let s = a.shape().to_vec();
        assert_eq!(s.len(), 4, "global_avg_pool: expected 4-d");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let inv = S::one() / S::from_usize_(h * w);
        let a4 = a.view().into_dimensionality::<Ix4>().unwrap();
        let mut out = Array2::<S>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let mut acc = S::zero();
                for i in 0..h {
                    for j in 0..w {
                        acc += a4[[bi, ci, i, j]];
                    }
                }
                out[[bi, ci]] = acc * inv;
            }
        }
        let requires = self.tape.requires_grad(self.id);
        let back = requires.then(|| {
            let id = self.id;
            Box::new(move |g: &ArrayD<S>, sink: &mut dyn FnMut(usize, ArrayD<S>)| {
                let g2 = as2(g);
                let mut dx = Array4::<S>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        let gv = g2[[bi, ci]] * inv;
                        for i in 0..h {
                            for j in 0..w {
                                dx[[bi, ci, i, j]] = gv;
                            }
                        }
                    }
                }
                sink(id, dx.into_dyn());
            }) as super::BackFn<S>
        });
        self.tape.push(out.into_dyn(), requires, back)
    }

    /// `[B, C, H, W] + cond[B, C]` broadcast over space (FiLM-style shift).
    pub fn add_cond_bias(self, cond: Var<'t, S>) -> Var<'t, S> {
        let (a, cv) = (self.value_rc(), cond.value_rc());
        let s = a.shape().to_vec();
        assert_eq!(s.len(), 4, "add_cond_bias: expected 4-d input");
        assert_eq!(cv.shape(), &[s[0], s[1]], "add_cond_bias: cond shape");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let a4 = a.view().into_dimensionality::<Ix4>().unwrap();
        let c2 = as2(&cv);
        let mut out = a4.to_owned();
        for bi in 0..b {
            for ci in 0..c {
                let v = c2[[bi, ci]];
                out.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace(|x| x + v);
            }
        }
        self.binary(cond, out.into_dyn(), |g| g.clone(), move |g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut dc = Array2::<S>::zeros((b, c));
            for bi in 0..b {
                for ci in 0..c {
                    let mut acc = S::zero();
                    for i in 0..h {
                        for j in 0..w {
                            acc += g4[[bi, ci, i, j]];
                        }
                    }
                    dc[[bi, ci]] = acc;
                }
            }
            dc.into_dyn()
        })
    }

    /// GroupNorm over an NCHW tensor with per-channel affine parameters.
    pub fn group_norm(self, gamma: Var<'t, S>, beta: Var<'t, S>, groups: usize, eps: f64) -> Var<'t, S> {
        let x = self.value_rc();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "group_norm: expected 4-d");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(c % groups == 0, "group_norm: channels not divisible by groups");
        let gv = gamma.value_rc();
        let bv = beta.value_rc();
        assert_eq!(gv.len(), c, "group_norm: gamma length");
        assert_eq!(bv.len(), c, "group_norm: beta length");
        let cg = c / groups;
        let m = cg * h * w;
        let eps = S::from_f(eps);
        let inv_m = S::one() / S::from_usize_(m);

        let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
        let mut xhat = Array4::<S>::zeros((b, c, h, w));
        let mut inv_std = Array2::<S>::zeros((b, groups));
        for bi in 0..b {
            for gi in 0..groups {
                let mut mean = S::zero();
                for ci in gi * cg..(gi + 1) * cg {
                    for i in 0..h {
                        for j in 0..w {
                            mean += x4[[bi, ci, i, j]];
                        }
                    }
                }
                mean = mean * inv_m;
                let mut var = S::zero();
                for ci in gi * cg..(gi + 1) * cg {
                    for i in 0..h {
                        for j in 0..w {
                            let d = x4[[bi, ci, i, j]] - mean;
                            var += d * d;
                        }
                    }
                }
                var = var * inv_m;
                let is = S::one() / (var + eps).sqrt();
                inv_std[[bi, gi]] = is;
                for ci in gi * cg..(gi + 1) * cg {
                    for i in 0..h {
                        for j in 0..w {
                            xhat[[bi, ci, i, j]] = (x4[[bi, ci, i, j]] - mean) * is;
                        }
                    }
                }
            }
        }
        let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = Array4::<S>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                let (ga, be) = (g1[ci], b1[ci]);
                for i in 0..h {
                    for j in 0..w {
                        out[[bi, ci, i, j]] = ga * xhat[[bi, ci, i, j]] + be;
                    }
                }
            }
        }

        let xhat = Rc::new(xhat);
        let need_x = self.tape.requires_grad(self.id);
        let need_g = gamma.tape.requires_grad(gamma.id);
        let need_b = beta.tape.requires_grad(beta.id);
        let requires = need_x || need_g || need_b;
        let gv2 = Rc::clone(&gv);
        let back = requires.then(|| {
            let (ix, ig, ib) = (self.id, gamma.id, beta.id);
            let xhat = Rc::clone(&xhat);
            Box::new(move |g: &ArrayD<S>, sink: &mut dyn FnMut(usize, ArrayD<S>)| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let gamma1 = gv2.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                if need_b {
                    let mut db = Array1::<S>::zeros(c);
                    for ci in 0..c {
                        let mut acc = S::zero();
                        for bi in 0..b {
                            for i in 0..h {
                                for j in 0..w {
                                    acc += g4[[bi, ci, i, j]];
                                }
                            }
                        }
                        db[ci] = acc;
                    }
                    sink(ib, db.into_dyn());
                }
                if need_g {
                    let mut dg = Array1::<S>::zeros(c);
                    for ci in 0..c {
                        let mut acc = S::zero();
                        for bi in 0..b {
                            for i in 0..h {
                                for j in 0..w {
                                    acc += g4[[bi, ci, i, j]] * xhat[[bi, ci, i, j]];
                                }
                            }
                        }
                        dg[ci] = acc;
                    }
                    sink(ig, dg.into_dyn());
                }
                if need_x {
                    let mut dx = Array4::<S>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for gi in 0..groups {
                            let mut mean1 = S::zero();
                            let mut mean2 = S::zero();
                            for ci in gi * cg..(gi + 1) * cg {
                                let ga = gamma1[ci];
                                for i in 0..h {
                                    for j in 0..w {
                                        let dxh = g4[[bi, ci, i, j]] * ga;
                                        mean1 += dxh;
                                        mean2 += dxh * xhat[[bi, ci, i, j]];
                                    }
                                }
                            }
                            mean1 = mean1 * inv_m;
                            mean2 = mean2 * inv_m;
                            let is = inv_std[[bi, gi]];
                            for ci in gi * cg..(gi + 1) * cg {
                                let ga = gamma1[ci];
                                for i in 0..h {
                                    for j in 0..w {
                                        let dxh = g4[[bi, ci, i, j]] * ga;
                                        dx[[bi, ci, i, j]] =
                                            is * (dxh - mean1 - xhat[[bi, ci, i, j]] * mean2);
                                    }
                                }
                            }
                        }
                    }
                    sink(ix, dx.into_dyn());
                }
            }) as super::BackFn<S>
        });
        self.tape.push(out.into_dyn(), requires, back)
    }
}

impl<S: Scalar> Tape<S> {
    /// Row lookup: `table[V, E]` gathered at `ids` -> `[len(ids), E]`.
    pub fn embedding<'t>(&'t self, table: Var<'t, S>, ids: &[usize]) -> Var<'t, S> {
        let t = table.value_rc();
        let ts = t.shape().to_vec();
        assert_eq!(ts.len(), 2, "embedding: table must be 2-d");
        let (v, e) = (ts[0], ts[1]);
        for &id in ids {
            assert!(id < v, "embedding: id {id} out of range {v}");
        }
        let t2 = as2(&t);
        let mut out = Array2::<S>::zeros((ids.len(), e));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t2.row(id));
        }
        let requires = self.requires_grad(table.id);
        let ids_owned: Vec<usize> = ids.to_vec();
        let back = requires.then(|| {
            let it = table.id;
            Box::new(move |g: &ArrayD<S>, sink: &mut dyn FnMut(usize, ArrayD<S>)| {
                let g2 = as2(g);
                let mut dt = Array2::<S>::zeros((v, e));
                for (r, &id) in ids_owned.iter().enumerate() {
                    let mut row = dt.row_mut(id);
                    row.zip_mut_with(&g2.row(r), |x, &y| *x = *x + y);
                }
                sink(it, dt.into_dyn());
            }) as super::BackFn<S>
        });
        self.push(out.into_dyn(), requires, back)
    }
}

/// Mean Huber loss (threshold 1) between a variable and a constant target.
pub fn huber_mean_const<'t, S: Scalar>(a: Var<'t, S>, target: &ArrayD<S>) -> Var<'t, S> {
    let av = a.value_rc();
    assert_eq!(av.shape(), target.shape(), "huber: shape mismatch");
    let n = av.len();
    let inv_n = S::one() / S::from_usize_(n);
    let half = S::from_f(0.5);
    let mut acc = S::zero();
    let mut dgrad = ArrayD::<S>::zeros(av.raw_dim());
    for ((l, &x), &t) in dgrad.iter_mut().zip(av.iter()).zip(target.iter()) {
        let d = x - t;
        let ad = d.abs();
        if ad < S::one() {
            acc += half * d * d;
            *l = d * inv_n;
        } else {
            acc += ad - half;
            *l = d.signum() * inv_n;
        }
    }
    let value = ArrayD::from_elem(IxDyn(&[]), acc * inv_n);
    let requires = a.tape.requires_grad(a.id);
    let back = requires.then(|| {
        let ia = a.id;
        Box::new(move |g: &ArrayD<S>, sink: &mut dyn FnMut(usize, ArrayD<S>)| {
            let gv = *g.iter().next().unwrap();
            sink(ia, dgrad.mapv(|x| x * gv));
        }) as super::BackFn<S>
    });
    a.tape.push(value, requires, back)
}

/// Mean cosine-distance loss over rows: `mean_i (1 - cos(a_i, b_i))` with
/// `b` constant. Norms carry an additive epsilon; a zero row in `a` gets a
/// zero gradient for its direction term.
pub fn cosine_mean_const<'t, S: Scalar>(a: Var<'t, S>, target: &ArrayD<S>, eps: f64) -> Var<'t, S> {
    let av = a.value_rc();
    assert_eq!(av.shape(), target.shape(), "cosine: shape mismatch");
    let a2 = as2(&av);
    let b2 = as2(target);
    let rows = a2.nrows();
    let eps = S::from_f(eps);
    let inv_rows = S::one() / S::from_usize_(rows);
    let mut acc = S::zero();
    let mut dgrad = Array2::<S>::zeros((rows, a2.ncols()));
    for r in 0..rows {
        let ar = a2.row(r);
        let br = b2.row(r);
        let dot = ar.dot(&br);
        let norm_a = ar.dot(&ar).sqrt();
        let norm_b = br.dot(&br).sqrt();
        let na = norm_a + eps;
        let nb = norm_b + eps;
        let cos = dot / (na * nb);
        acc += S::one() - cos;
        // d(1-cos)/da = -(b/(na*nb) - dot * (a/norm_a) / (na^2 * nb))
        let mut row = dgrad.row_mut(r);
        if norm_a > S::zero() {
            let c1 = S::one() / (na * nb);
            let c2 = dot / (norm_a * na * na * nb);
            for (d, (&bi, &ai)) in row.iter_mut().zip(br.iter().zip(ar.iter())) {
                *d = -(bi * c1 - ai * c2) * inv_rows;
            }
        } else {
            let c1 = S::one() / (na * nb);
            for (d, &bi) in row.iter_mut().zip(br.iter()) {
                *d = -(bi * c1) * inv_rows;
            }
        }
    }
    let value = ArrayD::from_elem(IxDyn(&[]), acc * inv_rows);
    let requires = a.tape.requires_grad(a.id);
    let back = requires.then(|| {
        let ia = a.id;
        Box::new(move |g: &ArrayD<S>, sink: &mut dyn FnMut(usize, ArrayD<S>)| {
            let gv = *g.iter().next().unwrap();
            sink(ia, dgrad.mapv(|x| x * gv).into_dyn());
        }) as super::BackFn<S>
    });
    a.tape.push(value, requires, back)
}

pub(crate) fn im2col<S: Scalar>(
    x: &ArrayD<S>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<S> {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x4.dim();
    let k = c * kh * kw;
    let mut cols = Array2::<S>::zeros((b * oh * ow, k));
    for bi in 0..b {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = (bi * oh + oi) * ow + oj;
                let base_i = (oi * stride) as isize - pad as isize;
                let base_j = (oj * stride) as isize - pad as isize;
                let mut col = 0usize;
                for ci in 0..c {
                    for di in 0..kh {
                        let ii = base_i + di as isize;
                        for dj in 0..kw {
                            let jj = base_j + dj as isize;
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                cols[[row, col]] = x4[[bi, ci, ii as usize, jj as usize]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<S: Scalar>(
    cols: &Array2<S>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ArrayD<S> {
    let mut x = Array4::<S>::zeros((b, c, h, w));
    for bi in 0..b {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = (bi * oh + oi) * ow + oj;
                let base_i = (oi * stride) as isize - pad as isize;
                let base_j = (oj * stride) as isize - pad as isize;
                let mut col = 0usize;
                for ci in 0..c {
                    for di in 0..kh {
                        let ii = base_i + di as isize;
                        for dj in 0..kw {
                            let jj = base_j + dj as isize;
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                x[[bi, ci, ii as usize, jj as usize]] += cols[[row, col]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    x.into_dyn()
}

impl<'t, S: Scalar> std::ops::Add for Var<'t, S> {
    type Output = Var<'t, S>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'t, S: Scalar> std::ops::Sub for Var<'t, S> {
    type Output = Var<'t, S>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'t, S: Scalar> std::ops::Mul for Var<'t, S> {
    type Output = Var<'t, S>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

impl<'t, S: Scalar> std::ops::Neg for Var<'t, S> {
    type Output = Var<'t, S>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}
