//! Differentiable operations. Each op computes its value eagerly and records
//! a closure mapping the output gradient to input-gradient contributions.
//!
//! Shape conventions: most ops are 2-d (`[rows, cols]`); the convolution and
//! upsampling path is 4-d (`[batch, chan, h, w]`); reductions produce 0-d
//! scalars.

use super::{Tape, Var};
use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayView3, ArrayViewMut3, Axis, Ix2, Ix4, IxDyn};
use std::rc::Rc;

fn as2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Tape {
    // ----- elementwise -------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let out = &*av + &*bv;
        self.push(out, move |g, sink| {
            sink.add(a, g.clone());
            sink.add(b, g.clone());
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "sub shapes");
        let out = &*av - &*bv;
        self.push(out, move |g, sink| {
            sink.add(a, g.clone());
            sink.add(b, -g);
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let out = &*av * &*bv;
        self.push(out, move |g, sink| {
            sink.add(a, g * &*bv);
            sink.add(b, g * &*av);
        })
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "div shapes");
        let out = &*av / &*bv;
        self.push(out, move |g, sink| {
            sink.add(a, g / &*bv);
            sink.add(b, -(g * &*av) / (&*bv * &*bv));
        })
    }

    /// `s * a + c` elementwise with scalar constants.
    pub fn affine(&self, a: Var, s: f64, c: f64) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| s * x + c);
        self.push(out, move |g, sink| sink.add(a, g * s))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    /// Add a non-differentiable constant array (attention bias, targets).
    pub fn add_const(&self, a: Var, c: &ArrayD<f64>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), c.shape(), "add_const shapes");
        let out = &*av + c;
        self.push(out, move |g, sink| sink.add(a, g.clone()))
    }

    /// Multiply by a non-differentiable constant array (e.g. a gt mask).
    pub fn mul_const(&self, a: Var, c: &ArrayD<f64>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), c.shape(), "mul_const shapes");
        let out = &*av * c;
        let c = c.clone();
        self.push(out, move |g, sink| sink.add(a, g * &c))
    }

    // ----- matrix products ---------------------------------------------

    /// `a [m,k] · b [k,n]`
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = as2(&av).dot(&as2(&bv));
        self.push(out.into_dyn(), move |g, sink| {
            let g2 = as2(g);
            sink.add(a, g2.dot(&as2(&bv).t()).into_dyn());
            sink.add(b, as2(&av).t().dot(&g2).into_dyn());
        })
    }

    /// `a [m,k] · bᵀ` with `b [n,k]`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = as2(&av).dot(&as2(&bv).t());
        self.push(out.into_dyn(), move |g, sink| {
            let g2 = as2(g);
            sink.add(a, g2.dot(&as2(&bv)).into_dyn());
            sink.add(b, g2.t().dot(&as2(&av)).into_dyn());
        })
    }

    /// `aᵀ · b` with `a [k,m]`, `b [k,n]`
    pub fn matmul_tn(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = as2(&av).t().dot(&as2(&bv));
        self.push(out.into_dyn(), move |g, sink| {
            let g2 = as2(g);
            sink.add(a, as2(&bv).dot(&g2.t()).into_dyn());
            sink.add(b, as2(&av).dot(&g2).into_dyn());
        })
    }

    /// Row-broadcast bias: `a [r,c] + b [c]`.
    pub fn add_bias_row(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let a2 = as2(&av);
        assert_eq!(a2.ncols(), bv.len(), "bias width");
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
        let out = &a2 + &b1;
        self.push(out.into_dyn(), move |g, sink| {
            sink.add(a, g.clone());
            sink.add(b, as2(g).sum_axis(Axis(0)).into_dyn());
        })
    }

    /// Rows scaled copies of a vector: `out[i,:] = scales[i] * v`. Used to
    /// broadcast a per-segment audio feature across query slots.
    pub fn scaled_rows(&self, v: Var, scales: &[f64]) -> Var {
        let vv = self.value(v);
        assert_eq!(vv.ndim(), 1, "scaled_rows takes a vector");
        let d = vv.len();
        let n = scales.len();
        let mut out = Array2::<f64>::zeros((n, d));
        for (i, &s) in scales.iter().enumerate() {
            if s != 0.0 {
                out.row_mut(i).assign(&vv.mapv(|x| x * s));
            }
        }
        let scales = scales.to_vec();
        self.push(out.into_dyn(), move |g, sink| {
            let g2 = as2(g);
            let mut dv = Array1::<f64>::zeros(d);
            for (i, &s) in scales.iter().enumerate() {
                if s != 0.0 {
                    dv.scaled_add(s, &g2.row(i));
                }
            }
            sink.add(v, dv.into_dyn());
        })
    }

    // ----- nonlinearities ----------------------------------------------

    pub fn sigmoid(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = Rc::new(av.mapv(stable_sigmoid));
        let captured = Rc::clone(&out);
        self.push_shared(out, move |g, sink| {
            sink.add(a, g * &captured.mapv(|s| s * (1.0 - s)));
        })
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x.max(0.0));
        self.push(out, move |g, sink| {
            sink.add(a, g * &av.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }));
        })
    }

    /// `ln(1 + e^x)`, numerically stable.
    pub fn softplus(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(out, move |g, sink| {
            sink.add(a, g * &av.mapv(stable_sigmoid));
        })
    }

    /// Elementwise power for non-negative bases and exponent >= 1.
    pub fn powf(&self, a: Var, p: f64) -> Var {
        assert!(p >= 1.0, "powf requires exponent >= 1 for a defined gradient");
        let av = self.value(a);
        let out = av.mapv(|x| x.powf(p));
        self.push(out, move |g, sink| {
            sink.add(a, g * &av.mapv(|x| p * x.powf(p - 1.0)));
        })
    }

    pub fn exp(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = Rc::new(av.mapv(f64::exp));
        let captured = Rc::clone(&out);
        self.push_shared(out, move |g, sink| sink.add(a, g * &*captured))
    }

    pub fn ln(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(f64::ln);
        self.push(out, move |g, sink| sink.add(a, g / &*av))
    }

    /// Row-wise softmax of a 2-d tensor. Rows containing `-inf` entries get
    /// exact zeros there; a row that is entirely `-inf` is a caller bug.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let a2 = as2(&av);
        let mut out = Array2::<f64>::zeros(a2.raw_dim());
        for (i, row) in a2.rows().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            assert!(max.is_finite(), "softmax row {i} has no finite entry");
            let mut o = out.row_mut(i);
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                o[j] = e;
                sum += e;
            }
            o.mapv_inplace(|e| e / sum);
        }
        let out = Rc::new(out.into_dyn());
        let s = Rc::clone(&out);
        self.push_shared(out, move |g, sink| {
            let g2 = as2(g);
            let s2 = as2(&s);
            let mut da = Array2::<f64>::zeros(g2.raw_dim());
            for i in 0..g2.nrows() {
                let gi = g2.row(i);
                let si = s2.row(i);
                let dot: f64 = gi.iter().zip(si.iter()).map(|(a, b)| a * b).sum();
                let mut d = da.row_mut(i);
                for j in 0..gi.len() {
                    d[j] = si[j] * (gi[j] - dot);
                }
            }
            sink.add(a, da.into_dyn());
        })
    }

    // ----- reductions ---------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.raw_dim();
        let out = scalar(av.sum());
        self.push(out, move |g, sink| {
            let gs = g.iter().next().copied().unwrap_or(0.0);
            sink.add(a, ArrayD::from_elem(shape.clone(), gs));
        })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of elementwise products — `⟨a, b⟩` over all elements.
    pub fn dot_all(&self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum_all(p)
    }

    // ----- structure ops -------------------------------------------------

    /// Select rows of a 2-d tensor. Backward scatter-adds into the source, so
    /// unselected rows receive an exact structural zero gradient.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let a2 = as2(&av);
        let (n, c) = (a2.nrows(), a2.ncols());
        let mut out = Array2::<f64>::zeros((idx.len(), c));
        for (k, &i) in idx.iter().enumerate() {
            assert!(i < n, "gather index {i} out of range {n}");
            out.row_mut(k).assign(&a2.row(i));
        }
        let idx = idx.to_vec();
        self.push(out.into_dyn(), move |g, sink| {
            let g2 = as2(g);
            let mut da = Array2::<f64>::zeros((n, c));
            for (k, &i) in idx.iter().enumerate() {
                da.row_mut(i).scaled_add(1.0, &g2.row(k));
            }
            sink.add(a, da.into_dyn());
        })
    }

    /// Layer normalization over the last axis of `x [r,c]` with learnable
    /// gain/bias `[c]`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let x2 = as2(&xv);
        let (r, c) = (x2.nrows(), x2.ncols());
        assert_eq!(gv.len(), c, "layer_norm gain width");
        assert_eq!(bv.len(), c, "layer_norm bias width");

        let mut xhat = Array2::<f64>::zeros((r, c));
        let mut inv_std = Array1::<f64>::zeros(r);
        for i in 0..r {
            let row = x2.row(i);
            let mean = row.mean().unwrap();
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            let mut h = xhat.row_mut(i);
            for j in 0..c {
                h[j] = (row[j] - mean) * is;
            }
        }
        let mut out = Array2::<f64>::zeros((r, c));
        for i in 0..r {
            for j in 0..c {
                out[[i, j]] = xhat[[i, j]] * gv[j] + bv[j];
            }
        }
        let xhat = Rc::new(xhat);
        let xh = Rc::clone(&xhat);
        self.push(out.into_dyn(), move |g, sink| {
            let g2 = as2(g);
            let mut dx = Array2::<f64>::zeros((r, c));
            let mut dgain = Array1::<f64>::zeros(c);
            let mut dbias = Array1::<f64>::zeros(c);
            for i in 0..r {
                let gi = g2.row(i);
                let hi = xh.row(i);
                // dL/dxhat = g ⊙ gain
                let gy: Vec<f64> = (0..c).map(|j| gi[j] * gv[j]).collect();
                let mean_gy = gy.iter().sum::<f64>() / c as f64;
                let mean_gy_h = gy.iter().zip(hi.iter()).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                let is = inv_std[i];
                let mut d = dx.row_mut(i);
                for j in 0..c {
                    d[j] = is * (gy[j] - mean_gy - hi[j] * mean_gy_h);
                    dgain[j] += gi[j] * hi[j];
                    dbias[j] += gi[j];
                }
            }
            sink.add(x, dx.into_dyn());
            sink.add(gain, dgain.into_dyn());
            sink.add(bias, dbias.into_dyn());
        })
    }

    // ----- convolution path ----------------------------------------------

    /// 2-d convolution: `x [b,ci,h,w]`, `w [co,ci,kh,kw]`, optional bias `[co]`.
    pub fn conv2d(&self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("conv input 4-d");
        let w4 = wv.view().into_dimensionality::<Ix4>().expect("conv weight 4-d");
        let (b, ci, h, wd) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        let (co, ciw, kh, kw) = (w4.shape()[0], w4.shape()[1], w4.shape()[2], w4.shape()[3]);
        assert_eq!(ci, ciw, "conv channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;

        let w2 = w4
            .to_shape((co, ci * kh * kw))
            .expect("contiguous weight")
            .to_owned();
        let bias_v = bias.map(|bv| self.value(bv));

        let mut out = ndarray::Array4::<f64>::zeros((b, co, ho, wo));
        for bi in 0..b {
            let cols = im2col(&x4.index_axis(Axis(0), bi), kh, kw, stride, pad, ho, wo);
            let o = w2.dot(&cols); // [co, ho*wo]
            let mut slab = out.index_axis_mut(Axis(0), bi);
            for c in 0..co {
                let base = bias_v.as_ref().map(|bv| bv[[c]]).unwrap_or(0.0);
                for p in 0..ho * wo {
                    slab[[c, p / wo, p % wo]] = o[[c, p]] + base;
                }
            }
        }

        let params = (kh, kw, stride, pad, ho, wo);
        self.push(out.into_dyn(), move |g, sink| {
            let (kh, kw, stride, pad, ho, wo) = params;
            let g4 = g.view().into_dimensionality::<Ix4>().expect("grad 4-d");
            let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
            let mut dw2 = Array2::<f64>::zeros((co, ci * kh * kw));
            let mut dx = ndarray::Array4::<f64>::zeros((b, ci, h, wd));
            let mut db = Array1::<f64>::zeros(co);
            let w2t = w2.t();
            for bi in 0..b {
                let gb = g4.index_axis(Axis(0), bi);
                let gmat = gb.to_shape((co, ho * wo)).expect("contiguous grad").to_owned();
                let cols = im2col(&x4.index_axis(Axis(0), bi), kh, kw, stride, pad, ho, wo);
                dw2 = dw2 + gmat.dot(&cols.t());
                let dcols = w2t.dot(&gmat); // [ci*kh*kw, ho*wo]
                col2im(
                    &dcols,
                    &mut dx.index_axis_mut(Axis(0), bi),
                    kh,
                    kw,
                    stride,
                    pad,
                    ho,
                    wo,
                );
                for c in 0..co {
                    db[c] += gmat.row(c).sum();
                }
            }
            sink.add(
                x,
                dx.into_dyn(),
            );
            sink.add(
                w,
                dw2.into_shape_with_order((co, ci, kh, kw)).expect("dw shape").into_dyn(),
            );
            if let Some(bv) = bias {
                sink.add(bv, db.into_dyn());
            }
        })
    }

    /// Nearest-neighbour upsampling of `x [b,c,h,w]` by an integer factor.
    pub fn upsample_nearest(&self, x: Var, factor: usize) -> Var {
        let xv = self.value(x);
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("upsample input 4-d");
        let (b, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        let mut out = ndarray::Array4::<f64>::zeros((b, c, h * factor, w * factor));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h * factor {
                    for xx in 0..w * factor {
                        out[[bi, ci, y, xx]] = x4[[bi, ci, y / factor, xx / factor]];
                    }
                }
            }
        }
        self.push(out.into_dyn(), move |g, sink| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut dx = ndarray::Array4::<f64>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..h * factor {
                        for xx in 0..w * factor {
                            dx[[bi, ci, y / factor, xx / factor]] += g4[[bi, ci, y, xx]];
                        }
                    }
                }
            }
            sink.add(x, dx.into_dyn());
        })
    }

    /// Extract segment `t_idx` of `x [t,c,h,w]` as tokens `[h*w, c]`.
    pub fn segment_tokens(&self, x: Var, t_idx: usize) -> Var {
        self.segment_view(x, t_idx, true)
    }

    /// Extract segment `t_idx` of `x [t,c,h,w]` as a matrix `[c, h*w]`.
    pub fn segment_mat(&self, x: Var, t_idx: usize) -> Var {
        self.segment_view(x, t_idx, false)
    }

    fn segment_view(&self, x: Var, t_idx: usize, tokens: bool) -> Var {
        let xv = self.value(x);
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("segment input 4-d");
        let (t, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        assert!(t_idx < t, "segment index");
        let slab = x4.index_axis(Axis(0), t_idx);
        let out = if tokens {
            let mut o = Array2::<f64>::zeros((h * w, c));
            for ci in 0..c {
                for p in 0..h * w {
                    o[[p, ci]] = slab[[ci, p / w, p % w]];
                }
            }
            o
        } else {
            slab.to_shape((c, h * w)).expect("contiguous segment").to_owned()
        };
        self.push(out.into_dyn(), move |g, sink| {
            let g2 = as2(g);
            let mut dx = ndarray::Array4::<f64>::zeros((t, c, h, w));
            {
                let mut slab = dx.index_axis_mut(Axis(0), t_idx);
                for ci in 0..c {
                    for p in 0..h * w {
                        slab[[ci, p / w, p % w]] =
                            if tokens { g2[[p, ci]] } else { g2[[ci, p]] };
                    }
                }
            }
            sink.add(x, dx.into_dyn());
        })
    }

    // ----- classification loss -------------------------------------------

    /// Weighted cross-entropy over rows of `logits [r,k]` against integer
    /// targets. Normalized by the sum of weights (zero rows → zero loss).
    pub fn cross_entropy_rows(&self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        let l2 = as2(&lv);
        let (r, k) = (l2.nrows(), l2.ncols());
        assert_eq!(targets.len(), r, "targets per row");
        assert_eq!(weights.len(), r, "weights per row");
        let wsum: f64 = weights.iter().sum();
        assert!(wsum > 0.0, "cross_entropy needs positive total weight");

        let mut loss = 0.0;
        let mut probs = Array2::<f64>::zeros((r, k));
        for i in 0..r {
            let row = l2.row(i);
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            for j in 0..k {
                let e = (row[j] - max).exp();
                probs[[i, j]] = e;
                sum += e;
            }
            let lse = max + sum.ln();
            probs.row_mut(i).mapv_inplace(|e| e / sum);
            loss += weights[i] * (lse - row[targets[i]]);
        }
        loss /= wsum;

        let targets = targets.to_vec();
        let weights = weights.to_vec();
        self.push(scalar(loss), move |g, sink| {
            let gs = g.iter().next().copied().unwrap_or(0.0);
            let mut dl = probs.clone();
            for i in 0..r {
                dl[[i, targets[i]]] -= 1.0;
                let f = gs * weights[i] / wsum;
                dl.row_mut(i).mapv_inplace(|v| v * f);
            }
            sink.add(logits, dl.into_dyn());
        })
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(
    x: &ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<f64>::zeros((ci * kh * kw, ho * wo));
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * wo + ox]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    out: &mut ArrayViewMut3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (ci, h, w) = (out.shape()[0], out.shape()[1], out.shape()[2]);
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[[c, iy as usize, ix as usize]] += cols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}
