//! Differentiable operations recorded on a [`Tape`].
//!
//! Each method computes its forward value eagerly, pushes a node, and
//! registers a closure mapping the node's output gradient to parent
//! gradients. Closures capture `Rc` clones of whatever forward values
//! backward needs, so those arrays live exactly as long as the tape.

use std::rc::Rc;

use ndarray::{s, Array4, Axis};

use super::{conv, Real, Tape, Var};
use crate::error::Result;

impl<T: Real> Tape<T> {
    /// Element-wise sum of two same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.dim(), vb.dim(), "add expects matching shapes");
        let out = &*va + &*vb;
        self.push_op(out, move |g| vec![(a, g.clone()), (b, g.clone())])
    }

    /// Element-wise product of two same-shape tensors.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.dim(), vb.dim(), "mul expects matching shapes");
        let out = &*va * &*vb;
        self.push_op(out, move |g| vec![(a, g * &*vb), (b, g * &*va)])
    }

    /// Element-wise quotient of two same-shape tensors.
    pub fn div(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.dim(), vb.dim(), "div expects matching shapes");
        let out = &*va / &*vb;
        let vy = Rc::new(out.clone());
        self.push_op(out, move |g| {
            let da = g / &*vb;
            let db = -(&(g * &*vy) / &*vb);
            vec![(a, da), (b, db)]
        })
    }

    /// `scale * x + shift`, applied element-wise.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        let vx = self.value(x);
        let (a, b) = (T::from_f64(scale), T::from_f64(shift));
        let out = vx.mapv(|v| a * v + b);
        self.push_op(out, move |g| vec![(x, g * a)])
    }

    /// Multiply `x` by `s`, where every dimension of `s` is either equal to
    /// the matching dimension of `x` or 1 (broadcast). Used to apply channel
    /// weights `(B,C,1,1)` and spatial maps `(B,1,H,W)`.
    pub fn mul_broadcast(&self, x: Var, scale: Var) -> Var {
        let vx = self.value(x);
        let vs = self.value(scale);
        let xd = vx.raw_dim();
        let sd = vs.dim();
        for (i, (&xs, ss)) in vx.shape().iter().zip(vs.shape()).enumerate() {
            assert!(*ss == xs || *ss == 1, "broadcast mismatch on axis {i}: {ss} vs {xs}");
        }
        let out = &*vx * &vs.broadcast(xd).unwrap();
        self.push_op(out, move |g| {
            let dx = g * &vs.broadcast(g.raw_dim()).unwrap();
            let ds = reduce_to(&(g * &*vx), sd);
            vec![(x, dx), (scale, ds)]
        })
    }

    /// Rectified linear unit.
    pub fn relu(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.mapv(|v| if v > T::zero() { v } else { T::zero() });
        let vy = Rc::new(out.clone());
        self.push_op(out, move |g| {
            let dx = ndarray::Zip::from(g)
                .and(&*vy)
                .map_collect(|&g, &y| if y > T::zero() { g } else { T::zero() });
            vec![(x, dx)]
        })
    }

    /// Logistic sigmoid, computed in the numerically stable split form.
    pub fn sigmoid(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.mapv(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        let vy = Rc::new(out.clone());
        self.push_op(out, move |g| {
            let dx = ndarray::Zip::from(g)
                .and(&*vy)
                .map_collect(|&g, &y| g * y * (T::one() - y));
            vec![(x, dx)]
        })
    }

    /// Dense convolution; `w` is `(c_out, c_in, kh, kw)`, optional bias is
    /// `(1, c_out, 1, 1)`.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let vx = self.value(x);
        let vw = self.value(w);
        let mut out = conv::conv2d_forward(&vx, &vw, stride, pad)?;
        if let Some(bv) = bias {
            let vb = self.value(bv);
            out += &vb.broadcast(out.raw_dim()).unwrap();
        }
        let xd = vx.dim();
        let wd = vw.dim();
        Ok(self.push_op(out, move |g| {
            let mut grads = vec![
                (x, conv::conv2d_backward_input(&vw, g, stride, pad, xd)),
                (w, conv::conv2d_backward_weights(&vx, g, stride, pad, wd)),
            ];
            if let Some(bv) = bias {
                grads.push((bv, reduce_to(g, (1, wd.0, 1, 1))));
            }
            grads
        }))
    }

    /// Depthwise convolution; `w` is `(c_in, multiplier, kh, kw)` and output
    /// channel `c*multiplier + m` sees input channel `c` only.
    pub fn depthwise_conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let vx = self.value(x);
        let vw = self.value(w);
        let out = conv::depthwise_forward(&vx, &vw, stride, pad)?;
        let xd = vx.dim();
        let wd = vw.dim();
        Ok(self.push_op(out, move |g| {
            vec![
                (x, conv::depthwise_backward_input(&vw, g, stride, pad, xd)),
                (w, conv::depthwise_backward_weights(&vx, g, stride, pad, wd)),
            ]
        }))
    }

    /// Batch normalization over `(B,H,W)` per channel using batch statistics.
    /// Returns the normalized tensor plus the batch mean and biased batch
    /// variance per channel so the caller can update running statistics.
    pub fn batch_norm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Vec<T>, Vec<T>) {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let (b, c, h, w) = vx.dim();
        let n = b * h * w;
        let n_t = T::from_usize(n);
        let xs = vx.as_slice().expect("bn input layout");
        let hw = h * w;

        let mut mean = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let row = &xs[(bi * c + ci) * hw..][..hw];
                mean[ci] += row.iter().copied().sum::<T>();
            }
        }
        for m in &mut mean {
            *m /= n_t;
        }
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let mu = mean[ci];
                let row = &xs[(bi * c + ci) * hw..][..hw];
                var[ci] += row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
        }
        for v in &mut var {
            *v /= n_t;
        }
        let eps_t = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();

        let mut xhat = Array4::<T>::zeros((b, c, h, w));
        let mut out = Array4::<T>::zeros((b, c, h, w));
        {
            let xh = xhat.as_slice_mut().unwrap();
            let os = out.as_slice_mut().unwrap();
            let gs = vg.as_slice().unwrap();
            let bs = vb.as_slice().unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    let (mu, is, ga, be) = (mean[ci], inv_std[ci], gs[ci], bs[ci]);
                    let base = (bi * c + ci) * hw;
                    for k in 0..hw {
                        let xn = (xs[base + k] - mu) * is;
                        xh[base + k] = xn;
                        os[base + k] = ga * xn + be;
                    }
                }
            }
        }

        let xhat = Rc::new(xhat);
        let inv_std_c = inv_std.clone();
        let var_out = var;
        let mean_out = mean;
        let y = self.push_op(out, move |g| {
            // Standard batch-norm backward through the batch statistics:
            //   dx = gamma*inv_std/N * (N*g - sum(g) - xhat*sum(g*xhat))
            let (b, c, h, w) = g.dim();
            let hw = h * w;
            let n_t = T::from_usize(b * hw);
            let gs = g.as_slice().unwrap();
            let xh = xhat.as_slice().unwrap();
            let mut dbeta = vec![T::zero(); c];
            let mut dgamma = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    for k in 0..hw {
                        dbeta[ci] += gs[base + k];
                        dgamma[ci] += gs[base + k] * xh[base + k];
                    }
                }
            }
            let gw = vg.as_slice().unwrap();
            let mut dx = Array4::<T>::zeros((b, c, h, w));
            {
                let dxs = dx.as_slice_mut().unwrap();
                for bi in 0..b {
                    for ci in 0..c {
                        let coef = gw[ci] * inv_std_c[ci] / n_t;
                        let (sg, sgx) = (dbeta[ci], dgamma[ci]);
                        let base = (bi * c + ci) * hw;
                        for k in 0..hw {
                            dxs[base + k] =
                                coef * (n_t * gs[base + k] - sg - xh[base + k] * sgx);
                        }
                    }
                }
            }
            let dgamma = Array4::from_shape_vec((1, c, 1, 1), dgamma).unwrap();
            let dbeta = Array4::from_shape_vec((1, c, 1, 1), dbeta).unwrap();
            vec![(x, dx), (gamma, dgamma), (beta, dbeta)]
        });
        (y, mean_out, var_out)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        r_mean: &Array4<T>,
        r_var: &Array4<T>,
        eps: f64,
    ) -> Var {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let (b, c, h, w) = vx.dim();
        let hw = h * w;
        let eps_t = T::from_f64(eps);
        let rm = r_mean.as_slice().unwrap();
        let inv_std: Vec<T> =
            r_var.as_slice().unwrap().iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let xs = vx.as_slice().unwrap();
        let gs = vg.as_slice().unwrap();
        let bs = vb.as_slice().unwrap();

        let mut out = Array4::<T>::zeros((b, c, h, w));
        {
            let os = out.as_slice_mut().unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    let (aa, bb) = (gs[ci] * inv_std[ci], bs[ci] - gs[ci] * inv_std[ci] * rm[ci]);
                    let base = (bi * c + ci) * hw;
                    for k in 0..hw {
                        os[base + k] = aa * xs[base + k] + bb;
                    }
                }
            }
        }
        if !self.grad_enabled() {
            return self.leaf(out);
        }

        let mut xhat = Array4::<T>::zeros((b, c, h, w));
        {
            let xh = xhat.as_slice_mut().unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    let (mu, is) = (rm[ci], inv_std[ci]);
                    let base = (bi * c + ci) * hw;
                    for k in 0..hw {
                        xh[base + k] = (xs[base + k] - mu) * is;
                    }
                }
            }
        }
        let xhat = Rc::new(xhat);
        self.push_op(out, move |g| {
            let (b, c, h, w) = g.dim();
            let hw = h * w;
            let gs = g.as_slice().unwrap();
            let xh = xhat.as_slice().unwrap();
            let gw = vg.as_slice().unwrap();
            let mut dbeta = vec![T::zero(); c];
            let mut dgamma = vec![T::zero(); c];
            let mut dx = Array4::<T>::zeros((b, c, h, w));
            {
                let dxs = dx.as_slice_mut().unwrap();
                for bi in 0..b {
                    for ci in 0..c {
                        let coef = gw[ci] * inv_std[ci];
                        let base = (bi * c + ci) * hw;
                        for k in 0..hw {
                            dbeta[ci] += gs[base + k];
                            dgamma[ci] += gs[base + k] * xh[base + k];
                            dxs[base + k] = coef * gs[base + k];
                        }
                    }
                }
            }
            let dgamma = Array4::from_shape_vec((1, c, 1, 1), dgamma).unwrap();
            let dbeta = Array4::from_shape_vec((1, c, 1, 1), dbeta).unwrap();
            vec![(x, dx), (gamma, dgamma), (beta, dbeta)]
        })
    }

    /// 2x2 max pooling with stride 2.
    pub fn maxpool2(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let xd = vx.dim();
        let (out, idx) = conv::maxpool2_forward(&vx)?;
        Ok(self.push_op(out, move |g| vec![(x, conv::maxpool2_backward(g, &idx, xd))]))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = conv::upsample2_forward(&vx);
        self.push_op(out, move |g| vec![(x, conv::upsample2_backward(g))])
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let values: Vec<Rc<Array4<T>>> = parts.iter().map(|&p| self.value(p)).collect();
        let (b, _, h, w) = values[0].dim();
        let mut offsets = Vec::with_capacity(values.len() + 1);
        offsets.push(0usize);
        for v in &values {
            let (vb, vc, vh, vw) = v.dim();
            assert_eq!((vb, vh, vw), (b, h, w), "concat expects matching B,H,W");
            offsets.push(offsets.last().unwrap() + vc);
        }
        let c_total = *offsets.last().unwrap();
        let mut out = Array4::<T>::zeros((b, c_total, h, w));
        for (v, win) in values.iter().zip(offsets.windows(2)) {
            out.slice_mut(s![.., win[0]..win[1], .., ..]).assign(v);
        }
        let parts: Vec<Var> = parts.to_vec();
        self.push_op(out, move |g| {
            parts
                .iter()
                .zip(offsets.windows(2))
                .map(|(&p, win)| (p, g.slice(s![.., win[0]..win[1], .., ..]).to_owned()))
                .collect()
        })
    }

    /// Channels `lo..hi` of `x`.
    pub fn slice_channels(&self, x: Var, lo: usize, hi: usize) -> Var {
        let vx = self.value(x);
        let xd = vx.dim();
        assert!(lo < hi && hi <= xd.1, "channel slice {lo}..{hi} out of range for {}", xd.1);
        let out = vx.slice(s![.., lo..hi, .., ..]).to_owned();
        self.push_op(out, move |g| {
            let mut dx = Array4::<T>::zeros(xd);
            dx.slice_mut(s![.., lo..hi, .., ..]).assign(g);
            vec![(x, dx)]
        })
    }

    /// Global average pooling to `(B,C,1,1)`.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (b, c, h, w) = vx.dim();
        let inv = T::one() / T::from_usize(h * w);
        let out = (vx.sum_axis(Axis(3)).sum_axis(Axis(2)) * inv)
            .into_shape_with_order((b, c, 1, 1))
            .unwrap();
        self.push_op(out, move |g| {
            let dx = g.broadcast((b, c, h, w)).unwrap().to_owned() * inv;
            vec![(x, dx)]
        })
    }

    /// Mean over the channel axis to `(B,1,H,W)`.
    pub fn channel_mean(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (b, c, h, w) = vx.dim();
        let inv = T::one() / T::from_usize(c);
        let out = (vx.sum_axis(Axis(1)) * inv).insert_axis(Axis(1));
        self.push_op(out, move |g| {
            let dx = g.broadcast((b, c, h, w)).unwrap().to_owned() * inv;
            vec![(x, dx)]
        })
    }

    /// Maximum over the channel axis to `(B,1,H,W)`; the first maximal
    /// channel receives the gradient on ties.
    pub fn channel_max(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (b, c, h, w) = vx.dim();
        let hw = h * w;
        let xs = vx.as_slice().unwrap();
        let mut out = Array4::<T>::zeros((b, 1, h, w));
        let mut arg = vec![0u32; b * hw];
        {
            let os = out.as_slice_mut().unwrap();
            for bi in 0..b {
                for k in 0..hw {
                    let mut best_c = 0usize;
                    let mut best = xs[bi * c * hw + k];
                    for ci in 1..c {
                        let v = xs[(bi * c + ci) * hw + k];
                        if v > best {
                            best = v;
                            best_c = ci;
                        }
                    }
                    os[bi * hw + k] = best;
                    arg[bi * hw + k] = best_c as u32;
                }
            }
        }
        self.push_op(out, move |g| {
            let gs = g.as_slice().unwrap();
            let mut dx = Array4::<T>::zeros((b, c, h, w));
            {
                let dxs = dx.as_slice_mut().unwrap();
                for bi in 0..b {
                    for k in 0..hw {
                        let ci = arg[bi * hw + k] as usize;
                        dxs[(bi * c + ci) * hw + k] += gs[bi * hw + k];
                    }
                }
            }
            vec![(x, dx)]
        })
    }

    /// Softmax over the channel axis, independently per `(b,h,w)` position.
    pub fn softmax_channels(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (b, c, h, w) = vx.dim();
        let hw = h * w;
        let mut out = (*vx).clone();
        {
            let ys = out.as_slice_mut().unwrap();
            for bi in 0..b {
                for k in 0..hw {
                    let mut m = T::neg_infinity();
                    for ci in 0..c {
                        m = m.max(ys[(bi * c + ci) * hw + k]);
                    }
                    let mut sum = T::zero();
                    for ci in 0..c {
                        let e = (ys[(bi * c + ci) * hw + k] - m).exp();
                        ys[(bi * c + ci) * hw + k] = e;
                        sum += e;
                    }
                    let inv = T::one() / sum;
                    for ci in 0..c {
                        ys[(bi * c + ci) * hw + k] *= inv;
                    }
                }
            }
        }
        let vy = Rc::new(out.clone());
        self.push_op(out, move |g| {
            let gs = g.as_slice().unwrap();
            let ys = vy.as_slice().unwrap();
            let mut dx = Array4::<T>::zeros((b, c, h, w));
            {
                let dxs = dx.as_slice_mut().unwrap();
                for bi in 0..b {
                    for k in 0..hw {
                        let mut dot = T::zero();
                        for ci in 0..c {
                            let i = (bi * c + ci) * hw + k;
                            dot += gs[i] * ys[i];
                        }
                        for ci in 0..c {
                            let i = (bi * c + ci) * hw + k;
                            dxs[i] = ys[i] * (gs[i] - dot);
                        }
                    }
                }
            }
            vec![(x, dx)]
        })
    }

    /// Sum over batch and spatial axes to `(1,C,1,1)`.
    pub fn sum_bhw(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (b, c, h, w) = vx.dim();
        let out = reduce_to(&vx, (1, c, 1, 1));
        self.push_op(out, move |g| {
            let dx = g.broadcast((b, c, h, w)).unwrap().to_owned();
            vec![(x, dx)]
        })
    }

    /// Mean of all elements, as a `(1,1,1,1)` scalar.
    pub fn mean_all(&self, x: Var) -> Var {
        let vx = self.value(x);
        let xd = vx.dim();
        let inv = T::one() / T::from_usize(vx.len());
        let out = Array4::from_elem((1, 1, 1, 1), vx.iter().copied().sum::<T>() * inv);
        self.push_op(out, move |g| {
            let dx = Array4::from_elem(xd, g[[0, 0, 0, 0]] * inv);
            vec![(x, dx)]
        })
    }

    /// Combine `K` branch tensors with per-branch scalar weights
    /// `(B,K,1,1)`: the weighted branches are summed (`concat == false`,
    /// requires equal channel counts) or concatenated along channels.
    pub fn depth_combine(&self, weights: Var, branches: &[Var], concat: bool) -> Var {
        let vw = self.value(weights);
        let (wb, k, _, _) = vw.dim();
        assert_eq!(k, branches.len(), "one weight per branch");
        let values: Vec<Rc<Array4<T>>> = branches.iter().map(|&v| self.value(v)).collect();
        let (b, c0, h, w) = values[0].dim();
        assert_eq!(wb, b, "weight batch mismatch");
        let hw = h * w;
        let ws = vw.as_slice().unwrap();

        let mut offsets = vec![0usize];
        for v in &values {
            let (vb, vc, vh, vw_) = v.dim();
            assert_eq!((vb, vh, vw_), (b, h, w), "branch shape mismatch");
            if !concat {
                assert_eq!(vc, c0, "summed branches need equal channels");
            }
            offsets.push(offsets.last().unwrap() + vc);
        }
        let c_out = if concat { *offsets.last().unwrap() } else { c0 };
        let mut out = Array4::<T>::zeros((b, c_out, h, w));
        {
            let os = out.as_slice_mut().unwrap();
            for (ki, v) in values.iter().enumerate() {
                let vc = v.dim().1;
                let vs = v.as_slice().unwrap();
                for bi in 0..b {
                    let wv = ws[bi * k + ki];
                    let dst_c0 = if concat { offsets[ki] } else { 0 };
                    for ci in 0..vc {
                        let dst = &mut os[(bi * c_out + dst_c0 + ci) * hw..][..hw];
                        let src = &vs[(bi * vc + ci) * hw..][..hw];
                        for i in 0..hw {
                            dst[i] += wv * src[i];
                        }
                    }
                }
            }
        }

        let branches: Vec<Var> = branches.to_vec();
        self.push_op(out, move |g| {
            let ws = vw.as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let gc = g.dim().1;
            let mut dw = Array4::<T>::zeros((b, k, 1, 1));
            let mut grads: Vec<(Var, Array4<T>)> = Vec::with_capacity(k + 1);
            for (ki, (&bv, v)) in branches.iter().zip(&values).enumerate() {
                let vc = v.dim().1;
                let vs = v.as_slice().unwrap();
                let mut dxk = Array4::<T>::zeros((b, vc, h, w));
                let dxs = dxk.as_slice_mut().unwrap();
                let src_c0 = if concat { offsets[ki] } else { 0 };
                for bi in 0..b {
                    let wv = ws[bi * k + ki];
                    let mut dot = T::zero();
                    for ci in 0..vc {
                        let g_row = &gs[(bi * gc + src_c0 + ci) * hw..][..hw];
                        let x_row = &vs[(bi * vc + ci) * hw..][..hw];
                        let d_row = &mut dxs[(bi * vc + ci) * hw..][..hw];
                        for i in 0..hw {
                            d_row[i] = wv * g_row[i];
                            dot += g_row[i] * x_row[i];
                        }
                    }
                    dw[[bi, ki, 0, 0]] += dot;
                }
                grads.push((bv, dxk));
            }
            grads.push((weights, dw));
            grads
        })
    }

    /// Mean cross-entropy between logits `(B,K,H,W)` and a one-hot target of
    /// the same shape, computed per pixel via log-sum-exp.
    pub fn cross_entropy_mean(&self, logits: Var, target: Var) -> Var {
        let vx = self.value(logits);
        let vt = self.value(target);
        assert_eq!(vx.dim(), vt.dim(), "one-hot target must match logits");
        let (b, c, h, w) = vx.dim();
        let hw = h * w;
        let n = b * hw;
        let inv_n = T::one() / T::from_usize(n);
        let xs = vx.as_slice().unwrap();
        let ts = vt.as_slice().unwrap();

        let mut total = T::zero();
        for bi in 0..b {
            for kpos in 0..hw {
                let mut m = T::neg_infinity();
                for ci in 0..c {
                    m = m.max(xs[(bi * c + ci) * hw + kpos]);
                }
                let mut sum = T::zero();
                let mut picked = T::zero();
                for ci in 0..c {
                    let i = (bi * c + ci) * hw + kpos;
                    sum += (xs[i] - m).exp();
                    picked += ts[i] * xs[i];
                }
                total += m + sum.ln() - picked;
            }
        }
        let out = Array4::from_elem((1, 1, 1, 1), total * inv_n);
        self.push_op(out, move |g| {
            let coef = g[[0, 0, 0, 0]] * inv_n;
            let xs = vx.as_slice().unwrap();
            let ts = vt.as_slice().unwrap();
            let mut dx = Array4::<T>::zeros((b, c, h, w));
            {
                let dxs = dx.as_slice_mut().unwrap();
                for bi in 0..b {
                    for kpos in 0..hw {
                        let mut m = T::neg_infinity();
                        for ci in 0..c {
                            m = m.max(xs[(bi * c + ci) * hw + kpos]);
                        }
                        let mut sum = T::zero();
                        for ci in 0..c {
                            sum += (xs[(bi * c + ci) * hw + kpos] - m).exp();
                        }
                        let inv_sum = T::one() / sum;
                        for ci in 0..c {
                            let i = (bi * c + ci) * hw + kpos;
                            let p = (xs[i] - m).exp() * inv_sum;
                            dxs[i] = (p - ts[i]) * coef;
                        }
                    }
                }
            }
            vec![(logits, dx)]
        })
    }
}

/// Sum `g` down to `dim`, where each target axis is either the full axis
/// length or 1. Inverse of broadcasting.
fn reduce_to<T: Real>(g: &Array4<T>, dim: (usize, usize, usize, usize)) -> Array4<T> {
    let (b, c, h, w) = g.dim();
    let (ob, oc, oh, ow) = dim;
    let mut out = Array4::<T>::zeros(dim);
    let gs = g.as_slice().expect("gradient layout");
    let os = out.as_slice_mut().unwrap();
    let mut i = 0usize;
    for bi in 0..b {
        let b2 = if ob == 1 { 0 } else { bi };
        for ci in 0..c {
            let c2 = if oc == 1 { 0 } else { ci };
            for hi in 0..h {
                let h2 = if oh == 1 { 0 } else { hi };
                let row = ((b2 * oc + c2) * oh + h2) * ow;
                if ow == 1 {
                    let mut acc = T::zero();
                    for _ in 0..w {
                        acc += gs[i];
                        i += 1;
                    }
                    os[row] += acc;
                } else {
                    for wi in 0..w {
                        os[row + wi] += gs[i];
                        i += 1;
                    }
                }
            }
        }
    }
    out
}
