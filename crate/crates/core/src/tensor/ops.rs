//! Differentiable operations. Each op validates shapes, computes its value
//! through [`super::kernels`], and registers a closure that scatters the
//! incoming gradient onto its operands. Operand traversal, loop nests, and
//! reductions are all fixed-order.

use std::sync::Arc;

use super::array::Array;
use super::graph::{add_assign, checked_mode, Tensor};
use super::kernels::{self, ConvSpec};
use super::scalar::Scalar;
use super::TensorError;

pub use super::kernels::PadMode;

type Result<T> = std::result::Result<T, TensorError>;

fn finite_guard<E: Scalar>(op: &'static str, value: &Array<E>) -> Result<()> {
    if checked_mode() && !value.all_finite() {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

fn same_shape<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<E: Scalar> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, other)?;
        let data = self
            .value()
            .data()
            .iter()
            .zip(other.value().data())
            .map(|(&a, &b)| a + b)
            .collect();
        let value = Array::from_vec(self.shape(), data);
        finite_guard("add", &value)?;
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            value,
            vec![self.clone(), other.clone()],
            move |g| {
                if let Some(mut ga) = pa.grad_buf() {
                    add_assign(&mut ga, g);
                }
                if let Some(mut gb) = pb.grad_buf() {
                    add_assign(&mut gb, g);
                }
            },
        ))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, other)?;
        let data = self
            .value()
            .data()
            .iter()
            .zip(other.value().data())
            .map(|(&a, &b)| a - b)
            .collect();
        let value = Array::from_vec(self.shape(), data);
        finite_guard("sub", &value)?;
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            value,
            vec![self.clone(), other.clone()],
            move |g| {
                if let Some(mut ga) = pa.grad_buf() {
                    add_assign(&mut ga, g);
                }
                if let Some(mut gb) = pb.grad_buf() {
                    for (d, s) in gb.iter_mut().zip(g.iter()) {
                        *d = *d - *s;
                    }
                }
            },
        ))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, other)?;
        let data = self
            .value()
            .data()
            .iter()
            .zip(other.value().data())
            .map(|(&a, &b)| a * b)
            .collect();
        let value = Array::from_vec(self.shape(), data);
        finite_guard("mul", &value)?;
        let (pa, pb) = (self.clone(), other.clone());
        let (va, vb) = (self.value().share(), other.value().share());
        Ok(Tensor::from_op(
            value,
            vec![self.clone(), other.clone()],
            move |g| {
                if let Some(mut ga) = pa.grad_buf() {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * vb[i];
                    }
                }
                if let Some(mut gb) = pb.grad_buf() {
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * va[i];
                    }
                }
            },
        ))
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        let value = self.value().map(|v| v * c);
        let pa = self.clone();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            if let Some(mut ga) = pa.grad_buf() {
                for (d, s) in ga.iter_mut().zip(g.iter()) {
                    *d = *d + *s * c;
                }
            }
        })
    }

    pub fn sum(&self) -> Tensor<E> {
        let total = self.value().data().iter().copied().sum::<E>();
        let pa = self.clone();
        Tensor::from_op(Array::scalar(total), vec![self.clone()], move |g| {
            if let Some(mut ga) = pa.grad_buf() {
                for d in ga.iter_mut() {
                    *d = *d + g[0];
                }
            }
        })
    }

    pub fn mean(&self) -> Tensor<E> {
        let n = E::from_f64(self.numel() as f64);
        let total = self.value().data().iter().copied().sum::<E>() / n;
        let pa = self.clone();
        Tensor::from_op(Array::scalar(total), vec![self.clone()], move |g| {
            if let Some(mut ga) = pa.grad_buf() {
                let s = g[0] / n;
                for d in ga.iter_mut() {
                    *d = *d + s;
                }
            }
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::BadOperand {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.shape(), shape),
            });
        }
        let value = self.value().reshaped(shape);
        let pa = self.clone();
        Ok(Tensor::from_op(value, vec![self.clone()], move |g| {
            if let Some(mut ga) = pa.grad_buf() {
                add_assign(&mut ga, g);
            }
        }))
    }

    pub fn relu(&self) -> Tensor<E> {
        self.leaky_relu(E::zero())
    }

    pub fn leaky_relu(&self, slope: E) -> Tensor<E> {
        let value = self
            .value()
            .map(|v| if v > E::zero() { v } else { v * slope });
        let pa = self.clone();
        let vx = self.value().share();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            if let Some(mut ga) = pa.grad_buf() {
                for i in 0..g.len() {
                    let f = if vx[i] > E::zero() { E::one() } else { slope };
                    ga[i] = ga[i] + g[i] * f;
                }
            }
        })
    }

    /// Numerically safe logistic; finite for the whole double range.
    pub fn sigmoid(&self) -> Tensor<E> {
        let value = self.value().map(sigmoid_scalar);
        let pa = self.clone();
        let vy = value.share();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            if let Some(mut ga) = pa.grad_buf() {
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * vy[i] * (E::one() - vy[i]);
                }
            }
        })
    }

    /// Softmax over the last axis, max-shifted for stability.
    pub fn softmax_lastdim(&self) -> Result<Tensor<E>> {
        let shape = self.shape().to_vec();
        let inner = *shape.last().ok_or(TensorError::BadOperand {
            op: "softmax",
            msg: "rank 0 input".into(),
        })?;
        let x = self.value().data();
        let mut data = vec![E::zero(); x.len()];
        for row in 0..x.len() / inner {
            let xs = &x[row * inner..(row + 1) * inner];
            let ds = &mut data[row * inner..(row + 1) * inner];
            softmax_row(xs, ds);
        }
        let value = Array::from_vec(&shape, data);
        finite_guard("softmax", &value)?;
        let pa = self.clone();
        let vy = value.share();
        Ok(Tensor::from_op(value, vec![self.clone()], move |g| {
            if let Some(mut ga) = pa.grad_buf() {
                for row in 0..g.len() / inner {
                    let ys = &vy[row * inner..(row + 1) * inner];
                    let gs = &g[row * inner..(row + 1) * inner];
                    let mut dot = E::zero();
                    for i in 0..inner {
                        dot = dot + gs[i] * ys[i];
                    }
                    let gd = &mut ga[row * inner..(row + 1) * inner];
                    for i in 0..inner {
                        gd[i] = gd[i] + ys[i] * (gs[i] - dot);
                    }
                }
            }
        }))
    }

    /// `x (N,K) . w^T (K,M) + b`, the dense head layer.
    pub fn linear(&self, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let (xs, ws, bs) = (self.shape(), w.shape(), b.shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(TensorError::BadOperand {
                op: "linear",
                msg: format!("x {:?}, w {:?}, b {:?}", xs, ws, bs),
            });
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let mut out = vec![E::zero(); n * m];
        E::gemm(
            n,
            k,
            m,
            E::one(),
            self.value().data(),
            k as isize,
            1,
            w.value().data(),
            1,
            k as isize,
            E::zero(),
            &mut out,
            m as isize,
            1,
        );
        for row in out.chunks_mut(m) {
            for (v, &bv) in row.iter_mut().zip(b.value().data()) {
                *v = *v + bv;
            }
        }
        let value = Array::from_vec(&[n, m], out);
        finite_guard("linear", &value)?;
        let (px, pw, pb) = (self.clone(), w.clone(), b.clone());
        let (vx, vw) = (self.value().share(), w.value().share());
        Ok(Tensor::from_op(
            value,
            vec![self.clone(), w.clone(), b.clone()],
            move |g| {
                if let Some(mut gx) = px.grad_buf() {
                    E::gemm(
                        n,
                        m,
                        k,
                        E::one(),
                        g,
                        m as isize,
                        1,
                        &vw,
                        k as isize,
                        1,
                        E::one(),
                        &mut gx,
                        k as isize,
                        1,
                    );
                }
                if let Some(mut gw) = pw.grad_buf() {
                    E::gemm(
                        m,
                        n,
                        k,
                        E::one(),
                        g,
                        1,
                        m as isize,
                        &vx,
                        k as isize,
                        1,
                        E::one(),
                        &mut gw,
                        k as isize,
                        1,
                    );
                }
                if let Some(mut gb) = pb.grad_buf() {
                    for row in g.chunks(m) {
                        for i in 0..m {
                            gb[i] = gb[i] + row[i];
                        }
                    }
                }
            },
        ))
    }

    /// 1-D convolution, `x (N,C,T)`, `w (O,C,K)`, stride 1.
    pub fn conv1d(&self, w: &Tensor<E>, b: &Tensor<E>, pad: usize, mode: PadMode) -> Result<Tensor<E>> {
        let (xs, ws) = (self.shape().to_vec(), w.shape().to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(TensorError::BadOperand {
                op: "conv1d",
                msg: format!("x {:?}, w {:?}", xs, ws),
            });
        }
        let spec = ConvSpec {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            in_dims: [1, 1, xs[2]],
            k_dims: [1, 1, ws[2]],
            pads: [0, 0, pad],
            mode,
        };
        let out_shape = vec![xs[0], ws[0], spec.out_dims()[2]];
        self.conv_common(w, b, spec, out_shape, "conv1d")
    }

    /// 2-D convolution, `x (N,C,H,W)`, `w (O,C,KH,KW)`, stride 1, zero pad.
    pub fn conv2d(&self, w: &Tensor<E>, b: &Tensor<E>, pads: (usize, usize)) -> Result<Tensor<E>> {
        let (xs, ws) = (self.shape().to_vec(), w.shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::BadOperand {
                op: "conv2d",
                msg: format!("x {:?}, w {:?}", xs, ws),
            });
        }
        let spec = ConvSpec {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            in_dims: [1, xs[2], xs[3]],
            k_dims: [1, ws[2], ws[3]],
            pads: [0, pads.0, pads.1],
            mode: PadMode::Zero,
        };
        let o = spec.out_dims();
        let out_shape = vec![xs[0], ws[0], o[1], o[2]];
        self.conv_common(w, b, spec, out_shape, "conv2d")
    }

    /// 3-D convolution, `x (N,C,T,H,W)`, `w (O,C,KT,KH,KW)`, stride 1, zero pad.
    pub fn conv3d(
        &self,
        w: &Tensor<E>,
        b: &Tensor<E>,
        pads: (usize, usize, usize),
    ) -> Result<Tensor<E>> {
        let (xs, ws) = (self.shape().to_vec(), w.shape().to_vec());
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] {
            return Err(TensorError::BadOperand {
                op: "conv3d",
                msg: format!("x {:?}, w {:?}", xs, ws),
            });
        }
        let spec = ConvSpec {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            in_dims: [xs[2], xs[3], xs[4]],
            k_dims: [ws[2], ws[3], ws[4]],
            pads: [pads.0, pads.1, pads.2],
            mode: PadMode::Zero,
        };
        let o = spec.out_dims();
        let out_shape = vec![xs[0], ws[0], o[0], o[1], o[2]];
        self.conv_common(w, b, spec, out_shape, "conv3d")
    }

    fn conv_common(
        &self,
        w: &Tensor<E>,
        b: &Tensor<E>,
        spec: ConvSpec,
        out_shape: Vec<usize>,
        op: &'static str,
    ) -> Result<Tensor<E>> {
        if b.shape() != [spec.c_out] {
            return Err(TensorError::BadOperand {
                op,
                msg: format!("bias {:?} for {} output channels", b.shape(), spec.c_out),
            });
        }
        for i in 0..3 {
            if spec.in_dims[i] + 2 * spec.pads[i] < spec.k_dims[i] {
                return Err(TensorError::BadOperand {
                    op,
                    msg: format!(
                        "kernel {:?} exceeds padded input {:?}",
                        spec.k_dims, spec.in_dims
                    ),
                });
            }
        }
        let out = kernels::conv_forward(&spec, self.value().data(), w.value().data(), b.value().data());
        let value = Array::from_vec(&out_shape, out);
        finite_guard(op, &value)?;
        let (px, pw, pb) = (self.clone(), w.clone(), b.clone());
        let (vx, vw) = (self.value().share(), w.value().share());
        Ok(Tensor::from_op(
            value,
            vec![self.clone(), w.clone(), b.clone()],
            move |g| {
                if let Some(mut gx) = px.grad_buf() {
                    kernels::conv_backward_input(&spec, &vw, g, &mut gx);
                }
                let needs_w = pw.requires_grad();
                let needs_b = pb.requires_grad();
                if needs_w || needs_b {
                    // params kernel fills both; route only what is wanted
                    let mut dw = vec![E::zero(); vw.len()];
                    let mut db = vec![E::zero(); spec.c_out];
                    kernels::conv_backward_params(&spec, &vx, g, &mut dw, &mut db);
                    if needs_w {
                        if let Some(mut gw) = pw.grad_buf() {
                            add_assign(&mut gw, &dw);
                        }
                    }
                    if needs_b {
                        if let Some(mut gb) = pb.grad_buf() {
                            add_assign(&mut gb, &db);
                        }
                    }
                }
            },
        ))
    }

    /// Max pooling over (H,W) of `x (N,C,H,W)`, stride = kernel.
    pub fn max_pool2d(&self, kh: usize, kw: usize) -> Result<Tensor<E>> {
        let xs = self.shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::BadOperand {
                op: "max_pool2d",
                msg: format!("want rank 4, got {:?}", xs),
            });
        }
        self.pool_common([1, xs[2], xs[3]], [1, kh, kw], vec![xs[0], xs[1], xs[2] / kh, xs[3] / kw])
    }

    /// Max pooling over (T,H,W) of `x (N,C,T,H,W)`, stride = kernel.
    pub fn max_pool3d(&self, kt: usize, kh: usize, kw: usize) -> Result<Tensor<E>> {
        let xs = self.shape().to_vec();
        if xs.len() != 5 {
            return Err(TensorError::BadOperand {
                op: "max_pool3d",
                msg: format!("want rank 5, got {:?}", xs),
            });
        }
        self.pool_common(
            [xs[2], xs[3], xs[4]],
            [kt, kh, kw],
            vec![xs[0], xs[1], xs[2] / kt, xs[3] / kh, xs[4] / kw],
        )
    }

    fn pool_common(&self, dims: [usize; 3], k: [usize; 3], out_shape: Vec<usize>) -> Result<Tensor<E>> {
        if k.iter().zip(dims.iter()).any(|(kk, dd)| *kk == 0 || kk > dd) {
            return Err(TensorError::BadOperand {
                op: "max_pool",
                msg: format!("kernel {:?} on dims {:?}", k, dims),
            });
        }
        let planes = self.numel() / (dims[0] * dims[1] * dims[2]);
        let (out, arg) = kernels::maxpool_forward(self.value().data(), planes, dims, k);
        let value = Array::from_vec(&out_shape, out);
        let pa = self.clone();
        let arg = Arc::new(arg);
        Ok(Tensor::from_op(value, vec![self.clone()], move |g| {
            if let Some(mut ga) = pa.grad_buf() {
                kernels::maxpool_backward(&arg, g, &mut ga);
            }
        }))
    }

    /// Max over one axis; ties send the whole gradient to the first maximum.
    pub fn reduce_max_axis(&self, axis: usize) -> Result<Tensor<E>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadOperand {
                op: "reduce_max_axis",
                msg: format!("axis {} of {:?}", axis, shape),
            });
        }
        let (out, arg) = kernels::reduce_max_axis_forward(self.value().data(), &shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Array::from_vec(&out_shape, out);
        let pa = self.clone();
        let arg = Arc::new(arg);
        Ok(Tensor::from_op(value, vec![self.clone()], move |g| {
            if let Some(mut ga) = pa.grad_buf() {
                for (i, &gi) in g.iter().enumerate() {
                    ga[arg[i]] = ga[arg[i]] + gi;
                }
            }
        }))
    }

    /// Per-frame gating: `x (N,C,T,H,W) * r (N,1,T)` broadcast over C,H,W.
    pub fn gate_temporal(&self, r: &Tensor<E>) -> Result<Tensor<E>> {
        let xs = self.shape().to_vec();
        let rs = r.shape().to_vec();
        if xs.len() != 5 || rs.len() != 3 || rs[1] != 1 || rs[0] != xs[0] || rs[2] != xs[2] {
            return Err(TensorError::ShapeMismatch { lhs: xs, rhs: rs });
        }
        let (n, c, t) = (xs[0], xs[1], xs[2]);
        let hw = xs[3] * xs[4];
        let xv = self.value().data();
        let rv = r.value().data();
        let mut out = vec![E::zero(); xv.len()];
        for bi in 0..n {
            for ci in 0..c {
                for ti in 0..t {
                    let base = ((bi * c + ci) * t + ti) * hw;
                    let rr = rv[bi * t + ti];
                    for i in base..base + hw {
                        out[i] = xv[i] * rr;
                    }
                }
            }
        }
        let value = Array::from_vec(&xs, out);
        finite_guard("gate_temporal", &value)?;
        let (px, pr) = (self.clone(), r.clone());
        let (vx, vr) = (self.value().share(), r.value().share());
        Ok(Tensor::from_op(
            value,
            vec![self.clone(), r.clone()],
            move |g| {
                if let Some(mut gx) = px.grad_buf() {
                    for bi in 0..n {
                        for ci in 0..c {
                            for ti in 0..t {
                                let base = ((bi * c + ci) * t + ti) * hw;
                                let rr = vr[bi * t + ti];
                                for i in base..base + hw {
                                    gx[i] = gx[i] + g[i] * rr;
                                }
                            }
                        }
                    }
                }
                if let Some(mut gr) = pr.grad_buf() {
                    for bi in 0..n {
                        for ti in 0..t {
                            let mut acc = E::zero();
                            for ci in 0..c {
                                let base = ((bi * c + ci) * t + ti) * hw;
                                for i in base..base + hw {
                                    acc = acc + g[i] * vx[i];
                                }
                            }
                            gr[bi * t + ti] = gr[bi * t + ti] + acc;
                        }
                    }
                }
            },
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse_mean(&self, target: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, target)?;
        let n = E::from_f64(self.numel() as f64);
        let (xa, xb) = (self.value().data(), target.value().data());
        let mut acc = E::zero();
        for i in 0..xa.len() {
            let d = xa[i] - xb[i];
            acc = acc + d * d;
        }
        let value = Array::scalar(acc / n);
        finite_guard("mse_mean", &value)?;
        let (pa, pb) = (self.clone(), target.clone());
        let (va, vb) = (self.value().share(), target.value().share());
        Ok(Tensor::from_op(
            value,
            vec![self.clone(), target.clone()],
            move |g| {
                let two = E::from_f64(2.0);
                let s = g[0] * two / n;
                if let Some(mut ga) = pa.grad_buf() {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + s * (va[i] - vb[i]);
                    }
                }
                if let Some(mut gb) = pb.grad_buf() {
                    for i in 0..gb.len() {
                        gb[i] = gb[i] - s * (va[i] - vb[i]);
                    }
                }
            },
        ))
    }

    /// Mean cosine distance `1 - <u,v>/(|u||v|)` over rows of `(N, ...)`.
    pub fn cosine_dist_mean(&self, target: &Tensor<E>) -> Result<Tensor<E>> {
        same_shape(self, target)?;
        if self.shape().is_empty() {
            return Err(TensorError::BadOperand {
                op: "cosine_dist_mean",
                msg: "rank 0 input".into(),
            });
        }
        let rows = self.shape()[0];
        let inner = self.numel() / rows;
        let eps = E::from_f64(1e-12);
        let (ua, va) = (self.value().data(), target.value().data());
        let mut acc = E::zero();
        for r in 0..rows {
            let u = &ua[r * inner..(r + 1) * inner];
            let v = &va[r * inner..(r + 1) * inner];
            let (dot, nu, nv) = dot_norms(u, v);
            acc = acc + (E::one() - dot / (nu * nv + eps));
        }
        let n = E::from_f64(rows as f64);
        let value = Array::scalar(acc / n);
        finite_guard("cosine_dist_mean", &value)?;
        let (pa, pb) = (self.clone(), target.clone());
        let (sa, sb) = (self.value().share(), target.value().share());
        Ok(Tensor::from_op(
            value,
            vec![self.clone(), target.clone()],
            move |g| {
                let s = g[0] / n;
                let tiny = E::from_f64(1e-20);
                for r in 0..rows {
                    let u = &sa[r * inner..(r + 1) * inner];
                    let v = &sb[r * inner..(r + 1) * inner];
                    let (dot, nu, nv) = dot_norms(u, v);
                    let denom = nu * nv + eps;
                    let (nu, nv) = (nu.max(tiny), nv.max(tiny));
                    if let Some(mut ga) = pa.grad_buf() {
                        let gu = &mut ga[r * inner..(r + 1) * inner];
                        for i in 0..inner {
                            let d = v[i] / denom - dot * nv * u[i] / (nu * denom * denom);
                            gu[i] = gu[i] - s * d;
                        }
                    }
                    if let Some(mut gb) = pb.grad_buf() {
                        let gv = &mut gb[r * inner..(r + 1) * inner];
                        for i in 0..inner {
                            let d = u[i] / denom - dot * nu * v[i] / (nv * denom * denom);
                            gv[i] = gv[i] - s * d;
                        }
                    }
                }
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under softmax of `(N,C)` logits.
    pub fn cross_entropy_mean(&self, labels: &[usize]) -> Result<Tensor<E>> {
        let xs = self.shape().to_vec();
        if xs.len() != 2 || xs[0] != labels.len() {
            return Err(TensorError::BadOperand {
                op: "cross_entropy_mean",
                msg: format!("logits {:?} vs {} labels", xs, labels.len()),
            });
        }
        let (n, c) = (xs[0], xs[1]);
        for &l in labels {
            if l >= c {
                return Err(TensorError::LabelOutOfRange { label: l, classes: c });
            }
        }
        let x = self.value().data();
        let mut probs = vec![E::zero(); n * c];
        let mut acc = E::zero();
        for r in 0..n {
            let xs_row = &x[r * c..(r + 1) * c];
            let ps = &mut probs[r * c..(r + 1) * c];
            softmax_row(xs_row, ps);
            acc = acc - ps[labels[r]].max(E::from_f64(1e-300)).ln();
        }
        let nn = E::from_f64(n as f64);
        let value = Array::scalar(acc / nn);
        finite_guard("cross_entropy_mean", &value)?;
        let pa = self.clone();
        let labels = labels.to_vec();
        let probs = Arc::new(probs);
        Ok(Tensor::from_op(value, vec![self.clone()], move |g| {
            if let Some(mut ga) = pa.grad_buf() {
                let s = g[0] / nn;
                for r in 0..n {
                    for j in 0..c {
                        let delta = if labels[r] == j { E::one() } else { E::zero() };
                        ga[r * c + j] = ga[r * c + j] + s * (probs[r * c + j] - delta);
                    }
                }
            }
        }))
    }
}

fn sigmoid_scalar<E: Scalar>(v: E) -> E {
    if v >= E::zero() {
        E::one() / (E::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::one() + e)
    }
}

fn softmax_row<E: Scalar>(xs: &[E], out: &mut [E]) {
    let mut m = xs[0];
    for &v in xs {
        if v > m {
            m = v;
        }
    }
    let mut total = E::zero();
    for (o, &v) in out.iter_mut().zip(xs) {
        let e = (v - m).exp();
        *o = e;
        total = total + e;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

fn dot_norms<E: Scalar>(u: &[E], v: &[E]) -> (E, E, E) {
    let mut dot = E::zero();
    let mut nu = E::zero();
    let mut nv = E::zero();
    for i in 0..u.len() {
        dot = dot + u[i] * v[i];
        nu = nu + u[i] * u[i];
        nv = nv + v[i] * v[i];
    }
    (dot, nu.sqrt(), nv.sqrt())
}

/// Result of the batch-all triplet loss: mean hinge over every valid
/// (anchor, positive, negative) triple.
pub struct TripletLoss<E: Scalar> {
    pub loss: Tensor<E>,
    /// Number of valid triplets averaged over.
    pub triplet_count: usize,
    /// True when no valid triplet existed (all labels singletons); the loss
    /// is then a constant zero and the caller should log and move on.
    pub degenerate: bool,
}

/// Batch-all triplet loss with margin over `emb (B,d)` and integer labels.
/// Distances are Euclidean with an epsilon inside the square root so the
/// gradient stays finite at coincident embeddings. A batch with only one
/// distinct label is an error; a batch with no anchor-positive pair yields
/// the degenerate flag.
pub fn triplet_batch_all<E: Scalar>(
    emb: &Tensor<E>,
    labels: &[usize],
    margin: E,
) -> Result<TripletLoss<E>> {
    let xs = emb.shape().to_vec();
    if xs.len() != 2 || xs[0] != labels.len() {
        return Err(TensorError::BadOperand {
            op: "triplet_batch_all",
            msg: format!("emb {:?} vs {} labels", xs, labels.len()),
        });
    }
    let b = xs[0];
    let first = labels.first().copied();
    if b < 2 || labels.iter().all(|&l| Some(l) == first) {
        return Err(TensorError::DegenerateBatch(format!(
            "{} samples, all with the same label",
            b
        )));
    }
    let d = xs[1];
    let eps = E::from_f64(1e-12);
    let x = emb.value().data();
    // pairwise distances, row-major BxB
    let mut dist = vec![E::zero(); b * b];
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let mut s = E::zero();
            for k in 0..d {
                let df = x[i * d + k] - x[j * d + k];
                s = s + df * df;
            }
            dist[i * b + j] = (s + eps).sqrt();
        }
    }
    let mut count = 0usize;
    let mut total = E::zero();
    for a in 0..b {
        for p in 0..b {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for nn in 0..b {
                if labels[nn] == labels[a] {
                    continue;
                }
                count += 1;
                let h = dist[a * b + p] - dist[a * b + nn] + margin;
                if h > E::zero() {
                    total = total + h;
                }
            }
        }
    }
    if count == 0 {
        return Ok(TripletLoss {
            loss: Tensor::leaf(Array::scalar(E::zero())),
            triplet_count: 0,
            degenerate: true,
        });
    }
    let cnt = E::from_f64(count as f64);
    let value = Array::scalar(total / cnt);
    finite_guard("triplet_batch_all", &value)?;
    let pe = emb.clone();
    let ve = emb.value().share();
    let labels_own = labels.to_vec();
    let dist = Arc::new(dist);
    let loss = Tensor::from_op(value, vec![emb.clone()], move |g| {
        if let Some(mut ge) = pe.grad_buf() {
            let s = g[0] / cnt;
            for a in 0..b {
                for p in 0..b {
                    if p == a || labels_own[p] != labels_own[a] {
                        continue;
                    }
                    for nn in 0..b {
                        if labels_own[nn] == labels_own[a] {
                            continue;
                        }
                        let h = dist[a * b + p] - dist[a * b + nn] + margin;
                        if h <= E::zero() {
                            continue;
                        }
                        let dap = dist[a * b + p];
                        let dan = dist[a * b + nn];
                        for k in 0..d {
                            let dp = (ve[a * d + k] - ve[p * d + k]) / dap;
                            let dn = (ve[a * d + k] - ve[nn * d + k]) / dan;
                            ge[a * d + k] = ge[a * d + k] + s * (dp - dn);
                            ge[p * d + k] = ge[p * d + k] - s * dp;
                            ge[nn * d + k] = ge[nn * d + k] + s * dn;
                        }
                    }
                }
            }
        }
    });
    Ok(TripletLoss {
        loss,
        triplet_count: count,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::super::graph::Tensor;
    use super::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        let x = Tensor::leaf(Array::scalar(0.0f64));
        assert_eq!(x.sigmoid().item(), 0.5);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let x = Tensor::leaf(Array::from_vec(&[1, 4], vec![0.7f64; 4]));
        let y = x.softmax_lastdim().unwrap();
        for &v in y.value().data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let s: f64 = y.value().data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_of_equal_logits_is_ln_classes() {
        let x = Tensor::leaf(Array::from_vec(&[1, 4], vec![0.3f64; 4]));
        let l = x.cross_entropy_mean(&[2]).unwrap();
        assert!((l.item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let x = Tensor::leaf(Array::from_vec(&[1, 4], vec![0.0f64; 4]));
        match x.cross_entropy_mean(&[4]) {
            Err(TensorError::LabelOutOfRange { label: 4, classes: 4 }) => {}
            other => panic!("unexpected: {:?}", other.map(|t| t.item())),
        }
    }

    #[test]
    fn conv1d_frozen_example() {
        let x = Tensor::leaf(Array::from_vec(&[1, 1, 3], vec![1.0f64, 2.0, 3.0]));
        let w = Tensor::leaf(Array::from_vec(&[1, 1, 2], vec![1.0, 1.0]));
        let b = Tensor::leaf(Array::from_vec(&[1], vec![0.0]));
        let y = x.conv1d(&w, &b, 0, PadMode::Zero).unwrap();
        assert_eq!(y.value().data(), &[3.0, 5.0]);
    }

    #[test]
    fn reduce_max_tie_routes_to_first_and_preserves_total() {
        let x = Tensor::param(Array::from_vec(&[1, 3], vec![2.0f64, 2.0, 1.0]));
        let y = x.reduce_max_axis(1).unwrap();
        y.backward_seeded(&[5.0]);
        assert_eq!(x.grad().unwrap(), vec![5.0, 0.0, 0.0]);
    }

    #[test]
    fn triplet_identical_embeddings_gives_margin() {
        let emb = Tensor::leaf(Array::from_vec(&[4, 3], vec![0.25f64; 12]));
        let out = triplet_batch_all(&emb, &[0, 0, 1, 1], 0.2).unwrap();
        assert!((out.loss.item() - 0.2).abs() < 1e-9);
        assert_eq!(out.triplet_count, 8);
        assert!(!out.degenerate);
    }

    #[test]
    fn triplet_separated_classes_gives_zero() {
        // positives coincide, negatives 10 apart with margin 0.2
        let mut v = vec![0.0f64; 4 * 2];
        v[4] = 10.0;
        v[6] = 10.0;
        let emb = Tensor::leaf(Array::from_vec(&[4, 2], v));
        let out = triplet_batch_all(&emb, &[0, 0, 1, 1], 0.2).unwrap();
        assert_eq!(out.loss.item(), 0.0);
    }

    #[test]
    fn triplet_single_label_batch_is_degenerate_error() {
        let emb = Tensor::leaf(Array::from_vec(&[3, 2], vec![0.0f64; 6]));
        assert!(matches!(
            triplet_batch_all(&emb, &[5, 5, 5], 0.2),
            Err(TensorError::DegenerateBatch(_))
        ));
    }

    #[test]
    fn triplet_all_singletons_returns_zero_with_flag() {
        let emb = Tensor::leaf(Array::from_vec(&[3, 2], vec![0.0f64; 6]));
        let out = triplet_batch_all(&emb, &[0, 1, 2], 0.2).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.triplet_count, 0);
        assert_eq!(out.loss.item(), 0.0);
    }

    #[test]
    fn gate_with_ones_is_identity() {
        let x = Tensor::leaf(Array::from_vec(&[1, 2, 3, 1, 1], (0..6).map(|v| v as f32).collect()));
        let r = Tensor::leaf(Array::full(&[1, 1, 3], 1.0f32));
        let y = x.gate_temporal(&r).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let a = Tensor::leaf(Array::<f32>::zeros(&[2, 3]));
        let b = Tensor::leaf(Array::<f32>::zeros(&[3, 2]));
        match a.add(&b) {
            Err(TensorError::ShapeMismatch { lhs, rhs }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            _ => panic!("expected shape mismatch"),
        }
    }
}
