//! Shape-checked numeric kernels behind the graph ops. Convolutions are
//! stride-1 cross-correlations lowered to im2col + GEMM; all loops run in a
//! fixed order so outputs are bit-stable.

use super::scalar::Scalar;

/// Border handling for convolution padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Clamp reads to the border sample. Keeps a constant signal constant
    /// through the filter, which the ratio-attention head relies on.
    Replicate,
}

/// Geometry of one convolution call over up to three spatial dims. 1-D and
/// 2-D convolutions set the leading unused dims to extent 1, kernel 1, pad 0.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_dims: [usize; 3],
    pub k_dims: [usize; 3],
    pub pads: [usize; 3],
    pub mode: PadMode,
}

impl ConvSpec {
    pub fn out_dims(&self) -> [usize; 3] {
        let mut o = [0usize; 3];
        for i in 0..3 {
            let padded = self.in_dims[i] + 2 * self.pads[i];
            assert!(padded + 1 > self.k_dims[i], "kernel exceeds padded input");
            o[i] = padded + 1 - self.k_dims[i];
        }
        o
    }

    fn in_numel(&self) -> usize {
        self.c_in * self.in_dims.iter().product::<usize>()
    }

    fn out_numel(&self) -> usize {
        self.c_out * self.out_dims().iter().product::<usize>()
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k_dims.iter().product::<usize>()
    }

    fn col_cols(&self) -> usize {
        self.out_dims().iter().product::<usize>()
    }
}

/// Gathers one sample into column-major patches: row `(c,k1,k2,k3)`, column
/// `(o1,o2,o3)`. Out-of-range reads become zero or the clamped border sample.
fn im2col<E: Scalar>(spec: &ConvSpec, x: &[E], cols: &mut [E]) {
    let [d1, d2, d3] = spec.in_dims;
    let [k1, k2, k3] = spec.k_dims;
    let [p1, p2, p3] = spec.pads;
    let [o1, o2, o3] = spec.out_dims();
    let n_cols = o1 * o2 * o3;
    debug_assert_eq!(cols.len(), spec.col_rows() * n_cols);

    let mut row = 0usize;
    for c in 0..spec.c_in {
        let plane = &x[c * d1 * d2 * d3..(c + 1) * d1 * d2 * d3];
        for q1 in 0..k1 {
            for q2 in 0..k2 {
                for q3 in 0..k3 {
                    let dst_row = &mut cols[row * n_cols..(row + 1) * n_cols];
                    let mut dst = 0usize;
                    for a1 in 0..o1 {
                        let s1 = a1 + q1;
                        let (v1, in1) = src_index(s1, p1, d1, spec.mode);
                        for a2 in 0..o2 {
                            let s2 = a2 + q2;
                            let (v2, in2) = src_index(s2, p2, d2, spec.mode);
                            if !(in1 && in2) {
                                dst_row[dst..dst + o3].fill(E::zero());
                                dst += o3;
                                continue;
                            }
                            let base = (v1 * d2 + v2) * d3;
                            match spec.mode {
                                PadMode::Zero => {
                                    // contiguous span of a3 where a3+q3 lands in range
                                    let lo = p3.saturating_sub(q3).min(o3);
                                    let hi = (d3 + p3).saturating_sub(q3).min(o3).max(lo);
                                    dst_row[dst..dst + lo].fill(E::zero());
                                    if hi > lo {
                                        let src0 = lo + q3 - p3;
                                        dst_row[dst + lo..dst + hi]
                                            .copy_from_slice(&plane[base + src0..base + src0 + (hi - lo)]);
                                    }
                                    dst_row[dst + hi..dst + o3].fill(E::zero());
                                }
                                PadMode::Replicate => {
                                    for a3 in 0..o3 {
                                        let (v3, _) = src_index(a3 + q3, p3, d3, PadMode::Replicate);
                                        dst_row[dst + a3] = plane[base + v3];
                                    }
                                }
                            }
                            dst += o3;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Maps a padded coordinate to a source index. Returns (index, in_range);
/// replicate mode clamps and is always in range.
#[inline]
fn src_index(s: usize, pad: usize, dim: usize, mode: PadMode) -> (usize, bool) {
    match mode {
        PadMode::Zero => {
            if s < pad || s >= dim + pad {
                (0, false)
            } else {
                (s - pad, true)
            }
        }
        PadMode::Replicate => {
            let v = s.saturating_sub(pad).min(dim - 1);
            (v, true)
        }
    }
}

/// `out[n] = w . cols(x[n]) + bias`, shapes `x (N,Ci,D1,D2,D3)`,
/// `w (Co,Ci,K1,K2,K3)`, `bias (Co)`, `out (N,Co,O1,O2,O3)`.
pub fn conv_forward<E: Scalar>(spec: &ConvSpec, x: &[E], w: &[E], bias: &[E]) -> Vec<E> {
    let rows = spec.col_rows();
    let n_cols = spec.col_cols();
    assert_eq!(x.len(), spec.batch * spec.in_numel());
    assert_eq!(w.len(), spec.c_out * rows);
    assert_eq!(bias.len(), spec.c_out);

    let mut out = vec![E::zero(); spec.batch * spec.out_numel()];
    let mut cols = vec![E::zero(); rows * n_cols];
    for n in 0..spec.batch {
        im2col(spec, &x[n * spec.in_numel()..(n + 1) * spec.in_numel()], &mut cols);
        let dst = &mut out[n * spec.out_numel()..(n + 1) * spec.out_numel()];
        E::gemm(
            spec.c_out,
            rows,
            n_cols,
            E::one(),
            w,
            rows as isize,
            1,
            &cols,
            n_cols as isize,
            1,
            E::zero(),
            dst,
            n_cols as isize,
            1,
        );
        for co in 0..spec.c_out {
            let b = bias[co];
            for v in &mut dst[co * n_cols..(co + 1) * n_cols] {
                *v = *v + b;
            }
        }
    }
    out
}

/// Accumulates `d loss / d x` into `dx` given upstream `d_out`.
pub fn conv_backward_input<E: Scalar>(spec: &ConvSpec, w: &[E], d_out: &[E], dx: &mut [E]) {
    let rows = spec.col_rows();
    let n_cols = spec.col_cols();
    let mut d_cols = vec![E::zero(); rows * n_cols];
    for n in 0..spec.batch {
        let dout_n = &d_out[n * spec.out_numel()..(n + 1) * spec.out_numel()];
        // d_cols = w^T . d_out
        E::gemm(
            rows,
            spec.c_out,
            n_cols,
            E::one(),
            w,
            1,
            rows as isize,
            dout_n,
            n_cols as isize,
            1,
            E::zero(),
            &mut d_cols,
            n_cols as isize,
            1,
        );
        col2im_add(spec, &d_cols, &mut dx[n * spec.in_numel()..(n + 1) * spec.in_numel()]);
    }
}

/// Accumulates weight and bias gradients.
pub fn conv_backward_params<E: Scalar>(
    spec: &ConvSpec,
    x: &[E],
    d_out: &[E],
    dw: &mut [E],
    db: &mut [E],
) {
    let rows = spec.col_rows();
    let n_cols = spec.col_cols();
    let mut cols = vec![E::zero(); rows * n_cols];
    for n in 0..spec.batch {
        im2col(spec, &x[n * spec.in_numel()..(n + 1) * spec.in_numel()], &mut cols);
        let dout_n = &d_out[n * spec.out_numel()..(n + 1) * spec.out_numel()];
        // dw += d_out . cols^T
        E::gemm(
            spec.c_out,
            n_cols,
            rows,
            E::one(),
            dout_n,
            n_cols as isize,
            1,
            &cols,
            1,
            n_cols as isize,
            E::one(),
            dw,
            rows as isize,
            1,
        );
        for co in 0..spec.c_out {
            let mut s = E::zero();
            for &g in &dout_n[co * n_cols..(co + 1) * n_cols] {
                s = s + g;
            }
            db[co] = db[co] + s;
        }
    }
}

/// Scatter-add of column gradients back onto one input sample.
fn col2im_add<E: Scalar>(spec: &ConvSpec, d_cols: &[E], dx: &mut [E]) {
    let [d1, d2, d3] = spec.in_dims;
    let [k1, k2, k3] = spec.k_dims;
    let [p1, p2, p3] = spec.pads;
    let [o1, o2, o3] = spec.out_dims();
    let n_cols = o1 * o2 * o3;

    let mut row = 0usize;
    for c in 0..spec.c_in {
        let plane = &mut dx[c * d1 * d2 * d3..(c + 1) * d1 * d2 * d3];
        for q1 in 0..k1 {
            for q2 in 0..k2 {
                for q3 in 0..k3 {
                    let src_row = &d_cols[row * n_cols..(row + 1) * n_cols];
                    let mut src = 0usize;
                    for a1 in 0..o1 {
                        let (v1, in1) = src_index(a1 + q1, p1, d1, spec.mode);
                        for a2 in 0..o2 {
                            let (v2, in2) = src_index(a2 + q2, p2, d2, spec.mode);
                            if !(in1 && in2) {
                                src += o3;
                                continue;
                            }
                            let base = (v1 * d2 + v2) * d3;
                            for a3 in 0..o3 {
                                let (v3, in3) = src_index(a3 + q3, p3, d3, spec.mode);
                                if in3 {
                                    plane[base + v3] = plane[base + v3] + src_row[src + a3];
                                }
                            }
                            src += o3;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Max pooling over the three trailing spatial dims with stride = kernel.
/// Returns pooled values and, per output cell, the flat input index of the
/// maximum; ties resolve to the first index in scan order.
pub fn maxpool_forward<E: Scalar>(
    x: &[E],
    planes: usize,
    dims: [usize; 3],
    k: [usize; 3],
) -> (Vec<E>, Vec<usize>) {
    let [d1, d2, d3] = dims;
    let o = [d1 / k[0], d2 / k[1], d3 / k[2]];
    let out_per_plane = o[0] * o[1] * o[2];
    let mut out = vec![E::zero(); planes * out_per_plane];
    let mut arg = vec![0usize; planes * out_per_plane];
    let mut dst = 0usize;
    for p in 0..planes {
        let base_p = p * d1 * d2 * d3;
        for a1 in 0..o[0] {
            for a2 in 0..o[1] {
                for a3 in 0..o[2] {
                    let mut best = E::neg_infinity();
                    let mut best_i = 0usize;
                    for q1 in 0..k[0] {
                        for q2 in 0..k[1] {
                            for q3 in 0..k[2] {
                                let idx = base_p
                                    + ((a1 * k[0] + q1) * d2 + (a2 * k[1] + q2)) * d3
                                    + a3 * k[2]
                                    + q3;
                                let v = x[idx];
                                if v > best {
                                    best = v;
                                    best_i = idx;
                                }
                            }
                        }
                    }
                    out[dst] = best;
                    arg[dst] = best_i;
                    dst += 1;
                }
            }
        }
    }
    (out, arg)
}

/// Routes each pooled gradient to its recorded argmax.
pub fn maxpool_backward<E: Scalar>(arg: &[usize], d_out: &[E], dx: &mut [E]) {
    for (i, &g) in d_out.iter().enumerate() {
        dx[arg[i]] = dx[arg[i]] + g;
    }
}

/// Max over one axis of an arbitrary shape. Returns values and flat argmax
/// indices (first maximum wins on ties).
pub fn reduce_max_axis_forward<E: Scalar>(
    x: &[E],
    shape: &[usize],
    axis: usize,
) -> (Vec<E>, Vec<usize>) {
    let axis_len = shape[axis];
    assert!(axis_len > 0, "reduce over empty axis");
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![E::zero(); outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for ou in 0..outer {
        for inn in 0..inner {
            let mut best = E::neg_infinity();
            let mut best_i = 0usize;
            for a in 0..axis_len {
                let idx = (ou * axis_len + a) * inner + inn;
                if x[idx] > best {
                    best = x[idx];
                    best_i = idx;
                }
            }
            out[ou * inner + inn] = best;
            arg[ou * inner + inn] = best_i;
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct cross-correlation used as an independent reference.
    fn conv_reference(spec: &ConvSpec, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
        let [d1, d2, d3] = spec.in_dims;
        let [k1, k2, k3] = spec.k_dims;
        let [p1, p2, p3] = spec.pads;
        let o = spec.out_dims();
        let mut out = vec![0.0; spec.batch * spec.c_out * o[0] * o[1] * o[2]];
        let mut dst = 0;
        for n in 0..spec.batch {
            for co in 0..spec.c_out {
                for a1 in 0..o[0] {
                    for a2 in 0..o[1] {
                        for a3 in 0..o[2] {
                            let mut acc = bias[co];
                            for ci in 0..spec.c_in {
                                for q1 in 0..k1 {
                                    for q2 in 0..k2 {
                                        for q3 in 0..k3 {
                                            let (v1, i1) = src_index(a1 + q1, p1, d1, spec.mode);
                                            let (v2, i2) = src_index(a2 + q2, p2, d2, spec.mode);
                                            let (v3, i3) = src_index(a3 + q3, p3, d3, spec.mode);
                                            if i1 && i2 && i3 {
                                                let xi = ((n * spec.c_in + ci) * d1 + v1) * d2 * d3
                                                    + v2 * d3
                                                    + v3;
                                                let wi = (((co * spec.c_in + ci) * k1 + q1) * k2
                                                    + q2)
                                                    * k3
                                                    + q3;
                                                acc += x[xi] * w[wi];
                                            }
                                        }
                                    }
                                }
                            }
                            out[dst] = acc;
                            dst += 1;
                        }
                    }
                }
            }
        }
        out
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        // xorshift, good enough to fill test operands
        let mut s = seed.max(1);
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s % 2000) as f64 / 1000.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv1d_example() {
        // conv1d([1,2,3], kernel [1,1], no padding) = [3,5]
        let spec = ConvSpec {
            batch: 1,
            c_in: 1,
            c_out: 1,
            in_dims: [1, 1, 3],
            k_dims: [1, 1, 2],
            pads: [0, 0, 0],
            mode: PadMode::Zero,
        };
        let out = conv_forward(&spec, &[1.0f64, 2.0, 3.0], &[1.0, 1.0], &[0.0]);
        assert_eq!(out, vec![3.0, 5.0]);
    }

    #[test]
    fn gemm_path_matches_direct_convolution() {
        for (i, &mode) in [PadMode::Zero, PadMode::Replicate].iter().enumerate() {
            let spec = ConvSpec {
                batch: 2,
                c_in: 3,
                c_out: 4,
                in_dims: [3, 5, 6],
                k_dims: [2, 3, 3],
                pads: [1, 1, 2],
                mode,
            };
            let x = pseudo_random(2 * 3 * 3 * 5 * 6, 7 + i as u64);
            let w = pseudo_random(4 * 3 * 2 * 3 * 3, 11 + i as u64);
            let b = pseudo_random(4, 13);
            let fast = conv_forward(&spec, &x, &w, &b);
            let slow = conv_reference(&spec, &x, &w, &b);
            for (f, s) in fast.iter().zip(slow.iter()) {
                assert!((f - s).abs() < 1e-9, "{f} vs {s}");
            }
        }
    }

    #[test]
    fn replicate_padding_keeps_constant_signal() {
        let spec = ConvSpec {
            batch: 1,
            c_in: 1,
            c_out: 1,
            in_dims: [1, 1, 5],
            k_dims: [1, 1, 3],
            pads: [0, 0, 1],
            mode: PadMode::Replicate,
        };
        let out = conv_forward(&spec, &[2.0f64; 5], &[1.0, 1.0, 1.0], &[0.0]);
        assert_eq!(out, vec![6.0; 5]);
    }

    #[test]
    fn maxpool_first_argmax_on_ties() {
        let (out, arg) = maxpool_forward(&[1.0f64, 1.0, 0.0, 0.5], 1, [1, 1, 4], [1, 1, 4]);
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn reduce_max_axis_middle() {
        // shape (2,2,2), max over axis 1
        let x = [1.0f64, 5.0, 2.0, 3.0, 9.0, 0.0, 9.0, 4.0];
        let (out, arg) = reduce_max_axis_forward(&x, &[2, 2, 2], 1);
        assert_eq!(out, vec![2.0, 5.0, 9.0, 4.0]);
        assert_eq!(arg, vec![2, 1, 4, 7]);
    }
}
