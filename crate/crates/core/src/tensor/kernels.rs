//! Raw buffer kernels: GEMM and im2col-based 2-D convolution.

/// `c (m×n) = op(a) · op(b) (+ c if accumulate)`, all row-major.
///
/// `a` is `m×k` (or `k×m` when `trans_a`), `b` is `k×n` (or `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.col_rows()
    }
}

/// Output columns `lo..hi` whose stride-1 tap `kj` lands inside the input.
fn valid_cols(kj: usize, g: &ConvGeom) -> (usize, usize) {
    let off = kj as isize - g.padding as isize;
    let lo = (-off).clamp(0, g.out_w as isize) as usize;
    let hi = (g.in_w as isize - off).clamp(lo as isize, g.out_w as isize) as usize;
    (lo, hi)
}

/// Unfolds `x (B,C,H,W)` into a `(C·k·k) × (B·Ho·Wo)` matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let k = g.kernel;
    let hw_out = g.out_h * g.out_w;
    let ncols = g.col_cols();
    let mut cols = vec![0.0f32; g.col_rows() * ncols];
    for c in 0..g.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let dst = &mut dst_row[b * hw_out..(b + 1) * hw_out];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &src[ih as usize * g.in_w..][..g.in_w];
                        let dst_line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                        if g.stride == 1 {
                            let (lo, hi) = valid_cols(kj, g);
                            let off = kj as isize - g.padding as isize;
                            let s0 = (lo as isize + off) as usize;
                            dst_line[lo..hi].copy_from_slice(&src_row[s0..s0 + hi - lo]);
                            continue;
                        }
                        for (ow, d) in dst_line.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && iw < g.in_w as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `(B,C,H,W)`.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let k = g.kernel;
    let hw_out = g.out_h * g.out_w;
    let ncols = g.col_cols();
    let mut x = vec![0.0f32; g.batch * g.in_ch * g.in_h * g.in_w];
    for c in 0..g.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut x[(b * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let src = &src_row[b * hw_out..(b + 1) * hw_out];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[ih as usize * g.in_w..][..g.in_w];
                        let src_line = &src[oh * g.out_w..(oh + 1) * g.out_w];
                        if g.stride == 1 {
                            let (lo, hi) = valid_cols(kj, g);
                            let d0 = (lo as isize + kj as isize - g.padding as isize) as usize;
                            dst_row[d0..d0 + hi - lo]
                                .iter_mut()
                                .zip(&src_line[lo..hi])
                                .for_each(|(d, s)| *d += s);
                            continue;
                        }
                        for (ow, s) in src_line.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && iw < g.in_w as isize {
                                dst_row[iw as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(B, C, P)` → `(C, B·P)`.
pub(crate) fn batch_to_channel_major(x: &[f32], batch: usize, ch: usize, plane: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let src = &x[(b * ch + c) * plane..][..plane];
            out[c * batch * plane + b * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

/// `(C, B·P)` → `(B, C, P)`.
pub(crate) fn channel_to_batch_major(x: &[f32], batch: usize, ch: usize, plane: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for c in 0..ch {
        for b in 0..batch {
            let src = &x[c * batch * plane + b * plane..][..plane];
            out[(b * ch + c) * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

/// Forward convolution. Returns the output in `(B, Cout, Ho, Wo)` layout and
/// the unfolded input, which the weight adjoint reuses.
pub(crate) fn conv2d_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> (Vec<f32>, Vec<f32>) {
    let cols = im2col(x, g);
    let out = conv2d_from_cols(&cols, w, bias, g);
    (out, cols)
}

pub(crate) fn conv2d_from_cols(cols: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let ncols = g.col_cols();
    let mut out_cm = vec![0.0f32; g.out_ch * ncols];
    gemm(g.out_ch, g.col_rows(), ncols, w, false, cols, false, &mut out_cm, false);
    let plane = g.out_h * g.out_w;
    let mut out = channel_to_batch_major(&out_cm, g.batch, g.out_ch, plane);
    if let Some(bias) = bias {
        for b in 0..g.batch {
            for (c, bv) in bias.iter().enumerate() {
                out[(b * g.out_ch + c) * plane..][..plane]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradient w.r.t. the convolution input (equivalently, a transposed
/// convolution of `gy` with `w`).
pub(crate) fn conv2d_input_grad(gy: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let plane = g.out_h * g.out_w;
    let gy_cm = batch_to_channel_major(gy, g.batch, g.out_ch, plane);
    let mut gcols = vec![0.0f32; g.col_rows() * g.col_cols()];
    gemm(g.col_rows(), g.out_ch, g.col_cols(), w, true, &gy_cm, false, &mut gcols, false);
    col2im(&gcols, g)
}

/// Gradient w.r.t. the weight, given the unfolded input.
pub(crate) fn conv2d_weight_grad(gy: &[f32], cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let plane = g.out_h * g.out_w;
    let gy_cm = batch_to_channel_major(gy, g.batch, g.out_ch, plane);
    let mut gw = vec![0.0f32; g.weight_len()];
    gemm(g.out_ch, g.col_cols(), g.col_rows(), &gy_cm, false, cols, true, &mut gw, false);
    gw
}

pub(crate) fn conv2d_bias_grad(gy: &[f32], g: &ConvGeom) -> Vec<f32> {
    let plane = g.out_h * g.out_w;
    let mut gb = vec![0.0f32; g.out_ch];
    for b in 0..g.batch {
        for (c, acc) in gb.iter_mut().enumerate() {
            let s: f64 = gy[(b * g.out_ch + c) * plane..][..plane].iter().map(|&v| v as f64).sum();
            *acc += s as f32;
        }
    }
    gb
}
