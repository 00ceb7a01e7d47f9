use super::backward::{Bcast, BinaryKind, Op};
use super::kernels::{self, ConvGeom};
use super::{check_finite_enabled, Result, Tensor, TensorError};

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument { op, msg: msg.into() }
}

fn check_inputs(op: &'static str, inputs: &[&Tensor]) -> Result<()> {
    if check_finite_enabled() && inputs.iter().any(|t| !t.all_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

/// Resolves the broadcast modes of a binary op. Only exact matches, a
/// leading-batch broadcast (`rhs.shape == lhs.shape[1..]`) and one-element
/// operands are supported.
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast, Bcast)> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok((a.to_vec(), Bcast::Full, Bcast::Full));
    }
    if nb == 1 {
        return Ok((a.to_vec(), Bcast::Full, Bcast::Scalar));
    }
    if na == 1 {
        return Ok((b.to_vec(), Bcast::Scalar, Bcast::Full));
    }
    if a.len() == b.len() + 1 && a[1..] == *b {
        return Ok((a.to_vec(), Bcast::Full, Bcast::Batch(nb)));
    }
    if b.len() == a.len() + 1 && b[1..] == *a {
        return Ok((b.to_vec(), Bcast::Batch(na), Bcast::Full));
    }
    Err(shape_err(op, a, b))
}

fn unary(x: &Tensor, op: Op, f: impl Fn(f32) -> f32) -> Result<Tensor> {
    check_inputs(op.name(), &[x])?;
    let data: Vec<f32> = x.data().iter().map(|&v| f(v)).collect();
    Ok(Tensor::from_op(x.shape().to_vec(), data, op, vec![x.clone()]))
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    fn binary(&self, other: &Tensor, kind: BinaryKind) -> Result<Tensor> {
        let name = kind.name();
        check_inputs(name, &[self, other])?;
        let (shape, ma, mb) = broadcast(name, self.shape(), other.shape())?;
        let n: usize = shape.iter().product();
        let a = self.data();
        let b = other.data();
        let f = kind.apply_fn();
        let data: Vec<f32> = (0..n).map(|i| f(a[ma.index(i)], b[mb.index(i)])).collect();
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            shape,
            data,
            Op::Binary {
                kind,
                lhs: ma,
                rhs: mb,
            },
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn scale(&self, factor: f32) -> Result<Tensor> {
        unary(self, Op::Scale(factor), |v| v * factor)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f32) -> Result<Tensor> {
        unary(self, Op::AddScalar, |v| v + c)
    }

    pub fn leaky_relu(&self, alpha: f32) -> Result<Tensor> {
        unary(self, Op::LeakyRelu(alpha), |v| if v > 0.0 { v } else { alpha * v })
    }

    pub fn tanh(&self) -> Result<Tensor> {
        unary(self, Op::Tanh, f32::tanh)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        unary(self, Op::Sigmoid, |v| 1.0 / (1.0 + (-v).exp()))
    }

    /// Natural log; non-positive inputs produce NaN/-inf like `f32::ln`.
    pub fn log(&self) -> Result<Tensor> {
        unary(self, Op::Log, f32::ln)
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary(self, Op::Exp, f32::exp)
    }

    pub fn square(&self) -> Result<Tensor> {
        unary(self, Op::Square, |v| v * v)
    }

    /// Numerically stable `log(1 + e^x)`.
    pub fn softplus(&self) -> Result<Tensor> {
        unary(self, Op::Softplus, |v| {
            if v > 0.0 {
                v + (-v).exp().ln_1p()
            } else {
                v.exp().ln_1p()
            }
        })
    }

    /// Elementwise `max(x, c)`; the gradient passes only where `x > c`.
    pub fn maximum_scalar(&self, c: f32) -> Result<Tensor> {
        unary(self, Op::MaximumScalar(c), |v| v.max(c))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        check_inputs("reshape", &[self])?;
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape, vec![self.clone()]))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(shape_err("matmul", a, b));
        }
        check_inputs("matmul", &[self, other])?;
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0f32; m * n];
        kernels::gemm(m, k, n, &self.data(), false, &other.data(), false, &mut out, false);
        Ok(Tensor::from_op(vec![m, n], out, Op::MatMul { m, k, n }, vec![self.clone(), other.clone()]))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(invalid("transpose", format!("expects 2-D input, got {s:?}")));
        }
        check_inputs("transpose", &[self])?;
        let (r, c) = (s[0], s[1]);
        let d = self.data();
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        drop(d);
        Ok(Tensor::from_op(vec![c, r], out, Op::Transpose { rows: r, cols: c }, vec![self.clone()]))
    }

    pub fn sum(&self) -> Result<Tensor> {
        check_inputs("sum", &[self])?;
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        Ok(Tensor::from_op(Vec::new(), vec![s as f32], Op::SumAll, vec![self.clone()]))
    }

    pub fn mean(&self) -> Result<Tensor> {
        check_inputs("mean", &[self])?;
        let n = self.numel();
        if n == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        Ok(Tensor::from_op(Vec::new(), vec![(s / n as f64) as f32], Op::MeanAll, vec![self.clone()]))
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor> {
        let name = if mean { "mean_axis" } else { "sum_axis" };
        if axis >= self.ndim() {
            return Err(invalid(name, format!("axis {axis} out of range for {:?}", self.shape())));
        }
        check_inputs(name, &[self])?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let d = self.data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0.0f64;
                for a in 0..len {
                    s += d[(o * len + a) * inner + i] as f64;
                }
                if mean {
                    s /= len as f64;
                }
                out[o * inner + i] = s as f32;
            }
        }
        drop(d);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(shape, out, Op::ReduceAxis { outer, len, inner, mean }, vec![self.clone()]))
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        if axis >= first.ndim() {
            return Err(invalid("concat", format!("axis {axis} out of range for {:?}", first.shape())));
        }
        for t in tensors {
            let ok = t.ndim() == first.ndim()
                && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", first.shape(), t.shape()));
            }
        }
        check_inputs("concat", &tensors.iter().collect::<Vec<_>>())?;
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        let datas: Vec<_> = tensors.iter().map(|t| t.data()).collect();
        for o in 0..outer {
            for (d, &len) in datas.iter().zip(&sizes) {
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        drop(datas);
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(shape, out, Op::Concat { sizes, outer, inner }, tensors.to_vec()))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.ndim() || start > end || end > self.shape()[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} invalid for {:?}", self.shape()),
            ));
        }
        check_inputs("slice", &[self])?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let d = self.data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..(o * len + end) * inner]);
        }
        drop(d);
        let mut shape = self.shape().to_vec();
        shape[axis] = end - start;
        Ok(Tensor::from_op(
            shape,
            out,
            Op::Slice {
                outer,
                len,
                inner,
                start,
                end,
            },
            vec![self.clone()],
        ))
    }

    fn image_dims(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(invalid(op, format!("expects (batch, channels, height, width), got {:?}", self.shape()))),
        }
    }

    /// Zero padding of the two spatial axes: `(top, bottom, left, right)`.
    pub fn pad_zero(&self, pad: (usize, usize, usize, usize)) -> Result<Tensor> {
        let (b, c, h, w) = self.image_dims("pad_zero")?;
        check_inputs("pad_zero", &[self])?;
        let (top, bottom, left, right) = pad;
        let (oh, ow) = (h + top + bottom, w + left + right);
        let d = self.data();
        let mut out = vec![0.0f32; b * c * oh * ow];
        for p in 0..b * c {
            for y in 0..h {
                let src = &d[(p * h + y) * w..][..w];
                out[(p * oh + y + top) * ow + left..][..w].copy_from_slice(src);
            }
        }
        drop(d);
        Ok(Tensor::from_op(
            vec![b, c, oh, ow],
            out,
            Op::PadZero {
                planes: b * c,
                h,
                w,
                top,
                left,
                out_h: oh,
                out_w: ow,
            },
            vec![self.clone()],
        ))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample_nearest2x(&self) -> Result<Tensor> {
        let (b, c, h, w) = self.image_dims("upsample_nearest2x")?;
        check_inputs("upsample_nearest2x", &[self])?;
        let d = self.data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; b * c * oh * ow];
        for p in 0..b * c {
            for y in 0..oh {
                for x in 0..ow {
                    out[(p * oh + y) * ow + x] = d[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        drop(d);
        Ok(Tensor::from_op(
            vec![b, c, oh, ow],
            out,
            Op::Upsample2x { planes: b * c, h, w },
            vec![self.clone()],
        ))
    }

    /// 2-D cross-correlation. `weight` is `(Cout, Cin, k, k)`, `bias` `(Cout)`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
        let (batch, in_ch, in_h, in_w) = self.image_dims("conv2d")?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[1] != in_ch || ws[2] != ws[3] {
            return Err(shape_err("conv2d", self.shape(), ws));
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return Err(shape_err("conv2d", ws, b.shape()));
            }
        }
        let kernel = ws[2];
        let (out_h, out_w) = match (
            kernels::conv_output_size(in_h, kernel, stride, padding),
            kernels::conv_output_size(in_w, kernel, stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(shape_err("conv2d", self.shape(), ws)),
        };
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        check_inputs("conv2d", &inputs)?;
        let geom = ConvGeom {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch: ws[0],
            kernel,
            stride,
            padding,
            out_h,
            out_w,
        };
        let bias_data = bias.map(|b| b.to_vec());
        let (out, cols) = kernels::conv2d_forward(&self.data(), &weight.data(), bias_data.as_deref(), &geom);
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        // Only the weight adjoint needs the unfolded input.
        let keep_cols = weight.requires_grad();
        Ok(Tensor::from_op(
            vec![batch, ws[0], out_h, out_w],
            out,
            Op::Conv2d {
                geom,
                cols: if keep_cols { cols } else { Vec::new() },
            },
            parents,
        ))
    }

    /// Transposed convolution: the adjoint of `conv2d(·, weight, stride,
    /// padding)` mapping a `(B, Cout, Ho, Wo)` tensor back to
    /// `(B, Cin, out_hw.0, out_hw.1)`. Differentiable in both arguments.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor,
        stride: usize,
        padding: usize,
        out_hw: (usize, usize),
    ) -> Result<Tensor> {
        let (batch, out_ch, gh, gw) = self.image_dims("conv_transpose2d")?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[0] != out_ch || ws[2] != ws[3] {
            return Err(shape_err("conv_transpose2d", self.shape(), ws));
        }
        let kernel = ws[2];
        let (in_h, in_w) = out_hw;
        if kernels::conv_output_size(in_h, kernel, stride, padding) != Some(gh)
            || kernels::conv_output_size(in_w, kernel, stride, padding) != Some(gw)
        {
            return Err(invalid(
                "conv_transpose2d",
                format!("output size {out_hw:?} does not convolve back to {gh}x{gw}"),
            ));
        }
        check_inputs("conv_transpose2d", &[self, weight])?;
        let geom = ConvGeom {
            batch,
            in_ch: ws[1],
            in_h,
            in_w,
            out_ch,
            kernel,
            stride,
            padding,
            out_h: gh,
            out_w: gw,
        };
        let out = kernels::conv2d_input_grad(&self.data(), &weight.data(), &geom);
        Ok(Tensor::from_op(
            vec![batch, ws[1], in_h, in_w],
            out,
            Op::ConvTranspose2d { geom },
            vec![self.clone(), weight.clone()],
        ))
    }

    /// Shifts every image by its `(dx, dy)`; vacated pixels become zero.
    /// Positive `dx` moves content right, positive `dy` moves it down.
    pub fn translate(&self, shifts: &[(i32, i32)]) -> Result<Tensor> {
        let (b, c, h, w) = self.image_dims("translate")?;
        if shifts.len() != b {
            return Err(invalid("translate", format!("{} shifts for batch of {b}", shifts.len())));
        }
        if let Some(s) = shifts.iter().find(|(dx, dy)| dx.unsigned_abs() as usize > w || dy.unsigned_abs() as usize > h) {
            return Err(invalid("translate", format!("shift {s:?} exceeds image size {h}x{w}")));
        }
        check_inputs("translate", &[self])?;
        let out = translate_raw(&self.data(), (b, c, h, w), shifts, false);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Translate {
                dims: (b, c, h, w),
                shifts: shifts.to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// Zeroes a `side × side` square per image whose top-left corner is
    /// `(top, left)`; parts hanging over the border are clipped.
    pub fn cutout(&self, corners: &[(i32, i32)], side: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.image_dims("cutout")?;
        if corners.len() != b {
            return Err(invalid("cutout", format!("{} masks for batch of {b}", corners.len())));
        }
        let s = side as i32;
        if let Some(bad) = corners
            .iter()
            .find(|(t, l)| *t < -s || *l < -s || *t > h as i32 || *l > w as i32)
        {
            return Err(invalid("cutout", format!("mask corner {bad:?} outside [-{side}, size]")));
        }
        check_inputs("cutout", &[self])?;
        let out = cutout_raw(&self.data(), (b, c, h, w), corners, side);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Cutout {
                dims: (b, c, h, w),
                corners: corners.to_vec(),
                side,
            },
            vec![self.clone()],
        ))
    }

    /// Adds a per-image offset.
    pub fn brightness(&self, offsets: &[f32]) -> Result<Tensor> {
        let (b, c, h, w) = self.image_dims("brightness")?;
        if offsets.len() != b {
            return Err(invalid("brightness", format!("{} factors for batch of {b}", offsets.len())));
        }
        check_inputs("brightness", &[self])?;
        let per = c * h * w;
        let d = self.data();
        let out: Vec<f32> = d
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let o = offsets[i / per];
                if o == 0.0 {
                    v
                } else {
                    v + o
                }
            })
            .collect();
        drop(d);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Brightness, vec![self.clone()]))
    }

    /// `(x − μ)·c + μ` with `μ` the mean of each whole image.
    pub fn contrast(&self, factors: &[f32]) -> Result<Tensor> {
        let (b, c, h, w) = self.image_dims("contrast")?;
        if factors.len() != b {
            return Err(invalid("contrast", format!("{} factors for batch of {b}", factors.len())));
        }
        check_inputs("contrast", &[self])?;
        let out = contrast_raw(&self.data(), b, c * h * w, factors);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Contrast {
                per_image: c * h * w,
                factors: factors.to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// `(x − g)·s + g` with `g` the per-pixel mean over channels.
    pub fn saturation(&self, factors: &[f32]) -> Result<Tensor> {
        let (b, c, h, w) = self.image_dims("saturation")?;
        if factors.len() != b {
            return Err(invalid("saturation", format!("{} factors for batch of {b}", factors.len())));
        }
        check_inputs("saturation", &[self])?;
        let out = saturation_raw(&self.data(), (b, c, h * w), factors);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Saturation {
                dims: (b, c, h * w),
                factors: factors.to_vec(),
            },
            vec![self.clone()],
        ))
    }
}

pub(crate) fn translate_raw(x: &[f32], dims: (usize, usize, usize, usize), shifts: &[(i32, i32)], inverse: bool) -> Vec<f32> {
    let (b, c, h, w) = dims;
    let mut out = vec![0.0f32; x.len()];
    for (bi, &(dx, dy)) in shifts.iter().enumerate().take(b) {
        let (dx, dy) = if inverse { (-dx, -dy) } else { (dx, dy) };
        for ci in 0..c {
            let plane = (bi * c + ci) * h * w;
            for y in 0..h as i32 {
                let sy = y - dy;
                if sy < 0 || sy >= h as i32 {
                    continue;
                }
                for xx in 0..w as i32 {
                    let sx = xx - dx;
                    if sx >= 0 && sx < w as i32 {
                        out[plane + (y as usize) * w + xx as usize] = x[plane + (sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn cutout_raw(x: &[f32], dims: (usize, usize, usize, usize), corners: &[(i32, i32)], side: usize) -> Vec<f32> {
    let (b, c, h, w) = dims;
    let mut out = x.to_vec();
    for (bi, &(top, left)) in corners.iter().enumerate().take(b) {
        let y0 = top.max(0) as usize;
        let y1 = (top + side as i32).clamp(0, h as i32) as usize;
        let x0 = left.max(0) as usize;
        let x1 = (left + side as i32).clamp(0, w as i32) as usize;
        for ci in 0..c {
            let plane = (bi * c + ci) * h * w;
            for y in y0..y1 {
                for xx in x0..x1.max(x0) {
                    out[plane + y * w + xx] = 0.0;
                }
            }
        }
    }
    out
}

pub(crate) fn contrast_raw(x: &[f32], batch: usize, per: usize, factors: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..batch {
        let img = &x[b * per..(b + 1) * per];
        let dst = &mut out[b * per..(b + 1) * per];
        let f = factors[b];
        if f == 1.0 {
            dst.copy_from_slice(img);
            continue;
        }
        let mu = (img.iter().map(|&v| v as f64).sum::<f64>() / per as f64) as f32;
        let shift = (1.0 - f) * mu;
        for (o, &v) in dst.iter_mut().zip(img) {
            *o = f * v + shift;
        }
    }
    out
}

pub(crate) fn saturation_raw(x: &[f32], dims: (usize, usize, usize), factors: &[f32]) -> Vec<f32> {
    let (batch, ch, plane) = dims;
    let mut out = vec![0.0f32; x.len()];
    for b in 0..batch {
        let base = b * ch * plane;
        let f = factors[b];
        if f == 1.0 {
            out[base..base + ch * plane].copy_from_slice(&x[base..base + ch * plane]);
            continue;
        }
        for p in 0..plane {
            let mut s = 0.0f64;
            for c in 0..ch {
                s += x[base + c * plane + p] as f64;
            }
            let shift = (1.0 - f) * (s / ch as f64) as f32;
            for c in 0..ch {
                let i = base + c * plane + p;
                out[i] = f * x[i] + shift;
            }
        }
    }
    out
}
