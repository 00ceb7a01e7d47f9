use super::kernels::{self, ConvGeom};
use super::ops::{contrast_raw, cutout_raw, saturation_raw, translate_raw};
use super::Tensor;

/// How an operand of a binary op maps onto the output index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Bcast {
    Full,
    /// Operand repeats over the leading axis; holds the operand's length.
    Batch(usize),
    Scalar,
}

impl Bcast {
    #[inline]
    pub fn index(self, i: usize) -> usize {
        match self {
            Bcast::Full => i,
            Bcast::Batch(n) => i % n,
            Bcast::Scalar => 0,
        }
    }

    fn reduce(self, g: Vec<f32>) -> Vec<f32> {
        match self {
            Bcast::Full => g,
            Bcast::Batch(n) => {
                let mut acc = vec![0.0f64; n];
                for (i, v) in g.iter().enumerate() {
                    acc[i % n] += *v as f64;
                }
                acc.into_iter().map(|v| v as f32).collect()
            }
            Bcast::Scalar => vec![g.iter().map(|&v| v as f64).sum::<f64>() as f32],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl BinaryKind {
    pub fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    pub fn apply_fn(self) -> fn(f32, f32) -> f32 {
        match self {
            BinaryKind::Add => |a, b| a + b,
            BinaryKind::Sub => |a, b| a - b,
            BinaryKind::Mul => |a, b| a * b,
        }
    }
}

/// Operation kind plus the context its adjoint needs.
pub(crate) enum Op {
    Binary { kind: BinaryKind, lhs: Bcast, rhs: Bcast },
    Scale(f32),
    AddScalar,
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
    Log,
    Exp,
    Square,
    Softplus,
    MaximumScalar(f32),
    Reshape,
    MatMul { m: usize, k: usize, n: usize },
    Transpose { rows: usize, cols: usize },
    SumAll,
    MeanAll,
    ReduceAxis { outer: usize, len: usize, inner: usize, mean: bool },
    Concat { sizes: Vec<usize>, outer: usize, inner: usize },
    Slice { outer: usize, len: usize, inner: usize, start: usize, end: usize },
    PadZero { planes: usize, h: usize, w: usize, top: usize, left: usize, out_h: usize, out_w: usize },
    Upsample2x { planes: usize, h: usize, w: usize },
    Conv2d { geom: ConvGeom, cols: Vec<f32> },
    ConvTranspose2d { geom: ConvGeom },
    Translate { dims: (usize, usize, usize, usize), shifts: Vec<(i32, i32)> },
    Cutout { dims: (usize, usize, usize, usize), corners: Vec<(i32, i32)>, side: usize },
    Brightness,
    Contrast { per_image: usize, factors: Vec<f32> },
    Saturation { dims: (usize, usize, usize), factors: Vec<f32> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Binary { kind, .. } => kind.name(),
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Square => "square",
            Op::Softplus => "softplus",
            Op::MaximumScalar(_) => "maximum_scalar",
            Op::Reshape => "reshape",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::SumAll => "sum",
            Op::MeanAll => "mean",
            Op::ReduceAxis { mean: false, .. } => "sum_axis",
            Op::ReduceAxis { mean: true, .. } => "mean_axis",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::PadZero { .. } => "pad_zero",
            Op::Upsample2x { .. } => "upsample_nearest2x",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Translate { .. } => "translate",
            Op::Cutout { .. } => "cutout",
            Op::Brightness => "brightness",
            Op::Contrast { .. } => "contrast",
            Op::Saturation { .. } => "saturation",
        }
    }

    /// Whether this op is one of the image augmentations.
    pub fn is_augmentation(&self) -> bool {
        matches!(
            self,
            Op::Translate { .. } | Op::Cutout { .. } | Op::Brightness | Op::Contrast { .. } | Op::Saturation { .. }
        )
    }

    /// Vector-Jacobian products for each parent, given the output gradient.
    pub fn backward(&self, parents: &[Tensor], out: &Tensor, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let want = |i: usize| parents.get(i).is_some_and(Tensor::requires_grad);
        match self {
            Op::Binary { kind, lhs, rhs } => {
                let (ga, gb) = match kind {
                    BinaryKind::Add => (g.to_vec(), g.to_vec()),
                    BinaryKind::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    BinaryKind::Mul => {
                        let a = parents[0].data();
                        let b = parents[1].data();
                        let ga = if want(0) {
                            g.iter().enumerate().map(|(i, gv)| gv * b[rhs.index(i)]).collect()
                        } else {
                            Vec::new()
                        };
                        let gb = if want(1) {
                            g.iter().enumerate().map(|(i, gv)| gv * a[lhs.index(i)]).collect()
                        } else {
                            Vec::new()
                        };
                        (ga, gb)
                    }
                };
                vec![
                    want(0).then(|| lhs.reduce(ga)),
                    want(1).then(|| rhs.reduce(gb)),
                ]
            }
            Op::Scale(f) => vec![Some(g.iter().map(|v| v * f).collect())],
            Op::AddScalar | Op::Reshape | Op::Brightness => vec![Some(g.to_vec())],
            Op::LeakyRelu(alpha) => {
                let x = parents[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { gv * alpha })
                        .collect(),
                )]
            }
            Op::Tanh => {
                let y = out.data();
                vec![Some(g.iter().zip(y.iter()).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect())]
            }
            Op::Sigmoid => {
                let y = out.data();
                vec![Some(g.iter().zip(y.iter()).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect())]
            }
            Op::Log => {
                let x = parents[0].data();
                vec![Some(g.iter().zip(x.iter()).map(|(gv, xv)| gv / xv).collect())]
            }
            Op::Exp => {
                let y = out.data();
                vec![Some(g.iter().zip(y.iter()).map(|(gv, yv)| gv * yv).collect())]
            }
            Op::Square => {
                let x = parents[0].data();
                vec![Some(g.iter().zip(x.iter()).map(|(gv, xv)| 2.0 * gv * xv).collect())]
            }
            Op::Softplus => {
                let x = parents[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(gv, &xv)| gv / (1.0 + (-xv).exp()))
                        .collect(),
                )]
            }
            Op::MaximumScalar(c) => {
                let x = parents[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(gv, &xv)| if xv > *c { *gv } else { 0.0 })
                        .collect(),
                )]
            }
            Op::MatMul { m, k, n } => {
                let ga = want(0).then(|| {
                    let mut ga = vec![0.0f32; m * k];
                    kernels::gemm(*m, *n, *k, g, false, &parents[1].data(), true, &mut ga, false);
                    ga
                });
                let gb = want(1).then(|| {
                    let mut gb = vec![0.0f32; k * n];
                    kernels::gemm(*k, *m, *n, &parents[0].data(), true, g, false, &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }
            Op::Transpose { rows, cols } => {
                let mut gx = vec![0.0f32; rows * cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        gx[i * cols + j] = g[j * rows + i];
                    }
                }
                vec![Some(gx)]
            }
            Op::SumAll => vec![Some(vec![g[0]; parents[0].numel()])],
            Op::MeanAll => {
                let n = parents[0].numel();
                vec![Some(vec![g[0] / n as f32; n])]
            }
            Op::ReduceAxis { outer, len, inner, mean } => {
                let scale = if *mean { 1.0 / *len as f32 } else { 1.0 };
                let mut gx = vec![0.0f32; outer * len * inner];
                for o in 0..*outer {
                    for a in 0..*len {
                        for i in 0..*inner {
                            gx[(o * len + a) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::Concat { sizes, outer, inner } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(pi, &len)| {
                        let start = offset;
                        offset += len;
                        want(pi).then(|| {
                            let mut gp = Vec::with_capacity(outer * len * inner);
                            for o in 0..*outer {
                                let base = (o * total + start) * inner;
                                gp.extend_from_slice(&g[base..base + len * inner]);
                            }
                            gp
                        })
                    })
                    .collect()
            }
            Op::Slice { outer, len, inner, start, end } => {
                let width = end - start;
                let mut gx = vec![0.0f32; outer * len * inner];
                for o in 0..*outer {
                    gx[(o * len + start) * inner..(o * len + end) * inner]
                        .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                vec![Some(gx)]
            }
            Op::PadZero { planes, h, w, top, left, out_h, out_w } => {
                let mut gx = vec![0.0f32; planes * h * w];
                for p in 0..*planes {
                    for y in 0..*h {
                        let src = &g[(p * out_h + y + top) * out_w + left..][..*w];
                        gx[(p * h + y) * w..][..*w].copy_from_slice(src);
                    }
                }
                vec![Some(gx)]
            }
            Op::Upsample2x { planes, h, w } => {
                let (oh, ow) = (2 * h, 2 * w);
                let mut gx = vec![0.0f32; planes * h * w];
                for p in 0..*planes {
                    for y in 0..oh {
                        for x in 0..ow {
                            gx[(p * h + y / 2) * w + x / 2] += g[(p * oh + y) * ow + x];
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::Conv2d { geom, cols } => {
                let gx = want(0).then(|| kernels::conv2d_input_grad(g, &parents[1].data(), geom));
                let gw = (want(1) && !cols.is_empty()).then(|| kernels::conv2d_weight_grad(g, cols, geom));
                let mut res = vec![gx, gw];
                if parents.len() == 3 {
                    res.push(want(2).then(|| kernels::conv2d_bias_grad(g, geom)));
                }
                res
            }
            Op::ConvTranspose2d { geom } => {
                // out = convT(u, w); ∂/∂u = conv(g, w), ∂/∂w = weight-grad with
                // g in the input role and u in the output-gradient role.
                let need_cols = want(1);
                let (gu, cols) = if want(0) || need_cols {
                    let (gu, cols) = kernels::conv2d_forward(g, &parents[1].data(), None, geom);
                    (want(0).then_some(gu), cols)
                } else {
                    (None, Vec::new())
                };
                let gw = need_cols.then(|| kernels::conv2d_weight_grad(&parents[0].data(), &cols, geom));
                vec![gu, gw]
            }
            Op::Translate { dims, shifts } => vec![Some(translate_raw(g, *dims, shifts, true))],
            Op::Cutout { dims, corners, side } => vec![Some(cutout_raw(g, *dims, corners, *side))],
            // Both color ops have symmetric Jacobians: the adjoint applies the
            // same map to the gradient.
            Op::Contrast { per_image, factors } => {
                vec![Some(contrast_raw(g, factors.len(), *per_image, factors))]
            }
            Op::Saturation { dims, factors } => vec![Some(saturation_raw(g, *dims, factors))],
        }
    }
}
