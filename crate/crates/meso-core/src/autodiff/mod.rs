//! Minimal reverse-mode differentiation engine.
//!
//! A [`Tape`] records eagerly executed primitives; [`Tape::backward`]
//! replays their adjoints in reverse order and fills gradients for every
//! leaf created with [`Tape::leaf`]. One tape lives for one optimization
//! step.
//!
//! Values are 32-bit floats; reductions accumulate in f64 so the MSE over
//! millions of pixels stays stable. Gradients are only propagated along
//! paths that reach a trainable leaf; [`Tape::stop_gradient`] cuts a path
//! explicitly while passing values through untouched.
//!
//! The primitive set is exactly what the reconstruction pipeline needs:
//! elementwise arithmetic and trigonometry, reductions, 2D convolution,
//! batch normalization, leaky rectification, bilinear up-sampling,
//! bilinear gather (interpolated read), scatter-average, piecewise-linear
//! table lookup, reflective padding, cropping, row selection, and
//! isotropic total variation.

use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

mod conv;
mod norm;
mod sample;

pub use norm::{BnMode, BnStats};

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {0}")]
    ShapeMismatch(&'static str),
    #[error("backward requires a scalar loss")]
    NotScalarLoss,
}

/// Tensor extents in NCHW order. Flat vectors live in the W axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn nchw(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn flat(len: usize) -> Self {
        Shape::nchw(1, 1, 1, len)
    }

    pub fn scalar() -> Self {
        Shape::nchw(1, 1, 1, 1)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Neg,
    Sqrt,
    Sin,
    Cos,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

pub(crate) enum Op {
    Leaf {
        #[allow(dead_code)]
        trainable: bool,
    },
    Unary {
        kind: UnaryKind,
        input: Var,
    },
    AddScalar {
        input: Var,
        #[allow(dead_code)]
        scalar: f32,
    },
    MulScalar {
        input: Var,
        scalar: f32,
    },
    LeakyRelu {
        input: Var,
        slope: f32,
    },
    Binary {
        kind: BinaryKind,
        lhs: Var,
        rhs: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    StopGradient {
        #[allow(dead_code)]
        input: Var,
    },
    Conv2d(conv::Conv2dOp),
    BatchNorm(norm::BatchNormOp),
    Upsample2x {
        input: Var,
    },
    PadReflect {
        input: Var,
        pads: [usize; 4],
    },
    Crop {
        input: Var,
        top: usize,
        left: usize,
    },
    GatherBilinear(sample::GatherOp),
    ScatterMean(sample::ScatterOp),
    Interp1d {
        nodes: Var,
        ts: Var,
    },
    IndexSelect {
        input: Var,
        indices: Vec<u32>,
    },
    SelectItem {
        input: Var,
        item: usize,
    },
    Reshape {
        input: Var,
    },
    ConcatW {
        inputs: Vec<Var>,
    },
    TvIso {
        input: Var,
    },
}

pub(crate) struct Node {
    pub(crate) shape: Shape,
    pub(crate) value: Vec<f32>,
    pub(crate) needs_grad: bool,
    op: Op,
}

/// Ordered record of executed primitives with the saved inputs their
/// adjoints need.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, shape: Shape, value: Vec<f32>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.len(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Creates a trainable leaf; [`Tape::backward`] will fill its gradient.
    pub fn leaf(&mut self, shape: Shape, data: Vec<f32>) -> Var {
        self.push(shape, data, true, Op::Leaf { trainable: true })
    }

    /// Creates a non-trainable input.
    pub fn constant(&mut self, shape: Shape, data: Vec<f32>) -> Var {
        self.push(shape, data, false, Op::Leaf { trainable: false })
    }

    pub fn scalar(&mut self, v: f32) -> Var {
        self.constant(Shape::scalar(), vec![v])
    }

    pub fn scalar_leaf(&mut self, v: f32) -> Var {
        self.leaf(Shape::scalar(), vec![v])
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    /// Gradient filled by the latest [`Tape::backward`]; `None` when the
    /// node lies on no path to the loss.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ----- elementwise -----

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let value: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| match kind {
                UnaryKind::Neg => -x,
                UnaryKind::Sqrt => crate::math::sqrt_f32(x.max(0.0)),
                UnaryKind::Sin => crate::math::sin_f32(x),
                UnaryKind::Cos => crate::math::cos_f32(x),
                UnaryKind::Exp => crate::math::exp_f32(x),
            })
            .collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(self.nodes[a.0].shape, value, needs, Op::Unary { kind, input: a })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    /// Elementwise square root; negative inputs clamp to zero (the warp
    /// only feeds it sums of squares).
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sin, a)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Cos, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let value: Vec<f32> = self.nodes[a.0].value.iter().map(|&x| x + s).collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(
            self.nodes[a.0].shape,
            value,
            needs,
            Op::AddScalar { input: a, scalar: s },
        )
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> Var {
        let value: Vec<f32> = self.nodes[a.0].value.iter().map(|&x| x * s).collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(
            self.nodes[a.0].shape,
            value,
            needs,
            Op::MulScalar { input: a, scalar: s },
        )
    }

    /// Leaky rectification `x > 0 ? x : slope * x`.
    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let value: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(
            self.nodes[a.0].shape,
            value,
            needs,
            Op::LeakyRelu { input: a, slope },
        )
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.nodes[a.0].shape, self.nodes[b.0].shape);
        let out_shape = if sa == sb {
            sa
        } else if sa.is_scalar() {
            sb
        } else if sb.is_scalar() {
            sa
        } else {
            return Err(AutodiffError::ShapeMismatch("binary op"));
        };
        let len = out_shape.len();
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (stride_a, stride_b) = (
            if sa.is_scalar() && len > 1 { 0 } else { 1 },
            if sb.is_scalar() && len > 1 { 0 } else { 1 },
        );
        let mut value = Vec::with_capacity(len);
        for i in 0..len {
            let x = va[i * stride_a];
            let y = vb[i * stride_b];
            value.push(match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            });
        }
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(out_shape, value, needs, Op::Binary { kind, lhs: a, rhs: b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Div, a, b)
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Var {
        let acc: f64 = self.nodes[a.0].value.iter().map(|&x| x as f64).sum();
        let needs = self.nodes[a.0].needs_grad;
        self.push(Shape::scalar(), vec![acc as f32], needs, Op::Sum { input: a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let acc: f64 = self.nodes[a.0].value.iter().map(|&x| x as f64).sum();
        let needs = self.nodes[a.0].needs_grad;
        self.push(
            Shape::scalar(),
            vec![(acc / n as f64) as f32],
            needs,
            Op::Mean { input: a },
        )
    }

    /// Value-transparent gradient blocker: the forward output is
    /// bit-identical to the input, and the adjoint contribution through
    /// this edge is exactly zero.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.push(
            self.nodes[a.0].shape,
            value,
            false,
            Op::StopGradient { input: a },
        )
    }

    /// Selects entries along the last (W) axis.
    pub fn index_select(&mut self, a: Var, indices: &[u32]) -> Result<Var, AutodiffError> {
        let shape = self.nodes[a.0].shape;
        let rows = shape.n * shape.c * shape.h;
        let w = shape.w;
        if indices.iter().any(|&i| i as usize >= w) {
            return Err(AutodiffError::ShapeMismatch("index_select out of range"));
        }
        let mut value = Vec::with_capacity(rows * indices.len());
        for r in 0..rows {
            let base = r * w;
            for &i in indices {
                value.push(self.nodes[a.0].value[base + i as usize]);
            }
        }
        let out_shape = Shape::nchw(shape.n, shape.c, shape.h, indices.len());
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(
            out_shape,
            value,
            needs,
            Op::IndexSelect {
                input: a,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Extracts batch item `item` as a `(1, C, H, W)` tensor.
    pub fn select_item(&mut self, a: Var, item: usize) -> Result<Var, AutodiffError> {
        let shape = self.nodes[a.0].shape;
        if item >= shape.n {
            return Err(AutodiffError::ShapeMismatch("select_item out of range"));
        }
        let block = shape.c * shape.h * shape.w;
        let value = self.nodes[a.0].value[item * block..(item + 1) * block].to_vec();
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(
            Shape::nchw(1, shape.c, shape.h, shape.w),
            value,
            needs,
            Op::SelectItem { input: a, item },
        ))
    }

    /// Reinterprets the tensor with a new shape of identical length.
    pub fn reshape(&mut self, a: Var, shape: Shape) -> Result<Var, AutodiffError> {
        if shape.len() != self.nodes[a.0].shape.len() {
            return Err(AutodiffError::ShapeMismatch("reshape length"));
        }
        let value = self.nodes[a.0].value.clone();
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(shape, value, needs, Op::Reshape { input: a }))
    }

    /// Concatenates flat vectors along the W axis; all inputs must share
    /// `n = c = h = 1`.
    pub fn concat_w(&mut self, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if inputs.is_empty() {
            return Err(AutodiffError::ShapeMismatch("concat_w of nothing"));
        }
        let mut value = Vec::new();
        let mut needs = false;
        for &v in inputs {
            let s = self.nodes[v.0].shape;
            if s.n != 1 || s.c != 1 || s.h != 1 {
                return Err(AutodiffError::ShapeMismatch("concat_w inputs must be flat"));
            }
            value.extend_from_slice(&self.nodes[v.0].value);
            needs |= self.nodes[v.0].needs_grad;
        }
        let len = value.len();
        Ok(self.push(
            Shape::flat(len),
            value,
            needs,
            Op::ConcatW {
                inputs: inputs.to_vec(),
            },
        ))
    }

    // ----- backward -----

    /// Replays adjoints in reverse order, filling gradient slots for
    /// every node on a path from a trainable leaf to `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if !self.nodes[loss.0].shape.is_scalar() {
            return Err(AutodiffError::NotScalarLoss);
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            self.grads[loss.0] = Some(vec![1.0]);
            for i in (0..=loss.0).rev() {
                if !self.nodes[i].needs_grad || self.grads[i].is_none() {
                    continue;
                }
                let g_out = self.grads[i].take().expect("checked above");
                self.adjoint(i, &g_out);
                self.grads[i] = Some(g_out);
            }
        }
        // Trainable leaves on no path to the loss read as zero.
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf { trainable: true }) && self.grads[i].is_none()
            {
                self.grads[i] = Some(vec![0.0; self.nodes[i].value.len()]);
            }
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> &mut [f32] {
        let len = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0f32; len])
    }

    fn adjoint(&mut self, i: usize, g_out: &[f32]) {
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Unary { kind, input } => {
                let (kind, input) = (*kind, *input);
                if !self.needs_grad(input) {
                    return;
                }
                let contrib: Vec<f32> = {
                    let x = &self.nodes[input.0].value;
                    let y = &self.nodes[i].value;
                    g_out
                        .iter()
                        .enumerate()
                        .map(|(j, &g)| match kind {
                            UnaryKind::Neg => -g,
                            UnaryKind::Sqrt => {
                                if y[j] > 0.0 {
                                    g * 0.5 / y[j]
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sin => g * crate::math::cos_f32(x[j]),
                            UnaryKind::Cos => -g * crate::math::sin_f32(x[j]),
                            UnaryKind::Exp => g * y[j],
                        })
                        .collect()
                };
                accumulate(self.grad_buf(input), &contrib);
            }
            Op::AddScalar { input, .. } => {
                let input = *input;
                if self.needs_grad(input) {
                    accumulate(self.grad_buf(input), g_out);
                }
            }
            Op::MulScalar { input, scalar } => {
                let (input, s) = (*input, *scalar);
                if self.needs_grad(input) {
                    let contrib: Vec<f32> = g_out.iter().map(|&g| g * s).collect();
                    accumulate(self.grad_buf(input), &contrib);
                }
            }
            Op::LeakyRelu { input, slope } => {
                let (input, slope) = (*input, *slope);
                if self.needs_grad(input) {
                    let contrib: Vec<f32> = {
                        let x = &self.nodes[input.0].value;
                        g_out
                            .iter()
                            .zip(x.iter())
                            .map(|(&g, &xv)| if xv > 0.0 { g } else { g * slope })
                            .collect()
                    };
                    accumulate(self.grad_buf(input), &contrib);
                }
            }
            Op::Binary { kind, lhs, rhs } => {
                let (kind, lhs, rhs) = (*kind, *lhs, *rhs);
                let len = g_out.len();
                let (la, lb) = (
                    self.nodes[lhs.0].value.len(),
                    self.nodes[rhs.0].value.len(),
                );
                let (stride_a, stride_b) = (
                    if la == 1 && len > 1 { 0 } else { 1 },
                    if lb == 1 && len > 1 { 0 } else { 1 },
                );
                if self.needs_grad(lhs) {
                    let contrib: Vec<f32> = {
                        let vb = &self.nodes[rhs.0].value;
                        match kind {
                            BinaryKind::Add | BinaryKind::Sub => g_out.to_vec(),
                            BinaryKind::Mul => g_out
                                .iter()
                                .enumerate()
                                .map(|(j, &g)| g * vb[j * stride_b])
                                .collect(),
                            BinaryKind::Div => g_out
                                .iter()
                                .enumerate()
                                .map(|(j, &g)| g / vb[j * stride_b])
                                .collect(),
                        }
                    };
                    if stride_a == 0 {
                        let total: f64 = contrib.iter().map(|&x| x as f64).sum();
                        self.grad_buf(lhs)[0] += total as f32;
                    } else {
                        accumulate(self.grad_buf(lhs), &contrib);
                    }
                }
                if self.needs_grad(rhs) {
                    let contrib: Vec<f32> = {
                        let va = &self.nodes[lhs.0].value;
                        let vb = &self.nodes[rhs.0].value;
                        match kind {
                            BinaryKind::Add => g_out.to_vec(),
                            BinaryKind::Sub => g_out.iter().map(|&g| -g).collect(),
                            BinaryKind::Mul => g_out
                                .iter()
                                .enumerate()
                                .map(|(j, &g)| g * va[j * stride_a])
                                .collect(),
                            BinaryKind::Div => g_out
                                .iter()
                                .enumerate()
                                .map(|(j, &g)| {
                                    let b = vb[j * stride_b];
                                    -g * va[j * stride_a] / (b * b)
                                })
                                .collect(),
                        }
                    };
                    if stride_b == 0 {
                        let total: f64 = contrib.iter().map(|&x| x as f64).sum();
                        self.grad_buf(rhs)[0] += total as f32;
                    } else {
                        accumulate(self.grad_buf(rhs), &contrib);
                    }
                }
            }
            Op::Sum { input } => {
                let input = *input;
                if self.needs_grad(input) {
                    let g = g_out[0];
                    for slot in self.grad_buf(input).iter_mut() {
                        *slot += g;
                    }
                }
            }
            Op::Mean { input } => {
                let input = *input;
                if self.needs_grad(input) {
                    let n = self.nodes[input.0].value.len().max(1);
                    let g = g_out[0] / n as f32;
                    for slot in self.grad_buf(input).iter_mut() {
                        *slot += g;
                    }
                }
            }
            Op::StopGradient { .. } => {}
            Op::Conv2d(_) => conv::adjoint(self, i, g_out),
            Op::BatchNorm(_) => norm::adjoint(self, i, g_out),
            Op::Upsample2x { .. }
            | Op::PadReflect { .. }
            | Op::Crop { .. }
            | Op::GatherBilinear(_)
            | Op::ScatterMean(_)
            | Op::Interp1d { .. }
            | Op::TvIso { .. } => sample::adjoint(self, i, g_out),
            Op::IndexSelect { input, indices } => {
                let input = *input;
                if self.needs_grad(input) {
                    let indices = indices.clone();
                    let shape = self.nodes[input.0].shape;
                    let rows = shape.n * shape.c * shape.h;
                    let w = shape.w;
                    let k = indices.len();
                    let buf = self.grad_buf(input);
                    for r in 0..rows {
                        for (j, &idx) in indices.iter().enumerate() {
                            buf[r * w + idx as usize] += g_out[r * k + j];
                        }
                    }
                }
            }
            Op::SelectItem { input, item } => {
                let (input, item) = (*input, *item);
                if self.needs_grad(input) {
                    let shape = self.nodes[input.0].shape;
                    let block = shape.c * shape.h * shape.w;
                    let buf = self.grad_buf(input);
                    accumulate(&mut buf[item * block..(item + 1) * block], g_out);
                }
            }
            Op::Reshape { input } => {
                let input = *input;
                if self.needs_grad(input) {
                    accumulate(self.grad_buf(input), g_out);
                }
            }
            Op::ConcatW { inputs } => {
                let inputs = inputs.clone();
                let mut offset = 0usize;
                for v in inputs {
                    let len = self.nodes[v.0].value.len();
                    if self.needs_grad(v) {
                        accumulate(self.grad_buf(v), &g_out[offset..offset + len]);
                    }
                    offset += len;
                }
            }
        }
    }
}

#[inline]
fn accumulate(buf: &mut [f32], contrib: &[f32]) {
    debug_assert_eq!(buf.len(), contrib.len());
    for (b, &c) in buf.iter_mut().zip(contrib.iter()) {
        *b += c;
    }
}

#[cfg(test)]
pub(crate) mod testutil;
