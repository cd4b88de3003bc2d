//! 2D convolution with `same` padding, im2col plus GEMM.
//!
//! Kernel layout is `(c_out, c_in, kh, kw)` row-major, input and output
//! are NCHW. `same` padding follows the ceil(out = in / stride)
//! convention with the extra pixel on the bottom/right when the total
//! pad is odd. The backward pass reuses the same GEMM: `dK = dOut colT`
//! and `dIn = col2im(KT dOut)`.

use alloc::vec;
use alloc::vec::Vec;

use super::{AutodiffError, Op, Shape, Tape, Var};

pub(crate) struct Conv2dOp {
    pub input: Var,
    pub kernel: Var,
    pub bias: Var,
    pub stride: usize,
    pub pads: [usize; 4], // top, bottom, left, right
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn same_pads(input: usize, kernel: usize, stride: usize) -> (usize, usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2, total - total / 2)
}

/// Unfolds one batch item into a `(c_in*kh*kw, oh*ow)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    debug_assert_eq!(col.len(), c_in * kh * kw * oh * ow);
    let plane = h * w;
    let out_plane = oh * ow;
    for ci in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * out_plane;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad_top as isize;
                    let dst = row + oy * ow;
                    if iy < 0 || iy >= h as isize {
                        col[dst..dst + ow].fill(0.0);
                        continue;
                    }
                    let src_row = ci * plane + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad_left as isize;
                        col[dst + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            input[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column-matrix gradient back onto the input (scatter-add).
#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
    input_grad: &mut [f32],
) {
    let plane = h * w;
    let out_plane = oh * ow;
    for ci in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * out_plane;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad_top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = ci * plane + iy as usize * w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad_left as isize;
                        if ix >= 0 && ix < w as isize {
                            input_grad[dst_row + ix as usize] += col[src + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// `same`-padded 2D convolution. `kernel` is `(c_out, c_in, kh, kw)`,
    /// `bias` is flat `(c_out)`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var, AutodiffError> {
        let in_shape = self.shape(input);
        let k_shape = self.shape(kernel);
        let b_shape = self.shape(bias);
        if k_shape.c != in_shape.c {
            return Err(AutodiffError::ShapeMismatch("conv2d channels"));
        }
        if b_shape.len() != k_shape.n {
            return Err(AutodiffError::ShapeMismatch("conv2d bias"));
        }
        if stride == 0 {
            return Err(AutodiffError::ShapeMismatch("conv2d stride"));
        }
        let (n, c_in, h, w) = (in_shape.n, in_shape.c, in_shape.h, in_shape.w);
        let (c_out, kh, kw) = (k_shape.n, k_shape.h, k_shape.w);
        let (oh, pad_top, pad_bottom) = same_pads(h, kh, stride);
        let (ow, pad_left, pad_right) = same_pads(w, kw, stride);
        let out_plane = oh * ow;
        let ckk = c_in * kh * kw;

        // A 1x1 stride-1 convolution needs no unfolding: the input is
        // already the column matrix.
        let pointwise = kh == 1 && kw == 1 && stride == 1;
        let mut value = vec![0.0f32; n * c_out * out_plane];
        let mut col = if pointwise {
            Vec::new()
        } else {
            vec![0.0f32; ckk * out_plane]
        };
        {
            let in_val = &self.nodes[input.0].value;
            let k_val = &self.nodes[kernel.0].value;
            let b_val = &self.nodes[bias.0].value;
            for item in 0..n {
                let item_in = &in_val[item * c_in * h * w..(item + 1) * c_in * h * w];
                let cols: &[f32] = if pointwise {
                    item_in
                } else {
                    im2col(
                        item_in,
                        c_in,
                        h,
                        w,
                        kh,
                        kw,
                        stride,
                        pad_top,
                        pad_left,
                        oh,
                        ow,
                        &mut col,
                    );
                    &col
                };
                let out = &mut value[item * c_out * out_plane..(item + 1) * c_out * out_plane];
                gemm(
                    c_out,
                    ckk,
                    out_plane,
                    1.0,
                    k_val,
                    ckk as isize,
                    1,
                    cols,
                    out_plane as isize,
                    1,
                    0.0,
                    out,
                    out_plane as isize,
                    1,
                );
                for co in 0..c_out {
                    let b = b_val[co];
                    for v in &mut out[co * out_plane..(co + 1) * out_plane] {
                        *v += b;
                    }
                }
            }
        }
        let needs = self.needs_grad(input) || self.needs_grad(kernel) || self.needs_grad(bias);
        Ok(self.push(
            Shape::nchw(n, c_out, oh, ow),
            value,
            needs,
            Op::Conv2d(Conv2dOp {
                input,
                kernel,
                bias,
                stride,
                pads: [pad_top, pad_bottom, pad_left, pad_right],
            }),
        ))
    }
}

pub(crate) fn adjoint(tape: &mut Tape, node: usize, g_out: &[f32]) {
    let (input, kernel, bias, stride, pads) = match &tape.nodes[node].op {
        Op::Conv2d(op) => (op.input, op.kernel, op.bias, op.stride, op.pads),
        _ => unreachable!(),
    };
    let in_shape = tape.shape(input);
    let k_shape = tape.shape(kernel);
    let out_shape = tape.nodes[node].shape;
    let (n, c_in, h, w) = (in_shape.n, in_shape.c, in_shape.h, in_shape.w);
    let (c_out, kh, kw) = (k_shape.n, k_shape.h, k_shape.w);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let out_plane = oh * ow;
    let ckk = c_in * kh * kw;
    let (pad_top, pad_left) = (pads[0], pads[2]);

    let wants_input = tape.needs_grad(input);
    let wants_kernel = tape.needs_grad(kernel);
    let wants_bias = tape.needs_grad(bias);

    if wants_bias {
        let mut db = vec![0.0f32; c_out];
        for item in 0..n {
            for co in 0..c_out {
                let base = (item * c_out + co) * out_plane;
                let mut acc = 0.0f64;
                for &g in &g_out[base..base + out_plane] {
                    acc += g as f64;
                }
                db[co] += acc as f32;
            }
        }
        super::accumulate(tape.grad_buf(bias), &db);
    }

    if !wants_input && !wants_kernel {
        return;
    }

    let pointwise = kh == 1 && kw == 1 && stride == 1;
    let mut dk = if wants_kernel {
        vec![0.0f32; c_out * ckk]
    } else {
        Vec::new()
    };
    let mut din = if wants_input {
        vec![0.0f32; n * c_in * h * w]
    } else {
        Vec::new()
    };
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![0.0f32; ckk * out_plane]
    };
    let mut dcol = if pointwise && !wants_input {
        Vec::new()
    } else {
        vec![0.0f32; ckk * out_plane]
    };
    {
        let in_val = &tape.nodes[input.0].value;
        let k_val = &tape.nodes[kernel.0].value;
        for item in 0..n {
            let g_item = &g_out[item * c_out * out_plane..(item + 1) * c_out * out_plane];
            let item_in = &in_val[item * c_in * h * w..(item + 1) * c_in * h * w];
            if wants_kernel {
                let cols: &[f32] = if pointwise {
                    item_in
                } else {
                    im2col(
                        item_in,
                        c_in,
                        h,
                        w,
                        kh,
                        kw,
                        stride,
                        pad_top,
                        pad_left,
                        oh,
                        ow,
                        &mut col,
                    );
                    &col
                };
                // dK (c_out x ckk) += dOut (c_out x L) * colT (L x ckk)
                gemm(
                    c_out,
                    out_plane,
                    ckk,
                    1.0,
                    g_item,
                    out_plane as isize,
                    1,
                    cols,
                    1,
                    out_plane as isize,
                    1.0,
                    &mut dk,
                    ckk as isize,
                    1,
                );
            }
            if wants_input {
                if pointwise {
                    // dIn accumulates KT dOut directly.
                    gemm(
                        ckk,
                        c_out,
                        out_plane,
                        1.0,
                        k_val,
                        1,
                        ckk as isize,
                        g_item,
                        out_plane as isize,
                        1,
                        1.0,
                        &mut din[item * c_in * h * w..(item + 1) * c_in * h * w],
                        out_plane as isize,
                        1,
                    );
                } else {
                    // dCol (ckk x L) = KT (ckk x c_out) * dOut (c_out x L)
                    gemm(
                        ckk,
                        c_out,
                        out_plane,
                        1.0,
                        k_val,
                        1,
                        ckk as isize,
                        g_item,
                        out_plane as isize,
                        1,
                        0.0,
                        &mut dcol,
                        out_plane as isize,
                        1,
                    );
                    col2im(
                        &dcol,
                        c_in,
                        h,
                        w,
                        kh,
                        kw,
                        stride,
                        pad_top,
                        pad_left,
                        oh,
                        ow,
                        &mut din[item * c_in * h * w..(item + 1) * c_in * h * w],
                    );
                }
            }
        }
    }
    if wants_kernel {
        super::accumulate(tape.grad_buf(kernel), &dk);
    }
    if wants_input {
        super::accumulate(tape.grad_buf(input), &din);
    }
}
