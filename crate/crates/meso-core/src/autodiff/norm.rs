//! Batch normalization over NCHW inputs.
//!
//! `Batch` mode normalizes with the current batch statistics (the DIP
//! fitting regime); `Frozen` mode applies caller-supplied running
//! statistics, making the output independent of batch composition.

use alloc::vec;
use alloc::vec::Vec;

use super::{AutodiffError, Op, Tape, Var};

/// Normalization statistics source.
#[derive(Debug, Clone, PartialEq)]
pub enum BnMode {
    /// Normalize with per-batch statistics computed over (N, H, W).
    Batch,
    /// Normalize with fixed statistics (one mean/variance per channel).
    Frozen { mean: Vec<f32>, var: Vec<f32> },
}

/// Per-channel batch statistics computed during a `Batch`-mode forward,
/// for tracking running statistics outside the tape.
#[derive(Debug, Clone, Default)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

pub(crate) struct BatchNormOp {
    pub input: Var,
    pub gamma: Var,
    pub beta: Var,
    /// Statistics actually used for normalization (batch or frozen).
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub batch_mode: bool,
}

impl Tape {
    /// Per-channel affine normalization `y = gamma (x - mu) / sqrt(var + eps) + beta`.
    ///
    /// Returns the output together with the statistics used, so callers
    /// can maintain running estimates.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
        mode: BnMode,
    ) -> Result<(Var, BnStats), AutodiffError> {
        let shape = self.shape(input);
        let (n, c, h, w) = (shape.n, shape.c, shape.h, shape.w);
        if self.shape(gamma).len() != c || self.shape(beta).len() != c {
            return Err(AutodiffError::ShapeMismatch("batch_norm affine"));
        }
        let plane = h * w;
        let count = (n * plane).max(1);

        let (mean, var, batch_mode) = match mode {
            BnMode::Batch => {
                let x = &self.nodes[input.0].value;
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for item in 0..n {
                        let base = (item * c + ch) * plane;
                        for &v in &x[base..base + plane] {
                            acc += v as f64;
                        }
                    }
                    let mu = acc / count as f64;
                    let mut acc2 = 0.0f64;
                    for item in 0..n {
                        let base = (item * c + ch) * plane;
                        for &v in &x[base..base + plane] {
                            let d = v as f64 - mu;
                            acc2 += d * d;
                        }
                    }
                    mean[ch] = mu as f32;
                    var[ch] = (acc2 / count as f64) as f32;
                }
                (mean, var, true)
            }
            BnMode::Frozen { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(AutodiffError::ShapeMismatch("batch_norm frozen stats"));
                }
                (mean, var, false)
            }
        };

        let inv_std: Vec<f32> = var
            .iter()
            .map(|&v| 1.0 / crate::math::sqrt_f32(v + eps))
            .collect();

        let mut value = vec![0.0f32; n * c * plane];
        {
            let x = &self.nodes[input.0].value;
            let g = &self.nodes[gamma.0].value;
            let b = &self.nodes[beta.0].value;
            for item in 0..n {
                for ch in 0..c {
                    let base = (item * c + ch) * plane;
                    let (mu, istd, ga, be) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                    for j in 0..plane {
                        value[base + j] = ga * (x[base + j] - mu) * istd + be;
                    }
                }
            }
        }

        let needs =
            self.needs_grad(input) || self.needs_grad(gamma) || self.needs_grad(beta);
        let stats = BnStats {
            mean: mean.clone(),
            var,
        };
        let out = self.push(
            shape,
            value,
            needs,
            Op::BatchNorm(BatchNormOp {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_mode,
            }),
        );
        Ok((out, stats))
    }
}

pub(crate) fn adjoint(tape: &mut Tape, node: usize, g_out: &[f32]) {
    let (input, gamma, beta, mean, inv_std, batch_mode) = match &tape.nodes[node].op {
        Op::BatchNorm(op) => (
            op.input,
            op.gamma,
            op.beta,
            op.mean.clone(),
            op.inv_std.clone(),
            op.batch_mode,
        ),
        _ => unreachable!(),
    };
    let shape = tape.shape(input);
    let (n, c, h, w) = (shape.n, shape.c, shape.h, shape.w);
    let plane = h * w;
    let count = (n * plane) as f64;

    // Per-channel reductions of dy and dy * x_hat.
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    {
        let x = &tape.nodes[input.0].value;
        for item in 0..n {
            for ch in 0..c {
                let base = (item * c + ch) * plane;
                let (mu, istd) = (mean[ch], inv_std[ch]);
                for j in 0..plane {
                    let dy = g_out[base + j] as f64;
                    let xhat = ((x[base + j] - mu) * istd) as f64;
                    sum_dy[ch] += dy;
                    sum_dy_xhat[ch] += dy * xhat;
                }
            }
        }
    }

    if tape.needs_grad(beta) {
        let db: Vec<f32> = sum_dy.iter().map(|&v| v as f32).collect();
        super::accumulate(tape.grad_buf(beta), &db);
    }
    if tape.needs_grad(gamma) {
        let dg: Vec<f32> = sum_dy_xhat.iter().map(|&v| v as f32).collect();
        super::accumulate(tape.grad_buf(gamma), &dg);
    }
    if tape.needs_grad(input) {
        let mut din = vec![0.0f32; n * c * plane];
        {
            let x = &tape.nodes[input.0].value;
            let g = &tape.nodes[gamma.0].value;
            for item in 0..n {
                for ch in 0..c {
                    let base = (item * c + ch) * plane;
                    let (mu, istd, ga) = (mean[ch] as f64, inv_std[ch] as f64, g[ch] as f64);
                    if batch_mode {
                        let m_dy = sum_dy[ch] / count;
                        let m_dy_xhat = sum_dy_xhat[ch] / count;
                        for j in 0..plane {
                            let dy = g_out[base + j] as f64;
                            let xhat = (x[base + j] as f64 - mu) * istd;
                            din[base + j] =
                                (ga * istd * (dy - m_dy - xhat * m_dy_xhat)) as f32;
                        }
                    } else {
                        for j in 0..plane {
                            let dy = g_out[base + j] as f64;
                            din[base + j] = (ga * istd * dy) as f32;
                        }
                    }
                }
            }
        }
        super::accumulate(tape.grad_buf(input), &din);
    }
}
