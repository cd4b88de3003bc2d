//! Untrained encoder-decoder CNN mapping RGB camera images to
//! camera-centric height maps.
//!
//! The network is never trained on a dataset: its weights are optimized
//! jointly with the camera parameters for a single capture, acting as a
//! compression-based regularizer. There are no skip connections, so all
//! information flows through the bottleneck; the filter list (e.g.
//! `[16, 16, 16, 32, 32]`) sets the compression.
//!
//! Block structure:
//!
//! ```text
//! downsample: 3x3 conv stride 2 -> BN -> leaky ReLU
//!             -> 3x3 conv stride 1 -> BN -> leaky ReLU
//! upsample:   2x bilinear upsample -> 3x3 conv stride 1 -> BN -> leaky ReLU
//!             -> 1x1 conv stride 1 -> BN -> leaky ReLU
//! ```
//!
//! with `same` padding throughout; the decoder mirrors the encoder's
//! filter list in reverse. An uncounted linear 1x1 head maps the last
//! block to one channel, scaled by `s_h` (mm per unit output); the head
//! starts at zero so initial height maps are exactly flat.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{BnMode, BnStats, Shape, Tape, Var};
use crate::math;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Leaky rectification slope used by every block.
pub const LEAKY_SLOPE: f32 = 0.2;
/// Batch-normalization epsilon.
pub const BN_EPS: f32 = 1e-5;
/// Running-statistics momentum (`running = (1-m) running + m batch`).
pub const BN_STATS_MOMENTUM: f32 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum DipnetError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("malformed network blob: {0}")]
    MalformedBlob(&'static str),
}

/// Encoder filter counts; the decoder mirrors them in reverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub filters: Vec<usize>,
}

impl Architecture {
    /// The default architecture `[16, 16, 16, 32, 32]`.
    pub fn default_list() -> Self {
        Architecture {
            filters: vec![16, 16, 16, 32, 32],
        }
    }

    pub fn new(filters: Vec<usize>) -> Result<Self, DipnetError> {
        if filters.is_empty() {
            return Err(DipnetError::InvalidArchitecture("empty filter list"));
        }
        if filters.iter().any(|&k| k == 0) {
            return Err(DipnetError::InvalidArchitecture("zero filter count"));
        }
        Ok(Architecture { filters })
    }

    /// Number of downsample/upsample pairs.
    pub fn depth(&self) -> usize {
        self.filters.len()
    }

    /// Spatial divisibility the input is padded to.
    pub fn divisor(&self) -> usize {
        1 << self.depth()
    }
}

/// Closed-form parameter count of the block portion (head excluded):
/// conv contributes `k_out (k_in K^2 + 1)`, batch normalization 4 per
/// channel (affine pair plus tracked running statistics).
pub fn param_count(arch: &Architecture) -> usize {
    let mut total = 0usize;
    let mut c_in = 3usize;
    for &k in &arch.filters {
        // 3x3 stride-2 conv, BN, 3x3 stride-1 conv, BN
        total += k * (c_in * 9 + 1) + 4 * k + k * (k * 9 + 1) + 4 * k;
        c_in = k;
    }
    for &k in arch.filters.iter().rev() {
        // 3x3 conv, BN, 1x1 conv, BN
        total += k * (c_in * 9 + 1) + 4 * k + k * (k + 1) + 4 * k;
        c_in = k;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layer {
    Conv {
        #[allow(dead_code)]
        c_in: usize,
        #[allow(dead_code)]
        c_out: usize,
        #[allow(dead_code)]
        ksize: usize,
        stride: usize,
    },
    BatchNorm {
        #[allow(dead_code)]
        channels: usize,
    },
    LeakyRelu,
    Upsample,
}

/// One parameter tensor (convolution weight/bias or normalization
/// affine pair).
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Shape,
    pub data: Vec<f32>,
}

/// Running normalization statistics for one BN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Statistics mode for [`Network::forward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMode {
    /// Per-batch statistics (the optimization regime).
    Batch,
    /// Stored running statistics; output is independent of batch
    /// composition.
    Frozen,
}

/// The untrained CNN: architecture, parameters, running statistics, and
/// the output height scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub seed: u64,
    /// Height scale, mm per unit network output.
    pub s_h: f32,
    pub(crate) layers: Vec<Layer>,
    /// Parameter tensors in layer order (conv: weight then bias; BN:
    /// gamma then beta).
    pub params: Vec<Param>,
    pub running: Vec<RunningStats>,
}

fn layer_plan(arch: &Architecture) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut c_in = 3usize;
    for &k in &arch.filters {
        layers.push(Layer::Conv {
            c_in,
            c_out: k,
            ksize: 3,
            stride: 2,
        });
        layers.push(Layer::BatchNorm { channels: k });
        layers.push(Layer::LeakyRelu);
        layers.push(Layer::Conv {
            c_in: k,
            c_out: k,
            ksize: 3,
            stride: 1,
        });
        layers.push(Layer::BatchNorm { channels: k });
        layers.push(Layer::LeakyRelu);
        c_in = k;
    }
    for &k in arch.filters.iter().rev() {
        layers.push(Layer::Upsample);
        layers.push(Layer::Conv {
            c_in,
            c_out: k,
            ksize: 3,
            stride: 1,
        });
        layers.push(Layer::BatchNorm { channels: k });
        layers.push(Layer::LeakyRelu);
        layers.push(Layer::Conv {
            c_in: k,
            c_out: k,
            ksize: 1,
            stride: 1,
        });
        layers.push(Layer::BatchNorm { channels: k });
        layers.push(Layer::LeakyRelu);
        c_in = k;
    }
    // Linear head to one channel, excluded from the parameter count.
    layers.push(Layer::Conv {
        c_in,
        c_out: 1,
        ksize: 1,
        stride: 1,
    });
    layers
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two uniform draws.
    let u1 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let u1 = u1.max(1e-300);
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
}

/// Builds an untrained network with seeded He-initialized convolution
/// weights, unit/zero normalization affine, and a zero head.
pub fn build(arch: Architecture, seed: u64) -> Result<Network, DipnetError> {
    if arch.filters.is_empty() || arch.filters.iter().any(|&k| k == 0) {
        return Err(DipnetError::InvalidArchitecture("bad filter list"));
    }
    let layers = layer_plan(&arch);
    let head_index = layers.len() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut running = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        match *layer {
            Layer::Conv {
                c_in,
                c_out,
                ksize,
                ..
            } => {
                let fan_in = c_in * ksize * ksize;
                let std = math::sqrt(2.0 / fan_in as f64);
                let weight: Vec<f32> = (0..c_out * fan_in)
                    .map(|_| {
                        if i == head_index {
                            0.0
                        } else {
                            (normal(&mut rng) * std) as f32
                        }
                    })
                    .collect();
                params.push(Param {
                    shape: Shape::nchw(c_out, c_in, ksize, ksize),
                    data: weight,
                });
                params.push(Param {
                    shape: Shape::flat(c_out),
                    data: vec![0.0; c_out],
                });
            }
            Layer::BatchNorm { channels } => {
                params.push(Param {
                    shape: Shape::flat(channels),
                    data: vec![1.0; channels],
                });
                params.push(Param {
                    shape: Shape::flat(channels),
                    data: vec![0.0; channels],
                });
                running.push(RunningStats {
                    mean: vec![0.0; channels],
                    var: vec![1.0; channels],
                });
            }
            _ => {}
        }
    }
    Ok(Network {
        arch,
        seed,
        s_h: 1.0,
        layers,
        params,
        running,
    })
}

impl Network {
    /// Total stored parameter scalars for the block portion, counting 4
    /// per BN channel (affine pair plus running statistics) and excluding
    /// the head; must equal [`param_count`].
    pub fn block_param_scalars(&self) -> usize {
        let head_start = self.params.len() - 2;
        let trainable: usize = self.params[..head_start]
            .iter()
            .map(|p| p.data.len())
            .sum();
        let tracked: usize = self.running.iter().map(|r| r.mean.len() + r.var.len()).sum();
        trainable + tracked
    }

    /// Creates tape leaves for every parameter tensor, in order.
    pub fn push_params(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.shape, p.data.clone())
                } else {
                    tape.constant(p.shape, p.data.clone())
                }
            })
            .collect()
    }

    /// Runs the network on a batch of RGB frames `(N, 3, H, W)` in
    /// `[0, 1]`, returning `(N, 1, H, W)` height maps in mm.
    ///
    /// `param_vars` must come from [`Network::push_params`]. In `Batch`
    /// mode the per-layer batch statistics are returned so the caller can
    /// fold them into the running estimates.
    pub fn forward(
        &self,
        tape: &mut Tape,
        images: Var,
        param_vars: &[Var],
        mode: StatsMode,
    ) -> Result<(Var, Vec<BnStats>), DipnetError> {
        let in_shape = tape.shape(images);
        if in_shape.c != 3 {
            return Err(DipnetError::ShapeMismatch("input must have 3 channels"));
        }
        if param_vars.len() != self.params.len() {
            return Err(DipnetError::ShapeMismatch("parameter count"));
        }
        let (h, w) = (in_shape.h, in_shape.w);
        let div = self.arch.divisor();
        let target_h = h.div_ceil(div) * div;
        let target_w = w.div_ceil(div) * div;
        let (pad_top, pad_left) = ((target_h - h) / 2, (target_w - w) / 2);
        let pads = [
            pad_top,
            target_h - h - pad_top,
            pad_left,
            target_w - w - pad_left,
        ];

        // Zero-center the RGB input.
        let mut x = tape.add_scalar(images, -0.5);
        if pads.iter().any(|&p| p > 0) {
            x = tape
                .pad_reflect(x, pads)
                .map_err(|_| DipnetError::ShapeMismatch("input too small to pad"))?;
        }

        let mut stats_out = Vec::new();
        let mut param_ix = 0usize;
        let mut bn_ix = 0usize;
        for layer in &self.layers {
            match *layer {
                Layer::Conv { stride, .. } => {
                    let weight = param_vars[param_ix];
                    let bias = param_vars[param_ix + 1];
                    param_ix += 2;
                    x = tape
                        .conv2d(x, weight, bias, stride)
                        .map_err(|_| DipnetError::ShapeMismatch("conv2d"))?;
                }
                Layer::BatchNorm { .. } => {
                    let gamma = param_vars[param_ix];
                    let beta = param_vars[param_ix + 1];
                    param_ix += 2;
                    let bn_mode = match mode {
                        StatsMode::Batch => BnMode::Batch,
                        StatsMode::Frozen => BnMode::Frozen {
                            mean: self.running[bn_ix].mean.clone(),
                            var: self.running[bn_ix].var.clone(),
                        },
                    };
                    let (y, stats) = tape
                        .batch_norm(x, gamma, beta, BN_EPS, bn_mode)
                        .map_err(|_| DipnetError::ShapeMismatch("batch_norm"))?;
                    x = y;
                    stats_out.push(stats);
                    bn_ix += 1;
                }
                Layer::LeakyRelu => {
                    x = tape.leaky_relu(x, LEAKY_SLOPE);
                }
                Layer::Upsample => {
                    x = tape
                        .upsample_bilinear_2x(x)
                        .map_err(|_| DipnetError::ShapeMismatch("upsample"))?;
                }
            }
        }
        if pads.iter().any(|&p| p > 0) {
            x = tape
                .crop(x, pad_top, pad_left, h, w)
                .map_err(|_| DipnetError::ShapeMismatch("crop"))?;
        }
        let scaled = tape.mul_scalar(x, self.s_h);
        Ok((scaled, stats_out))
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BnStats]) {
        debug_assert_eq!(stats.len(), self.running.len());
        let m = BN_STATS_MOMENTUM;
        for (run, batch) in self.running.iter_mut().zip(stats.iter()) {
            for (r, &b) in run.mean.iter_mut().zip(batch.mean.iter()) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, &b) in run.var.iter_mut().zip(batch.var.iter()) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }

    /// Serializes to a binary blob with a one-line text header.
    pub fn to_bytes(&self) -> Vec<u8> {
        let arch: Vec<String> = self.arch.filters.iter().map(|k| format!("{k}")).collect();
        let header = format!(
            "MESONET1 arch={} seed={} s_h={} tensors={}\n",
            arch.join(","),
            self.seed,
            self.s_h,
            self.params.len() + 2 * self.running.len(),
        );
        let mut out = header.into_bytes();
        let push_slice = |out: &mut Vec<u8>, data: &[f32]| {
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in &self.params {
            push_slice(&mut out, &p.data);
        }
        for r in &self.running {
            push_slice(&mut out, &r.mean);
            push_slice(&mut out, &r.var);
        }
        out
    }

    /// Inverse of [`Network::to_bytes`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Network, DipnetError> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(DipnetError::MalformedBlob("missing header line"))?;
        let header = core::str::from_utf8(&bytes[..newline])
            .map_err(|_| DipnetError::MalformedBlob("header not UTF-8"))?;
        let mut arch = None;
        let mut seed = 0u64;
        let mut s_h = 1.0f32;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("MESONET1") {
            return Err(DipnetError::MalformedBlob("bad magic"));
        }
        for field in fields {
            let (key, value) = field
                .split_once('=')
                .ok_or(DipnetError::MalformedBlob("bad header field"))?;
            match key {
                "arch" => {
                    let filters: Result<Vec<usize>, _> =
                        value.split(',').map(|t| t.parse::<usize>()).collect();
                    arch = Some(filters.map_err(|_| DipnetError::MalformedBlob("bad arch list"))?);
                }
                "seed" => {
                    seed = value
                        .parse()
                        .map_err(|_| DipnetError::MalformedBlob("bad seed"))?;
                }
                "s_h" => {
                    s_h = value
                        .parse()
                        .map_err(|_| DipnetError::MalformedBlob("bad s_h"))?;
                }
                _ => {}
            }
        }
        let filters = arch.ok_or(DipnetError::MalformedBlob("missing arch"))?;
        let mut net = build(Architecture::new(filters)?, seed)?;
        net.s_h = s_h;

        let mut offset = newline + 1;
        let read_into = |data: &mut [f32], offset: &mut usize| -> Result<(), DipnetError> {
            let need = data.len() * 4;
            if *offset + need > bytes.len() {
                return Err(DipnetError::MalformedBlob("payload truncated"));
            }
            for v in data.iter_mut() {
                let mut le = [0u8; 4];
                le.copy_from_slice(&bytes[*offset..*offset + 4]);
                *v = f32::from_le_bytes(le);
                *offset += 4;
            }
            Ok(())
        };
        for p in &mut net.params {
            read_into(&mut p.data, &mut offset)?;
        }
        for r in &mut net.running {
            read_into(&mut r.mean, &mut offset)?;
            read_into(&mut r.var, &mut offset)?;
        }
        if offset != bytes.len() {
            return Err(DipnetError::MalformedBlob("trailing bytes"));
        }
        Ok(net)
    }
}
