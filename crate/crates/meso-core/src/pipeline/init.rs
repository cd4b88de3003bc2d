//! Pose initialization: same-position or sequential cross-correlation.
//!
//! Cross-correlation slides the central crop of each frame over its
//! predecessor at the coarsest pyramid level and reads the translation
//! off the normalized-correlation peak. A camera shift `dX` moves image
//! content by `dX f_ph / (Z pitch)` pixels (the double inversion of the
//! optics makes the shift co-directional), so pixel offsets convert to
//! world offsets with `Z pitch / f_ph = pitch / M`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{downsample_plane, RgbFrame};
use crate::math;

/// Outcome of one pairwise correlation.
#[derive(Debug, Clone, PartialEq)]
pub enum InitEvent {
    /// Peak accepted: pixel offset at the coarse scale.
    Matched { pair: usize, dx_px: f64, dy_px: f64 },
    /// Peak ambiguous; the pair fell back to zero offset.
    AmbiguousFallback { pair: usize, reason: String },
}

/// Grayscale mean of the RGB planes.
fn to_gray(frame: &RgbFrame) -> Vec<f32> {
    let plane = frame.rows * frame.cols;
    let mut gray = Vec::with_capacity(plane);
    for j in 0..plane {
        gray.push((frame.rgb[j] + frame.rgb[plane + j] + frame.rgb[2 * plane + j]) / 3.0);
    }
    gray
}

/// Normalized cross-correlation of `template` against every valid
/// placement in `image`; returns (best placement row, col, score,
/// runner-up score at least 3 px away).
fn ncc_search(
    image: &[f32],
    (ih, iw): (usize, usize),
    template: &[f32],
    (th, tw): (usize, usize),
) -> (usize, usize, f64, f64) {
    let t_mean = template.iter().map(|&v| v as f64).sum::<f64>() / (th * tw) as f64;
    let t_dev: Vec<f64> = template.iter().map(|&v| v as f64 - t_mean).collect();
    let t_norm = math::sqrt(t_dev.iter().map(|d| d * d).sum::<f64>()).max(1e-12);

    let mut best = (0usize, 0usize, f64::MIN);
    let mut scores = Vec::new();
    for py in 0..=(ih - th) {
        for px in 0..=(iw - tw) {
            let mut s_sum = 0.0f64;
            for ty in 0..th {
                for tx in 0..tw {
                    s_sum += image[(py + ty) * iw + px + tx] as f64;
                }
            }
            let s_mean = s_sum / (th * tw) as f64;
            let mut dot = 0.0f64;
            let mut s_sq = 0.0f64;
            for ty in 0..th {
                for tx in 0..tw {
                    let s = image[(py + ty) * iw + px + tx] as f64 - s_mean;
                    dot += s * t_dev[ty * tw + tx];
                    s_sq += s * s;
                }
            }
            let score = dot / (math::sqrt(s_sq).max(1e-12) * t_norm);
            scores.push((py, px, score));
            if score > best.2 {
                best = (py, px, score);
            }
        }
    }
    let runner_up = scores
        .iter()
        .filter(|(py, px, _)| {
            let dy = *py as i64 - best.0 as i64;
            let dx = *px as i64 - best.1 as i64;
            dy.abs().max(dx.abs()) >= 3
        })
        .map(|&(_, _, s)| s)
        .fold(f64::MIN, f64::max);
    (best.0, best.1, best.2, runner_up)
}

/// Estimated sequential pixel offsets at the given downsampling factor:
/// `offsets[i]` is the coarse-pixel content shift of frame `i` relative
/// to frame `i - 1` (frame 0 gets zero).
pub fn cross_correlation_offsets(
    frames: &[RgbFrame],
    factor: usize,
) -> (Vec<(f64, f64)>, Vec<InitEvent>) {
    let mut offsets = Vec::with_capacity(frames.len());
    let mut events = Vec::new();
    offsets.push((0.0, 0.0));
    if frames.is_empty() {
        return (offsets, events);
    }
    let coarse: Vec<(Vec<f32>, usize, usize)> = frames
        .iter()
        .map(|f| {
            let gray = to_gray(f);
            let (g, rows, cols) = downsample_plane(&gray, f.rows, f.cols, factor);
            (g, rows, cols)
        })
        .collect();
    for pair in 1..frames.len() {
        let (prev, ph, pw) = (&coarse[pair - 1].0, coarse[pair - 1].1, coarse[pair - 1].2);
        let (cur, ch, cw) = (&coarse[pair].0, coarse[pair].1, coarse[pair].2);
        // Central crop of the current frame as the template.
        let th = (ch * 3 / 5).max(2).min(ph);
        let tw = (cw * 3 / 5).max(2).min(pw);
        let (ty0, tx0) = ((ch - th) / 2, (cw - tw) / 2);
        let mut template = Vec::with_capacity(th * tw);
        for r in 0..th {
            for c in 0..tw {
                template.push(cur[(ty0 + r) * cw + tx0 + c]);
            }
        }
        let (py, px, score, runner_up) = ncc_search(prev, (ph, pw), &template, (th, tw));
        let ambiguous = score < 0.2 || (runner_up.is_finite() && runner_up > 0.98 * score);
        if ambiguous {
            events.push(InitEvent::AmbiguousFallback {
                pair,
                reason: format!("peak {score:.3} runner-up {runner_up:.3}"),
            });
            offsets.push((0.0, 0.0));
            continue;
        }
        // Template home position minus found placement gives the content
        // shift of the current frame relative to the previous one.
        let dx = tx0 as f64 - px as f64;
        let dy = ty0 as f64 - py as f64;
        events.push(InitEvent::Matched {
            pair,
            dx_px: dx,
            dy_px: dy,
        });
        offsets.push((dx, dy));
    }
    (offsets, events)
}
