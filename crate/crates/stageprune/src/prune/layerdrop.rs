//! Block dropping: blocks whose output stays most parallel to their input
//! (cosine similarity averaged over calibration samples) are the most
//! redundant and are replaced by skip connections first.

use crate::calib::{capture_activations, CalibrationSet};
use crate::diffusion::model::{CapturePoint, DenoiserModel};
use crate::error::{Error, Result};

/// Mean input/output cosine similarity of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRedundancy {
    pub block: usize,
    pub mean_cosine: f64,
    /// Samples that entered the average.
    pub used: usize,
    /// Samples excluded for a zero-norm input or output.
    pub excluded: usize,
}

/// Cosine of two flattened activation vectors; `None` when either has zero
/// norm. The denominator is `sqrt(‖x‖²·‖y‖²)`, which makes `cos(x, x)`
/// exactly 1.0.
pub fn cosine_score(x: &[f64], y: &[f64]) -> Option<f64> {
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    if nx == 0.0 || ny == 0.0 {
        return None;
    }
    Some(dot / (nx * ny).sqrt())
}

/// Scores every block over the calibration set: per sample, the cosine
/// between the block's input and output token streams, averaged across
/// samples (and thereby across the stage's timesteps).
pub fn layerdrop_scores(
    model: &DenoiserModel,
    calib: &CalibrationSet,
) -> Result<Vec<BlockRedundancy>> {
    if calib.is_empty() {
        return Err(Error::InvalidConfig("empty calibration set".into()));
    }
    let bundle = capture_activations(model, calib);
    let tokens = model.config.tokens();
    let e = model.config.embed_dim;
    let chunk = tokens * e;
    let mut out = Vec::with_capacity(model.config.num_blocks);
    for b in 0..model.config.num_blocks {
        let x_in = bundle.matrix(b, CapturePoint::BlockIn);
        let x_out = bundle.matrix(b, CapturePoint::BlockOut);
        // Feature-major matrices; flatten per-sample chunks column-wise.
        let n_samples = x_in.cols / tokens;
        let mut acc = 0.0;
        let mut used = 0usize;
        let mut excluded = 0usize;
        for s in 0..n_samples {
            let mut vin = Vec::with_capacity(chunk);
            let mut vout = Vec::with_capacity(chunk);
            for col in s * tokens..(s + 1) * tokens {
                for d in 0..e {
                    vin.push(x_in.get(d, col));
                    vout.push(x_out.get(d, col));
                }
            }
            match cosine_score(&vin, &vout) {
                Some(c) => {
                    acc += c;
                    used += 1;
                }
                None => excluded += 1,
            }
        }
        if used == 0 {
            return Err(Error::DegenerateActivations(format!(
                "block {b}: every calibration sample had zero-norm activations"
            )));
        }
        out.push(BlockRedundancy {
            block: b,
            mean_cosine: acc / used as f64,
            used,
            excluded,
        });
    }
    Ok(out)
}

/// Nested drop lists: level `k` drops the `k` blocks with the highest mean
/// cosine (closest to identity), ties broken by the lower block index.
/// Entry `k` is sorted by block id.
pub fn layerdrop_trajectory(scores: &[BlockRedundancy], max_steps: usize) -> Vec<Vec<u16>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .mean_cosine
            .partial_cmp(&scores[a].mean_cosine)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let steps = max_steps.min(order.len());
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let mut dropped: Vec<u16> = order[..k].iter().map(|&b| b as u16).collect();
        dropped.sort_unstable();
        out.push(dropped);
    }
    out
}
