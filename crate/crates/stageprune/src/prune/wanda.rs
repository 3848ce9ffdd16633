//! Activation-weighted magnitude scoring: `S_ij = |W_ij| · ‖X_j‖₂` where
//! `‖X_j‖₂` is the norm of input feature `j` over the calibration columns.
//! Structures are scored by averaging elementwise scores over their rows
//! (heads) or rows and inputs (MLP channels), and pruning is mask-only.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Normalization of a structure's aggregated score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupNorm {
    /// Mean over the structure's rows (attention-head style).
    PerRow,
    /// Mean over rows and input features (MLP-channel style).
    PerRowPerInput,
}

#[derive(Debug, Clone)]
pub struct WandaScores {
    /// Elementwise `|W| ⊙ input-feature norms`, same shape as the scored
    /// matrix.
    pub elementwise: Matrix,
    /// One aggregated score per removable structure.
    pub group_scores: Vec<f64>,
}

/// Scores `w` against activations `x` (`d_in × N`, feature-major).
/// `row_groups` lists, per removable structure, the rows of `w` it owns.
pub fn wanda_scores(
    w: &Matrix,
    x: &Matrix,
    row_groups: &[Vec<usize>],
    norm: GroupNorm,
) -> Result<WandaScores> {
    if w.cols != x.rows {
        return Err(Error::InvalidShape(format!(
            "weights are {}x{} but activations have {} features",
            w.rows, w.cols, x.rows
        )));
    }
    let mut feature_norms = vec![0.0f64; x.rows];
    for (j, norm_j) in feature_norms.iter_mut().enumerate() {
        let row = x.row(j);
        let mut s = 0.0;
        for &v in row {
            s += v * v;
        }
        *norm_j = s.sqrt();
    }
    let mut elementwise = Matrix::zeros(w.rows, w.cols);
    for i in 0..w.rows {
        for j in 0..w.cols {
            elementwise.set(i, j, w.get(i, j).abs() * feature_norms[j]);
        }
    }
    let group_scores = row_groups
        .iter()
        .map(|rows| {
            let mut total = 0.0;
            for &r in rows {
                for j in 0..w.cols {
                    total += elementwise.get(r, j);
                }
            }
            match norm {
                GroupNorm::PerRow => total / rows.len() as f64,
                GroupNorm::PerRowPerInput => total / (rows.len() * w.cols) as f64,
            }
        })
        .collect();
    Ok(WandaScores {
        elementwise,
        group_scores,
    })
}

/// Nested masks: level `k` removes the `k` lowest-scoring structures, ties
/// broken by ascending structure index. Entry `k` is sorted by id.
pub fn wanda_prune_layer(scores: &WandaScores, max_steps: usize) -> Vec<Vec<u16>> {
    let mut order: Vec<usize> = (0..scores.group_scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores.group_scores[a]
            .partial_cmp(&scores.group_scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let steps = max_steps.min(order.len());
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let mut removed: Vec<u16> = order[..k].iter().map(|&g| g as u16).collect();
        removed.sort_unstable();
        out.push(removed);
    }
    out
}
