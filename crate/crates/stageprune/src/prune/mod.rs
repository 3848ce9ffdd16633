//! Structured pruning backends. Each one turns a stage's calibration
//! activations into a full per-layer trajectory: an ordered removal of
//! structures from level 0 (dense) to full removal, with nested masks and,
//! for the second-order backend, compensated weight snapshots per level.

pub mod layerdrop;
pub mod obs;
pub mod wanda;

pub use layerdrop::{layerdrop_scores, layerdrop_trajectory, BlockRedundancy};
pub use obs::{obs_compensation, obs_importance, obs_prune_layer};
pub use wanda::{wanda_prune_layer, wanda_scores, WandaScores};

use serde::{Deserialize, Serialize};

use crate::calib::{capture_activations, CalibrationSet};
use crate::diffusion::model::DenoiserModel;
use crate::error::{Error, Result};
use crate::linalg::{gram, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Obs,
    Wanda,
    LayerDrop,
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Backend::Obs => write!(f, "obs"),
            Backend::Wanda => write!(f, "wanda"),
            Backend::LayerDrop => write!(f, "layerdrop"),
        }
    }
}

/// Column-group structure of one prunable layer: equally sized index sets
/// partitioning the target matrix's prunable columns.
#[derive(Debug, Clone)]
pub struct StructureSpec {
    pub layer_id: String,
    pub groups: Vec<Vec<usize>>,
}

impl StructureSpec {
    pub fn new(layer_id: String, groups: Vec<Vec<usize>>) -> Result<StructureSpec> {
        if groups.is_empty() {
            return Err(Error::InvalidConfig(format!("{layer_id}: no groups")));
        }
        let size = groups[0].len();
        if size == 0 || groups.iter().any(|g| g.len() != size) {
            return Err(Error::InvalidConfig(format!(
                "{layer_id}: groups must be equal-sized"
            )));
        }
        Ok(StructureSpec { layer_id, groups })
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }
}

/// One greedy removal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneStep {
    pub removed_group: u16,
    pub importance: f64,
}

/// Full pruning trajectory of one layer (or of the whole model for block
/// dropping) at one stage. Index `k` always means "k structures removed";
/// masks are nested in `k`.
#[derive(Debug, Clone)]
pub struct LayerTrajectory {
    pub stage: usize,
    pub layer_id: String,
    pub group_count: usize,
    pub payload: TrajectoryPayload,
}

#[derive(Debug, Clone)]
pub enum TrajectoryPayload {
    /// Compensated snapshots: `snapshots[k]` is the target matrix after `k`
    /// greedy removals, `removed_groups_at[k]` the sorted removed group ids.
    Obs {
        steps: Vec<PruneStep>,
        snapshots: Vec<Matrix>,
        removed_groups_at: Vec<Vec<u16>>,
    },
    /// Mask-only: `removed_groups_at[k]` lists the k lowest-scoring groups.
    Masks { removed_groups_at: Vec<Vec<u16>> },
    /// Block dropping: `dropped_at[k]` lists the k most redundant blocks.
    Drops { dropped_at: Vec<Vec<u16>> },
}

impl LayerTrajectory {
    /// Sorted removed-structure ids at depth `k`.
    pub fn removed_at(&self, k: usize) -> &[u16] {
        match &self.payload {
            TrajectoryPayload::Obs {
                removed_groups_at, ..
            } => &removed_groups_at[k],
            TrajectoryPayload::Masks { removed_groups_at } => &removed_groups_at[k],
            TrajectoryPayload::Drops { dropped_at } => &dropped_at[k],
        }
    }

    pub fn max_depth(&self) -> usize {
        self.group_count
    }
}

/// Trajectories for every stage, ready to pack into a route database.
#[derive(Debug, Clone)]
pub struct StageTrajectories {
    pub backend: Backend,
    pub num_stages: usize,
    /// Outer index: stage. Inner: one entry per prunable layer (a single
    /// model-wide entry for block dropping).
    pub layers: Vec<Vec<LayerTrajectory>>,
}

/// Maps a global sparsity level in `[0, l_max]` onto a trajectory depth in
/// `[0, group_count]`, proportionally with half-up rounding. A layer whose
/// group count equals `l_max` maps one-to-one; coarser layers advance at the
/// matching fraction. Monotone in `level`, 0 ↦ 0 and `l_max` ↦ full removal.
pub fn depth_for_level(group_count: usize, level: usize, l_max: usize) -> usize {
    if l_max == 0 {
        return 0;
    }
    (2 * group_count * level + l_max) / (2 * l_max)
}

/// Runs the chosen backend once per stage, using only that stage's
/// activations, and returns the complete trajectory set.
pub fn build_stage_trajectories(
    model: &DenoiserModel,
    backend: Backend,
    calibs: &[CalibrationSet],
    lambda_frac: f64,
) -> Result<StageTrajectories> {
    if calibs.is_empty() {
        return Err(Error::InvalidConfig(
            "need one calibration set per stage".into(),
        ));
    }
    let mut layers = Vec::with_capacity(calibs.len());
    for calib in calibs {
        if calib.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "stage {}: empty calibration",
                calib.stage
            )));
        }
        let stage = calib.stage;
        match backend {
            Backend::LayerDrop => {
                let scores = layerdrop_scores(model, calib)
                    .map_err(|e| Error::DegenerateActivations(format!("stage {stage}: {e}")))?;
                let traj = layerdrop_trajectory(&scores, model.config.num_blocks);
                layers.push(vec![LayerTrajectory {
                    stage,
                    layer_id: "model.blocks".into(),
                    group_count: model.config.num_blocks,
                    payload: TrajectoryPayload::Drops { dropped_at: traj },
                }]);
            }
            Backend::Obs => {
                let bundle = capture_activations(model, calib);
                let mut stage_layers = Vec::new();
                for unit in model.prune_units() {
                    let x = bundle.matrix(unit.block, DenoiserModel::obs_capture_point(&unit));
                    let h = gram(&x)?.with_damping_frac(lambda_frac);
                    let spec = StructureSpec::new(
                        unit.layer_id.clone(),
                        (0..unit.group_count).map(|g| unit.group_cols(g)).collect(),
                    )?;
                    let w = model.obs_target(&unit);
                    let (steps, snapshots, removed) =
                        obs_prune_layer(w, &h, &spec, unit.group_count).map_err(|e| {
                            Error::SingularHessian(format!(
                                "stage {stage}, layer {}: {e}",
                                unit.layer_id
                            ))
                        })?;
                    stage_layers.push(LayerTrajectory {
                        stage,
                        layer_id: unit.layer_id,
                        group_count: unit.group_count,
                        payload: TrajectoryPayload::Obs {
                            steps,
                            snapshots,
                            removed_groups_at: removed,
                        },
                    });
                }
                layers.push(stage_layers);
            }
            Backend::Wanda => {
                let bundle = capture_activations(model, calib);
                let mut stage_layers = Vec::new();
                for unit in model.prune_units() {
                    let x = bundle.matrix(unit.block, DenoiserModel::wanda_capture_point(&unit));
                    let scored = model.wanda_scored_matrix(&unit);
                    let row_groups = model.wanda_row_groups(&unit);
                    let norm = match unit.slot {
                        crate::diffusion::model::PruneSlot::Attn => wanda::GroupNorm::PerRow,
                        crate::diffusion::model::PruneSlot::Mlp => wanda::GroupNorm::PerRowPerInput,
                    };
                    let scores = wanda_scores(&scored, &x, &row_groups, norm)?;
                    let removed = wanda_prune_layer(&scores, unit.group_count);
                    stage_layers.push(LayerTrajectory {
                        stage,
                        layer_id: unit.layer_id,
                        group_count: unit.group_count,
                        payload: TrajectoryPayload::Masks {
                            removed_groups_at: removed,
                        },
                    });
                }
                layers.push(stage_layers);
            }
        }
    }
    Ok(StageTrajectories {
        backend,
        num_stages: calibs.len(),
        layers,
    })
}
