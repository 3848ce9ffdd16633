//! Precomputed weight/mask database and the routing layer that assembles a
//! stage-conditioned model for any schedule.
//!
//! One dense backbone is shared by every candidate; the database holds, per
//! (stage, layer, depth), either a column-compacted compensated snapshot
//! (second-order backend) or a removed-structure list (mask backends).
//! Routing is pure table resolution: level 0 falls through to the backbone
//! and no weight arithmetic ever happens at lookup time.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::calib::StagePartition;
use crate::diffusion::model::{
    CompactWeights, DenoiserModel, ForwardRouting, ModelConfig, PruneSlot, PruneUnit, SlotWeights,
};
use crate::diffusion::{Denoiser, Image};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::prune::{depth_for_level, Backend, StageTrajectories, TrajectoryPayload};

/// One stored entry: the state of a layer after `depth` removals.
#[derive(Debug, Clone)]
pub enum EntryPayload {
    /// Compensated snapshot of the target matrix.
    Snapshot(Arc<CompactWeights>),
    /// Removed column ids on the target matrix.
    Mask(Arc<Vec<u16>>),
    /// Dropped block ids.
    Drops(Arc<Vec<u16>>),
}

impl EntryPayload {
    pub fn payload_bytes(&self) -> usize {
        match self {
            EntryPayload::Snapshot(s) => s.payload_bytes(),
            EntryPayload::Mask(m) => 2 * m.len(),
            EntryPayload::Drops(d) => 2 * d.len(),
        }
    }
}

/// All entries for one (stage, layer): `entries[d-1]` is depth `d`.
#[derive(Debug, Clone)]
pub struct LayerEntries {
    pub layer_id: String,
    /// Block index; `None` for the model-wide block-drop pseudo layer.
    pub block: Option<usize>,
    pub slot: Option<PruneSlot>,
    pub group_count: usize,
    pub entries: Vec<EntryPayload>,
}

#[derive(Debug, Clone)]
pub struct RouteDatabase {
    pub backend: Backend,
    pub num_stages: usize,
    pub l_max: usize,
    pub model_config: ModelConfig,
    pub backbone_checksum: u64,
    /// Outer: stage. Inner: per prunable layer.
    pub stages: Vec<Vec<LayerEntries>>,
}

/// Packs trajectories into a database keyed by (stage, layer, level).
/// Level 0 is implicit (the dense backbone); every level in `[1, l_max]`
/// must resolve, which requires each trajectory to reach its full depth.
pub fn build_db(
    model: &DenoiserModel,
    trajectories: &StageTrajectories,
    l_max: usize,
) -> Result<RouteDatabase> {
    if l_max == 0 {
        return Err(Error::InvalidConfig("l_max must be at least 1".into()));
    }
    let units: HashMap<String, PruneUnit> = model
        .prune_units()
        .into_iter()
        .map(|u| (u.layer_id.clone(), u))
        .collect();
    let mut stages = Vec::with_capacity(trajectories.num_stages);
    for (stage, stage_layers) in trajectories.layers.iter().enumerate() {
        let mut layers = Vec::with_capacity(stage_layers.len());
        for traj in stage_layers {
            let need = traj.group_count;
            let mut entries = Vec::with_capacity(need);
            match &traj.payload {
                TrajectoryPayload::Obs {
                    snapshots,
                    removed_groups_at,
                    ..
                } => {
                    let unit = units.get(&traj.layer_id).ok_or_else(|| {
                        Error::IncompleteTrajectory(format!("unknown layer {}", traj.layer_id))
                    })?;
                    if snapshots.len() <= need || removed_groups_at.len() <= need {
                        return Err(Error::IncompleteTrajectory(format!(
                            "stage {stage}, layer {}: trajectory stops at depth {}, need {need}",
                            traj.layer_id,
                            snapshots.len().saturating_sub(1)
                        )));
                    }
                    for depth in 1..=need {
                        let removed_cols = unit.cols_for_groups(&removed_groups_at[depth]);
                        entries.push(EntryPayload::Snapshot(Arc::new(CompactWeights::from_full(
                            &snapshots[depth],
                            &removed_cols,
                        ))));
                    }
                }
                TrajectoryPayload::Masks { removed_groups_at } => {
                    let unit = units.get(&traj.layer_id).ok_or_else(|| {
                        Error::IncompleteTrajectory(format!("unknown layer {}", traj.layer_id))
                    })?;
                    if removed_groups_at.len() <= need {
                        return Err(Error::IncompleteTrajectory(format!(
                            "stage {stage}, layer {}: masks stop at depth {}, need {need}",
                            traj.layer_id,
                            removed_groups_at.len().saturating_sub(1)
                        )));
                    }
                    for depth in 1..=need {
                        entries.push(EntryPayload::Mask(Arc::new(
                            unit.cols_for_groups(&removed_groups_at[depth]),
                        )));
                    }
                }
                TrajectoryPayload::Drops { dropped_at } => {
                    if dropped_at.len() <= need {
                        return Err(Error::IncompleteTrajectory(format!(
                            "stage {stage}: drop lists stop at depth {}, need {need}",
                            dropped_at.len().saturating_sub(1)
                        )));
                    }
                    for depth in 1..=need {
                        entries.push(EntryPayload::Drops(Arc::new(dropped_at[depth].clone())));
                    }
                }
            }
            let unit = units.get(&traj.layer_id);
            layers.push(LayerEntries {
                layer_id: traj.layer_id.clone(),
                block: unit.map(|u| u.block),
                slot: unit.map(|u| u.slot),
                group_count: traj.group_count,
                entries,
            });
        }
        stages.push(layers);
    }
    Ok(RouteDatabase {
        backend: trajectories.backend,
        num_stages: trajectories.num_stages,
        l_max,
        model_config: model.config.clone(),
        backbone_checksum: model.checksum(),
        stages,
    })
}

impl RouteDatabase {
    /// Total stored payload bytes across every (stage, layer, depth) entry.
    pub fn total_entry_bytes(&self) -> usize {
        self.stages
            .iter()
            .flatten()
            .flat_map(|l| l.entries.iter())
            .map(|e| e.payload_bytes())
            .sum()
    }

    /// Entry for (stage, layer index, level), `None` at depth 0.
    fn resolve(&self, stage: usize, layer: usize, level: u32) -> Option<&EntryPayload> {
        let l = &self.stages[stage][layer];
        let depth = depth_for_level(l.group_count, level as usize, self.l_max);
        if depth == 0 {
            None
        } else {
            Some(&l.entries[depth - 1])
        }
    }
}

// ─── routing ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum SlotResolution {
    Dense,
    Snapshot(Arc<CompactWeights>),
    Masked(Arc<Vec<u16>>),
}

/// Fully resolved weights for one stage.
#[derive(Debug, Clone)]
struct StageResolution {
    attn: Vec<SlotResolution>,
    mlp: Vec<SlotResolution>,
    dropped: Vec<bool>,
}

/// A schedule routed over the shared backbone: per sampler timestep, the
/// owning stage's resolved entries apply, and unpruned layers are used
/// straight from the backbone without copying.
pub struct RoutedModel<'a> {
    backbone: &'a DenoiserModel,
    partition: StagePartition,
    pub levels: Vec<u32>,
    resolutions: Vec<StageResolution>,
}

/// Resolves `levels` (one per stage) against the database. Pure table
/// lookup: the returned model shares payload allocations with the database.
pub fn route<'a>(
    db: &RouteDatabase,
    backbone: &'a DenoiserModel,
    partition: &StagePartition,
    levels: &[u32],
) -> Result<RoutedModel<'a>> {
    if levels.len() != db.num_stages {
        return Err(Error::InvalidSchedule(format!(
            "schedule has {} levels, database has {} stages",
            levels.len(),
            db.num_stages
        )));
    }
    if let Some(&bad) = levels.iter().find(|&&l| l as usize > db.l_max) {
        return Err(Error::InvalidSchedule(format!(
            "level {bad} exceeds the database maximum {}",
            db.l_max
        )));
    }
    if partition.num_stages != db.num_stages {
        return Err(Error::InvalidSchedule(format!(
            "partition has {} stages, database has {}",
            partition.num_stages, db.num_stages
        )));
    }
    if backbone.checksum() != db.backbone_checksum {
        return Err(Error::InvalidInput(
            "database was built for a different backbone checkpoint".into(),
        ));
    }
    let blocks = backbone.config.num_blocks;
    let mut resolutions = Vec::with_capacity(db.num_stages);
    for (stage, &level) in levels.iter().enumerate() {
        let mut res = StageResolution {
            attn: vec![SlotResolution::Dense; blocks],
            mlp: vec![SlotResolution::Dense; blocks],
            dropped: vec![false; blocks],
        };
        for (li, layer) in db.stages[stage].iter().enumerate() {
            let Some(entry) = db.resolve(stage, li, level) else {
                continue;
            };
            match entry {
                EntryPayload::Snapshot(snap) => {
                    assign_slot(&mut res, layer, SlotResolution::Snapshot(Arc::clone(snap)))?;
                }
                EntryPayload::Mask(mask) => {
                    assign_slot(&mut res, layer, SlotResolution::Masked(Arc::clone(mask)))?;
                }
                EntryPayload::Drops(drops) => {
                    for &b in drops.iter() {
                        res.dropped[b as usize] = true;
                    }
                }
            }
        }
        resolutions.push(res);
    }
    Ok(RoutedModel {
        backbone,
        partition: partition.clone(),
        levels: levels.to_vec(),
        resolutions,
    })
}

fn assign_slot(
    res: &mut StageResolution,
    layer: &LayerEntries,
    slot_res: SlotResolution,
) -> Result<()> {
    let block = layer
        .block
        .ok_or_else(|| Error::IncompleteTrajectory(format!("{}: missing block", layer.layer_id)))?;
    match layer.slot {
        Some(PruneSlot::Attn) => res.attn[block] = slot_res,
        Some(PruneSlot::Mlp) => res.mlp[block] = slot_res,
        None => {
            return Err(Error::IncompleteTrajectory(format!(
                "{}: missing slot kind",
                layer.layer_id
            )))
        }
    }
    Ok(())
}

struct StageRouting<'a>(&'a StageResolution);

impl ForwardRouting for StageRouting<'_> {
    fn block_dropped(&self, block: usize) -> bool {
        self.0.dropped[block]
    }
    fn attn_weights(&self, block: usize) -> SlotWeights<'_> {
        match &self.0.attn[block] {
            SlotResolution::Dense => SlotWeights::Dense,
            SlotResolution::Snapshot(s) => SlotWeights::Snapshot(s),
            SlotResolution::Masked(m) => SlotWeights::Masked(m),
        }
    }
    fn mlp_weights(&self, block: usize) -> SlotWeights<'_> {
        match &self.0.mlp[block] {
            SlotResolution::Dense => SlotWeights::Dense,
            SlotResolution::Snapshot(s) => SlotWeights::Snapshot(s),
            SlotResolution::Masked(m) => SlotWeights::Masked(m),
        }
    }
}

impl Denoiser for RoutedModel<'_> {
    fn predict_eps(&self, x: &Image, t: usize, label: usize) -> Image {
        let stage = self
            .partition
            .stage_of(t)
            .expect("timestep inside partition");
        self.backbone
            .forward_eps(x, t, label, &StageRouting(&self.resolutions[stage]), None)
    }
}

impl RoutedModel<'_> {
    /// Allocation pointer of the resolved entry, for byte-identity checks:
    /// routing must hand out the stored database allocation, not a copy.
    pub fn resolution_ptr(&self, stage: usize, block: usize, slot: PruneSlot) -> Option<*const ()> {
        let res = &self.resolutions[stage];
        let slot_res = match slot {
            PruneSlot::Attn => &res.attn[block],
            PruneSlot::Mlp => &res.mlp[block],
        };
        match slot_res {
            SlotResolution::Dense => None,
            SlotResolution::Snapshot(s) => Some(Arc::as_ptr(s) as *const ()),
            SlotResolution::Masked(m) => Some(Arc::as_ptr(m) as *const ()),
        }
    }
}

/// Materializes one stage of a schedule as a standalone dense-shaped model,
/// the way model stitching would: snapshots written back in full shape,
/// masked columns (and their fc1 rows) zeroed, dropped blocks neutralized by
/// zeroing their projections.
pub fn materialize_stage_model(
    db: &RouteDatabase,
    backbone: &DenoiserModel,
    stage: usize,
    level: u32,
) -> Result<DenoiserModel> {
    if level as usize > db.l_max {
        return Err(Error::InvalidSchedule(format!(
            "level {level} exceeds {}",
            db.l_max
        )));
    }
    let mut model = backbone.clone();
    for (li, layer) in db.stages[stage].iter().enumerate() {
        let Some(entry) = db.resolve(stage, li, level) else {
            continue;
        };
        match entry {
            EntryPayload::Snapshot(snap) => {
                let full = snap.to_full();
                let block = layer.block.expect("snapshot layers carry a block");
                match layer.slot.expect("snapshot layers carry a slot") {
                    PruneSlot::Attn => model.params.blocks[block].wo = full,
                    PruneSlot::Mlp => {
                        model.params.blocks[block].fc2 = full;
                        zero_mlp_channels(&mut model, block, &snap.removed_cols);
                    }
                }
            }
            EntryPayload::Mask(mask) => {
                let block = layer.block.expect("mask layers carry a block");
                match layer.slot.expect("mask layers carry a slot") {
                    PruneSlot::Attn => {
                        for &c in mask.iter() {
                            for r in 0..model.config.embed_dim {
                                model.params.blocks[block].wo.set(r, c as usize, 0.0);
                            }
                        }
                    }
                    PruneSlot::Mlp => {
                        for &c in mask.iter() {
                            for r in 0..model.config.embed_dim {
                                model.params.blocks[block].fc2.set(r, c as usize, 0.0);
                            }
                        }
                        zero_mlp_channels(&mut model, block, mask);
                    }
                }
            }
            EntryPayload::Drops(drops) => {
                let e = model.config.embed_dim;
                let h = model.config.mlp_hidden;
                for &b in drops.iter() {
                    model.params.blocks[b as usize].wo = Matrix::zeros(e, e);
                    model.params.blocks[b as usize].fc2 = Matrix::zeros(e, h);
                }
            }
        }
    }
    Ok(model)
}

/// A removed hidden channel vanishes in both MLP matrices.
fn zero_mlp_channels(model: &mut DenoiserModel, block: usize, channels: &[u16]) {
    let e = model.config.embed_dim;
    for &c in channels {
        for d in 0..e {
            model.params.blocks[block].fc1.set(c as usize, d, 0.0);
        }
        model.params.blocks[block].b_fc1[c as usize] = 0.0;
    }
}

// ─── memory accounting ─────────────────────────────────────────────────────

/// Analytic deployment-loading comparison for one schedule, in f32 bytes.
///
/// Stitching keeps one dense-shaped model copy per stage. Routing keeps the
/// shared backbone once plus, per prunable layer, the dense weights whenever
/// some stage still uses them (level 0, or any masked stage) and the
/// compacted stage snapshots otherwise; mask and drop lists are counted
/// whenever more than one stage shares the backbone.
#[derive(Debug, Clone, Serialize)]
pub struct MemoryReport {
    pub routing_bytes: usize,
    pub stitching_bytes: usize,
    pub ratio: f64,
    pub dense_model_bytes: usize,
    pub db_total_bytes: usize,
}

pub fn memory_report(db: &RouteDatabase, levels: &[u32]) -> Result<MemoryReport> {
    if levels.len() != db.num_stages {
        return Err(Error::InvalidSchedule(format!(
            "schedule has {} levels, database has {} stages",
            levels.len(),
            db.num_stages
        )));
    }
    let dense_model_bytes = db.model_config.param_count() * 4;
    let stitching_bytes = db.num_stages * dense_model_bytes;

    let mut routing_bytes = dense_model_bytes;
    let n = db.num_stages;
    let layer_count = db.stages[0].len();
    for li in 0..layer_count {
        let layer = &db.stages[0][li];
        let dense_layer_bytes = match layer.slot {
            Some(PruneSlot::Attn) => db.model_config.embed_dim * db.model_config.embed_dim * 4,
            Some(PruneSlot::Mlp) => db.model_config.embed_dim * db.model_config.mlp_hidden * 4,
            None => 0, // block dropping replaces no weights
        };
        let mut needs_dense = false;
        let mut extra = 0usize;
        for (stage, &level) in levels.iter().enumerate() {
            match db.resolve(stage, li, level) {
                None => needs_dense = true,
                Some(EntryPayload::Snapshot(snap)) => extra += snap.payload_bytes(),
                Some(EntryPayload::Mask(m)) => {
                    // Masks reference the shared dense weights. A single
                    // stage can bake them in place instead.
                    needs_dense = true;
                    if n > 1 {
                        extra += 2 * m.len();
                    }
                }
                Some(EntryPayload::Drops(d)) => {
                    if n > 1 {
                        extra += 2 * d.len();
                    }
                }
            }
        }
        if !needs_dense {
            routing_bytes -= dense_layer_bytes;
        }
        routing_bytes += extra;
    }

    Ok(MemoryReport {
        routing_bytes,
        stitching_bytes,
        ratio: routing_bytes as f64 / stitching_bytes as f64,
        dense_model_bytes,
        db_total_bytes: db.total_entry_bytes(),
    })
}

// ─── file format ───────────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"SPRD";
const VERSION: u32 = 1;

/// Writes the database. Layout, all little-endian: magic, version u32,
/// backend u8, num_stages u16, l_max u16, backbone checksum u64,
/// model-config JSON (u32 length + bytes), then per stage a layer count u16
/// and per layer a header (id, block, slot, group count) followed by one
/// payload per depth. Snapshot payloads store the removed and remaining
/// column ids (u16) and the compacted weights as f32.
pub fn save_db(db: &RouteDatabase, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let backend_tag: u8 = match db.backend {
        Backend::Obs => 0,
        Backend::Wanda => 1,
        Backend::LayerDrop => 2,
    };
    w.write_all(&[backend_tag])?;
    w.write_all(&(db.num_stages as u16).to_le_bytes())?;
    w.write_all(&(db.l_max as u16).to_le_bytes())?;
    w.write_all(&db.backbone_checksum.to_le_bytes())?;
    let cfg = serde_json::to_vec(&db.model_config)
        .map_err(|e| Error::InvalidInput(format!("config serialization: {e}")))?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;

    for stage in &db.stages {
        w.write_all(&(stage.len() as u16).to_le_bytes())?;
        for layer in stage {
            let id = layer.layer_id.as_bytes();
            w.write_all(&(id.len() as u16).to_le_bytes())?;
            w.write_all(id)?;
            w.write_all(&(layer.block.map_or(u16::MAX, |b| b as u16)).to_le_bytes())?;
            let slot_tag: u8 = match layer.slot {
                Some(PruneSlot::Attn) => 0,
                Some(PruneSlot::Mlp) => 1,
                None => 2,
            };
            w.write_all(&[slot_tag])?;
            w.write_all(&(layer.group_count as u16).to_le_bytes())?;
            for entry in &layer.entries {
                match entry {
                    EntryPayload::Snapshot(s) => {
                        w.write_all(&[0u8])?;
                        w.write_all(&(s.rows as u16).to_le_bytes())?;
                        w.write_all(&(s.full_cols as u16).to_le_bytes())?;
                        write_u16_list(&mut w, &s.removed_cols)?;
                        write_u16_list(&mut w, &s.remaining_cols)?;
                        for v in &s.data {
                            w.write_all(&v.to_le_bytes())?;
                        }
                    }
                    EntryPayload::Mask(m) => {
                        w.write_all(&[1u8])?;
                        write_u16_list(&mut w, m)?;
                    }
                    EntryPayload::Drops(d) => {
                        w.write_all(&[2u8])?;
                        write_u16_list(&mut w, d)?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_db(path: &Path) -> Result<RouteDatabase> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidInput(format!(
            "{}: not a route database",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::InvalidInput(format!(
            "unsupported database version {version}"
        )));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let backend = match tag[0] {
        0 => Backend::Obs,
        1 => Backend::Wanda,
        2 => Backend::LayerDrop,
        other => return Err(Error::InvalidInput(format!("unknown backend tag {other}"))),
    };
    let num_stages = read_u16(&mut r)? as usize;
    let l_max = read_u16(&mut r)? as usize;
    let backbone_checksum = read_u64(&mut r)?;
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let model_config: ModelConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| Error::InvalidInput(format!("config header: {e}")))?;
    model_config
        .check()
        .map_err(|e| Error::InvalidInput(format!("config header: {e}")))?;

    let mut stages = Vec::with_capacity(num_stages);
    for _ in 0..num_stages {
        let layer_count = read_u16(&mut r)? as usize;
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let id_len = read_u16(&mut r)? as usize;
            let mut id = vec![0u8; id_len];
            r.read_exact(&mut id)?;
            let layer_id =
                String::from_utf8(id).map_err(|_| Error::InvalidInput("bad layer id".into()))?;
            let block_raw = read_u16(&mut r)?;
            let block = if block_raw == u16::MAX {
                None
            } else {
                Some(block_raw as usize)
            };
            r.read_exact(&mut tag)?;
            let slot = match tag[0] {
                0 => Some(PruneSlot::Attn),
                1 => Some(PruneSlot::Mlp),
                2 => None,
                other => return Err(Error::InvalidInput(format!("unknown slot tag {other}"))),
            };
            let group_count = read_u16(&mut r)? as usize;
            let mut entries = Vec::with_capacity(group_count);
            for _ in 0..group_count {
                r.read_exact(&mut tag)?;
                entries.push(match tag[0] {
                    0 => {
                        let rows = read_u16(&mut r)? as usize;
                        let full_cols = read_u16(&mut r)? as usize;
                        let removed_cols = read_u16_list(&mut r)?;
                        let remaining_cols = read_u16_list(&mut r)?;
                        let mut data = vec![0f32; rows * remaining_cols.len()];
                        let mut buf = [0u8; 4];
                        for v in &mut data {
                            r.read_exact(&mut buf)?;
                            *v = f32::from_le_bytes(buf);
                        }
                        EntryPayload::Snapshot(Arc::new(CompactWeights {
                            rows,
                            full_cols,
                            remaining_cols,
                            removed_cols,
                            data,
                        }))
                    }
                    1 => EntryPayload::Mask(Arc::new(read_u16_list(&mut r)?)),
                    2 => EntryPayload::Drops(Arc::new(read_u16_list(&mut r)?)),
                    other => return Err(Error::InvalidInput(format!("unknown entry tag {other}"))),
                });
            }
            layers.push(LayerEntries {
                layer_id,
                block,
                slot,
                group_count,
                entries,
            });
        }
        stages.push(layers);
    }
    Ok(RouteDatabase {
        backend,
        num_stages,
        l_max,
        model_config,
        backbone_checksum,
        stages,
    })
}

fn write_u16_list(w: &mut impl Write, list: &[u16]) -> Result<()> {
    w.write_all(&(list.len() as u16).to_le_bytes())?;
    for v in list {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u16_list(r: &mut impl Read) -> Result<Vec<u16>> {
    let len = read_u16(r)? as usize;
    let mut out = vec![0u16; len];
    let mut buf = [0u8; 2];
    for v in &mut out {
        r.read_exact(&mut buf)?;
        *v = u16::from_le_bytes(buf);
    }
    Ok(out)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
