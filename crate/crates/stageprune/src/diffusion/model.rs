//! Block-structured transformer denoiser over 16×16 single-channel images.
//!
//! The image is split into 16 patches of 4×4 pixels, each projected to a
//! 32-dim token. Four pre-norm blocks follow, each with two attention heads
//! and a 32→64→32 MLP, conditioned additively on a sinusoidal-timestep
//! projection and a learned class embedding. The same forward routine serves
//! the dense model, activation capture for calibration, and stage-routed
//! inference: per-block attention/MLP weights are resolved through a
//! [`ForwardRouting`] so pruned variants never copy unpruned layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Image, IMG_SIZE};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    /// Hidden channels removed together as one MLP structure.
    pub mlp_group_size: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            num_blocks: 4,
            num_heads: 2,
            mlp_hidden: 64,
            patch_size: 4,
            num_classes: 4,
            mlp_group_size: 4,
            init_seed: 11,
        }
    }
}

impl ModelConfig {
    pub fn tokens(&self) -> usize {
        (IMG_SIZE / self.patch_size) * (IMG_SIZE / self.patch_size)
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Total parameter count, reproducible from the config alone.
    pub fn param_count(&self) -> usize {
        let e = self.embed_dim;
        let p = self.patch_pixels();
        let h = self.mlp_hidden;
        let per_block = 3 * (e * e + e) + e * e + (h * e + h) + e * h;
        e * p + e                    // patch projection
            + self.tokens() * e      // positional table
            + self.num_classes * e   // class table
            + e * e + e              // timestep projection
            + self.num_blocks * per_block
            + p * e + p // output projection
    }

    /// Architectural consistency; fallible so deserialized configs (e.g.
    /// from a checkpoint header) can be rejected instead of panicking.
    pub fn check(&self) -> crate::error::Result<()> {
        let ok = self.patch_size > 0
            && IMG_SIZE.is_multiple_of(self.patch_size)
            && self.num_heads > 0
            && self.embed_dim.is_multiple_of(self.num_heads)
            && self.mlp_group_size > 0
            && self.mlp_hidden.is_multiple_of(self.mlp_group_size)
            && self.num_blocks > 0
            && self.num_classes > 0;
        if ok {
            Ok(())
        } else {
            Err(crate::error::Error::InvalidConfig(format!(
                "inconsistent model config: {self:?}"
            )))
        }
    }

    fn validate(&self) {
        self.check().expect("valid model config");
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockParams {
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    /// Attention output projection; pruned in head-sized column groups.
    pub wo: Matrix,
    pub fc1: Matrix,
    pub b_fc1: Vec<f64>,
    /// Second MLP projection; pruned in hidden-channel column groups.
    pub fc2: Matrix,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSet {
    pub patch_w: Matrix,
    pub patch_b: Vec<f64>,
    pub pos_emb: Matrix,
    pub class_emb: Matrix,
    pub time_w: Matrix,
    pub time_b: Vec<f64>,
    pub blocks: Vec<BlockParams>,
    pub out_w: Matrix,
    pub out_b: Vec<f64>,
}

impl ParamSet {
    fn zeros(cfg: &ModelConfig) -> ParamSet {
        let e = cfg.embed_dim;
        let p = cfg.patch_pixels();
        let h = cfg.mlp_hidden;
        let blocks = (0..cfg.num_blocks)
            .map(|_| BlockParams {
                wq: Matrix::zeros(e, e),
                bq: vec![0.0; e],
                wk: Matrix::zeros(e, e),
                bk: vec![0.0; e],
                wv: Matrix::zeros(e, e),
                bv: vec![0.0; e],
                wo: Matrix::zeros(e, e),
                fc1: Matrix::zeros(h, e),
                b_fc1: vec![0.0; h],
                fc2: Matrix::zeros(e, h),
            })
            .collect();
        ParamSet {
            patch_w: Matrix::zeros(e, p),
            patch_b: vec![0.0; e],
            pos_emb: Matrix::zeros(cfg.tokens(), e),
            class_emb: Matrix::zeros(cfg.num_classes, e),
            time_w: Matrix::zeros(e, e),
            time_b: vec![0.0; e],
            blocks,
            out_w: Matrix::zeros(p, e),
            out_b: vec![0.0; p],
        }
    }

    /// Named flat views over every trainable tensor, in a fixed order shared
    /// by the optimizer and the checkpoint format.
    pub fn named_slots(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("patch_w".into(), self.patch_w.data()),
            ("patch_b".into(), &self.patch_b),
            ("pos_emb".into(), self.pos_emb.data()),
            ("class_emb".into(), self.class_emb.data()),
            ("time_w".into(), self.time_w.data()),
            ("time_b".into(), &self.time_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.wq"), b.wq.data()));
            out.push((format!("block{i}.bq"), &b.bq));
            out.push((format!("block{i}.wk"), b.wk.data()));
            out.push((format!("block{i}.bk"), &b.bk));
            out.push((format!("block{i}.wv"), b.wv.data()));
            out.push((format!("block{i}.bv"), &b.bv));
            out.push((format!("block{i}.wo"), b.wo.data()));
            out.push((format!("block{i}.fc1"), b.fc1.data()));
            out.push((format!("block{i}.b_fc1"), &b.b_fc1));
            out.push((format!("block{i}.fc2"), b.fc2.data()));
        }
        out.push(("out_w".into(), self.out_w.data()));
        out.push(("out_b".into(), &self.out_b));
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.patch_w.data_mut(),
            &mut self.patch_b,
            self.pos_emb.data_mut(),
            self.class_emb.data_mut(),
            self.time_w.data_mut(),
            &mut self.time_b,
        ];
        for b in &mut self.blocks {
            out.push(b.wq.data_mut());
            out.push(&mut b.bq);
            out.push(b.wk.data_mut());
            out.push(&mut b.bk);
            out.push(b.wv.data_mut());
            out.push(&mut b.bv);
            out.push(b.wo.data_mut());
            out.push(b.fc1.data_mut());
            out.push(&mut b.b_fc1);
            out.push(b.fc2.data_mut());
        }
        out.push(self.out_w.data_mut());
        out.push(&mut self.out_b);
        out
    }
}

/// How one prunable slot resolves at forward time.
#[derive(Debug, Clone, Copy)]
pub enum SlotWeights<'a> {
    /// Use the backbone weights unchanged.
    Dense,
    /// Replace the target matrix with a compensated snapshot.
    Snapshot(&'a CompactWeights),
    /// Keep backbone weights but skip the listed removed columns.
    Masked(&'a [u16]),
}

/// Compensated weight matrix stored column-compacted: only the surviving
/// columns of the full `rows × full_cols` layer are kept, in f32.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactWeights {
    pub rows: usize,
    pub full_cols: usize,
    /// Surviving column indices, ascending.
    pub remaining_cols: Vec<u16>,
    /// Removed column indices, ascending.
    pub removed_cols: Vec<u16>,
    /// Row-major `rows × remaining_cols.len()`.
    pub data: Vec<f32>,
}

impl CompactWeights {
    /// Compacts `full` by dropping `removed_cols` (must be sorted).
    pub fn from_full(full: &Matrix, removed_cols: &[u16]) -> CompactWeights {
        let removed: Vec<u16> = removed_cols.to_vec();
        let is_removed: Vec<bool> = {
            let mut v = vec![false; full.cols];
            for &c in &removed {
                v[c as usize] = true;
            }
            v
        };
        let remaining: Vec<u16> = (0..full.cols as u16)
            .filter(|&c| !is_removed[c as usize])
            .collect();
        let mut data = Vec::with_capacity(full.rows * remaining.len());
        for r in 0..full.rows {
            for &c in &remaining {
                data.push(full.get(r, c as usize) as f32);
            }
        }
        CompactWeights {
            rows: full.rows,
            full_cols: full.cols,
            remaining_cols: remaining,
            removed_cols: removed,
            data,
        }
    }

    /// Expands back to a dense matrix with zeros in removed columns.
    pub fn to_full(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.full_cols);
        for r in 0..self.rows {
            for (ci, &c) in self.remaining_cols.iter().enumerate() {
                m.set(
                    r,
                    c as usize,
                    self.data[r * self.remaining_cols.len() + ci] as f64,
                );
            }
        }
        m
    }

    pub fn payload_bytes(&self) -> usize {
        self.data.len() * 4 + (self.remaining_cols.len() + self.removed_cols.len()) * 2
    }
}

/// Resolves stage-conditioned weights during a forward pass.
pub trait ForwardRouting {
    fn block_dropped(&self, block: usize) -> bool;
    fn attn_weights(&self, block: usize) -> SlotWeights<'_>;
    fn mlp_weights(&self, block: usize) -> SlotWeights<'_>;
}

/// The dense backbone: nothing dropped, nothing replaced.
pub struct DenseRouting;

impl ForwardRouting for DenseRouting {
    fn block_dropped(&self, _block: usize) -> bool {
        false
    }
    fn attn_weights(&self, _block: usize) -> SlotWeights<'_> {
        SlotWeights::Dense
    }
    fn mlp_weights(&self, _block: usize) -> SlotWeights<'_> {
        SlotWeights::Dense
    }
}

/// Per-block activation capture, token columns appended across samples.
#[derive(Debug, Clone, Default)]
pub struct BlockCapture {
    pub qkv_in: Vec<f64>,
    pub proj_in: Vec<f64>,
    pub fc1_in: Vec<f64>,
    pub fc2_in: Vec<f64>,
    pub block_in: Vec<f64>,
    pub block_out: Vec<f64>,
    pub tokens_seen: usize,
}

/// Accumulates layer-input activations over forward passes. Buffers are
/// token-major; [`CaptureSink::matrix`] transposes into feature-major form.
#[derive(Debug, Clone)]
pub struct CaptureSink {
    pub blocks: Vec<BlockCapture>,
}

/// Capture points inside one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapturePoint {
    QkvIn,
    ProjIn,
    Fc1In,
    Fc2In,
    BlockIn,
    BlockOut,
}

impl CaptureSink {
    pub fn new(num_blocks: usize) -> CaptureSink {
        CaptureSink {
            blocks: vec![BlockCapture::default(); num_blocks],
        }
    }

    /// Feature-major matrix (`dim × tokens_seen`) for one capture point.
    pub fn matrix(&self, block: usize, point: CapturePoint, dim: usize) -> Matrix {
        let cap = &self.blocks[block];
        let buf = match point {
            CapturePoint::QkvIn => &cap.qkv_in,
            CapturePoint::ProjIn => &cap.proj_in,
            CapturePoint::Fc1In => &cap.fc1_in,
            CapturePoint::Fc2In => &cap.fc2_in,
            CapturePoint::BlockIn => &cap.block_in,
            CapturePoint::BlockOut => &cap.block_out,
        };
        let n = cap.tokens_seen;
        debug_assert_eq!(buf.len(), n * dim);
        let mut m = Matrix::zeros(dim, n);
        for tok in 0..n {
            for d in 0..dim {
                m.set(d, tok, buf[tok * dim + d]);
            }
        }
        m
    }
}

/// The denoiser: predicts the noise added to an image at a given timestep.
pub trait Denoiser {
    fn predict_eps(&self, x: &Image, t: usize, label: usize) -> Image;
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub config: ModelConfig,
    pub(crate) params: ParamSet,
}

impl DenoiserModel {
    /// Seeded Gaussian init (σ = 0.02), biases zero.
    pub fn new(cfg: ModelConfig) -> DenoiserModel {
        cfg.validate();
        let mut params = ParamSet::zeros(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        for slot in params.slots_mut() {
            for v in slot.iter_mut() {
                *v = 0.02 * normal_sample(&mut rng);
            }
        }
        // Biases stay zero.
        let mut model = DenoiserModel {
            config: cfg,
            params,
        };
        model.params.patch_b.iter_mut().for_each(|v| *v = 0.0);
        model.params.time_b.iter_mut().for_each(|v| *v = 0.0);
        model.params.out_b.iter_mut().for_each(|v| *v = 0.0);
        for b in &mut model.params.blocks {
            b.bq.iter_mut().for_each(|v| *v = 0.0);
            b.bk.iter_mut().for_each(|v| *v = 0.0);
            b.bv.iter_mut().for_each(|v| *v = 0.0);
            b.b_fc1.iter_mut().for_each(|v| *v = 0.0);
        }
        model
    }

    /// All-zero parameters; used by tests that force degenerate activations.
    pub fn zeroed(cfg: ModelConfig) -> DenoiserModel {
        cfg.validate();
        let params = ParamSet::zeros(&cfg);
        DenoiserModel {
            config: cfg,
            params,
        }
    }

    /// FNV-1a over every parameter's bit pattern, in slot order.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        for (_, slot) in self.params.named_slots() {
            for v in slot {
                for byte in v.to_le_bits_bytes() {
                    hash ^= byte as u64;
                    hash = hash.wrapping_mul(0x100000001b3);
                }
            }
        }
        hash
    }

    pub(crate) fn block(&self, i: usize) -> &BlockParams {
        &self.params.blocks[i]
    }

    /// Replaces one block's output projections. Zero matrices for both turn
    /// the block into a pure skip connection; used to build synthetic
    /// near-identity variants.
    pub fn set_block_projections(&mut self, block: usize, wo: Matrix, fc2: Matrix) {
        assert_eq!(
            (wo.rows, wo.cols),
            (self.config.embed_dim, self.config.embed_dim)
        );
        assert_eq!(
            (fc2.rows, fc2.cols),
            (self.config.embed_dim, self.config.mlp_hidden)
        );
        self.params.blocks[block].wo = wo;
        self.params.blocks[block].fc2 = fc2;
    }

    /// Forward pass with routing and optional activation capture.
    pub fn forward_eps(
        &self,
        x: &Image,
        t: usize,
        label: usize,
        routing: &dyn ForwardRouting,
        mut capture: Option<&mut CaptureSink>,
    ) -> Image {
        let cfg = &self.config;
        let e = cfg.embed_dim;
        let tokens = cfg.tokens();
        debug_assert!(label < cfg.num_classes);

        // Patchify + embed + additive conditioning.
        let patches = patchify(x, cfg.patch_size);
        let tvec = self.time_vector(t);
        let cvec = self.params.class_emb.row(label);
        let mut stream = vec![0.0f64; tokens * e];
        for tok in 0..tokens {
            let dst = &mut stream[tok * e..(tok + 1) * e];
            matvec_into(&self.params.patch_w, &patches[tok], dst);
            for d in 0..e {
                dst[d] +=
                    self.params.patch_b[d] + self.params.pos_emb.get(tok, d) + tvec[d] + cvec[d];
            }
        }

        for bi in 0..cfg.num_blocks {
            if routing.block_dropped(bi) {
                continue;
            }
            if let Some(sink) = capture.as_deref_mut() {
                push_tokens(&mut sink.blocks[bi].block_in, &stream);
            }
            self.run_block(bi, &mut stream, routing, capture.as_deref_mut());
            if let Some(sink) = capture.as_deref_mut() {
                push_tokens(&mut sink.blocks[bi].block_out, &stream);
                sink.blocks[bi].tokens_seen += tokens;
            }
        }

        // Final norm + per-token output projection, then unpatchify.
        let p = cfg.patch_pixels();
        let mut out = Image::zeros();
        let mut token_out = vec![0.0f64; p];
        for tok in 0..tokens {
            let h = layer_norm(&stream[tok * e..(tok + 1) * e]);
            matvec_into(&self.params.out_w, &h, &mut token_out);
            for d in 0..p {
                token_out[d] += self.params.out_b[d];
            }
            write_patch(&mut out, tok, &token_out, cfg.patch_size);
        }
        out
    }

    fn run_block(
        &self,
        bi: usize,
        stream: &mut [f64],
        routing: &dyn ForwardRouting,
        mut capture: Option<&mut CaptureSink>,
    ) {
        let cfg = &self.config;
        let e = cfg.embed_dim;
        let heads = cfg.num_heads;
        let hd = cfg.head_dim();
        let tokens = cfg.tokens();
        let blk = self.block(bi);
        let scale = 1.0 / (hd as f64).sqrt();

        // Attention.
        let mut h = vec![0.0f64; tokens * e];
        for tok in 0..tokens {
            let ln = layer_norm(&stream[tok * e..(tok + 1) * e]);
            h[tok * e..(tok + 1) * e].copy_from_slice(&ln);
        }
        if let Some(sink) = capture.as_deref_mut() {
            push_tokens(&mut sink.blocks[bi].qkv_in, &h);
        }
        let mut q = vec![0.0f64; tokens * e];
        let mut k = vec![0.0f64; tokens * e];
        let mut v = vec![0.0f64; tokens * e];
        for tok in 0..tokens {
            let src = &h[tok * e..(tok + 1) * e];
            matvec_bias_into(&blk.wq, &blk.bq, src, &mut q[tok * e..(tok + 1) * e]);
            matvec_bias_into(&blk.wk, &blk.bk, src, &mut k[tok * e..(tok + 1) * e]);
            matvec_bias_into(&blk.wv, &blk.bv, src, &mut v[tok * e..(tok + 1) * e]);
        }
        // Per-head softmax attention into the concatenated projection input.
        let mut proj_in = vec![0.0f64; tokens * e];
        let mut scores = vec![0.0f64; tokens];
        for head in 0..heads {
            let off = head * hd;
            for ti in 0..tokens {
                for (tj, score) in scores.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for d in 0..hd {
                        s += q[ti * e + off + d] * k[tj * e + off + d];
                    }
                    *score = s * scale;
                }
                softmax_inplace(&mut scores);
                let dst = &mut proj_in[ti * e + off..ti * e + off + hd];
                for (tj, &a) in scores.iter().enumerate() {
                    for d in 0..hd {
                        dst[d] += a * v[tj * e + off + d];
                    }
                }
            }
        }
        if let Some(sink) = capture.as_deref_mut() {
            push_tokens(&mut sink.blocks[bi].proj_in, &proj_in);
        }
        let attn_resolution = routing.attn_weights(bi);
        for tok in 0..tokens {
            let mut out = vec![0.0f64; e];
            routed_matvec(
                &blk.wo,
                attn_resolution,
                &proj_in[tok * e..(tok + 1) * e],
                &mut out,
            );
            for d in 0..e {
                stream[tok * e + d] += out[d];
            }
        }

        // MLP with jointly removed hidden channels.
        let hidden_dim = cfg.mlp_hidden;
        let mlp_resolution = routing.mlp_weights(bi);
        let dead = removed_channel_flags(hidden_dim, mlp_resolution);
        let mut h2 = vec![0.0f64; tokens * e];
        for tok in 0..tokens {
            let ln = layer_norm(&stream[tok * e..(tok + 1) * e]);
            h2[tok * e..(tok + 1) * e].copy_from_slice(&ln);
        }
        if let Some(sink) = capture.as_deref_mut() {
            push_tokens(&mut sink.blocks[bi].fc1_in, &h2);
        }
        let mut hidden = vec![0.0f64; tokens * hidden_dim];
        for tok in 0..tokens {
            let src = &h2[tok * e..(tok + 1) * e];
            let dst = &mut hidden[tok * hidden_dim..(tok + 1) * hidden_dim];
            for c in 0..hidden_dim {
                if dead.as_ref().is_some_and(|d| d[c]) {
                    continue; // removed channel vanishes in fc1 as well
                }
                let mut s = blk.b_fc1[c];
                let row = blk.fc1.row(c);
                for d in 0..e {
                    s += row[d] * src[d];
                }
                dst[c] = gelu(s);
            }
        }
        if let Some(sink) = capture {
            push_tokens(&mut sink.blocks[bi].fc2_in, &hidden);
        }
        for tok in 0..tokens {
            let mut out = vec![0.0f64; e];
            routed_matvec(
                &blk.fc2,
                mlp_resolution,
                &hidden[tok * hidden_dim..(tok + 1) * hidden_dim],
                &mut out,
            );
            for d in 0..e {
                stream[tok * e + d] += out[d];
            }
        }
    }

    /// Learned projection of the sinusoidal timestep embedding. A zeroed
    /// model therefore contributes exactly zero timestep conditioning.
    pub(crate) fn time_vector(&self, t: usize) -> Vec<f64> {
        let base = sinusoidal_embedding(t, self.config.embed_dim);
        let mut out = vec![0.0f64; self.config.embed_dim];
        matvec_bias_into(&self.params.time_w, &self.params.time_b, &base, &mut out);
        out
    }
}

impl Denoiser for DenoiserModel {
    fn predict_eps(&self, x: &Image, t: usize, label: usize) -> Image {
        self.forward_eps(x, t, label, &DenseRouting, None)
    }
}

// ─── prunable-structure registry ──────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneSlot {
    Attn,
    Mlp,
}

/// A prunable layer and its structure granularity. The target matrix is the
/// one whose input columns are removed (and, for OBS, compensated): `wo` for
/// attention heads, `fc2` for MLP hidden-channel groups.
#[derive(Debug, Clone)]
pub struct PruneUnit {
    pub layer_id: String,
    pub block: usize,
    pub slot: PruneSlot,
    pub group_size: usize,
    pub group_count: usize,
}

impl PruneUnit {
    /// Column indices of the target matrix for group `g`.
    pub fn group_cols(&self, g: usize) -> Vec<usize> {
        (g * self.group_size..(g + 1) * self.group_size).collect()
    }

    /// Column indices for a sorted list of group ids.
    pub fn cols_for_groups(&self, groups: &[u16]) -> Vec<u16> {
        let mut cols: Vec<u16> = groups
            .iter()
            .flat_map(|&g| {
                let start = g as usize * self.group_size;
                (start..start + self.group_size).map(|c| c as u16)
            })
            .collect();
        cols.sort_unstable();
        cols
    }
}

impl DenoiserModel {
    /// Every prunable layer, one per (block, slot), with stable ids.
    pub fn prune_units(&self) -> Vec<PruneUnit> {
        let cfg = &self.config;
        let mut units = Vec::new();
        for b in 0..cfg.num_blocks {
            units.push(PruneUnit {
                layer_id: format!("block{b}.attn"),
                block: b,
                slot: PruneSlot::Attn,
                group_size: cfg.head_dim(),
                group_count: cfg.num_heads,
            });
            units.push(PruneUnit {
                layer_id: format!("block{b}.mlp"),
                block: b,
                slot: PruneSlot::Mlp,
                group_size: cfg.mlp_group_size,
                group_count: cfg.mlp_hidden / cfg.mlp_group_size,
            });
        }
        units
    }

    /// The matrix OBS compensates for this unit.
    pub fn obs_target(&self, unit: &PruneUnit) -> &Matrix {
        match unit.slot {
            PruneSlot::Attn => &self.block(unit.block).wo,
            PruneSlot::Mlp => &self.block(unit.block).fc2,
        }
    }

    /// Which capture point feeds the OBS Hessian for this unit.
    pub fn obs_capture_point(unit: &PruneUnit) -> CapturePoint {
        match unit.slot {
            PruneSlot::Attn => CapturePoint::ProjIn,
            PruneSlot::Mlp => CapturePoint::Fc2In,
        }
    }

    /// The matrix Wanda scores for this unit: the fused q/k/v projection for
    /// attention (rows of one head across q, k, v) or `fc1` for the MLP.
    pub fn wanda_scored_matrix(&self, unit: &PruneUnit) -> Matrix {
        match unit.slot {
            PruneSlot::Attn => {
                let blk = self.block(unit.block);
                let e = self.config.embed_dim;
                let mut m = Matrix::zeros(3 * e, e);
                for (part, w) in [&blk.wq, &blk.wk, &blk.wv].iter().enumerate() {
                    for r in 0..e {
                        for c in 0..e {
                            m.set(part * e + r, c, w.get(r, c));
                        }
                    }
                }
                m
            }
            PruneSlot::Mlp => self.block(unit.block).fc1.clone(),
        }
    }

    /// Row groups of the Wanda-scored matrix, one per removable structure.
    pub fn wanda_row_groups(&self, unit: &PruneUnit) -> Vec<Vec<usize>> {
        let e = self.config.embed_dim;
        match unit.slot {
            PruneSlot::Attn => {
                let hd = self.config.head_dim();
                (0..unit.group_count)
                    .map(|h| {
                        let mut rows = Vec::with_capacity(3 * hd);
                        for part in 0..3 {
                            rows.extend(part * e + h * hd..part * e + (h + 1) * hd);
                        }
                        rows
                    })
                    .collect()
            }
            PruneSlot::Mlp => (0..unit.group_count)
                .map(|g| (g * unit.group_size..(g + 1) * unit.group_size).collect())
                .collect(),
        }
    }

    pub fn wanda_capture_point(unit: &PruneUnit) -> CapturePoint {
        match unit.slot {
            PruneSlot::Attn => CapturePoint::QkvIn,
            PruneSlot::Mlp => CapturePoint::Fc1In,
        }
    }
}

// ─── forward helpers ───────────────────────────────────────────────────────

fn push_tokens(buf: &mut Vec<f64>, tokens: &[f64]) {
    buf.extend_from_slice(tokens);
}

pub(crate) fn patchify(x: &Image, patch: usize) -> Vec<Vec<f64>> {
    let per_side = IMG_SIZE / patch;
    let mut out = Vec::with_capacity(per_side * per_side);
    for py in 0..per_side {
        for px in 0..per_side {
            let mut vals = Vec::with_capacity(patch * patch);
            for dy in 0..patch {
                for dx in 0..patch {
                    vals.push(x.get(py * patch + dy, px * patch + dx));
                }
            }
            out.push(vals);
        }
    }
    out
}

pub(crate) fn write_patch(img: &mut Image, tok: usize, vals: &[f64], patch: usize) {
    let per_side = IMG_SIZE / patch;
    let py = tok / per_side;
    let px = tok % per_side;
    for dy in 0..patch {
        for dx in 0..patch {
            img.set(py * patch + dy, px * patch + dx, vals[dy * patch + dx]);
        }
    }
}

/// Parameter-free layer norm over one token.
pub(crate) fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + 1e-5).sqrt();
    x.iter().map(|v| (v - mean) * inv_std).collect()
}

pub(crate) fn softmax_inplace(x: &mut [f64]) {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/π)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

pub(crate) fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

pub(crate) fn matvec_into(w: &Matrix, x: &[f64], out: &mut [f64]) {
    for r in 0..w.rows {
        let row = w.row(r);
        let mut s = 0.0;
        for (a, b) in row.iter().zip(x) {
            s += a * b;
        }
        out[r] = s;
    }
}

pub(crate) fn matvec_bias_into(w: &Matrix, b: &[f64], x: &[f64], out: &mut [f64]) {
    matvec_into(w, x, out);
    for (o, bias) in out.iter_mut().zip(b) {
        *o += bias;
    }
}

/// Matrix–vector product through a slot resolution: dense weights, a
/// compacted snapshot (index only the surviving columns), or a column mask.
fn routed_matvec(dense: &Matrix, slot: SlotWeights<'_>, x: &[f64], out: &mut [f64]) {
    match slot {
        SlotWeights::Dense => matvec_into(dense, x, out),
        SlotWeights::Snapshot(snap) => {
            let width = snap.remaining_cols.len();
            for (r, o) in out.iter_mut().enumerate() {
                let row = &snap.data[r * width..(r + 1) * width];
                let mut s = 0.0;
                for (ci, &c) in snap.remaining_cols.iter().enumerate() {
                    s += row[ci] as f64 * x[c as usize];
                }
                *o = s;
            }
        }
        SlotWeights::Masked(removed) => {
            let mut dead = vec![false; dense.cols];
            for &c in removed {
                dead[c as usize] = true;
            }
            for (r, o) in out.iter_mut().enumerate() {
                let row = dense.row(r);
                let mut s = 0.0;
                for c in 0..dense.cols {
                    if !dead[c] {
                        s += row[c] * x[c];
                    }
                }
                *o = s;
            }
        }
    }
}

/// Hidden channels that must vanish in fc1 as well as fc2.
fn removed_channel_flags(hidden: usize, slot: SlotWeights<'_>) -> Option<Vec<bool>> {
    let removed: &[u16] = match slot {
        SlotWeights::Dense => return None,
        SlotWeights::Snapshot(snap) => &snap.removed_cols,
        SlotWeights::Masked(cols) => cols,
    };
    let mut flags = vec![false; hidden];
    for &c in removed {
        flags[c as usize] = true;
    }
    Some(flags)
}

pub(crate) fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0f64; dim];
    for i in 0..half {
        let freq = (10000f64).powf(-(i as f64) / half as f64);
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

trait BitBytes {
    fn to_le_bits_bytes(self) -> [u8; 8];
}

impl BitBytes for f64 {
    fn to_le_bits_bytes(self) -> [u8; 8] {
        self.to_bits().to_le_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::gaussian_image;
    use rand::SeedableRng;

    #[test]
    fn param_count_matches_config_formula() {
        let cfg = ModelConfig::default();
        let model = DenoiserModel::new(cfg.clone());
        let actual: usize = model
            .params
            .named_slots()
            .iter()
            .map(|(_, s)| s.len())
            .sum();
        assert_eq!(actual, cfg.param_count());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = DenoiserModel::new(ModelConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian_image(&mut rng);
        let a = model.predict_eps(&x, 500, 2);
        let b = model.predict_eps(&x, 500, 2);
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn label_changes_output() {
        let model = DenoiserModel::new(ModelConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian_image(&mut rng);
        let a = model.predict_eps(&x, 500, 0);
        let b = model.predict_eps(&x, 500, 3);
        assert!(a.pixels().iter().zip(b.pixels()).any(|(p, q)| p != q));
    }

    #[test]
    fn registry_units_are_unique_and_shaped() {
        let model = DenoiserModel::new(ModelConfig::default());
        let units = model.prune_units();
        assert_eq!(units.len(), 2 * model.config.num_blocks);
        let mut seen = std::collections::HashSet::new();
        for u in &units {
            assert!(
                seen.insert(u.layer_id.clone()),
                "duplicate id {}",
                u.layer_id
            );
            let target = model.obs_target(u);
            // Input dimension of the target matches the declared granularity.
            assert_eq!(target.cols, u.group_size * u.group_count);
        }
    }

    #[test]
    fn checksum_tracks_parameter_changes() {
        let a = DenoiserModel::new(ModelConfig::default());
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.params.out_b[0] += 1e-9;
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn compact_weights_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let full = Matrix::from_vec(
            4,
            6,
            (0..24)
                .map(|_| rand::Rng::random_range(&mut rng, -1.0f64..1.0))
                .collect(),
        )
        .unwrap();
        let snap = CompactWeights::from_full(&full, &[1, 4]);
        let back = snap.to_full();
        for r in 0..4 {
            for c in 0..6 {
                if c == 1 || c == 4 {
                    assert_eq!(back.get(r, c), 0.0);
                } else {
                    assert_eq!(back.get(r, c), full.get(r, c) as f32 as f64);
                }
            }
        }
    }

    #[test]
    fn masked_attention_columns_silence_heads() {
        // Masking every wo column zeroes the attention contribution: the
        // output must equal the model with wo set to zero.
        let cfg = ModelConfig::default();
        let model = DenoiserModel::new(cfg.clone());
        let mut zeroed_wo = model.clone();
        for b in &mut zeroed_wo.params.blocks {
            b.wo = Matrix::zeros(cfg.embed_dim, cfg.embed_dim);
        }
        struct MaskAll(Vec<u16>);
        impl ForwardRouting for MaskAll {
            fn block_dropped(&self, _b: usize) -> bool {
                false
            }
            fn attn_weights(&self, _b: usize) -> SlotWeights<'_> {
                SlotWeights::Masked(&self.0)
            }
            fn mlp_weights(&self, _b: usize) -> SlotWeights<'_> {
                SlotWeights::Dense
            }
        }
        let routing = MaskAll((0..cfg.embed_dim as u16).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian_image(&mut rng);
        let routed = model.forward_eps(&x, 100, 1, &routing, None);
        let expect = zeroed_wo.predict_eps(&x, 100, 1);
        for (a, b) in routed.pixels().iter().zip(expect.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
