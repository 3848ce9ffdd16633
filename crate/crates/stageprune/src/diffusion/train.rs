//! Noise-prediction training: MSE on the added noise, Adam updates, fully
//! deterministic given the seed.
//!
//! The cached forward pass here mirrors the inference path arithmetic
//! operation-for-operation; `forward_matches_inference` below pins that.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{
    gelu, gelu_deriv, matvec_bias_into, matvec_into, patchify, sinusoidal_embedding,
    softmax_inplace, write_patch, DenoiserModel, ParamSet,
};
use super::schedule::{forward_noise, NoiseSchedule};
use super::{gaussian_image, Image, IMG_PIXELS};
use crate::diffusion::ToyDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 31,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains epsilon prediction. Zero epochs returns the model bitwise unchanged.
pub fn train(
    model: DenoiserModel,
    data: &ToyDataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("training dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.config);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = ParamSet::zeros_like(&model.config);
            let mut batch_loss = 0.0;
            for &idx in batch {
                let t = rng.random_range(1..=sched.total_steps);
                let noise = gaussian_image(&mut rng);
                let x_t = forward_noise(&data.images[idx], t, &noise, sched)?;
                let cache = forward_cached(&model, &x_t, t, data.labels[idx]);
                batch_loss += mse_loss(&cache.eps_pred, &noise);
                backward(&model, &cache, &noise, &mut grads);
            }
            let inv = 1.0 / batch.len() as f64;
            for slot in grads.slots_mut() {
                for g in slot.iter_mut() {
                    *g *= inv;
                }
            }
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    loss: batch_loss,
                });
            }
            adam.step(&mut model.params, &grads, cfg.learning_rate);
            epoch_loss += batch_loss * batch.len() as f64;
            seen += batch.len();
        }
        epoch_losses.push(epoch_loss / seen as f64);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}

pub fn mse_loss(pred: &Image, target: &Image) -> f64 {
    pred.pixels()
        .iter()
        .zip(target.pixels())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / IMG_PIXELS as f64
}

// ─── Adam ──────────────────────────────────────────────────────────────────

struct Adam {
    m: ParamSet,
    v: ParamSet,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(cfg: &super::model::ModelConfig) -> Adam {
        Adam {
            m: ParamSet::zeros_like(cfg),
            v: ParamSet::zeros_like(cfg),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut p_slots = params.slots_mut();
        let g_slots = grads.named_slots();
        let mut m_slots = self.m.slots_mut();
        let mut v_slots = self.v.slots_mut();
        for i in 0..p_slots.len() {
            let p = &mut p_slots[i];
            let g = g_slots[i].1;
            let m = &mut m_slots[i];
            let v = &mut v_slots[i];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

impl ParamSet {
    pub(crate) fn zeros_like(cfg: &super::model::ModelConfig) -> ParamSet {
        // Reuse the zero constructor through a throwaway zeroed model.
        DenoiserModel::zeroed(cfg.clone()).params
    }
}

// ─── cached forward ────────────────────────────────────────────────────────

struct LnCache {
    /// Normalized output per token (tokens × dim).
    y: Vec<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm_cached(x: &[f64], tokens: usize, dim: usize) -> LnCache {
    let mut y = vec![0.0f64; tokens * dim];
    let mut inv_std = vec![0.0f64; tokens];
    for tok in 0..tokens {
        let src = &x[tok * dim..(tok + 1) * dim];
        let n = dim as f64;
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + 1e-5).sqrt();
        inv_std[tok] = istd;
        for d in 0..dim {
            y[tok * dim + d] = (src[d] - mean) * istd;
        }
    }
    LnCache { y, inv_std }
}

/// Backward of parameter-free layer norm.
fn layer_norm_backward(cache: &LnCache, dy: &[f64], tokens: usize, dim: usize) -> Vec<f64> {
    let mut dx = vec![0.0f64; tokens * dim];
    for tok in 0..tokens {
        let y = &cache.y[tok * dim..(tok + 1) * dim];
        let g = &dy[tok * dim..(tok + 1) * dim];
        let n = dim as f64;
        let m1 = g.iter().sum::<f64>() / n;
        let m2 = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
        let istd = cache.inv_std[tok];
        for d in 0..dim {
            dx[tok * dim + d] = istd * (g[d] - m1 - y[d] * m2);
        }
    }
    dx
}

struct BlockCache {
    ln1: LnCache,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax probabilities, heads × tokens × tokens.
    attn: Vec<f64>,
    proj_in: Vec<f64>,
    ln2: LnCache,
    z: Vec<f64>,
    hidden: Vec<f64>,
}

struct SampleCache {
    patches: Vec<Vec<f64>>,
    t_base: Vec<f64>,
    label: usize,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    eps_pred: Image,
}

/// Forward pass retaining every intermediate needed by [`backward`]. The
/// arithmetic mirrors the inference path exactly.
fn forward_cached(model: &DenoiserModel, x: &Image, t: usize, label: usize) -> SampleCache {
    let cfg = &model.config;
    let e = cfg.embed_dim;
    let tokens = cfg.tokens();
    let heads = cfg.num_heads;
    let hd = cfg.head_dim();
    let hidden_dim = cfg.mlp_hidden;
    let scale = 1.0 / (hd as f64).sqrt();

    let patches = patchify(x, cfg.patch_size);
    let t_base = sinusoidal_embedding(t, e);
    let mut tvec = vec![0.0f64; e];
    matvec_bias_into(
        &model.params.time_w,
        &model.params.time_b,
        &t_base,
        &mut tvec,
    );
    let cvec = model.params.class_emb.row(label);

    let mut stream = vec![0.0f64; tokens * e];
    for tok in 0..tokens {
        let dst = &mut stream[tok * e..(tok + 1) * e];
        matvec_into(&model.params.patch_w, &patches[tok], dst);
        for d in 0..e {
            dst[d] +=
                model.params.patch_b[d] + model.params.pos_emb.get(tok, d) + tvec[d] + cvec[d];
        }
    }

    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for bi in 0..cfg.num_blocks {
        let blk = model.block(bi);

        let ln1 = layer_norm_cached(&stream, tokens, e);
        let mut q = vec![0.0f64; tokens * e];
        let mut k = vec![0.0f64; tokens * e];
        let mut v = vec![0.0f64; tokens * e];
        for tok in 0..tokens {
            let src = &ln1.y[tok * e..(tok + 1) * e];
            matvec_bias_into(&blk.wq, &blk.bq, src, &mut q[tok * e..(tok + 1) * e]);
            matvec_bias_into(&blk.wk, &blk.bk, src, &mut k[tok * e..(tok + 1) * e]);
            matvec_bias_into(&blk.wv, &blk.bv, src, &mut v[tok * e..(tok + 1) * e]);
        }
        let mut attn = vec![0.0f64; heads * tokens * tokens];
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
                attn[(head * tokens + ti) * tokens..(head * tokens + ti + 1) * tokens]
                    .copy_from_slice(&scores);
                let dst = &mut proj_in[ti * e + off..ti * e + off + hd];
                for (tj, &a) in scores.iter().enumerate() {
                    for d in 0..hd {
                        dst[d] += a * v[tj * e + off + d];
                    }
                }
            }
        }
        for tok in 0..tokens {
            let mut out = vec![0.0f64; e];
            matvec_into(&blk.wo, &proj_in[tok * e..(tok + 1) * e], &mut out);
            for d in 0..e {
                stream[tok * e + d] += out[d];
            }
        }

        let ln2 = layer_norm_cached(&stream, tokens, e);
        let mut z = vec![0.0f64; tokens * hidden_dim];
        let mut hidden = vec![0.0f64; tokens * hidden_dim];
        for tok in 0..tokens {
            let src = &ln2.y[tok * e..(tok + 1) * e];
            for c in 0..hidden_dim {
                let mut s = blk.b_fc1[c];
                let row = blk.fc1.row(c);
                for d in 0..e {
                    s += row[d] * src[d];
                }
                z[tok * hidden_dim + c] = s;
                hidden[tok * hidden_dim + c] = gelu(s);
            }
        }
        for tok in 0..tokens {
            let mut out = vec![0.0f64; e];
            matvec_into(
                &blk.fc2,
                &hidden[tok * hidden_dim..(tok + 1) * hidden_dim],
                &mut out,
            );
            for d in 0..e {
                stream[tok * e + d] += out[d];
            }
        }

        blocks.push(BlockCache {
            ln1,
            q,
            k,
            v,
            attn,
            proj_in,
            ln2,
            z,
            hidden,
        });
    }

    let ln_f = layer_norm_cached(&stream, tokens, e);
    let p = cfg.patch_pixels();
    let mut eps_pred = Image::zeros();
    let mut token_out = vec![0.0f64; p];
    for tok in 0..tokens {
        matvec_into(
            &model.params.out_w,
            &ln_f.y[tok * e..(tok + 1) * e],
            &mut token_out,
        );
        for d in 0..p {
            token_out[d] += model.params.out_b[d];
        }
        write_patch(&mut eps_pred, tok, &token_out, cfg.patch_size);
    }

    SampleCache {
        patches,
        t_base,
        label,
        blocks,
        ln_f,
        eps_pred,
    }
}

/// Extracts one patch from an image as a flat slice.
fn read_patch(img: &Image, tok: usize, patch: usize) -> Vec<f64> {
    let per_side = super::IMG_SIZE / patch;
    let py = tok / per_side;
    let px = tok % per_side;
    let mut out = Vec::with_capacity(patch * patch);
    for dy in 0..patch {
        for dx in 0..patch {
            out.push(img.get(py * patch + dy, px * patch + dx));
        }
    }
    out
}

/// Accumulates gradients of the per-sample MSE loss into `grads`.
fn backward(model: &DenoiserModel, cache: &SampleCache, eps_target: &Image, grads: &mut ParamSet) {
    let cfg = &model.config;
    let e = cfg.embed_dim;
    let tokens = cfg.tokens();
    let heads = cfg.num_heads;
    let hd = cfg.head_dim();
    let hidden_dim = cfg.mlp_hidden;
    let p = cfg.patch_pixels();
    let scale = 1.0 / (hd as f64).sqrt();

    // dL/d(eps_pred), with the loss a mean over pixels.
    let mut d_eps = Image::zeros();
    for (d, (pred, target)) in d_eps
        .pixels_mut()
        .iter_mut()
        .zip(cache.eps_pred.pixels().iter().zip(eps_target.pixels()))
    {
        *d = 2.0 * (pred - target) / IMG_PIXELS as f64;
    }

    // Output projection and final norm.
    let mut d_hf = vec![0.0f64; tokens * e];
    for tok in 0..tokens {
        let d_token = read_patch(&d_eps, tok, cfg.patch_size);
        let hf = &cache.ln_f.y[tok * e..(tok + 1) * e];
        for r in 0..p {
            grads.out_b[r] += d_token[r];
            for c in 0..e {
                let v = grads.out_w.get(r, c) + d_token[r] * hf[c];
                grads.out_w.set(r, c, v);
            }
        }
        for c in 0..e {
            let mut s = 0.0;
            for r in 0..p {
                s += model.params.out_w.get(r, c) * d_token[r];
            }
            d_hf[tok * e + c] = s;
        }
    }
    let mut d_stream = layer_norm_backward(&cache.ln_f, &d_hf, tokens, e);

    for bi in (0..cfg.num_blocks).rev() {
        let blk = model.block(bi);
        let bc = &cache.blocks[bi];
        let gb = &mut grads.blocks[bi];

        // MLP: x_out = x_mid + fc2·gelu(fc1·ln(x_mid) + b).
        let d_mlp_out = d_stream.clone();
        let mut d_hidden = vec![0.0f64; tokens * hidden_dim];
        for tok in 0..tokens {
            let dmo = &d_mlp_out[tok * e..(tok + 1) * e];
            let hid = &bc.hidden[tok * hidden_dim..(tok + 1) * hidden_dim];
            for r in 0..e {
                for c in 0..hidden_dim {
                    let v = gb.fc2.get(r, c) + dmo[r] * hid[c];
                    gb.fc2.set(r, c, v);
                }
            }
            for c in 0..hidden_dim {
                let mut s = 0.0;
                for r in 0..e {
                    s += blk.fc2.get(r, c) * dmo[r];
                }
                d_hidden[tok * hidden_dim + c] = s;
            }
        }
        let mut d_h2 = vec![0.0f64; tokens * e];
        for tok in 0..tokens {
            let h2 = &bc.ln2.y[tok * e..(tok + 1) * e];
            for c in 0..hidden_dim {
                let dz = d_hidden[tok * hidden_dim + c] * gelu_deriv(bc.z[tok * hidden_dim + c]);
                gb.b_fc1[c] += dz;
                for d in 0..e {
                    let v = gb.fc1.get(c, d) + dz * h2[d];
                    gb.fc1.set(c, d, v);
                }
                for d in 0..e {
                    d_h2[tok * e + d] += blk.fc1.get(c, d) * dz;
                }
            }
        }
        let d_from_ln2 = layer_norm_backward(&bc.ln2, &d_h2, tokens, e);
        // d_x_mid = residual passthrough + MLP branch.
        for i in 0..tokens * e {
            d_stream[i] += d_from_ln2[i];
        }

        // Attention: x_mid = x_in + wo·attend(ln(x_in)).
        let d_attn_out = d_stream.clone();
        let mut d_proj_in = vec![0.0f64; tokens * e];
        for tok in 0..tokens {
            let dao = &d_attn_out[tok * e..(tok + 1) * e];
            let pin = &bc.proj_in[tok * e..(tok + 1) * e];
            for r in 0..e {
                for c in 0..e {
                    let v = gb.wo.get(r, c) + dao[r] * pin[c];
                    gb.wo.set(r, c, v);
                }
            }
            for c in 0..e {
                let mut s = 0.0;
                for r in 0..e {
                    s += blk.wo.get(r, c) * dao[r];
                }
                d_proj_in[tok * e + c] = s;
            }
        }
        let mut d_q = vec![0.0f64; tokens * e];
        let mut d_k = vec![0.0f64; tokens * e];
        let mut d_v = vec![0.0f64; tokens * e];
        for head in 0..heads {
            let off = head * hd;
            for ti in 0..tokens {
                let a = &bc.attn[(head * tokens + ti) * tokens..(head * tokens + ti + 1) * tokens];
                let d_out = &d_proj_in[ti * e + off..ti * e + off + hd];
                // d_a and softmax backward.
                let mut d_a = vec![0.0f64; tokens];
                for (tj, da) in d_a.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for d in 0..hd {
                        s += d_out[d] * bc.v[tj * e + off + d];
                    }
                    *da = s;
                    for d in 0..hd {
                        d_v[tj * e + off + d] += a[tj] * d_out[d];
                    }
                }
                let inner: f64 = d_a.iter().zip(a).map(|(x, y)| x * y).sum();
                for tj in 0..tokens {
                    let ds = a[tj] * (d_a[tj] - inner);
                    for d in 0..hd {
                        d_q[ti * e + off + d] += ds * bc.k[tj * e + off + d] * scale;
                        d_k[tj * e + off + d] += ds * bc.q[ti * e + off + d] * scale;
                    }
                }
            }
        }
        let mut d_h = vec![0.0f64; tokens * e];
        for tok in 0..tokens {
            let h = &bc.ln1.y[tok * e..(tok + 1) * e];
            for (w, b, dvec) in [
                (&blk.wq, &mut gb.wq, &d_q),
                (&blk.wk, &mut gb.wk, &d_k),
                (&blk.wv, &mut gb.wv, &d_v),
            ] {
                let dv = &dvec[tok * e..(tok + 1) * e];
                for r in 0..e {
                    for c in 0..e {
                        let val = b.get(r, c) + dv[r] * h[c];
                        b.set(r, c, val);
                    }
                }
                for c in 0..e {
                    let mut s = 0.0;
                    for r in 0..e {
                        s += w.get(r, c) * dv[r];
                    }
                    d_h[tok * e + c] += s;
                }
            }
            for r in 0..e {
                gb.bq[r] += d_q[tok * e + r];
                gb.bk[r] += d_k[tok * e + r];
                gb.bv[r] += d_v[tok * e + r];
            }
        }
        let d_from_ln1 = layer_norm_backward(&bc.ln1, &d_h, tokens, e);
        for i in 0..tokens * e {
            d_stream[i] += d_from_ln1[i];
        }
    }

    // Embeddings.
    let mut d_cond = vec![0.0f64; e];
    for tok in 0..tokens {
        let d_tok = &d_stream[tok * e..(tok + 1) * e];
        for r in 0..e {
            grads.patch_b[r] += d_tok[r];
            let v = grads.pos_emb.get(tok, r) + d_tok[r];
            grads.pos_emb.set(tok, r, v);
            d_cond[r] += d_tok[r];
            for c in 0..cfg.patch_pixels() {
                let v = grads.patch_w.get(r, c) + d_tok[r] * cache.patches[tok][c];
                grads.patch_w.set(r, c, v);
            }
        }
    }
    for r in 0..e {
        let v = grads.class_emb.get(cache.label, r) + d_cond[r];
        grads.class_emb.set(cache.label, r, v);
        grads.time_b[r] += d_cond[r];
        for c in 0..e {
            let v = grads.time_w.get(r, c) + d_cond[r] * cache.t_base[c];
            grads.time_w.set(r, c, v);
        }
    }
}
