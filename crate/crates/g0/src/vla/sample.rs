//! Inference-time chunk generation. The flow sampler Euler-integrates the
//! learned velocity field from pure noise, reusing the backbone KV cache
//! across steps. The autoregressive sampler decodes tokens incrementally
//! against a growing cache and inverts the tokenizer; malformed decodes fall
//! back to a zero chunk and bump an anomaly counter.

use rand_chacha::ChaCha8Rng;

use crate::data::label::tokenize_words;
use crate::error::Result;
use crate::net::graph::AttnMask;
use crate::net::model::{
    backbone_forward, expert_forward, extract_kv, extract_patches, pad_instruction, pad_with_mask,
    time_features, BackboneConfig, BackboneMode, ExpertInput, KVCache, NetCtx, PrefixInput,
};
use crate::net::store::ParamStore;
use crate::net::tensor::{normal_sample, Tensor};
use crate::tok::Tokenizer;
use crate::vla::chunk::ActionChunk;

/// Prefix pass over one (obs, instruction, proprio) triple, returning the
/// per-layer cache the samplers condition on.
pub fn prefix_cache(
    cfg: &BackboneConfig,
    store: &ParamStore,
    obs: &[f32],
    instruction: &str,
    proprio: &[f32],
) -> Result<KVCache> {
    let input = PrefixInput {
        patches: extract_patches(obs, cfg),
        instr_ids: pad_instruction(&tokenize_words(instruction), cfg.instr_len),
        proprio: pad_with_mask(proprio, cfg.proprio_dim),
        batch: 1,
    };
    let mut ctx = NetCtx::<f32>::frozen(store);
    let out = backbone_forward(&mut ctx, cfg, &input, BackboneMode::Prefix, &[])?;
    Ok(extract_kv(&ctx, &out))
}

/// One expert evaluation against a fixed cache.
pub fn expert_velocity(
    cfg: &BackboneConfig,
    store: &ParamStore,
    cache: &KVCache,
    rows: &[f32],
    tau: f64,
    proprio: &[f32],
    chunk_h: usize,
    action_dim: usize,
) -> Vec<f32> {
    let mut ctx = NetCtx::<f32>::frozen(store);
    let kv: Vec<_> = cache
        .layers
        .iter()
        .map(|(k, v)| (ctx.g.input(k.clone()), ctx.g.input(v.clone())))
        .collect();
    let input = ExpertInput {
        rows: rows.to_vec(),
        time_feat: time_features(tau),
        proprio: pad_with_mask(proprio, cfg.proprio_dim),
        batch: 1,
        chunk_h,
        action_dim,
    };
    let pred = expert_forward(&mut ctx, cfg, &input, &kv, cache.prefix_len);
    ctx.g.value(pred).data.clone()
}

/// Euler integration of the flow from noise: A(0) = eps,
/// A(tau + dt) = A(tau) + dt * v(A(tau), tau), clamped to [-1, 1] at the end.
#[allow(clippy::too_many_arguments)]
pub fn sample_chunk_flow(
    cfg: &BackboneConfig,
    store: &ParamStore,
    obs: &[f32],
    instruction: &str,
    proprio: &[f32],
    chunk_h: usize,
    action_dim: usize,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ActionChunk> {
    assert!(n_steps >= 1, "n_steps must be at least 1");
    let cache = prefix_cache(cfg, store, obs, instruction, proprio)?;
    let mut rows: Vec<f32> = (0..chunk_h * action_dim)
        .map(|_| normal_sample(rng) as f32)
        .collect();
    let dt = 1.0 / n_steps as f64;
    for step in 0..n_steps {
        let tau = step as f64 * dt;
        let v = expert_velocity(cfg, store, &cache, &rows, tau, proprio, chunk_h, action_dim);
        for (r, vi) in rows.iter_mut().zip(&v) {
            *r += (dt * *vi as f64) as f32;
        }
    }
    let mut chunk = ActionChunk::new(chunk_h, action_dim, rows, 0.0)?;
    chunk.clamp_unit();
    Ok(chunk)
}

/// Incremental decoding state: per-layer keys/values over everything decoded
/// so far (prefix plus action tokens).
struct ArCache {
    layers: Vec<(Tensor<f32>, Tensor<f32>)>,
    len: usize,
}

fn append_rows(dst: &mut Tensor<f32>, src: &Tensor<f32>) {
    assert_eq!(dst.cols(), src.cols());
    dst.data.extend_from_slice(&src.data);
    dst.shape[0] += src.rows();
}

/// One decoder step: run a single action token through the backbone layers
/// against the cache, append its k/v, and return next-token logits.
fn ar_decode_step(
    cfg: &BackboneConfig,
    store: &ParamStore,
    cache: &mut ArCache,
    token_input: u32,
) -> Vec<f32> {
    let mut ctx = NetCtx::<f32>::frozen(store);
    let position = cache.len;
    let table = ctx.p("embed.action");
    let tok = ctx.g.embed(table, &[token_input]);
    let pos_table = ctx.p("embed.pos");
    let pos = ctx.g.embed(pos_table, &[position as u32]);
    let mut x = ctx.g.add(tok, pos);
    for layer in 0..cfg.n_layers {
        let name = format!("backbone.l{layer}");
        let normed = ctx.layer_norm_p(&format!("{name}.ln1"), x);
        let q = ctx.linear_p(&format!("{name}.attn.wq"), normed);
        let k_new = ctx.linear_p(&format!("{name}.attn.wk"), normed);
        let v_new = ctx.linear_p(&format!("{name}.attn.wv"), normed);
        append_rows(&mut cache.layers[layer].0, ctx.g.value(k_new));
        append_rows(&mut cache.layers[layer].1, ctx.g.value(v_new));
        let k_all = ctx.g.input(cache.layers[layer].0.clone());
        let v_all = ctx.g.input(cache.layers[layer].1.clone());
        let tk = cache.layers[layer].0.rows();
        let att = ctx
            .g
            .attention(q, k_all, v_all, cfg.n_heads, 1, 1, tk, AttnMask::Full);
        let proj = ctx.linear_p(&format!("{name}.attn.wo"), att);
        let nx = ctx.g.add(x, proj);
        let normed2 = ctx.layer_norm_p(&format!("{name}.ln2"), nx);
        let h = ctx.linear_p(&format!("{name}.mlp.fc1"), normed2);
        let h = ctx.g.gelu(h);
        let h = ctx.linear_p(&format!("{name}.mlp.fc2"), h);
        x = ctx.g.add(nx, h);
    }
    let x = ctx.layer_norm_p("backbone.lnf", x);
    let logits = ctx.linear_p("head.ar", x);
    let out = ctx.g.value(logits).data.clone();
    cache.len += 1;
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Temperature(f64),
}

/// Greedy argmax with ties broken toward the lowest index.
fn pick_token(logits: &[f32], mode: DecodeMode, rng: &mut ChaCha8Rng) -> usize {
    match mode {
        DecodeMode::Greedy => {
            let mut best = 0usize;
            for (i, v) in logits.iter().enumerate() {
                if *v > logits[best] {
                    best = i;
                }
            }
            best
        }
        DecodeMode::Temperature(t) if t <= 0.0 => pick_token(logits, DecodeMode::Greedy, rng),
        DecodeMode::Temperature(t) => {
            use rand::Rng;
            let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f64> = logits
                .iter()
                .map(|v| (((*v - max) as f64) / t).exp())
                .collect();
            let total: f64 = exps.iter().sum();
            let mut r: f64 = rng.gen_range(0.0..total);
            for (i, e) in exps.iter().enumerate() {
                if r < *e {
                    return i;
                }
                r -= e;
            }
            exps.len() - 1
        }
    }
}

pub struct ArSampleOutcome {
    pub chunk: ActionChunk,
    /// True when the decode was malformed and a zero chunk was substituted.
    pub malformed: bool,
    pub tokens: Vec<u16>,
}

/// Decode action tokens until they expand to exactly one chunk's worth of
/// base symbols, then invert the tokenizer.
#[allow(clippy::too_many_arguments)]
pub fn sample_chunk_ar(
    cfg: &BackboneConfig,
    store: &ParamStore,
    tokenizer: &Tokenizer,
    obs: &[f32],
    instruction: &str,
    proprio: &[f32],
    mode: DecodeMode,
    rng: &mut ChaCha8Rng,
) -> Result<ArSampleOutcome> {
    let chunk_h = tokenizer.config.chunk_horizon;
    let action_dim = tokenizer.config.action_dim;
    let needed = tokenizer.config.raw_symbols();
    let cache_full = prefix_cache(cfg, store, obs, instruction, proprio)?;
    let mut cache = ArCache {
        layers: cache_full.layers,
        len: cache_full.prefix_len,
    };
    let bos = cfg.action_vocab as u32;
    let mut tokens: Vec<u16> = Vec::new();
    let mut base_count = 0usize;
    let mut input = bos;
    while base_count < needed && tokens.len() < cfg.max_action_tokens {
        let logits = ar_decode_step(cfg, store, &mut cache, input);
        let pick = pick_token(&logits, mode, rng) as u16;
        match tokenizer.expansion_len(pick) {
            Some(n) => base_count += n,
            None => {
                base_count = usize::MAX;
                tokens.push(pick);
                break;
            }
        }
        tokens.push(pick);
        input = pick as u32;
    }
    if base_count != needed {
        return Ok(ArSampleOutcome {
            chunk: ActionChunk::zeros(chunk_h, action_dim),
            malformed: true,
            tokens,
        });
    }
    match tokenizer.decode(&tokens) {
        Ok(data) => Ok(ArSampleOutcome {
            chunk: ActionChunk::new(chunk_h, action_dim, data, 0.0)?,
            malformed: false,
            tokens,
        }),
        Err(_) => Ok(ArSampleOutcome {
            chunk: ActionChunk::zeros(chunk_h, action_dim),
            malformed: true,
            tokens,
        }),
    }
}
