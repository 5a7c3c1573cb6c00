//! Training objectives: teacher-forced next-token cross-entropy over action
//! tokens, and the flow-matching regression against the constant-velocity
//! target of the linear interpolant.

use rand_chacha::ChaCha8Rng;

use crate::data::label::tokenize_words;
use crate::data::sampler::ChunkSample;
use crate::error::{Error, Result};
use crate::net::graph::Var;
use crate::net::model::{
    ar_logits, backbone_forward, expert_forward, extract_patches, pad_instruction, pad_with_mask,
    time_features, BackboneConfig, BackboneMode, ExpertInput, NetCtx, PrefixInput,
};
use crate::net::tensor::{Scalar, Tensor};
use crate::tok::Tokenizer;
use crate::vla::chunk::FlowSample;

/// Assemble the shared prefix inputs from chunk samples.
pub fn prefix_input(cfg: &BackboneConfig, samples: &[ChunkSample]) -> PrefixInput {
    let mut patches = Vec::new();
    let mut instr_ids = Vec::new();
    let mut proprio = Vec::new();
    for s in samples {
        patches.extend(extract_patches(s.obs, cfg));
        instr_ids.extend(pad_instruction(&tokenize_words(&s.instruction), cfg.instr_len));
        proprio.extend(pad_with_mask(s.proprio, cfg.proprio_dim));
    }
    PrefixInput {
        patches,
        instr_ids,
        proprio,
        batch: samples.len(),
    }
}

/// Build the autoregressive loss graph; returns the loss var.
pub fn ar_loss_graph<S: Scalar>(
    ctx: &mut NetCtx<S>,
    cfg: &BackboneConfig,
    tokenizer: &Tokenizer,
    samples: &[ChunkSample],
) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::contract("ar_loss on an empty batch"));
    }
    let b = samples.len();
    let token_seqs: Vec<Vec<u16>> = samples
        .iter()
        .map(|s| tokenizer.encode(&s.chunk))
        .collect::<Result<_>>()?;
    let max_n = token_seqs.iter().map(|t| t.len()).max().unwrap_or(0);
    if max_n == 0 {
        return Err(Error::contract("ar_loss: tokenizer produced empty sequences"));
    }
    if max_n > cfg.max_action_tokens {
        return Err(Error::contract(format!(
            "token sequence length {max_n} exceeds max_action_tokens {}",
            cfg.max_action_tokens
        )));
    }
    let bos = cfg.action_vocab as u32;
    // Inputs are BOS-shifted; padded positions repeat BOS and are masked out
    // of the loss.
    let mut inputs = Vec::with_capacity(b * max_n);
    let mut targets: Vec<i64> = Vec::with_capacity(b * max_n);
    for seq in &token_seqs {
        for i in 0..max_n {
            if i == 0 {
                inputs.push(bos);
            } else {
                inputs.push(seq.get(i - 1).map(|t| *t as u32).unwrap_or(bos));
            }
            targets.push(seq.get(i).map(|t| *t as i64).unwrap_or(-1));
        }
    }
    let input = prefix_input(cfg, samples);
    let out = backbone_forward(ctx, cfg, &input, BackboneMode::WithActions(max_n), &inputs)?;
    let logits = ar_logits(ctx, cfg, &out, b, max_n);
    Ok(ctx.g.ce_mean(logits, &targets))
}

/// Spec-facing convenience: the scalar autoregressive loss.
pub fn ar_loss(
    cfg: &BackboneConfig,
    store: &crate::net::store::ParamStore,
    tokenizer: &Tokenizer,
    samples: &[ChunkSample],
) -> Result<f64> {
    let mut ctx = NetCtx::<f32>::frozen(store);
    let loss = ar_loss_graph(&mut ctx, cfg, tokenizer, samples)?;
    Ok(ctx.g.value(loss).data[0] as f64)
}

pub struct FlowDraws {
    pub samples: Vec<FlowSample>,
}

/// Build the flow-matching loss graph: per sample draw tau and noise, form
/// the interpolant, regress the expert output onto A - noise.
pub fn flow_loss_graph<S: Scalar>(
    ctx: &mut NetCtx<S>,
    cfg: &BackboneConfig,
    chunk_h: usize,
    action_dim: usize,
    samples: &[ChunkSample],
    rng: &mut ChaCha8Rng,
) -> Result<(Var, FlowDraws)> {
    if samples.is_empty() {
        return Err(Error::contract("flow_loss on an empty batch"));
    }
    let b = samples.len();
    let mut rows = Vec::with_capacity(b * chunk_h * action_dim);
    let mut time_feat = Vec::with_capacity(b * crate::net::model::TIME_EMB_DIM);
    let mut target = Vec::with_capacity(b * chunk_h * action_dim);
    let mut proprio = Vec::with_capacity(b * cfg.proprio_in());
    let mut draws = Vec::with_capacity(b);
    for s in samples {
        if s.chunk.len() != chunk_h * action_dim {
            return Err(Error::contract(format!(
                "flow_loss: chunk has {} entries, expected {}",
                s.chunk.len(),
                chunk_h * action_dim
            )));
        }
        let draw = FlowSample::draw(&s.chunk, rng);
        rows.extend_from_slice(&draw.interpolated);
        time_feat.extend(time_features(draw.tau));
        target.extend(draw.target(&s.chunk));
        proprio.extend(pad_with_mask(s.proprio, cfg.proprio_dim));
        draws.push(draw);
    }
    let input = prefix_input(cfg, samples);
    let out = backbone_forward(ctx, cfg, &input, BackboneMode::Prefix, &[])?;
    let expert_in = ExpertInput {
        rows,
        time_feat,
        proprio,
        batch: b,
        chunk_h,
        action_dim,
    };
    let pred = expert_forward(ctx, cfg, &expert_in, &out.kv, out.seq_len);
    let target_t = Tensor::from_vec(
        &[b * chunk_h, action_dim],
        target.iter().map(|v| S::from_f64(*v as f64)).collect(),
    );
    let loss = ctx.g.mse_mean(pred, &target_t);
    Ok((loss, FlowDraws { samples: draws }))
}

/// Scalar flow loss (no gradients).
pub fn flow_loss(
    cfg: &BackboneConfig,
    store: &crate::net::store::ParamStore,
    chunk_h: usize,
    action_dim: usize,
    samples: &[ChunkSample],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut ctx = NetCtx::<f32>::frozen(store);
    let (loss, _) = flow_loss_graph(&mut ctx, cfg, chunk_h, action_dim, samples, rng)?;
    Ok(ctx.g.value(loss).data[0] as f64)
}

/// Flow loss for an externally supplied velocity prediction; the oracle
/// v = A - noise makes this exactly zero.
pub fn flow_loss_for_prediction(pred: &[f32], chunk: &[f32], noise: &[f32]) -> f64 {
    assert_eq!(pred.len(), chunk.len());
    assert_eq!(noise.len(), chunk.len());
    let mut acc = 0.0f64;
    for i in 0..pred.len() {
        let u = (chunk[i] - noise[i]) as f64;
        let d = pred[i] as f64 - u;
        acc += d * d;
    }
    acc / pred.len() as f64
}
