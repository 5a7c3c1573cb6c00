//! Transformer backbone and flow action expert, expressed as graph builders
//! over a shared parameter store. The backbone patch-embeds the three camera
//! views, appends instruction tokens and one proprio token, and optionally an
//! autoregressive action-token region (causal only over that region). The
//! expert runs over noisy chunk rows with a flow-time embedding and
//! cross-attends into the backbone's per-layer key/value cache.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::graph::{AttnMask, Graph, Var};
use crate::net::store::ParamStore;
use crate::net::tensor::{Scalar, Tensor};

pub const TIME_EMB_DIM: usize = 64;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub head_grid: usize,
    pub wrist_grid: usize,
    pub channels: usize,
    pub patch: usize,
    pub word_vocab: usize,
    pub instr_len: usize,
    pub max_seq: usize,
    /// Discrete action-token vocabulary (tokenizer bpe_vocab).
    pub action_vocab: usize,
    pub max_action_tokens: usize,
    /// Padded proprio width shared by all embodiments.
    pub proprio_dim: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::contract("d_model must be divisible by n_heads"));
        }
        if self.head_grid % self.patch != 0 || self.wrist_grid % self.patch != 0 {
            return Err(Error::contract("grids must be divisible by patch size"));
        }
        Ok(())
    }

    pub fn from_config(cfg: &crate::cfg::Config) -> Result<BackboneConfig> {
        let m = cfg.require_section("model")?;
        let w = cfg.require_section("world")?;
        let out = BackboneConfig {
            d_model: m.usize_or("d_model", 128)?,
            n_layers: m.usize_or("layers", 4)?,
            n_heads: m.usize_or("heads", 4)?,
            mlp_ratio: m.usize_or("mlp_ratio", 4)?,
            head_grid: w.usize_or("head_grid", 32)?,
            wrist_grid: w.usize_or("wrist_grid", 16)?,
            channels: crate::sim::render::CHANNELS,
            patch: m.usize_or("patch", 16)?,
            word_vocab: crate::data::label::WORDS.len(),
            instr_len: m.usize_or("instr_len", 8)?,
            max_seq: m.usize_or("max_seq", 160)?,
            action_vocab: cfg
                .require_section("tokenizer")?
                .usize_or("bpe_vocab", 512)?,
            max_action_tokens: m.usize_or("max_action_tokens", 96)?,
            proprio_dim: 11,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn head_patches(&self) -> usize {
        (self.head_grid / self.patch) * (self.head_grid / self.patch)
    }

    pub fn wrist_patches(&self) -> usize {
        (self.wrist_grid / self.patch) * (self.wrist_grid / self.patch)
    }

    /// Vision tokens per observation: head patches plus both wrists.
    pub fn vision_tokens(&self) -> usize {
        self.head_patches() + 2 * self.wrist_patches()
    }

    /// Prefix length: vision + instruction + one proprio token.
    pub fn prefix_len(&self) -> usize {
        self.vision_tokens() + self.instr_len + 1
    }

    /// Proprio enters as value plus validity mask, concatenated.
    pub fn proprio_in(&self) -> usize {
        2 * self.proprio_dim
    }

    /// Stable hash of the architecture, embedded in checkpoints.
    pub fn hash(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Extracted per-layer key/value tensors over a prefix, for inference-time
/// reuse (flow steps, incremental token decoding).
#[derive(Debug, Clone)]
pub struct KVCache {
    pub layers: Vec<(Tensor<f32>, Tensor<f32>)>,
    pub prefix_len: usize,
}

/// Graph-building context: binds store parameters as trainable or frozen
/// leaves on demand.
pub struct NetCtx<'a, S: Scalar> {
    pub g: Graph<S>,
    store: &'a ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
}

impl<'a, S: Scalar> NetCtx<'a, S> {
    pub fn new(store: &'a ParamStore, trainable: impl Fn(&str) -> bool + 'a) -> NetCtx<'a, S> {
        NetCtx {
            g: Graph::new(),
            store,
            trainable: Box::new(trainable),
        }
    }

    /// Inference context: everything frozen.
    pub fn frozen(store: &'a ParamStore) -> NetCtx<'a, S> {
        NetCtx::new(store, |_| false)
    }

    /// Release the store borrow, keeping the built graph (training loops
    /// need the store mutable again to apply gradients).
    pub fn into_graph(self) -> Graph<S> {
        self.g
    }

    pub fn p(&mut self, name: &str) -> Var {
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|_| panic!("missing parameter `{name}`"))
            .value
            .cast::<S>();
        if (self.trainable)(name) {
            self.g.param(name, t)
        } else {
            self.g.input(t)
        }
    }

    pub fn linear_p(&mut self, prefix: &str, x: Var) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        self.g.linear(x, w, b)
    }

    pub fn layer_norm_p(&mut self, prefix: &str, x: Var) -> Var {
        let g_ = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        self.g.layer_norm(x, g_, b)
    }
}

/// Which extra region follows the prefix in a backbone pass.
pub enum BackboneMode {
    /// Prefix only (flow conditioning, planner-style reads).
    Prefix,
    /// Prefix plus an autoregressive action-token region of this many input
    /// tokens (BOS-shifted), causal within the region.
    WithActions(usize),
}

pub struct BackboneOut {
    /// Final hidden states.
    pub hidden: Var,
    /// Per-layer (k, v) over the full pass.
    pub kv: Vec<(Var, Var)>,
    pub seq_len: usize,
}

/// Host-side inputs for one backbone pass over a batch.
pub struct PrefixInput {
    /// [batch * vision_tokens, patch_dim]
    pub patches: Vec<f32>,
    /// [batch * instr_len]
    pub instr_ids: Vec<u32>,
    /// [batch * 2 * proprio_dim]
    pub proprio: Vec<f32>,
    pub batch: usize,
}

fn tile_positions(batch: usize, t: usize) -> Vec<u32> {
    let mut ids = Vec::with_capacity(batch * t);
    for _ in 0..batch {
        for p in 0..t {
            ids.push(p as u32);
        }
    }
    ids
}

fn to_scalar_vec<S: Scalar>(v: &[f32]) -> Vec<S> {
    v.iter().map(|x| S::from_f64(*x as f64)).collect()
}

/// One pre-norm self-attention sublayer; returns the residual stream and the
/// (k, v) pair it used.
fn self_attn_layer<S: Scalar>(
    ctx: &mut NetCtx<S>,
    name: &str,
    x: Var,
    heads: usize,
    batch: usize,
    t: usize,
    mask: AttnMask,
) -> (Var, (Var, Var)) {
    let normed = ctx.layer_norm_p(&format!("{name}.ln1"), x);
    let q = ctx.linear_p(&format!("{name}.attn.wq"), normed);
    let k = ctx.linear_p(&format!("{name}.attn.wk"), normed);
    let v = ctx.linear_p(&format!("{name}.attn.wv"), normed);
    let ctx_out = ctx.g.attention(q, k, v, heads, batch, t, t, mask);
    let proj = ctx.linear_p(&format!("{name}.attn.wo"), ctx_out);
    let x = ctx.g.add(x, proj);
    (x, (k, v))
}

fn mlp_layer<S: Scalar>(ctx: &mut NetCtx<S>, name: &str, x: Var) -> Var {
    let normed = ctx.layer_norm_p(&format!("{name}.ln2"), x);
    let h = ctx.linear_p(&format!("{name}.mlp.fc1"), normed);
    let h = ctx.g.gelu(h);
    let h = ctx.linear_p(&format!("{name}.mlp.fc2"), h);
    ctx.g.add(x, h)
}

/// Backbone forward. Token order per sample: head patches, wrist patches,
/// instruction, proprio, then (optionally) the action-token region.
pub fn backbone_forward<S: Scalar>(
    ctx: &mut NetCtx<S>,
    cfg: &BackboneConfig,
    input: &PrefixInput,
    mode: BackboneMode,
    action_inputs: &[u32],
) -> Result<BackboneOut> {
    let b = input.batch;
    let vt = cfg.vision_tokens();
    let p_len = cfg.prefix_len();
    let (t_total, mask) = match mode {
        BackboneMode::Prefix => (p_len, AttnMask::Full),
        BackboneMode::WithActions(l) => (p_len + l, AttnMask::PrefixCausal { prefix: p_len }),
    };
    if t_total > cfg.max_seq {
        return Err(Error::contract(format!(
            "sequence length {t_total} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    let patch_dim = cfg.patch_dim();
    let patches = ctx
        .g
        .input(Tensor::from_vec(&[b * vt, patch_dim], to_scalar_vec(&input.patches)));
    let vis = ctx.linear_p("vision.embed", patches);
    let vis = ctx.linear_p("vision.proj", vis);
    let word_table = ctx.p("embed.word");
    let instr = ctx.g.embed(word_table, &input.instr_ids);
    let proprio = ctx.g.input(Tensor::from_vec(
        &[b, cfg.proprio_in()],
        to_scalar_vec(&input.proprio),
    ));
    let proprio_tok = ctx.linear_p("proprio", proprio);

    let mut parts = vec![vis, instr, proprio_tok];
    let mut counts = vec![vt, cfg.instr_len, 1];
    if let BackboneMode::WithActions(l) = mode {
        assert_eq!(action_inputs.len(), b * l, "action input length");
        let table = ctx.p("embed.action");
        let act = ctx.g.embed(table, action_inputs);
        parts.push(act);
        counts.push(l);
    }
    let seq = ctx.g.interleave(&parts, &counts, b);
    let pos_table = ctx.p("embed.pos");
    let pos = ctx.g.embed(pos_table, &tile_positions(b, t_total));
    let mut x = ctx.g.add(seq, pos);

    let mut kv = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let name = format!("backbone.l{layer}");
        let (nx, layer_kv) = self_attn_layer(ctx, &name, x, cfg.n_heads, b, t_total, mask);
        x = mlp_layer(ctx, &name, nx);
        kv.push(layer_kv);
    }
    let x = ctx.layer_norm_p("backbone.lnf", x);
    Ok(BackboneOut {
        hidden: x,
        kv,
        seq_len: t_total,
    })
}

/// Next-token logits over the action region of an AR pass.
pub fn ar_logits<S: Scalar>(
    ctx: &mut NetCtx<S>,
    cfg: &BackboneConfig,
    out: &BackboneOut,
    batch: usize,
    action_len: usize,
) -> Var {
    let p_len = cfg.prefix_len();
    let rows = ctx
        .g
        .take_rows(out.hidden, out.seq_len, p_len, p_len + action_len, batch);
    ctx.linear_p("head.ar", rows)
}

/// Flow expert inputs for one pass.
pub struct ExpertInput {
    /// [batch * chunk_h, action_dim] noisy chunk rows.
    pub rows: Vec<f32>,
    /// [batch * TIME_EMB_DIM] sinusoidal flow-time features.
    pub time_feat: Vec<f32>,
    /// [batch * 2 * proprio_dim]
    pub proprio: Vec<f32>,
    pub batch: usize,
    pub chunk_h: usize,
    pub action_dim: usize,
}

/// Expert forward cross-attending into backbone kv (graph vars, so training
/// gradients flow end to end). Output: [batch * chunk_h, action_dim].
pub fn expert_forward<S: Scalar>(
    ctx: &mut NetCtx<S>,
    cfg: &BackboneConfig,
    input: &ExpertInput,
    backbone_kv: &[(Var, Var)],
    prefix_len: usize,
) -> Var {
    let b = input.batch;
    let h = input.chunk_h;
    let te = h + 1;
    let rows = ctx.g.input(Tensor::from_vec(
        &[b * h, input.action_dim],
        to_scalar_vec(&input.rows),
    ));
    let rows = ctx.linear_p("expert.in", rows);
    let proprio = ctx.g.input(Tensor::from_vec(
        &[b, cfg.proprio_in()],
        to_scalar_vec(&input.proprio),
    ));
    let proprio_tok = ctx.linear_p("expert.proprio", proprio);
    let seq = ctx.g.interleave(&[proprio_tok, rows], &[1, h], b);
    let pos_table = ctx.p("expert.pos");
    let pos = ctx.g.embed(pos_table, &tile_positions(b, te));
    let seq = ctx.g.add(seq, pos);
    let time = ctx.g.input(Tensor::from_vec(
        &[b, TIME_EMB_DIM],
        to_scalar_vec(&input.time_feat),
    ));
    let time_tok = ctx.linear_p("expert.time", time);
    let mut x = ctx.g.add_per_sample(seq, time_tok, te);

    for layer in 0..cfg.n_layers {
        let name = format!("expert.l{layer}");
        let (nx, _) = self_attn_layer(ctx, &name, x, cfg.n_heads, b, te, AttnMask::Full);
        // Cross-attention into the backbone prefix cache.
        let normed = ctx.layer_norm_p(&format!("{name}.lnx"), nx);
        let q = ctx.linear_p(&format!("{name}.xattn.wq"), normed);
        let (k, v) = backbone_kv[layer];
        let attended = ctx
            .g
            .attention(q, k, v, cfg.n_heads, b, te, prefix_len, AttnMask::Full);
        let proj = ctx.linear_p(&format!("{name}.xattn.wo"), attended);
        let nx = ctx.g.add(nx, proj);
        x = mlp_layer(ctx, &name, nx);
    }
    let x = ctx.layer_norm_p("expert.lnf", x);
    let rows_out = ctx.g.take_rows(x, te, 1, te, b);
    ctx.linear_p("expert.out", rows_out)
}

/// Planner inputs: k observation frames at 1-second spacing, instruction,
/// k action-history tokens, one proprio token.
pub struct PlannerInputHost {
    /// [batch * k * vision_tokens, patch_dim]
    pub patches: Vec<f32>,
    /// [batch * instr_len]
    pub instr_ids: Vec<u32>,
    /// [batch * k, 2 * proprio_dim]
    pub action_hist: Vec<f32>,
    /// [batch, 2 * proprio_dim]
    pub proprio: Vec<f32>,
    pub batch: usize,
    pub k: usize,
}

/// Classification logits from the final token of the planner sequence.
pub fn planner_forward<S: Scalar>(
    ctx: &mut NetCtx<S>,
    cfg: &BackboneConfig,
    input: &PlannerInputHost,
) -> Result<Var> {
    let b = input.batch;
    let k = input.k;
    let vt = cfg.vision_tokens();
    let t_total = k * vt + cfg.instr_len + k + 1;
    if t_total > cfg.max_seq {
        return Err(Error::contract(format!(
            "planner sequence {t_total} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    let patches = ctx.g.input(Tensor::from_vec(
        &[b * k * vt, cfg.patch_dim()],
        to_scalar_vec(&input.patches),
    ));
    let vis = ctx.linear_p("vision.embed", patches);
    let vis = ctx.linear_p("vision.proj", vis);
    let word_table = ctx.p("embed.word");
    let instr = ctx.g.embed(word_table, &input.instr_ids);
    let acts = ctx.g.input(Tensor::from_vec(
        &[b * k, cfg.proprio_in()],
        to_scalar_vec(&input.action_hist),
    ));
    let act_toks = ctx.linear_p("planner.act", acts);
    let proprio = ctx.g.input(Tensor::from_vec(
        &[b, cfg.proprio_in()],
        to_scalar_vec(&input.proprio),
    ));
    let proprio_tok = ctx.linear_p("proprio", proprio);
    let seq = ctx.g.interleave(
        &[vis, instr, act_toks, proprio_tok],
        &[k * vt, cfg.instr_len, k, 1],
        b,
    );
    let pos_table = ctx.p("embed.pos");
    let pos = ctx.g.embed(pos_table, &tile_positions(b, t_total));
    let mut x = ctx.g.add(seq, pos);
    for layer in 0..cfg.n_layers {
        let name = format!("backbone.l{layer}");
        let (nx, _) = self_attn_layer(ctx, &name, x, cfg.n_heads, b, t_total, AttnMask::Full);
        x = mlp_layer(ctx, &name, nx);
    }
    let x = ctx.layer_norm_p("backbone.lnf", x);
    let last = ctx.g.take_rows(x, t_total, t_total - 1, t_total, b);
    Ok(ctx.linear_p("head.cls", last))
}

/// Sinusoidal features for a flow time in [0, 1].
pub fn time_features(tau: f64) -> Vec<f32> {
    let half = TIME_EMB_DIM / 2;
    let mut out = Vec::with_capacity(TIME_EMB_DIM);
    for i in 0..half {
        let freq = 1000f64.powf(i as f64 / (half - 1) as f64);
        out.push((tau * freq).sin() as f32);
        out.push((tau * freq).cos() as f32);
    }
    out
}

/// Flatten an observation into vision patch vectors, token-major.
pub fn extract_patches(obs_flat: &[f32], cfg: &BackboneConfig) -> Vec<f32> {
    let g = cfg.head_grid;
    let wg = cfg.wrist_grid;
    let p = cfg.patch;
    let c = cfg.channels;
    let head_plane = g * g;
    let wrist_plane = wg * wg;
    let head_len = c * head_plane;
    let wrist_len = c * wrist_plane;
    assert_eq!(obs_flat.len(), head_len + 2 * wrist_len, "obs length");
    let mut out = Vec::with_capacity(cfg.vision_tokens() * cfg.patch_dim());
    let per_side = g / p;
    for py in 0..per_side {
        for px in 0..per_side {
            for ch in 0..c {
                for yy in 0..p {
                    let y = py * p + yy;
                    let base = ch * head_plane + y * g + px * p;
                    out.extend_from_slice(&obs_flat[base..base + p]);
                }
            }
        }
    }
    let wrist_side = wg / p;
    for wrist in 0..2 {
        let offset = head_len + wrist * wrist_len;
        for py in 0..wrist_side {
            for px in 0..wrist_side {
                for ch in 0..c {
                    for yy in 0..p {
                        let y = py * p + yy;
                        let base = offset + ch * wrist_plane + y * wg + px * p;
                        out.extend_from_slice(&obs_flat[base..base + p]);
                    }
                }
            }
        }
    }
    out
}

/// Pad a vector to the shared width and append its validity mask.
pub fn pad_with_mask(v: &[f32], width: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; 2 * width];
    for (i, x) in v.iter().take(width).enumerate() {
        out[i] = *x;
        out[width + i] = 1.0;
    }
    out
}

/// Pad or truncate instruction ids to the configured length.
pub fn pad_instruction(ids: &[u32], len: usize) -> Vec<u32> {
    let mut out = vec![crate::data::label::PAD_WORD; len];
    for (i, id) in ids.iter().take(len).enumerate() {
        out[i] = *id;
    }
    out
}

fn init_linear(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) {
    store.insert(
        &format!("{name}.w"),
        Tensor::randn(&[fan_in, fan_out], INIT_STD, rng),
    );
    store.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(&format!("{name}.g"), Tensor::from_vec(&[d], vec![1.0; d]));
    store.insert(&format!("{name}.b"), Tensor::zeros(&[d]));
}

fn init_block(store: &mut ParamStore, name: &str, d: usize, mlp: usize, rng: &mut impl Rng) {
    init_layer_norm(store, &format!("{name}.ln1"), d);
    for proj in ["wq", "wk", "wv", "wo"] {
        init_linear(store, &format!("{name}.attn.{proj}"), d, d, rng);
    }
    init_layer_norm(store, &format!("{name}.ln2"), d);
    init_linear(store, &format!("{name}.mlp.fc1"), d, mlp, rng);
    init_linear(store, &format!("{name}.mlp.fc2"), mlp, d, rng);
}

/// Fresh backbone parameters (everything stage 1 trains).
pub fn init_backbone(cfg: &BackboneConfig, rng: &mut impl Rng) -> ParamStore {
    let d = cfg.d_model;
    let mlp = d * cfg.mlp_ratio;
    let mut store = ParamStore::new();
    init_linear(&mut store, "vision.embed", cfg.patch_dim(), d, rng);
    init_linear(&mut store, "vision.proj", d, d, rng);
    store.insert(
        "embed.word",
        Tensor::randn(&[cfg.word_vocab, d], INIT_STD, rng),
    );
    store.insert("embed.pos", Tensor::randn(&[cfg.max_seq, d], INIT_STD, rng));
    store.insert(
        "embed.action",
        Tensor::randn(&[cfg.action_vocab + 1, d], INIT_STD, rng),
    );
    init_linear(&mut store, "proprio", cfg.proprio_in(), d, rng);
    for layer in 0..cfg.n_layers {
        init_block(&mut store, &format!("backbone.l{layer}"), d, mlp, rng);
    }
    init_layer_norm(&mut store, "backbone.lnf", d);
    init_linear(&mut store, "head.ar", d, cfg.action_vocab, rng);
    store
}

/// Add freshly initialized flow-expert parameters for one embodiment.
pub fn add_expert_params(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    action_dim: usize,
    chunk_h: usize,
    rng: &mut impl Rng,
) {
    let d = cfg.d_model;
    let mlp = d * cfg.mlp_ratio;
    init_linear(store, "expert.in", action_dim, d, rng);
    init_linear(store, "expert.proprio", cfg.proprio_in(), d, rng);
    init_linear(store, "expert.time", TIME_EMB_DIM, d, rng);
    store.insert("expert.pos", Tensor::randn(&[chunk_h + 1, d], INIT_STD, rng));
    for layer in 0..cfg.n_layers {
        let name = format!("expert.l{layer}");
        init_block(store, &name, d, mlp, rng);
        init_layer_norm(store, &format!("{name}.lnx"), d);
        init_linear(store, &format!("{name}.xattn.wq"), d, d, rng);
        init_linear(store, &format!("{name}.xattn.wo"), d, d, rng);
    }
    init_layer_norm(store, "expert.lnf", d);
    init_linear(store, "expert.out", d, action_dim, rng);
}

/// Add the planner's classifier head and action-history projection.
pub fn add_planner_params(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    n_labels: usize,
    rng: &mut impl Rng,
) {
    init_linear(store, "planner.act", cfg.proprio_in(), cfg.d_model, rng);
    init_linear(store, "head.cls", cfg.d_model, n_labels, rng);
}

pub fn is_expert_param(name: &str) -> bool {
    name.starts_with("expert.")
}

/// Extract an inference KV cache from a completed prefix pass.
pub fn extract_kv(ctx: &NetCtx<f32>, out: &BackboneOut) -> KVCache {
    KVCache {
        layers: out
            .kv
            .iter()
            .map(|(k, v)| (ctx.g.value(*k).clone(), ctx.g.value(*v).clone()))
            .collect(),
        prefix_len: out.seq_len,
    }
}

/// Spec-facing convenience handle over (config, params) for single-sample
/// inference.
pub struct Backbone<'a> {
    pub cfg: &'a BackboneConfig,
    pub store: &'a ParamStore,
}

impl<'a> Backbone<'a> {
    pub fn new(cfg: &'a BackboneConfig, store: &'a ParamStore) -> Backbone<'a> {
        Backbone { cfg, store }
    }

    /// Single-sample pass: next-token logits at every action position (the
    /// BOS slot predicts the first token) plus the prefix KV cache.
    pub fn forward(
        &self,
        obs_flat: &[f32],
        instr: &[u32],
        proprio: &[f32],
        action_prefix: &[u32],
    ) -> Result<(Tensor<f32>, KVCache)> {
        let cfg = self.cfg;
        let bos = cfg.action_vocab as u32;
        let mut action_inputs = vec![bos];
        action_inputs.extend_from_slice(action_prefix);
        let input = PrefixInput {
            patches: extract_patches(obs_flat, cfg),
            instr_ids: pad_instruction(instr, cfg.instr_len),
            proprio: pad_with_mask(proprio, cfg.proprio_dim),
            batch: 1,
        };
        let mut ctx = NetCtx::<f32>::frozen(self.store);
        let out = backbone_forward(
            &mut ctx,
            cfg,
            &input,
            BackboneMode::WithActions(action_inputs.len()),
            &action_inputs,
        )?;
        let logits = ar_logits(&mut ctx, cfg, &out, 1, action_inputs.len());
        let logits_t = ctx.g.value(logits).clone();
        let p_len = cfg.prefix_len();
        let layers = out
            .kv
            .iter()
            .map(|(k, v)| {
                let kt = ctx.g.value(*k);
                let vt = ctx.g.value(*v);
                let d = kt.cols();
                (
                    Tensor::from_vec(&[p_len, d], kt.data[..p_len * d].to_vec()),
                    Tensor::from_vec(&[p_len, d], vt.data[..p_len * d].to_vec()),
                )
            })
            .collect();
        Ok((
            logits_t,
            KVCache {
                layers,
                prefix_len: p_len,
            },
        ))
    }
}

#[cfg(test)]
pub(crate) fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        mlp_ratio: 2,
        head_grid: 8,
        wrist_grid: 4,
        channels: 3,
        patch: 4,
        word_vocab: crate::data::label::WORDS.len(),
        instr_len: 4,
        max_seq: 64,
        action_vocab: 12,
        max_action_tokens: 10,
        proprio_dim: 5,
    }
}
