//! Tiny ViT encoder with a batch-norm neck, per-stage classifier heads,
//! patch tokenisation and the stage-level EMA merge.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{CkdaError, Result};
use crate::model::{ModelConfig, ModelState, HEAD_PREFIX, MCP_PREFIX, MSP_PREFIX};
use crate::nn::{self, ForwardCtx};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

/// Non-overlapping `ps×ps` patches of one image, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    /// `[M, ps·ps·C]`
    pub tokens: Tensor,
    pub grid_shape: (usize, usize),
    pub patch_size: usize,
}

impl TokenGrid {
    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Inverse of [`patchify`].
    pub fn depatchify(&self) -> Tensor {
        let (gh, gw) = self.grid_shape;
        let ps = self.patch_size;
        let c = self.token_dim() / (ps * ps);
        self.tokens
            .clone()
            .reshaped(&[gh, gw, ps, ps, c])
            .permute(&[0, 2, 1, 3, 4])
            .reshaped(&[gh * ps, gw * ps, c])
    }
}

/// Split an `H×W×C` image into `M = (H/ps)(W/ps)` tokens of size `ps·ps·C`.
pub fn patchify(image: &Tensor, ps: usize) -> Result<TokenGrid> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(CkdaError::shape("patchify", &[0, 0, 0], s));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if ps == 0 || h % ps != 0 {
        return Err(CkdaError::config("image_height", format!("{h} not divisible by patch size {ps}")));
    }
    if w % ps != 0 {
        return Err(CkdaError::config("image_width", format!("{w} not divisible by patch size {ps}")));
    }
    let (gh, gw) = (h / ps, w / ps);
    let tokens = image
        .clone()
        .reshaped(&[gh, ps, gw, ps, c])
        .permute(&[0, 2, 1, 3, 4])
        .reshaped(&[gh * gw, ps * ps * c]);
    Ok(TokenGrid {
        tokens,
        grid_shape: (gh, gw),
        patch_size: ps,
    })
}

/// Batched tokenisation on the graph: `[B,H,W,C] → [B,M,ps·ps·C]`.
pub fn patchify_var(g: &mut Graph, images: Var, ps: usize) -> Var {
    let s = g.shape(images).to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / ps, w / ps);
    let x = g.reshape(images, &[b, gh, ps, gw, ps, c]);
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5]);
    g.reshape(x, &[b, gh * gw, ps * ps * c])
}

/// Batched inverse of [`patchify_var`].
pub fn depatchify_var(g: &mut Graph, tokens: Var, cfg: &ModelConfig) -> Var {
    let b = g.shape(tokens)[0];
    let ps = cfg.patch_size;
    let (gh, gw) = cfg.grid();
    let c = cfg.geometry.channels;
    let x = g.reshape(tokens, &[b, gh, gw, ps, ps, c]);
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5]);
    g.reshape(x, &[b, gh * ps, gw * ps, c])
}

pub fn init<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &mut ParamStore,
    buffers: &mut ParamStore,
    rng: &mut R,
) {
    let d = cfg.embed_dim;
    let t = cfg.num_tokens() + 1;
    nn::init_linear(params, "backbone.patch", cfg.token_dim(), d, rng);
    params.insert("backbone.cls", Tensor::randn(&[d], 0.02, rng));
    params.insert("backbone.pos", Tensor::randn(&[t, d], 0.02, rng));
    for i in 0..cfg.depth {
        let p = format!("backbone.blocks.{i}");
        nn::init_norm(params, &format!("{p}.ln1"), d);
        nn::init_linear(params, &format!("{p}.attn.qkv"), d, 3 * d, rng);
        nn::init_linear(params, &format!("{p}.attn.proj"), d, d, rng);
        nn::init_norm(params, &format!("{p}.ln2"), d);
        nn::init_linear(params, &format!("{p}.mlp.fc1"), d, cfg.mlp_ratio * d, rng);
        nn::init_linear(params, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * d, d, rng);
    }
    nn::init_norm(params, "backbone.norm", d);
    nn::init_norm(params, "neck.bn", d);
    nn::init_bn_buffers(buffers, "neck.bn", d);
}

pub fn init_head<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &mut ParamStore,
    stage: usize,
    num_classes: usize,
    rng: &mut R,
) {
    let prefix = ModelState::head_prefix(stage);
    params.insert(
        format!("{prefix}.weight"),
        Tensor::randn(&[cfg.feature_dim(), num_classes], 0.001, rng),
    );
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[num_classes]));
}

fn attention(g: &mut Graph, b: &mut Binder, cfg: &ModelConfig, prefix: &str, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (bsz, t, d) = (s[0], s[1], s[2]);
    let h = cfg.num_heads;
    let dk = d / h;
    let qkv = nn::linear(g, b, &format!("{prefix}.qkv"), x)?;
    let qkv = g.reshape(qkv, &[bsz, t, 3, h, dk]);
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]);
    let mut split = |i: usize| {
        let part = g.slice(qkv, 0, i, 1);
        g.reshape(part, &[bsz * h, t, dk])
    };
    let (q, k, v) = (split(0), split(1), split(2));
    let scores = g.matmul_t(q, k, false, true);
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let attn = g.softmax(scores);
    let out = g.matmul(attn, v);
    let out = g.reshape(out, &[bsz, h, t, dk]);
    let out = g.permute(out, &[0, 2, 1, 3]);
    let out = g.reshape(out, &[bsz, t, d]);
    nn::linear(g, b, &format!("{prefix}.proj"), out)
}

/// Encoder and neck: prompted images `[B,H,W,C]` → `(z_pre, z)`, both `[B, d_f]`.
pub fn encode(
    g: &mut Graph,
    b: &mut Binder,
    buffers: &ParamStore,
    cfg: &ModelConfig,
    images: Var,
    ctx: &mut ForwardCtx,
) -> Result<(Var, Var)> {
    let bsz = g.shape(images)[0];
    let d = cfg.embed_dim;
    let tokens = patchify_var(g, images, cfg.patch_size);
    let x = nn::linear(g, b, "backbone.patch", tokens)?;
    let cls = b.var(g, "backbone.cls")?;
    let cls = g.reshape(cls, &[1, d]);
    let cls = g.expand(cls, bsz);
    let mut x = g.concat(&[cls, x], 1);
    let pos = b.var(g, "backbone.pos")?;
    x = g.add_trailing(x, pos);
    for i in 0..cfg.depth {
        let p = format!("backbone.blocks.{i}");
        let h = nn::layer_norm(g, b, &format!("{p}.ln1"), x, cfg.ln_eps)?;
        let a = attention(g, b, cfg, &format!("{p}.attn"), h)?;
        x = g.add(x, a);
        let h = nn::layer_norm(g, b, &format!("{p}.ln2"), x, cfg.ln_eps)?;
        let h = nn::linear(g, b, &format!("{p}.mlp.fc1"), h)?;
        let h = g.gelu(h);
        let h = nn::linear(g, b, &format!("{p}.mlp.fc2"), h)?;
        x = g.add(x, h);
    }
    let x = nn::layer_norm(g, b, "backbone.norm", x, cfg.ln_eps)?;
    let cls_out = g.slice(x, 1, 0, 1);
    let z_pre = g.reshape(cls_out, &[bsz, d]);
    let z = nn::batch_norm(g, b, buffers, "neck.bn", z_pre, cfg.bn_eps, ctx)?;
    Ok((z_pre, z))
}

/// Raw identity scores of stage `stage`'s head for post-neck features `z: [B, d_f]`.
pub fn classify(g: &mut Graph, b: &mut Binder, z: Var, stage: usize) -> Result<Var> {
    let prefix = ModelState::head_prefix(stage);
    if !b.store().contains(&format!("{prefix}.weight")) {
        return Err(CkdaError::State(format!("no classifier head for stage {stage}")));
    }
    nn::linear(g, b, &prefix, z)
}

/// Parameters that the stage EMA combines: everything except classifier
/// heads; prompt modules only when `merge_prompts`.
pub fn ema_participates(name: &str, merge_prompts: bool) -> bool {
    if name.starts_with(HEAD_PREFIX) {
        return false;
    }
    if name.starts_with(MCP_PREFIX) || name.starts_with(MSP_PREFIX) {
        return merge_prompts;
    }
    true
}

fn merge_store(old: &ParamStore, new: &mut ParamStore, lambda: f64, merge_prompts: bool) -> Result<()> {
    for (name, t) in new.iter_mut() {
        if !ema_participates(name, merge_prompts) {
            continue;
        }
        let o = old.get(name)?;
        if o.shape() != t.shape() {
            return Err(CkdaError::State(format!(
                "ema_merge: `{name}` has shape {:?} in old state and {:?} in new",
                o.shape(),
                t.shape()
            )));
        }
        for (n, &ov) in t.data_mut().iter_mut().zip(o.data()) {
            *n = lambda * ov + (1.0 - lambda) * *n;
        }
    }
    Ok(())
}

/// `λ·old + (1−λ)·new` for backbone, neck and (optionally) prompt
/// parameters and batch-norm statistics. Heads come from `new` unchanged.
pub fn ema_merge(old: &ModelState, new: &ModelState, lambda: f64, merge_prompts: bool) -> Result<ModelState> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CkdaError::config("ema_lambda", "must lie in [0, 1]"));
    }
    let mut out = new.clone();
    merge_store(&old.params, &mut out.params, lambda, merge_prompts)?;
    merge_store(&old.buffers, &mut out.buffers, lambda, merge_prompts)?;
    Ok(out)
}
