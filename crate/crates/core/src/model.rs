//! Model configuration, the trainable state, and the full prompted forward
//! pass (common prompt + specific prompt → merged image → encoder).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::backbone;
use crate::error::{CkdaError, Result};
use crate::mcp::{self, McpConfig};
use crate::msp::{self, MspConfig};
use crate::nn::ForwardCtx;
use crate::params::{hex, Binder, ParamStore};
use crate::synth::{ImageGeometry, Modality};
use crate::tensor::Tensor;

/// How the composed prompt is combined with the input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptMerge {
    #[default]
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub geometry: ImageGeometry,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub mcp: McpConfig,
    pub msp: MspConfig,
    pub merge: PromptMerge,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            geometry: ImageGeometry::default(),
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            num_heads: 4,
            mlp_ratio: 2,
            ln_eps: 1e-6,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            mcp: McpConfig::default(),
            msp: MspConfig::default(),
            merge: PromptMerge::Add,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (
            self.geometry.height / self.patch_size,
            self.geometry.width / self.patch_size,
        )
    }

    pub fn num_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.geometry.channels
    }

    /// Feature dimension `d_f` of the encoder output (pre- and post-neck).
    pub fn feature_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if self.patch_size == 0 || !g.height.is_multiple_of(self.patch_size) {
            return Err(CkdaError::config(
                "image_height",
                format!("{} not divisible by patch size {}", g.height, self.patch_size),
            ));
        }
        if !g.width.is_multiple_of(self.patch_size) {
            return Err(CkdaError::config(
                "image_width",
                format!("{} not divisible by patch size {}", g.width, self.patch_size),
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(CkdaError::config(
                "num_heads",
                "must divide embed_dim",
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(CkdaError::config("depth", "depth and mlp_ratio must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(CkdaError::config("bn_momentum", "must lie in [0, 1]"));
        }
        self.mcp.validate()?;
        self.msp.validate(self.token_dim())?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        hex(&Sha256::digest(json.as_bytes()))
    }
}

/// Which prompt branches participate in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptToggles {
    pub mcp: bool,
    pub msp: bool,
}

impl PromptToggles {
    pub const NONE: PromptToggles = PromptToggles {
        mcp: false,
        msp: false,
    };
    pub const ALL: PromptToggles = PromptToggles {
        mcp: true,
        msp: true,
    };

    pub fn any(&self) -> bool {
        self.mcp || self.msp
    }
}

/// Backbone, neck, prompt modules and per-stage classifier heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    /// Trainable tensors.
    pub params: ParamStore,
    /// Batch-norm running statistics.
    pub buffers: ParamStore,
    /// Output size of each stage's head, `head_sizes[s-1] = N_s`.
    pub head_sizes: Vec<usize>,
    pub ema_lambda: f64,
    /// Last stage this state was trained on (0 before any training).
    pub stage_index: usize,
}

/// Name prefixes of the parameter groups.
pub const BACKBONE_PREFIX: &str = "backbone.";
pub const NECK_PREFIX: &str = "neck.";
pub const MCP_PREFIX: &str = "mcp.";
pub const MSP_PREFIX: &str = "msp.";
pub const HEAD_PREFIX: &str = "head.";

impl ModelState {
    pub fn new(config: ModelConfig, ema_lambda: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(0.0..=1.0).contains(&ema_lambda) {
            return Err(CkdaError::config("ema_lambda", "must lie in [0, 1]"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        backbone::init(&config, &mut params, &mut buffers, &mut rng);
        mcp::init(&config, &mut params, &mut rng);
        msp::init(&config, &mut params, &mut buffers, &mut rng);
        Ok(Self {
            config,
            params,
            buffers,
            head_sizes: Vec::new(),
            ema_lambda,
            stage_index: 0,
        })
    }

    /// Append a freshly initialised classifier head for the next stage.
    pub fn add_head(&mut self, num_classes: usize, seed: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stage = self.head_sizes.len() + 1;
        backbone::init_head(&self.config, &mut self.params, stage, num_classes, &mut rng);
        self.head_sizes.push(num_classes);
        stage
    }

    pub fn head_prefix(stage: usize) -> String {
        format!("{HEAD_PREFIX}{stage}")
    }

    /// Hash over parameters and buffers.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.params.content_hash().as_bytes());
        h.update(self.buffers.content_hash().as_bytes());
        hex(&h.finalize())
    }
}

/// A batch of images ordered visible-first: the first `num_visible` rows
/// are visible, the rest infrared.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    /// `[B, H, W, C]`
    pub images: Tensor,
    pub num_visible: usize,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_infrared(&self) -> usize {
        self.len() - self.num_visible
    }

    pub fn modality(&self, i: usize) -> Modality {
        if i < self.num_visible {
            Modality::Visible
        } else {
            Modality::Infrared
        }
    }

    pub fn from_images(images: &[&Tensor], modalities: &[Modality]) -> Result<Self> {
        let num_visible = modalities
            .iter()
            .take_while(|m| **m == Modality::Visible)
            .count();
        if modalities[num_visible..].contains(&Modality::Visible) {
            return Err(CkdaError::State(
                "image batch must list visible samples before infrared ones".into(),
            ));
        }
        Ok(Self {
            images: Tensor::stack(images)?,
            num_visible,
        })
    }
}

/// Graph handles produced by [`forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Common prompt `[B,H,W,C]`, when MCP is enabled.
    pub k_com: Option<Var>,
    /// Specific prompt `[B,H,W,C]` (each row from its modality's branch), when MSP is enabled.
    pub k_spe: Option<Var>,
    /// Composed prompt `k_spe + k_com`, when any prompt branch is enabled.
    pub k_p: Option<Var>,
    /// Prompted image fed to the encoder.
    pub prompted: Var,
    /// Encoder output before the neck `[B, d_f]`.
    pub z_pre: Var,
    /// Neck output `[B, d_f]`.
    pub z: Var,
}

/// Prompt generation only: returns `(k_com, k_spe, k_p)`.
pub fn prompts(
    g: &mut Graph,
    b: &mut Binder,
    state: &ModelState,
    batch: &ImageBatch,
    images: Var,
    toggles: PromptToggles,
    ctx: &mut ForwardCtx,
) -> Result<(Option<Var>, Option<Var>, Option<Var>)> {
    let cfg = &state.config;
    if !toggles.any() {
        return Ok((None, None, None));
    }
    let tokens = backbone::patchify_var(g, images, cfg.patch_size);
    let k_com = if toggles.mcp {
        Some(mcp::mcp_forward(g, b, cfg, tokens)?)
    } else {
        None
    };
    let k_spe = if toggles.msp {
        let nv = batch.num_visible;
        let ni = batch.num_infrared();
        let mut parts = Vec::new();
        if nv > 0 {
            let t = g.slice(tokens, 0, 0, nv);
            parts.push(msp::msp_forward(g, b, &state.buffers, cfg, t, Modality::Visible, ctx)?);
        }
        if ni > 0 {
            let t = g.slice(tokens, 0, nv, ni);
            parts.push(msp::msp_forward(g, b, &state.buffers, cfg, t, Modality::Infrared, ctx)?);
        }
        Some(if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 0)
        })
    } else {
        None
    };
    let k_p = match (k_com, k_spe) {
        (Some(c), Some(s)) => Some(msp::compose_prompt(g, c, s)?),
        (Some(c), None) => Some(c),
        (None, Some(s)) => Some(s),
        (None, None) => None,
    };
    Ok((k_com, k_spe, k_p))
}

/// Prompted forward pass through the encoder and neck.
pub fn forward(
    g: &mut Graph,
    b: &mut Binder,
    state: &ModelState,
    batch: &ImageBatch,
    toggles: PromptToggles,
    ctx: &mut ForwardCtx,
) -> Result<ForwardOutput> {
    let cfg = &state.config;
    let expect = [cfg.geometry.height, cfg.geometry.width, cfg.geometry.channels];
    if batch.images.ndim() != 4 || batch.images.shape()[1..] != expect {
        return Err(CkdaError::shape("forward images", &expect, batch.images.shape()));
    }
    let images = g.constant(batch.images.clone());
    let (k_com, k_spe, k_p) = prompts(g, b, state, batch, images, toggles, ctx)?;
    let prompted = match k_p {
        Some(p) => msp::merge_prompt(g, images, p, cfg.merge)?,
        None => images,
    };
    let (z_pre, z) = backbone::encode(g, b, &state.buffers, cfg, prompted, ctx)?;
    Ok(ForwardOutput {
        k_com,
        k_spe,
        k_p,
        prompted,
        z_pre,
        z,
    })
}

/// Eval-mode post-neck (or pre-neck) features for a set of images, in chunks.
pub fn extract_features(
    state: &ModelState,
    images: &[&Tensor],
    modalities: &[Modality],
    toggles: PromptToggles,
    post_neck: bool,
) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let d = state.config.feature_dim();
    let mut out = Vec::with_capacity(images.len() * d);
    // eval mode has no cross-sample interaction, so per-modality grouping is free
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.sort_by_key(|&i| modalities[i]);
    let mut feats = vec![Vec::new(); images.len()];
    for chunk in order.chunks(CHUNK) {
        let imgs: Vec<&Tensor> = chunk.iter().map(|&i| images[i]).collect();
        let mods: Vec<Modality> = chunk.iter().map(|&i| modalities[i]).collect();
        let batch = ImageBatch::from_images(&imgs, &mods)?;
        let mut g = Graph::new();
        let mut b = Binder::new(&state.params, false);
        let mut ctx = ForwardCtx::eval();
        let o = forward(&mut g, &mut b, state, &batch, toggles, &mut ctx)?;
        let v = g.value(if post_neck { o.z } else { o.z_pre });
        for (row, &i) in v.data().chunks(d).zip(chunk) {
            feats[i] = row.to_vec();
        }
    }
    for f in feats {
        out.extend(f);
    }
    Tensor::new(&[images.len(), d], out)
}
