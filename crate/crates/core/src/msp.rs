//! Modality-specific prompting: one token-level bottleneck per modality
//! (linear → batch norm → linear → dropout), prompt composition, image
//! merge and the stage-to-stage prompt alignment loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::depatchify_var;
use crate::error::{CkdaError, Result};
use crate::model::{ModelConfig, PromptMerge};
use crate::nn::{self, ForwardCtx};
use crate::params::{Binder, ParamStore};
use crate::synth::Modality;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MspConfig {
    /// Bottleneck reduction applied to the token dimension.
    pub reduction: usize,
    pub dropout: f64,
}

impl Default for MspConfig {
    fn default() -> Self {
        Self {
            reduction: 4,
            dropout: 0.1,
        }
    }
}

impl MspConfig {
    pub fn validate(&self, token_dim: usize) -> Result<()> {
        if self.reduction == 0 || token_dim / self.reduction == 0 {
            return Err(CkdaError::config("msp.reduction", "must be in 1..=token_dim"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CkdaError::config("msp.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

pub fn branch_prefix(m: Modality) -> String {
    format!("msp.{}", m.name())
}

pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, params: &mut ParamStore, buffers: &mut ParamStore, rng: &mut R) {
    let dt = cfg.token_dim();
    let h = dt / cfg.msp.reduction;
    for m in [Modality::Visible, Modality::Infrared] {
        let p = branch_prefix(m);
        nn::init_linear(params, &format!("{p}.fc1"), dt, h, rng);
        nn::init_norm(params, &format!("{p}.bn"), h);
        nn::init_bn_buffers(buffers, &format!("{p}.bn"), h);
        // zero output layer: the specific prompt starts silent
        params.insert(format!("{p}.fc2.weight"), Tensor::zeros(&[h, dt]));
        params.insert(format!("{p}.fc2.bias"), Tensor::zeros(&[dt]));
    }
}

/// Tokens of one modality `[B, M, D_tok]` → specific prompt `[B, H, W, C]`.
pub fn msp_forward(
    g: &mut Graph,
    b: &mut Binder,
    buffers: &ParamStore,
    cfg: &ModelConfig,
    tokens: Var,
    modality: Modality,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 || s[1..] != [cfg.num_tokens(), cfg.token_dim()] {
        return Err(CkdaError::shape(
            "msp tokens",
            &[0, cfg.num_tokens(), cfg.token_dim()],
            &s,
        ));
    }
    if ctx.training && s[0] < 2 {
        return Err(CkdaError::State(format!(
            "msp.{}: training batch of size {} (batch normalisation needs at least 2 samples)",
            modality.name(),
            s[0]
        )));
    }
    let p = branch_prefix(modality);
    let h = nn::linear(g, b, &format!("{p}.fc1"), tokens)?;
    let h = nn::batch_norm(g, b, buffers, &format!("{p}.bn"), h, cfg.bn_eps, ctx)?;
    let out = nn::linear(g, b, &format!("{p}.fc2"), h)?;
    let out = nn::dropout(g, out, cfg.msp.dropout, ctx);
    Ok(depatchify_var(g, out, cfg))
}

fn same_shape(g: &Graph, ctx: &str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(CkdaError::shape(ctx, g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// `k_p = k_spe + k_com`.
pub fn compose_prompt(g: &mut Graph, k_com: Var, k_spe: Var) -> Result<Var> {
    same_shape(g, "compose_prompt", k_com, k_spe)?;
    Ok(g.add(k_spe, k_com))
}

/// Prompted image; no clipping.
pub fn merge_prompt(g: &mut Graph, image: Var, k_p: Var, how: PromptMerge) -> Result<Var> {
    same_shape(g, "merge_prompt", image, k_p)?;
    Ok(match how {
        PromptMerge::Add => g.add(image, k_p),
    })
}

/// Mean absolute difference between the current prompt and the frozen
/// previous-stage prompt. `None` means there is no previous stage.
pub fn prompt_alignment_loss(g: &mut Graph, current: Var, previous: Option<Var>) -> Result<Var> {
    let prev = previous.ok_or_else(|| {
        CkdaError::State("prompt alignment loss requested without previous-stage prompt modules".into())
    })?;
    same_shape(g, "prompt_alignment_loss", current, prev)?;
    let d = g.sub(current, prev);
    let a = g.abs(d);
    Ok(g.mean_all(a))
}
