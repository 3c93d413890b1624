//! Modality-common prompting.
//!
//! Tokens are embedded to a `d`-channel grid (`x_ori`), instance-normalised
//! per sample and channel to strip modality style (`x_in`), gated by two
//! per-position channel masks and fused:
//!
//! ```text
//! x_com = e_o ⊙ x_ori + (1 − e_o) ⊙ (e_i ⊙ x_in)
//! ```
//!
//! The fused grid is squashed with a sigmoid and mapped back to token space
//! to form the image-space common prompt `k_com`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::depatchify_var;
use crate::error::{CkdaError, Result};
use crate::model::ModelConfig;
use crate::nn;
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

/// Activation ordering of the mask bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskActivation {
    /// `sigmoid(W2·relu(W1·x))`; masks are gates in (0,1).
    #[default]
    Gate,
    /// `relu(W2·sigmoid(W1·x))`; masks are unbounded above.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McpConfig {
    /// Latent channel count `d`.
    pub dim: usize,
    /// Bottleneck reduction `r` of the mask networks.
    pub reduction: usize,
    pub eps: f64,
    pub mask_activation: MaskActivation,
}

impl Default for McpConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            reduction: 4,
            eps: 1e-5,
            mask_activation: MaskActivation::Gate,
        }
    }
}

impl McpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || !self.dim.is_multiple_of(self.reduction) || self.dim / self.reduction < 1 {
            return Err(CkdaError::config("mcp.dim", "must be a positive multiple of mcp.reduction"));
        }
        if self.eps <= 0.0 || !self.eps.is_finite() {
            return Err(CkdaError::config("mcp.eps", "must be > 0"));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.dim / self.reduction
    }
}

pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, params: &mut ParamStore, rng: &mut R) {
    let d = cfg.mcp.dim;
    let h = cfg.mcp.hidden();
    let dt = cfg.token_dim();
    nn::init_linear(params, "mcp.embed", dt, d, rng);
    for branch in ["mask_ori", "mask_in"] {
        nn::init_linear(params, &format!("mcp.{branch}.fc1"), d, h, rng);
        nn::init_linear(params, &format!("mcp.{branch}.fc2"), h, d, rng);
    }
    // zero restoration keeps the prompt silent until training moves it
    params.insert("mcp.restore.weight", Tensor::zeros(&[d, dt]));
    params.insert("mcp.restore.bias", Tensor::zeros(&[dt]));
}

/// `[B, M, D_tok] → [B, M, d]`; the `M` axis is the row-major `(H/ps)×(W/ps)` grid.
pub fn embed_tokens(g: &mut Graph, b: &mut Binder, tokens: Var) -> Result<Var> {
    nn::linear(g, b, "mcp.embed", tokens)
}

/// Per-sample, per-channel standardisation over the spatial positions of a
/// `[B, M, d]` grid; no affine terms.
pub fn instance_norm(g: &mut Graph, x_ori: Var, eps: f64) -> Var {
    g.normalize_axis(x_ori, 1, eps)
}

fn mask(g: &mut Graph, b: &mut Binder, branch: &str, x: Var, act: MaskActivation) -> Result<Var> {
    let h = nn::linear(g, b, &format!("mcp.{branch}.fc1"), x)?;
    let h = match act {
        MaskActivation::Gate => g.relu(h),
        MaskActivation::Literal => g.sigmoid(h),
    };
    let e = nn::linear(g, b, &format!("mcp.{branch}.fc2"), h)?;
    Ok(match act {
        MaskActivation::Gate => g.sigmoid(e),
        MaskActivation::Literal => g.relu(e),
    })
}

/// Channel masks `(e_o, e_i)` computed independently at every grid position.
pub fn channel_masks(
    g: &mut Graph,
    b: &mut Binder,
    x_ori: Var,
    x_in: Var,
    act: MaskActivation,
) -> Result<(Var, Var)> {
    if g.shape(x_ori) != g.shape(x_in) {
        return Err(CkdaError::shape("channel_masks", g.shape(x_ori), g.shape(x_in)));
    }
    let e_o = mask(g, b, "mask_ori", x_ori, act)?;
    let e_i = mask(g, b, "mask_in", x_in, act)?;
    Ok((e_o, e_i))
}

pub fn fuse_common(g: &mut Graph, x_ori: Var, x_in: Var, e_o: Var, e_i: Var) -> Result<Var> {
    for v in [x_in, e_o, e_i] {
        if g.shape(v) != g.shape(x_ori) {
            return Err(CkdaError::shape("fuse_common", g.shape(x_ori), g.shape(v)));
        }
    }
    let kept = g.mul(e_o, x_ori);
    let gated_in = g.mul(e_i, x_in);
    let rest = g.one_minus(e_o);
    let supplement = g.mul(rest, gated_in);
    Ok(g.add(kept, supplement))
}

/// Sigmoid, restoration to token space, and de-tokenisation to `[B,H,W,C]`.
pub fn restore_prompt(g: &mut Graph, b: &mut Binder, cfg: &ModelConfig, x_com: Var) -> Result<Var> {
    let s = g.sigmoid(x_com);
    let tokens = nn::linear(g, b, "mcp.restore", s)?;
    Ok(depatchify_var(g, tokens, cfg))
}

/// Intermediate grids of one common-prompt pass.
#[derive(Debug, Clone, Copy)]
pub struct McpTrace {
    pub x_ori: Var,
    pub x_in: Var,
    pub e_o: Var,
    pub e_i: Var,
    pub x_com: Var,
    pub k_com: Var,
}

pub fn mcp_trace(g: &mut Graph, b: &mut Binder, cfg: &ModelConfig, tokens: Var) -> Result<McpTrace> {
    let expect = [cfg.num_tokens(), cfg.token_dim()];
    if g.shape(tokens).len() != 3 || g.shape(tokens)[1..] != expect {
        return Err(CkdaError::config(
            "mcp.embed",
            format!("token grid {:?} does not match {:?}", g.shape(tokens), expect),
        ));
    }
    let x_ori = embed_tokens(g, b, tokens)?;
    let x_in = instance_norm(g, x_ori, cfg.mcp.eps);
    let (e_o, e_i) = channel_masks(g, b, x_ori, x_in, cfg.mcp.mask_activation)?;
    let x_com = fuse_common(g, x_ori, x_in, e_o, e_i)?;
    let k_com = restore_prompt(g, b, cfg, x_com)?;
    Ok(McpTrace {
        x_ori,
        x_in,
        e_o,
        e_i,
        x_com,
        k_com,
    })
}

/// Tokens `[B, M, D_tok]` → common prompt `[B, H, W, C]`.
pub fn mcp_forward(g: &mut Graph, b: &mut Binder, cfg: &ModelConfig, tokens: Var) -> Result<Var> {
    Ok(mcp_trace(g, b, cfg, tokens)?.k_com)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::patchify_var;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig::default();
        let mut p = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init(&cfg, &mut p, &mut rng);
        // random restoration so the full path is exercised
        p.insert("mcp.restore.weight", Tensor::randn(&[8, 192], 0.3, &mut rng));
        p.insert("mcp.restore.bias", Tensor::randn(&[192], 0.3, &mut rng));
        (cfg, p)
    }

    #[test]
    fn embed_zero_tokens_zero_bias() {
        let (_, p) = setup(0);
        let mut g = Graph::new();
        let mut b = Binder::new(&p, false);
        let t = g.constant(Tensor::zeros(&[1, 16, 192]));
        let x = embed_tokens(&mut g, &mut b, t).unwrap();
        assert_eq!(g.shape(x), &[1, 16, 8]);
        assert!(g.value(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_matches_loop_oracle() {
        let (_, mut p) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        p.insert("mcp.embed.bias", Tensor::randn(&[8], 1.0, &mut rng));
        let tokens = Tensor::randn(&[2, 16, 192], 1.0, &mut rng);
        let mut g = Graph::new();
        let mut b = Binder::new(&p, false);
        let t = g.constant(tokens.clone());
        let x = embed_tokens(&mut g, &mut b, t).unwrap();
        let w = p.get("mcp.embed.weight").unwrap().data();
        let bias = p.get("mcp.embed.bias").unwrap().data();
        for bi in 0..2 {
            for m in 0..16 {
                for j in 0..8 {
                    let mut acc = bias[j];
                    for i in 0..192 {
                        acc += tokens.data()[(bi * 16 + m) * 192 + i] * w[i * 8 + j];
                    }
                    let got = g.value(x).data()[(bi * 16 + m) * 8 + j];
                    assert!((got - acc).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn instance_norm_hand_values() {
        let mut g = Graph::new();
        // one sample, two positions, one channel with values {1, 3}
        let x = g.constant(Tensor::new(&[1, 2, 1], vec![1.0, 3.0]).unwrap());
        let y = instance_norm(&mut g, x, 1e-5);
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] + expect).abs() < 1e-15);
        assert!((g.value(y).data()[1] - expect).abs() < 1e-15);
        assert!((expect - 0.999995).abs() < 1e-6);

        let c = g.constant(Tensor::full(&[2, 4, 3], 7.0));
        let yc = instance_norm(&mut g, c, 1e-5);
        assert!(g.value(yc).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_input_masks_are_half() {
        let (_, p) = setup(3);
        let mut g = Graph::new();
        let mut b = Binder::new(&p, false);
        let z = g.constant(Tensor::zeros(&[1, 16, 8]));
        let (eo, ei) = channel_masks(&mut g, &mut b, z, z, MaskActivation::Gate).unwrap();
        assert!(g.value(eo).data().iter().chain(g.value(ei).data()).all(|&v| v == 0.5));
    }

    #[test]
    fn masks_match_per_position_oracle() {
        let (_, mut p) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in ["mcp.mask_ori.fc1.bias", "mcp.mask_ori.fc2.bias"] {
            let n = p.get(k).unwrap().len();
            p.insert(k, Tensor::randn(&[n], 1.0, &mut rng));
        }
        let x = Tensor::randn(&[2, 16, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let mut b = Binder::new(&p, false);
        let xv = g.constant(x.clone());
        let (eo, _) = channel_masks(&mut g, &mut b, xv, xv, MaskActivation::Gate).unwrap();
        let w1 = p.get("mcp.mask_ori.fc1.weight").unwrap().data();
        let b1 = p.get("mcp.mask_ori.fc1.bias").unwrap().data();
        let w2 = p.get("mcp.mask_ori.fc2.weight").unwrap().data();
        let b2 = p.get("mcp.mask_ori.fc2.bias").unwrap().data();
        for pos in 0..32 {
            let xi = &x.data()[pos * 8..pos * 8 + 8];
            let mut h = [0.0; 2];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut acc = b1[j];
                for i in 0..8 {
                    acc += xi[i] * w1[i * 2 + j];
                }
                *hj = acc.max(0.0);
            }
            for j in 0..8 {
                let mut acc = b2[j];
                for (i, hi) in h.iter().enumerate() {
                    acc += hi * w2[i * 8 + j];
                }
                let want = 1.0 / (1.0 + (-acc).exp());
                let got = g.value(eo).data()[pos * 8 + j];
                assert!((got - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fusion_cases() {
        let mut g = Graph::new();
        let x_ori = g.constant(Tensor::full(&[1, 1, 1], 2.0));
        let x_in = g.constant(Tensor::full(&[1, 1, 1], 4.0));
        let half = g.constant(Tensor::full(&[1, 1, 1], 0.5));
        let y = fuse_common(&mut g, x_ori, x_in, half, half).unwrap();
        assert!((g.value(y).item() - 2.0).abs() < 1e-15);
        let one = g.constant(Tensor::ones(&[1, 1, 1]));
        let zero = g.constant(Tensor::zeros(&[1, 1, 1]));
        let y1 = fuse_common(&mut g, x_ori, x_in, one, half).unwrap();
        assert_eq!(g.value(y1).item(), 2.0);
        let y2 = fuse_common(&mut g, x_ori, x_in, zero, one).unwrap();
        assert_eq!(g.value(y2).item(), 4.0);
    }

    #[test]
    fn restore_of_zero_grid() {
        let (cfg, mut p) = setup(6);
        p.insert("mcp.restore.bias", Tensor::zeros(&[192]));
        let mut g = Graph::new();
        let mut b = Binder::new(&p, false);
        let z = g.constant(Tensor::zeros(&[1, 16, 8]));
        let k = restore_prompt(&mut g, &mut b, &cfg, z).unwrap();
        assert_eq!(g.shape(k), &[1, 32, 32, 3]);
        let w = p.get("mcp.restore.weight").unwrap().data();
        let rowsum: Vec<f64> = (0..192).map(|j| (0..8).map(|i| 0.5 * w[i * 192 + j]).sum()).collect();
        // every token equals half the column sums of E_pc
        let tg = crate::backbone::patchify(&g.value(k).reshape(&[32, 32, 3]).unwrap(), 8).unwrap();
        for tok in tg.tokens.data().chunks(192) {
            for (a, b) in tok.iter().zip(&rowsum) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mcp_forward_shape_and_determinism() {
        let (cfg, p) = setup(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let imgs = Tensor::rand_uniform(&[2, 32, 32, 3], 0.0, 1.0, &mut rng);
        let run = || {
            let mut g = Graph::new();
            let mut b = Binder::new(&p, false);
            let x = g.constant(imgs.clone());
            let t = patchify_var(&mut g, x, 8);
            let k = mcp_forward(&mut g, &mut b, &cfg, t).unwrap();
            g.value(k).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[2, 32, 32, 3]);
        assert_eq!(a, run());
    }

    #[test]
    fn wrong_token_dim_is_config_error() {
        let (cfg, p) = setup(9);
        let mut g = Graph::new();
        let mut b = Binder::new(&p, false);
        let t = g.constant(Tensor::zeros(&[1, 16, 100]));
        assert!(matches!(mcp_forward(&mut g, &mut b, &cfg, t), Err(CkdaError::Config { .. })));
    }

    proptest::proptest! {
        #[test]
        fn instance_norm_moments(seed in 0u64..1000, scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[2, 16, 8], scale, &mut rng);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = instance_norm(&mut g, xv, 1e-5);
            let v = g.value(y).data();
            for bi in 0..2 {
                for c in 0..8 {
                    let moments = |t: &[f64]| {
                        let vals: Vec<f64> = (0..16).map(|m| t[(bi * 16 + m) * 8 + c]).collect();
                        let mean = vals.iter().sum::<f64>() / 16.0;
                        (mean, vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 16.0)
                    };
                    let (mean, var) = moments(v);
                    let (_, raw_var) = moments(x.data());
                    proptest::prop_assert!(mean.abs() < 1e-6);
                    proptest::prop_assert!(var <= 1.0);
                    proptest::prop_assert!((var - raw_var / (raw_var + 1e-5)).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn masks_in_open_unit_interval(seed in 0u64..1000) {
            let (_, p) = setup(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x = Tensor::randn(&[1, 16, 8], 3.0, &mut rng);
            let mut g = Graph::new();
            let mut b = Binder::new(&p, false);
            let xv = g.constant(x);
            let xi = instance_norm(&mut g, xv, 1e-5);
            let (eo, ei) = channel_masks(&mut g, &mut b, xv, xi, MaskActivation::Gate).unwrap();
            proptest::prop_assert!(g.value(eo).data().iter().chain(g.value(ei).data()).all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn fusion_never_amplifies_when_inputs_agree(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let x = g.constant(Tensor::randn(&[1, 4, 8], 2.0, &mut rng));
            let eo = g.constant(Tensor::rand_uniform(&[1, 4, 8], 0.0, 1.0, &mut rng));
            let ei = g.constant(Tensor::rand_uniform(&[1, 4, 8], 0.0, 1.0, &mut rng));
            let y = fuse_common(&mut g, x, x, eo, ei).unwrap();
            for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
                proptest::prop_assert!(a.abs() <= b.abs() + 1e-15);
            }
        }
    }
}
