//! Layer helpers shared by the backbone and the prompt modules. Parameters
//! are looked up by name through a [`Binder`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{CkdaError, Result};
use crate::params::{xavier, Binder, ParamStore};
use crate::tensor::Tensor;

/// Batch statistics observed by a batch-norm layer in training mode.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    /// Unbiased variance, as tracked in the running estimate.
    pub var: Vec<f64>,
}

/// Mode and side effects of one forward pass.
pub struct ForwardCtx<'r> {
    pub training: bool,
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'r> ForwardCtx<'r> {
    pub fn eval() -> Self {
        Self {
            training: false,
            dropout_rng: None,
            bn_updates: Vec::new(),
        }
    }

    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            training: true,
            dropout_rng: Some(rng),
            bn_updates: Vec::new(),
        }
    }

    /// Training-mode batch statistics without dropout; used by gradient checks.
    pub fn train_deterministic() -> Self {
        Self {
            training: true,
            dropout_rng: None,
            bn_updates: Vec::new(),
        }
    }
}

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    store.insert(format!("{prefix}.weight"), xavier(fan_in, fan_out, rng));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

pub fn init_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.weight"), Tensor::ones(&[dim]));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]));
}

pub fn init_bn_buffers(buffers: &mut ParamStore, prefix: &str, dim: usize) {
    buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[dim]));
    buffers.insert(format!("{prefix}.running_var"), Tensor::ones(&[dim]));
}

pub fn linear(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(g, &format!("{prefix}.weight"))?;
    let bias = b.var(g, &format!("{prefix}.bias"))?;
    let din = *g.shape(x).last().unwrap_or(&0);
    if g.shape(w)[0] != din {
        return Err(CkdaError::shape(
            format!("{prefix} input"),
            &[g.shape(w)[0]],
            &[din],
        ));
    }
    Ok(g.linear(x, w, Some(bias)))
}

pub fn layer_norm(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let axis = g.shape(x).len() - 1;
    let n = g.normalize_axis(x, axis, eps);
    let w = b.var(g, &format!("{prefix}.weight"))?;
    let bias = b.var(g, &format!("{prefix}.bias"))?;
    let y = g.mul_trailing(n, w);
    Ok(g.add_trailing(y, bias))
}

/// Column mean and unbiased variance of a `[rows, C]` matrix.
pub fn column_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = *t.shape().last().unwrap();
    let rows = t.len() / c;
    let mut mean = vec![0.0; c];
    for r in t.data().chunks(c) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    let mut var = vec![0.0; c];
    for r in t.data().chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let denom = (rows.max(2) - 1) as f64;
    for s in var.iter_mut() {
        *s /= denom;
    }
    (mean, var)
}

/// Batch normalisation over all leading axes of `x` (channels last).
///
/// Training mode normalises with the batch statistics and records them in
/// `ctx`; eval mode uses the running statistics stored in `buffers`.
pub fn batch_norm(
    g: &mut Graph,
    b: &mut Binder,
    buffers: &ParamStore,
    prefix: &str,
    x: Var,
    eps: f64,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let c = *shape.last().unwrap();
    let rows = shape.iter().product::<usize>() / c;
    let flat = g.reshape(x, &[rows, c]);
    let normed = if ctx.training {
        if rows < 2 {
            return Err(CkdaError::State(format!(
                "{prefix}: batch normalisation in training mode needs at least 2 rows"
            )));
        }
        let (mean, var) = column_stats(g.value(flat));
        ctx.bn_updates.push(BnUpdate {
            prefix: prefix.to_string(),
            mean,
            var,
        });
        g.normalize_axis(flat, 0, eps)
    } else {
        let rm = buffers.get(&format!("{prefix}.running_mean"))?;
        let rv = buffers.get(&format!("{prefix}.running_var"))?;
        let neg = g.constant(rm.scale(-1.0));
        let inv = g.constant(rv.map(|v| 1.0 / (v + eps).sqrt()));
        let centered = g.add_trailing(flat, neg);
        g.mul_trailing(centered, inv)
    };
    let w = b.var(g, &format!("{prefix}.weight"))?;
    let bias = b.var(g, &format!("{prefix}.bias"))?;
    let y = g.mul_trailing(normed, w);
    let y = g.add_trailing(y, bias);
    Ok(g.reshape(y, &shape))
}

/// Inverted dropout; identity outside training or when no RNG is supplied.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, ctx: &mut ForwardCtx) -> Var {
    if !ctx.training || rate <= 0.0 {
        return x;
    }
    let Some(rng) = ctx.dropout_rng.as_deref_mut() else {
        return x;
    };
    let keep = 1.0 - rate;
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    g.mul_const(x, Tensor::from_parts(shape, mask))
}

/// Fold recorded batch statistics into the running buffers.
pub fn apply_bn_updates(buffers: &mut ParamStore, updates: &[BnUpdate], momentum: f64) -> Result<()> {
    for u in updates {
        let rm = buffers.get_mut(&format!("{}.running_mean", u.prefix))?;
        for (r, m) in rm.data_mut().iter_mut().zip(&u.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        let rv = buffers.get_mut(&format!("{}.running_var", u.prefix))?;
        for (r, v) in rv.data_mut().iter_mut().zip(&u.var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
    Ok(())
}
