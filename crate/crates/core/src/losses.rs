//! Identity losses (cross-entropy, batch-hard triplet) and the weighted
//! training objective.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{CkdaError, Result};
use crate::synth::Modality;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the prompt alignment term.
    pub alpha: f64,
    /// Weight of the knowledge alignment term.
    pub beta: f64,
    /// Inter- vs intra-modality balance inside the alignment term.
    pub mu: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            mu: 0.5,
            margin: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("margin", self.margin)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CkdaError::config(name, format!("must be a finite value >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(CkdaError::config("mu", format!("must lie in [0, 1], got {}", self.mu)));
        }
        Ok(())
    }
}

/// Identities per batch and samples per identity in each modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSpec {
    pub identities: usize,
    pub visible_per_identity: usize,
    pub infrared_per_identity: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            identities: 8,
            visible_per_identity: 2,
            infrared_per_identity: 2,
        }
    }
}

impl BatchSpec {
    pub fn batch_size(&self) -> usize {
        self.identities * (self.visible_per_identity + self.infrared_per_identity)
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(CkdaError::config("batch.identities", "need at least 2 identities per batch"));
        }
        if self.visible_per_identity == 0 && self.infrared_per_identity == 0 {
            return Err(CkdaError::config("batch", "empty batch"));
        }
        Ok(())
    }
}

/// How triplet positives and negatives are mined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TripletMining {
    /// Over the whole mixed-modality batch.
    #[default]
    Global,
    /// Only among samples of the other modality.
    CrossModality,
}

/// Mean negative log-likelihood of the true class.
pub fn ce_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(CkdaError::shape("ce_loss logits", &[labels.len(), 0], &s));
    }
    let n = s[1];
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= n) {
        return Err(CkdaError::State(format!(
            "label {l} of sample {i} outside the {n} classes of the current head"
        )));
    }
    let lp = g.log_softmax(logits);
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * n + l).collect();
    let picked = g.gather(lp, idx);
    let m = g.mean_all(picked);
    Ok(g.scale(m, -1.0))
}

/// Hardest positive and negative per anchor; anchors without either are
/// skipped.
pub fn hardest_pairs(
    dist: &Tensor,
    labels: &[usize],
    modalities: Option<&[Modality]>,
    mining: TripletMining,
) -> Vec<(usize, usize, usize)> {
    let b = labels.len();
    let d = dist.data();
    let mut out = Vec::new();
    for a in 0..b {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            if mining == TripletMining::CrossModality {
                if let Some(m) = modalities {
                    if m[j] == m[a] {
                        continue;
                    }
                }
            }
            let v = d[a * b + j];
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| v > d[a * b + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|n| v < d[a * b + n]) {
                neg = Some(j);
            }
        }
        if let (Some(p), Some(n)) = (pos, neg) {
            out.push((a, p, n));
        }
    }
    out
}

/// Batch-hard triplet loss on Euclidean distances.
pub fn triplet_loss_with(
    g: &mut Graph,
    features: Var,
    labels: &[usize],
    modalities: Option<&[Modality]>,
    margin: f64,
    mining: TripletMining,
) -> Result<Var> {
    let b = g.shape(features)[0];
    if b != labels.len() {
        return Err(CkdaError::shape("triplet features", &[labels.len()], &[b]));
    }
    if mining == TripletMining::CrossModality && modalities.is_none_or(|m| m.len() != b) {
        return Err(CkdaError::State("cross-modality mining needs one modality per sample".into()));
    }
    let dist = g.pairwise_dist(features);
    let triples = hardest_pairs(g.value(dist), labels, modalities, mining);
    if triples.is_empty() {
        return Err(CkdaError::State(
            "triplet loss: no anchor has both a positive and a negative".into(),
        ));
    }
    let ap = g.gather(dist, triples.iter().map(|&(a, p, _)| a * b + p).collect());
    let an = g.gather(dist, triples.iter().map(|&(a, _, n)| a * b + n).collect());
    let diff = g.sub(ap, an);
    let diff = g.add_scalar(diff, margin);
    let hinge = g.relu(diff);
    Ok(g.mean_all(hinge))
}

pub fn triplet_loss(g: &mut Graph, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    triplet_loss_with(g, features, labels, None, margin, TripletMining::Global)
}

/// Components of the objective for one step. Anti-forgetting terms are
/// `None` when there is no previous stage (or the module is disabled).
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub ce: Var,
    pub triplet: Var,
    pub prompt: Option<Var>,
    pub inter: Option<Var>,
    pub intra: Option<Var>,
}

/// `L_ce + L_trip + α·L_p + β·(μ·L_inter + (1−μ)·L_intra)`.
pub fn total_loss(g: &mut Graph, t: &LossTerms, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let mut l = g.add(t.ce, t.triplet);
    if let Some(p) = t.prompt {
        let p = g.scale(p, w.alpha);
        l = g.add(l, p);
    }
    if let Some(x) = t.inter {
        let x = g.scale(x, w.beta * w.mu);
        l = g.add(l, x);
    }
    if let Some(x) = t.intra {
        let x = g.scale(x, w.beta * (1.0 - w.mu));
        l = g.add(l, x);
    }
    Ok(l)
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(base: f64, prompt: f64, inter: f64, intra: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(base + w.alpha * prompt + w.beta * (w.mu * inter + (1.0 - w.mu) * intra))
}
