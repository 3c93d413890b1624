//! Cross-modal retrieval metrics: cosine ranking, mAP, Rank-1 and average
//! forgetting over a stage stream.

use serde::{Deserialize, Serialize};

use crate::error::{CkdaError, Result};
use crate::model::{extract_features, ModelState, PromptToggles};
use crate::synth::{Modality, Sample, StageData};
use crate::tensor::Tensor;

/// Retrieval quality on one stage's query/gallery split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub map: f64,
    pub r1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Map,
    R1,
}

impl StageMetrics {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Map => self.map,
            Metric::R1 => self.r1,
        }
    }
}

/// Reference point for the drop in average forgetting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ForgettingForm {
    /// Drop from the value right after training on the stage.
    #[default]
    Diagonal,
    /// Drop from the best value seen before the final stage.
    Max,
}

/// Lower-triangular `a[t][i]`: the model after stage `t` evaluated on stage `i ≤ t`.
/// Indices are 0-based here (`rows[t-1][i-1]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsMatrix {
    pub rows: Vec<Vec<StageMetrics>>,
}

impl MetricsMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_stages(&self) -> usize {
        self.rows.len()
    }

    /// Append the row for the next stage; it must cover stages `1..=t`.
    pub fn push_row(&mut self, row: Vec<StageMetrics>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(CkdaError::Eval(format!(
                "row for stage {} must have {} entries, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                row.len()
            )));
        }
        for m in &row {
            if !(0.0..=1.0).contains(&m.map) || !(0.0..=1.0).contains(&m.r1) {
                return Err(CkdaError::Eval(format!("metric outside [0,1]: {m:?}")));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    /// `a[t][i]` with 1-based stage indices; `None` above the diagonal.
    pub fn get(&self, t: usize, i: usize) -> Option<StageMetrics> {
        if t == 0 || i == 0 || i > t {
            return None;
        }
        self.rows.get(t - 1).and_then(|r| r.get(i - 1)).copied()
    }

    /// Mean of the final row.
    pub fn final_average(&self, m: Metric) -> Result<f64> {
        let last = self
            .rows
            .last()
            .ok_or_else(|| CkdaError::Eval("empty metrics matrix".into()))?;
        Ok(last.iter().map(|x| x.get(m)).sum::<f64>() / last.len() as f64)
    }
}

/// Mean drop over the non-final stages. Undefined for a single stage.
pub fn average_forgetting(mm: &MetricsMatrix, metric: Metric, form: ForgettingForm) -> Result<f64> {
    let s = mm.num_stages();
    if s < 2 {
        return Err(CkdaError::Eval(format!(
            "average forgetting needs at least 2 stages, got {s}"
        )));
    }
    let last = &mm.rows[s - 1];
    let mut total = 0.0;
    for i in 0..s - 1 {
        let reference = match form {
            ForgettingForm::Diagonal => mm.rows[i][i].get(metric),
            ForgettingForm::Max => (i..s - 1)
                .map(|t| mm.rows[t][i].get(metric))
                .fold(f64::NEG_INFINITY, f64::max),
        };
        total += reference - last[i].get(metric);
    }
    Ok(total / (s - 1) as f64)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gallery indices by descending cosine similarity, ties by ascending index.
pub fn rank_gallery(query: &[f64], gallery: &Tensor) -> Result<Vec<usize>> {
    let d = query.len();
    if gallery.ndim() != 2 || gallery.shape()[1] != d {
        return Err(CkdaError::shape("gallery", &[0, d], gallery.shape()));
    }
    if gallery.shape()[0] == 0 {
        return Err(CkdaError::Eval("empty gallery".into()));
    }
    let qn = norm(query);
    if qn == 0.0 || !qn.is_finite() {
        return Err(CkdaError::Numeric {
            row: 0,
            reason: "query feature has zero or non-finite norm".into(),
        });
    }
    let mut sims = Vec::with_capacity(gallery.shape()[0]);
    for (i, g) in gallery.data().chunks(d).enumerate() {
        let gn = norm(g);
        if gn == 0.0 || !gn.is_finite() {
            return Err(CkdaError::Numeric {
                row: i,
                reason: "gallery feature has zero or non-finite norm".into(),
            });
        }
        let dot: f64 = query.iter().zip(g).map(|(a, b)| a * b).sum();
        sims.push(dot / (qn * gn));
    }
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order)
}

fn check_relevance(q: usize, ranking: &[usize], relevant: &[bool]) -> Result<usize> {
    if ranking.len() != relevant.len() {
        return Err(CkdaError::Eval(format!("query {q}: ranking and relevance lengths differ")));
    }
    let n = relevant.iter().filter(|&&r| r).count();
    if n == 0 {
        return Err(CkdaError::Eval(format!("query {q} has no relevant gallery item")));
    }
    Ok(n)
}

/// Average precision of one ranking.
pub fn average_precision(ranking: &[usize], relevant: &[bool]) -> Result<f64> {
    let n = check_relevance(0, ranking, relevant)?;
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (k, &gi) in ranking.iter().enumerate() {
        if relevant[gi] {
            hits += 1;
            acc += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(acc / n as f64)
}

pub fn mean_ap(rankings: &[Vec<usize>], relevance: &[Vec<bool>]) -> Result<f64> {
    if rankings.is_empty() || rankings.len() != relevance.len() {
        return Err(CkdaError::Eval("need one relevance row per query".into()));
    }
    let mut total = 0.0;
    for (q, (r, rel)) in rankings.iter().zip(relevance).enumerate() {
        check_relevance(q, r, rel)?;
        total += average_precision(r, rel)?;
    }
    Ok(total / rankings.len() as f64)
}

pub fn rank1(rankings: &[Vec<usize>], relevance: &[Vec<bool>]) -> Result<f64> {
    if rankings.is_empty() || rankings.len() != relevance.len() {
        return Err(CkdaError::Eval("need one relevance row per query".into()));
    }
    let mut hits = 0usize;
    for (q, (r, rel)) in rankings.iter().zip(relevance).enumerate() {
        check_relevance(q, r, rel)?;
        if rel[r[0]] {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

/// mAP and R1 of query features against gallery features, relevance by identity.
pub fn retrieval_metrics(
    query: &Tensor,
    query_ids: &[u64],
    gallery: &Tensor,
    gallery_ids: &[u64],
) -> Result<StageMetrics> {
    let d = query.shape()[1];
    let mut rankings = Vec::with_capacity(query_ids.len());
    let mut relevance = Vec::with_capacity(query_ids.len());
    for (q, &qid) in query.data().chunks(d).zip(query_ids) {
        rankings.push(rank_gallery(q, gallery)?);
        relevance.push(gallery_ids.iter().map(|&g| g == qid).collect());
    }
    Ok(StageMetrics {
        map: mean_ap(&rankings, &relevance)?,
        r1: rank1(&rankings, &relevance)?,
    })
}

fn features(state: &ModelState, samples: &[Sample], toggles: PromptToggles) -> Result<Tensor> {
    let imgs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let mods: Vec<Modality> = samples.iter().map(|s| s.modality).collect();
    extract_features(state, &imgs, &mods, toggles, true)
}

/// Evaluate a model on one stage's cross-modal query/gallery split.
pub fn evaluate_stage<D: StageData + ?Sized>(
    state: &ModelState,
    data: &D,
    toggles: PromptToggles,
) -> Result<StageMetrics> {
    let q = features(state, data.query(), toggles)?;
    let g = features(state, data.gallery(), toggles)?;
    let qid: Vec<u64> = data.query().iter().map(|s| s.identity).collect();
    let gid: Vec<u64> = data.gallery().iter().map(|s| s.identity).collect();
    retrieval_metrics(&q, &qid, &g, &gid)
}
