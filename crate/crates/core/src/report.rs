//! Metrics reports (structured and tabular) and prompt heatmap diagnostics.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{CkdaError, Result};
use crate::eval::{average_forgetting, ForgettingForm, Metric, MetricsMatrix};
use crate::model::{self, ImageBatch, ModelState, PromptToggles};
use crate::nn::ForwardCtx;
use crate::params::Binder;
use crate::synth::{encode_png, ImageGeometry, Modality, Sample, StageData};
use crate::tensor::Tensor;

pub const REPORT_FORMAT: &str = "ckda-metrics";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub code_version: String,
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub modules: String,
    pub metrics: MetricsMatrix,
    pub final_map: f64,
    pub final_r1: f64,
    /// Absent for a single-stage stream.
    pub forgetting_map: Option<f64>,
    pub forgetting_r1: Option<f64>,
}

impl MetricsReport {
    pub fn new(name: &str, config_hash: &str, seed: u64, modules: &str, metrics: &MetricsMatrix) -> Result<Self> {
        let af = |m| average_forgetting(metrics, m, ForgettingForm::Diagonal).ok();
        Ok(Self {
            format: REPORT_FORMAT.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            name: name.into(),
            config_hash: config_hash.into(),
            seed,
            modules: modules.into(),
            metrics: metrics.clone(),
            final_map: metrics.final_average(Metric::Map)?,
            final_r1: metrics.final_average(Metric::R1)?,
            forgetting_map: af(Metric::Map),
            forgetting_r1: af(Metric::R1),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Human-readable matrix, one row per trained stage, percentages.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let n = self.metrics.num_stages();
        let _ = writeln!(s, "{} [{}] seed {} config {}", self.name, self.modules, self.seed, &self.config_hash[..12.min(self.config_hash.len())]);
        let _ = write!(s, "{:<10}", "after\\on");
        for i in 1..=n {
            let _ = write!(s, "{:>16}", format!("stage {i} mAP/R1"));
        }
        s.push('\n');
        for (t, row) in self.metrics.rows.iter().enumerate() {
            let _ = write!(s, "{:<10}", format!("stage {}", t + 1));
            for m in row {
                let _ = write!(s, "{:>16}", format!("{:.1}/{:.1}", 100.0 * m.map, 100.0 * m.r1));
            }
            s.push('\n');
        }
        let _ = writeln!(s, "final average: mAP {:.2}  R1 {:.2}", 100.0 * self.final_map, 100.0 * self.final_r1);
        match (self.forgetting_map, self.forgetting_r1) {
            (Some(a), Some(b)) => {
                let _ = writeln!(s, "average forgetting: mAP {:.2}  R1 {:.2}", 100.0 * a, 100.0 * b);
            }
            _ => {
                let _ = writeln!(s, "average forgetting: undefined for a single stage");
            }
        }
        s
    }
}

/// Per-pixel prompt energy `Σ_c v²` of an `H×W×C` map.
pub fn energy_map(t: &Tensor) -> Vec<f64> {
    let c = t.shape()[2];
    t.data().chunks(c).map(|p| p.iter().map(|v| v * v).sum()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyStats {
    pub mean_inside: f64,
    pub mean_outside: f64,
    /// Share of the total energy that falls inside the silhouette (0 for an all-zero map).
    pub inside_fraction: f64,
}

pub fn energy_stats(energy: &[f64], mask: &[bool]) -> Result<EnergyStats> {
    if energy.len() != mask.len() {
        return Err(CkdaError::shape("energy mask", &[energy.len()], &[mask.len()]));
    }
    let (mut si, mut so, mut ni, mut no) = (0.0, 0.0, 0usize, 0usize);
    for (&e, &m) in energy.iter().zip(mask) {
        if m {
            si += e;
            ni += 1;
        } else {
            so += e;
            no += 1;
        }
    }
    let total = si + so;
    Ok(EnergyStats {
        mean_inside: if ni > 0 { si / ni as f64 } else { 0.0 },
        mean_outside: if no > 0 { so / no as f64 } else { 0.0 },
        inside_fraction: if total > 0.0 { si / total } else { 0.0 },
    })
}

/// Magnitude heatmap scaled to `[0,1]` by its own maximum.
pub fn heatmap_image(energy: &[f64], geom: &ImageGeometry) -> Tensor {
    let mag: Vec<f64> = energy.iter().map(|e| e.sqrt()).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let data = if max > 0.0 {
        mag.iter().map(|m| m / max).collect()
    } else {
        vec![0.0; mag.len()]
    };
    Tensor::from_parts(vec![geom.height, geom.width, 1], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRecord {
    pub stage: usize,
    pub identity: u64,
    pub modality: Modality,
    pub sample_index: usize,
    pub common: EnergyStats,
    pub specific: EnergyStats,
    pub prompted: EnergyStats,
    pub files: Vec<String>,
}

/// Prompt maps of one sample in eval mode: `(k_com, k_spe, prompted image)`.
pub fn prompt_maps(state: &ModelState, sample: &Sample) -> Result<(Tensor, Tensor, Tensor)> {
    let batch = ImageBatch::from_images(&[&sample.image], &[sample.modality])?;
    let mut g = Graph::new();
    let mut b = Binder::new(&state.params, false);
    let mut ctx = ForwardCtx::eval();
    let images = g.constant(batch.images.clone());
    let (k_com, k_spe, k_p) = model::prompts(&mut g, &mut b, state, &batch, images, PromptToggles::ALL, &mut ctx)?;
    let shape = sample.image.shape().to_vec();
    let take = |v: Option<crate::autograd::Var>| -> Result<Tensor> {
        let v = v.ok_or_else(|| CkdaError::State("prompt branch missing".into()))?;
        g.value(v).reshape(&shape)
    };
    let com = take(k_com)?;
    let spe = take(k_spe)?;
    let prompted = sample.image.add(&take(k_p)?)?;
    Ok((com, spe, prompted))
}

/// Write heatmaps for `samples` (drawn from `data`) into `dir` and return
/// the energy records.
pub fn report_heatmaps<D: StageData + ?Sized>(
    state: &ModelState,
    data: &D,
    samples: &[&Sample],
    dir: &Path,
) -> Result<Vec<HeatmapRecord>> {
    let geom = data.geometry();
    if geom != state.config.geometry {
        return Err(CkdaError::State(format!(
            "checkpoint expects {:?} images, data has {:?}",
            state.config.geometry, geom
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for s in samples {
        let spec = data
            .roster()
            .iter()
            .find(|r| r.identity_id == s.identity)
            .ok_or_else(|| CkdaError::State(format!("identity {} not in roster", s.identity)))?;
        let mask = spec.mask(&geom);
        let (com, spe, prompted) = prompt_maps(state, s)?;
        let mut files = Vec::new();
        let mut stats = Vec::new();
        for (tag, t) in [("common", &com), ("specific", &spe), ("prompted", &prompted)] {
            let e = energy_map(t);
            stats.push(energy_stats(&e, &mask)?);
            let file = format!(
                "s{}_id{}_{}_{}_{}.png",
                s.stage,
                s.identity,
                s.modality.name(),
                s.sample_index,
                tag
            );
            std::fs::write(dir.join(&file), encode_png(&heatmap_image(&e, &geom))?)?;
            files.push(file);
        }
        let mut it = stats.into_iter();
        out.push(HeatmapRecord {
            stage: s.stage,
            identity: s.identity,
            modality: s.modality,
            sample_index: s.sample_index,
            common: it.next().expect("three maps"),
            specific: it.next().expect("three maps"),
            prompted: it.next().expect("three maps"),
            files,
        });
    }
    Ok(out)
}

/// Mean inside-silhouette energy fractions `(common, specific)` over records.
pub fn mean_inside_fractions(records: &[HeatmapRecord]) -> (f64, f64) {
    let n = records.len().max(1) as f64;
    (
        records.iter().map(|r| r.common.inside_fraction).sum::<f64>() / n,
        records.iter().map(|r| r.specific.inside_fraction).sum::<f64>() / n,
    )
}
