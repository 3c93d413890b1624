//! End-to-end experiment drivers behind the command-line verbs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CkdaError, Result};
use crate::eval::{evaluate_stage, MetricsMatrix, StageMetrics};
use crate::report::MetricsReport;
use crate::synth::{make_stream, StageDataset};
use crate::trainer::{config_hash, run_stream, Checkpoint, StreamResult};

pub fn build_stream(cfg: &ExperimentConfig) -> Result<Vec<StageDataset>> {
    make_stream(cfg.data.num_stages, &cfg.data.stage, cfg.data.master_seed)
}

/// Create `dir`, refusing to reuse a non-empty directory.
pub fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(CkdaError::State(format!(
            "output directory {} already exists and is not empty; refusing to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Train and evaluate in memory, without touching the filesystem.
pub fn run_in_memory(
    cfg: &ExperimentConfig,
    progress: Option<crate::trainer::Progress>,
) -> Result<(StreamResult, MetricsReport)> {
    cfg.validate()?;
    let stream = build_stream(cfg)?;
    let result = run_stream(&stream, &cfg.model, &cfg.train, progress)?;
    let report = MetricsReport::new(
        &cfg.name,
        &config_hash(&cfg.model, &cfg.train),
        cfg.train.seed,
        &cfg.train.toggles.label(),
        &result.metrics,
    )?;
    Ok((result, report))
}

fn write_outputs(cfg: &ExperimentConfig, dir: &Path, result: &StreamResult, report: &MetricsReport) -> Result<()> {
    use crate::config::ReportFormat;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    for c in &result.checkpoints {
        fs::write(ckpt_dir.join(format!("stage_{}.json", c.stage_index)), c.to_json()?)?;
    }
    let mut log = fs::File::create(dir.join("train_log.jsonl"))?;
    for r in &result.log {
        writeln!(log, "{}", serde_json::to_string(r)?)?;
    }
    if cfg.report_formats.contains(&ReportFormat::Json) {
        fs::write(dir.join("metrics.json"), report.to_json()?)?;
    }
    if cfg.report_formats.contains(&ReportFormat::Table) {
        fs::write(dir.join("metrics.txt"), report.to_table())?;
    }
    Ok(())
}

/// Full run into `dir`: archived config, checkpoints, training log and
/// metrics. A failure after the directory was created leaves a `FAILED`
/// marker with the error.
pub fn run_to_dir(
    cfg: &ExperimentConfig,
    source_text: Option<&str>,
    dir: &Path,
    progress: Option<crate::trainer::Progress>,
) -> Result<MetricsReport> {
    cfg.validate()?;
    fresh_dir(dir)?;
    let outcome = (|| {
        fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
        if let Some(src) = source_text {
            fs::write(dir.join("config.source.toml"), src)?;
        }
        let (result, report) = run_in_memory(cfg, progress)?;
        write_outputs(cfg, dir, &result, &report)?;
        Ok(report)
    })();
    if let Err(e) = &outcome {
        let _ = fs::write(dir.join("FAILED"), format!("{e}\n"));
    }
    outcome
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub modules: String,
    pub switches: [bool; 3],
    pub seeds: Vec<u64>,
    pub final_map: Vec<f64>,
    pub final_r1: Vec<f64>,
    pub forgetting_map: Vec<f64>,
    pub error: Option<String>,
}

pub fn mean_spread(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// One run per grid row and seed; failed rows are kept with their error.
pub fn ablate(cfg: &ExperimentConfig, mut on_run: impl FnMut(&str, u64, &Result<MetricsReport>)) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let stream = build_stream(cfg)?;
    let mut rows = Vec::new();
    for sw in cfg.ablation.rows() {
        let mut row = AblationRow {
            modules: String::new(),
            switches: sw,
            seeds: Vec::new(),
            final_map: Vec::new(),
            final_r1: Vec::new(),
            forgetting_map: Vec::new(),
            error: None,
        };
        for &seed in &cfg.ablation.seeds {
            let c = cfg.with_toggles(sw, seed);
            row.modules = c.train.toggles.label();
            let r = run_stream(&stream, &c.model, &c.train, None).and_then(|res| {
                MetricsReport::new(&c.name, &config_hash(&c.model, &c.train), seed, &row.modules, &res.metrics)
            });
            on_run(&row.modules, seed, &r);
            match r {
                Ok(rep) => {
                    row.seeds.push(seed);
                    row.final_map.push(rep.final_map);
                    row.final_r1.push(rep.final_r1);
                    if let Some(af) = rep.forgetting_map {
                        row.forgetting_map.push(af);
                    }
                }
                Err(e) => {
                    row.error = Some(e.to_string());
                    break;
                }
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<14}{:>18}{:>18}{:>18}\n",
        "modules", "final mAP", "final R1", "AF (mAP)"
    );
    let cell = |v: &[f64]| {
        if v.is_empty() {
            "-".to_string()
        } else {
            let (m, sd) = mean_spread(v);
            format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd)
        }
    };
    for r in rows {
        s.push_str(&format!(
            "{:<14}{:>18}{:>18}{:>18}",
            r.modules,
            cell(&r.final_map),
            cell(&r.final_r1),
            cell(&r.forgetting_map)
        ));
        if let Some(e) = &r.error {
            s.push_str(&format!("  (incomplete: {e})"));
        }
        s.push('\n');
    }
    s
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&fs::read_to_string(path)?)
}

/// Re-evaluate a checkpoint on every stage it has seen.
pub fn eval_checkpoint(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<Vec<StageMetrics>> {
    if ckpt.state.config != cfg.model {
        return Err(CkdaError::State(
            "checkpoint model configuration differs from the experiment configuration".into(),
        ));
    }
    let stream = build_stream(cfg)?;
    if ckpt.stage_index == 0 || ckpt.stage_index > stream.len() {
        return Err(CkdaError::State(format!(
            "checkpoint stage {} outside the {}-stage stream",
            ckpt.stage_index,
            stream.len()
        )));
    }
    let toggles = cfg.train.toggles.prompts();
    stream[..ckpt.stage_index]
        .iter()
        .map(|d| evaluate_stage(&ckpt.state, d, toggles))
        .collect()
}

/// Matrix holding a single evaluated row, for formatting re-evaluations.
pub fn single_row_matrix(row: Vec<StageMetrics>) -> MetricsMatrix {
    let mut rows: Vec<Vec<StageMetrics>> = Vec::new();
    let n = row.len();
    for t in 1..n {
        rows.push(row[..t].to_vec());
    }
    rows.push(row);
    MetricsMatrix { rows }
}

pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(&cfg.name)
}
