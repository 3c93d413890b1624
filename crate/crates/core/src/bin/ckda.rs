//! `ckda` command-line entry point.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ckda::config::ExperimentConfig;
use ckda::experiment::{
    ablate, ablation_table, build_stream, eval_checkpoint, fresh_dir, load_checkpoint, run_dir, run_to_dir,
    single_row_matrix,
};
use ckda::report::{mean_inside_fractions, report_heatmaps, MetricsReport};
use ckda::synth::{export_stream, Modality, Sample};

#[derive(Parser)]
#[command(name = "ckda", version, about = "Continual cross-modality re-identification on synthetic streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration; omitted sections use defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// `dotted.key=value` override, repeatable; wins over the file.
    #[arg(short = 's', long = "set")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train over the whole stream and write checkpoints, log and metrics.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (default: `<output_dir>/<name>`); must be new or empty.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(short, long)]
        quiet: bool,
    },
    /// Run every module combination over several seeds and tabulate mean ± spread.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate a checkpoint on every stage it has seen.
    EvalOnly {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the structured report here (must not exist).
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write prompt magnitude heatmaps for samples of one stage.
    ReportHeatmaps {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Stage to draw samples from (default: the checkpoint's stage).
        #[arg(long)]
        stage: Option<usize>,
        /// Samples per modality.
        #[arg(long, default_value_t = 2)]
        per_modality: usize,
    },
    /// Export the synthetic stream as PNGs plus a JSONL manifest.
    ExportData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<(ExperimentConfig, Option<String>)> {
    let (mut cfg, text) = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let cfg = ExperimentConfig::from_toml_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            (cfg, Some(text))
        }
        None => (ExperimentConfig::default(), None),
    };
    cfg.apply_overrides(&args.overrides).context("applying overrides")?;
    cfg.validate().context("invalid configuration")?;
    Ok((cfg, text))
}

fn write_new(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .with_context(|| format!("refusing to overwrite {}", path.display()))?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { cfg, out, quiet } => {
            let (cfg, text) = load_config(&cfg)?;
            let dir = out.unwrap_or_else(|| run_dir(&cfg));
            let mut progress = |stage: usize, row: &[ckda::eval::StageMetrics]| {
                if !quiet {
                    let cells: Vec<String> = row
                        .iter()
                        .map(|m| format!("{:.1}/{:.1}", 100.0 * m.map, 100.0 * m.r1))
                        .collect();
                    eprintln!("stage {stage} done: mAP/R1 per seen stage {}", cells.join("  "));
                }
            };
            let report = run_to_dir(&cfg, text.as_deref(), &dir, Some(&mut progress))?;
            print!("{}", report.to_table());
            eprintln!("outputs in {}", dir.display());
        }
        Command::Ablate { cfg, out } => {
            let (cfg, text) = load_config(&cfg)?;
            let dir = out.unwrap_or_else(|| run_dir(&cfg).join("ablation"));
            fresh_dir(&dir)?;
            write_new(&dir.join("config.toml"), &cfg.to_toml_string()?)?;
            if let Some(t) = text {
                write_new(&dir.join("config.source.toml"), &t)?;
            }
            let mut runs = Vec::new();
            let rows = ablate(&cfg, |modules, seed, r| match r {
                Ok(rep) => {
                    eprintln!("{modules} seed {seed}: final mAP {:.2}", 100.0 * rep.final_map);
                    runs.push(rep.clone());
                }
                Err(e) => eprintln!("{modules} seed {seed}: failed: {e}"),
            })?;
            let runs_text: String = runs
                .iter()
                .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
                .collect::<std::result::Result<_, _>>()?;
            write_new(&dir.join("runs.jsonl"), &runs_text)?;
            write_new(&dir.join("ablation.json"), &(serde_json::to_string_pretty(&rows)? + "\n"))?;
            let table = ablation_table(&rows);
            write_new(&dir.join("ablation.txt"), &table)?;
            print!("{table}");
            if rows.iter().any(|r| r.error.is_some()) {
                bail!("some ablation rows failed; see {}", dir.join("ablation.json").display());
            }
        }
        Command::EvalOnly { cfg, checkpoint, json } => {
            let (cfg, _) = load_config(&cfg)?;
            let ckpt = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let row = eval_checkpoint(&cfg, &ckpt)?;
            let report = MetricsReport::new(
                &cfg.name,
                &ckpt.config_hash,
                cfg.train.seed,
                &cfg.train.toggles.label(),
                &single_row_matrix(row),
            )?;
            let last = report.metrics.rows.last().map(Vec::as_slice).unwrap_or(&[]);
            for (i, m) in last.iter().enumerate() {
                println!("stage {}: mAP {:.2}  R1 {:.2}", i + 1, 100.0 * m.map, 100.0 * m.r1);
            }
            println!("average: mAP {:.2}  R1 {:.2}", 100.0 * report.final_map, 100.0 * report.final_r1);
            if let Some(p) = json {
                write_new(&p, &report.to_json()?)?;
            }
        }
        Command::ReportHeatmaps { cfg, checkpoint, out, stage, per_modality } => {
            let (cfg, _) = load_config(&cfg)?;
            let ckpt = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let stream = build_stream(&cfg)?;
            let s = stage.unwrap_or(ckpt.stage_index);
            let data = stream
                .get(s.wrapping_sub(1))
                .with_context(|| format!("stage {s} not in the {}-stage stream", stream.len()))?;
            let mut picked: Vec<&Sample> = Vec::new();
            for m in [Modality::Visible, Modality::Infrared] {
                picked.extend(data.train.iter().filter(|x| x.modality == m).take(per_modality));
            }
            fresh_dir(&out)?;
            let records = report_heatmaps(&ckpt.state, data, &picked, &out)?;
            let lines: String = records
                .iter()
                .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
                .collect::<std::result::Result<_, _>>()?;
            write_new(&out.join("heatmaps.jsonl"), &lines)?;
            let (c, sp) = mean_inside_fractions(&records);
            println!(
                "{} samples; energy inside silhouette: common {:.1}%  specific {:.1}%",
                records.len(),
                100.0 * c,
                100.0 * sp
            );
        }
        Command::ExportData { cfg, out } => {
            let (cfg, _) = load_config(&cfg)?;
            fresh_dir(&out)?;
            let recs = export_stream(&build_stream(&cfg)?, &out)?;
            println!("wrote {} images to {}", recs.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
