//! Stage-sequential training: per-stage optimisation against a frozen
//! snapshot of the previous stage, the post-stage EMA merge, prototype
//! extraction and evaluation over every stage seen so far.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::backbone;
use crate::cka::{self, PrototypeBank};
use crate::error::{CkdaError, Result};
use crate::eval::{evaluate_stage, MetricsMatrix};
use crate::losses::{self, BatchSpec, LossTerms, LossWeights, TripletMining};
use crate::model::{self, ImageBatch, ModelConfig, ModelState, PromptToggles};
use crate::msp;
use crate::nn::{self, ForwardCtx};
use crate::optim::{cosine_lr, AdamW};
use crate::params::{hex, Binder};
use crate::synth::{Modality, Sample, StageData};
use crate::tensor::Tensor;

/// Which method components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModuleToggles {
    pub mcp: bool,
    pub msp: bool,
    pub cka: bool,
    pub ema: bool,
}

impl Default for ModuleToggles {
    fn default() -> Self {
        Self {
            mcp: true,
            msp: true,
            cka: true,
            ema: true,
        }
    }
}

impl ModuleToggles {
    pub fn prompts(&self) -> PromptToggles {
        PromptToggles {
            mcp: self.mcp,
            msp: self.msp,
        }
    }

    /// Short row label such as `mcp+msp+cka` or `base`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.mcp, "mcp"), (self.msp, "msp"), (self.cka, "cka")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "base".into()
        } else {
            parts.join("+")
        }
    }
}

/// Batch-norm statistics behind the features compared by the alignment losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentStats {
    /// Frozen model in eval mode; current features through the neck's running statistics.
    #[default]
    Running,
    /// Both models normalise with the current batch's statistics (frozen side without dropout).
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch: BatchSpec,
    pub weights: LossWeights,
    pub ema_lambda: f64,
    pub seed: u64,
    pub toggles: ModuleToggles,
    /// Include prompt modules (and their batch-norm statistics) in the EMA merge.
    pub ema_merge_prompts: bool,
    pub triplet_mining: TripletMining,
    /// Compare post-neck features in the alignment losses (pre-neck otherwise).
    pub cka_post_neck: bool,
    /// Normalisation statistics used for both sides of the alignment losses.
    pub cka_stats: AlignmentStats,
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            batch: BatchSpec::default(),
            weights: LossWeights::default(),
            ema_lambda: 0.5,
            seed: 0,
            toggles: ModuleToggles::default(),
            ema_merge_prompts: true,
            triplet_mining: TripletMining::Global,
            cka_post_neck: true,
            cka_stats: AlignmentStats::Running,
            temperature: cka::DEFAULT_TEMPERATURE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CkdaError::config("learning_rate", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(CkdaError::config("weight_decay", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.ema_lambda) {
            return Err(CkdaError::config("ema_lambda", "must lie in [0, 1]"));
        }
        if !(self.temperature > 0.0) {
            return Err(CkdaError::config("temperature", "must be > 0"));
        }
        self.batch.validate()?;
        self.weights.validate()
    }

    /// Sequential fine-tuning: no prompts, no alignment, no EMA.
    pub fn sft(mut self) -> Self {
        self.toggles = ModuleToggles {
            mcp: false,
            msp: false,
            cka: false,
            ema: false,
        };
        self.ema_lambda = 0.0;
        self
    }
}

/// Frozen state of the previous stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSnapshot {
    pub model: ModelState,
    pub bank: PrototypeBank,
}

/// One optimisation step of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub triplet: f64,
    pub prompt: Option<f64>,
    pub inter: Option<f64>,
    pub intra: Option<f64>,
    pub total: f64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Train-split indices grouped by label and modality.
struct Pools {
    visible: Vec<Vec<usize>>,
    infrared: Vec<Vec<usize>>,
}

impl Pools {
    fn build(train: &[Sample], num_ids: usize, spec: &BatchSpec) -> Result<Self> {
        let mut visible = vec![Vec::new(); num_ids];
        let mut infrared = vec![Vec::new(); num_ids];
        for (i, s) in train.iter().enumerate() {
            if s.label >= num_ids {
                return Err(CkdaError::State(format!("sample label {} outside roster", s.label)));
            }
            match s.modality {
                Modality::Visible => visible[s.label].push(i),
                Modality::Infrared => infrared[s.label].push(i),
            }
        }
        if spec.identities > num_ids {
            return Err(CkdaError::config(
                "batch.identities",
                format!("{} identities per batch but the stage has {num_ids}", spec.identities),
            ));
        }
        for l in 0..num_ids {
            if visible[l].len() < spec.visible_per_identity {
                return Err(CkdaError::config(
                    "batch.visible_per_identity",
                    format!("identity label {l} has {} visible training samples", visible[l].len()),
                ));
            }
            if infrared[l].len() < spec.infrared_per_identity {
                return Err(CkdaError::config(
                    "batch.infrared_per_identity",
                    format!("identity label {l} has {} infrared training samples", infrared[l].len()),
                ));
            }
        }
        Ok(Self { visible, infrared })
    }
}

/// Batches of one epoch: every identity appears at least once; the last
/// group is topped up with other identities.
fn epoch_batches(pools: &Pools, spec: &BatchSpec, rng: &mut ChaCha8Rng) -> Vec<(Vec<usize>, Vec<usize>)> {
    let n = pools.visible.len();
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let mut out = Vec::new();
    for chunk in ids.chunks(spec.identities) {
        let mut group = chunk.to_vec();
        let mut extra: Vec<usize> = ids.iter().copied().filter(|i| !group.contains(i)).collect();
        extra.shuffle(rng);
        group.extend(extra.into_iter().take(spec.identities - group.len()));
        let mut vis = Vec::new();
        let mut ir = Vec::new();
        for &id in &group {
            vis.extend(pools.visible[id].choose_multiple(rng, spec.visible_per_identity));
            ir.extend(pools.infrared[id].choose_multiple(rng, spec.infrared_per_identity));
        }
        out.push((vis, ir));
    }
    out
}

pub fn batches_per_epoch(num_ids: usize, spec: &BatchSpec) -> usize {
    num_ids.div_ceil(spec.identities)
}

/// Frozen-model outputs on a batch: the composed prompt and features.
fn snapshot_outputs(
    snap: &StageSnapshot,
    batch: &ImageBatch,
    toggles: PromptToggles,
    post_neck: bool,
    stats: AlignmentStats,
) -> Result<(Option<Tensor>, Tensor)> {
    let mut g = Graph::new();
    let mut b = Binder::new(&snap.model.params, false);
    let mut ctx = ForwardCtx::eval();
    let o = model::forward(&mut g, &mut b, &snap.model, batch, toggles, &mut ctx)?;
    let k_p = o.k_p.map(|v| g.value(v).clone());
    let pick = |g: &Graph, o: &model::ForwardOutput| g.value(if post_neck { o.z } else { o.z_pre }).clone();
    let f = match stats {
        AlignmentStats::Running => pick(&g, &o),
        AlignmentStats::Batch => {
            let mut g = Graph::new();
            let mut b = Binder::new(&snap.model.params, false);
            let mut ctx = ForwardCtx::train_deterministic();
            let o = model::forward(&mut g, &mut b, &snap.model, batch, toggles, &mut ctx)?;
            pick(&g, &o)
        }
    };
    Ok((k_p, f))
}

/// Optimise one stage. Returns the trained (and, from stage 2 on,
/// EMA-merged) state together with the per-step log.
pub fn train_stage<D: StageData + ?Sized>(
    mut state: ModelState,
    snapshot: Option<&StageSnapshot>,
    data: &D,
    cfg: &TrainConfig,
) -> Result<(ModelState, Vec<StepRecord>)> {
    cfg.validate()?;
    let stage = data.stage_index();
    if (stage == 1) != snapshot.is_none() {
        return Err(CkdaError::State(format!(
            "stage {stage}: a previous-stage snapshot is required exactly when stage > 1"
        )));
    }
    let num_ids = data.roster().len();
    let train = data.train();
    let pools = Pools::build(train, num_ids, &cfg.batch)?;
    if state.head_sizes.len() < stage {
        state.add_head(num_ids, mix(cfg.seed, stage as u64, 1));
    }
    state.stage_index = stage;
    let mut log = Vec::new();
    if cfg.epochs == 0 {
        return Ok((state, log));
    }

    let toggles = cfg.toggles.prompts();
    let per_epoch = batches_per_epoch(num_ids, &cfg.batch);
    let total_steps = cfg.epochs * per_epoch;
    let mut sampler = ChaCha8Rng::seed_from_u64(mix(cfg.seed, stage as u64, 2));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, stage as u64, 3));
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for (vis, ir) in epoch_batches(&pools, &cfg.batch, &mut sampler) {
            let order: Vec<usize> = vis.iter().chain(&ir).copied().collect();
            let images: Vec<&Tensor> = order.iter().map(|&i| &train[i].image).collect();
            let mods: Vec<Modality> = order.iter().map(|&i| train[i].modality).collect();
            let labels: Vec<usize> = order.iter().map(|&i| train[i].label).collect();
            let batch = ImageBatch::from_images(&images, &mods)?;
            let lr = cosine_lr(cfg.learning_rate, step, total_steps);

            let mut g = Graph::new();
            let mut b = Binder::new(&state.params, true);
            let mut ctx = ForwardCtx::train(&mut dropout_rng);
            let out = model::forward(&mut g, &mut b, &state, &batch, toggles, &mut ctx)?;
            let logits = backbone::classify(&mut g, &mut b, out.z, stage)?;
            let ce = losses::ce_loss(&mut g, logits, &labels)?;
            let triplet = losses::triplet_loss_with(
                &mut g,
                out.z_pre,
                &labels,
                Some(&mods),
                cfg.weights.margin,
                cfg.triplet_mining,
            )?;
            let mut terms = LossTerms {
                ce,
                triplet,
                prompt: None,
                inter: None,
                intra: None,
            };
            if let Some(snap) = snapshot {
                let need_prompt = out.k_p.is_some();
                if need_prompt || cfg.toggles.cka {
                    let (old_kp, old_f) = snapshot_outputs(snap, &batch, toggles, cfg.cka_post_neck, cfg.cka_stats)?;
                    if let (Some(cur), Some(prev)) = (out.k_p, old_kp) {
                        let prev = g.constant(prev);
                        terms.prompt = Some(msp::prompt_alignment_loss(&mut g, cur, Some(prev))?);
                    }
                    if cfg.toggles.cka {
                        // neck with running statistics, as the frozen model computes its side
                        let cur = if !cfg.cka_post_neck {
                            out.z_pre
                        } else if cfg.cka_stats == AlignmentStats::Batch {
                            out.z
                        } else {
                            let mut frozen_stats = ForwardCtx::eval();
                            nn::batch_norm(
                                &mut g,
                                &mut b,
                                &state.buffers,
                                "neck.bn",
                                out.z_pre,
                                state.config.bn_eps,
                                &mut frozen_stats,
                            )?
                        };
                        let (inter, intra) = cka::alignment_losses(
                            &mut g,
                            cur,
                            &old_f,
                            batch.num_visible,
                            &snap.bank,
                            cfg.temperature,
                        )?;
                        terms.inter = Some(inter);
                        terms.intra = Some(intra);
                    }
                }
            }
            let total = losses::total_loss(&mut g, &terms, &cfg.weights)?;
            let value = |v: Option<crate::autograd::Var>| v.map(|v| g.value(v).item());
            let record = StepRecord {
                stage,
                epoch,
                step,
                lr,
                ce: g.value(ce).item(),
                triplet: g.value(triplet).item(),
                prompt: value(terms.prompt),
                inter: value(terms.inter),
                intra: value(terms.intra),
                total: g.value(total).item(),
            };
            if !record.total.is_finite() {
                return Err(CkdaError::Numeric {
                    row: step,
                    reason: format!("non-finite loss at stage {stage} step {step}"),
                });
            }
            let bn_updates = std::mem::take(&mut ctx.bn_updates);
            drop(ctx);
            let grads = b.collect_grads(g.backward(total));
            drop(b);
            opt.step(&mut state.params, &grads, lr)?;
            nn::apply_bn_updates(&mut state.buffers, &bn_updates, state.config.bn_momentum)?;
            log.push(record);
            step += 1;
        }
    }

    if let Some(snap) = snapshot {
        if cfg.toggles.ema {
            let merged = backbone::ema_merge(&snap.model, &state, cfg.ema_lambda, cfg.ema_merge_prompts)?;
            state = merged;
        }
    }
    state.ema_lambda = cfg.ema_lambda;
    Ok((state, log))
}

/// Serialised model after one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub stage_index: usize,
    pub ema_lambda: f64,
    pub config_hash: String,
    pub state: ModelState,
    pub prototypes: Option<PrototypeBank>,
}

pub const CHECKPOINT_FORMAT: &str = "ckda-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(state: &ModelState, bank: Option<&PrototypeBank>, config_hash: &str) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            stage_index: state.stage_index,
            ema_lambda: state.ema_lambda,
            config_hash: config_hash.to_string(),
            state: state.clone(),
            prototypes: bank.cloned(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(CkdaError::State(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        c.state.config.validate()?;
        Ok(c)
    }
}

/// Hash of the model and training configuration.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_string(&(model, train)).unwrap_or_default();
    hex(&Sha256::digest(json.as_bytes()))
}

#[derive(Debug, Clone)]
pub struct StreamResult {
    pub state: ModelState,
    pub metrics: MetricsMatrix,
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<StepRecord>,
}

/// Progress callback: `(stage, row of metrics)` after each stage.
pub type Progress<'a> = &'a mut dyn FnMut(usize, &[crate::eval::StageMetrics]);

/// Train and evaluate over a whole stream, stage by stage.
pub fn run_stream<D: StageData>(
    stream: &[D],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut progress: Option<Progress>,
) -> Result<StreamResult> {
    if stream.is_empty() {
        return Err(CkdaError::config("num_stages", "stream is empty"));
    }
    cfg.validate()?;
    let hash = config_hash(model_cfg, cfg);
    let mut state = ModelState::new(model_cfg.clone(), cfg.ema_lambda, mix(cfg.seed, 0, 0))?;
    let mut snapshot: Option<StageSnapshot> = None;
    let mut metrics = MetricsMatrix::new();
    let mut checkpoints = Vec::new();
    let mut log = Vec::new();
    for (k, data) in stream.iter().enumerate() {
        if data.stage_index() != k + 1 {
            return Err(CkdaError::State(format!(
                "stream position {} holds stage {}",
                k + 1,
                data.stage_index()
            )));
        }
        let (next, stage_log) = train_stage(state, snapshot.as_ref(), data, cfg)?;
        state = next;
        log.extend(stage_log);
        let bank = cka::extract_prototypes(&state, data, cfg.toggles.prompts(), cfg.cka_post_neck)?;
        let row = stream[..=k]
            .iter()
            .map(|d| evaluate_stage(&state, d, cfg.toggles.prompts()))
            .collect::<Result<Vec<_>>>()?;
        if let Some(p) = progress.as_mut() {
            p(k + 1, &row);
        }
        metrics.push_row(row)?;
        checkpoints.push(Checkpoint::new(&state, Some(&bank), &hash));
        snapshot = Some(StageSnapshot {
            model: state.clone(),
            bank,
        });
    }
    Ok(StreamResult {
        state,
        metrics,
        checkpoints,
        log,
    })
}
