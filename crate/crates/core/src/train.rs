//! Training loop, evaluation, and multi-seed experiments.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{loss_nll, ScoreStats, softmax_rows, ForwardRngs, Model, ModelConfig, RunMode};
use crate::graph::{GraphBatch, LabeledExample};
use crate::metrics::{accuracy, argmax, interpret_metrics, mean_std, roc_auc, separability_report, MeanStd, Separability, DEFAULT_TOP_K};
use crate::rng::{stream, Stream};
use crate::sinkhorn::ConvergenceTrace;
use crate::tensor::{AdamConfig, BoundParams, Tape, Var};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    GraphLevel,
    NodeLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub task: Task,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            patience: 10,
            seed: 0,
            model: ModelConfig::default(),
            task: Task::GraphLevel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if self.patience == 0 || self.patience > self.epochs {
            return Err(Error::InvalidConfig(format!(
                "patience must be in 1..={}, got {}",
                self.epochs, self.patience
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("invalid learning rate {}", self.learning_rate)));
        }
        self.model.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
}

impl History {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

fn batch_targets(batch: &GraphBatch, task: Task) -> Result<Vec<usize>> {
    match task {
        Task::GraphLevel => Ok(batch.labels.clone()),
        Task::NodeLevel => batch
            .node_labels
            .clone()
            .ok_or_else(|| Error::InvalidConfig("node-level task needs node labels".into())),
    }
}

fn forward_logits(
    model: &Model,
    tape: &mut Tape,
    p: &BoundParams,
    batch: &GraphBatch,
    task: Task,
    mode: RunMode,
    rngs: &mut ForwardRngs,
) -> Result<(Var, Var, Option<ScoreStats>, Vec<ConvergenceTrace>)> {
    match task {
        Task::GraphLevel => {
            let out = model.forward_graph(tape, p, batch, mode, rngs)?;
            Ok((out.logits, out.alpha_e, out.score_stats, out.traces))
        }
        Task::NodeLevel => {
            let out = model.forward_node(tape, p, batch, mode, rngs)?;
            Ok((out.logits, out.alpha_e, out.score_stats, out.traces))
        }
    }
}

/// Runs the optimiser over `train`, selecting on validation accuracy.
/// Returns the model restored to its best epoch.
pub fn train(train: &[LabeledExample], val: &[LabeledExample], cfg: &TrainConfig) -> Result<(Model, History)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = cfg.model.num_classes;
    for ex in train.iter().chain(val) {
        ex.validate((cfg.task == Task::GraphLevel).then_some(k))?;
        if cfg.task == Task::NodeLevel {
            match &ex.node_labels {
                Some(l) if l.iter().all(|&y| y < k) => {}
                Some(l) => {
                    let bad = l.iter().copied().find(|&y| y >= k).unwrap_or(0);
                    return Err(Error::InvalidLabel { label: bad, num_classes: k });
                }
                None => return Err(Error::InvalidConfig("node-level task needs node labels".into())),
            }
        }
    }

    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let adam = AdamConfig { lr: cfg.learning_rate, ..Default::default() };
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let mut rngs = ForwardRngs::from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut history = History { epochs: Vec::new(), best_epoch: 0, best_val_accuracy: f64::NEG_INFINITY, stopped_early: false };
    let mut best = model.clone();
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut weight = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&LabeledExample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = GraphBatch::new(&refs)?;
            let targets = batch_targets(&batch, cfg.task)?;
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let step = (|| {
                let (logits, _, stats, _) = forward_logits(&model, &mut tape, &p, &batch, cfg.task, RunMode::TRAIN, &mut rngs)?;
                let loss = loss_nll(&mut tape, logits, &targets)?;
                let grads = tape.backward(loss)?;
                Ok::<_, Error>((tape.value(loss).item(), grads, stats))
            })();
            let (loss, grads, stats) = match step {
                Ok(v) => v,
                Err(Error::NonFiniteValue(_)) => return Err(Error::Divergence { epoch }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            model.params.adam_step(&p.gradients(&grads), &adam)?;
            if let Some(s) = stats {
                model.score_stats.update(s);
            }
            loss_sum += loss * targets.len() as f64;
            weight += targets.len();
        }
        let train_loss = loss_sum / weight as f64;
        let val_accuracy = evaluate(&model, val, cfg.task, cfg.batch_size)?.accuracy;
        history.epochs.push(EpochRecord { epoch, train_loss, val_accuracy });
        if val_accuracy > history.best_val_accuracy {
            history.best_val_accuracy = val_accuracy;
            history.best_epoch = epoch;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                history.stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    Ok((best, history))
}

/// Eval-mode outputs for a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// One row per graph (graph task) or per node (node task).
    pub probs: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
    /// Edge attention, one vector per graph.
    pub alpha_e: Vec<Vec<f64>>,
    pub gt_edge_masks: Vec<Option<Vec<bool>>>,
    /// Sinkhorn row residuals per graph. In macro mode every graph of a
    /// batch shares the batch trace; empty when `r = 1`.
    pub traces: Vec<Vec<f64>>,
    pub loss: f64,
}

pub fn predict(model: &Model, data: &[LabeledExample], task: Task, batch_size: usize) -> Result<Predictions> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    // eval mode draws no randomness
    let mut rngs = ForwardRngs::from_seed(0);
    let mut out = Predictions { probs: Vec::new(), targets: Vec::new(), alpha_e: Vec::new(), gt_edge_masks: Vec::new(), traces: Vec::new(), loss: 0.0 };
    let mut loss_sum = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&LabeledExample> = chunk.iter().collect();
        let batch = GraphBatch::new(&refs)?;
        let targets = batch_targets(&batch, task)?;
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let (logits, alpha, _, traces) = forward_logits(model, &mut tape, &p, &batch, task, RunMode::EVAL, &mut rngs)?;
        let loss = loss_nll(&mut tape, logits, &targets)?;
        loss_sum += tape.value(loss).item() * targets.len() as f64;
        out.probs.extend(softmax_rows(tape.value(logits)));
        let alpha = tape.value(alpha).data();
        for (g, ex) in chunk.iter().enumerate() {
            out.alpha_e.push(alpha[batch.edge_range(g)].to_vec());
            out.gt_edge_masks.push(ex.gt_edge_mask.clone());
            let trace = match traces.len() {
                0 => Vec::new(),
                1 => traces[0].residuals.clone(),
                _ => traces[g].residuals.clone(),
            };
            out.traces.push(trace);
        }
        out.targets.extend(targets);
    }
    out.loss = loss_sum / out.targets.len() as f64;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
    pub roc_auc: Option<f64>,
    pub interpret_edge_auc: Option<f64>,
    pub precision_at_k: Option<f64>,
}

impl Predictions {
    pub fn metrics(&self) -> EvalMetrics {
        let pred: Vec<usize> = self.probs.iter().map(|p| argmax(p)).collect();
        let roc = if self.probs.first().is_some_and(|p| p.len() == 2) {
            let s: Vec<f64> = self.probs.iter().map(|p| p[1]).collect();
            let l: Vec<bool> = self.targets.iter().map(|&y| y == 1).collect();
            roc_auc(&s, &l)
        } else {
            None
        };
        let interp = interpret_metrics(&self.alpha_e, &self.gt_edge_masks, DEFAULT_TOP_K).ok();
        EvalMetrics {
            accuracy: accuracy(&pred, &self.targets),
            loss: self.loss,
            roc_auc: roc,
            interpret_edge_auc: interp.and_then(|m| m.edge_auc),
            precision_at_k: interp.map(|m| m.precision_at_k),
        }
    }

    pub fn separability(&self) -> Result<Separability> {
        separability_report(&self.alpha_e, &self.gt_edge_masks)
    }
}

/// Eval-mode metrics with σ = 0 and frozen score statistics.
pub fn evaluate(model: &Model, data: &[LabeledExample], task: Task, batch_size: usize) -> Result<EvalMetrics> {
    Ok(predict(model, data, task, batch_size)?.metrics())
}

/// JSON report for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub loss_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
    pub test: Option<EvalMetrics>,
}

impl MetricsReport {
    pub fn new(seed: u64, history: &History, test: Option<EvalMetrics>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            best_epoch: history.best_epoch,
            best_val_accuracy: history.best_val_accuracy,
            loss_curve: history.loss_curve(),
            val_curve: history.epochs.iter().map(|e| e.val_accuracy).collect(),
            test,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub model: Model,
    pub history: History,
    pub test: Predictions,
}

pub fn run_experiment(
    train_ds: &[LabeledExample],
    val_ds: &[LabeledExample],
    test_ds: &[LabeledExample],
    cfg: &TrainConfig,
) -> Result<RunResult> {
    let (model, history) = train(train_ds, val_ds, cfg)?;
    let test = predict(&model, test_ds, cfg.task, cfg.batch_size)?;
    Ok(RunResult { model, history, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoGumbel,
    NoNodeAttn,
    NoBoth,
    Erm,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoGumbel, Variant::NoNodeAttn, Variant::NoBoth, Variant::Erm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGumbel => "w/o gumbel",
            Variant::NoNodeAttn => "w/o nodeattn",
            Variant::NoBoth => "w/o both",
            Variant::Erm => "erm (r=1)",
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoGumbel => m.ablate_gumbel = true,
            Variant::NoNodeAttn => m.ablate_node_attn = true,
            Variant::NoBoth => {
                m.ablate_gumbel = true;
                m.ablate_node_attn = true;
            }
            Variant::Erm => m.topr.r = 1.0,
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub name: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub edge_aucs: Vec<Option<f64>>,
    pub accuracy: MeanStd,
    pub edge_auc: Option<MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub schema_version: u32,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }
}

/// Trains every `(variant, seed)` pair on the same data. Up to `jobs`
/// runs execute concurrently; results do not depend on `jobs`.
pub fn ablation_suite(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    data: (&[LabeledExample], &[LabeledExample], &[LabeledExample]),
    jobs: usize,
) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(Error::InvalidConfig(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    let tasks: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let run = |(v, s): (Variant, u64)| -> Result<EvalMetrics> {
        let cfg = TrainConfig { seed: s, model: v.apply(&base.model), ..base.clone() };
        Ok(run_experiment(data.0, data.1, data.2, &cfg)?.test.metrics())
    };
    let results = parallel_map(&tasks, jobs.max(1), run)?;

    let rows = variants
        .iter()
        .map(|&v| {
            let picked: Vec<&EvalMetrics> =
                tasks.iter().zip(&results).filter(|((tv, _), _)| *tv == v).map(|(_, m)| m).collect();
            let accuracies: Vec<f64> = picked.iter().map(|m| m.accuracy).collect();
            let edge_aucs: Vec<Option<f64>> = picked.iter().map(|m| m.interpret_edge_auc).collect();
            let aucs: Option<Vec<f64>> = edge_aucs.iter().copied().collect();
            AblationRow {
                variant: v,
                name: v.name().to_string(),
                seeds: seeds.to_vec(),
                accuracy: mean_std(&accuracies),
                edge_auc: aucs.map(|a| mean_std(&a)),
                accuracies,
                edge_aucs,
            }
        })
        .collect();
    Ok(AblationTable { schema_version: SCHEMA_VERSION, rows })
}

/// Order-preserving map over scoped worker threads.
pub fn parallel_map<T: Sync, U: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(T) -> Result<U> + Sync,
) -> Result<Vec<U>>
where
    T: Copy,
{
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<U>>>> = items.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every slot filled")).collect()
}
