//! Per-task optimization and multi-task sequence orchestration.
//!
//! The pipeline for each task in a sequence: train under the consolidated
//! objective (data loss plus penalties from all earlier snapshots),
//! estimate the diagonal Fisher on the task's train split at the reached
//! optimum, append the snapshot, then evaluate the current model on every
//! completed task's test set. Tasks whose label scheme differs from the
//! current head are recorded as head-lost rather than scored.
//!
//! Randomness is stream-split per stage ("train", "fisher", "head"), so
//! the EWC and naive arms consume identical shuffles and stage-one results
//! match bit-for-bit between arms.

use serde::Serialize;

use crate::autodiff::{Tape, Tensor};
use crate::corpus::{EncodedSentence, LabelScheme};
use crate::error::{CoreError, Result};
use crate::eval::{token_f1, EvalReport};
use crate::ewc::{self, EwcConfig, EwcMode, FisherSnapshot};
use crate::rng::{derive_seed, Rng};
use crate::tagger::{TaggerConfig, TaggerModel};

const MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    /// SGD with momentum 0.9.
    SgdMomentum,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Sentences per step; gradients are averaged over the batch.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CoreError::config(format!(
                "learning_rate must be finite and > 0 (got {})",
                self.learning_rate
            )));
        }
        if self.epochs < 1 {
            return Err(CoreError::config("epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(CoreError::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    /// Mean per-step data loss (L_B).
    pub data_loss: f64,
    /// Mean per-step consolidation penalty; 0 for the whole first task.
    pub penalty: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
}

/// How a task relates to its predecessor in a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    /// Same label scheme; the head is carried over.
    SameLabels,
    /// Different label scheme; the head is replaced before training.
    NewHead,
}

/// A resolved task: name, scheme, and encoded splits.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub name: String,
    pub transition: Transition,
    pub scheme: LabelScheme,
    pub train: Vec<EncodedSentence>,
    pub test: Vec<EncodedSentence>,
}

/// One cell of the stage x task evaluation matrix.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatrixCell {
    F1 { value: f64 },
    /// The output head for this task's label set was replaced; the cell
    /// cannot be scored.
    HeadLost,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CellOutcome {
    Scored { report: EvalReport },
    HeadLost,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalCell {
    pub task: String,
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub task: String,
    pub history: TrainingHistory,
    /// Micro F1 on this task's own train split at end of stage.
    pub train_micro_f1: f64,
    /// Evaluations of every completed task's test set, in task order.
    pub evals: Vec<EvalCell>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SnapshotMeta {
    pub task: String,
    pub params: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SequenceResult {
    pub task_names: Vec<String>,
    pub stages: Vec<StageRecord>,
    /// Lower-triangular micro-F1 matrix: row = training stage, column =
    /// evaluated task.
    pub micro_matrix: Vec<Vec<MatrixCell>>,
    pub snapshot_meta: Vec<SnapshotMeta>,
}

impl SequenceResult {
    /// Micro F1 of task `task` measured after stage `stage`, when scored.
    pub fn micro_f1(&self, stage: usize, task: usize) -> Option<f64> {
        match self.micro_matrix.get(stage)?.get(task)? {
            MatrixCell::F1 { value } => Some(*value),
            MatrixCell::HeadLost => None,
        }
    }
}

/// A finished sequence: the result record plus the live model and
/// accumulated snapshots (for checkpointing and probes).
pub struct SequenceRun {
    pub result: SequenceResult,
    pub model: TaggerModel,
    pub snapshots: Vec<FisherSnapshot>,
}

/// Predict every sentence and score against gold.
pub fn evaluate(model: &TaggerModel, data: &[EncodedSentence], scheme: &LabelScheme) -> Result<EvalReport> {
    let mut predictions = Vec::with_capacity(data.len());
    let mut gold = Vec::with_capacity(data.len());
    for s in data {
        predictions.push(model.predict(&s.tokens)?);
        gold.push(s.labels.clone());
    }
    token_f1(&predictions, &gold, scheme)
}

/// One task's optimization loop.
///
/// Per epoch: seeded shuffle, then for each batch zero_grad, backward of
/// the consolidated loss (mean sentence NLL plus penalty), and an SGD
/// step. The history records per-epoch mean data loss and mean penalty
/// separately. Momentum state is local to the call.
pub fn train_task(
    model: &mut TaggerModel,
    data: &[EncodedSentence],
    snapshots: &[FisherSnapshot],
    ewc_config: &EwcConfig,
    config: &TrainConfig,
) -> Result<TrainingHistory> {
    config.validate()?;
    ewc_config.validate()?;
    if data.is_empty() {
        return Err(CoreError::usage("train_task on empty dataset"));
    }
    let num_labels = model.config().num_labels;
    for s in data {
        if s.tokens.len() != s.labels.len() {
            return Err(CoreError::usage("encoded sentence has mismatched token/label lengths"));
        }
        if let Some(&bad) = s.labels.iter().find(|&&l| l >= num_labels) {
            return Err(CoreError::IndexOutOfRange {
                what: "label",
                index: bad,
                bound: num_labels,
            });
        }
    }

    let apply_penalty = !snapshots.is_empty() && ewc_config.lambda > 0.0;
    let mut velocity: Vec<Tensor> = model
        .store()
        .iter()
        .map(|p| Tensor::zeros(p.value().shape().to_vec()))
        .collect();
    let mut rng = Rng::seed_from(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut tape = Tape::new();
    let mut history = TrainingHistory::default();

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut sum_data = 0.0;
        let mut sum_penalty = 0.0;
        let mut steps = 0usize;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            model.store_mut().zero_grad();
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let nll = model.nll_on(&mut tape, &data[i].tokens, &data[i].labels)?;
                terms.push(nll.into());
            }
            let summed = tape.add_n(model.store(), &terms)?;
            let data_loss = tape.scale(model.store(), summed, 1.0 / batch.len() as f64)?;
            let data_value = tape.scalar_value(data_loss);

            let (total, penalty_value) = if apply_penalty {
                let penalty = ewc::penalty_on(&mut tape, model, snapshots, ewc_config.lambda)?;
                let value = tape.scalar_value(penalty);
                let total = tape.add_n(model.store(), &[data_loss.into(), penalty.into()])?;
                (total, value)
            } else {
                (data_loss, 0.0)
            };
            if !tape.scalar_value(total).is_finite() {
                return Err(CoreError::Divergence { epoch, step });
            }
            tape.backward(total, model.store_mut())?;

            let lr = config.learning_rate;
            match config.optimizer {
                Optimizer::Sgd => model.store_mut().for_each_value_grad(|_, value, grad| {
                    for (v, &g) in value.iter_mut().zip(grad) {
                        *v -= lr * g;
                    }
                }),
                Optimizer::SgdMomentum => {
                    model.store_mut().for_each_value_grad(|i, value, grad| {
                        let vel = velocity[i].data_mut();
                        for ((v, &g), m) in value.iter_mut().zip(grad).zip(vel) {
                            *m = MOMENTUM * *m + g;
                            *v -= lr * *m;
                        }
                    })
                }
            }

            sum_data += data_value;
            sum_penalty += penalty_value;
            steps += 1;
        }
        history.epochs.push(EpochStats {
            data_loss: sum_data / steps as f64,
            penalty: sum_penalty / steps as f64,
        });
    }
    Ok(history)
}

fn validate_sequence(config: &TaggerConfig, tasks: &[TaskData]) -> Result<()> {
    if tasks.is_empty() {
        return Err(CoreError::usage("run_sequence needs at least one task"));
    }
    if tasks[0].transition == Transition::NewHead {
        return Err(CoreError::usage("the first task cannot be a NewHead transition"));
    }
    if tasks[0].scheme.len() != config.num_labels {
        return Err(CoreError::config(format!(
            "model has {} labels but the first task's scheme has {}",
            config.num_labels,
            tasks[0].scheme.len()
        )));
    }
    for window in tasks.windows(2) {
        let (prev, next) = (&window[0], &window[1]);
        match next.transition {
            Transition::SameLabels if next.scheme != prev.scheme => {
                return Err(CoreError::usage(format!(
                    "task {:?} declares SameLabels but its scheme differs from {:?}",
                    next.name, prev.name
                )));
            }
            Transition::NewHead if next.scheme == prev.scheme => {
                return Err(CoreError::usage(format!(
                    "task {:?} declares NewHead but its scheme equals {:?}",
                    next.name, prev.name
                )));
            }
            _ => {}
        }
    }
    let mut names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != tasks.len() {
        return Err(CoreError::usage("task names must be unique within a sequence"));
    }
    Ok(())
}

/// Snapshot subset for the stage: shared-only when configured, and also
/// when any later task replaces the head (a full-model snapshot could not
/// survive the replacement).
fn snapshot_subset(model: &TaggerModel, ewc_config: &EwcConfig, tasks: &[TaskData], stage: usize) -> Vec<String> {
    let future_new_head = tasks[stage + 1..]
        .iter()
        .any(|t| t.transition == Transition::NewHead);
    if ewc_config.mode == EwcMode::SharedOnly || future_new_head {
        ewc::subset_for_mode(model, EwcMode::SharedOnly)
    } else {
        ewc::subset_for_mode(model, EwcMode::FullModel)
    }
}

fn run_sequence_inner(
    config: &TaggerConfig,
    tasks: &[TaskData],
    ewc_config: &EwcConfig,
    train_config: &TrainConfig,
    estimate_fisher: bool,
) -> Result<SequenceRun> {
    validate_sequence(config, tasks)?;
    ewc_config.validate()?;
    let mut model = TaggerModel::init(config.clone())?;
    let mut snapshots: Vec<FisherSnapshot> = Vec::new();
    let mut stages: Vec<StageRecord> = Vec::new();
    let mut matrix: Vec<Vec<MatrixCell>> = Vec::new();

    for (stage, task) in tasks.iter().enumerate() {
        if task.transition == Transition::NewHead {
            model = model.replace_head(
                task.scheme.len(),
                derive_seed(train_config.seed, "head", stage as u64),
            )?;
        }
        let stage_config = TrainConfig {
            seed: derive_seed(train_config.seed, "train", stage as u64),
            ..train_config.clone()
        };
        let history = train_task(&mut model, &task.train, &snapshots, ewc_config, &stage_config)?;

        if estimate_fisher {
            let subset = snapshot_subset(&model, ewc_config, tasks, stage);
            snapshots.push(ewc::estimate_fisher(
                &mut model,
                &task.train,
                &subset,
                ewc_config.fisher_sample_cap,
                derive_seed(train_config.seed, "fisher", stage as u64),
                &task.name,
            )?);
        }

        let train_micro_f1 = evaluate(&model, &task.train, &task.scheme)?.avg_micro_f1;
        let mut evals = Vec::with_capacity(stage + 1);
        let mut row = Vec::with_capacity(stage + 1);
        for earlier in &tasks[..=stage] {
            if earlier.scheme == task.scheme {
                let report = evaluate(&model, &earlier.test, &earlier.scheme)?;
                row.push(MatrixCell::F1 {
                    value: report.avg_micro_f1,
                });
                evals.push(EvalCell {
                    task: earlier.name.clone(),
                    outcome: CellOutcome::Scored { report },
                });
            } else {
                row.push(MatrixCell::HeadLost);
                evals.push(EvalCell {
                    task: earlier.name.clone(),
                    outcome: CellOutcome::HeadLost,
                });
            }
        }
        matrix.push(row);
        stages.push(StageRecord {
            task: task.name.clone(),
            history,
            train_micro_f1,
            evals,
        });
    }

    Ok(SequenceRun {
        result: SequenceResult {
            task_names: tasks.iter().map(|t| t.name.clone()).collect(),
            stages,
            micro_matrix: matrix,
            snapshot_meta: snapshots
                .iter()
                .map(|s| SnapshotMeta {
                    task: s.task_name().to_string(),
                    params: s.param_subset().map(String::from).collect(),
                })
                .collect(),
        },
        model,
        snapshots,
    })
}

/// Consolidated sequence: train, snapshot, accumulate penalties.
pub fn run_sequence(
    config: &TaggerConfig,
    tasks: &[TaskData],
    ewc_config: &EwcConfig,
    train_config: &TrainConfig,
) -> Result<SequenceRun> {
    run_sequence_inner(config, tasks, ewc_config, train_config, true)
}

/// Sequential fine-tuning baseline: the identical schedule with lambda
/// forced to 0 and no Fisher estimation.
pub fn naive_baseline(
    config: &TaggerConfig,
    tasks: &[TaskData],
    train_config: &TrainConfig,
) -> Result<SequenceRun> {
    let ewc_config = EwcConfig {
        lambda: 0.0,
        mode: EwcMode::FullModel,
        fisher_sample_cap: 1,
    };
    run_sequence_inner(config, tasks, &ewc_config, train_config, false)
}

/// Attach a fresh head for `task`'s scheme to a trained body, retrain ONLY
/// the head on a seeded fraction of the train split (body frozen), and
/// score the test split. A linear probe of how much task-relevant
/// structure the body retained.
pub fn head_probe(
    body: TaggerModel,
    task: &TaskData,
    train_fraction: f64,
    config: &TrainConfig,
) -> Result<(TaggerModel, EvalReport)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(CoreError::usage(format!(
            "train_fraction must be in (0, 1] (got {train_fraction})"
        )));
    }
    config.validate()?;
    let mut model = body.replace_head(task.scheme.len(), derive_seed(config.seed, "probe_head", 0))?;
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    Rng::seed_from(derive_seed(config.seed, "probe_subset", 0)).shuffle(&mut order);
    let keep = ((task.train.len() as f64 * train_fraction).ceil() as usize).max(1);
    let subset: Vec<EncodedSentence> = order[..keep.min(order.len())]
        .iter()
        .map(|&i| task.train[i].clone())
        .collect();

    let head_names = TaggerModel::head_param_names();
    let head_index: Vec<bool> = model
        .store()
        .names()
        .map(|n| head_names.iter().any(|h| h == n))
        .collect();

    let mut rng = Rng::seed_from(config.seed);
    let mut batch_order: Vec<usize> = (0..subset.len()).collect();
    let mut tape = Tape::new();
    for epoch in 0..config.epochs {
        rng.shuffle(&mut batch_order);
        for (step, batch) in batch_order.chunks(config.batch_size).enumerate() {
            model.store_mut().zero_grad();
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                terms.push(model.nll_on(&mut tape, &subset[i].tokens, &subset[i].labels)?.into());
            }
            let summed = tape.add_n(model.store(), &terms)?;
            let loss = tape.scale(model.store(), summed, 1.0 / batch.len() as f64)?;
            if !tape.scalar_value(loss).is_finite() {
                return Err(CoreError::Divergence { epoch, step });
            }
            tape.backward(loss, model.store_mut())?;
            let lr = config.learning_rate;
            model.store_mut().for_each_value_grad(|i, value, grad| {
                if head_index[i] {
                    for (v, &g) in value.iter_mut().zip(grad) {
                        *v -= lr * g;
                    }
                }
            });
        }
    }
    let report = evaluate(&model, &task.test, &task.scheme)?;
    Ok((model, report))
}
