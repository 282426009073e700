//! The four CLI verbs: sequence, synth, eval, inspect.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use ewcseq_core::corpus::{self, serialize_conll};
use ewcseq_core::error::CoreError;
use ewcseq_core::eval::{self, render_f1_table, RetentionSummary};
use ewcseq_core::rng::derive_seed;
use ewcseq_core::synth::{self, TaskCorpus};
use ewcseq_core::tagger::TaggerConfig;
use ewcseq_core::training::{self, CellOutcome, SequenceResult, SequenceRun, TrainConfig};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{emitted_tokens, resolve, Arm, DataSection, ExperimentConfig, ResolvedExperiment};
use crate::error::{CliError, Result};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::runtime(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}

fn core_runtime(context: &str, e: CoreError) -> CliError {
    CliError::runtime(format!("{context}: {e}"))
}

#[derive(Serialize)]
struct TaskMeta {
    name: String,
    num_labels: usize,
    train_sentences: usize,
    test_sentences: usize,
}

#[derive(Serialize)]
struct ResolvedMeta {
    vocab_size: usize,
    tasks: Vec<TaskMeta>,
}

/// One arm x seed result file: the full resolved config plus the sequence
/// record, so the file alone suffices to rerun the experiment.
#[derive(Serialize)]
struct RunRecord<'a> {
    experiment: &'a ExperimentConfig,
    arm: &'static str,
    seed: u64,
    /// Effective consolidation strength for this run (0 in the naive arm).
    lambda: f64,
    resolved: &'a ResolvedMeta,
    result: &'a SequenceResult,
}

/// One arm x seed execution over resolved data. The model is sized from
/// the vocabulary and the first task's scheme; per-stage randomness is
/// derived from the run seed.
pub fn run_single(resolved: &ResolvedExperiment, arm: Arm, seed: u64) -> Result<SequenceRun> {
    let config = &resolved.config;
    let tagger = TaggerConfig {
        vocab_size: resolved.vocab.len(),
        embed_dim: config.model.embed_dim,
        window: config.model.window,
        hidden_dim: config.model.hidden_dim,
        num_labels: resolved.tasks[0].scheme.len(),
        seed: derive_seed(seed, "init", 0),
    };
    let train = TrainConfig {
        learning_rate: config.train.learning_rate,
        epochs: config.train.epochs,
        batch_size: config.train.batch_size,
        seed,
        optimizer: config.train.optimizer,
    };
    match arm {
        Arm::Ewc => training::run_sequence(&tagger, &resolved.tasks, &config.ewc, &train)
            .map_err(|e| core_runtime(&format!("ewc run (seed {seed})"), e)),
        Arm::Naive => training::naive_baseline(&tagger, &resolved.tasks, &train)
            .map_err(|e| core_runtime(&format!("naive run (seed {seed})"), e)),
    }
}

/// Mean per-label and micro F1 rows for one task's final-stage reports.
fn final_stage_rows(
    results: &[SequenceResult],
    task_index: usize,
) -> Option<(Vec<String>, Vec<f64>, f64)> {
    let mut label_sums: Vec<(String, f64)> = Vec::new();
    let mut micro_sum = 0.0;
    for r in results {
        let stage = r.stages.last()?;
        match &stage.evals.get(task_index)?.outcome {
            CellOutcome::Scored { report } => {
                if label_sums.is_empty() {
                    label_sums = report.per_label.iter().map(|m| (m.label.clone(), 0.0)).collect();
                }
                for (slot, m) in label_sums.iter_mut().zip(&report.per_label) {
                    slot.1 += m.f1;
                }
                micro_sum += report.avg_micro_f1;
            }
            CellOutcome::HeadLost => return None,
        }
    }
    let n = results.len() as f64;
    let labels = label_sums.iter().map(|(l, _)| l.clone()).collect();
    let means = label_sums.iter().map(|(_, s)| s / n).collect();
    Some((labels, means, micro_sum / n))
}

fn build_report(
    resolved: &ResolvedExperiment,
    per_arm: &[(Arm, Vec<SequenceResult>)],
) -> String {
    let seeds = resolved.config.seeds.len();
    let arm_names: Vec<&str> = per_arm.iter().map(|(a, _)| a.name()).collect();
    let mut out = String::new();
    out.push_str(&format!(
        "Final-stage token F1 by level, mean over {seeds} seed(s)\n\n"
    ));
    for (i, task) in resolved.tasks.iter().enumerate() {
        let columns: Vec<Option<(Vec<String>, Vec<f64>, f64)>> = per_arm
            .iter()
            .map(|(_, results)| final_stage_rows(results, i))
            .collect();
        if columns.iter().all(Option::is_none) {
            out.push_str(&format!(
                "Task {}: head replaced by a later task; final-stage evaluation not applicable\n\n",
                task.name
            ));
            continue;
        }
        let labels: Vec<String> = columns
            .iter()
            .flatten()
            .next()
            .map(|(l, _, _)| l.clone())
            .unwrap_or_default();
        let mut rows: Vec<(String, Vec<Option<f64>>)> = Vec::new();
        for (j, label) in labels.iter().enumerate() {
            let values = columns
                .iter()
                .map(|c| c.as_ref().map(|(_, means, _)| means[j]))
                .collect();
            rows.push((label.clone(), values));
        }
        rows.push((
            "AVG_MICRO".to_string(),
            columns.iter().map(|c| c.as_ref().map(|(_, _, m)| *m)).collect(),
        ));
        out.push_str(&render_f1_table(
            &format!("Task {}", task.name),
            &rows,
            &arm_names,
        ));
        out.push('\n');
    }
    out
}

/// Run every seed x arm combination, writing per-run result JSONs and
/// checkpoints, then the retention summary and the text report.
pub fn cmd_sequence(
    config_path: &Path,
    out_override: Option<PathBuf>,
    seed_override: Option<u64>,
    lambda_override: Option<f64>,
) -> Result<()> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(out) = out_override {
        config.output_dir = out;
    }
    if let Some(seed) = seed_override {
        config.seeds = vec![seed];
    }
    if let Some(lambda) = lambda_override {
        config.ewc.lambda = lambda;
    }
    config.validate()?;
    let resolved = resolve(config)?;
    let config = &resolved.config;

    fs::create_dir_all(&config.output_dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", config.output_dir.display())))?;
    let marker = config.output_dir.join(".incomplete");
    fs::write(&marker, "run in progress\n")
        .map_err(|e| CliError::runtime(format!("writing marker: {e}")))?;

    let meta = ResolvedMeta {
        vocab_size: resolved.vocab.len(),
        tasks: resolved
            .tasks
            .iter()
            .map(|t| TaskMeta {
                name: t.name.clone(),
                num_labels: t.scheme.len(),
                train_sentences: t.train.len(),
                test_sentences: t.test.len(),
            })
            .collect(),
    };

    let mut per_arm: Vec<(Arm, Vec<SequenceResult>)> =
        config.arms.iter().map(|&a| (a, Vec::new())).collect();
    for &seed in &config.seeds {
        for (arm_slot, results) in per_arm.iter_mut() {
            let arm = *arm_slot;
            let run = run_single(&resolved, arm, seed)?;
            let effective_lambda = match arm {
                Arm::Ewc => config.ewc.lambda,
                Arm::Naive => 0.0,
            };
            let record = RunRecord {
                experiment: config,
                arm: arm.name(),
                seed,
                lambda: effective_lambda,
                resolved: &meta,
                result: &run.result,
            };
            let stem = format!("{}_seed{}", arm.name(), seed);
            write_json(&config.output_dir.join(format!("{stem}.json")), &record)?;

            let final_scheme = &resolved.tasks.last().expect("validated nonempty").scheme;
            let ckpt = Checkpoint::capture(
                &run.model,
                &resolved.vocab,
                final_scheme,
                seed,
                resolved.tasks.iter().map(|t| t.name.clone()).collect(),
                run.snapshots,
            );
            save_checkpoint(&config.output_dir.join(format!("{stem}.ckpt")), &ckpt)?;
            results.push(run.result);
        }
    }

    let ewc_results = per_arm.iter().find(|(a, _)| *a == Arm::Ewc).map(|(_, r)| r);
    let naive_results = per_arm.iter().find(|(a, _)| *a == Arm::Naive).map(|(_, r)| r);
    if let (Some(ewc_results), Some(naive_results)) = (ewc_results, naive_results) {
        let summary: RetentionSummary =
            eval::retention_summary(&config.seeds, ewc_results, naive_results)
                .map_err(|e| core_runtime("retention summary", e))?;
        write_json(&config.output_dir.join("retention_summary.json"), &summary)?;
    }
    fs::write(config.output_dir.join("report.txt"), build_report(&resolved, &per_arm))
        .map_err(|e| CliError::runtime(format!("writing report: {e}")))?;

    fs::remove_file(&marker).map_err(|e| CliError::runtime(format!("removing marker: {e}")))?;
    Ok(())
}

fn write_task_dir(out: &Path, name: &str, corpus: &TaskCorpus) -> Result<()> {
    let dir = out.join(name);
    fs::create_dir_all(&dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
    for (split, sentences) in [
        ("train", &corpus.train),
        ("dev", &corpus.dev),
        ("test", &corpus.test),
    ] {
        let path = dir.join(format!("{split}.conll"));
        fs::write(&path, serialize_conll(sentences))
            .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}

/// Materialize a synthetic task pair as CoNLL files (train/dev/test per
/// task). With `check_disjoint`, verify that the two shift tasks share no
/// emitted tokens and fail if they do.
pub fn cmd_synth(spec_path: &Path, out: &Path, check_disjoint: bool) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", spec_path.display())))?;
    let data: DataSection = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("invalid synth spec {}: {e}", spec_path.display())))?;

    match data {
        DataSection::SynthShift { spec } => {
            spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
            let (a, b) = synth::generate_shift_pair(&spec).map_err(|e| CliError::usage(e.to_string()))?;
            write_task_dir(out, "taskA", &a)?;
            write_task_dir(out, "taskB", &b)?;
            if check_disjoint {
                let shared: BTreeSet<String> = emitted_tokens(&a)
                    .intersection(&emitted_tokens(&b))
                    .cloned()
                    .collect();
                if shared.is_empty() {
                    println!("lexica disjoint: true");
                } else {
                    return Err(CliError::runtime(format!(
                        "lexica disjoint: false ({} shared tokens)",
                        shared.len()
                    )));
                }
            }
        }
        DataSection::SynthCoarseFine { spec, fine_per_coarse } => {
            if check_disjoint {
                return Err(CliError::usage(
                    "--check-disjoint applies to shift pairs only",
                ));
            }
            let pair = synth::generate_coarse_fine_pair(&spec, fine_per_coarse)
                .map_err(|e| CliError::usage(e.to_string()))?;
            write_task_dir(out, "coarse", &pair.coarse)?;
            write_task_dir(out, "fine", &pair.fine)?;
        }
        DataSection::Files { .. } => {
            return Err(CliError::usage("synth needs a synth_shift or synth_coarse_fine spec"));
        }
    }
    Ok(())
}

/// Score a checkpoint against a CoNLL file and print the report JSON.
pub fn cmd_eval(checkpoint_path: &Path, data_path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let model = ckpt.restore_model()?;
    let text = fs::read_to_string(data_path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", data_path.display())))?;
    let sentences = corpus::parse_conll(&text).map_err(|e| CliError::usage(e.to_string()))?;

    let known: BTreeSet<&str> = ckpt.scheme.ordered_labels().iter().map(String::as_str).collect();
    let missing: BTreeSet<&str> = sentences
        .iter()
        .flat_map(|s| s.labels.iter().map(String::as_str))
        .filter(|l| !known.contains(l))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::usage(format!(
            "data labels missing from checkpoint scheme: {}",
            missing.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }

    let mut predictions = Vec::with_capacity(sentences.len());
    let mut gold = Vec::with_capacity(sentences.len());
    for s in &sentences {
        let enc = corpus::encode(s, &ckpt.vocab, &ckpt.scheme).map_err(|e| CliError::usage(e.to_string()))?;
        predictions.push(
            model
                .predict(&enc.tokens)
                .map_err(|e| core_runtime("predict", e))?,
        );
        gold.push(enc.labels);
    }
    let report = eval::token_f1(&predictions, &gold, &ckpt.scheme)
        .map_err(|e| core_runtime("token_f1", e))?;
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::runtime(format!("serializing report: {e}")))?;
    text.push('\n');
    println!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize)]
struct SnapshotInfo {
    task: String,
    params: Vec<String>,
}

#[derive(Serialize)]
struct InspectOutput {
    format_version: u32,
    config: TaggerConfig,
    vocab_size: usize,
    scheme_flat: bool,
    scheme_labels: Vec<String>,
    rng_seed: u64,
    completed_tasks: Vec<String>,
    tensors: Vec<TensorMeta>,
    snapshots: Vec<SnapshotInfo>,
}

/// Dump checkpoint metadata as JSON.
pub fn cmd_inspect(checkpoint_path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let out = InspectOutput {
        format_version: ckpt.format_version,
        config: ckpt.config.clone(),
        vocab_size: ckpt.vocab.len(),
        scheme_flat: ckpt.scheme.is_flat(),
        scheme_labels: ckpt.scheme.ordered_labels().to_vec(),
        rng_seed: ckpt.rng_seed,
        completed_tasks: ckpt.completed_tasks.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        snapshots: ckpt
            .snapshots
            .iter()
            .map(|s| SnapshotInfo {
                task: s.task_name().to_string(),
                params: s.param_subset().map(String::from).collect(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&out)
        .map_err(|e| CliError::runtime(format!("serializing: {e}")))?;
    println!("{text}");
    Ok(())
}
