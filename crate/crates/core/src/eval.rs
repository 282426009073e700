//! Token-level per-label and micro-averaged F1, plus retention summaries
//! comparing consolidated and naive task sequences.
//!
//! Scores are per TAG at token granularity (B-PER and I-PER count
//! separately). The micro average sums TP/FP/FN over all non-O labels; the
//! default O class is excluded, so an all-O corpus has zero support and a
//! micro F1 of 0, not 1. Zero denominators yield 0.0 so aggregates stay
//! total.

use serde::Serialize;

use crate::corpus::LabelScheme;
use crate::error::{CoreError, Result};
use crate::training::SequenceResult;

#[derive(Debug, Clone, Serialize)]
pub struct LabelMetrics {
    pub label: String,
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold occurrences (TP + FN).
    pub support: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Non-O labels in scheme order.
    pub per_label: Vec<LabelMetrics>,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub avg_micro_f1: f64,
    pub total_true_positive: usize,
    pub total_false_positive: usize,
    pub total_false_negative: usize,
}

impl EvalReport {
    pub fn label_f1(&self, label: &str) -> Option<f64> {
        self.per_label.iter().find(|m| m.label == label).map(|m| m.f1)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-label and micro-averaged token F1 of predictions against gold.
pub fn token_f1(
    predictions: &[Vec<usize>],
    gold: &[Vec<usize>],
    scheme: &LabelScheme,
) -> Result<EvalReport> {
    if predictions.len() != gold.len() {
        return Err(CoreError::usage(format!(
            "{} prediction sentences vs {} gold sentences",
            predictions.len(),
            gold.len()
        )));
    }
    let classes = scheme.len();
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fun = vec![0usize; classes];
    for (si, (ps, gs)) in predictions.iter().zip(gold).enumerate() {
        if ps.len() != gs.len() {
            return Err(CoreError::usage(format!(
                "sentence {si}: {} predictions vs {} gold labels",
                ps.len(),
                gs.len()
            )));
        }
        for (&p, &g) in ps.iter().zip(gs) {
            if p >= classes || g >= classes {
                return Err(CoreError::IndexOutOfRange {
                    what: "label",
                    index: p.max(g),
                    bound: classes,
                });
            }
            if p == g {
                tp[p] += 1;
            } else {
                fp[p] += 1;
                fun[g] += 1;
            }
        }
    }

    let mut per_label = Vec::with_capacity(classes.saturating_sub(1));
    let (mut sum_tp, mut sum_fp, mut sum_fn) = (0usize, 0usize, 0usize);
    // skip O at id 0
    for (id, label) in scheme.ordered_labels().iter().enumerate().skip(1) {
        let (t, f, n) = (tp[id], fp[id], fun[id]);
        sum_tp += t;
        sum_fp += f;
        sum_fn += n;
        let precision = ratio(t, t + f);
        let recall = ratio(t, t + n);
        per_label.push(LabelMetrics {
            label: label.clone(),
            true_positive: t,
            false_positive: f,
            false_negative: n,
            precision,
            recall,
            f1: harmonic(precision, recall),
            support: t + n,
        });
    }
    let micro_precision = ratio(sum_tp, sum_tp + sum_fp);
    let micro_recall = ratio(sum_tp, sum_tp + sum_fn);
    Ok(EvalReport {
        per_label,
        micro_precision,
        micro_recall,
        avg_micro_f1: harmonic(micro_precision, micro_recall),
        total_true_positive: sum_tp,
        total_false_positive: sum_fp,
        total_false_negative: sum_fn,
    })
}

/// One task's retention figures within a single sequence run.
#[derive(Debug, Clone, Serialize)]
pub struct TaskRetention {
    pub task: String,
    /// Micro F1 immediately after this task's own training stage.
    pub after_own_training: Option<f64>,
    /// Micro F1 at the final stage.
    pub final_f1: Option<f64>,
    /// final - after_own_training, exactly. None where a head was lost.
    pub forgetting: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedRetention {
    pub seed: u64,
    pub ewc: Vec<TaskRetention>,
    pub naive: Vec<TaskRetention>,
}

/// Mean and sample standard deviation over the seeds that produced a value.
#[derive(Debug, Clone, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub spread: f64,
    pub n: usize,
}

impl Stat {
    fn over(values: impl Iterator<Item = Option<f64>>) -> Stat {
        let xs: Vec<f64> = values.flatten().collect();
        let n = xs.len();
        if n == 0 {
            return Stat {
                mean: 0.0,
                spread: 0.0,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let spread = if n < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Stat { mean, spread, n }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskAggregate {
    pub task: String,
    pub ewc_final: Stat,
    pub naive_final: Stat,
    pub ewc_forgetting: Stat,
    pub naive_forgetting: Stat,
    /// Absolute difference of final micro F1, EWC arm minus naive arm.
    pub ewc_minus_naive_final: Stat,
}

#[derive(Debug, Clone, Serialize)]
pub struct RetentionSummary {
    pub tasks: Vec<String>,
    pub per_seed: Vec<SeedRetention>,
    pub aggregate: Vec<TaskAggregate>,
}

fn retention_for(result: &SequenceResult) -> Vec<TaskRetention> {
    let n = result.task_names.len();
    (0..n)
        .map(|task| {
            let after = result.micro_f1(task, task);
            let final_f1 = result.micro_f1(n - 1, task);
            TaskRetention {
                task: result.task_names[task].clone(),
                after_own_training: after,
                final_f1,
                forgetting: match (after, final_f1) {
                    (Some(a), Some(f)) => Some(f - a),
                    _ => None,
                },
            }
        })
        .collect()
}

/// Pair per-seed EWC and naive runs over the same task sequence and
/// aggregate retention and forgetting across seeds.
pub fn retention_summary(
    seeds: &[u64],
    ewc_results: &[SequenceResult],
    naive_results: &[SequenceResult],
) -> Result<RetentionSummary> {
    if seeds.is_empty() || seeds.len() != ewc_results.len() || seeds.len() != naive_results.len() {
        return Err(CoreError::usage(
            "retention_summary needs one EWC and one naive result per seed",
        ));
    }
    let tasks = ewc_results[0].task_names.clone();
    for r in ewc_results.iter().chain(naive_results) {
        if r.task_names != tasks {
            return Err(CoreError::usage(format!(
                "mismatched task sequences: {:?} vs {:?}",
                r.task_names, tasks
            )));
        }
    }

    let per_seed: Vec<SeedRetention> = seeds
        .iter()
        .zip(ewc_results.iter().zip(naive_results))
        .map(|(&seed, (e, n))| SeedRetention {
            seed,
            ewc: retention_for(e),
            naive: retention_for(n),
        })
        .collect();

    let aggregate = (0..tasks.len())
        .map(|t| TaskAggregate {
            task: tasks[t].clone(),
            ewc_final: Stat::over(per_seed.iter().map(|s| s.ewc[t].final_f1)),
            naive_final: Stat::over(per_seed.iter().map(|s| s.naive[t].final_f1)),
            ewc_forgetting: Stat::over(per_seed.iter().map(|s| s.ewc[t].forgetting)),
            naive_forgetting: Stat::over(per_seed.iter().map(|s| s.naive[t].forgetting)),
            ewc_minus_naive_final: Stat::over(per_seed.iter().map(|s| {
                match (s.ewc[t].final_f1, s.naive[t].final_f1) {
                    (Some(e), Some(n)) => Some(e - n),
                    _ => None,
                }
            })),
        })
        .collect();

    Ok(RetentionSummary {
        tasks,
        per_seed,
        aggregate,
    })
}

/// Aligned plain-text table: one row per level (label), one column per arm.
pub fn render_f1_table(title: &str, rows: &[(String, Vec<Option<f64>>)], arms: &[&str]) -> String {
    let label_width = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain(std::iter::once("Level".len()))
        .max()
        .unwrap_or(5);
    let col_width = arms.iter().map(|a| a.len()).max().unwrap_or(6).max(6);

    let mut out = String::new();
    out.push_str(title);
    out.push('\n');
    out.push_str(&format!("{:<label_width$}", "Level"));
    for arm in arms {
        out.push_str(&format!("  {arm:>col_width$}"));
    }
    out.push('\n');
    for (label, values) in rows {
        out.push_str(&format!("{label:<label_width$}"));
        for v in values {
            match v {
                Some(x) => out.push_str(&format!("  {:>col_width$.4}", x)),
                None => out.push_str(&format!("  {:>col_width$}", "-")),
            }
        }
        out.push('\n');
    }
    out
}
