//! Experiment configuration: a single JSON file fully determines a run.
//!
//! Environment variables are deliberately not consulted; rerunning with
//! the same config and seeds reproduces every output byte. Vocabulary size
//! and label counts are derived from the resolved data (the vocabulary is
//! built over the union of all tasks' train splits), so the model section
//! only carries the architecture knobs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ewcseq_core::corpus::{self, LabelScheme, TaggedSentence, Vocabulary};
use ewcseq_core::ewc::EwcConfig;
use ewcseq_core::synth::{self, SynthSpec, TaskCorpus};
use ewcseq_core::training::{Optimizer, TaskData, Transition};

use crate::error::{CliError, Result};

/// Frequency cutoffs when the config does not set `min_count`: synthetic
/// corpora keep everything, real files drop hapax noise.
const DEFAULT_MIN_COUNT_SYNTH: usize = 1;
const DEFAULT_MIN_COUNT_FILES: usize = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub window: usize,
    pub hidden_dim: usize,
    /// Vocabulary frequency cutoff; defaults depend on the data kind.
    #[serde(default)]
    pub min_count: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Ewc,
    Naive,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Ewc => "ewc",
            Arm::Naive => "naive",
        }
    }
}

/// One file-backed task entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileTask {
    pub name: String,
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    pub transition: Transition,
}

/// Where the task sequence comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSection {
    /// Two-task distribution-shift pair, same labels.
    SynthShift { spec: SynthSpec },
    /// Coarse task then fine task with a replaced head.
    SynthCoarseFine { spec: SynthSpec, fine_per_coarse: usize },
    /// CoNLL files on disk.
    Files { tasks: Vec<FileTask> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub ewc: EwcConfig,
    pub data: DataSection,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(CliError::usage("config needs at least one arm"));
        }
        if self.seeds.is_empty() {
            return Err(CliError::usage("config needs at least one seed"));
        }
        let mut unique = self.seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != self.seeds.len() {
            return Err(CliError::usage("seeds must be unique"));
        }
        if self.model.embed_dim < 1 || self.model.hidden_dim < 1 {
            return Err(CliError::usage("model dims must be >= 1"));
        }
        self.ewc
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))?;
        let probe = ewcseq_core::training::TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: 0,
            optimizer: self.train.optimizer,
        };
        probe.validate().map_err(|e| CliError::usage(e.to_string()))?;
        match &self.data {
            DataSection::SynthShift { spec } => {
                spec.validate().map_err(|e| CliError::usage(e.to_string()))?
            }
            DataSection::SynthCoarseFine { spec, fine_per_coarse } => {
                spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
                if *fine_per_coarse < 2 {
                    return Err(CliError::usage("fine_per_coarse must be >= 2"));
                }
            }
            DataSection::Files { tasks } => {
                if tasks.is_empty() {
                    return Err(CliError::usage("files data needs at least one task"));
                }
                // fail fast: every referenced file must exist before any run
                for t in tasks {
                    for path in [Some(&t.train), Some(&t.test), t.dev.as_ref()].into_iter().flatten() {
                        if !path.is_file() {
                            return Err(CliError::usage(format!(
                                "task {:?}: data file {} does not exist",
                                t.name,
                                path.display()
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn default_min_count(&self) -> usize {
        match self.data {
            DataSection::Files { .. } => DEFAULT_MIN_COUNT_FILES,
            _ => DEFAULT_MIN_COUNT_SYNTH,
        }
    }
}

/// Data resolved into encodable form, shared by every seed and arm.
pub struct ResolvedExperiment {
    pub config: ExperimentConfig,
    pub vocab: Vocabulary,
    pub tasks: Vec<TaskData>,
}

fn corpus_to_task(name: &str, transition: Transition, corpus: &TaskCorpus, vocab: &Vocabulary) -> Result<TaskData> {
    let encode_all = |sentences: &[TaggedSentence]| -> Result<Vec<_>> {
        sentences
            .iter()
            .map(|s| corpus::encode(s, vocab, &corpus.scheme).map_err(|e| CliError::usage(e.to_string())))
            .collect()
    };
    Ok(TaskData {
        name: name.to_string(),
        transition,
        scheme: corpus.scheme.clone(),
        train: encode_all(&corpus.train)?,
        test: encode_all(&corpus.test)?,
    })
}

fn load_file_task(entry: &FileTask, vocab: Option<&Vocabulary>) -> Result<(Vec<TaggedSentence>, Option<TaskData>)> {
    let read = |path: &Path| -> Result<Vec<TaggedSentence>> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        corpus::parse_conll(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    };
    let train = read(&entry.train)?;
    let test = read(&entry.test)?;
    let dev = entry.dev.as_ref().map(|p| read(p)).transpose()?.unwrap_or_default();
    if train.is_empty() {
        return Err(CliError::usage(format!(
            "task {:?}: train split {} is empty",
            entry.name,
            entry.train.display()
        )));
    }

    let Some(vocab) = vocab else {
        return Ok((train, None));
    };
    // one scheme per task, over all its splits
    let mut all = train.clone();
    all.extend(test.iter().cloned());
    all.extend(dev.iter().cloned());
    let scheme = LabelScheme::from_corpus(&all).map_err(|e| CliError::usage(e.to_string()))?;
    let encode_all = |sentences: &[TaggedSentence]| -> Result<Vec<_>> {
        sentences
            .iter()
            .map(|s| corpus::encode(s, vocab, &scheme).map_err(|e| CliError::usage(e.to_string())))
            .collect()
    };
    let encoded_train = encode_all(&train)?;
    let encoded_test = encode_all(&test)?;
    let task = TaskData {
        name: entry.name.clone(),
        transition: entry.transition,
        scheme,
        train: encoded_train,
        test: encoded_test,
    };
    Ok((train, Some(task)))
}

/// Materialize the data section: generate or parse corpora, build the
/// vocabulary over the union of train splits, and encode every task.
pub fn resolve(config: ExperimentConfig) -> Result<ResolvedExperiment> {
    let min_count = config.model.min_count.unwrap_or_else(|| config.default_min_count());
    let build_vocab = |train_splits: &[&[TaggedSentence]]| -> Result<Vocabulary> {
        let union: Vec<TaggedSentence> = train_splits.iter().flat_map(|s| s.iter().cloned()).collect();
        Vocabulary::build(&union, min_count).map_err(|e| CliError::usage(e.to_string()))
    };

    let (vocab, tasks) = match &config.data {
        DataSection::SynthShift { spec } => {
            let (a, b) = synth::generate_shift_pair(spec).map_err(|e| CliError::usage(e.to_string()))?;
            let vocab = build_vocab(&[&a.train, &b.train])?;
            let tasks = vec![
                corpus_to_task("taskA", Transition::SameLabels, &a, &vocab)?,
                corpus_to_task("taskB", Transition::SameLabels, &b, &vocab)?,
            ];
            (vocab, tasks)
        }
        DataSection::SynthCoarseFine { spec, fine_per_coarse } => {
            let pair = synth::generate_coarse_fine_pair(spec, *fine_per_coarse)
                .map_err(|e| CliError::usage(e.to_string()))?;
            let vocab = build_vocab(&[&pair.coarse.train, &pair.fine.train])?;
            let tasks = vec![
                corpus_to_task("coarse", Transition::SameLabels, &pair.coarse, &vocab)?,
                corpus_to_task("fine", Transition::NewHead, &pair.fine, &vocab)?,
            ];
            (vocab, tasks)
        }
        DataSection::Files { tasks: entries } => {
            let mut train_splits = Vec::with_capacity(entries.len());
            for e in entries {
                train_splits.push(load_file_task(e, None)?.0);
            }
            let refs: Vec<&[TaggedSentence]> = train_splits.iter().map(|v| v.as_slice()).collect();
            let vocab = build_vocab(&refs)?;
            let mut tasks = Vec::with_capacity(entries.len());
            for e in entries {
                let (_, task) = load_file_task(e, Some(&vocab))?;
                tasks.push(task.expect("task built when vocab given"));
            }
            (vocab, tasks)
        }
    };

    Ok(ResolvedExperiment {
        config,
        vocab,
        tasks,
    })
}

/// Emitted (non-reserved) token set of a generated task, for the
/// disjointness check.
pub fn emitted_tokens(corpus: &TaskCorpus) -> BTreeSet<String> {
    corpus
        .train
        .iter()
        .chain(&corpus.dev)
        .chain(&corpus.test)
        .flat_map(|s| s.tokens.iter().cloned())
        .collect()
}
