//! Procedural generation of desk-scale task pairs.
//!
//! Two generators cover the two continual-learning regimes:
//!
//! - [`generate_shift_pair`]: same BIO label set, second task drawn from a
//!   partially replaced lexicon (distribution shift as surface-form
//!   substitution, analogous to a language switch).
//! - [`generate_coarse_fine_pair`]: flat coarse labels vs flat
//!   `{class}-sub{j}` refinements over the SAME token pools, so every fine
//!   label maps onto its coarse parent (distinct tasks with a replaced
//!   head).
//!
//! All output is deterministic in the spec's single 64-bit seed via the
//! documented ChaCha20 streams in [`crate::rng`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelScheme, TaggedSentence, O_LABEL};
use crate::error::{CoreError, Result};
use crate::rng::{derive_seed, Rng};

/// Entity spans are 1-3 tokens, uniform.
const MAX_SPAN: usize = 3;
const MEAN_SPAN: f64 = 2.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Inclusive [min, max] sentence length in tokens.
    pub sentence_len: (usize, usize),
    pub entity_types: Vec<String>,
    /// Tokens per pool (each entity type and the filler pool).
    pub lexicon_size: usize,
    /// Fraction of task-B lexicon shared with task A, per pool.
    pub vocab_overlap: f64,
    /// Target fraction of tokens that belong to entity spans.
    pub entity_density: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 1 || self.n_dev < 1 || self.n_test < 1 {
            return Err(CoreError::Spec("sentence counts must be >= 1".into()));
        }
        let (lo, hi) = self.sentence_len;
        if lo < 1 || lo > hi {
            return Err(CoreError::Spec(format!(
                "invalid sentence_len range [{lo}, {hi}]"
            )));
        }
        if self.entity_types.is_empty() {
            return Err(CoreError::Spec("entity_types must be non-empty".into()));
        }
        if self.lexicon_size < 1 {
            return Err(CoreError::Spec("lexicon_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.vocab_overlap) {
            return Err(CoreError::Spec(format!(
                "vocab_overlap must be in [0, 1] (got {})",
                self.vocab_overlap
            )));
        }
        if !(self.entity_density > 0.0 && self.entity_density < 1.0) {
            return Err(CoreError::Spec(format!(
                "entity_density must be in (0, 1) (got {})",
                self.entity_density
            )));
        }
        Ok(())
    }

    /// Shared tokens per pool for the requested overlap.
    fn shared_per_pool(&self) -> Result<usize> {
        let shared = (self.vocab_overlap * self.lexicon_size as f64).round() as usize;
        if self.vocab_overlap > 0.0 && shared == 0 {
            return Err(CoreError::Spec(format!(
                "lexicon_size {} too small to realize overlap {}",
                self.lexicon_size, self.vocab_overlap
            )));
        }
        if self.vocab_overlap < 1.0 && shared == self.lexicon_size {
            return Err(CoreError::Spec(format!(
                "lexicon_size {} too small to realize overlap {} below 1",
                self.lexicon_size, self.vocab_overlap
            )));
        }
        Ok(shared)
    }
}

/// One task's data splits plus the label scheme they were generated under.
#[derive(Debug, Clone)]
pub struct TaskCorpus {
    pub scheme: LabelScheme,
    pub train: Vec<TaggedSentence>,
    pub dev: Vec<TaggedSentence>,
    pub test: Vec<TaggedSentence>,
}

/// Coarse/fine pair with the refinement map.
#[derive(Debug, Clone)]
pub struct CoarseFinePair {
    pub coarse: TaskCorpus,
    pub fine: TaskCorpus,
    /// Total map from every fine label to its coarse parent.
    pub fine_to_coarse: BTreeMap<String, String>,
}

/// Token pools for one task: per-class entity pools plus a filler pool.
struct Pools {
    entity: Vec<Vec<String>>,
    filler: Vec<String>,
}

impl Pools {
    fn all_tokens(&self) -> BTreeSet<String> {
        self.entity
            .iter()
            .flatten()
            .chain(self.filler.iter())
            .cloned()
            .collect()
    }
}

fn pool_a(class: &str, size: usize) -> Vec<String> {
    (0..size).map(|i| format!("{class}_a{i}")).collect()
}

/// Seeded subset of a task-A pool that survives into task B.
fn legacy_subset(a_pool: &[String], shared: usize, seed: u64) -> Vec<String> {
    let mut order: Vec<usize> = (0..a_pool.len()).collect();
    Rng::seed_from(seed).shuffle(&mut order);
    order[..shared].iter().map(|&i| a_pool[i].clone()).collect()
}

/// Task pools for the shift pair.
///
/// Task B keeps an overlap fraction of task A's tokens and replaces the
/// rest with fresh ones. Under a partial shift the surviving tokens also
/// change role: B's pool p inherits its legacy subset from A's pool p+1
/// (cyclically, filler included). Without such false friends an
/// embedding-lookup tagger cannot forget at all — task-B gradients never
/// touch rows that only task A uses — and there would be nothing for
/// consolidation to protect. At overlap 1.0 the lexica are identical and
/// no rotation happens (no shift).
fn pools_for_shift(spec: &SynthSpec) -> Result<(Pools, Pools)> {
    let shared = spec.shared_per_pool()?;
    let mut a_pools: Vec<Vec<String>> = spec
        .entity_types
        .iter()
        .map(|c| pool_a(c, spec.lexicon_size))
        .collect();
    a_pools.push(pool_a("filler", spec.lexicon_size));

    let total = a_pools.len();
    let rotate = spec.vocab_overlap < 1.0;
    let mut b_pools: Vec<Vec<String>> = Vec::with_capacity(total);
    for p in 0..total {
        let source = if rotate { (p + 1) % total } else { p };
        let mut pool = legacy_subset(
            &a_pools[source],
            shared,
            derive_seed(spec.seed, "lexicon", source as u64),
        );
        let class: &str = spec
            .entity_types
            .get(p)
            .map(String::as_str)
            .unwrap_or("filler");
        for i in 0..(spec.lexicon_size - shared) {
            pool.push(format!("{class}_b{i}"));
        }
        b_pools.push(pool);
    }

    let a_filler = a_pools.pop().expect("filler pool");
    let b_filler = b_pools.pop().expect("filler pool");
    Ok((
        Pools {
            entity: a_pools,
            filler: a_filler,
        },
        Pools {
            entity: b_pools,
            filler: b_filler,
        },
    ))
}

/// Full token pools (entity + filler) each shift task can emit.
pub fn shift_lexicons(spec: &SynthSpec) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    spec.validate()?;
    let (a, b) = pools_for_shift(spec)?;
    Ok((a.all_tokens(), b.all_tokens()))
}

/// How a generated span is labeled.
enum Labeling {
    Bio,
    FlatCoarse,
    /// Pick a subtype slice of the class pool and label `{class}-sub{j}`.
    FlatFine { fine_per_coarse: usize },
}

/// Probability of starting an entity span so that the expected fraction of
/// entity tokens matches the density: d = mu*p / (mu*p + 1 - p).
fn span_start_prob(density: f64) -> f64 {
    density / (MEAN_SPAN * (1.0 - density) + density)
}

fn gen_sentences(
    rng: &mut Rng,
    n: usize,
    spec: &SynthSpec,
    pools: &Pools,
    labeling: &Labeling,
) -> Vec<TaggedSentence> {
    let p_start = span_start_prob(spec.entity_density);
    let (lo, hi) = spec.sentence_len;
    let mut sentences = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.range_inclusive(lo, hi);
        let mut tokens = Vec::with_capacity(len);
        let mut labels = Vec::with_capacity(len);
        let mut pos = 0;
        while pos < len {
            if rng.uniform() < p_start {
                let span = rng.range_inclusive(1, MAX_SPAN).min(len - pos);
                let class = rng.below(pools.entity.len());
                let class_name = &spec.entity_types[class];
                let pool = &pools.entity[class];
                match labeling {
                    Labeling::Bio => {
                        for j in 0..span {
                            tokens.push(rng.choice(pool).clone());
                            labels.push(if j == 0 {
                                format!("B-{class_name}")
                            } else {
                                format!("I-{class_name}")
                            });
                        }
                    }
                    Labeling::FlatCoarse => {
                        for _ in 0..span {
                            tokens.push(rng.choice(pool).clone());
                            labels.push(class_name.clone());
                        }
                    }
                    Labeling::FlatFine { fine_per_coarse } => {
                        let sub = rng.below(*fine_per_coarse);
                        // subtype j owns the pool tokens with index % fine_per_coarse == j
                        let slice: Vec<&String> = pool
                            .iter()
                            .skip(sub)
                            .step_by(*fine_per_coarse)
                            .collect();
                        for _ in 0..span {
                            tokens.push((*rng.choice(&slice)).clone());
                            labels.push(format!("{class_name}-sub{sub}"));
                        }
                    }
                }
                pos += span;
            } else {
                tokens.push(rng.choice(&pools.filler).clone());
                labels.push(O_LABEL.to_string());
                pos += 1;
            }
        }
        sentences.push(TaggedSentence::new(tokens, labels).expect("generated sentence is well-formed"));
    }
    sentences
}

fn gen_corpus(
    spec: &SynthSpec,
    pools: &Pools,
    scheme: LabelScheme,
    labeling: Labeling,
    stream: &str,
) -> TaskCorpus {
    let gen = |split: &str, n: usize| {
        let mut rng = Rng::seed_from(derive_seed(spec.seed, &format!("{stream}_{split}"), 0));
        gen_sentences(&mut rng, n, spec, pools, &labeling)
    };
    TaskCorpus {
        train: gen("train", spec.n_train),
        dev: gen("dev", spec.n_dev),
        test: gen("test", spec.n_test),
        scheme,
    }
}

/// Two tasks over the SAME BIO label scheme, the second drawn from a
/// lexicon sharing a `vocab_overlap` fraction of tokens with the first.
pub fn generate_shift_pair(spec: &SynthSpec) -> Result<(TaskCorpus, TaskCorpus)> {
    spec.validate()?;
    let (pools_a, pools_b) = pools_for_shift(spec)?;
    let scheme = LabelScheme::bio(&spec.entity_types)?;
    let task_a = gen_corpus(spec, &pools_a, scheme.clone(), Labeling::Bio, "shift_a");
    let task_b = gen_corpus(spec, &pools_b, scheme, Labeling::Bio, "shift_b");
    Ok((task_a, task_b))
}

/// Coarse task over flat class labels and a fine task over flat
/// `{class}-sub{j}` labels, both drawn from the same token pools so that
/// collapsing fine labels to their parents yields a valid coarse corpus.
pub fn generate_coarse_fine_pair(spec: &SynthSpec, fine_per_coarse: usize) -> Result<CoarseFinePair> {
    spec.validate()?;
    if fine_per_coarse < 2 {
        return Err(CoreError::Spec(format!(
            "fine_per_coarse must be >= 2 (got {fine_per_coarse})"
        )));
    }
    if spec.lexicon_size < fine_per_coarse {
        return Err(CoreError::Spec(format!(
            "lexicon_size {} cannot be split into {} subtypes",
            spec.lexicon_size, fine_per_coarse
        )));
    }
    let pools = Pools {
        entity: spec
            .entity_types
            .iter()
            .map(|c| (0..spec.lexicon_size).map(|i| format!("{c}_{i}")).collect())
            .collect(),
        filler: (0..spec.lexicon_size).map(|i| format!("filler_{i}")).collect(),
    };

    let coarse_scheme = LabelScheme::flat(&spec.entity_types)?;
    let mut fine_labels = Vec::new();
    let mut fine_to_coarse = BTreeMap::new();
    for c in &spec.entity_types {
        for j in 0..fine_per_coarse {
            let fine = format!("{c}-sub{j}");
            fine_to_coarse.insert(fine.clone(), c.clone());
            fine_labels.push(fine);
        }
    }
    let fine_scheme = LabelScheme::flat(&fine_labels)?;

    let coarse = gen_corpus(spec, &pools, coarse_scheme, Labeling::FlatCoarse, "coarse");
    let fine = gen_corpus(
        spec,
        &pools,
        fine_scheme,
        Labeling::FlatFine { fine_per_coarse },
        "fine",
    );
    Ok(CoarseFinePair {
        coarse,
        fine,
        fine_to_coarse,
    })
}
