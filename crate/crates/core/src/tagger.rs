//! Per-token classifier: embedding lookup, fixed context-window encoder,
//! and a task-specific output head.
//!
//! The parameters are partitioned into a shared body (embedding, W1, b1)
//! and a swappable head (W_head, b_head). Replacing the head changes the
//! number of output labels without touching the body, which is what the
//! distinct-tasks consolidation mode regularizes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::error::{CoreError, Result};
use crate::rng::Rng;

/// Reserved padding token id (see corpus::Vocabulary).
pub const PAD_ID: usize = 0;

pub const EMBEDDING: &str = "embedding";
pub const W1: &str = "W1";
pub const B1: &str = "b1";
pub const W_HEAD: &str = "W_head";
pub const B_HEAD: &str = "b_head";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Tokens of context on each side of the focus token.
    pub window: usize,
    pub hidden_dim: usize,
    /// Entity labels plus the default O class.
    pub num_labels: usize,
    pub seed: u64,
}

impl TaggerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 1 || self.embed_dim < 1 || self.hidden_dim < 1 {
            return Err(CoreError::config(format!(
                "dims must be >= 1: vocab {}, embed {}, hidden {}",
                self.vocab_size, self.embed_dim, self.hidden_dim
            )));
        }
        if self.num_labels < 2 {
            return Err(CoreError::config(format!(
                "num_labels must be >= 2 (got {})",
                self.num_labels
            )));
        }
        Ok(())
    }

    /// Width of the concatenated window fed to the encoder.
    pub fn window_width(&self) -> usize {
        (2 * self.window + 1) * self.embed_dim
    }
}

#[derive(Debug, Clone, Copy)]
struct ParamIds {
    embedding: ParamId,
    w1: ParamId,
    b1: ParamId,
    w_head: ParamId,
    b_head: ParamId,
}

/// Window tagger with an explicit shared/head parameter partition.
#[derive(Clone)]
pub struct TaggerModel {
    config: TaggerConfig,
    store: ParamStore,
    ids: ParamIds,
}

fn glorot_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.range_f64(-s, s)).collect();
    Tensor::matrix(rows, cols, data).expect("glorot shape")
}

impl TaggerModel {
    /// Glorot-uniform weights, zero biases, deterministic under the seed.
    pub fn init(config: TaggerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from(config.seed);
        let mut store = ParamStore::new();
        let embedding = store.add(
            EMBEDDING,
            glorot_matrix(&mut rng, config.vocab_size, config.embed_dim),
        )?;
        let w1 = store.add(
            W1,
            glorot_matrix(&mut rng, config.window_width(), config.hidden_dim),
        )?;
        let b1 = store.add(B1, Tensor::zeros(vec![config.hidden_dim]))?;
        let w_head = store.add(
            W_HEAD,
            glorot_matrix(&mut rng, config.hidden_dim, config.num_labels),
        )?;
        let b_head = store.add(B_HEAD, Tensor::zeros(vec![config.num_labels]))?;
        Ok(TaggerModel {
            config,
            store,
            ids: ParamIds {
                embedding,
                w1,
                b1,
                w_head,
                b_head,
            },
        })
    }

    /// Rebuild a model from named tensors (checkpoint restore).
    pub fn from_parameters(config: TaggerConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut model = TaggerModel::init(config.clone())?;
        if tensors.len() != model.store.len() {
            return Err(CoreError::usage(format!(
                "expected {} parameters, got {}",
                model.store.len(),
                tensors.len()
            )));
        }
        for (name, tensor) in tensors {
            let id = model.store.id(&name)?;
            if model.store.value(id).shape() != tensor.shape() {
                return Err(CoreError::dimension(
                    "from_parameters",
                    model.store.value(id).shape_string(),
                    tensor.shape_string(),
                ));
            }
            *model.store.value_mut(id) = tensor;
        }
        Ok(model)
    }

    pub fn config(&self) -> &TaggerConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn shared_param_names() -> Vec<String> {
        vec![EMBEDDING.into(), W1.into(), B1.into()]
    }

    pub fn head_param_names() -> Vec<String> {
        vec![W_HEAD.into(), B_HEAD.into()]
    }

    pub fn all_param_names(&self) -> Vec<String> {
        self.store.names().map(String::from).collect()
    }

    /// Flat index windows: row t holds ids of tokens [t-k .. t+k], with the
    /// reserved PAD id beyond sentence edges.
    fn window_indices(&self, token_ids: &[usize]) -> Result<Vec<usize>> {
        let k = self.config.window as isize;
        let m = token_ids.len() as isize;
        for &id in token_ids {
            if id >= self.config.vocab_size {
                return Err(CoreError::IndexOutOfRange {
                    what: "token",
                    index: id,
                    bound: self.config.vocab_size,
                });
            }
        }
        let mut flat = Vec::with_capacity(token_ids.len() * (2 * self.config.window + 1));
        for t in 0..m {
            for j in (t - k)..=(t + k) {
                flat.push(if j < 0 || j >= m {
                    PAD_ID
                } else {
                    token_ids[j as usize]
                });
            }
        }
        Ok(flat)
    }

    /// Record the forward pass on a tape; returns the m x num_labels logits node.
    pub fn forward_on(&self, tape: &mut Tape, token_ids: &[usize]) -> Result<NodeId> {
        if token_ids.is_empty() {
            return Err(CoreError::usage("forward on empty sentence"));
        }
        let flat = self.window_indices(token_ids)?;
        let gathered = tape.embedding_lookup(&self.store, self.ids.embedding, &flat)?;
        let windows = tape.reshape(
            &self.store,
            gathered,
            &[token_ids.len(), self.config.window_width()],
        )?;
        let pre = tape.matmul(&self.store, windows, self.ids.w1)?;
        let pre = tape.add_bias(&self.store, pre, self.ids.b1)?;
        let hidden = tape.tanh(&self.store, pre)?;
        let logits = tape.matmul(&self.store, hidden, self.ids.w_head)?;
        tape.add_bias(&self.store, logits, self.ids.b_head)
    }

    /// Mean negative log-likelihood of the labels, recorded on the tape.
    pub fn nll_on(&self, tape: &mut Tape, token_ids: &[usize], label_ids: &[usize]) -> Result<NodeId> {
        if token_ids.len() != label_ids.len() {
            return Err(CoreError::usage(format!(
                "{} tokens but {} labels",
                token_ids.len(),
                label_ids.len()
            )));
        }
        let logits = self.forward_on(tape, token_ids)?;
        tape.softmax_cross_entropy(&self.store, logits, label_ids)
    }

    /// Logits as a plain tensor (throwaway tape).
    pub fn forward_logits(&self, token_ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let logits = self.forward_on(&mut tape, token_ids)?;
        Ok(tape.value(logits).clone())
    }

    /// Loss as a plain value (throwaway tape).
    pub fn nll_value(&self, token_ids: &[usize], label_ids: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.nll_on(&mut tape, token_ids, label_ids)?;
        Ok(tape.scalar_value(loss))
    }

    /// Per-token argmax of logits; ties break to the lowest label index.
    pub fn predict(&self, token_ids: &[usize]) -> Result<Vec<usize>> {
        let logits = self.forward_logits(token_ids)?;
        let (m, c) = logits.dims2();
        let mut out = Vec::with_capacity(m);
        for t in 0..m {
            let row = logits.row(t);
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    /// New model with the body carried over bit-identically and a freshly
    /// initialized head of the requested width.
    pub fn replace_head(self, new_num_labels: usize, seed: u64) -> Result<TaggerModel> {
        if new_num_labels < 2 {
            return Err(CoreError::config(format!(
                "num_labels must be >= 2 (got {new_num_labels})"
            )));
        }
        let mut config = self.config.clone();
        config.num_labels = new_num_labels;

        let mut rng = Rng::seed_from(seed);
        let mut store = ParamStore::new();
        let embedding = store.add(EMBEDDING, self.store.value(self.ids.embedding).clone())?;
        let w1 = store.add(W1, self.store.value(self.ids.w1).clone())?;
        let b1 = store.add(B1, self.store.value(self.ids.b1).clone())?;
        let w_head = store.add(
            W_HEAD,
            glorot_matrix(&mut rng, config.hidden_dim, new_num_labels),
        )?;
        let b_head = store.add(B_HEAD, Tensor::zeros(vec![new_num_labels]))?;
        Ok(TaggerModel {
            config,
            store,
            ids: ParamIds {
                embedding,
                w1,
                b1,
                w_head,
                b_head,
            },
        })
    }
}
