//! Binary checkpoint container.
//!
//! Layout, all multi-byte values little-endian:
//!
//! ```text
//! magic        5 bytes  "EWCSQ"
//! byte order   1 byte   'L' (little-endian declaration)
//! version      u32      currently 1
//! config       u32 length + TaggerConfig JSON
//! vocabulary   u32 min_count, u32 count, count x (u32 length + UTF-8)
//! scheme       u8 flat flag, u32 count, count x (u32 length + UTF-8)
//! rng seed     u64
//! tasks        u32 count, count x (u32 length + UTF-8)
//! tensors      u32 count, count x (name, u32 rank, rank x u32 dims,
//!              numel x f64 raw little-endian)
//! snapshots    u32 count, count x (task name, u32 param count,
//!              params x (name, rank, dims, theta* data, fisher data))
//! ```
//!
//! Loads are all-or-nothing: bad magic, an unknown version, truncation or
//! trailing bytes reject the file with no partial state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ewcseq_core::autodiff::Tensor;
use ewcseq_core::corpus::{LabelScheme, Vocabulary};
use ewcseq_core::ewc::FisherSnapshot;
use ewcseq_core::tagger::{TaggerConfig, TaggerModel};

use crate::error::{CliError, Result};

const MAGIC: &[u8; 5] = b"EWCSQ";
const LITTLE_ENDIAN_MARK: u8 = b'L';
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TaggerConfig,
    pub vocab: Vocabulary,
    pub scheme: LabelScheme,
    pub rng_seed: u64,
    pub completed_tasks: Vec<String>,
    /// Named parameter tensors in model order.
    pub tensors: Vec<(String, Tensor)>,
    pub snapshots: Vec<FisherSnapshot>,
}

impl Checkpoint {
    pub fn capture(
        model: &TaggerModel,
        vocab: &Vocabulary,
        scheme: &LabelScheme,
        rng_seed: u64,
        completed_tasks: Vec<String>,
        snapshots: Vec<FisherSnapshot>,
    ) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: model.config().clone(),
            vocab: vocab.clone(),
            scheme: scheme.clone(),
            rng_seed,
            completed_tasks,
            tensors: model
                .store()
                .iter()
                .map(|p| (p.name().to_string(), p.value().clone()))
                .collect(),
            snapshots,
        }
    }

    pub fn restore_model(&self) -> Result<TaggerModel> {
        TaggerModel::from_parameters(self.config.clone(), self.tensors.clone())
            .map_err(|e| CliError::usage(format!("corrupt checkpoint: {e}")))
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CliError::usage("truncated checkpoint"));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CliError::usage("checkpoint contains invalid UTF-8"))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 2 {
            return Err(CliError::usage(format!("checkpoint tensor has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = self.take(numel * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| CliError::usage(format!("checkpoint tensor: {e}")))
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(CliError::usage(format!(
                "checkpoint has {} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u8(LITTLE_ENDIAN_MARK);
    w.u32(ckpt.format_version);

    let config_json = serde_json::to_string(&ckpt.config)
        .map_err(|e| CliError::runtime(format!("serializing config: {e}")))?;
    w.string(&config_json);

    w.u32(ckpt.vocab.min_count() as u32);
    w.u32(ckpt.vocab.len() as u32);
    for t in ckpt.vocab.ordered_tokens() {
        w.string(t);
    }

    w.u8(ckpt.scheme.is_flat() as u8);
    w.u32(ckpt.scheme.len() as u32);
    for l in ckpt.scheme.ordered_labels() {
        w.string(l);
    }

    w.u64(ckpt.rng_seed);
    w.u32(ckpt.completed_tasks.len() as u32);
    for t in &ckpt.completed_tasks {
        w.string(t);
    }

    w.u32(ckpt.tensors.len() as u32);
    for (name, tensor) in &ckpt.tensors {
        w.string(name);
        w.tensor(tensor);
    }

    w.u32(ckpt.snapshots.len() as u32);
    for snap in &ckpt.snapshots {
        w.string(snap.task_name());
        w.u32(snap.theta_star().len() as u32);
        for (name, theta) in snap.theta_star() {
            w.string(name);
            w.tensor(theta);
            w.tensor(&snap.fisher()[name]);
        }
    }

    fs::write(path, &w.buf).map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let mut r = Reader { buf: &buf, pos: 0 };

    if r.take(5)? != MAGIC {
        return Err(CliError::usage(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    if r.u8()? != LITTLE_ENDIAN_MARK {
        return Err(CliError::usage("unsupported checkpoint byte order"));
    }
    let format_version = r.u32()?;
    if format_version != FORMAT_VERSION {
        return Err(CliError::usage(format!(
            "unsupported checkpoint version {format_version} (expected {FORMAT_VERSION})"
        )));
    }

    let config: TaggerConfig = serde_json::from_str(&r.string()?)
        .map_err(|e| CliError::usage(format!("checkpoint config: {e}")))?;

    let min_count = r.u32()? as usize;
    let vocab_len = r.u32()? as usize;
    let mut tokens = Vec::with_capacity(vocab_len.min(1 << 20));
    for _ in 0..vocab_len {
        tokens.push(r.string()?);
    }
    let vocab = Vocabulary::from_ordered_tokens(tokens, min_count)
        .map_err(|e| CliError::usage(format!("checkpoint vocabulary: {e}")))?;

    let flat = r.u8()? != 0;
    let scheme_len = r.u32()? as usize;
    let mut labels = Vec::with_capacity(scheme_len.min(1 << 20));
    for _ in 0..scheme_len {
        labels.push(r.string()?);
    }
    if labels.is_empty() || labels[0] != ewcseq_core::corpus::O_LABEL {
        return Err(CliError::usage("checkpoint scheme must start with the O label"));
    }
    let scheme = LabelScheme::new(labels[1..].to_vec(), flat)
        .map_err(|e| CliError::usage(format!("checkpoint scheme: {e}")))?;

    let rng_seed = r.u64()?;
    let task_count = r.u32()? as usize;
    let mut completed_tasks = Vec::with_capacity(task_count.min(1 << 16));
    for _ in 0..task_count {
        completed_tasks.push(r.string()?);
    }

    let tensor_count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(tensor_count.min(1 << 16));
    for _ in 0..tensor_count {
        let name = r.string()?;
        let tensor = r.tensor()?;
        tensors.push((name, tensor));
    }

    let snapshot_count = r.u32()? as usize;
    let mut snapshots = Vec::with_capacity(snapshot_count.min(1 << 16));
    for _ in 0..snapshot_count {
        let task = r.string()?;
        let param_count = r.u32()? as usize;
        let mut theta_star = BTreeMap::new();
        let mut fisher = BTreeMap::new();
        for _ in 0..param_count {
            let name = r.string()?;
            let theta = r.tensor()?;
            let fish = r.tensor()?;
            theta_star.insert(name.clone(), theta);
            fisher.insert(name, fish);
        }
        snapshots.push(
            FisherSnapshot::from_parts(task, theta_star, fisher)
                .map_err(|e| CliError::usage(format!("checkpoint snapshot: {e}")))?,
        );
    }
    r.done()?;

    Ok(Checkpoint {
        format_version,
        config,
        vocab,
        scheme,
        rng_seed,
        completed_tasks,
        tensors,
        snapshots,
    })
}
