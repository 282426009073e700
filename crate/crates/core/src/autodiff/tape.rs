//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! A [`Tape`] records each primitive applied during a forward pass. Ops read
//! their inputs either from earlier tape nodes or directly from a
//! [`ParamStore`]; [`Tape::backward`] replays the record in reverse,
//! accumulating gradients of a scalar loss into the store's grad slots.
//!
//! Contract: parameter values must not change between recording and the
//! backward pass — the tape reads live parameter values on both sides
//! instead of snapshotting them. The training loop upholds this (forward,
//! backward, then optimizer step). A tape is consumed by exactly one
//! backward pass, after which it is empty and may be reused for a fresh
//! recording.

use crate::autodiff::param::{ParamId, ParamStore};
use crate::autodiff::tensor::Tensor;
use crate::error::{CoreError, Result};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// An operation input: an earlier tape node or a live parameter.
#[derive(Debug, Clone, Copy)]
pub enum Source {
    Node(NodeId),
    Param(ParamId),
}

impl From<NodeId> for Source {
    fn from(id: NodeId) -> Self {
        Source::Node(id)
    }
}

impl From<ParamId> for Source {
    fn from(id: ParamId) -> Self {
        Source::Param(id)
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Raw tensor fed into the graph; gradients stop here.
    Input,
    MatMul {
        a: Source,
        b: Source,
    },
    AddBias {
        x: Source,
        b: Source,
    },
    Tanh {
        x: Source,
    },
    EmbeddingLookup {
        table: Source,
        indices: Vec<usize>,
    },
    Reshape {
        x: Source,
        input_shape: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Source,
        targets: Vec<usize>,
        /// Row softmax cached at forward time.
        probs: Tensor,
    },
    /// sum(coeff * fisher * diff^2) with diff = theta - theta_star cached at
    /// forward time; backward contributes 2 * coeff * fisher * diff.
    QuadPenalty {
        theta: Source,
        fisher: Tensor,
        diff: Tensor,
        coeff: f64,
    },
    AddN {
        xs: Vec<Source>,
    },
    Scale {
        x: Source,
        c: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Linear record of primitive operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a recorded node (loss reads).
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.scalar_value()
    }

    fn source_value<'a>(&'a self, store: &'a ParamStore, src: Source) -> &'a Tensor {
        match src {
            Source::Node(id) => &self.nodes[id.0].value,
            Source::Param(id) => store.value(id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Feed a raw tensor into the graph. Gradients are not tracked past it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    /// Matrix product a[r x k] * b[k x c].
    pub fn matmul(
        &mut self,
        store: &ParamStore,
        a: impl Into<Source>,
        b: impl Into<Source>,
    ) -> Result<NodeId> {
        let (a, b) = (a.into(), b.into());
        let av = self.source_value(store, a);
        let bv = self.source_value(store, b);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(CoreError::dimension(
                "matmul",
                av.shape_string(),
                bv.shape_string(),
            ));
        }
        let (r, k) = (av.shape()[0], av.shape()[1]);
        let c = bv.shape()[1];
        let mut out = vec![0.0; r * c];
        let ad = av.data();
        let bd = bv.data();
        for i in 0..r {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut out[i * c..(i + 1) * c];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &bd[kk * c..(kk + 1) * c];
                for (o, &bkc) in orow.iter_mut().zip(brow) {
                    *o += aik * bkc;
                }
            }
        }
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::MatMul { a, b }))
    }

    /// Row-wise broadcast addition of a length-c bias to an r x c matrix.
    pub fn add_bias(
        &mut self,
        store: &ParamStore,
        x: impl Into<Source>,
        b: impl Into<Source>,
    ) -> Result<NodeId> {
        let (x, b) = (x.into(), b.into());
        let xv = self.source_value(store, x);
        let bv = self.source_value(store, b);
        if xv.rank() != 2 || bv.rank() != 1 || xv.shape()[1] != bv.numel() {
            return Err(CoreError::dimension(
                "add_bias",
                xv.shape_string(),
                bv.shape_string(),
            ));
        }
        let (r, c) = xv.dims2();
        let bd = bv.data();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bias) in row.iter_mut().zip(bd) {
                *o += bias;
            }
        }
        let _ = r;
        Ok(self.push(Tensor::new(xv.shape().to_vec(), out)?, Op::AddBias { x, b }))
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(&mut self, store: &ParamStore, x: impl Into<Source>) -> Result<NodeId> {
        let x = x.into();
        let xv = self.source_value(store, x);
        let out: Vec<f64> = xv.data().iter().map(|&v| v.tanh()).collect();
        Ok(self.push(Tensor::new(xv.shape().to_vec(), out)?, Op::Tanh { x }))
    }

    /// Gather rows of a V x d table; backward scatters into those rows only.
    pub fn embedding_lookup(
        &mut self,
        store: &ParamStore,
        table: impl Into<Source>,
        indices: &[usize],
    ) -> Result<NodeId> {
        let table = table.into();
        let tv = self.source_value(store, table);
        if tv.rank() != 2 {
            return Err(CoreError::dimension(
                "embedding_lookup",
                tv.shape_string(),
                "rank-2 table".to_string(),
            ));
        }
        let (vocab, dim) = tv.dims2();
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &idx in indices {
            if idx >= vocab {
                return Err(CoreError::IndexOutOfRange {
                    what: "embedding",
                    index: idx,
                    bound: vocab,
                });
            }
            out.extend_from_slice(tv.row(idx));
        }
        Ok(self.push(
            Tensor::new(vec![indices.len(), dim], out)?,
            Op::EmbeddingLookup {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Reinterpret the row-major data under a new shape.
    pub fn reshape(
        &mut self,
        store: &ParamStore,
        x: impl Into<Source>,
        shape: &[usize],
    ) -> Result<NodeId> {
        let x = x.into();
        let xv = self.source_value(store, x);
        let input_shape = xv.shape().to_vec();
        let out = Tensor::new(shape.to_vec(), xv.data().to_vec())?;
        Ok(self.push(out, Op::Reshape { x, input_shape }))
    }

    /// Mean over rows of -log softmax(logits_row)[target], stabilized by
    /// row-max subtraction. Scalar output.
    pub fn softmax_cross_entropy(
        &mut self,
        store: &ParamStore,
        logits: impl Into<Source>,
        targets: &[usize],
    ) -> Result<NodeId> {
        let logits = logits.into();
        let lv = self.source_value(store, logits);
        if lv.rank() != 2 {
            return Err(CoreError::dimension(
                "softmax_cross_entropy",
                lv.shape_string(),
                "rank-2 logits".to_string(),
            ));
        }
        let (n, classes) = lv.dims2();
        if n == 0 {
            return Err(CoreError::usage("softmax_cross_entropy on empty logits"));
        }
        if targets.len() != n {
            return Err(CoreError::usage(format!(
                "softmax_cross_entropy: {} logit rows but {} targets",
                n,
                targets.len()
            )));
        }
        let mut probs = vec![0.0; n * classes];
        let mut loss = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target >= classes {
                return Err(CoreError::IndexOutOfRange {
                    what: "target class",
                    index: target,
                    bound: classes,
                });
            }
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let prow = &mut probs[r * classes..(r + 1) * classes];
            let mut denom = 0.0;
            for (p, &l) in prow.iter_mut().zip(row) {
                *p = (l - max).exp();
                denom += *p;
            }
            for p in prow.iter_mut() {
                *p /= denom;
            }
            loss += -(prow[target].ln());
        }
        loss /= n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs: Tensor::new(vec![n, classes], probs)?,
            },
        ))
    }

    /// sum(coeff * fisher * (theta - theta_star)^2), scalar. Gradient w.r.t.
    /// theta is 2 * coeff * fisher * (theta - theta_star).
    pub fn quad_penalty(
        &mut self,
        store: &ParamStore,
        theta: impl Into<Source>,
        fisher: &Tensor,
        theta_star: &Tensor,
        coeff: f64,
    ) -> Result<NodeId> {
        let theta = theta.into();
        let tv = self.source_value(store, theta);
        if tv.shape() != fisher.shape() || tv.shape() != theta_star.shape() {
            return Err(CoreError::dimension(
                "quad_penalty",
                tv.shape_string(),
                format!("fisher {} / anchor {}", fisher.shape_string(), theta_star.shape_string()),
            ));
        }
        let mut diff = vec![0.0; tv.numel()];
        let mut total = 0.0;
        for (i, d) in diff.iter_mut().enumerate() {
            *d = tv.data()[i] - theta_star.data()[i];
            total += coeff * fisher.data()[i] * *d * *d;
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::QuadPenalty {
                theta,
                fisher: fisher.clone(),
                diff: Tensor::new(tv.shape().to_vec(), diff)?,
                coeff,
            },
        ))
    }

    /// Elementwise sum of same-shaped inputs.
    pub fn add_n(&mut self, store: &ParamStore, xs: &[Source]) -> Result<NodeId> {
        let Some(&first) = xs.first() else {
            return Err(CoreError::usage("add_n with no inputs"));
        };
        let shape = self.source_value(store, first).shape().to_vec();
        let mut out = vec![0.0; shape.iter().product()];
        for &src in xs {
            let v = self.source_value(store, src);
            if v.shape() != shape.as_slice() {
                return Err(CoreError::dimension(
                    "add_n",
                    format!("{:?}", shape),
                    v.shape_string(),
                ));
            }
            for (o, &x) in out.iter_mut().zip(v.data()) {
                *o += x;
            }
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::AddN { xs: xs.to_vec() }))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, store: &ParamStore, x: impl Into<Source>, c: f64) -> Result<NodeId> {
        let x = x.into();
        let xv = self.source_value(store, x);
        let out: Vec<f64> = xv.data().iter().map(|&v| v * c).collect();
        Ok(self.push(Tensor::new(xv.shape().to_vec(), out)?, Op::Scale { x, c }))
    }

    /// Reverse pass from a scalar loss node. Gradients of every reachable
    /// parameter are ACCUMULATED onto the store's existing grad contents;
    /// the tape is cleared afterwards.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(CoreError::usage(format!(
                "backward on unrecorded node {} (tape has {} nodes)",
                loss.0,
                self.nodes.len()
            )));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(CoreError::usage(format!(
                "backward requires a scalar loss node, got shape {}",
                self.nodes[loss.0].value.shape_string()
            )));
        }

        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..nodes.len()).rev() {
            let Some(go) = grads[i].take() else { continue };
            match &nodes[i].op {
                Op::Input => {}
                Op::MatMul { a, b } => {
                    let av = source_value_of(&nodes, store, *a).clone();
                    let bv = source_value_of(&nodes, store, *b).clone();
                    let (r, k) = (av.shape()[0], av.shape()[1]);
                    let c = bv.shape()[1];
                    let god = go.data();
                    {
                        let ga = grad_slice(&mut grads, store, &nodes, *a);
                        for i2 in 0..r {
                            let gorow = &god[i2 * c..(i2 + 1) * c];
                            let garow = &mut ga[i2 * k..(i2 + 1) * k];
                            for (kk, g) in garow.iter_mut().enumerate() {
                                let brow = bv.row(kk);
                                *g += gorow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    {
                        let gb = grad_slice(&mut grads, store, &nodes, *b);
                        for i2 in 0..r {
                            let arow = av.row(i2);
                            let gorow = &god[i2 * c..(i2 + 1) * c];
                            for (kk, &aik) in arow.iter().enumerate() {
                                let gbrow = &mut gb[kk * c..(kk + 1) * c];
                                for (g, &gout) in gbrow.iter_mut().zip(gorow) {
                                    *g += aik * gout;
                                }
                            }
                        }
                    }
                }
                Op::AddBias { x, b } => {
                    let (_, c) = nodes[i].value.dims2();
                    {
                        let gx = grad_slice(&mut grads, store, &nodes, *x);
                        for (g, &gout) in gx.iter_mut().zip(go.data()) {
                            *g += gout;
                        }
                    }
                    {
                        let gb = grad_slice(&mut grads, store, &nodes, *b);
                        for row in go.data().chunks(c) {
                            for (g, &gout) in gb.iter_mut().zip(row) {
                                *g += gout;
                            }
                        }
                    }
                }
                Op::Tanh { x } => {
                    let y = nodes[i].value.data().to_vec();
                    let gx = grad_slice(&mut grads, store, &nodes, *x);
                    for ((g, &gout), &yv) in gx.iter_mut().zip(go.data()).zip(&y) {
                        *g += gout * (1.0 - yv * yv);
                    }
                }
                Op::EmbeddingLookup { table, indices } => {
                    let dim = nodes[i].value.dims2().1;
                    let indices = indices.clone();
                    let gt = grad_slice(&mut grads, store, &nodes, *table);
                    for (r2, &idx) in indices.iter().enumerate() {
                        let gorow = &go.data()[r2 * dim..(r2 + 1) * dim];
                        let trow = &mut gt[idx * dim..(idx + 1) * dim];
                        for (g, &gout) in trow.iter_mut().zip(gorow) {
                            *g += gout;
                        }
                    }
                }
                Op::Reshape { x, input_shape } => {
                    let _ = input_shape;
                    let gx = grad_slice(&mut grads, store, &nodes, *x);
                    for (g, &gout) in gx.iter_mut().zip(go.data()) {
                        *g += gout;
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let gscalar = go.scalar_value();
                    let (n, classes) = probs.dims2();
                    let probs = probs.clone();
                    let targets = targets.clone();
                    let gl = grad_slice(&mut grads, store, &nodes, *logits);
                    let inv_n = 1.0 / n as f64;
                    for (r2, &t) in targets.iter().enumerate() {
                        let prow = probs.row(r2);
                        let grow = &mut gl[r2 * classes..(r2 + 1) * classes];
                        for (c2, (g, &p)) in grow.iter_mut().zip(prow).enumerate() {
                            let onehot = if c2 == t { 1.0 } else { 0.0 };
                            *g += gscalar * (p - onehot) * inv_n;
                        }
                    }
                }
                Op::QuadPenalty {
                    theta,
                    fisher,
                    diff,
                    coeff,
                } => {
                    let gscalar = go.scalar_value();
                    let fisher = fisher.clone();
                    let diff = diff.clone();
                    let coeff = *coeff;
                    let gt = grad_slice(&mut grads, store, &nodes, *theta);
                    for ((g, &f), &d) in gt.iter_mut().zip(fisher.data()).zip(diff.data()) {
                        *g += gscalar * 2.0 * coeff * f * d;
                    }
                }
                Op::AddN { xs } => {
                    for &src in &xs.clone() {
                        let gx = grad_slice(&mut grads, store, &nodes, src);
                        for (g, &gout) in gx.iter_mut().zip(go.data()) {
                            *g += gout;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    let gx = grad_slice(&mut grads, store, &nodes, *x);
                    for (g, &gout) in gx.iter_mut().zip(go.data()) {
                        *g += gout * c;
                    }
                }
            }
        }
        Ok(())
    }
}

fn source_value_of<'a>(nodes: &'a [Node], store: &'a ParamStore, src: Source) -> &'a Tensor {
    match src {
        Source::Node(id) => &nodes[id.0].value,
        Source::Param(id) => store.value(id),
    }
}

/// Mutable gradient buffer for a source, allocating node grads on first use.
fn grad_slice<'a>(
    grads: &'a mut [Option<Tensor>],
    store: &'a mut ParamStore,
    nodes: &[Node],
    src: Source,
) -> &'a mut [f64] {
    match src {
        Source::Node(id) => {
            if grads[id.0].is_none() {
                grads[id.0] = Some(Tensor::zeros(nodes[id.0].value.shape().to_vec()));
            }
            grads[id.0].as_mut().unwrap().data_mut()
        }
        Source::Param(id) => store.grad_mut(id).data_mut(),
    }
}
