//! Reverse-mode autodiff tape.
//!
//! Ops append nodes to a [`Graph`]; node ids are already in topological order,
//! so the backward pass is a single reverse sweep with gradient accumulation.
//! Saved activations live in the op payloads and are dropped with the graph.

use std::cell::RefCell;

use rayon::prelude::*;

use super::data::{matmul, matmul_nt, matmul_tn};
use super::{Result, Scalar, TensorData, TensorError};

pub struct Graph<E: Scalar> {
    nodes: RefCell<Vec<Node<E>>>,
}

struct Node<E: Scalar> {
    value: TensorData<E>,
    requires_grad: bool,
    op: Op<E>,
}

enum Op<E: Scalar> {
    Leaf,
    Add(usize, usize),
    AddBias { x: usize, b: usize },
    Mul(usize, usize),
    Scale { x: usize, c: E },
    /// Broadcast-add a constant whose shape matches the trailing axes of `x`.
    AddMask { x: usize, mask: TensorData<E> },
    /// Multiply each last-axis row of `x` by one scalar from `mask`.
    MulRowMask { x: usize, mask: TensorData<E> },
    Matmul { a: usize, b: usize },
    Bmm { a: usize, b: usize, transpose_b: bool },
    SplitHeads { x: usize, heads: usize },
    MergeHeads { x: usize, heads: usize },
    Reshape { x: usize },
    SliceAxis { x: usize, axis: usize, start: usize },
    StackTime { xs: Vec<usize> },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Relu { x: usize },
    Softmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<E>, inv_std: Vec<E> },
    BatchNorm { x: usize, gamma: usize, beta: usize, mean: Vec<E>, inv_std: Vec<E>, batch_stats: bool },
    Dropout { x: usize, mask: TensorData<E> },
    EmbeddingLookup { table: usize, ids: Vec<u32> },
    SumAll { x: usize },
    MeanAll { x: usize },
    SumSquares { x: usize },
    SparseCrossEntropy { logits: usize, targets: Vec<u32>, probs: TensorData<E> },
}

/// Handle to a node in a [`Graph`]. Cheap to clone.
#[derive(Clone)]
pub struct Tensor<'g, E: Scalar> {
    graph: &'g Graph<E>,
    id: usize,
    shape: Vec<usize>,
    requires_grad: bool,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, value: TensorData<E>, requires_grad: bool, op: Op<E>) -> (usize, Vec<usize>) {
        let shape = value.shape().to_vec();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, op });
        (nodes.len() - 1, shape)
    }

    fn tensor(&self, value: TensorData<E>, requires_grad: bool, op: Op<E>) -> Tensor<'_, E> {
        let (id, shape) = self.push(value, requires_grad, op);
        Tensor { graph: self, id, shape, requires_grad }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: TensorData<E>) -> Tensor<'_, E> {
        self.tensor(value, false, Op::Leaf)
    }

    /// Differentiable leaf (a model parameter or input under test).
    pub fn leaf(&self, value: TensorData<E>, requires_grad: bool) -> Tensor<'_, E> {
        self.tensor(value, requires_grad, Op::Leaf)
    }

    fn value_of(&self, id: usize) -> TensorData<E> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Stack per-timestep tensors of shape `(b, u)` into `(b, len, u)`.
    pub fn stack_time<'g>(&'g self, steps: &[Tensor<'g, E>]) -> Result<Tensor<'g, E>> {
        let first = steps.first().ok_or_else(|| shape_err("stack_time", "empty input".into()))?;
        if first.shape.len() != 2 {
            return Err(shape_err("stack_time", format!("expected rank-2 steps, got {:?}", first.shape)));
        }
        let (b, u) = (first.shape[0], first.shape[1]);
        let len = steps.len();
        let mut out = vec![E::zero(); b * len * u];
        let mut requires_grad = false;
        let mut ids = Vec::with_capacity(len);
        for (t, s) in steps.iter().enumerate() {
            if s.shape != first.shape {
                return Err(shape_err("stack_time", format!("step {t} shape {:?} != {:?}", s.shape, first.shape)));
            }
            let v = self.value_of(s.id);
            for row in 0..b {
                let src = &v.values()[row * u..(row + 1) * u];
                let dst = &mut out[(row * len + t) * u..(row * len + t) * u + u];
                dst.copy_from_slice(src);
            }
            requires_grad |= s.requires_grad;
            ids.push(s.id);
        }
        Ok(self.tensor(TensorData::new(vec![b, len, u], out), requires_grad, Op::StackTime { xs: ids }))
    }

    /// Gather rows of `table` by index; gradients scatter-add back.
    pub fn embedding_lookup<'g>(&'g self, table: &Tensor<'g, E>, ids: &[u32]) -> Result<Tensor<'g, E>> {
        if table.shape.len() != 2 {
            return Err(shape_err("embedding_lookup", format!("table must be rank 2, got {:?}", table.shape)));
        }
        let (rows, dim) = (table.shape[0], table.shape[1]);
        let tv = self.value_of(table.id);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let id = id as usize;
            if id >= rows {
                return Err(shape_err("embedding_lookup", format!("index {id} out of {rows} rows")));
            }
            out.extend_from_slice(&tv.values()[id * dim..(id + 1) * dim]);
        }
        Ok(self.tensor(
            TensorData::new(vec![ids.len(), dim], out),
            table.requires_grad,
            Op::EmbeddingLookup { table: table.id, ids: ids.to_vec() },
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    /// Fused log-softmax path; `logits` has shape `(batch, classes)`.
    pub fn sparse_cross_entropy<'g>(&'g self, logits: &Tensor<'g, E>, targets: &[u32]) -> Result<Tensor<'g, E>> {
        if logits.shape.len() != 2 || logits.shape[0] != targets.len() {
            return Err(shape_err(
                "sparse_cross_entropy",
                format!("logits {:?} vs {} targets", logits.shape, targets.len()),
            ));
        }
        let (batch, classes) = (logits.shape[0], logits.shape[1]);
        let lv = self.value_of(logits.id);
        if !lv.is_finite() {
            return Err(TensorError::NonFinite("sparse_cross_entropy"));
        }
        let mut probs = vec![E::zero(); batch * classes];
        let mut total = E::zero();
        for (row, &target) in targets.iter().enumerate() {
            let target = target as usize;
            if target >= classes {
                return Err(TensorError::BadTarget { target, classes });
            }
            let x = &lv.values()[row * classes..(row + 1) * classes];
            let max = x.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut denom = E::zero();
            for &v in x {
                denom += (v - max).exp();
            }
            let log_denom = denom.ln();
            for (j, &v) in x.iter().enumerate() {
                probs[row * classes + j] = (v - max - log_denom).exp();
            }
            total += log_denom - (x[target] - max);
        }
        let loss = total / E::from_f64(batch as f64);
        Ok(self.tensor(
            TensorData::scalar(loss),
            logits.requires_grad,
            Op::SparseCrossEntropy {
                logits: logits.id,
                targets: targets.to_vec(),
                probs: TensorData::new(vec![batch, classes], probs),
            },
        ))
    }

    /// Batch normalization over all leading axes, per last-axis feature.
    ///
    /// With `batch_stats` the current batch statistics are used (training);
    /// otherwise the supplied running statistics are. Returns the batch
    /// mean/variance so the caller can fold them into its running estimates.
    pub fn batch_norm<'g>(
        &'g self,
        x: &Tensor<'g, E>,
        gamma: &Tensor<'g, E>,
        beta: &Tensor<'g, E>,
        running_mean: &[E],
        running_var: &[E],
        eps: f64,
        batch_stats: bool,
    ) -> Result<(Tensor<'g, E>, Vec<E>, Vec<E>)> {
        let features = x.shape.last().copied().unwrap_or(0);
        if gamma.shape != [features] || beta.shape != [features] {
            return Err(shape_err("batch_norm", format!("gamma/beta must be [{features}]")));
        }
        if running_mean.len() != features || running_var.len() != features {
            return Err(shape_err("batch_norm", "running stats length mismatch".into()));
        }
        let xv = self.value_of(x.id);
        let rows = xv.numel() / features;
        let (mean, var) = if batch_stats {
            let mut mean = vec![E::zero(); features];
            let mut var = vec![E::zero(); features];
            for r in 0..rows {
                for (j, m) in mean.iter_mut().enumerate() {
                    *m += xv.values()[r * features + j];
                }
            }
            let n = E::from_f64(rows as f64);
            mean.iter_mut().for_each(|m| *m /= n);
            for r in 0..rows {
                for (j, v) in var.iter_mut().enumerate() {
                    let d = xv.values()[r * features + j] - mean[j];
                    *v += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let epsn = E::from_f64(eps);
        let inv_std: Vec<E> = var.iter().map(|&v| (v + epsn).sqrt().recip()).collect();
        let gv = self.value_of(gamma.id);
        let bv = self.value_of(beta.id);
        let mut out = vec![E::zero(); xv.numel()];
        for r in 0..rows {
            for j in 0..features {
                let xhat = (xv.values()[r * features + j] - mean[j]) * inv_std[j];
                out[r * features + j] = xhat * gv.values()[j] + bv.values()[j];
            }
        }
        let requires_grad = x.requires_grad || gamma.requires_grad || beta.requires_grad;
        let t = self.tensor(
            TensorData::new(x.shape.clone(), out),
            requires_grad,
            Op::BatchNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                mean: mean.clone(),
                inv_std,
                batch_stats,
            },
        );
        Ok((t, mean, var))
    }

    /// Reverse sweep from a scalar loss. Consumes nothing; the graph can keep
    /// serving value reads, but typical callers drop it right after.
    pub fn backward(&self, loss: &Tensor<'_, E>) -> Result<Gradients<E>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.numel()));
        }
        if !loss_node.requires_grad {
            return Err(TensorError::DisconnectedGraph);
        }
        let mut grads: Vec<Option<TensorData<E>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(TensorData::scalar(E::one()));

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].clone() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut send = |target: usize, delta: TensorData<E>| {
                if !nodes[target].requires_grad {
                    return;
                }
                grads[target] = Some(match grads[target].take() {
                    Some(existing) => existing.zip(&delta, |a, b| a + b),
                    None => delta,
                });
            };
            backward_step(&nodes, id, &grad, &mut send);
        }
        Ok(Gradients { grads })
    }
}

/// Propagate `grad` of node `id` to its parents via `send`.
fn backward_step<E: Scalar>(
    nodes: &[Node<E>],
    id: usize,
    grad: &TensorData<E>,
    send: &mut impl FnMut(usize, TensorData<E>),
) {
    let node = &nodes[id];
    let g = grad.values();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            send(*a, grad.clone());
            send(*b, grad.clone());
        }
        Op::AddBias { x, b } => {
            send(*x, grad.clone());
            let n = nodes[*b].value.numel();
            let rows = grad.numel() / n;
            let mut db = vec![E::zero(); n];
            for r in 0..rows {
                for (j, d) in db.iter_mut().enumerate() {
                    *d += g[r * n + j];
                }
            }
            send(*b, TensorData::new(vec![n], db));
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.clone();
            let bv = nodes[*b].value.clone();
            send(*a, grad.zip(&bv, |g, b| g * b));
            send(*b, grad.zip(&av, |g, a| g * a));
        }
        Op::Scale { x, c } => {
            let c = *c;
            send(*x, grad.map(|g| g * c));
        }
        Op::AddMask { x, .. } => send(*x, grad.clone()),
        Op::MulRowMask { x, mask } => {
            let n = nodes[*x].value.last_dim();
            let mut dx = g.to_vec();
            for (r, chunk) in dx.chunks_mut(n).enumerate() {
                let m = mask.values()[r];
                chunk.iter_mut().for_each(|v| *v *= m);
            }
            send(*x, TensorData::new(grad.shape().to_vec(), dx));
        }
        Op::Matmul { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            send(*a, TensorData::new(vec![m, k], matmul_nt(g, bv.values(), m, n, k)));
            send(*b, TensorData::new(vec![k, n], matmul_tn(av.values(), g, m, k, n)));
        }
        Op::Bmm { a, b, transpose_b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = grad.shape()[2];
            let mut da = vec![E::zero(); av.numel()];
            let mut db = vec![E::zero(); bv.numel()];
            for bi in 0..batch {
                let gi = &g[bi * m * n..(bi + 1) * m * n];
                let ai = &av.values()[bi * m * k..(bi + 1) * m * k];
                let bvi = &bv.values()[bi * bv.shape()[1] * bv.shape()[2]..(bi + 1) * bv.shape()[1] * bv.shape()[2]];
                let dai = &mut da[bi * m * k..(bi + 1) * m * k];
                let dbi = &mut db[bi * bv.shape()[1] * bv.shape()[2]..(bi + 1) * bv.shape()[1] * bv.shape()[2]];
                if *transpose_b {
                    // out = a · bᵀ with b: (n, k) — da = g · b, db = gᵀ · a
                    dai.copy_from_slice(&matmul(gi, bvi, m, n, k));
                    dbi.copy_from_slice(&matmul_tn(gi, ai, m, n, k));
                } else {
                    dai.copy_from_slice(&matmul_nt(gi, bvi, m, n, k));
                    dbi.copy_from_slice(&matmul_tn(ai, gi, m, k, n));
                }
            }
            send(*a, TensorData::new(av.shape().to_vec(), da));
            send(*b, TensorData::new(bv.shape().to_vec(), db));
        }
        Op::SplitHeads { x, heads } => {
            let xs = nodes[*x].value.shape();
            let (b, l, hd_all) = (xs[0], xs[1], xs[2]);
            let hd = hd_all / heads;
            let mut dx = vec![E::zero(); b * l * hd_all];
            for bi in 0..b {
                for h in 0..*heads {
                    for li in 0..l {
                        let src = &g[(((bi * heads + h) * l) + li) * hd..(((bi * heads + h) * l) + li) * hd + hd];
                        let dst = &mut dx[(bi * l + li) * hd_all + h * hd..(bi * l + li) * hd_all + h * hd + hd];
                        dst.copy_from_slice(src);
                    }
                }
            }
            send(*x, TensorData::new(xs.to_vec(), dx));
        }
        Op::MergeHeads { x, heads } => {
            let xs = nodes[*x].value.shape();
            let (bh, l, hd) = (xs[0], xs[1], xs[2]);
            let b = bh / heads;
            let hd_all = hd * heads;
            let mut dx = vec![E::zero(); bh * l * hd];
            for bi in 0..b {
                for h in 0..*heads {
                    for li in 0..l {
                        let src = &g[(bi * l + li) * hd_all + h * hd..(bi * l + li) * hd_all + h * hd + hd];
                        let dst = &mut dx[(((bi * heads + h) * l) + li) * hd..(((bi * heads + h) * l) + li) * hd + hd];
                        dst.copy_from_slice(src);
                    }
                }
            }
            send(*x, TensorData::new(xs.to_vec(), dx));
        }
        Op::Reshape { x } => {
            send(*x, grad.reshaped(nodes[*x].value.shape().to_vec()));
        }
        Op::SliceAxis { x, axis, start } => {
            let xs = nodes[*x].value.shape();
            let outer: usize = xs[..*axis].iter().product();
            let mid = xs[*axis];
            let inner: usize = xs[*axis + 1..].iter().product();
            let len = grad.shape()[*axis];
            let mut dx = vec![E::zero(); nodes[*x].value.numel()];
            for o in 0..outer {
                for s in 0..len {
                    let src = &g[(o * len + s) * inner..(o * len + s + 1) * inner];
                    let at = (o * mid + start + s) * inner;
                    dx[at..at + inner].copy_from_slice(src);
                }
            }
            send(*x, TensorData::new(xs.to_vec(), dx));
        }
        Op::StackTime { xs } => {
            let len = xs.len();
            let shape = nodes[xs[0]].value.shape().to_vec();
            let (b, u) = (shape[0], shape[1]);
            for (t, &xid) in xs.iter().enumerate() {
                let mut dx = vec![E::zero(); b * u];
                for row in 0..b {
                    let src = &g[(row * len + t) * u..(row * len + t) * u + u];
                    dx[row * u..(row + 1) * u].copy_from_slice(src);
                }
                send(xid, TensorData::new(shape.clone(), dx));
            }
        }
        Op::Sigmoid { x } => {
            let y = nodes[id].value.clone();
            send(*x, grad.zip(&y, |g, y| g * y * (E::one() - y)));
        }
        Op::Tanh { x } => {
            let y = nodes[id].value.clone();
            send(*x, grad.zip(&y, |g, y| g * (E::one() - y * y)));
        }
        Op::Relu { x } => {
            let y = nodes[id].value.clone();
            send(*x, grad.zip(&y, |g, y| if y > E::zero() { g } else { E::zero() }));
        }
        Op::Softmax { x } => {
            let y = &nodes[id].value;
            let n = y.last_dim();
            let rows = y.numel() / n;
            let mut dx = vec![E::zero(); y.numel()];
            for r in 0..rows {
                let yr = &y.values()[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let dot: E = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for j in 0..n {
                    dx[r * n + j] = yr[j] * (gr[j] - dot);
                }
            }
            send(*x, TensorData::new(y.shape().to_vec(), dx));
        }
        Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
            let xv = &nodes[*x].value;
            let gv = &nodes[*gamma].value;
            let n = xv.last_dim();
            let rows = xv.numel() / n;
            let nf = E::from_f64(n as f64);
            let mut dx = vec![E::zero(); xv.numel()];
            let mut dgamma = vec![E::zero(); n];
            let mut dbeta = vec![E::zero(); n];
            for r in 0..rows {
                let xr = &xv.values()[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let (mu, is) = (mean[r], inv_std[r]);
                let mut sum_dxhat = E::zero();
                let mut sum_dxhat_xhat = E::zero();
                for j in 0..n {
                    let xhat = (xr[j] - mu) * is;
                    let dxhat = gr[j] * gv.values()[j];
                    dgamma[j] += gr[j] * xhat;
                    dbeta[j] += gr[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                for j in 0..n {
                    let xhat = (xr[j] - mu) * is;
                    let dxhat = gr[j] * gv.values()[j];
                    dx[r * n + j] = is * (dxhat - sum_dxhat / nf - xhat * (sum_dxhat_xhat / nf));
                }
            }
            send(*x, TensorData::new(xv.shape().to_vec(), dx));
            send(*gamma, TensorData::new(vec![n], dgamma));
            send(*beta, TensorData::new(vec![n], dbeta));
        }
        Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
            let xv = &nodes[*x].value;
            let gv = &nodes[*gamma].value;
            let n = xv.last_dim();
            let rows = xv.numel() / n;
            let rf = E::from_f64(rows as f64);
            let mut dgamma = vec![E::zero(); n];
            let mut dbeta = vec![E::zero(); n];
            let mut sum_dxhat = vec![E::zero(); n];
            let mut sum_dxhat_xhat = vec![E::zero(); n];
            for r in 0..rows {
                for j in 0..n {
                    let xhat = (xv.values()[r * n + j] - mean[j]) * inv_std[j];
                    let gj = g[r * n + j];
                    dgamma[j] += gj * xhat;
                    dbeta[j] += gj;
                    sum_dxhat[j] += gj * gv.values()[j];
                    sum_dxhat_xhat[j] += gj * gv.values()[j] * xhat;
                }
            }
            let mut dx = vec![E::zero(); xv.numel()];
            for r in 0..rows {
                for j in 0..n {
                    let dxhat = g[r * n + j] * gv.values()[j];
                    dx[r * n + j] = if *batch_stats {
                        let xhat = (xv.values()[r * n + j] - mean[j]) * inv_std[j];
                        inv_std[j] * (dxhat - sum_dxhat[j] / rf - xhat * (sum_dxhat_xhat[j] / rf))
                    } else {
                        // Running statistics are constants w.r.t. the input.
                        dxhat * inv_std[j]
                    };
                }
            }
            send(*x, TensorData::new(xv.shape().to_vec(), dx));
            send(*gamma, TensorData::new(vec![n], dgamma));
            send(*beta, TensorData::new(vec![n], dbeta));
        }
        Op::Dropout { x, mask } => {
            send(*x, grad.zip(mask, |g, m| g * m));
        }
        Op::EmbeddingLookup { table, ids } => {
            let tv = &nodes[*table].value;
            let dim = tv.shape()[1];
            let mut dt = vec![E::zero(); tv.numel()];
            for (i, &id) in ids.iter().enumerate() {
                let dst = &mut dt[id as usize * dim..(id as usize + 1) * dim];
                for (d, &gv) in dst.iter_mut().zip(&g[i * dim..(i + 1) * dim]) {
                    *d += gv;
                }
            }
            send(*table, TensorData::new(tv.shape().to_vec(), dt));
        }
        Op::SumAll { x } => {
            let s = grad.scalar_value();
            let xv = &nodes[*x].value;
            send(*x, TensorData::new(xv.shape().to_vec(), vec![s; xv.numel()]));
        }
        Op::MeanAll { x } => {
            let xv = &nodes[*x].value;
            let s = grad.scalar_value() / E::from_f64(xv.numel() as f64);
            send(*x, TensorData::new(xv.shape().to_vec(), vec![s; xv.numel()]));
        }
        Op::SumSquares { x } => {
            let s = grad.scalar_value();
            let two = E::from_f64(2.0);
            send(*x, nodes[*x].value.map(|v| two * s * v));
        }
        Op::SparseCrossEntropy { logits, targets, probs } => {
            let scale = grad.scalar_value() / E::from_f64(targets.len() as f64);
            let classes = probs.last_dim();
            let mut dl = probs.values().to_vec();
            for (row, &t) in targets.iter().enumerate() {
                dl[row * classes + t as usize] -= E::one();
            }
            dl.iter_mut().for_each(|v| *v *= scale);
            send(*logits, TensorData::new(probs.shape().to_vec(), dl));
        }
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<E: Scalar> {
    grads: Vec<Option<TensorData<E>>>,
}

impl<E: Scalar> Gradients<E> {
    /// Gradient of the loss w.r.t. `t`, if `t` required one and was reached.
    pub fn get(&self, t: &Tensor<'_, E>) -> Option<&TensorData<E>> {
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }
}

impl<'g, E: Scalar> Tensor<'g, E> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Materialized value of this node.
    pub fn value(&self) -> TensorData<E> {
        self.graph.value_of(self.id)
    }

    fn unary(&self, value: TensorData<E>, op: Op<E>) -> Tensor<'g, E> {
        self.graph.tensor(value, self.requires_grad, op)
    }

    pub fn add(&self, other: &Tensor<'g, E>) -> Result<Tensor<'g, E>> {
        if self.shape != other.shape {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let v = self.value().zip(&other.value(), |a, b| a + b);
        Ok(self
            .graph
            .tensor(v, self.requires_grad || other.requires_grad, Op::Add(self.id, other.id)))
    }

    /// Broadcast-add a rank-1 bias over the last axis.
    pub fn add_bias(&self, bias: &Tensor<'g, E>) -> Result<Tensor<'g, E>> {
        let n = self.shape.last().copied().unwrap_or(0);
        if bias.shape != [n] {
            return Err(shape_err("add_bias", format!("bias {:?} for input {:?}", bias.shape, self.shape)));
        }
        let xv = self.value();
        let bv = bias.value();
        let mut out = xv.values().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(bv.values()) {
                *o += b;
            }
        }
        Ok(self.graph.tensor(
            TensorData::new(self.shape.clone(), out),
            self.requires_grad || bias.requires_grad,
            Op::AddBias { x: self.id, b: bias.id },
        ))
    }

    pub fn mul(&self, other: &Tensor<'g, E>) -> Result<Tensor<'g, E>> {
        if self.shape != other.shape {
            return Err(shape_err("mul", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let v = self.value().zip(&other.value(), |a, b| a * b);
        Ok(self
            .graph
            .tensor(v, self.requires_grad || other.requires_grad, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: E) -> Tensor<'g, E> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale { x: self.id, c })
    }

    /// Add a constant tensor broadcast over leading axes (positional
    /// encodings, causal masks). `mask.shape` must equal the trailing axes.
    pub fn add_mask(&self, mask: &TensorData<E>) -> Result<Tensor<'g, E>> {
        let k = mask.shape().len();
        if self.shape.len() < k || self.shape[self.shape.len() - k..] != *mask.shape() {
            return Err(shape_err("add_mask", format!("mask {:?} for input {:?}", mask.shape(), self.shape)));
        }
        let xv = self.value();
        let mut out = xv.values().to_vec();
        let mn = mask.numel();
        for chunk in out.chunks_mut(mn) {
            for (o, &m) in chunk.iter_mut().zip(mask.values()) {
                *o += m;
            }
        }
        Ok(self.unary(
            TensorData::new(self.shape.clone(), out),
            Op::AddMask { x: self.id, mask: mask.clone() },
        ))
    }

    /// Multiply each last-axis row by one scalar from `mask`
    /// (`mask.numel() == numel / last_dim`). Used to zero padded positions.
    pub fn mul_rowmask(&self, mask: &TensorData<E>) -> Result<Tensor<'g, E>> {
        let n = self.shape.last().copied().unwrap_or(0);
        let rows = self.value().numel() / n.max(1);
        if mask.numel() != rows {
            return Err(shape_err("mul_rowmask", format!("{} mask entries for {rows} rows", mask.numel())));
        }
        let xv = self.value();
        let mut out = xv.values().to_vec();
        for (r, chunk) in out.chunks_mut(n).enumerate() {
            let m = mask.values()[r];
            chunk.iter_mut().for_each(|v| *v *= m);
        }
        Ok(self.unary(
            TensorData::new(self.shape.clone(), out),
            Op::MulRowMask { x: self.id, mask: mask.clone() },
        ))
    }

    /// `(m, k) · (k, n)`. Callers flatten leading axes themselves.
    pub fn matmul(&self, other: &Tensor<'g, E>) -> Result<Tensor<'g, E>> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", self.shape, other.shape)));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let out = matmul(self.value().values(), other.value().values(), m, k, n);
        Ok(self.graph.tensor(
            TensorData::new(vec![m, n], out),
            self.requires_grad || other.requires_grad,
            Op::Matmul { a: self.id, b: other.id },
        ))
    }

    /// Batched `(b, m, k) · (b, k, n)`, or `(b, m, k) · (b, n, k)ᵀ` when
    /// `transpose_b` — the attention score / context products.
    pub fn bmm(&self, other: &Tensor<'g, E>, transpose_b: bool) -> Result<Tensor<'g, E>> {
        if self.shape.len() != 3 || other.shape.len() != 3 || self.shape[0] != other.shape[0] {
            return Err(shape_err("bmm", format!("{:?} x {:?}", self.shape, other.shape)));
        }
        let (batch, m, k) = (self.shape[0], self.shape[1], self.shape[2]);
        let n = if transpose_b { other.shape[1] } else { other.shape[2] };
        let inner_ok = if transpose_b { other.shape[2] == k } else { other.shape[1] == k };
        if !inner_ok {
            return Err(shape_err("bmm", format!("{:?} x {:?} (transpose_b={transpose_b})", self.shape, other.shape)));
        }
        let av = self.value();
        let bv = other.value();
        let stride = other.shape[1] * other.shape[2];
        let mut out = vec![E::zero(); batch * m * n];
        let work = |bi: usize, chunk: &mut [E]| {
            let ai = &av.values()[bi * m * k..(bi + 1) * m * k];
            let bvi = &bv.values()[bi * stride..(bi + 1) * stride];
            if transpose_b {
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = E::zero();
                        for kk in 0..k {
                            acc += ai[i * k + kk] * bvi[j * k + kk];
                        }
                        chunk[i * n + j] = acc;
                    }
                }
            } else {
                chunk.copy_from_slice(&matmul(ai, bvi, m, k, n));
            }
        };
        if batch * m * k * n >= (1 << 19) && batch > 1 {
            out.par_chunks_mut(m * n).enumerate().for_each(|(bi, c)| work(bi, c));
        } else {
            for (bi, c) in out.chunks_mut(m * n).enumerate() {
                work(bi, c);
            }
        }
        Ok(self.graph.tensor(
            TensorData::new(vec![batch, m, n], out),
            self.requires_grad || other.requires_grad,
            Op::Bmm { a: self.id, b: other.id, transpose_b },
        ))
    }

    /// `(b, l, h·d) -> (b·h, l, d)`.
    pub fn split_heads(&self, heads: usize) -> Result<Tensor<'g, E>> {
        if self.shape.len() != 3 || self.shape[2] % heads != 0 {
            return Err(shape_err("split_heads", format!("{:?} into {heads} heads", self.shape)));
        }
        let (b, l, hd_all) = (self.shape[0], self.shape[1], self.shape[2]);
        let hd = hd_all / heads;
        let xv = self.value();
        let mut out = vec![E::zero(); xv.numel()];
        for bi in 0..b {
            for h in 0..heads {
                for li in 0..l {
                    let src = &xv.values()[(bi * l + li) * hd_all + h * hd..(bi * l + li) * hd_all + h * hd + hd];
                    let at = (((bi * heads + h) * l) + li) * hd;
                    out[at..at + hd].copy_from_slice(src);
                }
            }
        }
        Ok(self.unary(
            TensorData::new(vec![b * heads, l, hd], out),
            Op::SplitHeads { x: self.id, heads },
        ))
    }

    /// `(b·h, l, d) -> (b, l, h·d)`, inverse of [`Tensor::split_heads`].
    pub fn merge_heads(&self, heads: usize) -> Result<Tensor<'g, E>> {
        if self.shape.len() != 3 || self.shape[0] % heads != 0 {
            return Err(shape_err("merge_heads", format!("{:?} from {heads} heads", self.shape)));
        }
        let (bh, l, hd) = (self.shape[0], self.shape[1], self.shape[2]);
        let b = bh / heads;
        let hd_all = hd * heads;
        let xv = self.value();
        let mut out = vec![E::zero(); xv.numel()];
        for bi in 0..b {
            for h in 0..heads {
                for li in 0..l {
                    let src = &xv.values()[(((bi * heads + h) * l) + li) * hd..(((bi * heads + h) * l) + li) * hd + hd];
                    let at = (bi * l + li) * hd_all + h * hd;
                    out[at..at + hd].copy_from_slice(src);
                }
            }
        }
        Ok(self.unary(
            TensorData::new(vec![b, l, hd_all], out),
            Op::MergeHeads { x: self.id, heads },
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<'g, E>> {
        if shape.iter().product::<usize>() != self.value().numel() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        let v = self.value().reshaped(shape);
        Ok(self.unary(v, Op::Reshape { x: self.id }))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<'g, E>> {
        if axis >= self.shape.len() || start + len > self.shape[axis] {
            return Err(shape_err(
                "slice_axis",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, self.shape),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let mid = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let xv = self.value();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let at = (o * mid + start) * inner;
            out.extend_from_slice(&xv.values()[at..at + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(self.unary(TensorData::new(shape, out), Op::SliceAxis { x: self.id, axis, start }))
    }

    pub fn sigmoid(&self) -> Tensor<'g, E> {
        let v = self.value().map(|x| {
            // Split on sign so exp never overflows.
            if x >= E::zero() {
                (E::one() + (-x).exp()).recip()
            } else {
                let e = x.exp();
                e / (E::one() + e)
            }
        });
        self.unary(v, Op::Sigmoid { x: self.id })
    }

    pub fn tanh_act(&self) -> Tensor<'g, E> {
        let v = self.value().map(|x| x.tanh());
        self.unary(v, Op::Tanh { x: self.id })
    }

    pub fn relu(&self) -> Tensor<'g, E> {
        let v = self.value().map(|x| x.max(E::zero()));
        self.unary(v, Op::Relu { x: self.id })
    }

    /// Row-wise softmax over the last axis, with max subtraction.
    pub fn softmax(&self) -> Result<Tensor<'g, E>> {
        let xv = self.value();
        if !xv.is_finite() {
            return Err(TensorError::NonFinite("softmax"));
        }
        let n = xv.last_dim();
        let mut out = xv.values().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut denom = E::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                denom += *v;
            }
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        Ok(self.unary(TensorData::new(self.shape.clone(), out), Op::Softmax { x: self.id }))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor<'g, E>, beta: &Tensor<'g, E>, eps: f64) -> Result<Tensor<'g, E>> {
        let n = self.shape.last().copied().unwrap_or(0);
        if gamma.shape != [n] || beta.shape != [n] {
            return Err(shape_err("layer_norm", format!("gamma/beta must be [{n}]")));
        }
        let xv = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let rows = xv.numel() / n;
        let nf = E::from_f64(n as f64);
        let epsn = E::from_f64(eps);
        let mut out = vec![E::zero(); xv.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &xv.values()[r * n..(r + 1) * n];
            let mean = xr.iter().cloned().sum::<E>() / nf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / nf;
            let inv_std = (var + epsn).sqrt().recip();
            for j in 0..n {
                out[r * n + j] = (xr[j] - mean) * inv_std * gv.values()[j] + bv.values()[j];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        let requires = self.requires_grad || gamma.requires_grad || beta.requires_grad;
        Ok(self.graph.tensor(
            TensorData::new(self.shape.clone(), out),
            requires,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, mean: means, inv_std: inv_stds },
        ))
    }

    /// Inverted dropout: keeps with probability `1 - rate`, scales by
    /// `1/(1-rate)`. The mask is drawn once and reused in backward.
    pub fn dropout(&self, rate: f64, rng: &mut crate::rng::Rng) -> Tensor<'g, E> {
        debug_assert!((0.0..1.0).contains(&rate));
        if rate == 0.0 {
            let v = self.value();
            return self.unary(v, Op::Reshape { x: self.id });
        }
        let keep = 1.0 - rate;
        let scale = E::from_f64(keep.recip());
        let mask_vals: Vec<E> = (0..self.value().numel())
            .map(|_| if rng.uniform_f64() < keep { scale } else { E::zero() })
            .collect();
        let mask = TensorData::new(self.shape.clone(), mask_vals);
        let v = self.value().zip(&mask, |x, m| x * m);
        self.unary(v, Op::Dropout { x: self.id, mask })
    }

    pub fn sum_all(&self) -> Tensor<'g, E> {
        let s = self.value().values().iter().cloned().sum();
        self.unary(TensorData::scalar(s), Op::SumAll { x: self.id })
    }

    pub fn mean_all(&self) -> Tensor<'g, E> {
        let v = self.value();
        let s = v.values().iter().cloned().sum::<E>() / E::from_f64(v.numel() as f64);
        self.unary(TensorData::scalar(s), Op::MeanAll { x: self.id })
    }

    /// Σ x² — the L2 penalty building block.
    pub fn sum_squares(&self) -> Tensor<'g, E> {
        let s = self.value().values().iter().map(|&v| v * v).sum();
        self.unary(TensorData::scalar(s), Op::SumSquares { x: self.id })
    }
}

/// One-hot rows as a plain constant: `indices` against `classes` columns.
pub fn one_hot<E: Scalar>(indices: &[u32], classes: usize) -> TensorData<E> {
    let mut out = vec![E::zero(); indices.len() * classes];
    for (row, &idx) in indices.iter().enumerate() {
        assert!((idx as usize) < classes, "one_hot index {idx} out of {classes}");
        out[row * classes + idx as usize] = E::one();
    }
    TensorData::new(vec![indices.len(), classes], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn td(shape: Vec<usize>, values: &[f64]) -> TensorData<f64> {
        TensorData::from_f64_slice(shape, values)
    }

    #[test]
    fn matmul_identity_passthrough() {
        let g = Graph::<f64>::new();
        let eye = g.constant(td(vec![3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let a = g.constant(td(vec![3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out.value().to_f64_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn one_hot_basic() {
        let t = one_hot::<f64>(&[3], 5);
        assert_eq!(t.to_f64_vec(), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let g = Graph::<f64>::new();
        let x = g.constant(td(vec![1, 3], &[0.0, 0.0, 0.0]));
        let y = x.softmax().unwrap().value().to_f64_vec();
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let hot = g.constant(td(vec![1, 2], &[1000.0, 0.0]));
        let y = hot.softmax().unwrap().value().to_f64_vec();
        assert!(y[0] > 1.0 - 1e-9 && y[1] < 1e-9);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let g = Graph::<f64>::new();
        let x = g.constant(td(vec![1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(x.softmax(), Err(TensorError::NonFinite(_))));
    }

    #[test]
    fn product_rule_for_scalars() {
        let g = Graph::<f64>::new();
        let x = g.leaf(td(vec![1], &[3.0]), true);
        let y = g.leaf(td(vec![1], &[5.0]), true);
        let loss = x.mul(&y).unwrap().sum_all();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().to_f64_vec(), vec![5.0]);
        assert_eq!(grads.get(&y).unwrap().to_f64_vec(), vec![3.0]);
    }

    #[test]
    fn constant_receives_no_gradient() {
        let g = Graph::<f64>::new();
        let x = g.leaf(td(vec![1], &[3.0]), true);
        let c = g.constant(td(vec![1], &[5.0]));
        let loss = x.mul(&c).unwrap().sum_all();
        let grads = g.backward(&loss).unwrap();
        assert!(grads.get(&c).is_none());
    }

    #[test]
    fn backward_requires_connected_scalar() {
        let g = Graph::<f64>::new();
        let c = g.constant(td(vec![1], &[2.0]));
        let loss = c.sum_all();
        assert!(matches!(g.backward(&loss), Err(TensorError::DisconnectedGraph)));

        let x = g.leaf(td(vec![2], &[1.0, 2.0]), true);
        let vec_out = x.scale(2.0);
        assert!(matches!(g.backward(&vec_out), Err(TensorError::NonScalarLoss(2))));
    }

    #[test]
    fn cross_entropy_analytic_values() {
        let g = Graph::<f64>::new();
        // Certain prediction: loss 0.
        let confident = g.constant(td(vec![1, 3], &[100.0, 0.0, 0.0]));
        let loss = g.sparse_cross_entropy(&confident, &[0]).unwrap();
        assert!(loss.value().scalar_value() < 1e-9);
        // Uniform over 45 classes: ln 45.
        let uniform = g.constant(TensorData::zeros(vec![1, 45]));
        let loss = g.sparse_cross_entropy(&uniform, &[7]).unwrap();
        assert!((loss.value().scalar_value() - 45.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let g = Graph::<f64>::new();
        let logits = g.constant(TensorData::zeros(vec![1, 4]));
        assert!(matches!(
            g.sparse_cross_entropy(&logits, &[4]),
            Err(TensorError::BadTarget { target: 4, classes: 4 })
        ));
    }

    #[test]
    fn batch_cross_entropy_matches_scalar_computation() {
        let mut rng = crate::rng::Rng::from_master(13);
        let g = Graph::<f64>::new();
        let rows = 8;
        let classes = 6;
        let data: Vec<f64> = (0..rows * classes).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let targets: Vec<u32> = (0..rows).map(|_| rng.below(classes) as u32).collect();
        let logits = g.constant(td(vec![rows, classes], &data));
        let fused = g.sparse_cross_entropy(&logits, &targets).unwrap().value().scalar_value();

        let mut manual = 0.0;
        for r in 0..rows {
            let row = &data[r * classes..(r + 1) * classes];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            manual += -(row[targets[r] as usize].exp() / denom).ln();
        }
        manual /= rows as f64;
        assert!((fused - manual).abs() < 1e-6, "{fused} vs {manual}");
    }

    #[test]
    fn slice_and_stack_round_trip() {
        let g = Graph::<f64>::new();
        let x = g.leaf(td(vec![2, 3, 2], &(0..12).map(|v| v as f64).collect::<Vec<_>>()), true);
        let t0 = x.slice_axis(1, 0, 1).unwrap().reshape(vec![2, 2]).unwrap();
        let t1 = x.slice_axis(1, 1, 1).unwrap().reshape(vec![2, 2]).unwrap();
        let t2 = x.slice_axis(1, 2, 1).unwrap().reshape(vec![2, 2]).unwrap();
        let back = g.stack_time(&[t0, t1, t2]).unwrap();
        assert_eq!(back.value().to_f64_vec(), x.value().to_f64_vec());

        let loss = back.sum_all();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().to_f64_vec(), vec![1.0; 12]);
    }

    #[test]
    fn split_merge_heads_round_trip() {
        let g = Graph::<f64>::new();
        let x = g.constant(td(vec![2, 3, 4], &(0..24).map(|v| v as f64).collect::<Vec<_>>()));
        let split = x.split_heads(2).unwrap();
        assert_eq!(split.shape(), &[4, 3, 2]);
        let merged = split.merge_heads(2).unwrap();
        assert_eq!(merged.value().to_f64_vec(), x.value().to_f64_vec());
    }

    #[test]
    fn embedding_lookup_scatters_gradients() {
        let g = Graph::<f64>::new();
        let table = g.leaf(td(vec![3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let out = g.embedding_lookup(&table, &[2, 0, 2]).unwrap();
        assert_eq!(out.value().to_f64_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = out.sum_all();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&table).unwrap().to_f64_vec(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn bmm_transpose_matches_plain() {
        let mut rng = crate::rng::Rng::from_master(3);
        let a_data: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let b_data: Vec<f64> = (0..2 * 4 * 5).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        // bt[b][j][k] = b[b][k][j]
        let mut bt_data = vec![0.0; 2 * 5 * 4];
        for bi in 0..2 {
            for kk in 0..4 {
                for j in 0..5 {
                    bt_data[bi * 20 + j * 4 + kk] = b_data[bi * 20 + kk * 5 + j];
                }
            }
        }
        let g = Graph::<f64>::new();
        let a = g.constant(td(vec![2, 3, 4], &a_data));
        let b = g.constant(td(vec![2, 4, 5], &b_data));
        let bt = g.constant(td(vec![2, 5, 4], &bt_data));
        let plain = a.bmm(&b, false).unwrap().value().to_f64_vec();
        let trans = a.bmm(&bt, true).unwrap().value().to_f64_vec();
        for (x, y) in plain.iter().zip(&trans) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_off_at_rate_zero() {
        let g = Graph::<f64>::new();
        let x = g.constant(td(vec![4], &[1.0, 2.0, 3.0, 4.0]));
        let mut rng = crate::rng::Rng::from_master(1);
        let y = x.dropout(0.0, &mut rng);
        assert_eq!(y.value().to_f64_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }
}
