use std::borrow::Cow;

use super::{as_matrix, matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulT { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f32 },
    Relu { x: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Softmax { x: Var },
    Embedding { table: Var, ids: Vec<u32> },
    CrossEntropy { logits: Var, targets: Vec<Option<u32>>, normalizer: f32 },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    MeanRows { x: Var },
    Sum { x: Var },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    // op-specific saved forward state (layer-norm statistics, softmax probabilities)
    aux: Vec<f32>,
}

/// Append-only tape of tensor operations.
///
/// Nodes are stored in creation order, which is a topological order, so
/// `backward` is a single reverse sweep. Leaves may borrow parameter
/// tensors; frozen leaves never receive gradient storage.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_COEFF: f32 = 0.044_715;

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf borrowing `t`.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(t), true)
    }

    /// Frozen leaf borrowing `t`.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(t), false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(t), requires_grad)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Consumes the graph, returning the value of `v`.
    pub fn into_value(mut self, v: Var) -> Tensor {
        self.nodes.swap_remove(v.0).value.into_owned()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any was stored.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.nodes[v.0].grad.take()
    }

    /// Number of nodes currently holding gradient storage.
    pub fn grad_storage_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.grad.is_some()).count()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Op,
        requires_grad: bool,
        aux: Vec<f32>,
        name: &'static str,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            grad: None,
            aux,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a))?;
        let (k2, n) = as_matrix(self.value(b))?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
            Vec::new(),
            "matmul",
        )
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a))?;
        let (n, k2) = as_matrix(self.value(b))?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_t inner dims differ: {:?} x {:?}ᵀ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMulT { a, b, m, k, n },
            rg,
            Vec::new(),
            "matmul_t",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add { a, b }, rg, Vec::new(), "add")
    }

    /// Adds `bias` (length = last axis) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.cols();
        if tb.numel() != d {
            return Err(Error::Shape(format!(
                "bias of {} values cannot broadcast over rows of {d}",
                tb.numel()
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddBias { x, bias }, rg, Vec::new(), "add_bias")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul { a, b }, rg, Vec::new(), "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, factor }, rg, Vec::new(), "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg, Vec::new(), "relu")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| {
                let t = (SQRT_2_OVER_PI * (v + GELU_COEFF * v * v * v)).tanh();
                0.5 * v * (1.0 + t)
            })
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu { x }, rg, Vec::new(), "gelu")
    }

    /// Normalizes each row over the last axis, then applies `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let tx = self.value(x);
        let d = tx.cols();
        let rows = tx.rows();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::Shape(format!(
                "layer_norm affine params must have {d} values, got {} and {}",
                tg.numel(),
                tb.numel()
            )));
        }
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = tg.data()[c] * h + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        xhat.extend_from_slice(&rstd);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta }, rg, xhat, "layer_norm")
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax where row `i` only attends to columns `0..=i`;
    /// masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        let rows = tx.rows();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = tx.row(r);
            let visible = if causal { (r + 1).min(cols) } else { cols };
            let max = row[..visible].iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let dst = &mut out[r * cols..r * cols + visible];
            let mut total = 0.0f32;
            for (o, &v) in dst.iter_mut().zip(&row[..visible]) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in dst.iter_mut() {
                *o /= total;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax { x }, rg, Vec::new(), "softmax")
    }

    /// Gathers rows of `table` (V×d) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = as_matrix(tt)?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup of zero ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::Index(format!("id {id} out of range for table of {v} rows")));
            }
            out.extend_from_slice(tt.row(id as usize));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            Vec::new(),
            "embedding",
        )
    }

    /// Mean negative log-probability of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let t: Vec<Option<u32>> = targets.iter().map(|&t| Some(t)).collect();
        let n = t.len() as f32;
        self.cross_entropy_masked(logits, &t, n)
    }

    /// Sum of negative log-probabilities over rows whose target is `Some`,
    /// divided by `normalizer`. Rows with `None` contribute nothing and get
    /// an exactly-zero gradient.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[Option<u32>],
        normalizer: f32,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let vocab = tl.cols();
        let rows = tl.rows();
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if !(normalizer > 0.0) {
            return Err(Error::Contract("cross-entropy normalizer must be > 0".into()));
        }
        let mut probs = vec![0.0f32; rows * vocab];
        let mut total = 0.0f64;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t as usize >= vocab {
                return Err(Error::Index(format!("target {t} out of range for {vocab} classes")));
            }
            let row = tl.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let dst = &mut probs[r * vocab..(r + 1) * vocab];
            let mut z = 0.0f32;
            for (p, &v) in dst.iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in dst.iter_mut() {
                *p /= z;
            }
            let log_prob = row[t as usize] - max - z.ln();
            total -= log_prob as f64;
        }
        let loss = (total / normalizer as f64) as f32;
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                normalizer,
            },
            rg,
            probs,
            "cross_entropy",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        if width == 0 || start + width > cols {
            return Err(Error::Shape(format!(
                "column slice {start}..{} out of range for {cols} columns",
                start + width
            )));
        }
        let rows = tx.rows();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&tx.row(r)[start..start + width]);
        }
        let out = Tensor::new(vec![rows, width], out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceCols { x, start }, rg, Vec::new(), "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Shape("concat_cols row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], out)?;
        let rg = self.rg(parts);
        self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
            Vec::new(),
            "concat_cols",
        )
    }

    /// Mean over rows: `n×d → 1×d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = (tx.rows(), tx.cols());
        let mut out = vec![0.0f32; d];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= rows as f32;
        }
        let out = Tensor::new(vec![1, d], out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::MeanRows { x }, rg, Vec::new(), "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum::<f32>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg, Vec::new(), "sum")
    }

    /// Reverse sweep from the scalar `loss`, populating gradients of every
    /// node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &g)?;
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f32>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f32]) -> Result<()> {
        // Contributions are computed against immutable borrows first, then
        // accumulated, so every arm builds its vectors before touching grads.
        let node = &self.nodes[idx];
        let mut out: Vec<(Var, Vec<f32>)> = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.requires_grad(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_acc(g, self.value(b).data(), &mut da, m, n, k);
                    out.push((a, da));
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_acc(self.value(a).data(), g, &mut db, k, m, n);
                    out.push((b, db));
                }
            }
            &Op::MatMulT { a, b, m, k, n } => {
                if self.requires_grad(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_acc(g, self.value(b).data(), &mut da, m, n, k);
                    out.push((a, da));
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; n * k];
                    matmul_at_acc(g, self.value(a).data(), &mut db, n, m, k);
                    out.push((b, db));
                }
            }
            &Op::Add { a, b } => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::AddBias { x, bias } => {
                out.push((x, g.to_vec()));
                if self.requires_grad(bias) {
                    let d = self.value(bias).numel();
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    out.push((bias, db));
                }
            }
            &Op::Mul { a, b } => {
                let (ta, tb) = (self.value(a).data(), self.value(b).data());
                out.push((a, g.iter().zip(tb).map(|(g, y)| g * y).collect()));
                out.push((b, g.iter().zip(ta).map(|(g, x)| g * x).collect()));
            }
            &Op::Scale { x, factor } => {
                out.push((x, g.iter().map(|v| v * factor).collect()));
            }
            &Op::Relu { x } => {
                let tx = self.value(x).data();
                out.push((
                    x,
                    g.iter()
                        .zip(tx)
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect(),
                ));
            }
            &Op::Gelu { x } => {
                let tx = self.value(x).data();
                let dx = g
                    .iter()
                    .zip(tx)
                    .map(|(&g, &v)| {
                        let inner = SQRT_2_OVER_PI * (v + GELU_COEFF * v * v * v);
                        let t = inner.tanh();
                        let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
                    })
                    .collect();
                out.push((x, dx));
            }
            &Op::LayerNorm { x, gamma, beta } => {
                let tg = self.value(gamma).data();
                let d = tg.len();
                let rows = g.len() / d;
                let (xhat, rstd) = node.aux.split_at(rows * d);
                if self.requires_grad(x) {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dy = 0.0f32;
                        let mut mean_dy_h = 0.0f32;
                        for c in 0..d {
                            let dy = gr[c] * tg[c];
                            mean_dy += dy;
                            mean_dy_h += dy * hr[c];
                        }
                        mean_dy /= d as f32;
                        mean_dy_h /= d as f32;
                        for c in 0..d {
                            let dy = gr[c] * tg[c];
                            dx[r * d + c] = rstd[r] * (dy - mean_dy - hr[c] * mean_dy_h);
                        }
                    }
                    out.push((x, dx));
                }
                if self.requires_grad(gamma) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                    out.push((gamma, dg));
                }
                if self.requires_grad(beta) {
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    out.push((beta, db));
                }
            }
            &Op::Softmax { x } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let s: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - s);
                    }
                }
                out.push((x, dx));
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let mut dt = vec![0.0; tt.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    for (o, v) in dst.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *o += v;
                    }
                }
                out.push((*table, dt));
            }
            Op::CrossEntropy {
                logits,
                targets,
                normalizer,
            } => {
                let vocab = self.value(*logits).cols();
                let scale = g[0] / normalizer;
                let mut dl = vec![0.0; targets.len() * vocab];
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    let probs = &node.aux[r * vocab..(r + 1) * vocab];
                    let dst = &mut dl[r * vocab..(r + 1) * vocab];
                    for (o, p) in dst.iter_mut().zip(probs) {
                        *o = p * scale;
                    }
                    dst[t as usize] -= scale;
                }
                out.push((*logits, dl));
            }
            &Op::SliceCols { x, start } => {
                let tx = self.value(x);
                let cols = tx.cols();
                let width = node.value.cols();
                let mut dx = vec![0.0; tx.numel()];
                for (r, gr) in g.chunks(width).enumerate() {
                    dx[r * cols + start..r * cols + start + width].copy_from_slice(gr);
                }
                out.push((x, dx));
            }
            Op::ConcatCols { parts } => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        out.push((p, dp));
                    }
                    offset += w;
                }
            }
            &Op::MeanRows { x } => {
                let tx = self.value(x);
                let rows = tx.rows();
                let mut dx = Vec::with_capacity(tx.numel());
                for _ in 0..rows {
                    dx.extend(g.iter().map(|v| v / rows as f32));
                }
                out.push((x, dx));
            }
            &Op::Sum { x } => {
                let n = self.value(x).numel();
                out.push((x, vec![g[0]; n]));
            }
        }
        for (v, c) in out {
            self.accumulate(v, c);
        }
        Ok(())
    }
}
