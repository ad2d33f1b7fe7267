use super::Tensor;
use crate::error::{Error, Result};

/// Epsilon added inside the square root of layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Tape position returned by [`Graph::mark`], accepted by [`Graph::rewind`].
#[derive(Debug, Clone, Copy)]
pub struct Mark(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    AddBias { x: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Relu { x: usize },
    Log { x: usize },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize, end: usize },
    Gather { table: usize, ids: Vec<usize> },
    ReduceSum { x: usize },
    PickPerRow { x: usize, cols: Vec<usize> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Topologically ordered tape of executed operations.
///
/// Every op's inputs precede it on the tape, so `backward` is a single
/// reverse sweep that visits each node exactly once. The graph owns copies of
/// all saved inputs; nothing recorded here is mutated afterwards.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record the current tape position.
    pub fn mark(&self) -> Mark {
        Mark(self.nodes.len())
    }

    /// Drop every node recorded after `mark`. Vars handed out since then are
    /// invalidated; vars from before stay usable.
    pub fn rewind(&mut self, mark: Mark) {
        self.nodes.truncate(mark.0);
    }

    /// Whether `v` still points at a node on the tape (false after a rewind
    /// past it).
    pub fn is_live(&self, v: Var) -> bool {
        v.0 < self.nodes.len()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient (masks, positional encodings, ...).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on `v` by the last `backward`, if any.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn val(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::Shape(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                ta.shape, tb.shape
            )));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let data = matmul_raw(&ta.data, &tb.data, m, k, n);
        let req = self.any_requires(&[a.0, b.0]);
        Ok(self.push(
            Tensor { shape: vec![m, n], data },
            req,
            Op::MatMul { a: a.0, b: b.0 },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x.0);
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "transpose: expected rank 2, got {:?}",
                t.shape
            )));
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        let data = transpose_raw(&t.data, m, n);
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor { shape: vec![n, m], data },
            req,
            Op::Transpose { x: x.0 },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        if ta.shape != tb.shape {
            return Err(Error::Shape(format!(
                "add: shape {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        let req = self.any_requires(&[a.0, b.0]);
        Ok(self.push(Tensor { shape, data }, req, Op::Add { a: a.0, b: b.0 }))
    }

    /// `x[m x n] + b[n]`, broadcasting the bias across rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x.0), self.val(b.0));
        if tx.rank() != 2 || tb.rank() != 1 || tx.shape[1] != tb.shape[0] {
            return Err(Error::Shape(format!(
                "add_bias: shape {:?} with bias {:?}",
                tx.shape, tb.shape
            )));
        }
        let (m, n) = (tx.shape[0], tx.shape[1]);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(tx.data[i * n + j] + tb.data[j]);
            }
        }
        let req = self.any_requires(&[x.0, b.0]);
        Ok(self.push(
            Tensor { shape: vec![m, n], data },
            req,
            Op::AddBias { x: x.0, b: b.0 },
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        if ta.shape != tb.shape {
            return Err(Error::Shape(format!(
                "mul: shape {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        let req = self.any_requires(&[a.0, b.0]);
        Ok(self.push(Tensor { shape, data }, req, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.val(x.0);
        let data = t.data.iter().map(|v| v * c).collect();
        let shape = t.shape.clone();
        let req = self.nodes[x.0].requires_grad;
        self.push(Tensor { shape, data }, req, Op::Scale { x: x.0, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.val(x.0);
        let data = t.data.iter().map(|v| v.max(0.0)).collect();
        let shape = t.shape.clone();
        let req = self.nodes[x.0].requires_grad;
        self.push(Tensor { shape, data }, req, Op::Relu { x: x.0 })
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.val(x.0);
        let data = t.data.iter().map(|v| v.ln()).collect();
        let shape = t.shape.clone();
        let req = self.nodes[x.0].requires_grad;
        self.push(Tensor { shape, data }, req, Op::Log { x: x.0 })
    }

    /// Softmax along `axis`, computed with max-subtraction so large
    /// magnitudes cannot overflow.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.val(x.0);
        check_axis(&t.shape, axis, "softmax")?;
        let mut data = t.data.clone();
        for_each_lane(&t.shape, axis, |idx| {
            let max = idx.iter().map(|&i| data[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &i in idx {
                data[i] = (data[i] - max).exp();
                sum += data[i];
            }
            for &i in idx {
                data[i] /= sum;
            }
        });
        let shape = t.shape.clone();
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor { shape, data }, req, Op::Softmax { x: x.0, axis }))
    }

    /// `x - logsumexp(x)` along `axis`; the numerically safe log of softmax.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.val(x.0);
        check_axis(&t.shape, axis, "log_softmax")?;
        let mut data = t.data.clone();
        for_each_lane(&t.shape, axis, |idx| {
            let max = idx.iter().map(|&i| data[i]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = idx.iter().map(|&i| (data[i] - max).exp()).sum();
            let lse = max + sum.ln();
            for &i in idx {
                data[i] -= lse;
            }
        });
        let shape = t.shape.clone();
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor { shape, data }, req, Op::LogSoftmax { x: x.0, axis }))
    }

    /// Normalize the last axis to mean 0 / variance 1, then apply the affine
    /// `gain * x + bias`. Epsilon sits inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x.0), self.val(gain.0), self.val(bias.0));
        if tx.rank() == 0 {
            return Err(Error::Shape("layer_norm: rank-0 input".into()));
        }
        let d = *tx.shape.last().unwrap();
        if d < 1 || tg.shape != [d] || tb.shape != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: input {:?} with gain {:?} and bias {:?}",
                tx.shape, tg.shape, tb.shape
            )));
        }
        let rows = tx.data.len() / d;
        let mut data = vec![0.0; tx.data.len()];
        for r in 0..rows {
            let row = &tx.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv_std * tg.data[j] + tb.data[j];
            }
        }
        let shape = tx.shape.clone();
        let req = self.any_requires(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            Tensor { shape, data },
            req,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0 },
        ))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat: no inputs".into()));
        }
        let first = self.val(parts[0].0).shape.clone();
        check_axis(&first, axis, "concat")?;
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for p in parts {
            let s = &self.val(p.0).shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape(format!(
                    "concat along axis {axis}: shape {:?} does not match {:?}",
                    s, first
                )));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.val(p.0);
                let block = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * block..(o + 1) * block]);
            }
        }
        let req = self.any_requires(&parts.iter().map(|p| p.0).collect::<Vec<_>>());
        Ok(self.push(
            Tensor { shape: out_shape, data },
            req,
            Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis },
        ))
    }

    /// Sub-range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.val(x.0);
        check_axis(&t.shape, axis, "slice")?;
        if start > end || end > t.shape[axis] {
            return Err(Error::Index(format!(
                "slice [{start}, {end}) out of range for axis {axis} of {:?}",
                t.shape
            )));
        }
        let mut out_shape = t.shape.clone();
        out_shape[axis] = end - start;
        let outer: usize = t.shape[..axis].iter().product();
        let inner: usize = t.shape[axis + 1..].iter().product();
        let src_block = t.shape[axis] * inner;
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            let base = o * src_block + start * inner;
            data.extend_from_slice(&t.data[base..base + (end - start) * inner]);
        }
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor { shape: out_shape, data },
            req,
            Op::Slice { x: x.0, axis, start, end },
        ))
    }

    /// Row lookup into an embedding table; backward scatter-adds into the
    /// table, so repeated ids accumulate.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.val(table.0);
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "embedding_gather: table must be rank 2, got {:?}",
                t.shape
            )));
        }
        let (v, d) = (t.shape[0], t.shape[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!(
                "embedding_gather: id {bad} out of range for table with {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t.data[i * d..(i + 1) * d]);
        }
        let req = self.nodes[table.0].requires_grad;
        Ok(self.push(
            Tensor { shape: vec![ids.len(), d], data },
            req,
            Op::Gather { table: table.0, ids: ids.to_vec() },
        ))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn reduce_sum(&mut self, x: Var) -> Var {
        let t = self.val(x.0);
        let s: f64 = t.data.iter().sum();
        let req = self.nodes[x.0].requires_grad;
        self.push(Tensor { shape: vec![1], data: vec![s] }, req, Op::ReduceSum { x: x.0 })
    }

    /// `out[i] = x[i, cols[i]]` for a rank-2 `x`.
    pub fn pick_per_row(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let t = self.val(x.0);
        if t.rank() != 2 || t.shape[0] != cols.len() {
            return Err(Error::Shape(format!(
                "pick_per_row: {} indices against shape {:?}",
                cols.len(),
                t.shape
            )));
        }
        let n = t.shape[1];
        if let Some(bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::Index(format!(
                "pick_per_row: column {bad} out of range for {n} columns"
            )));
        }
        let data = cols.iter().enumerate().map(|(i, &c)| t.data[i * n + c]).collect();
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor { shape: vec![cols.len()], data },
            req,
            Op::PickPerRow { x: x.0, cols: cols.to_vec() },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss` node. Accumulates a gradient on
    /// every node that requires one and contributed to the loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.val(loss.0).len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.val(loss.0).shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            self.step_backward(id);
        }
        Ok(())
    }

    fn add_to_grad(&mut self, id: usize, contrib: Vec<f64>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let node = &mut self.nodes[id];
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contrib) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    fn step_backward(&mut self, id: usize) {
        let dy = self.nodes[id].grad.clone().expect("grad present");
        // Ops are matched by value where the payload is small; indices into
        // the tape keep borrows simple.
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (ta, tb) = (self.val(a), self.val(b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                let da = matmul_nt_raw(&dy, &tb.data, m, n, k);
                let db = matmul_tn_raw(&ta.data, &dy, m, k, n);
                self.add_to_grad(a, da);
                self.add_to_grad(b, db);
            }
            &Op::Transpose { x } => {
                let t = self.val(x);
                let (m, n) = (t.shape[0], t.shape[1]);
                // dy has shape [n, m]
                let dx = transpose_raw(&dy, n, m);
                self.add_to_grad(x, dx);
            }
            &Op::Add { a, b } => {
                self.add_to_grad(a, dy.clone());
                self.add_to_grad(b, dy);
            }
            &Op::AddBias { x, b } => {
                let n = self.val(b).shape[0];
                let m = dy.len() / n;
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += dy[i * n + j];
                    }
                }
                self.add_to_grad(x, dy);
                self.add_to_grad(b, db);
            }
            &Op::Mul { a, b } => {
                let da: Vec<f64> = dy.iter().zip(&self.val(b).data).map(|(d, v)| d * v).collect();
                let db: Vec<f64> = dy.iter().zip(&self.val(a).data).map(|(d, v)| d * v).collect();
                self.add_to_grad(a, da);
                self.add_to_grad(b, db);
            }
            &Op::Scale { x, c } => {
                let dx = dy.iter().map(|d| d * c).collect();
                self.add_to_grad(x, dx);
            }
            &Op::Relu { x } => {
                let dx = dy
                    .iter()
                    .zip(&self.val(x).data)
                    .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.add_to_grad(x, dx);
            }
            &Op::Log { x } => {
                let dx = dy.iter().zip(&self.val(x).data).map(|(d, v)| d / v).collect();
                self.add_to_grad(x, dx);
            }
            &Op::Softmax { x, axis } => {
                let y = &self.nodes[id].value;
                let mut dx = vec![0.0; dy.len()];
                let shape = y.shape.clone();
                let ydata = y.data.clone();
                for_each_lane(&shape, axis, |idx| {
                    let dot: f64 = idx.iter().map(|&i| dy[i] * ydata[i]).sum();
                    for &i in idx {
                        dx[i] = ydata[i] * (dy[i] - dot);
                    }
                });
                self.add_to_grad(x, dx);
            }
            &Op::LogSoftmax { x, axis } => {
                let y = &self.nodes[id].value;
                let mut dx = vec![0.0; dy.len()];
                let shape = y.shape.clone();
                let ydata = y.data.clone();
                for_each_lane(&shape, axis, |idx| {
                    let total: f64 = idx.iter().map(|&i| dy[i]).sum();
                    for &i in idx {
                        dx[i] = dy[i] - ydata[i].exp() * total;
                    }
                });
                self.add_to_grad(x, dx);
            }
            &Op::LayerNorm { x, gain, bias } => {
                let tx = self.val(x);
                let tg = self.val(gain);
                let d = *tx.shape.last().unwrap();
                let rows = tx.data.len() / d;
                let mut dx = vec![0.0; tx.data.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for r in 0..rows {
                    let row = &tx.data[r * d..(r + 1) * d];
                    let dyr = &dy[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    // dxhat, then the two lane-wide correction terms
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = dyr[j] * tg.data[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dg[j] += dyr[j] * xhat;
                        db[j] += dyr[j];
                    }
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        dx[r * d + j] = inv_std
                            * (dyr[j] * tg.data[j]
                                - sum_dxhat / d as f64
                                - xhat * sum_dxhat_xhat / d as f64);
                    }
                }
                self.add_to_grad(x, dx);
                self.add_to_grad(gain, dg);
                self.add_to_grad(bias, db);
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let out_shape = self.nodes[id].value.shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let out_block = out_shape[axis] * inner;
                let mut offsets = Vec::with_capacity(parts.len());
                let mut acc = 0;
                for &p in &parts {
                    offsets.push(acc);
                    acc += self.val(p).shape[axis] * inner;
                }
                for (pi, &p) in parts.iter().enumerate() {
                    let block = self.val(p).shape[axis] * inner;
                    let mut dp = vec![0.0; self.val(p).data.len()];
                    for o in 0..outer {
                        let src = o * out_block + offsets[pi];
                        dp[o * block..(o + 1) * block].copy_from_slice(&dy[src..src + block]);
                    }
                    self.add_to_grad(p, dp);
                }
            }
            &Op::Slice { x, axis, start, end } => {
                let t = self.val(x);
                let shape = t.shape.clone();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let src_block = shape[axis] * inner;
                let width = (end - start) * inner;
                let mut dx = vec![0.0; t.data.len()];
                for o in 0..outer {
                    let dst = o * src_block + start * inner;
                    dx[dst..dst + width].copy_from_slice(&dy[o * width..(o + 1) * width]);
                }
                self.add_to_grad(x, dx);
            }
            Op::Gather { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.val(table).shape[1];
                let mut dt = vec![0.0; self.val(table).data.len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += dy[r * d + j];
                    }
                }
                self.add_to_grad(table, dt);
            }
            &Op::ReduceSum { x } => {
                let n = self.val(x).data.len();
                self.add_to_grad(x, vec![dy[0]; n]);
            }
            Op::PickPerRow { x, cols } => {
                let x = *x;
                let cols = cols.clone();
                let n = self.val(x).shape[1];
                let mut dx = vec![0.0; self.val(x).data.len()];
                for (i, &c) in cols.iter().enumerate() {
                    dx[i * n + c] += dy[i];
                }
                self.add_to_grad(x, dx);
            }
        }
    }
}

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Visit each 1-D lane along `axis`: the closure receives the flat indices of
/// one lane at a time, in deterministic order.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut idx = vec![0usize; n];
    for o in 0..outer {
        for i in 0..inner {
            for (k, slot) in idx.iter_mut().enumerate() {
                *slot = o * n * inner + k * inner + i;
            }
            f(&idx);
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
    c
}

/// `a[m x n] * b[k x n]^T -> [m x k]`
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            let mut s = 0.0;
            for p in 0..n {
                s += a[i * n + p] * b[j * n + p];
            }
            c[i * k + j] = s;
        }
    }
    c
}

/// `a[m x k]^T * b[m x n] -> [k x n]`
fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                c[p * n + j] += av * b[i * n + j];
            }
        }
    }
    c
}

fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_matches_hand_computed_product() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let b = g.leaf(t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]), false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 2]);
        assert_eq!(g.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(Tensor::zeros(&[2, 2]), false);
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn transpose_round_trips() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let xt = g.transpose(x).unwrap();
        assert_eq!(g.value(xt).shape(), &[3, 2]);
        assert_eq!(g.value(xt).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = g.transpose(xt).unwrap();
        assert!(g.value(back).bit_eq(g.value(x)));
    }

    #[test]
    fn add_bias_broadcasts_across_rows() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let b = g.leaf(t(&[2], &[10.0, 20.0]), false);
        let y = g.add_bias(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn softmax_matches_frozen_values_and_sums_to_one() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 3], &[1.0, 2.0, 3.0]), false);
        let y = g.softmax(x, 1).unwrap();
        let got = g.value(y).data();
        let want = [
            0.090030573170380462,
            0.244728471054797645,
            0.665240955774821878,
        ];
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15, "got {a}, want {b}");
        }
        let sum: f64 = got.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_mask_bias_underflows_to_exact_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 3], &[0.5, -1e9, 0.25]), false);
        let y = g.softmax(x, 1).unwrap();
        let got = g.value(y).data();
        assert_eq!(got[1], 0.0);
        assert!(got[1].is_sign_positive());
        assert!(got[0] > got[2]);
    }

    #[test]
    fn softmax_is_stable_for_large_magnitudes() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2], &[1e9, 1e9 - 1.0]), false);
        let y = g.softmax(x, 1).unwrap();
        assert!(g.value(y).is_finite());
        let got = g.value(y).data();
        assert!((got[0] + got[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_respects_axis_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[1.0, 5.0, 3.0, 5.0]), false);
        let y = g.softmax(x, 0).unwrap();
        let got = g.value(y).data();
        // column 0: softmax([1, 3]); column 1: softmax([5, 5])
        assert!((got[0] + got[2] - 1.0).abs() < 1e-12);
        assert!((got[1] - 0.5).abs() < 1e-12);
        assert!((got[3] - 0.5).abs() < 1e-12);
        assert!(got[2] > got[0]);
    }

    #[test]
    fn log_softmax_agrees_with_log_of_softmax() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[0.1, -2.0, 3.5, 1.0, 1.0, 1.0]), false);
        let ls = g.log_softmax(x, 1).unwrap();
        let s = g.softmax(x, 1).unwrap();
        let sl = g.log(s);
        assert!(g.value(ls).linf_distance(g.value(sl)) < 1e-12);
    }

    #[test]
    fn layer_norm_normalizes_and_applies_affine() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]), false);
        let gain = g.leaf(t(&[4], &[1.0, 1.0, 1.0, 1.0]), false);
        let bias = g.leaf(t(&[4], &[0.0, 0.0, 0.0, 0.0]), false);
        let y = g.layer_norm(x, gain, bias).unwrap();
        let got = g.value(y).data();
        let inv_std = 1.0 / (1.25 + LAYER_NORM_EPS).sqrt();
        for (j, &v) in got.iter().enumerate() {
            let want = (1.0 + j as f64 - 2.5) * inv_std;
            assert!((v - want).abs() < 1e-15);
        }
        let mean: f64 = got.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);

        let mut g2 = Graph::new();
        let x = g2.leaf(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]), false);
        let gain = g2.leaf(t(&[4], &[2.0, 2.0, 2.0, 2.0]), false);
        let bias = g2.leaf(t(&[4], &[1.0, 1.0, 1.0, 1.0]), false);
        let y2 = g2.layer_norm(x, gain, bias).unwrap();
        for (a, b) in g2.value(y2).data().iter().zip(got) {
            assert!((a - (2.0 * b + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rejects_mismatched_affine_shape() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 4]), false);
        let gain = g.leaf(Tensor::zeros(&[3]), false);
        let bias = g.leaf(Tensor::zeros(&[4]), false);
        assert!(matches!(g.layer_norm(x, gain, bias), Err(Error::Shape(_))));
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        for axis in 0..2 {
            let mut g = Graph::new();
            let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
            let b = g.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]), false);
            let c = g.concat(&[a, b], axis).unwrap();
            let mut want = g.value(a).shape().to_vec();
            want[axis] = 4;
            assert_eq!(g.value(c).shape(), &want[..]);
            let first = g.slice(c, axis, 0, 2).unwrap();
            let second = g.slice(c, axis, 2, 4).unwrap();
            assert!(g.value(first).bit_eq(g.value(a)));
            assert!(g.value(second).bit_eq(g.value(b)));
        }
    }

    #[test]
    fn concat_rejects_mismatched_off_axis_extent() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(Tensor::zeros(&[2, 4]), false);
        assert!(matches!(g.concat(&[a, b], 0), Err(Error::Shape(_))));
    }

    #[test]
    fn slice_rejects_out_of_range() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(matches!(g.slice(a, 1, 2, 4), Err(Error::Index(_))));
    }

    #[test]
    fn embedding_gather_rejects_out_of_range_id() {
        let mut g = Graph::new();
        let table = g.leaf(Tensor::zeros(&[4, 2]), false);
        let err = g.embedding_gather(table, &[0, 4]).unwrap_err();
        assert!(err.to_string().contains('4'));
    }

    #[test]
    fn embedding_gather_backward_accumulates_repeated_ids() {
        let mut g = Graph::new();
        let table = g.leaf(t(&[3, 2], &[0.0; 6]), true);
        let rows = g.embedding_gather(table, &[1, 1, 2]).unwrap();
        let loss = g.reduce_sum(rows);
        g.backward(loss).unwrap();
        let grad = g.grad(table).unwrap();
        assert_eq!(grad.data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn pick_per_row_selects_one_entry_per_row() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let picked = g.pick_per_row(x, &[2, 0]).unwrap();
        assert_eq!(g.value(picked).data(), &[3.0, 4.0]);
        let loss = g.reduce_sum(picked);
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        assert_eq!(grad.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_accumulates_when_a_var_is_reused() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[3.0, -1.0]), true);
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, y).unwrap();
        let loss = g.reduce_sum(z);
        g.backward(loss).unwrap();
        // d/dx sum((2x)^2) = 8x
        assert_eq!(g.grad(x).unwrap().data(), &[24.0, -8.0]);
    }

    #[test]
    fn backward_leaves_untouched_branches_without_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[2.0]), true);
        let unused = g.leaf(t(&[1], &[5.0]), true);
        let loss = g.reduce_sum(x);
        g.backward(loss).unwrap();
        assert!(g.grad(unused).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_subgradient_at_kink_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = g.reduce_sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn rewind_truncates_tape_and_keeps_earlier_vars() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), false);
        let mark = g.mark();
        for _ in 0..10 {
            let y = g.relu(x);
            let _ = g.reduce_sum(y);
        }
        assert_eq!(g.len(), 21);
        g.rewind(mark);
        assert_eq!(g.len(), 1);
        assert_eq!(g.value(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_is_deterministic_across_rebuilds() {
        let build = || {
            let mut g = Graph::new();
            let x = g.leaf(t(&[2, 4], &[0.3, -1.2, 0.7, 2.2, -0.4, 0.0, 1.5, -2.0]), false);
            let w = g.leaf(t(&[4, 3], &[0.1; 12]), false);
            let h = g.matmul(x, w).unwrap();
            let s = g.softmax(h, 1).unwrap();
            g.value(s).clone()
        };
        assert!(build().bit_eq(&build()));
    }
}
