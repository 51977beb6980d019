//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already topologically sorted and `backward` walks it once in reverse.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{shape_err, Gradients, ParamId, ParamStore, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout masks are drawn from a stream seeded with this value.
    Train { seed: u64 },
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<u32>,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    Rows {
        x: NodeId,
        rows: Vec<usize>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(NodeId),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    rng: Option<ChaCha8Rng>,
}

fn check(op: &'static str, t: Tensor) -> Result<Tensor, TensorError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn dims(t: &Tensor, op: &'static str) -> Result<(usize, usize), TensorError> {
    if t.shape().len() != 2 {
        return Err(shape_err(op, &[t.shape()]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("internal shape bookkeeping")
}

/// `out[m,n] += a[m,k] · b[k,n]`
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
fn gemm_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
fn gemm_at(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            rng: match mode {
                Mode::Eval => None,
                Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            },
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.get(*p),
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (dims(ta, "matmul")?, dims(tb, "matmul")?);
        if k != k2 {
            return Err(shape_err("matmul", &[ta.shape(), tb.shape()]));
        }
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), tb.data(), &mut out, m, k, n);
        let v = check("matmul", mat(m, n, out))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (dims(ta, "matmul_t")?, dims(tb, "matmul_t")?);
        if k != k2 {
            return Err(shape_err("matmul_t", &[ta.shape(), tb.shape()]));
        }
        let mut out = vec![0.0; m * n];
        gemm_bt(ta.data(), tb.data(), &mut out, m, k, n);
        let v = check("matmul_t", mat(m, n, out))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    fn zip_same(&mut self, a: NodeId, b: NodeId, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, &[ta.shape(), tb.shape()]));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        check(op, Tensor::new(ta.shape().to_vec(), data)?)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tr) = (self.value(a), self.value(row));
        let ((m, n), (r, n2)) = (dims(ta, "add_row")?, dims(tr, "add_row")?);
        if r != 1 || n != n2 {
            return Err(shape_err("add_row", &[ta.shape(), tr.shape()]));
        }
        let bias = tr.data();
        let data = ta.data().chunks(n).flat_map(|row| row.iter().zip(bias).map(|(x, b)| x + b)).collect();
        let v = check("add_row", mat(m, n, data))?;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * factor).collect();
        let v = check("scale", Tensor::new(t.shape().to_vec(), data)?)?;
        Ok(self.push(v, Op::Scale(a, factor)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.max(0.0)).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Relu(a)))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let t = self.value(a);
        let (m, n) = dims(t, "softmax")?;
        let mut data = Vec::with_capacity(m * n);
        for row in t.data().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            data.extend(row.iter().map(|x| (x - max).exp()));
            let sum: f64 = data[start..].iter().sum();
            data[start..].iter_mut().for_each(|x| *x /= sum);
        }
        let v = check("softmax", mat(m, n, data))?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    /// Row-wise normalization to zero mean and unit variance, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = dims(tx, "layer_norm")?;
        if tg.shape() != [1, n] || tb.shape() != [1, n] {
            return Err(shape_err("layer_norm", &[tx.shape(), tg.shape(), tb.shape()]));
        }
        let mut normalized = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in tx.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                normalized.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let v = check("layer_norm", mat(m, n, out))?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Gathers rows of `table` (`[vocab, d]`) for each id.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId, TensorError> {
        let t = self.value(table);
        let (v, d) = dims(t, "embedding")?;
        if ids.is_empty() {
            return Err(TensorError::Invalid("embedding: empty id list".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let out = mat(ids.len(), d, data);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenates along columns; all inputs must have the same row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat: no inputs".into()));
        }
        let m = dims(self.value(parts[0]), "concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims(self.value(p), "concat")?;
            if r != m {
                let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.value(p).shape()).collect();
                return Err(shape_err("concat", &shapes));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let v = mat(m, total, data);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        let (m, n) = dims(t, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(shape_err("slice_cols", &[t.shape(), &[start, len]]));
        }
        let data = t.data().chunks(n).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let v = mat(m, len, data);
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    /// Selects rows by index.
    pub fn rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, TensorError> {
        let t = self.value(x);
        let (m, n) = dims(t, "rows")?;
        if rows.is_empty() {
            return Err(TensorError::Invalid("rows: empty selection".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(TensorError::Index {
                    op: "rows",
                    index: r,
                    size: m,
                });
            }
            data.extend_from_slice(&t.data()[r * n..(r + 1) * n]);
        }
        let v = mat(rows.len(), n, data);
        Ok(self.push(
            v,
            Op::Rows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if self.rng.is_none() || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let rng = self.rng.as_mut().expect("training mode");
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Dropout { x, mask }))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, TensorError> {
        let t = self.value(logits);
        let (m, n) = dims(t, "cross_entropy")?;
        if labels.len() != m {
            return Err(shape_err("cross_entropy", &[t.shape(), &[labels.len()]]));
        }
        let mut probs = Vec::with_capacity(m * n);
        let mut loss = 0.0;
        for (row, &label) in t.data().chunks(n).zip(labels) {
            if label >= n {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: label,
                    size: n,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        let v = check("cross_entropy", Tensor::scalar(loss / m as f64))?;
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Sum of all entries, as a `[1, 1]` scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.value(x).data().iter().sum();
        let v = check("sum", Tensor::scalar(s))?;
        Ok(self.push(v, Op::Sum(x)))
    }

    /// Gradients of the scalar `loss` with respect to every parameter in the store.
    /// Parameters the loss does not depend on get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err("backward", &[lv.shape()]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.params);

        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
            grads[id.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    for (o, v) in out.0[p.0].data_mut().iter_mut().zip(&g) {
                        *o += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.cols();
                    let mut ga = vec![0.0; m * k];
                    gemm_bt(&g, tb.data(), &mut ga, m, n, k);
                    add_into(acc(&mut grads, *a, m * k), &ga);
                    let gb = acc(&mut grads, *b, k * n);
                    gemm_at(ta.data(), &g, gb, m, k, n);
                }
                Op::MatMulT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.rows();
                    let ga = acc(&mut grads, *a, m * k);
                    gemm(&g, tb.data(), ga, m, n, k);
                    let gb = acc(&mut grads, *b, n * k);
                    gemm_at(&g, ta.data(), gb, m, n, k);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::AddRow(a, row) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    let n = self.value(*row).len();
                    let gr = acc(&mut grads, *row, n);
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = g.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = g.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    add_into(acc(&mut grads, *a, g.len()), &ga);
                    add_into(acc(&mut grads, *b, g.len()), &gb);
                }
                Op::Scale(a, f) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for (o, v) in ga.iter_mut().zip(&g) {
                        *o += v * f;
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((o, v), x) in ga.iter_mut().zip(&g).zip(x) {
                        if *x > 0.0 {
                            *o += v;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("softmax output").data();
                    let n = self.value(*a).cols();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((go, gy), yr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, dy), yv) in go.iter_mut().zip(gy).zip(yr) {
                            *o += yv * (dy - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let tg = self.value(*gain).data();
                    let n = tg.len();
                    let mut gg = vec![0.0; n];
                    let mut gbias = vec![0.0; n];
                    let mut gx = vec![0.0; g.len()];
                    for (r, (gy, xh)) in g.chunks(n).zip(normalized.chunks(n)).enumerate() {
                        let dxh: Vec<f64> = gy.iter().zip(tg).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxh.iter().sum();
                        let sum_dx: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        for j in 0..n {
                            gg[j] += gy[j] * xh[j];
                            gbias[j] += gy[j];
                            gx[r * n + j] = inv / n as f64 * (n as f64 * dxh[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                    add_into(acc(&mut grads, *x, gx.len()), &gx);
                    add_into(acc(&mut grads, *gain, n), &gg);
                    add_into(acc(&mut grads, *bias, n), &gbias);
                }
                Op::Embedding { table, ids } => {
                    let t = self.value(*table);
                    let d = t.cols();
                    let gt = acc(&mut grads, *table, t.len());
                    for (row, &id) in g.chunks(d).zip(ids) {
                        add_into(&mut gt[id as usize * d..(id as usize + 1) * d], row);
                    }
                }
                Op::ConcatCols(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
                    let total: usize = widths.iter().sum();
                    let m = g.len() / total;
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        let gp = acc(&mut grads, p, m * w);
                        for r in 0..m {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let tx = self.value(*x);
                    let n = tx.cols();
                    let len = node.value.as_ref().expect("slice output").cols();
                    let gx = acc(&mut grads, *x, tx.len());
                    for (r, row) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * n + start..r * n + start + len], row);
                    }
                }
                Op::Rows { x, rows } => {
                    let tx = self.value(*x);
                    let n = tx.cols();
                    let gx = acc(&mut grads, *x, tx.len());
                    for (row, &r) in g.chunks(n).zip(rows) {
                        add_into(&mut gx[r * n..(r + 1) * n], row);
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = acc(&mut grads, *x, g.len());
                    for ((o, v), m) in gx.iter_mut().zip(&g).zip(mask) {
                        *o += v * m;
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let n = self.value(*logits).cols();
                    let m = labels.len();
                    let scale = g[0] / m as f64;
                    let gl = acc(&mut grads, *logits, m * n);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..n {
                            let target = if j == label { 1.0 } else { 0.0 };
                            gl[r * n + j] += scale * (probs[r * n + j] - target);
                        }
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    let gx = acc(&mut grads, *x, n);
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
        }
        for t in &out.0 {
            if !t.is_finite() {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(out)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
