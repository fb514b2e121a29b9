//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during a forward pass as a
//! node holding its output value and the ids of its inputs. [`Graph::backward`]
//! walks the tape in reverse creation order and accumulates vector-Jacobian
//! products into every node that (transitively) depends on a
//! `requires_grad` leaf.
//!
//! All matrices are row-major. Primitives that only make sense on matrices
//! (matmul, transpose, concat, slice) require 2-D inputs; row-wise primitives
//! (softmax, layer norm) operate on the last axis of any tensor.

use crate::error::{AutodiffError, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    L1 {
        pred: Var,
        target: Var,
        row_weights: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Var,
        row_weights: Vec<f64>,
    },
    BceLogits {
        logits: Var,
        labels: Vec<f64>,
        weights: Vec<f64>,
    },
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
}

/// Row layout of a packed multi-head attention call.
///
/// Samples of different lengths are stacked along the row axis; sample `s`
/// owns query rows `queries[s].0 .. queries[s].0 + queries[s].1` and key /
/// value rows described likewise by `keys[s]`. Queries only see keys of
/// their own sample. With `causal`, query `i` of a sample sees keys `0..=i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub heads: usize,
    pub queries: Vec<(usize, usize)>,
    pub keys: Vec<(usize, usize)>,
    pub causal: bool,
}

impl AttnLayout {
    /// Self-attention layout over consecutive segments of the given lengths.
    pub fn packed(heads: usize, lens: &[usize], causal: bool) -> Self {
        let mut segs = Vec::with_capacity(lens.len());
        let mut off = 0;
        for &l in lens {
            segs.push((off, l));
            off += l;
        }
        Self {
            heads,
            queries: segs.clone(),
            keys: segs,
            causal,
        }
    }

    fn visible(&self, i: usize, lk: usize) -> usize {
        if self.causal {
            (i + 1).min(lk)
        } else {
            lk
        }
    }

    fn prob_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.queries.len() + 1);
        let mut o = 0;
        for (q, k) in self.queries.iter().zip(&self.keys) {
            offs.push(o);
            o += self.heads * q.1 * k.1;
        }
        offs.push(o);
        offs
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
}

impl Graph {
    /// Inference-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_training(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that gradients do not flow into.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient on [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn mat_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(AutodiffError::Shape {
                op,
                detail: format!("expected a 2-D tensor, found {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    // ---- primitives ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul", a)?;
        let (k2, n) = self.mat_dims("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::Shape {
                op: "matmul",
                detail: format!("[{m}, {k}] x [{k2}, {n}]"),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum. `b` may also be a 1-D vector matching the last axis
    /// of `a`, in which case it is added to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            let out: Vec<f64> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect();
            return self.push("add", Tensor::from_parts(sa, out), Op::Add(a, b), &[a, b]);
        }
        if sb.len() == 1 && !sa.is_empty() && sa[sa.len() - 1] == sb[0] {
            let n = sb[0];
            let bv = self.value(b).data();
            let out: Vec<f64> = self
                .value(a)
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + bv[i % n])
                .collect();
            return self.push("add", Tensor::from_parts(sa, out), Op::AddRow(a, b), &[a, b]);
        }
        Err(AutodiffError::Shape {
            op: "add",
            detail: format!("{sa:?} + {sb:?}"),
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(AutodiffError::Shape {
                op: "mul",
                detail: format!("{sa:?} * {:?}", self.shape(b)),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        self.push("mul", Tensor::from_parts(sa, out), Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        self.push("scale", Tensor::from_parts(shape, out), Op::Scale(a, c), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![n, m], out), Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(AutodiffError::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape(a)),
            });
        }
        let data = self.value(a).data().to_vec();
        self.push("reshape", Tensor::from_parts(shape.to_vec(), data), Op::Reshape(a), &[a])
    }

    /// Concatenation of 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        match axis {
            0 => self.concat_rows(parts),
            1 => self.concat_cols(parts),
            _ => Err(AutodiffError::Shape {
                op: "concat",
                detail: format!("axis {axis} out of range for 2-D tensors"),
            }),
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::Shape {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let (_, cols) = self.mat_dims("concat", parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.mat_dims("concat", p)?;
            if c != cols {
                return Err(AutodiffError::Shape {
                    op: "concat",
                    detail: format!("row concat of widths {cols} and {c}"),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            "concat",
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::Shape {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let (rows, _) = self.mat_dims("concat", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat_dims("concat", p)?;
            if r != rows {
                return Err(AutodiffError::Shape {
                    op: "concat",
                    detail: format!("column concat of heights {rows} and {r}"),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..rows {
                data[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(
            "concat",
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.mat_dims("slice", a)?;
        if start > end || end > m {
            return Err(AutodiffError::Shape {
                op: "slice",
                detail: format!("rows {start}..{end} of [{m}, {n}]"),
            });
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        self.push(
            "slice",
            Tensor::from_parts(vec![end - start, n], data),
            Op::SliceRows(a, start),
            &[a],
        )
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.mat_dims("slice", a)?;
        if start > end || end > n {
            return Err(AutodiffError::Shape {
                op: "slice",
                detail: format!("columns {start}..{end} of [{m}, {n}]"),
            });
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        self.push("slice", Tensor::from_parts(vec![m, w], data), Op::SliceCols(a, start), &[a])
    }

    /// Softmax over the last axis. Entries equal to `-inf` receive exactly
    /// zero probability; a row that is entirely `-inf` is an error.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(AutodiffError::NonFinite { op: "softmax" });
            }
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let shape = t.shape().to_vec();
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis followed by the affine map
    /// `gamma * xhat + beta` (`gamma`, `beta` are 1-D of the last-axis size).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(AutodiffError::Shape {
                op: "layer_norm",
                detail: format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    t.shape(),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            });
        }
        let src = t.data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&x| gelu(x)).collect();
        let shape = t.shape().to_vec();
        self.push("gelu", Tensor::from_parts(shape, out), Op::Gelu(a), &[a])
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.mat_dims("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::Shape {
                op: "embedding",
                detail: format!("index {bad} out of range for table [{v}, {d}]"),
            });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            "embedding",
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Inverted dropout with keep-probability `1 - p`. The mask is a pure
    /// function of `key` and the element index. Identity outside training.
    pub fn dropout(&mut self, x: Var, p: f64, key: u64) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(AutodiffError::Shape {
                op: "dropout",
                detail: format!("probability {p} must be < 1"),
            });
        }
        let rng = CounterRng::new(key);
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|i| if rng.uniform(i as u64) < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        self.push("dropout", Tensor::from_parts(shape, out), Op::Dropout { x, mask }, &[x])
    }

    /// Writes `-inf` wherever `mask` is true (additive attention mask).
    /// This is the only primitive whose output may hold `-inf`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(AutodiffError::Shape {
                op: "masked_fill",
                detail: format!("mask of {} for tensor {:?}", mask.len(), t.shape()),
            });
        }
        let out: Vec<f64> = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { f64::NEG_INFINITY } else { v })
            .collect();
        if out.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(AutodiffError::NonFinite { op: "masked_fill" });
        }
        let shape = t.shape().to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push_raw(
            Tensor::from_parts(shape, out),
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    fn check_pair(&self, op: &'static str, a: Var, b: Var, row_weights: Option<&[f64]>) -> Result<Vec<f64>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(AutodiffError::Shape {
                op,
                detail: format!("prediction {:?} vs target {:?}", ta.shape(), tb.shape()),
            });
        }
        let rows = ta.rows();
        match row_weights {
            Some(w) if w.len() != rows => Err(AutodiffError::Shape {
                op,
                detail: format!("{} row weights for {rows} rows", w.len()),
            }),
            Some(w) => Ok(w.to_vec()),
            None => Ok(vec![1.0 / rows as f64; rows]),
        }
    }

    /// `sum_r w_r * mean_c |pred - target|`. Without weights every row gets
    /// `1 / rows`, i.e. the plain mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var, row_weights: Option<&[f64]>) -> Result<Var> {
        let w = self.check_pair("l1_loss", pred, target, row_weights)?;
        let (p, t) = (self.value(pred), self.value(target));
        let cols = p.cols();
        let mut total = 0.0;
        for (r, wr) in w.iter().enumerate() {
            if *wr == 0.0 {
                continue;
            }
            let s: f64 = p.row(r).iter().zip(t.row(r)).map(|(a, b)| (a - b).abs()).sum();
            total += wr * s / cols as f64;
        }
        self.push(
            "l1_loss",
            Tensor::scalar(total),
            Op::L1 {
                pred,
                target,
                row_weights: w,
            },
            &[pred, target],
        )
    }

    /// `sum_r w_r * mean_c (pred - target)^2`.
    pub fn mse_loss(&mut self, pred: Var, target: Var, row_weights: Option<&[f64]>) -> Result<Var> {
        let w = self.check_pair("mse_loss", pred, target, row_weights)?;
        let (p, t) = (self.value(pred), self.value(target));
        let cols = p.cols();
        let mut total = 0.0;
        for (r, wr) in w.iter().enumerate() {
            if *wr == 0.0 {
                continue;
            }
            let s: f64 = p.row(r).iter().zip(t.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
            total += wr * s / cols as f64;
        }
        self.push(
            "mse_loss",
            Tensor::scalar(total),
            Op::Mse {
                pred,
                target,
                row_weights: w,
            },
            &[pred, target],
        )
    }

    /// Weighted binary cross-entropy on logits: `sum_i w_i * bce(x_i, y_i)`.
    /// Without weights the plain mean over elements is taken. A logit of
    /// `±inf` paired with its matching label contributes exactly zero.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64], weights: Option<&[f64]>) -> Result<Var> {
        let x = self.value(logits);
        let n = x.len();
        if labels.len() != n {
            return Err(AutodiffError::Shape {
                op: "bce_with_logits",
                detail: format!("{} labels for {n} logits", labels.len()),
            });
        }
        let w = match weights {
            Some(w) if w.len() != n => {
                return Err(AutodiffError::Shape {
                    op: "bce_with_logits",
                    detail: format!("{} weights for {n} logits", w.len()),
                })
            }
            Some(w) => w.to_vec(),
            None => vec![1.0 / n as f64; n],
        };
        let mut total = 0.0;
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            let (xi, yi) = (x.data()[i], labels[i]);
            let mut l = 0.0;
            if yi != 0.0 {
                l += yi * softplus(-xi);
            }
            if yi != 1.0 {
                l += (1.0 - yi) * softplus(xi);
            }
            total += w[i] * l;
        }
        self.push(
            "bce_with_logits",
            Tensor::scalar(total),
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
                weights: w,
            },
            &[logits],
        )
    }

    /// Scaled dot-product attention with `layout.heads` heads splitting the
    /// feature axis evenly. `q: [nq, d]`, `k, v: [nk, d]`, output `[nq, d]`;
    /// query rows outside every segment are zero. Masked keys receive
    /// exactly zero probability.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: &AttnLayout) -> Result<Var> {
        let (nq, d) = self.mat_dims("attention", q)?;
        let (nk, dk) = self.mat_dims("attention", k)?;
        let shape_err = |detail: String| AutodiffError::Shape { op: "attention", detail };
        if dk != d || self.shape(v) != [nk, d] {
            return Err(shape_err(format!(
                "q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        let h = layout.heads;
        if h == 0 || d % h != 0 {
            return Err(shape_err(format!("{d} features do not split into {h} heads")));
        }
        if layout.queries.len() != layout.keys.len() {
            return Err(shape_err(format!(
                "{} query segments vs {} key segments",
                layout.queries.len(),
                layout.keys.len()
            )));
        }
        for (&(qs, ql), &(ks, kl)) in layout.queries.iter().zip(&layout.keys) {
            if qs + ql > nq || ks + kl > nk || (kl == 0 && ql > 0) {
                return Err(shape_err(format!(
                    "segment q {qs}+{ql} / k {ks}+{kl} outside [{nq}, {nk}] rows"
                )));
            }
        }
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let offs = layout.prob_offsets();
        let mut probs = vec![0.0; offs[offs.len() - 1]];
        let mut out = vec![0.0; nq * d];
        for (s, (&(qs, ql), &(ks, kl))) in layout.queries.iter().zip(&layout.keys).enumerate() {
            for head in 0..h {
                let c0 = head * dh;
                for i in 0..ql {
                    let qi = &qd[(qs + i) * d + c0..(qs + i) * d + c0 + dh];
                    let vis = layout.visible(i, kl);
                    let p = &mut probs[offs[s] + (head * ql + i) * kl..][..kl];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..vis {
                        let kj = &kd[(ks + j) * d + c0..(ks + j) * d + c0 + dh];
                        p[j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                        max = max.max(p[j]);
                    }
                    let mut sum = 0.0;
                    for pj in &mut p[..vis] {
                        *pj = (*pj - max).exp();
                        sum += *pj;
                    }
                    let o = &mut out[(qs + i) * d + c0..(qs + i) * d + c0 + dh];
                    for j in 0..vis {
                        p[j] /= sum;
                        let vj = &vd[(ks + j) * d + c0..(ks + j) * d + c0 + dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += p[j] * vc;
                        }
                    }
                }
            }
        }
        self.push(
            "attention",
            Tensor::from_parts(vec![nq, d], out),
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                probs,
            },
            &[q, k, v],
        )
    }

    /// Attention probabilities of an [`Graph::attention`] node, one
    /// `[heads, queries, keys]` tensor per segment.
    pub fn attention_probs(&self, v: Var) -> Option<Vec<Tensor>> {
        let Op::Attention { layout, probs, .. } = &self.nodes[v.0].op else {
            return None;
        };
        let offs = layout.prob_offsets();
        Some(
            layout
                .queries
                .iter()
                .zip(&layout.keys)
                .enumerate()
                .map(|(s, (q, k))| {
                    Tensor::from_parts(vec![layout.heads, q.1, k.1], probs[offs[s]..offs[s + 1]].to_vec())
                })
                .collect(),
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- backward -----------------------------------------------------

    /// Back-propagates from a scalar `loss`; returns gradients of every
    /// `requires_grad` leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::Shape {
                op: "backward",
                detail: format!("loss must be scalar, found {:?}", self.shape(loss)),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &gout, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), gout));
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if rg(*a) {
                    // dA = dC · Bᵀ
                    let da = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, val(*b).data(), true, da, true);
                }
                if rg(*b) {
                    // dB = Aᵀ · dC
                    let db = slot(grads, *b, k * n);
                    gemm(k, m, n, val(*a).data(), true, g, false, db, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        axpy(slot(grads, v, g.len()), g, 1.0);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if rg(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
                if rg(*b) {
                    let n = val(*b).len();
                    let db = slot(grads, *b, n);
                    for (i, gi) in g.iter().enumerate() {
                        db[i % n] += gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let bv = val(*b).data();
                    let da = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if rg(*b) {
                    let av = val(*a).data();
                    let db = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if rg(*a) {
                    axpy(slot(grads, *a, g.len()), g, *c);
                }
            }
            Op::Transpose(a) => {
                if rg(*a) {
                    let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let da = slot(grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if rg(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if rg(p) {
                        axpy(slot(grads, p, len), &g[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    if rg(p) {
                        let dp = slot(grads, p, rows * w);
                        for i in 0..rows {
                            for j in 0..w {
                                dp[i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                if rg(*a) {
                    let n = val(*a).shape()[1];
                    let len = val(*a).len();
                    let da = slot(grads, *a, len);
                    axpy(&mut da[start * n..start * n + g.len()], g, 1.0);
                }
            }
            Op::SliceCols(a, start) => {
                if rg(*a) {
                    let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let w = node.value.shape()[1];
                    let da = slot(grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..w {
                            da[i * n + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if rg(*a) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let da = slot(grads, *a, y.len());
                    for r in 0..node.value.rows() {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            da[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                if rg(*gamma) {
                    let dg = slot(grads, *gamma, cols);
                    for r in 0..rows {
                        for j in 0..cols {
                            dg[j] += g[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                }
                if rg(*beta) {
                    let db = slot(grads, *beta, cols);
                    for r in 0..rows {
                        for j in 0..cols {
                            db[j] += g[r * cols + j];
                        }
                    }
                }
                if rg(*x) {
                    let gam = val(*gamma).data().to_vec();
                    let dx = slot(grads, *x, rows * cols);
                    let mut dxh = vec![0.0; cols];
                    for r in 0..rows {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..cols {
                            dxh[j] = g[r * cols + j] * gam[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xh[j];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for j in 0..cols {
                            dx[r * cols + j] += rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if rg(*a) {
                    let xs = val(*a).data();
                    let da = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * gelu_grad(xs[i]);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if rg(*table) {
                    let d = val(*table).shape()[1];
                    let len = val(*table).len();
                    let dt = slot(grads, *table, len);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if rg(*x) {
                    let dx = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                if rg(*x) {
                    let dx = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        if !mask[i] {
                            dx[i] += g[i];
                        }
                    }
                }
            }
            Op::L1 {
                pred,
                target,
                row_weights,
            } => {
                let (p, t) = (val(*pred), val(*target));
                let cols = p.cols();
                let mut d = vec![0.0; p.len()];
                for (r, wr) in row_weights.iter().enumerate() {
                    let c = g[0] * wr / cols as f64;
                    for j in 0..cols {
                        let diff = p.data()[r * cols + j] - t.data()[r * cols + j];
                        d[r * cols + j] = c * sign(diff);
                    }
                }
                if rg(*pred) {
                    axpy(slot(grads, *pred, d.len()), &d, 1.0);
                }
                if rg(*target) {
                    axpy(slot(grads, *target, d.len()), &d, -1.0);
                }
            }
            Op::Mse {
                pred,
                target,
                row_weights,
            } => {
                let (p, t) = (val(*pred), val(*target));
                let cols = p.cols();
                let mut d = vec![0.0; p.len()];
                for (r, wr) in row_weights.iter().enumerate() {
                    let c = g[0] * wr * 2.0 / cols as f64;
                    for j in 0..cols {
                        d[r * cols + j] = c * (p.data()[r * cols + j] - t.data()[r * cols + j]);
                    }
                }
                if rg(*pred) {
                    axpy(slot(grads, *pred, d.len()), &d, 1.0);
                }
                if rg(*target) {
                    axpy(slot(grads, *target, d.len()), &d, -1.0);
                }
            }
            Op::BceLogits {
                logits,
                labels,
                weights,
            } => {
                if rg(*logits) {
                    let x = val(*logits).data();
                    let dx = slot(grads, *logits, x.len());
                    for i in 0..x.len() {
                        if weights[i] != 0.0 {
                            dx[i] += g[0] * weights[i] * (sigmoid(x[i]) - labels[i]);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let d = val(*q).shape()[1];
                let h = layout.heads;
                let dh = d / h;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = rg(*q).then(|| vec![0.0; qd.len()]);
                let mut dk = rg(*k).then(|| vec![0.0; kd.len()]);
                let mut dv = rg(*v).then(|| vec![0.0; vd.len()]);
                let offs = layout.prob_offsets();
                let mut ds = Vec::new();
                for (s, (&(qs, ql), &(ks, kl))) in layout.queries.iter().zip(&layout.keys).enumerate() {
                    for head in 0..h {
                        let c0 = head * dh;
                        for i in 0..ql {
                            let vis = layout.visible(i, kl);
                            let p = &probs[offs[s] + (head * ql + i) * kl..][..vis];
                            let go = &g[(qs + i) * d + c0..(qs + i) * d + c0 + dh];
                            ds.clear();
                            let mut dot = 0.0;
                            for j in 0..vis {
                                let vj = &vd[(ks + j) * d + c0..(ks + j) * d + c0 + dh];
                                let dp: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot += p[j] * dp;
                                ds.push(dp);
                            }
                            for j in 0..vis {
                                ds[j] = p[j] * (ds[j] - dot) * scale;
                            }
                            if let Some(dv) = dv.as_mut() {
                                for j in 0..vis {
                                    let dst = &mut dv[(ks + j) * d + c0..(ks + j) * d + c0 + dh];
                                    axpy(dst, go, p[j]);
                                }
                            }
                            if let Some(dq) = dq.as_mut() {
                                let dst = &mut dq[(qs + i) * d + c0..(qs + i) * d + c0 + dh];
                                for j in 0..vis {
                                    axpy(dst, &kd[(ks + j) * d + c0..(ks + j) * d + c0 + dh], ds[j]);
                                }
                            }
                            if let Some(dk) = dk.as_mut() {
                                let qi = &qd[(qs + i) * d + c0..(qs + i) * d + c0 + dh];
                                for j in 0..vis {
                                    axpy(&mut dk[(ks + j) * d + c0..(ks + j) * d + c0 + dh], qi, ds[j]);
                                }
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(buf) = buf {
                        axpy(slot(grads, var, buf.len()), &buf, 1.0);
                    }
                }
            }
            Op::Sum(a) => {
                if rg(*a) {
                    let n = val(*a).len();
                    let da = slot(grads, *a, n);
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `C (+)= op(A) · op(B)` with `op(A): [m, k]`, `op(B): [k, n]`, row-major.
/// A transposed operand is stored in its untransposed layout.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(g: &mut Graph, shape: &[usize], data: &[f64]) -> Var {
        g.variable(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = var(&mut g, &[3], &[0.0, 0.0, 0.0]);
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_positions_get_exact_zero_probability() {
        let mut g = Graph::new();
        let x = var(&mut g, &[2, 3], &[1.0, 2.0, 3.0, 0.5, -1.0, 4.0]);
        let m = g.masked_fill(x, &[false, true, true, false, false, true]).unwrap();
        let y = g.softmax(m).unwrap();
        let v = g.value(y);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.at2(1, 2), 0.0);
        assert!((v.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut g = Graph::new();
        let x = var(&mut g, &[1, 2], &[1.0, 2.0]);
        let m = g.masked_fill(x, &[true, true]).unwrap();
        assert!(matches!(g.softmax(m), Err(AutodiffError::NonFinite { op: "softmax" })));
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = var(&mut g, &[1, 4], &[2.5; 4]);
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_primitive_and_shapes() {
        let mut g = Graph::new();
        let a = var(&mut g, &[2, 3], &[0.0; 6]);
        let b = var(&mut g, &[2, 3], &[0.0; 6]);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let a = var(&mut g, &[1], &[1e200]);
        assert!(matches!(g.mul(a, a), Err(AutodiffError::NonFinite { op: "mul" })));
    }

    #[test]
    fn bce_with_matching_infinite_logits_is_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![f64::INFINITY, f64::NEG_INFINITY]));
        let l = g.bce_with_logits(x, &[1.0, 0.0], None).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval_mode_and_keyed_in_training() {
        let mut g = Graph::new();
        let x = var(&mut g, &[100], &[1.0; 100]);
        assert_eq!(g.dropout(x, 0.5, 7).unwrap(), x);

        let mut a = Graph::with_training(true);
        let xa = var(&mut a, &[100], &[1.0; 100]);
        let ya = a.dropout(xa, 0.5, 7).unwrap();
        let mut b = Graph::with_training(true);
        let xb = var(&mut b, &[100], &[1.0; 100]);
        let yb = b.dropout(xb, 0.5, 7).unwrap();
        assert_eq!(a.value(ya), b.value(yb));
        let zeros = a.value(ya).data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 20 && zeros < 80);
        assert!(a.value(ya).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = var(&mut g, &[2], &[1.0, 2.0]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }
}
