//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a reverse walk over the tape is a valid topological
//! order for backpropagation.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::tensor::{gemm, MatRef, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    SplitHeads { x: Var, batch: usize, width: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, width: usize, heads: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SoftCrossEntropy { logits: Var, targets: Rc<Tensor>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// Batched product over a leading group axis: `[g,m,k] x [g,k,n]`, or
    /// `[g,m,k] x [g,n,k]^T` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 3 || tb.ndim() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(shape_err("batch_matmul", ta, tb));
        }
        let (g, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(shape_err("batch_matmul", ta, tb));
        }
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let ad = &ta.data()[gi * m * k..(gi + 1) * m * k];
            let bd = &tb.data()[gi * k * n..(gi + 1) * k * n];
            let bref = if trans_b {
                MatRef::transposed(bd, k)
            } else {
                MatRef::row_major(bd, n)
            };
            gemm(
                m,
                k,
                n,
                MatRef::row_major(ad, k),
                bref,
                &mut out[gi * m * n..(gi + 1) * m * n],
                0.0,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::from_parts(vec![g, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Adds a bias vector along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.numel() != d {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            row.iter_mut().zip(tb.data()).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(value, Op::AddBias(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let value = Tensor::from_parts(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| v * s).collect(),
        );
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.masked_softmax(x, None)
            .expect("unmasked softmax has no shape constraints")
    }

    /// Softmax over the trailing axis restricted to entries where `keep` is
    /// true. Excluded entries are exactly zero in the output; a row with no
    /// kept entry is all-zero.
    pub fn masked_softmax(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        if let Some(k) = keep {
            if k.len() != tx.numel() {
                return Err(Error::Shape {
                    op: "masked_softmax",
                    lhs: tx.shape().to_vec(),
                    rhs: vec![k.len()],
                });
            }
        }
        let d = tx.last_dim();
        let mut out = vec![0.0; tx.numel()];
        for (r, (row, orow)) in tx.data().chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let kept = |j: usize| keep.map_or(true, |k| k[r * d + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if kept(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                if kept(j) {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            orow.iter_mut().for_each(|o| *o /= total);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        let ng = self.ng(x);
        Ok(self.push(value, Op::Softmax { x }, ng))
    }

    /// Layer normalisation over the trailing axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.last_dim();
        if tg.numel() != d || tb.numel() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.ndim() != 2 {
            return Err(shape_err("embedding", tt, tt));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!(
                "embedding index {bad} out of range for table with {v} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let value = Tensor::from_parts(vec![ids.len(), d], out);
        let ng = self.ng(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// `[batch*width, heads*dh]` to `[batch*heads, width, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, width: usize, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if tx.ndim() != 2 || tx.shape()[0] != batch * width || heads == 0 || d % heads != 0 {
            return Err(Error::Shape {
                op: "split_heads",
                lhs: tx.shape().to_vec(),
                rhs: vec![batch, width, heads],
            });
        }
        let dh = d / heads;
        let mut out = vec![0.0; tx.numel()];
        for b in 0..batch {
            for w in 0..width {
                let src = &tx.data()[(b * width + w) * d..(b * width + w + 1) * d];
                for h in 0..heads {
                    let dst = ((b * heads + h) * width + w) * dh;
                    out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        let value = Tensor::from_parts(vec![batch * heads, width, dh], out);
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::SplitHeads {
                x,
                batch,
                width,
                heads,
            },
            ng,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, width: usize, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 3 || tx.shape()[0] != batch * heads || tx.shape()[1] != width {
            return Err(Error::Shape {
                op: "merge_heads",
                lhs: tx.shape().to_vec(),
                rhs: vec![batch, width, heads],
            });
        }
        let dh = tx.shape()[2];
        let d = dh * heads;
        let mut out = vec![0.0; tx.numel()];
        for b in 0..batch {
            for h in 0..heads {
                for w in 0..width {
                    let src = ((b * heads + h) * width + w) * dh;
                    let dst = (b * width + w) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&tx.data()[src..src + dh]);
                }
            }
        }
        let value = Tensor::from_parts(vec![batch * width, d], out);
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::MergeHeads {
                x,
                batch,
                width,
                heads,
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::invalid(format!("gather row {bad} out of range ({n} rows)")));
        }
        let d = tx.last_dim();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(tx.row(r));
        }
        let value = Tensor::from_parts(vec![rows.len(), d], out);
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let c = tl.last_dim();
        if tl.rows() != targets.len() || targets.is_empty() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(format!("target {bad} out of range ({c} classes)")));
        }
        let probs = softmax_rows(tl.data(), c);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -log_softmax_at(&tl.data()[r * c..(r + 1) * c], t))
            .sum::<f64>()
            / targets.len() as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean cross-entropy against soft target distributions (rows of `targets`).
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Rc<Tensor>) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape() != targets.shape() || tl.numel() == 0 {
            return Err(shape_err("soft_cross_entropy", tl, &targets));
        }
        let c = tl.last_dim();
        let rows = tl.rows();
        let probs = softmax_rows(tl.data(), c);
        let mut loss = 0.0;
        for r in 0..rows {
            let z = &tl.data()[r * c..(r + 1) * c];
            let lse = log_sum_exp(z);
            for j in 0..c {
                let q = targets.data()[r * c + j];
                if q != 0.0 {
                    loss -= q * (z[j] - lse);
                }
            }
        }
        loss /= rows as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            },
            ng,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let dyd = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.ng(*a) {
                    let ga = acc(grads, *a, ta);
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::row_major(dyd, n),
                        MatRef::transposed(tb.data(), n),
                        ga,
                        1.0,
                    );
                }
                if self.ng(*b) {
                    let gb = acc(grads, *b, tb);
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(ta.data(), k),
                        MatRef::row_major(dyd, n),
                        gb,
                        1.0,
                    );
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (g, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = dy.shape()[2];
                if self.ng(*a) {
                    let ga = acc(grads, *a, ta);
                    for gi in 0..g {
                        let dyg = &dyd[gi * m * n..(gi + 1) * m * n];
                        let bg = &tb.data()[gi * k * n..(gi + 1) * k * n];
                        // c = a b  => da = dc b^T ; c = a b^T => da = dc b
                        let bref = if *trans_b {
                            MatRef::row_major(bg, k)
                        } else {
                            MatRef::transposed(bg, n)
                        };
                        gemm(
                            m,
                            n,
                            k,
                            MatRef::row_major(dyg, n),
                            bref,
                            &mut ga[gi * m * k..(gi + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if self.ng(*b) {
                    let gb = acc(grads, *b, tb);
                    for gi in 0..g {
                        let dyg = &dyd[gi * m * n..(gi + 1) * m * n];
                        let ag = &ta.data()[gi * m * k..(gi + 1) * m * k];
                        let out = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // db = dc^T a : [n,m] x [m,k]
                            gemm(
                                n,
                                m,
                                k,
                                MatRef::transposed(dyg, n),
                                MatRef::row_major(ag, k),
                                out,
                                1.0,
                            );
                        } else {
                            // db = a^T dc : [k,m] x [m,n]
                            gemm(
                                k,
                                m,
                                n,
                                MatRef::transposed(ag, k),
                                MatRef::row_major(dyg, n),
                                out,
                                1.0,
                            );
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        let gv = acc(grads, v, self.value(v));
                        gv.iter_mut().zip(dyd).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.ng(*x) {
                    let gx = acc(grads, *x, self.value(*x));
                    gx.iter_mut().zip(dyd).for_each(|(g, d)| *g += d);
                }
                if self.ng(*bias) {
                    let tb = self.value(*bias);
                    let d = tb.numel();
                    let gb = acc(grads, *bias, tb);
                    for row in dyd.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(g, v)| *g += v);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let ga = acc(grads, *a, ta);
                    for ((g, d), y) in ga.iter_mut().zip(dyd).zip(tb.data()) {
                        *g += d * y;
                    }
                }
                if self.ng(*b) {
                    let gb = acc(grads, *b, tb);
                    for ((g, d), x) in gb.iter_mut().zip(dyd).zip(ta.data()) {
                        *g += d * x;
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = acc(grads, *x, self.value(*x));
                gx.iter_mut().zip(dyd).for_each(|(g, d)| *g += d * s);
            }
            Op::Sum(x) => {
                let d = dyd[0];
                let gx = acc(grads, *x, self.value(*x));
                gx.iter_mut().for_each(|g| *g += d);
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let gx = acc(grads, *x, self.value(*x));
                for ((yr, dr), gr) in y.chunks(d).zip(dyd.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gr[j] += yr[j] * (dr[j] - dot);
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
                let tg = self.value(*gamma);
                let d = tg.numel();
                if self.ng(*x) {
                    let gx = acc(grads, *x, self.value(*x));
                    for r in 0..rstd.len() {
                        let dr = &dyd[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_g = 0.0;
                        let mut mean_gh = 0.0;
                        for j in 0..d {
                            let g = dr[j] * tg.data()[j];
                            mean_g += g;
                            mean_gh += g * hr[j];
                        }
                        mean_g /= d as f64;
                        mean_gh /= d as f64;
                        for j in 0..d {
                            let g = dr[j] * tg.data()[j];
                            gx[r * d + j] += rstd[r] * (g - mean_g - hr[j] * mean_gh);
                        }
                    }
                }
                if self.ng(*gamma) {
                    let gg = acc(grads, *gamma, tg);
                    for (dr, hr) in dyd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += dr[j] * hr[j];
                        }
                    }
                }
                if self.ng(*beta) {
                    let gb = acc(grads, *beta, self.value(*beta));
                    for dr in dyd.chunks(d) {
                        gb.iter_mut().zip(dr).for_each(|(g, v)| *g += v);
                    }
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let gx = acc(grads, *x, tx);
                for ((g, d), &v) in gx.iter_mut().zip(dyd).zip(tx.data()) {
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *g += d * (0.5 * (1.0 + t) + 0.5 * v * dt);
                }
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let gx = acc(grads, *x, tx);
                for ((g, d), &v) in gx.iter_mut().zip(dyd).zip(tx.data()) {
                    if v > 0.0 {
                        *g += d;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.shape()[1];
                let gt = acc(grads, *table, tt);
                for (r, &id) in ids.iter().enumerate() {
                    let src = &dyd[r * d..(r + 1) * d];
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(g, v)| *g += v);
                }
            }
            Op::SplitHeads {
                x,
                batch,
                width,
                heads,
            } => {
                let tx = self.value(*x);
                let d = tx.last_dim();
                let dh = d / heads;
                let gx = acc(grads, *x, tx);
                for b in 0..*batch {
                    for w in 0..*width {
                        for h in 0..*heads {
                            let src = ((b * heads + h) * width + w) * dh;
                            let dst = (b * width + w) * d + h * dh;
                            for e in 0..dh {
                                gx[dst + e] += dyd[src + e];
                            }
                        }
                    }
                }
            }
            Op::MergeHeads {
                x,
                batch,
                width,
                heads,
            } => {
                let tx = self.value(*x);
                let dh = tx.shape()[2];
                let d = dh * heads;
                let gx = acc(grads, *x, tx);
                for b in 0..*batch {
                    for h in 0..*heads {
                        for w in 0..*width {
                            let dst = ((b * heads + h) * width + w) * dh;
                            let src = (b * width + w) * d + h * dh;
                            for e in 0..dh {
                                gx[dst + e] += dyd[src + e];
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let tx = self.value(*x);
                let d = tx.last_dim();
                let gx = acc(grads, *x, tx);
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gx[r * d + j] += dyd[i * d + j];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let tl = self.value(*logits);
                let c = tl.last_dim();
                let scale = dyd[0] / targets.len() as f64;
                let gl = acc(grads, *logits, tl);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let tl = self.value(*logits);
                let c = tl.last_dim();
                let rows = tl.rows();
                let scale = dyd[0] / rows as f64;
                let gl = acc(grads, *logits, tl);
                for r in 0..rows {
                    let q = &targets.data()[r * c..(r + 1) * c];
                    let mass: f64 = q.iter().sum();
                    for j in 0..c {
                        gl[r * c + j] += scale * (probs[r * c + j] * mass - q[j]);
                    }
                }
            }
        }
    }
}

/// Mutable gradient buffer for `v`, zero-initialised on first touch.
fn acc<'g>(grads: &'g mut [Option<Tensor>], v: Var, like: &Tensor) -> &'g mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(like.shape().to_vec()))
        .data_mut()
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_softmax_at(z: &[f64], t: usize) -> f64 {
    z[t] - log_sum_exp(z)
}

/// Row-wise softmax of a flat `[rows, c]` buffer.
pub fn softmax_rows(data: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, orow) in data.chunks(c).zip(out.chunks_mut(c)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        orow.iter_mut().for_each(|o| *o /= total);
    }
    out
}
