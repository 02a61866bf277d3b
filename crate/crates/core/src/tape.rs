//! Reverse-mode tape over tensor-level operations.
//!
//! A [`Tape`] records each forward operation as a node referencing earlier
//! nodes, so creation order is a topological order. [`Tape::backward`] walks
//! nodes in reverse creation order exactly once, accumulating adjoints, and
//! deposits gradients of [`ParamStore`] leaves into their accumulators.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{self, Tensor, DEGENERATE_NORM_EPS};
use std::collections::HashMap;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Affine { a: usize, k: f64 },
    Exp { a: usize },
    Log { a: usize },
    Sigmoid { a: usize },
    PowScalar { a: usize, e: f64 },
    Softmax { a: usize, axis: usize, temp: f64 },
    SumAxis { a: usize, axis: usize },
    MeanAxis { a: usize, axis: usize },
    MaxAxis { a: usize, axis: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    ClampMin { a: usize, floor: f64 },
    L2NormRows { a: usize },
    RowNorms { a: usize },
    MulRowBroadcast { col: usize, a: usize },
    ConcatRows { parts: Vec<usize> },
    ScaleByScalar { scalar: usize, a: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records forward operations for a single training context.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<usize, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; gradients flowing into it are discarded.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// A learnable leaf. Repeated calls for the same parameter return the
    /// same node, so fan-out accumulates gradients naturally.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id.0) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf { param: Some(id) });
        self.param_leaves.insert(id.0, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = tensor::transpose(self.value(a));
        self.push(out, Op::Transpose { a: a.0 })
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b)?;
        let vals = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), vals)?;
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b)?;
        let vals = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), vals)?;
        Ok(self.push(out, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b)?;
        let vals = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), vals)?;
        Ok(self.push(out, Op::Mul { a: a.0, b: b.0 }))
    }

    /// out = k·x + b, elementwise with scalar constants.
    pub fn affine(&mut self, a: Var, k: f64, b: f64) -> Var {
        let vals = self.value(a).values().iter().map(|x| k * x + b).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), vals).expect("same shape");
        self.push(out, Op::Affine { a: a.0, k })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let vals = self.value(a).values().iter().map(|x| x.exp()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), vals).expect("same shape");
        self.push(out, Op::Exp { a: a.0 })
    }

    pub fn log(&mut self, a: Var) -> Var {
        let vals = self.value(a).values().iter().map(|x| x.ln()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), vals).expect("same shape");
        self.push(out, Op::Log { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let vals = self
            .value(a)
            .values()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), vals).expect("same shape");
        self.push(out, Op::Sigmoid { a: a.0 })
    }

    /// Elementwise x^e with a constant exponent.
    pub fn pow_scalar(&mut self, a: Var, e: f64) -> Var {
        let vals = self.value(a).values().iter().map(|x| x.powf(e)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), vals).expect("same shape");
        self.push(out, Op::PowScalar { a: a.0, e })
    }

    pub fn softmax(&mut self, a: Var, axis: usize, temp: f64) -> Result<Var> {
        let out = tensor::softmax(self.value(a), axis, temp)?;
        Ok(self.push(out, Op::Softmax { a: a.0, axis, temp }))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = reduce_axis(self.value(a), axis, Reduce::Sum)?;
        Ok(self.push(out, Op::SumAxis { a: a.0, axis }))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = reduce_axis(self.value(a), axis, Reduce::Mean)?;
        Ok(self.push(out, Op::MeanAxis { a: a.0, axis }))
    }

    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = reduce_axis(self.value(a), axis, Reduce::Max)?;
        Ok(self.push(out, Op::MaxAxis { a: a.0, axis }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).values().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).values().iter().sum();
        self.push(Tensor::scalar(s / n), Op::MeanAll { a: a.0 })
    }

    /// Elementwise max(x, floor).
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let vals = self.value(a).values().iter().map(|x| x.max(floor)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), vals).expect("same shape");
        self.push(out, Op::ClampMin { a: a.0, floor })
    }

    /// Row-wise L2 normalization with the degenerate-row rule of
    /// [`tensor::l2_normalize_rows`]; degenerate rows get zero gradient.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let out = tensor::l2_normalize_rows(self.value(a));
        self.push(out, Op::L2NormRows { a: a.0 })
    }

    /// Per-row L2 norms of a 2-D tensor, as an M×1 column.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, _c) = (x.rows(), x.cols());
        let mut out = Tensor::zeros(&[r, 1]);
        for i in 0..r {
            let n = x.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            out.set2(i, 0, n);
        }
        self.push(out, Op::RowNorms { a: a.0 })
    }

    /// Scale each row of `a` by the matching entry of an M×1 column.
    pub fn mul_row_broadcast(&mut self, col: Var, a: Var) -> Result<Var> {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        if self.value(col).shape() != [r, 1] {
            return Err(Error::ShapeMismatch {
                op: "mul_row_broadcast",
                lhs: self.value(col).shape().to_vec(),
                rhs: self.value(a).shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let k = self.value(col).get2(i, 0);
            for j in 0..c {
                out.set2(i, j, k * self.value(a).get2(i, j));
            }
        }
        Ok(self.push(out, Op::MulRowBroadcast { col: col.0, a: a.0 }))
    }

    /// Stack 2-D parts with equal column counts into one matrix.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows needs at least one part".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            rows += self.value(p).rows();
        }
        let mut vals = Vec::with_capacity(rows * cols);
        for &p in parts {
            vals.extend_from_slice(self.value(p).values());
        }
        let out = Tensor::matrix(rows, cols, vals)?;
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.iter().map(|v| v.0).collect(),
            },
        ))
    }

    /// out = s·x where `scalar` is a 1-element node.
    pub fn scale_by(&mut self, scalar: Var, a: Var) -> Result<Var> {
        if !self.value(scalar).is_scalar() {
            return Err(Error::Contract(format!(
                "scale_by expects a scalar multiplier, got shape {:?}",
                self.value(scalar).shape()
            )));
        }
        let s = self.value(scalar).first();
        let vals = self.value(a).values().iter().map(|x| s * x).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), vals)?;
        Ok(self.push(out, Op::ScaleByScalar { scalar: scalar.0, a: a.0 }))
    }

    /// Fold a nonempty list of same-shape vars into their sum.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let mut acc = *vars
            .first()
            .ok_or_else(|| Error::Contract("add_all needs at least one term".into()))?;
        for &v in &vars[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a scalar loss. Gradients of parameter leaves are
    /// accumulated (`+=`) into the store; constants are discarded.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { param } => {
                    if let Some(id) = param {
                        store.accumulate_grad(*id, &g);
                    }
                }
                Op::Matmul { a, b } => {
                    let bt = tensor::transpose(&self.nodes[*b].value);
                    let at = tensor::transpose(&self.nodes[*a].value);
                    let da = tensor::matmul(&g, &bt).expect("backward matmul");
                    let db = tensor::matmul(&at, &g).expect("backward matmul");
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Transpose { a } => {
                    acc(&mut grads, *a, tensor::transpose(&g));
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub { a, b } => {
                    let mut neg = g.clone();
                    neg.scale_assign(-1.0);
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, neg);
                }
                Op::Mul { a, b } => {
                    let da = elementwise_mul(&g, &self.nodes[*b].value);
                    let db = elementwise_mul(&g, &self.nodes[*a].value);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Affine { a, k } => {
                    let mut da = g;
                    da.scale_assign(*k);
                    acc(&mut grads, *a, da);
                }
                Op::Exp { a } => {
                    acc(&mut grads, *a, elementwise_mul(&g, &self.nodes[i].value));
                }
                Op::Log { a } => {
                    let x = &self.nodes[*a].value;
                    let vals = g
                        .values()
                        .iter()
                        .zip(x.values())
                        .map(|(gv, xv)| gv / xv)
                        .collect();
                    acc(
                        &mut grads,
                        *a,
                        Tensor::new(x.shape().to_vec(), vals).expect("same shape"),
                    );
                }
                Op::Sigmoid { a } => {
                    let y = &self.nodes[i].value;
                    let vals = g
                        .values()
                        .iter()
                        .zip(y.values())
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect();
                    acc(
                        &mut grads,
                        *a,
                        Tensor::new(y.shape().to_vec(), vals).expect("same shape"),
                    );
                }
                Op::PowScalar { a, e } => {
                    let x = &self.nodes[*a].value;
                    let vals = g
                        .values()
                        .iter()
                        .zip(x.values())
                        .map(|(gv, xv)| {
                            if *e == 0.0 {
                                0.0
                            } else if *xv == 0.0 {
                                // subgradient guard: avoids inf·0 in the clip chain
                                if *e == 1.0 {
                                    *gv
                                } else {
                                    0.0
                                }
                            } else {
                                gv * e * xv.powf(e - 1.0)
                            }
                        })
                        .collect();
                    acc(
                        &mut grads,
                        *a,
                        Tensor::new(x.shape().to_vec(), vals).expect("same shape"),
                    );
                }
                Op::Softmax { a, axis, temp } => {
                    let y = &self.nodes[i].value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut da = Tensor::zeros(&[r, c]);
                    let (n_slices, slice_len) = if *axis == 0 { (c, r) } else { (r, c) };
                    for s in 0..n_slices {
                        let idx = |k: usize| if *axis == 0 { (k, s) } else { (s, k) };
                        let mut dot = 0.0;
                        for k in 0..slice_len {
                            let (ri, ci) = idx(k);
                            dot += g.get2(ri, ci) * y.get2(ri, ci);
                        }
                        for k in 0..slice_len {
                            let (ri, ci) = idx(k);
                            let v = y.get2(ri, ci) * (g.get2(ri, ci) - dot) / temp;
                            da.set2(ri, ci, v);
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::SumAxis { a, axis } => {
                    acc(&mut grads, *a, broadcast_axis(&g, &self.nodes[*a].value, *axis, 1.0));
                }
                Op::MeanAxis { a, axis } => {
                    let x = &self.nodes[*a].value;
                    let n = if *axis == 0 { x.rows() } else { x.cols() } as f64;
                    acc(&mut grads, *a, broadcast_axis(&g, x, *axis, 1.0 / n));
                }
                Op::MaxAxis { a, axis } => {
                    let x = &self.nodes[*a].value;
                    let (r, c) = (x.rows(), x.cols());
                    let mut da = Tensor::zeros(&[r, c]);
                    let (n_slices, slice_len) = if *axis == 0 { (c, r) } else { (r, c) };
                    for s in 0..n_slices {
                        let idx = |k: usize| if *axis == 0 { (k, s) } else { (s, k) };
                        // gradient routes to the first argmax for determinism
                        let mut best = 0;
                        let mut best_v = f64::NEG_INFINITY;
                        for k in 0..slice_len {
                            let (ri, ci) = idx(k);
                            let v = x.get2(ri, ci);
                            if v > best_v {
                                best_v = v;
                                best = k;
                            }
                        }
                        let (ri, ci) = idx(best);
                        let gv = if *axis == 0 { g.get2(0, s) } else { g.get2(s, 0) };
                        da.set2(ri, ci, gv);
                    }
                    acc(&mut grads, *a, da);
                }
                Op::SumAll { a } => {
                    let x = &self.nodes[*a].value;
                    acc(&mut grads, *a, Tensor::full(x.shape(), g.first()));
                }
                Op::MeanAll { a } => {
                    let x = &self.nodes[*a].value;
                    acc(
                        &mut grads,
                        *a,
                        Tensor::full(x.shape(), g.first() / x.len() as f64),
                    );
                }
                Op::ClampMin { a, floor } => {
                    let x = &self.nodes[*a].value;
                    let vals = g
                        .values()
                        .iter()
                        .zip(x.values())
                        .map(|(gv, xv)| if *xv >= *floor { *gv } else { 0.0 })
                        .collect();
                    acc(
                        &mut grads,
                        *a,
                        Tensor::new(x.shape().to_vec(), vals).expect("same shape"),
                    );
                }
                Op::L2NormRows { a } => {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[i].value;
                    let (r, c) = (x.rows(), x.cols());
                    let mut da = Tensor::zeros(&[r, c]);
                    for ri in 0..r {
                        let norm = x
                            .row_slice(ri)
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt();
                        if norm < DEGENERATE_NORM_EPS {
                            continue; // constant uniform output, zero gradient
                        }
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += g.get2(ri, j) * y.get2(ri, j);
                        }
                        for j in 0..c {
                            da.set2(ri, j, (g.get2(ri, j) - y.get2(ri, j) * dot) / norm);
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::RowNorms { a } => {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[i].value;
                    let (r, c) = (x.rows(), x.cols());
                    let mut da = Tensor::zeros(&[r, c]);
                    for ri in 0..r {
                        let norm = y.get2(ri, 0);
                        if norm < DEGENERATE_NORM_EPS {
                            continue;
                        }
                        let gv = g.get2(ri, 0);
                        for j in 0..c {
                            da.set2(ri, j, gv * x.get2(ri, j) / norm);
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::MulRowBroadcast { col, a } => {
                    let x = &self.nodes[*a].value;
                    let k = &self.nodes[*col].value;
                    let (r, c) = (x.rows(), x.cols());
                    let mut da = Tensor::zeros(&[r, c]);
                    let mut dcol = Tensor::zeros(&[r, 1]);
                    for ri in 0..r {
                        let kv = k.get2(ri, 0);
                        let mut dot = 0.0;
                        for j in 0..c {
                            da.set2(ri, j, g.get2(ri, j) * kv);
                            dot += g.get2(ri, j) * x.get2(ri, j);
                        }
                        dcol.set2(ri, 0, dot);
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *col, dcol);
                }
                Op::ConcatRows { parts } => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let r = self.nodes[p].value.rows();
                        let vals = g.values()[offset * cols..(offset + r) * cols].to_vec();
                        acc(
                            &mut grads,
                            p,
                            Tensor::matrix(r, cols, vals).expect("split preserves counts"),
                        );
                        offset += r;
                    }
                }
                Op::ScaleByScalar { scalar, a } => {
                    let s = self.nodes[*scalar].value.first();
                    let x = &self.nodes[*a].value;
                    let mut da = g.clone();
                    da.scale_assign(s);
                    let ds: f64 = g
                        .values()
                        .iter()
                        .zip(x.values())
                        .map(|(gv, xv)| gv * xv)
                        .sum();
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *scalar, Tensor::scalar(ds));
                }
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
    match &mut grads[idx] {
        Some(t) => t.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn elementwise_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let vals = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x * y)
        .collect();
    Tensor::new(a.shape().to_vec(), vals).expect("same shape")
}

enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Reduce along `axis`, keeping it as size 1 so results stay 2-D.
fn reduce_axis(x: &Tensor, axis: usize, how: Reduce) -> Result<Tensor> {
    if axis > 1 {
        return Err(Error::InvalidParameter(format!(
            "reduction axis must be 0 or 1, got {axis}"
        )));
    }
    let (r, c) = (x.rows(), x.cols());
    let (out_r, out_c) = if axis == 0 { (1, c) } else { (r, 1) };
    let mut out = Tensor::zeros(&[out_r, out_c]);
    let (n_slices, slice_len) = if axis == 0 { (c, r) } else { (r, c) };
    for s in 0..n_slices {
        let idx = |k: usize| if axis == 0 { (k, s) } else { (s, k) };
        let v = match how {
            Reduce::Sum | Reduce::Mean => {
                let mut acc = 0.0;
                for k in 0..slice_len {
                    let (i, j) = idx(k);
                    acc += x.get2(i, j);
                }
                if matches!(how, Reduce::Mean) {
                    acc / slice_len as f64
                } else {
                    acc
                }
            }
            Reduce::Max => {
                let mut acc = f64::NEG_INFINITY;
                for k in 0..slice_len {
                    let (i, j) = idx(k);
                    acc = acc.max(x.get2(i, j));
                }
                acc
            }
        };
        if axis == 0 {
            out.set2(0, s, v);
        } else {
            out.set2(s, 0, v);
        }
    }
    Ok(out)
}

/// Expand a keepdim-reduced gradient back over `axis` of `like`, scaled by `k`.
fn broadcast_axis(g: &Tensor, like: &Tensor, axis: usize, k: f64) -> Tensor {
    let (r, c) = (like.rows(), like.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        for j in 0..c {
            let gv = if axis == 0 { g.get2(0, j) } else { g.get2(i, 0) };
            out.set2(i, j, gv * k);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register(name, t).unwrap();
        (s, id)
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let (mut store, id) = store_with("p", Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let loss = tape.sum_all(p);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad(id).values().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_of_half_square_is_value() {
        let t = Tensor::vector(vec![0.5, -1.25, 3.0]);
        let (mut store, id) = store_with("p", t.clone());
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let sq = tape.mul(p, p).unwrap();
        let sum = tape.sum_all(sq);
        let loss = tape.affine(sum, 0.5, 0.0);
        tape.backward(loss, &mut store).unwrap();
        for (g, v) in store.grad(id).values().iter().zip(t.values()) {
            assert!((g - v).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let (mut store, id) = store_with("p", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let err = tape.backward(p, &mut store).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn fanout_accumulates() {
        // loss = sum(p) + sum(p) must give grad 2.
        let (mut store, id) = store_with("p", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let p1 = tape.param(&store, id);
        let p2 = tape.param(&store, id);
        assert_eq!(p1, p2);
        let s1 = tape.sum_all(p1);
        let s2 = tape.sum_all(p2);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad(id).values().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn three_sgd_steps_match_geometric_recurrence() {
        // f(w) = (w-3)^2 from w=0, lr=0.1: w_k - 3 = (1 - 2·lr)^k (w_0 - 3).
        let (mut store, id) = store_with("w", Tensor::scalar(0.0));
        let lr = 0.1;
        for _ in 0..3 {
            let mut tape = Tape::new();
            let w = tape.param(&store, id);
            let shifted = tape.affine(w, 1.0, -3.0);
            let sq = tape.mul(shifted, shifted).unwrap();
            let loss = tape.sum_all(sq);
            tape.backward(loss, &mut store).unwrap();
            crate::param::sgd_step(&mut store, lr).unwrap();
        }
        let expected = 3.0 + (1.0 - 2.0 * lr).powi(3) * (0.0 - 3.0);
        assert!((store.value(id).first() - expected).abs() < 1e-12);
    }

    #[test]
    fn concat_rows_splits_gradient() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let b = store.register("b", Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let va = tape.param(&store, a);
        let vb = tape.param(&store, b);
        let cat = tape.concat_rows(&[va, vb]).unwrap();
        assert_eq!(tape.value(cat).shape(), &[3, 2]);
        // weight rows differently so the split is observable
        let w = tape.constant(Tensor::matrix(3, 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap());
        let prod = tape.mul(cat, w).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(a).values(), &[1.0, 1.0]);
        assert_eq!(store.grad(b).values(), &[2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn composed_graph_matches_manual_chain_rule() {
        // loss = Σ (X·A)^2 on 2×2 ⟹ dX = 2 (X·A) Aᵀ.
        let x = Tensor::matrix(2, 2, vec![0.3, -0.7, 1.1, 0.4]).unwrap();
        let a = Tensor::matrix(2, 2, vec![0.9, 0.2, -0.5, 1.3]).unwrap();
        let (mut store, id) = store_with("x", x.clone());
        let mut tape = Tape::new();
        let vx = tape.param(&store, id);
        let va = tape.constant(a.clone());
        let xa = tape.matmul(vx, va).unwrap();
        let sq = tape.mul(xa, xa).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss, &mut store).unwrap();

        let xa_val = tensor::matmul(&x, &a).unwrap();
        let mut two_xa = xa_val.clone();
        two_xa.scale_assign(2.0);
        let expected = tensor::matmul(&two_xa, &tensor::transpose(&a)).unwrap();
        for (g, e) in store.grad(id).values().iter().zip(expected.values()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn ops_are_deterministic() {
        let x = Tensor::matrix(3, 3, (0..9).map(|i| (i as f64).sin()).collect()).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let s = tape.softmax(v, 0, 4.0).unwrap();
            let e = tape.exp(s);
            let n = tape.l2_normalize_rows(e);
            tape.value(n).values().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical inputs must produce bit-identical outputs");
    }
}
