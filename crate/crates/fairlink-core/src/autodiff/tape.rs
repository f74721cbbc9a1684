//! Define-by-run tape: each op computes its value immediately, records its
//! parents, and knows how to push gradients back to them. Backward walks the
//! recording order exactly once, in reverse.

use std::sync::Arc;

use super::{AdError, Tensor};
use crate::num::ordered_sum;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Batch statistics a training-mode batch-norm observed, for the caller to
/// fold into running statistics.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Population (biased) variance.
    pub var: Vec<f64>,
}

const BN_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Relu { x: Var },
    /// Normalizes each feature over the row axis with the recorded batch
    /// statistics (train) or supplied running statistics (eval). In eval
    /// mode the statistics are constants, so the backward pass loses the
    /// batch-coupling terms.
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, var: Vec<f64>, train: bool },
    /// Row k becomes the mean of all other rows (zero when there is one row).
    NeighborMean { x: Var },
    /// Mean over all rows, giving a single row.
    MeanRows { x: Var },
    ConcatCols { xs: Vec<Var> },
    SliceCols { x: Var, from: usize, to: usize },
    SliceRows { x: Var, from: usize, to: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddConst { x: Var, c: f64 },
    Square { x: Var },
    Sqrt { x: Var },
    Recip { x: Var },
    Log2 { x: Var },
    Abs { x: Var },
    SumAll { x: Var },
    RowSum { x: Var },
    /// Right-multiplication by a constant matrix (no gradient to it).
    MatConst { x: Var, w: Arc<Tensor> },
    /// Whole-tensor multiplication by a scalar node.
    ScaleVar { x: Var, s: Var },
    /// Exact minimum of scalar nodes; subgradient goes to the first argmin.
    MinScalars { xs: Vec<Var>, argmin: usize },
    StopGrad { x: Var },
    /// Row-wise one-hot of the argmax (ties to the smaller column). Piecewise
    /// constant, so its backward is zero.
    OneHotArgmaxRows { x: Var },
    /// Row-wise y = |x| / sum|x|; an all-zero row falls back to uniform.
    NormalizeRowsAbs { x: Var },
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Per-node gradients produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled if the loss never touched it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

fn mismatch(context: &str) -> AdError {
    AdError::ShapeMismatch { context: context.to_string() }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new(), consumed: false }
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

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// Record an input or parameter. Shared `Arc`s keep large parameter
    /// tensors unduplicated across per-sample tapes.
    pub fn leaf(&mut self, value: Arc<Tensor>) -> Var {
        self.push_unchecked(Op::Leaf, value)
    }

    pub fn leaf_owned(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value))
    }

    fn push_unchecked(&mut self, op: Op, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, context: &str) -> Result<Var, AdError> {
        if !value.all_finite() {
            return Err(AdError::NonFinite { context: context.to_string() });
        }
        Ok(self.push_unchecked(op, Arc::new(value)))
    }

    fn want_matrix(&self, v: Var, context: &str) -> Result<(usize, usize), AdError> {
        let t = self.value(v);
        if t.shape.len() == 2 {
            Ok((t.shape[0], t.shape[1]))
        } else {
            Err(mismatch(context))
        }
    }

    /// y = x·w + b with x:[r,i], w:[i,o], b:[o].
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AdError> {
        let (r, i) = self.want_matrix(x, "affine input")?;
        let (wi, o) = self.want_matrix(w, "affine weight")?;
        if wi != i || self.value(b).numel() != o {
            return Err(mismatch("affine shapes"));
        }
        let xv = self.value(x).data.clone();
        let wv = self.value(w).data.clone();
        let bv = self.value(b).data.clone();
        let mut out = vec![0.0; r * o];
        for rr in 0..r {
            for ii in 0..i {
                let xi = xv[rr * i + ii];
                if xi == 0.0 {
                    continue;
                }
                let wrow = &wv[ii * o..(ii + 1) * o];
                let orow = &mut out[rr * o..(rr + 1) * o];
                for oo in 0..o {
                    orow[oo] += xi * wrow[oo];
                }
            }
            for oo in 0..o {
                out[rr * o + oo] += bv[oo];
            }
        }
        self.push(Op::Affine { x, w, b }, Tensor::from_vec(&[r, o], out), "affine")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AdError> {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a.max(0.0)).collect(),
        };
        self.push(Op::Relu { x }, out, "relu")
    }

    /// Training-mode batch norm over the row axis; returns the observed batch
    /// statistics so the caller can fold running averages.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats), AdError> {
        let (r, c) = self.want_matrix(x, "batchnorm input")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(mismatch("batchnorm parameter width"));
        }
        let v = self.value(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        // Canonical addend order keeps row permutations bit-exact.
        let mut col = vec![0.0; r];
        for j in 0..c {
            for i in 0..r {
                col[i] = v.at2(i, j);
            }
            mean[j] = ordered_sum(&mut col) / r as f64;
            for i in 0..r {
                let d = v.at2(i, j) - mean[j];
                col[i] = d * d;
            }
            var[j] = ordered_sum(&mut col) / r as f64;
        }
        let stats = BatchStats { mean: mean.clone(), var: var.clone() };
        let out = self.bn_forward(x, gamma, beta, &mean, &var)?;
        let id = self.push(
            Op::BatchNorm { x, gamma, beta, mean, var, train: true },
            out,
            "batchnorm(train)",
        )?;
        Ok((id, stats))
    }

    /// Eval-mode batch norm against frozen running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var, AdError> {
        let (_, c) = self.want_matrix(x, "batchnorm input")?;
        if self.value(gamma).numel() != c
            || self.value(beta).numel() != c
            || mean.len() != c
            || var.len() != c
        {
            return Err(mismatch("batchnorm statistics width"));
        }
        let out = self.bn_forward(x, gamma, beta, mean, var)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            var: var.to_vec(),
            train: false,
        };
        self.push(op, out, "batchnorm(eval)")
    }

    fn bn_forward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Tensor, AdError> {
        let v = self.value(x);
        let (r, c) = (v.shape[0], v.shape[1]);
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            let s = (var[j] + BN_EPS).sqrt();
            for i in 0..r {
                out[i * c + j] = g[j] * (v.at2(i, j) - mean[j]) / s + b[j];
            }
        }
        Ok(Tensor::from_vec(&[r, c], out))
    }

    pub fn neighbor_mean(&mut self, x: Var) -> Result<Var, AdError> {
        let (r, c) = self.want_matrix(x, "neighbor_mean input")?;
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        if r > 1 {
            // Canonical addend order keeps row permutations bit-exact.
            let mut col = vec![0.0; r];
            let inv = 1.0 / (r - 1) as f64;
            for j in 0..c {
                for i in 0..r {
                    col[i] = v.at2(i, j);
                }
                let total = ordered_sum(&mut col);
                for i in 0..r {
                    out[i * c + j] = (total - v.at2(i, j)) * inv;
                }
            }
        }
        self.push(Op::NeighborMean { x }, Tensor::from_vec(&[r, c], out), "neighbor_mean")
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var, AdError> {
        let (r, c) = self.want_matrix(x, "mean_rows input")?;
        let v = self.value(x);
        let mut out = vec![0.0; c];
        // Canonical addend order keeps row permutations bit-exact.
        let mut col = vec![0.0; r];
        for (j, o) in out.iter_mut().enumerate() {
            for i in 0..r {
                col[i] = v.at2(i, j);
            }
            *o = ordered_sum(&mut col) / r as f64;
        }
        self.push(Op::MeanRows { x }, Tensor::from_vec(&[1, c], out), "mean_rows")
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, AdError> {
        if xs.is_empty() {
            return Err(mismatch("concat of nothing"));
        }
        let r = self.want_matrix(xs[0], "concat input")?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (ri, ci) = self.want_matrix(x, "concat input")?;
            if ri != r {
                return Err(mismatch("concat row counts"));
            }
            widths.push(ci);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut base = 0usize;
        for (&x, &w) in xs.iter().zip(&widths) {
            let v = self.value(x);
            for i in 0..r {
                out[i * total + base..i * total + base + w]
                    .copy_from_slice(&v.data[i * w..(i + 1) * w]);
            }
            base += w;
        }
        self.push(Op::ConcatCols { xs: xs.to_vec() }, Tensor::from_vec(&[r, total], out), "concat")
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var, AdError> {
        let (r, c) = self.want_matrix(x, "slice_cols input")?;
        if from >= to || to > c {
            return Err(mismatch("slice_cols bounds"));
        }
        let v = self.value(x);
        let w = to - from;
        let mut out = vec![0.0; r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&v.data[i * c + from..i * c + to]);
        }
        self.push(Op::SliceCols { x, from, to }, Tensor::from_vec(&[r, w], out), "slice_cols")
    }

    pub fn slice_rows(&mut self, x: Var, from: usize, to: usize) -> Result<Var, AdError> {
        let (r, c) = self.want_matrix(x, "slice_rows input")?;
        if from >= to || to > r {
            return Err(mismatch("slice_rows bounds"));
        }
        let v = self.value(x);
        let out = v.data[from * c..to * c].to_vec();
        self.push(
            Op::SliceRows { x, from, to },
            Tensor::from_vec(&[to - from, c], out),
            "slice_rows",
        )
    }

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var) -> Op,
        context: &str,
    ) -> Result<Var, AdError> {
        if self.value(a).shape != self.value(b).shape {
            return Err(mismatch(context));
        }
        let out = Tensor {
            shape: self.value(a).shape.clone(),
            data: self
                .value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        };
        self.push(make(a, b), out, context)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary_same_shape(a, b, |x, y| x + y, |a, b| Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary_same_shape(a, b, |x, y| x - y, |a, b| Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary_same_shape(a, b, |x, y| x * y, |a, b| Op::Mul { a, b }, "mul")
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        make: impl Fn(Var) -> Op,
        context: &str,
    ) -> Result<Var, AdError> {
        let out = Tensor {
            shape: self.value(x).shape.clone(),
            data: self.value(x).data.iter().map(|&v| f(v)).collect(),
        };
        self.push(make(x), out, context)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, AdError> {
        self.unary(x, |v| v * c, |x| Op::Scale { x, c }, "scale")
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var, AdError> {
        self.unary(x, |v| v + c, |x| Op::AddConst { x, c }, "add_const")
    }

    pub fn square(&mut self, x: Var) -> Result<Var, AdError> {
        self.unary(x, |v| v * v, |x| Op::Square { x }, "square")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, AdError> {
        self.unary(x, f64::sqrt, |x| Op::Sqrt { x }, "sqrt")
    }

    pub fn recip(&mut self, x: Var) -> Result<Var, AdError> {
        self.unary(x, f64::recip, |x| Op::Recip { x }, "recip")
    }

    pub fn log2(&mut self, x: Var) -> Result<Var, AdError> {
        self.unary(x, f64::log2, |x| Op::Log2 { x }, "log2")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, AdError> {
        self.unary(x, f64::abs, |x| Op::Abs { x }, "abs")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, AdError> {
        // Canonical addend order keeps row permutations bit-exact.
        let mut vals = self.value(x).data.clone();
        let s = ordered_sum(&mut vals);
        self.push(Op::SumAll { x }, Tensor::scalar(s), "sum_all")
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var, AdError> {
        let (r, c) = self.want_matrix(x, "row_sum input")?;
        let v = self.value(x);
        let out: Vec<f64> = (0..r).map(|i| (0..c).map(|j| v.at2(i, j)).sum()).collect();
        self.push(Op::RowSum { x }, Tensor::from_vec(&[r, 1], out), "row_sum")
    }

    /// x·w for a constant matrix w that receives no gradient.
    pub fn mat_const(&mut self, x: Var, w: Arc<Tensor>) -> Result<Var, AdError> {
        let (r, i) = self.want_matrix(x, "mat_const input")?;
        if w.shape.len() != 2 || w.shape[0] != i {
            return Err(mismatch("mat_const shapes"));
        }
        let o = w.shape[1];
        let v = self.value(x);
        let mut out = vec![0.0; r * o];
        for rr in 0..r {
            for ii in 0..i {
                let xi = v.data[rr * i + ii];
                if xi == 0.0 {
                    continue;
                }
                for oo in 0..o {
                    out[rr * o + oo] += xi * w.data[ii * o + oo];
                }
            }
        }
        self.push(Op::MatConst { x, w }, Tensor::from_vec(&[r, o], out), "mat_const")
    }

    /// Multiply every element of x by the scalar node s.
    pub fn scale_var(&mut self, x: Var, s: Var) -> Result<Var, AdError> {
        if !self.value(s).is_scalar() {
            return Err(mismatch("scale_var scalar"));
        }
        let sv = self.value(s).data[0];
        let out = Tensor {
            shape: self.value(x).shape.clone(),
            data: self.value(x).data.iter().map(|&v| v * sv).collect(),
        };
        self.push(Op::ScaleVar { x, s }, out, "scale_var")
    }

    /// Exact minimum over scalar nodes; ties resolve to the lowest index.
    pub fn min_scalars(&mut self, xs: &[Var]) -> Result<Var, AdError> {
        if xs.is_empty() {
            return Err(mismatch("min of nothing"));
        }
        let mut argmin = 0usize;
        let mut best = f64::INFINITY;
        for (i, &x) in xs.iter().enumerate() {
            if !self.value(x).is_scalar() {
                return Err(mismatch("min_scalars operand"));
            }
            let v = self.value(x).data[0];
            if v < best {
                best = v;
                argmin = i;
            }
        }
        self.push(
            Op::MinScalars { xs: xs.to_vec(), argmin },
            Tensor::scalar(best),
            "min_scalars",
        )
    }

    pub fn stop_grad(&mut self, x: Var) -> Result<Var, AdError> {
        let out = self.value(x).clone();
        self.push(Op::StopGrad { x }, out, "stop_grad")
    }

    pub fn one_hot_argmax_rows(&mut self, x: Var) -> Result<Var, AdError> {
        let (r, c) = self.want_matrix(x, "one_hot input")?;
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let mut best = 0usize;
            for j in 1..c {
                if v.at2(i, j) > v.at2(i, best) {
                    best = j;
                }
            }
            out[i * c + best] = 1.0;
        }
        self.push(Op::OneHotArgmaxRows { x }, Tensor::from_vec(&[r, c], out), "one_hot")
    }

    /// Row-stochastic magnitudes: y = |x| / sum|x| per row. An all-zero row
    /// yields the uniform distribution (and a zero gradient), logged once per
    /// occurrence since it usually signals a degenerate readout.
    pub fn normalize_rows_abs(&mut self, x: Var) -> Result<Var, AdError> {
        let (r, c) = self.want_matrix(x, "normalize input")?;
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let s: f64 = (0..c).map(|j| v.at2(i, j).abs()).sum();
            if s > 0.0 {
                for j in 0..c {
                    out[i * c + j] = v.at2(i, j).abs() / s;
                }
            } else {
                log::warn!("all-zero association row {i}: falling back to uniform");
                for j in 0..c {
                    out[i * c + j] = 1.0 / c as f64;
                }
            }
        }
        self.push(Op::NormalizeRowsAbs { x }, Tensor::from_vec(&[r, c], out), "normalize_rows")
    }

    /// Reverse pass from a scalar loss. Consumes the tape: a second call is
    /// an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AdError> {
        if self.consumed {
            return Err(AdError::TapeConsumed);
        }
        self.consumed = true;
        if !self.value(loss).is_scalar() {
            return Err(mismatch("backward from non-scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..self.nodes.len()).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !g.all_finite() {
                return Err(AdError::NonFinite { context: format!("gradient of node {id}") });
            }
            self.push_back(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], add: impl Fn(&mut [f64])) {
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape));
        }
        add(&mut slot.as_mut().unwrap().data);
    }

    fn push_back(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = val(*x);
                let wv = val(*w);
                let (r, i) = (xv.shape[0], xv.shape[1]);
                let o = wv.shape[1];
                Self::accumulate(grads, *x, &xv.shape, |dx| {
                    for rr in 0..r {
                        for ii in 0..i {
                            let mut acc = 0.0;
                            for oo in 0..o {
                                acc += g.data[rr * o + oo] * wv.data[ii * o + oo];
                            }
                            dx[rr * i + ii] += acc;
                        }
                    }
                });
                Self::accumulate(grads, *w, &wv.shape, |dw| {
                    for ii in 0..i {
                        for oo in 0..o {
                            let mut acc = 0.0;
                            for rr in 0..r {
                                acc += xv.data[rr * i + ii] * g.data[rr * o + oo];
                            }
                            dw[ii * o + oo] += acc;
                        }
                    }
                });
                Self::accumulate(grads, *b, &val(*b).shape, |db| {
                    for oo in 0..o {
                        let mut acc = 0.0;
                        for rr in 0..r {
                            acc += g.data[rr * o + oo];
                        }
                        db[oo] += acc;
                    }
                });
            }
            Op::Relu { x } => {
                let xv = val(*x);
                Self::accumulate(grads, *x, &xv.shape, |dx| {
                    for (i, d) in dx.iter_mut().enumerate() {
                        if xv.data[i] > 0.0 {
                            *d += g.data[i];
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, mean, var, train } => {
                self.bn_backward(*x, *gamma, *beta, mean, var, *train, g, grads);
            }
            Op::NeighborMean { x } => {
                let xv = val(*x);
                let (r, c) = (xv.shape[0], xv.shape[1]);
                if r > 1 {
                    let inv = 1.0 / (r - 1) as f64;
                    let mut gtot = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gtot[j] += g.data[i * c + j];
                        }
                    }
                    Self::accumulate(grads, *x, &xv.shape, |dx| {
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] += (gtot[j] - g.data[i * c + j]) * inv;
                            }
                        }
                    });
                }
            }
            Op::MeanRows { x } => {
                let xv = val(*x);
                let (r, c) = (xv.shape[0], xv.shape[1]);
                let inv = 1.0 / r as f64;
                Self::accumulate(grads, *x, &xv.shape, |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g.data[j] * inv;
                        }
                    }
                });
            }
            Op::ConcatCols { xs } => {
                let r = val(xs[0]).shape[0];
                let total = self.nodes[id].value.shape[1];
                let mut base = 0usize;
                for &x in xs {
                    let w = val(x).shape[1];
                    Self::accumulate(grads, x, &val(x).shape, |dx| {
                        for i in 0..r {
                            for j in 0..w {
                                dx[i * w + j] += g.data[i * total + base + j];
                            }
                        }
                    });
                    base += w;
                }
            }
            Op::SliceCols { x, from, to } => {
                let xv = val(*x);
                let (r, c) = (xv.shape[0], xv.shape[1]);
                let w = to - from;
                let from = *from;
                Self::accumulate(grads, *x, &xv.shape, |dx| {
                    for i in 0..r {
                        for j in 0..w {
                            dx[i * c + from + j] += g.data[i * w + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, from, to } => {
                let xv = val(*x);
                let c = xv.shape[1];
                let (from, to) = (*from, *to);
                Self::accumulate(grads, *x, &xv.shape, |dx| {
                    dx[from * c..to * c]
                        .iter_mut()
                        .zip(&g.data)
                        .for_each(|(d, gv)| *d += gv);
                });
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    Self::accumulate(grads, v, &val(v).shape, |dv| {
                        dv.iter_mut().zip(&g.data).for_each(|(d, gv)| *d += gv);
                    });
                }
            }
            Op::Sub { a, b } => {
                Self::accumulate(grads, *a, &val(*a).shape, |da| {
                    da.iter_mut().zip(&g.data).for_each(|(d, gv)| *d += gv);
                });
                Self::accumulate(grads, *b, &val(*b).shape, |db| {
                    db.iter_mut().zip(&g.data).for_each(|(d, gv)| *d -= gv);
                });
            }
            Op::Mul { a, b } => {
                let av = val(*a).data.clone();
                let bv = val(*b).data.clone();
                Self::accumulate(grads, *a, &val(*a).shape, |da| {
                    for i in 0..da.len() {
                        da[i] += g.data[i] * bv[i];
                    }
                });
                Self::accumulate(grads, *b, &val(*b).shape, |db| {
                    for i in 0..db.len() {
                        db[i] += g.data[i] * av[i];
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                Self::accumulate(grads, *x, &val(*x).shape, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g.data[i] * c;
                    }
                });
            }
            Op::AddConst { x, .. } => {
                Self::accumulate(grads, *x, &val(*x).shape, |dx| {
                    dx.iter_mut().zip(&g.data).for_each(|(d, gv)| *d += gv);
                });
            }
            Op::Square { x } => {
                let xv = val(*x).data.clone();
                Self::accumulate(grads, *x, &val(*x).shape, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += 2.0 * xv[i] * g.data[i];
                    }
                });
            }
            Op::Sqrt { x } => {
                let yv = self.nodes[id].value.data.clone();
                Self::accumulate(grads, *x, &val(*x).shape, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g.data[i] * 0.5 / yv[i];
                    }
                });
            }
            Op::Recip { x } => {
                let yv = self.nodes[id].value.data.clone();
                Self::accumulate(grads, *x, &val(*x).shape, |dx| {
                    for i in 0..dx.len() {
                        dx[i] -= g.data[i] * yv[i] * yv[i];
                    }
                });
            }
            Op::Log2 { x } => {
                let xv = val(*x).data.clone();
                let ln2 = std::f64::consts::LN_2;
                Self::accumulate(grads, *x, &val(*x).shape, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g.data[i] / (xv[i] * ln2);
                    }
                });
            }
            Op::Abs { x } => {
                let xv = val(*x).data.clone();
                Self::accumulate(grads, *x, &val(*x).shape, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g.data[i] * xv[i].signum() * f64::from(xv[i] != 0.0);
                    }
                });
            }
            Op::SumAll { x } => {
                let gv = g.data[0];
                Self::accumulate(grads, *x, &val(*x).shape, |dx| {
                    dx.iter_mut().for_each(|d| *d += gv);
                });
            }
            Op::RowSum { x } => {
                let xv = val(*x);
                let (r, c) = (xv.shape[0], xv.shape[1]);
                Self::accumulate(grads, *x, &xv.shape, |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g.data[i];
                        }
                    }
                });
            }
            Op::MatConst { x, w } => {
                let xv = val(*x);
                let (r, i) = (xv.shape[0], xv.shape[1]);
                let o = w.shape[1];
                let w = Arc::clone(w);
                Self::accumulate(grads, *x, &xv.shape, |dx| {
                    for rr in 0..r {
                        for ii in 0..i {
                            let mut acc = 0.0;
                            for oo in 0..o {
                                acc += g.data[rr * o + oo] * w.data[ii * o + oo];
                            }
                            dx[rr * i + ii] += acc;
                        }
                    }
                });
            }
            Op::ScaleVar { x, s } => {
                let sv = val(*s).data[0];
                let xv = val(*x).data.clone();
                Self::accumulate(grads, *x, &val(*x).shape, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g.data[i] * sv;
                    }
                });
                Self::accumulate(grads, *s, &[1], |ds| {
                    let mut acc = 0.0;
                    for i in 0..xv.len() {
                        acc += g.data[i] * xv[i];
                    }
                    ds[0] += acc;
                });
            }
            Op::MinScalars { xs, argmin } => {
                let chosen = xs[*argmin];
                Self::accumulate(grads, chosen, &[1], |dx| {
                    dx[0] += g.data[0];
                });
            }
            Op::StopGrad { .. } => {}
            Op::OneHotArgmaxRows { .. } => {}
            Op::NormalizeRowsAbs { x } => {
                let xv = val(*x);
                let yv = &self.nodes[id].value;
                let (r, c) = (xv.shape[0], xv.shape[1]);
                let mut dx_local = vec![0.0; r * c];
                for i in 0..r {
                    let s: f64 = (0..c).map(|j| xv.at2(i, j).abs()).sum();
                    if s <= 0.0 {
                        continue;
                    }
                    let gy: f64 = (0..c).map(|j| g.data[i * c + j] * yv.at2(i, j)).sum();
                    for j in 0..c {
                        let sign = xv.at2(i, j).signum() * f64::from(xv.at2(i, j) != 0.0);
                        dx_local[i * c + j] = sign / s * (g.data[i * c + j] - gy);
                    }
                }
                Self::accumulate(grads, *x, &xv.shape, |dx| {
                    dx.iter_mut().zip(&dx_local).for_each(|(d, v)| *d += v);
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        train: bool,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = &self.nodes[x.0].value;
        let (r, c) = (xv.shape[0], xv.shape[1]);
        let gam = &self.nodes[gamma.0].value.data;
        // Recover xhat and reduce the batch terms per feature.
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut gmean = vec![0.0; c];
        let mut gxhat_mean = vec![0.0; c];
        let mut xhat = vec![0.0; r * c];
        for j in 0..c {
            let s = (var[j] + BN_EPS).sqrt();
            for i in 0..r {
                let xh = (xv.at2(i, j) - mean[j]) / s;
                xhat[i * c + j] = xh;
                let gv = g.data[i * c + j];
                dgamma[j] += gv * xh;
                dbeta[j] += gv;
                gmean[j] += gv;
                gxhat_mean[j] += gv * xh;
            }
            gmean[j] /= r as f64;
            gxhat_mean[j] /= r as f64;
        }
        Self::accumulate(grads, gamma, &[c], |dg| {
            dg.iter_mut().zip(&dgamma).for_each(|(d, v)| *d += v);
        });
        Self::accumulate(grads, beta, &[c], |db| {
            db.iter_mut().zip(&dbeta).for_each(|(d, v)| *d += v);
        });
        Self::accumulate(grads, x, &xv.shape, |dx| {
            for j in 0..c {
                let s = (var[j] + BN_EPS).sqrt();
                let k = gam[j] / s;
                for i in 0..r {
                    let gv = g.data[i * c + j];
                    dx[i * c + j] += if train {
                        k * (gv - gmean[j] - xhat[i * c + j] * gxhat_mean[j])
                    } else {
                        k * gv
                    };
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradient, AdError};
    use crate::rng::{substream, tag};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn relu_values_and_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(t(&[1, 2], vec![-1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data, vec![0.0, 2.0]);
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data, vec![0.0, 1.0]);
    }

    #[test]
    fn mean_pool_of_identical_rows_is_identity_with_split_gradient() {
        let row = vec![0.5, -1.5, 2.0];
        let mut tape = Tape::new();
        let x = tape.leaf_owned(Tensor::from_rows(&[row.clone(), row.clone(), row.clone(), row.clone()]));
        let y = tape.mean_rows(x).unwrap();
        assert_eq!(tape.value(y).data, row);
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        for &g in &grads.get(x).unwrap().data {
            assert!((g - 0.25).abs() < 1e-15, "gradient must split 1/n, got {g}");
        }
    }

    #[test]
    fn batchnorm_train_yields_zero_mean_unit_variance() {
        let mut tape = Tape::new();
        let data = vec![0.3, -2.0, 5.0, 1.1, 0.4, -1.0, -0.7, 3.3, 2.0, 0.0, -0.6, 7.5];
        let x = tape.leaf_owned(t(&[4, 3], data.clone()));
        let gamma = tape.leaf_owned(t(&[3], vec![1.0; 3]));
        let beta = tape.leaf_owned(t(&[3], vec![0.0; 3]));
        let (y, stats) = tape.batchnorm_train(x, gamma, beta).unwrap();
        let v = tape.value(y);
        for j in 0..3 {
            let mean: f64 = (0..4).map(|i| v.at2(i, j)).sum::<f64>() / 4.0;
            let var: f64 = (0..4).map(|i| (v.at2(i, j) - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6, "feature {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "feature {j} var {var}");
            // Reported statistics are the raw batch moments.
            let raw_mean: f64 = (0..4).map(|i| data[i * 3 + j]).sum::<f64>() / 4.0;
            let raw_var: f64 =
                (0..4).map(|i| (data[i * 3 + j] - raw_mean).powi(2)).sum::<f64>() / 4.0;
            assert!((stats.mean[j] - raw_mean).abs() < 1e-12);
            assert!((stats.var[j] - raw_var).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_eval_applies_supplied_statistics() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(t(&[2, 2], vec![3.0, 5.0, -1.0, 2.0]));
        let gamma = tape.leaf_owned(t(&[2], vec![2.0, 3.0]));
        let beta = tape.leaf_owned(t(&[2], vec![0.5, -0.5]));
        let y = tape.batchnorm_eval(x, gamma, beta, &[1.0, 2.0], &[4.0, 9.0]).unwrap();
        let v = tape.value(y);
        // (3-1)/2*2+0.5 = 2.5; (5-2)/3*3-0.5 = 2.5; (-1-1)/2*2+0.5 = -1.5; (2-2)/3*3-0.5 = -0.5
        assert!((v.at2(0, 0) - 2.5).abs() < 1e-9);
        assert!((v.at2(0, 1) - 2.5).abs() < 1e-9);
        assert!((v.at2(1, 0) + 1.5).abs() < 1e-9);
        assert!((v.at2(1, 1) + 0.5).abs() < 1e-9);
    }

    #[test]
    fn straight_through_pattern_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(t(&[1, 2], vec![0.3, -0.8]));
        let y = tape.leaf_owned(t(&[1, 2], vec![1.0, 0.0]));
        let d = tape.sub(y, x).unwrap();
        let s = tape.stop_grad(d).unwrap();
        let z = tape.add(x, s).unwrap();
        assert_eq!(tape.value(z).data, tape.value(y).data, "forward must pass y through");
        assert_eq!(tape.value(s).data, tape.value(d).data, "stop_grad is identity forward");
        let loss = tape.sum_all(z).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data, vec![1.0, 1.0]);
        assert!(grads.get(y).is_none(), "no gradient may leak through the stopped branch");
    }

    #[test]
    fn stop_grad_composite_matches_live_branch_finite_differences() {
        let base = t(&[1, 3], vec![0.2, 0.9, -0.5]);
        let mut tape = Tape::new();
        let x = tape.leaf_owned(base.clone());
        let sq = tape.square(x).unwrap();
        let live = tape.sum_all(sq).unwrap();
        let tripled = tape.scale(x, 3.0).unwrap();
        let stopped = tape.stop_grad(tripled).unwrap();
        let dead = tape.sum_all(stopped).unwrap();
        let loss = tape.add(live, dead).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let live_only = |p: &Tensor| -> f64 { p.data.iter().map(|v| v * v).sum() };
        for i in 0..3 {
            let h = 1e-6;
            let mut plus = base.clone();
            plus.data[i] += h;
            let mut minus = base.clone();
            minus.data[i] -= h;
            let fd = (live_only(&plus) - live_only(&minus)) / (2.0 * h);
            assert!(
                (analytic.data[i] - fd).abs() < 1e-6,
                "entry {i}: analytic {} vs live-branch fd {fd}",
                analytic.data[i]
            );
        }
    }

    #[test]
    fn sum_loss_seeds_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(t(&[2, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, -7.0]));
        let loss = tape.sum_all(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data, vec![1.0; 6]);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = substream(11, tag::INIT, 0);
        let mut rand_t = |shape: &[usize]| -> Tensor {
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let x0 = rand_t(&[1, 2]);
        // 20 trainable numbers across three layers.
        let params = [
            rand_t(&[2, 3]),
            rand_t(&[3]),
            rand_t(&[3, 2]),
            rand_t(&[2]),
            rand_t(&[2, 1]),
            rand_t(&[1]),
        ];
        for idx in 0..params.len() {
            let worst = check_gradient(&params[idx], |tape, var| {
                let vars: Vec<Var> = params
                    .iter()
                    .enumerate()
                    .map(|(j, q)| if j == idx { var } else { tape.leaf_owned(q.clone()) })
                    .collect();
                let x = tape.leaf_owned(x0.clone());
                let h1 = tape.affine(x, vars[0], vars[1])?;
                let r1 = tape.relu(h1)?;
                let h2 = tape.affine(r1, vars[2], vars[3])?;
                let r2 = tape.relu(h2)?;
                let h3 = tape.affine(r2, vars[4], vars[5])?;
                tape.sum_all(h3)
            })
            .unwrap();
            assert!(worst < 1e-4, "parameter tensor {idx}: worst relative error {worst}");
        }
    }

    #[test]
    fn second_backward_call_reports_consumed_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(Tensor::scalar(2.0));
        let loss = tape.square(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(AdError::TapeConsumed)));
    }

    #[test]
    fn min_routes_subgradient_to_first_argmin() {
        let mut tape = Tape::new();
        let a = tape.leaf_owned(Tensor::scalar(0.5));
        let b = tape.leaf_owned(Tensor::scalar(0.3));
        let c = tape.leaf_owned(Tensor::scalar(0.3));
        let m = tape.min_scalars(&[a, b, c]).unwrap();
        assert_eq!(tape.value(m).data[0], 0.3);
        let grads = tape.backward(m).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data[0], 1.0);
        assert!(grads.get(c).is_none(), "tie must resolve to the lowest index");
    }

    #[test]
    fn zero_association_row_falls_back_to_uniform_with_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(t(&[2, 4], vec![0.0, 0.0, 0.0, 0.0, 1.0, -1.0, 2.0, 0.0]));
        let y = tape.normalize_rows_abs(x).unwrap();
        {
            let v = tape.value(y);
            for j in 0..4 {
                assert!((v.at2(0, j) - 0.25).abs() < 1e-15, "zero row must become uniform");
            }
            let s: f64 = (0..4).map(|j| v.at2(1, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!((v.at2(1, 2) - 0.5).abs() < 1e-12);
        }
        let w = tape.leaf_owned(t(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]));
        let p = tape.mul(y, w).unwrap();
        let loss = tape.sum_all(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        for j in 0..4 {
            assert_eq!(gx.at2(0, j), 0.0, "uniform fallback must not backpropagate");
        }
        // Hand-derived row 1: S=4, y=[1/4,1/4,1/2,0], sum(g*y)=2.25.
        assert!((gx.at2(1, 0) + 0.3125).abs() < 1e-12);
        assert!((gx.at2(1, 1) - 0.0625).abs() < 1e-12);
        assert!((gx.at2(1, 2) - 0.1875).abs() < 1e-12);
        assert_eq!(gx.at2(1, 3), 0.0, "entries at zero keep zero subgradient");
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let xt = Arc::new(t(&[2, 2], vec![1.0, -2.0, 3.0, -4.0]));
        let wt = Arc::new(t(&[2, 2], vec![0.5, 0.25, -0.75, 1.5]));
        let bt = Arc::new(t(&[2], vec![0.1, -0.2]));
        let mut tape = Tape::new();
        let x = tape.leaf(Arc::clone(&xt));
        let w = tape.leaf(Arc::clone(&wt));
        let b = tape.leaf(Arc::clone(&bt));
        let h = tape.affine(x, w, b).unwrap();
        let r = tape.relu(h).unwrap();
        let n = tape.normalize_rows_abs(r).unwrap();
        let q = tape.square(n).unwrap();
        let loss = tape.sum_all(q).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(xt.data, vec![1.0, -2.0, 3.0, -4.0]);
        assert_eq!(wt.data, vec![0.5, 0.25, -0.75, 1.5]);
        assert_eq!(bt.data, vec![0.1, -0.2]);
    }

    #[test]
    fn identical_inputs_give_bit_identical_losses() {
        let run = || -> f64 {
            let mut rng = substream(99, tag::INIT, 7);
            let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            let mut tape = Tape::new();
            let x = tape.leaf_owned(t(&[3, 4], draw(&mut rng, 12)));
            let w = tape.leaf_owned(t(&[4, 4], draw(&mut rng, 16)));
            let b = tape.leaf_owned(t(&[4], draw(&mut rng, 4)));
            let gamma = tape.leaf_owned(t(&[4], vec![1.0; 4]));
            let beta = tape.leaf_owned(t(&[4], vec![0.0; 4]));
            let h = tape.affine(x, w, b).unwrap();
            let (bn, _) = tape.batchnorm_train(h, gamma, beta).unwrap();
            let r = tape.relu(bn).unwrap();
            let nm = tape.neighbor_mean(r).unwrap();
            let cat = tape.concat_cols(&[r, nm]).unwrap();
            let a = tape.normalize_rows_abs(cat).unwrap();
            let sums = tape.row_sum(a).unwrap();
            let parts: Vec<Var> =
                (0..3).map(|i| tape.slice_rows(sums, i, i + 1).unwrap()).collect();
            let m = tape.min_scalars(&parts).unwrap();
            tape.value(m).data[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(t(&[1, 2], vec![-1.0, 4.0]));
        assert!(matches!(tape.log2(x), Err(AdError::NonFinite { .. })));
        let mut tape = Tape::new();
        let z = tape.leaf_owned(Tensor::scalar(0.0));
        assert!(matches!(tape.recip(z), Err(AdError::NonFinite { .. })));
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf_owned(Tensor::zeros(&[2, 2]));
        let b = tape.leaf_owned(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.add(a, b), Err(AdError::ShapeMismatch { .. })));
        let w = tape.leaf_owned(Tensor::zeros(&[3, 2]));
        let bias = tape.leaf_owned(t(&[2], vec![0.0, 0.0]));
        assert!(matches!(tape.affine(a, w, bias), Err(AdError::ShapeMismatch { .. })));
        assert!(matches!(tape.slice_cols(a, 1, 5), Err(AdError::ShapeMismatch { .. })));
    }

    #[test]
    fn neighbor_mean_excludes_own_row() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(t(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.neighbor_mean(x).unwrap();
        assert_eq!(tape.value(y).data, vec![4.0, 5.0, 3.0, 4.0, 2.0, 3.0]);
        let single = tape.leaf_owned(t(&[1, 3], vec![7.0, 8.0, 9.0]));
        let z = tape.neighbor_mean(single).unwrap();
        assert_eq!(tape.value(z).data, vec![0.0; 3], "a lone row has no neighbors");
    }

    #[test]
    fn argmax_one_hot_ties_to_lower_column_and_is_gradient_opaque() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(t(&[2, 3], vec![1.0, 3.0, 3.0, 0.5, 0.2, 0.4]));
        let y = tape.one_hot_argmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn concat_then_slice_recovers_pieces() {
        let mut tape = Tape::new();
        let a = tape.leaf_owned(t(&[2, 2], vec![1.0, 2.0, 5.0, 6.0]));
        let b = tape.leaf_owned(t(&[2, 1], vec![3.0, 7.0]));
        let cat = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).data, vec![1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
        let back_a = tape.slice_cols(cat, 0, 2).unwrap();
        let back_b = tape.slice_cols(cat, 2, 3).unwrap();
        assert_eq!(tape.value(back_a).data, tape.value(a).data);
        assert_eq!(tape.value(back_b).data, tape.value(b).data);
    }
}

#[cfg(test)]
mod grad_audit {
    use super::*;
    use crate::autodiff::check_gradient;
    use crate::rng::{substream, tag};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn draw(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    /// Values bounded away from zero so kinked ops stay locally linear under
    /// the finite-difference step.
    fn draw_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let mag = rng.gen_range(0.2..1.5);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect()
    }

    fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, draw(rng, n, lo, hi))
    }

    fn weighted(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var, AdError> {
        let wv = tape.leaf_owned(w.clone());
        let p = tape.mul(y, wv)?;
        tape.sum_all(p)
    }

    fn run_case(kind: usize, rng: &mut ChaCha8Rng) -> f64 {
        let r = rng.gen_range(2..5usize);
        let c = rng.gen_range(1..5usize);
        match kind {
            0 | 1 | 2 => {
                // Affine, differentiated against each operand in turn.
                let o = rng.gen_range(1..4usize);
                let x = tensor(rng, &[r, c], -1.5, 1.5);
                let w = tensor(rng, &[c, o], -1.5, 1.5);
                let b = tensor(rng, &[o], -1.0, 1.0);
                let lw = tensor(rng, &[r, o], 0.3, 1.7);
                let point = match kind {
                    0 => x.clone(),
                    1 => w.clone(),
                    _ => b.clone(),
                };
                check_gradient(&point, |tape, var| {
                    let xs = [&x, &w, &b];
                    let vars: Vec<Var> = xs
                        .iter()
                        .enumerate()
                        .map(|(j, q)| if j == kind { var } else { tape.leaf_owned((*q).clone()) })
                        .collect();
                    let y = tape.affine(vars[0], vars[1], vars[2])?;
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            3 => {
                let point = Tensor::from_vec(&[r, c], draw_off_zero(rng, r * c));
                let lw = tensor(rng, &[r, c], 0.3, 1.7);
                check_gradient(&point, |tape, var| {
                    let y = tape.relu(var)?;
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            4 | 5 => {
                // Train-mode batch norm against the input (4) or gamma (5).
                // Columns get guaranteed spread: near-zero batch variance
                // makes the normalizer's curvature swamp the probe step. Two
                // rows alone are excluded too, since they normalize to +-1
                // with a vanishing input gradient that relative differences
                // cannot resolve.
                let r = r.max(3);
                let mut x = Tensor::zeros(&[r, c]);
                for j in 0..c {
                    for i in 0..r {
                        let base = -1.5 + 3.0 * i as f64 / (r - 1) as f64;
                        x.data[i * c + j] = base + rng.gen_range(-0.2..0.2);
                    }
                    let swap = rng.gen_range(0..r);
                    x.data.swap(j, j + swap * c);
                }
                let gamma = tensor(rng, &[c], 0.5, 1.5);
                let beta = tensor(rng, &[c], -0.5, 0.5);
                let lw = tensor(rng, &[r, c], 0.3, 1.7);
                let point = if kind == 4 { x.clone() } else { gamma.clone() };
                check_gradient(&point, |tape, var| {
                    let xv = if kind == 4 { var } else { tape.leaf_owned(x.clone()) };
                    let gv = if kind == 5 { var } else { tape.leaf_owned(gamma.clone()) };
                    let bv = tape.leaf_owned(beta.clone());
                    let (y, _) = tape.batchnorm_train(xv, gv, bv)?;
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            6 => {
                let mean = draw(rng, c, -1.0, 1.0);
                let var = draw(rng, c, 0.5, 2.0);
                let gamma = tensor(rng, &[c], 0.5, 1.5);
                let beta = tensor(rng, &[c], -0.5, 0.5);
                let lw = tensor(rng, &[r, c], 0.3, 1.7);
                check_gradient(&tensor(rng, &[r, c], -2.0, 2.0), |tape, x| {
                    let gv = tape.leaf_owned(gamma.clone());
                    let bv = tape.leaf_owned(beta.clone());
                    let y = tape.batchnorm_eval(x, gv, bv, &mean, &var)?;
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            7 => {
                let lw = tensor(rng, &[r, c], 0.3, 1.7);
                check_gradient(&tensor(rng, &[r, c], -2.0, 2.0), |tape, x| {
                    let y = tape.neighbor_mean(x)?;
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            8 => {
                let lw = tensor(rng, &[1, c], 0.3, 1.7);
                check_gradient(&tensor(rng, &[r, c], -2.0, 2.0), |tape, x| {
                    let y = tape.mean_rows(x)?;
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            9 => {
                let c2 = rng.gen_range(1..4usize);
                let other = tensor(rng, &[r, c2], -1.0, 1.0);
                let lw = tensor(rng, &[r, c + c2], 0.3, 1.7);
                check_gradient(&tensor(rng, &[r, c], -2.0, 2.0), |tape, x| {
                    let o = tape.leaf_owned(other.clone());
                    let y = tape.concat_cols(&[x, o])?;
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            10 => {
                let wide = c + 2;
                let from = rng.gen_range(0..wide - 1);
                let to = rng.gen_range(from + 1..=wide);
                let lw = tensor(rng, &[r, to - from], 0.3, 1.7);
                check_gradient(&tensor(rng, &[r, wide], -2.0, 2.0), |tape, x| {
                    let y = tape.slice_cols(x, from, to)?;
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            11 => {
                let from = rng.gen_range(0..r - 1);
                let to = rng.gen_range(from + 1..=r);
                let lw = tensor(rng, &[to - from, c], 0.3, 1.7);
                check_gradient(&tensor(rng, &[r, c], -2.0, 2.0), |tape, x| {
                    let y = tape.slice_rows(x, from, to)?;
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            12 | 13 | 14 => {
                let other = tensor(rng, &[r, c], -1.5, 1.5);
                let lw = tensor(rng, &[r, c], 0.3, 1.7);
                check_gradient(&tensor(rng, &[r, c], -2.0, 2.0), |tape, x| {
                    let o = tape.leaf_owned(other.clone());
                    let y = match kind {
                        12 => tape.add(x, o)?,
                        13 => tape.sub(o, x)?,
                        _ => tape.mul(x, o)?,
                    };
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            15 | 16 => {
                let k = rng.gen_range(-2.0..2.0);
                let lw = tensor(rng, &[r, c], 0.3, 1.7);
                check_gradient(&tensor(rng, &[r, c], -2.0, 2.0), |tape, x| {
                    let y = if kind == 15 { tape.scale(x, k)? } else { tape.add_const(x, k)? };
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            17 => {
                let lw = tensor(rng, &[r, c], 0.3, 1.7);
                check_gradient(&tensor(rng, &[r, c], -2.0, 2.0), |tape, x| {
                    let y = tape.square(x)?;
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            18 | 19 | 20 => {
                let lw = tensor(rng, &[r, c], 0.3, 1.7);
                check_gradient(&tensor(rng, &[r, c], 0.3, 2.5), |tape, x| {
                    let y = match kind {
                        18 => tape.sqrt(x)?,
                        19 => tape.recip(x)?,
                        _ => tape.log2(x)?,
                    };
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            21 => {
                let point = Tensor::from_vec(&[r, c], draw_off_zero(rng, r * c));
                let lw = tensor(rng, &[r, c], 0.3, 1.7);
                check_gradient(&point, |tape, var| {
                    let y = tape.abs(var)?;
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            22 => check_gradient(&tensor(rng, &[r, c], -2.0, 2.0), |tape, x| tape.sum_all(x))
                .unwrap(),
            23 => {
                let lw = tensor(rng, &[r, 1], 0.3, 1.7);
                check_gradient(&tensor(rng, &[r, c], -2.0, 2.0), |tape, x| {
                    let y = tape.row_sum(x)?;
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            24 => {
                let o = rng.gen_range(1..4usize);
                let w = Arc::new(tensor(rng, &[c, o], -1.5, 1.5));
                let lw = tensor(rng, &[r, o], 0.3, 1.7);
                check_gradient(&tensor(rng, &[r, c], -2.0, 2.0), |tape, x| {
                    let y = tape.mat_const(x, Arc::clone(&w))?;
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            25 | 26 => {
                let x = tensor(rng, &[r, c], -2.0, 2.0);
                let s = Tensor::scalar(rng.gen_range(0.5..2.0));
                let lw = tensor(rng, &[r, c], 0.3, 1.7);
                let point = if kind == 25 { x.clone() } else { s.clone() };
                check_gradient(&point, |tape, var| {
                    let xv = if kind == 25 { var } else { tape.leaf_owned(x.clone()) };
                    let sv = if kind == 26 { var } else { tape.leaf_owned(s.clone()) };
                    let y = tape.scale_var(xv, sv)?;
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            27 => {
                // Distinct scalars with comfortable gaps keep the argmin
                // stable under the probe step.
                let n = rng.gen_range(2..5usize);
                let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.4).collect();
                for v in vals.iter_mut() {
                    *v += rng.gen_range(0.0..0.3);
                }
                for i in 0..n {
                    let j = rng.gen_range(0..n);
                    vals.swap(i, j);
                }
                check_gradient(&Tensor::from_vec(&[1, n], vals), |tape, x| {
                    let parts: Vec<Var> = (0..n)
                        .map(|i| tape.slice_cols(x, i, i + 1))
                        .collect::<Result<_, _>>()?;
                    let m = tape.min_scalars(&parts)?;
                    tape.scale(m, 1.7)
                })
                .unwrap()
            }
            28 => {
                let point = Tensor::from_vec(&[r, c], draw_off_zero(rng, r * c));
                let lw = tensor(rng, &[r, c], 0.3, 1.7);
                check_gradient(&point, |tape, var| {
                    let y = tape.normalize_rows_abs(var)?;
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
            _ => {
                // Argmax one-hot: gradient-opaque, so both sides must be 0.
                let mut x = tensor(rng, &[r, c], -1.0, 1.0);
                for i in 0..r {
                    let j = rng.gen_range(0..c);
                    x.data[i * c + j] += 2.0;
                }
                let lw = tensor(rng, &[r, c], 0.3, 1.7);
                check_gradient(&x, |tape, var| {
                    let y = tape.one_hot_argmax_rows(var)?;
                    weighted(tape, y, &lw)
                })
                .unwrap()
            }
        }
    }

    #[test]
    fn primitive_gradients_survive_central_difference_audit() {
        for case in 0..100u64 {
            let mut rng = substream(5, tag::INIT, case);
            let kind = (case % 30) as usize;
            let worst = run_case(kind, &mut rng);
            assert!(worst < 1e-4, "kind {kind} case {case}: worst relative error {worst}");
        }
    }
}
