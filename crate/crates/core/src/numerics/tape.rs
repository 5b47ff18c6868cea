//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Tape`] records every operation of one forward pass as an append-only
//! list of nodes. Node order is a valid topological order, so `backward`
//! walks the list once in reverse. Parameters are bound lazily from a
//! [`Params`] store the first time a forward pass touches them.

use super::tensor::{Grads, ParamId, Params, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    NormalizeRows { x: Var, inv_std: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    MaskMul { x: Var, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients(Vec<Option<Vec<f64>>>);

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the
    /// output.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Tape<'p> {
    nodes: Vec<Node>,
    params: Option<&'p Params>,
    bound: Vec<Option<Var>>,
    bindings: Vec<(ParamId, Var)>,
    track_params: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            bound: Vec::new(),
            bindings: Vec::new(),
            track_params: true,
        }
    }

    /// Tape that reads parameters from `params`.
    pub fn with_params(params: &'p Params) -> Self {
        Self {
            params: Some(params),
            bound: vec![None; params.len()],
            ..Self::new()
        }
    }

    /// Like [`Tape::with_params`] but treats parameters as constants, so no
    /// gradient bookkeeping is done (evaluation mode).
    pub fn inference(params: &'p Params) -> Self {
        Self {
            track_params: false,
            ..Self::with_params(params)
        }
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.rows()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].value.cols()
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            other => parents(other).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf input; `requires_grad` leaves collect gradients in `backward`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = if value.shape().len() == 2 {
            value
        } else {
            let (r, c) = (value.rows(), value.cols());
            Tensor::matrix(r, c, value.into_data()).expect("reshape preserves length")
        };
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter, reusing the existing node if already bound.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let params = self.params.expect("tape has no parameter store");
        let v = self.leaf(params.get(id).clone(), self.track_params);
        self.bound[id.0] = Some(v);
        if self.track_params {
            self.bindings.push((id, v));
        }
        v
    }

    pub fn params(&self) -> Option<&'p Params> {
        self.params
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{n}x{k} times {k2}x{m}"),
            ));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a × bᵀ` without materialising the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul_bt",
                format!("{n}x{k} times ({m}x{k2})^T"),
            ));
        }
        let out = matmul_bt_kernel(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Tensor::matrix(n, m, out)?, Op::MatMulBt(a, b), "matmul_bt")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = transpose_kernel(self.value(x).data(), r, c);
        self.push(Tensor::matrix(c, r, out)?, Op::Transpose(x), "transpose")
    }

    // ---- elementwise ----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(Tensor::matrix(r, c, out)?, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    fn row_broadcast(&mut self, x: Var, row: Var, op: Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            return Err(Error::shape(
                name,
                format!("{r}x{c} with row {:?}", self.shape(row)),
            ));
        }
        let rv = self.value(row).data();
        let out = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|xr| xr.iter().zip(rv).map(|(&a, &b)| f(a, b)))
            .collect();
        self.push(Tensor::matrix(r, c, out)?, op, name)
    }

    /// `x + row` with the `1 × c` row broadcast down every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, Op::AddRow(x, row), "add_row", |a, b| a + b)
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, Op::MulRow(x, row), "mul_row", |a, b| a * b)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.value(x).data().iter().map(|&v| scale * v + shift).collect();
        self.push(Tensor::matrix(r, c, out)?, Op::Affine(x, scale), "affine")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    fn unary(&mut self, x: Var, op: Op, name: &'static str, f: fn(f64) -> f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.value(x).data().iter().map(|&v| f(v)).collect();
        self.push(Tensor::matrix(r, c, out)?, op, name)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), "tanh", f64::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), "gelu", gelu)
    }

    /// Multiplies by a fixed mask (used for dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if mask.len() != r * c {
            return Err(Error::shape("mask_mul", "mask length"));
        }
        let out = self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        self.push(Tensor::matrix(r, c, out)?, Op::MaskMul { x, mask }, "mask_mul")
    }

    // ---- row-wise normalisers ----

    /// Row softmax. `mask[i * cols + j] == false` excludes entry `(i, j)`;
    /// excluded entries come out exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::shape(
                    "softmax_rows",
                    format!("mask of {} for {r}x{c}", m.len()),
                ));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let max = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMasked(i));
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        self.push(Tensor::matrix(r, c, out)?, Op::Softmax(x), "softmax_rows")
    }

    /// Zero-mean, unit-variance rows (layer norm without the affine part).
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(
            Tensor::matrix(r, c, out)?,
            Op::NormalizeRows { x, inv_std },
            "normalize_rows",
        )
    }

    // ---- structural ----

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, c) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::OutOfRange {
                what: "embedding table",
                index: bad,
                size: vocab,
            });
        }
        let tv = self.value(table).data();
        let out: Vec<f64> = ids.iter().flat_map(|&i| tv[i * c..(i + 1) * c].iter().copied()).collect();
        self.push(
            Tensor::matrix(ids.len(), c, out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            "gather",
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::OutOfRange {
                what: "rows",
                index: bad,
                size: r,
            });
        }
        let xv = self.value(x).data();
        let out: Vec<f64> = rows.iter().flat_map(|&i| xv[i * c..(i + 1) * c].iter().copied()).collect();
        self.push(
            Tensor::matrix(rows.len(), c, out)?,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            "select_rows",
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        if start > end || end > self.rows(x) {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} of {} rows", self.rows(x)),
            ));
        }
        let rows: Vec<usize> = (start..end).collect();
        self.select_rows(x, &rows)
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i, i + 1)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start > end || end > c {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {c} cols"),
            ));
        }
        let xv = self.value(x).data();
        let out: Vec<f64> = xv.chunks(c).flat_map(|row| row[start..end].iter().copied()).collect();
        self.push(
            Tensor::matrix(r, end - start, out)?,
            Op::SliceCols { x, start },
            "slice_cols",
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Empty("concat_cols"));
        };
        let r = self.rows(first);
        if xs.iter().any(|&x| self.rows(x) != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = xs.iter().map(|&x| self.cols(x)).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                out.extend_from_slice(self.value(x).row_slice(i));
            }
        }
        self.push(Tensor::matrix(r, total, out)?, Op::ConcatCols(xs.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Empty("concat_rows"));
        };
        let c = self.cols(first);
        if xs.iter().any(|&x| self.cols(x) != c) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let total: usize = xs.iter().map(|&x| self.rows(x)).sum();
        let mut out = Vec::with_capacity(total * c);
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
        }
        self.push(Tensor::matrix(total, c, out)?, Op::ConcatRows(xs.to_vec()), "concat_rows")
    }

    // ---- reductions ----

    /// Column-wise mean over rows, giving a `1 × c` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(Tensor::matrix(1, c, out)?, Op::MeanRows(x), "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::matrix(1, 1, vec![s])?, Op::Sum(x), "sum")
    }

    /// `-log softmax(logits)[target]` for a single `1 × C` logit row.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if r != 1 {
            return Err(Error::shape("cross_entropy", format!("expected one row, got {r}")));
        }
        if target >= c {
            return Err(Error::OutOfRange {
                what: "classes",
                index: target,
                size: c,
            });
        }
        let lv = self.value(logits).data();
        let max = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = lv.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = -(lv[target] - max - z.ln());
        self.push(
            Tensor::matrix(1, 1, vec![loss])?,
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            "cross_entropy",
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(out)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        Ok(Gradients(grads))
    }

    /// Gradients for every parameter bound on this tape.
    pub fn param_grads(&self, grads: &Gradients) -> Grads {
        let n = self.params.map_or(0, Params::len);
        let mut out = Grads::empty(n);
        for &(id, v) in &self.bindings {
            if let Some(g) = grads.wrt(v) {
                out.0[id.0] = Some(g.to_vec());
            }
        }
        out
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (val(*a).rows(), val(*a).cols());
                let m = val(*b).cols();
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let d = matmul_bt_kernel(g, val(*b).data(), n, m, k);
                    acc(grads, *a, &d);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let at = transpose_kernel(val(*a).data(), n, k);
                    let d = matmul_kernel(&at, g, k, n, m);
                    acc(grads, *b, &d);
                }
            }
            Op::MatMulBt(a, b) => {
                let (n, k) = (val(*a).rows(), val(*a).cols());
                let m = val(*b).rows();
                if wants(*a) {
                    // dA = dC · B
                    let d = matmul_kernel(g, val(*b).data(), n, m, k);
                    acc(grads, *a, &d);
                }
                if wants(*b) {
                    // dB = dCᵀ · A
                    let gt = transpose_kernel(g, n, m);
                    let d = matmul_kernel(&gt, val(*a).data(), m, n, k);
                    acc(grads, *b, &d);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                acc(grads, *x, &transpose_kernel(g, c, r));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g);
                if wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    acc(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d: Vec<f64> = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    acc(grads, *a, &d);
                }
                if wants(*b) {
                    let d: Vec<f64> = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    acc(grads, *b, &d);
                }
            }
            Op::AddRow(x, row) => {
                acc(grads, *x, g);
                if wants(*row) {
                    let c = val(*row).cols();
                    let mut d = vec![0.0; c];
                    for gr in g.chunks(c) {
                        d.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    acc(grads, *row, &d);
                }
            }
            Op::MulRow(x, row) => {
                let c = val(*row).cols();
                let rv = val(*row).data();
                if wants(*x) {
                    let d: Vec<f64> = g
                        .chunks(c)
                        .flat_map(|gr| gr.iter().zip(rv).map(|(a, b)| a * b))
                        .collect();
                    acc(grads, *x, &d);
                }
                if wants(*row) {
                    let mut d = vec![0.0; c];
                    for (gr, xr) in g.chunks(c).zip(val(*x).data().chunks(c)) {
                        for j in 0..c {
                            d[j] += gr[j] * xr[j];
                        }
                    }
                    acc(grads, *row, &d);
                }
            }
            Op::Affine(x, s) => {
                let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                acc(grads, *x, &d);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(grads, *x, &d);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(grads, *x, &d);
            }
            Op::Gelu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                acc(grads, *x, &d);
            }
            Op::MaskMul { x, mask } => {
                let d: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                acc(grads, *x, &d);
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(node.value.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *x, &d);
            }
            Op::NormalizeRows { x, inv_std } => {
                let c = node.value.cols();
                let mut d = vec![0.0; g.len()];
                for (i, ((dr, gr), yr)) in d
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(node.value.data().chunks(c))
                    .enumerate()
                {
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dr[j] = inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                acc(grads, *x, &d);
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let t = val(*table);
                    let c = t.cols();
                    let mut d = vec![0.0; t.len()];
                    for (gr, &id) in g.chunks(c).zip(ids) {
                        d[id * c..(id + 1) * c].iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    acc(grads, *table, &d);
                }
            }
            Op::SelectRows { x, rows } => {
                if wants(*x) {
                    let t = val(*x);
                    let c = t.cols();
                    let mut d = vec![0.0; t.len()];
                    for (gr, &r) in g.chunks(c).zip(rows) {
                        d[r * c..(r + 1) * c].iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    acc(grads, *x, &d);
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let t = val(*x);
                    let c = t.cols();
                    let w = node.value.cols();
                    let mut d = vec![0.0; t.len()];
                    for (dr, gr) in d.chunks_mut(c).zip(g.chunks(w)) {
                        dr[*start..start + w].copy_from_slice(gr);
                    }
                    acc(grads, *x, &d);
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &x in xs {
                    let w = val(x).cols();
                    if wants(x) {
                        let d: Vec<f64> = g
                            .chunks(total)
                            .flat_map(|gr| gr[offset..offset + w].iter().copied())
                            .collect();
                        acc(grads, x, &d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = val(x).len();
                    if wants(x) {
                        acc(grads, x, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::MeanRows(x) => {
                let r = val(*x).rows();
                let d: Vec<f64> = (0..r).flat_map(|_| g.iter().map(move |v| v / r as f64)).collect();
                acc(grads, *x, &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; val(*x).len()];
                acc(grads, *x, &d);
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                d[*target] -= g[0];
                acc(grads, *logits, &d);
            }
        }
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::MatMulBt(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::MulRow(a, b) => vec![*a, *b],
        Op::Transpose(x)
        | Op::Affine(x, _)
        | Op::Sigmoid(x)
        | Op::Tanh(x)
        | Op::Gelu(x)
        | Op::Softmax(x)
        | Op::MeanRows(x)
        | Op::Sum(x) => vec![*x],
        Op::NormalizeRows { x, .. }
        | Op::SliceCols { x, .. }
        | Op::SelectRows { x, .. }
        | Op::MaskMul { x, .. } => vec![*x],
        Op::Gather { table, .. } => vec![*table],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// `n×k · k×m`, row-major.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `n×k · (m×k)ᵀ`, row-major.
pub(crate) fn matmul_bt_kernel(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub(crate) fn transpose_kernel(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
