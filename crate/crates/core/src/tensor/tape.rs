//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as a node holding its forward value
//! and enough saved state to run its local gradient rule. Leaves borrow
//! their tensors, so registering model parameters costs nothing. Calling
//! [`Tape::backward`] on a scalar node walks the nodes in reverse order of
//! creation, which is a valid reverse topological order because a node's
//! inputs always exist before it does.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{gelu_derivative, gelu_scalar, kernels, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a * b^T`
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow {
        x: usize,
        bias: usize,
    },
    /// Adds a constant tensor; the constant receives no gradient.
    AddConst(usize),
    Scale(usize, f32),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Dropout {
        x: usize,
        mask: Vec<f32>,
    },
    SelectRow {
        x: usize,
        row: usize,
    },
    WeightedRowSum {
        x: usize,
        weights: Vec<f32>,
    },
    MeanRows {
        x: usize,
        include: Vec<bool>,
        count: usize,
    },
    MaxRows {
        x: usize,
        argmax: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one call to [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` if no gradient
    /// flowed there.
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but yields zeros of the given length when no
    /// gradient reached the node.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f32> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f32]>::to_vec)
    }

    /// Copies the gradient for `var` into `tensor.grad`.
    pub fn write_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        let g = self.get_or_zeros(var, tensor.numel());
        tensor.set_grad(g)
    }
}

pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf borrowing `tensor`.
    pub fn param(&mut self, tensor: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(tensor), Op::Leaf, true)
    }

    /// Registers an owned differentiable leaf.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(Cow::Owned(tensor), Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(Cow::Owned(tensor), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[self.check(var).expect("var belongs to this tape")].value
    }

    pub fn try_value(&self, var: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(var)?].value)
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id {
            return Err(Error::Tape(format!(
                "node {} belongs to tape {}, not tape {}",
                var.index, var.tape, self.id
            )));
        }
        if var.index >= self.nodes.len() {
            return Err(Error::Tape(format!("node {} is not on the tape", var.index)));
        }
        Ok(var.index)
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn rg(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn derived(&mut self, tensor: Tensor, op: Op, inputs: &[usize]) -> Var {
        let rg = self.rg(inputs);
        self.push(Cow::Owned(tensor), op, rg)
    }

    fn matrix_dims(&self, i: usize, op: &'static str) -> Result<(usize, usize)> {
        let t = self.val(i);
        if t.shape().len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn shape_err(&self, op: &'static str, a: usize, b: usize) -> Error {
        Error::Shape {
            op,
            lhs: self.val(a).shape().to_vec(),
            rhs: self.val(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm(self.val(a).data(), self.val(b).data(), &mut out, m, k, n);
        Ok(self.derived(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m x k] * b[n x k]^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm_nt(self.val(a).data(), self.val(b).data(), &mut out, m, k, n);
        Ok(self.derived(Tensor::matrix(m, n, out), Op::MatMulNt(a, b), &[a, b]))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        if self.val(a).shape() != self.val(b).shape() {
            return Err(self.shape_err(op_name, a, b));
        }
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        Ok(self.derived(t, op(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (x, bias) = (self.check(x)?, self.check(bias)?);
        let cols = self.val(x).cols();
        if self.val(bias).numel() != cols {
            return Err(self.shape_err("add_row", x, bias));
        }
        let mut data = self.val(x).data().to_vec();
        let b = self.val(bias).data();
        for row in data.chunks_mut(cols) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let t = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.derived(t, Op::AddRow { x, bias }, &[x, bias]))
    }

    /// Adds a same-shape constant (e.g. an attention mask of `0` / `-inf`).
    pub fn add_const(&mut self, x: Var, constant: &Tensor) -> Result<Var> {
        let x = self.check(x)?;
        if self.val(x).shape() != constant.shape() {
            return Err(Error::Shape {
                op: "add_const",
                lhs: self.val(x).shape().to_vec(),
                rhs: constant.shape().to_vec(),
            });
        }
        let data = self
            .val(x)
            .data()
            .iter()
            .zip(constant.data())
            .map(|(a, b)| a + b)
            .collect();
        let t = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.derived(t, Op::AddConst(x), &[x]))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let x = self.check(x)?;
        let data = self.val(x).data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.derived(t, Op::Scale(x, factor), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let data = self.val(x).data().iter().map(|&v| gelu_scalar(v)).collect();
        let t = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.derived(t, Op::Gelu(x), &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let mut data = self.val(x).data().to_vec();
        kernels::softmax_rows(&mut data, self.val(x).cols());
        let t = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.derived(t, Op::Softmax(x), &[x]))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let (x, gain, bias) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let xt = self.val(x);
        let n = xt.cols();
        if n < 2 {
            return Err(Error::DegenerateRow(n));
        }
        if self.val(gain).numel() != n {
            return Err(self.shape_err("layer_norm_rows", x, gain));
        }
        if self.val(bias).numel() != n {
            return Err(self.shape_err("layer_norm_rows", x, bias));
        }
        let mut out = vec![0.0; xt.numel()];
        let mut xhat = vec![0.0; xt.numel()];
        let mut rstd = vec![0.0; xt.rows()];
        kernels::layer_norm(
            xt.data(),
            self.val(gain).data(),
            self.val(bias).data(),
            eps,
            n,
            &mut out,
            &mut xhat,
            &mut rstd,
        );
        let t = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.derived(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Selects rows of `table` by index: an embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let table = self.check(table)?;
        let (rows, cols) = self.matrix_dims(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one id".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Contract(format!(
                    "row index {id} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(self.val(table).row(id));
        }
        let t = Tensor::matrix(ids.len(), cols, data);
        Ok(self.derived(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let x = self.check(x)?;
        let (rows, cols) = self.matrix_dims(x, "slice_cols")?;
        if width == 0 || start + width > cols {
            return Err(Error::Contract(format!(
                "column slice {start}..{} out of range for {cols} columns",
                start + width
            )));
        }
        let src = self.val(x).data();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
        }
        Ok(self.derived(
            Tensor::matrix(rows, width, data),
            Op::SliceCols { x, start },
            &[x],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = *idx
            .first()
            .ok_or_else(|| Error::Contract("concat_cols needs at least one part".into()))?;
        let (rows, _) = self.matrix_dims(first, "concat_cols")?;
        let mut total = 0;
        for &i in &idx {
            let (r, c) = self.matrix_dims(i, "concat_cols")?;
            if r != rows {
                return Err(self.shape_err("concat_cols", first, i));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.val(i).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, data);
        let op = Op::ConcatCols(idx.clone());
        Ok(self.derived(t, op, &idx))
    }

    /// Stacks equal-length row vectors (or scalars) into a matrix.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = *idx
            .first()
            .ok_or_else(|| Error::Contract("concat_rows needs at least one part".into()))?;
        let cols = self.val(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            if self.val(i).cols() != cols {
                return Err(self.shape_err("concat_rows", first, i));
            }
            rows += self.val(i).rows();
            data.extend_from_slice(self.val(i).data());
        }
        let t = Tensor::matrix(rows, cols, data);
        let op = Op::ConcatRows(idx.clone());
        Ok(self.derived(t, op, &idx))
    }

    /// Multiplies elementwise by a fixed mask (inverted dropout when the
    /// mask holds `0` and `1/(1-p)`).
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<f32>) -> Result<Var> {
        let x = self.check(x)?;
        if mask.len() != self.val(x).numel() {
            return Err(Error::Contract(format!(
                "dropout mask has {} entries for {} values",
                mask.len(),
                self.val(x).numel()
            )));
        }
        let data = self.val(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.derived(t, Op::Dropout { x, mask }, &[x]))
    }

    /// Row `row` of a matrix as a `[1 x cols]` matrix.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let x = self.check(x)?;
        let (rows, cols) = self.matrix_dims(x, "select_row")?;
        if row >= rows {
            return Err(Error::Contract(format!("row {row} out of range for {rows} rows")));
        }
        let t = Tensor::matrix(1, cols, self.val(x).row(row).to_vec());
        Ok(self.derived(t, Op::SelectRow { x, row }, &[x]))
    }

    /// `sum_r weights[r] * x[r, :]` as a `[1 x cols]` matrix.
    pub fn weighted_row_sum(&mut self, x: Var, weights: Vec<f32>) -> Result<Var> {
        let x = self.check(x)?;
        let (rows, cols) = self.matrix_dims(x, "weighted_row_sum")?;
        if weights.len() != rows {
            return Err(Error::Contract(format!(
                "{} row weights for {rows} rows",
                weights.len()
            )));
        }
        let mut out = vec![0.0; cols];
        for (r, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(self.val(x).row(r)) {
                *o += w * v;
            }
        }
        let t = Tensor::matrix(1, cols, out);
        Ok(self.derived(t, Op::WeightedRowSum { x, weights }, &[x]))
    }

    /// Columnwise mean over the rows whose `include` flag is set.
    ///
    /// Uses a running mean, so rows that are all identical average back to
    /// that row exactly.
    pub fn mean_rows(&mut self, x: Var, include: &[bool]) -> Result<Var> {
        let x = self.check(x)?;
        let (rows, cols) = self.matrix_dims(x, "mean_rows")?;
        if include.len() != rows {
            return Err(Error::Contract(format!(
                "{} row flags for {rows} rows",
                include.len()
            )));
        }
        let mut out = vec![0.0f32; cols];
        let mut count = 0usize;
        for r in (0..rows).filter(|&r| include[r]) {
            count += 1;
            let k = count as f32;
            for (o, &v) in out.iter_mut().zip(self.val(x).row(r)) {
                *o += (v - *o) / k;
            }
        }
        if count == 0 {
            return Err(Error::EmptyPool);
        }
        let t = Tensor::matrix(1, cols, out);
        let include = include.to_vec();
        Ok(self.derived(t, Op::MeanRows { x, include, count }, &[x]))
    }

    /// Columnwise maximum over the rows whose `include` flag is set. Ties go
    /// to the earliest row.
    pub fn max_rows(&mut self, x: Var, include: &[bool]) -> Result<Var> {
        let x = self.check(x)?;
        let (rows, cols) = self.matrix_dims(x, "max_rows")?;
        if include.len() != rows {
            return Err(Error::Contract(format!(
                "{} row flags for {rows} rows",
                include.len()
            )));
        }
        let first = include.iter().position(|&b| b).ok_or(Error::EmptyPool)?;
        let t = self.val(x);
        let mut argmax = vec![first; cols];
        let mut out = t.row(first).to_vec();
        for (r, _) in include.iter().enumerate().skip(first + 1).filter(|(_, &b)| b) {
            for (c, &v) in t.row(r).iter().enumerate() {
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let t = Tensor::matrix(1, cols, out);
        Ok(self.derived(t, Op::MaxRows { x, argmax }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let s: f32 = self.val(x).data().iter().sum();
        Ok(self.derived(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let x = self.check(x)?;
        let t = self.val(x);
        let s: f32 = t.data().iter().sum::<f32>() / t.numel() as f32;
        Ok(self.derived(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    /// `(1/n) * sum (pred_i - gold_i)^2` with `gold` held constant.
    pub fn mse_loss(&mut self, preds: Var, gold: &[f32]) -> Result<Var> {
        let pi = self.check(preds)?;
        let n = self.val(pi).numel();
        if n == 0 || gold.len() != n {
            return Err(Error::Contract(format!(
                "mse_loss needs equal nonzero lengths, got {n} predictions and {} labels",
                gold.len()
            )));
        }
        let gold = self.constant(Tensor::new(self.val(pi).shape().to_vec(), gold.to_vec())?);
        let diff = self.sub(preds, gold)?;
        let sq = self.mul(diff, diff)?;
        self.mean(sq)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss = self.check(loss)?;
        if !self.val(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss + 1];
        grads[loss] = Some(vec![1.0]);

        for i in (0..=loss).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.val(a).shape()[0], self.val(a).shape()[1]);
                let n = self.val(b).shape()[1];
                if let Some(ga) = self.slot(grads, a) {
                    kernels::mm_nt(g, self.val(b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, b) {
                    kernels::mm_tn(self.val(a).data(), g, gb, m, k, n);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = (self.val(a).shape()[0], self.val(a).shape()[1]);
                let n = self.val(b).shape()[0];
                if let Some(ga) = self.slot(grads, a) {
                    kernels::mm(g, self.val(b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, b) {
                    kernels::mm_tn(g, self.val(a).data(), gb, m, n, k);
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, b) {
                    axpy(gb, g, 1.0);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, b) {
                    axpy(gb, g, -1.0);
                }
            }
            &Op::Mul(a, b) => {
                // `a` and `b` may be the same node (squaring); accumulate
                // each side separately.
                let av = self.val(a).data();
                let bv = self.val(b).data();
                if let Some(ga) = self.slot(grads, a) {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                }
            }
            &Op::AddRow { x, bias } => {
                let cols = out.cols();
                if let Some(gx) = self.slot(grads, x) {
                    axpy(gx, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, bias) {
                    for row in g.chunks(cols) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            &Op::AddConst(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    axpy(gx, g, 1.0);
                }
            }
            &Op::Scale(x, f) => {
                if let Some(gx) = self.slot(grads, x) {
                    axpy(gx, g, f);
                }
            }
            &Op::Gelu(x) => {
                let xv = self.val(x).data();
                if let Some(gx) = self.slot(grads, x) {
                    for ((o, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gi * gelu_derivative(v);
                    }
                }
            }
            &Op::Softmax(x) => {
                let cols = out.cols();
                let y = out.data();
                if let Some(gx) = self.slot(grads, x) {
                    for ((gx_row, g_row), y_row) in
                        gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let dot: f32 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx_row[c] += y_row[c] * (g_row[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = out.cols();
                let gain_v = self.val(*gain).data();
                if let Some(ggain) = self.slot(grads, *gain) {
                    for (g_row, h_row) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            ggain[c] += g_row[c] * h_row[c];
                        }
                    }
                }
                if let Some(gbias) = self.slot(grads, *bias) {
                    for g_row in g.chunks(cols) {
                        axpy(gbias, g_row, 1.0);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let inv_n = 1.0 / cols as f32;
                    let mut dh = vec![0.0; cols];
                    for (r, (g_row, h_row)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..cols {
                            dh[c] = g_row[c] * gain_v[c];
                            mean_dh += dh[c];
                            mean_dh_h += dh[c] * h_row[c];
                        }
                        mean_dh *= inv_n;
                        mean_dh_h *= inv_n;
                        let gx_row = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            gx_row[c] += rstd[r] * (dh[c] - mean_dh - h_row[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let cols = out.cols();
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(
                            &mut gt[id * cols..(id + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                            1.0,
                        );
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let width = out.cols();
                let cols = self.val(x).cols();
                if let Some(gx) = self.slot(grads, x) {
                    for (r, g_row) in g.chunks(width).enumerate() {
                        axpy(&mut gx[r * cols + start..r * cols + start + width], g_row, 1.0);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let width = self.val(p).cols();
                    if let Some(gp) = self.slot(grads, p) {
                        for (r, gp_row) in gp.chunks_mut(width).enumerate() {
                            axpy(gp_row, &g[r * total + offset..r * total + offset + width], 1.0);
                        }
                    }
                    offset += width;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).numel();
                    if let Some(gp) = self.slot(grads, p) {
                        axpy(gp, &g[offset..offset + len], 1.0);
                    }
                    offset += len;
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            &Op::SelectRow { x, row } => {
                let cols = out.cols();
                if let Some(gx) = self.slot(grads, x) {
                    axpy(&mut gx[row * cols..(row + 1) * cols], g, 1.0);
                }
            }
            Op::WeightedRowSum { x, weights } => {
                let cols = out.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &w) in weights.iter().enumerate() {
                        if w != 0.0 {
                            axpy(&mut gx[r * cols..(r + 1) * cols], g, w);
                        }
                    }
                }
            }
            Op::MeanRows { x, include, count } => {
                let cols = out.cols();
                let w = 1.0 / *count as f32;
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, _) in include.iter().enumerate().filter(|(_, &inc)| inc) {
                        axpy(&mut gx[r * cols..(r + 1) * cols], g, w);
                    }
                }
            }
            Op::MaxRows { x, argmax } => {
                let cols = out.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (c, &r) in argmax.iter().enumerate() {
                        gx[r * cols + c] += g[c];
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            &Op::Mean(x) => {
                let n = self.val(x).numel() as f32;
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().for_each(|v| *v += g[0] / n);
                }
            }
        }
    }

    /// Gradient accumulator for node `i`, allocated on first use; `None` when
    /// the node does not take gradients.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f32>>], i: usize) -> Option<&'g mut [f32]> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let len = self.nodes[i].value.numel();
        Some(grads[i].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }
}

fn axpy(dst: &mut [f32], src: &[f32], alpha: f32) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
