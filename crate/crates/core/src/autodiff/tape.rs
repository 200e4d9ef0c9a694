//! Reverse-mode differentiation tape.
//!
//! Operations are recorded in execution order; node ids are therefore already
//! a topological order and `backward` visits them once, last to first.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Deliberately broken adjoint rules, used to self-test the gradient checker.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Uses `1 - y` instead of `1 - y²` as the tanh derivative.
    TanhAdjoint,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulTn(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    ScaleVar(Var, Var),
    DivScalarVar(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MulConst(Var, Rc<Tensor>),
    RowSoftmax(Var),
    LogSoftmax(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Abs(Var),
    MeanRows(Var),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    FrobeniusNorm(Var),
    SumSquares(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Rc<[usize]>),
    PickPerRow(Var, Rc<[usize]>),
    Element(Var, usize, usize),
    SliceRows(Var, usize),
    OuterSum(Var, Var),
    ClampMagnitude(Var, f64),
}

/// Records primitive operations and replays them backward.
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    params: HashMap<ParamId, Var>,
    tracing: bool,
    fault: Option<Fault>,
    non_finite: Option<(usize, &'static str)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            params: HashMap::new(),
            tracing: true,
            fault: None,
            non_finite: None,
        }
    }

    /// A tape that only evaluates; `backward` on it is an error.
    pub fn untraced() -> Self {
        Self {
            tracing: false,
            ..Self::new()
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn is_tracing(&self) -> bool {
        self.tracing
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.values[v.0].shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.values[v.0].item()
    }

    /// Errors if any recorded value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((id, name)) => Err(Error::NonFinite(format!("{name} (node {id})"))),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((self.values.len(), name));
        }
        let op = if self.tracing { op } else { Op::Leaf };
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, "constant")
    }

    /// Leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, "param");
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.values[a.0].matmul(&self.values[b.0])?;
        Ok(self.push(out, Op::MatMul(a, b), "matmul"))
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.values[a.0].matmul_tn(&self.values[b.0])?;
        Ok(self.push(out, Op::MatMulTn(a, b), "matmul_tn"))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.values[a.0].matmul_nt(&self.values[b.0])?;
        Ok(self.push(out, Op::MatMulNt(a, b), "matmul_nt"))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        if x.shape() != y.shape() {
            return Err(mismatch(op, x, y));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), "sub"))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), "mul"))
    }

    /// `a (n x m) + row (1 x m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (&self.values[a.0], &self.values[row.0]);
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(mismatch("add_row", x, r));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), "add_row"))
    }

    /// `a (n x m) ⊙ col (n x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (x, c) = (&self.values[a.0], &self.values[col.0]);
        if c.cols() != 1 || c.rows() != x.rows() {
            return Err(mismatch("mul_col", x, c));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            let s = c.data()[i];
            out.row_mut(i).iter_mut().for_each(|o| *o *= s);
        }
        Ok(self.push(out, Op::MulCol(a, col), "mul_col"))
    }

    /// `a (n x m) / col (n x 1)` broadcast over columns.
    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (x, c) = (&self.values[a.0], &self.values[col.0]);
        if c.cols() != 1 || c.rows() != x.rows() {
            return Err(mismatch("div_col", x, c));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            let s = c.data()[i];
            out.row_mut(i).iter_mut().for_each(|o| *o /= s);
        }
        Ok(self.push(out, Op::DivCol(a, col), "div_col"))
    }

    /// `a · s` with `s` a `1x1` variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (x, k) = (&self.values[a.0], &self.values[s.0]);
        if k.shape() != [1, 1] {
            return Err(mismatch("scale_by", x, k));
        }
        let out = x.scale(k.item());
        Ok(self.push(out, Op::ScaleVar(a, s), "scale_by"))
    }

    /// `a / s` with `s` a `1x1` variable.
    pub fn div_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (x, k) = (&self.values[a.0], &self.values[s.0]);
        if k.shape() != [1, 1] {
            return Err(mismatch("div_by", x, k));
        }
        let d = k.item();
        let out = x.map(|v| v / d);
        Ok(self.push(out, Op::DivScalarVar(a, s), "div_by"))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.values[a.0].scale(s);
        self.push(out, Op::Scale(a, s), "scale")
    }

    /// `a + c` for a constant scalar `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let out = self.values[a.0].map(|v| v + c);
        self.push(out, Op::Shift(a), "shift")
    }

    /// Elementwise product with a constant tensor (dropout masks, fixed weights).
    pub fn mul_const(&mut self, a: Var, c: Rc<Tensor>) -> Result<Var> {
        let x = &self.values[a.0];
        if x.shape() != c.shape() {
            return Err(mismatch("mul_const", x, &c));
        }
        let out = x.zip_map(&c, |p, q| p * q);
        Ok(self.push(out, Op::MulConst(a, c), "mul_const"))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let out = self.values[a.0].row_softmax();
        self.push(out, Op::RowSoftmax(a), "row_softmax")
    }

    /// Row softmax restricted to entries where `mask` is nonzero; masked
    /// entries come out exactly 0. Every row needs at least one open entry.
    pub fn masked_row_softmax(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let x = &self.values[a.0];
        if x.shape() != mask.shape() {
            return Err(mismatch("masked_row_softmax", x, mask));
        }
        let mut out = Tensor::zeros(x.rows(), x.cols());
        let mut buf = Vec::with_capacity(x.cols());
        for i in 0..x.rows() {
            buf.clear();
            let m = mask.row(i);
            buf.extend(x.row(i).iter().zip(m).filter(|(_, &k)| k != 0.0).map(|(&v, _)| v));
            if buf.is_empty() {
                return Err(Error::invalid(format!("masked_row_softmax: row {i} is fully masked")));
            }
            softmax_in_place(&mut buf);
            let mut it = buf.iter();
            for (o, &k) in out.row_mut(i).iter_mut().zip(m) {
                if k != 0.0 {
                    *o = *it.next().unwrap();
                }
            }
        }
        // Same adjoint as the dense softmax: masked outputs are 0 and pass no gradient.
        Ok(self.push(out, Op::RowSoftmax(a), "masked_row_softmax"))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let mut out = x.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmax(a), "log_softmax")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.values[a.0].map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(a, slope), "leaky_relu")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(f64::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(f64::ln);
        self.push(out, Op::Ln(a), "ln")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(f64::abs);
        self.push(out, Op::Abs(a), "abs")
    }

    /// Mean over rows: `n x m -> 1 x m`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mean_rows();
        self.push(out, Op::MeanRows(a), "mean_rows")
    }

    /// Sum over rows: `n x m -> 1 x m`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let out = x.mean_rows().scale(x.rows() as f64);
        self.push(out, Op::SumRows(a), "sum_rows")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.values[a.0].sum());
        self.push(out, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let out = Tensor::scalar(x.sum() / x.len() as f64);
        self.push(out, Op::Mean(a), "mean")
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.values[a.0].frobenius_norm());
        self.push(out, Op::FrobeniusNorm(a), "frobenius_norm")
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let out = Tensor::scalar(x.data().iter().map(|v| v * v).sum());
        self.push(out, Op::SumSquares(a), "sum_squares")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let cols = self.values[first.0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = &self.values[p.0];
            if t.cols() != cols {
                return Err(mismatch("concat_rows", &self.values[first.0], t));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows"))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let rows = self.values[first.0].rows();
        for p in parts {
            let t = &self.values[p.0];
            if t.rows() != rows {
                return Err(mismatch("concat_cols", &self.values[first.0], t));
            }
        }
        let cols: usize = parts.iter().map(|p| self.values[p.0].cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                let t = &self.values[p.0];
                out.row_mut(i)[off..off + t.cols()].copy_from_slice(t.row(i));
                off += t.cols();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols"))
    }

    pub fn select_rows(&mut self, a: Var, indices: Rc<[usize]>) -> Result<Var> {
        let x = &self.values[a.0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::invalid(format!(
                "select_rows: index {bad} out of range for {} rows",
                x.rows()
            )));
        }
        let out = x.select_rows(&indices);
        Ok(self.push(out, Op::SelectRows(a, indices), "select_rows"))
    }

    /// `out[i] = a[i, cols[i]]`, giving an `n x 1` column.
    pub fn pick_per_row(&mut self, a: Var, cols: Rc<[usize]>) -> Result<Var> {
        let x = &self.values[a.0];
        if cols.len() != x.rows() || cols.iter().any(|&c| c >= x.cols()) {
            return Err(Error::invalid(format!(
                "pick_per_row: {} indices for a {:?} tensor",
                cols.len(),
                x.shape()
            )));
        }
        let vals: Vec<f64> = cols.iter().enumerate().map(|(i, &c)| x.get(i, c)).collect();
        let out = Tensor::col_vector(&vals);
        Ok(self.push(out, Op::PickPerRow(a, cols), "pick_per_row"))
    }

    /// Single entry as a `1x1` tensor.
    pub fn element(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let x = &self.values[a.0];
        if i >= x.rows() || j >= x.cols() {
            return Err(Error::invalid(format!("element ({i},{j}) out of {:?}", x.shape())));
        }
        let out = Tensor::scalar(x.get(i, j));
        Ok(self.push(out, Op::Element(a, i, j), "element"))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = &self.values[a.0];
        if start + len > x.rows() {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{} of {} rows",
                start + len,
                x.rows()
            )));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        let out = x.select_rows(&idx);
        Ok(self.push(out, Op::SliceRows(a, start), "slice_rows"))
    }

    /// `out[i][j] = a[i] + b[j]` for column vectors `a (n x 1)`, `b (m x 1)`.
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        if x.cols() != 1 || y.cols() != 1 {
            return Err(mismatch("outer_sum", x, y));
        }
        let out = Tensor::from_fn(x.rows(), y.rows(), |i, j| x.data()[i] + y.data()[j]);
        Ok(self.push(out, Op::OuterSum(a, b), "outer_sum"))
    }

    /// Pushes entries with `|v| < min` out to `±min` (sign kept, 0 → +min).
    /// Clamped entries pass no gradient.
    pub fn clamp_magnitude(&mut self, a: Var, min: f64) -> Var {
        let out = self.values[a.0].map(|v| {
            if v.abs() >= min {
                v
            } else if v < 0.0 {
                -min
            } else {
                min
            }
        });
        self.push(out, Op::ClampMagnitude(a, min), "clamp_magnitude")
    }

    /// Gradients of a scalar `loss` with respect to every recorded node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.values.len() {
            return Err(Error::NotOnTape(loss.0));
        }
        if !self.tracing {
            return Err(Error::invalid("backward on an untraced tape"));
        }
        let shape = self.values[loss.0].shape();
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.adjoint(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `∂loss/∂param` into every parameter touched by this tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        let mut bound: Vec<_> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        bound.sort();
        for (pid, var) in bound {
            if let Some(g) = grads.get(var) {
                store.accumulate_grad(pid, g);
            }
        }
        Ok(())
    }

    fn adjoint(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.values[v.0];
        let out = &self.values[id];
        match &self.ops[id] {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, g.matmul_nt(val(*b)).expect("shape checked"));
                acc(grads, *b, val(*a).matmul_tn(g).expect("shape checked"));
            }
            Op::MatMulTn(a, b) => {
                // out = aᵀ b: da = b gᵀ, db = a g
                acc(grads, *a, val(*b).matmul_nt(g).expect("shape checked"));
                acc(grads, *b, val(*a).matmul(g).expect("shape checked"));
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                acc(grads, *a, g.matmul(val(*b)).expect("shape checked"));
                acc(grads, *b, g.matmul_tn(val(*a)).expect("shape checked"));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                acc(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(a, r) => {
                acc(grads, *a, g.clone());
                acc(grads, *r, g.mean_rows().scale(g.rows() as f64));
            }
            Op::MulCol(a, c) => {
                let cv = val(*c);
                let av = val(*a);
                let mut ga = g.clone();
                let mut gc = Tensor::zeros(cv.rows(), 1);
                for i in 0..g.rows() {
                    let s = cv.data()[i];
                    gc.data_mut()[i] = g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum();
                    ga.row_mut(i).iter_mut().for_each(|v| *v *= s);
                }
                acc(grads, *a, ga);
                acc(grads, *c, gc);
            }
            Op::DivCol(a, c) => {
                let cv = val(*c);
                let mut ga = g.clone();
                let mut gc = Tensor::zeros(cv.rows(), 1);
                for i in 0..g.rows() {
                    let s = cv.data()[i];
                    // out = a / c  =>  dc = -Σ g·out / c
                    gc.data_mut()[i] =
                        -g.row(i).iter().zip(out.row(i)).map(|(x, y)| x * y).sum::<f64>() / s;
                    ga.row_mut(i).iter_mut().for_each(|v| *v /= s);
                }
                acc(grads, *a, ga);
                acc(grads, *c, gc);
            }
            Op::ScaleVar(a, s) => {
                let k = val(*s).item();
                acc(grads, *a, g.scale(k));
                let gs: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                acc(grads, *s, Tensor::scalar(gs));
            }
            Op::DivScalarVar(a, s) => {
                let k = val(*s).item();
                acc(grads, *a, g.scale(1.0 / k));
                let gs: f64 = g.data().iter().zip(out.data()).map(|(x, y)| x * y).sum();
                acc(grads, *s, Tensor::scalar(-gs / k));
            }
            Op::Scale(a, s) => acc(grads, *a, g.scale(*s)),
            Op::Shift(a) => acc(grads, *a, g.clone()),
            Op::MulConst(a, c) => acc(grads, *a, g.zip_map(c, |x, y| x * y)),
            Op::RowSoftmax(a) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let y = out.row(i);
                    let gy = g.row(i);
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                        *o = y[j] * (gy[j] - dot);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = g.clone();
                for i in 0..g.rows() {
                    let total: f64 = g.row(i).iter().sum();
                    let y = out.row(i);
                    for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                        *o -= y[j].exp() * total;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let d = match self.fault {
                    Some(Fault::TanhAdjoint) => out.map(|y| 1.0 - y),
                    None => out.map(|y| 1.0 - y * y),
                };
                acc(grads, *a, g.zip_map(&d, |x, y| x * y));
            }
            Op::Relu(a) => acc(
                grads,
                *a,
                g.zip_map(val(*a), |x, v| if v > 0.0 { x } else { 0.0 }),
            ),
            Op::LeakyRelu(a, slope) => acc(
                grads,
                *a,
                g.zip_map(val(*a), |x, v| if v > 0.0 { x } else { slope * x }),
            ),
            Op::Exp(a) => acc(grads, *a, g.zip_map(out, |x, y| x * y)),
            Op::Ln(a) => acc(grads, *a, g.zip_map(val(*a), |x, v| x / v)),
            Op::Sigmoid(a) => acc(grads, *a, g.zip_map(out, |x, y| x * y * (1.0 - y))),
            Op::Abs(a) => acc(grads, *a, g.zip_map(val(*a), |x, v| x * sign(v))),
            Op::MeanRows(a) => {
                let n = val(*a).rows();
                let gr = g.scale(1.0 / n as f64);
                acc(grads, *a, Tensor::from_fn(n, g.cols(), |_, j| gr.data()[j]));
            }
            Op::SumRows(a) => {
                let n = val(*a).rows();
                acc(grads, *a, Tensor::from_fn(n, g.cols(), |_, j| g.data()[j]));
            }
            Op::Sum(a) => {
                let [r, c] = val(*a).shape();
                acc(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let [r, c] = val(*a).shape();
                acc(grads, *a, Tensor::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::FrobeniusNorm(a) => {
                let norm = out.item();
                let k = if norm > 0.0 { g.item() / norm } else { 0.0 };
                acc(grads, *a, val(*a).scale(k));
            }
            Op::SumSquares(a) => acc(grads, *a, val(*a).scale(2.0 * g.item())),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = val(*p).rows();
                    let idx: Vec<usize> = (start..start + n).collect();
                    acc(grads, *p, g.select_rows(&idx));
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = val(*p).cols();
                    let gp = Tensor::from_fn(g.rows(), c, |i, j| g.get(i, off + j));
                    acc(grads, *p, gp);
                    off += c;
                }
            }
            Op::SelectRows(a, idx) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::PickPerRow(a, cols) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for (i, &c) in cols.iter().enumerate() {
                    ga.set(i, c, g.data()[i]);
                }
                acc(grads, *a, ga);
            }
            Op::Element(a, i, j) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                ga.set(*i, *j, g.item());
                acc(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for k in 0..g.rows() {
                    ga.row_mut(start + k).copy_from_slice(g.row(k));
                }
                acc(grads, *a, ga);
            }
            Op::OuterSum(a, b) => {
                let mut ga = Tensor::zeros(g.rows(), 1);
                let mut gb = Tensor::zeros(g.cols(), 1);
                for i in 0..g.rows() {
                    for (j, v) in g.row(i).iter().enumerate() {
                        ga.data_mut()[i] += v;
                        gb.data_mut()[j] += v;
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::ClampMagnitude(a, min) => acc(
                grads,
                *a,
                g.zip_map(val(*a), |x, v| if v.abs() >= *min { x } else { 0.0 }),
            ),
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
