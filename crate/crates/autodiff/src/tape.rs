//! Operation recording and reverse-mode gradient propagation.
//!
//! A [`Tape`] borrows a [`ParamStore`] immutably, records every op executed
//! through it together with the values backward needs, and on
//! [`Tape::backward`] walks the record in exact reverse order. Gradients are
//! returned as a detached [`Gradients`] set so several tapes can run over the
//! same parameters concurrently and be reduced afterwards.

use crate::error::{AutodiffError, Result};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Embedding { table: Var, indices: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    MseLoss { pred: Var, diff: Vec<f64>, count: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    // `None` for parameters, whose values live in the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    consumed: bool,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            consumed: false,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can be reused for a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_vars.iter_mut().for_each(|v| *v = None);
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.params.get(*id).tensor,
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(AutodiffError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    /// Records an input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(Op::Constant, t, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `[n, k] x [k, m] -> [n, m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.dims2().ok_or_else(|| mismatch("matmul", ta, tb))?;
        let (k2, m) = tb.dims2().ok_or_else(|| mismatch("matmul", ta, tb))?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = Tensor::zeros(&[n, m]);
        gemm(
            n,
            k,
            m,
            ta.data(),
            (k, 1),
            tb.data(),
            (m, 1),
            out.data_mut(),
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), out, rg, "matmul")
    }

    /// Elementwise sum of equal shapes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), out, rg, "add")
    }

    /// Adds a bias vector (`[m]` or `[1, m]`) to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.check_live()?;
        let (ta, tb) = (self.value(a), self.value(bias));
        let m = ta.last_dim();
        if tb.len() != m || tb.outer_len() != 1 {
            return Err(mismatch("add_bias", ta, tb));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(Op::AddRow(a, bias), out, rg, "add_bias")
    }

    /// Multiplies every row of `a` elementwise by the vector `w` (`[m]` or `[1, m]`).
    pub fn mul_row(&mut self, a: Var, w: Var) -> Result<Var> {
        self.check_live()?;
        let (ta, tw) = (self.value(a), self.value(w));
        let m = ta.last_dim();
        if tw.len() != m || tw.outer_len() != 1 {
            return Err(mismatch("mul_row", ta, tw));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (x, s) in row.iter_mut().zip(tw.data()) {
                *x *= s;
            }
        }
        let rg = self.rg(a) || self.rg(w);
        self.push(Op::MulRow(a, w), out, rg, "mul_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check_live()?;
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), out, rg, "scale")
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let ta = self.value(a);
        let (r, c) = ta.dims2().ok_or_else(|| AutodiffError::InvalidArgument {
            op: "transpose",
            reason: format!("expected a matrix, got {:?}", ta.shape()),
        })?;
        let out = Tensor::matrix(c, r, transposed(ta.data(), r, c))?;
        let rg = self.rg(a);
        self.push(Op::Transpose(a), out, rg, "transpose")
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let ta = self.value(a);
        let m = ta.last_dim();
        if m == 0 || ta.is_empty() {
            return Err(AutodiffError::EmptyDim { op: "softmax" });
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let rg = self.rg(a);
        self.push(Op::Softmax(a), out, rg, "softmax")
    }

    /// Normalizes each row to zero mean and unit variance. No affine part.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let ta = self.value(a);
        let m = ta.last_dim();
        if m == 0 || ta.is_empty() {
            return Err(AutodiffError::EmptyDim { op: "layer_norm" });
        }
        let mut out = ta.clone();
        let mut inv_std = Vec::with_capacity(ta.outer_len());
        for row in out.data_mut().chunks_mut(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(a);
        self.push(Op::LayerNorm { x: a, inv_std }, out, rg, "layer_norm")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(Op::Gelu(a), out, rg, "gelu")
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.check_live()?;
        let tt = self.value(table);
        let (vocab, d) = tt.dims2().ok_or_else(|| AutodiffError::InvalidArgument {
            op: "embedding",
            reason: format!("table must be a matrix, got {:?}", tt.shape()),
        })?;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= vocab {
                return Err(AutodiffError::InvalidArgument {
                    op: "embedding",
                    reason: format!("index {i} out of range for {vocab} rows"),
                });
            }
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::matrix(indices.len(), d, data)?;
        let rg = self.rg(table);
        self.push(
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            out,
            rg,
            "embedding",
        )
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_live()?;
        let first = parts.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat_rows",
            reason: "no inputs".into(),
        })?;
        let (_, c) = self
            .value(*first)
            .dims2()
            .ok_or_else(|| AutodiffError::InvalidArgument {
                op: "concat_rows",
                reason: "inputs must be matrices".into(),
            })?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            match t.dims2() {
                Some((r, cc)) if cc == c => {
                    rows += r;
                    data.extend_from_slice(t.data());
                }
                _ => return Err(mismatch("concat_rows", self.value(*first), t)),
            }
        }
        let out = Tensor::matrix(rows, c, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatRows(parts.to_vec()), out, rg, "concat_rows")
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check_live()?;
        let ta = self.value(a);
        let (r, c) = ta.dims2().ok_or_else(|| AutodiffError::InvalidArgument {
            op: "slice_rows",
            reason: format!("expected a matrix, got {:?}", ta.shape()),
        })?;
        if start > end || end > r {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_rows",
                reason: format!("range {start}..{end} outside {r} rows"),
            });
        }
        let out = Tensor::matrix(end - start, c, ta.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(a);
        self.push(Op::SliceRows { x: a, start }, out, rg, "slice_rows")
    }

    /// Mean squared error over the positions where `mask` is 1.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
        self.check_live()?;
        let tp = self.value(pred);
        if tp.len() != target.len() || tp.len() != mask.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mse_loss",
                lhs: tp.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let count: f64 = mask.data().iter().sum();
        if count <= 0.0 {
            return Err(AutodiffError::InvalidArgument {
                op: "mse_loss",
                reason: "mask selects no elements".into(),
            });
        }
        let diff: Vec<f64> = tp
            .data()
            .iter()
            .zip(target.data())
            .zip(mask.data())
            .map(|((p, t), w)| w * (p - t))
            .collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
        let rg = self.rg(pred);
        self.push(
            Op::MseLoss { pred, diff, count },
            Tensor::scalar(loss),
            rg,
            "mse_loss",
        )
    }

    /// Propagates d`loss` back to every parameter touched on this tape.
    ///
    /// The tape is emptied afterwards; a second call fails with
    /// [`AutodiffError::TapeConsumed`] until [`Tape::reset`] is called.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check_live()?;
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutodiffError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = vec![None; self.params.len()];
        for (id, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                out[id] = grads[v.0].take();
            }
        }
        self.nodes.clear();
        self.param_vars.iter_mut().for_each(|v| *v = None);
        self.consumed = true;
        Ok(Gradients(out))
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = node.value.as_ref();
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = ta.dims2().unwrap();
                let m = tb.dims2().unwrap().1;
                if self.rg(*a) {
                    // dA = dC * B^T
                    let ga = grad_slot(grads, *a, ta.shape());
                    gemm(n, m, k, g.data(), (m, 1), tb.data(), (1, m), ga.data_mut(), 1.0);
                }
                if self.rg(*b) {
                    // dB = A^T * dC
                    let gb = grad_slot(grads, *b, tb.shape());
                    gemm(k, n, m, ta.data(), (1, k), g.data(), (m, 1), gb.data_mut(), 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        grad_slot(grads, *v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.rg(*a) {
                    grad_slot(grads, *a, g.shape()).add_assign(g);
                }
                if self.rg(*bias) {
                    let shape = self.value(*bias).shape().to_vec();
                    let gb = grad_slot(grads, *bias, &shape);
                    let m = gb.len();
                    for row in g.data().chunks(m) {
                        for (acc, x) in gb.data_mut().iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                }
            }
            Op::MulRow(a, w) => {
                let (ta, tw) = (self.value(*a), self.value(*w));
                let m = tw.len();
                if self.rg(*a) {
                    let ga = grad_slot(grads, *a, ta.shape());
                    for (grow, gin) in ga.data_mut().chunks_mut(m).zip(g.data().chunks(m)) {
                        for ((acc, x), s) in grow.iter_mut().zip(gin).zip(tw.data()) {
                            *acc += x * s;
                        }
                    }
                }
                if self.rg(*w) {
                    let gw = grad_slot(grads, *w, tw.shape());
                    for (xrow, grow) in ta.data().chunks(m).zip(g.data().chunks(m)) {
                        for ((acc, x), gg) in gw.data_mut().iter_mut().zip(xrow).zip(grow) {
                            *acc += x * gg;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    let ga = grad_slot(grads, *a, g.shape());
                    for (acc, x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *acc += s * x;
                    }
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    let (r, c) = g.dims2().unwrap();
                    let gt = transposed(g.data(), r, c);
                    let ga = grad_slot(grads, *a, &[c, r]);
                    for (acc, x) in ga.data_mut().iter_mut().zip(&gt) {
                        *acc += x;
                    }
                }
            }
            Op::Softmax(a) => {
                if self.rg(*a) {
                    let y = out.unwrap();
                    let m = y.last_dim();
                    let ga = grad_slot(grads, *a, y.shape());
                    for ((acc, yr), gr) in ga
                        .data_mut()
                        .chunks_mut(m)
                        .zip(y.data().chunks(m))
                        .zip(g.data().chunks(m))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((acc, y), g) in acc.iter_mut().zip(yr).zip(gr) {
                            *acc += y * (g - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if self.rg(*x) {
                    let y = out.unwrap();
                    let m = y.last_dim();
                    let mf = m as f64;
                    let ga = grad_slot(grads, *x, y.shape());
                    for (((acc, yr), gr), inv) in ga
                        .data_mut()
                        .chunks_mut(m)
                        .zip(y.data().chunks(m))
                        .zip(g.data().chunks(m))
                        .zip(inv_std)
                    {
                        let g_mean = gr.iter().sum::<f64>() / mf;
                        let gy_mean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / mf;
                        for ((acc, y), g) in acc.iter_mut().zip(yr).zip(gr) {
                            *acc += inv * (g - g_mean - y * gy_mean);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.rg(*a) {
                    let ta = self.value(*a);
                    let ga = grad_slot(grads, *a, ta.shape());
                    for ((acc, &x), gg) in ga.data_mut().iter_mut().zip(ta.data()).zip(g.data()) {
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        *acc += gg * d;
                    }
                }
            }
            Op::Embedding { table, indices } => {
                if self.rg(*table) {
                    let shape = self.value(*table).shape().to_vec();
                    let d = shape[1];
                    let gt = grad_slot(grads, *table, &shape);
                    for (r, &idx) in indices.iter().enumerate() {
                        let src = &g.data()[r * d..(r + 1) * d];
                        for (acc, x) in gt.data_mut()[idx * d..(idx + 1) * d].iter_mut().zip(src) {
                            *acc += x;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let n = t.len();
                    if self.rg(p) {
                        let shape = t.shape().to_vec();
                        let gp = grad_slot(grads, p, &shape);
                        for (acc, x) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *acc += x;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                if self.rg(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let c = shape[1];
                    let gx = grad_slot(grads, *x, &shape);
                    let dst = &mut gx.data_mut()[start * c..start * c + g.len()];
                    for (acc, v) in dst.iter_mut().zip(g.data()) {
                        *acc += v;
                    }
                }
            }
            Op::MseLoss { pred, diff, count } => {
                if self.rg(*pred) {
                    let shape = self.value(*pred).shape().to_vec();
                    let scale = 2.0 * g.data()[0] / count;
                    let gp = grad_slot(grads, *pred, &shape);
                    for (acc, d) in gp.data_mut().iter_mut().zip(diff) {
                        *acc += scale * d;
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn transposed(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

/// `c = a * b + beta * c` with `a: [n, k]`, `b: [k, m]` given by (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    n: usize,
    k: usize,
    m: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= n * k && b.len() >= k * m && c.len() == n * m);
    if n == 0 || m == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: the asserts above bound every index reachable through these
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}
