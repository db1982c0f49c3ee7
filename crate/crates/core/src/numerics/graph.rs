//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};
use super::NumericsError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    Offset(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Clamp(Var, F, F),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, rstd: Vec<F> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
}

impl<F: Real> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Clamp(..) => "clamp",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Transpose(..) => "transpose",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<F: Real> {
    op: Op<F>,
    value: Tensor<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients<F: Real = f64> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_derivative<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + th)
        + half * x * (F::one() - th * th) * c * (F::one() + F::from_f64(3.0) * a * x * x)
}

#[derive(Debug, Default)]
pub struct Graph<F: Real = f64> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, true)
    }

    /// Leaf with no gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, inputs: &[Var]) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { op, value, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix(&self, v: Var, op: &str) -> Result<(usize, usize), NumericsError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(NumericsError::Shape(format!("{op} expects a 2-D tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Result<Var, NumericsError> {
        let value = self.value(x).map(f);
        self.push(op, value, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var, NumericsError> {
        let name = op.name();
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(op, value, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(NumericsError::Shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(
        &mut self,
        x: Var,
        row: Var,
        op: Op<F>,
        f: impl Fn(F, F) -> F,
    ) -> Result<Var, NumericsError> {
        let name = op.name();
        let (r, c) = self.matrix(x, name)?;
        if self.value(row).numel() != c {
            return Err(NumericsError::Shape(format!(
                "{name}: row of {} values for {c} columns",
                self.value(row).numel()
            )));
        }
        let rv = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|xr| xr.iter().zip(rv).map(|(&a, &b)| f(a, b)))
            .collect();
        self.push(op, Tensor::from_parts(vec![r, c], data), &[x, row])
    }

    /// `x[i, :] + row` for every row `i`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        self.row_broadcast(x, row, Op::AddRow(x, row), |a, b| a + b)
    }

    /// `x[i, :] ∘ row` for every row `i`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        self.row_broadcast(x, row, Op::MulRow(x, row), |a, b| a * b)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var, NumericsError> {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    /// `x + c` elementwise for a constant `c`.
    pub fn offset(&mut self, x: Var, c: F) -> Result<Var, NumericsError> {
        self.unary(x, Op::Offset(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.scale(x, -F::one())
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let s: F = v.data().iter().copied().sum();
        let m = s / F::from_usize(v.numel());
        self.push(Op::Mean(x), Tensor::scalar(m), &[x])
    }

    /// Column means of a 2-D tensor, giving 1×C.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.matrix(x, "mean_rows")?;
        let mut out = vec![F::zero(); c];
        for row in self.value(x).data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = F::one() / F::from_usize(r);
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Op::MeanRows(x), Tensor::from_parts(vec![1, c], out), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, Op::Exp(x), F::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NumericsError> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v <= F::zero()) {
            return Err(NumericsError::Domain(format!("log of non-positive value {bad}")));
        }
        self.unary(x, Op::Log(x), F::ln)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.mul(x, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, Op::Relu(x), |v| v.max(F::zero()))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, Op::Abs(x), F::abs)
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Result<Var, NumericsError> {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.matrix(x, "softmax_rows")?;
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).data().chunks(c) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let start = out.len();
            let mut z = F::zero();
            for &v in row {
                let e = (v - max).exp();
                z += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / z);
        }
        self.push(Op::SoftmaxRows(x), Tensor::from_parts(vec![r, c], out), &[x])
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, x: Var, eps: F) -> Result<Var, NumericsError> {
        let (r, c) = self.matrix(x, "layer_norm_rows")?;
        let n = F::from_usize(c);
        let mut out = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        for row in self.value(x).data().chunks(c) {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let s = F::one() / (var + eps).sqrt();
            rstd.push(s);
            out.extend(row.iter().map(|&v| (v - mean) * s));
        }
        self.push(
            Op::LayerNormRows { x, rstd },
            Tensor::from_parts(vec![r, c], out),
            &[x],
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        let first = xs.first().ok_or_else(|| NumericsError::Shape("concat of nothing".into()))?;
        let (_, c) = self.matrix(*first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let (r, cx) = self.matrix(x, "concat_rows")?;
            if cx != c {
                return Err(NumericsError::Shape(format!("concat_rows: {cx} vs {c} columns")));
            }
            rows += r;
            data.extend_from_slice(self.value(x).data());
        }
        self.push(Op::ConcatRows(xs.to_vec()), Tensor::from_parts(vec![rows, c], data), xs)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        let first = xs.first().ok_or_else(|| NumericsError::Shape("concat of nothing".into()))?;
        let (r, _) = self.matrix(*first, "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (rx, c) = self.matrix(x, "concat_cols")?;
            if rx != r {
                return Err(NumericsError::Shape(format!("concat_cols: {rx} vs {r} rows")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Op::ConcatCols(xs.to_vec()), Tensor::from_parts(vec![r, total], data), xs)
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.matrix(x, "slice_rows")?;
        if start >= end || end > r {
            return Err(NumericsError::Shape(format!("slice_rows {start}..{end} of {r}")));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        self.push(Op::SliceRows(x, start), Tensor::from_parts(vec![end - start, c], data), &[x])
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.matrix(x, "slice_cols")?;
        if start >= end || end > c {
            return Err(NumericsError::Shape(format!("slice_cols {start}..{end} of {c}")));
        }
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        self.push(Op::SliceCols(x, start), Tensor::from_parts(vec![r, end - start], data), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.matrix(x, "transpose")?;
        let src = self.value(x).data();
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(Op::Transpose(x), Tensor::from_parts(vec![c, r], data), &[x])
    }

    /// Reverse sweep from a scalar output. The graph is left untouched.
    pub fn backward(&self, output: Var) -> Result<Gradients<F>, NumericsError> {
        self.backward_seeded(output, F::one())
    }

    /// Like [`Graph::backward`] with the output gradient set to `seed`.
    pub fn backward_seeded(&self, output: Var, seed: F) -> Result<Gradients<F>, NumericsError> {
        if self.value(output).numel() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(self.shape(output), seed));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)));
        f(slot.data_mut());
    }

    fn propagate(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| gemm_nt(gd, bv, ga, m, n, k));
                self.accumulate(grads, *b, |gb| gemm_tn(av, gd, gb, m, k, n));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| add_into(gb, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| {
                    gb.iter_mut().zip(gd).for_each(|(o, &v)| *o -= v)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gv), &y) in ga.iter_mut().zip(gd).zip(bv) {
                        *o += gv * y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &gv), &x) in gb.iter_mut().zip(gd).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            Op::AddRow(x, row) => {
                let c = self.value(*row).numel();
                self.accumulate(grads, *x, |gx| add_into(gx, gd));
                self.accumulate(grads, *row, |gr| {
                    for grow in gd.chunks(c) {
                        add_into(gr, grow);
                    }
                });
            }
            Op::MulRow(x, row) => {
                let c = self.value(*row).numel();
                let rv = self.value(*row).data();
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for (gxr, grow) in gx.chunks_mut(c).zip(gd.chunks(c)) {
                        for ((o, &gv), &r) in gxr.iter_mut().zip(grow).zip(rv) {
                            *o += gv * r;
                        }
                    }
                });
                self.accumulate(grads, *row, |gr| {
                    for (xr, grow) in xv.chunks(c).zip(gd.chunks(c)) {
                        for ((o, &gv), &xv) in gr.iter_mut().zip(grow).zip(xr) {
                            *o += gv * xv;
                        }
                    }
                });
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, |gx| {
                    gx.iter_mut().zip(gd).for_each(|(o, &v)| *o += v * s)
                });
            }
            Op::Offset(x) => self.accumulate(grads, *x, |gx| add_into(gx, gd)),
            Op::Sum(x) => {
                let gv = gd[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += gv));
            }
            Op::Mean(x) => {
                let gv = gd[0] / F::from_usize(self.value(*x).numel());
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += gv));
            }
            Op::MeanRows(x) => {
                let r = self.shape(*x)[0];
                let c = gd.len();
                let inv = F::one() / F::from_usize(r);
                self.accumulate(grads, *x, |gx| {
                    for gxr in gx.chunks_mut(c) {
                        for (o, &gv) in gxr.iter_mut().zip(gd) {
                            *o += gv * inv;
                        }
                    }
                });
            }
            Op::Exp(x) => self.accumulate(grads, *x, |gx| {
                for ((o, &gv), &y) in gx.iter_mut().zip(gd).zip(out) {
                    *o += gv * y;
                }
            }),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gv), &v) in gx.iter_mut().zip(gd).zip(xv) {
                        *o += gv / v;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gv), &v) in gx.iter_mut().zip(gd).zip(xv) {
                        *o += gv * gelu_derivative(v);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gv), &v) in gx.iter_mut().zip(gd).zip(xv) {
                        if v > F::zero() {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gv), &v) in gx.iter_mut().zip(gd).zip(xv) {
                        if v > F::zero() {
                            *o += gv;
                        } else if v < F::zero() {
                            *o -= gv;
                        }
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                let (lo, hi) = (*lo, *hi);
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gv), &v) in gx.iter_mut().zip(gd).zip(xv) {
                        if v >= lo && v <= hi {
                            *o += gv;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let c = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for ((gxr, grow), yrow) in gx.chunks_mut(c).zip(gd.chunks(c)).zip(out.chunks(c)) {
                        let dot: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &y) in gxr.iter_mut().zip(grow).zip(yrow) {
                            *o += y * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, rstd } => {
                let c = self.shape(*x)[1];
                let n = F::from_usize(c);
                self.accumulate(grads, *x, |gx| {
                    for (((gxr, grow), yrow), &s) in gx
                        .chunks_mut(c)
                        .zip(gd.chunks(c))
                        .zip(out.chunks(c))
                        .zip(rstd)
                    {
                        let sum_g: F = grow.iter().copied().sum();
                        let sum_gy: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &y) in gxr.iter_mut().zip(grow).zip(yrow) {
                            *o += s / n * (n * gv - sum_g - y * sum_gy);
                        }
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).numel();
                    self.accumulate(grads, x, |gx| add_into(gx, &gd[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut col = 0;
                for &x in xs {
                    let w = self.shape(x)[1];
                    self.accumulate(grads, x, |gx| {
                        for (gxr, grow) in gx.chunks_mut(w).zip(gd.chunks(total)) {
                            add_into(gxr, &grow[col..col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows(x, start) => {
                let c = self.shape(*x)[1];
                let start = *start * c;
                self.accumulate(grads, *x, |gx| add_into(&mut gx[start..start + gd.len()], gd));
            }
            Op::SliceCols(x, start) => {
                let c = self.shape(*x)[1];
                let w = node.value.cols();
                let start = *start;
                self.accumulate(grads, *x, |gx| {
                    for (gxr, grow) in gx.chunks_mut(c).zip(gd.chunks(w)) {
                        add_into(&mut gxr[start..start + w], grow);
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += gd[j * r + i];
                        }
                    }
                });
            }
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::eye(2));
        let x = g.constant(m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(m(&[&[0.0, 0.0]]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn gelu_at_zero() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu_derivative(0.0f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shape_and_domain_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(NumericsError::Shape(_))));
        assert!(matches!(g.log(a), Err(NumericsError::Domain(_))));
        let v = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        assert!(matches!(g.softmax_rows(v), Err(NumericsError::Shape(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::scalar(1000.0));
        assert!(matches!(g.exp(x), Err(NumericsError::NonFinite { op: "exp" })));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(m(&[&[1.0, -2.0], &[3.0, 0.5]]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_mean_square() {
        let mut g = Graph::<f64>::new();
        let xs = [1.0, -2.0, 3.0, 0.5];
        let x = g.param(Tensor::new(vec![4], xs.to_vec()).unwrap());
        let sq = g.square(x).unwrap();
        let out = g.mean(sq).unwrap();
        let grads = g.backward(out).unwrap();
        let expected: Vec<f64> = xs.iter().map(|v| 2.0 * v / 4.0).collect();
        assert_eq!(grads.wrt(x).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        let y = g.gelu(x).unwrap();
        assert!(matches!(g.backward(y), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(3.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 3.0);
        assert!(grads.wrt(c).is_none());
    }
}
