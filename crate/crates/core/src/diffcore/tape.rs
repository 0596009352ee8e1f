//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive call evaluates eagerly and appends one record to the
//! [`Tape`]. Records are only ever appended, so the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.

use super::{DiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { src: usize, start: usize },
    Relu(usize),
    Tanh(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Mean { src: usize, axis: usize },
    Sum(usize),
    SquaredError(usize, usize),
    GatherRows { src: usize, index: Vec<usize> },
    Minimum(usize, usize),
    Reshape(usize),
    Bmm { a: usize, b: usize, trans_b: bool },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], retained for leaf nodes.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`, or `None` if no gradient reached it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: all slices are sized for the given dimensions and strides by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

fn accumulate<'a>(grads: &'a mut [Option<Vec<f64>>], id: usize, len: usize) -> &'a mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
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

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, op: Op, value: Tensor, inputs: &[usize]) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mismatch(&self, op: &'static str, vars: &[Var]) -> DiffError {
        DiffError::ShapeMismatch {
            op,
            shapes: vars.iter().map(|v| self.shape(*v).to_vec()).collect(),
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", &[a, b]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            0.0,
        );
        self.push("matmul", Op::MatMul(a.0, b.0), Tensor::from_parts(vec![m, n], out), &[a.0, b.0])
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, &[a, b]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, op, Tensor::from_parts(shape, data), &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise("minimum", a, b, Op::Minimum(a.0, b.0), f64::min)
    }

    /// Elementwise `(a - b)^2`.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise("squared_error", a, b, Op::SquaredError(a.0, b.0), |x, y| {
            (x - y) * (x - y)
        })
    }

    /// Adds a bias vector of length `cols(x)` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, DiffError> {
        let cols = self.value(x).cols();
        if self.value(bias).len() != cols {
            return Err(self.mismatch("add_row", &[x, bias]));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, w)| v + w))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("add_row", Op::AddRow(x.0, bias.0), Tensor::from_parts(shape, data), &[x.0, bias.0])
    }

    /// Scales row `r` of `x` by `weights[r]`; `weights` holds one value per row.
    pub fn mul_col(&mut self, x: Var, weights: Var) -> Result<Var, DiffError> {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        if self.value(weights).len() != rows {
            return Err(self.mismatch("mul_col", &[x, weights]));
        }
        let w = self.value(weights).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(cols)
            .zip(w)
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("mul_col", Op::MulCol(x.0, weights.0), Tensor::from_parts(shape, data), &[x.0, weights.0])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, DiffError> {
        if !s.is_finite() {
            return Err(DiffError::NonFinite { op: "scale" });
        }
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", Op::Scale(x.0, s), Tensor::from_parts(shape, data), &[x.0])
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let Some(first) = parts.first() else {
            return Err(DiffError::InvalidArgument("concat_cols of zero tensors".into()));
        };
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        for p in parts {
            let s = self.shape(*p);
            if s[..s.len() - 1] != lead[..] {
                return Err(self.mismatch("concat_cols", parts));
            }
        }
        let rows = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_cols", Op::ConcatCols(ids.clone()), Tensor::from_parts(shape, data), &ids)
    }

    /// Stacks the rows of 2-D (or flattened) inputs with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let Some(first) = parts.first() else {
            return Err(DiffError::InvalidArgument("concat_rows of zero tensors".into()));
        };
        let cols = self.value(*first).cols();
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return Err(self.mismatch("concat_rows", parts));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let rows = data.len() / cols;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            "concat_rows",
            Op::ConcatRows(ids.clone()),
            Tensor::from_parts(vec![rows, cols], data),
            &ids,
        )
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let cols = self.value(x).cols();
        if len == 0 || start + len > cols {
            return Err(DiffError::ShapeMismatch {
                op: "slice_cols",
                shapes: vec![self.shape(x).to_vec(), vec![start, len]],
            });
        }
        let data = self
            .value(x)
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        self.push("slice_cols", Op::SliceCols { src: x.0, start }, Tensor::from_parts(shape, data), &[x.0])
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, DiffError> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, op, Tensor::from_parts(shape, data), &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("relu", x, Op::Relu(x.0), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("tanh", x, Op::Tanh(x.0), f64::tanh)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let cols = t.cols();
        let mut data = vec![0.0; t.len()];
        for (src, dst) in t.data().chunks_exact(cols).zip(data.chunks_exact_mut(cols)) {
            softmax_row(src, dst);
        }
        let shape = t.shape().to_vec();
        self.push("softmax", Op::Softmax(x.0), Tensor::from_parts(shape, data), &[x.0])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let cols = t.cols();
        let mut data = vec![0.0; t.len()];
        for (src, dst) in t.data().chunks_exact(cols).zip(data.chunks_exact_mut(cols)) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        let shape = t.shape().to_vec();
        self.push("log_softmax", Op::LogSoftmax(x.0), Tensor::from_parts(shape, data), &[x.0])
    }

    /// Mean over `axis`; the axis is removed from the output shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::ShapeMismatch {
                op: "mean",
                shapes: vec![shape, vec![axis]],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        for v in &mut data {
            *v /= n as f64;
        }
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push("mean", Op::Mean { src: x.0, axis }, Tensor::from_parts(out_shape, data), &[x.0])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let total = self.value(x).data().iter().sum();
        self.push("sum", Op::Sum(x.0), Tensor::scalar(total), &[x.0])
    }

    /// Rows of `x` (as a matrix) selected by `index`; output is `[index.len(), cols]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if index.is_empty() {
            return Err(DiffError::InvalidArgument("gather_rows with empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(DiffError::ShapeMismatch {
                op: "gather_rows",
                shapes: vec![t.shape().to_vec(), vec![bad]],
            });
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(t.row(i));
        }
        self.push(
            "gather_rows",
            Op::GatherRows {
                src: x.0,
                index: index.to_vec(),
            },
            Tensor::from_parts(vec![index.len(), cols], data),
            &[x.0],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push("reshape", Op::Reshape(x.0), value, &[x.0])
    }

    /// Batched matrix product. `a` is `[g, m, k]`; `b` is `[g, k, n]`, or
    /// `[g, n, k]` when `trans_b` is set. Output is `[g, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(self.mismatch("bmm", &[a, b]));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(self.mismatch("bmm", &[a, b]));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let ab = &ad[gi * m * k..(gi + 1) * m * k];
            let bb = &bd[gi * k * n..(gi + 1) * k * n];
            let ob = &mut out[gi * m * n..(gi + 1) * m * n];
            for r in 0..m {
                let arow = &ab[r * k..(r + 1) * k];
                for c in 0..n {
                    let mut acc = 0.0;
                    if trans_b {
                        let brow = &bb[c * k..(c + 1) * k];
                        for (x, y) in arow.iter().zip(brow) {
                            acc += x * y;
                        }
                    } else {
                        for (t, x) in arow.iter().enumerate() {
                            acc += x * bb[t * n + c];
                        }
                    }
                    ob[r * n + c] = acc;
                }
            }
        }
        self.push(
            "bmm",
            Op::Bmm { a: a.0, b: b.0, trans_b },
            Tensor::from_parts(vec![g, m, n], out),
            &[a.0, b.0],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        if self.value(loss).len() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf | Op::Constant) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn val(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.val(*a).shape(), self.val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let ga = accumulate(grads, *a, m * k);
                    // dA = dC . B^T
                    gemm(m, n, k, g, (n, 1), self.val(*b).data(), (1, n), ga, 1.0);
                }
                if self.needs(*b) {
                    let gb = accumulate(grads, *b, k * n);
                    // dB = A^T . dC
                    gemm(k, m, n, self.val(*a).data(), (1, k), g, (n, 1), gb, 1.0);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    for (d, s) in accumulate(grads, *a, g.len()).iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.needs(*b) {
                    for (d, s) in accumulate(grads, *b, g.len()).iter_mut().zip(g) {
                        *d += sign * s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.val(*b).data();
                    for ((d, s), y) in accumulate(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if self.needs(*b) {
                    let av = self.val(*a).data();
                    for ((d, s), x) in accumulate(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if self.needs(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    for i in 0..g.len() {
                        if av[i] <= bv[i] {
                            ga[i] += g[i];
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = accumulate(grads, *b, g.len());
                    for i in 0..g.len() {
                        if av[i] > bv[i] {
                            gb[i] += g[i];
                        }
                    }
                }
            }
            Op::SquaredError(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if self.needs(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += 2.0 * (av[i] - bv[i]) * g[i];
                    }
                }
                if self.needs(*b) {
                    let gb = accumulate(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] -= 2.0 * (av[i] - bv[i]) * g[i];
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let cols = self.val(*x).cols();
                if self.needs(*x) {
                    for (d, s) in accumulate(grads, *x, g.len()).iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.needs(*bias) {
                    let gb = accumulate(grads, *bias, cols);
                    for row in g.chunks_exact(cols) {
                        for (d, s) in gb.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            Op::MulCol(x, w) => {
                let xv = self.val(*x);
                let cols = xv.cols();
                let wv = self.val(*w).data();
                if self.needs(*x) {
                    let gx = accumulate(grads, *x, g.len());
                    for (r, (drow, srow)) in gx.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).enumerate() {
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += s * wv[r];
                        }
                    }
                }
                if self.needs(*w) {
                    let gw = accumulate(grads, *w, wv.len());
                    for (r, (xrow, srow)) in xv.data().chunks_exact(cols).zip(g.chunks_exact(cols)).enumerate() {
                        gw[r] += xrow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.needs(*x) {
                    for (d, v) in accumulate(grads, *x, g.len()).iter_mut().zip(g) {
                        *d += s * v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if self.needs(p) {
                        let gp = accumulate(grads, p, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (d, s) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).len();
                    if self.needs(p) {
                        for (d, s) in accumulate(grads, p, len).iter_mut().zip(&g[offset..offset + len]) {
                            *d += s;
                        }
                    }
                    offset += len;
                }
            }
            Op::SliceCols { src, start } => {
                if self.needs(*src) {
                    let sv = self.val(*src);
                    let (cols, w) = (sv.cols(), node.value.cols());
                    let gs = accumulate(grads, *src, sv.len());
                    for (r, srow) in g.chunks_exact(w).enumerate() {
                        for (d, s) in gs[r * cols + start..r * cols + start + w].iter_mut().zip(srow) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xv = self.val(*x).data();
                    let gx = accumulate(grads, *x, g.len());
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let gx = accumulate(grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let cols = node.value.cols();
                    let gx = accumulate(grads, *x, g.len());
                    for ((drow, yrow), srow) in gx
                        .chunks_exact_mut(cols)
                        .zip(node.value.data().chunks_exact(cols))
                        .zip(g.chunks_exact(cols))
                    {
                        let dot: f64 = yrow.iter().zip(srow).map(|(y, s)| y * s).sum();
                        for ((d, y), s) in drow.iter_mut().zip(yrow).zip(srow) {
                            *d += y * (s - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if self.needs(*x) {
                    let cols = node.value.cols();
                    let gx = accumulate(grads, *x, g.len());
                    for ((drow, yrow), srow) in gx
                        .chunks_exact_mut(cols)
                        .zip(node.value.data().chunks_exact(cols))
                        .zip(g.chunks_exact(cols))
                    {
                        let total: f64 = srow.iter().sum();
                        for ((d, y), s) in drow.iter_mut().zip(yrow).zip(srow) {
                            *d += s - y.exp() * total;
                        }
                    }
                }
            }
            Op::Mean { src, axis } => {
                if self.needs(*src) {
                    let shape = self.val(*src).shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let n = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let gs = accumulate(grads, *src, outer * n * inner);
                    let inv = 1.0 / n as f64;
                    for o in 0..outer {
                        for a in 0..n {
                            let base = (o * n + a) * inner;
                            for i in 0..inner {
                                gs[base + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let len = self.val(*x).len();
                    for d in accumulate(grads, *x, len).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::GatherRows { src, index } => {
                if self.needs(*src) {
                    let sv = self.val(*src);
                    let cols = sv.cols();
                    let gs = accumulate(grads, *src, sv.len());
                    for (k, &i) in index.iter().enumerate() {
                        for (d, s) in gs[i * cols..(i + 1) * cols].iter_mut().zip(&g[k * cols..(k + 1) * cols]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    for (d, s) in accumulate(grads, *x, g.len()).iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (sa, sb) = (self.val(*a).shape(), self.val(*b).shape());
                let (gn, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                if self.needs(*a) {
                    let ga = accumulate(grads, *a, gn * m * k);
                    for gi in 0..gn {
                        let gc = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &bd[gi * k * n..(gi + 1) * k * n];
                        let gab = &mut ga[gi * m * k..(gi + 1) * m * k];
                        for r in 0..m {
                            for c in 0..n {
                                let s = gc[r * n + c];
                                if s == 0.0 {
                                    continue;
                                }
                                for t in 0..k {
                                    let bval = if *trans_b { bb[c * k + t] } else { bb[t * n + c] };
                                    gab[r * k + t] += s * bval;
                                }
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = accumulate(grads, *b, gn * k * n);
                    for gi in 0..gn {
                        let gc = &g[gi * m * n..(gi + 1) * m * n];
                        let ab = &ad[gi * m * k..(gi + 1) * m * k];
                        let gbb = &mut gb[gi * k * n..(gi + 1) * k * n];
                        for r in 0..m {
                            for c in 0..n {
                                let s = gc[r * n + c];
                                if s == 0.0 {
                                    continue;
                                }
                                for t in 0..k {
                                    let idx = if *trans_b { c * k + t } else { t * n + c };
                                    gbb[idx] += s * ab[r * k + t];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul_returns_input() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::identity(3));
        let x = tape.constant(t(&[3, 2], &[1.0, -2.0, 3.5, 0.25, -7.0, 4.0]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn minimum_is_elementwise() {
        let mut tape = Tape::new();
        let q1 = tape.constant(t(&[1], &[1.2]));
        let q2 = tape.constant(t(&[1], &[0.7]));
        let m = tape.minimum(q1, q2).unwrap();
        assert_eq!(tape.value(m).data(), &[0.7]);
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.leaf(t(&[1], &[5.0]));
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_gradient_at_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t(&[1, 2], &[0.0, 0.0]));
        let logp = tape.log_softmax(logits).unwrap();
        let target = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let picked = tape.mul(logp, target).unwrap();
        let total = tape.sum(picked).unwrap();
        let loss = tape.scale(total, -1.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(logits);
        assert!((g.data()[0] + 0.5).abs() < 1e-15);
        assert!((g.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(DiffError::NonScalarLoss { .. })));
    }

    #[test]
    fn shape_mismatch_names_the_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn overflow_is_reported_not_propagated() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[1e300]));
        let err = tape.mul(a, a).unwrap_err();
        assert!(matches!(err, DiffError::NonFinite { op: "mul" }));
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let w = tape.leaf(t(&[3, 2], &[0.1, -0.4, 0.7, 0.3, -0.9, 0.2]));
            let x = tape.constant(t(&[2, 3], &[1.0, 2.0, -1.0, 0.5, 0.25, -0.75]));
            let h = tape.matmul(x, w).unwrap();
            let h = tape.tanh(h).unwrap();
            let s = tape.softmax(h).unwrap();
            let loss = tape.sum(s).unwrap();
            let loss = tape.mul(loss, loss).unwrap();
            tape.backward(loss).unwrap().wrt(w)
        };
        let (a, b) = (run(), run());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
