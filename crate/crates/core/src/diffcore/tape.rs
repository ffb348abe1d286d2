use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{DiffError, GradientVector, ParamId, ParamStore, Tensor};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, keeping one row.
    Rows,
    /// Reduce over columns, keeping one column.
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Relu,
    Softplus,
    Abs,
    Cos,
    Sigmoid,
    Tanh,
    Huber(f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Unary::Softplus => softplus(x),
            Unary::Abs => x.abs(),
            Unary::Cos => x.cos(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Huber(k) => huber(x, k),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Cos => -x.sin(),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Huber(k) => {
                if x.abs() <= k {
                    x
                } else {
                    k * x.signum()
                }
            }
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Huber function with threshold `kappa`.
pub fn huber(x: f64, kappa: f64) -> f64 {
    let a = x.abs();
    if a <= kappa {
        0.5 * x * x
    } else {
        kappa * (a - 0.5 * kappa)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    Sum(Var, Axis),
    Mean(Var, Axis),
    Max(Var, Axis, Vec<usize>),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    RepeatRows(Var, usize),
    TileRows(Var, usize),
    Reshape(Var),
    BatchMatVec(Var, Var),
    MeanRowGroups(Var, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive operations.
///
/// Every constructor validates shapes and returns the new node's [`Var`].
/// Nodes are stored in creation order, which is always a topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-parameter leaf. Receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf bound to a registered parameter. Repeated calls for the same id
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() < store.len() {
            self.param_vars.resize(store.len(), None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ar, ac) = dims(self.value(a));
        let (br, bc) = dims(self.value(b));
        let rows = broadcast_dim(ar, br)
            .ok_or_else(|| shape_err(kind.name(), format!("[{ar}, {ac}] vs [{br}, {bc}]")))?;
        let cols = broadcast_dim(ac, bc)
            .ok_or_else(|| shape_err(kind.name(), format!("[{ar}, {ac}] vs [{br}, {bc}]")))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let ra = if ar == 1 { 0 } else { r };
            let rb = if br == 1 { 0 } else { r };
            for c in 0..cols {
                let x = av[ra * ac + if ac == 1 { 0 } else { c }];
                let y = bv[rb * bc + if bc == 1 { 0 } else { c }];
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                });
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::Binary(kind, a, b), rg))
    }

    /// Elementwise sum with row/column broadcasting of size-1 dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::matrix(t.rows(), t.cols(), t.data().iter().map(|x| x * factor).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::matrix(t.rows(), t.cols(), t.data().iter().map(|x| x + c).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::matrix(t.rows(), t.cols(), t.data().iter().map(|&x| kind.apply(x)).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Unary(kind, a), rg)
    }

    /// ReLU; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(Unary::Cos, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    /// Elementwise Huber function of a residual with threshold `kappa`.
    pub fn huber(&mut self, a: Var, kappa: f64) -> Result<Var, DiffError> {
        if !(kappa > 0.0) {
            return Err(shape_err("huber", format!("kappa must be positive, got {kappa}")));
        }
        Ok(self.unary(Unary::Huber(kappa), a))
    }

    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Var {
        let out = reduce(self.value(a), axis, |xs| xs.iter().sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a, axis), rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: Axis) -> Var {
        let out = reduce(self.value(a), axis, |xs| xs.iter().sum::<f64>() / xs.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a, axis), rg)
    }

    /// Maximum along an axis; ties go to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: Axis) -> Var {
        let mut arg = Vec::new();
        let out = reduce(self.value(a), axis, |xs| {
            let i = argmax(xs);
            arg.push(i);
            xs[i]
        });
        let rg = self.rg(a);
        self.push(out, Op::Max(a, axis, arg), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts.first().ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let (r, c) = dims(self.value(p));
            if r != rows {
                return Err(shape_err("concat_cols", format!("row count {r} vs {rows}")));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = dims(self.value(p));
            if c != cols {
                return Err(shape_err("concat_rows", format!("column count {c} vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let (rows, cols) = dims(self.value(a));
        if start >= end || end > cols {
            return Err(shape_err("slice_cols", format!("range {start}..{end} of {cols} columns")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&self.value(a).row_slice(r)[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(rows, w, out)?, Op::SliceCols(a, start), rg))
    }

    /// Picks column `indices[r]` from each row `r`, giving a column vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var, DiffError> {
        let (rows, cols) = dims(self.value(a));
        if indices.len() != rows {
            return Err(shape_err("gather", format!("{} indices for {rows} rows", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(shape_err("gather", format!("index {bad} out of {cols} columns")));
        }
        let out: Vec<f64> = indices.iter().enumerate().map(|(r, &c)| self.value(a).get(r, c)).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::column(out), Op::Gather(a, indices.to_vec()), rg))
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var, DiffError> {
        if times == 0 {
            return Err(shape_err("repeat_rows", "zero repetitions".into()));
        }
        let (rows, cols) = dims(self.value(a));
        let mut out = Vec::with_capacity(rows * cols * times);
        for r in 0..rows {
            for _ in 0..times {
                out.extend_from_slice(self.value(a).row_slice(r));
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(rows * times, cols, out)?, Op::RepeatRows(a, times), rg))
    }

    /// Stacks `times` copies of the whole matrix.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var, DiffError> {
        if times == 0 {
            return Err(shape_err("tile_rows", "zero repetitions".into()));
        }
        let (rows, cols) = dims(self.value(a));
        let mut out = Vec::with_capacity(rows * cols * times);
        for _ in 0..times {
            out.extend_from_slice(self.value(a).data());
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(rows * times, cols, out)?, Op::TileRows(a, times), rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, DiffError> {
        let n = self.value(a).len();
        if rows * cols != n {
            return Err(shape_err("reshape", format!("{n} values into [{rows}, {cols}]")));
        }
        let out = self.value(a).with_shape(rows, cols);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Row-wise matrix-vector product: row `b` of `weights` holds a row-major
    /// `h × o` matrix that multiplies row `b` of `x` (`o` wide), giving `h` outputs.
    pub fn batch_matvec(&mut self, weights: Var, x: Var) -> Result<Var, DiffError> {
        let (wb, wn) = dims(self.value(weights));
        let (xb, o) = dims(self.value(x));
        if wb != xb || o == 0 || wn % o != 0 {
            return Err(shape_err("batch_matvec", format!("weights [{wb}, {wn}] vs input [{xb}, {o}]")));
        }
        let h = wn / o;
        let mut out = vec![0.0; wb * h];
        let wv = self.value(weights).data();
        let xv = self.value(x).data();
        for b in 0..wb {
            let xr = &xv[b * o..(b + 1) * o];
            for j in 0..h {
                let wr = &wv[b * wn + j * o..b * wn + (j + 1) * o];
                out[b * h + j] = wr.iter().zip(xr).map(|(p, q)| p * q).sum();
            }
        }
        let rg = self.rg(weights) || self.rg(x);
        Ok(self.push(Tensor::matrix(wb, h, out)?, Op::BatchMatVec(weights, x), rg))
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn mean_row_groups(&mut self, a: Var, group: usize) -> Result<Var, DiffError> {
        let (rows, cols) = dims(self.value(a));
        if group == 0 || rows % group != 0 {
            return Err(shape_err("mean_row_groups", format!("{rows} rows in groups of {group}")));
        }
        let g = rows / group;
        let mut out = vec![0.0; g * cols];
        let av = self.value(a).data();
        for r in 0..rows {
            let dst = &mut out[(r / group) * cols..(r / group + 1) * cols];
            for (d, s) in dst.iter_mut().zip(&av[r * cols..(r + 1) * cols]) {
                *d += s / group as f64;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(g, cols, out)?, Op::MeanRowGroups(a, group), rg))
    }

    /// Gradient of the scalar `output` with respect to every parameter in
    /// `store`, flattened in registration order. Parameters that do not
    /// appear on the tape get zeros.
    pub fn backward(&self, output: Var, store: &ParamStore) -> Result<GradientVector, DiffError> {
        let out_val = self.value(output);
        if !out_val.is_scalar() {
            return Err(DiffError::NonScalar { shape: out_val.shape().to_vec() });
        }
        let mut flat = GradientVector::zeros(store.numel());
        if !self.nodes[output.0].requires_grad {
            return Ok(flat);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let off = store.offset(*id);
                    for (slot, v) in flat.0[off..off + g.len()].iter_mut().zip(&g) {
                        *slot += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims(self.value(*a));
                    let n = self.value(*b).cols();
                    if self.rg(*a) {
                        let ga = slot(&mut grads, *a, m * k);
                        matmul_bt_acc(&g, self.value(*b).data(), ga, m, k, n);
                    }
                    if self.rg(*b) {
                        let gb = slot(&mut grads, *b, k * n);
                        matmul_at_acc(self.value(*a).data(), &g, gb, m, k, n);
                    }
                }
                Op::Binary(kind, a, b) => {
                    let (rows, cols) = dims(&node.value);
                    let (ar, ac) = dims(self.value(*a));
                    let (br, bc) = dims(self.value(*b));
                    if self.rg(*a) {
                        let bv = self.value(*b).data();
                        let ga = slot(&mut grads, *a, ar * ac);
                        for r in 0..rows {
                            for c in 0..cols {
                                let gi = g[r * cols + c];
                                let ai = (if ar == 1 { 0 } else { r }) * ac + if ac == 1 { 0 } else { c };
                                ga[ai] += match kind {
                                    Binary::Add | Binary::Sub => gi,
                                    Binary::Mul => {
                                        gi * bv[(if br == 1 { 0 } else { r }) * bc + if bc == 1 { 0 } else { c }]
                                    }
                                };
                            }
                        }
                    }
                    if self.rg(*b) {
                        let av = self.value(*a).data();
                        let gb = slot(&mut grads, *b, br * bc);
                        for r in 0..rows {
                            for c in 0..cols {
                                let gi = g[r * cols + c];
                                let bi = (if br == 1 { 0 } else { r }) * bc + if bc == 1 { 0 } else { c };
                                gb[bi] += match kind {
                                    Binary::Add => gi,
                                    Binary::Sub => -gi,
                                    Binary::Mul => {
                                        gi * av[(if ar == 1 { 0 } else { r }) * ac + if ac == 1 { 0 } else { c }]
                                    }
                                };
                            }
                        }
                    }
                }
                Op::Scale(a, f) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for (d, s) in ga.iter_mut().zip(&g) {
                        *d += s * f;
                    }
                }
                Op::AddScalar(a) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for (d, s) in ga.iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                Op::Unary(kind, a) => {
                    let x = self.value(*a).data();
                    let y = node.value.data();
                    let ga = slot(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * kind.deriv(x[i], y[i]);
                    }
                }
                Op::Sum(a, axis) | Op::Mean(a, axis) => {
                    let (rows, cols) = dims(self.value(*a));
                    let denom = match (&node.op, axis) {
                        (Op::Mean(..), Axis::Rows) => rows as f64,
                        (Op::Mean(..), Axis::Cols) => cols as f64,
                        _ => 1.0,
                    };
                    let ga = slot(&mut grads, *a, rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let gi = match axis {
                                Axis::Rows => g[c],
                                Axis::Cols => g[r],
                            };
                            ga[r * cols + c] += gi / denom;
                        }
                    }
                }
                Op::Max(a, axis, arg) => {
                    let (rows, cols) = dims(self.value(*a));
                    let ga = slot(&mut grads, *a, rows * cols);
                    for (o, &i) in arg.iter().enumerate() {
                        let pos = match axis {
                            Axis::Rows => i * cols + o,
                            Axis::Cols => o * cols + i,
                        };
                        ga[pos] += g[o];
                    }
                }
                Op::SumAll(a) => {
                    let n = self.value(*a).len();
                    let ga = slot(&mut grads, *a, n);
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = dims(&node.value);
                    let mut start = 0;
                    for &p in parts {
                        let (_, c) = dims(self.value(p));
                        if self.rg(p) {
                            let gp = slot(&mut grads, p, rows * c);
                            for r in 0..rows {
                                for j in 0..c {
                                    gp[r * c + j] += g[r * total + start + j];
                                }
                            }
                        }
                        start += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.rg(p) {
                            let gp = slot(&mut grads, p, n);
                            for (d, s) in gp.iter_mut().zip(&g[start..start + n]) {
                                *d += s;
                            }
                        }
                        start += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = dims(self.value(*a));
                    let w = node.value.cols();
                    let ga = slot(&mut grads, *a, rows * cols);
                    for r in 0..rows {
                        for j in 0..w {
                            ga[r * cols + start + j] += g[r * w + j];
                        }
                    }
                }
                Op::Gather(a, indices) => {
                    let (rows, cols) = dims(self.value(*a));
                    let ga = slot(&mut grads, *a, rows * cols);
                    for (r, &c) in indices.iter().enumerate() {
                        ga[r * cols + c] += g[r];
                    }
                }
                Op::RepeatRows(a, times) => {
                    let (rows, cols) = dims(self.value(*a));
                    let ga = slot(&mut grads, *a, rows * cols);
                    for r in 0..rows {
                        for t in 0..*times {
                            let src = &g[(r * times + t) * cols..(r * times + t + 1) * cols];
                            for (d, s) in ga[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::TileRows(a, times) => {
                    let n = self.value(*a).len();
                    let ga = slot(&mut grads, *a, n);
                    for t in 0..*times {
                        for (d, s) in ga.iter_mut().zip(&g[t * n..(t + 1) * n]) {
                            *d += s;
                        }
                    }
                }
                Op::Reshape(a) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for (d, s) in ga.iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                Op::BatchMatVec(w, x) => {
                    let (wb, wn) = dims(self.value(*w));
                    let o = self.value(*x).cols();
                    let h = wn / o;
                    if self.rg(*w) {
                        let xv = self.value(*x).data();
                        let gw = slot(&mut grads, *w, wb * wn);
                        for b in 0..wb {
                            for j in 0..h {
                                let gj = g[b * h + j];
                                if gj == 0.0 {
                                    continue;
                                }
                                let dst = &mut gw[b * wn + j * o..b * wn + (j + 1) * o];
                                for (d, xi) in dst.iter_mut().zip(&xv[b * o..(b + 1) * o]) {
                                    *d += gj * xi;
                                }
                            }
                        }
                    }
                    if self.rg(*x) {
                        let wv = self.value(*w).data();
                        let gx = slot(&mut grads, *x, wb * o);
                        for b in 0..wb {
                            for j in 0..h {
                                let gj = g[b * h + j];
                                let src = &wv[b * wn + j * o..b * wn + (j + 1) * o];
                                for (d, wi) in gx[b * o..(b + 1) * o].iter_mut().zip(src) {
                                    *d += gj * wi;
                                }
                            }
                        }
                    }
                }
                Op::MeanRowGroups(a, group) => {
                    let (rows, cols) = dims(self.value(*a));
                    let ga = slot(&mut grads, *a, rows * cols);
                    for r in 0..rows {
                        let src = &g[(r / group) * cols..(r / group + 1) * cols];
                        for (d, s) in ga[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                            *d += s / *group as f64;
                        }
                    }
                }
            }
        }
        Ok(flat)
    }
}

/// Gradient buffer for node `v`, allocated on first use.
fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn reduce(t: &Tensor, axis: Axis, mut f: impl FnMut(&[f64]) -> f64) -> Tensor {
    let (rows, cols) = dims(t);
    match axis {
        Axis::Cols => Tensor::column((0..rows).map(|r| f(t.row_slice(r))).collect()),
        Axis::Rows => {
            let mut buf = vec![0.0; rows];
            let mut out = Vec::with_capacity(cols);
            for c in 0..cols {
                for (r, b) in buf.iter_mut().enumerate() {
                    *b = t.get(r, c);
                }
                out.push(f(&buf));
            }
            Tensor::row(out)
        }
    }
}
