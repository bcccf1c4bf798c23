use super::tensor::matmul_into;
use super::{NumericsError, Result, Tensor};
use rand::Rng;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[m,n] + [1,n]` with the row broadcast over all rows.
    AddRow(Var, Var),
    /// `[1,n]` repeated into `m` rows.
    BroadcastRows(Var),
    /// `a * x + b` elementwise with constants.
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    /// Row-wise softmax with max subtraction.
    SoftmaxRows(Var),
    Ln(Var),
    /// Column-wise concatenation of same-height blocks.
    ConcatCols(Vec<Var>),
    /// Row-wise stacking of same-width blocks.
    ConcatRows(Vec<Var>),
    Transpose(Var),
    /// Gather rows of a table by id.
    Embed(Var, Vec<usize>),
    /// Single element as a `1 x 1` scalar.
    Pick(Var, usize, usize),
    /// Place the entries of a `1 x n` row at the given columns of a wider row.
    ScatterCols(Var, Vec<usize>),
    /// Multiply every entry by a `1 x 1` scalar on the tape.
    MulScalar(Var, Var),
    /// Sum of all entries as a `1 x 1` scalar.
    Sum(Var),
    /// Inverted dropout; the recorded mask entries are `0` or `1/keep`.
    Dropout(Var, Vec<f64>),
}

struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
    grad: Option<Tensor>,
}

/// Records forward primitives in topological order so that replaying them in
/// reverse produces gradients for every tracked tensor.
///
/// A tape is built per forward pass and is single-threaded by design.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a constant input; no gradient will be computed for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Record a tracked input (a parameter); backward fills its gradient.
    pub fn tracked_leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`; `None` if untracked
    /// or backward has not run.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    ) -> NumericsError {
        NumericsError::ShapeMismatch {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(Self::shape_err("matmul", (ar, ac), (br, bc)));
        }
        let mut out = Tensor::zeros(ar, bc);
        matmul_into(self.value(a), self.value(b), &mut out, false);
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if (ar, ac) != (br, bc) {
            return Err(Self::shape_err(name, (ar, ac), (br, bc)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_vec(ar, ac, data)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(op, out, tracked))
    }

    /// `[m,n] + [1,n]`, the row added to every row of the left operand.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(row).shape();
        if br != 1 || bc != ac {
            return Err(Self::shape_err("add_row", (ar, ac), (br, bc)));
        }
        let mut out = self.value(a).clone();
        for r in 0..ar {
            for (o, &v) in out.row_mut(r).iter_mut().zip(self.value(row).data()) {
                *o += v;
            }
        }
        let tracked = self.tracked_any(&[a, row]);
        Ok(self.push(Op::AddRow(a, row), out, tracked))
    }

    /// Repeat a `1 x n` row into `m` rows.
    pub fn broadcast_rows(&mut self, v: Var, m: usize) -> Result<Var> {
        let (vr, vc) = self.value(v).shape();
        if vr != 1 {
            return Err(Self::shape_err("broadcast_rows", (vr, vc), (1, vc)));
        }
        let mut out = Tensor::zeros(m, vc);
        for r in 0..m {
            out.row_mut(r).copy_from_slice(self.value(v).data());
        }
        let tracked = self.is_tracked(v);
        Ok(self.push(Op::BroadcastRows(v), out, tracked))
    }

    /// `a * x + b` elementwise with scalar constants.
    pub fn affine(&mut self, v: Var, a: f64, b: f64) -> Var {
        let data = self.value(v).data().iter().map(|&x| a * x + b).collect();
        let (r, c) = self.value(v).shape();
        let out = Tensor::from_vec(r, c, data).expect("same shape");
        let tracked = self.is_tracked(v);
        self.push(Op::Affine(v, a), out, tracked)
    }

    pub fn tanh(&mut self, v: Var) -> Var {
        self.unary(v, f64::tanh, Op::Tanh(v))
    }

    pub fn sigmoid(&mut self, v: Var) -> Var {
        self.unary(v, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(v))
    }

    pub fn ln(&mut self, v: Var) -> Var {
        self.unary(v, f64::ln, Op::Ln(v))
    }

    fn unary(&mut self, v: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.value(v).shape();
        let data = self.value(v).data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_vec(r, c, data).expect("same shape");
        let tracked = self.is_tracked(v);
        self.push(op, out, tracked)
    }

    /// Row-wise softmax, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, v: Var) -> Result<Var> {
        let (r, c) = self.value(v).shape();
        if c == 0 {
            return Err(NumericsError::EmptyInput("softmax_rows"));
        }
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = self.value(v).row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let out_row = out.row_mut(i);
            for (o, &x) in out_row.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in out_row.iter_mut() {
                *o /= sum;
            }
        }
        let tracked = self.is_tracked(v);
        Ok(self.push(Op::SoftmaxRows(v), out, tracked))
    }

    /// Concatenate blocks of equal height side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::EmptyInput("concat_cols"));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).shape();
            if pr != rows {
                return Err(Self::shape_err("concat_cols", (rows, cols), (pr, pc)));
            }
            cols += pc;
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        let tracked = self.tracked_any(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, tracked))
    }

    /// Stack blocks of equal width on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::EmptyInput("concat_rows"));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).shape();
            if pc != cols {
                return Err(Self::shape_err("concat_rows", (rows, cols), (pr, pc)));
            }
            rows += pr;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            for r in 0..self.value(p).rows() {
                out.row_mut(at).copy_from_slice(self.value(p).row(r));
                at += 1;
            }
        }
        let tracked = self.tracked_any(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, tracked))
    }

    pub fn transpose(&mut self, v: Var) -> Var {
        let out = self.value(v).transposed();
        let tracked = self.is_tracked(v);
        self.push(Op::Transpose(v), out, tracked)
    }

    /// Gather rows of `table` by id; backward scatter-adds into the table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).shape();
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::IndexOutOfRange {
                    op: "embed",
                    row: id,
                    col: 0,
                    rows,
                    cols,
                });
            }
        }
        let mut out = Tensor::zeros(ids.len(), cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.value(table).row(id));
        }
        let tracked = self.is_tracked(table);
        Ok(self.push(Op::Embed(table, ids.to_vec()), out, tracked))
    }

    /// Select one entry as a `1 x 1` scalar.
    pub fn pick(&mut self, v: Var, row: usize, col: usize) -> Result<Var> {
        let (rows, cols) = self.value(v).shape();
        if row >= rows || col >= cols {
            return Err(NumericsError::IndexOutOfRange {
                op: "pick",
                row,
                col,
                rows,
                cols,
            });
        }
        let out = Tensor::scalar(self.value(v).get(row, col));
        let tracked = self.is_tracked(v);
        Ok(self.push(Op::Pick(v, row, col), out, tracked))
    }

    /// Place a `1 x n` row at columns `ids` of a zero-filled `1 x width` row.
    /// The ids must be distinct.
    pub fn scatter_cols(&mut self, v: Var, ids: &[usize], width: usize) -> Result<Var> {
        let (vr, vc) = self.value(v).shape();
        if vr != 1 || vc != ids.len() {
            return Err(Self::shape_err("scatter_cols", (vr, vc), (1, ids.len())));
        }
        let mut out = Tensor::zeros(1, width);
        for (k, &id) in ids.iter().enumerate() {
            if id >= width {
                return Err(NumericsError::IndexOutOfRange {
                    op: "scatter_cols",
                    row: 0,
                    col: id,
                    rows: 1,
                    cols: width,
                });
            }
            out.set(0, id, self.value(v).get(0, k));
        }
        let tracked = self.is_tracked(v);
        Ok(self.push(Op::ScatterCols(v, ids.to_vec()), out, tracked))
    }

    /// Multiply every entry of `v` by the `1 x 1` scalar `s`.
    pub fn mul_scalar(&mut self, v: Var, s: Var) -> Result<Var> {
        let (sr, sc) = self.value(s).shape();
        if (sr, sc) != (1, 1) {
            return Err(Self::shape_err("mul_scalar", self.value(v).shape(), (sr, sc)));
        }
        let sv = self.value(s).item();
        let (r, c) = self.value(v).shape();
        let data = self.value(v).data().iter().map(|&x| x * sv).collect();
        let out = Tensor::from_vec(r, c, data)?;
        let tracked = self.tracked_any(&[v, s]);
        Ok(self.push(Op::MulScalar(v, s), out, tracked))
    }

    /// Sum of all entries as a `1 x 1` scalar.
    pub fn sum(&mut self, v: Var) -> Var {
        let total = self.value(v).data().iter().sum();
        let tracked = self.is_tracked(v);
        self.push(Op::Sum(v), Tensor::scalar(total), tracked)
    }

    /// Inverted dropout: entries are zeroed with probability `rate` and the
    /// survivors scaled by `1/(1-rate)`, so expectations match eval mode.
    /// Decode paths simply never call this.
    pub fn dropout<R: Rng>(&mut self, v: Var, rate: f64, rng: &mut R) -> Var {
        debug_assert!((0.0..1.0).contains(&rate));
        let keep = 1.0 - rate;
        let mask: Vec<f64> = self
            .value(v)
            .data()
            .iter()
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        let (r, c) = self.value(v).shape();
        let data = self
            .value(v)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let out = Tensor::from_vec(r, c, data).expect("same shape");
        let tracked = self.is_tracked(v);
        self.push(Op::Dropout(v, mask), out, tracked)
    }

    /// Replay the tape in reverse from `loss`, accumulating gradients into
    /// every tracked node. `loss` must be a `1 x 1` scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (lr, lc) = self.value(loss).shape();
        if (lr, lc) != (1, 1) {
            return Err(NumericsError::NonScalarLoss { rows: lr, cols: lc });
        }
        for node in &mut self.nodes {
            node.grad = if node.tracked {
                Some(Tensor::zeros(node.value.rows(), node.value.cols()))
            } else {
                None
            };
        }
        if !self.nodes[loss.0].tracked {
            // Loss does not depend on any tracked tensor; all gradients are 0.
            return Ok(());
        }
        self.nodes[loss.0].grad.as_mut().unwrap().set(0, 0, 1.0);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let grad = match self.nodes[idx].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &grad);
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, delta: &Tensor) {
        if let Some(g) = self.nodes[v.0].grad.as_mut() {
            g.add_assign(delta);
        }
    }

    fn propagate(&mut self, idx: usize, grad: &Tensor) {
        // Split borrows: read values immutably, then accumulate input grads.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.is_tracked(a) {
                    let bt = self.value(b).transposed();
                    let mut da = Tensor::zeros(self.value(a).rows(), self.value(a).cols());
                    matmul_into(grad, &bt, &mut da, false);
                    self.add_grad(a, &da);
                }
                if self.is_tracked(b) {
                    let at = self.value(a).transposed();
                    let mut db = Tensor::zeros(self.value(b).rows(), self.value(b).cols());
                    matmul_into(&at, grad, &mut db, false);
                    self.add_grad(b, &db);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, grad);
                self.add_grad(b, grad);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, grad);
                if self.is_tracked(b) {
                    let mut neg = grad.clone();
                    neg.data_mut().iter_mut().for_each(|x| *x = -*x);
                    self.add_grad(b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.is_tracked(a) {
                    let mut da = grad.clone();
                    for (d, &y) in da.data_mut().iter_mut().zip(self.value(b).data()) {
                        *d *= y;
                    }
                    self.add_grad(a, &da);
                }
                if self.is_tracked(b) {
                    let mut db = grad.clone();
                    for (d, &x) in db.data_mut().iter_mut().zip(self.value(a).data()) {
                        *d *= x;
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                self.add_grad(a, grad);
                if self.is_tracked(row) {
                    let mut dr = Tensor::zeros(1, grad.cols());
                    for r in 0..grad.rows() {
                        for (d, &g) in dr.data_mut().iter_mut().zip(grad.row(r)) {
                            *d += g;
                        }
                    }
                    self.add_grad(row, &dr);
                }
            }
            Op::BroadcastRows(v) => {
                let v = *v;
                if self.is_tracked(v) {
                    let mut dv = Tensor::zeros(1, grad.cols());
                    for r in 0..grad.rows() {
                        for (d, &g) in dv.data_mut().iter_mut().zip(grad.row(r)) {
                            *d += g;
                        }
                    }
                    self.add_grad(v, &dv);
                }
            }
            Op::Affine(v, a) => {
                let (v, a) = (*v, *a);
                if self.is_tracked(v) {
                    let mut dv = grad.clone();
                    dv.data_mut().iter_mut().for_each(|x| *x *= a);
                    self.add_grad(v, &dv);
                }
            }
            Op::Tanh(v) => {
                let v = *v;
                if self.is_tracked(v) {
                    let y = &self.nodes[idx].value;
                    let mut dv = grad.clone();
                    for (d, &yv) in dv.data_mut().iter_mut().zip(y.data()) {
                        *d *= 1.0 - yv * yv;
                    }
                    self.add_grad(v, &dv);
                }
            }
            Op::Sigmoid(v) => {
                let v = *v;
                if self.is_tracked(v) {
                    let y = &self.nodes[idx].value;
                    let mut dv = grad.clone();
                    for (d, &yv) in dv.data_mut().iter_mut().zip(y.data()) {
                        *d *= yv * (1.0 - yv);
                    }
                    self.add_grad(v, &dv);
                }
            }
            Op::SoftmaxRows(v) => {
                let v = *v;
                if self.is_tracked(v) {
                    let y = &self.nodes[idx].value;
                    let mut dv = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = grad.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in dv.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    self.add_grad(v, &dv);
                }
            }
            Op::Ln(v) => {
                let v = *v;
                if self.is_tracked(v) {
                    let mut dv = grad.clone();
                    for (d, &x) in dv.data_mut().iter_mut().zip(self.value(v).data()) {
                        *d /= x;
                    }
                    self.add_grad(v, &dv);
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut at = 0;
                for p in parts {
                    let pc = self.value(p).cols();
                    if self.is_tracked(p) {
                        let mut dp = Tensor::zeros(grad.rows(), pc);
                        for r in 0..grad.rows() {
                            dp.row_mut(r).copy_from_slice(&grad.row(r)[at..at + pc]);
                        }
                        self.add_grad(p, &dp);
                    }
                    at += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut at = 0;
                for p in parts {
                    let pr = self.value(p).rows();
                    if self.is_tracked(p) {
                        let mut dp = Tensor::zeros(pr, grad.cols());
                        for r in 0..pr {
                            dp.row_mut(r).copy_from_slice(grad.row(at + r));
                        }
                        self.add_grad(p, &dp);
                    }
                    at += pr;
                }
            }
            Op::Transpose(v) => {
                let v = *v;
                if self.is_tracked(v) {
                    let dv = grad.transposed();
                    self.add_grad(v, &dv);
                }
            }
            Op::Embed(table, ids) => {
                let table = *table;
                let ids = ids.clone();
                if self.is_tracked(table) {
                    let (tr, tc) = self.value(table).shape();
                    let mut dt = Tensor::zeros(tr, tc);
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, &g) in dt.row_mut(id).iter_mut().zip(grad.row(r)) {
                            *d += g;
                        }
                    }
                    self.add_grad(table, &dt);
                }
            }
            Op::Pick(v, row, col) => {
                let (v, row, col) = (*v, *row, *col);
                if self.is_tracked(v) {
                    let mut dv = Tensor::zeros(self.value(v).rows(), self.value(v).cols());
                    dv.set(row, col, grad.item());
                    self.add_grad(v, &dv);
                }
            }
            Op::ScatterCols(v, ids) => {
                let v = *v;
                let ids = ids.clone();
                if self.is_tracked(v) {
                    let mut dv = Tensor::zeros(1, ids.len());
                    for (k, &id) in ids.iter().enumerate() {
                        dv.set(0, k, grad.get(0, id));
                    }
                    self.add_grad(v, &dv);
                }
            }
            Op::MulScalar(v, s) => {
                let (v, s) = (*v, *s);
                let sv = self.value(s).item();
                if self.is_tracked(v) {
                    let mut dv = grad.clone();
                    dv.data_mut().iter_mut().for_each(|x| *x *= sv);
                    self.add_grad(v, &dv);
                }
                if self.is_tracked(s) {
                    let ds: f64 = grad
                        .data()
                        .iter()
                        .zip(self.value(v).data())
                        .map(|(&g, &x)| g * x)
                        .sum();
                    self.add_grad(s, &Tensor::scalar(ds));
                }
            }
            Op::Sum(v) => {
                let v = *v;
                if self.is_tracked(v) {
                    let g = grad.item();
                    let (r, c) = self.value(v).shape();
                    let dv = Tensor::from_vec(r, c, vec![g; r * c]).expect("shape");
                    self.add_grad(v, &dv);
                }
            }
            Op::Dropout(v, mask) => {
                let v = *v;
                let mask = mask.clone();
                if self.is_tracked(v) {
                    let mut dv = grad.clone();
                    for (d, &m) in dv.data_mut().iter_mut().zip(&mask) {
                        *d *= m;
                    }
                    self.add_grad(v, &dv);
                }
            }
        }
    }
}
