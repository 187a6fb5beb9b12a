use super::{gemm, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Embedding(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    MeanGroups(Var, usize),
    MaxGroups(Var, Vec<usize>),
    Mean(Var),
    GroupMatMulNt(Var, Var, usize),
    GroupMatMul(Var, Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of primitive operations; node order is topological.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.cols() != tb.rows() || tb.shape().len() != 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, x: Var, r: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let (tx, tr) = (self.val(x), self.val(r));
        if tr.len() != tx.cols() {
            return Err(shape_err(name, tx, tr));
        }
        let c = tx.cols();
        let data = tx.data().iter().enumerate().map(|(i, &v)| f(v, tr.data()[i % c])).collect();
        let shape = tx.shape().to_vec();
        Ok(self.push(Tensor { shape, data }, op))
    }

    /// `x + row` with `row` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        self.row_broadcast(x, row, "add_row", |a, b| a + b, Op::AddRow(x, row))
    }

    /// `x * row` with `row` broadcast over every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        self.row_broadcast(x, row, "mul_row", |a, b| a * b, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|&v| v * c).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|&v| v + c).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::AddScalar(x))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.val(table);
        let (rows, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= rows {
                return Err(TensorError::Index { op: "embedding", index: i, bound: rows });
            }
            data.extend_from_slice(t.row(i));
        }
        Ok(self.push(Tensor { shape: vec![ids.len(), c], data }, Op::Embedding(table, ids.to_vec())))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Softmax(x))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.val(x);
        let c = t.cols();
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(c.max(1)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::LayerNorm(x, inv_std))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Sigmoid(x))
    }

    /// Column-wise concatenation of equal-row operands.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let rows = self.val(xs[0]).rows();
        for &x in xs {
            if self.val(x).rows() != rows {
                return Err(shape_err("concat", self.val(xs[0]), self.val(x)));
            }
        }
        let total: usize = xs.iter().map(|&x| self.val(x).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.val(x).row(r));
            }
        }
        Ok(self.push(Tensor { shape: vec![rows, total], data }, Op::Concat(xs.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let t = self.val(x);
        if start > end || end > t.cols() {
            return Err(TensorError::Index { op: "slice_cols", index: end, bound: t.cols() });
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        Ok(self.push(Tensor { shape: vec![rows, end - start], data }, Op::SliceCols(x, start)))
    }

    fn check_groups(&self, x: Var, group: usize, op: &'static str) -> Result<(usize, usize), TensorError> {
        let t = self.val(x);
        if group == 0 || t.rows() % group != 0 {
            return Err(TensorError::Index { op, index: group, bound: t.rows() });
        }
        Ok((t.rows() / group, t.cols()))
    }

    /// Mean over each consecutive block of `group` rows.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var, TensorError> {
        let (n, c) = self.check_groups(x, group, "mean_groups")?;
        let t = self.val(x);
        let mut data = vec![0.0; n * c];
        for r in 0..t.rows() {
            let dst = &mut data[(r / group) * c..(r / group + 1) * c];
            for (d, &v) in dst.iter_mut().zip(t.row(r)) {
                *d += v;
            }
        }
        for v in &mut data {
            *v /= group as f64;
        }
        Ok(self.push(Tensor { shape: vec![n, c], data }, Op::MeanGroups(x, group)))
    }

    /// Column-wise max over each consecutive block of `group` rows.
    pub fn max_groups(&mut self, x: Var, group: usize) -> Result<Var, TensorError> {
        let (n, c) = self.check_groups(x, group, "max_groups")?;
        let t = self.val(x);
        let mut data = vec![f64::NEG_INFINITY; n * c];
        let mut arg = vec![0usize; n * c];
        for r in 0..t.rows() {
            let g = r / group;
            for (j, &v) in t.row(r).iter().enumerate() {
                if v > data[g * c + j] {
                    data[g * c + j] = v;
                    arg[g * c + j] = r;
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![n, c], data }, Op::MaxGroups(x, arg)))
    }

    /// Mean of all elements, as a `[1, 1]` scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let m = super::pairwise_sum(t.data()) / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Per group of `group` rows: `a_g · b_gᵀ` (`[g, k] x [k, g]`), stacked to `[N·g, g]`.
    pub fn group_matmul_nt(&mut self, a: Var, b: Var, group: usize) -> Result<Var, TensorError> {
        let (n, k) = self.check_groups(a, group, "group_matmul_nt")?;
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("group_matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; n * group * group];
        for g in 0..n {
            let ra = &ta.data()[g * group * k..(g + 1) * group * k];
            let rb = &tb.data()[g * group * k..(g + 1) * group * k];
            gemm(group, k, group, ra, false, rb, true, 0.0, &mut out[g * group * group..(g + 1) * group * group]);
        }
        Ok(self.push(Tensor { shape: vec![n * group, group], data: out }, Op::GroupMatMulNt(a, b, group)))
    }

    /// Per group of `group` rows: `p_g · v_g` (`[g, g] x [g, k]`), stacked to `[N·g, k]`.
    pub fn group_matmul(&mut self, p: Var, v: Var, group: usize) -> Result<Var, TensorError> {
        let (n, _) = self.check_groups(v, group, "group_matmul")?;
        let (tp, tv) = (self.val(p), self.val(v));
        if tp.rows() != tv.rows() || tp.cols() != group {
            return Err(shape_err("group_matmul", tp, tv));
        }
        let k = tv.cols();
        let mut out = vec![0.0; n * group * k];
        for g in 0..n {
            let rp = &tp.data()[g * group * group..(g + 1) * group * group];
            let rv = &tv.data()[g * group * k..(g + 1) * group * k];
            gemm(group, group, k, rp, false, rv, false, 0.0, &mut out[g * group * k..(g + 1) * group * k]);
        }
        Ok(self.push(Tensor { shape: vec![n * group, k], data: out }, Op::GroupMatMul(p, v, group)))
    }

    /// Reverse pass from a scalar `loss`; gradients are kept for leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.val(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    self.acc(&mut grads, *a, |g| gemm(m, n, k, dy.data(), false, tb.data(), true, 1.0, g));
                    self.acc(&mut grads, *b, |g| gemm(k, m, n, ta.data(), true, dy.data(), false, 1.0, g));
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |g| axpy(g, dy.data(), 1.0));
                    self.acc(&mut grads, *b, |g| axpy(g, dy.data(), 1.0));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |g| axpy(g, dy.data(), 1.0));
                    self.acc(&mut grads, *b, |g| axpy(g, dy.data(), -1.0));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    self.acc(&mut grads, *a, |g| {
                        for ((g, &d), &y) in g.iter_mut().zip(dy.data()).zip(tb.data()) {
                            *g += d * y;
                        }
                    });
                    self.acc(&mut grads, *b, |g| {
                        for ((g, &d), &x) in g.iter_mut().zip(dy.data()).zip(ta.data()) {
                            *g += d * x;
                        }
                    });
                }
                Op::AddRow(x, r) => {
                    let c = self.val(*x).cols();
                    self.acc(&mut grads, *x, |g| axpy(g, dy.data(), 1.0));
                    self.acc(&mut grads, *r, |g| {
                        for row in dy.data().chunks(c) {
                            axpy(g, row, 1.0);
                        }
                    });
                }
                Op::MulRow(x, r) => {
                    let (tx, tr) = (self.val(*x), self.val(*r));
                    let c = tx.cols();
                    self.acc(&mut grads, *x, |g| {
                        for (i, (g, &d)) in g.iter_mut().zip(dy.data()).enumerate() {
                            *g += d * tr.data()[i % c];
                        }
                    });
                    self.acc(&mut grads, *r, |g| {
                        for (i, (&d, &xv)) in dy.data().iter().zip(tx.data()).enumerate() {
                            g[i % c] += d * xv;
                        }
                    });
                }
                Op::Scale(x, c) => self.acc(&mut grads, *x, |g| axpy(g, dy.data(), *c)),
                Op::AddScalar(x) => self.acc(&mut grads, *x, |g| axpy(g, dy.data(), 1.0)),
                Op::Embedding(table, ids) => {
                    let c = self.val(*table).cols();
                    self.acc(&mut grads, *table, |g| {
                        for (r, &id) in ids.iter().enumerate() {
                            axpy(&mut g[id * c..(id + 1) * c], &dy.data()[r * c..(r + 1) * c], 1.0);
                        }
                    });
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    self.acc(&mut grads, *x, |g| {
                        for ((gr, yr), dr) in g.chunks_mut(c).zip(y.data().chunks(c)).zip(dy.data().chunks(c)) {
                            let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                            for ((g, &yv), &dv) in gr.iter_mut().zip(yr).zip(dr) {
                                *g += yv * (dv - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm(x, inv_std) => {
                    let y = &node.value;
                    let c = y.cols();
                    let cf = c as f64;
                    self.acc(&mut grads, *x, |g| {
                        for (r, ((gr, yr), dr)) in
                            g.chunks_mut(c).zip(y.data().chunks(c)).zip(dy.data().chunks(c)).enumerate()
                        {
                            let mean_d = dr.iter().sum::<f64>() / cf;
                            let mean_dy = dr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cf;
                            for ((g, &yv), &dv) in gr.iter_mut().zip(yr).zip(dr) {
                                *g += inv_std[r] * (dv - mean_d - yv * mean_dy);
                            }
                        }
                    });
                }
                Op::Relu(x) => {
                    let tx = self.val(*x);
                    self.acc(&mut grads, *x, |g| {
                        for ((g, &d), &xv) in g.iter_mut().zip(dy.data()).zip(tx.data()) {
                            if xv > 0.0 {
                                *g += d;
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    self.acc(&mut grads, *x, |g| {
                        for ((g, &d), &yv) in g.iter_mut().zip(dy.data()).zip(y.data()) {
                            *g += d * yv * (1.0 - yv);
                        }
                    });
                }
                Op::Concat(xs) => {
                    let total = node.value.cols();
                    let mut off = 0;
                    for &x in xs {
                        let c = self.val(x).cols();
                        self.acc(&mut grads, x, |g| {
                            for (gr, dr) in g.chunks_mut(c).zip(dy.data().chunks(total)) {
                                axpy(gr, &dr[off..off + c], 1.0);
                            }
                        });
                        off += c;
                    }
                }
                Op::SliceCols(x, start) => {
                    let full = self.val(*x).cols();
                    let w = node.value.cols();
                    self.acc(&mut grads, *x, |g| {
                        for (gr, dr) in g.chunks_mut(full).zip(dy.data().chunks(w)) {
                            axpy(&mut gr[*start..*start + w], dr, 1.0);
                        }
                    });
                }
                Op::MeanGroups(x, group) => {
                    let c = node.value.cols();
                    let inv = 1.0 / *group as f64;
                    self.acc(&mut grads, *x, |g| {
                        for (r, gr) in g.chunks_mut(c).enumerate() {
                            axpy(gr, &dy.data()[(r / group) * c..(r / group + 1) * c], inv);
                        }
                    });
                }
                Op::MaxGroups(x, arg) => {
                    let c = node.value.cols();
                    self.acc(&mut grads, *x, |g| {
                        for (i, &r) in arg.iter().enumerate() {
                            g[r * c + i % c] += dy.data()[i];
                        }
                    });
                }
                Op::Mean(x) => {
                    let n = self.val(*x).len() as f64;
                    let d = dy.data()[0] / n;
                    self.acc(&mut grads, *x, |g| g.iter_mut().for_each(|v| *v += d));
                }
                Op::GroupMatMulNt(a, b, group) => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    let (gsz, k) = (*group, ta.cols());
                    let n = ta.rows() / gsz;
                    self.acc(&mut grads, *a, |g| {
                        for i in 0..n {
                            let d = &dy.data()[i * gsz * gsz..(i + 1) * gsz * gsz];
                            let bb = &tb.data()[i * gsz * k..(i + 1) * gsz * k];
                            gemm(gsz, gsz, k, d, false, bb, false, 1.0, &mut g[i * gsz * k..(i + 1) * gsz * k]);
                        }
                    });
                    self.acc(&mut grads, *b, |g| {
                        for i in 0..n {
                            let d = &dy.data()[i * gsz * gsz..(i + 1) * gsz * gsz];
                            let aa = &ta.data()[i * gsz * k..(i + 1) * gsz * k];
                            gemm(gsz, gsz, k, d, true, aa, false, 1.0, &mut g[i * gsz * k..(i + 1) * gsz * k]);
                        }
                    });
                }
                Op::GroupMatMul(p, v, group) => {
                    let (tp, tv) = (self.val(*p), self.val(*v));
                    let (gsz, k) = (*group, tv.cols());
                    let n = tv.rows() / gsz;
                    self.acc(&mut grads, *p, |g| {
                        for i in 0..n {
                            let d = &dy.data()[i * gsz * k..(i + 1) * gsz * k];
                            let vv = &tv.data()[i * gsz * k..(i + 1) * gsz * k];
                            gemm(gsz, k, gsz, d, false, vv, true, 1.0, &mut g[i * gsz * gsz..(i + 1) * gsz * gsz]);
                        }
                    });
                    self.acc(&mut grads, *v, |g| {
                        for i in 0..n {
                            let d = &dy.data()[i * gsz * k..(i + 1) * gsz * k];
                            let pp = &tp.data()[i * gsz * gsz..(i + 1) * gsz * gsz];
                            gemm(gsz, gsz, k, pp, true, d, false, 1.0, &mut g[i * gsz * k..(i + 1) * gsz * k]);
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(slot.data_mut());
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero-filled when the loss does not depend on it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_uniform_row() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[1, 4], 0.7));
        let y = t.softmax_rows(x);
        assert_eq!(t.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::normal(7, 9, 3.0, &mut rng));
        let y = t.softmax_rows(x);
        for r in 0..7 {
            assert!((t.value(y).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::normal(5, 16, 4.0, &mut rng));
        let y = t.layer_norm(x, 0.0);
        for r in 0..5 {
            let row = t.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let a = Tensor::normal(3, 5, 1.0, &mut rng);
        let x = t.leaf(a.clone());
        let i = t.leaf(Tensor::identity(5));
        let y = t.matmul(x, i).unwrap();
        assert_eq!(t.value(y), &a);
    }

    #[test]
    fn sigmoid_zero_is_half() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        assert_eq!(t.value(y).item(), 0.5);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!((g.get(x).unwrap().item() - 6.0).abs() < 1e-10);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let c = t.leaf(Tensor::scalar(5.0));
        let y = t.scale(c, 2.0);
        let _unused = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get_or_zeros(&t, x).item(), 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.matmul(a, b), Err(TensorError::Shape { .. })));
        let c = t.leaf(Tensor::zeros(&[1, 2]));
        assert!(t.add_row(a, c).is_err());
        assert!(t.embedding(a, &[2]).is_err());
    }

    /// Central differences on every input of a composite graph touching all primitives.
    #[test]
    fn all_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let inputs = vec![
            Tensor::normal(4, 3, 1.0, &mut rng), // a
            Tensor::normal(3, 3, 1.0, &mut rng), // w
            Tensor::normal(1, 3, 1.0, &mut rng), // row
            Tensor::normal(5, 3, 1.0, &mut rng), // table
        ];
        let build = |t: &mut Tape, vars: &[Var]| -> Var {
            let (a, w, row, table) = (vars[0], vars[1], vars[2], vars[3]);
            let h = t.matmul(a, w).unwrap();
            let h = t.add_row(h, row).unwrap();
            let h = t.mul_row(h, row).unwrap();
            let e = t.embedding(table, &[0, 2, 2, 4]).unwrap();
            let h = t.add(h, e).unwrap();
            let s = t.group_matmul_nt(h, e, 2).unwrap();
            let p = t.softmax_rows(s);
            let o = t.group_matmul(p, h, 2).unwrap();
            let n = t.layer_norm(o, 1e-5);
            let r = t.relu(n);
            let sg = t.sigmoid(h);
            let cat = t.concat_cols(&[r, sg]).unwrap();
            let sl = t.slice_cols(cat, 1, 5).unwrap();
            let m1 = t.mean_groups(sl, 2).unwrap();
            let m2 = t.max_groups(sl, 2).unwrap();
            let d = t.sub(m1, m2).unwrap();
            let d = t.scale(d, 1.7);
            let d = t.add_scalar(d, 0.3);
            let sq = t.mul(d, d).unwrap();
            t.mean(sq)
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-5;
        for (vi, input) in inputs.iter().enumerate() {
            let g = grads.get_or_zeros(&tape, vars[vi]);
            for j in 0..input.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, x)| {
                            let mut x = x.clone();
                            if k == vi {
                                x.data_mut()[j] += delta;
                            }
                            t.leaf(x)
                        })
                        .collect();
                    let l = build(&mut t, &vs);
                    t.value(l).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.data()[j];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5, "input {vi} coord {j}: fd {fd} analytic {an}");
            }
        }
    }
}
