use std::borrow::Cow;

use rand::Rng;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn};
use super::{Real, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[r×c] + [1×c]`
    AddRow(Var, Var),
    /// `[r×c] * [r×1]`
    MulCol(Var, Var),
    /// `scale * x + shift`; only the scale matters for the gradient.
    Affine(Var, Real),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    Dropout(Var, Vec<Real>),
    GatherRows(Var, Vec<usize>),
    GroupMeanRows(Var, Vec<Vec<usize>>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    StackRows(Vec<Var>),
    BroadcastRows(Var),
    ScatterCols(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    Sum(Var),
    WeightedSum(Var, Vec<Real>),
    GruCell(Box<GruCell>),
}

#[derive(Debug)]
struct GruCell {
    gx: Var,
    row: usize,
    h: Var,
    w_h: Var,
    b_h: Var,
    r: Vec<Real>,
    z: Vec<Real>,
    n: Vec<Real>,
    gh_n: Vec<Real>,
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations for one forward pass.
///
/// Parameters can be borrowed for the lifetime of the tape, so registering
/// a model's weights costs nothing.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients of the leaves that required them, from one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn matrix(rows: usize, cols: usize, data: Vec<Real>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("shape computed from inputs")
}

fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row(i);
        let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    fn check(&self, v: Var) -> Result<&Tensor, TensorError> {
        self.nodes
            .get(v.0)
            .map(|n| n.value.as_ref())
            .ok_or(TensorError::UnknownVar(v.0))
    }

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.check(a)?.matmul(self.check(b)?)?;
        Ok(self.push_owned(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.check(a)?.transpose();
        Ok(self.push_owned(out, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (x, y) = (self.check(a)?, self.check(b)?);
        if x.shape() != y.shape() {
            return Err(mismatch(op, x, y));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push_owned(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push_owned(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push_owned(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[1×c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (x, b) = (self.check(a)?, self.check(row)?);
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(mismatch("add_row", x, b));
        }
        let c = x.cols();
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (v, &bv) in chunk.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let out = matrix(x.rows(), c, data);
        Ok(self.push_owned(out, Op::AddRow(a, row), &[a, row]))
    }

    /// Scales row `i` of `a` by `col[i]`, where `col` is `[r×1]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, TensorError> {
        let (x, g) = (self.check(a)?, self.check(col)?);
        if g.cols() != 1 || g.rows() != x.rows() {
            return Err(mismatch("mul_col", x, g));
        }
        let c = x.cols();
        let mut data = x.data().to_vec();
        for (chunk, &gv) in data.chunks_mut(c).zip(g.data()) {
            for v in chunk {
                *v *= gv;
            }
        }
        let out = matrix(x.rows(), c, data);
        Ok(self.push_owned(out, Op::MulCol(a, col), &[a, col]))
    }

    pub fn affine(&mut self, a: Var, scale: Real, shift: Real) -> Result<Var, TensorError> {
        let out = self.check(a)?.map(|x| scale * x + shift);
        Ok(self.push_owned(out, Op::Affine(a, scale), &[a]))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var, TensorError> {
        self.affine(a, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.check(a)?.map(sigmoid);
        Ok(self.push_owned(out, Op::Sigmoid(a), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.check(a)?.map(Real::tanh);
        Ok(self.push_owned(out, Op::Tanh(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.check(a)?.map(|x| x.max(0.0));
        Ok(self.push_owned(out, Op::Relu(a), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.check(a)?.map(Real::exp);
        Ok(self.push_owned(out, Op::Exp(a), &[a]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.check(a)?.map(Real::ln);
        Ok(self.push_owned(out, Op::Log(a), &[a]))
    }

    /// Softmax over the last axis of every row.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = softmax_rows(self.check(a)?);
        Ok(self.push_owned(out, Op::SoftmaxRows(a), &[a]))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`. Identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: Real,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::DropoutProbability(p));
        }
        let x = self.check(a)?;
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<Real> = (0..x.len())
            .map(|_| if rng.gen::<Real>() < p { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push_owned(out, Op::Dropout(a, mask), &[a]))
    }

    /// Rows `ids` of `table`, stacked.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.check(table)?;
        if ids.is_empty() {
            return Err(TensorError::Empty { op: "gather_rows" });
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= t.rows() {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    size: t.rows(),
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = matrix(ids.len(), c, data);
        Ok(self.push_owned(out, Op::GatherRows(table, ids.to_vec()), &[table]))
    }

    /// Output row `g` is the mean of rows `groups[g]` of `x`.
    pub fn group_mean_rows(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var, TensorError> {
        let t = self.check(x)?;
        if groups.is_empty() || groups.iter().any(Vec::is_empty) {
            return Err(TensorError::Empty {
                op: "group_mean_rows",
            });
        }
        let c = t.cols();
        let mut data = vec![0.0; groups.len() * c];
        for (g, members) in groups.iter().enumerate() {
            let out_row = &mut data[g * c..(g + 1) * c];
            for &r in members {
                if r >= t.rows() {
                    return Err(TensorError::IndexOutOfRange {
                        op: "group_mean_rows",
                        index: r,
                        size: t.rows(),
                    });
                }
                for (o, &v) in out_row.iter_mut().zip(t.row(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / members.len() as Real;
            for o in out_row {
                *o *= inv;
            }
        }
        let out = matrix(groups.len(), c, data);
        Ok(self.push_owned(out, Op::GroupMeanRows(x, groups.to_vec()), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat_cols" })?;
        let rows = self.check(*first)?.rows();
        let mut total = 0;
        for &p in parts {
            let t = self.check(p)?;
            if t.rows() != rows {
                return Err(mismatch("concat_cols", self.value(*first), t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = matrix(rows, total, data);
        Ok(self.push_owned(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let t = self.check(a)?;
        if start >= end || end > t.cols() {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                size: t.cols(),
            });
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let out = matrix(t.rows(), end - start, data);
        Ok(self.push_owned(out, Op::SliceCols(a, start), &[a]))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let t = self.check(a)?;
        if start >= end || end > t.rows() {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                size: t.rows(),
            });
        }
        let c = t.cols();
        let data = t.data()[start * c..end * c].to_vec();
        let out = matrix(end - start, c, data);
        Ok(self.push_owned(out, Op::SliceRows(a, start), &[a]))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty { op: "stack_rows" })?;
        let cols = self.check(*first)?.cols();
        let mut rows = 0;
        for &p in parts {
            let t = self.check(p)?;
            if t.cols() != cols {
                return Err(mismatch("stack_rows", self.value(*first), t));
            }
            rows += t.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = matrix(rows, cols, data);
        Ok(self.push_owned(out, Op::StackRows(parts.to_vec()), parts))
    }

    /// Repeats a `[1×c]` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var, TensorError> {
        let t = self.check(a)?;
        if t.rows() != 1 || n == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_rows",
                left: t.shape().to_vec(),
                right: vec![n],
            });
        }
        let mut data = Vec::with_capacity(n * t.cols());
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let out = matrix(n, t.cols(), data);
        Ok(self.push_owned(out, Op::BroadcastRows(a), &[a]))
    }

    /// Scatter-adds column `t` of `a` into column `index[t]` of a `[r×width]`
    /// result. Duplicate indices sum.
    pub fn scatter_cols(&mut self, a: Var, index: &[usize], width: usize) -> Result<Var, TensorError> {
        let t = self.check(a)?;
        if index.len() != t.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_cols",
                left: t.shape().to_vec(),
                right: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= width) {
            return Err(TensorError::IndexOutOfRange {
                op: "scatter_cols",
                index: bad,
                size: width,
            });
        }
        let mut data = vec![0.0; t.rows() * width];
        for r in 0..t.rows() {
            let out_row = &mut data[r * width..(r + 1) * width];
            for (&v, &i) in t.row(r).iter().zip(index) {
                out_row[i] += v;
            }
        }
        let out = matrix(t.rows(), width, data);
        Ok(self.push_owned(out, Op::ScatterCols(a, index.to_vec()), &[a]))
    }

    /// `[r×1]` result holding `a[i, cols[i]]`.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let t = self.check(a)?;
        if cols.len() != t.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "pick_cols",
                left: t.shape().to_vec(),
                right: vec![cols.len()],
            });
        }
        let mut data = Vec::with_capacity(cols.len());
        for (r, &c) in cols.iter().enumerate() {
            if c >= t.cols() {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick_cols",
                    index: c,
                    size: t.cols(),
                });
            }
            data.push(t.at(r, c));
        }
        let out = matrix(cols.len(), 1, data);
        Ok(self.push_owned(out, Op::PickCols(a, cols.to_vec()), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = Tensor::scalar(self.check(a)?.sum());
        Ok(self.push_owned(out, Op::Sum(a), &[a]))
    }

    /// `Σ weights ⊙ a`, a scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<Real>) -> Result<Var, TensorError> {
        let t = self.check(a)?;
        if weights.len() != t.len() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                left: t.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let s = t.data().iter().zip(&weights).map(|(x, w)| x * w).sum();
        Ok(self.push_owned(Tensor::scalar(s), Op::WeightedSum(a, weights), &[a]))
    }

    /// Fused GRU update (gate order r, z, n):
    ///
    /// ```text
    /// gh = h W_h + b_h
    /// r = σ(gx_r + gh_r),  z = σ(gx_z + gh_z),  n = tanh(gx_n + r ⊙ gh_n)
    /// h' = n + z ⊙ (h − n)
    /// ```
    ///
    /// `gx` holds the input projection `x W_x + b_x`; rows `row..row+k` are
    /// used for the `k` rows of `h`. Bitwise equal to composing the same
    /// formula from primitive ops.
    pub fn gru_cell(&mut self, gx: Var, row: usize, h: Var, w_h: Var, b_h: Var) -> Result<Var, TensorError> {
        let (gxv, hv, whv, bhv) = (self.check(gx)?, self.check(h)?, self.check(w_h)?, self.check(b_h)?);
        let (k, hid) = (hv.rows(), hv.cols());
        let h3 = 3 * hid;
        if whv.rows() != hid || whv.cols() != h3 {
            return Err(mismatch("gru_cell", hv, whv));
        }
        if bhv.len() != h3 || bhv.rows() != 1 {
            return Err(mismatch("gru_cell", whv, bhv));
        }
        if gxv.cols() != h3 || row + k > gxv.rows() {
            return Err(mismatch("gru_cell", gxv, hv));
        }
        let mut gh = vec![0.0; k * h3];
        gemm_nn(hv.data(), whv.data(), &mut gh, k, hid, h3);
        for chunk in gh.chunks_mut(h3) {
            for (o, &b) in chunk.iter_mut().zip(bhv.data()) {
                *o += b;
            }
        }
        let size = k * hid;
        let (mut r, mut z, mut n, mut gh_n) = (
            Vec::with_capacity(size),
            Vec::with_capacity(size),
            Vec::with_capacity(size),
            Vec::with_capacity(size),
        );
        let mut out = Vec::with_capacity(size);
        for i in 0..k {
            let gxr = gxv.row(row + i);
            let ghr = &gh[i * h3..(i + 1) * h3];
            let hr = hv.row(i);
            for j in 0..hid {
                let rv = sigmoid(gxr[j] + ghr[j]);
                let zv = sigmoid(gxr[hid + j] + ghr[hid + j]);
                let ghn = ghr[2 * hid + j];
                let nv = (gxr[2 * hid + j] + rv * ghn).tanh();
                out.push(nv + zv * (hr[j] - nv));
                r.push(rv);
                z.push(zv);
                n.push(nv);
                gh_n.push(ghn);
            }
        }
        let value = matrix(k, hid, out);
        let cell = GruCell {
            gx,
            row,
            h,
            w_h,
            b_h,
            r,
            z,
            n,
            gh_n,
        };
        Ok(self.push_owned(value, Op::GruCell(Box::new(cell)), &[gx, h, w_h, b_h]))
    }

    /// Reverse sweep from a scalar `loss`. Every node is visited once, in
    /// reverse recording order; only leaves that require gradients get one.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let l = self.check(loss)?;
        if !l.is_scalar() {
            return Err(TensorError::NonScalarLoss(l.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(l.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn gru_backward(&self, c: &GruCell, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let hv = self.value(c.h);
        let (k, hid) = (hv.rows(), hv.cols());
        let h3 = 3 * hid;
        let mut d_gx = vec![0.0; k * h3];
        let mut d_gh = vec![0.0; k * h3];
        let mut d_h = vec![0.0; k * hid];
        for i in 0..k {
            for j in 0..hid {
                let e = i * hid + j;
                let (rv, zv, nv) = (c.r[e], c.z[e], c.n[e]);
                let gv = g.data()[e];
                let dn = gv * (1.0 - zv);
                let dz = gv * (hv.data()[e] - nv);
                d_h[e] = gv * zv;
                let dan = dn * (1.0 - nv * nv);
                let dar = dan * c.gh_n[e] * rv * (1.0 - rv);
                let daz = dz * zv * (1.0 - zv);
                let base = i * h3;
                d_gx[base + j] = dar;
                d_gx[base + hid + j] = daz;
                d_gx[base + 2 * hid + j] = dan;
                d_gh[base + j] = dar;
                d_gh[base + hid + j] = daz;
                d_gh[base + 2 * hid + j] = dan * rv;
            }
        }
        if let Some(gh) = self.slot(grads, c.h) {
            let whv = self.value(c.w_h);
            gemm_nt(&d_gh, whv.data(), &mut d_h, k, h3, hid);
            for (o, &v) in gh.data_mut().iter_mut().zip(&d_h) {
                *o += v;
            }
        }
        if let Some(gw) = self.slot(grads, c.w_h) {
            gemm_tn(hv.data(), &d_gh, gw.data_mut(), k, hid, h3);
        }
        if let Some(gb) = self.slot(grads, c.b_h) {
            for chunk in d_gh.chunks(h3) {
                for (o, &v) in gb.data_mut().iter_mut().zip(chunk) {
                    *o += v;
                }
            }
        }
        if let Some(gx) = self.slot(grads, c.gx) {
            let dst = &mut gx.data_mut()[c.row * h3..(c.row + k) * h3];
            for (o, &v) in dst.iter_mut().zip(&d_gx) {
                *o += v;
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape())))
    }

    fn propagate(&self, node: &Node<'p>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = node.value.as_ref();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nt(g.data(), bv.data(), ga.data_mut(), m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn(av.data(), g.data(), gb.data_mut(), m, k, n);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(&g.transpose());
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (o, &v) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gv), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * x;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, &gv), &x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * x;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gr) = self.slot(grads, *row) {
                    let c = g.cols();
                    for chunk in g.data().chunks(c) {
                        for (o, &v) in gr.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                let c = av.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gchunk), &s) in ga
                        .data_mut()
                        .chunks_mut(c)
                        .zip(g.data().chunks(c))
                        .zip(cv.data())
                    {
                        for (ov, &gv) in o.iter_mut().zip(gchunk) {
                            *ov += gv * s;
                        }
                    }
                }
                if let Some(gc) = self.slot(grads, *col) {
                    for (r, o) in gc.data_mut().iter_mut().enumerate() {
                        let dot: Real = g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum();
                        *o += dot;
                    }
                }
            }
            Op::Affine(a, scale) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, &v) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += scale * v;
                    }
                }
            }
            Op::Sigmoid(a) => self.unary(grads, *a, g, |gv, yv, _| gv * yv * (1.0 - yv), y),
            Op::Tanh(a) => self.unary(grads, *a, g, |gv, yv, _| gv * (1.0 - yv * yv), y),
            Op::Relu(a) => self.unary(grads, *a, g, |gv, _, x| if x > 0.0 { gv } else { 0.0 }, y),
            Op::Exp(a) => self.unary(grads, *a, g, |gv, yv, _| gv * yv, y),
            Op::Log(a) => self.unary(grads, *a, g, |gv, _, x| gv / x, y),
            Op::SoftmaxRows(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: Real = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gv), &m) in ga.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *o += gv * m;
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::GroupMeanRows(x, groups) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (gi, members) in groups.iter().enumerate() {
                        let inv = 1.0 / members.len() as Real;
                        for &r in members {
                            for (o, &v) in gx.row_mut(r).iter_mut().zip(g.row(gi)) {
                                *o += v * inv;
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..g.rows() {
                            for (o, &v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                *o += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let w = g.cols();
                    for r in 0..g.rows() {
                        for (o, &v) in ga.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let c = g.cols();
                    let dst = &mut ga.data_mut()[start * c..start * c + g.len()];
                    for (o, &v) in dst.iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        for (o, &v) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *o += v;
                        }
                    }
                    offset += n;
                }
            }
            Op::BroadcastRows(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..g.rows() {
                        for (o, &v) in ga.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ScatterCols(a, index) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        for (o, &i) in ga.row_mut(r).iter_mut().zip(index) {
                            *o += gr[i];
                        }
                    }
                }
            }
            Op::PickCols(a, cols) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let c = ga.cols();
                    for (r, &col) in cols.iter().enumerate() {
                        ga.data_mut()[r * c + col] += g.data()[r];
                    }
                }
            }
            Op::GruCell(c) => self.gru_backward(c, g, grads),
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let s = g.item();
                    for o in ga.data_mut() {
                        *o += s;
                    }
                }
            }
            Op::WeightedSum(a, weights) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let s = g.item();
                    for (o, &w) in ga.data_mut().iter_mut().zip(weights) {
                        *o += s * w;
                    }
                }
            }
        }
    }

    fn unary(
        &self,
        grads: &mut [Option<Tensor>],
        a: Var,
        g: &Tensor,
        f: impl Fn(Real, Real, Real) -> Real,
        y: &Tensor,
    ) {
        let x = self.value(a);
        if let Some(ga) = self.slot(grads, a) {
            for (((o, &gv), &yv), &xv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()).zip(x.data()) {
                *o += f(gv, yv, xv);
            }
        }
    }
}
