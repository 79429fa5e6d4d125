//! Tape-based reverse-mode automatic differentiation over 2-D matrices.
//!
//! Every value on the tape is a `rows x cols` matrix; scalars are `1 x 1`.
//! Operations append a node and return a [`Var`] handle. [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into leaf nodes and,
//! for leaves loaded from a [`ParamStore`], into the stored parameters.

use super::kernels;
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Gelu,
    Relu,
    Exp,
    Log,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce down each column (over rows).
    Rows,
    /// Reduce along each row (over columns).
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Unary(Var, Activation),
    Clamp(Var, f64, f64),
    Softmax(Var, Axis),
    MaskedSoftmaxRows(Var),
    SegmentSoftmax(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SumAll(Var),
    MeanAll(Var),
    RowSums(Var),
    ColMeans(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    GroupMean {
        x: Var,
        assignment: Vec<usize>,
        counts: Vec<usize>,
    },
    NeighborMean {
        x: Var,
        offsets: Vec<usize>,
        neighbors: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
    grad: Option<Vec<f64>>,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ---- leaves -------------------------------------------------------

    /// A leaf that participates in differentiation when `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.data().to_vec(), Op::Leaf, t.requires_grad()))
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::shape("constant", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        self.constant(r, c, t.data().to_vec())
    }

    /// Loads a stored parameter; its gradient flows back into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let (r, c) = t.dims2().expect("parameters are at most rank 2");
        let v = self.push(r, c, t.data().to_vec(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    // ---- inspection ---------------------------------------------------

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("consistent node")
    }

    pub fn row(&self, v: Var, r: usize) -> &[f64] {
        let n = self.node(v);
        &n.value[r * n.cols..(r + 1) * n.cols]
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, &[da.0, da.1], &[db.0, db.1]));
        }
        Ok(())
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), m, k, n, &mut out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::shape("matmul_nt", &[m, k], &[n, k2]));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a), self.value(b), m, k, n, &mut out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = kernels::transpose(self.value(a), r, c);
        let ng = self.ng(&[a]);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    // ---- elementwise --------------------------------------------------

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (r, c) = self.dims(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ((r, c), (rr, rc)) = (self.dims(a), self.dims(row));
        if rr != 1 || rc != c {
            return Err(Error::shape("add_row", &[r, c], &[rr, rc]));
        }
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(c.max(1))
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(&[a, row]);
        Ok(self.push(r, c, out, Op::AddRow(a, row), ng))
    }

    /// Multiplies row `i` of `a` by `col[i]` (`col` is `r x 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let ((r, c), (cr, cc)) = (self.dims(a), self.dims(col));
        if cr != r || cc != 1 {
            return Err(Error::shape("mul_col", &[r, c], &[cr, cc]));
        }
        let cv = self.value(col);
        let mut out = self.value(a).to_vec();
        for i in 0..r {
            out[i * c..(i + 1) * c].iter_mut().for_each(|x| *x *= cv[i]);
        }
        let ng = self.ng(&[a, col]);
        Ok(self.push(r, c, out, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x * k).collect();
        let ng = self.ng(&[a]);
        self.push(r, c, out, Op::Scale(a, k), ng)
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x + k).collect();
        let ng = self.ng(&[a]);
        self.push(r, c, out, Op::Shift(a), ng)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let (r, c) = self.dims(a);
        let f: fn(f64) -> f64 = match kind {
            Activation::Sigmoid => kernels::sigmoid,
            Activation::Gelu => kernels::gelu,
            Activation::Relu => |x| x.max(0.0),
            Activation::Exp => f64::exp,
            Activation::Log => f64::ln,
            Activation::Abs => f64::abs,
        };
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(&[a]);
        self.push(r, c, out, Op::Unary(a, kind), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Log)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Abs)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping applied.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x.clamp(lo, hi)).collect();
        let ng = self.ng(&[a]);
        self.push(r, c, out, Op::Clamp(a, lo, hi), ng)
    }

    // ---- normalizations -----------------------------------------------

    /// Max-subtracted softmax. `Axis::Cols` normalizes each row,
    /// `Axis::Rows` normalizes each column.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let (r, c) = self.dims(a);
        let out = match axis {
            Axis::Cols => kernels::softmax_rows(self.value(a), r, c, None),
            Axis::Rows => {
                let t = kernels::transpose(self.value(a), r, c);
                let s = kernels::softmax_rows(&t, c, r, None);
                kernels::transpose(&s, c, r)
            }
        };
        let ng = self.ng(&[a]);
        self.push(r, c, out, Op::Softmax(a, axis), ng)
    }

    /// Row softmax restricted to entries where `allowed` is true (row-major,
    /// same shape as `a`). Disallowed entries get probability zero. A row
    /// with no allowed entry falls back to the unmasked softmax.
    pub fn masked_softmax_rows(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if allowed.len() != r * c {
            return Err(Error::shape("masked_softmax_rows", &[r, c], &[allowed.len()]));
        }
        let out = kernels::softmax_rows(self.value(a), r, c, Some(allowed));
        let ng = self.ng(&[a]);
        Ok(self.push(r, c, out, Op::MaskedSoftmaxRows(a), ng))
    }

    /// Softmax of an `n x 1` column taken separately within each group.
    pub fn segment_softmax(&mut self, a: Var, groups: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if c != 1 || groups.len() != r {
            return Err(Error::shape("segment_softmax", &[r, c], &[groups.len(), 1]));
        }
        let x = self.value(a);
        let n_groups = groups.iter().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; n_groups];
        for (i, &g) in groups.iter().enumerate() {
            max[g] = max[g].max(x[i]);
        }
        let mut out: Vec<f64> = groups.iter().enumerate().map(|(i, &g)| (x[i] - max[g]).exp()).collect();
        let mut sum = vec![0.0; n_groups];
        for (i, &g) in groups.iter().enumerate() {
            sum[g] += out[i];
        }
        for (i, &g) in groups.iter().enumerate() {
            out[i] /= sum[g];
        }
        let ng = self.ng(&[a]);
        Ok(self.push(r, 1, out, Op::SegmentSoftmax(a, groups.to_vec()), ng))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both `1 x c`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        for p in [gain, bias] {
            if self.dims(p) != (1, c) {
                let d = self.dims(p);
                return Err(Error::shape("layer_norm", &[r, c], &[d.0, d.1]));
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(r, c, out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(&[a]);
        self.push(1, 1, vec![s], Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.ng(&[a]);
        self.push(1, 1, vec![s], Op::MeanAll(a), ng)
    }

    /// Sum along each row: `r x c -> r x 1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).chunks(c.max(1)).map(|ch| ch.iter().sum()).collect();
        let ng = self.ng(&[a]);
        self.push(r, 1, out, Op::RowSums(a), ng)
    }

    /// Mean over rows: `r x c -> 1 x c`.
    pub fn col_means(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; c];
        for ch in self.value(a).chunks(c.max(1)) {
            out.iter_mut().zip(ch).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= r.max(1) as f64);
        let ng = self.ng(&[a]);
        self.push(1, c, out, Op::ColMeans(a), ng)
    }

    // ---- indexing -----------------------------------------------------

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", &[r, c], &[bad]));
        }
        let v = self.value(a);
        let out = idx.iter().flat_map(|&i| v[i * c..(i + 1) * c].iter().copied()).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(idx.len(), c, out, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Sums row `i` of `a` into row `idx[i]` of an `n x c` zero matrix.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.len() != r || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("scatter_add_rows", &[r, c], &[idx.len(), n]));
        }
        let v = self.value(a);
        let mut out = vec![0.0; n * c];
        for (i, &t) in idx.iter().enumerate() {
            out[t * c..(t + 1) * c]
                .iter_mut()
                .zip(&v[i * c..(i + 1) * c])
                .for_each(|(o, x)| *o += x);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(n, c, out, Op::ScatterAddRows(a, idx.to_vec()), ng))
    }

    /// Row-wise mean per group: output row `g` averages the rows of `a`
    /// with `assignment[i] == g`. Every group in `0..n_groups` must be nonempty.
    pub fn group_mean(&mut self, a: Var, assignment: &[usize], n_groups: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if assignment.len() != r {
            return Err(Error::shape("group_mean", &[r, c], &[assignment.len()]));
        }
        let mut counts = vec![0usize; n_groups];
        for &g in assignment {
            if g >= n_groups {
                return Err(Error::Contract(format!("group {g} out of range {n_groups}")));
            }
            counts[g] += 1;
        }
        if counts.contains(&0) {
            return Err(Error::Contract("empty group in group_mean".into()));
        }
        let v = self.value(a);
        let mut out = vec![0.0; n_groups * c];
        for (i, &g) in assignment.iter().enumerate() {
            out[g * c..(g + 1) * c]
                .iter_mut()
                .zip(&v[i * c..(i + 1) * c])
                .for_each(|(o, x)| *o += x);
        }
        for (g, &n) in counts.iter().enumerate() {
            out[g * c..(g + 1) * c].iter_mut().for_each(|o| *o /= n as f64);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(
            n_groups,
            c,
            out,
            Op::GroupMean { x: a, assignment: assignment.to_vec(), counts },
            ng,
        ))
    }

    /// Output row `i` is the mean of rows `neighbors[offsets[i]..offsets[i+1]]`.
    pub fn neighbor_mean(&mut self, a: Var, offsets: &[usize], neighbors: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if offsets.len() != r + 1 || offsets[r] != neighbors.len() {
            return Err(Error::shape("neighbor_mean", &[r, c], &[offsets.len(), neighbors.len()]));
        }
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let nb = &neighbors[offsets[i]..offsets[i + 1]];
            if nb.is_empty() {
                continue;
            }
            let o = &mut out[i * c..(i + 1) * c];
            for &j in nb {
                o.iter_mut().zip(&v[j * c..(j + 1) * c]).for_each(|(o, x)| *o += x);
            }
            let k = nb.len() as f64;
            o.iter_mut().for_each(|x| *x /= k);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(
            r,
            c,
            out,
            Op::NeighborMean { x: a, offsets: offsets.to_vec(), neighbors: neighbors.to_vec() },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::shape("concat_rows", &[rows, c], &[r, pc]));
            }
            out.extend_from_slice(self.value(p));
            rows += r;
        }
        let ng = self.ng(parts);
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::shape("concat_cols", &[r, total], &[pr, pc]));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.row(p, i));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(r, total, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, len]));
        }
        let v = self.value(a);
        let out = (0..r).flat_map(|i| v[i * c + start..i * c + start + len].iter().copied()).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(r, len, out, Op::SliceCols(a, start), ng))
    }

    // ---- backward -----------------------------------------------------

    /// Propagates gradients from the scalar `loss` to every reachable leaf
    /// that requires them. Parameter gradients are added to `store`;
    /// calling twice accumulates twice.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.dims(loss) != (1, 1) {
            let (r, c) = self.dims(loss);
            return Err(Error::Contract(format!("backward needs a scalar loss, got {r}x{c}")));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g.clone()),
                }
                if let Some(pid) = node.param {
                    store.get_mut(pid).accumulate_grad(&g);
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (r, c) = (node.rows, node.cols);
        let y = &node.value;

        // Hands a zero-initialized gradient buffer for input `v` to `f`,
        // skipping inputs that do not need gradients.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let src = &self.nodes[v.0];
            if !src.needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; src.value.len()]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| kernels::matmul_nt_acc(g, bv, m, n, k, ga));
                acc(*b, &mut |gb| kernels::matmul_tn_acc(av, g, m, k, n, gb));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| kernels::matmul_acc(g, bv, m, n, k, ga));
                acc(*b, &mut |gb| kernels::matmul_tn_acc(g, av, m, n, k, gb));
            }
            Op::Transpose(a) => {
                let gt = kernels::transpose(g, r, c);
                acc(*a, &mut |ga| ga.iter_mut().zip(&gt).for_each(|(x, y)| *x += y));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] += g[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] / bv[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*row, &mut |gr| {
                    for ch in g.chunks(c.max(1)) {
                        add_into(gr, ch);
                    }
                });
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[i * c + j] * cv[i];
                        }
                    }
                });
                acc(*col, &mut |gc| {
                    for i in 0..r {
                        gc[i] += (0..c).map(|j| g[i * c + j] * av[i * c + j]).sum::<f64>();
                    }
                });
            }
            Op::Scale(a, k) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += k * y));
            }
            Op::Shift(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        let d = match kind {
                            Activation::Sigmoid => y[k] * (1.0 - y[k]),
                            Activation::Gelu => kernels::gelu_grad(x[k]),
                            Activation::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Exp => y[k],
                            Activation::Log => 1.0 / x[k],
                            Activation::Abs => {
                                if x[k] > 0.0 {
                                    1.0
                                } else if x[k] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        ga[k] += g[k] * d;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        if x[k] > *lo && x[k] < *hi {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let dx = match axis {
                    Axis::Cols => kernels::softmax_rows_backward(y, g, r, c),
                    Axis::Rows => {
                        let yt = kernels::transpose(y, r, c);
                        let gt = kernels::transpose(g, r, c);
                        let d = kernels::softmax_rows_backward(&yt, &gt, c, r);
                        kernels::transpose(&d, c, r)
                    }
                };
                acc(*a, &mut |ga| add_into(ga, &dx));
            }
            Op::MaskedSoftmaxRows(a) => {
                let dx = kernels::softmax_rows_backward(y, g, r, c);
                acc(*a, &mut |ga| add_into(ga, &dx));
            }
            Op::SegmentSoftmax(a, groups) => {
                let n_groups = groups.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_groups];
                for (k, &grp) in groups.iter().enumerate() {
                    dot[grp] += g[k] * y[k];
                }
                acc(*a, &mut |ga| {
                    for (k, &grp) in groups.iter().enumerate() {
                        ga[k] += y[k] * (g[k] - dot[grp]);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        let gh: Vec<f64> = (0..c).map(|j| g[i * c + j] * gv[j]).collect();
                        let mean_gh = gh.iter().sum::<f64>() / c as f64;
                        let mean_ghx = (0..c).map(|j| gh[j] * xhat[i * c + j]).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[i * c + j] += inv_std[i] * (gh[j] - mean_gh - xhat[i * c + j] * mean_ghx);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for ch in g.chunks(c.max(1)) {
                        add_into(gb, ch);
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::RowSums(a) => {
                let ac = self.dims(*a).1;
                acc(*a, &mut |ga| {
                    for (i, ch) in ga.chunks_mut(ac.max(1)).enumerate() {
                        ch.iter_mut().for_each(|x| *x += g[i]);
                    }
                });
            }
            Op::ColMeans(a) => {
                let ar = self.dims(*a).0 as f64;
                acc(*a, &mut |ga| {
                    for ch in ga.chunks_mut(c.max(1)) {
                        ch.iter_mut().zip(g).for_each(|(x, y)| *x += y / ar);
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                acc(*a, &mut |ga| {
                    for (k, &src) in idx.iter().enumerate() {
                        add_into(&mut ga[src * c..(src + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::ScatterAddRows(a, idx) => {
                acc(*a, &mut |ga| {
                    for (k, &dst) in idx.iter().enumerate() {
                        add_into(&mut ga[k * c..(k + 1) * c], &g[dst * c..(dst + 1) * c]);
                    }
                });
            }
            Op::GroupMean { x, assignment, counts } => {
                acc(*x, &mut |ga| {
                    for (k, &grp) in assignment.iter().enumerate() {
                        let w = 1.0 / counts[grp] as f64;
                        for j in 0..c {
                            ga[k * c + j] += g[grp * c + j] * w;
                        }
                    }
                });
            }
            Op::NeighborMean { x, offsets, neighbors } => {
                acc(*x, &mut |ga| {
                    for i in 0..r {
                        let nb = &neighbors[offsets[i]..offsets[i + 1]];
                        if nb.is_empty() {
                            continue;
                        }
                        let w = 1.0 / nb.len() as f64;
                        for &src in nb {
                            for j in 0..c {
                                ga[src * c + j] += g[i * c + j] * w;
                            }
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    acc(p, &mut |gp| {
                        for i in 0..r {
                            add_into(&mut gp[i * pc..(i + 1) * pc], &g[i * c + col..i * c + col + pc]);
                        }
                    });
                    col += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.dims(*a).1;
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        add_into(&mut ga[i * ac + start..i * ac + start + c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
