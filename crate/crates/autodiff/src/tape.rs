use std::sync::Arc;

use thiserror::Error;

use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into};
use crate::{Scalar, Tensor, Unary};

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("{op}: index range {start}..{end} out of bounds for extent {extent}")]
    Range { op: &'static str, start: usize, end: usize, extent: usize },
    #[error("gradient requested for a non-scalar output of shape {0:?}")]
    NotScalar((usize, usize)),
    #[error("variable {0} is not recorded on this tape")]
    NotOnTape(usize),
    #[error("variable {0} is not a leaf")]
    NotLeaf(usize),
    #[error("{0}: empty operand list")]
    Empty(&'static str),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    ScaleBy(Var, Var),
    Unary(Var, Unary<T>),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    L2Norm(Var),
    ScatterRows(Var, Arc<[usize]>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only record of a computation. Node indices are a topological order,
/// so the backward sweep simply walks them in reverse.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TapeError> {
    if a.shape() != b.shape() {
        return Err(TapeError::Shape { op, lhs: a.shape(), rhs: b.shape() });
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Records an input (parameter, network input or constant).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(TapeError::Shape { op: "matmul", lhs: av.shape(), rhs: bv.shape() });
        }
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        matmul_into(av, bv, &mut out);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TapeError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::new(av.rows(), av.cols(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let out = self.zip("div", a, b, |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b)))
    }

    /// Adds the single row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(TapeError::Shape { op: "add_row", lhs: av.shape(), rhs: bv.shape() });
        }
        let cols = av.cols();
        let mut out = av.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += bv.data()[i % cols];
        }
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    /// Multiplies every entry of `a` by the `1 x 1` tensor `s`.
    pub fn scale_by(&mut self, s: Var, a: Var) -> Result<Var, TapeError> {
        let (sv, av) = (self.value(s), self.value(a));
        if sv.shape() != (1, 1) {
            return Err(TapeError::Shape { op: "scale_by", lhs: sv.shape(), rhs: av.shape() });
        }
        let k = sv.item();
        let out = av.map(|x| x * k);
        Ok(self.push(out, Op::ScaleBy(s, a)))
    }

    pub fn unary(&mut self, a: Var, f: Unary<T>) -> Var {
        let out = self.value(a).map(|x| f.apply(x));
        self.push(out, Op::Unary(a, f))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Unary::Scale(c))
    }

    pub fn offset(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Unary::Offset(c))
    }

    /// Row-wise softmax. With a mask, entries whose mask bit is `false` get
    /// probability zero; a row with no admissible entry is all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, TapeError> {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(TapeError::Shape { op: "softmax_rows", lhs: av.shape(), rhs: (1, m.len()) });
            }
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let admissible = |c: usize| mask.map_or(true, |m| m[r * cols + c]);
            let mut max = T::neg_infinity();
            for c in 0..cols {
                if admissible(c) {
                    max = max.max(av.get(r, c));
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for c in 0..cols {
                if admissible(c) {
                    let e = (av.get(r, c) - max).exp();
                    out.set(r, c, e);
                    total += e;
                }
            }
            for c in 0..cols {
                out.set(r, c, out.get(r, c) / total);
            }
        }
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = T::from_usize(av.len().max(1)).unwrap();
        let s: T = av.data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a))
    }

    /// Column sums: `n x d -> 1 x d`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, &x) in out.data_mut().iter_mut().zip(av.row_slice(r)) {
                *o += x;
            }
        }
        self.push(out, Op::SumRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        let first = parts.first().ok_or(TapeError::Empty("concat_rows"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(TapeError::Shape { op: "concat_rows", lhs: (rows, cols), rhs: pv.shape() });
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        Ok(self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        let first = parts.first().ok_or(TapeError::Empty("concat_cols"))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(TapeError::Shape { op: "concat_cols", lhs: (rows, cols), rhs: pv.shape() });
            }
            cols += pv.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            for r in 0..rows {
                for c in 0..pv.cols() {
                    out.set(r, offset + c, pv.get(r, c));
                }
            }
            offset += pv.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TapeError> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(TapeError::Range { op: "slice_rows", start, end: start + len, extent: av.rows() });
        }
        let cols = av.cols();
        let data = av.data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(Tensor::new(len, cols, data), Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TapeError> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(TapeError::Range { op: "slice_cols", start, end: start + len, extent: av.cols() });
        }
        let out = Tensor::from_fn(av.rows(), len, |r, c| av.get(r, start + c));
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// Frobenius norm as a `1 x 1` tensor. Its gradient at the origin is taken as zero.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let n = self.value(a).frobenius_norm();
        self.push(Tensor::scalar(n), Op::L2Norm(a))
    }

    /// Places row `k` of `src` at row `index[k]` of an otherwise zero `rows x d`
    /// matrix. Repeated indices accumulate.
    pub fn scatter_rows(&mut self, src: Var, index: &[usize], rows: usize) -> Result<Var, TapeError> {
        let sv = self.value(src);
        if index.len() != sv.rows() {
            return Err(TapeError::Shape { op: "scatter_rows", lhs: sv.shape(), rhs: (index.len(), 1) });
        }
        let cols = sv.cols();
        let mut out = Tensor::zeros(rows, cols);
        for (k, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(TapeError::Range { op: "scatter_rows", start: i, end: i + 1, extent: rows });
            }
            for c in 0..cols {
                out.set(i, c, out.get(i, c) + sv.get(k, c));
            }
        }
        Ok(self.push(out, Op::ScatterRows(src, index.into())))
    }

    /// Reverse-mode gradients of the scalar `output` with respect to each leaf in `wrt`.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>, TapeError> {
        if output.0 >= self.nodes.len() {
            return Err(TapeError::NotOnTape(output.0));
        }
        let shape = self.value(output).shape();
        if shape != (1, 1) {
            return Err(TapeError::NotScalar(shape));
        }
        for &w in wrt {
            if w.0 >= self.nodes.len() {
                return Err(TapeError::NotOnTape(w.0));
            }
            if !matches!(self.nodes[w.0].op, Op::Leaf) {
                return Err(TapeError::NotLeaf(w.0));
            }
        }
        let adj = self.backward(output);
        Ok(wrt
            .iter()
            .map(|w| {
                adj[w.0].clone().unwrap_or_else(|| {
                    let (r, c) = self.value(*w).shape();
                    Tensor::zeros(r, c)
                })
            })
            .collect())
    }

    fn backward(&self, output: Var) -> Vec<Option<Tensor<T>>> {
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::scalar(T::one()));

        fn acc<T: Scalar>(adj: &mut [Option<Tensor<T>>], v: Var, shape: (usize, usize)) -> &mut Tensor<T> {
            adj[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
        }

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let shape_of = |v: Var| self.nodes[v.0].value.shape();
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    matmul_nt_into(&g, bv, acc(&mut adj, *a, av.shape()));
                    matmul_tn_into(av, &g, acc(&mut adj, *b, bv.shape()));
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.shape()).add_assign(&g);
                    acc(&mut adj, *b, g.shape()).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, g.shape()).add_assign(&g);
                    let neg = g.map(|x| -x);
                    acc(&mut adj, *b, g.shape()).add_assign(&neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = Tensor::new(g.rows(), g.cols(), g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect());
                    let gb = Tensor::new(g.rows(), g.cols(), g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect());
                    acc(&mut adj, *a, g.shape()).add_assign(&ga);
                    acc(&mut adj, *b, g.shape()).add_assign(&gb);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = Tensor::new(g.rows(), g.cols(), g.data().iter().zip(bv.data()).map(|(&x, &y)| x / y).collect());
                    let gb = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(av.data().iter().zip(bv.data()))
                            .map(|(&x, (&u, &w))| -x * u / (w * w))
                            .collect(),
                    );
                    acc(&mut adj, *a, g.shape()).add_assign(&ga);
                    acc(&mut adj, *b, g.shape()).add_assign(&gb);
                }
                Op::AddRow(a, b) => {
                    acc(&mut adj, *a, g.shape()).add_assign(&g);
                    let gb = acc(&mut adj, *b, shape_of(*b));
                    for r in 0..g.rows() {
                        for (o, &x) in gb.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *o += x;
                        }
                    }
                }
                Op::ScaleBy(s, a) => {
                    let (sv, av) = (self.value(*s).item(), self.value(*a));
                    let ds: T = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).sum();
                    acc(&mut adj, *s, (1, 1)).data_mut()[0] += ds;
                    let ga = g.map(|x| x * sv);
                    acc(&mut adj, *a, g.shape()).add_assign(&ga);
                }
                Op::Unary(a, f) => {
                    let av = self.value(*a);
                    let ga = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(av.data().iter().zip(node.value.data()))
                            .map(|(&gx, (&x, &y))| gx * f.derivative(x, y))
                            .collect(),
                    );
                    acc(&mut adj, *a, g.shape()).add_assign(&ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (rows, cols) = y.shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let dot: T = (0..cols).map(|c| g.get(r, c) * y.get(r, c)).sum();
                        for c in 0..cols {
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    acc(&mut adj, *a, (rows, cols)).add_assign(&ga);
                }
                Op::Sum(a) => {
                    let gs = g.item();
                    for x in acc(&mut adj, *a, shape_of(*a)).data_mut() {
                        *x += gs;
                    }
                }
                Op::Mean(a) => {
                    let (r, c) = shape_of(*a);
                    let gs = g.item() / T::from_usize((r * c).max(1)).unwrap();
                    for x in acc(&mut adj, *a, (r, c)).data_mut() {
                        *x += gs;
                    }
                }
                Op::SumRows(a) => {
                    let (r, c) = shape_of(*a);
                    let ga = acc(&mut adj, *a, (r, c));
                    for row in 0..r {
                        for col in 0..c {
                            ga.set(row, col, ga.get(row, col) + g.get(0, col));
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    let cols = g.cols();
                    for p in parts {
                        let (r, c) = shape_of(*p);
                        let slice = Tensor::new(r, c, g.data()[offset * cols..(offset + r) * cols].to_vec());
                        acc(&mut adj, *p, (r, c)).add_assign(&slice);
                        offset += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = shape_of(*p);
                        let slice = Tensor::from_fn(r, c, |i, j| g.get(i, offset + j));
                        acc(&mut adj, *p, (r, c)).add_assign(&slice);
                        offset += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    let shape = shape_of(*a);
                    let ga = acc(&mut adj, *a, shape);
                    let cols = shape.1;
                    for (k, &x) in g.data().iter().enumerate() {
                        ga.data_mut()[start * cols + k] += x;
                    }
                }
                Op::SliceCols(a, start) => {
                    let shape = shape_of(*a);
                    let ga = acc(&mut adj, *a, shape);
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            ga.set(r, start + c, ga.get(r, start + c) + g.get(r, c));
                        }
                    }
                }
                Op::Transpose(a) => {
                    let gt = g.transpose();
                    acc(&mut adj, *a, gt.shape()).add_assign(&gt);
                }
                Op::L2Norm(a) => {
                    let n = node.value.item();
                    if n > T::zero() {
                        let k = g.item() / n;
                        let ga = self.value(*a).map(|x| x * k);
                        acc(&mut adj, *a, ga.shape()).add_assign(&ga);
                    }
                }
                Op::ScatterRows(src, index) => {
                    let shape = shape_of(*src);
                    let gs = acc(&mut adj, *src, shape);
                    for (k, &i) in index.iter().enumerate() {
                        for c in 0..shape.1 {
                            gs.set(k, c, gs.get(k, c) + g.get(i, c));
                        }
                    }
                }
            }
        }
        adj
    }
}
