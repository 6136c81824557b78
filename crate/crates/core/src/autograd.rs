//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are computed
//! eagerly; [`Tape::backward`] walks the record in reverse and returns the
//! gradient of a scalar (1×1) output with respect to every node that depends on
//! a parameter leaf. Constants never receive gradients.

use std::rc::Rc;

use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    OneMinus(Var),
    Exp(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxCols(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var, T),
    LayerNorm(Var, T),
    GatherRows(Var, Rc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    RowMean(Var),
    Mean(Var),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `a + row` with the 1×cols `row` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(a).cols());
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(r.as_slice()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `a ⊙ row` with the 1×cols `row` broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(a).cols());
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(r.as_slice()) {
                *x *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| T::one() - x);
        let rg = self.rg(a);
        self.push(value, Op::OneMinus(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(SQRT_2_OVER_PI);
        let k = T::lit(GELU_C);
        let half = T::lit(0.5);
        let value = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Softmax down each column (over the row axis).
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut value = Matrix::zeros(r, c);
        for j in 0..c {
            let mut m = T::neg_infinity();
            for i in 0..r {
                m = m.max(x.get(i, j));
            }
            let mut z = T::zero();
            for i in 0..r {
                let e = (x.get(i, j) - m).exp();
                value.set(i, j, e);
                z += e;
            }
            for i in 0..r {
                value.set(i, j, value.get(i, j) / z);
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxCols(a), rg)
    }

    /// Softmax along each row. `mask[i * cols + j] == false` excludes entry
    /// (i, j); every row must keep at least one entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Rc<Vec<bool>>>) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        if let Some(m) = &mask {
            assert_eq!(m.len(), r * c, "mask shape");
        }
        let allowed = |i: usize, j: usize| mask.as_ref().is_none_or(|m| m[i * c + j]);
        let mut value = Matrix::zeros(r, c);
        for i in 0..r {
            let row = x.row(i);
            let mut m = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(i, j) {
                    m = m.max(v);
                }
            }
            let mut z = T::zero();
            let out = value.row_mut(i);
            for (j, &v) in row.iter().enumerate() {
                if allowed(i, j) {
                    let e = (v - m).exp();
                    out[j] = e;
                    z += e;
                }
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Each row divided by (its sum + eps).
    pub fn normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for i in 0..x.rows() {
            let s: T = x.row(i).iter().copied().sum::<T>() + eps;
            for v in value.row_mut(i) {
                *v /= s;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::NormalizeRows(a, eps), rg)
    }

    /// Row-wise standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for i in 0..x.rows() {
            let (mean, inv_std) = row_stats(x.row(i), eps);
            for v in value.row_mut(i) {
                *v = (*v - mean) * inv_std;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm(a, eps), rg)
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let value = self
            .value(a)
            .gather_rows(&indices)
            .expect("gather indices in range");
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, Rc::new(indices)), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat column mismatch");
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        let value = Matrix::from_vec(rows, cols, data).expect("concat shape");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// n×1 column of per-row means.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = T::from_usize(x.cols()).expect("cols");
        let value = Matrix::from_fn(x.rows(), 1, |i, _| {
            x.row(i).iter().copied().sum::<T>() / c
        });
        let rg = self.rg(a);
        self.push(value, Op::RowMean(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::from_usize(x.len()).expect("len");
        let value = Matrix::filled(1, 1, x.sum() / n);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Gradients of the 1×1 node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            let y = &node.value;
            let send = |v: Var, contrib: Matrix<T>, grads: &mut Vec<Option<Matrix<T>>>| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        send(*a, g.matmul_bt(self.value(*b)), &mut grads);
                    }
                    if self.rg(*b) {
                        send(*b, self.value(*a).matmul_at(&g), &mut grads);
                    }
                }
                Op::MatMulBt(a, b) => {
                    if self.rg(*a) {
                        send(*a, g.matmul(self.value(*b)), &mut grads);
                    }
                    if self.rg(*b) {
                        send(*b, g.matmul_at(self.value(*a)), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g.clone(), &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g.map(|x| -x), &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        send(*a, g.zip_map(self.value(*b), |x, y| x * y), &mut grads);
                    }
                    if self.rg(*b) {
                        send(*b, g.zip_map(self.value(*a), |x, y| x * y), &mut grads);
                    }
                }
                Op::AddRow(a, r) => {
                    send(*a, g.clone(), &mut grads);
                    if self.rg(*r) {
                        send(*r, column_sums(&g), &mut grads);
                    }
                }
                Op::MulRow(a, r) => {
                    let rv = self.value(*r);
                    if self.rg(*a) {
                        let mut ga = g.clone();
                        for i in 0..ga.rows() {
                            for (x, &b) in ga.row_mut(i).iter_mut().zip(rv.as_slice()) {
                                *x *= b;
                            }
                        }
                        send(*a, ga, &mut grads);
                    }
                    if self.rg(*r) {
                        let prod = g.zip_map(self.value(*a), |x, y| x * y);
                        send(*r, column_sums(&prod), &mut grads);
                    }
                }
                Op::Scale(a, k) => send(*a, g.map(|x| x * *k), &mut grads),
                Op::OneMinus(a) => send(*a, g.map(|x| -x), &mut grads),
                Op::Exp(a) => send(*a, g.zip_map(y, |gi, yi| gi * yi), &mut grads),
                Op::Sigmoid(a) => send(
                    *a,
                    g.zip_map(y, |gi, yi| gi * yi * (T::one() - yi)),
                    &mut grads,
                ),
                Op::Tanh(a) => send(
                    *a,
                    g.zip_map(y, |gi, yi| gi * (T::one() - yi * yi)),
                    &mut grads,
                ),
                Op::Relu(a) => send(
                    *a,
                    g.zip_map(self.value(*a), |gi, xi| {
                        if xi > T::zero() {
                            gi
                        } else {
                            T::zero()
                        }
                    }),
                    &mut grads,
                ),
                Op::Gelu(a) => {
                    let c = T::lit(SQRT_2_OVER_PI);
                    let k = T::lit(GELU_C);
                    let half = T::lit(0.5);
                    let three = T::lit(3.0);
                    send(
                        *a,
                        g.zip_map(self.value(*a), |gi, x| {
                            let t = (c * (x + k * x * x * x)).tanh();
                            let d = half * (T::one() + t)
                                + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                            gi * d
                        }),
                        &mut grads,
                    )
                }
                Op::SoftmaxCols(a) => {
                    let (r, c) = y.shape();
                    let mut ga = Matrix::zeros(r, c);
                    for j in 0..c {
                        let mut dotp = T::zero();
                        for i in 0..r {
                            dotp += g.get(i, j) * y.get(i, j);
                        }
                        for i in 0..r {
                            ga.set(i, j, y.get(i, j) * (g.get(i, j) - dotp));
                        }
                    }
                    send(*a, ga, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let dotp: T = g.row(i).iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                        for (o, &yi) in ga.row_mut(i).iter_mut().zip(yr) {
                            *o = yi * (*o - dotp);
                        }
                    }
                    send(*a, ga, &mut grads);
                }
                Op::NormalizeRows(a, eps) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    for i in 0..y.rows() {
                        let s: T = x.row(i).iter().copied().sum::<T>() + *eps;
                        let dotp: T = g.row(i).iter().zip(y.row(i)).map(|(&gi, &yi)| gi * yi).sum();
                        for o in ga.row_mut(i) {
                            *o = (*o - dotp) / s;
                        }
                    }
                    send(*a, ga, &mut grads);
                }
                Op::LayerNorm(a, eps) => {
                    let x = self.value(*a);
                    let d = T::from_usize(x.cols()).expect("cols");
                    let mut ga = g.clone();
                    for i in 0..y.rows() {
                        let (_, inv_std) = row_stats(x.row(i), *eps);
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let g_mean = gr.iter().copied().sum::<T>() / d;
                        let gy_mean = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / d;
                        for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std * (gr[j] - g_mean - yr[j] * gy_mean);
                        }
                    }
                    send(*a, ga, &mut grads);
                }
                Op::GatherRows(a, indices) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, &gv) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += gv;
                        }
                    }
                    send(*a, ga, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.rg(p) {
                            let idx: Vec<usize> = (offset..offset + rows).collect();
                            send(p, g.gather_rows(&idx).expect("concat split"), &mut grads);
                        }
                        offset += rows;
                    }
                }
                Op::RowMean(a) => {
                    let x = self.value(*a);
                    let c = T::from_usize(x.cols()).expect("cols");
                    let ga = Matrix::from_fn(x.rows(), x.cols(), |i, _| g.get(i, 0) / c);
                    send(*a, ga, &mut grads);
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let n = T::from_usize(x.len()).expect("len");
                    send(*a, Matrix::filled(x.rows(), x.cols(), g.get(0, 0) / n), &mut grads);
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    send(*a, Matrix::filled(x.rows(), x.cols(), g.get(0, 0)), &mut grads);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let d = T::from_usize(row.len()).expect("len");
    let mean = row.iter().copied().sum::<T>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
    (mean, T::one() / (var + eps).sqrt())
}

fn column_sums<T: Scalar>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, &v) in out.as_mut_slice().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}
