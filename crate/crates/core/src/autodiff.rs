//! Reverse-mode differentiation over 2-D tensors.
//!
//! A [`Tape`] is a Wengert list: every operation appends a node holding its
//! forward value and the indices of its inputs. [`Tape::backward`] walks the
//! list in reverse from a scalar output and accumulates adjoints into every
//! node that transitively depends on a parameter leaf.

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Offset(Var),
    Act(Var, Activation),
    Exp(Var),
    Square(Var),
    Relu(Var),
    Clamp(Var, S, S),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
}

#[derive(Clone, Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records a differentiable computation.
#[derive(Clone, Debug, Default)]
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<S: Scalar = f64> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// The adjoint of `v`, or `None` when no gradient path reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// The adjoint of `v`, with zeros substituted when no gradient path exists.
    pub fn wrt(&self, v: Var, like: &Tensor<S>) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| like.zeros_like())
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
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

    fn check_same(&self, a: Var, b: Var, context: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                context,
                expected: sa.to_vec(),
                found: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds a `[1, m]` row to every row of an `[n, m]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(row));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::ShapeMismatch {
                context: "add_row",
                expected: vec![1, x.cols()],
                found: b.shape().to_vec(),
            });
        }
        let m = x.cols();
        let mut data = x.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += b.data()[i % m];
        }
        let value = Tensor::from_rows(x.rows(), m, data);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let value = self.value(a).scale(k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, k: S) -> Var {
        let value = self.value(a).map(|v| v + k);
        let rg = self.rg(a);
        self.push(value, Op::Offset(a), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let value = self.value(a).map(|v| act.apply(v));
        let rg = self.rg(a);
        self.push(value, Op::Act(a, act), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.exp());
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    /// `max(0, x)` elementwise; the gradient is zero on the non-positive side.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(S::zero()));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is strictly inside.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        let value = self.value(a).map(|v| v.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    /// Sum of all elements, as a `[1, 1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::scalar(x.sum() / S::cast(x.len() as f64));
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Per-row sums: `[n, m] -> [n, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let sums = (0..x.rows()).map(|r| x.row_slice(r).iter().copied().sum()).collect();
        let value = Tensor::column(sums);
        let rg = self.rg(a);
        self.push(value, Op::RowSum(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_rows(start, len);
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(out.map(|_| S::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                // Leaves keep their adjoint; interior adjoints are dropped once propagated.
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.matmul_nt(bv));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, av.matmul_tn(&g));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let m = g.cols();
                        let mut acc = vec![S::zero(); m];
                        for r in 0..g.rows() {
                            for (s, &v) in acc.iter_mut().zip(g.row_slice(r)) {
                                *s += v;
                            }
                        }
                        accumulate(&mut grads, *row, Tensor::row(acc));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    accumulate(&mut grads, *a, g.map(|v| v * k));
                }
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::Act(a, act) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data().iter().zip(y.data()))
                        .map(|(&gv, (&xv, &yv))| gv * act.derivative(xv, yv))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::from_rows(g.rows(), g.cols(), data));
                }
                Op::Exp(a) => {
                    accumulate(&mut grads, *a, g.zip_map(&node.value, |gv, y| gv * y));
                }
                Op::Square(a) => {
                    let two = S::cast(2.0);
                    accumulate(&mut grads, *a, g.zip_map(self.value(*a), |gv, x| gv * two * x));
                }
                Op::Relu(a) => {
                    accumulate(
                        &mut grads,
                        *a,
                        g.zip_map(self.value(*a), |gv, x| if x > S::zero() { gv } else { S::zero() }),
                    );
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    accumulate(
                        &mut grads,
                        *a,
                        g.zip_map(self.value(*a), |gv, x| {
                            if x > lo && x < hi {
                                gv
                            } else {
                                S::zero()
                            }
                        }),
                    );
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    accumulate(&mut grads, *a, self.value(*a).map(|_| gv));
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let gv = g.item() / S::cast(x.len() as f64);
                    accumulate(&mut grads, *a, x.map(|_| gv));
                }
                Op::RowSum(a) => {
                    let x = self.value(*a);
                    let m = x.cols();
                    let data = (0..x.len()).map(|i| g.data()[i / m]).collect();
                    accumulate(&mut grads, *a, Tensor::from_rows(x.rows(), m, data));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.value(p).cols();
                        if self.rg(p) {
                            accumulate(&mut grads, p, g.slice_cols(start, len));
                        }
                        start += len;
                    }
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let (rows, cols, len) = (x.rows(), x.cols(), g.cols());
                    let mut data = vec![S::zero(); rows * cols];
                    for r in 0..rows {
                        data[r * cols + start..r * cols + start + len]
                            .copy_from_slice(g.row_slice(r));
                    }
                    accumulate(&mut grads, *a, Tensor::from_rows(rows, cols, data));
                }
                Op::SliceRows(a, start) => {
                    let x = self.value(*a);
                    let cols = x.cols();
                    let mut data = vec![S::zero(); x.len()];
                    data[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, Tensor::from_rows(x.rows(), cols, data));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign_tensor(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_of_three_has_gradient_six() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::scalar(3.0));
        let y = tape.square(w);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::scalar(3.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let zero = tape.scale(w, 0.0);
        let y = tape.add(zero, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(w, tape.value(w)).item(), 0.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(4.0));
        let y = tape.mul(w, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).unwrap().item(), 4.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = w * w + 3 w at w = 2 -> dy/dw = 2w + 3 = 7
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::scalar(2.0));
        let sq = tape.mul(w, w).unwrap();
        let lin = tape.scale(w, 3.0);
        let y = tape.add(sq, lin).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).unwrap().item(), 7.0);
    }

    #[test]
    fn slice_and_concat_route_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let right = tape.slice_cols(a, 1, 1);
        let both = tape.concat_cols(&[right, right]).unwrap();
        let s = tape.sum(both);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 2.0, 0.0, 2.0]);
    }
}
