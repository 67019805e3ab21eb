//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so walking the node list backwards from the loss is
//! a reverse topological traversal. The tape is meant to be rebuilt for every
//! training step.

use std::cell::{Cell, Ref, RefCell};
use std::sync::Arc;

use super::{scalar, CsrMatrix, DenseMatrix};

/// Norms below this are padded before dividing in [`Tape::row_l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<CsrMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Elu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    RowL2Normalize(Var),
    Sum(Var),
    /// Scalar node whose gradients with respect to its inputs were computed
    /// together with its value.
    Fused(Vec<(Var, DenseMatrix)>),
}

struct Node {
    value: DenseMatrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<DenseMatrix>>>,
    backward_done: Cell<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: DenseMatrix, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced on tape");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Ref<'_, DenseMatrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(&self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// Sparse constant times a dense node.
    pub fn spmm(&self, s: &Arc<CsrMatrix>, d: Var) -> Var {
        let value = s.spmm(&self.value(d));
        self.push(value, Op::SpMM(Arc::clone(s), d))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// `a + 1 * row`, broadcasting the 1xm `row` over every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let av = self.value(a);
            let rv = self.value(row);
            assert_eq!(rv.rows(), 1, "add_row: bias must be a single row");
            assert_eq!(av.cols(), rv.cols(), "add_row: column counts differ");
            let mut out = av.clone();
            for r in 0..out.rows() {
                for (o, &b) in out.row_mut(r).iter_mut().zip(rv.as_slice()) {
                    *o += b;
                }
            }
            out
        };
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, scalar::relu, Op::Relu(a))
    }

    pub fn elu(&self, a: Var) -> Var {
        self.unary(a, scalar::elu, Op::Elu(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log. Panics on a nonpositive input.
    pub fn log(&self, a: Var) -> Var {
        {
            let v = self.value(a);
            if let Some(bad) = v.as_slice().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                panic!("log of nonpositive value {bad}");
            }
        }
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, scalar::softplus, Op::Softplus(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Scales every row to unit Euclidean norm. Rows with norm below
    /// [`NORM_EPS`] are divided by `norm + NORM_EPS` instead.
    pub fn row_l2_normalize(&self, a: Var) -> Var {
        let value = {
            let av = self.value(a);
            let mut out = av.clone();
            for r in 0..out.rows() {
                let d = padded_norm(av.row(r));
                for x in out.row_mut(r) {
                    *x /= d;
                }
            }
            out
        };
        self.push(value, Op::RowL2Normalize(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(DenseMatrix::scalar(s), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Records a scalar computed outside the tape together with its
    /// gradients with respect to `inputs`.
    pub fn fused_scalar(&self, value: f64, inputs: Vec<(Var, DenseMatrix)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(
                self.value(*v).shape(),
                g.shape(),
                "fused_scalar: gradient shape does not match its input"
            );
        }
        self.push(DenseMatrix::scalar(value), Op::Fused(inputs))
    }

    /// Propagates d(loss)/d(node) to every node reachable from `loss`.
    ///
    /// Panics if `loss` is not 1x1 or if backward already ran on this tape
    /// without a [`reset_grads`](Self::reset_grads).
    pub fn backward(&self, loss: Var) {
        assert!(
            !self.backward_done.get(),
            "backward called twice on the same tape without reset_grads"
        );
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.shape(), (1, 1), "backward: loss must be a scalar");

        let mut grads: Vec<Option<DenseMatrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseMatrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&val(*b).transpose());
                    let gb = val(*a).transpose().matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SpMM(s, d) => accumulate(&mut grads, *d, s.spmm_transpose(&g)),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, g.zip_map(val(*b), |x, y| x * y));
                    accumulate(&mut grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
                Op::AddRow(a, row) => {
                    let mut gr = DenseMatrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in gr.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, gr);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| c * x)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Relu(a) => {
                    let ga = g.zip_map(val(*a), |gx, x| if x > 0.0 { gx } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Elu(a) => {
                    let ga = g.zip_map(val(*a), |gx, x| gx * scalar::elu_grad(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g.zip_map(&node.value, |gx, y| gx * y)),
                Op::Log(a) => accumulate(&mut grads, *a, g.zip_map(val(*a), |gx, x| gx / x)),
                Op::Softplus(a) => {
                    let ga = g.zip_map(val(*a), |gx, x| gx * scalar::sigmoid(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => accumulate(&mut grads, *a, g.zip_map(val(*a), |gx, x| 2.0 * x * gx)),
                Op::RowL2Normalize(a) => {
                    let x = val(*a);
                    let mut ga = DenseMatrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        row_normalize_grad(x.row(r), g.row(r), ga.row_mut(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (rows, cols) = val(*a).shape();
                    accumulate(&mut grads, *a, DenseMatrix::filled(rows, cols, g.item()));
                }
                Op::Fused(inputs) => {
                    let s = g.item();
                    for (v, local) in inputs {
                        let mut gv = local.clone();
                        gv.scale_in_place(s);
                        accumulate(&mut grads, *v, gv);
                    }
                }
            }
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
    }

    /// Gradient of the last backward pass with respect to a leaf. Leaves the
    /// loss does not depend on get zeros.
    pub fn grad(&self, v: Var) -> DenseMatrix {
        assert!(self.backward_done.get(), "grad requested before backward");
        match self.grads.borrow().get(v.0).and_then(|g| g.clone()) {
            Some(g) => g,
            None => {
                let (r, c) = self.value(v).shape();
                DenseMatrix::zeros(r, c)
            }
        }
    }

    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }
}

fn accumulate(grads: &mut [Option<DenseMatrix>], v: Var, g: DenseMatrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

fn padded_norm(row: &[f64]) -> f64 {
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < NORM_EPS {
        n + NORM_EPS
    } else {
        n
    }
}

/// Adjoint of `y = x / d(x)` for one row, where `d` is [`padded_norm`].
fn row_normalize_grad(x: &[f64], g: &[f64], out: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let d = padded_norm(x);
    let xg: f64 = x.iter().zip(g).map(|(a, b)| a * b).sum();
    // dd/dx = x / n (zero at the origin).
    let coef = if n > 0.0 { xg / (d * d * n) } else { 0.0 };
    for ((o, &xi), &gi) in out.iter_mut().zip(x).zip(g) {
        *o = gi / d - coef * xi;
    }
}
