//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records operations eagerly; [`Tape::backward`] replays them in
//! reverse to accumulate gradients via the chain rule. Values are rank-2
//! arrays (scalars are 1x1), which is enough for MLP forward passes and all
//! penalty terms in this crate. Tapes are single-threaded by construction.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite result produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar (1x1) output, got {shape:?}")]
    NonScalarOutput { shape: (usize, usize) },
    #[error("label index {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    /// Elementwise product.
    Mul(usize, usize),
    MatMul(usize, usize),
    /// Matrix plus a 1xN row vector broadcast over rows (bias addition).
    AddRow(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    /// Fused softmax + cross-entropy, mean over rows, reported in bits.
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients of a scalar output with respect to every tape node.
pub struct GradMap {
    grads: Vec<Array2<f64>>,
}

impl GradMap {
    pub fn get(&self, v: Var) -> &Array2<f64> {
        &self.grads[v.0]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN2: f64 = std::f64::consts::LN_2;

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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push_unchecked(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    fn push_unchecked(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Array2<f64>, op: Op, name: &'static str) -> Result<Var, AutodiffError> {
        if !value.iter().all(|x| x.is_finite()) {
            return Err(AutodiffError::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), AutodiffError> {
        let (la, lb) = (self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim());
        if la != lb {
            return Err(AutodiffError::ShapeMismatch { op, lhs: la, rhs: lb });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "add")?;
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "sub")?;
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "mul")?;
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a.0, b.0), "mul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (la, lb) = (self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim());
        if la.1 != lb.0 {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: la, rhs: lb });
        }
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a.0, b.0), "matmul")
    }

    /// `a` (m x n) plus row vector `b` (1 x n), broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (la, lb) = (self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim());
        if lb.0 != 1 || la.1 != lb.1 {
            return Err(AutodiffError::ShapeMismatch { op: "add_row", lhs: la, rhs: lb });
        }
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::AddRow(a.0, b.0), "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a.0, c), "scale")
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddConst(a.0), "add_const")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0), "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0), "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a.0), "exp")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Ln(a.0), "ln")
    }

    /// Absolute value; the subgradient at 0 is taken to be 0.
    pub fn abs(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        self.push(v, Op::Abs(a.0), "abs")
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, Op::Square(a.0), "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a.0), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.nodes[a.0].value.sum() / n;
        self.push(Array2::from_elem((1, 1), s), Op::Mean(a.0), "mean")
    }

    /// Mean cross-entropy of `logits` (n x classes) against integer labels,
    /// in bits. Uses a numerically stable fused softmax.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let lv = &self.nodes[logits.0].value;
        let (n, classes) = lv.dim();
        if labels.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: (n, classes),
                rhs: (labels.len(), 1),
            });
        }
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(AutodiffError::LabelOutOfRange { label, classes });
            }
            let row = lv.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            total += (lse - row[label]) / LN2;
        }
        let v = Array2::from_elem((1, 1), total / n as f64);
        self.push(
            v,
            Op::SoftmaxCrossEntropy { logits: logits.0, labels: labels.to_vec() },
            "softmax_cross_entropy",
        )
    }

    /// Reverse pass from a scalar output. Nodes unreachable from `out`
    /// receive exact-zero gradients.
    pub fn backward(&self, out: Var) -> Result<GradMap, AutodiffError> {
        let shape = self.nodes[out.0].value.dim();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarOutput { shape });
        }
        let mut grads: Vec<Array2<f64>> = self
            .nodes
            .iter()
            .map(|n| Array2::zeros(n.value.dim()))
            .collect();
        grads[out.0][[0, 0]] = 1.0;

        for id in (0..=out.0).rev() {
            let g = grads[id].clone();
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grads[*a] += &g;
                    grads[*b] += &g;
                }
                Op::Sub(a, b) => {
                    grads[*a] += &g;
                    grads[*b] -= &g;
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[*b].value;
                    let db = &g * &self.nodes[*a].value;
                    grads[*a] += &da;
                    grads[*b] += &db;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&g);
                    grads[*a] += &da;
                    grads[*b] += &db;
                }
                Op::AddRow(a, b) => {
                    grads[*a] += &g;
                    let col_sum = g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                    grads[*b] += &col_sum;
                }
                Op::Scale(a, c) => {
                    let da = g.mapv(|x| x * c);
                    grads[*a] += &da;
                }
                Op::AddConst(a) => {
                    grads[*a] += &g;
                }
                Op::Tanh(a) => {
                    let da = &g * &self.nodes[id].value.mapv(|y| 1.0 - y * y);
                    grads[*a] += &da;
                }
                Op::Relu(a) => {
                    let da = &g * &self.nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    grads[*a] += &da;
                }
                Op::Exp(a) => {
                    let da = &g * &self.nodes[id].value;
                    grads[*a] += &da;
                }
                Op::Ln(a) => {
                    let da = &g / &self.nodes[*a].value;
                    grads[*a] += &da;
                }
                Op::Abs(a) => {
                    let sign = self.nodes[*a].value.mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    let da = &g * &sign;
                    grads[*a] += &da;
                }
                Op::Square(a) => {
                    let da = &g * &self.nodes[*a].value.mapv(|x| 2.0 * x);
                    grads[*a] += &da;
                }
                Op::Sum(a) => {
                    let gs = g[[0, 0]];
                    grads[*a] += gs;
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len() as f64;
                    let gs = g[[0, 0]] / n;
                    grads[*a] += gs;
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let gs = g[[0, 0]];
                    let lv = &self.nodes[*logits].value;
                    let (n, _) = lv.dim();
                    let mut dl = Array2::zeros(lv.dim());
                    for (i, &label) in labels.iter().enumerate() {
                        let row = lv.row(i);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&x| (x - m).exp()).sum();
                        for (j, &x) in row.iter().enumerate() {
                            let p = (x - m).exp() / denom;
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dl[[i, j]] = gs * (p - onehot) / (n as f64 * LN2);
                        }
                    }
                    grads[*logits] += &dl;
                }
            }
        }
        Ok(GradMap { grads })
    }
}

/// Central-difference gradient estimate of a scalar function, used as the
/// independent oracle for every gradient in the crate.
pub fn finite_diff_grad<F>(mut f: F, x: &Array2<f64>, h: f64) -> Result<Array2<f64>, AutodiffError>
where
    F: FnMut(&Array2<f64>) -> f64,
{
    assert!(h > 0.0, "finite_diff_grad requires h > 0");
    let mut grad = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.dim().1, idx % x.dim().1);
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let fp = f(&probe);
        probe[[r, c]] = orig - h;
        let fm = f(&probe);
        probe[[r, c]] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(AutodiffError::NonFinite { op: "finite_diff_grad" });
        }
        grad[[r, c]] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}
