//! Reverse-mode differentiation over a recorded graph.
//!
//! Every op evaluates eagerly and appends a node; [`Graph::backward`] walks
//! the nodes in reverse recording order and applies each op's analytic
//! vector-Jacobian product. Nodes that do not depend on a leaf are never
//! differentiated.

use super::kernels::gemm;
use super::special::{lse, sigmoid, softplus};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation with a hand-written backward rule.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns the gradient for each input (`None` where `needs[i]` is false).
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    LeakyRelu(Var, f64),
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    AddRow(Var, Var),
    SubCol(Var, Var),
    LogSumExpRows(Var),
    LogSoftmaxRows(Var),
    CrossEntropy(Var, Vec<usize>),
    WeightedSum(Var, Tensor),
    Reshape(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zeros if the output does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Graph {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "leaf")
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Constant, false, "constant")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| c * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg, "add_scalar")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg, "mean")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(v, Op::Log(a), rg, "log")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(v, Op::Softplus(a), rg, "softplus")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg, "square")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(&[a]);
        self.push(v, Op::LeakyRelu(a, slope), rg, "leaky_relu")
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg, "matmul")
    }

    /// `[m,k] x [n,k]ᵀ -> [m,n]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.value(a).dims2("matmul_t")?;
        let [n, k2] = self.value(b).dims2("matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("inner {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), true, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulTransB(a, b), rg, "matmul_t")
    }

    /// Adds the vector `b[n]` to every row of `a[m,n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, n] = self.value(a).dims2("add_row")?;
        if self.value(b).shape() != [n] {
            return Err(Error::shape("add_row", format!("row {:?} for width {n}", self.value(b).shape())));
        }
        let mut out = self.value(a).data().to_vec();
        let bv = self.value(b).data();
        for i in 0..m {
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *o += x;
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(a, b), rg, "add_row")
    }

    /// Subtracts `b[m]` from every column of `a[m,n]`.
    pub fn sub_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, n] = self.value(a).dims2("sub_col")?;
        if self.value(b).shape() != [m] {
            return Err(Error::shape("sub_col", "column length"));
        }
        let mut out = self.value(a).data().to_vec();
        let bv = self.value(b).data();
        for i in 0..m {
            for o in out[i * n..(i + 1) * n].iter_mut() {
                *o -= bv[i];
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::SubCol(a, b), rg, "sub_col")
    }

    /// Row-wise log-sum-exp, `[m,n] -> [m]`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.value(a).dims2("log_sum_exp_rows")?;
        let d = self.value(a).data();
        let out: Vec<f64> = (0..m).map(|i| lse(&d[i * n..(i + 1) * n])).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec(out), Op::LogSumExpRows(a), rg, "log_sum_exp_rows")
    }

    /// Row-wise log-softmax, `[m,n] -> [m,n]`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.value(a).dims2("log_softmax_rows")?;
        let d = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            super::special::log_softmax_into(&d[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![m, n], out)?, Op::LogSoftmaxRows(a), rg, "log_softmax_rows")
    }

    /// Mean softmax cross-entropy of `logits[m,c]` against 0-based `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [m, c] = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != m {
            return Err(Error::shape("cross_entropy", format!("{m} rows, {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let d = self.value(logits).data();
        let total: f64 = (0..m)
            .map(|i| {
                let row = &d[i * c..(i + 1) * c];
                lse(row) - row[labels[i]]
            })
            .sum();
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total / m as f64),
            Op::CrossEntropy(logits, labels.to_vec()),
            rg,
            "cross_entropy",
        )
    }

    /// `Σ a ⊙ w` for a constant weight tensor `w`.
    pub fn weighted_sum(&mut self, a: Var, w: Tensor) -> Result<Var> {
        if self.value(a).shape() != w.shape() {
            return Err(Error::shape("weighted_sum", "weight shape"));
        }
        let s: f64 = self.value(a).data().iter().zip(w.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::WeightedSum(a, w), rg, "weighted_sum")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(v, Op::Reshape(a), rg, "reshape")
    }

    /// Records a fused op whose forward value has already been computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        let rg = self.rg(inputs);
        self.push(output, Op::Custom(inputs.to_vec(), op), rg, name)
    }

    /// Gradients of the scalar `output` with respect to every recorded node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.apply_backward(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        g.ensure_finite("backward")?;
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn apply_backward(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(val(*b), |x, y| x * y)?;
                let gb = g.zip_map(val(*a), |x, y| x * y)?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| c * x))?,
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone())?,
            Op::Sum(a) => {
                let s = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), s))?;
            }
            Op::Mean(a) => {
                let s = g.data()[0] / val(*a).len() as f64;
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), s))?;
            }
            Op::Exp(a) => {
                let ga = g.zip_map(&node.value, |x, y| x * y)?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Log(a) => {
                let ga = g.zip_map(val(*a), |x, y| x / y)?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Softplus(a) => {
                let ga = g.zip_map(val(*a), |x, y| x * sigmoid(y))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Square(a) => {
                let ga = g.zip_map(val(*a), |x, y| 2.0 * x * y)?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::LeakyRelu(a, slope) => {
                let ga = g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { slope * x })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::MatMul(a, b) => {
                let [m, k] = val(*a).dims2("matmul")?;
                let [_, n] = val(*b).dims2("matmul")?;
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), false, val(*b).data(), true, 0.0, &mut ga);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?)?;
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, val(*a).data(), true, g.data(), false, 0.0, &mut gb);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb)?)?;
                }
            }
            Op::MatMulTransB(a, b) => {
                let [m, k] = val(*a).dims2("matmul_t")?;
                let [n, _] = val(*b).dims2("matmul_t")?;
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), false, val(*b).data(), false, 0.0, &mut ga);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?)?;
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; n * k];
                    gemm(n, m, k, 1.0, g.data(), true, val(*a).data(), false, 0.0, &mut gb);
                    self.accumulate(grads, *b, Tensor::new(vec![n, k], gb)?)?;
                }
            }
            Op::AddRow(a, b) => {
                let [m, n] = val(*a).dims2("add_row")?;
                self.accumulate(grads, *a, g.clone())?;
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for (o, x) in gb.iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *b, Tensor::from_vec(gb))?;
            }
            Op::SubCol(a, b) => {
                let [m, n] = val(*a).dims2("sub_col")?;
                self.accumulate(grads, *a, g.clone())?;
                let gb: Vec<f64> = (0..m).map(|i| -g.data()[i * n..(i + 1) * n].iter().sum::<f64>()).collect();
                self.accumulate(grads, *b, Tensor::from_vec(gb))?;
            }
            Op::LogSumExpRows(a) => {
                let [m, n] = val(*a).dims2("log_sum_exp_rows")?;
                let x = val(*a).data();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let l = node.value.data()[i];
                    let gi = g.data()[i];
                    for j in 0..n {
                        ga[i * n + j] = gi * (x[i * n + j] - l).exp();
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, n], ga)?)?;
            }
            Op::LogSoftmaxRows(a) => {
                let [m, n] = val(*a).dims2("log_softmax_rows")?;
                let y = node.value.data();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let gs: f64 = g.data()[i * n..(i + 1) * n].iter().sum();
                    for j in 0..n {
                        ga[i * n + j] = g.data()[i * n + j] - y[i * n + j].exp() * gs;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, n], ga)?)?;
            }
            Op::CrossEntropy(logits, labels) => {
                let [m, c] = val(*logits).dims2("cross_entropy")?;
                let x = val(*logits).data();
                let s = g.data()[0] / m as f64;
                let mut ga = vec![0.0; m * c];
                for i in 0..m {
                    let row = &x[i * c..(i + 1) * c];
                    let l = lse(row);
                    for j in 0..c {
                        ga[i * c + j] = s * (row[j] - l).exp();
                    }
                    ga[i * c + labels[i]] -= s;
                }
                self.accumulate(grads, *logits, Tensor::new(vec![m, c], ga)?)?;
            }
            Op::WeightedSum(a, w) => {
                let s = g.data()[0];
                self.accumulate(grads, *a, w.map(|x| s * x))?;
            }
            Op::Reshape(a) => {
                let ga = g.clone().reshape(val(*a).shape())?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                let gs = op.backward(&ins, &node.value, g, &needs)?;
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if gi.shape() != val(*v).shape() {
                            return Err(Error::shape(op.name(), "backward produced a mis-shaped gradient"));
                        }
                        self.accumulate(grads, *v, gi)?;
                    }
                }
            }
        }
        Ok(())
    }
}
