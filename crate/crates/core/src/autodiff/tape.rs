//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every primitive application appends one node holding its forward value.
//! Nodes are appended in evaluation order, so node ids are a topological order
//! and a single reverse sweep computes all adjoints.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    /// Elementwise (Hadamard) product.
    Mul,
    ScalarMul(f64),
    Relu,
    Mean,
    Sum,
    /// `[n, e] x [m, e] -> [n, m]`, entry `(i, j) = ||x_i - y_j||^2`.
    SquaredEuclideanPairwise,
    /// Mean over rows of `-log softmax(logits_i)[label_i]`.
    SoftmaxCrossEntropy(Vec<usize>),
    Log,
    Exp,
    ConcatRows,
    Transpose,
    /// Row-wise softmax.
    SoftmaxRows,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::ScalarMul(_) => "scalar-mul",
            Primitive::Relu => "relu",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::SquaredEuclideanPairwise => "squared-euclidean-pairwise",
            Primitive::SoftmaxCrossEntropy(_) => "softmax-cross-entropy",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::ConcatRows => "concat-rows",
            Primitive::Transpose => "transpose",
            Primitive::SoftmaxRows => "softmax-rows",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::SquaredEuclideanPairwise
            | Primitive::ConcatRows => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
struct Record {
    primitive: Primitive,
    inputs: Vec<NodeId>,
    /// Forward intermediates needed by the backward rule (softmax probabilities).
    saved: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    record: Option<Record>,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
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

    /// Registers an input tensor. Gradients are accumulated into its slot on
    /// [`Tape::backward`] when `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            record: None,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(Error::DanglingNode(id.0))
    }

    /// Gradient slot of a leaf after [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes.get(id.0).and_then(|n| n.value.grad())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Evaluates `primitive` on `inputs`, records it and returns the output node.
    pub fn apply(&mut self, primitive: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != primitive.arity() {
            return Err(Error::InvalidArgument(format!(
                "{} expects {} inputs, got {}",
                primitive.name(),
                primitive.arity(),
                inputs.len()
            )));
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::DanglingNode(id.0));
            }
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let (value, saved) = forward(&primitive, &vals)?;
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("output of {}", primitive.name())));
        }
        let needs_grad = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        self.nodes.push(Node {
            value,
            record: Some(Record {
                primitive,
                inputs: inputs.to_vec(),
                saved,
            }),
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar node. Adjoints are added into the gradient
    /// slots of every `requires_grad` leaf; calling twice accumulates twice.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let root = self.nodes.get(loss.0).ok_or(Error::DanglingNode(loss.0))?;
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(adj) = adjoints[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(record) = &node.record else {
                // leaf: hand the adjoint back for accumulation below
                adjoints[idx] = Some(adj);
                continue;
            };
            let inputs: Vec<&Tensor> = record
                .inputs
                .iter()
                .map(|id| &self.nodes[id.0].value)
                .collect();
            let grads = backward_rule(record, &inputs, &node.value, &adj);
            for (id, g) in record.inputs.iter().zip(grads) {
                if !self.nodes[id.0].needs_grad {
                    continue;
                }
                match &mut adjoints[id.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (idx, adj) in adjoints.into_iter().enumerate() {
            if let Some(adj) = adj {
                let node = &mut self.nodes[idx];
                if node.record.is_none() && node.value.requires_grad() {
                    node.value.accumulate_grad(&adj)?;
                }
            }
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Primitive::ScalarMul(c), &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mean, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SquaredEuclideanPairwise, &[a, b])
    }
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.apply(Primitive::SoftmaxCrossEntropy(labels.to_vec()), &[logits])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::ConcatRows, &[a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SoftmaxRows, &[a])
    }
}

fn shape_err(p: &Primitive, ins: &[&Tensor]) -> Error {
    Error::Shape {
        primitive: p.name(),
        shapes: ins.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

fn forward(p: &Primitive, ins: &[&Tensor]) -> Result<(Tensor, Option<Vec<f64>>)> {
    let out = |shape: Vec<usize>, data: Vec<f64>| Tensor::from_parts_unchecked(shape, data);
    let elementwise = |f: &dyn Fn(f64, f64) -> f64| -> Result<Tensor> {
        let (a, b) = (ins[0], ins[1]);
        if a.shape() != b.shape() {
            return Err(shape_err(p, ins));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(out(a.shape().to_vec(), data))
    };
    let unary = |f: &dyn Fn(f64) -> f64| out(ins[0].shape().to_vec(), ins[0].data().iter().map(|&x| f(x)).collect());

    let value = match p {
        Primitive::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            if !is_matrix(a) || !is_matrix(b) || a.cols() != b.rows() {
                return Err(shape_err(p, ins));
            }
            out(vec![a.rows(), b.cols()], matmul(a.data(), b.data(), a.rows(), a.cols(), b.cols()))
        }
        Primitive::Add => elementwise(&|x, y| x + y)?,
        Primitive::Sub => elementwise(&|x, y| x - y)?,
        Primitive::Mul => elementwise(&|x, y| x * y)?,
        Primitive::ScalarMul(c) => unary(&|x| c * x),
        Primitive::Relu => unary(&|x| if x > 0.0 { x } else { 0.0 }),
        Primitive::Log => {
            if ins[0].data().iter().any(|&x| x <= 0.0) {
                return Err(Error::NonFinite("log of non-positive input".into()));
            }
            unary(&f64::ln)
        }
        Primitive::Exp => unary(&f64::exp),
        Primitive::Sum => out(Vec::new(), vec![ins[0].data().iter().sum()]),
        Primitive::Mean => {
            if ins[0].is_empty() {
                return Err(shape_err(p, ins));
            }
            let n = ins[0].len() as f64;
            out(Vec::new(), vec![ins[0].data().iter().sum::<f64>() / n])
        }
        Primitive::SquaredEuclideanPairwise => {
            let (a, b) = (ins[0], ins[1]);
            if !is_matrix(a) || !is_matrix(b) || a.cols() != b.cols() {
                return Err(shape_err(p, ins));
            }
            let (n, m) = (a.rows(), b.rows());
            let mut data = Vec::with_capacity(n * m);
            for i in 0..n {
                let x = a.row(i);
                for j in 0..m {
                    data.push(x.iter().zip(b.row(j)).map(|(u, v)| (u - v) * (u - v)).sum());
                }
            }
            out(vec![n, m], data)
        }
        Primitive::SoftmaxCrossEntropy(labels) => {
            let a = ins[0];
            if !is_matrix(a) || a.rows() != labels.len() || a.rows() == 0 || labels.iter().any(|&y| y >= a.cols()) {
                return Err(shape_err(p, ins));
            }
            let probs = softmax_rows(a.data(), a.rows(), a.cols());
            let mut total = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                let row = a.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
            return Ok((out(Vec::new(), vec![total / labels.len() as f64]), Some(probs)));
        }
        Primitive::ConcatRows => {
            let (a, b) = (ins[0], ins[1]);
            if !is_matrix(a) || !is_matrix(b) || a.cols() != b.cols() {
                return Err(shape_err(p, ins));
            }
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            out(vec![a.rows() + b.rows(), a.cols()], data)
        }
        Primitive::Transpose => {
            let a = ins[0];
            if !is_matrix(a) {
                return Err(shape_err(p, ins));
            }
            out(vec![a.cols(), a.rows()], transpose(a.data(), a.rows(), a.cols()))
        }
        Primitive::SoftmaxRows => {
            let a = ins[0];
            if !is_matrix(a) || a.cols() == 0 {
                return Err(shape_err(p, ins));
            }
            out(a.shape().to_vec(), softmax_rows(a.data(), a.rows(), a.cols()))
        }
    };
    Ok((value, None))
}

fn backward_rule(record: &Record, ins: &[&Tensor], out: &Tensor, adj: &[f64]) -> Vec<Vec<f64>> {
    match &record.primitive {
        Primitive::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            let (n, k, m) = (a.rows(), a.cols(), b.cols());
            let bt = transpose(b.data(), k, m);
            let at = transpose(a.data(), n, k);
            vec![matmul(adj, &bt, n, m, k), matmul(&at, adj, k, n, m)]
        }
        Primitive::Add => vec![adj.to_vec(), adj.to_vec()],
        Primitive::Sub => vec![adj.to_vec(), adj.iter().map(|g| -g).collect()],
        Primitive::Mul => {
            let (a, b) = (ins[0].data(), ins[1].data());
            vec![
                adj.iter().zip(b).map(|(g, y)| g * y).collect(),
                adj.iter().zip(a).map(|(g, x)| g * x).collect(),
            ]
        }
        Primitive::ScalarMul(c) => vec![adj.iter().map(|g| c * g).collect()],
        Primitive::Relu => vec![ins[0]
            .data()
            .iter()
            .zip(adj)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect()],
        Primitive::Log => vec![ins[0].data().iter().zip(adj).map(|(x, g)| g / x).collect()],
        Primitive::Exp => vec![out.data().iter().zip(adj).map(|(y, g)| g * y).collect()],
        Primitive::Sum => vec![vec![adj[0]; ins[0].len()]],
        Primitive::Mean => {
            let n = ins[0].len();
            vec![vec![adj[0] / n as f64; n]]
        }
        Primitive::SquaredEuclideanPairwise => {
            let (a, b) = (ins[0], ins[1]);
            let (n, m, e) = (a.rows(), b.rows(), a.cols());
            let mut ga = vec![0.0; n * e];
            let mut gb = vec![0.0; m * e];
            for i in 0..n {
                let x = a.row(i);
                for j in 0..m {
                    let g = 2.0 * adj[i * m + j];
                    if g == 0.0 {
                        continue;
                    }
                    let y = b.row(j);
                    for d in 0..e {
                        let diff = g * (x[d] - y[d]);
                        ga[i * e + d] += diff;
                        gb[j * e + d] -= diff;
                    }
                }
            }
            vec![ga, gb]
        }
        Primitive::SoftmaxCrossEntropy(labels) => {
            let probs = record.saved.as_ref().expect("softmax probabilities saved on forward");
            let c = ins[0].cols();
            let scale = adj[0] / labels.len() as f64;
            let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (i, &y) in labels.iter().enumerate() {
                g[i * c + y] -= scale;
            }
            vec![g]
        }
        Primitive::ConcatRows => {
            let split = ins[0].len();
            vec![adj[..split].to_vec(), adj[split..].to_vec()]
        }
        Primitive::Transpose => {
            let a = ins[0];
            // adjoint has the transposed shape [cols, rows]
            vec![transpose(adj, a.cols(), a.rows())]
        }
        Primitive::SoftmaxRows => {
            let (n, c) = (out.rows(), out.cols());
            let s = out.data();
            let mut g = vec![0.0; n * c];
            for i in 0..n {
                let row = &s[i * c..(i + 1) * c];
                let ga = &adj[i * c..(i + 1) * c];
                let dot: f64 = row.iter().zip(ga).map(|(p, q)| p * q).sum();
                for j in 0..c {
                    g[i * c + j] = row[j] * (ga[j] - dot);
                }
            }
            vec![g]
        }
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

pub(crate) fn softmax_rows(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        let row = &a[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * cols..(i + 1) * cols];
        let mut z = 0.0;
        for (d, v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(vec_t(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_cross_entropy_is_ln_c() {
        for true_class in 0..5 {
            let mut tape = Tape::new();
            let l = tape.constant(Tensor::matrix(1, 5, vec![0.3; 5]).unwrap());
            let ce = tape.cross_entropy(l, &[true_class]).unwrap();
            let v = tape.value(ce).unwrap().item();
            assert!((v - 5f64.ln()).abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::matrix(3, 3, (0..9).map(|v| v as f64 - 4.0).collect()).unwrap();
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(3));
        let an = tape.constant(a.clone());
        let out = tape.matmul(i, an).unwrap();
        assert_eq!(tape.value(out).unwrap().data(), a.data());
    }

    #[test]
    fn sum_of_squares_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&[1.0, -2.0]).requiring_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), Some(&[2.0, -4.0][..]));
    }

    #[test]
    fn mean_grad_and_double_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&[3.0, 1.0, 4.0, 1.0]).requiring_grad());
        let loss = tape.mean(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), Some(&[0.25; 4][..]));
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), Some(&[0.5; 4][..]));
        tape.zero_grads();
        assert_eq!(tape.grad(x), Some(&[0.0; 4][..]));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { primitive, shapes }) => {
                assert_eq!(primitive, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(tape.add(a, NodeId(99)), Err(Error::DanglingNode(99))));
    }

    #[test]
    fn non_scalar_loss_and_dangling_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2]).requiring_grad());
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
        assert!(matches!(tape.backward(NodeId(7)), Err(Error::DanglingNode(7))));
    }

    #[test]
    fn log_of_zero_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(vec_t(&[0.0, 1.0]));
        assert!(matches!(tape.log(a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn integer_forward_values_exact() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 2, vec![5.0, -6.0, 7.0, 8.0]).unwrap());
        let m = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(m).unwrap().data(), &[19.0, 10.0, 43.0, 14.0]);
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[6.0, -4.0, 10.0, 12.0]);
    }
}
