//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value; `backward`
//! walks the nodes once in reverse and accumulates vector-Jacobian products
//! into each input. All reductions run left to right so repeated runs are
//! bitwise identical.

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Reshape(Var),
    Tanh(Var),
    SoftmaxRow(Var),
    RowMean(Var),
    RowStd { input: Var, mean: Var, floored: Vec<bool> },
    Sum(Var),
    L1(Var),
    Cosine(Var, Var),
    MaskedL2 { input: Var, mask: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::Reshape(_) => "reshape",
            Op::Tanh(_) => "tanh",
            Op::SoftmaxRow(_) => "softmax_row",
            Op::RowMean(_) => "row_mean",
            Op::RowStd { .. } => "row_std",
            Op::Sum(_) => "sum",
            Op::L1(_) => "l1_norm",
            Op::Cosine(..) => "cosine_similarity",
            Op::MaskedL2 { .. } => "masked_l2",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Floor applied to per-row standard deviations.
pub const STD_FLOOR: f64 = 1e-5;

/// Norms below this are treated as zero by cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Default, Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    negated_rule: Option<&'static str>,
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

    /// Records a trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`, if `v`
    /// requires one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Fault injection for the gradient checker's self-test: every
    /// vector-Jacobian product of the named op is negated.
    #[doc(hidden)]
    pub fn negate_backward_rule(&mut self, op: &'static str) {
        self.negated_rule = Some(op);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(contract(format!("{what}: dims {:?} and {:?} differ", self.dims(a), self.dims(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.dims().to_vec(), data).expect("dims checked");
        self.push_op(out, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.dims(a).len() != 2 {
            return Err(contract("transpose needs a rank-2 tensor"));
        }
        let out = self.value(a).transpose();
        Ok(self.push_op(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "div")?;
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Degenerate("division by zero".into()));
        }
        Ok(self.zip_with(a, b, Op::Div(a, b), |x, y| x / y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push_op(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push_op(out, Op::AddScalar(a), &[a])
    }

    /// Repeats a length-n vector as every row of an `rows × n` matrix.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        if self.dims(v).len() != 1 {
            return Err(contract("broadcast_rows needs a vector"));
        }
        let src = self.value(v).data();
        let n = src.len();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(src);
        }
        let out = Tensor::matrix(rows, n, data)?;
        Ok(self.push_op(out, Op::BroadcastRows(v), &[v]))
    }

    /// Repeats a length-m vector as every column of an `m × cols` matrix.
    pub fn broadcast_cols(&mut self, v: Var, cols: usize) -> Result<Var> {
        if self.dims(v).len() != 1 {
            return Err(contract("broadcast_cols needs a vector"));
        }
        let src = self.value(v).data();
        let m = src.len();
        let mut data = Vec::with_capacity(m * cols);
        for &x in src {
            data.extend(std::iter::repeat_n(x, cols));
        }
        let out = Tensor::matrix(m, cols, data)?;
        Ok(self.push_op(out, Op::BroadcastCols(v), &[v]))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(dims)?;
        Ok(self.push_op(out, Op::Reshape(a), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push_op(out, Op::Tanh(a), &[a])
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_row(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.is_finite() {
            return Err(Error::NonFinite("softmax_row input".into()));
        }
        let (m, n) = x.shape2();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &x.data()[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / total));
        }
        let out = Tensor::new(x.dims().to_vec(), data)?;
        Ok(self.push_op(out, Op::SoftmaxRow(a), &[a]))
    }

    /// Mean across columns of each row; this is adaptive average pooling to
    /// output size one.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = x.shape2();
        let data = (0..m).map(|i| x.data()[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
        self.push_op(Tensor::vector(data), Op::RowMean(a), &[a])
    }

    /// Per-row population mean and standard deviation, std floored at
    /// [`STD_FLOOR`].
    pub fn row_stats(&mut self, a: Var) -> (Var, Var) {
        let mean = self.row_mean(a);
        let x = self.value(a);
        let mu = self.value(mean).data();
        let (m, n) = x.shape2();
        let mut std = Vec::with_capacity(m);
        let mut floored = Vec::with_capacity(m);
        for (i, &mu) in mu.iter().enumerate() {
            let var = x.data()[i * n..(i + 1) * n].iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let s = var.sqrt();
            floored.push(s < STD_FLOOR);
            std.push(s.max(STD_FLOOR));
        }
        let out = Tensor::vector(std);
        let std = self.push_op(out, Op::RowStd { input: a, mean, floored }, &[a]);
        (mean, std)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn l1_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x.abs()).sum();
        self.push_op(Tensor::scalar(s), Op::L1(a), &[a])
    }

    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.value(u).len() != self.value(v).len() {
            return Err(contract("cosine_similarity: length mismatch"));
        }
        let (nu, nv) = (self.value(u).l2_norm(), self.value(v).l2_norm());
        if nu < NORM_FLOOR || nv < NORM_FLOOR {
            return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
        }
        let dot: f64 = self.value(u).data().iter().zip(self.value(v).data()).map(|(a, b)| a * b).sum();
        Ok(self.push_op(Tensor::scalar(dot / (nu * nv)), Op::Cosine(u, v), &[u, v]))
    }

    /// `‖x ⊙ mask‖₂`.
    pub fn masked_l2(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(contract("masked_l2: mask length mismatch"));
        }
        let s = self.value(a).data().iter().zip(mask).map(|(x, m)| (x * m) * (x * m)).sum::<f64>().sqrt();
        Ok(self.push_op(Tensor::scalar(s), Op::MaskedL2 { input: a, mask: mask.to_vec() }, &[a]))
    }

    /// Row-vector affine map `x·W + b` for a vector `x`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let n_in = self.value(x).len();
        let row = self.reshape(x, &[1, n_in])?;
        let prod = self.matmul(row, weight)?;
        let n_out = self.value(prod).len();
        let flat = self.reshape(prod, &[n_out])?;
        self.add(flat, bias)
    }

    /// Weighted sum of scalars, accumulated left to right.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let t = self.scale(v, w);
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t)?,
            });
        }
        acc.ok_or_else(|| contract("weighted_sum of no terms"))
    }

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!("backward needs a scalar root, got dims {:?}", self.dims(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad).map(|d| Tensor::new(node.value.dims().to_vec(), d).expect("grad dims"))
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let negate = self.negated_rule == Some(node.op.name());
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, mut contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            if negate {
                contrib.iter_mut().for_each(|c| *c = -*c);
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = va.shape2();
                let (_, n) = vb.shape2();
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * vb.data()[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    acc(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = va.data()[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += a_ip * g[i * n + j];
                            }
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = out.shape2();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[j * m + i] = g[i * n + j];
                    }
                }
                acc(grads, *a, d);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                acc(grads, *b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, g.iter().zip(vb).map(|(g, y)| g / y).collect());
                acc(grads, *b, g.iter().zip(va).zip(vb).map(|((g, x), y)| -g * x / (y * y)).collect());
            }
            Op::Scale(a, c) => acc(grads, *a, g.iter().map(|x| c * x).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => acc(grads, *a, g.to_vec()),
            Op::BroadcastRows(v) => {
                let (m, n) = out.shape2();
                let mut d = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        d[j] += g[i * n + j];
                    }
                }
                acc(grads, *v, d);
            }
            Op::BroadcastCols(v) => {
                let (m, n) = out.shape2();
                let d = (0..m).map(|i| g[i * n..(i + 1) * n].iter().sum()).collect();
                acc(grads, *v, d);
            }
            Op::Tanh(a) => {
                let d = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(grads, *a, d);
            }
            Op::SoftmaxRow(a) => {
                let (m, n) = out.shape2();
                let y = out.data();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(g, y)| g * y).sum();
                    for j in r {
                        d[j] = y[j] * (g[j] - dot);
                    }
                }
                acc(grads, *a, d);
            }
            Op::RowMean(a) => {
                let (m, n) = self.value(*a).shape2();
                let mut d = Vec::with_capacity(m * n);
                for &gi in g.iter().take(m) {
                    d.extend(std::iter::repeat_n(gi / n as f64, n));
                }
                acc(grads, *a, d);
            }
            Op::RowStd { input, mean, floored } => {
                let x = self.value(*input);
                let mu = self.value(*mean).data();
                let (m, n) = x.shape2();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    if floored[i] {
                        continue;
                    }
                    let s = out.data()[i];
                    for j in 0..n {
                        d[i * n + j] = g[i] * (x.data()[i * n + j] - mu[i]) / (n as f64 * s);
                    }
                }
                acc(grads, *input, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(grads, *a, vec![g[0]; n]);
            }
            Op::L1(a) => {
                let d = self
                    .value(*a)
                    .data()
                    .iter()
                    .map(|&x| {
                        if x > 0.0 {
                            g[0]
                        } else if x < 0.0 {
                            -g[0]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(grads, *a, d);
            }
            Op::Cosine(u, v) => {
                let (vu, vv) = (self.value(*u), self.value(*v));
                let (nu, nv) = (vu.l2_norm(), vv.l2_norm());
                let c = out.data()[0];
                let du =
                    vu.data().iter().zip(vv.data()).map(|(a, b)| g[0] * (b / (nu * nv) - c * a / (nu * nu))).collect();
                let dv =
                    vu.data().iter().zip(vv.data()).map(|(a, b)| g[0] * (a / (nu * nv) - c * b / (nv * nv))).collect();
                acc(grads, *u, du);
                acc(grads, *v, dv);
            }
            Op::MaskedL2 { input, mask } => {
                let norm = out.data()[0];
                let x = self.value(*input).data();
                let d = if norm > 0.0 {
                    x.iter().zip(mask).map(|(x, m)| g[0] * m * m * x / norm).collect()
                } else {
                    vec![0.0; x.len()]
                };
                acc(grads, *input, d);
            }
        }
    }
}
