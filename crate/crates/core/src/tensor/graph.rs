//! Tape of whole-tensor operations with exact reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and backward is a single reverse sweep that visits each
//! node once. Every op checks its output for NaN/Inf.

use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    AddScalar(Var),
    Gelu(Var),
    Exp(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Embedding { table: Var, ids: Vec<u32> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording graph. Leaves are created with [`Graph::param`] (trainable) or
/// [`Graph::constant`].
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn as_matrix<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op<T>, inputs: &[Var]) -> Result<Var> {
        finite(op, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let name = if trans_b { "matmul_bt" } else { "matmul" };
        let (m, k) = as_matrix(self.value(a), name)?;
        let (br, bc) = as_matrix(self.value(b), name)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err(
                name,
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(name, value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, kind: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(op, value, kind, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[n]` vector to every row of a `[.., n]` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(bias) != [n] {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n.max(1)) {
            row.iter_mut().zip(&b).for_each(|(v, &bb)| *v = *v + bb);
        }
        self.push("add_row", value, Op::AddRow { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = *v * factor);
        self.push("scale", value, Op::Scale { x, factor }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = *v + c);
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_K);
        let half = T::from_f64(0.5);
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| {
            let u = *v;
            *v = half * u * (T::one() + (c * (u + k * u * u * u)).tanh());
        });
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.exp());
        self.push("exp", value, Op::Exp(x), &[x])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut value = self.value(x).clone();
        let data = value.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                softmax_strided(data, len, idx, len);
            }
        }
        self.push("softmax", value, Op::Softmax { x, outer, len, inner }, &[x])
    }

    /// Row softmax of a square score matrix where row `t` only sees columns
    /// `0..=t`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = as_matrix(self.value(x), "causal_softmax")?;
        if r != c {
            return Err(shape_err("causal_softmax", format!("needs a square matrix, got [{r}, {c}]")));
        }
        let mut value = self.value(x).clone();
        let data = value.data_mut();
        for t in 0..r {
            softmax_strided(data, c, |j| t * c + j, t + 1);
        }
        self.push(
            "causal_softmax",
            value,
            Op::Softmax {
                x,
                outer: r,
                len: c,
                inner: 1,
            },
            &[x],
        )
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let h = self.value(x).cols();
        if self.shape(gain) != [h] || self.shape(bias) != [h] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let rows = self.value(x).rows();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let eps = T::from_f64(eps);
        let hn = T::from_f64(h as f64);
        let mut xhat = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); rows * h];
        for r in 0..rows {
            let row = &mut xhat[r * h..(r + 1) * h];
            let mean = row.iter().copied().sum::<T>() / hn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * is;
                out[r * h + j] = *v * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Gathers rows of a `[V, h]` table.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (rows, h) = as_matrix(self.value(table), "embedding")?;
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id as usize >= rows {
                return Err(TensorError::IdOutOfRange { id, rows });
            }
            out.extend_from_slice(self.value(table).row(id as usize));
        }
        let value = Tensor::new(vec![ids.len(), h], out)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = as_matrix(self.value(p), "concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("{c} vs {cols} columns")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (rows, _) = as_matrix(self.value(parts[0]), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = as_matrix(self.value(p), "concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("{r} vs {rows} rows")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = as_matrix(self.value(x), "slice_rows")?;
        if start + len > r {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        self.push("slice_rows", value, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = as_matrix(self.value(x), "slice_cols")?;
        if start + len > c {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&src[row * c + start..row * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        self.push("slice_cols", value, Op::SliceCols { x, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("mean", Tensor::scalar(s / T::from_f64(n as f64)), Op::Mean(x), &[x])
    }

    /// Weighted mean over rows of `-log softmax(logits)[target]`. Rows with
    /// zero weight do not contribute; at least one weight must be nonzero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], weights: &[T]) -> Result<Var> {
        let (rows, vocab) = as_matrix(self.value(logits), "cross_entropy")?;
        if targets.len() != rows || weights.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{rows} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let total_w: T = weights.iter().copied().sum();
        if total_w <= T::zero() {
            return Err(TensorError::EmptyMask);
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * vocab];
        let mut loss = T::zero();
        for t in 0..rows {
            if weights[t] == T::zero() {
                continue;
            }
            let target = targets[t] as usize;
            if target >= vocab {
                return Err(TensorError::IdOutOfRange {
                    id: targets[t],
                    rows: vocab,
                });
            }
            let row = &x[t * vocab..(t + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[t * vocab..(t + 1) * vocab];
            let mut z = T::zero();
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - max).exp();
                z = z + *pi;
            }
            p.iter_mut().for_each(|pi| *pi = *pi / z);
            let nll = max + z.ln() - row[target];
            loss = loss + weights[t] * nll;
        }
        let value = Tensor::scalar(loss / total_w);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar loss. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                (node.requires_grad && matches!(node.op, Op::Leaf)).then(|| {
                    let data = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                    Tensor::new(node.value.shape().to_vec(), data).expect("grad shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, $v, nodes[$v.0].value.numel())
            };
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = out.shape()[1];
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if wants(*a) {
                    // dA = dC * B^T (or dC * B when B was used transposed)
                    T::gemm(m, n, k, g, false, bv, !*trans_b, T::one(), acc!(*a));
                }
                if wants(*b) {
                    if *trans_b {
                        // B is [n, k]: dB = dC^T * A
                        T::gemm(n, m, k, g, true, av, false, T::one(), acc!(*b));
                    } else {
                        // dB = A^T * dC
                        T::gemm(k, m, n, av, true, g, false, T::one(), acc!(*b));
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if wants(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + sign * gi);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if wants(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + sign * gi);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = nodes[b.0].value.data();
                    acc!(*a)
                        .iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(d, (&gi, &y))| *d = *d + gi * y);
                }
                if wants(*b) {
                    let av = nodes[a.0].value.data();
                    acc!(*b)
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(d, (&gi, &x))| *d = *d + gi * x);
                }
            }
            Op::AddRow { x, bias } => {
                if wants(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi);
                }
                if wants(*bias) {
                    let db = acc!(*bias);
                    let n = db.len();
                    for row in g.chunks(n.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, &gi)| *d = *d + gi);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if wants(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi * *factor);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if wants(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi);
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let c = T::from_f64(GELU_C);
                    let k = T::from_f64(GELU_K);
                    let half = T::from_f64(0.5);
                    let three = T::from_f64(3.0);
                    let xv = nodes[x.0].value.data();
                    acc!(*x).iter_mut().zip(g.iter().zip(xv)).for_each(|(d, (&gi, &u))| {
                        let t = (c * (u + k * u * u * u)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * u * u);
                        *d = *d + gi * (half * (T::one() + t) + half * u * dt);
                    });
                }
            }
            Op::Exp(x) => {
                if wants(*x) {
                    acc!(*x)
                        .iter_mut()
                        .zip(g.iter().zip(out.data()))
                        .for_each(|(d, (&gi, &y))| *d = *d + gi * y);
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if wants(*x) {
                    let y = out.data();
                    let dx = acc!(*x);
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum::<T>();
                            for j in 0..*len {
                                let p = idx(j);
                                dx[p] = dx[p] + y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let h = nodes[gain.0].value.numel();
                let gv = nodes[gain.0].value.data();
                let rows = inv_std.len();
                if wants(*gain) {
                    let dg = acc!(*gain);
                    for r in 0..rows {
                        for j in 0..h {
                            dg[j] = dg[j] + g[r * h + j] * xhat[r * h + j];
                        }
                    }
                }
                if wants(*bias) {
                    let db = acc!(*bias);
                    for r in 0..rows {
                        for j in 0..h {
                            db[j] = db[j] + g[r * h + j];
                        }
                    }
                }
                if wants(*x) {
                    let dx = acc!(*x);
                    let hn = T::from_f64(h as f64);
                    let mut dxhat = vec![T::zero(); h];
                    for r in 0..rows {
                        let xh = &xhat[r * h..(r + 1) * h];
                        for j in 0..h {
                            dxhat[j] = g[r * h + j] * gv[j];
                        }
                        let s1: T = dxhat.iter().copied().sum();
                        let s2: T = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        for j in 0..h {
                            let v = inv_std[r] / hn * (hn * dxhat[j] - s1 - xh[j] * s2);
                            dx[r * h + j] = dx[r * h + j] + v;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let h = out.cols();
                    let dt = acc!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * h..(id as usize + 1) * h];
                        dst.iter_mut()
                            .zip(&g[r * h..(r + 1) * h])
                            .for_each(|(d, &gi)| *d = *d + gi);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if wants(p) {
                        acc!(p)
                            .iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, &gi)| *d = *d + gi);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut col = 0;
                for &p in parts {
                    let (rows, w) = (nodes[p.0].value.rows(), nodes[p.0].value.cols());
                    if wants(p) {
                        let d = acc!(p);
                        for r in 0..rows {
                            for j in 0..w {
                                d[r * w + j] = d[r * w + j] + g[r * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let c = out.cols();
                    let d = acc!(*x);
                    d[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &gi)| *d = *d + gi);
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let c = nodes[x.0].value.cols();
                    let w = out.cols();
                    let d = acc!(*x);
                    for r in 0..out.rows() {
                        for j in 0..w {
                            d[r * c + start + j] = d[r * c + start + j] + g[r * w + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    acc!(*x).iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let d = acc!(*x);
                    let scale = g[0] / T::from_f64(d.len().max(1) as f64);
                    d.iter_mut().for_each(|d| *d = *d + scale);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if wants(*logits) {
                    let vocab = nodes[logits.0].value.cols();
                    let total_w: T = weights.iter().copied().sum();
                    let d = acc!(*logits);
                    for (t, (&w, &target)) in weights.iter().zip(targets).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let scale = g[0] * w / total_w;
                        let row = &mut d[t * vocab..(t + 1) * vocab];
                        for (j, dj) in row.iter_mut().enumerate() {
                            *dj = *dj + scale * probs[t * vocab + j];
                        }
                        row[target as usize] = row[target as usize] - scale;
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// In-place softmax over `len` strided entries; only the first `visible`
/// entries participate, the rest are set to zero.
fn softmax_strided<T: Scalar>(data: &mut [T], len: usize, idx: impl Fn(usize) -> usize, visible: usize) {
    if len == 0 {
        return;
    }
    let visible = visible.min(len);
    let max = (0..visible)
        .map(|j| data[idx(j)])
        .fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for j in 0..visible {
        let e = (data[idx(j)] - max).exp();
        data[idx(j)] = e;
        z = z + e;
    }
    for j in 0..visible {
        data[idx(j)] = data[idx(j)] / z;
    }
    for j in visible..len {
        data[idx(j)] = T::zero();
    }
}
