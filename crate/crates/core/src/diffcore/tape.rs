use std::sync::atomic::{AtomicU64, Ordering};

use super::registry::{ParamId, ParamRegistry};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Mask value written above the diagonal by [`Tape::causal_mask`].
const MASKED: f64 = -1e9;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Reference to a node recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    idx: u32,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias { x: usize, bias: usize },
    Scale(usize, T),
    AddScalar(usize),
    Concat { parts: Vec<usize>, rows: bool },
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    Reshape(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Square(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    Gather { table: usize, ids: Vec<usize> },
    Pick { a: usize, cols: Vec<usize> },
    Clamp { a: usize, lo: T, hi: T },
    CausalMask(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward pass. Nodes are appended in evaluation order, so the
/// vector is already topologically sorted and backward walks it in reverse.
#[derive(Debug)]
pub struct Tape<T = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `c (m x n) += a (m x k) * b (k x n)` where `a`/`b` may be stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm_acc<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    beta: T,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

fn grad_slot<T: Scalar>(g: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut Vec<T> {
    g[idx].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True when `id` was recorded on this tape.
    pub fn contains(&self, id: NodeId) -> bool {
        id.tape == self.id && (id.idx as usize) < self.nodes.len()
    }

    fn idx(&self, id: NodeId) -> Result<usize> {
        if id.tape != self.id {
            return Err(Error::Graph(format!(
                "node belongs to tape {} but was used on tape {}",
                id.tape, self.id
            )));
        }
        let i = id.idx as usize;
        if i >= self.nodes.len() {
            return Err(Error::Graph(format!("node index {i} is not on the tape")));
        }
        Ok(i)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: name });
        }
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(NodeId { tape: self.id, idx })
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[self.idx(id).expect("node on tape")].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.value(id).data()[0]
    }

    /// Accumulated gradient (zeros if backward never reached the node).
    pub fn grad(&self, id: NodeId) -> Tensor<T> {
        let node = &self.nodes[self.idx(id).expect("node on tape")];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false, "constant")
            .expect("constant must be finite")
    }

    /// Differentiable input whose gradient is read back with [`Tape::grad`].
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true, "leaf")
            .expect("leaf must be finite")
    }

    /// Snapshot of a registry parameter; gradients flow back through
    /// [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, registry: &ParamRegistry<T>, id: ParamId) -> NodeId {
        self.push(registry.value(id).clone(), Op::Param(id), true, "param")
            .expect("parameter must be finite")
    }

    fn check_same(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::Shape {
                op,
                lhs: self.val(a).shape().to_vec(),
                rhs: self.val(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, a: NodeId, name: &'static str, f: impl Fn(T) -> T, op: fn(usize) -> Op<T>) -> Result<NodeId> {
        let i = self.idx(a)?;
        let x = self.val(i);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(i);
        self.push(out, op(i), rg, name)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, name: &'static str, f: impl Fn(T, T) -> T, op: fn(usize, usize) -> Op<T>) -> Result<NodeId> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        self.check_same(name, i, j)?;
        let data = self
            .val(i)
            .data()
            .iter()
            .zip(self.val(j).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.val(i).shape().to_vec(), data);
        let rg = self.rg(i) || self.rg(j);
        self.push(out, op(i, j), rg, name)
    }

    /// Matrix product. `a` is `[m, k]` or a vector `[k]` (treated as one row,
    /// giving a vector result); `b` is `[k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false, "matmul")
    }

    /// `a * b^T` with `b` stored as `[n, k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true, "matmul_nt")
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool, name: &'static str) -> Result<NodeId> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (self.val(i), self.val(j));
        let shape_err = || Error::Shape {
            op: name,
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        if av.shape().is_empty() || av.shape().len() > 2 || bv.shape().len() != 2 {
            return Err(shape_err());
        }
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != bk {
            return Err(shape_err());
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, T::zero());
        let shape = if av.shape().len() == 1 { vec![n] } else { vec![m, n] };
        let rg = self.rg(i) || self.rg(j);
        self.push(Tensor::new(shape, out), Op::MatMul { a: i, b: j, trans_b }, rg, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// Adds a `[n]` bias to every row of `x` (`[n]` or `[m, n]`).
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (i, j) = (self.idx(x)?, self.idx(bias)?);
        let (xv, bv) = (self.val(i), self.val(j));
        if bv.shape().len() != 1 || xv.shape().is_empty() || xv.cols() != bv.len() {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let n = bv.len();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(bv.data()).for_each(|(o, &b)| *o = *o + b);
        }
        let out = Tensor::new(xv.shape().to_vec(), data);
        let rg = self.rg(i) || self.rg(j);
        self.push(out, Op::AddBias { x: i, bias: j }, rg, "add_bias")
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let i = self.idx(a)?;
        let x = self.val(i);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * c).collect());
        let rg = self.rg(i);
        self.push(out, Op::Scale(i, c), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        self.unary(a, "add_scalar", |v| v + c, Op::AddScalar)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -T::one())
    }

    fn concat_impl(&mut self, parts: &[NodeId], rows: bool) -> Result<NodeId> {
        let name = if rows { "concat_rows" } else { "concat" };
        if parts.is_empty() {
            return Err(Error::Shape {
                op: name,
                lhs: vec![],
                rhs: vec![],
            });
        }
        let idxs = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = self.val(idxs[0]).shape().to_vec();
        let rank = first.len();
        if rank == 0 || rank > 2 || (rows && rank != 2) {
            return Err(Error::Shape {
                op: name,
                lhs: first.clone(),
                rhs: vec![],
            });
        }
        for &p in &idxs[1..] {
            let s = self.val(p).shape();
            let ok = s.len() == rank
                && if rows {
                    s[1] == first[1]
                } else {
                    rank == 1 || s[0] == first[0]
                };
            if !ok {
                return Err(Error::Shape {
                    op: name,
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
        }
        let (shape, data) = if rows {
            let r: usize = idxs.iter().map(|&p| self.val(p).rows()).sum();
            let mut data = Vec::with_capacity(r * first[1]);
            for &p in &idxs {
                data.extend_from_slice(self.val(p).data());
            }
            (vec![r, first[1]], data)
        } else {
            let m = self.val(idxs[0]).rows();
            let total: usize = idxs.iter().map(|&p| self.val(p).cols()).sum();
            let mut data = Vec::with_capacity(m * total);
            for r in 0..m {
                for &p in &idxs {
                    let v = self.val(p);
                    let c = v.cols();
                    data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
                }
            }
            let shape = if rank == 1 { vec![total] } else { vec![m, total] };
            (shape, data)
        };
        let rg = idxs.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, data), Op::Concat { parts: idxs, rows }, rg, name)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.concat_impl(parts, false)
    }

    /// Concatenation of matrices along rows.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.concat_impl(parts, true)
    }

    /// `len` entries of the last axis starting at `start`.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let i = self.idx(a)?;
        let x = self.val(i);
        let c = x.cols();
        if x.shape().is_empty() || start + len > c || len == 0 {
            return Err(Error::Shape {
                op: "slice",
                lhs: x.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let m = x.rows();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&x.data()[r * c + start..r * c + start + len]);
        }
        let shape = if x.shape().len() == 1 { vec![len] } else { vec![m, len] };
        let rg = self.rg(i);
        self.push(Tensor::new(shape, data), Op::SliceCols { a: i, start }, rg, "slice")
    }

    /// `len` rows of a matrix starting at `start`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let i = self.idx(a)?;
        let x = self.val(i);
        if x.shape().len() != 2 || start + len > x.rows() || len == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let c = x.cols();
        let data = x.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(i);
        self.push(Tensor::new(vec![len, c], data), Op::SliceRows { a: i, start }, rg, "slice_rows")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let i = self.idx(a)?;
        let x = self.val(i);
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = x.clone().reshaped(shape.to_vec());
        let rg = self.rg(i);
        self.push(out, Op::Reshape(i), rg, "reshape")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "tanh", |v| v.tanh(), Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(
            a,
            "sigmoid",
            |v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid,
        )
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "exp", |v| v.exp(), Op::Exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "log", |v| v.ln(), Op::Log)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "relu", |v| v.max(T::zero()), Op::Relu)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "square", |v| v * v, Op::Square)
    }

    fn row_softmax(x: &Tensor<T>, log: bool) -> Vec<T> {
        let c = x.cols();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            if log {
                let lse = sum.ln();
                out.extend(row.iter().map(|&v| v - max - lse));
            } else {
                out.extend(row.iter().map(|&v| (v - max).exp() / sum));
            }
        }
        out
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let i = self.idx(a)?;
        let x = self.val(i);
        if x.shape().is_empty() {
            return Err(Error::Shape {
                op: "softmax",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let out = Tensor::new(x.shape().to_vec(), Self::row_softmax(x, false));
        let rg = self.rg(i);
        self.push(out, Op::Softmax(i), rg, "softmax")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let i = self.idx(a)?;
        let x = self.val(i);
        if x.shape().is_empty() {
            return Err(Error::Shape {
                op: "log_softmax",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let out = Tensor::new(x.shape().to_vec(), Self::row_softmax(x, true));
        let rg = self.rg(i);
        self.push(out, Op::LogSoftmax(i), rg, "log_softmax")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let i = self.idx(a)?;
        let s: T = self.val(i).data().iter().copied().sum();
        let rg = self.rg(i);
        self.push(Tensor::scalar(s), Op::Sum(i), rg, "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let i = self.idx(a)?;
        let x = self.val(i);
        let s: T = x.data().iter().copied().sum();
        let out = Tensor::scalar(s / T::of(x.len() as f64));
        let rg = self.rg(i);
        self.push(out, Op::Mean(i), rg, "mean")
    }

    /// Rows of `table` (`[V, d]`) selected by `ids`, giving `[len, d]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let i = self.idx(table)?;
        let t = self.val(i);
        if t.shape().len() != 2 || ids.is_empty() || ids.iter().any(|&r| r >= t.rows()) {
            return Err(Error::Shape {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let d = t.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &r in ids {
            data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
        let rg = self.rg(i);
        self.push(
            Tensor::new(vec![ids.len(), d], data),
            Op::Gather {
                table: i,
                ids: ids.to_vec(),
            },
            rg,
            "gather",
        )
    }

    /// One entry per row: `out[r] = a[r, cols[r]]`.
    pub fn pick(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let i = self.idx(a)?;
        let x = self.val(i);
        let c = x.cols();
        if x.shape().is_empty() || x.rows() != cols.len() || cols.iter().any(|&k| k >= c) {
            return Err(Error::Shape {
                op: "pick",
                lhs: x.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        let data = cols.iter().enumerate().map(|(r, &k)| x.data()[r * c + k]).collect();
        let rg = self.rg(i);
        self.push(
            Tensor::vector(data),
            Op::Pick {
                a: i,
                cols: cols.to_vec(),
            },
            rg,
            "pick",
        )
    }

    /// Elementwise clamp; gradient passes only inside `[lo, hi]`.
    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> Result<NodeId> {
        let i = self.idx(a)?;
        let x = self.val(i);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v.max(lo).min(hi)).collect());
        let rg = self.rg(i);
        self.push(out, Op::Clamp { a: i, lo, hi }, rg, "clamp")
    }

    /// Overwrites entries above the diagonal of a square score matrix with a
    /// large negative constant.
    pub fn causal_mask(&mut self, a: NodeId) -> Result<NodeId> {
        let i = self.idx(a)?;
        let x = self.val(i);
        if x.shape().len() != 2 || x.rows() != x.cols() {
            return Err(Error::Shape {
                op: "causal_mask",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let n = x.cols();
        let mut data = x.data().to_vec();
        for r in 0..n {
            for c in r + 1..n {
                data[r * n + c] = T::of(MASKED);
            }
        }
        let rg = self.rg(i);
        self.push(Tensor::new(vec![n, n], data), Op::CausalMask(i), rg, "causal_mask")
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (i, g, b) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let xv = self.val(i);
        let d = xv.cols();
        if xv.shape().is_empty() || self.val(g).shape() != [d] || self.val(b).shape() != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: self.val(g).shape().to_vec(),
            });
        }
        let eps = T::of(LAYER_NORM_EPS);
        let dn = T::of(d as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        let (gv, bv) = (self.val(g).data(), self.val(b).data());
        for row in xv.data().chunks(d) {
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (k, &v) in row.iter().enumerate() {
                let h = (v - mu) * is;
                xhat.push(h);
                out.push(h * gv[k] + bv[k]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out);
        let rg = self.rg(i) || self.rg(g) || self.rg(b);
        self.push(
            out,
            Op::LayerNorm {
                x: i,
                gain: g,
                bias: b,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    /// Reverse-mode sweep from a scalar root. Gradients accumulate into every
    /// differentiable node; calling twice without a fresh tape doubles them.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let r = self.idx(root)?;
        if self.nodes[r].value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward root must be scalar, found shape {:?}",
                self.nodes[r].value.shape()
            )));
        }
        let mut g: Vec<Option<Vec<T>>> = vec![None; r + 1];
        g[r] = Some(vec![T::one()]);
        for i in (0..=r).rev() {
            let Some(gi) = g[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &gi, &mut g);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&gi).for_each(|(a, &d)| *a = *a + d),
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), gi)),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gi: &[T], g: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = out.cols();
                if self.rg(*a) {
                    // dA = dC * B^T (or dC * B when B was used transposed)
                    let ga = grad_slot(g, *a, av.len());
                    gemm_acc(m, n, k, gi, false, bv.data(), !trans_b, ga, T::one());
                }
                if self.rg(*b) {
                    let gb = grad_slot(g, *b, bv.len());
                    if *trans_b {
                        // dB (n x k) = dC^T * A
                        gemm_acc(n, m, k, gi, true, av.data(), false, gb, T::one());
                    } else {
                        // dB (k x n) = A^T * dC
                        gemm_acc(k, m, n, av.data(), true, gi, false, gb, T::one());
                    }
                }
            }
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if self.rg(p) {
                        let gp = grad_slot(g, p, gi.len());
                        gp.iter_mut().zip(gi).for_each(|(x, &d)| *x = *x + d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let gp = grad_slot(g, *a, gi.len());
                    gp.iter_mut().zip(gi).for_each(|(x, &d)| *x = *x + d);
                }
                if self.rg(*b) {
                    let gp = grad_slot(g, *b, gi.len());
                    gp.iter_mut().zip(gi).for_each(|(x, &d)| *x = *x - d);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let other = self.val(*b).data();
                    let gp = grad_slot(g, *a, gi.len());
                    for ((x, &d), &o) in gp.iter_mut().zip(gi).zip(other) {
                        *x = *x + d * o;
                    }
                }
                if self.rg(*b) {
                    let other = self.val(*a).data();
                    let gp = grad_slot(g, *b, gi.len());
                    for ((x, &d), &o) in gp.iter_mut().zip(gi).zip(other) {
                        *x = *x + d * o;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.rg(*x) {
                    let gp = grad_slot(g, *x, gi.len());
                    gp.iter_mut().zip(gi).for_each(|(p, &d)| *p = *p + d);
                }
                if self.rg(*bias) {
                    let n = self.val(*bias).len();
                    let gp = grad_slot(g, *bias, n);
                    for row in gi.chunks(n) {
                        gp.iter_mut().zip(row).for_each(|(p, &d)| *p = *p + d);
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    let gp = grad_slot(g, *a, gi.len());
                    gp.iter_mut().zip(gi).for_each(|(p, &d)| *p = *p + d * *c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if self.rg(*a) {
                    let gp = grad_slot(g, *a, gi.len());
                    gp.iter_mut().zip(gi).for_each(|(p, &d)| *p = *p + d);
                }
            }
            Op::Concat { parts, rows } => {
                if *rows {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.val(p).len();
                        if self.rg(p) {
                            let gp = grad_slot(g, p, len);
                            gp.iter_mut().zip(&gi[off..off + len]).for_each(|(x, &d)| *x = *x + d);
                        }
                        off += len;
                    }
                } else {
                    let m = out.rows();
                    let total = out.cols();
                    let mut col = 0;
                    for &p in parts {
                        let c = self.val(p).cols();
                        if self.rg(p) {
                            let gp = grad_slot(g, p, m * c);
                            for r in 0..m {
                                for k in 0..c {
                                    gp[r * c + k] = gp[r * c + k] + gi[r * total + col + k];
                                }
                            }
                        }
                        col += c;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if self.rg(*a) {
                    let src = self.val(*a);
                    let (m, c) = (src.rows(), src.cols());
                    let len = out.cols();
                    let gp = grad_slot(g, *a, src.len());
                    for r in 0..m {
                        for k in 0..len {
                            gp[r * c + start + k] = gp[r * c + start + k] + gi[r * len + k];
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if self.rg(*a) {
                    let src = self.val(*a);
                    let c = src.cols();
                    let gp = grad_slot(g, *a, src.len());
                    gp[start * c..start * c + gi.len()]
                        .iter_mut()
                        .zip(gi)
                        .for_each(|(p, &d)| *p = *p + d);
                }
            }
            Op::Tanh(a) => self.elementwise(*a, out, gi, g, |_, y| T::one() - y * y),
            Op::Sigmoid(a) => self.elementwise(*a, out, gi, g, |_, y| y * (T::one() - y)),
            Op::Exp(a) => self.elementwise(*a, out, gi, g, |_, y| y),
            Op::Log(a) => self.elementwise(*a, out, gi, g, |x, _| T::one() / x),
            Op::Relu(a) => self.elementwise(*a, out, gi, g, |x, _| if x > T::zero() { T::one() } else { T::zero() }),
            Op::Square(a) => self.elementwise(*a, out, gi, g, |x, _| T::of(2.0) * x),
            Op::Clamp { a, lo, hi } => self.elementwise(*a, out, gi, g, |x, _| {
                if x >= *lo && x <= *hi {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            Op::CausalMask(a) => {
                if self.rg(*a) {
                    let n = out.cols();
                    let gp = grad_slot(g, *a, gi.len());
                    for r in 0..n {
                        for c in 0..=r {
                            gp[r * n + c] = gp[r * n + c] + gi[r * n + c];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.rg(*a) {
                    let c = out.cols();
                    let gp = grad_slot(g, *a, gi.len());
                    for ((yr, dr), pr) in out.data().chunks(c).zip(gi.chunks(c)).zip(gp.chunks_mut(c)) {
                        let dot: T = yr.iter().zip(dr).map(|(&y, &d)| y * d).sum();
                        for ((p, &y), &d) in pr.iter_mut().zip(yr).zip(dr) {
                            *p = *p + y * (d - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if self.rg(*a) {
                    let c = out.cols();
                    let gp = grad_slot(g, *a, gi.len());
                    for ((yr, dr), pr) in out.data().chunks(c).zip(gi.chunks(c)).zip(gp.chunks_mut(c)) {
                        let total: T = dr.iter().copied().sum();
                        for ((p, &y), &d) in pr.iter_mut().zip(yr).zip(dr) {
                            *p = *p + d - y.exp() * total;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let len = self.val(*a).len();
                    let gp = grad_slot(g, *a, len);
                    gp.iter_mut().for_each(|p| *p = *p + gi[0]);
                }
            }
            Op::Mean(a) => {
                if self.rg(*a) {
                    let len = self.val(*a).len();
                    let d = gi[0] / T::of(len as f64);
                    let gp = grad_slot(g, *a, len);
                    gp.iter_mut().for_each(|p| *p = *p + d);
                }
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let t = self.val(*table);
                    let d = t.cols();
                    let gp = grad_slot(g, *table, t.len());
                    for (row, &r) in gi.chunks(d).zip(ids) {
                        gp[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(p, &v)| *p = *p + v);
                    }
                }
            }
            Op::Pick { a, cols } => {
                if self.rg(*a) {
                    let src = self.val(*a);
                    let c = src.cols();
                    let gp = grad_slot(g, *a, src.len());
                    for (r, &k) in cols.iter().enumerate() {
                        gp[r * c + k] = gp[r * c + k] + gi[r];
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
                let d = out.cols();
                let gv = self.val(*gain).data();
                if self.rg(*gain) {
                    let gp = grad_slot(g, *gain, d);
                    for (dr, hr) in gi.chunks(d).zip(xhat.chunks(d)) {
                        for k in 0..d {
                            gp[k] = gp[k] + dr[k] * hr[k];
                        }
                    }
                }
                if self.rg(*bias) {
                    let gp = grad_slot(g, *bias, d);
                    for dr in gi.chunks(d) {
                        gp.iter_mut().zip(dr).for_each(|(p, &v)| *p = *p + v);
                    }
                }
                if self.rg(*x) {
                    let dn = T::of(d as f64);
                    let gp = grad_slot(g, *x, gi.len());
                    let mut dxhat = vec![T::zero(); d];
                    for (r, (dr, hr)) in gi.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for k in 0..d {
                            dxhat[k] = dr[k] * gv[k];
                        }
                        let s1: T = dxhat.iter().copied().sum();
                        let s2: T = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        let scale = inv_std[r] / dn;
                        for k in 0..d {
                            let v = scale * (dn * dxhat[k] - s1 - hr[k] * s2);
                            gp[r * d + k] = gp[r * d + k] + v;
                        }
                    }
                }
            }
        }
    }

    /// `g[a] += gi * f(x, y)` elementwise, where `x` is the input value and
    /// `y` the output value of the node being differentiated.
    fn elementwise(&self, a: usize, out: &Tensor<T>, gi: &[T], g: &mut [Option<Vec<T>>], f: impl Fn(T, T) -> T) {
        if !self.rg(a) {
            return;
        }
        let xs = self.val(a).data();
        let gp = grad_slot(g, a, gi.len());
        for (((p, &d), &x), &y) in gp.iter_mut().zip(gi).zip(xs).zip(out.data()) {
            *p = *p + d * f(x, y);
        }
    }

    /// Adds the gradients of every `param` leaf into the registry's buffers.
    pub fn accumulate_param_grads(&self, registry: &mut ParamRegistry<T>) {
        for node in &self.nodes {
            if let (Op::Param(id), Some(grad)) = (&node.op, &node.grad) {
                let dst = &mut registry.param_mut(*id).grad;
                dst.data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .for_each(|(a, &b)| *a = *a + b);
            }
        }
    }
}
