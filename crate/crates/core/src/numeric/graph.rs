//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive as a node in creation order, so the
//! node list is already a topological order. [`Graph::backward`] walks it in
//! reverse exactly once per call and adds the resulting gradients into the
//! leaf gradient buffers, which persist until [`Graph::zero_grad`].
//!
//! Leaves may borrow their values (parameters held elsewhere) so building a
//! graph over a large model does not copy the weights.

use std::borrow::Cow;

use super::gemm::{gemm, MatView};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Gelu(NodeId),
    ClampMin(NodeId, f64),
    Softmax(NodeId, Axis),
    LogSoftmax(NodeId, Axis),
    Reshape(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice {
        x: NodeId,
        axis: Axis,
        start: usize,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Norm(NodeId),
    Sum(NodeId),
    Pick(NodeId, Vec<usize>),
}

/// `outer × len × inner` view of a tensor around one axis.
#[derive(Debug, Clone, Copy)]
struct Axis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Axis {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    fn offset(&self, o: usize, i: usize) -> usize {
        o * self.len * self.inner + i
    }
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// The computation tape.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node<'a> {
        &self.nodes[id.0]
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    // ---- leaves -------------------------------------------------------

    /// Leaf that owns its value; differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, rg)
    }

    /// Leaf that borrows its value.
    pub fn leaf_ref(&mut self, t: &'a Tensor, requires_grad: bool) -> NodeId {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.node(id).value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.node(id).value[0]
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = self.node(id);
        Tensor::new(&n.shape, n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.node(id).requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.leaf_grads[id.0].as_deref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.leaf_grads[id.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise ---------------------------------------------------

    fn binary_same(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(Error::shape(op, &na.shape, &nb.shape));
        }
        let v = na.value.iter().zip(nb.value.iter()).map(|(&x, &y)| f(x, y)).collect();
        Ok((na.shape.clone(), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (s, v) = self.binary_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(s, v.into(), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (s, v) = self.binary_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(s, v.into(), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (s, v) = self.binary_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(s, v.into(), Op::Mul(a, b), rg))
    }

    /// Broadcast-adds a vector of length `n` to every row of `[.., n]`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (nx, nb) = (self.node(x), self.node(bias));
        let n = *nx.shape.last().unwrap_or(&0);
        if nb.value.len() != n || n == 0 {
            return Err(Error::shape("add_row", &nx.shape, &nb.shape));
        }
        let v = nx
            .value
            .chunks(n)
            .flat_map(|row| row.iter().zip(nb.value.iter()).map(|(a, b)| a + b))
            .collect();
        let s = nx.shape.clone();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(s, Cow::Owned(v), Op::AddRow(x, bias), rg))
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let n = self.node(x);
        let v: Vec<f64> = n.value.iter().map(|&a| f(a)).collect();
        let s = n.shape.clone();
        let rg = n.requires_grad;
        self.push(s, v.into(), op, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, Op::Scale(x, c), |a| a * c)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, Op::AddScalar(x), |a| a + c)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Softplus(x), |a| a.max(0.0) + (-a.abs()).exp().ln_1p())
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Gelu(x), |a| 0.5 * a * (1.0 + (GELU_C * (a + 0.044715 * a * a * a)).tanh()))
    }

    /// `max(x, floor)`; gradient passes only where the input was above the floor.
    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> NodeId {
        self.unary(x, Op::ClampMin(x, floor), |a| a.max(floor))
    }

    // ---- linear algebra -------------------------------------------------

    /// `a · b` for 2-D `a: [m,k]`, `b: [k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for 2-D `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (na, nb) = (self.node(a), self.node(b));
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        if na.shape.len() != 2 || nb.shape.len() != 2 {
            return Err(Error::shape(op, &na.shape, &nb.shape));
        }
        let (m, k) = (na.shape[0], na.shape[1]);
        let (kb, n) = if trans_b {
            (nb.shape[1], nb.shape[0])
        } else {
            (nb.shape[0], nb.shape[1])
        };
        if k != kb {
            return Err(Error::shape(op, &na.shape, &nb.shape));
        }
        let mut out = vec![0.0; m * n];
        let bv = if trans_b { MatView::new(&nb.value, 1, k) } else { MatView::new(&nb.value, n, 1) };
        gemm(m, k, n, MatView::new(&na.value, k, 1), bv, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out.into(), Op::MatMul { a, b, trans_b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let nx = self.node(x);
        if nx.shape.len() != 2 {
            return Err(Error::shape("transpose", &nx.shape, &[2]));
        }
        let (r, c) = (nx.shape[0], nx.shape[1]);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = nx.value[i * c + j];
            }
        }
        let rg = nx.requires_grad;
        Ok(self.push(vec![c, r], v.into(), Op::Transpose(x), rg))
    }

    // ---- normalizers ----------------------------------------------------

    fn check_axis(&self, op: &'static str, x: NodeId, axis: usize) -> Result<Axis> {
        let s = &self.node(x).shape;
        if axis >= s.len() {
            return Err(Error::shape(op, s, &[axis]));
        }
        Ok(Axis::of(s, axis))
    }

    fn check_finite(&self, op: &str, x: NodeId) -> Result<()> {
        if self.node(x).value.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite input to {op}")))
        }
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let ax = self.check_axis("softmax", x, axis)?;
        self.check_finite("softmax", x)?;
        let v = softmax_along(&self.node(x).value, ax, false);
        let (s, rg) = (self.node(x).shape.clone(), self.node(x).requires_grad);
        Ok(self.push(s, v.into(), Op::Softmax(x, ax), rg))
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let ax = self.check_axis("log_softmax", x, axis)?;
        self.check_finite("log_softmax", x)?;
        let v = softmax_along(&self.node(x).value, ax, true);
        let (s, rg) = (self.node(x).shape.clone(), self.node(x).requires_grad);
        Ok(self.push(s, v.into(), Op::LogSoftmax(x, ax), rg))
    }

    /// Layer normalization over the last dimension with elementwise gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let nx = self.node(x);
        let cols = *nx.shape.last().unwrap_or(&0);
        let (ng, nb) = (self.node(gain), self.node(bias));
        if cols == 0 || ng.value.len() != cols || nb.value.len() != cols {
            return Err(Error::shape("layer_norm", &nx.shape, &ng.shape));
        }
        let rows = nx.value.len() / cols;
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &nx.value[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * ng.value[c] + nb.value[c];
            }
        }
        let s = nx.shape.clone();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            s,
            out.into(),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- shape ops --------------------------------------------------------

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let nx = self.node(x);
        if shape.iter().product::<usize>() != nx.value.len() {
            return Err(Error::shape("reshape", &nx.shape, shape));
        }
        let v = nx.value.to_vec();
        let rg = nx.requires_grad;
        Ok(self.push(shape.to_vec(), v.into(), Op::Reshape(x), rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.node(*first).shape.clone();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = &self.node(p).shape;
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let out_ax = Axis::of(&shape, axis);
        let mut out = vec![0.0; shape.iter().product()];
        let mut start = 0;
        for &p in parts {
            let np = self.node(p);
            let ax = Axis::of(&np.shape, axis);
            let width = ax.len * ax.inner;
            for o in 0..ax.outer {
                let dst = out_ax.offset(o, start * ax.inner);
                out[dst..dst + width].copy_from_slice(&np.value[o * width..(o + 1) * width]);
            }
            start += ax.len;
        }
        let rg = self.rg(parts);
        Ok(self.push(shape, out.into(), Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Half-open slice `[start, end)` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let nx = self.node(x);
        if axis >= nx.shape.len() || start > end || end > nx.shape[axis] {
            return Err(Error::shape("slice", &nx.shape, &[axis, start, end]));
        }
        let ax = Axis::of(&nx.shape, axis);
        let mut shape = nx.shape.clone();
        shape[axis] = end - start;
        let width = (end - start) * ax.inner;
        let mut out = Vec::with_capacity(ax.outer * width);
        for o in 0..ax.outer {
            let src = ax.offset(o, start * ax.inner);
            out.extend_from_slice(&nx.value[src..src + width]);
        }
        let rg = nx.requires_grad;
        Ok(self.push(shape, out.into(), Op::Slice { x, axis: ax, start }, rg))
    }

    /// Gathers rows of a `[V, d]` table; the gradient scatter-adds back.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let nt = self.node(table);
        if nt.shape.len() != 2 {
            return Err(Error::shape("embedding", &nt.shape, &[2]));
        }
        let (vocab, d) = (nt.shape[0], nt.shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Usage(format!("token id {bad} out of vocabulary of size {vocab}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&nt.value[i * d..(i + 1) * d]);
        }
        let rg = nt.requires_grad;
        Ok(self.push(
            vec![ids.len(), d],
            out.into(),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    // ---- reductions -------------------------------------------------------

    /// Euclidean norm over all elements, as a scalar.
    pub fn norm(&mut self, x: NodeId) -> NodeId {
        let nx = self.node(x);
        let v = nx.value.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rg = nx.requires_grad;
        self.push(vec![], vec![v].into(), Op::Norm(x), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let nx = self.node(x);
        let v = nx.value.iter().sum::<f64>();
        let rg = nx.requires_grad;
        self.push(vec![], vec![v].into(), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.node(x).value.len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Selects elements by flat index into a vector.
    pub fn pick(&mut self, x: NodeId, flat: &[usize]) -> Result<NodeId> {
        let nx = self.node(x);
        if let Some(&bad) = flat.iter().find(|&&i| i >= nx.value.len()) {
            return Err(Error::shape("pick", &nx.shape, &[bad]));
        }
        let v = flat.iter().map(|&i| nx.value[i]).collect();
        let rg = nx.requires_grad;
        Ok(self.push(vec![flat.len()], Cow::Owned(v), Op::Pick(x, flat.to_vec()), rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", ln.shape)));
        }
        if !ln.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let want = |id: NodeId| nodes[id.0].requires_grad;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {
                match &mut self.leaf_grads[i] {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            &Op::Add(a, b) => {
                for id in [a, b] {
                    if want(id) {
                        acc(grads, nodes, id, |d| add_into(d, &g));
                    }
                }
            }
            &Op::Sub(a, b) => {
                if want(a) {
                    acc(grads, nodes, a, |d| add_into(d, &g));
                }
                if want(b) {
                    acc(grads, nodes, b, |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if want(a) {
                    acc(grads, nodes, a, |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * vb[k];
                        }
                    });
                }
                if want(b) {
                    acc(grads, nodes, b, |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * va[k];
                        }
                    });
                }
            }
            &Op::AddRow(x, bias) => {
                if want(x) {
                    acc(grads, nodes, x, |d| add_into(d, &g));
                }
                if want(bias) {
                    let n = nodes[bias.0].value.len();
                    acc(grads, nodes, bias, |d| {
                        for row in g.chunks(n) {
                            add_into(d, row);
                        }
                    });
                }
            }
            &Op::Scale(x, c) => acc(grads, nodes, x, |d| d.iter_mut().zip(&g).for_each(|(a, b)| *a += c * b)),
            &Op::AddScalar(x) => acc(grads, nodes, x, |d| add_into(d, &g)),
            &Op::MatMul { a, b, trans_b, m, k, n } => {
                let dc = MatView::new(&g, n, 1);
                if want(a) {
                    let vb = &nodes[b.0].value;
                    // dA = dC · B_effᵀ
                    let bt = if trans_b { MatView::new(vb, k, 1) } else { MatView::new(vb, 1, n) };
                    acc(grads, nodes, a, |d| gemm(m, n, k, dc, bt, d, 1.0));
                }
                if want(b) {
                    let va = &nodes[a.0].value;
                    if trans_b {
                        // dB [n,k] = dCᵀ · A
                        acc(grads, nodes, b, |d| gemm(n, m, k, MatView::new(&g, 1, n), MatView::new(va, k, 1), d, 1.0));
                    } else {
                        // dB [k,n] = Aᵀ · dC
                        acc(grads, nodes, b, |d| gemm(k, m, n, MatView::new(va, 1, k), dc, d, 1.0));
                    }
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                acc(grads, nodes, x, |d| {
                    for ii in 0..r {
                        for jj in 0..c {
                            d[ii * c + jj] += g[jj * r + ii];
                        }
                    }
                });
            }
            &Op::Exp(x) => {
                let y = &node.value;
                acc(grads, nodes, x, |d| (0..d.len()).for_each(|k| d[k] += g[k] * y[k]));
            }
            &Op::Log(x) => {
                let v = &nodes[x.0].value;
                acc(grads, nodes, x, |d| (0..d.len()).for_each(|k| d[k] += g[k] / v[k]));
            }
            &Op::Tanh(x) => {
                let y = &node.value;
                acc(grads, nodes, x, |d| (0..d.len()).for_each(|k| d[k] += g[k] * (1.0 - y[k] * y[k])));
            }
            &Op::Softplus(x) => {
                let v = &nodes[x.0].value;
                acc(grads, nodes, x, |d| (0..d.len()).for_each(|k| d[k] += g[k] * sigmoid(v[k])));
            }
            &Op::Gelu(x) => {
                let v = &nodes[x.0].value;
                acc(grads, nodes, x, |d| {
                    for k in 0..d.len() {
                        let a = v[k];
                        let t = (GELU_C * (a + 0.044715 * a * a * a)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * a * a);
                        d[k] += g[k] * (0.5 * (1.0 + t) + 0.5 * a * dt);
                    }
                });
            }
            &Op::ClampMin(x, floor) => {
                let v = &nodes[x.0].value;
                acc(grads, nodes, x, |d| {
                    for k in 0..d.len() {
                        if v[k] > floor {
                            d[k] += g[k];
                        }
                    }
                });
            }
            &Op::Softmax(x, ax) => {
                let y = &node.value;
                acc(grads, nodes, x, |d| {
                    for_each_lane(ax, |idx| {
                        let dot: f64 = idx.clone().map(|p| g[p] * y[p]).sum();
                        for p in idx {
                            d[p] += y[p] * (g[p] - dot);
                        }
                    })
                });
            }
            &Op::LogSoftmax(x, ax) => {
                let y = &node.value;
                acc(grads, nodes, x, |d| {
                    for_each_lane(ax, |idx| {
                        let total: f64 = idx.clone().map(|p| g[p]).sum();
                        for p in idx {
                            d[p] += g[p] - y[p].exp() * total;
                        }
                    })
                });
            }
            &Op::Reshape(x) => acc(grads, nodes, x, |d| add_into(d, &g)),
            Op::Concat(parts, axis) => {
                let out_ax = Axis::of(&node.shape, *axis);
                let mut start = 0;
                for &p in parts {
                    let ax = Axis::of(&nodes[p.0].shape, *axis);
                    let width = ax.len * ax.inner;
                    if want(p) {
                        acc(grads, nodes, p, |d| {
                            for o in 0..ax.outer {
                                let src = out_ax.offset(o, start * ax.inner);
                                add_into(&mut d[o * width..(o + 1) * width], &g[src..src + width]);
                            }
                        });
                    }
                    start += ax.len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let width = g.len() / axis.outer.max(1);
                acc(grads, nodes, x, |d| {
                    for o in 0..axis.outer {
                        let dst = axis.offset(o, start * axis.inner);
                        add_into(&mut d[dst..dst + width], &g[o * width..(o + 1) * width]);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d_model = nodes[table.0].shape[1];
                acc(grads, nodes, *table, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * d_model..(id + 1) * d_model], &g[r * d_model..(r + 1) * d_model]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = &nodes[gain.0].value;
                let cols = gv.len();
                if want(*x) {
                    acc(grads, nodes, *x, |d| {
                        for (r, &rs) in rstd.iter().enumerate() {
                            let base = r * cols;
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for c in 0..cols {
                                let dh = g[base + c] * gv[c];
                                m1 += dh;
                                m2 += dh * xhat[base + c];
                            }
                            m1 /= cols as f64;
                            m2 /= cols as f64;
                            for c in 0..cols {
                                let dh = g[base + c] * gv[c];
                                d[base + c] += rs * (dh - m1 - xhat[base + c] * m2);
                            }
                        }
                    });
                }
                if want(*gain) {
                    acc(grads, nodes, *gain, |d| {
                        for (k, gk) in g.iter().enumerate() {
                            d[k % cols] += gk * xhat[k];
                        }
                    });
                }
                if want(*bias) {
                    acc(grads, nodes, *bias, |d| {
                        for row in g.chunks(cols) {
                            add_into(d, row);
                        }
                    });
                }
            }
            &Op::Norm(x) => {
                let v = &nodes[x.0].value;
                let nrm = node.value[0];
                if nrm > 0.0 {
                    acc(grads, nodes, x, |d| (0..d.len()).for_each(|k| d[k] += g[0] * v[k] / nrm));
                }
            }
            &Op::Sum(x) => acc(grads, nodes, x, |d| d.iter_mut().for_each(|a| *a += g[0])),
            Op::Pick(x, flat) => {
                acc(grads, nodes, *x, |d| {
                    for (k, &p) in flat.iter().enumerate() {
                        d[p] += g[k];
                    }
                });
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node<'_>], id: NodeId, f: impl FnOnce(&mut [f64])) {
    let slot = &mut grads[id.0];
    let buf = slot.get_or_insert_with(|| vec![0.0; nodes[id.0].value.len()]);
    f(buf);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn for_each_lane(ax: Axis, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    for o in 0..ax.outer {
        for i in 0..ax.inner {
            let start = ax.offset(o, i);
            f((start..start + ax.len * ax.inner).step_by(ax.inner));
        }
    }
}

fn softmax_along(x: &[f64], ax: Axis, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for_each_lane(ax, |idx| {
        let max = idx.clone().map(|p| x[p]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = idx.clone().map(|p| (x[p] - max).exp()).sum();
        let lz = z.ln();
        for p in idx {
            out[p] = if log { x[p] - max - lz } else { (x[p] - max).exp() / z };
        }
    });
    out
}
