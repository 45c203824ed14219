use std::cell::{Ref, RefCell};

use super::{exact_sum, numel, Result, Tensor, TensorError};

/// Recorded operation. Parents always have smaller ids than the node that
/// refers to them, so a reverse sweep over the node list is a valid
/// topological order.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    Scale(usize, f64),
    AddConst(usize),
    MulConst {
        x: usize,
        c: Vec<f64>,
    },
    Relu(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    InverseSigmoid {
        x: usize,
        eps: f64,
    },
    Ln(usize),
    Powf {
        x: usize,
        exponent: f64,
    },
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    Softmax {
        x: usize,
        dims: AxisDims,
    },
    LogSoftmax {
        x: usize,
        dims: AxisDims,
    },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Permute {
        x: usize,
        in_shape: Vec<usize>,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        dims: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Narrow {
        x: usize,
        dims: AxisDims,
        start: usize,
        len: usize,
    },
    IndexRows {
        x: usize,
        rows: Vec<usize>,
        width: usize,
    },
    Pick {
        x: usize,
        cols: Vec<usize>,
        width: usize,
    },
    ExpandRows {
        x: usize,
        n: usize,
        width: usize,
    },
    ExpandCols {
        x: usize,
        n: usize,
        width: usize,
    },
}

/// Decomposition of a shape around one axis: `outer × len × inner`.
#[derive(Debug, Clone, Copy)]
struct AxisDims {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisDims {
    fn of(op: &'static str, shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op,
                axis,
                rank: shape.len(),
            });
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    tracked: bool,
}

/// Linear record of differentiable operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// influence the loss or does not track gradients.
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn get_tensor(&self, v: Var<'_>) -> Option<Tensor> {
        self.get(v).map(|g| Tensor {
            shape: self.shapes[v.id].clone(),
            data: g.to_vec(),
            requires_grad: false,
            grad: None,
        })
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
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

    /// Records `t` as a leaf; it tracks gradients iff `t.requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_unchecked(t.data.clone(), t.shape.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a gradient-tracking leaf regardless of the tensor's flag.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push_unchecked(t.data.clone(), t.shape.clone(), Op::Leaf, true)
    }

    /// Records a constant input (never receives a gradient).
    pub fn constant(&self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_unchecked(t.data, t.shape, Op::Const, false))
    }

    pub fn zeros(&self, shape: impl Into<Vec<usize>>) -> Var<'_> {
        let t = Tensor::zeros(shape);
        self.push_unchecked(t.data, t.shape, Op::Const, false)
    }

    fn push_unchecked(&self, data: Vec<f64>, shape: Vec<usize>, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { data, shape, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, data: Vec<f64>, shape: Vec<usize>, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let tracked = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].tracked)
        };
        let op = if tracked { op } else { Op::Const };
        Ok(self.push_unchecked(data, shape, op, tracked))
    }

    fn node(&self, id: usize) -> Ref<'_, Node> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].data.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.tracked {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(nodes.iter()) {
            if !node.tracked {
                *g = None;
            }
        }
        Ok(Grads {
            grads,
            shapes: nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].tracked {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf | Op::Const => {}
        &Op::MatMul { a, b, m, k, n } => {
            let (ad, bd) = (&nodes[a].data, &nodes[b].data);
            accumulate(grads, nodes, a, |ga| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            });
            accumulate(grads, nodes, b, |gb| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        gb[p * n..(p + 1) * n].iter_mut().zip(grow).for_each(|(d, x)| *d += av * x);
                    }
                }
            });
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, |ga| add_into(ga, g));
            accumulate(grads, nodes, b, |gb| add_into(gb, g));
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, |ga| add_into(ga, g));
            accumulate(grads, nodes, b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
        }
        &Op::Mul(a, b) => {
            let (ad, bd) = (&nodes[a].data, &nodes[b].data);
            accumulate(grads, nodes, a, |ga| {
                ga.iter_mut().zip(g).zip(bd).for_each(|((d, s), y)| *d += s * y)
            });
            accumulate(grads, nodes, b, |gb| {
                gb.iter_mut().zip(g).zip(ad).for_each(|((d, s), x)| *d += s * x)
            });
        }
        &Op::AddBias { x, bias } => {
            accumulate(grads, nodes, x, |gx| add_into(gx, g));
            let width = nodes[bias].data.len();
            accumulate(grads, nodes, bias, |gb| {
                for row in g.chunks_exact(width) {
                    add_into(gb, row);
                }
            });
        }
        &Op::Scale(x, c) => {
            accumulate(grads, nodes, x, |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s));
        }
        &Op::AddConst(x) | &Op::Reshape(x) => {
            accumulate(grads, nodes, x, |gx| add_into(gx, g));
        }
        Op::MulConst { x, c } => {
            accumulate(grads, nodes, *x, |gx| {
                gx.iter_mut().zip(g).zip(c).for_each(|((d, s), k)| *d += s * k)
            });
        }
        &Op::Relu(x) => {
            let xd = &nodes[x].data;
            accumulate(grads, nodes, x, |gx| {
                gx.iter_mut().zip(g).zip(xd).for_each(|((d, s), v)| {
                    if *v > 0.0 {
                        *d += s
                    }
                })
            });
        }
        &Op::Sigmoid(x) => {
            let y = &node.data;
            accumulate(grads, nodes, x, |gx| {
                gx.iter_mut().zip(g).zip(y).for_each(|((d, s), y)| *d += s * y * (1.0 - y))
            });
        }
        &Op::LogSigmoid(x) => {
            let xd = &nodes[x].data;
            accumulate(grads, nodes, x, |gx| {
                gx.iter_mut().zip(g).zip(xd).for_each(|((d, s), &v)| *d += s * super::sigmoid(-v))
            });
        }
        &Op::InverseSigmoid { x, eps } => {
            let xd = &nodes[x].data;
            accumulate(grads, nodes, x, |gx| {
                gx.iter_mut().zip(g).zip(xd).for_each(|((d, s), &p)| {
                    if p >= eps && p <= 1.0 - eps {
                        *d += s / (p * (1.0 - p));
                    }
                })
            });
        }
        &Op::Ln(x) => {
            let xd = &nodes[x].data;
            accumulate(grads, nodes, x, |gx| {
                gx.iter_mut().zip(g).zip(xd).for_each(|((d, s), v)| *d += s / v)
            });
        }
        &Op::Powf { x, exponent } => {
            let xd = &nodes[x].data;
            if exponent == 0.0 {
                return;
            }
            accumulate(grads, nodes, x, |gx| {
                gx.iter_mut()
                    .zip(g)
                    .zip(xd)
                    .for_each(|((d, s), v)| *d += s * exponent * v.powf(exponent - 1.0))
            });
        }
        &Op::Clamp { x, lo, hi } => {
            let xd = &nodes[x].data;
            accumulate(grads, nodes, x, |gx| {
                gx.iter_mut().zip(g).zip(xd).for_each(|((d, s), v)| {
                    if *v >= lo && *v <= hi {
                        *d += s
                    }
                })
            });
        }
        &Op::Softmax { x, dims } => {
            let y = &node.data;
            accumulate(grads, nodes, x, |gx| {
                for o in 0..dims.outer {
                    for i in 0..dims.inner {
                        let at = |a: usize| (o * dims.len + a) * dims.inner + i;
                        let dot: f64 = (0..dims.len).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..dims.len {
                            gx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
            });
        }
        &Op::LogSoftmax { x, dims } => {
            let y = &node.data;
            accumulate(grads, nodes, x, |gx| {
                for o in 0..dims.outer {
                    for i in 0..dims.inner {
                        let at = |a: usize| (o * dims.len + a) * dims.inner + i;
                        let total: f64 = (0..dims.len).map(|a| g[at(a)]).sum();
                        for a in 0..dims.len {
                            gx[at(a)] += g[at(a)] - y[at(a)].exp() * total;
                        }
                    }
                }
            });
        }
        &Op::Sum(x) => {
            accumulate(grads, nodes, x, |gx| gx.iter_mut().for_each(|d| *d += g[0]));
        }
        &Op::Mean(x) => {
            let n = nodes[x].data.len() as f64;
            accumulate(grads, nodes, x, |gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
        }
        Op::Permute { x, in_shape, axes } => {
            let out_shape = &node.shape;
            let strides = strides_of(in_shape);
            accumulate(grads, nodes, *x, |gx| {
                for_each_permuted(out_shape, axes, &strides, |out_i, in_i| gx[in_i] += g[out_i]);
            });
        }
        Op::Concat { parts, dims, outer, inner } => {
            let total: usize = dims.iter().sum();
            let mut offset = 0;
            for (&p, &d) in parts.iter().zip(dims) {
                accumulate(grads, nodes, p, |gp| {
                    for o in 0..*outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                        add_into(&mut gp[o * d * inner..(o + 1) * d * inner], src);
                    }
                });
                offset += d;
            }
        }
        &Op::Narrow { x, dims, start, len } => {
            accumulate(grads, nodes, x, |gx| {
                for o in 0..dims.outer {
                    let dst = (o * dims.len + start) * dims.inner;
                    let src = o * len * dims.inner;
                    add_into(&mut gx[dst..dst + len * dims.inner], &g[src..src + len * dims.inner]);
                }
            });
        }
        Op::IndexRows { x, rows, width } => {
            accumulate(grads, nodes, *x, |gx| {
                for (r, &src) in rows.iter().enumerate() {
                    add_into(&mut gx[src * width..(src + 1) * width], &g[r * width..(r + 1) * width]);
                }
            });
        }
        Op::Pick { x, cols, width } => {
            accumulate(grads, nodes, *x, |gx| {
                for (r, &c) in cols.iter().enumerate() {
                    gx[r * width + c] += g[r];
                }
            });
        }
        &Op::ExpandRows { x, n, width } => {
            accumulate(grads, nodes, x, |gx| {
                for i in 0..n {
                    let dst = &mut gx[i * width..(i + 1) * width];
                    for j in 0..n {
                        add_into(dst, &g[(i * n + j) * width..(i * n + j + 1) * width]);
                    }
                }
            });
        }
        &Op::ExpandCols { x, n, width } => {
            accumulate(grads, nodes, x, |gx| {
                for i in 0..n {
                    for j in 0..n {
                        add_into(
                            &mut gx[j * width..(j + 1) * width],
                            &g[(i * n + j) * width..(i * n + j + 1) * width],
                        );
                    }
                }
            });
        }
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    strides
}

/// Visits output positions of a permutation in row-major order together with
/// the matching flat input index.
fn for_each_permuted(out_shape: &[usize], axes: &[usize], in_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out_shape.len();
    let total = numel(out_shape);
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut idx = vec![0usize; rank];
    let mut in_i = 0usize;
    for out_i in 0..total {
        f(out_i, in_i);
        for a in (0..rank).rev() {
            idx[a] += 1;
            in_i += step[a];
            if idx[a] < out_shape[a] {
                break;
            }
            in_i -= step[a] * idx[a];
            idx[a] = 0;
        }
    }
}

fn softmax_forward(x: &[f64], dims: AxisDims, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..dims.outer {
        for i in 0..dims.inner {
            let at = |a: usize| (o * dims.len + a) * dims.inner + i;
            let max = (0..dims.len).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let total = exact_sum((0..dims.len).map(|a| (x[at(a)] - max).exp()));
            for a in 0..dims.len {
                out[at(a)] = if log {
                    x[at(a)] - max - total.ln()
                } else {
                    (x[at(a)] - max).exp() / total
                };
            }
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node(self.id).shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.node(self.id).data.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.node(self.id).data.clone()
    }

    pub fn value(&self) -> Tensor {
        let n = self.tape.node(self.id);
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// First element; intended for scalar results.
    pub fn item(&self) -> f64 {
        self.tape.node(self.id).data[0]
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes cannot be combined");
    }

    fn unary(self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let (data, shape) = {
            let n = self.tape.node(self.id);
            (n.data.iter().map(|&v| f(v)).collect(), n.shape.clone())
        };
        self.tape.push(name, data, shape, op, &[self.id])
    }

    fn binary(self, rhs: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (data, shape) = {
            let a = self.tape.node(self.id);
            let b = self.tape.node(rhs.id);
            if a.shape != b.shape {
                return Err(shape_err(name, &a.shape, &b.shape));
            }
            (a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(), a.shape.clone())
        };
        self.tape.push(name, data, shape, op, &[self.id, rhs.id])
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", Op::Add(self.id, rhs.id), |a, b| a + b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", Op::Sub(self.id, rhs.id), |a, b| a - b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", Op::Mul(self.id, rhs.id), |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", Op::AddConst(self.id), |v| v + c)
    }

    /// Adds a constant same-shape array (no gradient flows into it).
    pub fn add_const(self, c: &[f64]) -> Result<Var<'t>> {
        let (data, shape) = {
            let n = self.tape.node(self.id);
            if n.data.len() != c.len() {
                return Err(shape_err("add_const", &n.shape, &[c.len()]));
            }
            (n.data.iter().zip(c).map(|(a, b)| a + b).collect(), n.shape.clone())
        };
        self.tape.push("add_const", data, shape, Op::AddConst(self.id), &[self.id])
    }

    /// Elementwise product with a constant same-shape array.
    pub fn mul_const(self, c: &[f64]) -> Result<Var<'t>> {
        let (data, shape) = {
            let n = self.tape.node(self.id);
            if n.data.len() != c.len() {
                return Err(shape_err("mul_const", &n.shape, &[c.len()]));
            }
            (n.data.iter().zip(c).map(|(a, b)| a * b).collect(), n.shape.clone())
        };
        let op = Op::MulConst { x: self.id, c: c.to_vec() };
        self.tape.push("mul_const", data, shape, op, &[self.id])
    }

    /// `[.., n] + [n]` broadcast over the trailing axis.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let (data, shape) = {
            let x = self.tape.node(self.id);
            let b = self.tape.node(bias.id);
            let width = *x.shape.last().expect("rank >= 1");
            if b.shape != [width] {
                return Err(shape_err("add_bias", &x.shape, &b.shape));
            }
            let mut out = x.data.clone();
            for row in out.chunks_exact_mut(width) {
                add_into(row, &b.data);
            }
            (out, x.shape.clone())
        };
        let op = Op::AddBias { x: self.id, bias: bias.id };
        self.tape.push("add_bias", data, shape, op, &[self.id, bias.id])
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(rhs, false)
    }

    /// Matrix product whose inner sums are correctly rounded, so the result
    /// does not depend on the order of the contracted axis.
    pub fn matmul_exact(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(self, rhs: Var<'t>, exact: bool) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (data, m, k, n) = {
            let a = self.tape.node(self.id);
            let b = self.tape.node(rhs.id);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(shape_err("matmul", &a.shape, &b.shape));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            if exact {
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = exact_sum((0..k).map(|p| a.data[i * k + p] * b.data[p * n + j]));
                    }
                }
            } else {
                for i in 0..m {
                    let orow = &mut out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a.data[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        orow.iter_mut().zip(&b.data[p * n..(p + 1) * n]).for_each(|(o, bv)| *o += av * bv);
                    }
                }
            }
            (out, m, k, n)
        };
        let op = Op::MatMul {
            a: self.id,
            b: rhs.id,
            m,
            k,
            n,
        };
        self.tape.push("matmul", data, vec![m, n], op, &[self.id, rhs.id])
    }

    /// `x · W + b` over the trailing axis; leading axes are flattened.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let shape = self.shape();
        let width = *shape.last().expect("rank >= 1");
        let rows = numel(&shape) / width;
        let w_shape = weight.shape();
        if w_shape.len() != 2 || w_shape[0] != width {
            return Err(shape_err("linear", &shape, &w_shape));
        }
        let flat = if shape.len() == 2 { self } else { self.reshape(vec![rows, width])? };
        let mut out = flat.matmul(weight)?;
        if let Some(b) = bias {
            out = out.add_bias(b)?;
        }
        if shape.len() == 2 {
            Ok(out)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().expect("rank >= 1") = w_shape[1];
            out.reshape(out_shape)
        }
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), super::sigmoid)
    }

    /// `ln sigmoid(x)`, stable for large `|x|`.
    pub fn log_sigmoid(self) -> Result<Var<'t>> {
        self.unary("log_sigmoid", Op::LogSigmoid(self.id), |v| v.min(0.0) - (-v.abs()).exp().ln_1p())
    }

    /// Logit after clamping to `[eps, 1 - eps]`; zero gradient where clamped.
    pub fn inverse_sigmoid(self, eps: f64) -> Result<Var<'t>> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(TensorError::Contract(format!(
                "inverse_sigmoid eps must lie in (0, 0.5), got {eps}"
            )));
        }
        self.unary("inverse_sigmoid", Op::InverseSigmoid { x: self.id, eps }, |p| {
            super::inverse_sigmoid(p, eps)
        })
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary("ln", Op::Ln(self.id), f64::ln)
    }

    pub fn powf(self, exponent: f64) -> Result<Var<'t>> {
        self.unary("powf", Op::Powf { x: self.id, exponent }, |v| v.powf(exponent))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary("clamp", Op::Clamp { x: self.id, lo, hi }, |v| v.clamp(lo, hi))
    }

    fn softmax_impl(self, axis: usize, log: bool) -> Result<Var<'t>> {
        let name = if log { "log_softmax" } else { "softmax" };
        let (data, shape, dims) = {
            let n = self.tape.node(self.id);
            let dims = AxisDims::of(name, &n.shape, axis)?;
            (softmax_forward(&n.data, dims, log), n.shape.clone(), dims)
        };
        let op = if log {
            Op::LogSoftmax { x: self.id, dims }
        } else {
            Op::Softmax { x: self.id, dims }
        };
        self.tape.push(name, data, shape, op, &[self.id])
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, true)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let total = self.tape.node(self.id).data.iter().sum();
        self.tape.push("sum", vec![total], vec![1], Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let mean = {
            let n = self.tape.node(self.id);
            n.data.iter().sum::<f64>() / n.data.len() as f64
        };
        self.tape.push("mean", vec![mean], vec![1], Op::Mean(self.id), &[self.id])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let data = {
            let n = self.tape.node(self.id);
            if numel(&shape) != n.data.len() || shape.contains(&0) {
                return Err(shape_err("reshape", &n.shape, &shape));
            }
            n.data.clone()
        };
        self.tape.push("reshape", data, shape, Op::Reshape(self.id), &[self.id])
    }

    /// Reorders axes: output axis `a` is input axis `axes[a]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let (data, out_shape, in_shape) = {
            let n = self.tape.node(self.id);
            let rank = n.shape.len();
            let mut seen = vec![false; rank];
            if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
                return Err(shape_err("permute", &n.shape, axes));
            }
            let out_shape: Vec<usize> = axes.iter().map(|&a| n.shape[a]).collect();
            let strides = strides_of(&n.shape);
            let mut out = vec![0.0; n.data.len()];
            for_each_permuted(&out_shape, axes, &strides, |o, i| out[o] = n.data[i]);
            (out, out_shape, n.shape.clone())
        };
        let op = Op::Permute {
            x: self.id,
            in_shape,
            axes: axes.to_vec(),
        };
        self.tape.push("permute", data, out_shape, op, &[self.id])
    }

    /// 2-D transpose.
    pub fn transpose(self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if rank != 2 {
            return Err(TensorError::Contract(format!("transpose needs rank 2, got {rank}")));
        }
        self.permute(&[1, 0])
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let (data, shape, dims, outer, inner) = {
            let nodes: Vec<_> = parts
                .iter()
                .map(|p| {
                    first.same_tape(p);
                    tape.node(p.id)
                })
                .collect();
            let base = &nodes[0].shape;
            let d0 = AxisDims::of("concat", base, axis)?;
            let mut dims = Vec::with_capacity(parts.len());
            for n in &nodes {
                let ok = n.shape.len() == base.len() && n.shape.iter().zip(base).enumerate().all(|(a, (x, y))| a == axis || x == y);
                if !ok {
                    return Err(shape_err("concat", base, &n.shape));
                }
                dims.push(n.shape[axis]);
            }
            let total: usize = dims.iter().sum();
            let mut out = Vec::with_capacity(d0.outer * total * d0.inner);
            for o in 0..d0.outer {
                for (n, &d) in nodes.iter().zip(&dims) {
                    out.extend_from_slice(&n.data[o * d * d0.inner..(o + 1) * d * d0.inner]);
                }
            }
            let mut shape = base.clone();
            shape[axis] = total;
            (out, shape, dims, d0.outer, d0.inner)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let op = Op::Concat {
            parts: ids.clone(),
            dims,
            outer,
            inner,
        };
        tape.push("concat", data, shape, op, &ids)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let (data, shape, dims) = {
            let n = self.tape.node(self.id);
            let dims = AxisDims::of("narrow", &n.shape, axis)?;
            if len == 0 || start + len > dims.len {
                return Err(TensorError::Contract(format!(
                    "narrow [{start}, {}) exceeds axis length {}",
                    start + len,
                    dims.len
                )));
            }
            let mut out = Vec::with_capacity(dims.outer * len * dims.inner);
            for o in 0..dims.outer {
                let s = (o * dims.len + start) * dims.inner;
                out.extend_from_slice(&n.data[s..s + len * dims.inner]);
            }
            let mut shape = n.shape.clone();
            shape[axis] = len;
            (out, shape, dims)
        };
        let op = Op::Narrow {
            x: self.id,
            dims,
            start,
            len,
        };
        self.tape.push("narrow", data, shape, op, &[self.id])
    }

    /// Gathers rows of a rank-2 tensor.
    pub fn index_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let (data, width) = {
            let n = self.tape.node(self.id);
            if n.shape.len() != 2 || rows.is_empty() {
                return Err(shape_err("index_rows", &n.shape, &[rows.len()]));
            }
            let (h, w) = (n.shape[0], n.shape[1]);
            let mut out = Vec::with_capacity(rows.len() * w);
            for &r in rows {
                if r >= h {
                    return Err(TensorError::Contract(format!("row {r} out of range {h}")));
                }
                out.extend_from_slice(&n.data[r * w..(r + 1) * w]);
            }
            (out, w)
        };
        let op = Op::IndexRows {
            x: self.id,
            rows: rows.to_vec(),
            width,
        };
        self.tape.push("index_rows", data, vec![rows.len(), width], op, &[self.id])
    }

    /// `out[r] = x[r, cols[r]]` for a rank-2 tensor.
    pub fn pick(self, cols: &[usize]) -> Result<Var<'t>> {
        let (data, width) = {
            let n = self.tape.node(self.id);
            if n.shape.len() != 2 || n.shape[0] != cols.len() {
                return Err(shape_err("pick", &n.shape, &[cols.len()]));
            }
            let w = n.shape[1];
            if let Some(&c) = cols.iter().find(|&&c| c >= w) {
                return Err(TensorError::Contract(format!("column {c} out of range {w}")));
            }
            (cols.iter().enumerate().map(|(r, &c)| n.data[r * w + c]).collect(), w)
        };
        let op = Op::Pick {
            x: self.id,
            cols: cols.to_vec(),
            width,
        };
        self.tape.push("pick", data, vec![cols.len()], op, &[self.id])
    }

    fn expand_pairs(self, rows: bool) -> Result<Var<'t>> {
        let name = if rows { "expand_rows" } else { "expand_cols" };
        let (data, n, width) = {
            let node = self.tape.node(self.id);
            if node.shape.len() != 2 {
                return Err(shape_err(name, &node.shape, &[]));
            }
            let (n, w) = (node.shape[0], node.shape[1]);
            let mut out = Vec::with_capacity(n * n * w);
            for i in 0..n {
                for j in 0..n {
                    let src = if rows { i } else { j };
                    out.extend_from_slice(&node.data[src * w..(src + 1) * w]);
                }
            }
            (out, n, w)
        };
        let op = if rows {
            Op::ExpandRows { x: self.id, n, width }
        } else {
            Op::ExpandCols { x: self.id, n, width }
        };
        self.tape.push(name, data, vec![n, n, width], op, &[self.id])
    }

    /// `[n, w] -> [n, n, w]` with `out[i][j] = x[i]`.
    pub fn expand_rows(self) -> Result<Var<'t>> {
        self.expand_pairs(true)
    }

    /// `[n, w] -> [n, n, w]` with `out[i][j] = x[j]`.
    pub fn expand_cols(self) -> Result<Var<'t>> {
        self.expand_pairs(false)
    }
}
