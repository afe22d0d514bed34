use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// swish(x) = x * sigmoid(x)
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

fn swish_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn swish_double_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf with no gradient of interest (noise draws, cached states, ...).
    Constant,
    /// Leaf whose adjoint callers read back (network inputs, data points).
    Input,
    /// Leaf holding a copy of a parameter array; the (tag, slot) key lives
    /// in the tape's dedup map.
    Param,
    MatMul(NodeId, NodeId),
    /// x + r with r a (1, n) row broadcast over the batch.
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Swish(NodeId),
    /// d/dx swish(x), needed to propagate tangents through activations.
    SwishGrad(NodeId),
    ConcatCols(NodeId, NodeId),
    /// Per-row squared norm, (batch, n) -> (batch, 1).
    SquaredNormRows(NodeId),
    /// Per-row dot product, (batch, n) x (batch, n) -> (batch, 1).
    DotRows(NodeId, NodeId),
    /// Mean over all entries, -> (1, 1).
    MeanAll(NodeId),
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// A define-by-run expression graph. Forward values are computed eagerly as
/// nodes are appended; [`Tape::backward`] runs reverse-mode accumulation
/// from a scalar root. A tape is immutable once built and never mutated by
/// `backward`, so repeated evaluations are bitwise reproducible.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(usize, usize), NodeId>,
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

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.dim(), (1, 1), "scalar() on a non-(1,1) node");
        v[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Registers a parameter leaf. Repeated registrations of the same
    /// `(tag, slot)` return the original node, so every use shares one leaf
    /// and gradients accumulate across uses.
    pub fn param(&mut self, tag: usize, slot: usize, value: &Array2<f64>) -> NodeId {
        if let Some(&id) = self.params.get(&(tag, slot)) {
            return id;
        }
        let id = self.push(Op::Param, value.clone());
        self.params.insert((tag, slot), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimension");
        let value = va.dot(vb);
        self.push(Op::MatMul(a, b), value)
    }

    pub fn add_row(&mut self, x: NodeId, r: NodeId) -> NodeId {
        let vx = self.value(x);
        let vr = self.value(r);
        assert_eq!(vr.nrows(), 1, "add_row expects a (1, n) row");
        assert_eq!(vx.ncols(), vr.ncols(), "add_row width");
        let value = vx + vr;
        self.push(Op::AddRow(x, r), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let value = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape");
        let value = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape");
        let value = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a) * c;
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a) + c;
        self.push(Op::AddConst(a), value)
    }

    pub fn swish(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(swish);
        self.push(Op::Swish(a), value)
    }

    pub fn swish_grad(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(swish_prime);
        self.push(Op::SwishGrad(a), value)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.nrows(), vb.nrows(), "concat_cols rows");
        let mut value = Array2::zeros((va.nrows(), va.ncols() + vb.ncols()));
        value.slice_mut(s![.., ..va.ncols()]).assign(va);
        value.slice_mut(s![.., va.ncols()..]).assign(vb);
        self.push(Op::ConcatCols(a, b), value)
    }

    pub fn squared_norm_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = Array2::zeros((va.nrows(), 1));
        for (i, row) in va.rows().into_iter().enumerate() {
            value[[i, 0]] = row.iter().map(|v| v * v).sum();
        }
        self.push(Op::SquaredNormRows(a), value)
    }

    pub fn dot_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.dim(), vb.dim(), "dot_rows shape");
        let mut value = Array2::zeros((va.nrows(), 1));
        for i in 0..va.nrows() {
            value[[i, 0]] = va.row(i).dot(&vb.row(i));
        }
        self.push(Op::DotRows(a, b), value)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let n = va.len() as f64;
        let value = Array2::from_elem((1, 1), va.sum() / n);
        self.push(Op::MeanAll(a), value)
    }

    /// Reverse-mode pass from a scalar root. Produces an adjoint for every
    /// leaf reachable from the root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).dim() != (1, 1) {
            return Err(Error::NonScalarRoot);
        }
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            let keep = matches!(
                self.nodes[i].op,
                Op::Constant | Op::Input | Op::Param
            );
            match self.nodes[i].op {
                Op::Constant | Op::Input | Op::Param => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, b, gb);
                }
                Op::AddRow(x, r) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut adj, x, g.clone());
                    accumulate(&mut adj, r, gr);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, a, g.clone());
                    accumulate(&mut adj, b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, a, g.clone());
                    accumulate(&mut adj, b, -&g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut adj, a, &g * c),
                Op::AddConst(a) => accumulate(&mut adj, a, g.clone()),
                Op::Swish(a) => {
                    let d = self.nodes[a.0].value.mapv(swish_prime);
                    accumulate(&mut adj, a, &g * &d);
                }
                Op::SwishGrad(a) => {
                    let d = self.nodes[a.0].value.mapv(swish_double_prime);
                    accumulate(&mut adj, a, &g * &d);
                }
                Op::ConcatCols(a, b) => {
                    let na = self.nodes[a.0].value.ncols();
                    let ga = g.slice(s![.., ..na]).to_owned();
                    let gb = g.slice(s![.., na..]).to_owned();
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, b, gb);
                }
                Op::SquaredNormRows(a) => {
                    let va = &self.nodes[a.0].value;
                    let mut ga = va * 2.0;
                    for (mut row, gi) in ga.rows_mut().into_iter().zip(g.column(0).iter()) {
                        row.mapv_inplace(|v| v * gi);
                    }
                    accumulate(&mut adj, a, ga);
                }
                Op::DotRows(a, b) => {
                    let mut ga = self.nodes[b.0].value.clone();
                    let mut gb = self.nodes[a.0].value.clone();
                    for ((mut ra, mut rb), gi) in ga
                        .rows_mut()
                        .into_iter()
                        .zip(gb.rows_mut())
                        .zip(g.column(0).iter())
                    {
                        ra.mapv_inplace(|v| v * gi);
                        rb.mapv_inplace(|v| v * gi);
                    }
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, b, gb);
                }
                Op::MeanAll(a) => {
                    let va = &self.nodes[a.0].value;
                    let c = g[[0, 0]] / va.len() as f64;
                    accumulate(&mut adj, a, Array2::from_elem(va.dim(), c));
                }
            }
            if keep {
                adj[i] = Some(g);
            }
        }

        Ok(Gradients { adj })
    }

    /// Parameter leaves registered on this tape, in (tag, slot) order.
    pub fn param_leaves(&self) -> Vec<((usize, usize), NodeId)> {
        let mut v: Vec<_> = self.params.iter().map(|(&k, &id)| (k, id)).collect();
        v.sort_unstable_by_key(|&(k, _)| k);
        v
    }
}

fn accumulate(adj: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut adj[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints from one backward pass.
pub struct Gradients {
    adj: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.adj[id.0].as_ref()
    }
}
