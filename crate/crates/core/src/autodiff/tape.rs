use std::borrow::Cow;

use super::array::Array;
use super::kernels;
use crate::error::{Error, Result};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(index: usize) -> Self {
        NodeId(index)
    }
}

/// Primitive that produced a tape node.
#[derive(Clone, Copy, Debug)]
pub enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    Scale(NodeId, f64),
    Concat(NodeId, NodeId),
    Gather { table: NodeId, index: usize },
    Pick { input: NodeId, index: usize },
}

#[derive(Debug)]
pub struct TapeNode<'a> {
    pub op: Op,
    pub value: Cow<'a, Array>,
}

/// The set of primitives a model is written against.
///
/// [`Eager`] evaluates immediately; [`Tape`] evaluates and records for
/// [`backward`]. Both call the same kernels.
pub trait Graph<'a> {
    type Var: Clone;

    /// Borrowed input (parameters, features). Differentiable on a tape.
    fn input(&mut self, value: &'a Array) -> Self::Var;
    fn constant(&mut self, value: Array) -> Self::Var;
    fn value<'s>(&'s self, var: &'s Self::Var) -> &'s Array;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn add_bias(&mut self, a: &Self::Var, bias: &Self::Var) -> Result<Self::Var>;
    fn tanh(&mut self, a: &Self::Var) -> Self::Var;
    fn sigmoid(&mut self, a: &Self::Var) -> Self::Var;
    fn log(&mut self, a: &Self::Var) -> Self::Var;
    fn softmax(&mut self, a: &Self::Var) -> Result<Self::Var>;
    fn sum(&mut self, a: &Self::Var) -> Self::Var;
    fn scale(&mut self, a: &Self::Var, factor: f64) -> Self::Var;
    fn concat(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn gather(&mut self, table: &Self::Var, index: usize) -> Result<Self::Var>;
    fn pick(&mut self, a: &Self::Var, index: usize) -> Result<Self::Var>;

    /// `-ln dist[target]`.
    fn cross_entropy(&mut self, dist: &Self::Var, target: usize) -> Result<Self::Var> {
        let p = self.pick(dist, target)?;
        let lp = self.log(&p);
        Ok(self.scale(&lp, -1.0))
    }
}

/// Immediate evaluation without recording.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<'a> Graph<'a> for Eager {
    type Var = Cow<'a, Array>;

    fn input(&mut self, value: &'a Array) -> Self::Var {
        Cow::Borrowed(value)
    }
    fn constant(&mut self, value: Array) -> Self::Var {
        Cow::Owned(value)
    }
    fn value<'s>(&'s self, var: &'s Self::Var) -> &'s Array {
        var.as_ref()
    }
    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        kernels::matmul(a, b).map(Cow::Owned)
    }
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        kernels::add(a, b).map(Cow::Owned)
    }
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        kernels::sub(a, b).map(Cow::Owned)
    }
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        kernels::mul(a, b).map(Cow::Owned)
    }
    fn add_bias(&mut self, a: &Self::Var, bias: &Self::Var) -> Result<Self::Var> {
        kernels::add_bias(a, bias).map(Cow::Owned)
    }
    fn tanh(&mut self, a: &Self::Var) -> Self::Var {
        Cow::Owned(kernels::tanh(a))
    }
    fn sigmoid(&mut self, a: &Self::Var) -> Self::Var {
        Cow::Owned(kernels::sigmoid(a))
    }
    fn log(&mut self, a: &Self::Var) -> Self::Var {
        Cow::Owned(kernels::log(a))
    }
    fn softmax(&mut self, a: &Self::Var) -> Result<Self::Var> {
        kernels::softmax(a).map(Cow::Owned)
    }
    fn sum(&mut self, a: &Self::Var) -> Self::Var {
        Cow::Owned(kernels::sum(a))
    }
    fn scale(&mut self, a: &Self::Var, factor: f64) -> Self::Var {
        Cow::Owned(kernels::scale(a, factor))
    }
    fn concat(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        kernels::concat(a, b).map(Cow::Owned)
    }
    fn gather(&mut self, table: &Self::Var, index: usize) -> Result<Self::Var> {
        kernels::gather_row(table, index).map(Cow::Owned)
    }
    fn pick(&mut self, a: &Self::Var, index: usize) -> Result<Self::Var> {
        kernels::pick(a, index).map(Cow::Owned)
    }
}

/// Wengert list of recorded operations, in topological order by
/// construction.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<TapeNode<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TapeNode<'a>] {
        &self.nodes
    }

    fn push(&mut self, op: Op, value: Array) -> NodeId {
        self.nodes.push(TapeNode {
            op,
            value: Cow::Owned(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        backward(self, root)
    }
}

impl<'a> Graph<'a> for Tape<'a> {
    type Var = NodeId;

    fn input(&mut self, value: &'a Array) -> NodeId {
        self.nodes.push(TapeNode {
            op: Op::Leaf,
            value: Cow::Borrowed(value),
        });
        NodeId(self.nodes.len() - 1)
    }
    fn constant(&mut self, value: Array) -> NodeId {
        self.push(Op::Leaf, value)
    }
    fn value<'s>(&'s self, var: &'s NodeId) -> &'s Array {
        self.val(*var)
    }
    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = kernels::matmul(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::MatMul(*a, *b), v))
    }
    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = kernels::add(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::Add(*a, *b), v))
    }
    fn sub(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = kernels::sub(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::Sub(*a, *b), v))
    }
    fn mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = kernels::mul(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::Mul(*a, *b), v))
    }
    fn add_bias(&mut self, a: &NodeId, bias: &NodeId) -> Result<NodeId> {
        let v = kernels::add_bias(self.val(*a), self.val(*bias))?;
        Ok(self.push(Op::AddBias(*a, *bias), v))
    }
    fn tanh(&mut self, a: &NodeId) -> NodeId {
        let v = kernels::tanh(self.val(*a));
        self.push(Op::Tanh(*a), v)
    }
    fn sigmoid(&mut self, a: &NodeId) -> NodeId {
        let v = kernels::sigmoid(self.val(*a));
        self.push(Op::Sigmoid(*a), v)
    }
    fn log(&mut self, a: &NodeId) -> NodeId {
        let v = kernels::log(self.val(*a));
        self.push(Op::Log(*a), v)
    }
    fn softmax(&mut self, a: &NodeId) -> Result<NodeId> {
        let v = kernels::softmax(self.val(*a))?;
        Ok(self.push(Op::Softmax(*a), v))
    }
    fn sum(&mut self, a: &NodeId) -> NodeId {
        let v = kernels::sum(self.val(*a));
        self.push(Op::Sum(*a), v)
    }
    fn scale(&mut self, a: &NodeId, factor: f64) -> NodeId {
        let v = kernels::scale(self.val(*a), factor);
        self.push(Op::Scale(*a, factor), v)
    }
    fn concat(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = kernels::concat(self.val(*a), self.val(*b))?;
        Ok(self.push(Op::Concat(*a, *b), v))
    }
    fn gather(&mut self, table: &NodeId, index: usize) -> Result<NodeId> {
        let v = kernels::gather_row(self.val(*table), index)?;
        Ok(self.push(
            Op::Gather {
                table: *table,
                index,
            },
            v,
        ))
    }
    fn pick(&mut self, a: &NodeId, index: usize) -> Result<NodeId> {
        let v = kernels::pick(self.val(*a), index)?;
        Ok(self.push(Op::Pick { input: *a, index }, v))
    }
}

/// Adjoints produced by [`backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Array>>,
}

impl Gradients {
    /// Adjoint of `id`, or `None` if the root does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }

    /// Adjoint of `id`, zero-filled to `shape` when unreached.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Array {
        self.get(id).cloned().unwrap_or_else(|| Array::zeros(shape))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array> {
        self.adjoints.get_mut(id.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Array>, delta: Array) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Reverse-mode sweep. `root` must hold exactly one element.
pub fn backward(tape: &Tape<'_>, root: NodeId) -> Result<Gradients> {
    let nodes = &tape.nodes;
    if root.0 >= nodes.len() {
        return Err(Error::Contract(format!("root {} is not on the tape", root.0)));
    }
    if !nodes[root.0].value.is_scalar() {
        return Err(Error::Contract(format!(
            "backward needs a scalar root, got shape {:?}",
            nodes[root.0].value.shape()
        )));
    }
    let mut adj: Vec<Option<Array>> = (0..nodes.len()).map(|_| None).collect();
    adj[root.0] = Some(Array::filled(nodes[root.0].value.shape(), 1.0));

    for i in (0..=root.0).rev() {
        let node = &nodes[i];
        if matches!(node.op, Op::Leaf) {
            continue;
        }
        let Some(d) = adj[i].take() else { continue };
        let y = node.value.as_ref();
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (tape.val(a), tape.val(b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.rows();
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                let (ad, bd, dd) = (av.data(), bv.data(), d.data());
                for r in 0..m {
                    let drow = &dd[r * n..(r + 1) * n];
                    for kk in 0..k {
                        let brow = &bd[kk * n..(kk + 1) * n];
                        da[r * k + kk] = drow.iter().zip(brow).map(|(x, w)| x * w).sum();
                        let x = ad[r * k + kk];
                        if x != 0.0 {
                            let dst = &mut db[kk * n..(kk + 1) * n];
                            for (o, g) in dst.iter_mut().zip(drow) {
                                *o += x * g;
                            }
                        }
                    }
                }
                accumulate(&mut adj[a.0], Array::new(av.shape().to_vec(), da)?);
                accumulate(&mut adj[b.0], Array::new(bv.shape().to_vec(), db)?);
            }
            Op::Add(a, b) => {
                accumulate(&mut adj[a.0], d.clone());
                accumulate(&mut adj[b.0], d);
            }
            Op::Sub(a, b) => {
                accumulate(&mut adj[b.0], kernels::scale(&d, -1.0));
                accumulate(&mut adj[a.0], d);
            }
            Op::Mul(a, b) => {
                accumulate(&mut adj[a.0], kernels::mul(&d, tape.val(b))?);
                accumulate(&mut adj[b.0], kernels::mul(&d, tape.val(a))?);
            }
            Op::AddBias(a, bias) => {
                let n = d.last_dim();
                let mut db = vec![0.0; n];
                for row in d.data().chunks(n) {
                    for (o, g) in db.iter_mut().zip(row) {
                        *o += g;
                    }
                }
                accumulate(&mut adj[bias.0], Array::vector(db));
                accumulate(&mut adj[a.0], d);
            }
            Op::Tanh(a) => {
                let g = zip_map(&d, y, |g, t| g * (1.0 - t * t));
                accumulate(&mut adj[a.0], g);
            }
            Op::Sigmoid(a) => {
                let g = zip_map(&d, y, |g, s| g * s * (1.0 - s));
                accumulate(&mut adj[a.0], g);
            }
            Op::Log(a) => {
                let g = zip_map(&d, tape.val(a), |g, x| g / x);
                accumulate(&mut adj[a.0], g);
            }
            Op::Softmax(a) => {
                let n = y.last_dim();
                let mut g = vec![0.0; y.len()];
                for ((grow, yrow), drow) in g
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(d.data().chunks(n))
                {
                    let dot: f64 = yrow.iter().zip(drow).map(|(p, q)| p * q).sum();
                    for ((o, p), q) in grow.iter_mut().zip(yrow).zip(drow) {
                        *o = p * (q - dot);
                    }
                }
                accumulate(&mut adj[a.0], Array::new(y.shape().to_vec(), g)?);
            }
            Op::Sum(a) => {
                let av = tape.val(a);
                accumulate(&mut adj[a.0], Array::filled(av.shape(), d.item()?));
            }
            Op::Scale(a, factor) => {
                accumulate(&mut adj[a.0], kernels::scale(&d, factor));
            }
            Op::Concat(a, b) => {
                let na = tape.val(a).len();
                let (da, db) = d.data().split_at(na);
                accumulate(&mut adj[a.0], Array::vector(da.to_vec()));
                accumulate(&mut adj[b.0], Array::vector(db.to_vec()));
            }
            Op::Gather { table, index } => {
                let tv = tape.val(table);
                let cols = tv.shape()[1];
                let mut g = Array::zeros(tv.shape());
                g.data_mut()[index * cols..(index + 1) * cols].copy_from_slice(d.data());
                accumulate(&mut adj[table.0], g);
            }
            Op::Pick { input, index } => {
                let iv = tape.val(input);
                let mut g = Array::zeros(iv.shape());
                g.data_mut()[index] = d.item()?;
                accumulate(&mut adj[input.0], g);
            }
        }
    }
    Ok(Gradients { adjoints: adj })
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape().to_vec(), data).expect("same shape by construction")
}
