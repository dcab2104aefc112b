//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] records a computation as a flat list of nodes. Leaves are
//! either `param` (differentiable) or `constant` (data). Calling
//! [`Tape::backward`] on a scalar node runs one reverse sweep and returns
//! the gradient of that scalar with respect to every recorded node, which
//! lets callers inspect gradients at intermediate nodes (e.g. the network
//! output) as well as at parameter leaves.
//!
//! The op set is deliberately small: exactly what an MLP forward pass plus
//! the flow-matching and preference losses need. Each op stores its own
//! vector-Jacobian product in the backward sweep.

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a[m,k] * b[k,n]
    Matmul(NodeId, NodeId),
    /// matrix[m,n] + row[n] broadcast over rows
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    /// elementwise product with a constant tensor (masks, label weights)
    MulConst(NodeId, Tensor),
    Tanh(NodeId),
    Square(NodeId),
    Softplus(NodeId),
    /// [m,n] -> [m], mean over columns
    MeanAxis1(NodeId),
    /// any shape -> [1]
    MeanAll(NodeId),
    SumAll(NodeId),
    /// [t] -> [segments], mean of each half-open index range
    SegMean(NodeId, Vec<(usize, usize)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Numerically stable softplus: `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Matmul(a, b), rg))
    }

    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        let mat = self.value(m);
        let r = self.value(row);
        if mat.shape().len() != 2 || r.shape() != [mat.cols()] {
            return Err(Error::Shape(format!(
                "add_row {:?} + {:?}",
                mat.shape(),
                r.shape()
            )));
        }
        let cols = mat.cols();
        let mut out = mat.clone();
        for i in 0..out.rows() {
            let orow = out.row_mut(i);
            for (o, &b) in orow.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let _ = cols;
        let rg = self.rg(m) || self.rg(row);
        Ok(self.push(out, Op::AddRow(m, row), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn mul_const(&mut self, a: NodeId, weights: Tensor) -> Result<NodeId> {
        let v = self.value(a).zip_map(&weights, |x, w| x * w)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::MulConst(a, weights), rg))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn mean_axis1(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::Shape("mean_axis1 expects rank 2".into()));
        }
        let (m, n) = (t.rows(), t.cols());
        let data: Vec<f64> = (0..m)
            .map(|i| t.row(i).iter().sum::<f64>() / n as f64)
            .collect();
        let v = Tensor::new(vec![m], data)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::MeanAxis1(a), rg))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.mean());
        let rg = self.rg(a);
        self.push(v, Op::MeanAll(a), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn seg_mean(&mut self, a: NodeId, bounds: Vec<(usize, usize)>) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape().len() != 1 {
            return Err(Error::Shape("seg_mean expects rank 1".into()));
        }
        let n = t.len();
        let mut data = Vec::with_capacity(bounds.len());
        for &(s, e) in &bounds {
            if s >= e || e > n {
                return Err(Error::Shape(format!("bad segment range {}..{} of {}", s, e, n)));
            }
            data.push(t.data()[s..e].iter().sum::<f64>() / (e - s) as f64);
        }
        let v = Tensor::new(vec![bounds.len()], data)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::SegMean(a, bounds), rg))
    }

    /// Reverse sweep from a scalar loss node. Fails with
    /// [`Error::EmptyGradient`] if no parameter leaf feeds the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Shape("backward expects a scalar loss".into()));
        }
        if !self.rg(loss) {
            return Err(Error::EmptyGradient);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    // dA = G * B^T, dB = A^T * G
                    let (m, n) = (g.rows(), g.cols());
                    let k = self.nodes[a.0].value.cols();
                    if self.rg(*a) {
                        let bv = &self.nodes[b.0].value;
                        let mut da = self.grad_slot(&mut grads, *a);
                        for i in 0..m {
                            let grow = g.row(i);
                            let darow = da.row_mut(i);
                            for kk in 0..k {
                                let brow = bv.row(kk);
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += grow[j] * brow[j];
                                }
                                darow[kk] += acc;
                            }
                        }
                        grads[a.0] = Some(da);
                    }
                    if self.rg(*b) {
                        let av = &self.nodes[a.0].value;
                        let mut db = self.grad_slot(&mut grads, *b);
                        for kk in 0..k {
                            let dbrow = db.row_mut(kk);
                            for i in 0..m {
                                let aik = av.at(i, kk);
                                let grow = g.row(i);
                                for j in 0..n {
                                    dbrow[j] += aik * grow[j];
                                }
                            }
                        }
                        grads[b.0] = Some(db);
                    }
                }
                Op::AddRow(m_id, r_id) => {
                    if self.rg(*m_id) {
                        let mut dm = self.grad_slot(&mut grads, *m_id);
                        for (d, &gv) in dm.data_mut().iter_mut().zip(g.data()) {
                            *d += gv;
                        }
                        grads[m_id.0] = Some(dm);
                    }
                    if self.rg(*r_id) {
                        let mut dr = self.grad_slot(&mut grads, *r_id);
                        let n = dr.len();
                        for i in 0..g.rows() {
                            let grow = g.row(i);
                            for j in 0..n {
                                dr.data_mut()[j] += grow[j];
                            }
                        }
                        grads[r_id.0] = Some(dr);
                    }
                }
                Op::Add(a, b) => {
                    for id in [a, b] {
                        if self.rg(*id) {
                            let mut d = self.grad_slot(&mut grads, *id);
                            for (dv, &gv) in d.data_mut().iter_mut().zip(g.data()) {
                                *dv += gv;
                            }
                            grads[id.0] = Some(d);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        let mut d = self.grad_slot(&mut grads, *a);
                        for (dv, &gv) in d.data_mut().iter_mut().zip(g.data()) {
                            *dv += gv;
                        }
                        grads[a.0] = Some(d);
                    }
                    if self.rg(*b) {
                        let mut d = self.grad_slot(&mut grads, *b);
                        for (dv, &gv) in d.data_mut().iter_mut().zip(g.data()) {
                            *dv -= gv;
                        }
                        grads[b.0] = Some(d);
                    }
                }
                Op::Scale(a, c) => {
                    if self.rg(*a) {
                        let mut d = self.grad_slot(&mut grads, *a);
                        for (dv, &gv) in d.data_mut().iter_mut().zip(g.data()) {
                            *dv += c * gv;
                        }
                        grads[a.0] = Some(d);
                    }
                }
                Op::MulConst(a, w) => {
                    if self.rg(*a) {
                        let mut d = self.grad_slot(&mut grads, *a);
                        for ((dv, &gv), &wv) in
                            d.data_mut().iter_mut().zip(g.data()).zip(w.data())
                        {
                            *dv += gv * wv;
                        }
                        grads[a.0] = Some(d);
                    }
                }
                Op::Tanh(a) => {
                    if self.rg(*a) {
                        let out = &node.value;
                        let mut d = self.grad_slot(&mut grads, *a);
                        for ((dv, &gv), &y) in
                            d.data_mut().iter_mut().zip(g.data()).zip(out.data())
                        {
                            *dv += gv * (1.0 - y * y);
                        }
                        grads[a.0] = Some(d);
                    }
                }
                Op::Square(a) => {
                    if self.rg(*a) {
                        let x = &self.nodes[a.0].value;
                        let mut d = self.grad_slot(&mut grads, *a);
                        for ((dv, &gv), &xv) in
                            d.data_mut().iter_mut().zip(g.data()).zip(x.data())
                        {
                            *dv += gv * 2.0 * xv;
                        }
                        grads[a.0] = Some(d);
                    }
                }
                Op::Softplus(a) => {
                    if self.rg(*a) {
                        let x = &self.nodes[a.0].value;
                        let mut d = self.grad_slot(&mut grads, *a);
                        for ((dv, &gv), &xv) in
                            d.data_mut().iter_mut().zip(g.data()).zip(x.data())
                        {
                            *dv += gv * sigmoid(xv);
                        }
                        grads[a.0] = Some(d);
                    }
                }
                Op::MeanAxis1(a) => {
                    if self.rg(*a) {
                        let mut d = self.grad_slot(&mut grads, *a);
                        let n = d.cols();
                        for i in 0..d.rows() {
                            let gi = g.data()[i] / n as f64;
                            for dv in d.row_mut(i) {
                                *dv += gi;
                            }
                        }
                        grads[a.0] = Some(d);
                    }
                }
                Op::MeanAll(a) => {
                    if self.rg(*a) {
                        let mut d = self.grad_slot(&mut grads, *a);
                        let gi = g.data()[0] / d.len() as f64;
                        for dv in d.data_mut() {
                            *dv += gi;
                        }
                        grads[a.0] = Some(d);
                    }
                }
                Op::SumAll(a) => {
                    if self.rg(*a) {
                        let mut d = self.grad_slot(&mut grads, *a);
                        let gi = g.data()[0];
                        for dv in d.data_mut() {
                            *dv += gi;
                        }
                        grads[a.0] = Some(d);
                    }
                }
                Op::SegMean(a, bounds) => {
                    if self.rg(*a) {
                        let mut d = self.grad_slot(&mut grads, *a);
                        for (f, &(s, e)) in bounds.iter().enumerate() {
                            let gi = g.data()[f] / (e - s) as f64;
                            for dv in &mut d.data_mut()[s..e] {
                                *dv += gi;
                            }
                        }
                        grads[a.0] = Some(d);
                    }
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Grads { grads })
    }

    fn grad_slot(&self, grads: &mut [Option<Tensor>], id: NodeId) -> Tensor {
        grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape().to_vec()))
    }
}

/// Per-node gradients produced by one backward sweep.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient at `id`, or `None` if the node never received one
    /// (disconnected or non-differentiable).
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}
