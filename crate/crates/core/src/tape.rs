//! Reverse-mode autodiff on a Wengert tape.
//!
//! A forward pass appends op records to the tape; `backward` replays them in
//! reverse, accumulating gradients into a parallel arena. Any node's gradient
//! can be read afterwards, which is what the probe machinery uses to capture
//! error signals at residual/norm boundaries.
//!
//! Composite functions (layer norm in particular) are built from the scalar
//! primitives below, so their backward pass is the mechanical differentiation
//! of the forward definition, not a hand-derived formula. Hand-derived forms
//! live in tests as cross-check oracles.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    inverse_perm, mm_acc, mm_layout, mm_nt_acc, mm_tn_acc, permute_acc, softmax_row, Tensor,
};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    RowMean(NodeId),
    BroadcastLast(NodeId, usize),
    Sqrt(NodeId),
    /// x + b where b's shape is a suffix of x's shape, tiled over the rest.
    AddBroadcast(NodeId, NodeId),
    /// x * g with the same suffix broadcast.
    MulBroadcast(NodeId, NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Reshape(NodeId),
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    SumAll(NodeId),
    /// Row range of a 2-D tensor.
    SliceRows {
        x: NodeId,
        start: usize,
    },
    /// Mask entries are 0 or 1/keep; sampled at record time.
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    /// Mean over non-pad positions of the label-smoothed negative
    /// log-likelihood. Softmax probabilities are saved for the backward pass.
    SmoothedCrossEntropy {
        logits: NodeId,
        gold: Vec<usize>,
        pad: Vec<bool>,
        smoothing: f64,
        probs: Vec<f64>,
        n_tokens: usize,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    mode: Mode,
    rng: Rng,
}

impl Tape {
    pub fn new(mode: Mode, rng: Rng) -> Tape {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode,
            rng,
        }
    }

    pub fn eval() -> Tape {
        Tape::new(Mode::Eval, Rng::new(0))
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        Tensor {
            shape: self.nodes[id].shape.clone(),
            data: self.nodes[id].data.clone(),
        }
    }

    /// Gradient accumulated at a node by the last `backward`, if the node was
    /// on a path from the loss.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Constant input: no gradient tracked into it.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape, t.data, false)
    }

    /// Differentiable input (parameters, probe inputs).
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape, t.data, true)
    }

    fn binary_same_shape(
        &mut self,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(Vec<usize>, bool)> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::ShapeMismatch {
                op: opname,
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        Ok((self.nodes[a].shape.clone(), self.needs(a) || self.needs(b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, ng) = self.binary_same_shape("add", a, b)?;
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), shape, data, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, ng) = self.binary_same_shape("sub", a, b)?;
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Op::Sub(a, b), shape, data, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, ng) = self.binary_same_shape("mul", a, b)?;
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Mul(a, b), shape, data, ng))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, ng) = self.binary_same_shape("div", a, b)?;
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x / y)
            .collect();
        Ok(self.push(Op::Div(a, b), shape, data, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        let ng = self.needs(a);
        let data = self.nodes[a].data.iter().map(|x| x * c).collect();
        self.push(Op::Scale(a, c), shape, data, ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        let ng = self.needs(a);
        let data = self.nodes[a].data.iter().map(|x| x + c).collect();
        self.push(Op::AddScalar(a), shape, data, ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let lay = mm_layout("matmul", &self.nodes[a].shape, &self.nodes[b].shape, false)?;
        let mut data = vec![0.0; lay.lead * lay.m * lay.n];
        for l in 0..lay.lead {
            mm_acc(
                &self.nodes[a].data[l * lay.a_step..l * lay.a_step + lay.m * lay.k],
                &self.nodes[b].data[l * lay.b_step..l * lay.b_step + lay.k * lay.n],
                &mut data[l * lay.m * lay.n..(l + 1) * lay.m * lay.n],
                lay.m,
                lay.k,
                lay.n,
            );
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), lay.out_shape, data, ng))
    }

    /// a . b^T on trailing axes, b is [l.., n, k].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let lay = mm_layout(
            "matmul_nt",
            &self.nodes[a].shape,
            &self.nodes[b].shape,
            true,
        )?;
        let mut data = vec![0.0; lay.lead * lay.m * lay.n];
        for l in 0..lay.lead {
            mm_nt_acc(
                &self.nodes[a].data[l * lay.a_step..l * lay.a_step + lay.m * lay.k],
                &self.nodes[b].data[l * lay.b_step..l * lay.b_step + lay.n * lay.k],
                &mut data[l * lay.m * lay.n..(l + 1) * lay.m * lay.n],
                lay.m,
                lay.k,
                lay.n,
            );
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMulNT(a, b), lay.out_shape, data, ng))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        let ng = self.needs(a);
        let data = self.nodes[a].data.iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu(a), shape, data, ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        let ng = self.needs(a);
        let data = self.nodes[a]
            .data
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(Op::Sigmoid(a), shape, data, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a].shape.clone();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Contract("softmax needs at least one axis".into()))?;
        let ng = self.needs(a);
        let mut data = self.nodes[a].data.clone();
        for row in data.chunks_mut(d) {
            softmax_row(row);
        }
        Ok(self.push(Op::Softmax(a), shape, data, ng))
    }

    /// Mean over the last axis: [l.., d] -> [l..].
    pub fn row_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a].shape.clone();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Contract("row_mean needs at least one axis".into()))?;
        let out_shape = shape[..shape.len() - 1].to_vec();
        let ng = self.needs(a);
        let data = self.nodes[a]
            .data
            .chunks(d)
            .map(|row| row.iter().sum::<f64>() / d as f64)
            .collect();
        Ok(self.push(Op::RowMean(a), out_shape, data, ng))
    }

    /// Repeat each scalar d times along a new trailing axis: [l..] -> [l.., d].
    pub fn broadcast_last(&mut self, a: NodeId, d: usize) -> NodeId {
        let mut out_shape = self.nodes[a].shape.clone();
        out_shape.push(d);
        let ng = self.needs(a);
        let mut data = Vec::with_capacity(self.nodes[a].data.len() * d);
        for &v in &self.nodes[a].data {
            data.extend(std::iter::repeat(v).take(d));
        }
        self.push(Op::BroadcastLast(a, d), out_shape, data, ng)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        let ng = self.needs(a);
        let data = self.nodes[a].data.iter().map(|x| x.sqrt()).collect();
        self.push(Op::Sqrt(a), shape, data, ng)
    }

    fn suffix_check(&self, opname: &'static str, x: NodeId, b: NodeId) -> Result<()> {
        let xs = &self.nodes[x].shape;
        let bs = &self.nodes[b].shape;
        if bs.len() > xs.len() || &xs[xs.len() - bs.len()..] != bs.as_slice() {
            return Err(Error::ShapeMismatch {
                op: opname,
                lhs: xs.clone(),
                rhs: bs.clone(),
            });
        }
        Ok(())
    }

    /// x + b with b tiled over x's leading axes.
    pub fn add_broadcast(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.suffix_check("add_broadcast", x, b)?;
        let shape = self.nodes[x].shape.clone();
        let ng = self.needs(x) || self.needs(b);
        let bn = self.nodes[b].data.len();
        let data = self.nodes[x]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + self.nodes[b].data[i % bn])
            .collect();
        Ok(self.push(Op::AddBroadcast(x, b), shape, data, ng))
    }

    /// x * g with g tiled over x's leading axes.
    pub fn mul_broadcast(&mut self, x: NodeId, g: NodeId) -> Result<NodeId> {
        self.suffix_check("mul_broadcast", x, g)?;
        let shape = self.nodes[x].shape.clone();
        let ng = self.needs(x) || self.needs(g);
        let gn = self.nodes[g].data.len();
        let data = self.nodes[x]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.nodes[g].data[i % gn])
            .collect();
        Ok(self.push(Op::MulBroadcast(x, g), shape, data, ng))
    }

    /// Row lookup into a [rows, d] table; backward scatter-adds.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let ts = &self.nodes[table].shape;
        if ts.len() != 2 {
            return Err(Error::Contract(format!(
                "gather table must be 2-D, got {:?}",
                ts
            )));
        }
        let (rows, d) = (ts[0], ts[1]);
        for &id in ids {
            if id >= rows {
                return Err(Error::Contract(format!(
                    "gather id {id} out of range for table with {rows} rows"
                )));
            }
        }
        let ng = self.needs(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&self.nodes[table].data[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), d],
            data,
            ng,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.nodes[a].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a].shape.clone(),
                rhs: shape,
            });
        }
        let ng = self.needs(a);
        let data = self.nodes[a].data.clone();
        Ok(self.push(Op::Reshape(a), shape, data, ng))
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let shape = &self.nodes[a].shape;
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Contract(format!(
                "invalid permutation {:?} for shape {:?}",
                perm, shape
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut data = vec![0.0; self.nodes[a].data.len()];
        permute_acc(&self.nodes[a].data, shape, perm, &mut data);
        let ng = self.needs(a);
        Ok(self.push(
            Op::Permute {
                x: a,
                perm: perm.to_vec(),
            },
            out_shape,
            data,
            ng,
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let ng = self.needs(a);
        let s = self.nodes[a].data.iter().sum();
        self.push(Op::SumAll(a), vec![], vec![s], ng)
    }

    /// Rows start..start+len of a 2-D tensor.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let shape = &self.nodes[a].shape;
        if shape.len() != 2 || start + len > shape[0] {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of range for shape {:?}",
                start + len,
                shape
            )));
        }
        let d = shape[1];
        let ng = self.needs(a);
        let data = self.nodes[a].data[start * d..(start + len) * d].to_vec();
        Ok(self.push(Op::SliceRows { x: a, start }, vec![len, d], data, ng))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidParameter(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.nodes[x].data.len())
            .map(|_| {
                if self.rng.next_f64() < rate {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let shape = self.nodes[x].shape.clone();
        let ng = self.needs(x);
        let data = self.nodes[x]
            .data
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        Ok(self.push(Op::Dropout { x, mask }, shape, data, ng))
    }

    /// Label-smoothed cross entropy averaged over non-pad positions.
    ///
    /// The smoothed target puts 1 - smoothing on the gold id and spreads
    /// smoothing / (V - 1) over the other ids. Loss rows flagged as pad
    /// contribute nothing, forward or backward.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: NodeId,
        gold: &[usize],
        pad: &[bool],
        smoothing: f64,
    ) -> Result<NodeId> {
        let shape = self.nodes[logits].shape.clone();
        let v = *shape
            .last()
            .ok_or_else(|| Error::Contract("cross entropy needs a vocab axis".into()))?;
        let positions = self.nodes[logits].data.len() / v;
        if gold.len() != positions || pad.len() != positions {
            return Err(Error::Contract(format!(
                "cross entropy got {} logit rows but {} gold / {} pad entries",
                positions,
                gold.len(),
                pad.len()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidParameter(format!(
                "label smoothing must be in [0, 1), got {smoothing}"
            )));
        }
        if smoothing > 0.0 && v < 2 {
            return Err(Error::InvalidParameter(
                "label smoothing needs vocab size of at least 2".into(),
            ));
        }
        let n_tokens = pad.iter().filter(|p| !**p).count();
        if n_tokens == 0 {
            return Err(Error::Contract(
                "cross entropy over a batch with no non-pad tokens".into(),
            ));
        }
        let off_mass = if v > 1 {
            smoothing / (v as f64 - 1.0)
        } else {
            0.0
        };
        let on_mass = 1.0 - smoothing;
        let mut probs = vec![0.0; self.nodes[logits].data.len()];
        let mut loss = 0.0;
        for t in 0..positions {
            if pad[t] {
                continue;
            }
            if gold[t] >= v {
                return Err(Error::Contract(format!(
                    "gold id {} out of vocab {v}",
                    gold[t]
                )));
            }
            let row = &self.nodes[logits].data[t * v..(t + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &x in row {
                sum += (x - max).exp();
            }
            let lse = max + sum.ln();
            let p_row = &mut probs[t * v..(t + 1) * v];
            let mut logp_sum = 0.0;
            for (i, &x) in row.iter().enumerate() {
                p_row[i] = (x - lse).exp();
                logp_sum += x - lse;
            }
            let logp_gold = row[gold[t]] - lse;
            loss -= on_mass * logp_gold + off_mass * (logp_sum - logp_gold);
        }
        loss /= n_tokens as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Op::SmoothedCrossEntropy {
                logits,
                gold: gold.to_vec(),
                pad: pad.to_vec(),
                smoothing,
                probs,
                n_tokens,
            },
            vec![],
            vec![loss],
            ng,
        ))
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.backward_seeded(loss, 1.0)
    }

    /// Backward from a scalar node with an explicit upstream seed.
    pub fn backward_seeded(&mut self, loss: NodeId, seed: f64) -> Result<()> {
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss] = Some(vec![seed]);
        for id in (0..=loss).rev() {
            let g = match self.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            step_back(&self.nodes, &mut self.grads, id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }
}

/// Zero-initialized gradient buffer for a node, allocated on first touch.
fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> &'a mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()])
}

fn step_back(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    let needs = |i: NodeId| nodes[i].needs_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            if needs(a) {
                for (ga, gv) in buf(grads, nodes, a).iter_mut().zip(g) {
                    *ga += gv;
                }
            }
            if needs(b) {
                for (gb, gv) in buf(grads, nodes, b).iter_mut().zip(g) {
                    *gb += gv;
                }
            }
        }
        &Op::Sub(a, b) => {
            if needs(a) {
                for (ga, gv) in buf(grads, nodes, a).iter_mut().zip(g) {
                    *ga += gv;
                }
            }
            if needs(b) {
                for (gb, gv) in buf(grads, nodes, b).iter_mut().zip(g) {
                    *gb -= gv;
                }
            }
        }
        &Op::Mul(a, b) => {
            if needs(a) {
                let bv = &nodes[b].data;
                for ((ga, gv), b_) in buf(grads, nodes, a).iter_mut().zip(g).zip(bv) {
                    *ga += gv * b_;
                }
            }
            if needs(b) {
                let av = &nodes[a].data;
                for ((gb, gv), a_) in buf(grads, nodes, b).iter_mut().zip(g).zip(av) {
                    *gb += gv * a_;
                }
            }
        }
        &Op::Div(a, b) => {
            if needs(a) {
                let bv = &nodes[b].data;
                for ((ga, gv), b_) in buf(grads, nodes, a).iter_mut().zip(g).zip(bv) {
                    *ga += gv / b_;
                }
            }
            if needs(b) {
                let out = &nodes[id].data;
                let bv = &nodes[b].data;
                let gb = buf(grads, nodes, b);
                for i in 0..g.len() {
                    gb[i] -= g[i] * out[i] / bv[i];
                }
            }
        }
        &Op::Scale(a, c) => {
            if needs(a) {
                for (ga, gv) in buf(grads, nodes, a).iter_mut().zip(g) {
                    *ga += gv * c;
                }
            }
        }
        &Op::AddScalar(a) => {
            if needs(a) {
                for (ga, gv) in buf(grads, nodes, a).iter_mut().zip(g) {
                    *ga += gv;
                }
            }
        }
        &Op::MatMul(a, b) => {
            let lay = mm_layout("matmul", &nodes[a].shape, &nodes[b].shape, false)
                .expect("shapes validated at record time");
            if needs(a) {
                let bdata = &nodes[b].data;
                let ga = buf(grads, nodes, a);
                for l in 0..lay.lead {
                    mm_nt_acc(
                        &g[l * lay.m * lay.n..(l + 1) * lay.m * lay.n],
                        &bdata[l * lay.b_step..l * lay.b_step + lay.k * lay.n],
                        &mut ga[l * lay.a_step..l * lay.a_step + lay.m * lay.k],
                        lay.m,
                        lay.n,
                        lay.k,
                    );
                }
            }
            if needs(b) {
                let adata = &nodes[a].data;
                let gb = buf(grads, nodes, b);
                for l in 0..lay.lead {
                    mm_tn_acc(
                        &adata[l * lay.a_step..l * lay.a_step + lay.m * lay.k],
                        &g[l * lay.m * lay.n..(l + 1) * lay.m * lay.n],
                        &mut gb[l * lay.b_step..l * lay.b_step + lay.k * lay.n],
                        lay.m,
                        lay.k,
                        lay.n,
                    );
                }
            }
        }
        &Op::MatMulNT(a, b) => {
            let lay = mm_layout("matmul_nt", &nodes[a].shape, &nodes[b].shape, true)
                .expect("shapes validated at record time");
            if needs(a) {
                let bdata = &nodes[b].data;
                let ga = buf(grads, nodes, a);
                for l in 0..lay.lead {
                    mm_acc(
                        &g[l * lay.m * lay.n..(l + 1) * lay.m * lay.n],
                        &bdata[l * lay.b_step..l * lay.b_step + lay.n * lay.k],
                        &mut ga[l * lay.a_step..l * lay.a_step + lay.m * lay.k],
                        lay.m,
                        lay.n,
                        lay.k,
                    );
                }
            }
            if needs(b) {
                let adata = &nodes[a].data;
                let gb = buf(grads, nodes, b);
                for l in 0..lay.lead {
                    mm_tn_acc(
                        &g[l * lay.m * lay.n..(l + 1) * lay.m * lay.n],
                        &adata[l * lay.a_step..l * lay.a_step + lay.m * lay.k],
                        &mut gb[l * lay.b_step..l * lay.b_step + lay.n * lay.k],
                        lay.m,
                        lay.n,
                        lay.k,
                    );
                }
            }
        }
        &Op::Relu(a) => {
            if needs(a) {
                let xs = &nodes[a].data;
                let ga = buf(grads, nodes, a);
                for i in 0..g.len() {
                    if xs[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
        }
        &Op::Sigmoid(a) => {
            if needs(a) {
                let ys = &nodes[id].data;
                let ga = buf(grads, nodes, a);
                for i in 0..g.len() {
                    ga[i] += g[i] * ys[i] * (1.0 - ys[i]);
                }
            }
        }
        &Op::Softmax(a) => {
            if needs(a) {
                let d = *nodes[id].shape.last().unwrap();
                let ys = &nodes[id].data;
                let ga = buf(grads, nodes, a);
                for (r, (y_row, g_row)) in ys.chunks(d).zip(g.chunks(d)).enumerate() {
                    let dot: f64 = y_row.iter().zip(g_row).map(|(y, gv)| y * gv).sum();
                    let ga_row = &mut ga[r * d..(r + 1) * d];
                    for i in 0..d {
                        ga_row[i] += y_row[i] * (g_row[i] - dot);
                    }
                }
            }
        }
        &Op::RowMean(a) => {
            if needs(a) {
                let d = *nodes[a].shape.last().unwrap();
                let inv = 1.0 / d as f64;
                let ga = buf(grads, nodes, a);
                for (r, gv) in g.iter().enumerate() {
                    for x in &mut ga[r * d..(r + 1) * d] {
                        *x += gv * inv;
                    }
                }
            }
        }
        &Op::BroadcastLast(a, d) => {
            if needs(a) {
                let ga = buf(grads, nodes, a);
                for (r, chunk) in g.chunks(d).enumerate() {
                    ga[r] += chunk.iter().sum::<f64>();
                }
            }
        }
        &Op::Sqrt(a) => {
            if needs(a) {
                let ys = &nodes[id].data;
                let ga = buf(grads, nodes, a);
                for i in 0..g.len() {
                    ga[i] += g[i] / (2.0 * ys[i]);
                }
            }
        }
        &Op::AddBroadcast(x, b) => {
            if needs(x) {
                for (gx, gv) in buf(grads, nodes, x).iter_mut().zip(g) {
                    *gx += gv;
                }
            }
            if needs(b) {
                let bn = nodes[b].data.len();
                let gb = buf(grads, nodes, b);
                for (i, gv) in g.iter().enumerate() {
                    gb[i % bn] += gv;
                }
            }
        }
        &Op::MulBroadcast(x, bg) => {
            let bn = nodes[bg].data.len();
            if needs(x) {
                let gain = &nodes[bg].data;
                let gx = buf(grads, nodes, x);
                for (i, gv) in g.iter().enumerate() {
                    gx[i] += gv * gain[i % bn];
                }
            }
            if needs(bg) {
                let xs = &nodes[x].data;
                let gb = buf(grads, nodes, bg);
                for (i, gv) in g.iter().enumerate() {
                    gb[i % bn] += gv * xs[i];
                }
            }
        }
        Op::Gather { table, ids } => {
            let table = *table;
            if needs(table) {
                let d = nodes[table].shape[1];
                let gt = buf(grads, nodes, table);
                for (row, &id_) in ids.iter().enumerate() {
                    let src = &g[row * d..(row + 1) * d];
                    for (t, s) in gt[id_ * d..(id_ + 1) * d].iter_mut().zip(src) {
                        *t += s;
                    }
                }
            }
        }
        &Op::Reshape(a) => {
            if needs(a) {
                for (ga, gv) in buf(grads, nodes, a).iter_mut().zip(g) {
                    *ga += gv;
                }
            }
        }
        Op::Permute { x, perm } => {
            let x = *x;
            if needs(x) {
                let out_shape = &nodes[id].shape;
                let inv = inverse_perm(perm);
                let gx = buf(grads, nodes, x);
                permute_acc(g, out_shape, &inv, gx);
            }
        }
        &Op::SumAll(a) => {
            if needs(a) {
                let gv = g[0];
                for ga in buf(grads, nodes, a).iter_mut() {
                    *ga += gv;
                }
            }
        }
        &Op::SliceRows { x, start } => {
            if needs(x) {
                let d = nodes[x].shape[1];
                let gx = buf(grads, nodes, x);
                for (gxv, gv) in gx[start * d..start * d + g.len()].iter_mut().zip(g) {
                    *gxv += gv;
                }
            }
        }
        Op::Dropout { x, mask } => {
            let x = *x;
            if needs(x) {
                let gx = buf(grads, nodes, x);
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
        }
        Op::SmoothedCrossEntropy {
            logits,
            gold,
            pad,
            smoothing,
            probs,
            n_tokens,
        } => {
            let logits = *logits;
            if needs(logits) {
                let v = *nodes[logits].shape.last().unwrap();
                let off_mass = if v > 1 {
                    smoothing / (v as f64 - 1.0)
                } else {
                    0.0
                };
                let on_mass = 1.0 - smoothing;
                let scale = g[0] / *n_tokens as f64;
                let gl = buf(grads, nodes, logits);
                for t in 0..gold.len() {
                    if pad[t] {
                        continue;
                    }
                    let p_row = &probs[t * v..(t + 1) * v];
                    let g_row = &mut gl[t * v..(t + 1) * v];
                    for i in 0..v {
                        let q = if i == gold[t] { on_mass } else { off_mass };
                        g_row[i] += scale * (p_row[i] - q);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_of_matmul_is_outer_structure() {
        // loss = sum(W x): dL/dW[i][j] = x[j]
        let mut tape = Tape::eval();
        let w = tape.param(t(&[2, 2], &[0.3, -0.7, 1.5, 0.2]));
        let x = tape.constant(t(&[2, 1], &[2.0, 5.0]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 5.0, 2.0, 5.0]);
    }

    #[test]
    fn identity_chain_passes_gradient_through() {
        let mut tape = Tape::eval();
        let x = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let r = tape.relu(x);
        let rs = tape.reshape(r, vec![3, 2]).unwrap();
        let loss = tape.sum_all(rs);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::eval();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_is_linear_in_seed() {
        let mut tape = Tape::eval();
        let x = tape.param(t(&[2, 2], &[0.4, -1.2, 2.0, 0.1]));
        let w = tape.param(t(&[2, 2], &[1.0, 0.5, -0.5, 0.3]));
        let h = tape.matmul(x, w).unwrap();
        let s = tape.softmax(h).unwrap();
        let loss = tape.sum_all(s);
        tape.backward_seeded(loss, 1.0).unwrap();
        let g1: Vec<f64> = tape.grad(w).unwrap().to_vec();
        tape.backward_seeded(loss, 2.0).unwrap();
        let g2: Vec<f64> = tape.grad(w).unwrap().to_vec();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::eval();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::eval();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn matmul_shared_weight_accumulates_over_batch() {
        // two batch elements through the same weight; dW is the sum of both
        let mut tape = Tape::eval();
        let x = tape.constant(t(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]));
        let w = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(x, w).unwrap();
        assert_eq!(tape.shape(y), &[2, 1, 2]);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        // row selectors [1,0] and [0,1]: dW = [[1,1],[1,1]]
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn gather_scatter_adds_repeated_rows() {
        let mut tape = Tape::eval();
        let table = tape.param(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let out = tape.gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.data(out), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn dropout_eval_identity_and_rate_zero_identity() {
        let mut tape = Tape::eval();
        let x = tape.param(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(tape.dropout(x, 0.5).unwrap(), x);

        let mut train = Tape::new(Mode::Train, Rng::new(1));
        let x2 = train.param(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(train.dropout(x2, 0.0).unwrap(), x2);
        assert!(train.dropout(x2, 1.0).is_err());
    }

    #[test]
    fn dropout_mask_preserves_mean_and_scales_kept() {
        let mut total = 0.0;
        let n = 20_000;
        let rate = 0.3;
        let mut tape = Tape::new(Mode::Train, Rng::new(77));
        let x = tape.param(t(&[n], &vec![1.0; n]));
        let y = tape.dropout(x, rate).unwrap();
        for &v in tape.data(y) {
            assert!(v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12);
            total += v;
        }
        let mean = total / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn smoothed_ce_uniform_logits_is_log_vocab() {
        let v = 16;
        let mut tape = Tape::eval();
        let logits = tape.param(Tensor::zeros(vec![3, v]));
        let loss = tape
            .smoothed_cross_entropy(logits, &[1, 5, 9], &[false; 3], 0.1)
            .unwrap();
        let expect = (v as f64).ln();
        assert!((tape.data(loss)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn smoothed_ce_pads_are_ignored() {
        let v = 8;
        let mut tape = Tape::eval();
        let mut data = vec![0.0; 2 * v];
        data[0] = 3.0; // only first row matters
        let logits = tape.param(t(&[2, v], &data));
        let loss1 = tape
            .smoothed_cross_entropy(logits, &[0, 3], &[false, true], 0.1)
            .unwrap();
        let mut tape2 = Tape::eval();
        let logits2 = tape2.param(t(&[1, v], &data[..v].to_vec()));
        let loss2 = tape2
            .smoothed_cross_entropy(logits2, &[0], &[false], 0.1)
            .unwrap();
        assert_eq!(tape.data(loss1)[0], tape2.data(loss2)[0]);
        tape.backward(loss1).unwrap();
        let gl = tape.grad(logits).unwrap();
        assert!(gl[v..].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn smoothed_ce_rejects_empty_batch() {
        let mut tape = Tape::eval();
        let logits = tape.param(Tensor::zeros(vec![2, 4]));
        let err = tape.smoothed_cross_entropy(logits, &[0, 1], &[true, true], 0.1);
        assert!(err.is_err());
    }

    #[test]
    fn slice_rows_grad_lands_in_range() {
        let mut tape = Tape::eval();
        let x = tape.param(t(&[4, 2], &[1.0; 8]));
        let s = tape.slice_rows(x, 1, 2).unwrap();
        assert_eq!(tape.shape(s), &[2, 2]);
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        assert_eq!(
            tape.grad(x).unwrap(),
            &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn broadcast_ops_reduce_correctly() {
        let mut tape = Tape::eval();
        let x = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.param(t(&[3], &[10.0, 20.0, 30.0]));
        let y = tape.add_broadcast(x, b).unwrap();
        assert_eq!(tape.data(y), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0, 2.0]);

        let mut tape2 = Tape::eval();
        let x2 = tape2.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let g2 = tape2.param(t(&[2], &[2.0, 0.5]));
        let y2 = tape2.mul_broadcast(x2, g2).unwrap();
        assert_eq!(tape2.data(y2), &[2.0, 1.0, 6.0, 2.0]);
        let loss2 = tape2.sum_all(y2);
        tape2.backward(loss2).unwrap();
        assert_eq!(tape2.grad(g2).unwrap(), &[4.0, 6.0]);
        assert_eq!(tape2.grad(x2).unwrap(), &[2.0, 0.5, 2.0, 0.5]);
    }

    #[test]
    fn permute_grad_roundtrips() {
        let mut tape = Tape::eval();
        let x = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.shape(p), &[3, 2]);
        assert_eq!(tape.data(p), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let w = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.mul(p, w).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
    }
}
