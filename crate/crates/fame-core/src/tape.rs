//! Reverse-mode automatic differentiation over [`Tensor2`] values.
//!
//! Operations append nodes to a [`Tape`]; [`Tape::backward`] walks the tape in
//! reverse and accumulates exact gradients for every node. Only the operations
//! the fusion model composes are provided.

use rand::rngs::StdRng;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{sigmoid_scalar, softplus, Tensor2};

pub type NodeId = usize;

/// Per-task positive/negative class weights for the weighted BCE loss.
#[derive(Clone, Debug)]
pub struct ClassWeights {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(tasks: usize) -> Self {
        ClassWeights { pos: vec![1.0; tasks], neg: vec![1.0; tasks] }
    }
}

/// Row indices grouped by subgroup, one inner list per observed subgroup,
/// one outer list per sensitive attribute.
pub type SubgroupRows = Vec<Vec<Vec<usize>>>;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    /// Mask entries are 0 or 1/(1-rate); identity masks are never recorded.
    Dropout { input: NodeId, mask: Vec<f64> },
    Add(NodeId, NodeId),
    /// Broadcast a 1 x D bias over the rows of an N x D input.
    AddBias { input: NodeId, bias: NodeId },
    Scale { input: NodeId, factor: f64 },
    /// Hadamard product of a 1 x D gate against every row of an N x D input.
    GateRows { gate: NodeId, input: NodeId },
    ConcatCols(Vec<NodeId>),
    MeanAll(NodeId),
    WeightedBce { logits: NodeId, targets: Tensor2, weights: ClassWeights },
    SoftEddi { probs: NodeId, targets: Tensor2, groups: SubgroupRows },
}

struct Node {
    value: Tensor2,
    op: Op,
}

/// Append-only computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id].value
    }

    /// Value of a 1 x 1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.shape(), (1, 1));
        self.nodes[id].value.get(0, 0)
    }

    fn push(&mut self, value: Tensor2, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor2) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(sigmoid_scalar);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by 1/(1-rate); evaluation
    /// mode is the identity.
    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        training: bool,
        rng: &mut StdRng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            let value = self.nodes[x].value.clone();
            return Ok(self.push(value, Op::Scale { input: x, factor: 1.0 }));
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.nodes[x].value.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let src = &self.nodes[x].value;
        let data: Vec<f64> = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor2::from_vec(src.rows(), src.cols(), data)?;
        Ok(self.push(value, Op::Dropout { input: x, mask }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if !ta.same_shape(tb) {
            return Err(Error::shape(format!(
                "add: {}x{} vs {}x{}",
                ta.rows(),
                ta.cols(),
                tb.rows(),
                tb.cols()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor2::from_vec(ta.rows(), ta.cols(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (&self.nodes[x].value, &self.nodes[bias].value);
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(Error::shape(format!(
                "add_bias: bias {}x{} does not broadcast over {}x{}",
                tb.rows(),
                tb.cols(),
                tx.rows(),
                tx.cols()
            )));
        }
        let mut value = tx.clone();
        for r in 0..value.rows() {
            for c in 0..value.cols() {
                let v = value.get(r, c) + tb.get(0, c);
                value.set(r, c, v);
            }
        }
        Ok(self.push(value, Op::AddBias { input: x, bias }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = self.nodes[x].value.map(|v| v * factor);
        self.push(value, Op::Scale { input: x, factor })
    }

    /// Elementwise scaling of every row of `x` by a 1 x D gate; both factors
    /// receive gradients.
    pub fn gate_rows(&mut self, gate: NodeId, x: NodeId) -> Result<NodeId> {
        let (tg, tx) = (&self.nodes[gate].value, &self.nodes[x].value);
        if tg.rows() != 1 || tg.cols() != tx.cols() {
            return Err(Error::shape(format!(
                "elementwise scale: gate {}x{} incompatible with input {}x{}",
                tg.rows(),
                tg.cols(),
                tx.rows(),
                tx.cols()
            )));
        }
        let mut value = tx.clone();
        for r in 0..value.rows() {
            for c in 0..value.cols() {
                let v = value.get(r, c) * tg.get(0, c);
                value.set(r, c, v);
            }
        }
        Ok(self.push(value, Op::GateRows { gate, input: x }))
    }

    /// Column-wise concatenation; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero parts".to_string()));
        }
        let rows = self.nodes[parts[0]].value.rows();
        let mut cols = 0;
        for &p in parts {
            let t = &self.nodes[p].value;
            if t.rows() != rows {
                return Err(Error::shape(format!(
                    "concat: row mismatch {} vs {}",
                    rows,
                    t.rows()
                )));
            }
            cols += t.cols();
        }
        let mut value = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let t = &self.nodes[p].value;
                let w = t.cols();
                value.data_mut()[r * cols + offset..r * cols + offset + w]
                    .copy_from_slice(t.row(r));
                offset += w;
            }
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Mean over all elements, producing a 1 x 1 node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x].value;
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor2::from_vec(1, 1, vec![mean]).unwrap(), Op::MeanAll(x))
    }

    /// Weighted binary cross-entropy with logits, mean-reduced over samples
    /// and tasks, computed in log-sum-exp form so it stays finite for large
    /// |logit|.
    pub fn weighted_bce(
        &mut self,
        logits: NodeId,
        targets: &Tensor2,
        weights: &ClassWeights,
    ) -> Result<NodeId> {
        let tl = &self.nodes[logits].value;
        if !tl.same_shape(targets) {
            return Err(Error::shape(format!(
                "bce: logits {}x{} vs targets {}x{}",
                tl.rows(),
                tl.cols(),
                targets.rows(),
                targets.cols()
            )));
        }
        if weights.pos.len() != tl.cols() || weights.neg.len() != tl.cols() {
            return Err(Error::shape(format!(
                "bce: {} tasks but {} pos / {} neg weights",
                tl.cols(),
                weights.pos.len(),
                weights.neg.len()
            )));
        }
        let (n, t) = tl.shape();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..t {
                let l = tl.get(i, j);
                let y = targets.get(i, j);
                // -y log s(l) = y softplus(-l); -(1-y) log(1-s(l)) = (1-y) softplus(l)
                total += weights.pos[j] * y * softplus(-l)
                    + weights.neg[j] * (1.0 - y) * softplus(l);
            }
        }
        let mean = total / (n * t) as f64;
        let value = Tensor2::from_vec(1, 1, vec![mean])?;
        Ok(self.push(
            value,
            Op::WeightedBce { logits, targets: targets.clone(), weights: weights.clone() },
        ))
    }

    /// Differentiable disparity surrogate: per-sample soft errors |p - y| are
    /// averaged per subgroup and overall, normalized per subgroup, aggregated
    /// sign-agnostically per attribute, and averaged over attributes and
    /// tasks.
    pub fn soft_eddi(
        &mut self,
        probs: NodeId,
        targets: &Tensor2,
        groups: &SubgroupRows,
    ) -> Result<NodeId> {
        let tp = &self.nodes[probs].value;
        if !tp.same_shape(targets) {
            return Err(Error::shape(format!(
                "soft eddi: probs {}x{} vs targets {}x{}",
                tp.rows(),
                tp.cols(),
                targets.rows(),
                targets.cols()
            )));
        }
        let value = soft_eddi_forward(tp, targets, groups);
        Ok(self.push(
            Tensor2::from_vec(1, 1, vec![value])?,
            Op::SoftEddi { probs, targets: targets.clone(), groups: groups.clone() },
        ))
    }

    /// Run reverse-mode accumulation from a 1 x 1 root. Returns one gradient
    /// tensor per node, in node order.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Tensor2>> {
        let root_value = &self.nodes[root].value;
        if root_value.shape() != (1, 1) {
            return Err(Error::shape(format!(
                "backward root must be 1x1, got {}x{}",
                root_value.rows(),
                root_value.cols()
            )));
        }
        let mut grads: Vec<Tensor2> = self
            .nodes
            .iter()
            .map(|n| Tensor2::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[root].set(0, 0, 1.0);

        for id in (0..=root).rev() {
            if grads[id].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let upstream = grads[id].clone();
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    // dA = dC . B^T, dB = A^T . dC
                    let bt = self.nodes[*b].value.transpose();
                    let at = self.nodes[*a].value.transpose();
                    let da = upstream.matmul(&bt)?;
                    let db = at.matmul(&upstream)?;
                    grads[*a].add_assign_scaled(&da, 1.0);
                    grads[*b].add_assign_scaled(&db, 1.0);
                }
                Op::Sigmoid(x) => {
                    let out = &self.nodes[id].value;
                    let g = &mut grads[*x];
                    for (i, u) in upstream.data().iter().enumerate() {
                        let s = out.data()[i];
                        g.data_mut()[i] += u * s * (1.0 - s);
                    }
                }
                Op::Relu(x) => {
                    let input = &self.nodes[*x].value;
                    let g = &mut grads[*x];
                    for (i, u) in upstream.data().iter().enumerate() {
                        if input.data()[i] > 0.0 {
                            g.data_mut()[i] += u;
                        }
                    }
                }
                Op::Dropout { input, mask } => {
                    let g = &mut grads[*input];
                    for (i, u) in upstream.data().iter().enumerate() {
                        g.data_mut()[i] += u * mask[i];
                    }
                }
                Op::Add(a, b) => {
                    grads[*a].add_assign_scaled(&upstream, 1.0);
                    grads[*b].add_assign_scaled(&upstream, 1.0);
                }
                Op::AddBias { input, bias } => {
                    grads[*input].add_assign_scaled(&upstream, 1.0);
                    let cols = upstream.cols();
                    let g = &mut grads[*bias];
                    for r in 0..upstream.rows() {
                        for c in 0..cols {
                            let v = g.get(0, c) + upstream.get(r, c);
                            g.set(0, c, v);
                        }
                    }
                }
                Op::Scale { input, factor } => {
                    grads[*input].add_assign_scaled(&upstream, *factor);
                }
                Op::GateRows { gate, input } => {
                    let tg = self.nodes[*gate].value.clone();
                    let tx = self.nodes[*input].value.clone();
                    {
                        let gx = &mut grads[*input];
                        for r in 0..upstream.rows() {
                            for c in 0..upstream.cols() {
                                let v = gx.get(r, c) + upstream.get(r, c) * tg.get(0, c);
                                gx.set(r, c, v);
                            }
                        }
                    }
                    let gg = &mut grads[*gate];
                    for r in 0..upstream.rows() {
                        for c in 0..upstream.cols() {
                            let v = gg.get(0, c) + upstream.get(r, c) * tx.get(r, c);
                            gg.set(0, c, v);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let cols = upstream.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        let g = &mut grads[p];
                        for r in 0..upstream.rows() {
                            for c in 0..w {
                                let v = g.get(r, c) + upstream.data()[r * cols + offset + c];
                                g.set(r, c, v);
                            }
                        }
                        offset += w;
                    }
                }
                Op::MeanAll(x) => {
                    let u = upstream.get(0, 0);
                    let n = self.nodes[*x].value.len() as f64;
                    let g = &mut grads[*x];
                    for v in g.data_mut() {
                        *v += u / n;
                    }
                }
                Op::WeightedBce { logits, targets, weights } => {
                    let u = upstream.get(0, 0);
                    let tl = &self.nodes[*logits].value;
                    let (n, t) = tl.shape();
                    let scale = u / (n * t) as f64;
                    let g = &mut grads[*logits];
                    for i in 0..n {
                        for j in 0..t {
                            let s = sigmoid_scalar(tl.get(i, j));
                            let y = targets.get(i, j);
                            let d = weights.neg[j] * (1.0 - y) * s
                                - weights.pos[j] * y * (1.0 - s);
                            let v = g.get(i, j) + scale * d;
                            g.set(i, j, v);
                        }
                    }
                }
                Op::SoftEddi { probs, targets, groups } => {
                    let u = upstream.get(0, 0);
                    let tp = &self.nodes[*probs].value;
                    let gp = soft_eddi_backward(tp, targets, groups, u);
                    grads[*probs].add_assign_scaled(&gp, 1.0);
                }
            }
        }
        Ok(grads)
    }
}

fn soft_error(p: f64, y: f64) -> f64 {
    (p - y).abs()
}

/// d|p - y|/dp for binary y; the surrogate is only used with p in (0, 1).
fn soft_error_grad(y: f64) -> f64 {
    if y > 0.5 {
        -1.0
    } else {
        1.0
    }
}

fn soft_eddi_forward(probs: &Tensor2, targets: &Tensor2, groups: &SubgroupRows) -> f64 {
    let (n, tasks) = probs.shape();
    if n == 0 || tasks == 0 || groups.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    let mut terms = 0usize;
    for attr_groups in groups {
        for task in 0..tasks {
            let oer = (0..n)
                .map(|i| soft_error(probs.get(i, task), targets.get(i, task)))
                .sum::<f64>()
                / n as f64;
            let denom = oer.max(1.0 - oer);
            let mut sum_sq = 0.0;
            for rows in attr_groups {
                if rows.is_empty() {
                    continue;
                }
                let er = rows
                    .iter()
                    .map(|&i| soft_error(probs.get(i, task), targets.get(i, task)))
                    .sum::<f64>()
                    / rows.len() as f64;
                let d = (er - oer) / denom;
                sum_sq += d * d;
            }
            let count = attr_groups.iter().filter(|r| !r.is_empty()).count();
            if count > 0 {
                total += sum_sq.sqrt() / count as f64;
            }
            terms += 1;
        }
    }
    if terms == 0 {
        0.0
    } else {
        total / terms as f64
    }
}

fn soft_eddi_backward(
    probs: &Tensor2,
    targets: &Tensor2,
    groups: &SubgroupRows,
    upstream: f64,
) -> Tensor2 {
    let (n, tasks) = probs.shape();
    let mut grad = Tensor2::zeros(n, tasks);
    if n == 0 || tasks == 0 || groups.is_empty() {
        return grad;
    }
    let terms = groups.len() * tasks;
    let outer = upstream / terms as f64;
    for attr_groups in groups {
        let present: Vec<&Vec<usize>> =
            attr_groups.iter().filter(|r| !r.is_empty()).collect();
        let count = present.len();
        if count == 0 {
            continue;
        }
        for task in 0..tasks {
            let oer = (0..n)
                .map(|i| soft_error(probs.get(i, task), targets.get(i, task)))
                .sum::<f64>()
                / n as f64;
            let denom = oer.max(1.0 - oer);
            // Subgradient of max(oer, 1 - oer) at the tie: take the oer side.
            let ddenom_doer = if oer >= 1.0 - oer { 1.0 } else { -1.0 };
            let mut ds = Vec::with_capacity(count);
            for rows in &present {
                let er = rows
                    .iter()
                    .map(|&i| soft_error(probs.get(i, task), targets.get(i, task)))
                    .sum::<f64>()
                    / rows.len() as f64;
                ds.push((er - oer) / denom);
            }
            let q: f64 = ds.iter().map(|d| d * d).sum();
            if q == 0.0 {
                continue; // subgradient of sqrt at zero
            }
            let sqrt_q = q.sqrt();
            // d(attr term)/d d_s
            let dd: Vec<f64> = ds.iter().map(|d| outer * d / (count as f64 * sqrt_q)).collect();
            let mut doer_total = 0.0;
            for (s, rows) in present.iter().enumerate() {
                let der = dd[s] / denom;
                // er_s depends on subgroup members only
                for &i in rows.iter() {
                    let g = der / rows.len() as f64
                        * soft_error_grad(targets.get(i, task));
                    let v = grad.get(i, task) + g;
                    grad.set(i, task, v);
                }
                // d d_s / d oer = -1/denom - d_s * ddenom/denom
                doer_total += dd[s] * (-1.0 / denom - ds[s] * ddenom_doer / denom);
            }
            for i in 0..n {
                let g = doer_total / n as f64 * soft_error_grad(targets.get(i, task));
                let v = grad.get(i, task) + g;
                grad.set(i, task, v);
            }
        }
    }
    grad
}
