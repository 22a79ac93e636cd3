use super::kernels::{gemm, gemm_at, gemm_bt};
use super::{check_finite, numel, Tensor, TensorError, TensorResult, IGNORE_INDEX};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Transpose(NodeId),
    Permute {
        x: NodeId,
        axes: Vec<usize>,
    },
    Reshape(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    MaskedCrossEntropy {
        logits: NodeId,
        targets: Vec<i64>,
        probs: Vec<f32>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    requires_grad: bool,
    op: Op,
}

/// An append-only record of operations, in topological order by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&[f32]> {
        self.grads.get(node.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `node` into `tensor.grad`. Nodes the loss does
    /// not depend on leave the buffer untouched, i.e. a zero contribution.
    pub fn accumulate_into(&self, node: NodeId, tensor: &mut Tensor) -> TensorResult<()> {
        match self.get(node) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves `src` (laid out as `shape`) into axis order `axes`.
fn permute_data(src: &[f32], shape: &[usize], axes: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; out_shape.len()];
    let last = out_shape.len().saturating_sub(1);
    let (inner_n, inner_s) = (out_shape.get(last).copied().unwrap_or(1), gather.get(last).copied().unwrap_or(0));
    let mut off = 0usize;
    while out.len() < src.len() {
        for j in 0..inner_n {
            out.push(src[off + j * inner_s]);
        }
        let mut d = last;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            off += gather[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= gather[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += *b),
        None => *dst = Some(src.to_vec()),
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

    fn node(&self, id: NodeId) -> TensorResult<&Node> {
        self.nodes.get(id.0).ok_or(TensorError::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn to_tensor(&self, id: NodeId) -> TensorResult<Tensor> {
        let n = self.node(id)?;
        Tensor::new(n.shape.clone(), n.value.clone())
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<f32>,
        requires_grad: bool,
        op: Op,
    ) -> TensorResult<NodeId> {
        check_finite(op_name, &value)?;
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Records a copy of `tensor`; trainable tensors become gradient sinks.
    pub fn leaf(&mut self, tensor: &Tensor) -> NodeId {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            requires_grad: tensor.requires_grad(),
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> TensorResult<NodeId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> TensorResult<()> {
        let (sa, sb) = (&self.node(a)?.shape, &self.node(b)?.shape);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push("add", shape, value, rg, Op::Add(a, b))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> TensorResult<NodeId> {
        let xs = self.node(x)?.shape.clone();
        let bs = self.node(bias)?.shape.clone();
        let d = *xs.last().unwrap();
        if bs != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(u, v)| u + v))
            .collect();
        let rg = self.rg(&[x, bias]);
        self.push("add_bias", xs, value, rg, Op::AddBias { x, bias })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push("mul", shape, value, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> TensorResult<NodeId> {
        let value = self.node(a)?.value.iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("scale", shape, value, rg, Op::Scale(a, factor))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> TensorResult<NodeId> {
        let value = self.node(a)?.value.iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("gelu", shape, value, rg, Op::Gelu(a))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> TensorResult<NodeId> {
        let xs = self.node(x)?.shape.clone();
        let d = *xs.last().unwrap();
        for p in [gain, bias] {
            let ps = &self.node(p)?.shape;
            if ps != &[d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xs.clone(),
                    rhs: ps.clone(),
                });
            }
        }
        let rows = numel(&xs) / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut value = Vec::with_capacity(rows * d);
        for row in self.value(x).chunks(d) {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let r = 1.0 / (var + super::LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                value.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            "layer_norm",
            xs,
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Gathers rows of a `[V×D]` table; the result is `[ids.len()×D]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> TensorResult<NodeId> {
        let ts = self.node(table)?.shape.clone();
        if ts.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape: ts,
                detail: "table must be rank 2".into(),
            });
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: bad as i64,
                limit: v,
            });
        }
        if ids.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape: vec![0, d],
                detail: "no ids".into(),
            });
        }
        let tv = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            value.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            "embedding",
            vec![ids.len(), d],
            value,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]`; `b` is either `[k, n]` (shared across the
    /// leading axes of `a`) or `[..., k, n]` with the same leading axes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let sa = self.node(a)?.shape.clone();
        let sb = self.node(b)?.shape.clone();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && &sb[..sb.len() - 2] != lead {
            return Err(mismatch());
        }
        let mut value = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        if shared_rhs {
            gemm(av, bv, &mut value, batch * m, k, n);
        } else {
            for t in 0..batch {
                gemm(
                    &av[t * m * k..(t + 1) * m * k],
                    &bv[t * k * n..(t + 1) * k * n],
                    &mut value[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        self.push(
            "matmul",
            shape,
            value,
            rg,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let s = self.node(x)?.shape.clone();
        if s.len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: s,
                detail: "rank must be at least 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..s.len()).collect();
        axes.swap(s.len() - 2, s.len() - 1);
        let (value, shape) = permute_data(self.value(x), &s, &axes);
        let rg = self.rg(&[x]);
        self.push("transpose", shape, value, rg, Op::Transpose(x))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> TensorResult<NodeId> {
        let s = self.node(x)?.shape.clone();
        let mut seen = vec![false; s.len()];
        let valid = axes.len() == s.len()
            && axes.iter().all(|&a| a < s.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: s,
                detail: format!("axes {axes:?} are not a permutation"),
            });
        }
        let (value, shape) = permute_data(self.value(x), &s, axes);
        let rg = self.rg(&[x]);
        self.push(
            "permute",
            shape,
            value,
            rg,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> TensorResult<NodeId> {
        let s = &self.node(x)?.shape;
        if numel(shape) != numel(s) || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: s.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push("reshape", shape.to_vec(), value, rg, Op::Reshape(x))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> TensorResult<NodeId> {
        let first = self
            .node(*inputs.first().ok_or(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                detail: "no inputs".into(),
            })?)?
            .shape
            .clone();
        if axis >= first.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &id in inputs {
            let s = &self.node(id)?.shape;
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_layout(&shape, axis);
        let mut value = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &id in inputs {
                let len = self.shape(id)[axis] * inner;
                value.extend_from_slice(&self.value(id)[o * len..(o + 1) * len]);
            }
        }
        let rg = self.rg(inputs);
        self.push(
            "concat",
            shape,
            value,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> TensorResult<NodeId> {
        let s = self.node(x)?.shape.clone();
        if axis >= s.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: s.len(),
            });
        }
        let (outer, n, inner) = axis_layout(&s, axis);
        let xv = self.value(x);
        let mut value = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| xv[at(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (xv[at(j)] - max).exp();
                    value[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    value[at(j)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push("softmax", s, value, rg, Op::Softmax { x, axis })
    }

    pub fn sum(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let total = self.node(x)?.value.iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", vec![1], vec![total], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let v = &self.node(x)?.value;
        let total = v.iter().sum::<f32>() / v.len() as f32;
        let rg = self.rg(&[x]);
        self.push("mean", vec![1], vec![total], rg, Op::Mean(x))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` over
    /// the last axis, skipping positions marked [`IGNORE_INDEX`].
    ///
    /// `logits` is `[..., V]` and `targets` has one entry per row.
    pub fn masked_cross_entropy(&mut self, logits: NodeId, targets: &[i64]) -> TensorResult<NodeId> {
        let s = self.node(logits)?.shape.clone();
        let v = *s.last().unwrap();
        let rows = numel(&s) / v;
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "masked_cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets
            .iter()
            .find(|&&t| t != IGNORE_INDEX && (t < 0 || t as usize >= v))
        {
            return Err(TensorError::IndexOutOfRange {
                op: "masked_cross_entropy",
                index: bad,
                limit: v,
            });
        }
        let count = targets.iter().filter(|&&t| t != IGNORE_INDEX).count();
        if count == 0 {
            return Err(TensorError::EmptyBatch);
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f32 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + sum.ln();
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
            total += (log_z - row[t as usize]) as f64;
        }
        let loss = (total / count as f64) as f32;
        let rg = self.rg(&[logits]);
        self.push(
            "masked_cross_entropy",
            vec![1],
            vec![loss],
            rg,
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Reverse pass from a scalar `loss`, visiting each record once.
    pub fn backward(&self, loss: NodeId) -> TensorResult<Gradients> {
        let ln = self.node(loss)?;
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &id in [a, b] {
                    if wants(id) {
                        add_into(&mut grads[id.0], dy);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    add_into(&mut grads[x.0], dy);
                }
                if wants(*bias) {
                    let d = self.nodes[bias.0].value.len();
                    let mut db = vec![0.0; d];
                    for row in dy.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                    }
                    add_into(&mut grads[bias.0], &db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let g: Vec<f32> = dy.iter().zip(bv).map(|(d, y)| d * y).collect();
                    add_into(&mut grads[a.0], &g);
                }
                if wants(*b) {
                    let g: Vec<f32> = dy.iter().zip(av).map(|(d, x)| d * x).collect();
                    add_into(&mut grads[b.0], &g);
                }
            }
            Op::Scale(a, f) => {
                let g: Vec<f32> = dy.iter().map(|d| d * f).collect();
                add_into(&mut grads[a.0], &g);
            }
            Op::Gelu(a) => {
                let g: Vec<f32> = dy
                    .iter()
                    .zip(self.value(*a))
                    .map(|(d, &x)| d * gelu_grad(x))
                    .collect();
                add_into(&mut grads[a.0], &g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let d = gv.len();
                if wants(*gain) || wants(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (row, h) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += row[j] * h[j];
                            db[j] += row[j];
                        }
                    }
                    if wants(*gain) {
                        add_into(&mut grads[gain.0], &dg);
                    }
                    if wants(*bias) {
                        add_into(&mut grads[bias.0], &db);
                    }
                }
                if wants(*x) {
                    let mut dx = Vec::with_capacity(dy.len());
                    for ((row, h), &r) in dy.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let dxhat: Vec<f32> = row.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f32>() / d as f32;
                        let mean_dh =
                            dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                        dx.extend(
                            dxhat
                                .iter()
                                .zip(h)
                                .map(|(dh, hh)| r * (dh - mean_d - hh * mean_dh)),
                        );
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::Embedding { table, ids } => {
                let ts = &self.nodes[table.0].shape;
                let d = ts[1];
                let g = grads[table.0].get_or_insert_with(|| vec![0.0; ts[0] * d]);
                for (row, &i) in dy.chunks(d).zip(ids) {
                    g[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, b)| *a += *b);
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if wants(*a) {
                    let mut da = vec![0.0; av.len()];
                    if *shared_rhs {
                        gemm_bt(dy, bv, &mut da, batch * m, k, n);
                    } else {
                        for t in 0..batch {
                            gemm_bt(
                                &dy[t * m * n..(t + 1) * m * n],
                                &bv[t * k * n..(t + 1) * k * n],
                                &mut da[t * m * k..(t + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    add_into(&mut grads[a.0], &da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; bv.len()];
                    if *shared_rhs {
                        gemm_at(av, dy, &mut db, batch * m, k, n);
                    } else {
                        for t in 0..batch {
                            gemm_at(
                                &av[t * m * k..(t + 1) * m * k],
                                &dy[t * m * n..(t + 1) * m * n],
                                &mut db[t * k * n..(t + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Transpose(x) => {
                let s = &node.shape;
                let mut axes: Vec<usize> = (0..s.len()).collect();
                axes.swap(s.len() - 2, s.len() - 1);
                let (g, _) = permute_data(dy, s, &axes);
                add_into(&mut grads[x.0], &g);
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (g, _) = permute_data(dy, &node.shape, &inverse);
                add_into(&mut grads[x.0], &g);
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], dy),
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_layout(&node.shape, *axis);
                let row = node.shape[*axis] * inner;
                let mut offset = 0;
                for &id in inputs {
                    let len = self.nodes[id.0].shape[*axis] * inner;
                    if wants(id) {
                        let mut g = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            g.extend_from_slice(&dy[o * row + offset..o * row + offset + len]);
                        }
                        add_into(&mut grads[id.0], &g);
                    }
                    offset += len;
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_layout(&node.shape, *axis);
                let y = &node.value;
                let mut g = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f32 = (0..n).map(|j| dy[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            g[at(j)] = y[at(j)] * (dy[at(j)] - dot);
                        }
                    }
                }
                add_into(&mut grads[x.0], &g);
            }
            Op::Sum(x) => {
                let g = vec![dy[0]; self.nodes[x.0].value.len()];
                add_into(&mut grads[x.0], &g);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                let g = vec![dy[0] / n as f32; n];
                add_into(&mut grads[x.0], &g);
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = *self.nodes[logits.0].shape.last().unwrap();
                let scale = dy[0] / *count as f32;
                let mut g = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == IGNORE_INDEX {
                        continue;
                    }
                    let out = &mut g[r * v..(r + 1) * v];
                    for (o, p) in out.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *o = p * scale;
                    }
                    out[t as usize] -= scale;
                }
                add_into(&mut grads[logits.0], &g);
            }
        }
    }
}
