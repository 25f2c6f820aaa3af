use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::array::Array;
use super::kernels;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where a node belongs, for op accounting. `group` is a coarse region
/// ("vision", "text", "head"); `layer` is the 1-based encoder layer, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Scope {
    pub group: &'static str,
    pub layer: Option<usize>,
}

impl Scope {
    pub const fn new(group: &'static str, layer: Option<usize>) -> Self {
        Self { group, layer }
    }
}

impl Default for Scope {
    fn default() -> Self {
        Self::new("misc", None)
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Param(String),
    Input(String),
    Const(Array),
    /// `a · b`
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `[n, m] + [1, m]` broadcast over rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Matrix times a `[1, 1]` node.
    MulScalar(NodeId, NodeId),
    Exp(NodeId),
    Gelu(NodeId),
    /// Row-wise.
    Softmax(NodeId),
    /// Row-wise, with `[1, m]` gain and bias.
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
        end: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        end: usize,
    },
    /// Mean of all elements, `[1, 1]`.
    Mean(NodeId),
    /// Row-wise L2 normalization.
    Normalize(NodeId),
    /// `[1, d]` against `[m, d]` → `[1, m]` cosine similarities.
    Cosine(NodeId, NodeId),
    /// `-log softmax(logits)[label]` over a `[1, m]` row; masked-out entries
    /// are excluded from the normalizer.
    CrossEntropy {
        logits: NodeId,
        label: usize,
        mask: Option<Vec<bool>>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(_) => "exp",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Mean(_) => "mean",
            Op::Normalize(_) => "normalize",
            Op::Cosine(..) => "cosine",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Param(_) | Op::Input(_) | Op::Const(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b)
            | Op::Cosine(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Exp(a) | Op::Gelu(a) | Op::Softmax(a) | Op::Mean(a) | Op::Normalize(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
            Op::SliceRows { x, .. } | Op::SliceCols { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    scope: Scope,
}

/// A topologically ordered computation description.
///
/// Nodes can only reference earlier nodes, so insertion order is a valid
/// evaluation order. Parameters and inputs are leaves resolved at evaluation
/// time; the graph itself holds no parameter values.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    inputs: HashMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    scope: Scope,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scope stamped on nodes created from now on.
    pub fn set_scope(&mut self, scope: Scope) {
        self.scope = scope;
    }

    pub fn scope_of(&self, id: NodeId) -> Scope {
        self.nodes[id.0].scope
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Number of nodes per scope.
    pub fn nodes_by_scope(&self) -> BTreeMap<Scope, usize> {
        let mut out = BTreeMap::new();
        for n in &self.nodes {
            *out.entry(n.scope).or_insert(0) += 1;
        }
        out
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn has_leaf(&self, name: &str) -> bool {
        self.params.contains_key(name) || self.inputs.contains_key(name)
    }

    pub fn mark_output(&mut self, name: impl Into<String>, id: NodeId) {
        self.outputs.insert(name.into(), id);
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, scope: self.scope });
        id
    }

    /// Parameter leaf; repeated requests for one name share a node.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(Op::Param(name.to_string()));
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale(x, s))
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        self.push(Op::MulScalar(x, s))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Exp(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        self.push(Op::LayerNorm { x, gamma, beta })
    }

    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        self.push(Op::Embedding { table, ids })
    }

    pub fn concat_rows(&mut self, xs: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatRows(xs))
    }

    pub fn concat_cols(&mut self, xs: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatCols(xs))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceRows { x, start, end })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceCols { x, start, end })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    pub fn normalize(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Normalize(x))
    }

    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Cosine(a, b))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> NodeId {
        self.push(Op::CrossEntropy {
            logits,
            label,
            mask: None,
        })
    }

    pub fn masked_cross_entropy(&mut self, logits: NodeId, label: usize, mask: Vec<bool>) -> NodeId {
        self.push(Op::CrossEntropy {
            logits,
            label,
            mask: Some(mask),
        })
    }

    /// Replaces the class mask of an existing cross-entropy node.
    pub fn set_cross_entropy_mask(&mut self, id: NodeId, new_mask: Option<Vec<bool>>) {
        if let Op::CrossEntropy { mask, .. } = &mut self.nodes[id.0].op {
            *mask = new_mask;
        }
    }

    fn label(&self, id: NodeId) -> String {
        let n = &self.nodes[id.0];
        let mut s = format!("#{} {}", id.0, n.op.name());
        match &n.op {
            Op::Param(name) | Op::Input(name) => s.push_str(&format!(" `{name}`")),
            _ => {}
        }
        s.push_str(&format!(" [{}", n.scope.group));
        if let Some(l) = n.scope.layer {
            s.push_str(&format!(".layer.{l}"));
        }
        s.push(']');
        s
    }

    /// Runs every node in order.
    pub fn evaluate(&self, inputs: &HashMap<String, Array>, params: &ParamStore) -> Result<Evaluation> {
        let mut values: Vec<Array> = Vec::with_capacity(self.nodes.len());
        let mut aux: Vec<Aux> = Vec::with_capacity(self.nodes.len());
        let mut counters = OpCounters::default();
        let mut live = 0u64;
        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i);
            let (value, extra, macs) = self.forward_node(id, node, &values, inputs, params)?;
            if !value.all_finite() {
                return Err(Error::NonFinite { node: self.label(id) });
            }
            if !matches!(node.op, Op::Param(_)) {
                live += value.len() as u64;
            }
            let entry = counters.by_scope.entry(node.scope).or_default();
            entry.forward_macs += macs;
            entry.nodes += 1;
            counters.forward_macs += macs;
            values.push(value);
            aux.push(extra);
        }
        counters.forward_live_elements = live;
        Ok(Evaluation { values, aux, counters })
    }

    fn forward_node(
        &self,
        id: NodeId,
        node: &Node,
        values: &[Array],
        inputs: &HashMap<String, Array>,
        params: &ParamStore,
    ) -> Result<(Array, Aux, u64)> {
        let v = |n: &NodeId| &values[n.0];
        let shape_err = |detail: String| Error::shape(self.label(id), detail);
        let need_matrix = |a: &Array| -> Result<()> {
            if a.is_matrix() {
                Ok(())
            } else {
                Err(shape_err(format!("expected a matrix, got {:?}", a.shape())))
            }
        };
        let out = match &node.op {
            Op::Param(name) => {
                let a = params.get(name).ok_or_else(|| Error::UnresolvedLeaf(name.clone()))?;
                (a.clone(), Aux::None, 0)
            }
            Op::Input(name) => {
                let a = inputs.get(name).ok_or_else(|| Error::UnresolvedLeaf(name.clone()))?;
                (a.clone(), Aux::None, 0)
            }
            Op::Const(a) => (a.clone(), Aux::None, 0),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                need_matrix(a)?;
                need_matrix(b)?;
                let (n, k, m) = (a.rows(), a.cols(), b.cols());
                if b.rows() != k {
                    return Err(shape_err(format!("{:?} · {:?}", a.shape(), b.shape())));
                }
                let data = kernels::matmul(a.data(), b.data(), n, k, m);
                (Array::matrix(n, m, data)?, Aux::None, (n * k * m) as u64)
            }
            Op::MatMulNT(a, b) => {
                let (a, b) = (v(a), v(b));
                need_matrix(a)?;
                need_matrix(b)?;
                let (n, k, m) = (a.rows(), a.cols(), b.rows());
                if b.cols() != k {
                    return Err(shape_err(format!("{:?} · {:?}ᵀ", a.shape(), b.shape())));
                }
                let data = kernels::matmul_nt(a.data(), b.data(), n, k, m);
                (Array::matrix(n, m, data)?, Aux::None, (n * k * m) as u64)
            }
            Op::Add(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.shape() != b.shape() {
                    return Err(shape_err(format!("{:?} + {:?}", a.shape(), b.shape())));
                }
                let mut out = a.clone();
                out.add_assign(b);
                let n = out.len() as u64;
                (out, Aux::None, n)
            }
            Op::AddRow(x, b) => {
                let (x, b) = (v(x), v(b));
                need_matrix(x)?;
                if b.shape() != [1, x.cols()] {
                    return Err(shape_err(format!("{:?} + row {:?}", x.shape(), b.shape())));
                }
                let mut out = x.clone();
                let c = x.cols();
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o += b.data()[i % c];
                }
                let n = out.len() as u64;
                (out, Aux::None, n)
            }
            Op::Scale(x, s) => {
                let mut out = v(x).clone();
                out.scale_in_place(*s);
                let n = out.len() as u64;
                (out, Aux::None, n)
            }
            Op::MulScalar(x, s) => {
                let s = v(s);
                if s.len() != 1 {
                    return Err(shape_err(format!("scalar operand has shape {:?}", s.shape())));
                }
                let mut out = v(x).clone();
                out.scale_in_place(s.item());
                let n = out.len() as u64;
                (out, Aux::None, n)
            }
            Op::Exp(x) => {
                let x = v(x);
                let data = x.data().iter().map(|a| a.exp()).collect();
                (Array::new(x.shape().to_vec(), data)?, Aux::None, x.len() as u64)
            }
            Op::Gelu(x) => {
                let x = v(x);
                let data = x.data().iter().map(|&a| kernels::gelu(a)).collect();
                (Array::new(x.shape().to_vec(), data)?, Aux::None, x.len() as u64)
            }
            Op::Softmax(x) => {
                let x = v(x);
                need_matrix(x)?;
                let data = kernels::softmax_rows(x.data(), x.rows(), x.cols());
                (Array::matrix(x.rows(), x.cols(), data)?, Aux::None, x.len() as u64)
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (x, g, b) = (v(x), v(gamma), v(beta));
                need_matrix(x)?;
                let c = x.cols();
                if g.shape() != [1, c] || b.shape() != [1, c] {
                    return Err(shape_err(format!(
                        "layer_norm {:?} with gain {:?} bias {:?}",
                        x.shape(),
                        g.shape(),
                        b.shape()
                    )));
                }
                let ln = kernels::layer_norm(x.data(), g.data(), b.data(), x.rows(), c);
                (
                    Array::matrix(x.rows(), c, ln.y)?,
                    Aux::LayerNorm {
                        xhat: ln.xhat,
                        inv_std: ln.inv_std,
                    },
                    x.len() as u64,
                )
            }
            Op::Embedding { table, ids } => {
                let t = v(table);
                need_matrix(t)?;
                let d = t.cols();
                if ids.is_empty() {
                    return Err(shape_err("empty id list".into()));
                }
                let mut data = Vec::with_capacity(ids.len() * d);
                for &i in ids {
                    if i >= t.rows() {
                        return Err(shape_err(format!("id {i} outside table of {} rows", t.rows())));
                    }
                    data.extend_from_slice(t.row_slice(i));
                }
                (Array::matrix(ids.len(), d, data)?, Aux::None, 0)
            }
            Op::ConcatRows(xs) => {
                let first = v(&xs[0]);
                let c = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for x in xs {
                    let a = v(x);
                    need_matrix(a)?;
                    if a.cols() != c {
                        return Err(shape_err(format!("concat_rows width {} vs {c}", a.cols())));
                    }
                    rows += a.rows();
                    data.extend_from_slice(a.data());
                }
                (Array::matrix(rows, c, data)?, Aux::None, 0)
            }
            Op::ConcatCols(xs) => {
                let r = v(&xs[0]).rows();
                let widths: Vec<usize> = xs.iter().map(|x| v(x).cols()).collect();
                let total: usize = widths.iter().sum();
                let mut data = vec![0.0; r * total];
                let mut off = 0;
                for (x, &w) in xs.iter().zip(&widths) {
                    let a = v(x);
                    need_matrix(a)?;
                    if a.rows() != r {
                        return Err(shape_err(format!("concat_cols height {} vs {r}", a.rows())));
                    }
                    for i in 0..r {
                        data[i * total + off..i * total + off + w].copy_from_slice(a.row_slice(i));
                    }
                    off += w;
                }
                (Array::matrix(r, total, data)?, Aux::None, 0)
            }
            Op::SliceRows { x, start, end } => {
                let a = v(x);
                need_matrix(a)?;
                if start >= end || *end > a.rows() {
                    return Err(shape_err(format!("rows {start}..{end} of {:?}", a.shape())));
                }
                let c = a.cols();
                let data = a.data()[start * c..end * c].to_vec();
                (Array::matrix(end - start, c, data)?, Aux::None, 0)
            }
            Op::SliceCols { x, start, end } => {
                let a = v(x);
                need_matrix(a)?;
                if start >= end || *end > a.cols() {
                    return Err(shape_err(format!("cols {start}..{end} of {:?}", a.shape())));
                }
                let mut data = Vec::with_capacity(a.rows() * (end - start));
                for i in 0..a.rows() {
                    data.extend_from_slice(&a.row_slice(i)[*start..*end]);
                }
                (Array::matrix(a.rows(), end - start, data)?, Aux::None, 0)
            }
            Op::Mean(x) => {
                let a = v(x);
                (Array::scalar(a.sum() / a.len() as f64), Aux::None, a.len() as u64)
            }
            Op::Normalize(x) => {
                let a = v(x);
                need_matrix(a)?;
                let c = a.cols();
                let mut norms = Vec::with_capacity(a.rows());
                let mut data = a.data().to_vec();
                for r in 0..a.rows() {
                    let row = &mut data[r * c..(r + 1) * c];
                    let n = kernels::dot(row, row).sqrt();
                    if n == 0.0 {
                        return Err(Error::ZeroNorm { node: self.label(id) });
                    }
                    for e in row.iter_mut() {
                        *e /= n;
                    }
                    norms.push(n);
                }
                (Array::matrix(a.rows(), c, data)?, Aux::Norms(norms), 2 * a.len() as u64)
            }
            Op::Cosine(a, b) => {
                let (a, b) = (v(a), v(b));
                need_matrix(a)?;
                need_matrix(b)?;
                if a.rows() != 1 || a.cols() != b.cols() {
                    return Err(shape_err(format!("cosine {:?} vs {:?}", a.shape(), b.shape())));
                }
                let na = a.l2_norm();
                let mut norms = vec![na];
                let mut out = Vec::with_capacity(b.rows());
                for j in 0..b.rows() {
                    let bj = b.row_slice(j);
                    let nb = kernels::dot(bj, bj).sqrt();
                    if na == 0.0 || nb == 0.0 {
                        return Err(Error::ZeroNorm { node: self.label(id) });
                    }
                    norms.push(nb);
                    out.push(kernels::dot(a.data(), bj) / (na * nb));
                }
                let macs = (b.rows() * b.cols() * 2 + a.cols()) as u64;
                (Array::row(out), Aux::Norms(norms), macs)
            }
            Op::CrossEntropy { logits, label, mask } => {
                let z = v(logits);
                if z.shape().len() != 2 || z.rows() != 1 {
                    return Err(shape_err(format!("cross_entropy over {:?}", z.shape())));
                }
                let m = z.cols();
                let active = mask.clone().unwrap_or_else(|| vec![true; m]);
                if active.len() != m {
                    return Err(shape_err(format!("mask of {} for {m} logits", active.len())));
                }
                if *label >= m || !active[*label] {
                    return Err(Error::LabelNotInSubset(*label));
                }
                let lse = kernels::masked_logsumexp(z.data(), &active);
                (Array::scalar(lse - z.data()[*label]), Aux::None, m as u64)
            }
        };
        Ok(out)
    }

    /// Reverse pass from a scalar `root` to the named leaves in `wrt`.
    ///
    /// Only nodes that lie on a path from a requested leaf to the root are
    /// visited. Requested parameters must be trainable; requested names that
    /// do not occur in the graph are reported in [`GradientSet::absent`].
    pub fn backward(
        &self,
        eval: &Evaluation,
        root: NodeId,
        params: &ParamStore,
        wrt: &BTreeSet<String>,
    ) -> Result<GradientSet> {
        let root_val = &eval.values[root.0];
        if root_val.len() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut absent = BTreeSet::new();
        for name in wrt {
            if self.params.contains_key(name) {
                if !params.is_trainable(name) {
                    return Err(Error::NotTrainable(name.clone()));
                }
            } else if !self.inputs.contains_key(name) {
                absent.insert(name.clone());
            }
        }

        let n = root.0 + 1;
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = match &self.nodes[i].op {
                Op::Param(name) | Op::Input(name) => wrt.contains(name),
                Op::Const(_) => false,
                op => op.inputs().iter().any(|x| needs[x.0]),
            };
        }

        let mut counters = BackwardCounters::default();
        let mut grads: Vec<Option<Array>> = vec![None; n];
        let mut out = BTreeMap::new();
        if needs[root.0] {
            grads[root.0] = Some(Array::filled(root_val.shape(), 1.0));
        }
        let mut live: u64 = grads[root.0].as_ref().map_or(0, |g| g.len() as u64);
        let mut peak = live;

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param(name) | Op::Input(name) => {
                    out.insert(name.clone(), g);
                    continue;
                }
                Op::Const(_) => continue,
                _ => {}
            }
            live -= g.len() as u64;
            let contributions = self.backward_node(NodeId(i), &g, eval, &needs)?;
            let entry = counters.by_scope.entry(node.scope).or_default();
            entry.nodes += 1;
            for (input, grad, macs) in contributions {
                entry.backward_macs += macs;
                counters.backward_macs += macs;
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => {
                        live += grad.len() as u64;
                        *slot = Some(grad);
                    }
                }
            }
            peak = peak.max(live);
        }
        counters.peak_grad_elements = peak;
        // Leaves present but not connected to the root get an explicit zero.
        for name in wrt {
            if out.contains_key(name) {
                continue;
            }
            let id = self.params.get(name).or_else(|| self.inputs.get(name));
            if let Some(id) = id {
                out.insert(name.clone(), Array::zeros(eval.values[id.0].shape()));
            }
        }
        Ok(GradientSet {
            grads: out,
            absent,
            counters,
        })
    }

    fn backward_node(
        &self,
        id: NodeId,
        g: &Array,
        eval: &Evaluation,
        needs: &[bool],
    ) -> Result<Vec<(NodeId, Array, u64)>> {
        let v = |n: &NodeId| &eval.values[n.0];
        let need = |n: &NodeId| needs[n.0];
        let mut out = Vec::new();
        let like = |shape: &[usize], data: Vec<f64>| Array::new(shape.to_vec(), data);
        match &self.nodes[id.0].op {
            Op::Param(_) | Op::Input(_) | Op::Const(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                let macs = (n * k * m) as u64;
                if need(a) {
                    let d = kernels::matmul_nt(g.data(), bv.data(), n, m, k);
                    out.push((*a, Array::matrix(n, k, d)?, macs));
                }
                if need(b) {
                    let d = kernels::matmul_tn(av.data(), g.data(), n, k, m);
                    out.push((*b, Array::matrix(k, m, d)?, macs));
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                let macs = (n * k * m) as u64;
                if need(a) {
                    let d = kernels::matmul(g.data(), bv.data(), n, m, k);
                    out.push((*a, Array::matrix(n, k, d)?, macs));
                }
                if need(b) {
                    let d = kernels::matmul_tn(g.data(), av.data(), n, m, k);
                    out.push((*b, Array::matrix(m, k, d)?, macs));
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if need(x) {
                        out.push((*x, g.clone(), g.len() as u64));
                    }
                }
            }
            Op::AddRow(x, b) => {
                if need(x) {
                    out.push((*x, g.clone(), g.len() as u64));
                }
                if need(b) {
                    let c = g.cols();
                    let mut d = vec![0.0; c];
                    for (i, gv) in g.data().iter().enumerate() {
                        d[i % c] += gv;
                    }
                    out.push((*b, Array::row(d), g.len() as u64));
                }
            }
            Op::Scale(x, s) => {
                if need(x) {
                    let mut d = g.clone();
                    d.scale_in_place(*s);
                    out.push((*x, d, g.len() as u64));
                }
            }
            Op::MulScalar(x, s) => {
                let (xv, sv) = (v(x), v(s));
                if need(x) {
                    let mut d = g.clone();
                    d.scale_in_place(sv.item());
                    out.push((*x, d, g.len() as u64));
                }
                if need(s) {
                    let d = kernels::dot(g.data(), xv.data());
                    out.push((*s, like(sv.shape(), vec![d])?, g.len() as u64));
                }
            }
            Op::Exp(x) => {
                if need(x) {
                    let y = &eval.values[id.0];
                    let d = g.data().iter().zip(y.data()).map(|(a, b)| a * b).collect();
                    out.push((*x, like(g.shape(), d)?, g.len() as u64));
                }
            }
            Op::Gelu(x) => {
                if need(x) {
                    let xv = v(x);
                    let d = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, &xv)| gv * kernels::gelu_grad(xv))
                        .collect();
                    out.push((*x, like(g.shape(), d)?, g.len() as u64));
                }
            }
            Op::Softmax(x) => {
                if need(x) {
                    let y = &eval.values[id.0];
                    let (r, c) = (y.rows(), y.cols());
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = y.row_slice(i);
                        let gr = g.row_slice(i);
                        let s = kernels::dot(yr, gr);
                        for j in 0..c {
                            d[i * c + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    out.push((*x, Array::matrix(r, c, d)?, g.len() as u64));
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let Aux::LayerNorm { xhat, inv_std } = &eval.aux[id.0] else {
                    unreachable!("layer_norm without aux");
                };
                let gv = v(gamma);
                let (r, c) = (g.rows(), g.cols());
                let macs = g.len() as u64;
                if need(gamma) {
                    let mut d = vec![0.0; c];
                    for (i, gi) in g.data().iter().enumerate() {
                        d[i % c] += gi * xhat[i];
                    }
                    out.push((*gamma, Array::row(d), macs));
                }
                if need(beta) {
                    let mut d = vec![0.0; c];
                    for (i, gi) in g.data().iter().enumerate() {
                        d[i % c] += gi;
                    }
                    out.push((*beta, Array::row(d), macs));
                }
                if need(x) {
                    let mut d = vec![0.0; r * c];
                    let cf = c as f64;
                    for i in 0..r {
                        let gr = g.row_slice(i);
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..c {
                            let dxh = gr[j] * gv.data()[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= cf;
                        mean_dxh_xh /= cf;
                        for j in 0..c {
                            let dxh = gr[j] * gv.data()[j];
                            d[i * c + j] = inv_std[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    out.push((*x, Array::matrix(r, c, d)?, 3 * macs));
                }
            }
            Op::Embedding { table, ids } => {
                if need(table) {
                    let t = v(table);
                    let d = t.cols();
                    let mut grad = Array::zeros(t.shape());
                    for (row, &i) in ids.iter().enumerate() {
                        let dst = &mut grad.data_mut()[i * d..(i + 1) * d];
                        for (a, b) in dst.iter_mut().zip(g.row_slice(row)) {
                            *a += b;
                        }
                    }
                    out.push((*table, grad, g.len() as u64));
                }
            }
            Op::ConcatRows(xs) => {
                let c = g.cols();
                let mut r0 = 0;
                for x in xs {
                    let rows = v(x).rows();
                    if need(x) {
                        let d = g.data()[r0 * c..(r0 + rows) * c].to_vec();
                        out.push((*x, Array::matrix(rows, c, d)?, 0));
                    }
                    r0 += rows;
                }
            }
            Op::ConcatCols(xs) => {
                let total = g.cols();
                let mut off = 0;
                for x in xs {
                    let w = v(x).cols();
                    if need(x) {
                        let mut d = Vec::with_capacity(g.rows() * w);
                        for i in 0..g.rows() {
                            d.extend_from_slice(&g.data()[i * total + off..i * total + off + w]);
                        }
                        out.push((*x, Array::matrix(g.rows(), w, d)?, 0));
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start, .. } => {
                if need(x) {
                    let xv = v(x);
                    let mut d = Array::zeros(xv.shape());
                    let c = xv.cols();
                    d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    out.push((*x, d, 0));
                }
            }
            Op::SliceCols { x, start, end } => {
                if need(x) {
                    let xv = v(x);
                    let mut d = Array::zeros(xv.shape());
                    let c = xv.cols();
                    let w = end - start;
                    for i in 0..xv.rows() {
                        d.data_mut()[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    out.push((*x, d, 0));
                }
            }
            Op::Mean(x) => {
                if need(x) {
                    let xv = v(x);
                    let d = Array::filled(xv.shape(), g.item() / xv.len() as f64);
                    out.push((*x, d, xv.len() as u64));
                }
            }
            Op::Normalize(x) => {
                if need(x) {
                    let Aux::Norms(norms) = &eval.aux[id.0] else {
                        unreachable!("normalize without aux");
                    };
                    let y = &eval.values[id.0];
                    let (r, c) = (y.rows(), y.cols());
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = y.row_slice(i);
                        let gr = g.row_slice(i);
                        let s = kernels::dot(yr, gr);
                        for j in 0..c {
                            d[i * c + j] = (gr[j] - yr[j] * s) / norms[i];
                        }
                    }
                    out.push((*x, Array::matrix(r, c, d)?, 2 * g.len() as u64));
                }
            }
            Op::Cosine(a, b) => {
                let Aux::Norms(norms) = &eval.aux[id.0] else {
                    unreachable!("cosine without aux");
                };
                let (av, bv) = (v(a), v(b));
                let cos = &eval.values[id.0];
                let na = norms[0];
                let d = av.cols();
                let macs = (bv.rows() * d * 2) as u64;
                if need(a) {
                    let mut da = vec![0.0; d];
                    for j in 0..bv.rows() {
                        let gj = g.data()[j];
                        if gj == 0.0 {
                            continue;
                        }
                        let nb = norms[j + 1];
                        let cj = cos.data()[j];
                        let bj = bv.row_slice(j);
                        for p in 0..d {
                            da[p] += gj * (bj[p] / (na * nb) - cj * av.data()[p] / (na * na));
                        }
                    }
                    out.push((*a, Array::row(da), macs));
                }
                if need(b) {
                    let mut db = vec![0.0; bv.len()];
                    for j in 0..bv.rows() {
                        let gj = g.data()[j];
                        let nb = norms[j + 1];
                        let cj = cos.data()[j];
                        let bj = bv.row_slice(j);
                        for p in 0..d {
                            db[j * d + p] = gj * (av.data()[p] / (na * nb) - cj * bj[p] / (nb * nb));
                        }
                    }
                    out.push((*b, Array::matrix(bv.rows(), d, db)?, macs));
                }
            }
            Op::CrossEntropy { logits, label, mask } => {
                if need(logits) {
                    let z = v(logits);
                    let m = z.cols();
                    let active = mask.clone().unwrap_or_else(|| vec![true; m]);
                    let lse = kernels::masked_logsumexp(z.data(), &active);
                    let gs = g.item();
                    let d = (0..m)
                        .map(|j| {
                            let p = if active[j] { (z.data()[j] - lse).exp() } else { 0.0 };
                            let y = if j == *label { 1.0 } else { 0.0 };
                            gs * (p - y)
                        })
                        .collect();
                    out.push((*logits, Array::row(d), m as u64));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Norms(Vec<f64>),
}

/// Multiply-add accounting for one forward or backward pass.
///
/// Matrix products count `n·k·m`; element-wise primitives count one per
/// element touched (a small multiple for layer-norm and normalization);
/// pure data movement (slice, concat, lookup) counts zero.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScopeCount {
    pub nodes: u64,
    pub forward_macs: u64,
    pub backward_macs: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub forward_macs: u64,
    /// Elements held by non-parameter node values after the forward pass.
    pub forward_live_elements: u64,
    pub by_scope: BTreeMap<Scope, ScopeCount>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BackwardCounters {
    pub backward_macs: u64,
    pub peak_grad_elements: u64,
    pub by_scope: BTreeMap<Scope, ScopeCount>,
}

/// Node values from one forward pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Array>,
    aux: Vec<Aux>,
    pub counters: OpCounters,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Array {
        &self.values[id.0]
    }

    pub fn into_value(mut self, id: NodeId) -> Array {
        self.values.swap_remove(id.0)
    }

    /// Values of every node marked as an output.
    pub fn outputs(&self, graph: &Graph) -> BTreeMap<String, Array> {
        graph
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), self.values[id.0].clone()))
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradientSet {
    pub grads: BTreeMap<String, Array>,
    /// Requested names that do not occur in the graph.
    pub absent: BTreeSet<String>,
    pub counters: BackwardCounters,
}

impl GradientSet {
    pub fn get(&self, name: &str) -> Option<&Array> {
        self.grads.get(name)
    }
}
