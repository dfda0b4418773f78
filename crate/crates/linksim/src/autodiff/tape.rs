use std::collections::HashMap;
use std::rc::Rc;

use super::{AdError, Tensor};

/// Which part of the transceiver a parameter belongs to. Fine-tuning and
/// checkpointing select parameters by partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Backbone,
    Adapter,
    Mask,
    Constellation,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Backbone => "backbone",
            Partition::Adapter => "adapter",
            Partition::Mask => "mask",
            Partition::Constellation => "constellation",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        match s {
            "backbone" => Some(Partition::Backbone),
            "adapter" => Some(Partition::Adapter),
            "mask" => Some(Partition::Mask),
            "constellation" => Some(Partition::Constellation),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

struct ParamEntry {
    name: String,
    partition: Partition,
    value: Tensor,
    trainable: bool,
}

/// Named, partitioned model parameters. Insertion order is fixed and is the
/// canonical order for checkpoints and gradient norms.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, partition: Partition, value: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            partition,
            value,
            trainable: true,
        });
        id
    }

    pub fn id(&self, name: &str) -> Result<ParamId, AdError> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| AdError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn partition(&self, id: ParamId) -> Partition {
        self.entries[id.0].partition
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total scalar count, optionally restricted to one partition.
    pub fn count_scalars(&self, partition: Option<Partition>) -> usize {
        self.entries
            .iter()
            .filter(|e| partition.is_none_or(|p| e.partition == p))
            .map(|e| e.value.len())
            .sum()
    }

    /// Mark exactly the parameters in `partitions` trainable, freezing the rest.
    pub fn set_trainable_partitions(&mut self, partitions: &[Partition]) {
        for e in &mut self.entries {
            e.trainable = partitions.contains(&e.partition);
        }
    }

    pub fn set_all_trainable(&mut self) {
        for e in &mut self.entries {
            e.trainable = true;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Param(usize),
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Sqrt(NodeId),
    SumAll(NodeId),
    RowMean(NodeId),
    /// tensor ∘ scalar-node broadcasts: a − s, a·s, a/s
    SubS(NodeId, NodeId),
    MulS(NodeId, NodeId),
    DivS(NodeId, NodeId),
    /// `[r,c]` rows scaled by `[r]`: a[i,·]·m[i], a[i,·]/d[i]
    MulRows(NodeId, NodeId),
    DivRows(NodeId, NodeId),
    /// out[i,·] = M · a[i,·] for a constant matrix M of shape `[m, n]`
    MatRows(NodeId, Rc<Tensor>),
    /// causal time-varying convolution with constant taps `[n, l]`
    TvConv(NodeId, Rc<Tensor>),
    Gather(NodeId, Rc<Vec<usize>>),
    Concat0(Vec<NodeId>),
    Slice0 {
        x: NodeId,
        start: usize,
        stride: usize,
    },
    Reshape(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        groups: usize,
        dilation: (usize, usize),
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: f64,
        inv_std: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-parameter gradients produced by [`Tape::backward`]. Parameters that a
/// loss does not touch (or that are frozen) have no entry.
pub struct Grads {
    by_param: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.by_param.get_mut(id.0).and_then(|g| g.as_mut())
    }

    /// Euclidean norm over every stored gradient, in parameter order.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for g in self.by_param.iter().flatten() {
            for v in g.data() {
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn scale_all(&mut self, k: f64) {
        for g in self.by_param.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }

    /// Elementwise accumulate another gradient set (same parameter space).
    pub fn add_assign(&mut self, other: &Grads) {
        assert_eq!(self.by_param.len(), other.by_param.len());
        for (dst, src) in self.by_param.iter_mut().zip(&other.by_param) {
            if let Some(s) = src {
                match dst {
                    Some(d) => {
                        for (a, b) in d.data_mut().iter_mut().zip(s.data()) {
                            *a += b;
                        }
                    }
                    None => *dst = Some(s.clone()),
                }
            }
        }
    }
}

/// Eager gradient tape. Each builder method runs the forward computation
/// immediately, records the op, and checks the result for non-finite values.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: &'static str, value: Tensor, operation: Op, needs_grad: bool) -> Result<NodeId, AdError> {
        if !value.all_finite() {
            return Err(AdError::NonFinite { op });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: operation,
            needs_grad,
        });
        Ok(id)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), AdError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AdError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn expect_scalar(&self, op: &'static str, s: NodeId) -> Result<(), AdError> {
        if self.value(s).len() != 1 {
            return Err(AdError::Invalid {
                op,
                msg: format!("expected scalar node, got shape {:?}", self.value(s).shape()),
            });
        }
        Ok(())
    }

    // ---- leaves ----

    /// Leaf node for a registered parameter. Repeated calls for the same
    /// parameter return the same node, so gradients accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Result<NodeId, AdError> {
        if let Some(n) = self.param_nodes[id.0] {
            return Ok(n);
        }
        let trainable = self.params.is_trainable(id);
        let value = self.params.value(id).clone();
        let n = self.push("param", value, Op::Param(id.0), trainable)?;
        self.param_nodes[id.0] = Some(n);
        Ok(n)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, AdError> {
        self.push("const", value, Op::Const, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<NodeId, AdError> {
        self.constant(Tensor::scalar(v))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.same_shape("add", a, b)?;
        let v = Tensor::new(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        );
        let ng = self.needs(a) || self.needs(b);
        self.push("add", v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.same_shape("sub", a, b)?;
        let v = Tensor::new(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x - y)
                .collect(),
        );
        let ng = self.needs(a) || self.needs(b);
        self.push("sub", v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.same_shape("mul", a, b)?;
        let v = Tensor::new(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        );
        let ng = self.needs(a) || self.needs(b);
        self.push("mul", v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId, AdError> {
        let v = self.value(a).map(|x| x * k);
        let ng = self.needs(a);
        self.push("scale", v, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> Result<NodeId, AdError> {
        let v = self.value(a).map(|x| x + k);
        let ng = self.needs(a);
        self.push("add_scalar", v, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push("relu", v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let v = self.value(a).map(stable_sigmoid);
        let ng = self.needs(a);
        self.push("sigmoid", v, Op::Sigmoid(a), ng)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let v = self.value(a).map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        let ng = self.needs(a);
        self.push("softplus", v, Op::Softplus(a), ng)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(AdError::NonFinite { op: "sqrt" });
        }
        let v = self.value(a).map(f64::sqrt);
        let ng = self.needs(a);
        self.push("sqrt", v, Op::Sqrt(a), ng)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.needs(a);
        self.push("sum_all", v, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let n = self.value(a).len();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `[r, c] -> [r]`, mean over each row.
    pub fn row_mean(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 2 {
            return Err(AdError::Invalid {
                op: "row_mean",
                msg: format!("expected rank-2 input, got {shape:?}"),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let d = self.value(a).data();
        let v = Tensor::new(
            &[r],
            (0..r)
                .map(|i| d[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
                .collect(),
        );
        let ng = self.needs(a);
        self.push("row_mean", v, Op::RowMean(a), ng)
    }

    // ---- scalar-node broadcasts ----

    pub fn sub_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, AdError> {
        self.expect_scalar("sub_scalar_node", s)?;
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x - sv);
        let ng = self.needs(a) || self.needs(s);
        self.push("sub_scalar_node", v, Op::SubS(a, s), ng)
    }

    pub fn mul_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, AdError> {
        self.expect_scalar("mul_scalar_node", s)?;
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x * sv);
        let ng = self.needs(a) || self.needs(s);
        self.push("mul_scalar_node", v, Op::MulS(a, s), ng)
    }

    pub fn div_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, AdError> {
        self.expect_scalar("div_scalar_node", s)?;
        let sv = self.value(s).item();
        if sv == 0.0 {
            return Err(AdError::NonFinite { op: "div_scalar_node" });
        }
        let v = self.value(a).map(|x| x / sv);
        let ng = self.needs(a) || self.needs(s);
        self.push("div_scalar_node", v, Op::DivS(a, s), ng)
    }

    // ---- row broadcasts ----

    fn rows_shape(&self, op: &'static str, a: NodeId, m: NodeId) -> Result<(usize, usize), AdError> {
        let sa = self.value(a).shape().to_vec();
        let sm = self.value(m).shape().to_vec();
        if sa.len() != 2 || sm.len() != 1 || sa[0] != sm[0] {
            return Err(AdError::ShapeMismatch { op, lhs: sa, rhs: sm });
        }
        Ok((sa[0], sa[1]))
    }

    pub fn mul_rows(&mut self, a: NodeId, m: NodeId) -> Result<NodeId, AdError> {
        let (r, c) = self.rows_shape("mul_rows", a, m)?;
        let (da, dm) = (self.value(a).data(), self.value(m).data());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = da[i * c + j] * dm[i];
            }
        }
        let ng = self.needs(a) || self.needs(m);
        self.push("mul_rows", Tensor::new(&[r, c], out), Op::MulRows(a, m), ng)
    }

    pub fn div_rows(&mut self, a: NodeId, d: NodeId) -> Result<NodeId, AdError> {
        let (r, c) = self.rows_shape("div_rows", a, d)?;
        if self.value(d).data().iter().any(|&x| x == 0.0) {
            return Err(AdError::NonFinite { op: "div_rows" });
        }
        let (da, dd) = (self.value(a).data(), self.value(d).data());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = da[i * c + j] / dd[i];
            }
        }
        let ng = self.needs(a) || self.needs(d);
        self.push("div_rows", Tensor::new(&[r, c], out), Op::DivRows(a, d), ng)
    }

    // ---- structured linear maps ----

    /// Applies a constant matrix `[m, n]` to every row of `[r, n]`,
    /// producing `[r, m]`. This is how the (I)DFTs enter the graph.
    pub fn mat_rows(&mut self, a: NodeId, matrix: Rc<Tensor>) -> Result<NodeId, AdError> {
        let sa = self.value(a).shape().to_vec();
        let sm = matrix.shape().to_vec();
        if sa.len() != 2 || sm.len() != 2 || sa[1] != sm[1] {
            return Err(AdError::ShapeMismatch {
                op: "mat_rows",
                lhs: sa,
                rhs: sm,
            });
        }
        let (r, n, m) = (sa[0], sa[1], sm[0]);
        let da = self.value(a).data();
        let dm = matrix.data();
        let mut out = vec![0.0; r * m];
        for i in 0..r {
            let row = &da[i * n..(i + 1) * n];
            for k in 0..m {
                let mrow = &dm[k * n..(k + 1) * n];
                let mut acc = 0.0;
                for j in 0..n {
                    acc += mrow[j] * row[j];
                }
                out[i * m + k] = acc;
            }
        }
        let ng = self.needs(a);
        self.push("mat_rows", Tensor::new(&[r, m], out), Op::MatRows(a, matrix), ng)
    }

    /// Causal time-varying convolution: `y[n] = Σ_l taps[n, l] · x[n − l]`,
    /// output the same length as the input (the tail spills past the slot and
    /// is dropped). Taps are constant per channel realization.
    pub fn tv_conv(&mut self, x: NodeId, taps: Rc<Tensor>) -> Result<NodeId, AdError> {
        let sx = self.value(x).shape().to_vec();
        let st = taps.shape().to_vec();
        if sx.len() != 1 || st.len() != 2 || st[0] != sx[0] {
            return Err(AdError::ShapeMismatch {
                op: "tv_conv",
                lhs: sx,
                rhs: st,
            });
        }
        let (n, l) = (st[0], st[1]);
        let dx = self.value(x).data();
        let dt = taps.data();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let lmax = l.min(i + 1);
            let mut acc = 0.0;
            for tap in 0..lmax {
                acc += dt[i * l + tap] * dx[i - tap];
            }
            out[i] = acc;
        }
        let ng = self.needs(x);
        self.push("tv_conv", Tensor::new(&[n], out), Op::TvConv(x, taps), ng)
    }

    /// `out[k] = a[idx[k]]` over a flat rank-1 input; the output takes the
    /// provided shape. Backward scatter-adds, so repeated indices are fine.
    pub fn gather(&mut self, a: NodeId, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<NodeId, AdError> {
        let d = self.value(a).data();
        if self.value(a).shape().len() != 1 {
            return Err(AdError::Invalid {
                op: "gather",
                msg: "input must be rank 1".into(),
            });
        }
        if out_shape.iter().product::<usize>() != idx.len() {
            return Err(AdError::Invalid {
                op: "gather",
                msg: format!("{} indices vs output shape {:?}", idx.len(), out_shape),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= d.len()) {
            return Err(AdError::Invalid {
                op: "gather",
                msg: format!("index {} out of range {}", bad, d.len()),
            });
        }
        let out: Vec<f64> = idx.iter().map(|&i| d[i]).collect();
        let ng = self.needs(a);
        self.push("gather", Tensor::new(out_shape, out), Op::Gather(a, idx), ng)
    }

    // ---- shape plumbing ----

    /// Concatenates along the leading axis; trailing dimensions must agree.
    pub fn concat0(&mut self, parts: &[NodeId]) -> Result<NodeId, AdError> {
        if parts.is_empty() {
            return Err(AdError::Invalid {
                op: "concat0",
                msg: "no inputs".into(),
            });
        }
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut lead = 0usize;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.value(p).shape();
            if s[1..] != tail[..] {
                return Err(AdError::ShapeMismatch {
                    op: "concat0",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat0", Tensor::new(&shape, data), Op::Concat0(parts.to_vec()), ng)
    }

    /// Slice `len` planes along the leading axis starting at `start`.
    pub fn slice0(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, AdError> {
        let shape = self.value(x).shape().to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(AdError::Invalid {
                op: "slice0",
                msg: format!("slice {start}+{len} out of {shape:?}"),
            });
        }
        let stride: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * stride..(start + len) * stride].to_vec();
        let mut out_shape = vec![len];
        out_shape.extend_from_slice(&shape[1..]);
        let ng = self.needs(x);
        self.push(
            "slice0",
            Tensor::new(&out_shape, data),
            Op::Slice0 { x, start, stride },
            ng,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, AdError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(AdError::Invalid {
                op: "reshape",
                msg: format!("{:?} -> {:?}", self.value(x).shape(), shape),
            });
        }
        let v = self.value(x).clone().reshaped(shape);
        let ng = self.needs(x);
        self.push("reshape", v, Op::Reshape(x), ng)
    }

    // ---- neural layers ----

    /// Grouped 2-D convolution with odd kernels, "same" zero padding and
    /// optional dilation. `x: [c_in, h, w]`, `weight: [c_out, c_in/groups, kh, kw]`,
    /// optional `bias: [c_out]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        groups: usize,
        dilation: (usize, usize),
    ) -> Result<NodeId, AdError> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(weight).shape().to_vec();
        if sx.len() != 3 || sw.len() != 4 {
            return Err(AdError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (c_in, h, w) = (sx[0], sx[1], sx[2]);
        let (c_out, cpg, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if groups == 0
            || c_in % groups != 0
            || c_out % groups != 0
            || cpg != c_in / groups
            || kh % 2 == 0
            || kw % 2 == 0
        {
            return Err(AdError::Invalid {
                op: "conv2d",
                msg: format!("x {sx:?} w {sw:?} groups {groups}"),
            });
        }
        if let Some(b) = bias {
            let sb = self.value(b).shape();
            if sb != [c_out] {
                return Err(AdError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![c_out],
                    rhs: sb.to_vec(),
                });
            }
        }
        let (dh, dw) = dilation;
        let (ch, cw) = (kh / 2, kw / 2);
        let dx = self.value(x).data();
        let dwt = self.value(weight).data();
        let mut out = vec![0.0; c_out * h * w];
        let out_per_group = c_out / groups;
        for co in 0..c_out {
            let g = co / out_per_group;
            let ci0 = g * cpg;
            for ki in 0..kh {
                let di = ki as isize - ch as isize;
                for kj in 0..kw {
                    let dj = kj as isize - cw as isize;
                    for (cl, ci) in (ci0..ci0 + cpg).enumerate() {
                        let wv = dwt[((co * cpg + cl) * kh + ki) * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        for i in 0..h {
                            let si = i as isize + di * dh as isize;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let xrow = &dx[(ci * h + si as usize) * w..(ci * h + si as usize + 1) * w];
                            let orow = &mut out[(co * h + i) * w..(co * h + i + 1) * w];
                            let shift = dj * dw as isize;
                            let (j0, j1) = conv_col_range(w, shift);
                            for j in j0..j1 {
                                orow[j] += wv * xrow[(j as isize + shift) as usize];
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            let db = self.value(b).data();
            for co in 0..c_out {
                for v in &mut out[co * h * w..(co + 1) * h * w] {
                    *v += db[co];
                }
            }
        }
        let ng = self.needs(x) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        self.push(
            "conv2d",
            Tensor::new(&[c_out, h, w], out),
            Op::Conv2d {
                x,
                w: weight,
                bias,
                groups,
                dilation,
            },
            ng,
        )
    }

    /// Fully connected layer: `x: [n]`, `w: [m, n]`, `b: [m]` → `[m]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sx.len() != 1 || sw.len() != 2 || sw[1] != sx[0] || sb != [sw[0]] {
            return Err(AdError::Invalid {
                op: "dense",
                msg: format!("x {sx:?} w {sw:?} b {sb:?}"),
            });
        }
        let (m, n) = (sw[0], sw[1]);
        let dx = self.value(x).data();
        let dw = self.value(w).data();
        let db = self.value(b).data();
        let mut out = vec![0.0; m];
        for k in 0..m {
            let row = &dw[k * n..(k + 1) * n];
            let mut acc = db[k];
            for j in 0..n {
                acc += row[j] * dx[j];
            }
            out[k] = acc;
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push("dense", Tensor::new(&[m], out), Op::Dense { x, w, b }, ng)
    }

    /// Layer normalization over the whole `[c, h, w]` map with per-channel
    /// affine parameters `gamma`, `beta` of shape `[c]`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, AdError> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 3 {
            return Err(AdError::Invalid {
                op: "layer_norm",
                msg: format!("expected rank-3 input, got {sx:?}"),
            });
        }
        let c = sx[0];
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(AdError::Invalid {
                op: "layer_norm",
                msg: "gamma/beta must have shape [channels]".into(),
            });
        }
        let plane: usize = sx[1] * sx[2];
        let n = (c * plane) as f64;
        let dx = self.value(x).data();
        let mean = dx.iter().sum::<f64>() / n;
        let var = dx.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        let dg = self.value(gamma).data();
        let db = self.value(beta).data();
        let mut out = vec![0.0; dx.len()];
        for ci in 0..c {
            for p in 0..plane {
                let i = ci * plane + p;
                out[i] = dg[ci] * (dx[i] - mean) * inv_std + db[ci];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            "layer_norm",
            Tensor::new(&sx, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            ng,
        )
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Returns per-parameter gradients for
    /// every trainable parameter the loss depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Grads, AdError> {
        if self.value(loss).len() != 1 {
            return Err(AdError::Invalid {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || matches!(self.nodes[idx].op, Op::Param(_) | Op::Const) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
        }
        let mut by_param: Vec<Option<Tensor>> = vec![None; self.params.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(p) = node.op {
                if let Some(g) = grads[idx].take() {
                    by_param[p] = Some(g);
                }
            }
        }
        Ok(Grads { by_param })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], id: NodeId, f: &mut dyn FnMut(&mut Tensor)| {
            let slot = &mut grads[id.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(self.value(id).shape()));
            }
            f(slot.as_mut().unwrap());
        };
        match &self.nodes[idx].op {
            Op::Param(_) | Op::Const => {}
            Op::Add(a, b) => {
                for &t in &[*a, *b] {
                    if self.needs(t) {
                        acc(grads, t, &mut |gt| {
                            for (d, s) in gt.data_mut().iter_mut().zip(g.data()) {
                                *d += s;
                            }
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, &mut |gt| {
                        for (d, s) in gt.data_mut().iter_mut().zip(g.data()) {
                            *d += s;
                        }
                    });
                }
                if self.needs(*b) {
                    acc(grads, *b, &mut |gt| {
                        for (d, s) in gt.data_mut().iter_mut().zip(g.data()) {
                            *d -= s;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    acc(grads, *a, &mut |gt| {
                        for i in 0..db.len() {
                            gt.data_mut()[i] += g.data()[i] * db[i];
                        }
                    });
                }
                if self.needs(*b) {
                    acc(grads, *b, &mut |gt| {
                        for i in 0..da.len() {
                            gt.data_mut()[i] += g.data()[i] * da[i];
                        }
                    });
                }
            }
            Op::Scale(a, k) => {
                if self.needs(*a) {
                    acc(grads, *a, &mut |gt| {
                        for (d, s) in gt.data_mut().iter_mut().zip(g.data()) {
                            *d += s * k;
                        }
                    });
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    acc(grads, *a, &mut |gt| {
                        for (d, s) in gt.data_mut().iter_mut().zip(g.data()) {
                            *d += s;
                        }
                    });
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let dx = self.value(*a).data();
                    acc(grads, *a, &mut |gt| {
                        for i in 0..dx.len() {
                            if dx[i] > 0.0 {
                                gt.data_mut()[i] += g.data()[i];
                            }
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let y = self.nodes[idx].value.data();
                    acc(grads, *a, &mut |gt| {
                        for i in 0..y.len() {
                            gt.data_mut()[i] += g.data()[i] * y[i] * (1.0 - y[i]);
                        }
                    });
                }
            }
            Op::Softplus(a) => {
                if self.needs(*a) {
                    let dx = self.value(*a).data();
                    acc(grads, *a, &mut |gt| {
                        for i in 0..dx.len() {
                            gt.data_mut()[i] += g.data()[i] * stable_sigmoid(dx[i]);
                        }
                    });
                }
            }
            Op::Sqrt(a) => {
                if self.needs(*a) {
                    let y = self.nodes[idx].value.data();
                    acc(grads, *a, &mut |gt| {
                        for i in 0..y.len() {
                            gt.data_mut()[i] += g.data()[i] * 0.5 / y[i];
                        }
                    });
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let gv = g.item();
                    acc(grads, *a, &mut |gt| {
                        for d in gt.data_mut() {
                            *d += gv;
                        }
                    });
                }
            }
            Op::RowMean(a) => {
                if self.needs(*a) {
                    let c = self.value(*a).shape()[1];
                    acc(grads, *a, &mut |gt| {
                        for (i, gi) in g.data().iter().enumerate() {
                            let inv = gi / c as f64;
                            for d in &mut gt.data_mut()[i * c..(i + 1) * c] {
                                *d += inv;
                            }
                        }
                    });
                }
            }
            Op::SubS(a, s) => {
                if self.needs(*a) {
                    acc(grads, *a, &mut |gt| {
                        for (d, gv) in gt.data_mut().iter_mut().zip(g.data()) {
                            *d += gv;
                        }
                    });
                }
                if self.needs(*s) {
                    let total: f64 = g.data().iter().sum();
                    acc(grads, *s, &mut |gt| gt.data_mut()[0] -= total);
                }
            }
            Op::MulS(a, s) => {
                let sv = self.value(*s).item();
                if self.needs(*a) {
                    acc(grads, *a, &mut |gt| {
                        for (d, gv) in gt.data_mut().iter_mut().zip(g.data()) {
                            *d += gv * sv;
                        }
                    });
                }
                if self.needs(*s) {
                    let da = self.value(*a).data();
                    let total: f64 = g.data().iter().zip(da).map(|(gv, av)| gv * av).sum();
                    acc(grads, *s, &mut |gt| gt.data_mut()[0] += total);
                }
            }
            Op::DivS(a, s) => {
                let sv = self.value(*s).item();
                if self.needs(*a) {
                    acc(grads, *a, &mut |gt| {
                        for (d, gv) in gt.data_mut().iter_mut().zip(g.data()) {
                            *d += gv / sv;
                        }
                    });
                }
                if self.needs(*s) {
                    let da = self.value(*a).data();
                    let total: f64 = g.data().iter().zip(da).map(|(gv, av)| gv * av).sum();
                    acc(grads, *s, &mut |gt| gt.data_mut()[0] -= total / (sv * sv));
                }
            }
            Op::MulRows(a, m) => {
                let (r, c) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1])
                };
                if self.needs(*a) {
                    let dm = self.value(*m).data();
                    acc(grads, *a, &mut |gt| {
                        for i in 0..r {
                            for j in 0..c {
                                gt.data_mut()[i * c + j] += g.data()[i * c + j] * dm[i];
                            }
                        }
                    });
                }
                if self.needs(*m) {
                    let da = self.value(*a).data();
                    acc(grads, *m, &mut |gt| {
                        for i in 0..r {
                            let mut acc_v = 0.0;
                            for j in 0..c {
                                acc_v += g.data()[i * c + j] * da[i * c + j];
                            }
                            gt.data_mut()[i] += acc_v;
                        }
                    });
                }
            }
            Op::DivRows(a, dnode) => {
                let (r, c) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1])
                };
                let dd = self.value(*dnode).data();
                if self.needs(*a) {
                    acc(grads, *a, &mut |gt| {
                        for i in 0..r {
                            for j in 0..c {
                                gt.data_mut()[i * c + j] += g.data()[i * c + j] / dd[i];
                            }
                        }
                    });
                }
                if self.needs(*dnode) {
                    let da = self.value(*a).data();
                    acc(grads, *dnode, &mut |gt| {
                        for i in 0..r {
                            let mut acc_v = 0.0;
                            for j in 0..c {
                                acc_v += g.data()[i * c + j] * da[i * c + j];
                            }
                            gt.data_mut()[i] -= acc_v / (dd[i] * dd[i]);
                        }
                    });
                }
            }
            Op::MatRows(a, matrix) => {
                if self.needs(*a) {
                    let sm = matrix.shape();
                    let (m, n) = (sm[0], sm[1]);
                    let r = self.value(*a).shape()[0];
                    let dm = matrix.data();
                    acc(grads, *a, &mut |gt| {
                        for i in 0..r {
                            for k in 0..m {
                                let gv = g.data()[i * m + k];
                                if gv == 0.0 {
                                    continue;
                                }
                                let mrow = &dm[k * n..(k + 1) * n];
                                let grow = &mut gt.data_mut()[i * n..(i + 1) * n];
                                for j in 0..n {
                                    grow[j] += gv * mrow[j];
                                }
                            }
                        }
                    });
                }
            }
            Op::TvConv(x, taps) => {
                if self.needs(*x) {
                    let st = taps.shape();
                    let (n, l) = (st[0], st[1]);
                    let dt = taps.data();
                    acc(grads, *x, &mut |gt| {
                        for i in 0..n {
                            let gv = g.data()[i];
                            if gv == 0.0 {
                                continue;
                            }
                            let lmax = l.min(i + 1);
                            for tap in 0..lmax {
                                gt.data_mut()[i - tap] += gv * dt[i * l + tap];
                            }
                        }
                    });
                }
            }
            Op::Gather(a, idxs) => {
                if self.needs(*a) {
                    acc(grads, *a, &mut |gt| {
                        for (k, &src) in idxs.iter().enumerate() {
                            gt.data_mut()[src] += g.data()[k];
                        }
                    });
                }
            }
            Op::Concat0(parts) => {
                let mut offset = 0usize;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        acc(grads, p, &mut |gt| {
                            for (d, s) in gt.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                                *d += s;
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::Slice0 { x, start, stride } => {
                if self.needs(*x) {
                    let off = start * stride;
                    acc(grads, *x, &mut |gt| {
                        for (i, s) in g.data().iter().enumerate() {
                            gt.data_mut()[off + i] += s;
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    acc(grads, *x, &mut |gt| {
                        for (d, s) in gt.data_mut().iter_mut().zip(g.data()) {
                            *d += s;
                        }
                    });
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                groups,
                dilation,
            } => self.backprop_conv2d(*x, *w, *bias, *groups, *dilation, g, grads, &acc),
            Op::Dense { x, w, b } => {
                let sw = self.value(*w).shape();
                let (m, n) = (sw[0], sw[1]);
                if self.needs(*x) {
                    let dw = self.value(*w).data();
                    acc(grads, *x, &mut |gt| {
                        for k in 0..m {
                            let gv = g.data()[k];
                            if gv == 0.0 {
                                continue;
                            }
                            let row = &dw[k * n..(k + 1) * n];
                            for j in 0..n {
                                gt.data_mut()[j] += gv * row[j];
                            }
                        }
                    });
                }
                if self.needs(*w) {
                    let dx = self.value(*x).data();
                    acc(grads, *w, &mut |gt| {
                        for k in 0..m {
                            let gv = g.data()[k];
                            if gv == 0.0 {
                                continue;
                            }
                            let row = &mut gt.data_mut()[k * n..(k + 1) * n];
                            for j in 0..n {
                                row[j] += gv * dx[j];
                            }
                        }
                    });
                }
                if self.needs(*b) {
                    acc(grads, *b, &mut |gt| {
                        for (d, s) in gt.data_mut().iter_mut().zip(g.data()) {
                            *d += s;
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let sx = self.value(*x).shape();
                let (c, plane) = (sx[0], sx[1] * sx[2]);
                let n = (c * plane) as f64;
                let dx = self.value(*x).data();
                let dg = self.value(*gamma).data();
                // x̂ recomputed from stored statistics
                let xhat = |i: usize| (dx[i] - mean) * inv_std;
                if self.needs(*gamma) {
                    acc(grads, *gamma, &mut |gt| {
                        for ci in 0..c {
                            let mut s = 0.0;
                            for p in 0..plane {
                                let i = ci * plane + p;
                                s += g.data()[i] * xhat(i);
                            }
                            gt.data_mut()[ci] += s;
                        }
                    });
                }
                if self.needs(*beta) {
                    acc(grads, *beta, &mut |gt| {
                        for ci in 0..c {
                            let mut s = 0.0;
                            for p in 0..plane {
                                s += g.data()[ci * plane + p];
                            }
                            gt.data_mut()[ci] += s;
                        }
                    });
                }
                if self.needs(*x) {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for ci in 0..c {
                        for p in 0..plane {
                            let i = ci * plane + p;
                            let d = g.data()[i] * dg[ci];
                            sum_d += d;
                            sum_dx += d * xhat(i);
                        }
                    }
                    let (m_d, m_dx) = (sum_d / n, sum_dx / n);
                    acc(grads, *x, &mut |gt| {
                        for ci in 0..c {
                            for p in 0..plane {
                                let i = ci * plane + p;
                                let d = g.data()[i] * dg[ci];
                                gt.data_mut()[i] += inv_std * (d - m_d - xhat(i) * m_dx);
                            }
                        }
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv2d(
        &self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        groups: usize,
        dilation: (usize, usize),
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        acc: &dyn Fn(&mut [Option<Tensor>], NodeId, &mut dyn FnMut(&mut Tensor)),
    ) {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let (c_out, cpg, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let (dh, dw_) = dilation;
        let (ch, cw) = (kh / 2, kw / 2);
        let out_per_group = c_out / groups;
        let dx = self.value(x).data();
        let dwt = self.value(w).data();
        let _ = c_in;
        if self.needs(x) {
            acc(grads, x, &mut |gt| {
                for co in 0..c_out {
                    let g0 = co / out_per_group * cpg;
                    for ki in 0..kh {
                        let di = ki as isize - ch as isize;
                        for kj in 0..kw {
                            let dj = (kj as isize - cw as isize) * dw_ as isize;
                            for cl in 0..cpg {
                                let wv = dwt[((co * cpg + cl) * kh + ki) * kw + kj];
                                if wv == 0.0 {
                                    continue;
                                }
                                let ci = g0 + cl;
                                for i in 0..h {
                                    let si = i as isize + di * dh as isize;
                                    if si < 0 || si >= h as isize {
                                        continue;
                                    }
                                    let grow = &g.data()[(co * h + i) * wd..(co * h + i + 1) * wd];
                                    let xg = &mut gt.data_mut()
                                        [(ci * h + si as usize) * wd..(ci * h + si as usize + 1) * wd];
                                    let (j0, j1) = conv_col_range(wd, dj);
                                    for j in j0..j1 {
                                        xg[(j as isize + dj) as usize] += wv * grow[j];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        if self.needs(w) {
            acc(grads, w, &mut |gt| {
                for co in 0..c_out {
                    let g0 = co / out_per_group * cpg;
                    for ki in 0..kh {
                        let di = ki as isize - ch as isize;
                        for kj in 0..kw {
                            let dj = (kj as isize - cw as isize) * dw_ as isize;
                            for cl in 0..cpg {
                                let ci = g0 + cl;
                                let mut acc_v = 0.0;
                                for i in 0..h {
                                    let si = i as isize + di * dh as isize;
                                    if si < 0 || si >= h as isize {
                                        continue;
                                    }
                                    let grow = &g.data()[(co * h + i) * wd..(co * h + i + 1) * wd];
                                    let xrow = &dx
                                        [(ci * h + si as usize) * wd..(ci * h + si as usize + 1) * wd];
                                    let (j0, j1) = conv_col_range(wd, dj);
                                    for j in j0..j1 {
                                        acc_v += grow[j] * xrow[(j as isize + dj) as usize];
                                    }
                                }
                                gt.data_mut()[((co * cpg + cl) * kh + ki) * kw + kj] += acc_v;
                            }
                        }
                    }
                }
            });
        }
        if let Some(b) = bias {
            if self.needs(b) {
                acc(grads, b, &mut |gt| {
                    for co in 0..c_out {
                        let mut s = 0.0;
                        for v in &g.data()[co * h * wd..(co + 1) * h * wd] {
                            s += v;
                        }
                        gt.data_mut()[co] += s;
                    }
                });
            }
        }
    }
}

/// Valid output-column range `[j0, j1)` such that `j + shift` stays in `[0, w)`.
fn conv_col_range(w: usize, shift: isize) -> (usize, usize) {
    let j0 = (-shift).max(0) as usize;
    let j1 = (w as isize).min(w as isize - shift).max(0) as usize;
    (j0.min(w), j1)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
