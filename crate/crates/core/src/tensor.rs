//! Reverse-mode autodiff over dense f32 tensors.
//!
//! A `Tape` owns every node created on it: forward values are computed
//! eagerly when an op is recorded, gradients are filled in by replaying
//! the op list in reverse. Storage is f32, row-major, no strided views;
//! reductions and matmul accumulate in f64. Broadcasting is limited to
//! scalar-with-tensor; any other shape mixing is an error.
//!
//! One tape is single-threaded. Independent tapes share nothing, so they
//! may run on different threads freely.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (rows, cols) view of a rank-1 or rank-2 shape. Rank-1 is one row.
fn as_rows(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddRow { x: NodeId, bias: NodeId },
    Scale { x: NodeId, k: f32 },
    Neg { x: NodeId },
    Exp { x: NodeId },
    Log { x: NodeId },
    Sigmoid { x: NodeId },
    Softplus { x: NodeId },
    Matmul { a: NodeId, b: NodeId },
    MatmulNt { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    SoftmaxRows { x: NodeId },
    LogSoftmaxRows { x: NodeId },
    CrossEntropyRows { logits: NodeId, targets: Vec<usize> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f32 },
    Sum { x: NodeId, axis: Option<usize> },
    Mean { x: NodeId, axis: Option<usize> },
    MaskedMeanRows { x: NodeId, keep: Vec<bool> },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    EmbedLookup { table: NodeId, indices: Vec<usize> },
    L2NormalizeRows { x: NodeId },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    tracked: bool,
    op: Op,
}

/// A named parameter living outside any tape. Training steps register it
/// as a leaf on a fresh tape and read the gradient back after `backward`.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(numel(&shape), data.len());
        Parameter { name: name.into(), shape, data, trainable: true }
    }

    pub fn frozen(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let mut p = Parameter::new(name, shape, data);
        p.trainable = false;
        p
    }
}

/// Ordered collection of parameters with unique names.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn push(&mut self, p: Parameter) {
        assert!(
            self.params.iter().all(|q| q.name != p.name),
            "duplicate parameter name {}",
            p.name
        );
        self.params.push(p);
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, tracked: bool, op: Op) -> NodeId {
        debug_assert_eq!(numel(&shape), data.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { shape, data, tracked, op });
        self.grads.push(None);
        id
    }

    /// Untracked input: gradient never flows into it.
    pub fn constant(&mut self, data: Vec<f32>, shape: Vec<usize>) -> NodeId {
        assert_eq!(numel(&shape), data.len(), "constant: shape/data mismatch");
        self.push(shape, data, false, Op::Constant)
    }

    pub fn scalar_const(&mut self, v: f32) -> NodeId {
        self.constant(vec![v], vec![1])
    }

    /// Tracked input: receives a gradient slot during `backward`.
    pub fn leaf(&mut self, data: Vec<f32>, shape: Vec<usize>) -> NodeId {
        assert_eq!(numel(&shape), data.len(), "leaf: shape/data mismatch");
        self.push(shape, data, true, Op::Leaf)
    }

    /// Register a parameter as a leaf (tracked iff trainable).
    pub fn param(&mut self, p: &Parameter) -> NodeId {
        if p.trainable {
            self.leaf(p.data.clone(), p.shape.clone())
        } else {
            self.constant(p.data.clone(), p.shape.clone())
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn item(&self, id: NodeId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient accumulated by the last `backward`; `None` if no gradient
    /// reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn tracked_any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.tracked(i))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn zip_shapes(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(sa.to_vec())
        } else if numel(sa) == 1 {
            Ok(sb.to_vec())
        } else if numel(sb) == 1 {
            Ok(sa.to_vec())
        } else {
            Err(Error::Shape { op, lhs: sa.to_vec(), rhs: sb.to_vec() })
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.zip_shapes("add", a, b)?;
        let (da, db) = (self.value(a), self.value(b));
        let n = numel(&shape);
        let out: Vec<f32> = (0..n)
            .map(|i| {
                let x = if da.len() == 1 { da[0] } else { da[i] };
                let y = if db.len() == 1 { db[0] } else { db[i] };
                x + y
            })
            .collect();
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(shape, out, tracked, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.zip_shapes("sub", a, b)?;
        let (da, db) = (self.value(a), self.value(b));
        let n = numel(&shape);
        let out: Vec<f32> = (0..n)
            .map(|i| {
                let x = if da.len() == 1 { da[0] } else { da[i] };
                let y = if db.len() == 1 { db[0] } else { db[i] };
                x - y
            })
            .collect();
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(shape, out, tracked, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.zip_shapes("mul", a, b)?;
        let (da, db) = (self.value(a), self.value(b));
        let n = numel(&shape);
        let out: Vec<f32> = (0..n)
            .map(|i| {
                let x = if da.len() == 1 { da[0] } else { da[i] };
                let y = if db.len() == 1 { db[0] } else { db[i] };
                x * y
            })
            .collect();
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(shape, out, tracked, Op::Mul { a, b }))
    }

    /// `x` is [r,c], `bias` is [c]; adds bias to every row.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = as_rows(self.shape(x)).ok_or_else(|| Error::Shape {
            op: "add_row",
            lhs: self.shape(x).to_vec(),
            rhs: self.shape(bias).to_vec(),
        })?;
        if self.shape(bias) != [c] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let xd = self.value(x);
        let bd = self.value(bias);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] + bd[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked_any(&[x, bias]);
        Ok(self.push(shape, out, tracked, Op::AddRow { x, bias }))
    }

    pub fn scale(&mut self, x: NodeId, k: f32) -> NodeId {
        let out: Vec<f32> = self.value(x).iter().map(|v| v * k).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        self.push(shape, out, tracked, Op::Scale { x, k })
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f32> = self.value(x).iter().map(|v| -v).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        self.push(shape, out, tracked, Op::Neg { x })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f32> = self.value(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        self.push(shape, out, tracked, Op::Exp { x })
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f32> = self.value(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        self.push(shape, out, tracked, Op::Log { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f32> = self.value(x).iter().map(|v| stable_sigmoid(*v)).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        self.push(shape, out, tracked, Op::Sigmoid { x })
    }

    /// log(1 + exp(x)), overflow-safe.
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f32> = self.value(x).iter().map(|v| stable_softplus(*v)).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        self.push(shape, out, tracked, Op::Softplus { x })
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// Rank-2 [m,k]·[k,n] or batched rank-3 [b,m,k]·[b,k,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape_err = || Error::Shape { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k1], [k2, n]) if k1 == k2 => (1usize, *m, *k1, *n),
            ([b1, m, k1], [b2, k2, n]) if b1 == b2 && k1 == k2 => (*b1, *m, *k1, *n),
            _ => return Err(shape_err()),
        };
        let da = self.value(a);
        let db = self.value(b);
        let mut out = vec![0.0f32; batch * m * n];
        for t in 0..batch {
            let ao = t * m * k;
            let bo = t * k * n;
            let oo = t * m * n;
            matmul_f32(&da[ao..ao + m * k], &db[bo..bo + k * n], &mut out[oo..oo + m * n], m, k, n);
        }
        let shape = if batch == 1 && sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(shape, out, tracked, Op::Matmul { a, b }))
    }

    /// [m,k]·[n,k]ᵀ → [m,n]. Row-similarity workhorse.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k1], [n, k2]) if k1 == k2 => (*m, *k1, *n),
            _ => return Err(Error::Shape { op: "matmul_nt", lhs: sa, rhs: sb }),
        };
        let da = self.value(a);
        let db = self.value(b);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for l in 0..k {
                    acc += da[i * k + l] as f64 * db[j * k + l] as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(vec![m, n], out, tracked, Op::MatmulNt { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = match self.shape(x) {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::Shape { op: "transpose", lhs: s.to_vec(), rhs: vec![] });
            }
        };
        let xd = self.value(x);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(vec![c, r], out, tracked, Op::Transpose { x }))
    }

    // ── row-wise / reductions ───────────────────────────────────────

    /// Softmax along `axis` of a rank-1/rank-2 tensor, max-stabilized.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let rank = self.shape(x).len();
        match (rank, axis) {
            (1, 0) | (2, 1) => self.softmax_rows(x),
            (2, 0) => {
                let t = self.transpose(x)?;
                let s = self.softmax_rows(t)?;
                self.transpose(s)
            }
            _ => Err(Error::Validation(format!(
                "softmax: axis {axis} invalid for shape {:?}",
                self.shape(x)
            ))),
        }
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = as_rows(self.shape(x)).ok_or(Error::Shape {
            op: "softmax_rows",
            lhs: self.shape(x).to_vec(),
            rhs: vec![],
        })?;
        let xd = self.value(x);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                sum += e as f64;
            }
            for j in 0..c {
                out[i * c + j] = (out[i * c + j] as f64 / sum) as f32;
            }
        }
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(shape, out, tracked, Op::SoftmaxRows { x }))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = as_rows(self.shape(x)).ok_or(Error::Shape {
            op: "log_softmax_rows",
            lhs: self.shape(x).to_vec(),
            rhs: vec![],
        })?;
        let xd = self.value(x);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for j in 0..c {
                sum += ((row[j] - mx) as f64).exp();
            }
            let lse = mx as f64 + sum.ln();
            for j in 0..c {
                out[i * c + j] = (row[j] as f64 - lse) as f32;
            }
        }
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(shape, out, tracked, Op::LogSoftmaxRows { x }))
    }

    /// Mean over rows of (logsumexp(row) − row[target]). Scalar output.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (r, c) = as_rows(self.shape(logits)).ok_or(Error::Shape {
            op: "cross_entropy_rows",
            lhs: self.shape(logits).to_vec(),
            rhs: vec![],
        })?;
        if targets.len() != r {
            return Err(Error::contract(format!(
                "cross_entropy_rows: {} targets for {r} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::contract(format!(
                "cross_entropy_rows: target {t} out of bounds for {c} columns"
            )));
        }
        let xd = self.value(logits);
        let mut acc = 0.0f64;
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for &v in row {
                sum += ((v - mx) as f64).exp();
            }
            let lse = mx as f64 + sum.ln();
            acc += lse - row[targets[i]] as f64;
        }
        let loss = (acc / r as f64) as f32;
        let tracked = self.tracked(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            tracked,
            Op::CrossEntropyRows { logits, targets: targets.to_vec() },
        ))
    }

    /// Per-row normalization over the last dimension, then affine.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f32) -> Result<NodeId> {
        let (r, c) = as_rows(self.shape(x)).ok_or(Error::Shape {
            op: "layer_norm",
            lhs: self.shape(x).to_vec(),
            rhs: vec![],
        })?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(gain).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let xd = self.value(x);
        let gd = self.value(gain);
        let bd = self.value(bias);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let (mean, var) = row_moments(row);
            let inv_std = 1.0 / (var + eps as f64).sqrt();
            for j in 0..c {
                let xhat = (row[j] as f64 - mean) * inv_std;
                out[i * c + j] = (xhat as f32) * gd[j] + bd[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked_any(&[x, gain, bias]);
        Ok(self.push(shape, out, tracked, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn sum(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce(x, axis, true)
    }

    fn reduce(&mut self, x: NodeId, axis: Option<usize>, mean: bool) -> Result<NodeId> {
        let xd = self.value(x).to_vec();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        let op = if mean { Op::Mean { x, axis } } else { Op::Sum { x, axis } };
        match axis {
            None => {
                let mut acc = 0.0f64;
                for &v in &xd {
                    acc += v as f64;
                }
                if mean {
                    acc /= xd.len() as f64;
                }
                Ok(self.push(vec![1], vec![acc as f32], tracked, op))
            }
            Some(ax) => {
                let (r, c) = as_rows(&shape).ok_or(Error::Shape {
                    op: "reduce",
                    lhs: shape.clone(),
                    rhs: vec![],
                })?;
                match ax {
                    0 => {
                        let mut out = vec![0.0f32; c];
                        for j in 0..c {
                            let mut acc = 0.0f64;
                            for i in 0..r {
                                acc += xd[i * c + j] as f64;
                            }
                            if mean {
                                acc /= r as f64;
                            }
                            out[j] = acc as f32;
                        }
                        Ok(self.push(vec![c], out, tracked, op))
                    }
                    1 => {
                        let mut out = vec![0.0f32; r];
                        for i in 0..r {
                            let mut acc = 0.0f64;
                            for j in 0..c {
                                acc += xd[i * c + j] as f64;
                            }
                            if mean {
                                acc /= c as f64;
                            }
                            out[i] = acc as f32;
                        }
                        Ok(self.push(vec![r], out, tracked, op))
                    }
                    _ => Err(Error::Validation(format!("reduce: axis {ax} invalid for shape {shape:?}"))),
                }
            }
        }
    }

    /// Mean over the rows of [r,c] where `keep[i]` is true → [c].
    pub fn masked_mean_rows(&mut self, x: NodeId, keep: &[bool]) -> Result<NodeId> {
        let (r, c) = as_rows(self.shape(x)).ok_or(Error::Shape {
            op: "masked_mean_rows",
            lhs: self.shape(x).to_vec(),
            rhs: vec![],
        })?;
        if keep.len() != r {
            return Err(Error::contract(format!(
                "masked_mean_rows: mask of length {} for {r} rows",
                keep.len()
            )));
        }
        let m = keep.iter().filter(|&&k| k).count();
        if m == 0 {
            return Err(Error::contract("masked_mean_rows: mask keeps zero rows"));
        }
        let xd = self.value(x);
        let mut out = vec![0.0f32; c];
        for j in 0..c {
            let mut acc = 0.0f64;
            for i in 0..r {
                if keep[i] {
                    acc += xd[i * c + j] as f64;
                }
            }
            out[j] = (acc / m as f64) as f32;
        }
        let tracked = self.tracked(x);
        Ok(self.push(vec![c], out, tracked, Op::MaskedMeanRows { x, keep: keep.to_vec() }))
    }

    // ── structural ──────────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: empty part list"));
        }
        let c = as_rows(self.shape(parts[0]))
            .ok_or(Error::Shape { op: "concat_rows", lhs: self.shape(parts[0]).to_vec(), rhs: vec![] })?
            .1;
        let mut rows = 0usize;
        for &p in parts {
            let (r, pc) = as_rows(self.shape(p)).ok_or(Error::Shape {
                op: "concat_rows",
                lhs: self.shape(p).to_vec(),
                rhs: vec![],
            })?;
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let tracked = self.tracked_any(parts);
        Ok(self.push(vec![rows, c], out, tracked, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: empty part list"));
        }
        let r = as_rows(self.shape(parts[0]))
            .ok_or(Error::Shape { op: "concat_cols", lhs: self.shape(parts[0]).to_vec(), rhs: vec![] })?
            .0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = as_rows(self.shape(p)).ok_or(Error::Shape {
                op: "concat_cols",
                lhs: self.shape(p).to_vec(),
                rhs: vec![],
            })?;
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0f32; r * total];
        let mut off = 0usize;
        for (idx, &p) in parts.iter().enumerate() {
            let pc = widths[idx];
            let pd = self.value(p).to_vec();
            for i in 0..r {
                out[i * total + off..i * total + off + pc].copy_from_slice(&pd[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let tracked = self.tracked_any(parts);
        Ok(self.push(vec![r, total], out, tracked, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = as_rows(self.shape(x)).ok_or(Error::Shape {
            op: "slice_rows",
            lhs: self.shape(x).to_vec(),
            rhs: vec![],
        })?;
        if start + len > r {
            return Err(Error::contract(format!(
                "slice_rows: [{start}, {}) out of bounds for {r} rows",
                start + len
            )));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(vec![len, c], out, tracked, Op::SliceRows { x, start, len }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = as_rows(self.shape(x)).ok_or(Error::Shape {
            op: "slice_cols",
            lhs: self.shape(x).to_vec(),
            rhs: vec![],
        })?;
        if start + len > c {
            return Err(Error::contract(format!(
                "slice_cols: [{start}, {}) out of bounds for {c} cols",
                start + len
            )));
        }
        let xd = self.value(x);
        let mut out = vec![0.0f32; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(vec![r, len], out, tracked, Op::SliceCols { x, start, len }))
    }

    /// table is [vocab, d]; out row t is table[indices[t]].
    pub fn embed_lookup(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (v, d) = match self.shape(table) {
            [v, d] => (*v, *d),
            s => return Err(Error::Shape { op: "embed_lookup", lhs: s.to_vec(), rhs: vec![] }),
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("embed_lookup: token id {bad} >= vocab {v}")));
        }
        let td = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            out.extend_from_slice(&td[ix * d..(ix + 1) * d]);
        }
        let tracked = self.tracked(table);
        Ok(self.push(
            vec![indices.len(), d],
            out,
            tracked,
            Op::EmbedLookup { table, indices: indices.to_vec() },
        ))
    }

    /// Unit-normalize each row of a rank-1/rank-2 tensor.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = as_rows(self.shape(x)).ok_or(Error::Shape {
            op: "l2_normalize_rows",
            lhs: self.shape(x).to_vec(),
            rhs: vec![],
        })?;
        let xd = self.value(x);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let n = row_norm(row).max(1e-12);
            for j in 0..c {
                out[i * c + j] = (row[j] as f64 / n) as f32;
            }
        }
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(shape, out, tracked, Op::L2NormalizeRows { x }))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Populate gradients for every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar-shaped, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.tracked(loss) {
            return Err(Error::contract("backward: loss does not depend on any tracked leaf"));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].tracked {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let g = self.grads[idx].clone().unwrap();
            self.backward_op(NodeId(idx), &op, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f32]) {
        if !self.tracked(id) {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.grads[id.0] = Some(delta.to_vec()),
        }
    }

    /// Accumulate with scalar-broadcast awareness: if the target is a
    /// scalar but the gradient is not, the gradient is summed.
    fn accumulate_bcast(&mut self, id: NodeId, delta: &[f32]) {
        if !self.tracked(id) {
            return;
        }
        let n = numel(self.shape(id));
        if n == 1 && delta.len() > 1 {
            let mut acc = 0.0f64;
            for &d in delta {
                acc += d as f64;
            }
            self.accumulate(id, &[acc as f32]);
        } else {
            self.accumulate(id, delta);
        }
    }

    fn backward_op(&mut self, out: NodeId, op: &Op, g: &[f32]) {
        match op {
            Op::Leaf | Op::Constant => {}

            Op::Add { a, b } => {
                self.accumulate_bcast(*a, g);
                self.accumulate_bcast(*b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate_bcast(*a, g);
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                self.accumulate_bcast(*b, &neg);
            }
            Op::Mul { a, b } => {
                let da = self.value(*a).to_vec();
                let db = self.value(*b).to_vec();
                let n = g.len();
                let ga: Vec<f32> = (0..n)
                    .map(|i| g[i] * if db.len() == 1 { db[0] } else { db[i] })
                    .collect();
                let gb: Vec<f32> = (0..n)
                    .map(|i| g[i] * if da.len() == 1 { da[0] } else { da[i] })
                    .collect();
                self.accumulate_bcast(*a, &ga);
                self.accumulate_bcast(*b, &gb);
            }
            Op::AddRow { x, bias } => {
                self.accumulate(*x, g);
                let (r, c) = as_rows(self.shape(*x)).unwrap();
                let mut gb = vec![0.0f32; c];
                for j in 0..c {
                    let mut acc = 0.0f64;
                    for i in 0..r {
                        acc += g[i * c + j] as f64;
                    }
                    gb[j] = acc as f32;
                }
                self.accumulate(*bias, &gb);
            }
            Op::Scale { x, k } => {
                let gx: Vec<f32> = g.iter().map(|v| v * k).collect();
                self.accumulate(*x, &gx);
            }
            Op::Neg { x } => {
                let gx: Vec<f32> = g.iter().map(|v| -v).collect();
                self.accumulate(*x, &gx);
            }
            Op::Exp { x } => {
                let y = self.value(out).to_vec();
                let gx: Vec<f32> = g.iter().zip(&y).map(|(gv, yv)| gv * yv).collect();
                self.accumulate(*x, &gx);
            }
            Op::Log { x } => {
                let xd = self.value(*x).to_vec();
                let gx: Vec<f32> = g.iter().zip(&xd).map(|(gv, xv)| gv / xv).collect();
                self.accumulate(*x, &gx);
            }
            Op::Sigmoid { x } => {
                let y = self.value(out).to_vec();
                let gx: Vec<f32> = g.iter().zip(&y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                self.accumulate(*x, &gx);
            }
            Op::Softplus { x } => {
                let xd = self.value(*x).to_vec();
                let gx: Vec<f32> =
                    g.iter().zip(&xd).map(|(gv, xv)| gv * stable_sigmoid(*xv)).collect();
                self.accumulate(*x, &gx);
            }
            Op::Matmul { a, b } => {
                let sa = self.shape(*a).to_vec();
                let (batch, m, k, n) = match (sa.as_slice(), self.shape(*b)) {
                    ([m, k], [_, n]) => (1usize, *m, *k, *n),
                    ([b1, m, k], [_, _, n]) => (*b1, *m, *k, *n),
                    _ => unreachable!(),
                };
                let da = self.value(*a).to_vec();
                let db = self.value(*b).to_vec();
                let mut ga = vec![0.0f32; batch * m * k];
                let mut gb = vec![0.0f32; batch * k * n];
                for t in 0..batch {
                    let (ao, bo, oo) = (t * m * k, t * k * n, t * m * n);
                    // dA = g · Bᵀ
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0f64;
                            for j in 0..n {
                                acc += g[oo + i * n + j] as f64 * db[bo + l * n + j] as f64;
                            }
                            ga[ao + i * k + l] = acc as f32;
                        }
                    }
                    // dB = Aᵀ · g
                    for l in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0f64;
                            for i in 0..m {
                                acc += da[ao + i * k + l] as f64 * g[oo + i * n + j] as f64;
                            }
                            gb[bo + l * n + j] = acc as f32;
                        }
                    }
                }
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = {
                    let s = self.shape(*a);
                    (s[0], s[1])
                };
                let n = self.shape(*b)[0];
                let da = self.value(*a).to_vec();
                let db = self.value(*b).to_vec();
                // dA = g · B
                let mut ga = vec![0.0f32; m * k];
                for i in 0..m {
                    for l in 0..k {
                        let mut acc = 0.0f64;
                        for j in 0..n {
                            acc += g[i * n + j] as f64 * db[j * k + l] as f64;
                        }
                        ga[i * k + l] = acc as f32;
                    }
                }
                // dB = gᵀ · A
                let mut gb = vec![0.0f32; n * k];
                for j in 0..n {
                    for l in 0..k {
                        let mut acc = 0.0f64;
                        for i in 0..m {
                            acc += g[i * n + j] as f64 * da[i * k + l] as f64;
                        }
                        gb[j * k + l] = acc as f32;
                    }
                }
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::Transpose { x } => {
                let (r, c) = {
                    let s = self.shape(*x);
                    (s[0], s[1])
                };
                let mut gx = vec![0.0f32; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::SoftmaxRows { x } => {
                let (r, c) = as_rows(self.shape(*x)).unwrap();
                let y = self.value(out).to_vec();
                let mut gx = vec![0.0f32; r * c];
                for i in 0..r {
                    let base = i * c;
                    let mut dot = 0.0f64;
                    for j in 0..c {
                        dot += g[base + j] as f64 * y[base + j] as f64;
                    }
                    for j in 0..c {
                        gx[base + j] = (y[base + j] as f64 * (g[base + j] as f64 - dot)) as f32;
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::LogSoftmaxRows { x } => {
                let (r, c) = as_rows(self.shape(*x)).unwrap();
                let y = self.value(out).to_vec();
                let mut gx = vec![0.0f32; r * c];
                for i in 0..r {
                    let base = i * c;
                    let mut gsum = 0.0f64;
                    for j in 0..c {
                        gsum += g[base + j] as f64;
                    }
                    for j in 0..c {
                        let p = (y[base + j] as f64).exp();
                        gx[base + j] = (g[base + j] as f64 - p * gsum) as f32;
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::CrossEntropyRows { logits, targets } => {
                let (r, c) = as_rows(self.shape(*logits)).unwrap();
                let xd = self.value(*logits).to_vec();
                let scale = g[0] as f64 / r as f64;
                let mut gx = vec![0.0f32; r * c];
                for i in 0..r {
                    let row = &xd[i * c..(i + 1) * c];
                    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let mut sum = 0.0f64;
                    for &v in row {
                        sum += ((v - mx) as f64).exp();
                    }
                    for j in 0..c {
                        let p = ((row[j] - mx) as f64).exp() / sum;
                        let delta = if j == targets[i] { 1.0 } else { 0.0 };
                        gx[i * c + j] = ((p - delta) * scale) as f32;
                    }
                }
                self.accumulate(*logits, &gx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (r, c) = as_rows(self.shape(*x)).unwrap();
                let xd = self.value(*x).to_vec();
                let gd = self.value(*gain).to_vec();
                let mut gx = vec![0.0f32; r * c];
                let mut ggain = vec![0.0f32; c];
                let mut gbias = vec![0.0f32; c];
                for i in 0..r {
                    let row = &xd[i * c..(i + 1) * c];
                    let (mean, var) = row_moments(row);
                    let inv_std = 1.0 / (var + *eps as f64).sqrt();
                    let xhat: Vec<f64> =
                        row.iter().map(|&v| (v as f64 - mean) * inv_std).collect();
                    let gout = &g[i * c..(i + 1) * c];
                    let mut sum_dxhat = 0.0f64;
                    let mut sum_dxhat_xhat = 0.0f64;
                    for j in 0..c {
                        let dxhat = gout[j] as f64 * gd[j] as f64;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat[j];
                        ggain[j] += (gout[j] as f64 * xhat[j]) as f32;
                        gbias[j] += gout[j];
                    }
                    let n = c as f64;
                    for j in 0..c {
                        let dxhat = gout[j] as f64 * gd[j] as f64;
                        gx[i * c + j] =
                            (inv_std * (dxhat - sum_dxhat / n - xhat[j] * sum_dxhat_xhat / n))
                                as f32;
                    }
                }
                self.accumulate(*x, &gx);
                self.accumulate(*gain, &ggain);
                self.accumulate(*bias, &gbias);
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let is_mean = matches!(op, Op::Mean { .. });
                let shape = self.shape(*x).to_vec();
                let n = numel(&shape);
                match axis {
                    None => {
                        let k = if is_mean { g[0] / n as f32 } else { g[0] };
                        let gx = vec![k; n];
                        self.accumulate(*x, &gx);
                    }
                    Some(ax) => {
                        let (r, c) = as_rows(&shape).unwrap();
                        let mut gx = vec![0.0f32; r * c];
                        match ax {
                            0 => {
                                for i in 0..r {
                                    for j in 0..c {
                                        gx[i * c + j] =
                                            if is_mean { g[j] / r as f32 } else { g[j] };
                                    }
                                }
                            }
                            _ => {
                                for i in 0..r {
                                    for j in 0..c {
                                        gx[i * c + j] =
                                            if is_mean { g[i] / c as f32 } else { g[i] };
                                    }
                                }
                            }
                        }
                        self.accumulate(*x, &gx);
                    }
                }
            }
            Op::MaskedMeanRows { x, keep } => {
                let (r, c) = as_rows(self.shape(*x)).unwrap();
                let m = keep.iter().filter(|&&k| k).count() as f32;
                let mut gx = vec![0.0f32; r * c];
                for i in 0..r {
                    if keep[i] {
                        for j in 0..c {
                            gx[i * c + j] = g[j] / m;
                        }
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0usize;
                for &p in parts {
                    let n = numel(self.shape(p));
                    let gp = g[off..off + n].to_vec();
                    self.accumulate(p, &gp);
                    off += n;
                }
            }
            Op::ConcatCols { parts } => {
                let r = as_rows(self.shape(parts[0])).unwrap().0;
                let total: usize = parts.iter().map(|&p| as_rows(self.shape(p)).unwrap().1).sum();
                let mut off = 0usize;
                for &p in parts {
                    let pc = as_rows(self.shape(p)).unwrap().1;
                    let mut gp = vec![0.0f32; r * pc];
                    for i in 0..r {
                        gp[i * pc..(i + 1) * pc]
                            .copy_from_slice(&g[i * total + off..i * total + off + pc]);
                    }
                    self.accumulate(p, &gp);
                    off += pc;
                }
            }
            Op::SliceRows { x, start, len } => {
                let (r, c) = as_rows(self.shape(*x)).unwrap();
                let mut gx = vec![0.0f32; r * c];
                gx[start * c..(start + len) * c].copy_from_slice(g);
                self.accumulate(*x, &gx);
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = as_rows(self.shape(*x)).unwrap();
                let mut gx = vec![0.0f32; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(*x, &gx);
            }
            Op::EmbedLookup { table, indices } => {
                let (v, d) = {
                    let s = self.shape(*table);
                    (s[0], s[1])
                };
                let mut gt = vec![0.0f32; v * d];
                for (t, &ix) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[ix * d + j] += g[t * d + j];
                    }
                }
                self.accumulate(*table, &gt);
            }
            Op::L2NormalizeRows { x } => {
                let (r, c) = as_rows(self.shape(*x)).unwrap();
                let xd = self.value(*x).to_vec();
                let y = self.value(out).to_vec();
                let mut gx = vec![0.0f32; r * c];
                for i in 0..r {
                    let base = i * c;
                    let n = row_norm(&xd[base..base + c]).max(1e-12);
                    let mut dot = 0.0f64;
                    for j in 0..c {
                        dot += g[base + j] as f64 * y[base + j] as f64;
                    }
                    for j in 0..c {
                        gx[base + j] = ((g[base + j] as f64 - y[base + j] as f64 * dot) / n) as f32;
                    }
                }
                self.accumulate(*x, &gx);
            }
        }
    }
}

fn matmul_f32(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for l in 0..k {
                acc += a[i * k + l] as f64 * b[l * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
}

fn row_moments(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let mut mean = 0.0f64;
    for &v in row {
        mean += v as f64;
    }
    mean /= n;
    let mut var = 0.0f64;
    for &v in row {
        let d = v as f64 - mean;
        var += d * d;
    }
    (mean, var / n)
}

fn row_norm(row: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for &v in row {
        acc += v as f64 * v as f64;
    }
    acc.sqrt()
}

pub fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn stable_softplus(x: f32) -> f32 {
    let x = x as f64;
    if x > 20.0 {
        x as f32
    } else {
        x.exp().ln_1p() as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let b = t.leaf(vec![3.0, 4.0], vec![2, 1]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_scalar_case() {
        let mut t = Tape::new();
        let a = t.leaf(vec![2.0], vec![1, 1]);
        let b = t.leaf(vec![3.0], vec![1, 1]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(vec![0.0; 6], vec![2, 3]);
        let b = t.leaf(vec![0.0; 4], vec![2, 2]);
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_batched_rank3() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 1, 2]);
        let b = t.leaf(vec![1.0, 1.0, 2.0, 2.0], vec![2, 2, 1]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 1, 1]);
        assert_eq!(t.value(c), &[3.0, 14.0]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0, 0.0], vec![2]);
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y), &[0.5, 0.5]);

        let big = t.leaf(vec![1000.0, 0.0], vec![2]);
        let y = t.softmax(big, 0).unwrap();
        assert!((t.value(y)[0] - 1.0).abs() < 1e-6);
        assert!(t.value(y)[1] < 1e-6);
        assert!(t.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_matches_high_precision() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], vec![3]);
        let y = t.softmax(x, 0).unwrap();
        // f64 reference
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (got, want) in t.value(y).iter().zip(exps.iter().map(|e| e / sum)) {
            assert!((*got as f64 - want).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_axis0_on_matrix() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0, 1.0, 0.0, 1.0], vec![2, 2]);
        let y = t.softmax(x, 0).unwrap();
        // columns sum to 1
        let v = t.value(y);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-6);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(vec![5.0, 5.0, 5.0], vec![1, 3]);
        let gain = t.leaf(vec![1.0; 3], vec![3]);
        let bias = t.leaf(vec![0.0; 3], vec![3]);
        let y = t.layer_norm(x, gain, bias, 1e-5).unwrap();
        for v in t.value(y) {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_fixed_point() {
        // A row that is already zero-mean unit-variance maps to itself up to eps.
        let mut t = Tape::new();
        let x = t.leaf(vec![-1.0, 1.0], vec![1, 2]);
        let gain = t.leaf(vec![1.0; 2], vec![2]);
        let bias = t.leaf(vec![0.0; 2], vec![2]);
        let y = t.layer_norm(x, gain, bias, 1e-5).unwrap();
        for (a, b) in t.value(y).iter().zip([-1.0f32, 1.0]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, -2.0, 3.0, 0.5], vec![2, 2]);
        let s = t.sum(x, None).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(t.grad(s).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_half_norm_squared_is_identity() {
        let mut t = Tape::new();
        let data = vec![0.3, -1.2, 2.0];
        let x = t.leaf(data.clone(), vec![3]);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq, None).unwrap();
        let loss = t.scale(s, 0.5);
        t.backward(loss).unwrap();
        for (g, v) in t.grad(x).unwrap().iter().zip(&data) {
            assert!((g - v).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2]);
        let y = t.scale(x, 2.0);
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn unreachable_nodes_untouched() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0], vec![1]);
        let other = t.leaf(vec![5.0], vec![1]);
        let y = t.scale(x, 3.0);
        t.backward(y).unwrap();
        assert!(t.grad(other).is_none());
        assert_eq!(t.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn tapes_do_not_alias() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x1 = t1.leaf(vec![1.0], vec![1]);
        let x2 = t2.leaf(vec![1.0], vec![1]);
        let y1 = t1.scale(x1, 2.0);
        let _y2 = t2.scale(x2, 7.0);
        t1.backward(y1).unwrap();
        assert_eq!(t1.grad(x1).unwrap(), &[2.0]);
        assert!(t2.grad(x2).is_none());
    }

    #[test]
    fn masked_mean_rows_example() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 1.0, 3.0, 5.0, 5.0, 1.0], vec![3, 2]);
        let y = t.masked_mean_rows(x, &[false, true, true]).unwrap();
        assert_eq!(t.value(y), &[4.0, 3.0]);
    }

    #[test]
    fn masked_mean_rejects_empty_residual() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![1, 2]);
        assert!(t.masked_mean_rows(x, &[false]).is_err());
    }

    #[test]
    fn scalar_broadcast_mul() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], vec![3]);
        let s = t.leaf(vec![2.0], vec![1]);
        let y = t.mul(x, s).unwrap();
        assert_eq!(t.value(y), &[2.0, 4.0, 6.0]);
        let l = t.sum(y, None).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(s).unwrap(), &[6.0]);
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn non_scalar_shape_mixing_is_error() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], vec![2]);
        let b = t.leaf(vec![1.0, 2.0, 3.0], vec![3]);
        assert!(t.add(a, b).is_err());
        assert!(t.mul(a, b).is_err());
    }

    #[test]
    fn embed_lookup_and_scatter_grad() {
        let mut t = Tape::new();
        let table = t.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let e = t.embed_lookup(table, &[1, 1, 0]).unwrap();
        assert_eq!(t.value(e), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = t.sum(e, None).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(table).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn determinism_same_ops_same_bits() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(vec![0.3, -0.7, 1.9, 0.01], vec![2, 2]);
            let w = t.leaf(vec![0.5, -0.25, 0.1, 0.9], vec![2, 2]);
            let h = t.matmul(x, w).unwrap();
            let a = t.sigmoid(h);
            let l = t.mean(a, None).unwrap();
            t.backward(l).unwrap();
            (t.value(l).to_vec(), t.grad(w).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }
}
