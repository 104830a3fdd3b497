//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! Storage is row-major `Vec<f64>`; double precision keeps gradient checks and oracle
//! comparisons meaningful at 1e-12 tolerances. Differentiable programs are built by
//! recording primitive ops on a [`Tape`]: each op validates shapes eagerly, computes
//! its value, and stores enough metadata to push gradients to its parents. The tape is
//! append-only, so reverse insertion order is a reverse topological order and
//! [`Tape::backward`] is a single reverse sweep with additive gradient accumulation.
//!
//! Other modules extend the primitive set through [`Tape::record`] with their own
//! [`Op`] implementations (depthwise and per-position convolutions, loss heads), so
//! the engine stays agnostic of what is built on top of it.
//!
//! Every op also reports a multiply-add count to the tape's counter using fixed
//! conventions (`m·k·n` for matmuls, one per output element for elementwise ops,
//! normalizations, and softmax; zero for gathers, slices, concats, reshapes). The
//! static cost model in `cost` mirrors these conventions and is tested to agree with
//! the instrumented counter exactly.

use crate::error::{err, Result};
use std::fmt;

// ── tensor ──────────────────────────────────────────────────────────────────────────

/// A dense row-major tensor. `grad`, when present, always has the same length as
/// `data`; it is populated by [`Tape::backward`] for leaves that require gradients.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(err!(Dim, "zero extent in shape {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(err!(
                Dim,
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    /// Convenience constructor for a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(err!(Dim, "from_rows needs at least one row"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(err!(Dim, "ragged rows in from_rows"));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows of a 2-D tensor (its first extent).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor (its last extent).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `contrib` into this tensor's gradient accumulator.
    pub fn accumulate_grad(&mut self, contrib: &[f64]) -> Result<()> {
        if contrib.len() != self.data.len() {
            return Err(err!(
                Dim,
                "gradient length {} does not match tensor numel {}",
                contrib.len(),
                self.data.len()
            ));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, c) in grad.iter_mut().zip(contrib) {
            *g += c;
        }
        Ok(())
    }
}

// ── tape plumbing ───────────────────────────────────────────────────────────────────

/// Handle to a node on a [`Tape`]. Plain index; cheap to copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

struct Node {
    value: Tensor,
    op: Option<Box<dyn Op>>,
    /// True when this node is (or depends on) a gradient-requiring leaf.
    needs_grad: bool,
}

/// Read-only view of recorded node values, handed to [`Op::backward`].
pub struct Values<'a> {
    nodes: &'a [Node],
}

impl<'a> Values<'a> {
    pub fn data(&self, id: TensorId) -> &'a [f64] {
        &self.nodes[id.0].value.data
    }

    pub fn shape(&self, id: TensorId) -> &'a [usize] {
        &self.nodes[id.0].value.shape
    }
}

/// Per-node gradient buffers for one backward sweep. Contributions accumulate
/// additively; buffers for nodes that do not need gradients are never allocated.
pub struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
    active: Vec<bool>,
    numel: Vec<usize>,
}

impl Grads {
    /// Whether anything downstream wants a gradient for `id`. Ops can use this to
    /// skip computing expensive parent gradients.
    pub fn wants(&self, id: TensorId) -> bool {
        self.active[id.0]
    }

    /// Runs `f` on the (lazily zero-initialized) gradient buffer of `id`.
    /// No-op when `id` does not need gradients.
    pub fn with(&mut self, id: TensorId, f: impl FnOnce(&mut [f64])) {
        if !self.active[id.0] {
            return;
        }
        let buf = self.bufs[id.0].get_or_insert_with(|| vec![0.0; self.numel[id.0]]);
        f(buf);
    }

    /// Adds `contrib` elementwise into the gradient of `id`.
    pub fn add(&mut self, id: TensorId, contrib: &[f64]) {
        self.with(id, |buf| {
            debug_assert_eq!(buf.len(), contrib.len());
            for (b, c) in buf.iter_mut().zip(contrib) {
                *b += c;
            }
        });
    }

    fn take(&mut self, id: TensorId) -> Option<Vec<f64>> {
        self.bufs[id.0].take()
    }
}

/// A primitive differentiable operation: given the output gradient, push
/// contributions to the parents' gradient buffers.
pub trait Op: fmt::Debug {
    fn backward(&self, vals: &Values<'_>, out_grad: &[f64], grads: &mut Grads);
}

// ── tape ────────────────────────────────────────────────────────────────────────────

/// Append-only record of executed primitives. One forward program, one
/// [`Tape::backward`] sweep, then the tape is dropped or [`Tape::clear`]ed; gradients
/// for leaf tensors are read back through [`Tape::grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    madds: u64,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-adds recorded by every op so far, under the crate's fixed counting
    /// conventions.
    pub fn madds(&self) -> u64 {
        self.madds
    }

    /// Drops all nodes and counters so the allocation can be reused for a new step.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.madds = 0;
        self.backward_done = false;
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of a node after [`Tape::backward`]; `None` if it never received one.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    /// Copies an existing tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        let needs = t.requires_grad();
        let mut value = t.clone();
        value.zero_grad();
        self.push(Node { value, op: None, needs_grad: needs })
    }

    /// A non-differentiable leaf built in place.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Node { value, op: None, needs_grad: false }))
    }

    /// Records an externally-defined op. `value` must already hold the op's result;
    /// `madds` is the op's multiply-add count under the crate conventions.
    pub fn record(
        &mut self,
        value: Tensor,
        parents: Vec<TensorId>,
        op: Box<dyn Op>,
        madds: u64,
    ) -> TensorId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.madds += madds;
        self.push(Node { value, op: Some(op), needs_grad })
    }

    fn push(&mut self, node: Node) -> TensorId {
        self.nodes.push(node);
        TensorId(self.nodes.len() - 1)
    }

    fn shape_of(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ── backward ────────────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Visits nodes in reverse insertion order —
    /// exactly once each, which is a reverse topological order because parents always
    /// precede children on an append-only tape. Gradients accumulate additively at
    /// fan-out. After the sweep, every visited node (leaves included) carries its
    /// gradient, readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(err!(
                Contract,
                "backward requires a scalar loss, got shape {:?}",
                self.shape_of(loss)
            ));
        }
        if self.backward_done {
            return Err(err!(Contract, "backward already ran on this tape; clear it first"));
        }
        self.backward_done = true;

        let mut grads = Grads {
            bufs: self.nodes.iter().map(|_| None).collect(),
            active: self.nodes.iter().map(|n| n.needs_grad).collect(),
            numel: self.nodes.iter().map(|n| n.value.numel()).collect(),
        };
        // Seed d(loss)/d(loss) = 1 even when the loss is a pure function of constants,
        // so the sweep is well-defined either way.
        grads.active[loss.0] = true;
        grads.with(loss, |buf| buf[0] = 1.0);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads.take(TensorId(i)) else { continue };
            if let Some(op) = &self.nodes[i].op {
                let vals = Values { nodes: &self.nodes };
                op.backward(&vals, &g, &mut grads);
            }
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    // ── primitive ops ───────────────────────────────────────────────────────────────

    fn check_2d(&self, id: TensorId, who: &str) -> Result<(usize, usize)> {
        match self.shape_of(id) {
            [r, c] => Ok((*r, *c)),
            s => Err(err!(Dim, "{who} expects a 2-D tensor, got shape {s:?}")),
        }
    }

    /// `C[m×n] = A[m×k] · B[k×n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.check_2d(a, "matmul lhs")?;
        let (kb, n) = self.check_2d(b, "matmul rhs")?;
        if ka != kb {
            return Err(err!(Dim, "matmul inner extents differ: {m}x{ka} vs {kb}x{n}"));
        }
        let k = ka;
        let mut out = vec![0.0; m * n];
        {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    let brow = &bd[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.record(
            value,
            vec![a, b],
            Box::new(MatMul { a, b, m, k, n }),
            (m * k * n) as u64,
        ))
    }

    /// `C[m×n] = A[m×k] · B[n×k]ᵀ` — the transposed-right product used for
    /// query·keyᵀ attention scores.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.check_2d(a, "matmul_nt lhs")?;
        let (n, kb) = self.check_2d(b, "matmul_nt rhs")?;
        if ka != kb {
            return Err(err!(Dim, "matmul_nt inner extents differ: {m}x{ka} vs {n}x{kb}"));
        }
        let k = ka;
        let mut out = vec![0.0; m * n];
        {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bd[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += arow[p] * brow[p];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.record(
            value,
            vec![a, b],
            Box::new(MatMulNT { a, b, m, k, n }),
            (m * k * n) as u64,
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(err!(
                Dim,
                "add shapes differ: {:?} vs {:?}",
                self.shape_of(a),
                self.shape_of(b)
            ));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let numel = data.len() as u64;
        let value = Tensor::new(self.shape_of(a).to_vec(), data)?;
        Ok(self.record(value, vec![a, b], Box::new(AddSame { a, b }), numel))
    }

    /// `X[r×c] + b[c]` with the bias broadcast across rows.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.check_2d(x, "add_bias input")?;
        if self.shape_of(b) != [c] {
            return Err(err!(
                Dim,
                "bias shape {:?} does not match {c} columns",
                self.shape_of(b)
            ));
        }
        let mut data = self.nodes[x.0].value.data().to_vec();
        {
            let bd = self.nodes[b.0].value.data();
            for i in 0..r {
                for j in 0..c {
                    data[i * c + j] += bd[j];
                }
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.record(value, vec![x, b], Box::new(AddBias { x, b, rows: r, cols: c }), (r * c) as u64))
    }

    /// `X·W + b` — the ubiquitous affine projection.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(err!(
                Dim,
                "mul shapes differ: {:?} vs {:?}",
                self.shape_of(a),
                self.shape_of(b)
            ));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let numel = data.len() as u64;
        let value = Tensor::new(self.shape_of(a).to_vec(), data)?;
        Ok(self.record(value, vec![a, b], Box::new(MulSame { a, b }), numel))
    }

    /// Multiplies every element by a compile-time constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[x.0].value.data().iter().map(|v| v * c).collect();
        let numel = data.len() as u64;
        let value = Tensor::new(self.shape_of(x).to_vec(), data)?;
        Ok(self.record(value, vec![x], Box::new(Scale { x, c }), numel))
    }

    /// Scales row `i` of `X[r×c]` by `f[i]`. Used to zero out padded positions.
    pub fn scale_rows(&mut self, x: TensorId, f: TensorId) -> Result<TensorId> {
        let (r, c) = self.check_2d(x, "scale_rows input")?;
        if self.shape_of(f) != [r] {
            return Err(err!(
                Dim,
                "row-factor shape {:?} does not match {r} rows",
                self.shape_of(f)
            ));
        }
        let mut data = self.nodes[x.0].value.data().to_vec();
        {
            let fd = self.nodes[f.0].value.data();
            for i in 0..r {
                for j in 0..c {
                    data[i * c + j] *= fd[i];
                }
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.record(value, vec![x, f], Box::new(ScaleRows { x, f, rows: r, cols: c }), (r * c) as u64))
    }

    /// Softmax along `axis`, overflow-safe via per-lane max subtraction. Lanes with
    /// equal inputs — including uniformly huge negatives from masking — come out
    /// exactly uniform.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape_of(x).to_vec();
        if axis >= shape.len() {
            return Err(err!(
                Dim,
                "softmax axis {axis} out of range for shape {shape:?}"
            ));
        }
        let m = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = self.nodes[x.0].value.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * m * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..m {
                    max = max.max(data[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..m {
                    let e = (data[base + j * inner] - max).exp();
                    data[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..m {
                    data[base + j * inner] /= sum;
                }
            }
        }
        let numel = data.len() as u64;
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, vec![x], Box::new(Softmax { x, axis }), numel))
    }

    /// Logistic sigmoid, computed in the overflow-safe branch form.
    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[x.0].value.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let numel = data.len() as u64;
        let value = Tensor::new(self.shape_of(x).to_vec(), data)?;
        Ok(self.record(value, vec![x], Box::new(Sigmoid { x }), numel))
    }

    /// Gaussian error linear unit in the tanh form, with the exact derivative of
    /// that form used in backward.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[x.0].value.data().iter().map(|&v| gelu_value(v)).collect();
        let numel = data.len() as u64;
        let value = Tensor::new(self.shape_of(x).to_vec(), data)?;
        Ok(self.record(value, vec![x], Box::new(Gelu { x }), numel))
    }

    /// Per-row layer normalization over the last axis of `X[r×c]`, with learned
    /// gain `gamma[c]` and shift `beta[c]`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (r, c) = self.check_2d(x, "layer_norm input")?;
        if self.shape_of(gamma) != [c] || self.shape_of(beta) != [c] {
            return Err(err!(
                Dim,
                "layer_norm gain/shift shapes {:?}/{:?} do not match {c} columns",
                self.shape_of(gamma),
                self.shape_of(beta)
            ));
        }
        let mut data = vec![0.0; r * c];
        {
            let xd = self.nodes[x.0].value.data();
            let gd = self.nodes[gamma.0].value.data();
            let bd = self.nodes[beta.0].value.data();
            for i in 0..r {
                let row = &xd[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    data[i * c + j] = (row[j] - mean) * inv * gd[j] + bd[j];
                }
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.record(
            value,
            vec![x, gamma, beta],
            Box::new(LayerNorm { x, gamma, beta, rows: r, cols: c, eps }),
            (r * c) as u64,
        ))
    }

    /// Full reduction to a `[1]` scalar.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        let numel = self.nodes[x.0].value.numel() as u64;
        let value = Tensor::new(vec![1], vec![total])?;
        Ok(self.record(value, vec![x], Box::new(Sum { x }), numel))
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.nodes[x.0].value.numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Gathers `table[ids[i]]` rows into an `[ids.len() × cols]` tensor. The ids are
    /// data, not differentiable inputs; gradients scatter-add back into the table.
    pub fn embed_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (vocab, cols) = self.check_2d(table, "embed_rows table")?;
        if ids.is_empty() {
            return Err(err!(Dim, "embed_rows needs at least one id"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(err!(Input, "embed_rows id {bad} out of range for table with {vocab} rows"));
        }
        let mut data = vec![0.0; ids.len() * cols];
        {
            let td = self.nodes[table.0].value.data();
            for (i, &id) in ids.iter().enumerate() {
                data[i * cols..(i + 1) * cols].copy_from_slice(&td[id * cols..(id + 1) * cols]);
            }
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.record(
            value,
            vec![table],
            Box::new(EmbedRows { table, ids: ids.to_vec(), cols }),
            0,
        ))
    }

    /// Copies columns `[start, start+width)` of `X[r×c]`.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, width: usize) -> Result<TensorId> {
        let (r, c) = self.check_2d(x, "slice_cols input")?;
        if width == 0 || start + width > c {
            return Err(err!(
                Dim,
                "column slice [{start}, {}) out of range for {c} columns",
                start + width
            ));
        }
        let mut data = vec![0.0; r * width];
        {
            let xd = self.nodes[x.0].value.data();
            for i in 0..r {
                data[i * width..(i + 1) * width]
                    .copy_from_slice(&xd[i * c + start..i * c + start + width]);
            }
        }
        let value = Tensor::new(vec![r, width], data)?;
        Ok(self.record(
            value,
            vec![x],
            Box::new(SliceCols { x, start, width, cols: c, rows: r }),
            0,
        ))
    }

    /// Concatenates 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(err!(Dim, "concat_cols needs at least one part"));
        }
        let (r, _) = self.check_2d(parts[0], "concat_cols part")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.check_2d(p, "concat_cols part")?;
            if pr != r {
                return Err(err!(Dim, "concat_cols row counts differ: {r} vs {pr}"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.nodes[p.0].value.data();
            for i in 0..r {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(vec![r, total], data)?;
        Ok(self.record(
            value,
            parts.to_vec(),
            Box::new(ConcatCols { parts: parts.to_vec(), widths, rows: r }),
            0,
        ))
    }

    /// Reinterprets the shape without moving data.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) || numel != self.nodes[x.0].value.numel() {
            return Err(err!(
                Dim,
                "cannot reshape {:?} into {shape:?}",
                self.shape_of(x)
            ));
        }
        let value = Tensor::new(shape, self.nodes[x.0].value.data().to_vec())?;
        Ok(self.record(value, vec![x], Box::new(Reshape { x }), 0))
    }
}

// ── scalar helpers ──────────────────────────────────────────────────────────────────

pub(crate) fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ── op implementations ──────────────────────────────────────────────────────────────

#[derive(Debug)]
struct MatMul {
    a: TensorId,
    b: TensorId,
    m: usize,
    k: usize,
    n: usize,
}

impl Op for MatMul {
    fn backward(&self, vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        let (m, k, n) = (self.m, self.k, self.n);
        if grads.wants(self.a) {
            let bd = vals.data(self.b);
            grads.with(self.a, |da| {
                // dA[i,p] += Σ_j G[i,j] · B[p,j]
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        da[i * k + p] += acc;
                    }
                }
            });
        }
        if grads.wants(self.b) {
            let ad = vals.data(self.a);
            grads.with(self.b, |db| {
                // dB[p,j] += Σ_i A[i,p] · G[i,j]
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        let drow = &mut db[p * n..(p + 1) * n];
                        for j in 0..n {
                            drow[j] += av * grow[j];
                        }
                    }
                }
            });
        }
    }
}

#[derive(Debug)]
struct MatMulNT {
    a: TensorId,
    b: TensorId,
    m: usize,
    k: usize,
    n: usize,
}

impl Op for MatMulNT {
    fn backward(&self, vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        let (m, k, n) = (self.m, self.k, self.n);
        if grads.wants(self.a) {
            let bd = vals.data(self.b);
            grads.with(self.a, |da| {
                // C = A·Bᵀ  ⇒  dA[i,p] += Σ_j G[i,j] · B[j,p]
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let darow = &mut da[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gv = grow[j];
                        let brow = &bd[j * k..(j + 1) * k];
                        for p in 0..k {
                            darow[p] += gv * brow[p];
                        }
                    }
                }
            });
        }
        if grads.wants(self.b) {
            let ad = vals.data(self.a);
            grads.with(self.b, |db| {
                // dB[j,p] += Σ_i G[i,j] · A[i,p]
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let arow = &ad[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gv = grow[j];
                        let drow = &mut db[j * k..(j + 1) * k];
                        for p in 0..k {
                            drow[p] += gv * arow[p];
                        }
                    }
                }
            });
        }
    }
}

#[derive(Debug)]
struct AddSame {
    a: TensorId,
    b: TensorId,
}

impl Op for AddSame {
    fn backward(&self, _vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        grads.add(self.a, g);
        grads.add(self.b, g);
    }
}

#[derive(Debug)]
struct AddBias {
    x: TensorId,
    b: TensorId,
    rows: usize,
    cols: usize,
}

impl Op for AddBias {
    fn backward(&self, _vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        grads.add(self.x, g);
        let (r, c) = (self.rows, self.cols);
        grads.with(self.b, |db| {
            for i in 0..r {
                for j in 0..c {
                    db[j] += g[i * c + j];
                }
            }
        });
    }
}

#[derive(Debug)]
struct MulSame {
    a: TensorId,
    b: TensorId,
}

impl Op for MulSame {
    fn backward(&self, vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        if grads.wants(self.a) {
            let bd = vals.data(self.b);
            grads.with(self.a, |da| {
                for ((d, gv), bv) in da.iter_mut().zip(g).zip(bd) {
                    *d += gv * bv;
                }
            });
        }
        if grads.wants(self.b) {
            let ad = vals.data(self.a);
            grads.with(self.b, |db| {
                for ((d, gv), av) in db.iter_mut().zip(g).zip(ad) {
                    *d += gv * av;
                }
            });
        }
    }
}

#[derive(Debug)]
struct Scale {
    x: TensorId,
    c: f64,
}

impl Op for Scale {
    fn backward(&self, _vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        let c = self.c;
        grads.with(self.x, |dx| {
            for (d, gv) in dx.iter_mut().zip(g) {
                *d += gv * c;
            }
        });
    }
}

#[derive(Debug)]
struct ScaleRows {
    x: TensorId,
    f: TensorId,
    rows: usize,
    cols: usize,
}

impl Op for ScaleRows {
    fn backward(&self, vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        let (r, c) = (self.rows, self.cols);
        if grads.wants(self.x) {
            let fd = vals.data(self.f);
            grads.with(self.x, |dx| {
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[i * c + j] * fd[i];
                    }
                }
            });
        }
        if grads.wants(self.f) {
            let xd = vals.data(self.x);
            grads.with(self.f, |df| {
                for i in 0..r {
                    let mut acc = 0.0;
                    for j in 0..c {
                        acc += g[i * c + j] * xd[i * c + j];
                    }
                    df[i] += acc;
                }
            });
        }
    }
}

#[derive(Debug)]
struct Softmax {
    x: TensorId,
    axis: usize,
}

impl Op for Softmax {
    fn backward(&self, vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        if !grads.wants(self.x) {
            return;
        }
        let shape = vals.shape(self.x);
        let m = shape[self.axis];
        let inner: usize = shape[self.axis + 1..].iter().product();
        let outer: usize = shape[..self.axis].iter().product();
        // Backward sees only parents, so the lane outputs y are recomputed from the
        // input exactly as forward produced them; dx = y ⊙ (g − ⟨g, y⟩) per lane.
        let xd = vals.data(self.x);
        grads.with(self.x, |dx| {
            let mut lane_y = vec![0.0; m];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * m * inner + i;
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..m {
                        max = max.max(xd[base + j * inner]);
                    }
                    let mut sum = 0.0;
                    for j in 0..m {
                        let e = (xd[base + j * inner] - max).exp();
                        lane_y[j] = e;
                        sum += e;
                    }
                    let mut dot = 0.0;
                    for j in 0..m {
                        lane_y[j] /= sum;
                        dot += lane_y[j] * g[base + j * inner];
                    }
                    for j in 0..m {
                        dx[base + j * inner] += lane_y[j] * (g[base + j * inner] - dot);
                    }
                }
            }
        });
    }
}

#[derive(Debug)]
struct Sigmoid {
    x: TensorId,
}

impl Op for Sigmoid {
    fn backward(&self, vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        if !grads.wants(self.x) {
            return;
        }
        let xd = vals.data(self.x);
        grads.with(self.x, |dx| {
            for i in 0..xd.len() {
                let y = stable_sigmoid(xd[i]);
                dx[i] += g[i] * y * (1.0 - y);
            }
        });
    }
}

#[derive(Debug)]
struct Gelu {
    x: TensorId,
}

impl Op for Gelu {
    fn backward(&self, vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        if !grads.wants(self.x) {
            return;
        }
        let xd = vals.data(self.x);
        grads.with(self.x, |dx| {
            for i in 0..xd.len() {
                dx[i] += g[i] * gelu_derivative(xd[i]);
            }
        });
    }
}

#[derive(Debug)]
struct LayerNorm {
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    rows: usize,
    cols: usize,
    eps: f64,
}

impl Op for LayerNorm {
    fn backward(&self, vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        let (r, c) = (self.rows, self.cols);
        let xd = vals.data(self.x);
        let gd = vals.data(self.gamma);
        // Per-row normalized values are recomputed once and reused for all three
        // parent gradients.
        let mut xhat = vec![0.0; r * c];
        let mut inv_sigma = vec![0.0; r];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_sigma[i] = inv;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * inv;
            }
        }
        grads.with(self.beta, |db| {
            for i in 0..r {
                for j in 0..c {
                    db[j] += g[i * c + j];
                }
            }
        });
        grads.with(self.gamma, |dg| {
            for i in 0..r {
                for j in 0..c {
                    dg[j] += g[i * c + j] * xhat[i * c + j];
                }
            }
        });
        grads.with(self.x, |dx| {
            for i in 0..r {
                let mut mean_h = 0.0;
                let mut mean_hx = 0.0;
                for j in 0..c {
                    let h = g[i * c + j] * gd[j];
                    mean_h += h;
                    mean_hx += h * xhat[i * c + j];
                }
                mean_h /= c as f64;
                mean_hx /= c as f64;
                for j in 0..c {
                    let h = g[i * c + j] * gd[j];
                    dx[i * c + j] += (h - mean_h - xhat[i * c + j] * mean_hx) * inv_sigma[i];
                }
            }
        });
    }
}

#[derive(Debug)]
struct Sum {
    x: TensorId,
}

impl Op for Sum {
    fn backward(&self, _vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        let gv = g[0];
        grads.with(self.x, |dx| {
            for d in dx.iter_mut() {
                *d += gv;
            }
        });
    }
}

#[derive(Debug)]
struct EmbedRows {
    table: TensorId,
    ids: Vec<usize>,
    cols: usize,
}

impl Op for EmbedRows {
    fn backward(&self, _vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        let c = self.cols;
        grads.with(self.table, |dt| {
            for (i, &id) in self.ids.iter().enumerate() {
                for j in 0..c {
                    dt[id * c + j] += g[i * c + j];
                }
            }
        });
    }
}

#[derive(Debug)]
struct SliceCols {
    x: TensorId,
    start: usize,
    width: usize,
    cols: usize,
    rows: usize,
}

impl Op for SliceCols {
    fn backward(&self, _vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        grads.with(self.x, |dx| {
            for i in 0..self.rows {
                for j in 0..self.width {
                    dx[i * self.cols + self.start + j] += g[i * self.width + j];
                }
            }
        });
    }
}

#[derive(Debug)]
struct ConcatCols {
    parts: Vec<TensorId>,
    widths: Vec<usize>,
    rows: usize,
}

impl Op for ConcatCols {
    fn backward(&self, _vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        for (&p, &w) in self.parts.iter().zip(&self.widths) {
            grads.with(p, |dp| {
                for i in 0..self.rows {
                    for j in 0..w {
                        dp[i * w + j] += g[i * total + offset + j];
                    }
                }
            });
            offset += w;
        }
    }
}

#[derive(Debug)]
struct Reshape {
    x: TensorId,
}

impl Op for Reshape {
    fn backward(&self, _vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        grads.add(self.x, g);
    }
}

// ── tests ───────────────────────────────────────────────────────────────────────────
