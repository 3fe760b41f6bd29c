//! Dense f64 tensor engine with tape-based reverse-mode differentiation.
//!
//! Every operation is recorded on a [`Tape`]: an arena of tensor nodes in
//! topological order. [`Tape::backward`] replays the record in reverse,
//! accumulating vector-Jacobian products into each node that needs a
//! gradient. All arithmetic is f64; every op validates that its output is
//! finite and reports an error instead of storing NaN/Inf.
//!
//! Tensors are immutable once created; only the gradient slot is written
//! during the backward pass. A tape is built and consumed by a single
//! execution context.

use std::fmt;

/// Handle to a tensor node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

pub type TensorResult<T> = Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible with the operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// An op produced (or was given) a NaN or infinity.
    NonFinite { op: &'static str },
    /// `backward` was called on a tensor that is not a scalar.
    NotAScalar { op: &'static str, shape: Vec<usize> },
    /// A value lies outside the operation's domain.
    Domain { op: &'static str, detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            TensorError::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            TensorError::NotAScalar { op, shape } => {
                write!(f, "{op} requires a scalar, got shape {shape:?}")
            }
            TensorError::Domain { op, detail } => write!(f, "domain error in {op}: {detail}"),
        }
    }
}

impl std::error::Error for TensorError {}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Transpose {
        x: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Affine {
        x: TensorId,
        mul: f64,
    },
    Softmax {
        x: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    Relu {
        x: TensorId,
    },
    Gelu {
        x: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    },
    AddRow {
        x: TensorId,
        row: TensorId,
    },
    SumAll {
        x: TensorId,
    },
    MeanRows {
        x: TensorId,
    },
    FrobeniusNorm {
        x: TensorId,
    },
    CrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
    },
    SliceCols {
        x: TensorId,
        start: usize,
        len: usize,
    },
    ConcatRows {
        parts: Vec<TensorId>,
    },
    Reshape {
        x: TensorId,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    needs_grad: bool,
    op: Op,
}

/// Recorded computation graph. Node order is topological by construction:
/// an op's inputs always precede it in the arena.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn all_finite(data: &[f64]) -> bool {
    data.iter().all(|v| v.is_finite())
}

fn dims2(shape: &[usize], op: &'static str) -> TensorResult<(usize, usize)> {
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected a 2-d tensor, got shape {shape:?}"),
        });
    }
    Ok((shape[0], shape[1]))
}

// Row-tiled so each B row is reused across a tile of output rows instead
// of being re-streamed from memory once per row; the per-element
// accumulation order over kk is unchanged, so results are bit-identical
// to the untiled triple loop.
const MATMUL_ROW_TILE: usize = 64;

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i0 in (0..m).step_by(MATMUL_ROW_TILE) {
        let i1 = (i0 + MATMUL_ROW_TILE).min(m);
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            for i in i0..i1 {
                let aik = a[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += aik * bv;
                }
            }
        }
    }
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        needs_grad: bool,
        op: Op,
        op_name: &'static str,
    ) -> TensorResult<TensorId> {
        debug_assert_eq!(data.len(), numel(&shape));
        if !all_finite(&data) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        Ok(self.push_unscanned(shape, data, requires_grad, needs_grad, op))
    }

    /// For ops that provably preserve finiteness of already-validated
    /// inputs (bounded activations and pure data movement): stored values
    /// stay finite without re-scanning the buffer.
    fn push_unscanned(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        needs_grad: bool,
        op: Op,
    ) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        debug_assert!(all_finite(&data));
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            needs_grad,
            op,
        });
        id
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.node(id).data
    }

    /// Value of a 1x1 tensor.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(numel(&self.node(id).shape), 1);
        self.node(id).data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    /// Shapes of every node recorded so far. The complexity harness uses this
    /// to assert that the linear attention path never materializes an n-by-n
    /// intermediate.
    pub fn recorded_shapes(&self) -> Vec<Vec<usize>> {
        self.nodes.iter().map(|n| n.shape.clone()).collect()
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Non-differentiable input.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorResult<TensorId> {
        self.leaf(shape, data, false, "input")
    }

    /// Differentiable leaf; `backward` populates its gradient.
    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorResult<TensorId> {
        self.leaf(shape, data, true, "param")
    }

    /// Constant with no gradient path.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorResult<TensorId> {
        self.leaf(shape, data, false, "constant")
    }

    fn leaf(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op_name: &'static str,
    ) -> TensorResult<TensorId> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                detail: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        if data.len() != numel(&shape) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                detail: format!(
                    "shape {shape:?} implies {} values, got {}",
                    numel(&shape),
                    data.len()
                ),
            });
        }
        self.push(shape, data, requires_grad, false, Op::Leaf, op_name)
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorResult<TensorId> {
        self.constant(vec![1, 1], vec![v])
    }

    pub fn ones(&mut self, shape: Vec<usize>) -> TensorResult<TensorId> {
        let n = numel(&shape);
        self.constant(shape, vec![1.0; n])
    }

    pub fn identity(&mut self, n: usize) -> TensorResult<TensorId> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        self.constant(vec![n, n], data)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (m, k1) = dims2(&self.node(a).shape, "matmul")?;
        let (k2, n) = dims2(&self.node(b).shape, "matmul")?;
        if k1 != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dimensions disagree: {m}x{k1} vs {k2}x{n}"),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(&self.node(a).data, &self.node(b).data, m, k1, n, &mut out);
        let needs = self.wants_grad(a) || self.wants_grad(b);
        self.push(vec![m, n], out, false, needs, Op::MatMul { a, b }, "matmul")
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let (r, c) = dims2(&self.node(x).shape, "transpose")?;
        let mut out = vec![0.0; r * c];
        transpose_raw(&self.node(x).data, r, c, &mut out);
        let needs = self.wants_grad(x);
        Ok(self.push_unscanned(vec![c, r], out, false, needs, Op::Transpose { x }))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn same_shape(&self, a: TensorId, b: TensorId, op: &'static str) -> TensorResult<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.node(a).shape, self.node(b).shape),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(self.node(b).data.iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.node(a).shape.clone();
        let needs = self.wants_grad(a) || self.wants_grad(b);
        self.push(shape, out, false, needs, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(self.node(b).data.iter())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.node(a).shape.clone();
        let needs = self.wants_grad(a) || self.wants_grad(b);
        self.push(shape, out, false, needs, Op::Sub { a, b }, "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(self.node(b).data.iter())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.node(a).shape.clone();
        let needs = self.wants_grad(a) || self.wants_grad(b);
        self.push(shape, out, false, needs, Op::Mul { a, b }, "mul")
    }

    /// `mul * x + add`, elementwise with scalar constants.
    pub fn affine(&mut self, x: TensorId, mul: f64, add: f64) -> TensorResult<TensorId> {
        if !mul.is_finite() || !add.is_finite() {
            return Err(TensorError::NonFinite { op: "affine" });
        }
        let out: Vec<f64> = self.node(x).data.iter().map(|v| mul * v + add).collect();
        let shape = self.node(x).shape.clone();
        let needs = self.wants_grad(x);
        self.push(shape, out, false, needs, Op::Affine { x, mul }, "affine")
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorResult<TensorId> {
        self.affine(x, c, 0.0)
    }

    // ── Activations ──────────────────────────────────────────────────

    /// Softmax along the last axis, stabilized by per-slice max subtraction.
    pub fn softmax(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let (r, c) = dims2(&self.node(x).shape, "softmax")?;
        let mut out = vec![0.0; r * c];
        for row in 0..r {
            let src = &self.node(x).data[row * c..(row + 1) * c];
            softmax_row(src, &mut out[row * c..(row + 1) * c]);
        }
        let needs = self.wants_grad(x);
        Ok(self.push_unscanned(vec![r, c], out, false, needs, Op::Softmax { x }))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let out: Vec<f64> = self
            .node(x)
            .data
            .iter()
            .map(|&v| sigmoid_scalar(v))
            .collect();
        let shape = self.node(x).shape.clone();
        let needs = self.wants_grad(x);
        Ok(self.push_unscanned(shape, out, false, needs, Op::Sigmoid { x }))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let out: Vec<f64> = self.node(x).data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.node(x).shape.clone();
        let needs = self.wants_grad(x);
        Ok(self.push_unscanned(shape, out, false, needs, Op::Relu { x }))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let out: Vec<f64> = self.node(x).data.iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.node(x).shape.clone();
        let needs = self.wants_grad(x);
        Ok(self.push_unscanned(shape, out, false, needs, Op::Gelu { x }))
    }

    /// Layer normalization along the last axis with learnable scale and shift.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> TensorResult<TensorId> {
        let (r, c) = dims2(&self.node(x).shape, "layer_norm")?;
        let (gr, gc) = dims2(&self.node(gamma).shape, "layer_norm")?;
        let (br, bc) = dims2(&self.node(beta).shape, "layer_norm")?;
        if gr != 1 || br != 1 || gc != c || bc != c {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("scale/shift must be 1x{c}, got {gr}x{gc} and {br}x{bc}"),
            });
        }
        let mut out = vec![0.0; r * c];
        for row in 0..r {
            let src = &self.node(x).data[row * c..(row + 1) * c];
            let mean = src.iter().sum::<f64>() / c as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                let xhat = (src[j] - mean) * inv_std;
                out[row * c + j] = xhat * self.node(gamma).data[j] + self.node(beta).data[j];
            }
        }
        let needs = self.wants_grad(x) || self.wants_grad(gamma) || self.wants_grad(beta);
        self.push(
            vec![r, c],
            out,
            false,
            needs,
            Op::LayerNorm { x, gamma, beta },
            "layer_norm",
        )
    }

    // ── Broadcasts and reductions ────────────────────────────────────

    /// Add a 1xC row vector to every row of an RxC tensor.
    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> TensorResult<TensorId> {
        let (r, c) = dims2(&self.node(x).shape, "add_row")?;
        let (rr, rc) = dims2(&self.node(row).shape, "add_row")?;
        if rr != 1 || rc != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                detail: format!("row must be 1x{c}, got {rr}x{rc}"),
            });
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = self.node(x).data[i * c + j] + self.node(row).data[j];
            }
        }
        let needs = self.wants_grad(x) || self.wants_grad(row);
        self.push(
            vec![r, c],
            out,
            false,
            needs,
            Op::AddRow { x, row },
            "add_row",
        )
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum_all(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let s: f64 = self.node(x).data.iter().sum();
        let needs = self.wants_grad(x);
        self.push(
            vec![1, 1],
            vec![s],
            false,
            needs,
            Op::SumAll { x },
            "sum_all",
        )
    }

    /// Column means of an RxC tensor, as 1xC.
    pub fn mean_rows(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let (r, c) = dims2(&self.node(x).shape, "mean_rows")?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += self.node(x).data[i * c + j];
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        let needs = self.wants_grad(x);
        self.push(
            vec![1, c],
            out,
            false,
            needs,
            Op::MeanRows { x },
            "mean_rows",
        )
    }

    /// Frobenius norm, as a 1x1 tensor.
    pub fn frobenius_norm(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let s: f64 = self.node(x).data.iter().map(|v| v * v).sum();
        let needs = self.wants_grad(x);
        self.push(
            vec![1, 1],
            vec![s.sqrt()],
            false,
            needs,
            Op::FrobeniusNorm { x },
            "frobenius_norm",
        )
    }

    /// Mean cross-entropy of BxC logits against integer labels, stabilized
    /// with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> TensorResult<TensorId> {
        let (b, c) = dims2(&self.node(logits).shape, "cross_entropy")?;
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{b} logit rows vs {} labels", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Domain {
                op: "cross_entropy",
                detail: format!("label {bad} out of range for {c} classes"),
            });
        }
        let mut total = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let src = &self.node(logits).data[row * c..(row + 1) * c];
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - src[label];
        }
        let needs = self.wants_grad(logits);
        self.push(
            vec![1, 1],
            vec![total / b as f64],
            false,
            needs,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            "cross_entropy",
        )
    }

    // ── Structure ────────────────────────────────────────────────────

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> TensorResult<TensorId> {
        let (r, c) = dims2(&self.node(x).shape, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("slice [{start}, {}) out of 0..{c}", start + len),
            });
        }
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&self.node(x).data[i * c + start..i * c + start + len]);
        }
        let needs = self.wants_grad(x);
        Ok(self.push_unscanned(
            vec![r, len],
            out,
            false,
            needs,
            Op::SliceCols { x, start, len },
        ))
    }

    /// Stack tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorResult<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                detail: "no parts".to_string(),
            });
        }
        let (_, c) = dims2(&self.node(parts[0]).shape, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        let mut needs = false;
        for &p in parts {
            let (pr, pc) = dims2(&self.node(p).shape, "concat_rows")?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts differ: {c} vs {pc}"),
                });
            }
            rows += pr;
            out.extend_from_slice(&self.node(p).data);
            needs |= self.wants_grad(p);
        }
        Ok(self.push_unscanned(
            vec![rows, c],
            out,
            false,
            needs,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Concatenate tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorResult<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                detail: "no parts".to_string(),
            });
        }
        let mut transposed = Vec::with_capacity(parts.len());
        for &p in parts {
            transposed.push(self.transpose(p)?);
        }
        let stacked = self.concat_rows(&transposed)?;
        self.transpose(stacked)
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> TensorResult<TensorId> {
        if numel(&shape) != numel(&self.node(x).shape) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot reshape {:?} into {shape:?}", self.node(x).shape),
            });
        }
        let data = self.node(x).data.clone();
        let needs = self.wants_grad(x);
        Ok(self.push_unscanned(shape, data, false, needs, Op::Reshape { x }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, id: TensorId, delta: &[f64]) {
        let node = &mut self.nodes[id.0];
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta.iter()) {
            *g += d;
        }
    }

    fn wants_grad(&self, id: TensorId) -> bool {
        let n = self.node(id);
        n.needs_grad || n.requires_grad
    }

    /// Reverse sweep from a scalar loss. Populates the gradient of every
    /// differentiable leaf reachable from it. Each recorded op is visited
    /// exactly once.
    pub fn backward(&mut self, loss: TensorId) -> TensorResult<()> {
        if numel(&self.node(loss).shape) != 1 {
            return Err(TensorError::NotAScalar {
                op: "backward",
                shape: self.node(loss).shape.clone(),
            });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let id = TensorId(idx);
            if self.node(id).grad.is_none() {
                continue;
            }
            let op = self.node(id).op.clone();
            self.backward_op(id, &op)?;
        }
        Ok(())
    }

    fn backward_op(&mut self, out: TensorId, op: &Op) -> TensorResult<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let g = self.node(out).grad.clone().unwrap();
                let (m, k) = dims2(&self.node(*a).shape, "matmul").unwrap();
                let n = self.node(*b).shape[1];
                if self.wants_grad(*a) {
                    // dA = g . B^T
                    let mut bt = vec![0.0; k * n];
                    transpose_raw(&self.node(*b).data, k, n, &mut bt);
                    let mut da = vec![0.0; m * k];
                    matmul_raw(&g, &bt, m, n, k, &mut da);
                    self.accumulate(*a, &da);
                }
                if self.wants_grad(*b) {
                    // dB = A^T . g
                    let mut at = vec![0.0; m * k];
                    transpose_raw(&self.node(*a).data, m, k, &mut at);
                    let mut db = vec![0.0; k * n];
                    matmul_raw(&at, &g, k, m, n, &mut db);
                    self.accumulate(*b, &db);
                }
            }
            Op::Transpose { x } => {
                if self.wants_grad(*x) {
                    let g = self.node(out).grad.clone().unwrap();
                    let (c, r) = dims2(&self.node(out).shape, "transpose").unwrap();
                    let mut dx = vec![0.0; r * c];
                    transpose_raw(&g, c, r, &mut dx);
                    self.accumulate(*x, &dx);
                }
            }
            Op::Add { a, b } => {
                let g = self.node(out).grad.clone().unwrap();
                if self.wants_grad(*a) {
                    self.accumulate(*a, &g);
                }
                if self.wants_grad(*b) {
                    self.accumulate(*b, &g);
                }
            }
            Op::Sub { a, b } => {
                let g = self.node(out).grad.clone().unwrap();
                if self.wants_grad(*a) {
                    self.accumulate(*a, &g);
                }
                if self.wants_grad(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(*b, &neg);
                }
            }
            Op::Mul { a, b } => {
                let g = self.node(out).grad.clone().unwrap();
                if self.wants_grad(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.node(*b).data.iter())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.wants_grad(*b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.node(*a).data.iter())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::Affine { x, mul } => {
                if self.wants_grad(*x) {
                    let g = self.node(out).grad.clone().unwrap();
                    let dx: Vec<f64> = g.iter().map(|v| v * mul).collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::Softmax { x } => {
                if self.wants_grad(*x) {
                    let g = self.node(out).grad.clone().unwrap();
                    let (r, c) = dims2(&self.node(out).shape, "softmax").unwrap();
                    let y = &self.node(out).data;
                    let mut dx = vec![0.0; r * c];
                    for row in 0..r {
                        let ys = &y[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let dot: f64 = ys.iter().zip(gs.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[row * c + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Sigmoid { x } => {
                if self.wants_grad(*x) {
                    let g = self.node(out).grad.clone().unwrap();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.node(out).data.iter())
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::Relu { x } => {
                if self.wants_grad(*x) {
                    let g = self.node(out).grad.clone().unwrap();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.node(*x).data.iter())
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::Gelu { x } => {
                if self.wants_grad(*x) {
                    let g = self.node(out).grad.clone().unwrap();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.node(*x).data.iter())
                        .map(|(gv, &xv)| gv * gelu_grad_scalar(xv))
                        .collect();
                    self.accumulate(*x, &dx);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let g = self.node(out).grad.clone().unwrap();
                let (r, c) = dims2(&self.node(*x).shape, "layer_norm").unwrap();
                let want_x = self.wants_grad(*x);
                let want_gamma = self.wants_grad(*gamma);
                let want_beta = self.wants_grad(*beta);
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for row in 0..r {
                    let src = &self.node(*x).data[row * c..(row + 1) * c];
                    let gs = &g[row * c..(row + 1) * c];
                    let mean = src.iter().sum::<f64>() / c as f64;
                    let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = src.iter().map(|v| (v - mean) * inv_std).collect();
                    let gam = &self.node(*gamma).data;
                    // d_xhat = g .* gamma
                    let dxhat: Vec<f64> =
                        gs.iter().zip(gam.iter()).map(|(gv, gm)| gv * gm).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dxhat_xhat = dxhat
                        .iter()
                        .zip(xhat.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / c as f64;
                    for j in 0..c {
                        dx[row * c + j] =
                            inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgamma[j] += gs[j] * xhat[j];
                        dbeta[j] += gs[j];
                    }
                }
                if want_x {
                    self.accumulate(*x, &dx);
                }
                if want_gamma {
                    self.accumulate(*gamma, &dgamma);
                }
                if want_beta {
                    self.accumulate(*beta, &dbeta);
                }
            }
            Op::AddRow { x, row } => {
                let g = self.node(out).grad.clone().unwrap();
                let (r, c) = dims2(&self.node(out).shape, "add_row").unwrap();
                if self.wants_grad(*x) {
                    self.accumulate(*x, &g);
                }
                if self.wants_grad(*row) {
                    let mut drow = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            drow[j] += g[i * c + j];
                        }
                    }
                    self.accumulate(*row, &drow);
                }
            }
            Op::SumAll { x } => {
                if self.wants_grad(*x) {
                    let g = self.node(out).grad.clone().unwrap()[0];
                    let dx = vec![g; self.node(*x).data.len()];
                    self.accumulate(*x, &dx);
                }
            }
            Op::MeanRows { x } => {
                if self.wants_grad(*x) {
                    let g = self.node(out).grad.clone().unwrap();
                    let (r, c) = dims2(&self.node(*x).shape, "mean_rows").unwrap();
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[j] / r as f64;
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::FrobeniusNorm { x } => {
                if self.wants_grad(*x) {
                    let g = self.node(out).grad.clone().unwrap()[0];
                    let norm = self.node(out).data[0];
                    // Subgradient 0 at the origin keeps the result finite.
                    let dx: Vec<f64> = if norm == 0.0 {
                        vec![0.0; self.node(*x).data.len()]
                    } else {
                        self.node(*x).data.iter().map(|v| g * v / norm).collect()
                    };
                    self.accumulate(*x, &dx);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if self.wants_grad(*logits) {
                    let g = self.node(out).grad.clone().unwrap()[0];
                    let (b, c) = dims2(&self.node(*logits).shape, "cross_entropy").unwrap();
                    let mut dx = vec![0.0; b * c];
                    for (row, &label) in labels.iter().enumerate() {
                        let src = &self.node(*logits).data[row * c..(row + 1) * c];
                        let mut probs = vec![0.0; c];
                        softmax_row(src, &mut probs);
                        for j in 0..c {
                            let indicator = if j == label { 1.0 } else { 0.0 };
                            dx[row * c + j] = g * (probs[j] - indicator) / b as f64;
                        }
                    }
                    self.accumulate(*logits, &dx);
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.wants_grad(*x) {
                    let g = self.node(out).grad.clone().unwrap();
                    let (r, c) = dims2(&self.node(*x).shape, "slice_cols").unwrap();
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..*len {
                            dx[i * c + start + j] = g[i * len + j];
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::ConcatRows { parts } => {
                let g = self.node(out).grad.clone().unwrap();
                let c = self.node(out).shape[1];
                let mut offset = 0;
                for &p in parts {
                    let pr = self.node(p).shape[0];
                    if self.wants_grad(p) {
                        let dpart = g[offset * c..(offset + pr) * c].to_vec();
                        self.accumulate(p, &dpart);
                    }
                    offset += pr;
                }
            }
            Op::Reshape { x } => {
                if self.wants_grad(*x) {
                    let g = self.node(out).grad.clone().unwrap();
                    self.accumulate(*x, &g);
                }
            }
        }
        Ok(())
    }
}
