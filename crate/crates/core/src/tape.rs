//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Operations append nodes in topological order; `backward` replays the tape
//! in reverse, accumulating vector-Jacobian products into every node that
//! transitively requires gradients. Constants never receive gradients.
//!
//! All transcendentals go through `libm` so results are bit-identical across
//! platforms and feature sets.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{NumericsError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// `a [m,k] @ b [k,n]`
    Matmul { a: NodeId, b: NodeId },
    /// `a [m,k] @ b [n,k]^T`, the layout used by every linear layer (weights
    /// stored `[out, in]`).
    MatmulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// Elementwise product, equal shapes.
    Mul { a: NodeId, b: NodeId },
    /// Row-vector broadcast: `x [t,d] + v [d]`.
    AddRow { x: NodeId, v: NodeId },
    /// Multiply by a compile-time-known constant.
    Scale { x: NodeId, c: f64 },
    AddConst { x: NodeId },
    Gelu { x: NodeId },
    Tanh { x: NodeId },
    Abs { x: NodeId },
    /// Same data, new shape; the target shape lives on the node.
    Reshape { x: NodeId },
    /// Scalar division `a / b`, both `[1]`.
    Div { a: NodeId, b: NodeId },
    /// Last-axis normalization with affine parameters, biased variance.
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    /// Numerically stable softmax along the last axis.
    SoftmaxRows { x: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    L2Norm { x: NodeId },
    Dot { a: NodeId, b: NodeId },
    /// Mean of the selected rows of a `[t,d]` tensor, yielding `[d]`.
    RowMeanSubset { x: NodeId, rows: Vec<usize> },
    /// Rows in `rows` multiplied elementwise by `s [d]`; other rows pass through.
    ScaleRows {
        x: NodeId,
        s: NodeId,
        rows: Vec<usize>,
    },
    /// Broadcast multiply by a scalar node.
    MulScalar { x: NodeId, s: NodeId },
    /// Scalar reciprocal.
    Recip { s: NodeId },
    /// Vertical stack of rank-2 tensors with equal column counts.
    ConcatRows { parts: Vec<NodeId> },
    /// Horizontal concatenation of rank-2 tensors with equal row counts.
    ConcatCols { parts: Vec<NodeId> },
    /// Column slice `x[:, start..start+len]`.
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// Concatenation of rank-1 tensors.
    Concat1D { parts: Vec<NodeId> },
    /// Mean binary cross-entropy with logits against constant targets.
    BceMean { logits: NodeId, targets: Vec<f64> },
    /// Diagonal-positive InfoNCE over a square similarity matrix.
    InfoNce { sims: NodeId, tau: f64 },
    /// Grouped contrastive loss: one positive logit per group, ragged
    /// negatives delimited by `offsets` (len = groups + 1).
    AttrNce {
        pos: NodeId,
        negs: NodeId,
        offsets: Vec<usize>,
        tau: f64,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recorded computation: append-only node list plus backward state.
pub struct Tape {
    nodes: Vec<Node>,
    backward_run: bool,
}

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let phi_big = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let phi_small = libm::exp(-0.5 * x * x) * INV_SQRT_2PI;
    phi_big + x * phi_small
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Stable log(sum(exp(v / tau))) with the row maximum factored out.
fn logsumexp_scaled(v: &[f64], tau: f64) -> f64 {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
    let s: f64 = v.iter().map(|&x| libm::exp(x / tau - m)).sum();
    m + libm::log(s)
}

fn matmul_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

fn matmul_nt_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
}

/// a^T [k,m] @ b [k,n] accumulated into out [m,n].
fn matmul_tn_acc(a: &[f64], k: usize, m: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_run: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].value.clone())
            .expect("tape node shapes are consistent by construction")
    }

    /// Gradient accumulated at `id` by the last backward pass, if any reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Registers a leaf, honoring the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
        )
    }

    /// Registers a leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> NodeId {
        self.push(Op::Leaf, vec![1], vec![x], false)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), NumericsError> {
        let s = &self.nodes[id.0].shape;
        if s.len() == 2 {
            Ok((s[0], s[1]))
        } else {
            Err(NumericsError::BadOperand {
                op,
                detail: format!("expected rank 2, got shape {s:?}"),
            })
        }
    }

    // ---- primitive operations ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(&self.nodes[a.0].value, m, ka, &self.nodes[b.0].value, n, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], out, ng))
    }

    /// `a @ b^T`; applies a `[out,in]` weight matrix to row-major activations.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (m, ka) = self.dims2(a, "matmul_nt")?;
        let (n, kb) = self.dims2(b, "matmul_nt")?;
        if ka != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_nt",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_raw(&self.nodes[a.0].value, m, ka, &self.nodes[b.0].value, n, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatmulNT { a, b }, vec![m, n], out, ng))
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        op_name: &'static str,
    ) -> Result<(), NumericsError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(NumericsError::ShapeMismatch {
                op: op_name,
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary_same_shape(a, b, "add")?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let (sh, ng) = (self.nodes[a.0].shape.clone(), self.needs(a) || self.needs(b));
        Ok(self.push(Op::Add { a, b }, sh, out, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary_same_shape(a, b, "sub")?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let (sh, ng) = (self.nodes[a.0].shape.clone(), self.needs(a) || self.needs(b));
        Ok(self.push(Op::Sub { a, b }, sh, out, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary_same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let (sh, ng) = (self.nodes[a.0].shape.clone(), self.needs(a) || self.needs(b));
        Ok(self.push(Op::Mul { a, b }, sh, out, ng))
    }

    /// Adds row vector `v` to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, v: NodeId) -> Result<NodeId, NumericsError> {
        let (t, d) = self.dims2(x, "add_row")?;
        if self.nodes[v.0].shape != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: self.nodes[x.0].shape.clone(),
                right: self.nodes[v.0].shape.clone(),
            });
        }
        let vv = &self.nodes[v.0].value;
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &xv)| xv + vv[i % d])
            .collect();
        let ng = self.needs(x) || self.needs(v);
        Ok(self.push(Op::AddRow { x, v }, vec![t, d], out, ng))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v * c).collect();
        let (sh, ng) = (self.nodes[x.0].shape.clone(), self.needs(x));
        self.push(Op::Scale { x, c }, sh, out, ng)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v + c).collect();
        let (sh, ng) = (self.nodes[x.0].shape.clone(), self.needs(x));
        self.push(Op::AddConst { x }, sh, out, ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, NumericsError> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                left: self.nodes[x.0].shape.clone(),
                right: shape,
            });
        }
        let (out, ng) = (self.nodes[x.0].value.clone(), self.needs(x));
        Ok(self.push(Op::Reshape { x }, shape, out, ng))
    }

    /// Exact erf-based GELU. Swap point for any approximate variant.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| gelu_scalar(v)).collect();
        let (sh, ng) = (self.nodes[x.0].shape.clone(), self.needs(x));
        self.push(Op::Gelu { x }, sh, out, ng)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| libm::tanh(v)).collect();
        let (sh, ng) = (self.nodes[x.0].shape.clone(), self.needs(x));
        self.push(Op::Tanh { x }, sh, out, ng)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| libm::fabs(v)).collect();
        let (sh, ng) = (self.nodes[x.0].shape.clone(), self.needs(x));
        self.push(Op::Abs { x }, sh, out, ng)
    }

    /// Normalizes the last axis with biased variance, then applies the affine
    /// parameters `gamma` and `beta` (both `[d]`).
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, NumericsError> {
        let d = *self.nodes[x.0].shape.last().unwrap();
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.nodes[p.0].shape != [d] {
                return Err(NumericsError::BadOperand {
                    op: "layer_norm",
                    detail: format!(
                        "{name} shape {:?} does not match last axis {d}",
                        self.nodes[p.0].shape
                    ),
                });
            }
        }
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut out = vec![0.0; xv.len()];
        for r in 0..xv.len() / d {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let sh = self.nodes[x.0].shape.clone();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, sh, out, ng))
    }

    /// Stable softmax along the last axis (max subtracted per row).
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let d = *self.nodes[x.0].shape.last().unwrap();
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.len()];
        for r in 0..xv.len() / d {
            let row = &xv[r * d..(r + 1) * d];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for j in 0..d {
                let e = libm::exp(row[j] - m);
                out[r * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                out[r * d + j] /= sum;
            }
        }
        let (sh, ng) = (self.nodes[x.0].shape.clone(), self.needs(x));
        self.push(Op::SoftmaxRows { x }, sh, out, ng)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        let ng = self.needs(x);
        self.push(Op::Sum { x }, vec![1], vec![s], ng)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].value.len() as f64;
        let s: f64 = self.nodes[x.0].value.iter().sum::<f64>() / n;
        let ng = self.needs(x);
        self.push(Op::Mean { x }, vec![1], vec![s], ng)
    }

    /// Euclidean norm; gradient at the origin is defined as zero.
    pub fn l2_norm(&mut self, x: NodeId) -> NodeId {
        let s: f64 = libm::sqrt(self.nodes[x.0].value.iter().map(|v| v * v).sum());
        let ng = self.needs(x);
        self.push(Op::L2Norm { x }, vec![1], vec![s], ng)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary_same_shape(a, b, "dot")?;
        let s: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .sum();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Dot { a, b }, vec![1], vec![s], ng))
    }

    /// Mean over the given rows of a rank-2 tensor, yielding `[d]`.
    pub fn row_mean_subset(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, NumericsError> {
        let (t, d) = self.dims2(x, "row_mean_subset")?;
        if rows.is_empty() || rows.iter().any(|&r| r >= t) {
            return Err(NumericsError::BadOperand {
                op: "row_mean_subset",
                detail: format!("row subset {rows:?} invalid for {t} rows"),
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; d];
        for &r in rows {
            for j in 0..d {
                out[j] += xv[r * d + j];
            }
        }
        let inv = 1.0 / rows.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let ng = self.needs(x);
        Ok(self.push(
            Op::RowMeanSubset {
                x,
                rows: rows.to_vec(),
            },
            vec![d],
            out,
            ng,
        ))
    }

    /// Multiplies the selected rows of `x` elementwise by `s`; all other rows
    /// are passed through untouched (bitwise).
    pub fn scale_rows(
        &mut self,
        x: NodeId,
        s: NodeId,
        rows: &[usize],
    ) -> Result<NodeId, NumericsError> {
        let (t, d) = self.dims2(x, "scale_rows")?;
        let sshape = &self.nodes[s.0].shape;
        if sshape.len() == 2 && sshape[0] == 1 && sshape[1] == d {
            // 1-row matrices broadcast like vectors
        } else if *sshape != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "scale_rows",
                left: self.nodes[x.0].shape.clone(),
                right: sshape.clone(),
            });
        }
        if rows.iter().any(|&r| r >= t) {
            return Err(NumericsError::BadOperand {
                op: "scale_rows",
                detail: format!("row index out of range for {t} rows: {rows:?}"),
            });
        }
        let mut out = self.nodes[x.0].value.clone();
        let sv = self.nodes[s.0].value.clone();
        for &r in rows {
            for j in 0..d {
                out[r * d + j] *= sv[j];
            }
        }
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(
            Op::ScaleRows {
                x,
                s,
                rows: rows.to_vec(),
            },
            vec![t, d],
            out,
            ng,
        ))
    }

    /// Broadcast-multiplies `x` by the single-element node `s`.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, NumericsError> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: self.nodes[s.0].shape.clone(),
            });
        }
        let sv = self.nodes[s.0].value[0];
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v * sv).collect();
        let (sh, ng) = (self.nodes[x.0].shape.clone(), self.needs(x) || self.needs(s));
        Ok(self.push(Op::MulScalar { x, s }, sh, out, ng))
    }

    pub fn recip(&mut self, s: NodeId) -> Result<NodeId, NumericsError> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: self.nodes[s.0].shape.clone(),
            });
        }
        let out = vec![1.0 / self.nodes[s.0].value[0]];
        let ng = self.needs(s);
        Ok(self.push(Op::Recip { s }, vec![1], out, ng))
    }

    /// Scalar quotient. A single division, so `div(x, x)` is exactly 1.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        for s in [a, b] {
            if self.nodes[s.0].value.len() != 1 {
                return Err(NumericsError::NotScalar {
                    shape: self.nodes[s.0].shape.clone(),
                });
            }
        }
        let out = vec![self.nodes[a.0].value[0] / self.nodes[b.0].value[0]];
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Div { a, b }, vec![1], out, ng))
    }

    /// Stacks rank-2 tensors along the sequence (row) axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::BadOperand {
                op: "concat_rows",
                detail: "empty part list".into(),
            });
        }
        let (_, d) = self.dims2(parts[0], "concat_rows")?;
        let mut total = 0;
        for &p in parts {
            let (t, dp) = self.dims2(p, "concat_rows")?;
            if dp != d {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.nodes[parts[0].0].shape.clone(),
                    right: self.nodes[p.0].shape.clone(),
                });
            }
            total += t;
        }
        let mut out = Vec::with_capacity(total * d);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            vec![total, d],
            out,
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::BadOperand {
                op: "concat_cols",
                detail: "empty part list".into(),
            });
        }
        let (t, _) = self.dims2(parts[0], "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (tp, dp) = self.dims2(p, "concat_cols")?;
            if tp != t {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[parts[0].0].shape.clone(),
                    right: self.nodes[p.0].shape.clone(),
                });
            }
            total += dp;
        }
        let mut out = vec![0.0; t * total];
        let mut col = 0;
        for &p in parts {
            let dp = self.nodes[p.0].shape[1];
            let pv = &self.nodes[p.0].value;
            for r in 0..t {
                out[r * total + col..r * total + col + dp]
                    .copy_from_slice(&pv[r * dp..(r + 1) * dp]);
            }
            col += dp;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            vec![t, total],
            out,
            ng,
        ))
    }

    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, NumericsError> {
        let (t, d) = self.dims2(x, "slice_cols")?;
        if start + len > d || len == 0 {
            return Err(NumericsError::BadOperand {
                op: "slice_cols",
                detail: format!("slice {start}..{} out of {d} columns", start + len),
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(t * len);
        for r in 0..t {
            out.extend_from_slice(&xv[r * d + start..r * d + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start, len }, vec![t, len], out, ng))
    }

    /// Concatenates rank-1 tensors (scalars included) into one vector.
    pub fn concat_1d(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::BadOperand {
                op: "concat_1d",
                detail: "empty part list".into(),
            });
        }
        let mut out = Vec::new();
        for &p in parts {
            if self.nodes[p.0].shape.len() != 1 {
                return Err(NumericsError::BadOperand {
                    op: "concat_1d",
                    detail: format!("expected rank 1, got {:?}", self.nodes[p.0].shape),
                });
            }
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let n = out.len();
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::Concat1D {
                parts: parts.to_vec(),
            },
            vec![n],
            out,
            ng,
        ))
    }

    /// Mean binary cross-entropy with logits against constant targets, using
    /// the overflow-safe `max(x,0) - x*z + log1p(exp(-|x|))` form.
    pub fn bce_with_logits_mean(
        &mut self,
        logits: NodeId,
        targets: &[f64],
    ) -> Result<NodeId, NumericsError> {
        let lv = &self.nodes[logits.0].value;
        if lv.len() != targets.len() || targets.is_empty() {
            return Err(NumericsError::BadOperand {
                op: "bce_with_logits_mean",
                detail: format!("{} logits vs {} targets", lv.len(), targets.len()),
            });
        }
        let mut acc = 0.0;
        for (&x, &z) in lv.iter().zip(targets) {
            acc += x.max(0.0) - x * z + libm::log1p(libm::exp(-libm::fabs(x)));
        }
        let out = vec![acc / targets.len() as f64];
        let ng = self.needs(logits);
        Ok(self.push(
            Op::BceMean {
                logits,
                targets: targets.to_vec(),
            },
            vec![1],
            out,
            ng,
        ))
    }

    /// InfoNCE with diagonal positives over a square similarity matrix:
    /// `-(1/n) * sum_i log(exp(s_ii/tau) / sum_j exp(s_ij/tau))`.
    pub fn info_nce(&mut self, sims: NodeId, tau: f64) -> Result<NodeId, NumericsError> {
        let (n, m) = self.dims2(sims, "info_nce")?;
        if n != m || n == 0 {
            return Err(NumericsError::BadOperand {
                op: "info_nce",
                detail: format!("similarity matrix must be square and non-empty, got [{n}, {m}]"),
            });
        }
        if tau <= 0.0 {
            return Err(NumericsError::BadOperand {
                op: "info_nce",
                detail: format!("temperature must be positive, got {tau}"),
            });
        }
        let sv = &self.nodes[sims.0].value;
        let mut acc = 0.0;
        for i in 0..n {
            let row = &sv[i * n..(i + 1) * n];
            acc += row[i] / tau - logsumexp_scaled(row, tau);
        }
        let out = vec![-acc / n as f64];
        let ng = self.needs(sims);
        Ok(self.push(Op::InfoNce { sims, tau }, vec![1], out, ng))
    }

    /// Grouped contrastive loss over one positive logit per group and ragged
    /// negatives: `-(1/m) * sum_g log(exp(s+/tau) / (exp(s+/tau) + sum exp(s-/tau)))`.
    ///
    /// `offsets` has `groups + 1` entries delimiting each group's negatives
    /// inside `negs`.
    pub fn attr_nce(
        &mut self,
        pos: NodeId,
        negs: NodeId,
        offsets: &[usize],
        tau: f64,
    ) -> Result<NodeId, NumericsError> {
        let m = self.nodes[pos.0].value.len();
        let total = self.nodes[negs.0].value.len();
        if m == 0 || offsets.len() != m + 1 || offsets[0] != 0 || offsets[m] != total {
            return Err(NumericsError::BadOperand {
                op: "attr_nce",
                detail: format!(
                    "offsets {offsets:?} do not delimit {m} groups over {total} negatives"
                ),
            });
        }
        if offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(NumericsError::BadOperand {
                op: "attr_nce",
                detail: "offsets must be non-decreasing".into(),
            });
        }
        if tau <= 0.0 {
            return Err(NumericsError::BadOperand {
                op: "attr_nce",
                detail: format!("temperature must be positive, got {tau}"),
            });
        }
        let pv = &self.nodes[pos.0].value;
        let nv = &self.nodes[negs.0].value;
        let mut acc = 0.0;
        let mut group = Vec::new();
        for i in 0..m {
            group.clear();
            group.push(pv[i]);
            group.extend_from_slice(&nv[offsets[i]..offsets[i + 1]]);
            acc += pv[i] / tau - logsumexp_scaled(&group, tau);
        }
        let out = vec![-acc / m as f64];
        let ng = self.needs(pos) || self.needs(negs);
        Ok(self.push(
            Op::AttrNce {
                pos,
                negs,
                offsets: offsets.to_vec(),
                tau,
            },
            vec![1],
            out,
            ng,
        ))
    }

    // ---- backward ----

    /// Reverse-replays the tape from `loss`, accumulating gradients into every
    /// node that requires them. `loss` must be a single element; calling
    /// backward again without [`Tape::reset_grads`] is rejected.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        if self.backward_run {
            return Err(NumericsError::BackwardWithoutReset);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.backward_run = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            self.step_backward(i);
        }
        Ok(())
    }

    /// Clears all accumulated gradients, permitting another backward pass.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_run = false;
    }

    fn acc(&mut self, id: NodeId, contrib: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let len = self.nodes[id.0].value.len();
        let g = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; len]);
        for (gv, cv) in g.iter_mut().zip(contrib) {
            *gv += cv;
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn step_backward(&mut self, i: usize) {
        let d_out = self.nodes[i].grad.clone().expect("checked by caller");
        // Ops are matched by moving copies of the metadata out to keep the
        // borrow on self short.
        enum Plan {
            None,
            One(NodeId, Vec<f64>),
            Two(NodeId, Vec<f64>, NodeId, Vec<f64>),
            Three(NodeId, Vec<f64>, NodeId, Vec<f64>, NodeId, Vec<f64>),
            Many(Vec<(NodeId, Vec<f64>)>),
        }
        let plan = match &self.nodes[i].op {
            Op::Leaf => Plan::None,
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let mut da = vec![0.0; m * k];
                matmul_nt_raw(&d_out, m, n, &self.nodes[b.0].value, k, &mut da);
                let mut db = vec![0.0; k * n];
                matmul_tn_acc(&self.nodes[a.0].value, m, k, &d_out, n, &mut db);
                Plan::Two(a, da, b, db)
            }
            Op::MatmulNT { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                let mut da = vec![0.0; m * k];
                matmul_raw(&d_out, m, n, &self.nodes[b.0].value, k, &mut da);
                let mut db = vec![0.0; n * k];
                matmul_tn_acc(&d_out, m, n, &self.nodes[a.0].value, k, &mut db);
                Plan::Two(a, da, b, db)
            }
            Op::Add { a, b } => Plan::Two(*a, d_out.clone(), *b, d_out.clone()),
            Op::Sub { a, b } => {
                let neg: Vec<f64> = d_out.iter().map(|v| -v).collect();
                Plan::Two(*a, d_out.clone(), *b, neg)
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(&self.nodes[b.0].value)
                    .map(|(g, v)| g * v)
                    .collect();
                let db: Vec<f64> = d_out
                    .iter()
                    .zip(&self.nodes[a.0].value)
                    .map(|(g, v)| g * v)
                    .collect();
                Plan::Two(a, da, b, db)
            }
            Op::AddRow { x, v } => {
                let (x, v) = (*x, *v);
                let d = self.nodes[v.0].value.len();
                let mut dv = vec![0.0; d];
                for (idx, g) in d_out.iter().enumerate() {
                    dv[idx % d] += g;
                }
                Plan::Two(x, d_out.clone(), v, dv)
            }
            Op::Scale { x, c } => {
                let c = *c;
                Plan::One(*x, d_out.iter().map(|g| g * c).collect())
            }
            Op::AddConst { x } => Plan::One(*x, d_out.clone()),
            Op::Reshape { x } => Plan::One(*x, d_out.clone()),
            Op::Gelu { x } => {
                let x = *x;
                let dx: Vec<f64> = d_out
                    .iter()
                    .zip(&self.nodes[x.0].value)
                    .map(|(g, &v)| g * gelu_grad_scalar(v))
                    .collect();
                Plan::One(x, dx)
            }
            Op::Tanh { x } => {
                let x = *x;
                let dx: Vec<f64> = d_out
                    .iter()
                    .zip(&self.nodes[i].value)
                    .map(|(g, &y)| g * (1.0 - y * y))
                    .collect();
                Plan::One(x, dx)
            }
            Op::Abs { x } => {
                let x = *x;
                let dx: Vec<f64> = d_out
                    .iter()
                    .zip(&self.nodes[x.0].value)
                    .map(|(g, &v)| {
                        g * if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Plan::One(x, dx)
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let d = *self.nodes[x.0].shape.last().unwrap();
                let xv = &self.nodes[x.0].value;
                let g = &self.nodes[gamma.0].value;
                let rows = xv.len() / d;
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let go = &d_out[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / libm::sqrt(var + eps);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = go.iter().zip(g.iter()).map(|(a, b)| a * b).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dgamma[j] += go[j] * xhat[j];
                        dbeta[j] += go[j];
                        dx[r * d + j] =
                            inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                Plan::Three(x, dx, gamma, dgamma, beta, dbeta)
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                let d = *self.nodes[x.0].shape.last().unwrap();
                let y = &self.nodes[i].value;
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / d {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &d_out[r * d..(r + 1) * d];
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - inner);
                    }
                }
                Plan::One(x, dx)
            }
            Op::Sum { x } => {
                let x = *x;
                let n = self.nodes[x.0].value.len();
                Plan::One(x, vec![d_out[0]; n])
            }
            Op::Mean { x } => {
                let x = *x;
                let n = self.nodes[x.0].value.len();
                Plan::One(x, vec![d_out[0] / n as f64; n])
            }
            Op::L2Norm { x } => {
                let x = *x;
                let norm = self.nodes[i].value[0];
                let dx: Vec<f64> = if norm > 0.0 {
                    self.nodes[x.0]
                        .value
                        .iter()
                        .map(|v| d_out[0] * v / norm)
                        .collect()
                } else {
                    vec![0.0; self.nodes[x.0].value.len()]
                };
                Plan::One(x, dx)
            }
            Op::Dot { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = self.nodes[b.0].value.iter().map(|v| d_out[0] * v).collect();
                let db: Vec<f64> = self.nodes[a.0].value.iter().map(|v| d_out[0] * v).collect();
                Plan::Two(a, da, b, db)
            }
            Op::RowMeanSubset { x, rows } => {
                let (x, rows) = (*x, rows.clone());
                let d = self.nodes[x.0].shape[1];
                let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                let inv = 1.0 / rows.len() as f64;
                for &r in &rows {
                    for j in 0..d {
                        dx[r * d + j] += d_out[j] * inv;
                    }
                }
                Plan::One(x, dx)
            }
            Op::ScaleRows { x, s, rows } => {
                let (x, s, rows) = (*x, *s, rows.clone());
                let d = self.nodes[x.0].shape[1];
                let sv = &self.nodes[s.0].value;
                let xv = &self.nodes[x.0].value;
                let mut dx = d_out.clone();
                let mut ds = vec![0.0; sv.len()];
                for &r in &rows {
                    for j in 0..d {
                        dx[r * d + j] = d_out[r * d + j] * sv[j];
                        ds[j] += d_out[r * d + j] * xv[r * d + j];
                    }
                }
                Plan::Two(x, dx, s, ds)
            }
            Op::MulScalar { x, s } => {
                let (x, s) = (*x, *s);
                let sv = self.nodes[s.0].value[0];
                let dx: Vec<f64> = d_out.iter().map(|g| g * sv).collect();
                let ds = vec![d_out
                    .iter()
                    .zip(&self.nodes[x.0].value)
                    .map(|(g, v)| g * v)
                    .sum()];
                Plan::Two(x, dx, s, ds)
            }
            Op::Recip { s } => {
                let s = *s;
                let y = self.nodes[i].value[0];
                Plan::One(s, vec![-d_out[0] * y * y])
            }
            Op::Div { a, b } => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value[0];
                let bv = self.nodes[b.0].value[0];
                let g = d_out[0];
                Plan::Two(a, vec![g / bv], b, vec![-g * av / (bv * bv)])
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut acc = Vec::new();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc.push((p, d_out[offset..offset + len].to_vec()));
                    offset += len;
                }
                Plan::Many(acc)
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let total = self.nodes[i].shape[1];
                let t = self.nodes[i].shape[0];
                let mut acc = Vec::new();
                let mut col = 0;
                for p in parts {
                    let dp = self.nodes[p.0].shape[1];
                    let mut dpart = vec![0.0; t * dp];
                    for r in 0..t {
                        dpart[r * dp..(r + 1) * dp]
                            .copy_from_slice(&d_out[r * total + col..r * total + col + dp]);
                    }
                    acc.push((p, dpart));
                    col += dp;
                }
                Plan::Many(acc)
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let (t, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let mut dx = vec![0.0; t * d];
                for r in 0..t {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&d_out[r * len..(r + 1) * len]);
                }
                Plan::One(x, dx)
            }
            Op::Concat1D { parts } => {
                let parts = parts.clone();
                let mut acc = Vec::new();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc.push((p, d_out[offset..offset + len].to_vec()));
                    offset += len;
                }
                Plan::Many(acc)
            }
            Op::BceMean { logits, targets } => {
                let (logits, targets) = (*logits, targets.clone());
                let n = targets.len() as f64;
                let dx: Vec<f64> = self.nodes[logits.0]
                    .value
                    .iter()
                    .zip(&targets)
                    .map(|(&x, &z)| d_out[0] * (sigmoid(x) - z) / n)
                    .collect();
                Plan::One(logits, dx)
            }
            Op::InfoNce { sims, tau } => {
                let (sims, tau) = (*sims, *tau);
                let n = self.nodes[sims.0].shape[0];
                let sv = &self.nodes[sims.0].value;
                let mut dx = vec![0.0; n * n];
                let scale = d_out[0] / (n as f64 * tau);
                for r in 0..n {
                    let row = &sv[r * n..(r + 1) * n];
                    let lse = logsumexp_scaled(row, tau);
                    for j in 0..n {
                        let p = libm::exp(row[j] / tau - lse);
                        let delta = if r == j { 1.0 } else { 0.0 };
                        dx[r * n + j] = scale * (p - delta);
                    }
                }
                Plan::One(sims, dx)
            }
            Op::AttrNce {
                pos,
                negs,
                offsets,
                tau,
            } => {
                let (pos, negs, offsets, tau) = (*pos, *negs, offsets.clone(), *tau);
                let m = self.nodes[pos.0].value.len();
                let pv = &self.nodes[pos.0].value;
                let nv = &self.nodes[negs.0].value;
                let mut dpos = vec![0.0; m];
                let mut dnegs = vec![0.0; nv.len()];
                let scale = d_out[0] / (m as f64 * tau);
                let mut group = Vec::new();
                for g in 0..m {
                    group.clear();
                    group.push(pv[g]);
                    group.extend_from_slice(&nv[offsets[g]..offsets[g + 1]]);
                    let lse = logsumexp_scaled(&group, tau);
                    let q0 = libm::exp(pv[g] / tau - lse);
                    dpos[g] = scale * (q0 - 1.0);
                    for (k, idx) in (offsets[g]..offsets[g + 1]).enumerate() {
                        dnegs[idx] = scale * libm::exp(group[k + 1] / tau - lse);
                    }
                }
                Plan::Two(pos, dpos, negs, dnegs)
            }
        };
        match plan {
            Plan::None => {}
            Plan::One(a, da) => self.acc(a, &da),
            Plan::Two(a, da, b, db) => {
                self.acc(a, &da);
                self.acc(b, &db);
            }
            Plan::Three(a, da, b, db, c, dc) => {
                self.acc(a, &da);
                self.acc(b, &db);
                self.acc(c, &dc);
            }
            Plan::Many(list) => {
                for (p, dp) in list {
                    self.acc(p, &dp);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn assert_close(actual: f64, expected: f64, tol: f64) {
        assert!(
            (actual - expected).abs() <= tol,
            "expected {expected}, got {actual} (tol {tol})"
        );
    }

    #[test]
    fn matmul_identity_roundtrip() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let eye = t.leaf(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let out = t.matmul(a, eye).unwrap();
        assert_eq!(t.value(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Independent brute-force product over random-ish fixed values.
        let av = [0.5, -1.0, 2.0, 0.25, 3.0, -0.75];
        let bv = [1.5, 0.5, -2.0, 1.0, 0.0, -1.0, 2.5, 0.125];
        let (m, k, n) = (3, 2, 4);
        let mut expected = [0.0; 12];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    expected[i * n + j] += av[i * k + p] * bv[p * n + j];
                }
            }
        }
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::new(vec![m, k], av.to_vec()).unwrap());
        let b = t.leaf(&Tensor::new(vec![k, n], bv.to_vec()).unwrap());
        let out = t.matmul(a, b).unwrap();
        assert_eq!(t.value(out), &expected);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::zeros(vec![2, 3]));
        let b = t.leaf(&Tensor::zeros(vec![2, 3]));
        match t.matmul(a, b) {
            Err(NumericsError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn gelu_frozen_values() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(vec![3], vec![0.0, 1.0, 10.0]).unwrap());
        let y = t.gelu(x);
        let v = t.value(y);
        assert_eq!(v[0], 0.0);
        // 1 * Phi(1), the standard normal CDF at 1.
        assert_close(v[1], 0.8413447460685429, 1e-12);
        assert_close(v[2], 10.0, 1e-9);
    }

    #[test]
    fn layer_norm_frozen_values() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let g = t.leaf(&Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let b = t.leaf(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        // mean 2, biased var 1 -> +-1/sqrt(1+1e-5)
        assert_close(t.value(y)[0], -0.9999950000374997, 1e-12);
        assert_close(t.value(y)[1], 0.9999950000374997, 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(vec![1, 4], vec![5.0; 4]).unwrap());
        let g = t.leaf(&Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let b = t.leaf(&Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y), &[0.0; 4]);
    }

    #[test]
    fn softmax_frozen_values() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = t.softmax_rows(x);
        let v = t.value(y);
        assert_close(v[0], 0.09003057317038046, 1e-12);
        assert_close(v[1], 0.24472847105479767, 1e-12);
        assert_close(v[2], 0.6652409557748219, 1e-12);
        assert_close(v.iter().sum::<f64>(), 1.0, 1e-12);
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let y = t.softmax_rows(x);
        let v = t.value(y);
        assert!(v.iter().all(|x| x.is_finite()));
        assert_close(v[0], 1.0, 1e-12);
        assert_close(v[1], 0.0, 1e-12);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::zeros(vec![2, 2]).with_grad());
        let y = t.gelu(x);
        assert!(matches!(
            t.backward(y),
            Err(NumericsError::NotScalar { .. })
        ));
    }

    #[test]
    fn backward_twice_without_reset_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(matches!(
            t.backward(s),
            Err(NumericsError::BackwardWithoutReset)
        ));
        t.reset_grads();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let c = t.constant(&Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let p = t.mul(x, c).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // y = sum(x * x + x) -> dy/dx = 2x + 1
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(vec![2], vec![3.0, -1.0]).unwrap().with_grad());
        let sq = t.mul(x, x).unwrap();
        let plus = t.add(sq, x).unwrap();
        let s = t.sum(plus);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[7.0, -1.0]);
    }

    #[test]
    fn bce_frozen_values() {
        let mut t = Tape::new();
        let l = t.leaf(&Tensor::new(vec![1], vec![0.0]).unwrap());
        let loss = t.bce_with_logits_mean(l, &[1.0]).unwrap();
        assert_close(t.value(loss)[0], core::f64::consts::LN_2, 1e-12);

        let mut t = Tape::new();
        let l = t.leaf(&Tensor::new(vec![1], vec![30.0]).unwrap());
        let loss = t.bce_with_logits_mean(l, &[1.0]).unwrap();
        assert_close(t.value(loss)[0], 0.0, 1e-9);

        // Extreme magnitudes must not overflow.
        let mut t = Tape::new();
        let l = t.leaf(&Tensor::new(vec![2], vec![1000.0, -1000.0]).unwrap());
        let loss = t.bce_with_logits_mean(l, &[0.0, 1.0]).unwrap();
        assert!(t.value(loss)[0].is_finite());
        assert_close(t.value(loss)[0], 1000.0, 1e-9);
    }

    #[test]
    fn info_nce_single_pair_is_exactly_zero() {
        let mut t = Tape::new();
        let s = t.leaf(&Tensor::new(vec![1, 1], vec![0.7]).unwrap());
        let loss = t.info_nce(s, 0.1).unwrap();
        assert_eq!(t.value(loss)[0], 0.0);
    }

    #[test]
    fn info_nce_identity_two_by_two() {
        let mut t = Tape::new();
        let s = t.leaf(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let loss = t.info_nce(s, 1.0).unwrap();
        // ln(1 + e^-1)
        assert_close(t.value(loss)[0], 0.31326168751822286, 1e-9);
    }

    #[test]
    fn info_nce_saturated_diagonal_near_zero() {
        let mut t = Tape::new();
        let s = t.leaf(&Tensor::new(vec![2, 2], vec![30.0, 0.0, 0.0, 30.0]).unwrap());
        let loss = t.info_nce(s, 1.0).unwrap();
        assert!(t.value(loss)[0] < 1e-12);
    }

    #[test]
    fn attr_nce_frozen_values() {
        // Single group, s+ = 1, one negative s- = 0, tau = 0.1 -> ln(1 + e^-10)
        let mut t = Tape::new();
        let pos = t.leaf(&Tensor::new(vec![1], vec![1.0]).unwrap());
        let negs = t.leaf(&Tensor::new(vec![1], vec![0.0]).unwrap());
        let loss = t.attr_nce(pos, negs, &[0, 1], 0.1).unwrap();
        assert_close(t.value(loss)[0], 4.539889921686465e-5, 1e-12);

        // s+ == s- -> ln 2 regardless of tau.
        let mut t = Tape::new();
        let pos = t.leaf(&Tensor::new(vec![1], vec![0.4]).unwrap());
        let negs = t.leaf(&Tensor::new(vec![1], vec![0.4]).unwrap());
        let loss = t.attr_nce(pos, negs, &[0, 1], 0.1).unwrap();
        assert_close(t.value(loss)[0], core::f64::consts::LN_2, 1e-12);
    }

    #[test]
    fn attr_nce_empty_negative_group() {
        let mut t = Tape::new();
        let pos = t.leaf(&Tensor::new(vec![2], vec![0.9, 0.1]).unwrap());
        let negs = t.leaf(&Tensor::new(vec![1], vec![0.5]).unwrap());
        // First group has one negative, second has none.
        let loss = t.attr_nce(pos, negs, &[0, 1, 1], 0.1).unwrap();
        assert!(t.value(loss)[0].is_finite());
        // Second group contributes exactly zero.
        let mut t2 = Tape::new();
        let pos2 = t2.leaf(&Tensor::new(vec![1], vec![0.9]).unwrap());
        let negs2 = t2.leaf(&Tensor::new(vec![1], vec![0.5]).unwrap());
        let half = t2.attr_nce(pos2, negs2, &[0, 1], 0.1).unwrap();
        assert_close(
            t.value(loss)[0],
            t2.value(half)[0] / 2.0,
            1e-12,
        );
    }

    #[test]
    fn scale_rows_untouched_rows_bit_identical() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let s = t.leaf(&Tensor::new(vec![2], vec![2.0, 3.0]).unwrap());
        let y = t.scale_rows(x, s, &[1]).unwrap();
        let v = t.value(y);
        assert_eq!(v[0].to_bits(), 0.1f64.to_bits());
        assert_eq!(v[1].to_bits(), 0.2f64.to_bits());
        assert_eq!(v[2], 0.3 * 2.0);
        assert_eq!(v[3], 0.4 * 3.0);
        assert_eq!(v[4].to_bits(), 0.5f64.to_bits());
        assert_eq!(v[5].to_bits(), 0.6f64.to_bits());
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = t.leaf(&Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let cat = t.concat_rows(&[a, b]).unwrap();
        assert_eq!(t.shape(cat), &[3, 2]);
        assert_eq!(t.value(cat), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let col = t.slice_cols(cat, 1, 1).unwrap();
        assert_eq!(t.value(col), &[2.0, 4.0, 6.0]);
    }
}
