//! Dense f64 tensors with reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks the record in reverse and fills gradient buffers. The op set is
//! exactly what the reconstruction network needs — matmul, the pointwise
//! nonlinearities, softmax, layer norm, GLU, embedding lookup, concat/slice,
//! dropout, 1-D convolution, and masked L1/L2 losses — each with a
//! hand-written adjoint that the tests check against central finite
//! differences.
//!
//! Every op validates shapes and rejects non-finite results, so a NaN
//! surfaces at the op that produced it rather than three layers later.

mod store;

pub use store::{Param, ParameterStore, Tensor};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub type VarId = usize;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(VarId, VarId),
    Transpose(VarId),
    Add(VarId, VarId),
    AddRow(VarId, VarId),
    Scale(VarId, f64),
    Mul(VarId, VarId),
    Relu(VarId),
    Sigmoid(VarId),
    Swish(VarId),
    Tanh(VarId),
    Softmax(VarId),
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
    },
    Glu(VarId),
    Embedding {
        table: VarId,
        indices: Vec<usize>,
    },
    Concat {
        parts: Vec<VarId>,
        axis: usize,
    },
    Slice {
        x: VarId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Dropout {
        x: VarId,
        keep: Vec<f64>,
    },
    Conv1d {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    DepthwiseConv1d {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    MaskedFill {
        base: VarId,
        fill: VarId,
        rows: Vec<bool>,
    },
    Sum(VarId),
    MaskedL1 {
        pred: VarId,
        target: VarId,
        rows: Vec<bool>,
    },
    MaskedL2 {
        pred: VarId,
        target: VarId,
        rows: Vec<bool>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records one forward pass and differentiates it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, VarId)>,
    backward_done: bool,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [m, n] => (*m, *n),
        _ => unreachable!("matrix ops validate dimensionality first"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<VarId> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if let Some(i) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value at flat index {i} produced by {:?}",
                std::mem::discriminant(&op)
            )));
        }
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(self.nodes.len() - 1)
    }

    /// A leaf that does not participate in differentiation.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<VarId> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} does not hold {} values",
                value.len()
            )));
        }
        self.push(shape, value, false, Op::Leaf)
    }

    /// A differentiable leaf.
    pub fn var(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<VarId> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} does not hold {} values",
                value.len()
            )));
        }
        self.push(shape, value, true, Op::Leaf)
    }

    /// A differentiable leaf bound to a named store parameter; its gradient
    /// is delivered by [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, name: &str, store: &ParameterStore) -> Result<VarId> {
        let p = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        let id = self.var(p.value.shape.clone(), p.value.data.clone())?;
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    pub fn value(&self, id: VarId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn matrix_shape(&self, id: VarId, what: &str) -> Result<(usize, usize)> {
        match self.nodes[id].shape.as_slice() {
            [n] => Ok((1, *n)),
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Shape(format!(
                "{what} must be 1-D or 2-D, got {s:?}"
            ))),
        }
    }

    fn require_same_shape(&self, a: VarId, b: VarId) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::Shape(format!(
                "operands disagree: {:?} vs {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        Ok(())
    }

    fn any_requires_grad(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|&id| self.nodes[id].requires_grad)
    }

    // ── forward ops ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.matrix_shape(a, "matmul lhs")?;
        let (k2, n) = self.matrix_shape(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims disagree: {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = &self.nodes[a].value;
            let bv = &self.nodes[b].value;
            for i in 0..m {
                for l in 0..k {
                    let x = av[i * k + l];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[l * n..(l + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += x * brow[j];
                    }
                }
            }
        }
        let rg = self.any_requires_grad(&[a, b]);
        self.push(vec![m, n], out, rg, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let (m, n) = self.matrix_shape(a, "transpose")?;
        let av = &self.nodes[a].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.nodes[a].requires_grad;
        self.push(vec![n, m], out, rg, Op::Transpose(a))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.require_same_shape(a, b)?;
        let out: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.any_requires_grad(&[a, b]);
        self.push(shape, out, rg, Op::Add(a, b))
    }

    /// Broadcast a row vector over every row of a matrix.
    pub fn add_row(&mut self, a: VarId, v: VarId) -> Result<VarId> {
        let (m, n) = self.matrix_shape(a, "add_row lhs")?;
        let (vm, vn) = self.matrix_shape(v, "add_row rhs")?;
        if vm != 1 || vn != n {
            return Err(Error::Shape(format!(
                "add_row vector of {vn} values vs {n} columns"
            )));
        }
        let mut out = self.nodes[a].value.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += self.nodes[v].value[j];
            }
        }
        let shape = self.nodes[a].shape.clone();
        let rg = self.any_requires_grad(&[a, v]);
        self.push(shape, out, rg, Op::AddRow(a, v))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        if !c.is_finite() {
            return Err(Error::Numeric(format!("scale factor {c} is not finite")));
        }
        let out: Vec<f64> = self.nodes[a].value.iter().map(|x| x * c).collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad;
        self.push(shape, out, rg, Op::Scale(a, c))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.require_same_shape(a, b)?;
        let out: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.any_requires_grad(&[a, b]);
        self.push(shape, out, rg, Op::Mul(a, b))
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        let out: Vec<f64> = self.nodes[a].value.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad;
        self.push(shape, out, rg, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        let out: Vec<f64> = self.nodes[a].value.iter().map(|&x| sigmoid(x)).collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad;
        self.push(shape, out, rg, Op::Sigmoid(a))
    }

    pub fn swish(&mut self, a: VarId) -> Result<VarId> {
        let out: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad;
        self.push(shape, out, rg, Op::Swish(a))
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        let out: Vec<f64> = self.nodes[a].value.iter().map(|&x| x.tanh()).collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad;
        self.push(shape, out, rg, Op::Tanh(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: VarId) -> Result<VarId> {
        let (m, n) = self.matrix_shape(a, "softmax")?;
        if n == 0 {
            return Err(Error::Shape("softmax over empty axis".into()));
        }
        let av = &self.nodes[a].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad;
        self.push(shape, out, rg, Op::Softmax(a))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId) -> Result<VarId> {
        let (m, n) = self.matrix_shape(x, "layer_norm input")?;
        let (gm, gn) = self.matrix_shape(gain, "layer_norm gain")?;
        let (bm, bn) = self.matrix_shape(bias, "layer_norm bias")?;
        if gm != 1 || bm != 1 || gn != n || bn != n {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias must be [{n}], got [{gn}] and [{bn}]"
            )));
        }
        let xv = &self.nodes[x].value;
        let gv = &self.nodes[gain].value;
        let bv = &self.nodes[bias].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..n {
                out[i * n + j] = gv[j] * (row[j] - mean) * rstd + bv[j];
            }
        }
        let shape = self.nodes[x].shape.clone();
        let rg = self.any_requires_grad(&[x, gain, bias]);
        self.push(shape, out, rg, Op::LayerNorm { x, gain, bias })
    }

    /// Gated linear unit over the last axis: the first half gates through the
    /// sigmoid of the second half.
    pub fn glu(&mut self, a: VarId) -> Result<VarId> {
        let (m, n2) = self.matrix_shape(a, "glu")?;
        if n2 % 2 != 0 || n2 == 0 {
            return Err(Error::Shape(format!(
                "glu needs an even last axis, got {n2}"
            )));
        }
        let n = n2 / 2;
        let av = &self.nodes[a].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = av[i * n2 + j] * sigmoid(av[i * n2 + n + j]);
            }
        }
        let mut shape = self.nodes[a].shape.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.nodes[a].requires_grad;
        self.push(shape, out, rg, Op::Glu(a))
    }

    pub fn embedding(&mut self, table: VarId, indices: &[usize]) -> Result<VarId> {
        let (v, d) = self.matrix_shape(table, "embedding table")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Shape(format!(
                "embedding index {bad} outside table of {v} rows"
            )));
        }
        let tv = &self.nodes[table].value;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[table].requires_grad;
        self.push(
            vec![indices.len(), d],
            out,
            rg,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    /// Concatenate matrices along `axis` (0 = stack rows, 1 = widen rows).
    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero parts".into()));
        }
        if axis > 1 {
            return Err(Error::Shape(format!("concat axis {axis} out of range")));
        }
        let shapes: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.matrix_shape(p, "concat part"))
            .collect::<Result<_>>()?;
        let (m0, n0) = shapes[0];
        let (rows, cols, out) = if axis == 0 {
            if shapes.iter().any(|&(_, n)| n != n0) {
                return Err(Error::Shape(
                    "concat axis 0 needs equal column counts".into(),
                ));
            }
            let rows: usize = shapes.iter().map(|&(m, _)| m).sum();
            let mut out = Vec::with_capacity(rows * n0);
            for &p in parts {
                out.extend_from_slice(&self.nodes[p].value);
            }
            (rows, n0, out)
        } else {
            if shapes.iter().any(|&(m, _)| m != m0) {
                return Err(Error::Shape("concat axis 1 needs equal row counts".into()));
            }
            let cols: usize = shapes.iter().map(|&(_, n)| n).sum();
            let mut out = vec![0.0; m0 * cols];
            let mut offset = 0;
            for (&p, &(_, n)) in parts.iter().zip(&shapes) {
                let pv = &self.nodes[p].value;
                for i in 0..m0 {
                    out[i * cols + offset..i * cols + offset + n]
                        .copy_from_slice(&pv[i * n..(i + 1) * n]);
                }
                offset += n;
            }
            (m0, cols, out)
        };
        let rg = self.any_requires_grad(parts);
        self.push(
            vec![rows, cols],
            out,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Contiguous sub-range along `axis`.
    pub fn slice(&mut self, x: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        let (m, n) = self.matrix_shape(x, "slice")?;
        if axis > 1 {
            return Err(Error::Shape(format!("slice axis {axis} out of range")));
        }
        let bound = if axis == 0 { m } else { n };
        if len == 0 || start + len > bound {
            return Err(Error::Shape(format!(
                "slice {start}..{} outside axis of {bound}",
                start + len
            )));
        }
        let xv = &self.nodes[x].value;
        let (shape, out) = if axis == 0 {
            (vec![len, n], xv[start * n..(start + len) * n].to_vec())
        } else {
            let mut out = Vec::with_capacity(m * len);
            for i in 0..m {
                out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
            }
            (vec![m, len], out)
        };
        let rg = self.nodes[x].requires_grad;
        self.push(
            shape,
            out,
            rg,
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
        )
    }

    /// Inverted dropout with keep-probability scaling. `p == 0` is an
    /// identity and records nothing.
    pub fn dropout(&mut self, x: VarId, p: f64, rng: &mut SplitMix64) -> Result<VarId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} out of [0,1)"
            )));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let inv = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..self.nodes[x].value.len())
            .map(|_| if rng.next_f64() < p { 0.0 } else { inv })
            .collect();
        let out: Vec<f64> = self.nodes[x]
            .value
            .iter()
            .zip(&keep)
            .map(|(v, k)| v * k)
            .collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.nodes[x].requires_grad;
        self.push(shape, out, rg, Op::Dropout { x, keep })
    }

    /// 1-D convolution over the row (time) axis with "same" zero padding.
    /// `x` is `[T, c_in]`, `w` is `[c_out, c_in, k]` with odd k, `b` is `[c_out]`.
    pub fn conv1d(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (t, c_in) = self.matrix_shape(x, "conv1d input")?;
        let wshape = self.nodes[w].shape.clone();
        let [c_out, wc_in, k] = wshape.as_slice() else {
            return Err(Error::Shape(format!(
                "conv1d weight must be [c_out, c_in, k], got {wshape:?}"
            )));
        };
        let (c_out, wc_in, k) = (*c_out, *wc_in, *k);
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv1d weight expects {wc_in} input channels, input has {c_in}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::Shape(format!("conv1d kernel {k} must be odd")));
        }
        let (bm, bn) = self.matrix_shape(b, "conv1d bias")?;
        if bm != 1 || bn != c_out {
            return Err(Error::Shape(format!(
                "conv1d bias must be [{c_out}], got [{bn}]"
            )));
        }
        let center = k / 2;
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let bv = &self.nodes[b].value;
        let mut out = vec![0.0; t * c_out];
        for ti in 0..t {
            for o in 0..c_out {
                let mut acc = bv[o];
                for j in 0..k {
                    let src = ti as isize + j as isize - center as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    for ci in 0..c_in {
                        acc += xv[src * c_in + ci] * wv[(o * c_in + ci) * k + j];
                    }
                }
                out[ti * c_out + o] = acc;
            }
        }
        let rg = self.any_requires_grad(&[x, w, b]);
        self.push(vec![t, c_out], out, rg, Op::Conv1d { x, w, b })
    }

    /// Depthwise 1-D convolution: one kernel per channel.
    /// `x` is `[T, c]`, `w` is `[c, k]` with odd k, `b` is `[c]`.
    pub fn depthwise_conv1d(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (t, c) = self.matrix_shape(x, "depthwise conv input")?;
        let (wc, k) = self.matrix_shape(w, "depthwise conv weight")?;
        if wc != c {
            return Err(Error::Shape(format!(
                "depthwise conv weight has {wc} channels, input has {c}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::Shape(format!("depthwise kernel {k} must be odd")));
        }
        let (bm, bn) = self.matrix_shape(b, "depthwise conv bias")?;
        if bm != 1 || bn != c {
            return Err(Error::Shape(format!(
                "depthwise bias must be [{c}], got [{bn}]"
            )));
        }
        let center = k / 2;
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let bv = &self.nodes[b].value;
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            for ch in 0..c {
                let mut acc = bv[ch];
                for j in 0..k {
                    let src = ti as isize + j as isize - center as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    acc += xv[src as usize * c + ch] * wv[ch * k + j];
                }
                out[ti * c + ch] = acc;
            }
        }
        let rg = self.any_requires_grad(&[x, w, b]);
        self.push(vec![t, c], out, rg, Op::DepthwiseConv1d { x, w, b })
    }

    /// Replace flagged rows of `base` with the vector `fill`. This is how the
    /// learned mask vector enters the graph so it receives gradient.
    pub fn masked_fill(&mut self, base: VarId, fill: VarId, rows: &[bool]) -> Result<VarId> {
        let (m, n) = self.matrix_shape(base, "masked_fill base")?;
        let (fm, fn_) = self.matrix_shape(fill, "masked_fill fill")?;
        if fm != 1 || fn_ != n {
            return Err(Error::Shape(format!(
                "masked_fill vector must be [{n}], got [{fn_}]"
            )));
        }
        if rows.len() != m {
            return Err(Error::Shape(format!(
                "masked_fill flags cover {} rows, base has {m}",
                rows.len()
            )));
        }
        let mut out = self.nodes[base].value.clone();
        for (i, &masked) in rows.iter().enumerate() {
            if masked {
                out[i * n..(i + 1) * n].copy_from_slice(&self.nodes[fill].value);
            }
        }
        let shape = self.nodes[base].shape.clone();
        let rg = self.any_requires_grad(&[base, fill]);
        self.push(
            shape,
            out,
            rg,
            Op::MaskedFill {
                base,
                fill,
                rows: rows.to_vec(),
            },
        )
    }

    /// Scalar sum of all entries.
    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let total: f64 = self.nodes[a].value.iter().sum();
        let rg = self.nodes[a].requires_grad;
        self.push(vec![1], vec![total], rg, Op::Sum(a))
    }

    /// Mean absolute error over the flagged rows only.
    pub fn masked_l1(&mut self, pred: VarId, target: VarId, rows: &[bool]) -> Result<VarId> {
        self.masked_loss(pred, target, rows, false)
    }

    /// Mean squared error over the flagged rows only.
    pub fn masked_l2(&mut self, pred: VarId, target: VarId, rows: &[bool]) -> Result<VarId> {
        self.masked_loss(pred, target, rows, true)
    }

    fn masked_loss(
        &mut self,
        pred: VarId,
        target: VarId,
        rows: &[bool],
        squared: bool,
    ) -> Result<VarId> {
        self.require_same_shape(pred, target)?;
        let (m, n) = self.matrix_shape(pred, "masked loss")?;
        if rows.len() != m {
            return Err(Error::Shape(format!(
                "mask covers {} rows, tensors have {m}",
                rows.len()
            )));
        }
        let count = rows.iter().filter(|&&r| r).count() * n;
        if count == 0 {
            return Err(Error::Data("empty mask plan: loss is undefined".into()));
        }
        let pv = &self.nodes[pred].value;
        let tv = &self.nodes[target].value;
        let mut total = 0.0;
        for (i, &masked) in rows.iter().enumerate() {
            if !masked {
                continue;
            }
            for j in 0..n {
                let d = pv[i * n + j] - tv[i * n + j];
                total += if squared { d * d } else { d.abs() };
            }
        }
        let value = total / count as f64;
        let rg = self.any_requires_grad(&[pred, target]);
        let op = if squared {
            Op::MaskedL2 {
                pred,
                target,
                rows: rows.to_vec(),
            }
        } else {
            Op::MaskedL1 {
                pred,
                target,
                rows: rows.to_vec(),
            }
        };
        self.push(vec![1], vec![value], rg, op)
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients land in each reachable
    /// differentiable node; a second call without a fresh forward errors.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Numeric(
                "backward called twice on one recorded forward pass".into(),
            ));
        }
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        self.backward_done = true;
        self.nodes[loss].grad = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => self.back_matmul(id, a, b),
                Op::Transpose(a) => self.back_transpose(id, a),
                Op::Add(a, b) => {
                    let g = self.take_grad(id);
                    self.add_to_grad(a, &g);
                    self.add_to_grad(b, &g);
                    self.nodes[id].grad = Some(g);
                }
                Op::AddRow(a, v) => self.back_add_row(id, a, v),
                Op::Scale(a, c) => {
                    let g = self.take_grad(id);
                    if self.nodes[a].requires_grad {
                        let scaled: Vec<f64> = g.iter().map(|x| x * c).collect();
                        self.add_to_grad(a, &scaled);
                    }
                    self.nodes[id].grad = Some(g);
                }
                Op::Mul(a, b) => self.back_mul(id, a, b),
                Op::Relu(a) => self.back_unary(id, a, |x, _y, g| if x > 0.0 { g } else { 0.0 }),
                Op::Sigmoid(a) => self.back_unary(id, a, |_x, y, g| g * y * (1.0 - y)),
                Op::Swish(a) => self.back_unary(id, a, |x, _y, g| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                }),
                Op::Tanh(a) => self.back_unary(id, a, |_x, y, g| g * (1.0 - y * y)),
                Op::Softmax(a) => self.back_softmax(id, a),
                Op::LayerNorm { x, gain, bias } => self.back_layer_norm(id, x, gain, bias),
                Op::Glu(a) => self.back_glu(id, a),
                Op::Embedding { table, indices } => self.back_embedding(id, table, &indices),
                Op::Concat { parts, axis } => self.back_concat(id, &parts, axis),
                Op::Slice {
                    x,
                    axis,
                    start,
                    len,
                } => self.back_slice(id, x, axis, start, len),
                Op::Dropout { x, keep } => {
                    let g = self.take_grad(id);
                    if self.nodes[x].requires_grad {
                        let gx: Vec<f64> = g.iter().zip(&keep).map(|(gi, k)| gi * k).collect();
                        self.add_to_grad(x, &gx);
                    }
                    self.nodes[id].grad = Some(g);
                }
                Op::Conv1d { x, w, b } => self.back_conv1d(id, x, w, b),
                Op::DepthwiseConv1d { x, w, b } => self.back_depthwise(id, x, w, b),
                Op::MaskedFill { base, fill, rows } => self.back_masked_fill(id, base, fill, &rows),
                Op::Sum(a) => {
                    let g = self.take_grad(id)[0];
                    if self.nodes[a].requires_grad {
                        let ga = vec![g; self.nodes[a].value.len()];
                        self.add_to_grad(a, &ga);
                    }
                    self.nodes[id].grad = Some(vec![g]);
                }
                Op::MaskedL1 { pred, target, rows } => {
                    self.back_masked_loss(id, pred, target, &rows, false)
                }
                Op::MaskedL2 { pred, target, rows } => {
                    self.back_masked_loss(id, pred, target, &rows, true)
                }
            }
        }
        Ok(())
    }

    /// Add this pass's parameter gradients into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParameterStore) -> Result<()> {
        for (name, id) in &self.params {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("parameter {name:?} vanished from store")))?;
            if let Some(g) = self.nodes[*id].grad.as_ref() {
                for (dst, src) in p.grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        store.mark_grads_ready();
        Ok(())
    }

    fn take_grad(&mut self, id: VarId) -> Vec<f64> {
        self.nodes[id]
            .grad
            .take()
            .expect("grad present by loop guard")
    }

    fn add_to_grad(&mut self, id: VarId, delta: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let node = &mut self.nodes[id];
        match node.grad.as_mut() {
            Some(g) => {
                for (dst, src) in g.iter_mut().zip(delta) {
                    *dst += src;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }

    fn back_matmul(&mut self, id: VarId, a: VarId, b: VarId) {
        let g = self.take_grad(id);
        let (m, k) = rows_cols(&self.nodes[a].shape);
        let (_, n) = rows_cols(&self.nodes[b].shape);
        if self.nodes[a].requires_grad {
            // dA = g · Bᵀ
            let bv = &self.nodes[b].value;
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for j in 0..n {
                    let gij = g[i * n + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for l in 0..k {
                        da[i * k + l] += gij * bv[l * n + j];
                    }
                }
            }
            self.add_to_grad(a, &da);
        }
        if self.nodes[b].requires_grad {
            // dB = Aᵀ · g
            let av = &self.nodes[a].value;
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                for l in 0..k {
                    let ail = av[i * k + l];
                    if ail == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        db[l * n + j] += ail * g[i * n + j];
                    }
                }
            }
            self.add_to_grad(b, &db);
        }
        self.nodes[id].grad = Some(g);
    }

    fn back_transpose(&mut self, id: VarId, a: VarId) {
        let g = self.take_grad(id);
        if self.nodes[a].requires_grad {
            let (n, m) = rows_cols(&self.nodes[id].shape);
            let mut ga = vec![0.0; m * n];
            for i in 0..n {
                for j in 0..m {
                    ga[j * n + i] = g[i * m + j];
                }
            }
            self.add_to_grad(a, &ga);
        }
        self.nodes[id].grad = Some(g);
    }

    fn back_add_row(&mut self, id: VarId, a: VarId, v: VarId) {
        let g = self.take_grad(id);
        let (m, n) = rows_cols(&self.nodes[a].shape);
        if self.nodes[a].requires_grad {
            self.add_to_grad(a, &g);
        }
        if self.nodes[v].requires_grad {
            let mut gv = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    gv[j] += g[i * n + j];
                }
            }
            self.add_to_grad(v, &gv);
        }
        self.nodes[id].grad = Some(g);
    }

    fn back_mul(&mut self, id: VarId, a: VarId, b: VarId) {
        let g = self.take_grad(id);
        if self.nodes[a].requires_grad {
            let ga: Vec<f64> = g
                .iter()
                .zip(&self.nodes[b].value)
                .map(|(x, y)| x * y)
                .collect();
            self.add_to_grad(a, &ga);
        }
        if self.nodes[b].requires_grad {
            let gb: Vec<f64> = g
                .iter()
                .zip(&self.nodes[a].value)
                .map(|(x, y)| x * y)
                .collect();
            self.add_to_grad(b, &gb);
        }
        self.nodes[id].grad = Some(g);
    }

    fn back_unary(&mut self, id: VarId, a: VarId, df: impl Fn(f64, f64, f64) -> f64) {
        let g = self.take_grad(id);
        if self.nodes[a].requires_grad {
            let ga: Vec<f64> = self.nodes[a]
                .value
                .iter()
                .zip(&self.nodes[id].value)
                .zip(&g)
                .map(|((&x, &y), &gi)| df(x, y, gi))
                .collect();
            self.add_to_grad(a, &ga);
        }
        self.nodes[id].grad = Some(g);
    }

    fn back_softmax(&mut self, id: VarId, a: VarId) {
        let g = self.take_grad(id);
        if self.nodes[a].requires_grad {
            let (m, n) = rows_cols(&self.nodes[id].shape);
            let s = &self.nodes[id].value;
            let mut ga = vec![0.0; m * n];
            for i in 0..m {
                let dot: f64 = (0..n).map(|j| g[i * n + j] * s[i * n + j]).sum();
                for j in 0..n {
                    ga[i * n + j] = s[i * n + j] * (g[i * n + j] - dot);
                }
            }
            self.add_to_grad(a, &ga);
        }
        self.nodes[id].grad = Some(g);
    }

    fn back_layer_norm(&mut self, id: VarId, x: VarId, gain: VarId, bias: VarId) {
        let g = self.take_grad(id);
        let (m, n) = rows_cols(&self.nodes[x].shape);
        let xv = &self.nodes[x].value;
        let gv = &self.nodes[gain].value;

        let mut gx = vec![0.0; m * n];
        let mut ggain = vec![0.0; n];
        let mut gbias = vec![0.0; n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();

            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for j in 0..n {
                let xhat = (row[j] - mean) * rstd;
                let go = g[i * n + j];
                ggain[j] += go * xhat;
                gbias[j] += go;
                let dxhat = go * gv[j];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
            }
            mean_dxhat /= n as f64;
            mean_dxhat_xhat /= n as f64;
            for j in 0..n {
                let xhat = (row[j] - mean) * rstd;
                let dxhat = g[i * n + j] * gv[j];
                gx[i * n + j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
        if self.nodes[x].requires_grad {
            self.add_to_grad(x, &gx);
        }
        if self.nodes[gain].requires_grad {
            self.add_to_grad(gain, &ggain);
        }
        if self.nodes[bias].requires_grad {
            self.add_to_grad(bias, &gbias);
        }
        self.nodes[id].grad = Some(g);
    }

    fn back_glu(&mut self, id: VarId, a: VarId) {
        let g = self.take_grad(id);
        if self.nodes[a].requires_grad {
            let (m, n2) = rows_cols(&self.nodes[a].shape);
            let n = n2 / 2;
            let av = &self.nodes[a].value;
            let mut ga = vec![0.0; m * n2];
            for i in 0..m {
                for j in 0..n {
                    let x = av[i * n2 + j];
                    let s = sigmoid(av[i * n2 + n + j]);
                    let go = g[i * n + j];
                    ga[i * n2 + j] = go * s;
                    ga[i * n2 + n + j] = go * x * s * (1.0 - s);
                }
            }
            self.add_to_grad(a, &ga);
        }
        self.nodes[id].grad = Some(g);
    }

    fn back_embedding(&mut self, id: VarId, table: VarId, indices: &[usize]) {
        let g = self.take_grad(id);
        if self.nodes[table].requires_grad {
            let (v, d) = rows_cols(&self.nodes[table].shape);
            let mut gt = vec![0.0; v * d];
            for (i, &idx) in indices.iter().enumerate() {
                for j in 0..d {
                    gt[idx * d + j] += g[i * d + j];
                }
            }
            self.add_to_grad(table, &gt);
        }
        self.nodes[id].grad = Some(g);
    }

    fn back_concat(&mut self, id: VarId, parts: &[VarId], axis: usize) {
        let g = self.take_grad(id);
        let (_, cols) = rows_cols(&self.nodes[id].shape);
        if axis == 0 {
            let mut row_offset = 0;
            for &p in parts {
                let (pm, pn) = rows_cols(&self.nodes[p].shape);
                if self.nodes[p].requires_grad {
                    let gp = g[row_offset * pn..(row_offset + pm) * pn].to_vec();
                    self.add_to_grad(p, &gp);
                }
                row_offset += pm;
            }
        } else {
            let mut col_offset = 0;
            for &p in parts {
                let (pm, pn) = rows_cols(&self.nodes[p].shape);
                if self.nodes[p].requires_grad {
                    let mut gp = Vec::with_capacity(pm * pn);
                    for i in 0..pm {
                        gp.extend_from_slice(&g[i * cols + col_offset..i * cols + col_offset + pn]);
                    }
                    self.add_to_grad(p, &gp);
                }
                col_offset += pn;
            }
        }
        self.nodes[id].grad = Some(g);
    }

    fn back_slice(&mut self, id: VarId, x: VarId, axis: usize, start: usize, len: usize) {
        let g = self.take_grad(id);
        if self.nodes[x].requires_grad {
            let (m, n) = rows_cols(&self.nodes[x].shape);
            let mut gx = vec![0.0; m * n];
            if axis == 0 {
                gx[start * n..(start + len) * n].copy_from_slice(&g);
            } else {
                for i in 0..m {
                    gx[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
            }
            self.add_to_grad(x, &gx);
        }
        self.nodes[id].grad = Some(g);
    }

    fn back_conv1d(&mut self, id: VarId, x: VarId, w: VarId, b: VarId) {
        let g = self.take_grad(id);
        let (t, c_in) = rows_cols(&self.nodes[x].shape);
        let wshape = &self.nodes[w].shape;
        let (c_out, k) = (wshape[0], wshape[2]);
        let center = k / 2;

        if self.nodes[b].requires_grad {
            let mut gb = vec![0.0; c_out];
            for ti in 0..t {
                for o in 0..c_out {
                    gb[o] += g[ti * c_out + o];
                }
            }
            self.add_to_grad(b, &gb);
        }
        if self.nodes[w].requires_grad {
            let xv = &self.nodes[x].value;
            let mut gw = vec![0.0; c_out * c_in * k];
            for ti in 0..t {
                for j in 0..k {
                    let src = ti as isize + j as isize - center as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    for o in 0..c_out {
                        let go = g[ti * c_out + o];
                        if go == 0.0 {
                            continue;
                        }
                        for ci in 0..c_in {
                            gw[(o * c_in + ci) * k + j] += go * xv[src * c_in + ci];
                        }
                    }
                }
            }
            self.add_to_grad(w, &gw);
        }
        if self.nodes[x].requires_grad {
            let wv = &self.nodes[w].value;
            let mut gx = vec![0.0; t * c_in];
            for ti in 0..t {
                for j in 0..k {
                    let src = ti as isize + j as isize - center as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    for o in 0..c_out {
                        let go = g[ti * c_out + o];
                        if go == 0.0 {
                            continue;
                        }
                        for ci in 0..c_in {
                            gx[src * c_in + ci] += go * wv[(o * c_in + ci) * k + j];
                        }
                    }
                }
            }
            self.add_to_grad(x, &gx);
        }
        self.nodes[id].grad = Some(g);
    }

    fn back_depthwise(&mut self, id: VarId, x: VarId, w: VarId, b: VarId) {
        let g = self.take_grad(id);
        let (t, c) = rows_cols(&self.nodes[x].shape);
        let (_, k) = rows_cols(&self.nodes[w].shape);
        let center = k / 2;

        if self.nodes[b].requires_grad {
            let mut gb = vec![0.0; c];
            for ti in 0..t {
                for ch in 0..c {
                    gb[ch] += g[ti * c + ch];
                }
            }
            self.add_to_grad(b, &gb);
        }
        if self.nodes[w].requires_grad {
            let xv = &self.nodes[x].value;
            let mut gw = vec![0.0; c * k];
            for ti in 0..t {
                for j in 0..k {
                    let src = ti as isize + j as isize - center as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    for ch in 0..c {
                        gw[ch * k + j] += g[ti * c + ch] * xv[src * c + ch];
                    }
                }
            }
            self.add_to_grad(w, &gw);
        }
        if self.nodes[x].requires_grad {
            let wv = &self.nodes[w].value;
            let mut gx = vec![0.0; t * c];
            for ti in 0..t {
                for j in 0..k {
                    let src = ti as isize + j as isize - center as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    for ch in 0..c {
                        gx[src * c + ch] += g[ti * c + ch] * wv[ch * k + j];
                    }
                }
            }
            self.add_to_grad(x, &gx);
        }
        self.nodes[id].grad = Some(g);
    }

    fn back_masked_fill(&mut self, id: VarId, base: VarId, fill: VarId, rows: &[bool]) {
        let g = self.take_grad(id);
        let (_, n) = rows_cols(&self.nodes[base].shape);
        if self.nodes[base].requires_grad {
            let mut gb = g.clone();
            for (i, &masked) in rows.iter().enumerate() {
                if masked {
                    gb[i * n..(i + 1) * n].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            self.add_to_grad(base, &gb);
        }
        if self.nodes[fill].requires_grad {
            let mut gf = vec![0.0; n];
            for (i, &masked) in rows.iter().enumerate() {
                if masked {
                    for j in 0..n {
                        gf[j] += g[i * n + j];
                    }
                }
            }
            self.add_to_grad(fill, &gf);
        }
        self.nodes[id].grad = Some(g);
    }

    fn back_masked_loss(
        &mut self,
        id: VarId,
        pred: VarId,
        target: VarId,
        rows: &[bool],
        squared: bool,
    ) {
        let g = self.take_grad(id)[0];
        let (_, n) = rows_cols(&self.nodes[pred].shape);
        let count = (rows.iter().filter(|&&r| r).count() * n) as f64;
        let pv = &self.nodes[pred].value;
        let tv = &self.nodes[target].value;
        let mut gp = vec![0.0; pv.len()];
        for (i, &masked) in rows.iter().enumerate() {
            if !masked {
                continue;
            }
            for j in 0..n {
                let d = pv[i * n + j] - tv[i * n + j];
                gp[i * n + j] = if squared {
                    g * 2.0 * d / count
                } else {
                    // sign convention: derivative of |d| is 0 at d == 0
                    g * if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    } / count
                };
            }
        }
        if self.nodes[pred].requires_grad {
            self.add_to_grad(pred, &gp);
        }
        if self.nodes[target].requires_grad {
            let gt: Vec<f64> = gp.iter().map(|v| -v).collect();
            self.add_to_grad(target, &gt);
        }
        self.nodes[id].grad = Some(vec![g]);
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Multi-head scaled dot-product attention over pre-projected q/k/v, with the
/// output projection applied. Attention is full (bidirectional); positions
/// carry no causal mask.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: VarId,
    k: VarId,
    v: VarId,
    heads: usize,
    w_out: VarId,
    b_out: VarId,
) -> Result<VarId> {
    let d = match tape.shape(q) {
        [_, d] => *d,
        s => {
            return Err(Error::Shape(format!(
                "attention input must be 2-D, got {s:?}"
            )))
        }
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!(
            "model dim {d} not divisible by {heads} heads"
        )));
    }
    let d_head = d / heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 1, h * d_head, d_head)?;
        let kh = tape.slice(k, 1, h * d_head, d_head)?;
        let vh = tape.slice(v, 1, h * d_head, d_head)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let weights = tape.softmax(scaled)?;
        head_outputs.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat(&head_outputs, 1)?;
    let projected = tape.matmul(merged, w_out)?;
    tape.add_row(projected, b_out)
}
