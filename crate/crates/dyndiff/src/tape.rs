//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes and replays it
//! in reverse to accumulate gradients into a [`ParamStore`]. The tape is
//! rebuilt on every forward pass; nothing is cached across passes.
//!
//! Every node creation validates output finiteness, so NaN/Inf surfaces as an
//! error at the operator that produced it instead of propagating.

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Named trainable tensors. Names are unique; insertion order is stable and
/// drives checkpoint layout.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Real> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            map: IndexMap::new(),
        }
    }

    /// Registers a parameter. The tensor is flagged `requires_grad` and gets
    /// a zeroed gradient accumulator. Duplicate names are an error.
    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::Autodiff(format!("duplicate parameter name {name:?}")));
        }
        self.map.insert(name.to_string(), tensor.into_param());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elems(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.map.values_mut() {
            t.zero_grad();
        }
    }

    /// Global L2 norm over all gradient accumulators.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for t in self.map.values() {
            if let Some(g) = &t.grad {
                for v in g {
                    let x = v.to_f64();
                    acc += x * x;
                }
            }
        }
        acc.sqrt()
    }

    /// Scales every gradient so the global norm does not exceed `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = T::from_f64(max_norm / norm);
            for t in self.map.values_mut() {
                if let Some(g) = &mut t.grad {
                    g.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        norm
    }
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Matmul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dilation: usize,
        causal: bool,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Softmax(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
    },
    Relu(NodeId),
    Silu(NodeId),
    MeanSq(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    BroadcastAddTime {
        x: NodeId,
        v: NodeId,
    },
    BroadcastAddRows {
        x: NodeId,
        m: NodeId,
    },
    RepeatRows {
        x: NodeId,
        rows: usize,
    },
    Transpose12(NodeId),
    IndexTime {
        x: NodeId,
        t: usize,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    // Extra forward-pass state some backwards need (layer norm row stats,
    // attention probabilities).
    aux: Vec<T>,
}

/// Variance guard added before the layer-norm rsqrt.
pub const LAYER_NORM_EPS: f64 = 1e-5;

// Below this many multiply-accumulates a kernel stays single-threaded; the
// rayon dispatch overhead dominates tiny shapes.
const PAR_THRESHOLD: usize = 1 << 16;

/// One recorded forward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(usize, String)>,
    spent: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            spent: false,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of parameters bound into this tape, in first-use order.
    pub fn bound_params(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for (_, n) in &self.bindings {
            if !names.contains(n) {
                names.push(n.clone());
            }
        }
        names
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, aux: Vec<T>, name: &str) -> Result<NodeId> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op, aux });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Records a constant input (no gradient flows into it).
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Leaf, Vec::new(), "leaf")
    }

    /// Binds a named parameter as a leaf; `backward` accumulates its gradient
    /// into the store entry of the same name.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<NodeId> {
        let tensor = store
            .get(name)
            .ok_or_else(|| Error::Autodiff(format!("unknown parameter {name:?}")))?
            .clone();
        let id = self.push(
            Tensor::from_vec(tensor.data().to_vec(), tensor.shape().to_vec())?,
            Op::Leaf,
            Vec::new(),
            "param",
        )?;
        self.bindings.push((id.0, name.to_string()));
        Ok(id)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let out = Tensor::from_vec(data, self.value(a).shape().to_vec())?;
        self.push(out, Op::Add(a, b), Vec::new(), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let out = Tensor::from_vec(data, self.value(a).shape().to_vec())?;
        self.push(out, Op::Sub(a, b), Vec::new(), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let out = Tensor::from_vec(data, self.value(a).shape().to_vec())?;
        self.push(out, Op::Mul(a, b), Vec::new(), "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let out = Tensor::from_vec(data, self.value(a).shape().to_vec())?;
        self.push(out, Op::Scale(a, c), Vec::new(), "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|&x| x + c).collect();
        let out = Tensor::from_vec(data, self.value(a).shape().to_vec())?;
        self.push(out, Op::AddScalar(a, c), Vec::new(), "add_scalar")
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::from_vec(out, vec![m, n])?;
        self.push(out, Op::Matmul(a, b), Vec::new(), "matmul")
    }

    /// Affine map over the last axis: `[.., in] x [in, out] + [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        let d_in = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != d_in || sb.len() != 1 || sb[0] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let (rows, d_out) = (self.value(x).numel() / d_in, sw[1]);
        let mut out = vec![T::ZERO; rows * d_out];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        run_rows(&mut out, d_out, rows * d_in * d_out, |r, orow| {
            orow.copy_from_slice(bd);
            let xrow = &xd[r * d_in..(r + 1) * d_in];
            for (i, &xv) in xrow.iter().enumerate() {
                let wrow = &wd[i * d_out..(i + 1) * d_out];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        });
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = d_out;
        let out = Tensor::from_vec(out, shape)?;
        self.push(out, Op::Linear { x, w, b }, Vec::new(), "linear")
    }

    /// Length-preserving dilated 1-D convolution.
    ///
    /// `x: [B, Cin, L]`, `w: [Cout, Cin, K]`, `b: [Cout]`. Causal mode pads
    /// `(K-1)*dilation` on the left only, so output at time `i` never reads
    /// inputs after `i`; non-causal mode splits the same padding across both
    /// ends.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dilation: usize,
        causal: bool,
    ) -> Result<NodeId> {
        if dilation < 1 {
            return Err(Error::Autodiff("conv1d: dilation must be >= 1".into()));
        }
        let (sx, sw, sb) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || sb.len() != 1 || sb[0] != sw[0] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (batch, c_in, len) = (sx[0], sx[1], sx[2]);
        let (c_out, kernel) = (sw[0], sw[2]);
        let pad = pad_left(kernel, dilation, causal);
        let mut out = vec![T::ZERO; batch * c_out * len];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        run_rows(&mut out, len, batch * c_out * len * c_in * kernel, |row, orow| {
            let (bi, co) = (row / c_out, row % c_out);
            orow.iter_mut().for_each(|v| *v = bd[co]);
            for ci in 0..c_in {
                let xrow = &xd[(bi * c_in + ci) * len..(bi * c_in + ci + 1) * len];
                for k in 0..kernel {
                    let wv = wd[(co * c_in + ci) * kernel + k];
                    let off = (k * dilation) as isize - pad as isize;
                    let t0 = (-off).max(0) as usize;
                    let t1 = ((len as isize - off).min(len as isize)).max(0) as usize;
                    for t in t0..t1 {
                        orow[t] += wv * xrow[(t as isize + off) as usize];
                    }
                }
            }
        });
        let out = Tensor::from_vec(out, vec![batch, c_out, len])?;
        self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                dilation,
                causal,
            },
            Vec::new(),
            "conv1d",
        )
    }

    /// Layer normalization over the last axis with learned affine.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let dim = *sx.last().unwrap();
        if self.value(gamma).shape() != [dim] || self.value(beta).shape() != [dim] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: sx,
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let rows = self.value(x).numel() / dim;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_dim = T::from_f64(1.0 / dim as f64);
        let mut out = vec![T::ZERO; rows * dim];
        let mut aux = vec![T::ZERO; rows * 2]; // (mean, rstd) per row
        for r in 0..rows {
            let xrow = &xd[r * dim..(r + 1) * dim];
            let mean = xrow.iter().copied().sum::<T>() * inv_dim;
            let var = xrow
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                * inv_dim;
            let rstd = T::ONE / (var + eps).sqrt();
            aux[r * 2] = mean;
            aux[r * 2 + 1] = rstd;
            let orow = &mut out[r * dim..(r + 1) * dim];
            for ((o, &xv), (&g, &b)) in orow.iter_mut().zip(xrow).zip(gd.iter().zip(bd)) {
                *o = (xv - mean) * rstd * g + b;
            }
        }
        let out = Tensor::from_vec(out, sx)?;
        self.push(out, Op::LayerNorm { x, gamma, beta }, aux, "layer_norm")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let dim = *sx.last().unwrap();
        let rows = self.value(x).numel() / dim;
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            softmax_row(&mut out[r * dim..(r + 1) * dim]);
        }
        let out = Tensor::from_vec(out, sx)?;
        self.push(out, Op::Softmax(x), Vec::new(), "softmax")
    }

    /// Scaled dot-product multi-head self-attention over `[B, P, D]` inputs.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let sq = self.value(q).shape().to_vec();
        if sq.len() != 3 || heads == 0 || sq[2] % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: sq,
                rhs: vec![heads],
            });
        }
        let (out, probs) = mha_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            sq[0],
            sq[1],
            sq[2],
            heads,
        );
        let out = Tensor::from_vec(out, sq)?;
        self.push(out, Op::Attention { q, k, v, heads }, probs, "attention")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::ZERO { v } else { T::ZERO })
            .collect();
        let out = Tensor::from_vec(data, self.value(x).shape().to_vec())?;
        self.push(out, Op::Relu(x), Vec::new(), "relu")
    }

    /// SiLU (x * sigmoid(x)); the smooth activation used inside the denoiser
    /// residual blocks.
    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        let out = Tensor::from_vec(data, self.value(x).shape().to_vec())?;
        self.push(out, Op::Silu(x), Vec::new(), "silu")
    }

    /// Mean of squared entries, reduced to a scalar.
    pub fn mean_sq(&mut self, x: NodeId) -> Result<NodeId> {
        let n = T::from_f64(self.value(x).numel() as f64);
        let s = self.value(x).data().iter().map(|&v| v * v).sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::MeanSq(x), Vec::new(), "mean_sq")
    }

    /// Concatenates same-rank tensors along `axis`; all other extents must
    /// agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Autodiff("concat: no inputs".into()));
        }
        let base = self.value(parts[0]).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Autodiff(format!("concat: axis {axis} out of range")));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let mut out = vec![T::ZERO; outer * axis_total * inner];
        let mut axis_off = 0usize;
        for &p in parts {
            let s_axis = self.value(p).shape()[axis];
            let pd = self.value(p).data();
            for o in 0..outer {
                let src = &pd[o * s_axis * inner..(o + 1) * s_axis * inner];
                let dst_start = (o * axis_total + axis_off) * inner;
                out[dst_start..dst_start + s_axis * inner].copy_from_slice(src);
            }
            axis_off += s_axis;
        }
        let out = Tensor::from_vec(out, shape)?;
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            Vec::new(),
            "concat",
        )
    }

    /// `[B, P, D] + [B, D]`: adds one vector per batch item to every time
    /// position.
    pub fn broadcast_add_time(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (sx, sv) = (self.value(x).shape().to_vec(), self.value(v).shape().to_vec());
        if sx.len() != 3 || sv.len() != 2 || sx[0] != sv[0] || sx[2] != sv[1] {
            return Err(Error::ShapeMismatch {
                op: "broadcast_add_time",
                lhs: sx,
                rhs: sv,
            });
        }
        let (b, p, d) = (sx[0], sx[1], sx[2]);
        let xd = self.value(x).data();
        let vd = self.value(v).data();
        let mut out = xd.to_vec();
        for bi in 0..b {
            let vrow = &vd[bi * d..(bi + 1) * d];
            for pi in 0..p {
                let orow = &mut out[(bi * p + pi) * d..(bi * p + pi + 1) * d];
                for (o, &vv) in orow.iter_mut().zip(vrow) {
                    *o += vv;
                }
            }
        }
        let out = Tensor::from_vec(out, sx)?;
        self.push(out, Op::BroadcastAddTime { x, v }, Vec::new(), "broadcast_add_time")
    }

    /// `[B, P, D] + [P, D]`: adds a per-position matrix to every batch item.
    pub fn broadcast_add_rows(&mut self, x: NodeId, m: NodeId) -> Result<NodeId> {
        let (sx, sm) = (self.value(x).shape().to_vec(), self.value(m).shape().to_vec());
        if sx.len() != 3 || sm.len() != 2 || sx[1] != sm[0] || sx[2] != sm[1] {
            return Err(Error::ShapeMismatch {
                op: "broadcast_add_rows",
                lhs: sx,
                rhs: sm,
            });
        }
        let (b, p, d) = (sx[0], sx[1], sx[2]);
        let xd = self.value(x).data();
        let md = self.value(m).data();
        let mut out = xd.to_vec();
        for bi in 0..b {
            for (o, &mv) in out[bi * p * d..(bi + 1) * p * d].iter_mut().zip(md) {
                *o += mv;
            }
        }
        let out = Tensor::from_vec(out, sx)?;
        self.push(out, Op::BroadcastAddRows { x, m }, Vec::new(), "broadcast_add_rows")
    }

    /// Tiles a vector `[D]` into `[rows, D]`.
    pub fn repeat_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 1 || rows == 0 {
            return Err(Error::ShapeMismatch {
                op: "repeat_rows",
                lhs: sx,
                rhs: vec![rows],
            });
        }
        let d = sx[0];
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            out.extend_from_slice(xd);
        }
        let out = Tensor::from_vec(out, vec![rows, d])?;
        self.push(out, Op::RepeatRows { x, rows }, Vec::new(), "repeat_rows")
    }

    /// Swaps the last two axes of a 3-D tensor: `[B, A, C] -> [B, C, A]`.
    pub fn transpose_12(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "transpose_12",
                lhs: sx,
                rhs: vec![],
            });
        }
        let (b, a, c) = (sx[0], sx[1], sx[2]);
        let out = transpose_last2(self.value(x).data(), b, a, c);
        let out = Tensor::from_vec(out, vec![b, c, a])?;
        self.push(out, Op::Transpose12(x), Vec::new(), "transpose_12")
    }

    /// Selects one time position: `[B, C, L] -> [B, C]`.
    pub fn index_time(&mut self, x: NodeId, t: usize) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 3 || t >= sx[2] {
            return Err(Error::ShapeMismatch {
                op: "index_time",
                lhs: sx,
                rhs: vec![t],
            });
        }
        let (b, c, l) = (sx[0], sx[1], sx[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c);
        for bi in 0..b {
            for ci in 0..c {
                out.push(xd[(bi * c + ci) * l + t]);
            }
        }
        let out = Tensor::from_vec(out, vec![b, c])?;
        self.push(out, Op::IndexTime { x, t }, Vec::new(), "index_time")
    }

    /// Reverse pass from a scalar loss. Gradients of bound parameters are
    /// accumulated into `params` (the caller zeroes them between steps).
    ///
    /// Errors when the loss is not scalar or when called twice on the same
    /// recorded pass.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamStore<T>) -> Result<()> {
        if self.spent {
            return Err(Error::Autodiff(
                "backward called twice on the same tape; rebuild the forward pass first".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.spent = true;

        let mut grads: Vec<Vec<T>> = self
            .nodes
            .iter()
            .map(|n| vec![T::ZERO; n.value.numel()])
            .collect();
        grads[loss.0][0] = T::ONE;

        for i in (0..=loss.0).rev() {
            // Split off the current node's gradient so input grads can be
            // accumulated while reading it.
            let (before, rest) = grads.split_at_mut(i);
            let g = &rest[0];
            if g.iter().all(|&v| v == T::ZERO) {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    axpy(&mut before[a.0], g, T::ONE);
                    axpy(&mut before[b.0], g, T::ONE);
                }
                Op::Sub(a, b) => {
                    axpy(&mut before[a.0], g, T::ONE);
                    axpy(&mut before[b.0], g, -T::ONE);
                }
                Op::Mul(a, b) => {
                    if a == b {
                        let av = self.nodes[a.0].value.data();
                        for ((ga, &gv), &x) in before[a.0].iter_mut().zip(g).zip(av) {
                            *ga += gv * (x + x);
                        }
                    } else {
                        let av = self.nodes[a.0].value.data();
                        let bv = self.nodes[b.0].value.data();
                        let (lo, hi) = (a.0.min(b.0), a.0.max(b.0));
                        let (first, second) = before.split_at_mut(hi);
                        let (g_lo, g_hi) = (&mut first[lo], &mut second[0]);
                        let (ga, gb) = if a.0 < b.0 { (g_lo, g_hi) } else { (g_hi, g_lo) };
                        for ((x, &gv), &b_) in ga.iter_mut().zip(g).zip(bv) {
                            *x += gv * b_;
                        }
                        for ((x, &gv), &a_) in gb.iter_mut().zip(g).zip(av) {
                            *x += gv * a_;
                        }
                    }
                }
                Op::Scale(a, c) => axpy(&mut before[a.0], g, *c),
                Op::AddScalar(a, _) => axpy(&mut before[a.0], g, T::ONE),
                Op::Matmul(a, b) => {
                    let sa = self.nodes[a.0].value.shape();
                    let sb = self.nodes[b.0].value.shape();
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    // ga += g . b^T ; gb += a^T . g
                    if a == b {
                        let mut tmp = vec![T::ZERO; m * k];
                        matmul_bt_acc(g, bv, m, n, k, &mut tmp);
                        matmul_at_acc(av, g, m, k, n, &mut tmp);
                        axpy(&mut before[a.0], &tmp, T::ONE);
                    } else {
                        let (lo, hi) = (a.0.min(b.0), a.0.max(b.0));
                        let (first, second) = before.split_at_mut(hi);
                        let (g_lo, g_hi) = (&mut first[lo], &mut second[0]);
                        let (ga, gb) = if a.0 < b.0 { (g_lo, g_hi) } else { (g_hi, g_lo) };
                        matmul_bt_acc(g, bv, m, n, k, ga);
                        matmul_at_acc(av, g, m, k, n, gb);
                    }
                }
                Op::Linear { x, w, b } => {
                    let d_in = *self.nodes[x.0].value.shape().last().unwrap();
                    let d_out = self.nodes[w.0].value.shape()[1];
                    let rows = self.nodes[x.0].value.numel() / d_in;
                    let xv = self.nodes[x.0].value.data();
                    let wv = self.nodes[w.0].value.data();
                    {
                        let gx = &mut before[x.0];
                        // gx[r,i] += sum_o g[r,o] w[i,o]
                        run_rows(gx, d_in, rows * d_in * d_out, |r, gxrow| {
                            let grow = &g[r * d_out..(r + 1) * d_out];
                            for (i, gxv) in gxrow.iter_mut().enumerate() {
                                let wrow = &wv[i * d_out..(i + 1) * d_out];
                                let mut acc = T::ZERO;
                                for (&gv, &wvx) in grow.iter().zip(wrow) {
                                    acc += gv * wvx;
                                }
                                *gxv += acc;
                            }
                        });
                    }
                    {
                        let gw = &mut before[w.0];
                        // gw[i,o] += sum_r x[r,i] g[r,o]
                        run_rows(gw, d_out, rows * d_in * d_out, |i, gwrow| {
                            for r in 0..rows {
                                let xv_ = xv[r * d_in + i];
                                let grow = &g[r * d_out..(r + 1) * d_out];
                                for (gwv, &gv) in gwrow.iter_mut().zip(grow) {
                                    *gwv += xv_ * gv;
                                }
                            }
                        });
                    }
                    {
                        let gb = &mut before[b.0];
                        for r in 0..rows {
                            let grow = &g[r * d_out..(r + 1) * d_out];
                            for (gbv, &gv) in gb.iter_mut().zip(grow) {
                                *gbv += gv;
                            }
                        }
                    }
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    dilation,
                    causal,
                } => {
                    let sx = self.nodes[x.0].value.shape();
                    let sw = self.nodes[w.0].value.shape();
                    let (batch, c_in, len) = (sx[0], sx[1], sx[2]);
                    let (c_out, kernel) = (sw[0], sw[2]);
                    let pad = pad_left(kernel, *dilation, *causal);
                    let xv = self.nodes[x.0].value.data();
                    let wv = self.nodes[w.0].value.data();
                    let work = batch * c_out * len * c_in * kernel;
                    {
                        // gx[b,ci,t] += sum_co sum_k g[b,co,t'] w[co,ci,k]
                        // where t = t' + k*dil - pad
                        let gx = &mut before[x.0];
                        run_rows(gx, len, work, |row, gxrow| {
                            let (bi, ci) = (row / c_in, row % c_in);
                            for co in 0..c_out {
                                let grow = &g[(bi * c_out + co) * len..(bi * c_out + co + 1) * len];
                                for k in 0..kernel {
                                    let wvx = wv[(co * c_in + ci) * kernel + k];
                                    let off = (k * *dilation) as isize - pad as isize;
                                    let t0 = (-off).max(0) as usize;
                                    let t1 = ((len as isize - off).min(len as isize)).max(0) as usize;
                                    for tp in t0..t1 {
                                        gxrow[(tp as isize + off) as usize] += wvx * grow[tp];
                                    }
                                }
                            }
                        });
                    }
                    {
                        let gw = &mut before[w.0];
                        run_rows(gw, c_in * kernel, work, |co, gwrow| {
                            for bi in 0..batch {
                                let grow = &g[(bi * c_out + co) * len..(bi * c_out + co + 1) * len];
                                for ci in 0..c_in {
                                    let xrow =
                                        &xv[(bi * c_in + ci) * len..(bi * c_in + ci + 1) * len];
                                    for k in 0..kernel {
                                        let off = (k * *dilation) as isize - pad as isize;
                                        let t0 = (-off).max(0) as usize;
                                        let t1 =
                                            ((len as isize - off).min(len as isize)).max(0) as usize;
                                        let mut acc = T::ZERO;
                                        for t in t0..t1 {
                                            acc += grow[t] * xrow[(t as isize + off) as usize];
                                        }
                                        gwrow[ci * kernel + k] += acc;
                                    }
                                }
                            }
                        });
                    }
                    {
                        let gb = &mut before[b.0];
                        for bi in 0..batch {
                            for (co, gbv) in gb.iter_mut().enumerate() {
                                let grow = &g[(bi * c_out + co) * len..(bi * c_out + co + 1) * len];
                                let mut acc = T::ZERO;
                                for &gv in grow {
                                    acc += gv;
                                }
                                *gbv += acc;
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let dim = *self.nodes[x.0].value.shape().last().unwrap();
                    let rows = self.nodes[x.0].value.numel() / dim;
                    let xv = self.nodes[x.0].value.data();
                    let gv = self.nodes[gamma.0].value.data();
                    let inv_dim = T::from_f64(1.0 / dim as f64);
                    for r in 0..rows {
                        let mean = node.aux[r * 2];
                        let rstd = node.aux[r * 2 + 1];
                        let xrow = &xv[r * dim..(r + 1) * dim];
                        let grow = &g[r * dim..(r + 1) * dim];
                        let mut sum_gg = T::ZERO;
                        let mut sum_ggx = T::ZERO;
                        for ((&gy, &ga), &xx) in grow.iter().zip(gv).zip(xrow) {
                            let gg = gy * ga;
                            let xhat = (xx - mean) * rstd;
                            sum_gg += gg;
                            sum_ggx += gg * xhat;
                        }
                        sum_gg *= inv_dim;
                        sum_ggx *= inv_dim;
                        {
                            let gx = &mut before[x.0][r * dim..(r + 1) * dim];
                            for ((gxv, (&gy, &ga)), &xx) in
                                gx.iter_mut().zip(grow.iter().zip(gv)).zip(xrow)
                            {
                                let xhat = (xx - mean) * rstd;
                                *gxv += rstd * (gy * ga - sum_gg - xhat * sum_ggx);
                            }
                        }
                        {
                            let gg = &mut before[gamma.0];
                            for ((ggv, &gy), &xx) in gg.iter_mut().zip(grow).zip(xrow) {
                                *ggv += gy * (xx - mean) * rstd;
                            }
                        }
                        {
                            let gb = &mut before[beta.0];
                            for (gbv, &gy) in gb.iter_mut().zip(grow) {
                                *gbv += gy;
                            }
                        }
                    }
                }
                Op::Softmax(x) => {
                    let dim = *node.value.shape().last().unwrap();
                    let rows = node.value.numel() / dim;
                    let yv = node.value.data();
                    let gx = &mut before[x.0];
                    for r in 0..rows {
                        let yrow = &yv[r * dim..(r + 1) * dim];
                        let grow = &g[r * dim..(r + 1) * dim];
                        let mut dot = T::ZERO;
                        for (&y, &gy) in yrow.iter().zip(grow) {
                            dot += y * gy;
                        }
                        let gxrow = &mut gx[r * dim..(r + 1) * dim];
                        for ((gxv, &y), &gy) in gxrow.iter_mut().zip(yrow).zip(grow) {
                            *gxv += y * (gy - dot);
                        }
                    }
                }
                Op::Attention { q, k, v, heads } => {
                    let sq = self.nodes[q.0].value.shape();
                    let (b, p, d) = (sq[0], sq[1], sq[2]);
                    let qv = self.nodes[q.0].value.data();
                    let kv = self.nodes[k.0].value.data();
                    let vv = self.nodes[v.0].value.data();
                    let base = q.0.min(k.0).min(v.0);
                    mha_backward(
                        qv, kv, vv, &node.aux, g, b, p, d, *heads, &mut before[base..],
                        q.0, k.0, v.0,
                    );
                }
                Op::Relu(x) => {
                    let xv = self.nodes[x.0].value.data();
                    let gx = &mut before[x.0];
                    for ((gxv, &gv), &xx) in gx.iter_mut().zip(g).zip(xv) {
                        if xx > T::ZERO {
                            *gxv += gv;
                        }
                    }
                }
                Op::Silu(x) => {
                    let xv = self.nodes[x.0].value.data();
                    let gx = &mut before[x.0];
                    for ((gxv, &gv), &xx) in gx.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(xx);
                        *gxv += gv * s * (T::ONE + xx * (T::ONE - s));
                    }
                }
                Op::MeanSq(x) => {
                    let xv = self.nodes[x.0].value.data();
                    let n = T::from_f64(xv.len() as f64);
                    let c = g[0] * (T::ONE + T::ONE) / n;
                    let gx = &mut before[x.0];
                    for (gxv, &xx) in gx.iter_mut().zip(xv) {
                        *gxv += c * xx;
                    }
                }
                Op::Concat { parts, axis } => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let axis_total = shape[*axis];
                    let mut axis_off = 0usize;
                    for &pnode in parts {
                        let s_axis = self.nodes[pnode.0].value.shape()[*axis];
                        let gp = &mut before[pnode.0];
                        for o in 0..outer {
                            let src_start = (o * axis_total + axis_off) * inner;
                            let dst = &mut gp[o * s_axis * inner..(o + 1) * s_axis * inner];
                            for (d, &s) in dst
                                .iter_mut()
                                .zip(&g[src_start..src_start + s_axis * inner])
                            {
                                *d += s;
                            }
                        }
                        axis_off += s_axis;
                    }
                }
                Op::BroadcastAddTime { x, v } => {
                    let sx = self.nodes[x.0].value.shape();
                    let (b, p, d) = (sx[0], sx[1], sx[2]);
                    axpy(&mut before[x.0], g, T::ONE);
                    let gv = &mut before[v.0];
                    for bi in 0..b {
                        for pi in 0..p {
                            let grow = &g[(bi * p + pi) * d..(bi * p + pi + 1) * d];
                            let gvrow = &mut gv[bi * d..(bi + 1) * d];
                            for (gvv, &gg) in gvrow.iter_mut().zip(grow) {
                                *gvv += gg;
                            }
                        }
                    }
                }
                Op::BroadcastAddRows { x, m } => {
                    let sx = self.nodes[x.0].value.shape();
                    let (b, p, d) = (sx[0], sx[1], sx[2]);
                    axpy(&mut before[x.0], g, T::ONE);
                    let gm = &mut before[m.0];
                    for bi in 0..b {
                        for (gmv, &gg) in gm.iter_mut().zip(&g[bi * p * d..(bi + 1) * p * d]) {
                            *gmv += gg;
                        }
                    }
                }
                Op::RepeatRows { x, rows } => {
                    let d = self.nodes[x.0].value.numel();
                    let gx = &mut before[x.0];
                    for r in 0..*rows {
                        for (gxv, &gg) in gx.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *gxv += gg;
                        }
                    }
                }
                Op::Transpose12(x) => {
                    let sx = self.nodes[x.0].value.shape();
                    let (b, a, c) = (sx[0], sx[1], sx[2]);
                    // g has shape [b, c, a]; transpose it back and accumulate.
                    let gt = transpose_last2(g, b, c, a);
                    axpy(&mut before[x.0], &gt, T::ONE);
                }
                Op::IndexTime { x, t } => {
                    let sx = self.nodes[x.0].value.shape();
                    let (b, c, l) = (sx[0], sx[1], sx[2]);
                    let gx = &mut before[x.0];
                    for bi in 0..b {
                        for ci in 0..c {
                            gx[(bi * c + ci) * l + t] += g[bi * c + ci];
                        }
                    }
                }
            }
        }

        for (node_idx, name) in &self.bindings {
            let param = params
                .get_mut(name)
                .ok_or_else(|| Error::Autodiff(format!("parameter {name:?} vanished from store")))?;
            let acc = param
                .grad
                .as_mut()
                .ok_or_else(|| Error::Autodiff(format!("parameter {name:?} has no grad buffer")))?;
            for (a, &gv) in acc.iter_mut().zip(&grads[*node_idx]) {
                *a += gv;
            }
        }
        Ok(())
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], c: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * c;
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

fn pad_left(kernel: usize, dilation: usize, causal: bool) -> usize {
    let total = (kernel - 1) * dilation;
    if causal {
        total
    } else {
        total / 2
    }
}

/// Runs `f(row_index, row_slice)` over equally sized rows of `out`, in
/// parallel when the total work justifies it. Each output element is still
/// written by exactly one sequential reduction, so results are bit-identical
/// regardless of thread count.
fn run_rows<T, F>(out: &mut [T], row_len: usize, work: usize, f: F)
where
    T: Real,
    F: Fn(usize, &mut [T]) + Sync,
{
    if work >= PAR_THRESHOLD && out.len() > row_len {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(r, row)| f(r, row));
    } else {
        for (r, row) in out.chunks_mut(row_len).enumerate() {
            f(r, row);
        }
    }
}

fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    run_rows(&mut out, n, m * k * n, |i, orow| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `dst[m,k] += g[m,n] . b[k,n]^T`
fn matmul_bt_acc<T: Real>(g: &[T], b: &[T], m: usize, n: usize, k: usize, dst: &mut [T]) {
    run_rows(dst, k, m * n * k, |i, drow| {
        let grow = &g[i * n..(i + 1) * n];
        for (p, dv) in drow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::ZERO;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            *dv += acc;
        }
    });
}

/// `dst[k,n] += a[m,k]^T . g[m,n]`
fn matmul_at_acc<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize, dst: &mut [T]) {
    run_rows(dst, n, m * k * n, |p, drow| {
        for i in 0..m {
            let av = a[i * k + p];
            let grow = &g[i * n..(i + 1) * n];
            for (dv, &gv) in drow.iter_mut().zip(grow) {
                *dv += av * gv;
            }
        }
    });
}

fn transpose_last2<T: Real>(x: &[T], b: usize, a: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; b * a * c];
    for bi in 0..b {
        for ai in 0..a {
            for ci in 0..c {
                out[bi * a * c + ci * a + ai] = x[bi * a * c + ai * c + ci];
            }
        }
    }
    out
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.maximum(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Forward multi-head scaled dot-product attention.
///
/// Returns the output `[B, P, D]` and the attention probabilities laid out as
/// `[B, heads, P, P]`. Shared by the tape op and by tests that inspect the
/// probability rows directly.
pub fn mha_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    b: usize,
    p: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::ZERO; b * p * d];
    let mut probs = vec![T::ZERO; b * heads * p * p];
    for bi in 0..b {
        for h in 0..heads {
            let col = h * dh;
            let pr = &mut probs[(bi * heads + h) * p * p..(bi * heads + h + 1) * p * p];
            for i in 0..p {
                let qrow = &q[(bi * p + i) * d + col..(bi * p + i) * d + col + dh];
                for j in 0..p {
                    let krow = &k[(bi * p + j) * d + col..(bi * p + j) * d + col + dh];
                    let mut acc = T::ZERO;
                    for (&qv, &kv) in qrow.iter().zip(krow) {
                        acc += qv * kv;
                    }
                    pr[i * p + j] = acc * scale;
                }
            }
            for i in 0..p {
                softmax_row(&mut pr[i * p..(i + 1) * p]);
            }
            for i in 0..p {
                let orow = &mut out[(bi * p + i) * d + col..(bi * p + i) * d + col + dh];
                for j in 0..p {
                    let w = pr[i * p + j];
                    let vrow = &v[(bi * p + j) * d + col..(bi * p + j) * d + col + dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += w * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn mha_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    b: usize,
    p: usize,
    d: usize,
    heads: usize,
    grads_from_q: &mut [Vec<T>],
    q_idx: usize,
    k_idx: usize,
    v_idx: usize,
) {
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    // Per-head scratch, accumulated into the node grads at the end.
    let mut gq = vec![T::ZERO; b * p * d];
    let mut gk = vec![T::ZERO; b * p * d];
    let mut gv = vec![T::ZERO; b * p * d];
    let mut d_probs = vec![T::ZERO; p * p];
    let mut d_scores = vec![T::ZERO; p * p];
    for bi in 0..b {
        for h in 0..heads {
            let col = h * dh;
            let pr = &probs[(bi * heads + h) * p * p..(bi * heads + h + 1) * p * p];
            // dV[j] += sum_i A[i,j] * dO[i]; dA[i,j] = dO[i] . V[j]
            for i in 0..p {
                let grow = &g[(bi * p + i) * d + col..(bi * p + i) * d + col + dh];
                for j in 0..p {
                    let vrow = &v[(bi * p + j) * d + col..(bi * p + j) * d + col + dh];
                    let w = pr[i * p + j];
                    let gvrow = &mut gv[(bi * p + j) * d + col..(bi * p + j) * d + col + dh];
                    let mut dot = T::ZERO;
                    for ((gvv, &gg), &vv) in gvrow.iter_mut().zip(grow).zip(vrow) {
                        *gvv += w * gg;
                        dot += gg * vv;
                    }
                    d_probs[i * p + j] = dot;
                }
            }
            // Softmax backward per query row.
            for i in 0..p {
                let arow = &pr[i * p..(i + 1) * p];
                let darow = &d_probs[i * p..(i + 1) * p];
                let mut dot = T::ZERO;
                for (&a, &da) in arow.iter().zip(darow) {
                    dot += a * da;
                }
                for j in 0..p {
                    d_scores[i * p + j] = arow[j] * (darow[j] - dot);
                }
            }
            // dQ[i] += scale * sum_j dS[i,j] K[j]; dK[j] += scale * sum_i dS[i,j] Q[i]
            for i in 0..p {
                let gqrow = &mut gq[(bi * p + i) * d + col..(bi * p + i) * d + col + dh];
                for j in 0..p {
                    let ds = d_scores[i * p + j] * scale;
                    let krow = &k[(bi * p + j) * d + col..(bi * p + j) * d + col + dh];
                    for (gqv, &kv) in gqrow.iter_mut().zip(krow) {
                        *gqv += ds * kv;
                    }
                }
            }
            for j in 0..p {
                let gkrow = &mut gk[(bi * p + j) * d + col..(bi * p + j) * d + col + dh];
                for i in 0..p {
                    let ds = d_scores[i * p + j] * scale;
                    let qrow = &q[(bi * p + i) * d + col..(bi * p + i) * d + col + dh];
                    for (gkv, &qv) in gkrow.iter_mut().zip(qrow) {
                        *gkv += ds * qv;
                    }
                }
            }
        }
    }
    // grads_from_q is the grads slice starting at the smallest of the three
    // node indices; accumulate into the right offsets.
    let base = q_idx.min(k_idx).min(v_idx);
    axpy(&mut grads_from_q[q_idx - base], &gq, T::ONE);
    axpy(&mut grads_from_q[k_idx - base], &gk, T::ONE);
    axpy(&mut grads_from_q[v_idx - base], &gv, T::ONE);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_FD_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with<T: Real>(entries: &[(&str, Vec<T>, Vec<usize>)]) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for (name, data, shape) in entries {
            store
                .insert(name, Tensor::from_vec(data.clone(), shape.clone()).unwrap())
                .unwrap();
        }
        store
    }

    #[test]
    fn dense_identity_passes_input_through() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape
            .leaf(Tensor::from_vec(vec![3.0, -1.5], vec![1, 2]).unwrap())
            .unwrap();
        let w = tape
            .leaf(Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap())
            .unwrap();
        let b = tape.leaf(Tensor::zeros(vec![2])).unwrap();
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.5]);
    }

    #[test]
    fn causal_conv_identity_kernel_with_dilation() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape
            .leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], vec![1, 1, 4]).unwrap())
            .unwrap();
        let w = tape
            .leaf(Tensor::from_vec(vec![1.0], vec![1, 1, 1]).unwrap())
            .unwrap();
        let b = tape.leaf(Tensor::zeros(vec![1])).unwrap();
        let y = tape.conv1d(x, w, b, 2, true).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn layer_norm_of_constant_vector_is_bias() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 4], 7.0)).unwrap();
        let gamma = tape.leaf(Tensor::full(vec![4], 1.0)).unwrap();
        let beta = tape
            .leaf(Tensor::from_vec(vec![0.5, -0.5, 1.0, 0.0], vec![4]).unwrap())
            .unwrap();
        let y = tape.layer_norm(x, gamma, beta).unwrap();
        // zero variance guard: normalized values are 0, output is the bias
        assert_eq!(tape.value(y).data(), &[0.5, -0.5, 1.0, 0.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        // loss = sum(x . x) for x = [1, 2] => grad [2, 4]
        let mut store = store_with(&[("x", vec![1.0f64, 2.0], vec![2])]);
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let mean = tape.mean_sq(x).unwrap();
        let loss = tape.scale(mean, 2.0).unwrap(); // undo the 1/N
        tape.backward(loss, &mut store).unwrap();
        let grad = store.get("x").unwrap().grad.as_ref().unwrap();
        assert_eq!(grad.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn mse_gradient_at_zero_weights() {
        // loss = mean((x W - y)^2) at W = 0 => dL/dW[i][o] = -x_i y_o
        let x_data = vec![1.5f64, -2.0];
        let y_data = vec![0.5f64, 3.0];
        let mut store = store_with(&[("w", vec![0.0f64; 4], vec![2, 2])]);
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_vec(x_data.clone(), vec![1, 2]).unwrap())
            .unwrap();
        let w = tape.param(&store, "w").unwrap();
        let b = tape.leaf(Tensor::zeros(vec![2])).unwrap();
        let pred = tape.linear(x, w, b).unwrap();
        let y = tape
            .leaf(Tensor::from_vec(y_data.clone(), vec![1, 2]).unwrap())
            .unwrap();
        let err = tape.sub(pred, y).unwrap();
        let loss = tape.mean_sq(err).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let grad = store.get("w").unwrap().grad.as_ref().unwrap().clone();
        for i in 0..2 {
            for o in 0..2 {
                let expect = -x_data[i] * y_data[o]; // 2/N * (0 - y_o) * x_i, N = 2
                assert!((grad[i * 2 + o] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unreachable_parameter_keeps_zero_grad() {
        let mut store = store_with(&[
            ("used", vec![1.0f64, 2.0], vec![2]),
            ("unused", vec![3.0f64], vec![1]),
        ]);
        let mut tape = Tape::new();
        let x = tape.param(&store, "used").unwrap();
        let loss = tape.mean_sq(x).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert!(store
            .get("unused")
            .unwrap()
            .grad
            .as_ref()
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
        assert!(store
            .get("used")
            .unwrap()
            .grad
            .as_ref()
            .unwrap()
            .iter()
            .any(|&g| g != 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_double_call() {
        let mut store = store_with(&[("x", vec![1.0f64, 2.0], vec![2])]);
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        assert!(tape.backward(x, &mut store).is_err());
        let loss = tape.mean_sq(x).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let again = tape.backward(loss, &mut store);
        assert!(again.is_err());
    }

    #[test]
    fn shape_mismatch_names_operator_and_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![3, 2])).unwrap();
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn nan_is_surfaced_not_propagated() {
        let mut tape: Tape<f64> = Tape::new();
        let err = tape
            .leaf(Tensor::from_vec(vec![1.0, f64::NAN], vec![2]).unwrap())
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let store = store_with(&[(
            "w",
            (0..12).map(|_| rng.random::<f64>()).collect(),
            vec![3, 4],
        )]);
        let x = Tensor::<f64>::randn(vec![2, 3], &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone()).unwrap();
            let w = tape.param(&store, "w").unwrap();
            let y = tape.matmul(xi, w).unwrap();
            let s = tape.softmax(y).unwrap();
            tape.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_sum_of_squares_is_tight() {
        let mut store = store_with(&[("x", vec![0.3f64, -1.2, 2.4], vec![3])]);
        let report = grad_check(
            |tape, params| {
                let x = tape.param(params, "x")?;
                tape.mean_sq(x)
            },
            &mut store,
            DEFAULT_FD_EPS,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn grad_check_attention_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = store_with(&[
            ("q", (0..32).map(|_| rng.random::<f64>() - 0.5).collect(), vec![1, 4, 8]),
            ("k", (0..32).map(|_| rng.random::<f64>() - 0.5).collect(), vec![1, 4, 8]),
            ("v", (0..32).map(|_| rng.random::<f64>() - 0.5).collect(), vec![1, 4, 8]),
        ]);
        let report = grad_check(
            |tape, params| {
                let q = tape.param(params, "q")?;
                let k = tape.param(params, "k")?;
                let v = tape.param(params, "v")?;
                let a = tape.attention(q, k, v, 2)?;
                tape.mean_sq(a)
            },
            &mut store,
            DEFAULT_FD_EPS,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn grad_check_with_zero_tolerance_fails_on_nonlinear_graph() {
        let mut store = store_with(&[("x", vec![0.7f64, -0.4], vec![2])]);
        let report = grad_check(
            |tape, params| {
                let x = tape.param(params, "x")?;
                let s = tape.silu(x)?;
                tape.mean_sq(s)
            },
            &mut store,
            DEFAULT_FD_EPS,
            0.0,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn causal_conv_output_ignores_future_inputs() {
        // exact equality over 20 seeds: changing inputs after time i leaves
        // outputs at <= i bit-identical
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c_in, c_out, len, kernel, dilation) = (2, 3, 16, 3, 2);
            let x = Tensor::<f64>::randn(vec![1, c_in, len], &mut rng);
            let w = Tensor::<f64>::randn(vec![c_out, c_in, kernel], &mut rng);
            let b = Tensor::<f64>::randn(vec![c_out], &mut rng);
            let forward = |xt: &Tensor<f64>| {
                let mut tape = Tape::new();
                let xi = tape.leaf(xt.clone()).unwrap();
                let wi = tape.leaf(w.clone()).unwrap();
                let bi = tape.leaf(b.clone()).unwrap();
                let y = tape.conv1d(xi, wi, bi, dilation, true).unwrap();
                tape.value(y).data().to_vec()
            };
            let base = forward(&x);
            let cut = rng.random_range(0..len - 1);
            let mut modified = x.clone();
            for ci in 0..c_in {
                for t in cut + 1..len {
                    modified.data_mut()[ci * len + t] += 5.0 + t as f64;
                }
            }
            let changed = forward(&modified);
            for co in 0..c_out {
                for t in 0..=cut {
                    assert_eq!(base[co * len + t], changed[co * len + t]);
                }
            }
        }
    }

    #[test]
    fn attention_probabilities_are_rows_of_a_stochastic_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, p, d, heads) = (2, 5, 8, 2);
        let q = Tensor::<f64>::randn(vec![b, p, d], &mut rng);
        let k = Tensor::<f64>::randn(vec![b, p, d], &mut rng);
        let v = Tensor::<f64>::randn(vec![b, p, d], &mut rng);
        let (_, probs) = mha_forward(q.data(), k.data(), v.data(), b, p, d, heads);
        for row in probs.chunks(p) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
        }
    }

    #[test]
    fn concat_splits_gradient_back() {
        let mut store = store_with(&[
            ("a", vec![1.0f64, 2.0], vec![1, 2]),
            ("b", vec![3.0f64, 4.0, 5.0], vec![1, 3]),
        ]);
        let report = grad_check(
            |tape, params| {
                let a = tape.param(params, "a")?;
                let b = tape.param(params, "b")?;
                let c = tape.concat(&[a, b], 1)?;
                let s = tape.silu(c)?;
                tape.mean_sq(s)
            },
            &mut store,
            DEFAULT_FD_EPS,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
