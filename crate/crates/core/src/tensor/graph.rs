//! Tape-based reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Graph`] records every operation of a forward pass in order; [`Graph::backward`]
//! replays the tape in exact reverse, accumulating gradients into leaf nodes.
//! All storage is row-major double precision. A graph is single-threaded:
//! build one per forward/backward pass and discard it.

use super::kernels::{self, MatView};
use crate::error::{CatsError, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor {
    pub(crate) id: usize,
}

// Some recorded fields (offset constants, gradient-blocked parents) are only
// consumed on the forward path but stay on the tape for completeness.
#[allow(dead_code)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize, f64),
    Gelu(usize),
    Sigmoid(usize),
    Affine {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        pad: usize,
        stride: usize,
        groups: usize,
    },
    PadLast {
        x: usize,
        front: usize,
        back: usize,
    },
    Transpose12(usize),
    Reshape(usize),
    ExpandBatch {
        x: usize,
        batch: usize,
    },
    ConcatChannels(Vec<usize>),
    SliceTime {
        x: usize,
        start: usize,
    },
    SliceChannels {
        x: usize,
        start: usize,
    },
    PhaseInterleave {
        parts: Vec<usize>,
    },
    MeanOverTime(usize),
    StdOverTime {
        x: usize,
        eps: f64,
    },
    RepeatTime {
        x: usize,
    },
    MovAvgTime {
        x: usize,
        window: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    StopGrad(usize),
    IndicatorPos(usize),
    SumAll(usize),
    MeanAll(usize),
    TimeDotShared {
        x: usize,
        w: usize,
    },
    ChannelTimeAffine {
        x: usize,
        w: usize,
        b: usize,
    },
    ChannelwiseAffine {
        x: usize,
        w: usize,
        b: usize,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Recording tape plus node storage for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Accumulated gradients for leaf nodes (persist across backward calls).
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Tensor {
            id: self.nodes.len() - 1,
        }
    }

    fn rg(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    /// New leaf node. `requires_grad` leaves accumulate gradients on backward.
    pub fn leaf(&mut self, data: &[f64], shape: &[usize], requires_grad: bool) -> Tensor {
        assert_eq!(data.len(), numel(shape), "leaf data/shape mismatch");
        self.push(data.to_vec(), shape.to_vec(), requires_grad, Op::Leaf)
    }

    /// Constant (non-differentiable) leaf.
    pub fn constant(&mut self, data: &[f64], shape: &[usize]) -> Tensor {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    pub fn data(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].data
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    /// Value of a scalar (single-element) tensor.
    pub fn value(&self, t: Tensor) -> f64 {
        debug_assert_eq!(numel(&self.nodes[t.id].shape), 1);
        self.nodes[t.id].data[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.leaf_grads[t.id].as_deref()
    }

    pub fn zero_grad(&mut self, t: Tensor) {
        self.leaf_grads[t.id] = None;
    }

    // ---- elementwise with numpy-style broadcasting -------------------------

    fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
        let nd = a.len().max(b.len());
        let mut out = vec![0usize; nd];
        for d in 0..nd {
            let ad = if d >= nd - a.len() {
                a[d - (nd - a.len())]
            } else {
                1
            };
            let bd = if d >= nd - b.len() {
                b[d - (nd - b.len())]
            } else {
                1
            };
            if ad == bd || ad == 1 || bd == 1 {
                out[d] = ad.max(bd);
            } else {
                return Err(CatsError::shape(op, format!("{a:?} vs {b:?}")));
            }
        }
        Ok(out)
    }

    /// Strides for reading `shape` broadcast up to `out` (0 on stretched dims).
    fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<isize> {
        let nd = out.len();
        let offset = nd - shape.len();
        let mut strides = vec![0isize; nd];
        let mut acc = 1isize;
        for d in (0..shape.len()).rev() {
            strides[offset + d] = if shape[d] == 1 { 0 } else { acc };
            acc *= shape[d] as isize;
        }
        strides
    }

    fn binary(
        &mut self,
        a: Tensor,
        b: Tensor,
        op: &'static str,
        make: fn(usize, usize) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = Self::broadcast_shape(&sa, &sb, op)?;
        let n = numel(&out_shape);
        let mut out = vec![0.0; n];
        if sa == sb {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..n {
                out[i] = f(ad[i], bd[i]);
            }
        } else {
            let stra = Self::bcast_strides(&sa, &out_shape);
            let strb = Self::bcast_strides(&sb, &out_shape);
            let (ad, bd) = (self.data(a), self.data(b));
            walk2(&out_shape, &stra, &strb, |i, oa, ob| {
                out[i] = f(ad[oa], bd[ob]);
            });
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, out_shape, rg, make(a.id, b.id)))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(a, b, "div", Op::Div, |x, y| x / y)
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Tensor {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(data, shape, rg, Op::Scale(x.id, c))
    }

    pub fn offset(&mut self, x: Tensor, c: f64) -> Tensor {
        let data: Vec<f64> = self.data(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(data, shape, rg, Op::Offset(x.id, c))
    }

    pub fn gelu(&mut self, x: Tensor) -> Tensor {
        let mut data = vec![0.0; self.data(x).len()];
        kernels::map_unary(self.data(x), &mut data, kernels::gelu);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(data, shape, rg, Op::Gelu(x.id))
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        let mut data = vec![0.0; self.data(x).len()];
        kernels::map_unary(self.data(x), &mut data, kernels::sigmoid);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(data, shape, rg, Op::Sigmoid(x.id))
    }

    // ---- linear algebra ----------------------------------------------------

    /// y = x·W + b, with W of shape [d_in, d_out] and x of shape [..., d_in];
    /// leading dims broadcast (treated as rows).
    pub fn affine(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(CatsError::shape("affine", format!("x {xs:?} vs W {ws:?}")));
        }
        let (d_in, d_out) = (ws[0], ws[1]);
        if bs != [d_out] {
            return Err(CatsError::shape(
                "affine",
                format!("bias {bs:?}, expected [{d_out}]"),
            ));
        }
        let rows = numel(&xs) / d_in;
        let mut out = vec![0.0; rows * d_out];
        kernels::gemm(
            1.0,
            MatView::row_major(self.data(x), rows, d_in),
            MatView::row_major(self.data(w), d_in, d_out),
            0.0,
            &mut out,
        );
        let bias = self.data(b);
        for r in 0..rows {
            let row = &mut out[r * d_out..(r + 1) * d_out];
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = d_out;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            out,
            out_shape,
            rg,
            Op::Affine {
                x: x.id,
                w: w.id,
                b: b.id,
            },
        ))
    }

    /// 1D cross-correlation over the last axis of x: [B, C_in, L] with kernel
    /// [C_out, C_in/G, K] and bias [C_out]; zero padding, per-group channel
    /// partitioning. Output length floor((L + 2*pad - K)/stride) + 1.
    pub fn conv1d(
        &mut self,
        x: Tensor,
        w: Tensor,
        b: Tensor,
        pad: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(CatsError::shape(
                "conv1d",
                format!("x {xs:?} (want [B,C,L]), w {ws:?} (want [C_out,C_in/G,K])"),
            ));
        }
        let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
        let (c_out, cpg, kw) = (ws[0], ws[1], ws[2]);
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(CatsError::Config(format!(
                "conv1d groups {groups} must divide C_in={c_in} and C_out={c_out}"
            )));
        }
        if cpg != c_in / groups {
            return Err(CatsError::shape(
                "conv1d",
                format!("kernel in-channels {cpg} != C_in/G = {}", c_in / groups),
            ));
        }
        if self.shape(b) != [c_out] {
            return Err(CatsError::shape("conv1d", "bias shape".to_string()));
        }
        if stride == 0 {
            return Err(CatsError::Config("conv1d stride must be >= 1".into()));
        }
        let lp = len + 2 * pad;
        if lp < kw {
            return Err(CatsError::shape(
                "conv1d",
                format!("padded length {lp} < kernel {kw}"),
            ));
        }
        let l_out = (lp - kw) / stride + 1;
        if l_out < 1 {
            return Err(CatsError::shape("conv1d", "output length < 1".to_string()));
        }
        let xp = kernels::pad_last(self.data(x), batch * c_in, len, pad, pad);
        let mut out = vec![0.0; batch * c_out * l_out];
        kernels::conv1d_forward(
            &xp,
            batch,
            c_in,
            lp,
            self.data(w),
            c_out,
            kw,
            stride,
            groups,
            self.data(b),
            &mut out,
            l_out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            out,
            vec![batch, c_out, l_out],
            rg,
            Op::Conv1d {
                x: x.id,
                w: w.id,
                b: b.id,
                pad,
                stride,
                groups,
            },
        ))
    }

    /// Zero-pad the last axis: [..., L] -> [..., front+L+back].
    pub fn pad_last(&mut self, x: Tensor, front: usize, back: usize) -> Tensor {
        let xs = self.shape(x).to_vec();
        let len = *xs.last().unwrap();
        let rows = numel(&xs) / len;
        let out = kernels::pad_last(self.data(x), rows, len, front, back);
        let mut shape = xs;
        *shape.last_mut().unwrap() = front + len + back;
        let rg = self.rg(x);
        self.push(
            out,
            shape,
            rg,
            Op::PadLast {
                x: x.id,
                front,
                back,
            },
        )
    }

    /// Swap the two trailing axes of a rank-3 tensor: [B, D1, D2] -> [B, D2, D1].
    pub fn transpose12(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(CatsError::shape("transpose12", format!("{xs:?}")));
        }
        let (b, d1, d2) = (xs[0], xs[1], xs[2]);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for ib in 0..b {
            let src = &xd[ib * d1 * d2..];
            let dst = &mut out[ib * d1 * d2..(ib + 1) * d1 * d2];
            for i in 0..d1 {
                for j in 0..d2 {
                    dst[j * d1 + i] = src[i * d2 + j];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![b, d2, d1], rg, Op::Transpose12(x.id)))
    }

    /// Same data, new shape (element counts must match).
    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data(x).len() {
            return Err(CatsError::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(data, shape.to_vec(), rg, Op::Reshape(x.id)))
    }

    /// Prepend a batch axis by copying: [d...] -> [batch, d...].
    pub fn expand_batch(&mut self, x: Tensor, batch: usize) -> Tensor {
        let xs = self.shape(x).to_vec();
        let n = numel(&xs);
        let mut out = vec![0.0; batch * n];
        for ib in 0..batch {
            out[ib * n..(ib + 1) * n].copy_from_slice(self.data(x));
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&xs);
        let rg = self.rg(x);
        self.push(out, shape, rg, Op::ExpandBatch { x: x.id, batch })
    }

    /// Concatenate along the last (channel) axis; all leading dims must match.
    pub fn concat_channels(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(CatsError::shape("concat_channels", "empty list"));
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(CatsError::shape(
                    "concat_channels",
                    format!("leading dims differ: {:?} vs {:?}", &s[..s.len() - 1], lead),
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut out = vec![0.0; rows * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.data(p);
            for r in 0..rows {
                out[r * total + col..r * total + col + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            shape,
            rg,
            Op::ConcatChannels(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// Rows [start, end) of the time axis: [B, L, C] -> [B, end-start, C].
    pub fn slice_time(&mut self, x: Tensor, start: usize, end: usize) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || end > xs[1] || start >= end {
            return Err(CatsError::shape(
                "slice_time",
                format!("[{start},{end}) of {xs:?}"),
            ));
        }
        let (b, l, c) = (xs[0], xs[1], xs[2]);
        let span = end - start;
        let xd = self.data(x);
        let mut out = vec![0.0; b * span * c];
        for ib in 0..b {
            let src = &xd[(ib * l + start) * c..(ib * l + end) * c];
            out[ib * span * c..(ib + 1) * span * c].copy_from_slice(src);
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            vec![b, span, c],
            rg,
            Op::SliceTime { x: x.id, start },
        ))
    }

    /// Columns [start, end) of the channel (last) axis.
    pub fn slice_channels(&mut self, x: Tensor, start: usize, end: usize) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        if end > c || start >= end {
            return Err(CatsError::shape(
                "slice_channels",
                format!("[{start},{end}) of {xs:?}"),
            ));
        }
        let span = end - start;
        let rows = numel(&xs) / c;
        let xd = self.data(x);
        let mut out = vec![0.0; rows * span];
        for r in 0..rows {
            out[r * span..(r + 1) * span].copy_from_slice(&xd[r * c + start..r * c + end]);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = span;
        let rg = self.rg(x);
        Ok(self.push(out, shape, rg, Op::SliceChannels { x: x.id, start }))
    }

    /// Interleave K phase tensors [B, n, P] into [B, n, out_len]:
    /// out[.., t] = parts[t % K][.., t / K].
    pub fn phase_interleave(&mut self, parts: &[Tensor], out_len: usize) -> Result<Tensor> {
        let k = parts.len();
        if k == 0 {
            return Err(CatsError::shape("phase_interleave", "no phases"));
        }
        let s0 = self.shape(parts[0]).to_vec();
        if s0.len() != 3 {
            return Err(CatsError::shape("phase_interleave", format!("{s0:?}")));
        }
        let (b, n, p) = (s0[0], s0[1], s0[2]);
        for &t in parts {
            if self.shape(t) != s0 {
                return Err(CatsError::shape("phase_interleave", "phase shapes differ"));
            }
        }
        if out_len > p * k {
            return Err(CatsError::shape(
                "phase_interleave",
                format!("out_len {out_len} > {} patches x {k} phases", p),
            ));
        }
        let mut out = vec![0.0; b * n * out_len];
        for t in 0..out_len {
            let (phase, patch) = (t % k, t / k);
            let pd = self.data(parts[phase]);
            for ib in 0..b {
                for ch in 0..n {
                    out[(ib * n + ch) * out_len + t] = pd[(ib * n + ch) * p + patch];
                }
            }
        }
        let rg = parts.iter().any(|&t| self.rg(t));
        Ok(self.push(
            out,
            vec![b, n, out_len],
            rg,
            Op::PhaseInterleave {
                parts: parts.iter().map(|t| t.id).collect(),
            },
        ))
    }

    /// Mean over the time axis: [B, L, C] -> [B, 1, C].
    pub fn mean_over_time(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 {
            return Err(CatsError::shape("mean_over_time", format!("{xs:?}")));
        }
        let (b, l, c) = (xs[0], xs[1], xs[2]);
        let xd = self.data(x);
        let mut out = vec![0.0; b * c];
        for ib in 0..b {
            for t in 0..l {
                for ch in 0..c {
                    out[ib * c + ch] += xd[(ib * l + t) * c + ch];
                }
            }
        }
        for v in out.iter_mut() {
            *v /= l as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![b, 1, c], rg, Op::MeanOverTime(x.id)))
    }

    /// Population standard deviation over time, floored at `eps`:
    /// [B, L, C] -> [B, 1, C]. Gradient is zero wherever the floor binds.
    pub fn std_over_time(&mut self, x: Tensor, eps: f64) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 {
            return Err(CatsError::shape("std_over_time", format!("{xs:?}")));
        }
        let (b, l, c) = (xs[0], xs[1], xs[2]);
        let xd = self.data(x);
        let mut out = vec![0.0; b * c];
        for ib in 0..b {
            for ch in 0..c {
                let mut mean = 0.0;
                for t in 0..l {
                    mean += xd[(ib * l + t) * c + ch];
                }
                mean /= l as f64;
                let mut var = 0.0;
                for t in 0..l {
                    let d = xd[(ib * l + t) * c + ch] - mean;
                    var += d * d;
                }
                out[ib * c + ch] = (var / l as f64).sqrt().max(eps);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![b, 1, c], rg, Op::StdOverTime { x: x.id, eps }))
    }

    /// Repeat a [B, 1, C] tensor along time: -> [B, len, C].
    pub fn repeat_time(&mut self, x: Tensor, len: usize) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != 1 {
            return Err(CatsError::shape("repeat_time", format!("{xs:?}")));
        }
        let (b, c) = (xs[0], xs[2]);
        let xd = self.data(x);
        let mut out = vec![0.0; b * len * c];
        for ib in 0..b {
            for t in 0..len {
                out[(ib * len + t) * c..(ib * len + t + 1) * c]
                    .copy_from_slice(&xd[ib * c..(ib + 1) * c]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![b, len, c], rg, Op::RepeatTime { x: x.id }))
    }

    /// Centered moving average over time with edge replication, odd window.
    pub fn moving_average_time(&mut self, x: Tensor, window: usize) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(CatsError::shape("moving_average_time", format!("{xs:?}")));
        }
        if window % 2 == 0 || window == 0 {
            return Err(CatsError::Config(format!(
                "moving average window must be odd, got {window}"
            )));
        }
        let (b, l, c) = (xs[0], xs[1], xs[2]);
        let hw = (window / 2) as isize;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for ib in 0..b {
            for t in 0..l {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for j in -hw..=hw {
                        let tt = (t as isize + j).clamp(0, l as isize - 1) as usize;
                        acc += xd[(ib * l + tt) * c + ch];
                    }
                    out[(ib * l + t) * c + ch] = acc / window as f64;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            xs,
            rg,
            Op::MovAvgTime { x: x.id, window },
        ))
    }

    /// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
    /// Identity when `training` is false.
    pub fn dropout(
        &mut self,
        x: Tensor,
        p: f64,
        training: bool,
        rng: &mut impl rand::Rng,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(CatsError::Config(format!(
                "dropout probability must be in [0,1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            // Identity with gradient passthrough.
            return Ok(self.offset(x, 0.0));
        }
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let n = self.data(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let xd = self.data(x);
        let data: Vec<f64> = xd.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(data, shape, rg, Op::Dropout { x: x.id, mask }))
    }

    /// Forward identity; zero gradient through this edge.
    pub fn stop_gradient(&mut self, x: Tensor) -> Tensor {
        let data = self.data(x).to_vec();
        let shape = self.shape(x).to_vec();
        self.push(data, shape, false, Op::StopGrad(x.id))
    }

    /// Elementwise indicator 1{x > 0}; zero gradient (the a.e. derivative).
    pub fn indicator_pos(&mut self, x: Tensor) -> Tensor {
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(data, shape, false, Op::IndicatorPos(x.id))
    }

    pub fn sum_all(&mut self, x: Tensor) -> Tensor {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![s], vec![1], rg, Op::SumAll(x.id))
    }

    pub fn mean_all(&mut self, x: Tensor) -> Tensor {
        let n = self.data(x).len().max(1);
        let s: f64 = self.data(x).iter().sum::<f64>() / n as f64;
        let rg = self.rg(x);
        self.push(vec![s], vec![1], rg, Op::MeanAll(x.id))
    }

    /// Shared time aggregation: out[b,c] = sum_t x[b,t,c] * w[t].
    pub fn time_dot_shared(&mut self, x: Tensor, w: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws != [xs[1]] {
            return Err(CatsError::shape(
                "time_dot_shared",
                format!("x {xs:?} vs w {ws:?}"),
            ));
        }
        let (b, l, c) = (xs[0], xs[1], xs[2]);
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![0.0; b * c];
        for ib in 0..b {
            for t in 0..l {
                let wv = wd[t];
                for ch in 0..c {
                    out[ib * c + ch] += xd[(ib * l + t) * c + ch] * wv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            out,
            vec![b, c],
            rg,
            Op::TimeDotShared { x: x.id, w: w.id },
        ))
    }

    /// Per-channel time aggregation: out[b,p] = sum_t x[b,t,p]*w[t,p] + bias[p].
    pub fn channel_time_affine(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws != [xs[1], xs[2]] || self.shape(b) != [xs[2]] {
            return Err(CatsError::shape(
                "channel_time_affine",
                format!("x {xs:?}, w {ws:?}"),
            ));
        }
        let (bt, l, p) = (xs[0], xs[1], xs[2]);
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; bt * p];
        for ib in 0..bt {
            for ch in 0..p {
                let mut acc = bd[ch];
                for t in 0..l {
                    acc += xd[(ib * l + t) * p + ch] * wd[t * p + ch];
                }
                out[ib * p + ch] = acc;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            out,
            vec![bt, p],
            rg,
            Op::ChannelTimeAffine {
                x: x.id,
                w: w.id,
                b: b.id,
            },
        ))
    }

    /// Per-channel linear maps over the time axis with unshared weights:
    /// x [B, L, k], w [k, L, H], bias [k, H] -> out [B, H, k].
    pub fn channelwise_affine(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[0] != xs[2] || ws[1] != xs[1] {
            return Err(CatsError::shape(
                "channelwise_affine",
                format!("x {xs:?} vs w {ws:?}"),
            ));
        }
        let (batch, l, k) = (xs[0], xs[1], xs[2]);
        let h = ws[2];
        if self.shape(b) != [k, h] {
            return Err(CatsError::shape("channelwise_affine", "bias shape"));
        }
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; batch * h * k];
        let mut tmp = vec![0.0; batch * h];
        for j in 0..k {
            // A = x[:, :, j] as [batch, l] with strides (l*k, k).
            let a = MatView {
                data: &xd[j..],
                rows: batch,
                cols: l,
                row_stride: (l * k) as isize,
                col_stride: k as isize,
            };
            let wj = MatView::row_major(&wd[j * l * h..(j + 1) * l * h], l, h);
            kernels::gemm(1.0, a, wj, 0.0, &mut tmp);
            for ib in 0..batch {
                for hh in 0..h {
                    out[(ib * h + hh) * k + j] = tmp[ib * h + hh] + bd[j * h + hh];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            out,
            vec![batch, h, k],
            rg,
            Op::ChannelwiseAffine {
                x: x.id,
                w: w.id,
                b: b.id,
            },
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across
    /// calls; intermediate gradients are transient.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(CatsError::Numeric("backward on empty tape".into()));
        }
        if numel(&self.nodes[loss.id].shape) != 1 {
            return Err(CatsError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.id].shape),
            ));
        }
        let n = self.nodes.len();
        let mut flow: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        flow[loss.id] = Some(vec![1.0]);

        for i in (0..=loss.id).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = flow[i].take() else { continue };
            self.propagate(i, &g, &mut flow);
            if matches!(self.nodes[i].op, Op::Leaf) {
                let lg = self.leaf_grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                for (a, &b) in lg.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    fn ensure<'a>(
        flow: &'a mut [Option<Vec<f64>>],
        nodes: &[Node],
        id: usize,
    ) -> &'a mut Vec<f64> {
        flow[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()])
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, i: usize, g: &[f64], flow: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let rg = |id: usize| nodes[id].requires_grad;
        match &nodes[i].op {
            Op::Leaf | Op::StopGrad(_) | Op::IndicatorPos(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let sa = nodes[a].shape.clone();
                let sb = nodes[b].shape.clone();
                let so = nodes[i].shape.clone();
                let same = sa == sb;
                let sign = if matches!(nodes[i].op, Op::Sub(_, _)) {
                    -1.0
                } else {
                    1.0
                };
                match &nodes[i].op {
                    Op::Add(_, _) | Op::Sub(_, _) => {
                        if rg(a) {
                            let da = Self::ensure(flow, nodes, a);
                            if same {
                                for (o, &gv) in da.iter_mut().zip(g) {
                                    *o += gv;
                                }
                            } else {
                                let stra = Self::bcast_strides(&sa, &so);
                                walk1(&so, &stra, |idx, oa| da[oa] += g[idx]);
                            }
                        }
                        if rg(b) {
                            let db = Self::ensure(flow, nodes, b);
                            if same {
                                for (o, &gv) in db.iter_mut().zip(g) {
                                    *o += sign * gv;
                                }
                            } else {
                                let strb = Self::bcast_strides(&sb, &so);
                                walk1(&so, &strb, |idx, ob| db[ob] += sign * g[idx]);
                            }
                        }
                    }
                    Op::Mul(_, _) => {
                        if rg(a) {
                            let bd = &nodes[b].data;
                            let strb = Self::bcast_strides(&sb, &so);
                            let da = Self::ensure(flow, nodes, a);
                            if same {
                                kernels::zip_accumulate(da, g, bd, |gv, bv| gv * bv);
                            } else {
                                let stra = Self::bcast_strides(&sa, &so);
                                walk3(&so, &stra, &strb, |idx, oa, ob| da[oa] += g[idx] * bd[ob]);
                            }
                        }
                        if rg(b) {
                            let ad = &nodes[a].data;
                            let stra = Self::bcast_strides(&sa, &so);
                            let db = Self::ensure(flow, nodes, b);
                            if same {
                                kernels::zip_accumulate(db, g, ad, |gv, av| gv * av);
                            } else {
                                let strb = Self::bcast_strides(&sb, &so);
                                walk3(&so, &strb, &stra, |idx, ob, oa| db[ob] += g[idx] * ad[oa]);
                            }
                        }
                    }
                    Op::Div(_, _) => {
                        if rg(a) {
                            let bd = &nodes[b].data;
                            let strb = Self::bcast_strides(&sb, &so);
                            let da = Self::ensure(flow, nodes, a);
                            if same {
                                kernels::zip_accumulate(da, g, bd, |gv, bv| gv / bv);
                            } else {
                                let stra = Self::bcast_strides(&sa, &so);
                                walk3(&so, &stra, &strb, |idx, oa, ob| da[oa] += g[idx] / bd[ob]);
                            }
                        }
                        if rg(b) {
                            let ad = &nodes[a].data;
                            let bd = &nodes[b].data;
                            let stra = Self::bcast_strides(&sa, &so);
                            let strb = Self::bcast_strides(&sb, &so);
                            let db = Self::ensure(flow, nodes, b);
                            walk3(&so, &strb, &stra, |idx, ob, oa| {
                                db[ob] -= g[idx] * ad[oa] / (bd[ob] * bd[ob]);
                            });
                        }
                    }
                    _ => unreachable!(),
                }
            }
            Op::Scale(x, c) => {
                if rg(*x) {
                    let (x, c) = (*x, *c);
                    let dx = Self::ensure(flow, nodes, x);
                    for (o, &gv) in dx.iter_mut().zip(g) {
                        *o += c * gv;
                    }
                }
            }
            Op::Offset(x, _) | Op::Reshape(x) => {
                if rg(*x) {
                    let dx = Self::ensure(flow, nodes, *x);
                    for (o, &gv) in dx.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::Gelu(x) => {
                if rg(*x) {
                    let x = *x;
                    let xd = &nodes[x].data;
                    let dx = Self::ensure(flow, nodes, x);
                    kernels::zip_accumulate(dx, g, xd, |gv, xv| gv * kernels::gelu_grad(xv));
                }
            }
            Op::Sigmoid(x) => {
                if rg(*x) {
                    let x = *x;
                    let yd = &nodes[i].data;
                    let dx = Self::ensure(flow, nodes, x);
                    kernels::zip_accumulate(dx, g, yd, |gv, yv| gv * yv * (1.0 - yv));
                }
            }
            Op::Affine { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let d_in = nodes[w].shape[0];
                let d_out = nodes[w].shape[1];
                let rows = nodes[x].data.len() / d_in.max(1);
                if rg(x) {
                    // dX = G · W^T
                    let wd = &nodes[w].data;
                    let dx = Self::ensure(flow, nodes, x);
                    kernels::gemm(
                        1.0,
                        MatView::row_major(g, rows, d_out),
                        MatView {
                            data: wd,
                            rows: d_out,
                            cols: d_in,
                            row_stride: 1,
                            col_stride: d_out as isize,
                        },
                        1.0,
                        dx,
                    );
                }
                if rg(w) {
                    // dW = X^T · G
                    let xd = &nodes[x].data;
                    let dw = Self::ensure(flow, nodes, w);
                    kernels::gemm(
                        1.0,
                        MatView {
                            data: xd,
                            rows: d_in,
                            cols: rows,
                            row_stride: 1,
                            col_stride: d_in as isize,
                        },
                        MatView::row_major(g, rows, d_out),
                        1.0,
                        dw,
                    );
                }
                if rg(b) {
                    let db = Self::ensure(flow, nodes, b);
                    for r in 0..rows {
                        for (o, &gv) in db.iter_mut().zip(&g[r * d_out..(r + 1) * d_out]) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                pad,
                stride,
                groups,
            } => {
                let (x, w, b) = (*x, *w, *b);
                let (pad, stride, groups) = (*pad, *stride, *groups);
                let xs = &nodes[x].shape;
                let ws = &nodes[w].shape;
                let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
                let (c_out, _, kw) = (ws[0], ws[1], ws[2]);
                let lp = len + 2 * pad;
                let l_out = nodes[i].shape[2];
                if rg(x) {
                    let mut dxp = vec![0.0; batch * c_in * lp];
                    kernels::conv1d_backward_input(
                        g,
                        batch,
                        c_in,
                        lp,
                        &nodes[w].data,
                        c_out,
                        kw,
                        stride,
                        groups,
                        &mut dxp,
                        l_out,
                    );
                    let dx = Self::ensure(flow, nodes, x);
                    for r in 0..batch * c_in {
                        let src = &dxp[r * lp + pad..r * lp + pad + len];
                        let dst = &mut dx[r * len..(r + 1) * len];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                if rg(w) || rg(b) {
                    let xp = kernels::pad_last(&nodes[x].data, batch * c_in, len, pad, pad);
                    let mut dw = vec![0.0; nodes[w].data.len()];
                    let mut db = vec![0.0; c_out];
                    kernels::conv1d_backward_params(
                        g, &xp, batch, c_in, lp, c_out, kw, stride, groups, &mut dw, &mut db,
                        l_out,
                    );
                    if rg(w) {
                        let dwf = Self::ensure(flow, nodes, w);
                        for (o, &v) in dwf.iter_mut().zip(&dw) {
                            *o += v;
                        }
                    }
                    if rg(b) {
                        let dbf = Self::ensure(flow, nodes, b);
                        for (o, &v) in dbf.iter_mut().zip(&db) {
                            *o += v;
                        }
                    }
                }
            }
            Op::PadLast { x, front, back } => {
                if rg(*x) {
                    let (x, front, back) = (*x, *front, *back);
                    let len_out = *nodes[i].shape.last().unwrap();
                    let len = len_out - front - back;
                    let rows = nodes[x].data.len() / len.max(1);
                    let dx = Self::ensure(flow, nodes, x);
                    for r in 0..rows {
                        let src = &g[r * len_out + front..r * len_out + front + len];
                        for (o, &v) in dx[r * len..(r + 1) * len].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Transpose12(x) => {
                if rg(*x) {
                    let x = *x;
                    let so = &nodes[i].shape;
                    let (b, d2, d1) = (so[0], so[1], so[2]); // out is [b, d2, d1]
                    let dx = Self::ensure(flow, nodes, x);
                    for ib in 0..b {
                        let gs = &g[ib * d1 * d2..];
                        let dst = &mut dx[ib * d1 * d2..(ib + 1) * d1 * d2];
                        for j in 0..d2 {
                            for k in 0..d1 {
                                dst[k * d2 + j] += gs[j * d1 + k];
                            }
                        }
                    }
                }
            }
            Op::ExpandBatch { x, batch } => {
                if rg(*x) {
                    let (x, batch) = (*x, *batch);
                    let n = nodes[x].data.len();
                    let dx = Self::ensure(flow, nodes, x);
                    for ib in 0..batch {
                        for (o, &v) in dx.iter_mut().zip(&g[ib * n..(ib + 1) * n]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ConcatChannels(parts) => {
                let parts = parts.clone();
                let total = *nodes[i].shape.last().unwrap();
                let rows = nodes[i].data.len() / total.max(1);
                let mut col = 0;
                for pid in parts {
                    let w = *nodes[pid].shape.last().unwrap();
                    if rg(pid) {
                        let dp = Self::ensure(flow, nodes, pid);
                        for r in 0..rows {
                            let src = &g[r * total + col..r * total + col + w];
                            for (o, &v) in dp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::SliceTime { x, start } => {
                if rg(*x) {
                    let (x, start) = (*x, *start);
                    let so = &nodes[i].shape;
                    let (b, span, c) = (so[0], so[1], so[2]);
                    let l = nodes[x].shape[1];
                    let dx = Self::ensure(flow, nodes, x);
                    for ib in 0..b {
                        let src = &g[ib * span * c..(ib + 1) * span * c];
                        let dst = &mut dx[(ib * l + start) * c..(ib * l + start + span) * c];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SliceChannels { x, start } => {
                if rg(*x) {
                    let (x, start) = (*x, *start);
                    let span = *nodes[i].shape.last().unwrap();
                    let c = *nodes[x].shape.last().unwrap();
                    let rows = nodes[x].data.len() / c;
                    let dx = Self::ensure(flow, nodes, x);
                    for r in 0..rows {
                        let src = &g[r * span..(r + 1) * span];
                        let dst = &mut dx[r * c + start..r * c + start + span];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
            Op::PhaseInterleave { parts } => {
                let parts = parts.clone();
                let k = parts.len();
                let so = &nodes[i].shape;
                let (b, n, out_len) = (so[0], so[1], so[2]);
                let p = nodes[parts[0]].shape[2];
                for (phase, pid) in parts.iter().enumerate() {
                    if !rg(*pid) {
                        continue;
                    }
                    let dp = Self::ensure(flow, nodes, *pid);
                    let mut t = phase;
                    while t < out_len {
                        let patch = t / k;
                        for ib in 0..b {
                            for ch in 0..n {
                                dp[(ib * n + ch) * p + patch] += g[(ib * n + ch) * out_len + t];
                            }
                        }
                        t += k;
                    }
                }
            }
            Op::MeanOverTime(x) => {
                if rg(*x) {
                    let x = *x;
                    let xs = &nodes[x].shape;
                    let (b, l, c) = (xs[0], xs[1], xs[2]);
                    let inv = 1.0 / l as f64;
                    let dx = Self::ensure(flow, nodes, x);
                    for ib in 0..b {
                        for t in 0..l {
                            for ch in 0..c {
                                dx[(ib * l + t) * c + ch] += g[ib * c + ch] * inv;
                            }
                        }
                    }
                }
            }
            Op::StdOverTime { x, eps } => {
                if rg(*x) {
                    let (x, eps) = (*x, *eps);
                    let xs = &nodes[x].shape;
                    let (b, l, c) = (xs[0], xs[1], xs[2]);
                    let xd = &nodes[x].data;
                    let yd = &nodes[i].data;
                    let mut means = vec![0.0; b * c];
                    for ib in 0..b {
                        for t in 0..l {
                            for ch in 0..c {
                                means[ib * c + ch] += xd[(ib * l + t) * c + ch];
                            }
                        }
                    }
                    for m in means.iter_mut() {
                        *m /= l as f64;
                    }
                    let dx = Self::ensure(flow, nodes, x);
                    for ib in 0..b {
                        for ch in 0..c {
                            let s = yd[ib * c + ch];
                            // No gradient where the eps floor binds (or s == 0).
                            if s <= eps || s == 0.0 {
                                continue;
                            }
                            let coef = g[ib * c + ch] / (l as f64 * s);
                            let m = means[ib * c + ch];
                            for t in 0..l {
                                dx[(ib * l + t) * c + ch] +=
                                    coef * (xd[(ib * l + t) * c + ch] - m);
                            }
                        }
                    }
                }
            }
            Op::RepeatTime { x } => {
                if rg(*x) {
                    let x = *x;
                    let so = &nodes[i].shape;
                    let (b, len, c) = (so[0], so[1], so[2]);
                    let dx = Self::ensure(flow, nodes, x);
                    for ib in 0..b {
                        for t in 0..len {
                            for ch in 0..c {
                                dx[ib * c + ch] += g[(ib * len + t) * c + ch];
                            }
                        }
                    }
                }
            }
            Op::MovAvgTime { x, window } => {
                if rg(*x) {
                    let (x, window) = (*x, *window);
                    let xs = &nodes[x].shape;
                    let (b, l, c) = (xs[0], xs[1], xs[2]);
                    let hw = (window / 2) as isize;
                    let inv = 1.0 / window as f64;
                    let dx = Self::ensure(flow, nodes, x);
                    for ib in 0..b {
                        for t in 0..l {
                            for j in -hw..=hw {
                                let tt = (t as isize + j).clamp(0, l as isize - 1) as usize;
                                for ch in 0..c {
                                    dx[(ib * l + tt) * c + ch] += g[(ib * l + t) * c + ch] * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if rg(*x) {
                    let dx = Self::ensure(flow, nodes, *x);
                    for ((o, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *o += gv * m;
                    }
                }
            }
            Op::SumAll(x) => {
                if rg(*x) {
                    let x = *x;
                    let dx = Self::ensure(flow, nodes, x);
                    for o in dx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::MeanAll(x) => {
                if rg(*x) {
                    let x = *x;
                    let inv = 1.0 / nodes[x].data.len().max(1) as f64;
                    let dx = Self::ensure(flow, nodes, x);
                    for o in dx.iter_mut() {
                        *o += g[0] * inv;
                    }
                }
            }
            Op::TimeDotShared { x, w } => {
                let (x, w) = (*x, *w);
                let xs = &nodes[x].shape;
                let (b, l, c) = (xs[0], xs[1], xs[2]);
                if rg(x) {
                    let wd = &nodes[w].data;
                    let dx = Self::ensure(flow, nodes, x);
                    for ib in 0..b {
                        for t in 0..l {
                            for ch in 0..c {
                                dx[(ib * l + t) * c + ch] += g[ib * c + ch] * wd[t];
                            }
                        }
                    }
                }
                if rg(w) {
                    let xd = &nodes[x].data;
                    let dw = Self::ensure(flow, nodes, w);
                    for ib in 0..b {
                        for t in 0..l {
                            let mut acc = 0.0;
                            for ch in 0..c {
                                acc += g[ib * c + ch] * xd[(ib * l + t) * c + ch];
                            }
                            dw[t] += acc;
                        }
                    }
                }
            }
            Op::ChannelTimeAffine { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = &nodes[x].shape;
                let (bt, l, p) = (xs[0], xs[1], xs[2]);
                if rg(x) {
                    let wd = &nodes[w].data;
                    let dx = Self::ensure(flow, nodes, x);
                    for ib in 0..bt {
                        for t in 0..l {
                            for ch in 0..p {
                                dx[(ib * l + t) * p + ch] += g[ib * p + ch] * wd[t * p + ch];
                            }
                        }
                    }
                }
                if rg(w) {
                    let xd = &nodes[x].data;
                    let dw = Self::ensure(flow, nodes, w);
                    for ib in 0..bt {
                        for t in 0..l {
                            for ch in 0..p {
                                dw[t * p + ch] += g[ib * p + ch] * xd[(ib * l + t) * p + ch];
                            }
                        }
                    }
                }
                if rg(b) {
                    let db = Self::ensure(flow, nodes, b);
                    for ib in 0..bt {
                        for ch in 0..p {
                            db[ch] += g[ib * p + ch];
                        }
                    }
                }
            }
            Op::ChannelwiseAffine { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = &nodes[x].shape;
                let (batch, l, k) = (xs[0], xs[1], xs[2]);
                let h = nodes[w].shape[2];
                // Gather the upstream gradient per channel: gj [batch, h].
                let mut gj = vec![0.0; batch * h];
                for j in 0..k {
                    for ib in 0..batch {
                        for hh in 0..h {
                            gj[ib * h + hh] = g[(ib * h + hh) * k + j];
                        }
                    }
                    if rg(x) {
                        // dXj = Gj · Wj^T, scattered back into column j.
                        let wd = &nodes[w].data;
                        let mut dxtmp = vec![0.0; batch * l];
                        kernels::gemm(
                            1.0,
                            MatView::row_major(&gj, batch, h),
                            MatView {
                                data: &wd[j * l * h..(j + 1) * l * h],
                                rows: h,
                                cols: l,
                                row_stride: 1,
                                col_stride: h as isize,
                            },
                            0.0,
                            &mut dxtmp,
                        );
                        let dx = Self::ensure(flow, nodes, x);
                        for ib in 0..batch {
                            for t in 0..l {
                                dx[(ib * l + t) * k + j] += dxtmp[ib * l + t];
                            }
                        }
                    }
                    if rg(w) {
                        // dWj = Xj^T · Gj.
                        let xd = &nodes[x].data;
                        let a = MatView {
                            data: &xd[j..],
                            rows: l,
                            cols: batch,
                            row_stride: k as isize,
                            col_stride: (l * k) as isize,
                        };
                        let dw = Self::ensure(flow, nodes, w);
                        kernels::gemm(
                            1.0,
                            a,
                            MatView::row_major(&gj, batch, h),
                            1.0,
                            &mut dw[j * l * h..(j + 1) * l * h],
                        );
                    }
                    if rg(b) {
                        let db = Self::ensure(flow, nodes, b);
                        for ib in 0..batch {
                            for hh in 0..h {
                                db[j * h + hh] += gj[ib * h + hh];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Odometer walk over `shape`, yielding (linear index, offset under strides).
fn walk1(shape: &[usize], strides: &[isize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let mut off = 0isize;
    for i in 0..n {
        f(i, off as usize);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * shape[d] as isize;
            idx[d] = 0;
        }
    }
}

/// Odometer walk with two stride sets.
fn walk2(shape: &[usize], sa: &[isize], sb: &[isize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0isize, 0isize);
    for i in 0..n {
        f(i, oa as usize, ob as usize);
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d] as isize;
            ob -= sb[d] * shape[d] as isize;
            idx[d] = 0;
        }
    }
}

fn walk3(shape: &[usize], sa: &[isize], sb: &[isize], f: impl FnMut(usize, usize, usize)) {
    walk2(shape, sa, sb, f);
}
