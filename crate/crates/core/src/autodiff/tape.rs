//! Reverse-mode autodiff on a Wengert tape.
//!
//! Ops evaluate eagerly as the graph is built, so every node carries its
//! forward value. `backward` replays the tape in reverse and accumulates
//! gradients for registered parameters. Reduction orders are fixed, so a
//! graph built twice from identical inputs produces bit-identical values
//! and gradients.

use std::collections::HashMap;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    StopGrad(#[allow(dead_code)] ValueId),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    AddConst(ValueId, #[allow(dead_code)] f64),
    /// Tensor + scalar node, broadcast over all elements.
    AddScalar(ValueId, ValueId),
    /// Tensor * scalar node, broadcast over all elements.
    MulScalar(ValueId, ValueId),
    Recip(ValueId),
    Sqrt(ValueId),
    Exp(ValueId),
    Log(ValueId),
    Relu(ValueId),
    Matmul(ValueId, ValueId),
    Transpose(ValueId),
    Conv2d {
        x: ValueId,
        w: ValueId,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    TConv2d {
        x: ValueId,
        w: ValueId,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    /// [C,H,W] + bias[C], broadcast over H and W.
    ChannelBias(ValueId, ValueId),
    /// [R,C] + bias[C], broadcast over rows.
    RowBias(ValueId, ValueId),
    /// [R,C] scaled per-row by s[R].
    ScaleRows(ValueId, ValueId),
    /// Column means of [R,C] -> [C]; rows summed in sorted order so the
    /// result is invariant under row permutation (TAP contract).
    MeanAxis0(ValueId),
    MeanAll(ValueId),
    /// Mean squared error between two same-shape tensors -> scalar.
    Mse(ValueId, ValueId),
    /// Log-softmax over the last axis of [C] or [R,C].
    LogSoftmax(ValueId),
    /// -(1/R) * sum_r x[r, labels[r]] -> scalar (cross-entropy pick).
    NegMeanPick(ValueId, Vec<usize>),
    ConcatVec(ValueId, ValueId),
    /// Stack N vectors of equal length into [N, C].
    StackRows(Vec<ValueId>),
    /// Stack N scalars into [N].
    StackScalars(Vec<ValueId>),
    Reshape(ValueId),
    /// Keep the first `keep` rows of [R,C].
    CropRows(ValueId, usize),
    /// [C,H,W] -> [H, C*W]: per-position features concatenated over channels.
    ChannelsToRows(ValueId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGrad(_) => "stop_gradient",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Recip(_) => "recip",
            Op::Sqrt(_) => "sqrt",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Relu(_) => "relu",
            Op::Matmul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::TConv2d { .. } => "tconv2d",
            Op::ChannelBias(..) => "channel_bias",
            Op::RowBias(..) => "row_bias",
            Op::ScaleRows(..) => "scale_rows",
            Op::MeanAxis0(_) => "mean_axis0",
            Op::MeanAll(_) => "mean_all",
            Op::Mse(..) => "mse",
            Op::LogSoftmax(_) => "log_softmax",
            Op::NegMeanPick(..) => "neg_mean_pick",
            Op::ConcatVec(..) => "concat_vec",
            Op::StackRows(_) => "stack_rows",
            Op::StackScalars(_) => "stack_scalars",
            Op::Reshape(_) => "reshape",
            Op::CropRows(..) => "crop_rows",
            Op::ChannelsToRows(_) => "channels_to_rows",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by parameter id. Registered parameters that the loss
/// never reaches map to zero tensors.
#[derive(Debug)]
pub struct GradientMap {
    grads: HashMap<usize, Tensor>,
}

impl GradientMap {
    pub fn get(&self, param_id: usize) -> Option<&Tensor> {
        self.grads.get(&param_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.grads.keys().copied()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    // (param id, leaf node) in registration order; one param may appear twice
    // (e.g. with and without stop_gradient), contributions accumulate.
    params: Vec<(usize, ValueId)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Leaf, value, false)
    }

    /// Scalar constant.
    pub fn constant(&mut self, v: f64) -> ValueId {
        self.leaf(Tensor::scalar(v))
    }

    /// Trainable input registered under `param_id`; `backward` reports its
    /// gradient under that id.
    pub fn param(&mut self, param_id: usize, value: Tensor) -> ValueId {
        let id = self.push(Op::Leaf, value, true);
        self.params.push((param_id, id));
        id
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> ValueId {
        self.nodes.push(Node { op, value, needs_grad });
        ValueId(self.nodes.len() - 1)
    }

    fn finish(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Result<ValueId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(self.push(op, value, needs_grad))
    }

    fn ng(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: ValueId, b: ValueId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn stop_gradient(&mut self, a: ValueId) -> ValueId {
        let value = self.value(a).clone();
        self.push(Op::StopGrad(a), value, false)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.finish(Op::Add(a, b), v, self.ng(a) || self.ng(b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.finish(Op::Sub(a, b), v, self.ng(a) || self.ng(b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.finish(Op::Mul(a, b), v, self.ng(a) || self.ng(b))
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        let v = map(self.value(a), |x| x * c);
        self.finish(Op::Scale(a, c), v, self.ng(a))
    }

    pub fn neg(&mut self, a: ValueId) -> Result<ValueId> {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        let v = map(self.value(a), |x| x + c);
        self.finish(Op::AddConst(a, c), v, self.ng(a))
    }

    /// Broadcast-add a scalar node to every element of `a`.
    pub fn add_scalar(&mut self, a: ValueId, s: ValueId) -> Result<ValueId> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("add_scalar", format!("rhs shape {:?}", self.value(s).shape())));
        }
        let sv = self.value(s).data()[0];
        let v = map(self.value(a), |x| x + sv);
        self.finish(Op::AddScalar(a, s), v, self.ng(a) || self.ng(s))
    }

    /// Broadcast-multiply every element of `a` by a scalar node.
    pub fn mul_scalar(&mut self, a: ValueId, s: ValueId) -> Result<ValueId> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("mul_scalar", format!("rhs shape {:?}", self.value(s).shape())));
        }
        let sv = self.value(s).data()[0];
        let v = map(self.value(a), |x| x * sv);
        self.finish(Op::MulScalar(a, s), v, self.ng(a) || self.ng(s))
    }

    pub fn recip(&mut self, a: ValueId) -> Result<ValueId> {
        let v = map(self.value(a), |x| 1.0 / x);
        self.finish(Op::Recip(a), v, self.ng(a))
    }

    pub fn sqrt(&mut self, a: ValueId) -> Result<ValueId> {
        let v = map(self.value(a), f64::sqrt);
        self.finish(Op::Sqrt(a), v, self.ng(a))
    }

    pub fn exp(&mut self, a: ValueId) -> Result<ValueId> {
        let v = map(self.value(a), f64::exp);
        self.finish(Op::Exp(a), v, self.ng(a))
    }

    pub fn log(&mut self, a: ValueId) -> Result<ValueId> {
        let v = map(self.value(a), f64::ln);
        self.finish(Op::Log(a), v, self.ng(a))
    }

    pub fn relu(&mut self, a: ValueId) -> Result<ValueId> {
        let v = map(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        self.finish(Op::Relu(a), v, self.ng(a))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let v = Tensor::new(vec![m, n], out)?;
        self.finish(Op::Matmul(a, b), v, self.ng(a) || self.ng(b))
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![0.0; r * c];
        kernels::transpose(self.value(a).data(), &mut out, r, c);
        let v = Tensor::new(vec![c, r], out)?;
        self.finish(Op::Transpose(a), v, self.ng(a))
    }

    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<ValueId> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(Error::shape("conv2d", format!("x {sx:?} w {sw:?}")));
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad.0 < kh || wd + 2 * pad.1 < kw {
            return Err(Error::shape("conv2d", format!("kernel ({kh},{kw}) exceeds padded input")));
        }
        let oh = kernels::conv_out_len(h, kh, stride.0, pad.0);
        let ow = kernels::conv_out_len(wd, kw, stride.1, pad.1);
        let mut out = vec![0.0; co * oh * ow];
        kernels::conv2d(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            (ci, h, wd),
            (co, kh, kw),
            stride,
            pad,
        );
        let v = Tensor::new(vec![co, oh, ow], out)?;
        self.finish(Op::Conv2d { x, w, stride, pad }, v, self.ng(x) || self.ng(w))
    }

    pub fn tconv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<ValueId> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[0] {
            return Err(Error::shape("tconv2d", format!("x {sx:?} w {sw:?}")));
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, kh, kw) = (sw[1], sw[2], sw[3]);
        if (h - 1) * stride.0 + kh <= 2 * pad.0 || (wd - 1) * stride.1 + kw <= 2 * pad.1 {
            return Err(Error::shape("tconv2d", "output would be empty"));
        }
        let oh = kernels::tconv_out_len(h, kh, stride.0, pad.0);
        let ow = kernels::tconv_out_len(wd, kw, stride.1, pad.1);
        let mut out = vec![0.0; co * oh * ow];
        kernels::tconv2d(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            (ci, h, wd),
            (co, kh, kw),
            stride,
            pad,
        );
        let v = Tensor::new(vec![co, oh, ow], out)?;
        self.finish(Op::TConv2d { x, w, stride, pad }, v, self.ng(x) || self.ng(w))
    }

    pub fn channel_bias(&mut self, x: ValueId, b: ValueId) -> Result<ValueId> {
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        if sx.len() != 3 || sb.len() != 1 || sb[0] != sx[0] {
            return Err(Error::shape("channel_bias", format!("x {sx:?} b {sb:?}")));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let mut out = self.value(x).data().to_vec();
        let bd = self.value(b).data();
        for ci in 0..c {
            let bias = bd[ci];
            for v in &mut out[ci * h * w..(ci + 1) * h * w] {
                *v += bias;
            }
        }
        let v = Tensor::new(sx.to_vec(), out)?;
        self.finish(Op::ChannelBias(x, b), v, self.ng(x) || self.ng(b))
    }

    pub fn row_bias(&mut self, x: ValueId, b: ValueId) -> Result<ValueId> {
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape("row_bias", format!("x {sx:?} b {sb:?}")));
        }
        let (r, c) = (sx[0], sx[1]);
        let mut out = self.value(x).data().to_vec();
        let bd = self.value(b).data();
        for ri in 0..r {
            for ci in 0..c {
                out[ri * c + ci] += bd[ci];
            }
        }
        let v = Tensor::new(vec![r, c], out)?;
        self.finish(Op::RowBias(x, b), v, self.ng(x) || self.ng(b))
    }

    pub fn scale_rows(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        let (sx, ss) = (self.value(x).shape(), self.value(s).shape());
        if sx.len() != 2 || ss.len() != 1 || ss[0] != sx[0] {
            return Err(Error::shape("scale_rows", format!("x {sx:?} s {ss:?}")));
        }
        let (r, c) = (sx[0], sx[1]);
        let mut out = self.value(x).data().to_vec();
        let sd = self.value(s).data();
        for ri in 0..r {
            for v in &mut out[ri * c..(ri + 1) * c] {
                *v *= sd[ri];
            }
        }
        let v = Tensor::new(vec![r, c], out)?;
        self.finish(Op::ScaleRows(x, s), v, self.ng(x) || self.ng(s))
    }

    /// Column means over the row axis: [R,C] -> [C]. Invariant under row
    /// permutation bit-for-bit (rows are summed in sorted order).
    pub fn mean_axis0(&mut self, a: ValueId) -> Result<ValueId> {
        let s = self.value(a).shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape("mean_axis0", format!("{s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![0.0; c];
        kernels::column_means_sorted(self.value(a).data(), r, c, &mut out);
        let v = Tensor::new(vec![c], out)?;
        self.finish(Op::MeanAxis0(a), v, self.ng(a))
    }

    pub fn mean_all(&mut self, a: ValueId) -> Result<ValueId> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let mut s = 0.0;
        for v in self.value(a).data() {
            s += v;
        }
        let v = Tensor::scalar(s / n as f64);
        self.finish(Op::MeanAll(a), v, self.ng(a))
    }

    /// Mean squared error (per element) between same-shape tensors.
    pub fn mse(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel() as f64;
        let mut s = 0.0;
        for (x, y) in self.value(a).data().iter().zip(self.value(b).data()) {
            let d = x - y;
            s += d * d;
        }
        let v = Tensor::scalar(s / n);
        self.finish(Op::Mse(a, b), v, self.ng(a) || self.ng(b))
    }

    pub fn log_softmax(&mut self, a: ValueId) -> Result<ValueId> {
        let s = self.value(a).shape();
        let (r, c) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => return Err(Error::shape("log_softmax", format!("{s:?}"))),
        };
        if c == 0 {
            return Err(Error::shape("log_softmax", "empty rows"));
        }
        let mut out = vec![0.0; r * c];
        let d = self.value(a).data();
        for ri in 0..r {
            let row = &d[ri * c..(ri + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row {
                z += (v - m).exp();
            }
            let lz = z.ln() + m;
            for ci in 0..c {
                out[ri * c + ci] = row[ci] - lz;
            }
        }
        let v = Tensor::new(s.to_vec(), out)?;
        self.finish(Op::LogSoftmax(a), v, self.ng(a))
    }

    /// Cross-entropy pick: -(1/R) Σ_r x[r, labels[r]].
    pub fn neg_mean_pick(&mut self, a: ValueId, labels: &[usize]) -> Result<ValueId> {
        let s = self.value(a).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "neg_mean_pick",
                format!("{s:?} with {} labels", labels.len()),
            ));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape("neg_mean_pick", format!("label {bad} out of {c} classes")));
        }
        let d = self.value(a).data();
        let mut s_acc = 0.0;
        for (ri, &l) in labels.iter().enumerate() {
            s_acc += d[ri * c + l];
        }
        let v = Tensor::scalar(-s_acc / r as f64);
        self.finish(Op::NegMeanPick(a, labels.to_vec()), v, self.ng(a))
    }

    pub fn concat_vec(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 1 || sb.len() != 1 {
            return Err(Error::shape("concat_vec", format!("{sa:?} ++ {sb:?}")));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let v = Tensor::new(vec![sa[0] + sb[0]], out)?;
        self.finish(Op::ConcatVec(a, b), v, self.ng(a) || self.ng(b))
    }

    pub fn stack_rows(&mut self, rows: &[ValueId]) -> Result<ValueId> {
        if rows.is_empty() {
            return Err(Error::shape("stack_rows", "no rows"));
        }
        let c = self.value(rows[0]).numel();
        let mut out = Vec::with_capacity(rows.len() * c);
        let mut needs = false;
        for &r in rows {
            let s = self.value(r).shape();
            if s.len() != 1 || s[0] != c {
                return Err(Error::shape("stack_rows", format!("row shape {s:?}, want [{c}]")));
            }
            out.extend_from_slice(self.value(r).data());
            needs |= self.ng(r);
        }
        let v = Tensor::new(vec![rows.len(), c], out)?;
        self.finish(Op::StackRows(rows.to_vec()), v, needs)
    }

    pub fn stack_scalars(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(Error::shape("stack_scalars", "no inputs"));
        }
        let mut out = Vec::with_capacity(xs.len());
        let mut needs = false;
        for &x in xs {
            if !self.value(x).is_scalar() {
                return Err(Error::shape(
                    "stack_scalars",
                    format!("input shape {:?}", self.value(x).shape()),
                ));
            }
            out.push(self.value(x).data()[0]);
            needs |= self.ng(x);
        }
        let v = Tensor::new(vec![xs.len()], out)?;
        self.finish(Op::StackScalars(xs.to_vec()), v, needs)
    }

    pub fn reshape(&mut self, a: ValueId, shape: &[usize]) -> Result<ValueId> {
        let v = self.value(a).reshaped(shape.to_vec())?;
        self.finish(Op::Reshape(a), v, self.ng(a))
    }

    pub fn crop_rows(&mut self, a: ValueId, keep: usize) -> Result<ValueId> {
        let s = self.value(a).shape();
        if s.len() != 2 || keep > s[0] || keep == 0 {
            return Err(Error::shape("crop_rows", format!("{s:?} keep {keep}")));
        }
        let c = s[1];
        let out = self.value(a).data()[..keep * c].to_vec();
        let v = Tensor::new(vec![keep, c], out)?;
        self.finish(Op::CropRows(a, keep), v, self.ng(a))
    }

    pub fn channels_to_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let s = self.value(a).shape();
        if s.len() != 3 {
            return Err(Error::shape("channels_to_rows", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = self.value(a).data();
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[hi * (c * w) + ci * w + wi] = d[(ci * h + hi) * w + wi];
                }
            }
        }
        let v = Tensor::new(vec![h, c * w], out)?;
        self.finish(Op::ChannelsToRows(a), v, self.ng(a))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// registered parameter; parameters the loss does not reach map to zeros.
    pub fn backward(&self, loss: ValueId) -> Result<GradientMap> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss shape {:?}, want scalar", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // keep leaf grads for collection below
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }

        let mut map: HashMap<usize, Tensor> = HashMap::new();
        for &(pid, vid) in &self.params {
            let entry = map
                .entry(pid)
                .or_insert_with(|| Tensor::zeros(self.value(vid).shape().to_vec()));
            if let Some(g) = &grads[vid.0] {
                axpy_slice(entry.data_mut(), 1.0, g.data());
            }
        }
        Ok(GradientMap { grads: map })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        // Accumulate `contrib` into the gradient slot of input node `into`.
        fn acc(tape: &Tape, grads: &mut [Option<Tensor>], into: ValueId, f: impl FnOnce(&mut [f64])) {
            if !tape.nodes[into.0].needs_grad {
                return;
            }
            let slot = grads[into.0]
                .get_or_insert_with(|| Tensor::zeros(tape.value(into).shape().to_vec()));
            f(slot.data_mut());
        }
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                acc(self, grads, *a, |d| axpy_slice(d, 1.0, gd));
                acc(self, grads, *b, |d| axpy_slice(d, 1.0, gd));
            }
            Op::Sub(a, b) => {
                acc(self, grads, *a, |d| axpy_slice(d, 1.0, gd));
                acc(self, grads, *b, |d| axpy_slice(d, -1.0, gd));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(self, grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * vb[k];
                    }
                });
                acc(self, grads, *b, |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * va[k];
                    }
                });
            }
            Op::Scale(a, c) => acc(self, grads, *a, |d| axpy_slice(d, *c, gd)),
            Op::AddConst(a, _) => acc(self, grads, *a, |d| axpy_slice(d, 1.0, gd)),
            Op::AddScalar(a, s) => {
                acc(self, grads, *a, |d| axpy_slice(d, 1.0, gd));
                acc(self, grads, *s, |d| d[0] += gd.iter().sum::<f64>());
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).data()[0];
                let va = self.value(*a).data();
                acc(self, grads, *a, |d| axpy_slice(d, sv, gd));
                acc(self, grads, *s, |d| {
                    d[0] += gd.iter().zip(va).map(|(x, y)| x * y).sum::<f64>()
                });
            }
            Op::Recip(a) => {
                let out = self.value(ValueId(i)).data();
                acc(self, grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] -= gd[k] * out[k] * out[k];
                    }
                });
            }
            Op::Sqrt(a) => {
                let out = self.value(ValueId(i)).data();
                acc(self, grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * 0.5 / out[k];
                    }
                });
            }
            Op::Exp(a) => {
                let out = self.value(ValueId(i)).data();
                acc(self, grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * out[k];
                    }
                });
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                acc(self, grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] / va[k];
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                acc(self, grads, *a, |d| {
                    for k in 0..d.len() {
                        if va[k] > 0.0 {
                            d[k] += gd[k];
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // dA = g @ B^T
                acc(self, grads, *a, |d| {
                    for ii in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gd[ii * n + j] * vb[kk * n + j];
                            }
                            d[ii * k + kk] += s;
                        }
                    }
                });
                // dB = A^T @ g
                acc(self, grads, *b, |d| {
                    for kk in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for ii in 0..m {
                                s += va[ii * k + kk] * gd[ii * n + j];
                            }
                            d[kk * n + j] += s;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let s = self.value(*a).shape();
                let (r, c) = (s[0], s[1]);
                acc(self, grads, *a, |d| {
                    for ri in 0..r {
                        for ci in 0..c {
                            d[ri * c + ci] += gd[ci * r + ri];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (sx, sw) = (self.value(*x).shape(), self.value(*w).shape());
                let dims_x = (sx[0], sx[1], sx[2]);
                let dims_w = (sw[0], sw[2], sw[3]);
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = vec![0.0; vx.len()];
                let mut dw = vec![0.0; vw.len()];
                kernels::conv2d_backward(vx, vw, gd, &mut dx, &mut dw, dims_x, dims_w, *stride, *pad);
                acc(self, grads, *x, |d| axpy_slice(d, 1.0, &dx));
                acc(self, grads, *w, |d| axpy_slice(d, 1.0, &dw));
            }
            Op::TConv2d { x, w, stride, pad } => {
                let (sx, sw) = (self.value(*x).shape(), self.value(*w).shape());
                let dims_x = (sx[0], sx[1], sx[2]);
                let dims_w = (sw[1], sw[2], sw[3]);
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = vec![0.0; vx.len()];
                let mut dw = vec![0.0; vw.len()];
                kernels::tconv2d_backward(vx, vw, gd, &mut dx, &mut dw, dims_x, dims_w, *stride, *pad);
                acc(self, grads, *x, |d| axpy_slice(d, 1.0, &dx));
                acc(self, grads, *w, |d| axpy_slice(d, 1.0, &dw));
            }
            Op::ChannelBias(x, b) => {
                let s = self.value(*x).shape();
                let (c, hw) = (s[0], s[1] * s[2]);
                acc(self, grads, *x, |d| axpy_slice(d, 1.0, gd));
                acc(self, grads, *b, |d| {
                    for ci in 0..c {
                        let mut sum = 0.0;
                        for v in &gd[ci * hw..(ci + 1) * hw] {
                            sum += v;
                        }
                        d[ci] += sum;
                    }
                });
            }
            Op::RowBias(x, b) => {
                let s = self.value(*x).shape();
                let (r, c) = (s[0], s[1]);
                acc(self, grads, *x, |d| axpy_slice(d, 1.0, gd));
                acc(self, grads, *b, |d| {
                    for ri in 0..r {
                        for ci in 0..c {
                            d[ci] += gd[ri * c + ci];
                        }
                    }
                });
            }
            Op::ScaleRows(x, s) => {
                let sh = self.value(*x).shape();
                let (r, c) = (sh[0], sh[1]);
                let (vx, vs) = (self.value(*x).data(), self.value(*s).data());
                acc(self, grads, *x, |d| {
                    for ri in 0..r {
                        for ci in 0..c {
                            d[ri * c + ci] += gd[ri * c + ci] * vs[ri];
                        }
                    }
                });
                acc(self, grads, *s, |d| {
                    for ri in 0..r {
                        let mut sum = 0.0;
                        for ci in 0..c {
                            sum += gd[ri * c + ci] * vx[ri * c + ci];
                        }
                        d[ri] += sum;
                    }
                });
            }
            Op::MeanAxis0(a) => {
                let s = self.value(*a).shape();
                let (r, c) = (s[0], s[1]);
                let inv = 1.0 / r as f64;
                acc(self, grads, *a, |d| {
                    for ri in 0..r {
                        for ci in 0..c {
                            d[ri * c + ci] += gd[ci] * inv;
                        }
                    }
                });
            }
            Op::MeanAll(a) => {
                let inv = gd[0] / self.value(*a).numel() as f64;
                acc(self, grads, *a, |d| {
                    for v in d {
                        *v += inv;
                    }
                });
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).numel() as f64;
                let coeff = 2.0 * gd[0] / n;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(self, grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += coeff * (va[k] - vb[k]);
                    }
                });
                acc(self, grads, *b, |d| {
                    for k in 0..d.len() {
                        d[k] -= coeff * (va[k] - vb[k]);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let s = self.value(*a).shape();
                let (r, c) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
                let out = self.value(ValueId(i)).data();
                acc(self, grads, *a, |d| {
                    for ri in 0..r {
                        let mut gsum = 0.0;
                        for ci in 0..c {
                            gsum += gd[ri * c + ci];
                        }
                        for ci in 0..c {
                            let sm = out[ri * c + ci].exp();
                            d[ri * c + ci] += gd[ri * c + ci] - sm * gsum;
                        }
                    }
                });
            }
            Op::NegMeanPick(a, labels) => {
                let c = self.value(*a).shape()[1];
                let coeff = gd[0] / labels.len() as f64;
                acc(self, grads, *a, |d| {
                    for (ri, &l) in labels.iter().enumerate() {
                        d[ri * c + l] -= coeff;
                    }
                });
            }
            Op::ConcatVec(a, b) => {
                let na = self.value(*a).numel();
                acc(self, grads, *a, |d| axpy_slice(d, 1.0, &gd[..na]));
                acc(self, grads, *b, |d| axpy_slice(d, 1.0, &gd[na..]));
            }
            Op::StackRows(rows) => {
                let c = self.value(rows[0]).numel();
                for (ri, &row) in rows.iter().enumerate() {
                    acc(self, grads, row, |d| axpy_slice(d, 1.0, &gd[ri * c..(ri + 1) * c]));
                }
            }
            Op::StackScalars(xs) => {
                for (k, &x) in xs.iter().enumerate() {
                    acc(self, grads, x, |d| d[0] += gd[k]);
                }
            }
            Op::Reshape(a) => acc(self, grads, *a, |d| axpy_slice(d, 1.0, gd)),
            Op::CropRows(a, keep) => {
                let c = self.value(*a).shape()[1];
                acc(self, grads, *a, |d| axpy_slice(&mut d[..keep * c], 1.0, gd));
            }
            Op::ChannelsToRows(a) => {
                let s = self.value(*a).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                acc(self, grads, *a, |d| {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                d[(ci * h + hi) * w + wi] += gd[hi * (c * w) + ci * w + wi];
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn axpy_slice(dst: &mut [f64], alpha: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = t.leaf(t1(&[-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn log_softmax_uniform_logits() {
        let mut t = Tape::new();
        let x = t.leaf(t1(&[0.7, 0.7, 0.7, 0.7]));
        let y = t.log_softmax(x).unwrap();
        let want = -(4.0f64).ln();
        for &v in t.value(y).data() {
            assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        }
    }

    #[test]
    fn mean_axis0_small_matrix() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = t.mean_axis0(x).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.param(0, t1(&[1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let mean = t.mean_all(sq).unwrap();
        let loss = t.scale(mean, 2.0).unwrap(); // mean*2 = sum for len 2
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_of_constant_loss_is_zero() {
        let mut t = Tape::new();
        let _x = t.param(0, t1(&[1.0, 2.0]));
        let c = t.constant(5.0);
        let loss = t.scale(c, 1.0).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_gradient_matches_softmax_minus_onehot() {
        // logits [2,0,0], label 0: softmax = e^2/(e^2+2) etc.
        let mut t = Tape::new();
        let x = t.param(0, Tensor::matrix(1, 3, vec![2.0, 0.0, 0.0]).unwrap());
        let ls = t.log_softmax(x).unwrap();
        let loss = t.neg_mean_pick(ls, &[0]).unwrap();
        let g = t.backward(loss).unwrap();
        let z = (2.0f64).exp() + 2.0;
        let want = [(2.0f64).exp() / z - 1.0, 1.0 / z, 1.0 / z];
        for (a, b) in g.get(0).unwrap().data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        // L = stop_gradient(w) . x  =>  dL/dw = 0, dL/dx = w
        let mut t = Tape::new();
        let w = t.param(0, t1(&[3.0, -1.0]));
        let x = t.param(1, t1(&[2.0, 5.0]));
        let ws = t.stop_gradient(w);
        assert_eq!(t.value(ws).data(), &[3.0, -1.0]);
        let prod = t.mul(ws, x).unwrap();
        let mean = t.mean_all(prod).unwrap();
        let loss = t.scale(mean, 2.0).unwrap(); // sum
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.get(1).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let build = |which: u8| -> (Tensor, Tensor) {
            let mut t = Tape::new();
            let x = t.param(0, t1(&[0.3, -0.4, 0.9]));
            let e = t.exp(x).unwrap();
            let l1 = t.mean_all(e).unwrap();
            let sq = t.mul(x, x).unwrap();
            let l2 = t.mean_all(sq).unwrap();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => t.add(l1, l2).unwrap(),
            };
            let g = t.backward(loss).unwrap();
            (g.get(0).unwrap().clone(), t.value(loss).clone())
        };
        let (g1, _) = build(0);
        let (g2, _) = build(1);
        let (gsum, _) = build(2);
        for k in 0..3 {
            let want = g1.data()[k] + g2.data()[k];
            assert!((gsum.data()[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut t = Tape::new();
            let x = t.param(0, Tensor::matrix(4, 3, (0..12).map(|i| (i as f64) * 0.17 - 1.0).collect()).unwrap());
            let w = t.param(1, Tensor::matrix(3, 5, (0..15).map(|i| (i as f64) * 0.05 - 0.3).collect()).unwrap());
            let h = t.matmul(x, w).unwrap();
            let r = t.relu(h).unwrap();
            let ls = t.log_softmax(r).unwrap();
            let loss = t.neg_mean_pick(ls, &[0, 1, 2, 3]).unwrap();
            let g = t.backward(loss).unwrap();
            (
                t.value(loss).data().to_vec(),
                g.get(0).unwrap().data().to_vec(),
                g.get(1).unwrap().data().to_vec(),
            )
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn unreached_params_get_zero_gradients() {
        let mut t = Tape::new();
        let _unused = t.param(7, Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let x = t.param(0, t1(&[1.0, 2.0]));
        let loss = t.mean_all(x).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(7).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(t1(&[-1.0]));
        assert!(matches!(t.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tape::new();
        let a = t.leaf(t1(&[1.0, 2.0]));
        let b = t.leaf(t1(&[1.0, 2.0, 3.0]));
        assert!(t.add(a, b).is_err());
    }

    #[test]
    fn scalar_broadcast_ops() {
        let mut t = Tape::new();
        let a = t.param(0, t1(&[1.0, 2.0, 3.0]));
        let s = t.param(1, Tensor::scalar(2.0));
        let shifted = t.add_scalar(a, s).unwrap();
        assert_eq!(t.value(shifted).data(), &[3.0, 4.0, 5.0]);
        let scaled = t.mul_scalar(a, s).unwrap();
        let loss = t.mean_all(scaled).unwrap();
        let g = t.backward(loss).unwrap();
        // d/da_i mean(2*a) = 2/3, d/ds mean(s*a) = mean(a) = 2
        for &v in g.get(0).unwrap().data() {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
        assert!((g.get(1).unwrap().data()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn tap_mean_is_bit_exact_under_row_permutation() {
        let rows = [
            vec![0.1234567, -0.9, 3.3e-7],
            vec![1.5, 2.25, -0.125],
            vec![0.7, -0.3, 0.11],
            vec![-2.0, 0.5, 9.0],
        ];
        let stack = |order: &[usize]| {
            let mut t = Tape::new();
            let ids: Vec<ValueId> = order.iter().map(|&k| t.leaf(t1(&rows[k]))).collect();
            let m = t.stack_rows(&ids).unwrap();
            let mean = t.mean_axis0(m).unwrap();
            t.value(mean).data().to_vec()
        };
        let a = stack(&[0, 1, 2, 3]);
        let b = stack(&[3, 0, 2, 1]);
        assert_eq!(a, b); // bit-identical, not just close
    }
}
