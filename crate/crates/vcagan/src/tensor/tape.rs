//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Ops execute eagerly and are recorded in topological order. `Tape::grad`
//! replays the record in reverse, but builds the vector-Jacobian products out
//! of ordinary tape ops, so gradients are themselves differentiable values —
//! second-order terms (the R1 gradient penalty) need no special casing.

use super::kernels::{self, ConvSpec};
use super::{Tensor, TensorError};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) u32);

impl TensorId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Neg(TensorId),
    Recip(TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Exp(TensorId),
    Ln(TensorId),
    Sqrt(TensorId),
    Tanh(TensorId),
    Sigmoid(TensorId),
    Softplus(TensorId),
    Abs(TensorId),
    LeakyRelu(TensorId, f64),
    MatMul(TensorId, TensorId),
    MatMulNT(TensorId, TensorId),
    MatMulTN(TensorId, TensorId),
    Conv { x: TensorId, w: TensorId, spec: ConvSpec },
    ConvDx { g: TensorId, w: TensorId, spec: ConvSpec },
    ConvDw { x: TensorId, g: TensorId, spec: ConvSpec },
    SoftmaxRows(TensorId),
    SumAxes(TensorId, Vec<bool>),
    BroadcastTo(TensorId),
    Reshape(TensorId),
    Permute(TensorId, Vec<usize>),
    Concat { axis: usize, parts: Vec<TensorId> },
    Slice { x: TensorId, axis: usize, start: usize },
    PadAxis { x: TensorId, axis: usize, before: usize },
    BilinearResize(TensorId),
    BilinearAdjoint(TensorId),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops with their results.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> TensorId {
        debug_assert_eq!(kernels::numel(&shape), data.len());
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(Node { shape, data, op, requires_grad });
        id
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.idx()].requires_grad
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.idx()].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.idx()].data
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.idx()].data.len()
    }

    /// Scalar value of a single-element node.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.idx()].data[0]
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        Tensor::new(self.shape(id).to_vec(), self.data(id).to_vec())
    }

    pub fn all_finite(&self, id: TensorId) -> bool {
        self.data(id).iter().all(|v| v.is_finite())
    }

    // -- leaves ------------------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> TensorId {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        self.leaf(t, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorId {
        self.push(shape.to_vec(), vec![0.0; kernels::numel(shape)], Op::Leaf, false)
    }

    /// Copy a value out of the graph: same data, no history, no gradient.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let shape = self.shape(id).to_vec();
        let data = self.data(id).to_vec();
        self.push(shape, data, Op::Leaf, false)
    }

    // -- elementwise -------------------------------------------------------

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(TensorId, TensorId) -> Op,
    ) -> TensorId {
        let (data, shape) = kernels::broadcast_binary(
            self.data(a),
            self.shape(a),
            self.data(b),
            self.shape(b),
            f,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, data, op(a, b), rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, data, op, rg)
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn recip(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    /// Numerically stable log(1 + exp(x)).
    pub fn softplus(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() }, Op::Softplus(x))
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> TensorId {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    // -- linear algebra ------------------------------------------------------

    fn mm_dims(&self, a: TensorId, b: TensorId) -> (usize, usize, usize) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        debug_assert_eq!(sa.len(), 2, "matmul operands must be rank 2");
        debug_assert_eq!(sb.len(), 2, "matmul operands must be rank 2");
        (sa[0], sa[1], sb[1])
    }

    /// a[m,k] * b[k,n]
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k, n) = self.mm_dims(a, b);
        debug_assert_eq!(self.shape(b)[0], k, "inner dims differ");
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], data, Op::MatMul(a, b), rg)
    }

    /// a[m,k] * b[n,k]^T
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        debug_assert_eq!(sb[1], k, "inner dims differ");
        let data = kernels::matmul_nt(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], data, Op::MatMulNT(a, b), rg)
    }

    /// a[k,m]^T * b[k,n]
    pub fn matmul_tn(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = (sa[1], sa[0], sb[1]);
        debug_assert_eq!(sb[0], k, "inner dims differ");
        let data = kernels::matmul_tn(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], data, Op::MatMulTN(a, b), rg)
    }

    // -- convolution ---------------------------------------------------------

    /// Cross-correlation with zero padding. `x` is [c_in, s0, (s1, (s2))] and
    /// `w` is [c_out, c_in, k0, (k1, (k2))]; rank is `stride.len()` in 1..=3.
    /// Bias is applied separately (see `add_channel_bias`).
    pub fn conv(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: &[usize],
        pad: &[usize],
    ) -> Result<TensorId, TensorError> {
        let rank = stride.len();
        if !(1..=3).contains(&rank) || pad.len() != rank {
            return Err(TensorError::BadConvGeometry(format!(
                "rank {rank} with {} pad entries",
                pad.len()
            )));
        }
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != rank + 1 {
            return Err(TensorError::ShapeMismatch {
                context: "conv input rank",
                dim: 0,
                expected: rank + 1,
                got: xs.len(),
            });
        }
        if ws.len() != rank + 2 {
            return Err(TensorError::ShapeMismatch {
                context: "conv weight rank",
                dim: 0,
                expected: rank + 2,
                got: ws.len(),
            });
        }
        if ws[1] != xs[0] {
            return Err(TensorError::ShapeMismatch {
                context: "conv input channels",
                dim: 1,
                expected: xs[0],
                got: ws[1],
            });
        }
        let mut spec = ConvSpec {
            c_in: xs[0],
            c_out: ws[0],
            in_spatial: [1; 3],
            kernel: [1; 3],
            stride: [1; 3],
            pad: [0; 3],
        };
        for d in 0..rank {
            spec.in_spatial[d] = xs[1 + d];
            spec.kernel[d] = ws[2 + d];
            spec.stride[d] = stride[d];
            spec.pad[d] = pad[d];
            if stride[d] == 0 {
                return Err(TensorError::BadConvGeometry(format!("stride 0 in dim {d}")));
            }
            if xs[1 + d] + 2 * pad[d] < ws[2 + d] {
                return Err(TensorError::BadConvGeometry(format!(
                    "kernel {} exceeds padded extent {} in dim {d}",
                    ws[2 + d],
                    xs[1 + d] + 2 * pad[d]
                )));
            }
        }
        let data = kernels::conv_forward(self.data(x), self.data(w), &spec);
        let os = spec.out_spatial();
        let mut out_shape = vec![spec.c_out];
        out_shape.extend_from_slice(&os[..rank]);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out_shape, data, Op::Conv { x, w, spec }, rg))
    }

    fn conv_dx_node(&mut self, g: TensorId, w: TensorId, spec: ConvSpec) -> TensorId {
        let data = kernels::conv_dx(self.data(g), self.data(w), &spec);
        let rank = self.shape(g).len() - 1;
        let mut shape = vec![spec.c_in];
        shape.extend_from_slice(&spec.in_spatial[..rank]);
        let rg = self.rg(g) || self.rg(w);
        self.push(shape, data, Op::ConvDx { g, w, spec }, rg)
    }

    fn conv_dw_node(&mut self, x: TensorId, g: TensorId, spec: ConvSpec) -> TensorId {
        let data = kernels::conv_dw(self.data(x), self.data(g), &spec);
        let rank = self.shape(g).len() - 1;
        let mut shape = vec![spec.c_out, spec.c_in];
        shape.extend_from_slice(&spec.kernel[..rank]);
        let rg = self.rg(x) || self.rg(g);
        self.push(shape, data, Op::ConvDw { x, g, spec }, rg)
    }

    /// Add a per-channel bias [c] to a conv output [c, spatial...].
    pub fn add_channel_bias(&mut self, x: TensorId, bias: TensorId) -> TensorId {
        let rank = self.shape(x).len();
        let c = self.shape(x)[0];
        debug_assert_eq!(self.numel(bias), c, "bias length must match channels");
        let mut bshape = vec![1usize; rank];
        bshape[0] = c;
        let b = self.reshape(bias, &bshape);
        self.add(x, b)
    }

    // -- softmax, reductions, movement ----------------------------------------

    /// Row-wise softmax of a [rows, cols] matrix, max-subtracted.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let s = self.shape(x);
        debug_assert_eq!(s.len(), 2);
        let (r, c) = (s[0], s[1]);
        let data = kernels::softmax_rows(self.data(x), r, c);
        let rg = self.rg(x);
        self.push(vec![r, c], data, Op::SoftmaxRows(x), rg)
    }

    /// Sum over the marked axes, keeping them as size 1.
    pub fn sum_axes(&mut self, x: TensorId, reduce: &[bool]) -> TensorId {
        debug_assert_eq!(reduce.len(), self.shape(x).len());
        let (data, shape) = kernels::sum_axes(self.data(x), self.shape(x), reduce);
        let rg = self.rg(x);
        self.push(shape, data, Op::SumAxes(x, reduce.to_vec()), rg)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let reduce = vec![true; self.shape(x).len()];
        let s = self.sum_axes(x, &reduce);
        self.reshape(s, &[1])
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.numel(x) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast_to(&mut self, x: TensorId, target: &[usize]) -> TensorId {
        if self.shape(x) == target {
            return x;
        }
        let data = kernels::broadcast_to(self.data(x), self.shape(x), target);
        let rg = self.rg(x);
        self.push(target.to_vec(), data, Op::BroadcastTo(x), rg)
    }

    /// Reduce `x` down to `target` by summing broadcast axes (same rank).
    fn sum_to(&mut self, x: TensorId, target: &[usize]) -> TensorId {
        if self.shape(x) == target {
            return x;
        }
        let reduce: Vec<bool> = self
            .shape(x)
            .iter()
            .zip(target)
            .map(|(&have, &want)| have != want && want == 1)
            .collect();
        self.sum_axes(x, &reduce)
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        debug_assert_eq!(kernels::numel(shape), self.numel(x), "reshape numel mismatch");
        if self.shape(x) == shape {
            return x;
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        self.push(shape.to_vec(), data, Op::Reshape(x), rg)
    }

    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> TensorId {
        let (data, shape) = kernels::permute(self.data(x), self.shape(x), perm);
        let rg = self.rg(x);
        self.push(shape, data, Op::Permute(x, perm.to_vec()), rg)
    }

    pub fn transpose2(&mut self, x: TensorId) -> TensorId {
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> TensorId {
        assert!(!parts.is_empty());
        for &p in parts {
            for (d, (&a, &b)) in self.shape(parts[0]).iter().zip(self.shape(p)).enumerate() {
                assert!(
                    d == axis || a == b,
                    "concat: dim {d} differs ({a} vs {b}) off the concat axis"
                );
            }
        }
        let views: Vec<(&[f64], &[usize])> = parts
            .iter()
            .map(|&p| {
                let n = &self.nodes[p.idx()];
                (n.data.as_slice(), n.shape.as_slice())
            })
            .collect();
        let (data, shape) = kernels::concat_axis(&views, axis);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(shape, data, Op::Concat { axis, parts: parts.to_vec() }, rg)
    }

    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> TensorId {
        let (data, shape) = kernels::slice_axis(self.data(x), self.shape(x), axis, start, len);
        let rg = self.rg(x);
        self.push(shape, data, Op::Slice { x, axis, start }, rg)
    }

    pub fn pad_axis(&mut self, x: TensorId, axis: usize, before: usize, total: usize) -> TensorId {
        let (data, shape) = kernels::pad_axis(self.data(x), self.shape(x), axis, before, total);
        let rg = self.rg(x);
        self.push(shape, data, Op::PadAxis { x, axis, before }, rg)
    }

    /// Bilinear resample of [c, h, w] to [c, out_h, out_w], pixel-center
    /// (align-corners-false) convention.
    pub fn bilinear_resize(
        &mut self,
        x: TensorId,
        out_h: usize,
        out_w: usize,
    ) -> Result<TensorId, TensorError> {
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::ZeroResizeTarget);
        }
        let s = self.shape(x);
        debug_assert_eq!(s.len(), 3, "bilinear_resize expects [c, h, w]");
        let (c, h, w) = (s[0], s[1], s[2]);
        let data = kernels::bilinear_resize(self.data(x), c, h, w, out_h, out_w);
        let rg = self.rg(x);
        Ok(self.push(vec![c, out_h, out_w], data, Op::BilinearResize(x), rg))
    }

    fn bilinear_adjoint_node(&mut self, g: TensorId, in_h: usize, in_w: usize) -> TensorId {
        let s = self.shape(g);
        let (c, oh, ow) = (s[0], s[1], s[2]);
        let data = kernels::bilinear_resize_adjoint(self.data(g), c, in_h, in_w, oh, ow);
        let rg = self.rg(g);
        self.push(vec![c, in_h, in_w], data, Op::BilinearAdjoint(g), rg)
    }

    // -- composites -----------------------------------------------------------

    /// Per-frame cosine similarity between two [t, d] feature sequences:
    /// dot / max(|a||b|, eps). The clamp scores zero-vector frames as 0 and
    /// keeps the similarity exactly invariant to rescaling both inputs.
    pub fn cosine_similarity_frames(
        &mut self,
        a: TensorId,
        b: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                context: "cosine_similarity_frames",
                dim: if sa.first() != sb.first() { 0 } else { 1 },
                expected: sa[if sa.first() != sb.first() { 0 } else { 1 }],
                got: sb[if sa.first() != sb.first() { 0 } else { 1 }],
            });
        }
        let prod = self.mul(a, b);
        let dots = self.sum_axes(prod, &[false, true]); // [t,1]
        let aa = self.mul(a, a);
        let bb = self.mul(b, b);
        let na2 = self.sum_axes(aa, &[false, true]);
        let nb2 = self.sum_axes(bb, &[false, true]);
        let na = self.norm_from_sq(na2);
        let nb = self.norm_from_sq(nb2);
        let denom = self.mul(na, nb);
        let denom = self.max_scalar(denom, eps);
        let inv = self.recip(denom);
        let cos = self.mul(dots, inv);
        let t = sa[0];
        Ok(self.reshape(cos, &[t]))
    }

    /// sqrt with a finite derivative at 0; used for norms.
    pub(crate) fn norm_from_sq(&mut self, x: TensorId) -> TensorId {
        let shifted = self.add_scalar(x, 1e-30);
        self.sqrt(shifted)
    }

    /// x * sigmoid(x): smooth everywhere, so full-network finite-difference
    /// checks stay clean.
    pub fn silu(&mut self, x: TensorId) -> TensorId {
        let s = self.sigmoid(x);
        self.mul(x, s)
    }

    /// Elementwise max(x, c) as (x + c + |x - c|) / 2.
    pub fn max_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let shifted = self.add_scalar(x, -c);
        let mag = self.abs(shifted);
        let sum = self.add(shifted, mag); // 2*max(x - c, 0)
        let half = self.scale(sum, 0.5);
        self.add_scalar(half, c)
    }

    // -- gradients --------------------------------------------------------------

    /// Gradient of a scalar `output` with respect to each id in `wrt`.
    ///
    /// The returned ids are ordinary tape values (differentiable again).
    /// Ids in `wrt` that the output does not depend on get zero tensors.
    pub fn grad(&mut self, output: TensorId, wrt: &[TensorId]) -> Vec<TensorId> {
        assert_eq!(self.numel(output), 1, "grad expects a scalar output");
        let n = self.nodes.len();
        // ancestors of output
        let mut needed = vec![false; n];
        needed[output.idx()] = true;
        for id in (0..=output.idx()).rev() {
            if !needed[id] {
                continue;
            }
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            for inp in op_inputs(&node.op) {
                needed[inp.idx()] = true;
            }
        }
        let mut gmap: Vec<Option<TensorId>> = vec![None; n];
        let seed = self.constant_from(vec![1], vec![1.0]);
        gmap[output.idx()] = Some(seed);
        for id in (0..=output.idx()).rev() {
            if !needed[id] || !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = gmap[id] else { continue };
            let op = self.nodes[id].op.clone();
            self.backward_op(TensorId(id as u32), gout, &op, &mut gmap);
        }
        wrt.iter()
            .map(|w| match gmap.get(w.idx()).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(*w).to_vec();
                    self.zeros(&shape)
                }
            })
            .collect()
    }

    fn accumulate(&mut self, gmap: &mut [Option<TensorId>], to: TensorId, contrib: TensorId) {
        if !self.rg(to) {
            return;
        }
        gmap[to.idx()] = Some(match gmap[to.idx()] {
            Some(existing) => self.add(existing, contrib),
            None => contrib,
        });
    }

    fn backward_op(
        &mut self,
        out: TensorId,
        g: TensorId,
        op: &Op,
        gmap: &mut [Option<TensorId>],
    ) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let ga = self.sum_to(g, &sa);
                self.accumulate(gmap, a, ga);
                let gb = self.sum_to(g, &sb);
                self.accumulate(gmap, b, gb);
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let ga = self.sum_to(g, &sa);
                self.accumulate(gmap, a, ga);
                let ng = self.neg(g);
                let gb = self.sum_to(ng, &sb);
                self.accumulate(gmap, b, gb);
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                if self.rg(a) {
                    let p = self.mul(g, b);
                    let ga = self.sum_to(p, &sa);
                    self.accumulate(gmap, a, ga);
                }
                if self.rg(b) {
                    let p = self.mul(g, a);
                    let gb = self.sum_to(p, &sb);
                    self.accumulate(gmap, b, gb);
                }
            }
            Op::Neg(x) => {
                let gx = self.neg(g);
                self.accumulate(gmap, x, gx);
            }
            Op::Recip(x) => {
                // d(1/x) = -y^2
                let y2 = self.mul(out, out);
                let m = self.mul(g, y2);
                let gx = self.neg(m);
                self.accumulate(gmap, x, gx);
            }
            Op::Scale(x, c) => {
                let gx = self.scale(g, c);
                self.accumulate(gmap, x, gx);
            }
            Op::AddScalar(x) => {
                self.accumulate(gmap, x, g);
            }
            Op::Exp(x) => {
                let gx = self.mul(g, out);
                self.accumulate(gmap, x, gx);
            }
            Op::Ln(x) => {
                let r = self.recip(x);
                let gx = self.mul(g, r);
                self.accumulate(gmap, x, gx);
            }
            Op::Sqrt(x) => {
                let r = self.recip(out);
                let h = self.scale(r, 0.5);
                let gx = self.mul(g, h);
                self.accumulate(gmap, x, gx);
            }
            Op::Tanh(x) => {
                let y2 = self.mul(out, out);
                let ny2 = self.neg(y2);
                let one_m = self.add_scalar(ny2, 1.0);
                let gx = self.mul(g, one_m);
                self.accumulate(gmap, x, gx);
            }
            Op::Sigmoid(x) => {
                let ny = self.neg(out);
                let one_m = self.add_scalar(ny, 1.0);
                let yy = self.mul(out, one_m);
                let gx = self.mul(g, yy);
                self.accumulate(gmap, x, gx);
            }
            Op::Softplus(x) => {
                let s = self.sigmoid(x);
                let gx = self.mul(g, s);
                self.accumulate(gmap, x, gx);
            }
            Op::Abs(x) => {
                let sign: Vec<f64> = self.data(x).iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect();
                let shape = self.shape(x).to_vec();
                let s = self.constant_from(shape, sign);
                let gx = self.mul(g, s);
                self.accumulate(gmap, x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let mask: Vec<f64> = self.data(x).iter().map(|&v| if v > 0.0 { 1.0 } else { slope }).collect();
                let shape = self.shape(x).to_vec();
                let m = self.constant_from(shape, mask);
                let gx = self.mul(g, m);
                self.accumulate(gmap, x, gx);
            }
            Op::MatMul(a, b) => {
                if self.rg(a) {
                    let ga = self.matmul_nt(g, b);
                    self.accumulate(gmap, a, ga);
                }
                if self.rg(b) {
                    let gb = self.matmul_tn(a, g);
                    self.accumulate(gmap, b, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                if self.rg(a) {
                    let ga = self.matmul(g, b);
                    self.accumulate(gmap, a, ga);
                }
                if self.rg(b) {
                    let gb = self.matmul_tn(g, a);
                    self.accumulate(gmap, b, gb);
                }
            }
            Op::MatMulTN(a, b) => {
                if self.rg(a) {
                    let ga = self.matmul_nt(b, g);
                    self.accumulate(gmap, a, ga);
                }
                if self.rg(b) {
                    let gb = self.matmul(a, g);
                    self.accumulate(gmap, b, gb);
                }
            }
            Op::Conv { x, w, spec } => {
                if self.rg(x) {
                    let gx = self.conv_dx_node(g, w, spec);
                    self.accumulate(gmap, x, gx);
                }
                if self.rg(w) {
                    let gw = self.conv_dw_node(x, g, spec);
                    self.accumulate(gmap, w, gw);
                }
            }
            Op::ConvDx { g: gin, w, spec } => {
                // out = conv_dx(gin, w); <out, u> = <gin, conv(u, w)>
                if self.rg(gin) {
                    let d = kernels::conv_forward(self.data(g), self.data(w), &spec);
                    let shape = self.shape(gin).to_vec();
                    let rg = self.rg(g) || self.rg(w);
                    let node = self.push(shape, d, Op::Conv { x: g, w, spec }, rg);
                    self.accumulate(gmap, gin, node);
                }
                if self.rg(w) {
                    let gw = self.conv_dw_node(g, gin, spec);
                    self.accumulate(gmap, w, gw);
                }
            }
            Op::ConvDw { x, g: gin, spec } => {
                // out = conv_dw(x, gin); <out, v> = <gin, conv(x, v)>
                if self.rg(x) {
                    let gx = self.conv_dx_node(gin, g, spec);
                    self.accumulate(gmap, x, gx);
                }
                if self.rg(gin) {
                    let d = kernels::conv_forward(self.data(x), self.data(g), &spec);
                    let shape = self.shape(gin).to_vec();
                    let rg = self.rg(x) || self.rg(g);
                    let node = self.push(shape, d, Op::Conv { x, w: g, spec }, rg);
                    self.accumulate(gmap, gin, node);
                }
            }
            Op::SoftmaxRows(x) => {
                // dx = y * (g - rowsum(g*y))
                let gy = self.mul(g, out);
                let rs = self.sum_axes(gy, &[false, true]);
                let centered = self.sub(g, rs);
                let gx = self.mul(out, centered);
                self.accumulate(gmap, x, gx);
            }
            Op::SumAxes(x, ref _reduce) => {
                let shape = self.shape(x).to_vec();
                let gx = self.broadcast_to(g, &shape);
                self.accumulate(gmap, x, gx);
            }
            Op::BroadcastTo(x) => {
                let shape = self.shape(x).to_vec();
                let gx = self.sum_to(g, &shape);
                self.accumulate(gmap, x, gx);
            }
            Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                let gx = self.reshape(g, &shape);
                self.accumulate(gmap, x, gx);
            }
            Op::Permute(x, ref perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gx = self.permute(g, &inv);
                self.accumulate(gmap, x, gx);
            }
            Op::Concat { axis, ref parts } => {
                let mut at = 0usize;
                for &p in parts.clone().iter() {
                    let len = self.shape(p)[axis];
                    let gp = self.slice(g, axis, at, len);
                    self.accumulate(gmap, p, gp);
                    at += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let total = self.shape(x)[axis];
                let gx = self.pad_axis(g, axis, start, total);
                self.accumulate(gmap, x, gx);
            }
            Op::PadAxis { x, axis, before } => {
                let len = self.shape(x)[axis];
                let gx = self.slice(g, axis, before, len);
                self.accumulate(gmap, x, gx);
            }
            Op::BilinearResize(x) => {
                let s = self.shape(x).to_vec();
                let gx = self.bilinear_adjoint_node(g, s[1], s[2]);
                self.accumulate(gmap, x, gx);
            }
            Op::BilinearAdjoint(gin) => {
                let s = self.shape(gin).to_vec();
                let gx = self
                    .bilinear_resize(g, s[1], s[2])
                    .expect("adjoint backward resize");
                self.accumulate(gmap, gin, gx);
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<TensorId> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
        Op::Neg(x)
        | Op::Recip(x)
        | Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Exp(x)
        | Op::Ln(x)
        | Op::Sqrt(x)
        | Op::Tanh(x)
        | Op::Sigmoid(x)
        | Op::Softplus(x)
        | Op::Abs(x)
        | Op::LeakyRelu(x, _)
        | Op::SoftmaxRows(x)
        | Op::SumAxes(x, _)
        | Op::BroadcastTo(x)
        | Op::Reshape(x)
        | Op::Permute(x, _)
        | Op::BilinearResize(x)
        | Op::BilinearAdjoint(x) => vec![x],
        Op::MatMul(a, b) | Op::MatMulNT(a, b) | Op::MatMulTN(a, b) => vec![a, b],
        Op::Conv { x, w, .. } => vec![x, w],
        Op::ConvDx { g, w, .. } => vec![g, w],
        Op::ConvDw { x, g, .. } => vec![x, g],
        Op::Concat { ref parts, .. } => parts.clone(),
        Op::Slice { x, .. } | Op::PadAxis { x, .. } => vec![x],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn grad_of_linear_combination() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]), true);
        let y = tape.scale(x, 2.0);
        let s = tape.sum_all(y);
        let g = tape.grad(s, &[x]);
        assert_eq!(tape.data(g[0]), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn grad_through_mul_broadcast() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let b = tape.leaf(&t(&[2, 1], &[10.0, 100.0]), true);
        let p = tape.mul(a, b);
        let s = tape.sum_all(p);
        let g = tape.grad(s, &[a, b]);
        assert_eq!(tape.data(g[0]), &[10.0, 10.0, 100.0, 100.0]);
        assert_eq!(tape.data(g[1]), &[3.0, 7.0]);
    }

    #[test]
    fn grad_matmul() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let b = tape.leaf(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]), true);
        let c = tape.matmul(a, b);
        let s = tape.sum_all(c);
        let g = tape.grad(s, &[a, b]);
        // d/dA sum(AB) = ones * B^T
        assert_eq!(tape.data(g[0]), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(tape.data(g[1]), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 5.0, 5.0]), false);
        let y = tape.softmax_rows(x);
        let d = tape.data(y);
        let r0: f64 = d[0..3].iter().sum();
        let r1: f64 = d[3..6].iter().sum();
        assert!((r0 - 1.0).abs() < 1e-12);
        assert!((r1 - 1.0).abs() < 1e-12);
        // constant row -> uniform
        assert!(d[3..6].iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn detached_values_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]), true);
        let d = tape.detach(x);
        let y = tape.mul(d, d);
        let s = tape.sum_all(y);
        let g = tape.grad(s, &[x]);
        assert_eq!(tape.data(g[0]), &[0.0, 0.0]);
    }

    #[test]
    fn second_order_gradient_of_cube() {
        // f(x) = sum(x^3); df/dx = 3x^2; d/dx sum(df/dx) = 6x
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.5, -2.0]), true);
        let x2 = tape.mul(x, x);
        let x3 = tape.mul(x2, x);
        let f = tape.sum_all(x3);
        let g1 = tape.grad(f, &[x]);
        let gsum = tape.sum_all(g1[0]);
        let g2 = tape.grad(gsum, &[x]);
        let got = tape.data(g2[0]);
        assert!((got[0] - 9.0).abs() < 1e-12);
        assert!((got[1] + 12.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_similarity_identity_orthogonal_negation() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[3.0, 4.0, 1.0, 0.0]), false);
        let same = tape.cosine_similarity_frames(a, a, 1e-8).unwrap();
        for &v in tape.data(same) {
            assert!((v - 1.0).abs() < 1e-6);
        }
        let b = tape.leaf(&t(&[2, 2], &[-4.0, 3.0, 0.0, 5.0]), false);
        let orth = tape.cosine_similarity_frames(a, b, 1e-8).unwrap();
        for &v in tape.data(orth) {
            assert!(v.abs() < 1e-6);
        }
        let n = tape.neg(a);
        let anti = tape.cosine_similarity_frames(a, n, 1e-8).unwrap();
        for &v in tape.data(anti) {
            assert!((v + 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_shape_errors_name_the_dim() {
        let mut tape = Tape::new();
        let x = tape.zeros(&[3, 5, 5]);
        let w = tape.zeros(&[2, 4, 3, 3]); // wrong c_in
        let err = tape.conv(x, w, &[1, 1], &[0, 0]).unwrap_err();
        match err {
            TensorError::ShapeMismatch { dim, expected, got, .. } => {
                assert_eq!(dim, 1);
                assert_eq!(expected, 3);
                assert_eq!(got, 4);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
