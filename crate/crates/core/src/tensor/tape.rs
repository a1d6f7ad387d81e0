//! Define-by-run recording of tensor operations.
//!
//! Every op appends a node holding its output value. Nodes are only ever
//! appended, so inputs always precede outputs and replaying backward rules in
//! reverse insertion order yields exact reverse-mode gradients.

use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry, Padding};
use super::pool::maxpool2d_forward;
use super::{ParamId, ParamStore, Result, Shape, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointwiseKind {
    Relu,
    Sigmoid,
}

/// Counters gathered while recording.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeStats {
    /// Kernel multiply-accumulates over all conv2d calls (bias excluded).
    pub conv_macs: u64,
    /// Predictions clamped into `[eps, 1 - eps]` by binary cross-entropy.
    pub bce_clamped: u64,
    /// ReLU inputs that were exactly zero (points of non-differentiability).
    pub relu_kinks: u64,
    /// Hash of every piecewise decision taken: ReLU masks, max-pool argmax
    /// positions and BCE clamps. Two passes with equal signatures ran through
    /// the same smooth piece of the function.
    pub branch_signature: u64,
}

// FNV-1a over 64-bit words
fn fold(sig: u64, word: u64) -> u64 {
    (sig ^ word).wrapping_mul(0x0100_0000_01b3)
}

fn fold_mask(mut sig: u64, bits: impl Iterator<Item = bool>) -> u64 {
    let (mut word, mut n) = (0u64, 0);
    for b in bits {
        word = (word << 1) | u64::from(b);
        n += 1;
        if n == 64 {
            sig = fold(sig, word);
            (word, n) = (0, 0);
        }
    }
    fold(sig, word ^ ((n as u64) << 58))
}

enum Op {
    Constant,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Narrow {
        input: Var,
        start: usize,
    },
    Mix {
        a: Var,
        b: Var,
        gate: f64,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumSquares(Var),
    Bce {
        pred: Var,
        target: Tensor,
        eps: f64,
    },
    SelectBatch {
        input: Var,
        indices: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recording of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    stats: TapeStats,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            stats: TapeStats::default(),
        }
    }

    /// A tape on which parameters are recorded as constants.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> TapeStats {
        self.stats
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        if self.grad_enabled {
            self.push(value, true, Op::Param(id))
        } else {
            self.push(value, false, Op::Constant)
        }
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
        groups: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeometry::resolve(
            self.shape(input),
            self.shape(weight),
            dilation,
            groups,
            padding,
        )?;
        if let Some(b) = bias {
            self.value(b)
                .ensure_shape("conv2d bias", Shape::new(1, geom.c_out, 1, 1))?;
        }
        let out = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        );
        self.stats.conv_macs += geom.macs();
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = maxpool2d_forward(self.value(input), kernel, stride)?;
        self.stats.branch_signature = argmax.iter().fold(self.stats.branch_signature, |s, &i| fold(s, i as u64));
        let rg = self.rg(input);
        Ok(self.push(out, rg, Op::MaxPool { input, argmax }))
    }

    pub fn pointwise(&mut self, input: Var, kind: PointwiseKind) -> Var {
        let rg = self.rg(input);
        match kind {
            PointwiseKind::Relu => {
                let x = self.value(input);
                let kinks = x.data().iter().filter(|&&v| v == 0.0).count() as u64;
                let out = x.map(|v| v.max(0.0));
                let sig = fold_mask(self.stats.branch_signature, x.data().iter().map(|&v| v > 0.0));
                self.stats.relu_kinks += kinks;
                self.stats.branch_signature = sig;
                self.push(out, rg, Op::Relu(input))
            }
            PointwiseKind::Sigmoid => {
                let out = self.value(input).map(sigmoid);
                self.push(out, rg, Op::Sigmoid(input))
            }
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.pointwise(input, PointwiseKind::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.pointwise(input, PointwiseKind::Sigmoid)
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "channel_concat",
            reason: "no parts".into(),
        })?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let base = self.shape(first);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.with_c(base.c) != base {
                return Err(TensorError::ShapeMismatch {
                    op: "channel_concat",
                    expected: base.with_c(s.c),
                    got: s,
                });
            }
            channels += s.c;
        }
        let shape = base.with_c(channels);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..base.n {
            for &p in parts {
                let t = self.value(p);
                let item = t.shape().item();
                data.extend_from_slice(&t.data()[n * item..][..item]);
            }
        }
        let out = Tensor::from_vec(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, rg, Op::Concat(parts.to_vec())))
    }

    /// Channels `start..start + len` of `input`.
    pub fn narrow(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input);
        if len == 0 || start + len > s.c {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                reason: format!("channels {start}..{} out of range for {s}", start + len),
            });
        }
        if start == 0 && len == s.c {
            return Ok(input);
        }
        let shape = s.with_c(len);
        let x = self.value(input);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..s.n {
            data.extend_from_slice(&x.data()[(n * s.c + start) * s.plane()..][..len * s.plane()]);
        }
        let out = Tensor::from_vec(shape, data)?;
        let rg = self.rg(input);
        Ok(self.push(out, rg, Op::Narrow { input, start }))
    }

    /// Split along the channel axis into consecutive chunks of `sizes`.
    pub fn split(&mut self, input: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let c = self.shape(input).c;
        if sizes.iter().sum::<usize>() != c || sizes.contains(&0) {
            return Err(TensorError::SplitSizes {
                sizes: sizes.to_vec(),
                channels: c,
            });
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(input, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// `gate * a + (1 - gate) * b`.
    pub fn affine_mix(&mut self, a: Var, b: Var, gate: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&gate) {
            return Err(TensorError::InvalidArgument {
                op: "affine_mix",
                reason: format!("gate {gate} outside [0, 1]"),
            });
        }
        let out = self.zip_values("affine_mix", a, b, |x, y| gate * x + (1.0 - gate) * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Mix { a, b, gate }))
    }

    fn zip_values(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        y.ensure_shape(op, x.shape())?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let rg = self.rg(input);
        self.push(out, rg, Op::Scale(input, factor))
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(input);
        self.push(out, rg, Op::Sum(input))
    }

    /// Sum of squared elements as a scalar node.
    pub fn sum_squares(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().map(|v| v * v).sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(total), rg, Op::SumSquares(input))
    }

    /// Summed binary cross-entropy `-Σ [t ln p + (1 - t) ln(1 - p)]` with `p`
    /// clamped into `[eps, 1 - eps]`. Clamped elements pass no gradient.
    pub fn bce_sum(&mut self, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let p = self.value(pred);
        target.ensure_shape("binary_cross_entropy", p.shape())?;
        let mut total = 0.0;
        let mut clamped = 0;
        for (&q, &t) in p.data().iter().zip(target.data()) {
            let qc = q.clamp(eps, 1.0 - eps);
            if qc != q {
                clamped += 1;
            }
            total -= t * qc.ln() + (1.0 - t) * (1.0 - qc).ln();
        }
        let sig = fold_mask(
            self.stats.branch_signature,
            p.data().iter().map(|&q| q < eps || q > 1.0 - eps),
        );
        self.stats.bce_clamped += clamped;
        self.stats.branch_signature = sig;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::Bce {
                pred,
                target: target.clone(),
                eps,
            },
        ))
    }

    /// Gather batch items `indices` (in order) into a new tensor.
    pub fn select_batch(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(input);
        if indices.is_empty() || indices.iter().any(|&i| i >= s.n) {
            return Err(TensorError::InvalidArgument {
                op: "select_batch",
                reason: format!("indices {indices:?} invalid for batch of {}", s.n),
            });
        }
        let x = self.value(input);
        let item = s.item();
        let mut data = Vec::with_capacity(indices.len() * item);
        for &i in indices {
            data.extend_from_slice(&x.data()[i * item..][..item]);
        }
        let out = Tensor::from_vec(s.with_n(indices.len()), data)?;
        let rg = self.rg(input);
        Ok(self.push(
            out,
            rg,
            Op::SelectBatch {
                input,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating into `store`.
    ///
    /// Gradients add onto whatever the store already holds.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(TensorError::NonScalarLoss(shape));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, g, &mut grads, store);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let g = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(g);
    }

    fn propagate(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) {
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => store.accumulate_grad(*id, &g),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let want = (
                    self.rg(*input),
                    self.rg(*weight),
                    bias.is_some_and(|b| self.rg(b)),
                );
                let cg = conv2d_backward(self.value(*input), self.value(*weight), &g, geom, want);
                if let Some(gi) = cg.input {
                    self.accumulate(grads, *input, gi);
                }
                if let Some(gw) = cg.weight {
                    self.accumulate(grads, *weight, gw);
                }
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MaxPool { input, argmax } => {
                self.accumulate_with(grads, *input, |gi| {
                    for (&src, &d) in argmax.iter().zip(&g) {
                        gi[src] += d;
                    }
                });
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let contrib = g
                    .iter()
                    .zip(x)
                    .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                self.accumulate(grads, *input, contrib);
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                let contrib = g.iter().zip(y).map(|(&d, &s)| d * s * (1.0 - s)).collect();
                self.accumulate(grads, *input, contrib);
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let item = ps.item();
                    if self.rg(p) {
                        let mut contrib = Vec::with_capacity(ps.numel());
                        for n in 0..s.n {
                            contrib.extend_from_slice(&g[n * s.item() + offset..][..item]);
                        }
                        self.accumulate(grads, p, contrib);
                    }
                    offset += item;
                }
            }
            Op::Narrow { input, start } => {
                let s = self.shape(*input);
                let len = node.value.shape().c;
                let plane = s.plane();
                self.accumulate_with(grads, *input, |gi| {
                    for n in 0..s.n {
                        let dst = &mut gi[(n * s.c + start) * plane..][..len * plane];
                        let src = &g[n * len * plane..][..len * plane];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                });
            }
            Op::Mix { a, b, gate } => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().map(|d| d * gate).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.iter().map(|d| d * (1.0 - gate)).collect());
                }
            }
            Op::Add(a, b) => {
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.iter().map(|d| -d).collect());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().zip(y).map(|(d, v)| d * v).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.iter().zip(x).map(|(d, v)| d * v).collect());
                }
            }
            Op::Scale(input, k) => {
                self.accumulate(grads, *input, g.iter().map(|d| d * k).collect());
            }
            Op::Sum(input) => {
                let n = self.value(*input).numel();
                self.accumulate(grads, *input, vec![g[0]; n]);
            }
            Op::SumSquares(input) => {
                let x = self.value(*input).data();
                self.accumulate(grads, *input, x.iter().map(|v| 2.0 * v * g[0]).collect());
            }
            Op::Bce { pred, target, eps } => {
                let p = self.value(*pred).data();
                let contrib = p
                    .iter()
                    .zip(target.data())
                    .map(|(&q, &t)| {
                        if q < *eps || q > 1.0 - eps {
                            0.0
                        } else {
                            g[0] * ((1.0 - t) / (1.0 - q) - t / q)
                        }
                    })
                    .collect();
                self.accumulate(grads, *pred, contrib);
            }
            Op::SelectBatch { input, indices } => {
                let item = node.value.shape().item();
                self.accumulate_with(grads, *input, |gi| {
                    for (k, &i) in indices.iter().enumerate() {
                        for (a, b) in gi[i * item..][..item].iter_mut().zip(&g[k * item..][..item]) {
                            *a += b;
                        }
                    }
                });
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(store: &mut ParamStore, v: f64) -> ParamId {
        store.add("p", Tensor::scalar(v))
    }

    #[test]
    fn pointwise_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-3.0, 0.0, 3.0]).unwrap());
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[1], 0.5);
        assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(tape.stats().relu_kinks, 1);
    }

    #[test]
    fn affine_mix_endpoints() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::scalar(4.0));
        let m0 = tape.affine_mix(a, b, 0.0).unwrap();
        let m1 = tape.affine_mix(a, b, 1.0).unwrap();
        let mh = tape.affine_mix(a, b, 0.5).unwrap();
        assert_eq!(tape.value(m0).data(), &[4.0]);
        assert_eq!(tape.value(m1).data(), &[2.0]);
        assert_eq!(tape.value(mh).data(), &[3.0]);
        assert!(tape.affine_mix(a, b, 1.5).is_err());
    }

    #[test]
    fn affine_mix_gradients_scale_by_gate() {
        let mut store = ParamStore::new();
        let pa = scalar_param(&mut store, 1.0);
        let pb = scalar_param(&mut store, 1.0);
        let mut tape = Tape::new();
        let (a, b) = (tape.param(&store, pa), tape.param(&store, pb));
        let m = tape.affine_mix(a, b, 0.3).unwrap();
        tape.backward(m, &mut store).unwrap();
        assert_eq!(store.grad(pa).data(), &[0.3]);
        assert!((store.grad(pb).data()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn mix_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 2, 3)));
        assert!(matches!(
            tape.affine_mix(a, b, 0.5),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn linear_loss_grad_is_input() {
        let mut store = ParamStore::new();
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let w = store.add("w", Tensor::full(x.shape(), 0.7));
        let unused = store.add("unused", Tensor::full(x.shape(), 1.0));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let _ = tape.param(&store, unused);
        let xv = tape.constant(x.clone());
        let prod = tape.mul(wv, xv).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), x.data());
        assert!(store.grad(unused).data().iter().all(|&g| g == 0.0));

        // a second sweep without reset doubles the gradient
        tape.backward(loss, &mut store).unwrap();
        let doubled: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(store.grad(w).data(), &doubled[..]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let mut tape = Tape::new();
        let v = tape.param(&store, w);
        assert!(matches!(
            tape.backward(v, &mut store),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn split_concat_round_trip_is_bitwise() {
        let mut rng = rand::rng();
        let x = Tensor::randn(Shape::new(2, 9, 3, 4), 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let parts = tape.split(v, &[3, 3, 3]).unwrap();
        let back = tape.concat(&parts).unwrap();
        assert!(tape.value(back).bit_eq(&x));
        let single = tape.concat(&[v]).unwrap();
        assert!(tape.value(single).bit_eq(&x));
        assert!(matches!(
            tape.split(v, &[3, 3]),
            Err(TensorError::SplitSizes { .. })
        ));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 5)));
        assert!(tape.concat(&[a, b]).is_err());
    }

    #[test]
    fn bce_hand_value_and_clamp() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::scalar(0.25));
        let l = tape.bce_sum(p, &Tensor::scalar(1.0), 1e-7).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);

        let q = tape.constant(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 0.0]).unwrap());
        let target = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 0.0]).unwrap();
        let l = tape.bce_sum(q, &target, 1e-7).unwrap();
        let expected = 2.0 * (1.0 / (1.0 - 1e-7f64)).ln();
        assert!((tape.value(l).data()[0] - expected).abs() < 1e-15);
        assert_eq!(tape.stats().bce_clamped, 2);
    }

    #[test]
    fn inference_tape_records_params_as_constants() {
        let mut store = ParamStore::new();
        let w = scalar_param(&mut store, 2.0);
        let mut tape = Tape::inference();
        let v = tape.param(&store, w);
        assert!(!tape.requires_grad(v));
    }
}
