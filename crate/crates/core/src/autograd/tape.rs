use super::conv::{self, ConvGeom};
use super::tensor::{ParamId, ParamStore, Precision, Tensor};
use super::{AutogradError, Result};

/// Clamp applied to predictions before taking logarithms in [`Tape::bce`].
pub const BCE_EPS: f64 = 1e-7;
/// Variance floor of batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum of batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics; optionally fold them into the running stats.
    Train { update_running: bool },
    /// Normalize with the running statistics.
    Eval,
}

/// Running mean and (unbiased) variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState { running_mean: vec![0.0; channels], running_var: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    Act { x: Var, kind: Activation },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvT2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool, plane: usize },
    Bce { pred: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    tracked: bool,
    op: Op,
}

/// Records a forward computation so that it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Tape::backward`] is a single reverse sweep.
#[derive(Debug)]
pub struct Tape {
    precision: Precision,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape { precision, nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, mut data: Vec<f64>, tracked: bool, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.precision.round_slice(&mut data);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutogradError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { shape, data, tracked, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.node(v).data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    /// Untracked input.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push("constant", t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf { param: None })
    }

    /// Leaf that takes part in differentiation according to `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push("leaf", t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf { param: None })
    }

    /// Parameter leaf. When `track` is false the parameter enters as a
    /// constant, which is how a frozen network is evaluated.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, track: bool) -> Result<Var> {
        let t = store.get(id);
        let param = if track { Some(id) } else { None };
        self.push("param", t.shape().to_vec(), t.data().to_vec(), track, Op::Leaf { param })
    }

    /// Copies a value into a fresh untracked leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let n = self.node(v);
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.push("detach", shape, data, false, Op::Leaf { param: None })
    }

    fn same_numel(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if self.value(a).len() != self.value(b).len() {
            return Err(AutogradError::ShapeMismatch { op, detail: format!("{sa:?} vs {sb:?}") });
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutogradError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push("add", self.shape(a).to_vec(), data, tracked, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push("sub", self.shape(a).to_vec(), data, tracked, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push("mul", self.shape(a).to_vec(), data, tracked, Op::Mul(a, b))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let data = self.value(x).iter().map(|v| scale * v + shift).collect();
        let tracked = self.tracked(x);
        self.push("affine", self.shape(x).to_vec(), data, tracked, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).iter().map(|v| v.abs()).collect();
        let tracked = self.tracked(x);
        self.push("abs", self.shape(x).to_vec(), data, tracked, Op::Abs(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let tracked = self.tracked(x);
        self.push("sum", vec![], vec![s], tracked, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vals = self.value(x);
        if vals.is_empty() {
            return Err(AutogradError::EmptyOutput { op: "mean" });
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let tracked = self.tracked(x);
        self.push("mean", vec![], vec![m], tracked, Op::Mean(x))
    }

    /// Inner product of two tensors with the same number of elements.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_numel("dot", a, b)?;
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push("dot", vec![], vec![s], tracked, Op::Dot(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(AutogradError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape(x)),
            });
        }
        let data = self.value(x).to_vec();
        let tracked = self.tracked(x);
        self.push("reshape", shape, data, tracked, Op::Reshape(x))
    }

    /// Flattens everything after the leading (batch) dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let rows = shape.first().copied().unwrap_or(1);
        let cols = if rows == 0 { 0 } else { self.value(x).len() / rows };
        self.reshape(x, vec![rows, cols])
    }

    /// Rows `start..end` along the leading dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or(AutogradError::ShapeMismatch {
            op: "slice_rows",
            detail: "scalar input".into(),
        })?;
        if start > end || end > rows {
            return Err(AutogradError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {start}..{end} of {rows}"),
            });
        }
        let row_len = if rows == 0 { 0 } else { self.value(x).len() / rows };
        let data = self.value(x)[start * row_len..end * row_len].to_vec();
        let mut out_shape = shape;
        out_shape[0] = end - start;
        let tracked = self.tracked(x);
        self.push("slice_rows", out_shape, data, tracked, Op::SliceRows { x, start })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let f: fn(f64, f64) -> f64 = match kind {
            Activation::Relu => |v, _| v.max(0.0),
            Activation::LeakyRelu(_) => |v, a| if v > 0.0 { v } else { a * v },
            Activation::Tanh => |v, _| v.tanh(),
            Activation::Sigmoid => |v, _| sigmoid(v),
        };
        let alpha = if let Activation::LeakyRelu(a) = kind { a } else { 0.0 };
        let data = self.value(x).iter().map(|&v| f(v, alpha)).collect();
        let tracked = self.tracked(x);
        self.push("activation", self.shape(x).to_vec(), data, tracked, Op::Act { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(alpha))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Fully connected layer: `x[N,in] · w[out,in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(AutogradError::ShapeMismatch { op: "linear", detail: format!("x {xs:?}, w {ws:?}") });
        }
        let (rows, inp, out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(AutogradError::ShapeMismatch {
                    op: "linear",
                    detail: format!("bias {:?} for {out} outputs", self.shape(b)),
                });
            }
        }
        let mut y = vec![0.0; rows * out];
        conv::gemm(rows, inp, out, self.value(x), false, self.value(w), true, &mut y, 0.0);
        if let Some(b) = b {
            let bias = self.value(b);
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(bias).for_each(|(v, bb)| *v += bb);
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        self.push("linear", vec![rows, out], y, tracked, Op::Linear { x, w, b, rows, inp, out })
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        match b {
            Some(b) if self.shape(b) != [channels] => Err(AutogradError::ShapeMismatch {
                op,
                detail: format!("bias {:?} for {channels} channels", self.shape(b)),
            }),
            _ => Ok(()),
        }
    }

    /// 2-D cross-correlation of `x[N,Cin,H,W]` with `w[Cout,Cin,K,K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let geom = conv2d_geom(&xs, &ws, stride, pad)?;
        self.check_bias("conv2d", b, geom.cs)?;
        let mut y = conv::big_to_small(self.value(x), self.value(w), &geom);
        if let Some(b) = b {
            conv::add_channel_bias(&mut y, self.value(b), geom.hs * geom.ws);
        }
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        let shape = vec![geom.batch, geom.cs, geom.hs, geom.ws];
        self.push("conv2d", shape, y, tracked, Op::Conv2d { x, w, b, geom })
    }

    /// Transposed convolution of `x[N,Cin,H,W]` with `w[Cin,Cout,K,K]`,
    /// output extent `(H−1)·stride − 2·pad + K`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let geom = conv_transpose2d_geom(&xs, &ws, stride, pad)?;
        self.check_bias("conv_transpose2d", b, geom.cb)?;
        let mut y = conv::small_to_big(self.value(x), self.value(w), &geom);
        if let Some(b) = b {
            conv::add_channel_bias(&mut y, self.value(b), geom.hb * geom.wb);
        }
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        let shape = vec![geom.batch, geom.cb, geom.hb, geom.wb];
        self.push("conv_transpose2d", shape, y, tracked, Op::ConvT2d { x, w, b, geom })
    }

    /// Per-channel batch normalization of a `[N,C,H,W]` (or `[N,C]`) input.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        state: &mut BatchNormState,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if !(xs.len() == 2 || xs.len() == 4) {
            return Err(AutogradError::ShapeMismatch { op: "batchnorm2d", detail: format!("input {xs:?}") });
        }
        let (n, c) = (xs[0], xs[1]);
        let plane: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.channels() != c {
            return Err(AutogradError::ShapeMismatch {
                op: "batchnorm2d",
                detail: format!(
                    "{c} input channels, gamma {:?}, beta {:?}, state {}",
                    self.shape(gamma),
                    self.shape(beta),
                    state.channels()
                ),
            });
        }
        let count = n * plane;
        let xv = self.value(x);
        let (mean, var) = match mode {
            BatchNormMode::Train { .. } => {
                if count == 0 {
                    return Err(AutogradError::EmptyOutput { op: "batchnorm2d" });
                }
                let mut mean = vec![0.0; c];
                for (i, chunk) in xv.chunks(plane).enumerate() {
                    mean[i % c] += chunk.iter().sum::<f64>();
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; c];
                for (i, chunk) in xv.chunks(plane).enumerate() {
                    let m = mean[i % c];
                    var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var)
            }
            BatchNormMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        for (i, (src, dst)) in xv.chunks(plane).zip(xhat.chunks_mut(plane)).enumerate() {
            let ch = i % c;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean[ch]) * inv_std[ch];
            }
        }
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut y = xhat.clone();
        for (i, chunk) in y.chunks_mut(plane).enumerate() {
            let ch = i % c;
            chunk.iter_mut().for_each(|v| *v = g[ch] * *v + bt[ch]);
        }
        let train = matches!(mode, BatchNormMode::Train { .. });
        if let BatchNormMode::Train { update_running: true } = mode {
            let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
            for ch in 0..c {
                state.running_mean[ch] = (1.0 - BN_MOMENTUM) * state.running_mean[ch] + BN_MOMENTUM * mean[ch];
                state.running_var[ch] =
                    (1.0 - BN_MOMENTUM) * state.running_var[ch] + BN_MOMENTUM * var[ch] * unbias;
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(
            "batchnorm2d",
            xs,
            y,
            tracked,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train, plane },
        )
    }

    /// Mean binary cross-entropy of probabilities against `{0,1}` targets.
    pub fn bce(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        if target.len() != self.value(pred).len() {
            return Err(AutogradError::ShapeMismatch {
                op: "bce",
                detail: format!("{} predictions, {} targets", self.value(pred).len(), target.len()),
            });
        }
        if let Some(&t) = target.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(AutogradError::InvalidTarget(t));
        }
        if target.is_empty() {
            return Err(AutogradError::EmptyOutput { op: "bce" });
        }
        let n = target.len() as f64;
        let loss = self
            .value(pred)
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let tracked = self.tracked(pred);
        self.push("bce", vec![], vec![loss], tracked, Op::Bce { pred, target: target.to_vec() })
    }

    /// Same as [`Tape::bce`] with a constant target for every element.
    pub fn bce_const(&mut self, pred: Var, target: f64) -> Result<Var> {
        let t = vec![target; self.value(pred).len()];
        self.bce(pred, &t)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate on the tape
    /// across calls and can be read with [`Tape::grad`] or transferred to a
    /// parameter store with [`Tape::accumulate_param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(AutogradError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.tracked(loss) {
            self.merge_grads(grads);
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(mut g) = grads[idx].take() else { continue };
            if !self.nodes[idx].tracked {
                continue;
            }
            self.precision.round_slice(&mut g);
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.merge_grads(grads);
        Ok(())
    }

    fn merge_grads(&mut self, new: Vec<Option<Vec<f64>>>) {
        self.grads.resize_with(self.nodes.len(), || None);
        for (slot, g) in self.grads.iter_mut().zip(new) {
            match (slot.as_mut(), g) {
                (Some(acc), Some(g)) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
    }

    /// Gradient of the last backward pass(es) with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every parameter leaf owned by `store` into the
    /// store's gradient buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, g) {
                if store.owns(*id) {
                    store.get_mut(*id).accumulate_grad(g);
                }
            }
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, delta: Vec<f64>| {
            if self.nodes[v.0].tracked {
                accumulate(&mut grads[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Affine { x, scale } => send(*x, g.iter().map(|v| v * scale).collect()),
            Op::Abs(x) => {
                let xv = self.value(*x);
                send(*x, g.iter().zip(xv).map(|(g, v)| g * sign(*v)).collect());
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, bv.iter().map(|y| g[0] * y).collect());
                send(*b, av.iter().map(|x| g[0] * x).collect());
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::SliceRows { x, start } => {
                let total = self.value(*x).len();
                let rows = self.shape(*x)[0];
                let row_len = if rows == 0 { 0 } else { total / rows };
                let mut full = vec![0.0; total];
                full[start * row_len..start * row_len + g.len()].copy_from_slice(g);
                send(*x, full);
            }
            Op::Act { x, kind } => {
                let (xv, yv) = (self.value(*x), &node.data);
                let d: Vec<f64> = match kind {
                    Activation::Relu => g.iter().zip(xv).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect(),
                    Activation::LeakyRelu(a) => {
                        g.iter().zip(xv).map(|(g, v)| if *v > 0.0 { *g } else { a * g }).collect()
                    }
                    Activation::Tanh => g.iter().zip(yv).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Activation::Sigmoid => g.iter().zip(yv).map(|(g, y)| g * y * (1.0 - y)).collect(),
                };
                send(*x, d);
            }
            Op::Linear { x, w, b, rows, inp, out } => {
                let (rows, inp, out) = (*rows, *inp, *out);
                if self.tracked(*x) {
                    let mut dx = vec![0.0; rows * inp];
                    conv::gemm(rows, out, inp, g, false, self.value(*w), false, &mut dx, 0.0);
                    send(*x, dx);
                }
                if self.tracked(*w) {
                    let mut dw = vec![0.0; out * inp];
                    conv::gemm(out, rows, inp, g, true, self.value(*x), false, &mut dw, 0.0);
                    send(*w, dw);
                }
                if let Some(b) = b {
                    if self.tracked(*b) {
                        let mut db = vec![0.0; out];
                        for row in g.chunks(out) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        send(*b, db);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                if self.tracked(*x) {
                    send(*x, conv::small_to_big(g, self.value(*w), geom));
                }
                if self.tracked(*w) {
                    send(*w, conv::weight_grad(self.value(*x), g, geom));
                }
                if let Some(b) = b {
                    if self.tracked(*b) {
                        send(*b, conv::channel_sums(g, geom.cs, geom.hs * geom.ws));
                    }
                }
            }
            Op::ConvT2d { x, w, b, geom } => {
                if self.tracked(*x) {
                    send(*x, conv::big_to_small(g, self.value(*w), geom));
                }
                if self.tracked(*w) {
                    send(*w, conv::weight_grad(g, self.value(*x), geom));
                }
                if let Some(b) = b {
                    if self.tracked(*b) {
                        send(*b, conv::channel_sums(g, geom.cb, geom.hb * geom.wb));
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train, plane } => {
                let c = inv_std.len();
                let plane = *plane;
                let count = (g.len() / c) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (gc, xc)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                    let ch = i % c;
                    sum_g[ch] += gc.iter().sum::<f64>();
                    sum_gx[ch] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                }
                if self.tracked(*x) {
                    let gam = self.value(*gamma);
                    let mut dx = vec![0.0; g.len()];
                    for (i, ((dc, gc), xc)) in dx.chunks_mut(plane).zip(g.chunks(plane)).zip(xhat.chunks(plane)).enumerate() {
                        let ch = i % c;
                        let k = gam[ch] * inv_std[ch];
                        if *train {
                            let (mg, mgx) = (sum_g[ch] / count, sum_gx[ch] / count);
                            for ((d, gv), xv) in dc.iter_mut().zip(gc).zip(xc) {
                                *d = k * (gv - mg - xv * mgx);
                            }
                        } else {
                            for (d, gv) in dc.iter_mut().zip(gc) {
                                *d = k * gv;
                            }
                        }
                    }
                    send(*x, dx);
                }
                send(*gamma, sum_gx);
                send(*beta, sum_g);
            }
            Op::Bce { pred, target } => {
                let n = target.len() as f64;
                let pv = self.value(*pred);
                let d = pv
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        g[0] * (-t / p + (1.0 - t) / (1.0 - p)) / n
                    })
                    .collect();
                send(*pred, d);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn conv2d_geom(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let mismatch = |detail: String| AutogradError::ShapeMismatch { op: "conv2d", detail };
    if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
        return Err(mismatch(format!("x {xs:?}, w {ws:?}")));
    }
    if xs[1] != ws[1] {
        return Err(mismatch(format!("{} input channels, kernel expects {}", xs[1], ws[1])));
    }
    if stride == 0 {
        return Err(mismatch("stride must be positive".into()));
    }
    let k = ws[2];
    let (h, w) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
    if h < k || w < k {
        return Err(AutogradError::EmptyOutput { op: "conv2d" });
    }
    let geom = ConvGeom {
        batch: xs[0],
        cb: xs[1],
        hb: xs[2],
        wb: xs[3],
        cs: ws[0],
        hs: (h - k) / stride + 1,
        ws: (w - k) / stride + 1,
        k,
        stride,
        pad,
    };
    if geom.batch == 0 || geom.cs == 0 {
        return Err(AutogradError::EmptyOutput { op: "conv2d" });
    }
    Ok(geom)
}

fn conv_transpose2d_geom(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let mismatch = |detail: String| AutogradError::ShapeMismatch { op: "conv_transpose2d", detail };
    if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
        return Err(mismatch(format!("x {xs:?}, w {ws:?}")));
    }
    if xs[1] != ws[0] {
        return Err(mismatch(format!("{} input channels, kernel expects {}", xs[1], ws[0])));
    }
    if stride == 0 || xs[2] == 0 || xs[3] == 0 {
        return Err(mismatch("stride and input extent must be positive".into()));
    }
    let k = ws[2];
    let out = |e: usize| ((e - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v >= 1);
    let (Some(hb), Some(wb)) = (out(xs[2]), out(xs[3])) else {
        return Err(AutogradError::EmptyOutput { op: "conv_transpose2d" });
    };
    if xs[0] == 0 || ws[1] == 0 {
        return Err(AutogradError::EmptyOutput { op: "conv_transpose2d" });
    }
    Ok(ConvGeom { batch: xs[0], cb: ws[1], hb, wb, cs: xs[1], hs: xs[2], ws: xs[3], k, stride, pad })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_sliding_window() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(&t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.])).unwrap();
        let w = tape.constant(&t(&[1, 1, 2, 2], &[1., 0., 0., 1.])).unwrap();
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), [1, 1, 2, 2]);
        assert_eq!(tape.value(y), [6., 8., 12., 14.]);
    }

    #[test]
    fn identity_kernels() {
        let mut tape = Tape::new(Precision::F64);
        let data: Vec<f64> = (0..12).map(|i| i as f64 - 5.5).collect();
        let x = tape.constant(&t(&[1, 1, 3, 4], &data)).unwrap();
        let w = tape.constant(&t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), &data[..]);
        let z = tape.conv_transpose2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(z), &data[..]);
    }

    #[test]
    fn conv_shape_errors() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(&Tensor::zeros(vec![1, 3, 2, 2])).unwrap();
        let w = tape.constant(&Tensor::zeros(vec![4, 2, 1, 1])).unwrap();
        assert!(matches!(tape.conv2d(x, w, None, 1, 0), Err(AutogradError::ShapeMismatch { .. })));
        let big = tape.constant(&Tensor::zeros(vec![4, 3, 3, 3])).unwrap();
        assert!(matches!(tape.conv2d(x, big, None, 1, 0), Err(AutogradError::EmptyOutput { .. })));
        let wt = tape.constant(&Tensor::zeros(vec![2, 3, 1, 1])).unwrap();
        assert!(tape.conv_transpose2d(x, wt, None, 1, 0).is_err());
        let wt = tape.constant(&Tensor::zeros(vec![3, 3, 1, 1])).unwrap();
        assert!(matches!(tape.conv_transpose2d(x, wt, None, 1, 1), Err(AutogradError::EmptyOutput { .. })));
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(&t(&[4], &[-1.0, 0.0, 3.0, -3.0])).unwrap();
        let lr = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(lr), [-0.2, 0.0, 3.0, -0.6000000000000001]);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), [0.0, 0.0, 3.0, 0.0]);
        let th = tape.tanh(x).unwrap();
        assert_eq!(tape.value(th)[1], 0.0);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s)[1], 0.5);
    }

    #[test]
    fn leaky_relu_subgradient_at_zero_is_alpha() {
        let mut tape = Tape::new(Precision::F64);
        let mut xt = t(&[1], &[0.0]);
        xt.set_requires_grad(true);
        let x = tape.leaf(&xt).unwrap();
        let y = tape.leaky_relu(x, 0.2).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), [0.2]);
    }

    #[test]
    fn bce_closed_forms() {
        let mut tape = Tape::new(Precision::F64);
        let p = tape.constant(&t(&[1], &[0.5])).unwrap();
        let l = tape.bce(p, &[1.0]).unwrap();
        assert!((tape.item(l) - std::f64::consts::LN_2).abs() < 1e-12);
        let p2 = tape.constant(&t(&[2], &[0.5, 0.5])).unwrap();
        let l2 = tape.bce(p2, &[1.0, 0.0]).unwrap();
        assert!((tape.item(l2) - 0.693147).abs() < 1e-6);
        let p3 = tape.constant(&t(&[1], &[1.0 - BCE_EPS])).unwrap();
        let l3 = tape.bce(p3, &[1.0]).unwrap();
        assert!(tape.item(l3) < 1e-6);
        assert!(matches!(tape.bce(p, &[0.5]), Err(AutogradError::InvalidTarget(_))));
    }

    #[test]
    fn dot_and_abs() {
        let mut tape = Tape::new(Precision::F64);
        let a = tape.constant(&t(&[2], &[1.0, 2.0])).unwrap();
        let b = tape.constant(&t(&[2], &[3.0, 4.0])).unwrap();
        let z = tape.constant(&Tensor::zeros(vec![2])).unwrap();
        let d = tape.dot(a, b).unwrap();
        assert_eq!(tape.item(d), 11.0);
        let d0 = tape.dot(a, z).unwrap();
        assert_eq!(tape.item(d0), 0.0);
        let c = tape.constant(&t(&[1], &[-2.5])).unwrap();
        let ab = tape.abs(c).unwrap();
        assert_eq!(tape.value(ab), [2.5]);
        let three = tape.constant(&Tensor::zeros(vec![3])).unwrap();
        assert!(tape.dot(a, three).is_err());
    }

    #[test]
    fn backward_of_squared_norm() {
        let mut tape = Tape::new(Precision::F64);
        let mut wt = t(&[2], &[1.0, 2.0]);
        wt.set_requires_grad(true);
        let w = tape.leaf(&wt).unwrap();
        let l = tape.dot(w, w).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), [2.0, 4.0]);
    }

    #[test]
    fn detached_loss_leaves_param_grad_zero() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2], &[1.0, 2.0]));
        let mut tape = Tape::new(Precision::F64);
        let w = tape.param(&store, id, true).unwrap();
        let wd = tape.detach(w).unwrap();
        let l = tape.dot(wd, wd).unwrap();
        tape.backward(l).unwrap();
        tape.accumulate_param_grads(&mut store);
        assert_eq!(store.get(id).grad().unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(&Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(tape.backward(x), Err(AutogradError::NonScalarLoss(_))));
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2], &[1.0, 2.0]));
        for _ in 0..2 {
            let mut tape = Tape::new(Precision::F64);
            let w = tape.param(&store, id, true).unwrap();
            let l = tape.sum(w).unwrap();
            tape.backward(l).unwrap();
            tape.accumulate_param_grads(&mut store);
        }
        assert_eq!(store.get(id).grad().unwrap(), [2.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.get(id).grad().unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn batchnorm_examples() {
        let mut tape = Tape::new(Precision::F64);
        let g = tape.constant(&t(&[1], &[1.0])).unwrap();
        let b = tape.constant(&t(&[1], &[0.0])).unwrap();
        let mut st = BatchNormState::new(1);
        let x = tape.constant(&t(&[4, 1, 1, 1], &[3.0, 3.0, 3.0, 3.0])).unwrap();
        let y = tape.batchnorm2d(x, g, b, BatchNormMode::Train { update_running: true }, &mut st).unwrap();
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
        let x = tape.constant(&t(&[2, 1, 1, 2], &[0.0, 2.0, 2.0, 0.0])).unwrap();
        let y = tape.batchnorm2d(x, g, b, BatchNormMode::Train { update_running: true }, &mut st).unwrap();
        assert_eq!(tape.shape(y), [2, 1, 1, 2]);
        for (v, e) in tape.value(y).iter().zip([-1.0, 1.0, 1.0, -1.0]) {
            assert!((v - e).abs() < 1e-4);
        }
        let two = tape.constant(&t(&[2], &[1.0, 1.0])).unwrap();
        assert!(tape.batchnorm2d(x, two, two, BatchNormMode::Eval, &mut st).is_err());
    }

    #[test]
    fn batchnorm_running_stats_and_eval() {
        let mut tape = Tape::new(Precision::F64);
        let g = tape.constant(&t(&[1], &[1.0])).unwrap();
        let b = tape.constant(&t(&[1], &[0.0])).unwrap();
        let mut st = BatchNormState::new(1);
        let x = tape.constant(&t(&[2, 1], &[0.0, 2.0])).unwrap();
        tape.batchnorm2d(x, g, b, BatchNormMode::Train { update_running: true }, &mut st).unwrap();
        assert!((st.running_mean[0] - 0.1).abs() < 1e-12);
        // unbiased batch variance 2, folded with momentum 0.1 into 1.0
        assert!((st.running_var[0] - 1.1).abs() < 1e-12);
        let before = st.clone();
        tape.batchnorm2d(x, g, b, BatchNormMode::Train { update_running: false }, &mut st).unwrap();
        assert_eq!(st, before);
        let y = tape.batchnorm2d(x, g, b, BatchNormMode::Eval, &mut st).unwrap();
        let expect = (2.0 - 0.1) / (1.1f64 + BN_EPS).sqrt();
        assert!((tape.value(y)[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(&t(&[1], &[f64::MAX])).unwrap();
        assert!(matches!(tape.affine(x, 10.0, 0.0), Err(AutogradError::NonFinite { .. })));
    }

    #[test]
    fn f32_mode_rounds_outputs() {
        let mut tape = Tape::new(Precision::F32);
        let x = tape.constant(&t(&[1], &[0.1])).unwrap();
        let y = tape.affine(x, 3.0, 0.0).unwrap();
        let v = tape.value(y)[0];
        assert_eq!(v, v as f32 as f64);
    }
}
