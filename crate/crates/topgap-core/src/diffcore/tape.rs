//! Append-only reverse-mode autodiff tape.
//!
//! Ops evaluate eagerly and record what the backward sweep needs. Nodes are
//! processed strictly in reverse creation order with serial accumulation,
//! so gradients are bit-identical across runs and thread counts. A tape is
//! single-use for differentiation: one backward per forward build.

use crate::diffcore::kernels as k;
use crate::diffcore::kernels::{ConvGeom, PadMode};
use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm running statistics, updated in train mode with momentum 0.1
/// (running var uses the unbiased batch variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning<F: Scalar> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Scalar> BnRunning<F> {
    pub fn identity(channels: usize) -> Self {
        BnRunning {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
        }
    }
}

/// Batch-norm mode selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

enum Op<F: Scalar> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        batch: usize,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: F,
    },
    Dropout {
        x: NodeId,
        mask: Vec<u8>,
        scale: F,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<F>,
        inv_std: Vec<F>,
        batch: usize,
        channels: usize,
        spatial: usize,
        train: bool,
    },
    Upsample {
        x: NodeId,
        factor: usize,
        batch: usize,
        channels: usize,
        h: usize,
        w: usize,
    },
    Reshape {
        x: NodeId,
    },
    TopkMean {
        x: NodeId,
        k: usize,
        picked: Vec<u32>,
        batch: usize,
        channels: usize,
    },
    L1Mean {
        x: NodeId,
    },
    SoftmaxCe {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<F>,
        batch: usize,
        classes: usize,
    },
    SumAll {
        x: NodeId,
    },
    PickScalar {
        x: NodeId,
        flat: usize,
    },
    SpatialPick {
        x: NodeId,
        row: usize,
        col: usize,
    },
}

struct Node<F: Scalar> {
    shape: Vec<usize>,
    value: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TapeState {
    Fresh,
    BackwardDone,
}

/// The recording itself. Build a fresh tape per forward pass.
pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    state: TapeState,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            state: TapeState::Fresh,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, requires_grad: bool, op: Op<F>) -> NodeId {
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node<F> {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.node(id).value
    }

    /// Scalar value of a shape-[1] node.
    pub fn scalar_value(&self, id: NodeId) -> F {
        debug_assert_eq!(self.node(id).value.len(), 1);
        self.node(id).value[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.node(id).grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.node(id).requires_grad
    }

    /// Copies a node out as a standalone tensor (gradient not included).
    pub fn tensor(&self, id: NodeId) -> Tensor<F> {
        Tensor::from_vec(&self.node(id).shape, self.node(id).value.clone())
            .expect("node values stay finite")
    }

    /// Selected flat indices of a top-k node, [batch*channels*k].
    pub fn topk_picked(&self, id: NodeId) -> Option<&[u32]> {
        match &self.node(id).op {
            Op::TopkMean { picked, .. } => Some(picked),
            _ => None,
        }
    }

    pub fn leaf(&mut self, t: Tensor<F>) -> NodeId {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        let value = t.data().to_vec();
        self.push(shape, value, rg, Op::Leaf)
    }

    /// Convolution over [N,C,H,W] with weights [F,C,kh,kw] and optional
    /// per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Constraint(format!(
                "conv2d expects rank-4 input and weights, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(Error::Constraint(format!(
                "conv2d channel mismatch: input has {}, weights expect {}",
                xs[1], ws[1]
            )));
        }
        let geom =
            ConvGeom::new(xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, pad)?.with_pad_mode(pad_mode);
        if let Some(bid) = b {
            let bs = self.shape(bid);
            if bs != [ws[0]] {
                return Err(Error::Constraint(format!(
                    "conv2d bias shape {bs:?} does not match {} output channels",
                    ws[0]
                )));
            }
        }
        let batch = xs[0];
        let bias_vals = b.map(|bid| self.node(bid).value.clone());
        let out = k::conv2d_forward(
            &self.node(x).value,
            &self.node(w).value,
            bias_vals.as_deref(),
            batch,
            &geom,
        );
        let rg = self.node(x).requires_grad
            || self.node(w).requires_grad
            || b.is_some_and(|bid| self.node(bid).requires_grad);
        Ok(self.push(
            vec![batch, geom.out_c, geom.out_h, geom.out_w],
            out,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value: Vec<F> = self
            .node(x)
            .value
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        self.push(shape, value, rg, Op::Relu { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Constraint(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value: Vec<F> = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(&u, &v)| u + v)
            .collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(shape, value, rg, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, factor: F) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::Numeric("scale factor must be finite".into()));
        }
        let value: Vec<F> = self.node(x).value.iter().map(|&v| v * factor).collect();
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape, value, rg, Op::Scale { x, factor }))
    }

    /// Inverted dropout. Identity when not training or rate is zero; the
    /// mask is drawn from a dedicated seeded stream so runs reproduce.
    pub fn dropout(&mut self, x: NodeId, rate: f64, train: bool, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<u8> = (0..self.node(x).value.len())
            .map(|_| u8::from(rng.random::<f64>() >= rate))
            .collect();
        let scale = F::of_f64(1.0 / (1.0 - rate));
        let value: Vec<F> = self
            .node(x)
            .value
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m == 1 { v * scale } else { F::zero() })
            .collect();
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape, value, rg, Op::Dropout { x, mask, scale }))
    }

    /// Batch norm over [N,C,H,W]. Train mode normalizes with biased batch
    /// statistics and pushes a momentum update into `running`; eval mode
    /// reads `running` and leaves it untouched.
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &mut BnRunning<F>,
        mode: BnMode,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Constraint(format!(
                "batchnorm2d expects rank-4 input, got {xs:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Constraint(format!(
                "batchnorm2d gamma/beta must have shape [{c}]"
            )));
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::Constraint(format!(
                "batchnorm2d running stats must have {c} channels"
            )));
        }
        let spatial = h * w;
        let eps = F::of_f64(BN_EPS);
        let (mean, inv_std, train) = match mode {
            BnMode::Train => {
                let m = n * spatial;
                if m < 2 {
                    return Err(Error::Constraint(format!(
                        "batchnorm2d needs at least 2 values per channel in train mode, got {m}"
                    )));
                }
                let (mean, var, inv_std) = k::bn_stats(&self.node(x).value, n, c, spatial, eps);
                let mom = F::of_f64(BN_MOMENTUM);
                let keep = F::one() - mom;
                let unbias = F::from_usize(m).expect("bn count") / F::from_usize(m - 1).expect("bn count");
                for ch in 0..c {
                    running.mean[ch] = keep * running.mean[ch] + mom * mean[ch];
                    running.var[ch] = keep * running.var[ch] + mom * var[ch] * unbias;
                }
                (mean, inv_std, true)
            }
            BnMode::Eval => {
                let mean = running.mean.clone();
                let inv_std: Vec<F> = running
                    .var
                    .iter()
                    .map(|&v| F::one() / (v + eps).sqrt())
                    .collect();
                (mean, inv_std, false)
            }
        };
        let y = k::bn_apply(
            &self.node(x).value,
            n,
            c,
            spatial,
            &mean,
            &inv_std,
            &self.node(gamma).value,
            &self.node(beta).value,
        );
        let rg = self.node(x).requires_grad
            || self.node(gamma).requires_grad
            || self.node(beta).requires_grad;
        Ok(self.push(
            xs,
            y,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch: n,
                channels: c,
                spatial,
                train,
            },
        ))
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 0 {
            return Err(Error::Constraint("upsample factor must be >= 1".into()));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Constraint(format!(
                "upsample expects rank-4 input, got {xs:?}"
            )));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let y = k::upsample_nearest(&self.node(x).value, n, c, h, w, factor);
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            vec![n, c, h * factor, w * factor],
            y,
            rg,
            Op::Upsample {
                x,
                factor,
                batch: n,
                channels: c,
                h,
                w,
            },
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 4 || numel != self.node(x).value.len() {
            return Err(Error::Constraint(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let value = self.node(x).value.clone();
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape { x }))
    }

    /// Mean of the k largest entries per (sample, channel) row of a
    /// [N,C,HW] tensor. k = HW averages everything; k = 1 is a max.
    pub fn topk_mean(&mut self, x: NodeId, kk: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Constraint(format!(
                "topk_mean expects rank-3 [N,C,HW] input, got {xs:?}"
            )));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2]);
        if kk == 0 || kk > hw {
            return Err(Error::Constraint(format!(
                "topk k must satisfy 1 <= k <= {hw}, got {kk}"
            )));
        }
        let inv_k = F::one() / F::from_usize(kk).expect("k fits scalar");
        let mut out = vec![F::zero(); n * c];
        let mut picked = Vec::with_capacity(n * c * kk);
        for row in 0..n * c {
            let vals = &self.node(x).value[row * hw..(row + 1) * hw];
            let idx = k::topk_indices(vals, kk);
            let mut s = F::zero();
            for &i in &idx {
                s += vals[i as usize];
            }
            out[row] = s * inv_k;
            picked.extend_from_slice(&idx);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            vec![n, c],
            out,
            rg,
            Op::TopkMean {
                x,
                k: kk,
                picked,
                batch: n,
                channels: c,
            },
        ))
    }

    /// Mean absolute value of all entries; the sparsity penalty.
    pub fn l1_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let vals = &self.node(x).value;
        if vals.is_empty() {
            return Err(Error::Constraint("l1_mean of an empty tensor".into()));
        }
        let inv = F::one() / F::from_usize(vals.len()).expect("numel fits scalar");
        let mut s = F::zero();
        for &v in vals {
            s += v.abs();
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(vec![1], vec![s * inv], rg, Op::L1Mean { x }))
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_ce(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 {
            return Err(Error::Constraint(format!(
                "softmax_ce expects rank-2 [N,classes] logits, got {ls:?}"
            )));
        }
        let (n, c) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(Error::Data(format!(
                "softmax_ce got {} labels for {n} samples",
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y >= c) {
            return Err(Error::Data(format!(
                "label {} out of range for {c} classes at sample {i}",
                labels[i]
            )));
        }
        let probs = k::softmax_rows(&self.node(logits).value, n, c);
        let mut loss = F::zero();
        for (i, &y) in labels.iter().enumerate() {
            loss += -(probs[i * c + y].ln());
        }
        loss = loss / F::from_usize(n).expect("batch fits scalar");
        let rg = self.node(logits).requires_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
                batch: n,
                classes: c,
            },
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = F::zero();
        for &v in &self.node(x).value {
            s += v;
        }
        let rg = self.node(x).requires_grad;
        self.push(vec![1], vec![s], rg, Op::SumAll { x })
    }

    pub fn pick_scalar(&mut self, x: NodeId, flat: usize) -> Result<NodeId> {
        if flat >= self.node(x).value.len() {
            return Err(Error::Constraint(format!(
                "pick_scalar index {flat} out of bounds for numel {}",
                self.node(x).value.len()
            )));
        }
        let v = self.node(x).value[flat];
        let rg = self.node(x).requires_grad;
        Ok(self.push(vec![1], vec![v], rg, Op::PickScalar { x, flat }))
    }

    /// Sum over batch and channels of the value at one spatial location of
    /// a [N,C,H,W] tensor.
    pub fn spatial_pick(&mut self, x: NodeId, row: usize, col: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Constraint(format!(
                "spatial_pick expects rank-4 input, got {xs:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if row >= h || col >= w {
            return Err(Error::Constraint(format!(
                "spatial_pick location ({row},{col}) out of bounds for {h}x{w}"
            )));
        }
        let mut s = F::zero();
        for img in 0..n * c {
            s += self.node(x).value[img * h * w + row * w + col];
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(vec![1], vec![s], rg, Op::SpatialPick { x, row, col }))
    }

    /// Reverse sweep from a scalar loss node. Single use: calling again
    /// without rebuilding the tape is a state error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.state == TapeState::BackwardDone {
            return Err(Error::State(
                "backward called twice on one tape; rebuild the forward pass first".into(),
            ));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Constraint(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.state = TapeState::BackwardDone;
        if !self.node(loss).requires_grad {
            return Err(Error::State(
                "loss does not depend on any gradient-tracked leaf".into(),
            ));
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = node.grad.as_deref().expect("checked above");
            Self::propagate(before, node, g);
        }
        Ok(())
    }

    fn propagate(before: &mut [Node<F>], node: &Node<F>, g: &[F]) {
        let wants = |nodes: &[Node<F>], id: NodeId| nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
            } => {
                let need_dx = wants(before, *x);
                let need_dw = wants(before, *w);
                let need_db = b.map(|bid| wants(before, bid)).unwrap_or(false);
                let (dx, dw, db) = k::conv2d_backward(
                    &before[x.0].value,
                    &before[w.0].value,
                    g,
                    *batch,
                    geom,
                    need_dx,
                    need_dw,
                    need_db,
                );
                if let Some(dx) = dx {
                    accumulate(&mut before[x.0], &dx);
                }
                if let Some(dw) = dw {
                    accumulate(&mut before[w.0], &dw);
                }
                if let (Some(db), Some(bid)) = (db, b) {
                    accumulate(&mut before[bid.0], &db);
                }
            }
            Op::Relu { x } => {
                if wants(before, *x) {
                    let dx: Vec<F> = before[x.0]
                        .value
                        .iter()
                        .zip(g)
                        .map(|(&v, &go)| if v > F::zero() { go } else { F::zero() })
                        .collect();
                    accumulate(&mut before[x.0], &dx);
                }
            }
            Op::Add { a, b } => {
                if wants(before, *a) {
                    accumulate(&mut before[a.0], g);
                }
                if wants(before, *b) {
                    accumulate(&mut before[b.0], g);
                }
            }
            Op::Scale { x, factor } => {
                if wants(before, *x) {
                    let dx: Vec<F> = g.iter().map(|&v| v * *factor).collect();
                    accumulate(&mut before[x.0], &dx);
                }
            }
            Op::Dropout { x, mask, scale } => {
                if wants(before, *x) {
                    let dx: Vec<F> = g
                        .iter()
                        .zip(mask)
                        .map(|(&v, &m)| if m == 1 { v * *scale } else { F::zero() })
                        .collect();
                    accumulate(&mut before[x.0], &dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch,
                channels,
                spatial,
                train,
            } => {
                let (dx, dgamma, dbeta) = if *train {
                    k::bn_train_backward(
                        &before[x.0].value,
                        g,
                        *batch,
                        *channels,
                        *spatial,
                        mean,
                        inv_std,
                        &before[gamma.0].value,
                    )
                } else {
                    k::bn_eval_backward(
                        &before[x.0].value,
                        g,
                        *batch,
                        *channels,
                        *spatial,
                        mean,
                        inv_std,
                        &before[gamma.0].value,
                    )
                };
                if wants(before, *x) {
                    accumulate(&mut before[x.0], &dx);
                }
                if wants(before, *gamma) {
                    accumulate(&mut before[gamma.0], &dgamma);
                }
                if wants(before, *beta) {
                    accumulate(&mut before[beta.0], &dbeta);
                }
            }
            Op::Upsample {
                x,
                factor,
                batch,
                channels,
                h,
                w,
            } => {
                if wants(before, *x) {
                    let dx = k::upsample_nearest_backward(g, *batch, *channels, *h, *w, *factor);
                    accumulate(&mut before[x.0], &dx);
                }
            }
            Op::Reshape { x } => {
                if wants(before, *x) {
                    accumulate(&mut before[x.0], g);
                }
            }
            Op::TopkMean {
                x,
                k: kk,
                picked,
                batch,
                channels,
            } => {
                if wants(before, *x) {
                    let hw = before[x.0].value.len() / (batch * channels);
                    let inv_k = F::one() / F::from_usize(*kk).expect("k fits scalar");
                    let mut dx = vec![F::zero(); before[x.0].value.len()];
                    for row in 0..batch * channels {
                        let go = g[row] * inv_k;
                        for &idx in &picked[row * kk..(row + 1) * kk] {
                            dx[row * hw + idx as usize] += go;
                        }
                    }
                    accumulate(&mut before[x.0], &dx);
                }
            }
            Op::L1Mean { x } => {
                if wants(before, *x) {
                    let inv =
                        F::one() / F::from_usize(before[x.0].value.len()).expect("numel fits");
                    let go = g[0] * inv;
                    let dx: Vec<F> = before[x.0]
                        .value
                        .iter()
                        .map(|&v| k::sign_zero(v) * go)
                        .collect();
                    accumulate(&mut before[x.0], &dx);
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
                batch,
                classes,
            } => {
                if wants(before, *logits) {
                    let inv_n = F::one() / F::from_usize(*batch).expect("batch fits");
                    let go = g[0] * inv_n;
                    let mut dx = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        dx[i * classes + y] -= F::one();
                    }
                    for v in &mut dx {
                        *v = *v * go;
                    }
                    accumulate(&mut before[logits.0], &dx);
                }
            }
            Op::SumAll { x } => {
                if wants(before, *x) {
                    let dx = vec![g[0]; before[x.0].value.len()];
                    accumulate(&mut before[x.0], &dx);
                }
            }
            Op::PickScalar { x, flat } => {
                if wants(before, *x) {
                    let mut dx = vec![F::zero(); before[x.0].value.len()];
                    dx[*flat] = g[0];
                    accumulate(&mut before[x.0], &dx);
                }
            }
            Op::SpatialPick { x, row, col } => {
                if wants(before, *x) {
                    let shape = &before[x.0].shape;
                    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let mut dx = vec![F::zero(); before[x.0].value.len()];
                    for img in 0..n * c {
                        dx[img * h * w + row * w + col] = g[0];
                    }
                    accumulate(&mut before[x.0], &dx);
                }
            }
        }
    }
}

fn accumulate<F: Scalar>(node: &mut Node<F>, delta: &[F]) {
    let grad = node
        .grad
        .get_or_insert_with(|| vec![F::zero(); node.value.len()]);
    debug_assert_eq!(grad.len(), delta.len());
    for (gi, &d) in grad.iter_mut().zip(delta) {
        *gi += d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], data: Vec<f64>) -> NodeId {
        tape.leaf(Tensor::from_vec(shape, data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn topk_mean_matches_hand_example() {
        // Map [[1,5],[3,4]]: k=2 -> (5+4)/2, k=1 -> 5, k=4 -> 13/4.
        for (kk, want) in [(2usize, 4.5f64), (1, 5.0), (4, 3.25)] {
            let mut tape = Tape::<f64>::new();
            let x = leaf(&mut tape, &[1, 1, 4], vec![1.0, 5.0, 3.0, 4.0]);
            let y = tape.topk_mean(x, kk).unwrap();
            assert_eq!(tape.value(y), &[want]);
        }
    }

    #[test]
    fn topk_mean_subgradient_hits_exactly_k_positions() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[1, 2, 4], vec![1.0, 5.0, 3.0, 4.0, 9.0, 9.0, 2.0, 9.0]);
        let y = tape.topk_mean(x, 3).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        // Channel 0 picks 5,4,3 (indices 1,3,2); channel 1 picks the three 9s.
        let third = 1.0 / 3.0;
        assert_eq!(g, &[0.0, third, third, third, third, third, 0.0, third]);
        assert_eq!(tape.topk_picked(y).unwrap(), &[1, 3, 2, 0, 1, 3]);
    }

    #[test]
    fn topk_rejects_out_of_range_k() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[1, 1, 4], vec![0.0; 4]);
        assert!(tape.topk_mean(x, 0).is_err());
        assert!(tape.topk_mean(x, 5).is_err());
    }

    #[test]
    fn softmax_ce_uniform_logits_give_log_classes() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[2, 4], vec![0.0; 8]);
        let l = tape.softmax_ce(x, &[0, 3]).unwrap();
        assert!((tape.scalar_value(l) - (4.0f64).ln()).abs() < 1e-12);
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        // (p - onehot)/N with p = 0.25, N = 2.
        assert!((g[0] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((g[1] - 0.25 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_rejects_bad_labels_with_index() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[2, 3], vec![0.0; 6]);
        let err = tape.softmax_ce(x, &[1, 7]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("sample 1"), "{err}");
    }

    #[test]
    fn l1_mean_gradient_is_scaled_sign() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[4], vec![2.0, -3.0, 0.0, 1.0]);
        let l = tape.l1_mean(x).unwrap();
        assert_eq!(tape.scalar_value(l), 1.5);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25, -0.25, 0.0, 0.25]);
    }

    #[test]
    fn relu_zeroes_negatives_and_their_grads() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[3], vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_a_state_error() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[1], vec![1.0]);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        let w = tape.leaf(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let s = tape.add(x, w).unwrap();
        let l = tape.sum_all(s);
        tape.backward(l).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn bn_train_normalizes_and_updates_running() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let gamma = tape.leaf(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let beta = tape.leaf(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let mut running = BnRunning::identity(1);
        let y = tape
            .batchnorm2d(x, gamma, beta, &mut running, BnMode::Train)
            .unwrap();
        let out = tape.value(y);
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        // momentum 0.1, batch mean 2.5, unbiased var 5/3.
        assert!((running.mean[0] - 0.25).abs() < 1e-12);
        assert!((running.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn bn_train_rejects_single_value_batches() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[1, 2, 1, 1], vec![1.0, 2.0]);
        let gamma = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        let beta = tape.leaf(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let mut running = BnRunning::identity(2);
        let err = tape
            .batchnorm2d(x, gamma, beta, &mut running, BnMode::Train)
            .unwrap_err();
        assert!(matches!(err, Error::Constraint(_)));
    }

    #[test]
    fn bn_eval_uses_running_stats_and_keeps_them() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[1, 1, 1, 2], vec![3.0, 5.0]);
        let gamma = tape.leaf(Tensor::from_vec(&[1], vec![2.0]).unwrap());
        let beta = tape.leaf(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let mut running = BnRunning {
            mean: vec![3.0],
            var: vec![4.0],
        };
        let snapshot = running.clone();
        let y = tape
            .batchnorm2d(x, gamma, beta, &mut running, BnMode::Eval)
            .unwrap();
        assert_eq!(running, snapshot);
        let out = tape.value(y);
        // (3-3)/2 * 2 + 1 = 1, (5-3)/2 * 2 + 1 = 3 (up to the eps in sqrt).
        assert!((out[0] - 1.0).abs() < 1e-5);
        assert!((out[1] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn dropout_is_identity_when_eval_or_zero_rate() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[3], vec![1.0, 2.0, 3.0]);
        assert_eq!(tape.dropout(x, 0.0, true, 7).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.5, false, 7).unwrap(), x);
        assert!(tape.dropout(x, 1.0, true, 7).is_err());
    }

    #[test]
    fn dropout_repeats_with_the_same_seed() {
        let run = |seed: u64| {
            let mut tape = Tape::<f64>::new();
            let x = leaf(&mut tape, &[64], vec![1.0; 64]);
            let y = tape.dropout(x, 0.5, true, seed).unwrap();
            tape.value(y).to_vec()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
        // Kept entries are scaled by 1/(1-rate).
        assert!(run(9).iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn spatial_pick_sums_batch_and_channels() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(
            &mut tape,
            &[2, 2, 2, 2],
            (0..16).map(|v| v as f64).collect(),
        );
        let s = tape.spatial_pick(x, 1, 0).unwrap();
        // Flat offsets 2 within each 2x2 map: 2, 6, 10, 14.
        assert_eq!(tape.scalar_value(s), 32.0);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        let ones: f64 = g.iter().sum();
        assert_eq!(ones, 4.0);
        assert_eq!(g[2], 1.0);
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn add_requires_matching_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        let b = leaf(&mut tape, &[3], vec![1.0, 2.0, 3.0]);
        assert!(matches!(tape.add(a, b), Err(Error::Constraint(_))));
    }

    #[test]
    fn reshape_backward_restores_layout() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let r = tape.reshape(x, &[4]).unwrap();
        let p = tape.pick_scalar(r, 3).unwrap();
        tape.backward(p).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }
}
