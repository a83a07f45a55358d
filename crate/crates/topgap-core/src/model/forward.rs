//! Builds the forward graph on a fresh tape and exposes the node handles
//! that training, attacks, and map analysis need.

use super::{block_specs, ModelParams};
use crate::diffcore::kernels::softmax_rows;
use crate::diffcore::{BnMode, BnRunning, NodeId, PadMode, Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Train mode enables batch-norm batch statistics and dropout; the seed
/// fixes the dropout mask stream for the whole pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOpts {
    pub params_require_grad: bool,
    pub input_requires_grad: bool,
    /// Replaces the configured pool size for this pass only.
    pub k_override: Option<usize>,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        ForwardOpts {
            params_require_grad: true,
            input_requires_grad: false,
            k_override: None,
        }
    }
}

/// One forward pass: the tape plus handles into it.
pub struct ForwardPass<F: Scalar = f32> {
    pub tape: Tape<F>,
    pub input: NodeId,
    /// Fused multi-scale features after ReLU, before the class conv.
    pub fused: NodeId,
    /// Per-class feature map, shape [N, num_classes, H1, W1].
    pub feature_map: NodeId,
    /// Pooled scores, shape [N, num_classes].
    pub logits: NodeId,
    pub param_nodes: BTreeMap<String, NodeId>,
    /// Fresh running statistics produced by train-mode batch norm, keyed
    /// by layer prefix; the caller writes them back into the params.
    pub bn_updates: Vec<(String, BnRunning<F>)>,
}

impl<F: Scalar> ForwardPass<F> {
    /// Flat spatial indices picked by the pooling op: k per (sample, class).
    pub fn picked(&self) -> &[u32] {
        self.tape
            .topk_picked(self.logits)
            .expect("logits node is the pooling op")
    }
}

struct Graph<'a, F: Scalar> {
    tape: Tape<F>,
    params: &'a ModelParams<F>,
    nodes: BTreeMap<String, NodeId>,
    params_rg: bool,
    train: bool,
    bn_updates: Vec<(String, BnRunning<F>)>,
}

impl<'a, F: Scalar> Graph<'a, F> {
    fn p(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.nodes.get(name) {
            return Ok(id);
        }
        let rg = self.params_rg && self.params.is_trainable(name);
        let t = self.params.tensor(name)?.clone().with_requires_grad(rg);
        let id = self.tape.leaf(t);
        self.nodes.insert(name.to_string(), id);
        Ok(id)
    }

    // Every padded conv replicates the edge: with zero padding the border
    // cells of the class map are distinguishable from the interior, and a
    // sparse pooled head drifts onto that rim instead of the objects.
    fn conv(&mut self, x: NodeId, name: &str, stride: usize, pad: usize, bias: Option<&str>) -> Result<NodeId> {
        let w = self.p(name)?;
        let b = bias.map(|n| self.p(n)).transpose()?;
        self.tape.conv2d(x, w, b, stride, pad, PadMode::Replicate)
    }

    fn bn(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let mut running = self.params.bn_running(prefix)?;
        let mode = if self.train { BnMode::Train } else { BnMode::Eval };
        let out = self.tape.batchnorm2d(x, gamma, beta, &mut running, mode)?;
        if self.train {
            self.bn_updates.push((prefix.to_string(), running));
        }
        Ok(out)
    }
}

/// Runs the model over a batch of images, shape [N, C, S, S].
pub fn forward<F: Scalar>(
    params: &ModelParams<F>,
    images: &Tensor<F>,
    mode: Mode,
    opts: ForwardOpts,
) -> Result<ForwardPass<F>> {
    let bb = &params.backbone;
    let head = &params.head;
    let dims = images.dims4()?;
    if dims.1 != bb.input_channels || dims.2 != bb.input_size || dims.3 != bb.input_size {
        return Err(Error::Constraint(format!(
            "model expects [N, {}, {}, {}] input, got {:?}",
            bb.input_channels,
            bb.input_size,
            bb.input_size,
            images.shape()
        )));
    }
    let n = dims.0;
    let h1 = bb.fused_size();
    let k = opts.k_override.unwrap_or(head.k);
    if k == 0 || k > h1 * h1 {
        return Err(Error::Config(format!(
            "pool size k must be 1..={}, got {k}",
            h1 * h1
        )));
    }

    let mut g = Graph {
        tape: Tape::new(),
        params,
        nodes: BTreeMap::new(),
        params_rg: opts.params_require_grad,
        train: matches!(mode, Mode::Train { .. }),
        bn_updates: Vec::new(),
    };

    let input = g
        .tape
        .leaf(images.clone().with_requires_grad(opts.input_requires_grad));

    let mut x = g.conv(input, "stem.conv.w", 2, 1, None)?;
    x = g.bn(x, "stem.bn")?;
    x = g.tape.relu(x);

    let mut stage_outputs: Vec<NodeId> = Vec::with_capacity(bb.stages());
    let mut blocks = block_specs(bb).into_iter().peekable();
    for si in 0..bb.stages() {
        for _ in 0..bb.blocks_per_stage {
            let spec = blocks.next().expect("spec count matches loop");
            debug_assert!(spec.name.starts_with(&format!("s{si}.")));
            let mut y = g.conv(x, &format!("{}.conv1.w", spec.name), spec.stride, 1, None)?;
            y = g.bn(y, &format!("{}.bn1", spec.name))?;
            y = g.tape.relu(y);
            y = g.conv(y, &format!("{}.conv2.w", spec.name), 1, 1, None)?;
            y = g.bn(y, &format!("{}.bn2", spec.name))?;
            let skip = if spec.projected {
                let s = g.conv(x, &format!("{}.proj.w", spec.name), spec.stride, 0, None)?;
                g.bn(s, &format!("{}.projbn", spec.name))?
            } else {
                x
            };
            x = g.tape.add(y, skip)?;
            x = g.tape.relu(x);
        }
        stage_outputs.push(x);
    }

    // Fuse the selected trailing stages at the resolution of the largest.
    let first = bb.stages() - bb.feature_maps_used;
    let mut fused: Option<NodeId> = None;
    for (li, si) in (first..bb.stages()).enumerate() {
        let mut m = g.conv(stage_outputs[si], &format!("fpn.l{li}.w"), 1, 1, None)?;
        let factor = h1 / bb.stage_size(si);
        m = g.tape.upsample_nearest(m, factor)?;
        fused = Some(match fused {
            None => m,
            Some(acc) => g.tape.add(acc, m)?,
        });
    }
    let mut fused = g.tape.relu(fused.expect("feature_maps_used >= 1"));
    let fused_handle = fused;
    if let Mode::Train { dropout_seed } = mode {
        fused = g.tape.dropout(fused, head.dropout, true, dropout_seed)?;
    }

    let feature_map = g.conv(fused, "head.final.w", 1, 0, Some("head.final.b"))?;
    let flat = g.tape.reshape(feature_map, &[n, head.num_classes, h1 * h1])?;
    let logits = g.tape.topk_mean(flat, k)?;

    Ok(ForwardPass {
        tape: g.tape,
        input,
        fused: fused_handle,
        feature_map,
        logits,
        param_nodes: g.nodes,
        bn_updates: g.bn_updates,
    })
}

/// Handles to the loss terms added on top of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub loss: NodeId,
    pub ce: NodeId,
    pub l1: NodeId,
}

/// Attaches cross-entropy plus `lambda * mean |feature_map|` to the pass.
/// With lambda = 0 the returned loss node IS the cross-entropy node, so the
/// penalty-free path is bit-identical to plain classification.
pub fn model_loss<F: Scalar>(fp: &mut ForwardPass<F>, labels: &[usize], lambda: f64) -> Result<LossNodes> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let ce = fp.tape.softmax_ce(fp.logits, labels)?;
    let l1 = fp.tape.l1_mean(fp.feature_map)?;
    let loss = if lambda == 0.0 {
        ce
    } else {
        let scaled = fp.tape.scale(l1, F::of_f64(lambda))?;
        fp.tape.add(scaled, ce)?
    };
    Ok(LossNodes { loss, ce, l1 })
}

/// Class decisions for a batch.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// Softmax probabilities, row-major [N * num_classes].
    pub probs: Vec<f64>,
    pub num_classes: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode classification of a batch.
pub fn predict<F: Scalar>(params: &ModelParams<F>, images: &Tensor<F>, k_override: Option<usize>) -> Result<Prediction> {
    let fp = forward(
        params,
        images,
        Mode::Eval,
        ForwardOpts {
            params_require_grad: false,
            input_requires_grad: false,
            k_override,
        },
    )?;
    let shape = fp.tape.shape(fp.logits).to_vec();
    let (n, c) = (shape[0], shape[1]);
    let logits: Vec<f64> = fp.tape.value(fp.logits).iter().map(|v| v.as_f64()).collect();
    let probs = softmax_rows(&logits, n, c);
    let labels = (0..n).map(|i| argmax(&probs[i * c..(i + 1) * c])).collect();
    Ok(Prediction {
        labels,
        probs,
        num_classes: c,
    })
}

/// A per-image saliency map normalized to [0, 1].
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Cam {
    pub size: usize,
    pub values: Vec<f64>,
}

impl Cam {
    /// Fraction of cells at or above `threshold`.
    pub fn active_fraction(&self, threshold: f64) -> f64 {
        let hits = self.values.iter().filter(|&&v| v >= threshold).count();
        hits as f64 / self.values.len() as f64
    }
}

/// Reads the class channel out of a feature map [N, C, H, W], scales it to
/// `target_size` by nearest neighbor, and min-max normalizes per image.
/// A constant channel maps to all zeros.
pub fn cam_mode<F: Scalar>(feature_map: &Tensor<F>, class_idx: usize, target_size: usize) -> Result<Vec<Cam>> {
    let (n, c, h, w) = feature_map.dims4()?;
    if class_idx >= c {
        return Err(Error::Constraint(format!(
            "class index {class_idx} out of range for {c} channels"
        )));
    }
    if h != w {
        return Err(Error::Constraint(format!(
            "feature map must be square, got {h}x{w}"
        )));
    }
    if target_size % h != 0 || target_size == 0 {
        return Err(Error::Config(format!(
            "target size {target_size} must be a positive multiple of the map size {h}"
        )));
    }
    let factor = target_size / h;
    let data = feature_map.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let base = (i * c + class_idx) * h * w;
        let channel: Vec<f64> = data[base..base + h * w].iter().map(|v| v.as_f64()).collect();
        out.push(normalized_cam(&channel, h, factor));
    }
    Ok(out)
}

/// Upsample by `factor` (nearest) then min-max normalize; constant input
/// becomes all zeros. Shared by the direct and gradient-weighted map paths.
pub(crate) fn normalized_cam(channel: &[f64], size: usize, factor: usize) -> Cam {
    let target = size * factor;
    let mut values = vec![0.0f64; target * target];
    let lo = channel.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = channel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 0.0 {
        for r in 0..target {
            for cidx in 0..target {
                let v = channel[(r / factor) * size + cidx / factor];
                values[r * target + cidx] = (v - lo) / (hi - lo);
            }
        }
    }
    Cam {
        size: target,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, BackboneConfig, HeadConfig};

    fn tiny() -> ModelParams<f32> {
        let bb = BackboneConfig {
            input_size: 32,
            input_channels: 3,
            stage_widths: vec![4, 6],
            blocks_per_stage: 1,
            feature_maps_used: 2,
        };
        let head = HeadConfig {
            fpn_channels: 5,
            num_classes: 3,
            k: 4,
            lambda: 1.0,
            dropout: 0.0,
        };
        build_model(&bb, &head, 11).unwrap()
    }

    fn tiny_batch(n: usize, seed: u64) -> Tensor<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * 3 * 32 * 32).map(|_| rng.random::<f32>()).collect();
        Tensor::from_vec(&[n, 3, 32, 32], data).unwrap()
    }

    #[test]
    fn shapes_come_out_right() {
        let m = tiny();
        let x = tiny_batch(2, 0);
        let fp = forward(&m, &x, Mode::Eval, ForwardOpts::default()).unwrap();
        assert_eq!(fp.tape.shape(fp.feature_map), &[2, 3, 8, 8]);
        assert_eq!(fp.tape.shape(fp.logits), &[2, 3]);
        assert_eq!(fp.picked().len(), 2 * 3 * 4);
    }

    #[test]
    fn eval_is_deterministic_and_train_updates_running_stats() {
        let m = tiny();
        let x = tiny_batch(2, 1);
        let a = forward(&m, &x, Mode::Eval, ForwardOpts::default()).unwrap();
        let b = forward(&m, &x, Mode::Eval, ForwardOpts::default()).unwrap();
        assert_eq!(a.tape.value(a.logits), b.tape.value(b.logits));
        assert!(a.bn_updates.is_empty());

        let t = forward(&m, &x, Mode::Train { dropout_seed: 9 }, ForwardOpts::default()).unwrap();
        // One update per batch-norm layer: stem + 2 blocks * (bn1, bn2, projbn).
        assert_eq!(t.bn_updates.len(), 1 + 2 * 3);
        assert!(t
            .bn_updates
            .iter()
            .any(|(name, r)| name == "stem.bn" && r.mean.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn k_override_changes_pooling() {
        let m = tiny();
        let x = tiny_batch(1, 2);
        let a = forward(&m, &x, Mode::Eval, ForwardOpts { k_override: Some(1), ..ForwardOpts::default() }).unwrap();
        let b = forward(&m, &x, Mode::Eval, ForwardOpts { k_override: Some(64), ..ForwardOpts::default() }).unwrap();
        assert_ne!(a.tape.value(a.logits), b.tape.value(b.logits));
        let bad = forward(&m, &x, Mode::Eval, ForwardOpts { k_override: Some(65), ..ForwardOpts::default() });
        assert!(bad.is_err());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = tiny();
        let x = Tensor::<f32>::zeros(&[1, 3, 16, 16]).unwrap();
        assert!(forward(&m, &x, Mode::Eval, ForwardOpts::default()).is_err());
    }

    #[test]
    fn zero_lambda_loss_is_the_ce_node() {
        let m = tiny();
        let x = tiny_batch(2, 3);
        let mut fp = forward(&m, &x, Mode::Eval, ForwardOpts::default()).unwrap();
        let nodes = model_loss(&mut fp, &[0, 2], 0.0).unwrap();
        assert_eq!(nodes.loss, nodes.ce);
        let mut fp2 = forward(&m, &x, Mode::Eval, ForwardOpts::default()).unwrap();
        let with = model_loss(&mut fp2, &[0, 2], 0.5).unwrap();
        assert_ne!(with.loss, with.ce);
        let l1 = fp2.tape.scalar_value(with.l1);
        let ce = fp2.tape.scalar_value(with.ce);
        let loss = fp2.tape.scalar_value(with.loss);
        assert!((loss - (ce + 0.5 * l1)).abs() < 1e-6);
    }

    #[test]
    fn gradients_reach_input_and_params() {
        let m = tiny();
        let x = tiny_batch(2, 4);
        let mut fp = forward(
            &m,
            &x,
            Mode::Train { dropout_seed: 0 },
            ForwardOpts {
                input_requires_grad: true,
                ..ForwardOpts::default()
            },
        )
        .unwrap();
        let nodes = model_loss(&mut fp, &[1, 0], 1.0).unwrap();
        fp.tape.backward(nodes.loss).unwrap();
        let gin = fp.tape.grad(fp.input).expect("input grad");
        assert!(gin.iter().any(|&v| v != 0.0));
        for name in ["stem.conv.w", "head.final.w", "head.final.b", "s1.b0.bn2.gamma"] {
            let g = fp.tape.grad(fp.param_nodes[name]).expect(name);
            assert!(g.iter().any(|&v| v != 0.0), "{name} grad all zero");
        }
    }

    #[test]
    fn predict_reports_probabilities_that_sum_to_one() {
        let m = tiny();
        let x = tiny_batch(3, 5);
        let p = predict(&m, &x, None).unwrap();
        assert_eq!(p.labels.len(), 3);
        for i in 0..3 {
            let s: f64 = p.probs[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(p.labels[i] < 3);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn cam_mode_normalizes_and_upsamples() {
        // One image, two classes, 2x2 maps.
        let fm = Tensor::from_vec(
            &[1, 2, 2, 2],
            vec![0.0f32, 1.0, 2.0, 4.0, /* class 1: */ 3.0, 3.0, 3.0, 3.0],
        )
        .unwrap();
        let cams = cam_mode(&fm, 0, 4).unwrap();
        assert_eq!(cams[0].size, 4);
        assert_eq!(cams[0].values[0], 0.0);
        assert_eq!(cams[0].values[15], 1.0);
        assert_eq!(cams[0].values[1], 0.0); // nearest copy of cell (0,0)
        assert_eq!(cams[0].values[2], 0.25); // cell (0,1)

        // Constant channel collapses to zeros, not NaN.
        let flat = cam_mode(&fm, 1, 4).unwrap();
        assert!(flat[0].values.iter().all(|&v| v == 0.0));

        assert!(cam_mode(&fm, 2, 4).is_err());
        assert!(cam_mode(&fm, 0, 3).is_err());
    }

    #[test]
    fn dropout_train_passes_differ_by_seed_but_eval_ignores_it() {
        let bb = BackboneConfig {
            input_size: 32,
            input_channels: 3,
            stage_widths: vec![4, 6],
            blocks_per_stage: 1,
            feature_maps_used: 2,
        };
        let head = HeadConfig {
            fpn_channels: 5,
            num_classes: 3,
            k: 4,
            lambda: 1.0,
            dropout: 0.5,
        };
        let m = build_model::<f32>(&bb, &head, 11).unwrap();
        let x = tiny_batch(2, 6);
        let a = forward(&m, &x, Mode::Train { dropout_seed: 1 }, ForwardOpts::default()).unwrap();
        let b = forward(&m, &x, Mode::Train { dropout_seed: 2 }, ForwardOpts::default()).unwrap();
        let c = forward(&m, &x, Mode::Train { dropout_seed: 1 }, ForwardOpts::default()).unwrap();
        assert_ne!(a.tape.value(a.logits), b.tape.value(b.logits));
        assert_eq!(a.tape.value(a.logits), c.tape.value(c.logits));
        let e = forward(&m, &x, Mode::Eval, ForwardOpts::default()).unwrap();
        let f = forward(&m, &x, Mode::Eval, ForwardOpts::default()).unwrap();
        assert_eq!(e.tape.value(e.logits), f.tape.value(f.logits));
    }
}
