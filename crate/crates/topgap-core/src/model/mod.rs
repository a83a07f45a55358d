//! The model: a small residual backbone, an FPN-style fusion head ending in
//! a per-class feature map, and top-k spatial pooling into logits.

pub mod forward;
pub mod train;

pub use forward::{argmax, cam_mode, forward, model_loss, predict, Cam, ForwardOpts, ForwardPass, LossNodes, Mode, Prediction};
pub use train::{evaluate, train_model, train_val_split, EpochRow, EvalMetrics, TrainConfig, TrainLog};

use crate::diffcore::{BnRunning, Scalar, Tensor};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Backbone geometry. The stem halves the input once; each stage halves it
/// again, so stage i outputs input_size / 2^(i+2) with stage_widths[i]
/// channels.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// How many trailing stage outputs feed the fusion head.
    pub feature_maps_used: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: 64,
            input_channels: 3,
            stage_widths: vec![8, 16, 32],
            blocks_per_stage: 1,
            feature_maps_used: 3,
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// Edge length of stage i's output.
    pub fn stage_size(&self, i: usize) -> usize {
        self.input_size >> (i + 2)
    }

    /// Edge length of the fused map, i.e. of the largest selected stage.
    pub fn fused_size(&self) -> usize {
        self.stage_size(self.stages() - self.feature_maps_used)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be >= 1".into()));
        }
        if self.stage_widths.is_empty() || self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "stage_widths must be non-empty and positive, got {:?}",
                self.stage_widths
            )));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be >= 1".into()));
        }
        let down = 1usize << (self.stages() + 1);
        if self.input_size % down != 0 || self.input_size / down == 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {down} for {} stages",
                self.input_size,
                self.stages()
            )));
        }
        if self.feature_maps_used == 0 || self.feature_maps_used > self.stages() {
            return Err(Error::Config(format!(
                "feature_maps_used must be 1..={}, got {}",
                self.stages(),
                self.feature_maps_used
            )));
        }
        Ok(())
    }
}

/// Fusion head and loss settings.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HeadConfig {
    pub fpn_channels: usize,
    pub num_classes: usize,
    /// Pool size: mean of the k largest values per class channel. k = 1 is
    /// max pooling, k = fused_size^2 is plain average pooling.
    pub k: usize,
    /// Weight of the mean-|x| penalty on the class feature map.
    pub lambda: f64,
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            fpn_channels: 48,
            num_classes: 4,
            k: 16,
            lambda: 1.0,
            dropout: 0.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self, fused_size: usize) -> Result<()> {
        if self.fpn_channels == 0 {
            return Err(Error::Config("fpn_channels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        let hw = fused_size * fused_size;
        if self.k == 0 || self.k > hw {
            return Err(Error::Config(format!(
                "k must be 1..={hw} for a {fused_size}x{fused_size} fused map, got {}",
                self.k
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// All weights and running statistics, keyed by stable names. BTreeMap
/// ordering makes construction, checkpointing, and optimizer traversal
/// deterministic.
#[derive(Clone, Debug)]
pub struct ModelParams<F: Scalar = f32> {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub seed: u64,
    tensors: BTreeMap<String, Tensor<F>>,
    trainable: BTreeSet<String>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn tensors(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter '{name}'")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(|s| s.as_str())
    }

    /// Trainable tensors cloned into a map, for the optimizer.
    pub fn trainable_map(&self) -> BTreeMap<String, Tensor<F>> {
        self.trainable
            .iter()
            .map(|n| (n.clone(), self.tensors[n].clone()))
            .collect()
    }

    /// Writes optimizer-updated tensors back, shape-checked.
    pub fn absorb(&mut self, updated: &BTreeMap<String, Tensor<F>>) -> Result<()> {
        for (name, t) in updated {
            let slot = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::State(format!("unknown parameter '{name}'")))?;
            if slot.shape() != t.shape() {
                return Err(Error::State(format!(
                    "parameter '{name}' changed shape: {:?} -> {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Running stats of the batch-norm layer at `prefix` (e.g. "stem.bn").
    pub fn bn_running(&self, prefix: &str) -> Result<BnRunning<F>> {
        Ok(BnRunning {
            mean: self.tensor(&format!("{prefix}.running_mean"))?.data().to_vec(),
            var: self.tensor(&format!("{prefix}.running_var"))?.data().to_vec(),
        })
    }

    pub fn set_bn_running(&mut self, prefix: &str, running: &BnRunning<F>) -> Result<()> {
        let c = running.mean.len();
        let mean = Tensor::from_vec(&[c], running.mean.clone())?;
        let var = Tensor::from_vec(&[c], running.var.clone())?;
        let mname = format!("{prefix}.running_mean");
        let vname = format!("{prefix}.running_var");
        if !self.tensors.contains_key(&mname) {
            return Err(Error::State(format!("unknown batch-norm layer '{prefix}'")));
        }
        self.tensors.insert(mname, mean);
        self.tensors.insert(vname, var);
        Ok(())
    }

    /// Rebuilds a parameter set from checkpoint data.
    pub(crate) fn from_parts(
        backbone: BackboneConfig,
        head: HeadConfig,
        seed: u64,
        tensors: BTreeMap<String, Tensor<F>>,
        trainable: BTreeSet<String>,
    ) -> Result<Self> {
        backbone.validate()?;
        head.validate(backbone.fused_size())?;
        let expect = build_model::<F>(&backbone, &head, seed)?;
        if expect.tensors.len() != tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint carries {} tensors, architecture needs {}",
                tensors.len(),
                expect.tensors.len()
            )));
        }
        for (name, t) in &expect.tensors {
            let got = tensors
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor '{name}'")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor '{name}' has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(ModelParams {
            backbone,
            head,
            seed,
            tensors,
            trainable,
        })
    }

    /// Same weights, different pool size — used to sweep k without
    /// retraining from scratch.
    pub fn with_pool_size(&self, k: usize) -> Result<Self> {
        let head = HeadConfig { k, ..self.head.clone() };
        head.validate(self.backbone.fused_size())?;
        Ok(ModelParams {
            head,
            ..self.clone()
        })
    }

    /// Same weights, different penalty weight.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let head = HeadConfig { lambda, ..self.head.clone() };
        head.validate(self.backbone.fused_size())?;
        Ok(ModelParams {
            head,
            ..self.clone()
        })
    }

    /// Casts every tensor to another float width (f32 -> f64 for checks).
    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            backbone: self.backbone.clone(),
            head: self.head.clone(),
            seed: self.seed,
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<G>()))
                .collect(),
            trainable: self.trainable.clone(),
        }
    }
}

/// Residual-block layout used by the forward pass and the initializer.
/// Block 0 of every stage downsamples (stride 2) and needs a projection;
/// later blocks are identity-skip.
pub(crate) struct BlockSpec {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub projected: bool,
}

pub(crate) fn block_specs(cfg: &BackboneConfig) -> Vec<BlockSpec> {
    let mut specs = Vec::new();
    let mut in_ch = cfg.stage_widths[0];
    for (si, &width) in cfg.stage_widths.iter().enumerate() {
        for bi in 0..cfg.blocks_per_stage {
            let stride = if bi == 0 { 2 } else { 1 };
            let projected = stride != 1 || in_ch != width;
            specs.push(BlockSpec {
                name: format!("s{si}.b{bi}"),
                in_ch,
                out_ch: width,
                stride,
                projected,
            });
            in_ch = width;
        }
    }
    specs
}

/// Builds parameters with He-normal conv weights from a seeded stream.
/// Identical (configs, seed) give identical parameters.
pub fn build_model<F: Scalar>(
    backbone: &BackboneConfig,
    head: &HeadConfig,
    seed: u64,
) -> Result<ModelParams<F>> {
    backbone.validate()?;
    head.validate(backbone.fused_size())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors: BTreeMap<String, Tensor<F>> = BTreeMap::new();
    let mut trainable: BTreeSet<String> = BTreeSet::new();

    let conv = |tensors: &mut BTreeMap<String, Tensor<F>>,
                    trainable: &mut BTreeSet<String>,
                    rng: &mut ChaCha8Rng,
                    name: String,
                    out_c: usize,
                    in_c: usize,
                    kh: usize,
                    kw: usize|
     -> Result<()> {
        let fan_in = (in_c * kh * kw) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
            .map_err(|e| Error::Numeric(format!("he init: {e}")))?;
        let data: Vec<F> = (0..out_c * in_c * kh * kw)
            .map(|_| F::of_f64(normal.sample(rng)))
            .collect();
        trainable.insert(name.clone());
        tensors.insert(name, Tensor::from_vec(&[out_c, in_c, kh, kw], data)?);
        Ok(())
    };
    let bn = |tensors: &mut BTreeMap<String, Tensor<F>>,
                  trainable: &mut BTreeSet<String>,
                  prefix: String,
                  c: usize|
     -> Result<()> {
        for (suffix, value, train) in [
            ("gamma", F::one(), true),
            ("beta", F::zero(), true),
            ("running_mean", F::zero(), false),
            ("running_var", F::one(), false),
        ] {
            let name = format!("{prefix}.{suffix}");
            if train {
                trainable.insert(name.clone());
            }
            tensors.insert(name, Tensor::full(&[c], value)?);
        }
        Ok(())
    };

    let w0 = backbone.stage_widths[0];
    conv(&mut tensors, &mut trainable, &mut rng, "stem.conv.w".into(), w0, backbone.input_channels, 3, 3)?;
    bn(&mut tensors, &mut trainable, "stem.bn".into(), w0)?;

    for spec in block_specs(backbone) {
        conv(&mut tensors, &mut trainable, &mut rng, format!("{}.conv1.w", spec.name), spec.out_ch, spec.in_ch, 3, 3)?;
        bn(&mut tensors, &mut trainable, format!("{}.bn1", spec.name), spec.out_ch)?;
        conv(&mut tensors, &mut trainable, &mut rng, format!("{}.conv2.w", spec.name), spec.out_ch, spec.out_ch, 3, 3)?;
        bn(&mut tensors, &mut trainable, format!("{}.bn2", spec.name), spec.out_ch)?;
        if spec.projected {
            conv(&mut tensors, &mut trainable, &mut rng, format!("{}.proj.w", spec.name), spec.out_ch, spec.in_ch, 1, 1)?;
            bn(&mut tensors, &mut trainable, format!("{}.projbn", spec.name), spec.out_ch)?;
        }
    }

    // Fusion convs have no bias: an all-zero backbone must yield a fused
    // map equal to the final conv's bias broadcast.
    let first = backbone.stages() - backbone.feature_maps_used;
    for (li, si) in (first..backbone.stages()).enumerate() {
        conv(
            &mut tensors,
            &mut trainable,
            &mut rng,
            format!("fpn.l{li}.w"),
            head.fpn_channels,
            backbone.stage_widths[si],
            3,
            3,
        )?;
    }
    conv(&mut tensors, &mut trainable, &mut rng, "head.final.w".into(), head.num_classes, head.fpn_channels, 1, 1)?;
    trainable.insert("head.final.b".to_string());
    tensors.insert("head.final.b".to_string(), Tensor::zeros(&[head.num_classes])?);

    Ok(ModelParams {
        backbone: backbone.clone(),
        head: head.clone(),
        seed,
        tensors,
        trainable,
    })
}
