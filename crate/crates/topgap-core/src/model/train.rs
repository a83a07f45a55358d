//! Adam training loop with a held-out validation split, per-epoch metrics,
//! and a digestable log for reproducibility checks.

use super::forward::{argmax, forward, model_loss, ForwardOpts, Mode};
use super::ModelParams;
use crate::data::{split, Dataset};
use crate::diffcore::{adam_step, AdamHyper, AdamState, Scalar};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::time::Instant;

const TAG_SPLIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_DROPOUT: u64 = 3;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hyper: AdamHyper,
    /// Fraction of the training data held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 32,
            hyper: AdamHyper::default(),
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must be in (0,1), got {}",
                self.val_fraction
            )));
        }
        self.hyper.validate()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Mean |class feature map| over the validation set.
    pub l1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    /// Wall-clock duration; excluded from the digest on purpose.
    pub wall_seconds: f64,
}

impl TrainLog {
    /// Content hash of the seed and metric rows. Two runs of the same
    /// configuration must agree on this even when their timings differ.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Digestable<'a> {
            seed: u64,
            rows: &'a [EpochRow],
        }
        let json = serde_json::to_string(&Digestable {
            seed: self.seed,
            rows: &self.rows,
        })
        .expect("log rows serialize");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "l1"])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for r in &self.rows {
            wtr.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.train_acc.to_string(),
                r.val_loss.to_string(),
                r.val_acc.to_string(),
                r.l1.to_string(),
            ])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// The stratified train/validation split used inside `train_model`,
/// exposed so downstream analysis can reconstruct exactly what the model
/// never trained on.
pub fn train_val_split(data: &Dataset, cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let parts = split(
        data,
        &[1.0 - cfg.val_fraction, cfg.val_fraction],
        true,
        crate::seeds::derive(cfg.seed, TAG_SPLIT, 0),
    )?;
    let mut it = parts.into_iter();
    Ok((it.next().unwrap(), it.next().unwrap()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub mean_ce: f64,
    pub mean_l1: f64,
    pub count: usize,
}

/// Eval-mode metrics over a dataset; `k_override` swaps the pool size
/// without touching the parameters.
pub fn evaluate(
    params: &ModelParams<f32>,
    data: &Dataset,
    batch_size: usize,
    k_override: Option<usize>,
) -> Result<EvalMetrics> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    let (mut loss_sum, mut ce_sum, mut l1_sum) = (0.0f64, 0.0f64, 0.0f64);
    for chunk in idx.chunks(batch_size) {
        let (images, labels) = data.batch(chunk)?;
        let mut fp = forward(
            params,
            &images,
            Mode::Eval,
            ForwardOpts {
                params_require_grad: false,
                input_requires_grad: false,
                k_override,
            },
        )?;
        let nodes = model_loss(&mut fp, &labels, params.head.lambda)?;
        let b = chunk.len() as f64;
        loss_sum += fp.tape.scalar_value(nodes.loss).as_f64() * b;
        ce_sum += fp.tape.scalar_value(nodes.ce).as_f64() * b;
        l1_sum += fp.tape.scalar_value(nodes.l1).as_f64() * b;
        let logits = fp.tape.value(fp.logits);
        let c = params.head.num_classes;
        for (i, &label) in labels.iter().enumerate() {
            let row: Vec<f64> = logits[i * c..(i + 1) * c].iter().map(|v| v.as_f64()).collect();
            if argmax(&row) == label {
                correct += 1;
            }
        }
    }
    let n = data.len() as f64;
    Ok(EvalMetrics {
        accuracy: correct as f64 / n,
        mean_loss: loss_sum / n,
        mean_ce: ce_sum / n,
        mean_l1: l1_sum / n,
        count: data.len(),
    })
}

/// Trains with Adam, keeping the parameters from the epoch with the best
/// validation accuracy (earliest epoch wins ties). Returns those parameters
/// plus the full metric log.
pub fn train_model(
    mut params: ModelParams<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainLog)> {
    cfg.validate()?;
    data.validate()?;
    if data.num_classes != params.head.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            data.num_classes, params.head.num_classes
        )));
    }
    if data.image_size != params.backbone.input_size {
        return Err(Error::Config(format!(
            "dataset images are {0}x{0}, model expects {1}x{1}",
            data.image_size, params.backbone.input_size
        )));
    }

    let started = Instant::now();
    let (train_set, val_set) = train_val_split(data, cfg)?;
    let mut live = params.trainable_map();
    let mut adam = AdamState::new();
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ModelParams<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(cfg.seed, TAG_SHUFFLE, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (images, labels) = train_set.batch(chunk)?;
            let dropout_seed = crate::seeds::derive(cfg.seed, TAG_DROPOUT, (epoch as u64) << 32 | bi as u64);
            let mut fp = forward(
                &params,
                &images,
                Mode::Train { dropout_seed },
                ForwardOpts {
                    params_require_grad: true,
                    input_requires_grad: false,
                    k_override: None,
                },
            )?;
            let nodes = model_loss(&mut fp, &labels, params.head.lambda)?;
            let loss = fp.tape.scalar_value(nodes.loss).as_f64();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch}, batch {bi}: loss = {loss}"
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            let logits = fp.tape.value(fp.logits);
            let c = params.head.num_classes;
            for (i, &label) in labels.iter().enumerate() {
                let row: Vec<f64> = logits[i * c..(i + 1) * c].iter().map(|v| v.as_f64()).collect();
                if argmax(&row) == label {
                    correct += 1;
                }
            }

            fp.tape.backward(nodes.loss)?;
            let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            for name in params.trainable_names() {
                let node = *fp.param_nodes.get(name).ok_or_else(|| {
                    Error::State(format!("trainable parameter '{name}' never entered the graph"))
                })?;
                let g = fp
                    .tape
                    .grad(node)
                    .ok_or_else(|| Error::State(format!("no gradient for parameter '{name}'")))?;
                grads.insert(name.to_string(), g.to_vec());
            }
            let updates = fp.bn_updates;
            for (prefix, running) in &updates {
                params.set_bn_running(prefix, running)?;
            }
            adam_step(&mut live, &grads, &mut adam, &cfg.hyper)?;
            params.absorb(&live)?;
        }

        let val = evaluate(&params, &val_set, cfg.batch_size, None)?;
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_loss: val.mean_loss,
            val_acc: val.accuracy,
            l1: val.mean_l1,
        };
        log::info!(
            "epoch {}: train loss {:.4} acc {:.3} | val loss {:.4} acc {:.3} | l1 {:.5}",
            row.epoch,
            row.train_loss,
            row.train_acc,
            row.val_loss,
            row.val_acc,
            row.l1
        );
        let better = match &best {
            None => true,
            Some((acc, _)) => val.accuracy > *acc,
        };
        if better {
            best = Some((val.accuracy, params.clone()));
        }
        rows.push(row);
    }

    let final_params = match best {
        Some((_, p)) => p,
        None => params,
    };
    Ok((
        final_params,
        TrainLog {
            seed: cfg.seed,
            rows,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    ))
}
