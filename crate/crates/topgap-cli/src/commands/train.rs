//! `topgap train`: fit a model on a dataset folder and save the
//! best-validation checkpoint plus the per-epoch log.

use crate::manifest::Recorder;
use crate::opts::{from_file, need, pick};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use topgap_core::data::{kfold, load_dataset, LoadOptions};
use topgap_core::model::evaluate;
use topgap_core::{
    build_model, load_checkpoint, save_checkpoint, train_model, AdamHyper, BackboneConfig,
    Dataset, Error, HeadConfig, ModelParams, Result, TrainConfig, TrainLog,
};

#[derive(clap::Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainOpts {
    /// Dataset folder (images/<class>/*.png plus manifest).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pool size: mean of the k largest class-map cells. 0 selects the
    /// plain-GAP baseline: k = H1*W1 and the sparsity weight forced to 0.
    #[arg(long)]
    k: Option<usize>,
    /// Weight of the mean-|x| penalty on the class feature map.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Fraction of the train folder held out for validation.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Seed for weight init, shuffling, and dropout.
    #[arg(long)]
    seed: Option<u64>,
    /// Stage widths of the backbone, e.g. 8,16,32.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    blocks: Option<usize>,
    /// How many trailing stage outputs feed the fusion head.
    #[arg(long)]
    feature_maps: Option<usize>,
    #[arg(long)]
    fpn_channels: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Run stratified k-fold cross-validation instead of a single fit;
    /// the checkpoint comes from the best held-fold model.
    #[arg(long)]
    cv: Option<usize>,
    /// Warm-start from a checkpoint instead of a fresh init: the
    /// architecture comes from the file and only k/lambda are re-applied.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Resolved {
    data: PathBuf,
    backbone: BackboneConfig,
    head: HeadConfig,
    /// The pool size as requested; 0 is the GAP-baseline switch.
    requested_k: usize,
    train: TrainConfig,
    cv: Option<usize>,
    init_from: Option<PathBuf>,
    out: PathBuf,
}

fn resolve(o: TrainOpts, file: Option<serde_json::Value>, image_size: usize, classes: usize) -> Result<Resolved> {
    let f: TrainOpts = from_file(file)?;
    let init_from = o.init_from.or(f.init_from);
    // Warm starts take architecture and head defaults from the checkpoint.
    let (backbone, head_base) = match &init_from {
        Some(path) => {
            let p = load_checkpoint(path)?.0;
            (p.backbone, Some(p.head))
        }
        None => {
            let db = BackboneConfig::default();
            (
                BackboneConfig {
                    input_size: image_size,
                    input_channels: 3,
                    stage_widths: pick(o.widths, f.widths, db.stage_widths.clone()),
                    blocks_per_stage: pick(o.blocks, f.blocks, db.blocks_per_stage),
                    feature_maps_used: pick(o.feature_maps, f.feature_maps, db.feature_maps_used),
                },
                None,
            )
        }
    };
    backbone.validate()?;
    let h1 = backbone.fused_size();

    let dh = head_base.unwrap_or_default();
    let requested_k = pick(o.k, f.k, dh.k);
    // k = 0 switches in the average-pooling baseline for head-to-head runs.
    let (k, lambda) = if requested_k == 0 {
        (h1 * h1, 0.0)
    } else {
        (requested_k, pick(o.lambda, f.lambda, dh.lambda))
    };
    let head = HeadConfig {
        fpn_channels: pick(o.fpn_channels, f.fpn_channels, dh.fpn_channels),
        num_classes: classes,
        k,
        lambda,
        dropout: pick(o.dropout, f.dropout, dh.dropout),
    };
    head.validate(h1)?;

    let dt = TrainConfig::default();
    let train = TrainConfig {
        epochs: pick(o.epochs, f.epochs, dt.epochs),
        batch_size: pick(o.batch, f.batch, dt.batch_size),
        hyper: AdamHyper {
            lr: pick(o.lr, f.lr, dt.hyper.lr),
            ..AdamHyper::default()
        },
        val_fraction: pick(o.val_fraction, f.val_fraction, dt.val_fraction),
        seed: pick(o.seed, f.seed, dt.seed),
    };
    train.validate()?;

    if let Some(folds) = o.cv.or(f.cv) {
        if folds < 2 {
            return Err(Error::Config(format!("--cv needs >= 2 folds, got {folds}")));
        }
    }
    Ok(Resolved {
        data: need(o.data, f.data, "data")?,
        backbone,
        head,
        requested_k,
        train,
        cv: o.cv.or(f.cv),
        init_from,
        out: pick(o.out, f.out, PathBuf::from(".")),
    })
}

/// Fresh weights, or checkpoint weights with the resolved pool size,
/// penalty, and dropout applied on top.
fn initial_params(r: &Resolved) -> Result<ModelParams<f32>> {
    match &r.init_from {
        None => build_model::<f32>(&r.backbone, &r.head, r.train.seed),
        Some(path) => {
            let (mut params, _) = load_checkpoint(path)?;
            if r.head.fpn_channels != params.head.fpn_channels
                || r.head.num_classes != params.head.num_classes
            {
                return Err(Error::Config(
                    "warm starts can change k, lambda, and dropout only; \
                     channel and class counts are fixed by the checkpoint"
                        .into(),
                ));
            }
            // Validated against the checkpoint's fused size in resolve().
            params.head = r.head.clone();
            Ok(params)
        }
    }
}

fn write_log(log: &TrainLog, path: &Path) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    log.write_csv(file)
}

fn best_val(log: &TrainLog) -> f64 {
    log.rows.iter().map(|r| r.val_acc).fold(f64::NEG_INFINITY, f64::max)
}

fn checkpoint_summary(r: &Resolved, val_accuracy: f64, digest: &str) -> BTreeMap<String, serde_json::Value> {
    let mut s = BTreeMap::new();
    s.insert("data".into(), serde_json::json!(r.data.to_string_lossy()));
    s.insert("requested_k".into(), serde_json::json!(r.requested_k));
    s.insert("val_accuracy".into(), serde_json::json!(val_accuracy));
    s.insert("train_digest".into(), serde_json::json!(digest));
    s.insert("train_seed".into(), serde_json::json!(r.train.seed));
    s.insert("epochs".into(), serde_json::json!(r.train.epochs));
    s
}

pub fn run(o: TrainOpts, file: Option<serde_json::Value>, threads: usize) -> Result<()> {
    // Peek at the dataset first: the architecture is sized from it.
    let data_path = o
        .data
        .clone()
        .or_else(|| {
            file.as_ref()
                .and_then(|v| v.get("data"))
                .and_then(|v| v.as_str())
                .map(PathBuf::from)
        })
        .ok_or_else(|| Error::Config("--data is required (flag or config file)".into()))?;
    let data = load_dataset(&data_path, &LoadOptions { with_masks: false, resize_to: None })?;
    let r = resolve(o, file, data.image_size, data.num_classes)?;
    std::fs::create_dir_all(&r.out)?;
    let mut rec = Recorder::new("train", &r, vec![r.train.seed], threads, &r.out)?;
    log::info!(
        "training on {} samples, {} classes, k={} lambda={}",
        data.len(),
        data.num_classes,
        r.head.k,
        r.head.lambda
    );

    match r.cv {
        None => {
            let params = initial_params(&r)?;
            let (trained, log) = train_model(params, &data, &r.train)?;
            let log_path = r.out.join("train_log.csv");
            write_log(&log, &log_path)?;
            rec.add(&log_path);

            let ck_path = r.out.join("checkpoint.tgcp");
            save_checkpoint(&trained, &checkpoint_summary(&r, best_val(&log), &log.digest()), &ck_path)?;
            rec.add(&ck_path);
            log::info!("best validation accuracy {:.4}", best_val(&log));
        }
        Some(folds) => {
            cv_run(&r, &data, folds, &mut rec)?;
        }
    }

    let manifest = rec.finish()?;
    log::info!("wrote {}", manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct FoldRow {
    fold: usize,
    seed: u64,
    best_val_accuracy: f64,
    held_accuracy: f64,
}

/// Stratified k-fold protocol: each fold trains on the remainder (with its
/// own internal validation split for best-epoch selection) and is scored
/// on the held fold. The checkpoint keeps the best held-fold model.
fn cv_run(r: &Resolved, data: &Dataset, folds: usize, rec: &mut Recorder) -> Result<()> {
    let parts = kfold(data, folds, r.train.seed)?;
    let mut rows: Vec<FoldRow> = Vec::with_capacity(folds);
    let mut best: Option<(f64, ModelParams<f32>, String)> = None;
    for (i, (fold_train, fold_held)) in parts.iter().enumerate() {
        let seed = r.train.seed.wrapping_add(i as u64);
        let cfg = TrainConfig { seed, ..r.train.clone() };
        let params = match r.init_from {
            // Warm CV starts every fold from the same checkpoint weights.
            Some(_) => initial_params(r)?,
            None => build_model::<f32>(&r.backbone, &r.head, seed)?,
        };
        let (trained, log) = train_model(params, fold_train, &cfg)?;
        let held = evaluate(&trained, fold_held, cfg.batch_size, None)?;
        log::info!("fold {i}: held accuracy {:.4}", held.accuracy);

        let log_path = r.out.join(format!("train_log_fold{i}.csv"));
        write_log(&log, &log_path)?;
        rec.add(&log_path);
        rows.push(FoldRow {
            fold: i,
            seed,
            best_val_accuracy: best_val(&log),
            held_accuracy: held.accuracy,
        });
        if best.as_ref().map_or(true, |(acc, _, _)| held.accuracy > *acc) {
            best = Some((held.accuracy, trained, log.digest()));
        }
    }
    let (best_acc, best_params, best_digest) = best.expect("kfold returns >= 2 folds");

    let mean = rows.iter().map(|r| r.held_accuracy).sum::<f64>() / rows.len() as f64;
    let var = rows
        .iter()
        .map(|r| (r.held_accuracy - mean).powi(2))
        .sum::<f64>()
        / rows.len() as f64;
    let summary = serde_json::json!({
        "folds": rows,
        "held_accuracy_mean": mean,
        "held_accuracy_std": var.sqrt(),
    });
    let cv_path = r.out.join("cv_summary.json");
    std::fs::write(&cv_path, serde_json::to_string_pretty(&summary)?)?;
    rec.add(&cv_path);

    let ck_path = r.out.join("checkpoint.tgcp");
    save_checkpoint(&best_params, &checkpoint_summary(r, best_acc, &best_digest), &ck_path)?;
    rec.add(&ck_path);
    Ok(())
}
