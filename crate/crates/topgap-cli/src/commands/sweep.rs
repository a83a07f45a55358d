//! `topgap sweep`: one training run per pool size, reporting how the class
//! map's activation mass tracks k. Starts from a checkpoint (fine-tuning)
//! or from a fresh seed.

use crate::manifest::Recorder;
use crate::opts::{from_file, need, pick};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use topgap_core::data::{load_dataset, LoadOptions};
use topgap_core::{
    build_model, k_sweep, load_checkpoint, AdamHyper, BackboneConfig, Error, HeadConfig,
    ModelParams, Result, SweepConfig, TrainConfig,
};

#[derive(clap::Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepOpts {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pool sizes to train, strictly increasing, e.g. 4,8,16,32,64.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Checkpoint to fine-tune from; omit to train fresh models.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Sparsity weight applied to every run.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Backbone flags for fresh models (ignored with --from).
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    feature_maps: Option<usize>,
    #[arg(long)]
    fpn_channels: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Resolved {
    data: PathBuf,
    k_list: Vec<usize>,
    from: Option<PathBuf>,
    lambda: f64,
    train: TrainConfig,
    out: PathBuf,
}

fn resolve(o: SweepOpts, f: SweepOpts) -> Result<(Resolved, SweepOpts)> {
    let dt = TrainConfig::default();
    let train = TrainConfig {
        // Short runs by default: the sweep compares pool sizes, it does not
        // chase the best model.
        epochs: pick(o.epochs, f.epochs, 4),
        batch_size: pick(o.batch, f.batch, dt.batch_size),
        hyper: AdamHyper {
            lr: pick(o.lr, f.lr, dt.hyper.lr),
            ..AdamHyper::default()
        },
        val_fraction: pick(o.val_fraction, f.val_fraction, dt.val_fraction),
        seed: pick(o.seed, f.seed, dt.seed),
    };
    train.validate()?;
    let r = Resolved {
        data: need(o.data, f.data, "data")?,
        k_list: pick(o.k, f.k.clone(), vec![4, 8, 16, 32, 64]),
        from: o.from.or(f.from.clone()),
        lambda: pick(o.lambda, f.lambda, HeadConfig::default().lambda),
        train,
        out: pick(o.out, f.out.clone(), PathBuf::from(".")),
    };
    // Arch flags travel separately: they only matter without --from.
    let arch = SweepOpts {
        widths: o.widths.or(f.widths),
        blocks: o.blocks.or(f.blocks),
        feature_maps: o.feature_maps.or(f.feature_maps),
        fpn_channels: o.fpn_channels.or(f.fpn_channels),
        dropout: o.dropout.or(f.dropout),
        ..SweepOpts::default()
    };
    Ok((r, arch))
}

fn base_model(r: &Resolved, arch: &SweepOpts, image_size: usize, classes: usize) -> Result<ModelParams<f32>> {
    let params = match &r.from {
        Some(path) => load_checkpoint(path)?.0,
        None => {
            let db = BackboneConfig::default();
            let backbone = BackboneConfig {
                input_size: image_size,
                input_channels: 3,
                stage_widths: arch.widths.clone().unwrap_or(db.stage_widths),
                blocks_per_stage: arch.blocks.unwrap_or(db.blocks_per_stage),
                feature_maps_used: arch.feature_maps.unwrap_or(db.feature_maps_used),
            };
            backbone.validate()?;
            let dh = HeadConfig::default();
            let head = HeadConfig {
                fpn_channels: arch.fpn_channels.unwrap_or(dh.fpn_channels),
                num_classes: classes,
                // Placeholder pool size; the sweep overrides it per run.
                k: *r.k_list.first().ok_or_else(|| Error::Config("--k list is empty".into()))?,
                lambda: r.lambda,
                dropout: arch.dropout.unwrap_or(dh.dropout),
            };
            head.validate(backbone.fused_size())?;
            build_model::<f32>(&backbone, &head, r.train.seed)?
        }
    };
    params.with_lambda(r.lambda)
}

pub fn run(o: SweepOpts, file: Option<serde_json::Value>, threads: usize) -> Result<()> {
    let f: SweepOpts = from_file(file)?;
    let (r, arch) = resolve(o, f)?;
    let data = load_dataset(&r.data, &LoadOptions { with_masks: false, resize_to: None })?;
    let base = base_model(&r, &arch, data.image_size, data.num_classes)?;
    let h1 = base.backbone.fused_size();
    std::fs::create_dir_all(&r.out)?;
    let mut rec = Recorder::new("sweep", &r, vec![r.train.seed], threads, &r.out)?;

    let report = k_sweep(&base, &data, &SweepConfig { k_list: r.k_list.clone(), train: r.train.clone() })?;

    let json_path = r.out.join("sweep.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    rec.add(&json_path);

    let csv_path = r.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_record(["k", "k_normalized", "val_accuracy", "cam_l1", "train_digest", "failed"])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let blank = String::new;
    for row in &report.rows {
        w.write_record([
            row.k.to_string(),
            (row.k as f64 / (h1 * h1) as f64).to_string(),
            row.val_accuracy.map(|v| v.to_string()).unwrap_or_else(blank),
            row.cam_l1.map(|v| v.to_string()).unwrap_or_else(blank),
            row.train_digest.clone().unwrap_or_else(blank),
            row.failed.clone().unwrap_or_else(blank),
        ])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    rec.add(&csv_path);

    // Plot-ready pairs: normalized pool size against mean activation mass.
    let plot_path = r.out.join("plot.csv");
    let mut w = csv::Writer::from_path(&plot_path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_record(["k_normalized", "cam_l1"]).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for row in report.rows.iter().filter(|row| row.failed.is_none()) {
        w.write_record([
            (row.k as f64 / (h1 * h1) as f64).to_string(),
            row.cam_l1.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    rec.add(&plot_path);

    let manifest = rec.finish()?;
    log::info!("wrote {}", manifest.display());
    if let Some(rho) = report.spearman_k_l1 {
        log::info!("spearman(k, cam mass) = {rho:.3}");
    }
    // Partial failures are recorded in the rows; only a fully failed sweep
    // is a process failure.
    if report.rows.iter().all(|row| row.failed.is_some()) {
        return Err(Error::Numeric("every sweep run failed; see sweep.json".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_k_grid_matches_the_protocol() {
        let mut o = SweepOpts::default();
        o.data = Some(PathBuf::from("d"));
        let (r, _) = resolve(o, SweepOpts::default()).unwrap();
        assert_eq!(r.k_list, vec![4, 8, 16, 32, 64]);
        assert_eq!(r.train.epochs, 4);
    }

    #[test]
    fn flags_beat_file_values() {
        let mut o = SweepOpts::default();
        o.data = Some(PathBuf::from("d"));
        o.k = Some(vec![2, 4]);
        let mut f = SweepOpts::default();
        f.k = Some(vec![8, 16]);
        f.epochs = Some(9);
        let (r, _) = resolve(o, f).unwrap();
        assert_eq!(r.k_list, vec![2, 4]);
        assert_eq!(r.train.epochs, 9);
    }
}
