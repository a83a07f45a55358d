//! `topgap eval`: metric reports and heatmaps from a saved checkpoint.
//!
//! One `--which` mode per invocation: clean accuracy, adversarial
//! robustness, receptive-field distance (center vs corner), class
//! activation maps, IoU against the ground-truth masks, or the
//! object-vs-background attack distance. Every mode writes a JSON report,
//! a CSV twin, and optionally the first `--emit-cams` heatmaps.

use crate::manifest::Recorder;
use crate::opts::{from_file, need, parse_radius, pick};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use topgap_core::analysis::export::{save_map_set, scaled_unit};
use topgap_core::attacks::{attack_distance, evaluate_robustness, AttackConfig, AttackKind, ModelClassifier};
use topgap_core::data::{load_dataset, LoadOptions};
use topgap_core::model::evaluate;
use topgap_core::{
    cam_iou, cam_sparsity, class_cam, erf_distance, erf_gradient_map, gradcam, load_checkpoint,
    CamLayer, CamResult, Dataset, Error, ModelParams, OutLoc, Result,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Clean,
    Robust,
    Erf,
    Cam,
    Iou,
    Ad,
}

impl Which {
    fn name(self) -> &'static str {
        match self {
            Which::Clean => "clean",
            Which::Robust => "robust",
            Which::Erf => "erf",
            Which::Cam => "cam",
            Which::Iou => "iou",
            Which::Ad => "ad",
        }
    }

    fn needs_masks(self) -> bool {
        matches!(self, Which::Iou | Which::Ad)
    }
}

/// Heatmap source: the class-channel map itself, or gradient-weighted
/// channels of the fused layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ours,
    Gradcam,
}

fn parse_attack(s: &str) -> std::result::Result<AttackKind, String> {
    match s {
        "fgsm" => Ok(AttackKind::Fgsm),
        "pgd" => Ok(AttackKind::Pgd),
        "square" => Ok(AttackKind::Square),
        other => Err(format!("unknown attack '{other}' (use fgsm|pgd|square)")),
    }
}

#[derive(clap::Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EvalOpts {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset folder; masks are required for --which iou and ad.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    which: Option<Which>,
    /// Attack for --which robust.
    #[arg(long, value_parser = parse_attack)]
    attack: Option<AttackKind>,
    /// l-inf radius; fractions like 8/255 are parsed exactly.
    /// Defaults: 8/255 for robust, 1/255 for ad.
    #[arg(long)]
    eps: Option<String>,
    /// PGD step count.
    #[arg(long)]
    steps: Option<usize>,
    /// PGD step size (fraction or decimal); default epsilon/4.
    #[arg(long)]
    alpha: Option<String>,
    /// PGD random start inside the ball.
    #[arg(long)]
    random_start: Option<bool>,
    /// Square-attack query budget.
    #[arg(long)]
    query_budget: Option<usize>,
    #[arg(long)]
    attack_seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Cap evaluation to the first N samples.
    #[arg(long)]
    samples: Option<usize>,
    /// Write heatmaps for the first N samples (cam, iou, erf modes).
    #[arg(long)]
    emit_cams: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// CAM threshold for the IoU report.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Resolved {
    checkpoint: PathBuf,
    data: PathBuf,
    which: Which,
    attack: Option<AttackConfig>,
    /// The radius exactly as given, for the record.
    eps_spec: Option<String>,
    batch: usize,
    samples: Option<usize>,
    emit_cams: usize,
    method: Method,
    threshold: f64,
    out: PathBuf,
}

fn resolve(o: EvalOpts, file: Option<serde_json::Value>) -> Result<Resolved> {
    let f: EvalOpts = from_file(file)?;
    let which = need(o.which, f.which, "which")?;

    let eps_spec = o.eps.or(f.eps).or(match which {
        Which::Robust => Some("8/255".to_string()),
        Which::Ad => Some("1/255".to_string()),
        _ => None,
    });
    let attack = match which {
        Which::Robust => {
            let kind = need(o.attack, f.attack, "attack")?;
            let eps = parse_radius(eps_spec.as_deref().expect("robust always has a radius"))?;
            let mut cfg = match kind {
                AttackKind::Fgsm => AttackConfig::fgsm(eps),
                AttackKind::Pgd => AttackConfig::pgd(eps, pick(o.steps, f.steps, 20)),
                AttackKind::Square => AttackConfig::square(eps, pick(o.query_budget, f.query_budget, 5000)),
            };
            if let Some(a) = o.alpha.as_deref().or(f.alpha.as_deref()) {
                cfg.alpha = Some(parse_radius(a)?);
            }
            if let Some(rs) = o.random_start.or(f.random_start) {
                cfg.random_start = rs;
            }
            cfg = cfg.with_seed(pick(o.attack_seed, f.attack_seed, 0));
            cfg.validate()?;
            Some(cfg)
        }
        Which::Ad => {
            // Attack distance runs single-step sign attacks per region; only
            // the radius is configurable.
            let eps = parse_radius(eps_spec.as_deref().expect("ad always has a radius"))?;
            Some(AttackConfig::fgsm(eps))
        }
        _ => None,
    };

    let threshold = pick(o.threshold, f.threshold, 0.5);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold must be in [0,1], got {threshold}")));
    }
    Ok(Resolved {
        checkpoint: need(o.checkpoint, f.checkpoint, "checkpoint")?,
        data: need(o.data, f.data, "data")?,
        which,
        attack,
        eps_spec,
        batch: pick(o.batch, f.batch, 64),
        samples: o.samples.or(f.samples),
        emit_cams: pick(o.emit_cams, f.emit_cams, 0),
        method: pick(o.method, f.method, Method::Ours),
        threshold,
        out: pick(o.out, f.out, PathBuf::from(".")),
    })
}

/// JSON envelope shared by all modes, so reports are self-describing.
fn envelope(r: &Resolved, params: &ModelParams<f32>, report: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "which": r.which.name(),
        "checkpoint": r.checkpoint.to_string_lossy(),
        "data": r.data.to_string_lossy(),
        "pool_k": params.head.k,
        "lambda": params.head.lambda,
        "report": report,
    })
}

fn write_report(rec: &mut Recorder, out: &Path, json: &serde_json::Value) -> Result<()> {
    let path = out.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(json)?)?;
    rec.add(&path);
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn cam_for(params: &ModelParams<f32>, ds: &Dataset, i: usize, method: Method) -> Result<CamResult> {
    let s = &ds.samples[i];
    match method {
        Method::Ours => class_cam(params, &s.image, s.label),
        Method::Gradcam => gradcam(params, &s.image, s.label, CamLayer::Fused),
    }
}

pub fn run(o: EvalOpts, file: Option<serde_json::Value>, threads: usize) -> Result<()> {
    let r = resolve(o, file)?;
    let (params, _summary) = load_checkpoint(&r.checkpoint)?;
    let mut data = load_dataset(
        &r.data,
        &LoadOptions {
            with_masks: r.which.needs_masks(),
            resize_to: Some(params.backbone.input_size),
        },
    )
    .map_err(|e| match e {
        // Point at the flag that imposed the requirement.
        Error::Data(msg) if msg.contains("mask") => {
            Error::Data(format!("--which {} requires masks: {msg}", r.which.name()))
        }
        other => other,
    })?;
    if let Some(n) = r.samples {
        let idx: Vec<usize> = (0..n.min(data.len())).collect();
        data = data.subset(&idx);
    }
    std::fs::create_dir_all(&r.out)?;
    let seeds = r.attack.as_ref().map(|a| vec![a.seed]).unwrap_or_default();
    let mut rec = Recorder::new("eval", &r, seeds, threads, &r.out)?;
    log::info!("eval --which {} on {} samples", r.which.name(), data.len());

    match r.which {
        Which::Clean => clean(&r, &params, &data, &mut rec)?,
        Which::Robust => robust(&r, &params, &data, &mut rec)?,
        Which::Erf => erf(&r, &params, &data, &mut rec)?,
        Which::Cam => cams(&r, &params, &data, &mut rec)?,
        Which::Iou => iou(&r, &params, &data, &mut rec)?,
        Which::Ad => ad(&r, &params, &data, &mut rec)?,
    }

    let manifest = rec.finish()?;
    log::info!("wrote {}", manifest.display());
    Ok(())
}

fn clean(r: &Resolved, params: &ModelParams<f32>, data: &Dataset, rec: &mut Recorder) -> Result<()> {
    let m = evaluate(params, data, r.batch, None)?;
    write_report(rec, &r.out, &envelope(r, params, serde_json::to_value(&m)?))?;
    let csv_path = r.out.join("report.csv");
    let mut w = csv_writer(&csv_path)?;
    w.write_record(["accuracy", "mean_loss", "mean_ce", "mean_l1", "count"]).map_err(csv_err)?;
    w.write_record([
        m.accuracy.to_string(),
        m.mean_loss.to_string(),
        m.mean_ce.to_string(),
        m.mean_l1.to_string(),
        m.count.to_string(),
    ])
    .map_err(csv_err)?;
    w.flush()?;
    rec.add(&csv_path);
    log::info!("clean accuracy {:.4}", m.accuracy);
    Ok(())
}

fn robust(r: &Resolved, params: &ModelParams<f32>, data: &Dataset, rec: &mut Recorder) -> Result<()> {
    let cfg = r.attack.clone().expect("resolve sets the attack for robust");
    let clf = ModelClassifier::new(params);
    let report = evaluate_robustness(&clf, data, &[cfg], r.batch)?;
    write_report(rec, &r.out, &envelope(r, params, serde_json::to_value(&report)?))?;
    let csv_path = r.out.join("report.csv");
    let file = std::fs::File::create(&csv_path)?;
    report.write_csv(file)?;
    rec.add(&csv_path);
    for row in &report.rows {
        log::info!("{}: robust accuracy {:.4} (sar {:.4})", row.attack, row.robust_accuracy, row.sar);
    }
    Ok(())
}

fn erf(r: &Resolved, params: &ModelParams<f32>, data: &Dataset, rec: &mut Recorder) -> Result<()> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (images, _) = data.batch(&idx)?;
    let report = erf_distance(params, &images)?;
    write_report(rec, &r.out, &envelope(r, params, serde_json::to_value(&report)?))?;
    let csv_path = r.out.join("report.csv");
    let mut w = csv_writer(&csv_path)?;
    w.write_record(["center", "corner", "distance", "sample_count", "norm_tag"]).map_err(csv_err)?;
    w.write_record([
        report.center.to_string(),
        report.corner.to_string(),
        report.distance.to_string(),
        report.sample_count.to_string(),
        report.norm_tag.clone(),
    ])
    .map_err(csv_err)?;
    w.flush()?;
    rec.add(&csv_path);

    let maps_dir = r.out.join("maps");
    for s in data.samples.iter().take(r.emit_cams) {
        for loc in [OutLoc::Center, OutLoc::Corner] {
            let map = erf_gradient_map(params, &s.image, loc)?;
            let tag = match loc {
                OutLoc::Center => "center",
                OutLoc::Corner => "corner",
            };
            // Min-max scaled for display; the .bin twin carries the same scale.
            let written = save_map_set(
                &maps_dir,
                &format!("erf_{}_{tag}", s.id),
                map.width,
                map.height,
                &scaled_unit(&map.raw),
                true,
            )?;
            rec.add_all(&written);
        }
    }
    log::info!("erf distance {:.4} (center {:.4}, corner {:.4})", report.distance, report.center, report.corner);
    Ok(())
}

fn cams(r: &Resolved, params: &ModelParams<f32>, data: &Dataset, rec: &mut Recorder) -> Result<()> {
    let csv_path = r.out.join("report.csv");
    let mut w = csv_writer(&csv_path)?;
    w.write_record(["id", "label", "sparsity"]).map_err(csv_err)?;
    let maps_dir = r.out.join("maps");
    let mut total = 0.0f64;
    for (i, s) in data.samples.iter().enumerate() {
        let cam = cam_for(params, data, i, r.method)?;
        let sparsity = cam_sparsity(&cam.cam);
        total += sparsity;
        w.write_record([s.id.clone(), s.label.to_string(), sparsity.to_string()]).map_err(csv_err)?;
        if i < r.emit_cams {
            let written = save_map_set(
                &maps_dir,
                &format!("cam_{}", s.id),
                cam.cam.size,
                cam.cam.size,
                &cam.cam.values,
                true,
            )?;
            rec.add_all(&written);
        }
    }
    w.flush()?;
    rec.add(&csv_path);
    let mean = total / data.len() as f64;
    let report = serde_json::json!({
        "method": r.method,
        "count": data.len(),
        "mean_sparsity": mean,
    });
    write_report(rec, &r.out, &envelope(r, params, report))?;
    log::info!("mean cam mass {:.4} over {} samples", mean, data.len());
    Ok(())
}

fn iou(r: &Resolved, params: &ModelParams<f32>, data: &Dataset, rec: &mut Recorder) -> Result<()> {
    let csv_path = r.out.join("report.csv");
    let mut w = csv_writer(&csv_path)?;
    w.write_record(["id", "label", "iou"]).map_err(csv_err)?;
    let maps_dir = r.out.join("maps");
    let mut total = 0.0f64;
    for (i, s) in data.samples.iter().enumerate() {
        let mask = s.mask.as_ref().expect("loader enforced masks");
        let cam = cam_for(params, data, i, r.method)?;
        let v = cam_iou(&cam.cam, mask, r.threshold)?;
        total += v;
        w.write_record([s.id.clone(), s.label.to_string(), v.to_string()]).map_err(csv_err)?;
        if i < r.emit_cams {
            let written = save_map_set(
                &maps_dir,
                &format!("cam_{}", s.id),
                cam.cam.size,
                cam.cam.size,
                &cam.cam.values,
                true,
            )?;
            rec.add_all(&written);
        }
    }
    w.flush()?;
    rec.add(&csv_path);
    let mean = total / data.len() as f64;
    let report = serde_json::json!({
        "method": r.method,
        "threshold": r.threshold,
        "count": data.len(),
        "mean_iou": mean,
    });
    write_report(rec, &r.out, &envelope(r, params, report))?;
    log::info!("mean iou {:.4} at threshold {}", mean, r.threshold);
    Ok(())
}

fn ad(r: &Resolved, params: &ModelParams<f32>, data: &Dataset, rec: &mut Recorder) -> Result<()> {
    let eps = r.attack.as_ref().expect("resolve sets the radius for ad").epsilon;
    let clf = ModelClassifier::new(params);
    let report = attack_distance(&clf, data, eps, r.batch)?;
    write_report(rec, &r.out, &envelope(r, params, serde_json::to_value(&report)?))?;
    let csv_path = r.out.join("report.csv");
    let mut w = csv_writer(&csv_path)?;
    w.write_record([
        "epsilon",
        "sample_count",
        "clean_accuracy",
        "sar_object",
        "sar_background",
        "attack_distance",
    ])
    .map_err(csv_err)?;
    w.write_record([
        report.epsilon.to_string(),
        report.sample_count.to_string(),
        report.clean_accuracy.to_string(),
        report.sar_object.to_string(),
        report.sar_background.to_string(),
        report.attack_distance.to_string(),
    ])
    .map_err(csv_err)?;
    w.flush()?;
    rec.add(&csv_path);
    log::info!(
        "attack distance {:.4} (object sar {:.4}, background sar {:.4})",
        report.attack_distance,
        report.sar_object,
        report.sar_background
    );
    Ok(())
}
