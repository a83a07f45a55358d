//! Shared fixtures for the integration suites: micro model builders, an
//! independent rank-correlation recount, and the desk-scale bias
//! experiment that several checks read from.

use std::time::Instant;
use topgap_core::analysis::{
    cam_iou, class_cam, erf_distance, gradcam, k_sweep, CamLayer, SweepConfig, SweepReport,
};
use topgap_core::attacks::{attack_distance, evaluate_robustness, AttackConfig, ModelClassifier};
use topgap_core::data::{gen_shapes, ShapesConfig};
use topgap_core::model::evaluate;
use topgap_core::{
    build_model, train_model, BackboneConfig, Dataset, Error, HeadConfig, ModelParams, Result,
    TrainConfig,
};

/// Seed for the generated datasets; arms and attacks derive their own.
pub const DATA_SEED: u64 = 411;

/// A small but real model: 16px input, two stages, 4x4 fused map.
pub fn micro_backbone() -> BackboneConfig {
    BackboneConfig {
        input_size: 16,
        input_channels: 3,
        stage_widths: vec![4, 6],
        blocks_per_stage: 1,
        feature_maps_used: 2,
    }
}

pub fn micro_model(seed: u64, k: usize, lambda: f64) -> ModelParams<f32> {
    let head = HeadConfig {
        fpn_channels: 5,
        num_classes: 4,
        k,
        lambda,
        dropout: 0.0,
    };
    build_model(&micro_backbone(), &head, seed).expect("micro model")
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Textbook Spearman via squared rank differences. Only defined for
/// distinct values on both sides; returns None on ties so the caller can
/// fall back. Independent of the library routine on purpose.
pub fn spearman_d2(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let rank_of = |v: &[f64]| -> Option<Vec<f64>> {
        let mut r = vec![0.0f64; v.len()];
        for i in 0..v.len() {
            let mut below = 0usize;
            for j in 0..v.len() {
                if i != j && v[j] == v[i] {
                    return None;
                }
                if v[j] < v[i] {
                    below += 1;
                }
            }
            r[i] = below as f64 + 1.0;
        }
        Some(r)
    };
    let rx = rank_of(x)?;
    let ry = rank_of(y)?;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    Some(1.0 - 6.0 * d2 / (n as f64 * ((n * n - 1) as f64)))
}

/// Scale knobs for the bias experiment. `from_env` honors
/// TOPGAP_DESK_COUNT / TOPGAP_DESK_EPOCHS for quick reduced-scale runs;
/// without overrides this is the pinned full configuration.
#[derive(Clone, Debug)]
pub struct DeskScale {
    pub count: usize,
    pub epochs: usize,
    pub sweep_epochs: usize,
    pub seeds: Vec<u64>,
    pub attack_n: usize,
    pub cam_n: usize,
    pub erf_n: usize,
    pub full: bool,
}

impl DeskScale {
    pub fn full() -> Self {
        DeskScale {
            count: 8000,
            epochs: 8,
            sweep_epochs: 2,
            seeds: vec![0, 1, 2],
            attack_n: 512,
            cam_n: 200,
            erf_n: 32,
            full: true,
        }
    }

    pub fn from_env() -> Self {
        let mut s = DeskScale::full();
        if let Ok(v) = std::env::var("TOPGAP_DESK_COUNT") {
            s.count = v.parse().expect("TOPGAP_DESK_COUNT");
            s.full = false;
        }
        if let Ok(v) = std::env::var("TOPGAP_DESK_EPOCHS") {
            s.epochs = v.parse().expect("TOPGAP_DESK_EPOCHS");
            s.full = false;
        }
        if !s.full {
            s.attack_n = s.attack_n.min(s.count / 8);
            s.cam_n = s.cam_n.min(s.count / 8);
            s.erf_n = s.erf_n.min(s.count / 16);
        }
        s
    }
}

/// Per-seed evaluation of one trained model.
#[derive(Clone, Debug)]
pub struct ArmMetrics {
    pub clean_acc: f64,
    pub decor_acc: f64,
    pub erf_dist: f64,
    pub attack_dist: f64,
    pub fgsm_acc: f64,
    /// Mean mask overlap at threshold 0.5 of this arm's saliency method
    /// (own class map for the pooled arm, gradient-weighted map for the
    /// mean-pooled arm).
    pub cam_iou: f64,
}

#[derive(Debug)]
pub struct DeskOutcome {
    pub best_k: usize,
    pub sweep: SweepReport,
    pub base: Vec<ArmMetrics>,
    pub ours: Vec<ArmMetrics>,
    pub minutes: f64,
}

impl DeskOutcome {
    pub fn med<Sel: Fn(&ArmMetrics) -> f64>(&self, arm: &[ArmMetrics], sel: Sel) -> f64 {
        median(arm.iter().map(sel).collect())
    }
}

fn desk_backbone() -> BackboneConfig {
    BackboneConfig {
        input_size: 64,
        input_channels: 3,
        stage_widths: vec![8, 16, 32],
        blocks_per_stage: 1,
        feature_maps_used: 3,
    }
}

fn desk_head(k: usize, lambda: f64) -> HeadConfig {
    HeadConfig {
        fpn_channels: 48,
        num_classes: 4,
        k,
        lambda,
        dropout: 0.0,
    }
}

fn desk_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    }
}

/// Indices of samples whose object mask covers the image center.
fn center_covered(data: &Dataset, limit: usize) -> Vec<usize> {
    let s = data.image_size;
    let center = (s / 2) * s + s / 2;
    data.samples
        .iter()
        .enumerate()
        .filter(|(_, smp)| smp.mask.as_ref().is_some_and(|m| m[center] == 1))
        .map(|(i, _)| i)
        .take(limit)
        .collect()
}

fn mean_mask_iou(
    params: &ModelParams<f32>,
    data: &Dataset,
    n: usize,
    gradient_weighted: bool,
) -> Result<f64> {
    let n = n.min(data.len());
    if n == 0 {
        return Err(Error::Data("no samples for mask overlap".into()));
    }
    let mut total = 0.0f64;
    for s in &data.samples[..n] {
        let mask = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sample {} has no mask", s.id)))?;
        let r = if gradient_weighted {
            gradcam(params, &s.image, s.label, CamLayer::Fused)?
        } else {
            class_cam(params, &s.image, s.label)?
        };
        total += cam_iou(&r.cam, mask, 0.5)?;
    }
    Ok(total / n as f64)
}

fn arm_metrics(
    params: &ModelParams<f32>,
    corr_test: &Dataset,
    decor_test: &Dataset,
    scale: &DeskScale,
    gradient_weighted_cam: bool,
) -> Result<ArmMetrics> {
    let clean = evaluate(params, corr_test, 64, None)?.accuracy;
    let decor = evaluate(params, decor_test, 64, None)?.accuracy;

    let attack_subset = corr_test.subset(&(0..scale.attack_n.min(corr_test.len())).collect::<Vec<_>>());
    let clf = ModelClassifier::new(params);
    let fgsm_cfg = AttackConfig::fgsm(2.0 / 255.0).with_seed(DATA_SEED);
    let rob = evaluate_robustness(&clf, &attack_subset, &[fgsm_cfg], 64)?;
    let fgsm_acc = rob.rows[0].robust_accuracy;
    let ad = attack_distance(&clf, &attack_subset, 1.0 / 255.0, 64)?.attack_distance;

    let erf_idx = center_covered(corr_test, scale.erf_n);
    if erf_idx.is_empty() {
        return Err(Error::Data("no center-covering samples for the erf probe".into()));
    }
    let (erf_images, _) = corr_test.batch(&erf_idx)?;
    let erf = erf_distance(params, &erf_images)?.distance;

    let iou = mean_mask_iou(params, corr_test, scale.cam_n, gradient_weighted_cam)?;
    Ok(ArmMetrics {
        clean_acc: clean,
        decor_acc: decor,
        erf_dist: erf,
        attack_dist: ad,
        fgsm_acc,
        cam_iou: iou,
    })
}

/// Trains the mean-pooled reference and the top-k arm (pool size chosen by
/// a fine-tuning sweep on the first seed) and evaluates both on held-out
/// correlated and decorrelated splits.
pub fn run_desk_experiment(scale: &DeskScale) -> Result<DeskOutcome> {
    let start = Instant::now();
    let (train, decor_test) = gen_shapes(&ShapesConfig {
        count: scale.count,
        seed: DATA_SEED,
        ..ShapesConfig::default()
    })?;
    // A second generator run supplies an unseen split with the *training*
    // texture bias: its train half becomes the correlated clean test.
    let (corr_test, _) = gen_shapes(&ShapesConfig {
        count: (scale.count / 4).max(8),
        seed: DATA_SEED + 7777,
        ..ShapesConfig::default()
    })?;

    let bb = desk_backbone();
    let h1 = bb.fused_size();
    let gap_k = h1 * h1;

    // Mean-pooled reference arm: k = every cell, no sparsity penalty.
    let mut base_models = Vec::new();
    let mut base = Vec::new();
    for &seed in &scale.seeds {
        let fresh = build_model(&bb, &desk_head(gap_k, 0.0), seed)?;
        let (trained, _) = train_model(fresh, &train, &desk_train(scale.epochs, seed))?;
        base.push(arm_metrics(&trained, &corr_test, &decor_test, scale, true)?);
        base_models.push(trained);
    }

    // Pool-size selection: fine-tune the first reference model at each k
    // with the sparsity penalty on, shared seed, pick the best val score.
    let sweep_base = base_models[0].with_lambda(1.0)?;
    let sweep = k_sweep(
        &sweep_base,
        &train,
        &SweepConfig {
            k_list: vec![4, 8, 16, 32, 64],
            train: desk_train(scale.sweep_epochs, scale.seeds[0]),
        },
    )?;
    let best_k = sweep
        .rows
        .iter()
        .filter(|r| r.failed.is_none())
        .max_by(|a, b| {
            let (x, y) = (a.val_accuracy.unwrap(), b.val_accuracy.unwrap());
            x.partial_cmp(&y).expect("finite accuracy").then(b.k.cmp(&a.k))
        })
        .map(|r| r.k)
        .ok_or_else(|| Error::Numeric("every pool size diverged in the selection sweep".into()))?;

    let mut ours = Vec::new();
    for &seed in &scale.seeds {
        let fresh = build_model(&bb, &desk_head(best_k, 1.0), seed)?;
        let (trained, _) = train_model(fresh, &train, &desk_train(scale.epochs, seed))?;
        ours.push(arm_metrics(&trained, &corr_test, &decor_test, scale, false)?);
    }

    Ok(DeskOutcome {
        best_k,
        sweep,
        base,
        ours,
        minutes: start.elapsed().as_secs_f64() / 60.0,
    })
}
