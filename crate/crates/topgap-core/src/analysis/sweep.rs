//! Pool-size sweeps: retrain (or fine-tune) one model per k from a shared
//! starting point and record how validation accuracy and activation-map
//! mass respond.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{cam_mode, forward, train_model, train_val_split, ForwardOpts, Mode, ModelParams, TrainConfig};
use crate::analysis::cam_sparsity;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Pool sizes to train at; must be strictly increasing.
    pub k_list: Vec<usize>,
    /// Shared training recipe (and seed) for every k.
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub val_accuracy: Option<f64>,
    /// Mean activation mass of the true-class map over the validation set.
    pub cam_l1: Option<f64>,
    pub train_digest: Option<String>,
    /// Error text when training at this k did not finish.
    pub failed: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Rank correlation between k and cam_l1 over the finished rows; absent
    /// with fewer than two finished rows or degenerate ranks.
    pub spearman_k_l1: Option<f64>,
}

/// Mean true-class map mass over a dataset. Computed at feature-map
/// resolution: nearest upsampling repeats each cell, so the mean is the
/// same as at input resolution.
pub fn mean_cam_l1(params: &ModelParams<f32>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cam mass needs at least one sample".into()));
    }
    let h1 = params.backbone.fused_size();
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0f64;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(chunk)?;
        let fp = forward(
            params,
            &images,
            Mode::Eval,
            ForwardOpts {
                params_require_grad: false,
                input_requires_grad: false,
                k_override: None,
            },
        )?;
        let fm = fp.tape.tensor(fp.feature_map);
        for class in 0..data.num_classes {
            if labels.iter().all(|&l| l != class) {
                continue;
            }
            let cams = cam_mode(&fm, class, h1)?;
            for (i, &label) in labels.iter().enumerate() {
                if label == class {
                    total += cam_sparsity(&cams[i]);
                }
            }
        }
    }
    Ok(total / data.len() as f64)
}

/// Trains one model per pool size from a shared starting point and seed.
/// A k whose training fails is recorded and the sweep moves on.
pub fn k_sweep(base: &ModelParams<f32>, data: &Dataset, cfg: &SweepConfig) -> Result<SweepReport> {
    if cfg.k_list.is_empty() {
        return Err(Error::Config("sweep needs at least one pool size".into()));
    }
    let h1 = base.backbone.fused_size();
    for pair in cfg.k_list.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Config(format!(
                "pool sizes must be strictly increasing, got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    if let Some(&bad) = cfg.k_list.iter().find(|&&k| k == 0 || k > h1 * h1) {
        return Err(Error::Config(format!(
            "pool size {bad} outside 1..={} for a {h1}x{h1} map",
            h1 * h1
        )));
    }

    let (_, val) = train_val_split(data, &cfg.train)?;
    let mut rows = Vec::with_capacity(cfg.k_list.len());
    for &k in &cfg.k_list {
        let start = base.with_pool_size(k)?;
        match train_model(start, data, &cfg.train) {
            Ok((trained, log)) => {
                let metrics = crate::model::evaluate(&trained, &val, cfg.train.batch_size, None)?;
                let l1 = mean_cam_l1(&trained, &val, cfg.train.batch_size)?;
                rows.push(SweepRow {
                    k,
                    val_accuracy: Some(metrics.accuracy),
                    cam_l1: Some(l1),
                    train_digest: Some(log.digest()),
                    failed: None,
                });
            }
            Err(e) => {
                log::warn!("sweep at k={k} failed: {e}");
                rows.push(SweepRow {
                    k,
                    val_accuracy: None,
                    cam_l1: None,
                    train_digest: None,
                    failed: Some(e.to_string()),
                });
            }
        }
    }

    let xs: Vec<f64> = rows
        .iter()
        .filter(|r| r.failed.is_none())
        .map(|r| r.k as f64)
        .collect();
    let ys: Vec<f64> = rows
        .iter()
        .filter(|r| r.failed.is_none())
        .map(|r| r.cam_l1.unwrap())
        .collect();
    let rho = spearman(&xs, &ys);
    Ok(SweepReport {
        rows,
        spearman_k_l1: if rho.is_finite() { Some(rho) } else { None },
    })
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut out = vec![0.0f64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j hold one tie group; 1-based ranks average.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; NaN when undefined (short or constant input).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "paired samples");
    let n = x.len();
    if n < 2 {
        return f64::NAN;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let mean = (n + 1) as f64 / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..n {
        let a = rx[i] - mean;
        let b = ry[i] - mean;
        num += a * b;
        dx += a * a;
        dy += b * b;
    }
    if dx <= 0.0 || dy <= 0.0 {
        return f64::NAN;
    }
    num / (dx * dy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::model::{build_model, BackboneConfig, HeadConfig};
    use crate::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 30.0]), vec![1.0, 2.0, 3.0]);
        // Two-way tie on the middle values: positions 2 and 3 share 2.5.
        assert_eq!(ranks(&[1.0, 5.0, 5.0, 9.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(ranks(&[7.0, 7.0, 7.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn spearman_known_values() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up = [2.0, 4.0, 5.0, 7.0, 11.0];
        let down = [9.0, 6.0, 4.0, 2.0, 1.0];
        assert!((spearman(&x, &up) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &down) + 1.0).abs() < 1e-12);
        // Hand-computed: y ranks (1,3,2,4,5) against x, sum of squared rank
        // gaps 2 -> rho = 1 - 12/120 = 0.9.
        let y = [1.0, 5.0, 3.0, 7.0, 9.0];
        assert!((spearman(&x, &y) - 0.9).abs() < 1e-12);
        assert!(spearman(&[1.0], &[2.0]).is_nan());
        assert!(spearman(&x, &[3.0; 5]).is_nan());
    }

    fn tiny_dataset(n: usize, classes: usize, size: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| {
                let data: Vec<f32> = (0..3 * size * size).map(|_| rng.random()).collect();
                Sample {
                    id: format!("t{i}"),
                    image: Tensor::from_vec(&[3, size, size], data).unwrap(),
                    label: i % classes,
                    mask: None,
                }
            })
            .collect();
        Dataset {
            samples,
            num_classes: classes,
            image_size: size,
            class_names: (0..classes).map(|c| format!("c{c}")).collect(),
        }
    }

    fn micro_params(seed: u64) -> ModelParams<f32> {
        let bb = BackboneConfig {
            input_size: 16,
            input_channels: 3,
            stage_widths: vec![4, 4],
            blocks_per_stage: 1,
            // Two maps fused at the first stage's 4x4 resolution: k up to 16.
            feature_maps_used: 2,
        };
        let head = HeadConfig {
            fpn_channels: 4,
            num_classes: 2,
            k: 2,
            lambda: 0.5,
            dropout: 0.0,
        };
        build_model(&bb, &head, seed).unwrap()
    }

    #[test]
    fn sweep_orders_and_validates_pool_sizes() {
        let base = micro_params(0);
        let data = tiny_dataset(10, 2, 16, 1);
        let mk = |ks: Vec<usize>| SweepConfig {
            k_list: ks,
            train: TrainConfig {
                epochs: 1,
                batch_size: 5,
                val_fraction: 0.4,
                seed: 7,
                ..TrainConfig::default()
            },
        };
        assert!(k_sweep(&base, &data, &mk(vec![])).is_err());
        assert!(k_sweep(&base, &data, &mk(vec![4, 4])).is_err());
        assert!(k_sweep(&base, &data, &mk(vec![8, 2])).is_err());
        assert!(k_sweep(&base, &data, &mk(vec![1, 99])).is_err());
    }

    #[test]
    fn sweep_trains_each_k_and_reports() {
        let base = micro_params(2);
        let data = tiny_dataset(20, 2, 16, 3);
        let cfg = SweepConfig {
            k_list: vec![1, 4, 16],
            train: TrainConfig {
                epochs: 1,
                batch_size: 5,
                val_fraction: 0.25,
                seed: 11,
                ..TrainConfig::default()
            },
        };
        let report = k_sweep(&base, &data, &cfg).unwrap();
        assert_eq!(report.rows.len(), 3);
        for row in &report.rows {
            assert!(row.failed.is_none(), "k={} failed: {:?}", row.k, row.failed);
            let acc = row.val_accuracy.unwrap();
            assert!((0.0..=1.0).contains(&acc));
            let l1 = row.cam_l1.unwrap();
            assert!((0.0..=1.0).contains(&l1), "cam mass {l1} out of range");
            assert_eq!(row.train_digest.as_ref().unwrap().len(), 64);
        }
        // Same seed everywhere: rerunning reproduces the report.
        let again = k_sweep(&base, &data, &cfg).unwrap();
        for (a, b) in report.rows.iter().zip(&again.rows) {
            assert_eq!(a.train_digest, b.train_digest);
            assert_eq!(a.cam_l1, b.cam_l1);
        }
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let base = micro_params(4);
        // Labels exceed the model's class count: training errors at every k.
        let mut data = tiny_dataset(10, 2, 16, 5);
        data.num_classes = 3;
        for (i, s) in data.samples.iter_mut().enumerate() {
            s.label = i % 3;
        }
        data.class_names.push("c2".into());
        let cfg = SweepConfig {
            k_list: vec![2, 8],
            train: TrainConfig {
                epochs: 1,
                batch_size: 5,
                val_fraction: 0.3,
                seed: 13,
                ..TrainConfig::default()
            },
        };
        let report = k_sweep(&base, &data, &cfg).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            assert!(row.failed.is_some());
            assert!(row.val_accuracy.is_none());
        }
        assert!(report.spearman_k_l1.is_none());
    }

    #[test]
    fn mean_cam_l1_stays_in_unit_range_and_is_batch_invariant() {
        let base = micro_params(6);
        let data = tiny_dataset(7, 2, 16, 8);
        let a = mean_cam_l1(&base, &data, 3).unwrap();
        let b = mean_cam_l1(&base, &data, 7).unwrap();
        assert!((0.0..=1.0).contains(&a));
        // Per-sample maps only depend on that sample's activations.
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}
