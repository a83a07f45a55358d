//! Robustness statistics over a dataset: clean accuracy, per-attack robust
//! accuracy and SAR (successful attack rate, 1 - accuracy), and the
//! object-vs-background attack distance.

use super::{fgsm, masked_fgsm, pgd, square_attack, AttackConfig, AttackKind, GradClassifier, Region};
use crate::data::Dataset;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackRow {
    /// Config echo, e.g. "pgd(eps=0.031, steps=20, alpha=0.0078, random_start=true)".
    pub attack: String,
    pub config: AttackConfig,
    /// The step size actually used (pgd); echoed so reports are self-contained.
    pub resolved_alpha: f64,
    pub robust_accuracy: f64,
    pub sar: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean_accuracy: f64,
    pub sample_count: usize,
    pub rows: Vec<AttackRow>,
}

impl RobustnessReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One CSV row per attack config, preceded by a clean row.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "attack", "kind", "epsilon", "steps", "alpha", "random_start", "query_budget",
            "p_init", "seed", "robust_accuracy", "sar",
        ])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        wtr.write_record([
            "clean", "clean", "0", "", "", "", "", "", "",
            &self.clean_accuracy.to_string(),
            &(1.0 - self.clean_accuracy).to_string(),
        ])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for r in &self.rows {
            wtr.write_record([
                r.attack.clone(),
                r.config.kind.name().to_string(),
                r.config.epsilon.to_string(),
                r.config.steps.to_string(),
                r.resolved_alpha.to_string(),
                r.config.random_start.to_string(),
                r.config.query_budget.to_string(),
                r.config.p_init.to_string(),
                r.config.seed.to_string(),
                r.robust_accuracy.to_string(),
                r.sar.to_string(),
            ])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackDistanceReport {
    pub epsilon: f64,
    pub sample_count: usize,
    pub clean_accuracy: f64,
    pub sar_object: f64,
    pub sar_background: f64,
    /// SAR(object-only) - SAR(background-only).
    pub attack_distance: f64,
}

impl AttackDistanceReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Runs each configured attack over the whole dataset and reports robust
/// accuracy and SAR per config. Deterministic given the config seeds: each
/// batch shifts the seed by its global start index, so sample i always
/// draws the same randomness regardless of batch size.
pub fn evaluate_robustness<M: GradClassifier>(
    model: &M,
    data: &Dataset,
    cfgs: &[AttackConfig],
    batch_size: usize,
) -> Result<RobustnessReport> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate robustness on an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    for cfg in cfgs {
        cfg.validate()?;
    }
    let idx: Vec<usize> = (0..data.len()).collect();

    let mut clean_hits = 0usize;
    let mut truth = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size) {
        let (images, labels) = data.batch(chunk)?;
        let pred = model.predict_labels(&images)?;
        clean_hits += pred.iter().zip(&labels).filter(|(p, t)| p == t).count();
        truth.extend(labels);
    }
    let clean_accuracy = clean_hits as f64 / data.len() as f64;

    let mut rows = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        let mut hits = 0usize;
        for chunk in idx.chunks(batch_size) {
            let (images, labels) = data.batch(chunk)?;
            let shifted = AttackConfig {
                seed: cfg.seed.wrapping_add(chunk[0] as u64),
                ..cfg.clone()
            };
            let adv = match cfg.kind {
                AttackKind::Fgsm => fgsm(model, &images, &labels, cfg.epsilon)?,
                AttackKind::Pgd => pgd(model, &images, &labels, &shifted)?,
                AttackKind::Square => square_attack(model, &images, &labels, &shifted)?,
            };
            let pred = model.predict_labels(&adv)?;
            hits += pred.iter().zip(&labels).filter(|(p, t)| p == t).count();
        }
        let robust_accuracy = hits as f64 / data.len() as f64;
        rows.push(AttackRow {
            attack: cfg.describe(),
            config: cfg.clone(),
            resolved_alpha: cfg.resolved_alpha(),
            robust_accuracy,
            sar: 1.0 - robust_accuracy,
        });
    }

    Ok(RobustnessReport {
        clean_accuracy,
        sample_count: data.len(),
        rows,
    })
}

/// SAR when only object pixels may move minus SAR when only background
/// pixels may move, under a one-step sign perturbation of `epsilon`
/// (1/255 corresponds to flipping each 8-bit pixel by one level).
pub fn attack_distance<M: GradClassifier>(
    model: &M,
    data: &Dataset,
    epsilon: f64,
    batch_size: usize,
) -> Result<AttackDistanceReport> {
    if data.is_empty() {
        return Err(Error::Data("cannot compute attack distance on an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let missing: Vec<&str> = data
        .samples
        .iter()
        .filter(|s| s.mask.is_none())
        .map(|s| s.id.as_str())
        .collect();
    if !missing.is_empty() {
        let mut ids: Vec<&str> = missing;
        ids.sort_unstable();
        return Err(Error::Data(format!(
            "attack distance needs object masks; missing for: {}",
            ids.join(", ")
        )));
    }

    let idx: Vec<usize> = (0..data.len()).collect();
    let mut clean_hits = 0usize;
    let mut obj_hits = 0usize;
    let mut bg_hits = 0usize;
    for chunk in idx.chunks(batch_size) {
        let (images, labels) = data.batch(chunk)?;
        let masks: Vec<Vec<u8>> = chunk
            .iter()
            .map(|&i| data.samples[i].mask.clone().expect("checked above"))
            .collect();
        let clean = model.predict_labels(&images)?;
        clean_hits += clean.iter().zip(&labels).filter(|(p, t)| p == t).count();

        let adv_obj = masked_fgsm(model, &images, &labels, &masks, Region::Object, epsilon)?;
        let pred = model.predict_labels(&adv_obj)?;
        obj_hits += pred.iter().zip(&labels).filter(|(p, t)| p == t).count();

        let adv_bg = masked_fgsm(model, &images, &labels, &masks, Region::Background, epsilon)?;
        let pred = model.predict_labels(&adv_bg)?;
        bg_hits += pred.iter().zip(&labels).filter(|(p, t)| p == t).count();
    }
    let n = data.len() as f64;
    let sar_object = 1.0 - obj_hits as f64 / n;
    let sar_background = 1.0 - bg_hits as f64 / n;
    Ok(AttackDistanceReport {
        epsilon,
        sample_count: data.len(),
        clean_accuracy: clean_hits as f64 / n,
        sar_object,
        sar_background,
        attack_distance: sar_object - sar_background,
    })
}
