//! Seeded dataset splitting with largest-remainder allocation.

use crate::data::Dataset;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Splits into `fractions.len()` parts. Stratified mode allocates per
/// class, so every part keeps the class balance up to rounding; each class
/// must then have at least one sample per part. Fractions must sum to 1
/// within 1e-9. Deterministic in (dataset order, seed).
pub fn split(ds: &Dataset, fractions: &[f64], stratified: bool, seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() {
        return Err(Error::Config("split needs at least one fraction".into()));
    }
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
        return Err(Error::Config(format!("fractions must be in [0,1]: {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "fractions must sum to 1 within 1e-9, got {total}"
        )));
    }
    if ds.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = if stratified {
        let mut by_class = vec![Vec::new(); ds.num_classes];
        for (i, s) in ds.samples.iter().enumerate() {
            by_class[s.label].push(i);
        }
        for (c, g) in by_class.iter().enumerate() {
            if g.len() < fractions.len() {
                return Err(Error::Data(format!(
                    "class {c} has {} samples, fewer than the {} split parts",
                    g.len(),
                    fractions.len()
                )));
            }
        }
        by_class
    } else {
        vec![(0..ds.len()).collect()]
    };

    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for mut group in groups {
        group.shuffle(&mut rng);
        let counts = largest_remainder(group.len(), fractions);
        let mut offset = 0;
        for (part, &c) in parts.iter_mut().zip(&counts) {
            part.extend_from_slice(&group[offset..offset + c]);
            offset += c;
        }
    }
    Ok(parts.iter().map(|idx| ds.subset(idx)).collect())
}

/// Integer allocation of `n` items by fractions: floor each share, then
/// hand out the leftovers by descending fractional remainder (ties toward
/// the earlier part).
fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(fractions.len());
    let mut rema: Vec<(usize, f64)> = Vec::with_capacity(fractions.len());
    let mut used = 0usize;
    for (i, &f) in fractions.iter().enumerate() {
        let exact = f * n as f64;
        let base = exact.floor() as usize;
        counts.push(base);
        used += base;
        rema.push((i, exact - base as f64));
    }
    rema.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..n - used {
        counts[rema[k % rema.len()].0] += 1;
    }
    counts
}

/// k-fold cross-validation pairs (train, held-out fold), stratified.
pub fn kfold(ds: &Dataset, folds: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
    if folds < 2 {
        return Err(Error::Config(format!("kfold needs >= 2 folds, got {folds}")));
    }
    let fractions = vec![1.0 / folds as f64; folds];
    let parts = split(ds, &fractions, true, seed)?;
    let mut out = Vec::with_capacity(folds);
    for held in 0..folds {
        let mut train = Dataset {
            samples: Vec::new(),
            num_classes: ds.num_classes,
            image_size: ds.image_size,
            class_names: ds.class_names.clone(),
        };
        for (i, p) in parts.iter().enumerate() {
            if i != held {
                train.samples.extend(p.samples.iter().cloned());
            }
        }
        out.push((train, parts[held].clone()));
    }
    Ok(out)
}
