//! Finite-difference gradient verification.
//!
//! This is the independent check for the backward sweep: it never touches
//! tape internals, only a caller-supplied pure forward evaluation, and
//! compares central differences in f64 against analytic gradients. Fixtures
//! must keep inputs away from kinks (relu zeros, top-k ties, |x| = 0 in the
//! l1 term); the helpers at the bottom construct such inputs.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;

/// Central-difference settings. `h` is the half step; coordinates beyond
/// `max_coords` are skipped on an evenly spaced grid to bound cost.
#[derive(Clone, Copy, Debug)]
pub struct FdSettings {
    pub h: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub max_coords: Option<usize>,
}

impl Default for FdSettings {
    fn default() -> Self {
        FdSettings {
            h: 1e-6,
            rel_tol: 1e-5,
            abs_floor: 1e-8,
            max_coords: None,
        }
    }
}

/// Worst observed disagreement between finite differences and the analytic
/// gradient.
#[derive(Clone, Copy, Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub worst_fd: f64,
    pub worst_analytic: f64,
}

impl FdReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

/// Checks `analytic` (dloss/dx at `x0`) against central differences of
/// `forward`. Differences below `abs_floor` count as exact agreement.
pub fn fd_check<Fwd>(
    x0: &[f64],
    analytic: &[f64],
    settings: &FdSettings,
    mut forward: Fwd,
) -> Result<FdReport>
where
    Fwd: FnMut(&[f64]) -> Result<f64>,
{
    if x0.len() != analytic.len() {
        return Err(Error::Constraint(format!(
            "fd_check: {} inputs but {} analytic gradient entries",
            x0.len(),
            analytic.len()
        )));
    }
    let coords: Vec<usize> = match settings.max_coords {
        Some(m) if m < x0.len() && m > 0 => {
            let step = x0.len() as f64 / m as f64;
            (0..m).map(|i| (i as f64 * step) as usize).collect()
        }
        _ => (0..x0.len()).collect(),
    };
    let mut x = x0.to_vec();
    let mut report = FdReport::default();
    for &i in &coords {
        let keep = x[i];
        x[i] = keep + settings.h;
        let up = forward(&x)?;
        x[i] = keep - settings.h;
        let down = forward(&x)?;
        x[i] = keep;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::Numeric(format!(
                "fd_check: non-finite forward value near coordinate {i}"
            )));
        }
        let fd = (up - down) / (2.0 * settings.h);
        let an = analytic[i];
        let diff = (fd - an).abs();
        let rel = if diff <= settings.abs_floor {
            0.0
        } else {
            diff / fd.abs().max(an.abs())
        };
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = i;
            report.worst_fd = fd;
            report.worst_analytic = an;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// `len` values with pairwise distance >= `gap`, in shuffled order. Used to
/// build top-k inputs where no tie or near-tie can flip the selection under
/// the finite-difference step.
pub fn well_separated<R: Rng>(rng: &mut R, len: usize, gap: f64, center: f64) -> Vec<f64> {
    let mut vals: Vec<f64> = (0..len)
        .map(|i| {
            let jitter = (rng.random::<f64>() - 0.5) * gap * 0.5;
            center + i as f64 * gap + jitter
        })
        .collect();
    vals.shuffle(rng);
    vals
}

/// Pushes every value at least `margin` away from zero (zero goes positive),
/// keeping relu and |x| locally linear under perturbation.
pub fn push_from_zero(data: &mut [f64], margin: f64) {
    for v in data.iter_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin };
        }
    }
}
