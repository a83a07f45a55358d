//! Black-box random-search attack: proposes square patches of +-epsilon,
//! keeps a proposal only when it strictly lowers the logit margin of the
//! true class, and stops at misclassification or query exhaustion. Takes a
//! logits-only classifier, so it cannot use gradients even by accident.

use super::{batch_dims, check_pixel_range, AttackConfig, Classifier};
use crate::error::Result;
use crate::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Budget fractions at which the patch-area parameter halves.
const HALVING_FRACTIONS: [f64; 8] = [0.001, 0.005, 0.02, 0.1, 0.2, 0.4, 0.6, 0.8];

fn patch_side(p_init: f64, done: usize, budget: usize, h: usize, w: usize) -> usize {
    let frac = done as f64 / budget as f64;
    let halvings = HALVING_FRACTIONS.iter().filter(|&&f| frac >= f).count();
    let p = p_init / (1u64 << halvings) as f64;
    let side = (p * (h * w) as f64).sqrt().round() as usize;
    side.clamp(1, h.min(w))
}

/// Margin of the true class: positive means still classified correctly.
fn margin(logits: &[f64], label: usize) -> f64 {
    let own = logits[label];
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    own - best_other
}

fn attack_one(
    model: &dyn Classifier,
    x0: &[f32],
    shape: &[usize],
    label: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<f32>> {
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let eps = cfg.epsilon as f32;
    let hw = h * w;
    let query = |data: &[f32]| -> Result<f64> {
        let t = Tensor::from_vec(&[1, c, h, w], data.to_vec())?;
        let logits = model.logits(&t)?;
        Ok(margin(&logits, label))
    };

    let mut queries = 0usize;
    let mut best = x0.to_vec();
    let mut best_margin = query(&best)?;
    queries += 1;
    if best_margin < 0.0 || queries >= cfg.query_budget {
        return Ok(best);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta = vec![0.0f32; c * hw];

    // Vertical +-eps stripes as the opening proposal.
    let mut init = delta.clone();
    for ch in 0..c {
        for col in 0..w {
            let sign = if rng.random::<bool>() { eps } else { -eps };
            for row in 0..h {
                init[ch * hw + row * w + col] = sign;
            }
        }
    }
    let cand: Vec<f32> = x0
        .iter()
        .zip(&init)
        .map(|(&v, &d)| (v + d).clamp(0.0, 1.0))
        .collect();
    let m = query(&cand)?;
    queries += 1;
    if m < best_margin {
        best = cand;
        best_margin = m;
        delta = init;
    }

    while best_margin >= 0.0 && queries < cfg.query_budget {
        let side = patch_side(cfg.p_init, queries, cfg.query_budget, h, w);
        let r0 = rng.random_range(0..=h - side);
        let c0 = rng.random_range(0..=w - side);
        let mut proposal = delta.clone();
        for ch in 0..c {
            let sign = if rng.random::<bool>() { eps } else { -eps };
            for r in r0..r0 + side {
                for cc in c0..c0 + side {
                    proposal[ch * hw + r * w + cc] = sign;
                }
            }
        }
        let cand: Vec<f32> = x0
            .iter()
            .zip(&proposal)
            .map(|(&v, &d)| (v + d).clamp(0.0, 1.0))
            .collect();
        let m = query(&cand)?;
        queries += 1;
        if m < best_margin {
            best = cand;
            best_margin = m;
            delta = proposal;
        }
    }
    Ok(best)
}

/// Runs the square search independently per sample; sample i draws its
/// randomness from `cfg.seed + i`, so results are batching-invariant.
pub fn square_attack(
    model: &dyn Classifier,
    x: &Tensor<f32>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let (n, c, h, w) = batch_dims(x, y)?;
    check_pixel_range(x)?;
    if cfg.epsilon == 0.0 || cfg.query_budget == 0 {
        return Ok(x.clone());
    }
    let per = c * h * w;
    let shape = [1usize, c, h, w];
    let rows: Vec<Result<Vec<f32>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = crate::seeds::splitmix64(cfg.seed.wrapping_add(i as u64));
            attack_one(model, &x.data()[i * per..(i + 1) * per], &shape, y[i], cfg, seed)
        })
        .collect();
    let mut out = Vec::with_capacity(n * per);
    for row in rows {
        out.extend(row?);
    }
    Tensor::from_vec(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::LinearToy;
    use super::*;

    #[test]
    fn zero_budget_and_zero_eps_return_input() {
        let m = LinearToy::new(vec![1.0, -1.0], 2, 1);
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![0.5f32]).unwrap();
        let a = square_attack(&m, &x, &[0], &AttackConfig::square(0.1, 0)).unwrap();
        assert_eq!(a.data(), x.data());
        let b = square_attack(&m, &x, &[0], &AttackConfig::square(0.0, 100)).unwrap();
        assert_eq!(b.data(), x.data());
    }

    #[test]
    fn feasibility_holds_for_every_output_pixel() {
        use rand::{Rng, SeedableRng};
        let dim = 3 * 4 * 4;
        let m = LinearToy::new(
            (0..3 * dim).map(|i| ((i * 11 % 17) as f64 - 8.0) / 9.0).collect(),
            3,
            dim,
        );
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f32> = (0..4 * dim).map(|_| rng.random()).collect();
        let x = Tensor::from_vec(&[4, 3, 4, 4], data).unwrap();
        let eps = 8.0 / 255.0;
        let adv = square_attack(&m, &x, &[0, 1, 2, 0], &AttackConfig::square(eps, 60).with_seed(5)).unwrap();
        for (a, b) in adv.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= eps as f32 + 1e-7, "{a} vs {b}");
            assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn flippable_linear_model_gets_flipped_and_impossible_one_does_not() {
        // Margin depends only on pixel 0: class 0 = x, class 1 = -x + 0.8,
        // so margin(label 0) = 2x - 0.8 and the boundary sits at x = 0.4.
        let dim = 16;
        let mut w = vec![0.0f64; 2 * dim];
        w[0] = 1.0;
        w[dim] = -1.0;
        let m = LinearToy::new(w, 2, dim).with_bias(vec![0.0, 0.8]);
        let x = Tensor::from_vec(&[1, 1, 4, 4], vec![0.5f32; 16]).unwrap();
        // eps = 0.2 reaches x = 0.3 < 0.4: a flip exists, and since any
        // accepted square over pixel 0 with a negative sign produces it,
        // random search must find one within the budget.
        let adv = square_attack(&m, &x, &[0], &AttackConfig::square(0.2, 400).with_seed(3)).unwrap();
        let flipped = m.predict_labels(&adv).unwrap();
        assert_eq!(flipped, vec![1]);

        // Exhaustive bound: only pixel 0 carries weight, |w0 - w1| = 2, so
        // no feasible perturbation can move the margin by more than
        // 2 * eps = 0.08 < 0.2. The attack must fail.
        let eps = 0.04;
        let adv = square_attack(&m, &x, &[0], &AttackConfig::square(eps, 400).with_seed(3)).unwrap();
        assert_eq!(m.predict_labels(&adv).unwrap(), vec![0]);
        for (a, b) in adv.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= eps as f32 + 1e-7);
        }
    }

    #[test]
    fn already_misclassified_sample_is_left_alone() {
        let m = LinearToy::new(vec![1.0, -1.0], 2, 1);
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![0.9f32]).unwrap();
        // Label 1 is already wrong under the model; margin < 0 at once.
        let adv = square_attack(&m, &x, &[1], &AttackConfig::square(0.3, 100)).unwrap();
        assert_eq!(adv.data(), x.data());
    }

    #[test]
    fn patch_side_shrinks_with_budget_progress() {
        let early = patch_side(0.8, 0, 1000, 16, 16);
        let late = patch_side(0.8, 900, 1000, 16, 16);
        assert!(early > late);
        assert!(late >= 1);
        assert!(early <= 16);
    }

    #[test]
    fn batching_invariance() {
        use rand::{Rng, SeedableRng};
        let dim = 2 * 3 * 3;
        let m = LinearToy::new((0..2 * dim).map(|i| ((i % 7) as f64 - 3.0) / 4.0).collect(), 2, dim);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f32> = (0..2 * dim).map(|_| rng.random()).collect();
        let both = Tensor::from_vec(&[2, 2, 3, 3], data.clone()).unwrap();
        let cfg = AttackConfig::square(0.1, 50).with_seed(40);
        let joint = square_attack(&m, &both, &[0, 1], &cfg).unwrap();

        let second = Tensor::from_vec(&[1, 2, 3, 3], data[dim..].to_vec()).unwrap();
        let shifted = AttackConfig { seed: cfg.seed.wrapping_add(1), ..cfg };
        let solo = square_attack(&m, &second, &[1], &shifted).unwrap();
        assert_eq!(joint.data()[dim..], *solo.data());
    }
}
