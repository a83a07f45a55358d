//! Adversarial evaluation: gradient-sign attacks (full-image and masked),
//! iterated projected descent, a gradient-free square-patch search, and the
//! accuracy/SAR statistics built on top of them.
//!
//! Every attack is pure per sample given a frozen model: randomness comes
//! from the config seed plus the sample index, so results do not depend on
//! batch composition or thread count.

pub mod eval;
pub mod square;

pub use eval::{attack_distance, evaluate_robustness, AttackDistanceReport, AttackRow, RobustnessReport};
pub use square::square_attack;

use crate::diffcore::kernels::sign_zero;
use crate::error::{Error, Result};
use crate::model::{argmax, forward, ForwardOpts, Mode, ModelParams};
use crate::Tensor;
use serde::{Deserialize, Serialize};

/// Inference-only access to a frozen model. The square attack accepts this
/// trait alone, so it cannot touch gradients by construction.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;
    /// Raw class scores, row-major [N * num_classes].
    fn logits(&self, images: &Tensor<f32>) -> Result<Vec<f64>>;

    fn predict_labels(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        let c = self.num_classes();
        let scores = self.logits(images)?;
        Ok((0..scores.len() / c)
            .map(|i| argmax(&scores[i * c..(i + 1) * c]))
            .collect())
    }
}

/// White-box access: gradient of the mean cross-entropy with respect to
/// the input pixels.
pub trait GradClassifier: Classifier {
    fn ce_input_grad(&self, images: &Tensor<f32>, labels: &[usize]) -> Result<Vec<f32>>;
}

/// The trained model behind the attack interface, with the parameters
/// frozen and an optional pool-size override.
pub struct ModelClassifier<'a> {
    params: &'a ModelParams<f32>,
    k_override: Option<usize>,
}

impl<'a> ModelClassifier<'a> {
    pub fn new(params: &'a ModelParams<f32>) -> Self {
        ModelClassifier {
            params,
            k_override: None,
        }
    }

    pub fn with_pool_size(params: &'a ModelParams<f32>, k: usize) -> Self {
        ModelClassifier {
            params,
            k_override: Some(k),
        }
    }
}

impl Classifier for ModelClassifier<'_> {
    fn num_classes(&self) -> usize {
        self.params.head.num_classes
    }

    fn logits(&self, images: &Tensor<f32>) -> Result<Vec<f64>> {
        let fp = forward(
            self.params,
            images,
            Mode::Eval,
            ForwardOpts {
                params_require_grad: false,
                input_requires_grad: false,
                k_override: self.k_override,
            },
        )?;
        Ok(fp.tape.value(fp.logits).iter().map(|v| *v as f64).collect())
    }
}

impl GradClassifier for ModelClassifier<'_> {
    fn ce_input_grad(&self, images: &Tensor<f32>, labels: &[usize]) -> Result<Vec<f32>> {
        let mut fp = forward(
            self.params,
            images,
            Mode::Eval,
            ForwardOpts {
                params_require_grad: false,
                input_requires_grad: true,
                k_override: self.k_override,
            },
        )?;
        let ce = fp.tape.softmax_ce(fp.logits, labels)?;
        fp.tape.backward(ce)?;
        Ok(fp
            .tape
            .grad(fp.input)
            .expect("input requires grad")
            .to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Square,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Square => "square",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// l-inf radius in [0,1] pixel units.
    pub epsilon: f64,
    pub steps: usize,
    /// Step size; None means epsilon / 4.
    pub alpha: Option<f64>,
    pub random_start: bool,
    pub query_budget: usize,
    pub p_init: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            alpha: None,
            random_start: false,
            query_budget: 0,
            p_init: 0.8,
            seed: 0,
        }
    }

    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon,
            steps,
            alpha: None,
            random_start: true,
            query_budget: 0,
            p_init: 0.8,
            seed: 0,
        }
    }

    pub fn square(epsilon: f64, query_budget: usize) -> Self {
        AttackConfig {
            kind: AttackKind::Square,
            epsilon,
            steps: 1,
            alpha: None,
            random_start: false,
            query_budget,
            p_init: 0.8,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The step size actually used by iterated descent.
    pub fn resolved_alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.epsilon / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && (0.0..=1.0).contains(&self.epsilon)) {
            return Err(Error::Config(format!(
                "epsilon must be in [0,1], got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if let Some(a) = self.alpha {
            if !(a.is_finite() && a > 0.0 && a <= self.epsilon) {
                return Err(Error::Config(format!(
                    "alpha must satisfy 0 < alpha <= epsilon ({}), got {a}",
                    self.epsilon
                )));
            }
        }
        if !(self.p_init > 0.0 && self.p_init <= 1.0) {
            return Err(Error::Config(format!(
                "p_init must be in (0,1], got {}",
                self.p_init
            )));
        }
        Ok(())
    }

    /// Human-readable echo used in report rows.
    pub fn describe(&self) -> String {
        match self.kind {
            AttackKind::Fgsm => format!("fgsm(eps={})", self.epsilon),
            AttackKind::Pgd => format!(
                "pgd(eps={}, steps={}, alpha={}, random_start={})",
                self.epsilon,
                self.steps,
                self.resolved_alpha(),
                self.random_start
            ),
            AttackKind::Square => format!(
                "square(eps={}, budget={}, p_init={})",
                self.epsilon, self.query_budget, self.p_init
            ),
        }
    }
}

/// Which side of the object mask an attack may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Object,
    Background,
}

fn check_pixel_range(x: &Tensor<f32>) -> Result<()> {
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Constraint(format!(
            "attack input pixels must lie in [0,1], found {v}"
        )));
    }
    Ok(())
}

fn checked_grad(model: &dyn GradClassifier, x: &Tensor<f32>, y: &[usize]) -> Result<Vec<f32>> {
    let g = model.ce_input_grad(x, y)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "cross-entropy input gradient is not finite".into(),
        ));
    }
    Ok(g)
}

fn batch_dims(x: &Tensor<f32>, y: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let dims = x.dims4()?;
    if y.len() != dims.0 {
        return Err(Error::Constraint(format!(
            "{} labels for a batch of {}",
            y.len(),
            dims.0
        )));
    }
    Ok(dims)
}

/// One signed gradient step of size epsilon, clipped to the pixel range.
pub fn fgsm(model: &dyn GradClassifier, x: &Tensor<f32>, y: &[usize], epsilon: f64) -> Result<Tensor<f32>> {
    batch_dims(x, y)?;
    check_pixel_range(x)?;
    if !(epsilon.is_finite() && (0.0..=1.0).contains(&epsilon)) {
        return Err(Error::Config(format!("epsilon must be in [0,1], got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let eps = epsilon as f32;
    let g = checked_grad(model, x, y)?;
    let data: Vec<f32> = x
        .data()
        .iter()
        .zip(&g)
        .map(|(&v, &gi)| (v + eps * sign_zero(gi)).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// FGSM restricted to one side of the object mask; the other side stays
/// bit-identical to the input. A sample whose selected region is empty is
/// returned unchanged (with a warning).
pub fn masked_fgsm(
    model: &dyn GradClassifier,
    x: &Tensor<f32>,
    y: &[usize],
    masks: &[Vec<u8>],
    region: Region,
    epsilon: f64,
) -> Result<Tensor<f32>> {
    let (n, c, h, w) = batch_dims(x, y)?;
    if masks.len() != n {
        return Err(Error::Constraint(format!(
            "{} masks for a batch of {n}",
            masks.len()
        )));
    }
    let hw = h * w;
    for (i, m) in masks.iter().enumerate() {
        if m.len() != hw {
            return Err(Error::Constraint(format!(
                "mask {i} has {} cells, image has {hw}",
                m.len()
            )));
        }
        if m.iter().any(|&v| v > 1) {
            return Err(Error::Constraint(format!("mask {i} is not binary")));
        }
    }

    let adv = fgsm(model, x, y, epsilon)?;
    let mut out = x.data().to_vec();
    let adv_data = adv.data();
    let want: u8 = match region {
        Region::Object => 1,
        Region::Background => 0,
    };
    for (i, mask) in masks.iter().enumerate() {
        let selected = mask.iter().filter(|&&m| m == want).count();
        if selected == 0 {
            log::warn!("masked attack: sample {i} has an empty {region:?} region; left unchanged");
            continue;
        }
        for (p, &m) in mask.iter().enumerate() {
            if m == want {
                for ch in 0..c {
                    let idx = (i * c + ch) * hw + p;
                    out[idx] = adv_data[idx];
                }
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Iterated signed-gradient descent projected onto the epsilon-ball around
/// the input and the pixel range. With steps=1, no random start, and
/// alpha=epsilon this reproduces `fgsm` bit for bit.
pub fn pgd(model: &dyn GradClassifier, x: &Tensor<f32>, y: &[usize], cfg: &AttackConfig) -> Result<Tensor<f32>> {
    use rand::Rng;
    use rand::SeedableRng;

    cfg.validate()?;
    let (n, c, h, w) = batch_dims(x, y)?;
    check_pixel_range(x)?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let eps = cfg.epsilon as f32;
    let alpha = cfg.resolved_alpha() as f32;
    let x0 = x.data();
    let per_sample = c * h * w;

    let mut cur = x0.to_vec();
    if cfg.random_start {
        for i in 0..n {
            // Seed by sample index so results are batching-invariant.
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::seeds::splitmix64(
                cfg.seed.wrapping_add(i as u64),
            ));
            for j in i * per_sample..(i + 1) * per_sample {
                let r: f32 = rng.random();
                cur[j] = (x0[j] + (2.0 * r - 1.0) * eps).clamp(0.0, 1.0);
            }
        }
    }

    for _ in 0..cfg.steps {
        let t = Tensor::from_vec(x.shape(), cur.clone())?;
        let g = checked_grad(model, &t, y)?;
        for j in 0..cur.len() {
            let stepped = cur[j] + alpha * sign_zero(g[j]);
            cur[j] = stepped.clamp(x0[j] - eps, x0[j] + eps).clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(x.shape(), cur)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Linear softmax classifier over flattened pixels, with an analytic
    /// cross-entropy gradient. Small enough to reason about by hand.
    pub struct LinearToy {
        /// Row-major [classes, dim].
        pub w: Vec<f64>,
        pub bias: Vec<f64>,
        pub classes: usize,
        pub dim: usize,
    }

    impl LinearToy {
        pub fn new(w: Vec<f64>, classes: usize, dim: usize) -> Self {
            LinearToy {
                w,
                bias: vec![0.0; classes],
                classes,
                dim,
            }
        }

        pub fn with_bias(mut self, bias: Vec<f64>) -> Self {
            self.bias = bias;
            self
        }
    }

    impl Classifier for LinearToy {
        fn num_classes(&self) -> usize {
            self.classes
        }

        fn logits(&self, images: &Tensor<f32>) -> Result<Vec<f64>> {
            let n = images.numel() / self.dim;
            let x = images.data();
            let mut out = vec![0.0f64; n * self.classes];
            for i in 0..n {
                for cl in 0..self.classes {
                    let mut s = self.bias[cl];
                    for d in 0..self.dim {
                        s += self.w[cl * self.dim + d] * x[i * self.dim + d] as f64;
                    }
                    out[i * self.classes + cl] = s;
                }
            }
            Ok(out)
        }
    }

    impl GradClassifier for LinearToy {
        fn ce_input_grad(&self, images: &Tensor<f32>, labels: &[usize]) -> Result<Vec<f32>> {
            let n = images.numel() / self.dim;
            let logits = self.logits(images)?;
            let probs = crate::diffcore::kernels::softmax_rows(&logits, n, self.classes);
            let mut g = vec![0.0f32; images.numel()];
            for i in 0..n {
                for d in 0..self.dim {
                    let mut s = 0.0f64;
                    for cl in 0..self.classes {
                        let delta = if cl == labels[i] { 1.0 } else { 0.0 };
                        s += (probs[i * self.classes + cl] - delta) * self.w[cl * self.dim + d];
                    }
                    g[i * self.dim + d] = (s / n as f64) as f32;
                }
            }
            Ok(g)
        }
    }
}
