//! Synthetic shapes with controllable background-texture bias.
//!
//! Each image holds one solid shape (the label) on a textured or noise
//! background. Texture identity correlates with the label at probability
//! `bias` in the train split; the test split decorrelates textures by
//! sampling them uniformly, so a background-shortcut model scores at
//! chance-adjusted accuracy there. Masks come straight from the
//! rasterization predicate, so they are exact. All randomness is derived
//! per sample from (seed, split, index); generation order and thread
//! count cannot change the output.

use crate::data::{Dataset, Sample};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Shape classes, in label order.
pub const CLASS_NAMES: [&str; 4] = ["disc", "square", "triangle", "cross"];

/// Background families. Textures carry the label correlation; noise is the
/// uninformative control.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Noise,
    Textures,
}

/// Generator configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ShapesConfig {
    /// Train-split sample count; the test split gets count/4.
    pub count: usize,
    pub image_size: usize,
    /// 2..=4 classes, mapped onto [`CLASS_NAMES`] prefixes.
    pub num_classes: usize,
    /// Object area as a fraction of the image, inclusive bounds.
    pub area: (f64, f64),
    pub background: BackgroundKind,
    /// P(texture id == label) in the train split.
    pub bias: f64,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            count: 8000,
            image_size: 64,
            num_classes: 4,
            area: (0.04, 0.12),
            background: BackgroundKind::Textures,
            bias: 0.95,
            seed: 0,
        }
    }
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("shapes count must be >= 1".into()));
        }
        if !(2..=CLASS_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be 2..={}, got {}",
                CLASS_NAMES.len(),
                self.num_classes
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size must be >= 16, got {}",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.bias) {
            return Err(Error::Config(format!("bias must be in [0,1], got {}", self.bias)));
        }
        let (lo, hi) = self.area;
        let hw = (self.image_size * self.image_size) as f64;
        if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "area bounds must satisfy 0 < lo <= hi < 1, got ({lo}, {hi})"
            )));
        }
        if lo * hw < 4.0 {
            return Err(Error::Config(format!(
                "area lower bound {lo} gives fewer than 4 object pixels at size {}",
                self.image_size
            )));
        }
        if (hi - lo) * hw < 8.0 {
            return Err(Error::Config(format!(
                "area window ({lo}, {hi}) narrower than 8 pixels at size {}; rasterization cannot hit it reliably",
                self.image_size
            )));
        }
        // The largest shape dimension must fit with a margin. The cross is
        // the widest shape per unit area: len = sqrt(area/0.51).
        let max_extent = (hi * hw / 0.51).sqrt();
        if max_extent > (self.image_size - 2) as f64 {
            return Err(Error::Config(format!(
                "area upper bound {hi} needs shapes of extent {max_extent:.1}px, image is {}px",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Generates (train, test). Train textures follow the configured bias;
/// test textures are uniform over all ids, so P(texture == label) = 1/C.
pub fn gen_shapes(cfg: &ShapesConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let train = gen_split(cfg, SplitTag::Train, cfg.count)?;
    let test = gen_split(cfg, SplitTag::Test, (cfg.count / 4).max(1))?;
    Ok((train, test))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SplitTag {
    Train,
    Test,
}

impl SplitTag {
    fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        }
    }
    fn tag(self) -> u64 {
        match self {
            SplitTag::Train => 0,
            SplitTag::Test => 1,
        }
    }
}

fn gen_split(cfg: &ShapesConfig, tag: SplitTag, count: usize) -> Result<Dataset> {
    let samples: Vec<Result<Sample>> = (0..count)
        .into_par_iter()
        .map(|i| gen_sample(cfg, tag, i))
        .collect();
    let mut out = Vec::with_capacity(count);
    for s in samples {
        out.push(s?);
    }
    Ok(Dataset {
        samples: out,
        num_classes: cfg.num_classes,
        image_size: cfg.image_size,
        class_names: CLASS_NAMES[..cfg.num_classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    })
}

fn sample_seed(base: u64, tag: u64, index: u64) -> u64 {
    crate::seeds::derive(base, tag, index)
}

fn gen_sample(cfg: &ShapesConfig, tag: SplitTag, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, tag.tag(), index as u64));
    let label = index % cfg.num_classes;
    let size = cfg.image_size;
    let hw = size * size;

    // Background first; its identity drives the bias.
    let texture = match cfg.background {
        BackgroundKind::Noise => None,
        BackgroundKind::Textures => Some(pick_texture(&mut rng, cfg, tag, label)),
    };
    let mut image = vec![0.0f32; 3 * hw];
    match texture {
        None => render_noise(&mut rng, &mut image),
        Some(t) => render_texture(&mut rng, size, t, &mut image),
    }

    let object_color = pick_object_color(&mut rng, texture);
    let mask = place_shape(&mut rng, cfg, label, size)?;
    for (p, &m) in mask.iter().enumerate() {
        if m == 1 {
            for c in 0..3 {
                image[c * hw + p] = object_color[c];
            }
        }
    }
    // Snap to the u8 grid so PNG round trips are bit-exact.
    for v in &mut image {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }

    Ok(Sample {
        id: format!("{}-{index:05}", tag.name()),
        image: Tensor::from_vec(&[3, size, size], image)?,
        label,
        mask: Some(mask),
    })
}

fn pick_texture(rng: &mut ChaCha8Rng, cfg: &ShapesConfig, tag: SplitTag, label: usize) -> usize {
    match tag {
        // Uniform over all ids: the decorrelated split.
        SplitTag::Test => rng.random_range(0..cfg.num_classes),
        SplitTag::Train => {
            if rng.random::<f64>() < cfg.bias {
                label
            } else {
                // Uniform over the other ids keeps P(t == label) == bias.
                let r = rng.random_range(0..cfg.num_classes - 1);
                if r >= label {
                    r + 1
                } else {
                    r
                }
            }
        }
    }
}

/// Distinct base colors and stripe orientations per texture id.
const TEXTURE_BASE: [[f32; 3]; 4] = [
    [0.75, 0.30, 0.30],
    [0.30, 0.75, 0.30],
    [0.30, 0.40, 0.80],
    [0.75, 0.70, 0.30],
];

fn render_noise(rng: &mut ChaCha8Rng, image: &mut [f32]) {
    for v in image.iter_mut() {
        *v = 0.25 + 0.5 * rng.random::<f32>();
    }
}

fn render_texture(rng: &mut ChaCha8Rng, size: usize, t: usize, image: &mut [f32]) {
    let base = TEXTURE_BASE[t];
    let hw = size * size;
    const PERIOD: usize = 8;
    for y in 0..size {
        for x in 0..size {
            let coord = match t {
                0 => y,
                1 => x,
                2 => x + y,
                _ => x + 4 * size - y, // anti-diagonal, kept non-negative
            };
            let stripe = if (coord / PERIOD) % 2 == 0 { 1.0 } else { 0.0 };
            let level = 0.8 + 0.2 * stripe;
            for c in 0..3 {
                let noise = (rng.random::<f32>() - 0.5) * 0.08;
                image[c * hw + y * size + x] = (base[c] * level + noise).clamp(0.0, 1.0);
            }
        }
    }
}

fn pick_object_color(rng: &mut ChaCha8Rng, texture: Option<usize>) -> [f32; 3] {
    let reference = match texture {
        Some(t) => TEXTURE_BASE[t],
        None => [0.5, 0.5, 0.5],
    };
    let mut color = [0.0f32; 3];
    for _ in 0..64 {
        for c in &mut color {
            *c = rng.random::<f32>();
        }
        let dist: f32 = color
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .sum();
        if dist >= 0.9 {
            break;
        }
    }
    color
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    fn of_label(label: usize) -> ShapeKind {
        match label {
            0 => ShapeKind::Disc,
            1 => ShapeKind::Square,
            2 => ShapeKind::Triangle,
            _ => ShapeKind::Cross,
        }
    }

    /// Characteristic length whose shape covers roughly `area` pixels.
    fn length_for_area(self, area: f64) -> f64 {
        match self {
            ShapeKind::Disc => 2.0 * (area / std::f64::consts::PI).sqrt(),
            ShapeKind::Square => area.sqrt(),
            ShapeKind::Triangle => (area / 0.433).sqrt(),
            ShapeKind::Cross => (area / 0.51).sqrt(),
        }
    }

    /// Half extents (hx, hy) of the bounding box at length `s`.
    fn half_extent(self, s: f64) -> (f64, f64) {
        match self {
            ShapeKind::Disc => (s / 2.0, s / 2.0),
            ShapeKind::Square => (s / 2.0, s / 2.0),
            ShapeKind::Triangle => (s / 2.0, s * 0.433),
            ShapeKind::Cross => (s / 2.0, s / 2.0),
        }
    }
}

/// Hard-edge rasterization at pixel centers: a pixel belongs to the shape
/// iff its center satisfies the analytic inclusion test. No anti-aliasing,
/// so the mask is exact by construction.
fn rasterize(kind: ShapeKind, cx: f64, cy: f64, s: f64, size: usize, mask: &mut [u8]) -> usize {
    mask.fill(0);
    let mut count = 0usize;
    let (hx, hy) = kind.half_extent(s);
    let y0 = ((cy - hy - 1.0).floor().max(0.0)) as usize;
    let y1 = ((cy + hy + 1.0).ceil().min(size as f64)) as usize;
    let x0 = ((cx - hx - 1.0).floor().max(0.0)) as usize;
    let x1 = ((cx + hx + 1.0).ceil().min(size as f64)) as usize;
    for y in y0..y1 {
        let py = y as f64 + 0.5 - cy;
        for x in x0..x1 {
            let px = x as f64 + 0.5 - cx;
            let inside = match kind {
                ShapeKind::Disc => px * px + py * py <= (s / 2.0) * (s / 2.0),
                ShapeKind::Square => px.abs() <= s / 2.0 && py.abs() <= s / 2.0,
                ShapeKind::Triangle => {
                    // Up-pointing: apex (0,-h), base corners (+-s/2, +h).
                    let h = s * 0.433;
                    if py < -h || py > h {
                        false
                    } else {
                        // Width grows linearly from apex to base.
                        let frac = (py + h) / (2.0 * h);
                        px.abs() <= frac * (s / 2.0)
                    }
                }
                ShapeKind::Cross => {
                    let w = 0.3 * s;
                    (px.abs() <= w / 2.0 && py.abs() <= s / 2.0)
                        || (py.abs() <= w / 2.0 && px.abs() <= s / 2.0)
                }
            };
            if inside {
                mask[y * size + x] = 1;
                count += 1;
            }
        }
    }
    count
}

/// Samples a position and size, rasterizes, and retunes the size until the
/// recounted pixel area lands inside the configured bounds.
fn place_shape(rng: &mut ChaCha8Rng, cfg: &ShapesConfig, label: usize, size: usize) -> Result<Vec<u8>> {
    let kind = ShapeKind::of_label(label);
    let hw = (size * size) as f64;
    let (lo, hi) = cfg.area;
    let mut mask = vec![0u8; size * size];
    for _attempt in 0..20 {
        let target = (lo + rng.random::<f64>() * (hi - lo)) * hw;
        let mut s = kind.length_for_area(target);
        let (hx, hy) = kind.half_extent(s);
        let (min_cx, max_cx) = (hx + 1.0, size as f64 - hx - 1.0);
        let (min_cy, max_cy) = (hy + 1.0, size as f64 - hy - 1.0);
        if min_cx >= max_cx || min_cy >= max_cy {
            continue; // too big for this image, try another draw
        }
        let cx = min_cx + rng.random::<f64>() * (max_cx - min_cx);
        let cy = min_cy + rng.random::<f64>() * (max_cy - min_cy);
        for _adjust in 0..16 {
            let count = rasterize(kind, cx, cy, s, size, &mut mask) as f64;
            let frac = count / hw;
            if frac >= lo && frac <= hi {
                return Ok(mask);
            }
            if count == 0.0 {
                break;
            }
            // Rescale toward the window midpoint.
            let want = 0.5 * (lo + hi) * hw;
            s *= (want / count).sqrt().clamp(0.5, 2.0);
            let (hx, hy) = kind.half_extent(s);
            if cx - hx < 0.0
                || cy - hy < 0.0
                || cx + hx > size as f64
                || cy + hy > size as f64
            {
                break;
            }
        }
    }
    Err(Error::Data(format!(
        "could not rasterize a {} within area bounds ({lo}, {hi}) at size {size}",
        CLASS_NAMES[label]
    )))
}
