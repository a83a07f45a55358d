//! Interpretability diagnostics: effective-receptive-field gradient maps
//! and their center-vs-corner distance, gradient-weighted and direct class
//! activation maps, CAM sparsity and mask-overlap scores, and pool-size
//! sweeps.

pub mod export;
pub mod sweep;

pub use sweep::{k_sweep, spearman, SweepConfig, SweepReport, SweepRow};

use crate::error::{Error, Result};
use crate::model::forward::normalized_cam;
use crate::model::{forward, Cam, ForwardOpts, Mode, ModelParams};
use crate::{NodeId, Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Output location a receptive-field probe differentiates from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutLoc {
    /// (floor(H/2), floor(W/2)) of the class feature map.
    Center,
    /// (0, 0).
    Corner,
}

/// Per-input-pixel absolute gradient of one output location, channel-summed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradMap {
    pub loc: (usize, usize),
    pub height: usize,
    pub width: usize,
    pub raw: Vec<f64>,
    /// Raw values z-normalized over this map; all zeros when the map is
    /// constant (zero variance).
    pub z: Vec<f64>,
    pub norm_tag: String,
}

/// Population z-normalization; a constant (or degenerate) input maps to
/// all zeros instead of dividing by a zero standard deviation.
fn z_normalize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std.is_finite() && std > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

fn single_image<F: Scalar>(params: &ModelParams<F>, image: &Tensor<F>) -> Result<Tensor<F>> {
    let s = params.backbone.input_size;
    let c = params.backbone.input_channels;
    match image.shape() {
        [ch, h, w] if *ch == c && *h == s && *w == s => {
            Tensor::from_vec(&[1, c, s, s], image.data().to_vec())
        }
        [1, ch, h, w] if *ch == c && *h == s && *w == s => Ok(image.clone()),
        other => Err(Error::Constraint(format!(
            "expected a single [{c}, {s}, {s}] image, got {other:?}"
        ))),
    }
}

fn out_loc_index(params: &ModelParams<impl Scalar>, loc: OutLoc) -> (usize, usize) {
    let h1 = params.backbone.fused_size();
    match loc {
        OutLoc::Center => (h1 / 2, h1 / 2),
        OutLoc::Corner => (0, 0),
    }
}

/// |d sum_c class_map[c, loc] / d input|, summed over input channels.
/// The raw map is in input-pixel units; `z` is its per-map normalization.
pub fn erf_gradient_map<F: Scalar>(
    params: &ModelParams<F>,
    image: &Tensor<F>,
    loc: OutLoc,
) -> Result<GradMap> {
    let image = single_image(params, image)?;
    let (r, c) = out_loc_index(params, loc);
    let raw = erf_raw(params, &image, (r, c))?;
    let z = z_normalize(&raw);
    let s = params.backbone.input_size;
    Ok(GradMap {
        loc: (r, c),
        height: s,
        width: s,
        raw,
        z,
        norm_tag: "per-map-z".to_string(),
    })
}

fn erf_raw<F: Scalar>(
    params: &ModelParams<F>,
    image: &Tensor<F>,
    (r, c): (usize, usize),
) -> Result<Vec<f64>> {
    let mut fp = forward(
        params,
        image,
        Mode::Eval,
        ForwardOpts {
            params_require_grad: false,
            input_requires_grad: true,
            k_override: None,
        },
    )?;
    let target = fp.tape.spatial_pick(fp.feature_map, r, c)?;
    fp.tape.backward(target)?;
    let g = fp.tape.grad(fp.input).expect("input requires grad");
    let s = params.backbone.input_size;
    let chans = params.backbone.input_channels;
    let hw = s * s;
    let mut map = vec![0.0f64; hw];
    for ch in 0..chans {
        for p in 0..hw {
            map[p] += g[ch * hw + p].as_f64().abs();
        }
    }
    Ok(map)
}

/// Center and corner receptive-field magnitudes plus their gap.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErfReport {
    pub center: f64,
    pub corner: f64,
    /// center - corner, exactly.
    pub distance: f64,
    pub sample_count: usize,
    pub norm_tag: String,
}

/// Distance from raw center/corner map pairs: each pair is z-normalized
/// jointly (one mean and deviation over both maps), the per-location score
/// is the mean absolute normalized gradient, and scores average over
/// images.
pub fn erf_distance_from_maps(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<ErfReport> {
    if pairs.is_empty() {
        return Err(Error::Data("erf distance needs at least one image".into()));
    }
    let mut center_sum = 0.0f64;
    let mut corner_sum = 0.0f64;
    for (center, corner) in pairs {
        let mut joint = Vec::with_capacity(center.len() + corner.len());
        joint.extend_from_slice(center);
        joint.extend_from_slice(corner);
        let z = z_normalize(&joint);
        let (zc, zk) = z.split_at(center.len());
        center_sum += zc.iter().map(|v| v.abs()).sum::<f64>() / zc.len() as f64;
        corner_sum += zk.iter().map(|v| v.abs()).sum::<f64>() / zk.len() as f64;
    }
    let n = pairs.len() as f64;
    let center = center_sum / n;
    let corner = corner_sum / n;
    Ok(ErfReport {
        center,
        corner,
        distance: center - corner,
        sample_count: pairs.len(),
        norm_tag: "joint-z".to_string(),
    })
}

/// Runs center and corner probes over a batch of images and aggregates.
pub fn erf_distance<F: Scalar>(params: &ModelParams<F>, images: &Tensor<F>) -> Result<ErfReport> {
    let (n, c, h, w) = images.dims4()?;
    if n == 0 {
        return Err(Error::Data("erf distance needs at least one image".into()));
    }
    let center_loc = out_loc_index(params, OutLoc::Center);
    let corner_loc = out_loc_index(params, OutLoc::Corner);
    let per = c * h * w;
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let img = Tensor::from_vec(&[1, c, h, w], images.data()[i * per..(i + 1) * per].to_vec())?;
        let center = erf_raw(params, &img, center_loc)?;
        let corner = erf_raw(params, &img, corner_loc)?;
        pairs.push((center, corner));
    }
    erf_distance_from_maps(&pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamMethod {
    /// Direct read of the class feature map (the model's own map).
    Ours,
    /// Gradient-weighted channel sum at a feature layer.
    GradCam,
}

/// Which feature layer a gradient-weighted map is taken at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamLayer {
    /// The fused multi-scale features feeding the class conv (the last
    /// shared feature map; the usual choice).
    Fused,
    /// The per-class feature map itself.
    ClassMap,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CamResult {
    pub method: CamMethod,
    pub class_idx: usize,
    pub cam: Cam,
    /// Per-channel weights W_k for the gradient-weighted method; empty for
    /// the direct method.
    pub channel_weights: Vec<f64>,
}

/// ReLU of the weight-blended channels, given values and weights of one
/// feature layer. Exposed for hand-checked tests.
pub(crate) fn weighted_cam(values: &[f64], weights: &[f64], channels: usize, hw: usize) -> Vec<f64> {
    let mut blended = vec![0.0f64; hw];
    for k in 0..channels {
        let w = weights[k];
        for p in 0..hw {
            blended[p] += w * values[k * hw + p];
        }
    }
    for v in &mut blended {
        *v = v.max(0.0);
    }
    blended
}

/// Gradient-weighted class activation map: channel weights are the spatial
/// mean of d logit_c / d layer, the map is ReLU of the weighted channel
/// sum, scaled to the input resolution and min-max normalized.
pub fn gradcam<F: Scalar>(
    params: &ModelParams<F>,
    image: &Tensor<F>,
    class_idx: usize,
    layer: CamLayer,
) -> Result<CamResult> {
    if class_idx >= params.head.num_classes {
        return Err(Error::Constraint(format!(
            "class index {class_idx} out of range for {} classes",
            params.head.num_classes
        )));
    }
    let image = single_image(params, image)?;
    let mut fp = forward(
        params,
        &image,
        Mode::Eval,
        ForwardOpts {
            params_require_grad: false,
            input_requires_grad: true,
            k_override: None,
        },
    )?;
    let node: NodeId = match layer {
        CamLayer::Fused => fp.fused,
        CamLayer::ClassMap => fp.feature_map,
    };
    let target = fp.tape.pick_scalar(fp.logits, class_idx)?;
    fp.tape.backward(target)?;

    let shape = fp.tape.shape(node).to_vec();
    let (channels, h, w) = (shape[1], shape[2], shape[3]);
    let hw = h * w;
    let values: Vec<f64> = fp.tape.value(node).iter().map(|v| v.as_f64()).collect();
    let grads: Vec<f64> = fp
        .tape
        .grad(node)
        .ok_or_else(|| Error::State("feature layer did not receive a gradient".into()))?
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let weights: Vec<f64> = (0..channels)
        .map(|k| grads[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect();
    let blended = weighted_cam(&values, &weights, channels, hw);
    let factor = params.backbone.input_size / h;
    Ok(CamResult {
        method: CamMethod::GradCam,
        class_idx,
        cam: normalized_cam(&blended, h, factor),
        channel_weights: weights,
    })
}

/// The model's own class activation map for one image, at input resolution.
pub fn class_cam<F: Scalar>(params: &ModelParams<F>, image: &Tensor<F>, class_idx: usize) -> Result<CamResult> {
    let image = single_image(params, image)?;
    let fp = forward(
        params,
        &image,
        Mode::Eval,
        ForwardOpts {
            params_require_grad: false,
            input_requires_grad: false,
            k_override: None,
        },
    )?;
    let fm = fp.tape.tensor(fp.feature_map);
    let cams = crate::model::cam_mode(&fm, class_idx, params.backbone.input_size)?;
    Ok(CamResult {
        method: CamMethod::Ours,
        class_idx,
        cam: cams.into_iter().next().expect("batch of one"),
        channel_weights: Vec::new(),
    })
}

/// Mean activation mass of a normalized map (its l1 norm over cell count).
pub fn cam_sparsity(cam: &Cam) -> f64 {
    cam.values.iter().sum::<f64>() / cam.values.len() as f64
}

/// Intersection-over-union between the thresholded map and a binary mask.
/// Both sets empty counts as a perfect match.
pub fn cam_iou(cam: &Cam, mask: &[u8], threshold: f64) -> Result<f64> {
    if mask.len() != cam.values.len() {
        return Err(Error::Data(format!(
            "mask has {} cells, map has {}",
            mask.len(),
            cam.values.len()
        )));
    }
    if mask.iter().any(|&v| v > 1) {
        return Err(Error::Data("mask is not binary".into()));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (v, &m) in cam.values.iter().zip(mask) {
        let a = *v >= threshold;
        let b = m == 1;
        if a && b {
            inter += 1;
        }
        if a || b {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// IoU across thresholds 0.1..=0.9, for reporting next to the pinned 0.5.
pub fn cam_iou_sweep(cam: &Cam, mask: &[u8]) -> Result<Vec<(f64, f64)>> {
    (1..=9)
        .map(|i| {
            let t = i as f64 / 10.0;
            cam_iou(cam, mask, t).map(|iou| (t, iou))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, BackboneConfig, HeadConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn micro(seed: u64) -> ModelParams<f32> {
        let bb = BackboneConfig {
            input_size: 32,
            input_channels: 3,
            stage_widths: vec![4, 6],
            blocks_per_stage: 1,
            feature_maps_used: 2,
        };
        let head = HeadConfig {
            fpn_channels: 5,
            num_classes: 3,
            k: 4,
            lambda: 1.0,
            dropout: 0.0,
        };
        build_model(&bb, &head, seed).unwrap()
    }

    fn rand_image(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.random()).collect();
        Tensor::from_vec(&[3, 32, 32], data).unwrap()
    }

    #[test]
    fn z_normalize_hits_mean_zero_std_one() {
        let z = z_normalize(&[1.0, 2.0, 3.0, 4.0]);
        let mean: f64 = z.iter().sum::<f64>() / 4.0;
        let var: f64 = z.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
        // Constant input degrades to zeros, not NaN.
        assert!(z_normalize(&[5.0; 8]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn erf_map_shape_and_normalization() {
        let m = micro(1);
        let img = rand_image(2);
        let g = erf_gradient_map(&m, &img, OutLoc::Center).unwrap();
        assert_eq!(g.height, 32);
        assert_eq!(g.raw.len(), 32 * 32);
        // 32px input, two stages fully fused: the class map is 8x8.
        assert_eq!(g.loc, (4, 4));
        assert!(g.raw.iter().all(|&v| v >= 0.0));
        let mean: f64 = g.z.iter().sum::<f64>() / g.z.len() as f64;
        assert!(mean.abs() < 1e-9, "z mean {mean}");
        let corner = erf_gradient_map(&m, &img, OutLoc::Corner).unwrap();
        assert_eq!(corner.loc, (0, 0));
    }

    #[test]
    fn uniform_jacobian_pairs_have_zero_distance() {
        // A model whose output depends on every pixel with equal Jacobian
        // magnitude yields constant raw maps; joint z-normalization then
        // gives identical |z| on both sides.
        let flat = vec![0.7f64; 64];
        let report = erf_distance_from_maps(&[(flat.clone(), flat)]).unwrap();
        assert!(report.distance.abs() < 1e-6);
        assert_eq!(report.norm_tag, "joint-z");
    }

    #[test]
    fn concentrated_center_map_gives_positive_distance() {
        // Center map has all its mass on a few pixels; corner map is flat
        // and small: the normalized center magnitudes dominate.
        let mut center = vec![0.0f64; 64];
        center[27] = 4.0;
        center[28] = 4.0;
        let corner = vec![0.1f64; 64];
        let report = erf_distance_from_maps(&[(center, corner)]).unwrap();
        assert!(report.distance > 0.0, "distance {}", report.distance);
        assert!((report.distance - (report.center - report.corner)).abs() < 1e-15);
    }

    #[test]
    fn erf_distance_runs_on_the_model() {
        let m = micro(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..2 * 3 * 32 * 32).map(|_| rng.random()).collect();
        let images = Tensor::from_vec(&[2, 3, 32, 32], data).unwrap();
        let report = erf_distance(&m, &images).unwrap();
        assert_eq!(report.sample_count, 2);
        assert!(report.center.is_finite() && report.corner.is_finite());
        assert!((report.distance - (report.center - report.corner)).abs() < 1e-15);
    }

    #[test]
    fn erf_gradient_matches_finite_differences() {
        // f64 model; central differences of the picked map location versus
        // the backpropagated input gradient, per channel and pixel.
        let m = micro(11).cast::<f64>();
        let img32 = rand_image(12);
        let base: Vec<f64> = img32.data().iter().map(|&v| v as f64).collect();
        let (r, c) = out_loc_index(&m, OutLoc::Center);

        let eval = |data: Vec<f64>| -> f64 {
            let t = Tensor::from_vec(&[1, 3, 32, 32], data).unwrap();
            let mut fp = forward(&m, &t, Mode::Eval, ForwardOpts::default()).unwrap();
            let target = fp.tape.spatial_pick(fp.feature_map, r, c).unwrap();
            fp.tape.scalar_value(target)
        };

        let t = Tensor::from_vec(&[1, 3, 32, 32], base.clone())
            .unwrap()
            .with_requires_grad(true);
        let mut fp = forward(
            &m,
            &t,
            Mode::Eval,
            ForwardOpts {
                params_require_grad: false,
                input_requires_grad: true,
                k_override: None,
            },
        )
        .unwrap();
        let target = fp.tape.spatial_pick(fp.feature_map, r, c).unwrap();
        fp.tape.backward(target).unwrap();
        let grad = fp.tape.grad(fp.input).unwrap().to_vec();

        let h = 1e-5f64;
        // A center-heavy and an off-center pixel in each channel.
        let coords = [(0usize, 16usize, 16usize), (1, 17, 15), (2, 8, 8), (0, 20, 20)];
        for (ch, row, col) in coords {
            let idx = ch * 32 * 32 + row * 32 + col;
            let mut up = base.clone();
            up[idx] += h;
            let mut down = base.clone();
            down[idx] -= h;
            let fd = (eval(up) - eval(down)) / (2.0 * h);
            let an = grad[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-3,
                "channel {ch} pixel ({row},{col}): fd {fd} vs grad {an}"
            );
        }
    }

    #[test]
    fn weighted_cam_matches_hand_computation() {
        // Two channels over 2x2: X0 = [1,2,3,4], X1 = [4,3,2,1],
        // weights (0.5, -0.25): blended = 0.5*X0 - 0.25*X1.
        let values = vec![1.0, 2.0, 3.0, 4.0, 4.0, 3.0, 2.0, 1.0];
        let cam = weighted_cam(&values, &[0.5, -0.25], 2, 4);
        let want = [
            (0.5f64 - 1.0).max(0.0),
            (1.0f64 - 0.75).max(0.0),
            (1.5f64 - 0.5).max(0.0),
            (2.0f64 - 0.25).max(0.0),
        ];
        for (a, b) in cam.iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn single_positive_channel_gradcam_is_relu_of_the_map() {
        let values = vec![-1.0, 0.0, 2.0, 6.0];
        let cam = weighted_cam(&values, &[1.0], 1, 4);
        assert_eq!(cam, vec![0.0, 0.0, 2.0, 6.0]);
        // Zero weights kill the map entirely.
        let dead = weighted_cam(&values, &[0.0], 1, 4);
        assert!(dead.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradcam_runs_and_normalizes() {
        let m = micro(5);
        let img = rand_image(6);
        let r = gradcam(&m, &img, 1, CamLayer::Fused).unwrap();
        assert_eq!(r.method, CamMethod::GradCam);
        assert_eq!(r.cam.size, 32);
        assert_eq!(r.channel_weights.len(), 5);
        assert!(r.cam.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(gradcam(&m, &img, 3, CamLayer::Fused).is_err());
    }

    #[test]
    fn class_cam_matches_cam_mode_on_the_same_pass() {
        let m = micro(7);
        let img = rand_image(8);
        let ours = class_cam(&m, &img, 2).unwrap();
        assert_eq!(ours.method, CamMethod::Ours);
        assert!(ours.channel_weights.is_empty());
        assert_eq!(ours.cam.size, 32);
        assert_eq!(ours.cam.values.len(), 32 * 32);
    }

    #[test]
    fn gradcam_on_gap_fcn_head_equals_class_cam() {
        // Zero head bias, non-negative head weights (so the class map is
        // non-negative), mean pooling: the gradient-weighted map collapses
        // to the class map up to min-max scaling.
        let mut m = micro(9);
        let h1 = m.backbone.fused_size();
        m = m.with_pool_size(h1 * h1).unwrap();
        {
            let w = {
                let t = m.tensors()["head.final.w"].clone();
                let data: Vec<f32> = t.data().iter().map(|v| v.abs()).collect();
                Tensor::from_vec(t.shape(), data).unwrap()
            };
            let mut live = std::collections::BTreeMap::new();
            live.insert("head.final.w".to_string(), w);
            m.absorb(&live).unwrap();
        }
        let img = rand_image(10);
        for class_idx in 0..3 {
            let ours = class_cam(&m, &img, class_idx).unwrap();
            let grad = gradcam(&m, &img, class_idx, CamLayer::Fused).unwrap();
            let max_diff = ours
                .cam
                .values
                .iter()
                .zip(&grad.cam.values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff < 1e-5, "class {class_idx}: max diff {max_diff}");
        }
    }

    #[test]
    fn sparsity_basics_and_monotonicity() {
        let zero = Cam { size: 2, values: vec![0.0; 4] };
        let one = Cam { size: 2, values: vec![1.0; 4] };
        let half = Cam { size: 2, values: vec![0.0, 0.0, 1.0, 1.0] };
        assert_eq!(cam_sparsity(&zero), 0.0);
        assert_eq!(cam_sparsity(&one), 1.0);
        assert_eq!(cam_sparsity(&half), 0.5);
        let a = Cam { size: 2, values: vec![0.1, 0.2, 0.3, 0.4] };
        let b = Cam { size: 2, values: vec![0.2, 0.2, 0.5, 0.4] };
        assert!(cam_sparsity(&a) <= cam_sparsity(&b));
    }

    #[test]
    fn iou_set_arithmetic() {
        let cam = Cam { size: 2, values: vec![0.9, 0.9, 0.1, 0.1] };
        assert_eq!(cam_iou(&cam, &[1, 1, 0, 0], 0.5).unwrap(), 1.0);
        assert_eq!(cam_iou(&cam, &[0, 0, 1, 1], 0.5).unwrap(), 0.0);
        // Map covers the mask plus an equal-area halo.
        let halo = Cam { size: 2, values: vec![0.9, 0.9, 0.0, 0.0] };
        assert_eq!(cam_iou(&halo, &[1, 0, 0, 0], 0.5).unwrap(), 0.5);
        // Both empty: perfect agreement by convention.
        let empty = Cam { size: 2, values: vec![0.0; 4] };
        assert_eq!(cam_iou(&empty, &[0, 0, 0, 0], 0.5).unwrap(), 1.0);
        assert!(cam_iou(&empty, &[0, 2, 0, 0], 0.5).is_err());
        assert!(cam_iou(&empty, &[0, 0], 0.5).is_err());
    }

    #[test]
    fn iou_symmetry_under_binarization() {
        // Binarize the cam, swap roles with the mask: IoU is unchanged.
        let cam = Cam { size: 2, values: vec![0.7, 0.2, 0.6, 0.1] };
        let mask = [1u8, 1, 0, 0];
        let a = cam_iou(&cam, &mask, 0.5).unwrap();
        let swapped = Cam {
            size: 2,
            values: mask.iter().map(|&m| m as f64).collect(),
        };
        let cam_bin: Vec<u8> = cam.values.iter().map(|&v| (v >= 0.5) as u8).collect();
        let b = cam_iou(&swapped, &cam_bin, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn iou_sweep_covers_nine_thresholds() {
        let cam = Cam { size: 2, values: vec![0.15, 0.35, 0.55, 0.95] };
        let sweep = cam_iou_sweep(&cam, &[0, 0, 1, 1]).unwrap();
        assert_eq!(sweep.len(), 9);
        assert_eq!(sweep[0].0, 0.1);
        assert_eq!(sweep[8].0, 0.9);
        // At 0.5: cam set {2,3} matches mask exactly.
        assert_eq!(sweep[4], (0.5, 1.0));
    }
}
