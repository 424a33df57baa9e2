//! Evaluation metrics, atlas-based segmentation, sequence tracking and the
//! synthetic-deformation benchmark.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::grid::{norm, window_zyx, DisplacementField, Dims, Image, Mask, Scale};
use crate::loss::{mse, nlcc_loss, LocalMoments, NLCC_EPS};
use crate::multiscale::{register_pairs_multiscale, ScaleInit, ScaleSchedule};
use crate::optim::{fit_window, TrainSpec};
use crate::prep::{value_range_mask, NormSpec};
use crate::scalar::Real;
use crate::warp::warp;

/// Radius of the evaluation cross-correlation window, in pixels.
pub const METRIC_NLCC_RADIUS: usize = 10;

/// Integer class id per grid point; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    labels: Vec<u32>,
    classes: u32,
}

impl LabelMap {
    /// `classes` counts the background, so ids must be `< classes`.
    pub fn new(dims: Dims, labels: Vec<u32>, classes: u32) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(RegError::Shape(format!("{} labels for grid {dims}", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(RegError::InvalidArgument(format!("label {bad} >= class count {classes}")));
        }
        Ok(LabelMap { dims, labels, classes })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn classes(&self) -> u32 {
        self.classes
    }

    pub fn mask_of(&self, class_id: u32) -> Mask {
        Mask::new(self.dims, self.labels.iter().map(|&l| l == class_id).collect()).expect("same dims")
    }
}

/// Dice overlap `2TP / (2TP + FN + FP)` of one class; 1 when the class is
/// absent from both maps.
pub fn dice(pred: &LabelMap, truth: &LabelMap, class_id: u32) -> Result<f64> {
    if pred.dims != truth.dims {
        return Err(RegError::Shape(format!("label maps {} vs {}", pred.dims, truth.dims)));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
        match (p == class_id, t == class_id) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Nearest-neighbour label transfer: reads `labels` at `p + u(p)`, rounded
/// and border-clamped.
pub fn warp_labels<T: Real>(labels: &LabelMap, field: &DisplacementField<T>) -> Result<LabelMap> {
    if field.ndim() != labels.dims.ndim() {
        return Err(RegError::Shape("label map and field dimensionality differ".into()));
    }
    let src = labels.dims.zyx();
    let fd = field.dims();
    let pick = |p: usize, u: T, n: usize| -> usize {
        let v = (T::c(p as f64) + u).round().to_f64().unwrap_or(0.0);
        v.clamp(0.0, (n - 1) as f64) as usize
    };
    let out = (0..fd.len())
        .map(|idx| {
            let [z, y, x] = fd.coords(idx);
            let u = field.vector(idx);
            let zz = if fd.ndim() == 3 { pick(z, u[2], src[0]) } else { 0 };
            labels.labels[labels.dims.index(zz, pick(y, u[1], src[1]), pick(x, u[0], src[2]))]
        })
        .collect();
    Ok(LabelMap { dims: fd, labels: out, classes: labels.classes })
}

/// Index of the atlas most similar to `test` under local cross-correlation
/// (lowest loss); ties go to the lowest index.
pub fn select_atlas<T: Real>(test: &Image<T>, atlases: &[Image<T>], window: &[usize]) -> Result<usize> {
    if atlases.is_empty() {
        return Err(RegError::InvalidArgument("no atlases to choose from".into()));
    }
    let window = fit_window(window, test.dims().extents());
    let mut best = (0usize, T::infinity());
    for (i, a) in atlases.iter().enumerate() {
        let (score, _) = nlcc_loss(test, a, &window, T::c(NLCC_EPS))?;
        if score < best.1 {
            best = (i, score);
        }
    }
    Ok(best.0)
}

/// Mean over masked points of the signed local normalised cross-correlation
/// `cross / sqrt(var_f * var_w + eps)` with a `(2 radius + 1)`-wide window.
pub fn masked_nlcc_metric<T: Real>(
    fixed: &Image<T>,
    warped: &Image<T>,
    mask: &Mask,
    radius: usize,
) -> Result<f64> {
    if fixed.dims() != warped.dims() || mask.dims() != fixed.dims() {
        return Err(RegError::Shape(format!(
            "fixed {}, warped {}, mask {}",
            fixed.dims(),
            warped.dims(),
            mask.dims()
        )));
    }
    let count = mask.count();
    if count == 0 {
        return Err(RegError::EmptyRegion("mask selects no points".into()));
    }
    let dims = fixed.dims();
    let window = fit_window(&vec![2 * radius + 1; dims.ndim()], dims.extents());
    let w = window_zyx(dims, &window)?;
    let m = LocalMoments::new(fixed.data(), warped.data(), dims, w);
    let mut acc = 0.0;
    for (p, &on) in mask.flags().iter().enumerate() {
        if on {
            let (c, vi, vj) = m.centred(p);
            acc += c.f64() / (vi.f64().max(0.0) * vj.f64().max(0.0) + NLCC_EPS).sqrt();
        }
    }
    Ok(acc / count as f64)
}

/// Mean, median and maximum of per-point endpoint errors, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointStats {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

/// Euclidean distance between estimated and true displacements.
pub fn endpoint_error<T: Real>(
    est: &DisplacementField<T>,
    truth: &DisplacementField<T>,
    mask: Option<&Mask>,
) -> Result<EndpointStats> {
    if est.dims() != truth.dims() {
        return Err(RegError::Shape(format!("fields {} vs {}", est.dims(), truth.dims())));
    }
    if let Some(m) = mask {
        if m.dims() != est.dims() {
            return Err(RegError::Shape(format!("mask {} vs field {}", m.dims(), est.dims())));
        }
    }
    let mut errs: Vec<f64> = (0..est.dims().len())
        .filter(|&i| mask.is_none_or(|m| m.flags()[i]))
        .map(|i| {
            let (a, b) = (est.vector(i), truth.vector(i));
            norm(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]]).f64()
        })
        .collect();
    if errs.is_empty() {
        return Err(RegError::EmptyRegion("mask selects no points".into()));
    }
    let n = errs.len();
    let mean = errs.iter().sum::<f64>() / n as f64;
    errs.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { errs[n / 2] } else { 0.5 * (errs[n / 2 - 1] + errs[n / 2]) };
    Ok(EndpointStats {
        mean,
        median,
        max: errs[n - 1],
    })
}

/// Masked reconstruction metrics of one registered pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub mse: f64,
    pub nlcc: f64,
}

/// MSE and NLCC between `fixed` and `moving` warped by `field`, over `mask`.
pub fn pair_metrics<T: Real>(
    moving: &Image<T>,
    fixed: &Image<T>,
    field: &DisplacementField<T>,
    mask: &Mask,
) -> Result<PairMetrics> {
    let warped = warp(moving, field)?;
    Ok(PairMetrics {
        mse: mse(fixed, &warped, Some(mask))?.f64(),
        nlcc: masked_nlcc_metric(fixed, &warped, mask, METRIC_NLCC_RADIUS)?,
    })
}

/// Fields and metrics of a tracked sequence.
#[derive(Clone, Debug)]
pub struct TrackResult<T> {
    /// Field `k` maps frame `k + 1` (fixed) coordinates into frame `k` (moving).
    pub fields: Vec<DisplacementField<T>>,
    pub metrics: Vec<PairMetrics>,
}

/// Dense tracking: each previous frame is registered onto the current one.
///
/// All consecutive pairs share one network per scale, tuned round-robin
/// within each scale's step budget. Metrics use `mask` when given, else the
/// value-range mask of each fixed frame.
pub fn track_sequence<T: Real>(
    frames: &[Image<T>],
    schedule: &ScaleSchedule,
    spec: &TrainSpec,
    init: ScaleInit<T>,
    mask: Option<&Mask>,
) -> Result<TrackResult<T>> {
    if frames.len() < 2 {
        return Err(RegError::InvalidArgument(format!("need >= 2 frames, got {}", frames.len())));
    }
    let pairs: Vec<(&Image<T>, &Image<T>)> = frames.windows(2).map(|w| (&w[0], &w[1])).collect();
    let results = register_pairs_multiscale(&pairs, schedule, spec, init)?;
    let norm = NormSpec::default();
    let mut fields = Vec::with_capacity(results.len());
    let mut metrics = Vec::with_capacity(results.len());
    for ((moving, fixed), r) in pairs.iter().zip(results) {
        let m = match mask {
            Some(m) => m.clone(),
            None => value_range_mask(fixed, &norm),
        };
        let m = if m.count() == 0 { Mask::full(fixed.dims()) } else { m };
        metrics.push(pair_metrics(moving, fixed, &r.final_field, &m)?);
        fields.push(r.final_field);
    }
    Ok(TrackResult { fields, metrics })
}

/// Parameters of a synthetic registration case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Row-major extents.
    pub extents: Vec<usize>,
    /// Largest displacement norm of the ground-truth field, in pixels.
    pub max_disp: f64,
    /// Gaussian width (pixels) smoothing the ground-truth field.
    pub smoothness: f64,
    /// Gaussian width (pixels) of the random texture.
    pub texture_sigma: f64,
    /// Render a two-class labelled phantom under the texture.
    pub labels: bool,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(extents: &[usize], max_disp: f64, smoothness: f64, seed: u64) -> Self {
        SyntheticSpec {
            extents: extents.to_vec(),
            max_disp,
            smoothness,
            texture_sigma: 2.0,
            labels: false,
            seed,
        }
    }

    pub fn with_labels(mut self) -> Self {
        self.labels = true;
        self
    }
}

/// Image pair with a known smooth deformation.
///
/// Registering `base` (moving) onto `warped` (fixed) should recover `field`.
#[derive(Clone, Debug)]
pub struct SyntheticCase<T> {
    pub spec: SyntheticSpec,
    pub base: Image<T>,
    pub field: DisplacementField<T>,
    pub warped: Image<T>,
    pub labels: Option<LabelMap>,
    /// `labels` transferred through the ground-truth field.
    pub warped_labels: Option<LabelMap>,
}

/// Normalised separable Gaussian smoothing (weights renormalised at borders).
fn gaussian_smooth(data: &[f64], dims: Dims, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let e = dims.zyx();
    let mut cur = data.to_vec();
    for axis in 0..3 {
        if !dims.axis_active(axis) {
            continue;
        }
        let n = e[axis] as isize;
        let stride: usize = e[axis + 1..].iter().product();
        let mut out = vec![0.0; cur.len()];
        for idx in 0..cur.len() {
            let i = dims.coords(idx)[axis] as isize;
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (k, &w) in kernel.iter().enumerate() {
                let j = i + k as isize - radius;
                if (0..n).contains(&j) {
                    let src = (idx as isize + (j - i) * stride as isize) as usize;
                    acc += w * cur[src];
                    wsum += w;
                }
            }
            out[idx] = acc / wsum;
        }
        cur = out;
    }
    cur
}

fn rescale_unit(v: &mut [f64]) {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let r = max - min;
    for x in v {
        *x = if r > 0.0 { (*x - min) / r } else { 0.0 };
    }
}

/// Draws a random smooth field, a band-limited texture and their warp.
pub fn make_synthetic_case<T: Real>(spec: &SyntheticSpec) -> Result<SyntheticCase<T>> {
    let dims = Dims::new(&spec.extents)?;
    if !(spec.max_disp.is_finite() && spec.max_disp >= 0.0) {
        return Err(RegError::InvalidArgument(format!("max_disp {} must be >= 0", spec.max_disp)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = dims.len();
    let ndim = dims.ndim();

    let noise = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };

    // ground-truth field
    let mut comps: Vec<Vec<f64>> = (0..ndim).map(|_| gaussian_smooth(&noise(&mut rng), dims, spec.smoothness)).collect();
    let max_norm = (0..n)
        .map(|i| comps.iter().map(|c| c[i] * c[i]).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let k = if max_norm > 0.0 { spec.max_disp / max_norm } else { 0.0 };
    for c in &mut comps {
        for v in c.iter_mut() {
            *v *= k;
        }
    }
    let field_data: Vec<T> = comps.iter().flatten().map(|&v| T::c(v)).collect();
    let field = DisplacementField::new(dims, field_data, Scale::ONE)?;

    // texture, optionally over a labelled phantom
    let mut tex = gaussian_smooth(&noise(&mut rng), dims, spec.texture_sigma);
    rescale_unit(&mut tex);
    let labels = if spec.labels {
        let lm = phantom_labels(dims, &mut rng);
        let level = [0.0, 0.5, 1.0];
        for (t, &l) in tex.iter_mut().zip(lm.labels()) {
            *t = 0.4 * *t + 0.6 * level[l as usize];
        }
        rescale_unit(&mut tex);
        Some(lm)
    } else {
        None
    };
    let base = Image::new(dims, tex.iter().map(|&v| T::c(v)).collect())?;
    let warped = warp(&base, &field)?;
    let warped_labels = labels.as_ref().map(|l| warp_labels(l, &field)).transpose()?;
    Ok(SyntheticCase { spec: spec.clone(), base, field, warped, labels, warped_labels })
}

/// Two ellipsoidal foreground classes at jittered positions.
fn phantom_labels(dims: Dims, rng: &mut ChaCha8Rng) -> LabelMap {
    let e = dims.zyx();
    let blobs: [([f64; 3], [f64; 3]); 2] = [
        ([0.5, 0.38, 0.38], [0.3, 0.22, 0.18]),
        ([0.5, 0.64, 0.62], [0.3, 0.17, 0.22]),
    ];
    let jit: Vec<[f64; 3]> = blobs
        .iter()
        .map(|_| [0, 1, 2].map(|_| rng.random_range(-0.04..0.04)))
        .collect();
    let labels = (0..dims.len())
        .map(|idx| {
            let c = dims.coords(idx);
            let mut label = 0;
            for (b, ((centre, radii), j)) in blobs.iter().zip(&jit).enumerate() {
                let mut r2 = 0.0;
                for a in 0..3 {
                    if dims.axis_active(a) {
                        let t = (c[a] as f64 + 0.5) / e[a] as f64 - (centre[a] + j[a]);
                        r2 += (t / radii[a]).powi(2);
                    }
                }
                if r2 <= 1.0 {
                    label = b as u32 + 1;
                }
            }
            label
        })
        .collect();
    LabelMap::new(dims, labels, 3).expect("valid phantom")
}
