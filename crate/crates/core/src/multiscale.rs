//! Coarse-to-fine registration with residual fields.
//!
//! At scale `s` the moving image is warped by the field aggregated so far,
//! both images are pooled to scale `s`, and a network is test-time trained to
//! predict the residual field on that coarse grid. The residual is rescaled
//! to full-resolution pixels, upsampled, evaluated at the displaced position
//! `p + phi(p)` and added to `phi(p)`. Each scale starts from the parameters
//! tuned at the previous one; no gradient flows across scale boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::grid::{downsample, upsample_field, DisplacementField, Image, Scale};
use crate::loss::LossReport;
use crate::optim::{fit_window, test_time_train_sequence, TrainSpec};
use crate::regnet::{init_params, predict_field, NetConfig, NetParams};
use crate::scalar::Real;
use crate::warp::warp;

/// Smallest loss window extent used on coarse grids.
pub const MIN_SCALED_WINDOW: usize = 3;

/// Coarse-to-fine list of scales with a step budget for each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    scales: Vec<Scale>,
    steps: Vec<usize>,
}

impl ScaleSchedule {
    pub fn new(scales: Vec<Scale>, steps: Vec<usize>) -> Result<Self> {
        let s = ScaleSchedule { scales, steps };
        s.validate()?;
        Ok(s)
    }

    /// `levels` scales `1/2^(levels-1), ..., 1/2, 1`, each with `steps`.
    pub fn pyramid(levels: u32, steps: usize) -> Result<Self> {
        if levels == 0 {
            return Err(RegError::InvalidSchedule("at least one scale".into()));
        }
        let scales: Vec<Scale> = (0..levels).rev().map(Scale::inv_pow2).collect();
        Self::new(scales, vec![steps; levels as usize])
    }

    /// Two scales `{1/2, 1}` (volumetric segmentation profile).
    pub fn two_scale(steps: usize) -> Self {
        Self::pyramid(2, steps).expect("valid")
    }

    /// Four scales `{1/8, 1/4, 1/2, 1}` (dense tracking profile).
    pub fn four_scale(steps: usize) -> Self {
        Self::pyramid(4, steps).expect("valid")
    }

    pub fn single(steps: usize) -> Self {
        Self::pyramid(1, steps).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RegError::InvalidSchedule(m.to_string()));
        if self.scales.is_empty() {
            return bad("empty schedule");
        }
        if self.scales.len() != self.steps.len() {
            return bad("one step budget per scale required");
        }
        if self.steps.contains(&0) {
            return bad("every scale needs at least one step");
        }
        if *self.scales.last().expect("non-empty") != Scale::ONE {
            return bad("the finest scale must be 1");
        }
        for s in &self.scales {
            if s.num() != 1 || !s.den().is_power_of_two() {
                return bad(&format!("scale {s} is not 1/2^k"));
            }
        }
        for w in self.scales.windows(2) {
            if w[1].den() * 2 != w[0].den() {
                return bad(&format!("{} does not double {}", w[1], w[0]));
            }
        }
        Ok(())
    }

    pub fn scales(&self) -> &[Scale] {
        &self.scales
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn total_steps(&self) -> usize {
        self.steps.iter().sum()
    }
}

/// Where each scale's network parameters come from.
#[derive(Clone, Debug)]
pub enum ScaleInit<T> {
    /// Fresh initialisation (seeded by the train spec) at the coarsest scale.
    Fresh(NetConfig),
    /// Given parameters at the coarsest scale, e.g. from population training.
    WarmStart(NetParams<T>),
    /// Explicit starting parameters for every scale (no hand-off).
    PerScale(Vec<NetParams<T>>),
}

/// Output of a multi-scale registration.
#[derive(Clone, Debug)]
pub struct MultiScaleResult<T> {
    /// Full-resolution field after the finest scale.
    pub final_field: DisplacementField<T>,
    /// Aggregated full-resolution field after each scale.
    pub per_scale_fields: Vec<DisplacementField<T>>,
    /// Residual field predicted on each scale's own grid.
    pub per_scale_residuals: Vec<DisplacementField<T>>,
    pub per_scale_params: Vec<NetParams<T>>,
    pub per_scale_traces: Vec<Vec<LossReport>>,
    pub scales: Vec<Scale>,
}

/// Inputs for scale `s`: the moving image warped by `prev_field` at full
/// resolution, then both images pooled to scale `s`.
pub fn prepare_scale_inputs<T: Real>(
    moving: &Image<T>,
    fixed: &Image<T>,
    prev_field: &DisplacementField<T>,
    s: Scale,
) -> Result<(Image<T>, Image<T>)> {
    if prev_field.dims() != fixed.dims() || moving.dims() != fixed.dims() {
        return Err(RegError::Shape(format!(
            "moving {}, fixed {} and field {} must share the full-resolution grid",
            moving.dims(),
            fixed.dims(),
            prev_field.dims()
        )));
    }
    let reconstructed = if prev_field.is_zero() { moving.clone() } else { warp(moving, prev_field)? };
    Ok((downsample(&reconstructed, s.value())?, downsample(fixed, s.value())?))
}

/// Composes the previous full-resolution field with a residual from scale `s`:
/// `phi_s(p) = phi(p) + up(residual / s)(p + phi(p))`.
pub fn aggregate_field<T: Real>(
    prev_field: &DisplacementField<T>,
    residual: &DisplacementField<T>,
    s: Scale,
) -> Result<DisplacementField<T>> {
    let full = prev_field.dims();
    let expected = full.scaled(s.value())?;
    if residual.dims() != expected {
        return Err(RegError::Shape(format!(
            "residual on {} but scale {s} of {full} is {expected}",
            residual.dims()
        )));
    }
    let factor = 1.0 / s.value();
    let up = upsample_field(residual, factor, full)?;
    let k = T::c(factor);
    let n = full.len();
    let ndim = full.ndim();
    let mut out = prev_field.data().to_vec();
    for idx in 0..n {
        let [z, y, x] = full.coords(idx);
        let u = prev_field.vector(idx);
        let pos = [T::c(z as f64) + u[2], T::c(y as f64) + u[1], T::c(x as f64) + u[0]];
        let r = up.sample_zyx(pos);
        for c in 0..ndim {
            let rc = r[c] * k;
            let slot = &mut out[c * n + idx];
            if !rc.is_zero() {
                *slot += rc;
            }
        }
    }
    Ok(DisplacementField::from_raw(full, out, Scale::ONE))
}

/// Loss window used at scale `s`: extents shrink with resolution, not below
/// [`MIN_SCALED_WINDOW`].
pub fn scaled_window(window: &[usize], s: Scale) -> Vec<usize> {
    if s == Scale::ONE {
        return window.to_vec();
    }
    window
        .iter()
        .map(|&w| ((w as f64 * s.value()).round() as usize).max(MIN_SCALED_WINDOW.min(w)))
        .collect()
}

fn wrap_scale(i: usize, s: Scale) -> impl FnOnce(RegError) -> RegError {
    move |e| RegError::ScaleAbort { scale_index: i, scale: s.to_string(), source: Box::new(e) }
}

/// Shared-parameter multi-scale registration of several (moving, fixed)
/// pairs on the same grid. At every scale one network is tuned round-robin
/// over all pairs; each pair keeps its own aggregated field.
pub fn register_pairs_multiscale<T: Real>(
    pairs: &[(&Image<T>, &Image<T>)],
    schedule: &ScaleSchedule,
    spec: &TrainSpec,
    init: ScaleInit<T>,
) -> Result<Vec<MultiScaleResult<T>>> {
    schedule.validate()?;
    spec.validate()?;
    let Some(&(m0, _)) = pairs.first() else {
        return Err(RegError::InvalidArgument("no image pairs".into()));
    };
    let full = m0.dims();
    for (m, f) in pairs {
        if m.dims() != full || f.dims() != full {
            return Err(RegError::Shape(format!("all images must share grid {full}")));
        }
    }
    if let ScaleInit::PerScale(v) = &init {
        if v.len() != schedule.scales().len() {
            return Err(RegError::InvalidArgument(format!(
                "{} per-scale parameter sets for {} scales",
                v.len(),
                schedule.scales().len()
            )));
        }
    }

    let mut fields: Vec<DisplacementField<T>> =
        pairs.iter().map(|_| DisplacementField::zeros(full, Scale::ONE)).collect();
    let mut results: Vec<MultiScaleResult<T>> = pairs
        .iter()
        .map(|_| MultiScaleResult {
            final_field: DisplacementField::zeros(full, Scale::ONE),
            per_scale_fields: Vec::new(),
            per_scale_residuals: Vec::new(),
            per_scale_params: Vec::new(),
            per_scale_traces: Vec::new(),
            scales: schedule.scales().to_vec(),
        })
        .collect();
    let mut carried: Option<NetParams<T>> = None;

    for (i, (&s, &steps)) in schedule.scales().iter().zip(schedule.steps()).enumerate() {
        let wrap = || wrap_scale(i, s);
        let inputs: Vec<(Image<T>, Image<T>)> = pairs
            .iter()
            .zip(&fields)
            .map(|((m, f), phi)| prepare_scale_inputs(m, f, phi, s))
            .collect::<Result<_>>()
            .map_err(wrap())?;
        let start = match (&init, carried.take()) {
            (ScaleInit::PerScale(v), _) => v[i].clone(),
            (_, Some(p)) => p,
            (ScaleInit::WarmStart(p), None) => p.clone(),
            (ScaleInit::Fresh(cfg), None) => init_params(cfg, spec.seed).map_err(wrap())?,
        };
        let coarse = inputs[0].0.dims();
        let mut spec_s = spec.clone();
        spec_s.steps = steps;
        spec_s.window = fit_window(&scaled_window(&spec.window, s), coarse.extents());
        let refs: Vec<(&Image<T>, &Image<T>)> = inputs.iter().map(|(m, f)| (m, f)).collect();
        let (params, trace) = test_time_train_sequence(start, &refs, &spec_s).map_err(wrap())?;
        log::info!(
            "scale {s}: {} steps on {coarse}, best total {:.6}",
            steps,
            trace.iter().map(|r| r.total).fold(f64::INFINITY, f64::min)
        );
        for (k, (ms, is)) in inputs.iter().enumerate() {
            let (residual, _) = predict_field(&params, is, ms).map_err(wrap())?;
            let residual = residual.with_scale(s);
            let phi = aggregate_field(&fields[k], &residual, s).map_err(wrap())?;
            let r = &mut results[k];
            r.per_scale_residuals.push(residual);
            r.per_scale_fields.push(phi.clone());
            r.per_scale_params.push(params.clone());
            r.per_scale_traces.push(trace.clone());
            fields[k] = phi;
        }
        carried = Some(params);
    }
    for (r, f) in results.iter_mut().zip(fields) {
        r.final_field = f;
    }
    Ok(results)
}

/// Multi-scale registration of `moving` onto `fixed`.
pub fn register_multiscale<T: Real>(
    moving: &Image<T>,
    fixed: &Image<T>,
    schedule: &ScaleSchedule,
    spec: &TrainSpec,
    init: ScaleInit<T>,
) -> Result<MultiScaleResult<T>> {
    if moving.dims() != fixed.dims() {
        return Err(RegError::Shape(format!("moving {} vs fixed {}", moving.dims(), fixed.dims())));
    }
    let mut v = register_pairs_multiscale(&[(moving, fixed)], schedule, spec, init)?;
    Ok(v.pop().expect("one pair in, one result out"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims;

    #[test]
    fn schedule_validation() {
        assert!(ScaleSchedule::four_scale(10).validate().is_ok());
        assert_eq!(ScaleSchedule::four_scale(10).scales()[0], Scale::inv_pow2(3));
        let s = |v: &[(u32, u32)]| v.iter().map(|&(a, b)| Scale::new(a, b).unwrap()).collect::<Vec<_>>();
        assert!(ScaleSchedule::new(s(&[(1, 4), (1, 1)]), vec![1, 1]).is_err());
        assert!(ScaleSchedule::new(s(&[(1, 2)]), vec![1]).is_err());
        assert!(ScaleSchedule::new(s(&[(1, 1), (1, 2)]), vec![1, 1]).is_err());
        assert!(ScaleSchedule::new(s(&[(1, 2), (1, 1)]), vec![1]).is_err());
        assert!(ScaleSchedule::new(s(&[(1, 2), (1, 1)]), vec![0, 1]).is_err());
        assert!(ScaleSchedule::new(vec![], vec![]).is_err());
    }

    #[test]
    fn window_scaling_has_a_floor() {
        assert_eq!(scaled_window(&[6, 6], Scale::ONE), vec![6, 6]);
        assert_eq!(scaled_window(&[6, 6], Scale::inv_pow2(1)), vec![3, 3]);
        assert_eq!(scaled_window(&[6, 6], Scale::inv_pow2(3)), vec![3, 3]);
        assert_eq!(scaled_window(&[2, 2], Scale::inv_pow2(2)), vec![2, 2]);
    }

    #[test]
    fn zero_residual_keeps_previous_field_bitwise() {
        let dims = Dims::d2(8, 8);
        let mut prev = DisplacementField::<f64>::zeros(dims, Scale::ONE);
        for (i, v) in prev.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f64 * 0.1 - 0.5;
        }
        prev.data_mut()[3] = -0.0;
        let res = DisplacementField::zeros(Dims::d2(4, 4), Scale::inv_pow2(1));
        let out = aggregate_field(&prev, &res, Scale::inv_pow2(1)).unwrap();
        let bits = |f: &DisplacementField<f64>| f.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&prev));
    }

    #[test]
    fn constant_residual_is_rescaled() {
        let dims = Dims::d2(8, 6);
        let prev = DisplacementField::<f64>::zeros(dims, Scale::ONE);
        let res = DisplacementField::constant(Dims::d2(4, 3), &[1.0, 1.0], Scale::inv_pow2(1));
        let out = aggregate_field(&prev, &res, Scale::inv_pow2(1)).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn aggregate_shape_mismatch() {
        let prev = DisplacementField::<f64>::zeros(Dims::d2(8, 8), Scale::ONE);
        let res = DisplacementField::zeros(Dims::d2(3, 4), Scale::inv_pow2(1));
        assert!(matches!(aggregate_field(&prev, &res, Scale::inv_pow2(1)), Err(RegError::Shape(_))));
    }

    #[test]
    fn coarsest_inputs_are_plain_downsamples() {
        let dims = Dims::d2(8, 8);
        let m = Image::from_fn(dims, |[_, y, x]| (x * y) as f64 / 49.0);
        let f = Image::from_fn(dims, |[_, y, x]| (x + y) as f64 / 14.0);
        let zero = DisplacementField::zeros(dims, Scale::ONE);
        let (ms, is) = prepare_scale_inputs(&m, &f, &zero, Scale::inv_pow2(1)).unwrap();
        assert_eq!(ms, downsample(&m, 0.5).unwrap());
        assert_eq!(is, downsample(&f, 0.5).unwrap());
        let (m1, f1) = prepare_scale_inputs(&m, &f, &zero, Scale::ONE).unwrap();
        assert_eq!((m1, f1), (m, f));
    }
}
