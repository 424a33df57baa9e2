//! Adam and the two training regimes: population training over many pairs
//! and test-time training on the pair being registered.

use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::grid::{DisplacementField, Image};
use crate::loss::{nlcc_loss, smoothness_penalty, LossReport, NLCC_EPS};
use crate::regnet::{backward, predict_field, NetParams, ParamGrads};
use crate::scalar::Real;
use crate::warp::{warp, warp_backward};

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps taken.
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments for tensors shaped like `tensors`.
    pub fn new(tensors: &[Vec<T>], lr: f64) -> Self {
        let zeros: Vec<Vec<T>> = tensors.iter().map(|t| vec![T::zero(); t.len()]).collect();
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn for_params(params: &NetParams<T>, lr: f64) -> Self {
        Self::new(params.tensors(), lr)
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// A gradient that is zero everywhere leaves the parameters untouched (the
/// moments still decay and the step counter still advances).
pub fn adam_update<T: Real>(
    params: &mut [Vec<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    let shapes_ok = params.len() == grads.len()
        && params.len() == state.m.len()
        && params.iter().zip(grads).zip(&state.m).all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_ok {
        return Err(RegError::Shape("parameters, gradients and moments disagree".into()));
    }
    for (ti, g) in grads.iter().enumerate() {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(RegError::OptimAbort {
                step: state.t as usize,
                reason: format!("non-finite gradient in tensor {ti} at element {i}: {}", g[i]),
            });
        }
    }
    state.t += 1;
    let all_zero = grads.iter().flatten().all(|v| v.is_zero());
    let (b1, b2) = (T::c(state.beta1), T::c(state.beta2));
    let one = T::one();
    let t = state.t as i32;
    let c1 = T::c(1.0 - state.beta1.powi(t));
    let c2 = T::c(1.0 - state.beta2.powi(t));
    let lr = T::c(state.lr);
    let eps = T::c(state.eps);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            if !all_zero {
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Adam step on network parameters.
pub fn adam_step<T: Real>(
    params: &mut NetParams<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    adam_update(params.tensors_mut(), &grads.0, state)
}

/// Optimisation settings shared by population and test-time training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    /// Smoothness weight.
    pub lambda: f64,
    /// Number of optimisation steps.
    pub steps: usize,
    /// Local cross-correlation window, one extent per axis (row-major).
    pub window: Vec<usize>,
    pub lr: f64,
    /// Seed for fresh network initialisation.
    pub seed: u64,
}

impl TrainSpec {
    /// Defaults: lambda 10, 3500 steps, lr 1e-3, window 6 (2D) or 5 (3D).
    pub fn new(ndim: usize) -> Self {
        let w = if ndim == 3 { 5 } else { 6 };
        TrainSpec { lambda: 10.0, steps: 3500, window: vec![w; ndim], lr: 1e-3, seed: 0 }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(RegError::InvalidArgument("steps must be >= 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(RegError::InvalidArgument(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(RegError::InvalidArgument(format!("learning rate {} must be > 0", self.lr)));
        }
        if self.window.contains(&0) {
            return Err(RegError::InvalidWindow(format!("{:?}", self.window)));
        }
        Ok(())
    }
}

/// Window clipped to the grid so tiny images still have a valid loss.
pub(crate) fn fit_window(window: &[usize], extents: &[usize]) -> Vec<usize> {
    window.iter().zip(extents).map(|(&w, &e)| w.min(e)).collect()
}

/// Objective value, parameter gradients and the predicted field for one pair.
pub fn evaluate_pair<T: Real>(
    params: &NetParams<T>,
    moving: &Image<T>,
    fixed: &Image<T>,
    lambda: f64,
    window: &[usize],
) -> Result<(LossReport, ParamGrads<T>, DisplacementField<T>)> {
    let (field, mut tape) = predict_field(params, fixed, moving)?;
    let warped = warp(moving, &field)?;
    let window = fit_window(window, fixed.dims().extents());
    let (rec, g_warped) = nlcc_loss(fixed, &warped, &window, T::c(NLCC_EPS))?;
    let (smooth, g_smooth) = smoothness_penalty(&field)?;
    let mut g_field = warp_backward(moving, &field, &g_warped)?;
    let lam = T::c(lambda);
    for (g, &s) in g_field.data_mut().iter_mut().zip(g_smooth.data()) {
        *g += lam * s;
    }
    let grads = backward(params, &mut tape, &g_field)?;
    Ok((LossReport::new(rec.f64(), smooth.f64(), lambda), grads, field))
}

/// Which iterate a training run returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Parameters with the lowest recorded total loss.
    Best,
    /// Parameters after the final update.
    Last,
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct FitOutcome<T> {
    pub params: NetParams<T>,
    /// Loss of the iterate evaluated at each step, before its update.
    pub trace: Vec<LossReport>,
    /// Step whose parameters were returned (the last step index + 1 for `Last`).
    pub selected_step: usize,
}

/// Steps a loss must stay above the divergence threshold before aborting.
pub const DIVERGENCE_PATIENCE: usize = 100;

/// Total loss above `initial + 10 |initial|` counts as diverging.
fn divergence_threshold(initial: f64) -> f64 {
    initial + 10.0 * initial.abs().max(1e-6)
}

/// Adam over `pairs` (moving, fixed), visited round-robin, starting from
/// fresh moments.
pub fn fit<T: Real>(
    params: NetParams<T>,
    pairs: &[(&Image<T>, &Image<T>)],
    spec: &TrainSpec,
    selection: Selection,
) -> Result<FitOutcome<T>> {
    spec.validate()?;
    if pairs.is_empty() {
        return Err(RegError::InvalidArgument("no training pairs".into()));
    }
    let mut params = params;
    let mut state = AdamState::for_params(&params, spec.lr);
    let mut trace = Vec::with_capacity(spec.steps);
    let mut best: Option<(f64, usize, NetParams<T>)> = None;
    let mut above = 0usize;
    for step in 0..spec.steps {
        let (moving, fixed) = pairs[step % pairs.len()];
        let (report, grads, _) =
            evaluate_pair(&params, moving, fixed, spec.lambda, &spec.window).map_err(|e| match e {
                // a finite start that turns non-finite is a divergence
                RegError::InvalidField(reason) if step > 0 => RegError::OptimAbort { step, reason },
                other => other,
            })?;
        if !report.is_finite() {
            return Err(RegError::OptimAbort { step, reason: format!("non-finite loss {report:?}") });
        }
        trace.push(report);
        let threshold = divergence_threshold(trace[0].total);
        if report.total > threshold {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                return Err(RegError::OptimAbort {
                    step,
                    reason: format!(
                        "loss {} above {threshold} for {DIVERGENCE_PATIENCE} consecutive steps",
                        report.total
                    ),
                });
            }
        } else {
            above = 0;
        }
        if selection == Selection::Best && best.as_ref().is_none_or(|b| report.total < b.0) {
            best = Some((report.total, step, params.clone()));
        }
        adam_step(&mut params, &grads, &mut state).map_err(|e| match e {
            RegError::OptimAbort { reason, .. } => RegError::OptimAbort { step, reason },
            other => other,
        })?;
        if step % 500 == 0 {
            log::debug!("step {step}: total {:.6} (rec {:.6})", report.total, report.reconstruction);
        }
    }
    Ok(match (selection, best) {
        (Selection::Best, Some((_, step, p))) => FitOutcome { params: p, trace, selected_step: step },
        _ => FitOutcome { params, trace, selected_step: spec.steps },
    })
}

/// Trains on a population of (moving, fixed) pairs, round-robin, and returns
/// the final parameters with the loss trace.
pub fn train_population<T: Real>(
    params: NetParams<T>,
    pairs: &[(&Image<T>, &Image<T>)],
    spec: &TrainSpec,
) -> Result<(NetParams<T>, Vec<LossReport>)> {
    let out = fit(params, pairs, spec, Selection::Last)?;
    Ok((out.params, out.trace))
}

/// Result of test-time training on one pair.
#[derive(Clone, Debug)]
pub struct TttOutcome<T> {
    /// Best-by-total-loss parameters.
    pub params: NetParams<T>,
    /// Field predicted by those parameters.
    pub field: DisplacementField<T>,
    pub trace: Vec<LossReport>,
}

/// Fine-tunes `params` on a single pair and returns the best iterate.
pub fn test_time_train<T: Real>(
    params: NetParams<T>,
    moving: &Image<T>,
    fixed: &Image<T>,
    spec: &TrainSpec,
) -> Result<TttOutcome<T>> {
    if moving.dims() != fixed.dims() {
        return Err(RegError::Shape(format!("moving {} vs fixed {}", moving.dims(), fixed.dims())));
    }
    let out = fit(params, &[(moving, fixed)], spec, Selection::Best)?;
    let (field, _) = predict_field(&out.params, fixed, moving)?;
    Ok(TttOutcome { params: out.params, field, trace: out.trace })
}

/// Test-time training shared by all consecutive pairs of a sequence: one
/// network is tuned round-robin over the pairs within `spec.steps`.
pub fn test_time_train_sequence<T: Real>(
    params: NetParams<T>,
    pairs: &[(&Image<T>, &Image<T>)],
    spec: &TrainSpec,
) -> Result<(NetParams<T>, Vec<LossReport>)> {
    let selection = if pairs.len() == 1 { Selection::Best } else { Selection::Last };
    let out = fit(params, pairs, spec, selection)?;
    Ok((out.params, out.trace))
}
