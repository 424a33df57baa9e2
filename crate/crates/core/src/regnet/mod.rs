//! Displacement predictor: a fully convolutional encoder-decoder with skip
//! connections, mapping a (moving, fixed) image pair to a displacement field.
//!
//! The encoder halves resolution with stride-2 convolutions; each decoder
//! level upsamples by nearest neighbour, concatenates the matching encoder
//! activation (the raw input pair at full resolution), and convolves. A final
//! convolution without activation produces one channel per spatial axis.
//! Gradients for every parameter are computed in-crate from a recorded tape.

mod checkpoint;
mod conv;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::grid::{DisplacementField, Dims, Image, Scale};
use crate::scalar::Real;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use conv::ConvGeom;

/// Smallest extent accepted on any spatial axis.
pub const MIN_EXTENT: usize = 4;

/// Architecture of the predictor network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub ndim: usize,
    /// Output channels of each encoder level (each halves resolution).
    pub encoder: Vec<usize>,
    /// Output channels of each decoder level, coarse to fine.
    pub decoder: Vec<usize>,
    /// Negative slope of the leaky rectifier.
    pub negative_slope: f64,
}

impl NetConfig {
    pub fn new(ndim: usize) -> Self {
        NetConfig {
            ndim,
            encoder: vec![16, 32, 32, 32],
            decoder: vec![32, 32, 32, 16],
            negative_slope: 0.2,
        }
    }

    pub fn with_widths(ndim: usize, encoder: Vec<usize>, decoder: Vec<usize>) -> Self {
        NetConfig { ndim, encoder, decoder, negative_slope: 0.2 }
    }

    pub fn levels(&self) -> usize {
        self.encoder.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ndim != 2 && self.ndim != 3 {
            return Err(RegError::InvalidArgument(format!("ndim {} not in {{2, 3}}", self.ndim)));
        }
        if self.encoder.is_empty() || self.encoder.len() != self.decoder.len() {
            return Err(RegError::InvalidArgument(format!(
                "encoder ({}) and decoder ({}) need the same non-zero level count",
                self.encoder.len(),
                self.decoder.len()
            )));
        }
        if self.encoder.iter().chain(&self.decoder).any(|&c| c == 0) {
            return Err(RegError::InvalidArgument("zero channel width".into()));
        }
        if !(self.negative_slope.is_finite() && self.negative_slope > 0.0) {
            return Err(RegError::InvalidArgument("negative slope must be positive".into()));
        }
        if self.levels() > 8 {
            return Err(RegError::InvalidArgument("at most 8 levels".into()));
        }
        Ok(())
    }

    /// Layer list in parameter order: encoder, decoder, output head.
    pub(crate) fn layers(&self) -> Vec<LayerSpec> {
        let l = self.levels();
        let mut v = Vec::with_capacity(2 * l + 1);
        for k in 0..l {
            let cin = if k == 0 { 2 } else { self.encoder[k - 1] };
            v.push(LayerSpec { cin, cout: self.encoder[k], stride: 2, act: true });
        }
        for j in 0..l {
            let prev = if j == 0 { self.encoder[l - 1] } else { self.decoder[j - 1] };
            v.push(LayerSpec { cin: prev + self.skip_channels(j), cout: self.decoder[j], stride: 1, act: true });
        }
        v.push(LayerSpec { cin: self.decoder[l - 1], cout: self.ndim, stride: 1, act: false });
        v
    }

    fn skip_channels(&self, j: usize) -> usize {
        let l = self.levels();
        if j + 1 < l {
            self.encoder[l - 2 - j]
        } else {
            2
        }
    }

    fn kernel(&self) -> [usize; 3] {
        if self.ndim == 2 {
            [1, 3, 3]
        } else {
            [3, 3, 3]
        }
    }

    fn active(&self) -> [bool; 3] {
        [self.ndim == 3, true, true]
    }

    fn geom(&self, spec: &LayerSpec, input: [usize; 3], periodic: bool) -> ConvGeom {
        let active = self.active();
        let s = if spec.stride == 2 { active.map(|a| if a { 2 } else { 1 }) } else { [1, 1, 1] };
        ConvGeom {
            cin: spec.cin,
            input,
            kernel: self.kernel(),
            stride: s,
            pad: active.map(|a| a as usize),
            periodic,
        }
    }

    /// Weight tensor shapes, `[cout, cin, kernel...]`, and bias shapes `[cout]`.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let k = self.kernel();
        let mut shapes = Vec::new();
        for l in self.layers() {
            let mut w = vec![l.cout, l.cin];
            w.extend_from_slice(&k[3 - self.ndim..]);
            shapes.push(w);
            shapes.push(vec![l.cout]);
        }
        shapes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct LayerSpec {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub act: bool,
}

/// All weights and biases of one predictor, in layer order `[w0, b0, w1, b1, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<T> {
    config: NetConfig,
    tensors: Vec<Vec<T>>,
}

impl<T: Real> NetParams<T> {
    /// Wraps existing tensors after checking them against `config`.
    pub fn from_tensors(config: NetConfig, tensors: Vec<Vec<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.tensor_shapes();
        if shapes.len() != tensors.len() {
            return Err(RegError::Shape(format!(
                "{} tensors given, config needs {}",
                tensors.len(),
                shapes.len()
            )));
        }
        for (i, (s, t)) in shapes.iter().zip(&tensors).enumerate() {
            if s.iter().product::<usize>() != t.len() {
                return Err(RegError::Shape(format!("tensor {i} has {} values, shape {s:?}", t.len())));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(RegError::InvalidArgument(format!("tensor {i} has non-finite values")));
            }
        }
        Ok(NetParams { config, tensors })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Vec<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|t| t.iter().map(|v| U::c(v.f64())).collect()).collect(),
        }
    }

    fn weight(&self, layer: usize) -> &[T] {
        &self.tensors[2 * layer]
    }

    fn bias(&self, layer: usize) -> &[T] {
        &self.tensors[2 * layer + 1]
    }
}

/// Gradients shaped like [`NetParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T>(pub Vec<Vec<T>>);

impl<T: Real> ParamGrads<T> {
    pub fn zeros_like(params: &NetParams<T>) -> Self {
        ParamGrads(params.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_zero())
    }
}

/// Deterministic initialisation.
///
/// Hidden layers draw weights uniformly from `+-gain * sqrt(3 / fan_in)` with
/// the leaky-rectifier gain; biases start at zero. The output head is all
/// zeros, so a fresh network predicts the identity registration.
pub fn init_params<T: Real>(config: &NetConfig, seed: u64) -> Result<NetParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = config.layers();
    let kvol: usize = config.kernel().iter().product();
    let slope = config.negative_slope;
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let mut tensors = Vec::with_capacity(2 * layers.len());
    for (i, l) in layers.iter().enumerate() {
        let n = l.cout * l.cin * kvol;
        let w = if i + 1 == layers.len() {
            vec![T::zero(); n]
        } else {
            let bound = gain * (3.0 / (l.cin * kvol) as f64).sqrt();
            (0..n).map(|_| T::c(rng.random_range(-bound..bound))).collect()
        };
        tensors.push(w);
        tensors.push(vec![T::zero(); l.cout]);
    }
    Ok(NetParams { config: config.clone(), tensors })
}

/// Activations recorded by a forward pass, consumed by one backward pass.
#[derive(Debug)]
pub struct TapeState<T> {
    config: NetConfig,
    consumed: bool,
    periodic: bool,
    out_dims: Dims,
    padded: [usize; 3],
    /// Input of every layer, in layer order.
    inputs: Vec<(Vec<T>, [usize; 3])>,
    /// Post-activation output of every hidden layer.
    outputs: Vec<Vec<T>>,
}

impl<T> TapeState<T> {
    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Post-activation output of every hidden layer, in layer order.
    pub fn hidden_activations(&self) -> &[Vec<T>] {
        &self.outputs
    }
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Predicts the displacement field for `moving` against `fixed`.
///
/// Inputs are padded by edge replication to a multiple of `2^levels` per axis
/// and the padding is cropped from the output. The field is in pixel units of
/// the input grid.
pub fn predict_field<T: Real>(
    params: &NetParams<T>,
    fixed: &Image<T>,
    moving: &Image<T>,
) -> Result<(DisplacementField<T>, TapeState<T>)> {
    forward(params, fixed, moving, false)
}

/// Forward pass with periodic (wrap-around) convolution boundaries and no
/// padding. Inputs must already be multiples of `2^levels`; the network is
/// then exactly equivariant to circular shifts by multiples of `2^levels`.
pub fn predict_field_periodic<T: Real>(
    params: &NetParams<T>,
    fixed: &Image<T>,
    moving: &Image<T>,
) -> Result<(DisplacementField<T>, TapeState<T>)> {
    forward(params, fixed, moving, true)
}

fn forward<T: Real>(
    params: &NetParams<T>,
    fixed: &Image<T>,
    moving: &Image<T>,
    periodic: bool,
) -> Result<(DisplacementField<T>, TapeState<T>)> {
    let cfg = &params.config;
    let dims = fixed.dims();
    if moving.dims() != dims {
        return Err(RegError::Shape(format!("fixed {dims} vs moving {}", moving.dims())));
    }
    if dims.ndim() != cfg.ndim {
        return Err(RegError::Shape(format!("{}D images for a {}D network", dims.ndim(), cfg.ndim)));
    }
    if dims.extents().iter().any(|&e| e < MIN_EXTENT) {
        return Err(RegError::TooSmall(format!("{dims}: every extent must be >= {MIN_EXTENT}")));
    }
    let active = cfg.active();
    let mult = 1usize << cfg.levels();
    let orig = dims.zyx();
    let padded = [0, 1, 2].map(|a| if active[a] { round_up(orig[a], mult) } else { 1 });
    if periodic && padded != orig {
        return Err(RegError::Shape(format!("periodic mode needs extents divisible by {mult}, got {dims}")));
    }

    let mut x0 = Vec::with_capacity(2 * dims.len());
    x0.extend_from_slice(moving.data());
    x0.extend_from_slice(fixed.data());
    let x0 = conv::pad_edge(&x0, 2, orig, padded);

    let layers = cfg.layers();
    let lv = cfg.levels();
    let slope = T::c(cfg.negative_slope);
    let mut scratch = Vec::new();
    let mut inputs: Vec<(Vec<T>, [usize; 3])> = Vec::with_capacity(layers.len());
    let mut outputs: Vec<Vec<T>> = Vec::with_capacity(layers.len());

    let run = |li: usize, input: &[T], in_dims: [usize; 3], scratch: &mut Vec<T>| {
        let g = cfg.geom(&layers[li], in_dims, periodic);
        let mut out = conv::conv_forward(input, &g, params.weight(li), params.bias(li), scratch);
        if layers[li].act {
            conv::leaky_relu(&mut out, slope);
        }
        (out, g.output())
    };

    // encoder
    let mut enc_dims = Vec::with_capacity(lv);
    let mut cur = x0.clone();
    let mut cur_dims = padded;
    inputs.push((x0, padded));
    for k in 0..lv {
        if k > 0 {
            inputs.push((cur.clone(), cur_dims));
        }
        let (out, od) = run(k, &cur, cur_dims, &mut scratch);
        outputs.push(out.clone());
        enc_dims.push(od);
        cur = out;
        cur_dims = od;
    }
    // decoder
    for j in 0..lv {
        let li = lv + j;
        let prev_c = if j == 0 { cfg.encoder[lv - 1] } else { cfg.decoder[j - 1] };
        let (mut cat, up_dims) = conv::upsample2(&cur, prev_c, cur_dims, active);
        if j + 1 < lv {
            let skip = &outputs[lv - 2 - j];
            debug_assert_eq!(enc_dims[lv - 2 - j], up_dims);
            cat.extend_from_slice(skip);
        } else {
            debug_assert_eq!(padded, up_dims);
            cat.extend_from_slice(&inputs[0].0);
        }
        let (out, od) = run(li, &cat, up_dims, &mut scratch);
        inputs.push((cat, up_dims));
        outputs.push(out.clone());
        cur = out;
        cur_dims = od;
    }
    // output head
    let head = 2 * lv;
    let (out, od) = run(head, &cur, cur_dims, &mut scratch);
    inputs.push((cur, cur_dims));
    debug_assert_eq!(od, padded);
    let field_data = conv::crop(&out, cfg.ndim, padded, orig);
    // channel c predicts displacement along component c
    let field = DisplacementField::from_raw(dims, field_data, Scale::ONE);
    let tape = TapeState {
        config: cfg.clone(),
        consumed: false,
        periodic,
        out_dims: dims,
        padded,
        inputs,
        outputs,
    };
    Ok((field, tape))
}

/// Parameter gradients of a scalar loss, given its gradient with respect to
/// the predicted field. Consumes the tape.
pub fn backward<T: Real>(
    params: &NetParams<T>,
    tape: &mut TapeState<T>,
    upstream: &DisplacementField<T>,
) -> Result<ParamGrads<T>> {
    if tape.consumed {
        return Err(RegError::InvalidTape("tape already consumed by a backward pass".into()));
    }
    if tape.config != params.config {
        return Err(RegError::InvalidTape("tape was recorded with a different network".into()));
    }
    if upstream.dims() != tape.out_dims {
        return Err(RegError::Shape(format!(
            "upstream gradient {} does not match forward output {}",
            upstream.dims(),
            tape.out_dims
        )));
    }
    tape.consumed = true;
    let inputs = std::mem::take(&mut tape.inputs);
    let outputs = std::mem::take(&mut tape.outputs);

    let cfg = &params.config;
    let layers = cfg.layers();
    let lv = cfg.levels();
    let active = cfg.active();
    let slope = T::c(cfg.negative_slope);
    let mut grads = ParamGrads::zeros_like(params);
    let mut scratch = Vec::new();

    let mut step = |li: usize, grad_out: &[T], want_input: bool, grads: &mut ParamGrads<T>| {
        let (input, in_dims) = &inputs[li];
        let g = cfg.geom(&layers[li], *in_dims, tape.periodic);
        let (gw, rest) = grads.0[2 * li..].split_at_mut(1);
        conv::conv_backward(input, &g, params.weight(li), grad_out, &mut gw[0], &mut rest[0], want_input, &mut scratch)
    };

    let g_out = conv::uncrop(upstream.data(), cfg.ndim, tape.padded, tape.out_dims.zyx());
    let head = 2 * lv;
    let mut g = step(head, &g_out, true, &mut grads).expect("input gradient requested");

    // decoder, fine to coarse; skip gradients wait for their encoder layer
    let mut skip_grads: Vec<Option<Vec<T>>> = vec![None; lv];
    for j in (0..lv).rev() {
        let li = lv + j;
        conv::leaky_relu_backward(&mut g, &outputs[li], slope);
        let g_cat = step(li, &g, true, &mut grads).expect("input gradient requested");
        let (_, up_dims) = inputs[li];
        let plane: usize = up_dims.iter().product();
        let prev_c = if j == 0 { cfg.encoder[lv - 1] } else { cfg.decoder[j - 1] };
        let (g_up, g_skip) = g_cat.split_at(prev_c * plane);
        if j + 1 < lv {
            skip_grads[lv - 2 - j] = Some(g_skip.to_vec());
        }
        // dims of the activation that was upsampled
        let src_dims = if j == 0 {
            cfg.geom(&layers[lv - 1], inputs[lv - 1].1, false).output()
        } else {
            inputs[li - 1].1
        };
        g = conv::upsample2_backward(g_up, prev_c, src_dims, active);
    }
    // encoder, deep to shallow
    for k in (0..lv).rev() {
        if let Some(s) = skip_grads[k].take() {
            for (a, b) in g.iter_mut().zip(&s) {
                *a += *b;
            }
        }
        conv::leaky_relu_backward(&mut g, &outputs[k], slope);
        match step(k, &g, k > 0, &mut grads) {
            Some(gi) => g = gi,
            None => break,
        }
    }
    Ok(grads)
}
