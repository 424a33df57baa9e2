//! Dense grid containers and the resampling primitives built on them.
//!
//! Grids are 2D or 3D and stored row-major. Extents are always listed in
//! row-major order (`[rows, cols]` or `[slices, rows, cols]`), while vector
//! components of a displacement follow the image-coordinate order `(x, y, z)`:
//! component 0 moves along columns, component 1 along rows, component 2
//! along slices.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::scalar::Real;

/// Grid extents of a 2D or 3D image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    ndim: usize,
    /// `[nz, ny, nx]`; `nz == 1` for 2D grids.
    zyx: [usize; 3],
}

impl Dims {
    /// Builds extents from a row-major list of length 2 or 3.
    pub fn new(extents: &[usize]) -> Result<Self> {
        if extents.contains(&0) {
            return Err(RegError::InvalidArgument(format!(
                "zero extent in {extents:?}"
            )));
        }
        match *extents {
            [ny, nx] => Ok(Self::d2(ny, nx)),
            [nz, ny, nx] => Ok(Self::d3(nz, ny, nx)),
            _ => Err(RegError::InvalidArgument(format!(
                "only 2D and 3D grids are supported, got {} extents",
                extents.len()
            ))),
        }
    }

    pub fn d2(ny: usize, nx: usize) -> Self {
        assert!(ny > 0 && nx > 0, "zero extent");
        Dims { ndim: 2, zyx: [1, ny, nx] }
    }

    pub fn d3(nz: usize, ny: usize, nx: usize) -> Self {
        assert!(nz > 0 && ny > 0 && nx > 0, "zero extent");
        Dims { ndim: 3, zyx: [nz, ny, nx] }
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.ndim
    }

    /// Number of grid points.
    #[inline]
    pub fn len(&self) -> usize {
        self.zyx.iter().product()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Active extents in row-major order.
    pub fn extents(&self) -> &[usize] {
        &self.zyx[3 - self.ndim..]
    }

    /// `[nz, ny, nx]` with `nz == 1` for 2D.
    #[inline]
    pub fn zyx(&self) -> [usize; 3] {
        self.zyx
    }

    /// Extent of the axis a vector component moves along.
    #[inline]
    pub fn component_extent(&self, comp: usize) -> usize {
        self.zyx[2 - comp]
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.zyx[1] + y) * self.zyx[2] + x
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.zyx[2];
        let r = idx / self.zyx[2];
        [r / self.zyx[1], r % self.zyx[1], x]
    }

    /// True if the axis in `zyx` order is a real axis of this grid.
    #[inline]
    pub(crate) fn axis_active(&self, axis: usize) -> bool {
        axis >= 3 - self.ndim
    }

    /// Extents `floor(e * s)` on every active axis.
    pub fn scaled(&self, s: f64) -> Result<Dims> {
        if !(s.is_finite() && s > 0.0 && s <= 1.0) {
            return Err(RegError::InvalidScale(format!("scale {s} not in (0, 1]")));
        }
        let mut zyx = self.zyx;
        for axis in 0..3 {
            if self.axis_active(axis) {
                zyx[axis] = (self.zyx[axis] as f64 * s + 1e-9).floor() as usize;
                if zyx[axis] == 0 {
                    return Err(RegError::InvalidScale(format!(
                        "scale {s} maps extent {} to zero",
                        self.zyx[axis]
                    )));
                }
            }
        }
        Ok(Dims { ndim: self.ndim, zyx })
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.extents().iter().map(|e| e.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// Positive rational pyramid-level tag, e.g. `1/4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scale {
    num: u32,
    den: u32,
}

impl Scale {
    pub const ONE: Scale = Scale { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(RegError::InvalidScale(format!("{num}/{den}")));
        }
        let g = gcd(num, den);
        Ok(Scale { num: num / g, den: den / g })
    }

    /// `1 / 2^k`.
    pub fn inv_pow2(k: u32) -> Self {
        Scale { num: 1, den: 1 << k }
    }

    /// Nearest rational with a power-of-two denominator up to `2^20`.
    pub fn from_f64(v: f64) -> Result<Self> {
        if !(v.is_finite() && v > 0.0) {
            return Err(RegError::InvalidScale(format!("{v}")));
        }
        let den = 1u32 << 20;
        let num = (v * den as f64).round();
        if num < 1.0 || num > u32::MAX as f64 {
            return Err(RegError::InvalidScale(format!("{v}")));
        }
        Scale::new(num as u32, den)
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl Default for Scale {
    fn default() -> Self {
        Scale::ONE
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = RegError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || RegError::InvalidScale(s.to_string());
        match s.split_once('/') {
            Some((n, d)) => Scale::new(
                n.trim().parse().map_err(|_| bad())?,
                d.trim().parse().map_err(|_| bad())?,
            ),
            None => {
                let v: f64 = s.trim().parse().map_err(|_| bad())?;
                Scale::from_f64(v)
            }
        }
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn check_finite<T: Real>(data: &[T], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(RegError::InvalidArgument(format!(
            "non-finite {what} value at index {i}"
        ))),
        None => Ok(()),
    }
}

/// Dense scalar image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(RegError::Shape(format!(
                "image data has {} values, dims {dims} need {}",
                data.len(),
                dims.len()
            )));
        }
        check_finite(&data, "image")?;
        Ok(Image { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Image { dims, data: vec![T::zero(); dims.len()] }
    }

    pub fn filled(dims: Dims, v: T) -> Self {
        Image { dims, data: vec![v; dims.len()] }
    }

    /// Builds an image from a function of `[z, y, x]` grid coordinates.
    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 3]) -> T) -> Self {
        let data = (0..dims.len()).map(|i| f(dims.coords(i))).collect();
        Image { dims, data }
    }

    /// Constructor without validation, for values produced inside the crate.
    pub(crate) fn from_raw(dims: Dims, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        Image { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.dims.index(z, y, x)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Image { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Converts the element type.
    pub fn cast<U: Real>(&self) -> Image<U> {
        Image { dims: self.dims, data: self.data.iter().map(|v| U::c(v.f64())).collect() }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }
}

/// Per-point displacement vectors in pixel units of their own grid.
///
/// Storage is component-major: all x displacements, then all y, then z.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<T> {
    dims: Dims,
    data: Vec<T>,
    scale: Scale,
}

impl<T: Real> DisplacementField<T> {
    /// Builds a field from component-major data.
    pub fn new(dims: Dims, data: Vec<T>, scale: Scale) -> Result<Self> {
        if data.len() != dims.len() * dims.ndim() {
            return Err(RegError::Shape(format!(
                "field data has {} values, dims {dims} need {}",
                data.len(),
                dims.len() * dims.ndim()
            )));
        }
        check_finite(&data, "field").map_err(|e| RegError::InvalidField(e.to_string()))?;
        Ok(DisplacementField { dims, data, scale })
    }

    /// The identity registration: all-zero displacement.
    pub fn zeros(dims: Dims, scale: Scale) -> Self {
        DisplacementField { dims, data: vec![T::zero(); dims.len() * dims.ndim()], scale }
    }

    /// Same displacement at every grid point; `v` is in component order.
    pub fn constant(dims: Dims, v: &[T], scale: Scale) -> Self {
        assert_eq!(v.len(), dims.ndim(), "vector length must equal dimensionality");
        let n = dims.len();
        let mut data = Vec::with_capacity(n * v.len());
        for &c in v {
            data.extend(std::iter::repeat_n(c, n));
        }
        DisplacementField { dims, data, scale }
    }

    pub(crate) fn from_raw(dims: Dims, data: Vec<T>, scale: Scale) -> Self {
        debug_assert_eq!(data.len(), dims.len() * dims.ndim());
        DisplacementField { dims, data, scale }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.dims.ndim()
    }

    #[inline]
    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn with_scale(mut self, scale: Scale) -> Self {
        self.scale = scale;
        self
    }

    /// Component-major raw storage.
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn component(&self, comp: usize) -> &[T] {
        let n = self.dims.len();
        &self.data[comp * n..(comp + 1) * n]
    }

    #[inline]
    pub fn component_mut(&mut self, comp: usize) -> &mut [T] {
        let n = self.dims.len();
        &mut self.data[comp * n..(comp + 1) * n]
    }

    /// Vector at a flat grid index, in component order (unused entries zero).
    #[inline]
    pub fn vector(&self, idx: usize) -> [T; 3] {
        let n = self.dims.len();
        let mut v = [T::zero(); 3];
        for (c, slot) in v.iter_mut().enumerate().take(self.ndim()) {
            *slot = self.data[c * n + idx];
        }
        v
    }

    /// Largest Euclidean vector norm.
    pub fn max_norm(&self) -> T {
        (0..self.dims.len())
            .map(|i| norm(&self.vector(i)))
            .fold(T::zero(), |a, b| a.max(b))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| v.is_zero())
    }

    pub fn cast<U: Real>(&self) -> DisplacementField<U> {
        DisplacementField {
            dims: self.dims,
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
            scale: self.scale,
        }
    }

    /// Multilinear interpolation of every component at a position given in
    /// `[z, y, x]` grid coordinates, border-clamped.
    pub(crate) fn sample_zyx(&self, pos: [T; 3]) -> [T; 3] {
        let n = self.dims.len();
        let mut out = [T::zero(); 3];
        let stencil = Stencil::new(self.dims, pos);
        for (c, slot) in out.iter_mut().enumerate().take(self.ndim()) {
            *slot = stencil.value(&self.data[c * n..(c + 1) * n]);
        }
        out
    }
}

pub(crate) fn norm<T: Real>(v: &[T; 3]) -> T {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Per-point boolean region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    flags: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != dims.len() {
            return Err(RegError::Shape(format!(
                "mask has {} flags, dims {dims} need {}",
                flags.len(),
                dims.len()
            )));
        }
        Ok(Mask { dims, flags })
    }

    pub fn full(dims: Dims) -> Self {
        Mask { dims, flags: vec![true; dims.len()] }
    }

    pub fn empty(dims: Dims) -> Self {
        Mask { dims, flags: vec![false; dims.len()] }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    #[inline]
    pub fn flags_mut(&mut self) -> &mut [bool] {
        &mut self.flags
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// True when every set flag of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.flags.iter().zip(&other.flags).all(|(&a, &b)| !a || b)
    }
}

/// Interpolation coordinates along one axis.
#[derive(Clone, Copy, Debug)]
struct AxisLerp<T> {
    i0: usize,
    i1: usize,
    frac: T,
    /// False when the sample was clamped (or the axis is degenerate), in which
    /// case the derivative along this axis is zero.
    live: bool,
}

impl<T: Real> AxisLerp<T> {
    #[inline]
    fn new(pos: T, n: usize) -> Self {
        if n == 1 {
            return AxisLerp { i0: 0, i1: 0, frac: T::zero(), live: false };
        }
        let hi = T::c((n - 1) as f64);
        let live = pos >= T::zero() && pos <= hi;
        let p = pos.max(T::zero()).min(hi);
        let mut i0 = p.floor().to_usize().unwrap_or(0);
        if i0 >= n - 1 {
            i0 = n - 2;
        }
        let frac = p - T::c(i0 as f64);
        AxisLerp { i0, i1: i0 + 1, frac, live }
    }
}

#[inline]
fn lerp<T: Real>(a: T, b: T, f: T) -> T {
    if f.is_zero() {
        a
    } else if f == T::one() {
        b
    } else {
        a + f * (b - a)
    }
}

/// Clamped multilinear interpolation stencil at one position.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil<T> {
    dims: Dims,
    ax: [AxisLerp<T>; 3],
}

impl<T: Real> Stencil<T> {
    #[inline]
    pub(crate) fn new(dims: Dims, pos_zyx: [T; 3]) -> Self {
        let e = dims.zyx();
        Stencil {
            dims,
            ax: [
                AxisLerp::new(pos_zyx[0], e[0]),
                AxisLerp::new(pos_zyx[1], e[1]),
                AxisLerp::new(pos_zyx[2], e[2]),
            ],
        }
    }

    #[inline]
    fn row(&self, plane: &[T], z: usize, y: usize) -> T {
        let x = &self.ax[2];
        let base = self.dims.index(z, y, 0);
        lerp(plane[base + x.i0], plane[base + x.i1], x.frac)
    }

    #[inline]
    fn slab(&self, plane: &[T], z: usize) -> T {
        let y = &self.ax[1];
        lerp(self.row(plane, z, y.i0), self.row(plane, z, y.i1), y.frac)
    }

    #[inline]
    pub(crate) fn value(&self, plane: &[T]) -> T {
        let z = &self.ax[0];
        if self.dims.ndim() == 2 {
            self.slab(plane, 0)
        } else {
            lerp(self.slab(plane, z.i0), self.slab(plane, z.i1), z.frac)
        }
    }

    /// Interpolated value and its derivative along `[z, y, x]`.
    pub(crate) fn value_grad(&self, plane: &[T]) -> (T, [T; 3]) {
        let [az, ay, ax] = self.ax;
        let d = self.dims;
        let at = |z: usize, y: usize, x: usize| plane[d.index(z, y, x)];
        // corner values c[z][y][x]
        let zs = if d.ndim() == 2 { [0, 0] } else { [az.i0, az.i1] };
        let mut c = [[[T::zero(); 2]; 2]; 2];
        for (iz, &z) in zs.iter().enumerate() {
            for (iy, &y) in [ay.i0, ay.i1].iter().enumerate() {
                for (ix, &x) in [ax.i0, ax.i1].iter().enumerate() {
                    c[iz][iy][ix] = at(z, y, x);
                }
            }
        }
        let fz = if d.ndim() == 2 { T::zero() } else { az.frac };
        let (fy, fx) = (ay.frac, ax.frac);
        // along x
        let rx = |iz: usize, iy: usize| lerp(c[iz][iy][0], c[iz][iy][1], fx);
        let dx = |iz: usize, iy: usize| c[iz][iy][1] - c[iz][iy][0];
        let ry0 = lerp(rx(0, 0), rx(0, 1), fy);
        let ry1 = lerp(rx(1, 0), rx(1, 1), fy);
        let value = lerp(ry0, ry1, fz);

        let gx = if ax.live {
            lerp(lerp(dx(0, 0), dx(0, 1), fy), lerp(dx(1, 0), dx(1, 1), fy), fz)
        } else {
            T::zero()
        };
        let gy = if ay.live {
            lerp(rx(0, 1) - rx(0, 0), rx(1, 1) - rx(1, 0), fz)
        } else {
            T::zero()
        };
        let gz = if az.live && d.ndim() == 3 { ry1 - ry0 } else { T::zero() };
        (value, [gz, gy, gx])
    }
}

/// Per-axis area weights mapping `n_in` samples onto `n_out` at scale `s`.
fn area_weights(n_in: usize, n_out: usize, s: f64) -> Vec<Vec<(usize, f64)>> {
    (0..n_out)
        .map(|o| {
            let lo = o as f64 / s;
            let hi = ((o + 1) as f64 / s).min(n_in as f64);
            let mut w = Vec::new();
            let mut total = 0.0;
            let first = lo.floor() as usize;
            let mut i = first;
            while (i as f64) < hi && i < n_in {
                let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                if overlap > 1e-12 {
                    w.push((i, overlap));
                    total += overlap;
                }
                i += 1;
            }
            if w.is_empty() {
                // interval fell past the end: nearest sample
                w.push((n_in - 1, 1.0));
                total = 1.0;
            }
            for e in &mut w {
                e.1 /= total;
            }
            w
        })
        .collect()
}

/// Applies a separable per-axis weighting along one `zyx` axis.
fn resample_axis<T: Real>(
    data: &[T],
    dims_in: [usize; 3],
    axis: usize,
    weights: &[Vec<(usize, f64)>],
) -> (Vec<T>, [usize; 3]) {
    let mut dims_out = dims_in;
    dims_out[axis] = weights.len();
    let stride_in: usize = dims_in[axis + 1..].iter().product();
    let outer: usize = dims_in[..axis].iter().product();
    let n_in = dims_in[axis];
    let n_out = dims_out[axis];
    let tw: Vec<Vec<(usize, T)>> = weights
        .iter()
        .map(|w| w.iter().map(|&(i, v)| (i, T::c(v))).collect())
        .collect();
    let mut out = vec![T::zero(); outer * n_out * stride_in];
    for o in 0..outer {
        for (j, w) in tw.iter().enumerate() {
            let dst = &mut out[(o * n_out + j) * stride_in..(o * n_out + j + 1) * stride_in];
            for &(i, wt) in w {
                let src = &data[(o * n_in + i) * stride_in..(o * n_in + i + 1) * stride_in];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
    }
    (out, dims_out)
}

/// Area-average pooling to extents `floor(e * s)`.
///
/// Output sample `o` averages the source interval `[o / s, (o + 1) / s)`,
/// so its centre sits at `(o + 0.5) / s - 0.5`. `s == 1` returns a copy.
pub fn downsample<T: Real>(img: &Image<T>, s: f64) -> Result<Image<T>> {
    let out_dims = img.dims.scaled(s)?;
    if s == 1.0 {
        return Ok(img.clone());
    }
    let mut data = img.data.clone();
    let mut cur = img.dims.zyx();
    for axis in 0..3 {
        if !img.dims.axis_active(axis) {
            continue;
        }
        let w = area_weights(cur[axis], out_dims.zyx()[axis], s);
        let (d, c) = resample_axis(&data, cur, axis, &w);
        data = d;
        cur = c;
    }
    Ok(Image::from_raw(out_dims, data))
}

/// Spatially upsamples a field onto `target` by multilinear interpolation.
///
/// Target point `x` reads the source at `(x + 0.5) / factor - 0.5`, clamped
/// to the border. Vector components are left in the units of the source
/// grid; callers rescale them.
pub fn upsample_field<T: Real>(
    field: &DisplacementField<T>,
    factor: f64,
    target: Dims,
) -> Result<DisplacementField<T>> {
    if !factor.is_finite() || factor < 1.0 {
        return Err(RegError::InvalidArgument(format!(
            "upsampling factor {factor} must be finite and >= 1"
        )));
    }
    if target.ndim() != field.ndim() {
        return Err(RegError::Shape(format!(
            "target {target} has different dimensionality than field {}",
            field.dims
        )));
    }
    let scale = Scale::from_f64(field.scale.value() * factor).unwrap_or(Scale::ONE);
    if factor == 1.0 && target == field.dims {
        return Ok(field.clone().with_scale(scale));
    }
    let src = |x: usize| T::c((x as f64 + 0.5) / factor - 0.5);
    let n = target.len();
    let ndim = field.ndim();
    let mut data = vec![T::zero(); n * ndim];
    for idx in 0..n {
        let [z, y, x] = target.coords(idx);
        let pos = [if ndim == 3 { src(z) } else { T::zero() }, src(y), src(x)];
        let v = field.sample_zyx(pos);
        for c in 0..ndim {
            data[c * n + idx] = v[c];
        }
    }
    Ok(DisplacementField::from_raw(target, data, scale))
}

/// Multilinear interpolation of a field at query points.
///
/// Points are given in component order `(x, y[, z])` (grid coordinates);
/// queries outside the grid clamp to the border.
pub fn sample_field_at<T: Real>(
    field: &DisplacementField<T>,
    points: &[[T; 3]],
) -> Result<Vec<[T; 3]>> {
    let ndim = field.ndim();
    points
        .iter()
        .map(|p| {
            if p[..ndim].iter().any(|v| !v.is_finite()) {
                return Err(RegError::InvalidArgument("non-finite query point".into()));
            }
            let pos = [if ndim == 3 { p[2] } else { T::zero() }, p[1], p[0]];
            Ok(field.sample_zyx(pos))
        })
        .collect()
}

/// Zero-padded box sums along one `zyx` axis: output `i` sums inputs
/// `i - before ..= i - before + width - 1`.
pub(crate) fn box_sum_axis<T: Real>(
    data: &[T],
    dims: Dims,
    axis: usize,
    width: usize,
    before: usize,
) -> Vec<T> {
    let e = dims.zyx();
    let n = e[axis];
    let stride: usize = e[axis + 1..].iter().product();
    let outer: usize = e[..axis].iter().product();
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        let base = o * n * stride;
        for i in 0..n {
            let lo = i.saturating_sub(before);
            let hi = (i + width).saturating_sub(before).min(n); // exclusive
            let dst = base + i * stride;
            for j in lo..hi {
                let src = base + j * stride;
                for k in 0..stride {
                    out[dst + k] += data[src + k];
                }
            }
        }
    }
    out
}

/// Validated window in `zyx` order (inactive axes have width 1).
pub(crate) fn window_zyx(dims: Dims, window: &[usize]) -> Result<[usize; 3]> {
    if window.len() != dims.ndim() {
        return Err(RegError::InvalidWindow(format!(
            "window {window:?} has {} extents for a {}D grid",
            window.len(),
            dims.ndim()
        )));
    }
    let mut w = [1usize; 3];
    w[3 - dims.ndim()..].copy_from_slice(window);
    for axis in 0..3 {
        if w[axis] == 0 || w[axis] > dims.zyx()[axis] {
            return Err(RegError::InvalidWindow(format!(
                "window {window:?} does not fit grid {dims}"
            )));
        }
    }
    Ok(w)
}

/// Box sums over `w` with the given anchoring (points before centre per axis).
pub(crate) fn box_sums<T: Real>(
    data: &[T],
    dims: Dims,
    w: [usize; 3],
    before: [usize; 3],
) -> Vec<T> {
    let mut cur = data.to_vec();
    for axis in (0..3).rev() {
        if w[axis] > 1 || before[axis] > 0 {
            cur = box_sum_axis(&cur, dims, axis, w[axis], before[axis]);
        }
    }
    cur
}

/// Points before the centre covered by a window of width `w`.
#[inline]
pub(crate) fn window_before(w: usize) -> usize {
    w / 2
}

/// Windowed sums centred at each point with zero padding.
///
/// A window of extent `w` covers `w / 2` points before and `w - 1 - w / 2`
/// after the centre, per axis.
pub fn local_sums<T: Real>(img: &Image<T>, window: &[usize]) -> Result<Image<T>> {
    let w = window_zyx(img.dims, window)?;
    let before = w.map(window_before);
    Ok(Image::from_raw(img.dims, box_sums(&img.data, img.dims, w, before)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img2(rows: &[&[f64]]) -> Image<f64> {
        let dims = Dims::d2(rows.len(), rows[0].len());
        Image::new(dims, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn downsample_two_by_two_average() {
        let img = img2(&[&[1.0, 1.0], &[3.0, 3.0]]);
        let d = downsample(&img, 0.5).unwrap();
        assert_eq!(d.dims(), Dims::d2(1, 1));
        assert_eq!(d.data(), &[2.0]);
    }

    #[test]
    fn downsample_identity_scale() {
        let img = img2(&[&[0.1, 0.7], &[0.3, 0.9]]);
        assert_eq!(downsample(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn downsample_degenerate_extent() {
        let img = img2(&[&[1.0, 2.0, 3.0]]);
        assert!(matches!(downsample(&img, 0.5), Err(RegError::InvalidScale(_))));
        assert!(matches!(downsample(&img, 0.0), Err(RegError::InvalidScale(_))));
    }

    #[test]
    fn downsample_non_integer_scale_preserves_constants() {
        let img = Image::filled(Dims::d2(7, 10), 0.25f64);
        let d = downsample(&img, 0.3).unwrap();
        assert_eq!(d.dims(), Dims::d2(2, 3));
        for &v in d.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_two_point_line() {
        let f = DisplacementField::new(Dims::d2(1, 2), vec![0.0, 2.0, 0.0, 0.0], Scale::inv_pow2(1))
            .unwrap();
        let up = upsample_field(&f, 2.0, Dims::d2(1, 4)).unwrap();
        // sources at -0.25, 0.25, 0.75, 1.25 with clamping
        assert_eq!(up.component(0), &[0.0, 0.5, 1.5, 2.0]);
        assert_eq!(up.scale(), Scale::ONE);
    }

    #[test]
    fn upsample_rejects_bad_factor() {
        let f = DisplacementField::<f64>::zeros(Dims::d2(2, 2), Scale::ONE);
        assert!(upsample_field(&f, f64::NAN, Dims::d2(4, 4)).is_err());
        assert!(upsample_field(&f, 0.5, Dims::d2(4, 4)).is_err());
    }

    #[test]
    fn sample_midpoint_and_node() {
        let f = DisplacementField::new(Dims::d2(1, 2), vec![0.0, 2.0, 0.0, 0.0], Scale::ONE).unwrap();
        let out = sample_field_at(&f, &[[0.5, 0.0, 0.0], [1.0, 0.0, 0.0], [7.0, -3.0, 0.0]]).unwrap();
        assert_eq!(out[0][..2], [1.0, 0.0]);
        assert_eq!(out[1][..2], [2.0, 0.0]);
        assert_eq!(out[2][..2], [2.0, 0.0]);
        assert!(sample_field_at(&f, &[[f64::NAN, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn local_sums_interior_and_corner() {
        let img = Image::filled(Dims::d2(5, 5), 1.0f64);
        let s = local_sums(&img, &[3, 3]).unwrap();
        assert_eq!(s.at(0, 2, 2), 9.0);
        assert_eq!(s.at(0, 0, 0), 4.0);
    }

    #[test]
    fn local_sums_even_window_anchor() {
        // 1D-like row: window 4 covers 2 before, 1 after
        let img = img2(&[&[1.0, 2.0, 4.0, 8.0, 16.0]]);
        let s = local_sums(&img, &[1, 4]).unwrap();
        assert_eq!(s.data(), &[3.0, 7.0, 15.0, 30.0, 28.0]);
    }

    #[test]
    fn local_sums_rejects_oversized_window() {
        let img = Image::filled(Dims::d2(4, 4), 1.0f64);
        assert!(matches!(local_sums(&img, &[5, 3]), Err(RegError::InvalidWindow(_))));
        assert!(matches!(local_sums(&img, &[3]), Err(RegError::InvalidWindow(_))));
        assert!(matches!(local_sums(&img, &[0, 3]), Err(RegError::InvalidWindow(_))));
    }

    #[test]
    fn scale_parsing() {
        assert_eq!("1/8".parse::<Scale>().unwrap(), Scale::inv_pow2(3));
        assert_eq!("0.5".parse::<Scale>().unwrap(), Scale::inv_pow2(1));
        assert_eq!("2/4".parse::<Scale>().unwrap().to_string(), "1/2");
        assert!("0".parse::<Scale>().is_err());
    }

    #[test]
    fn stencil_gradient_on_ramp() {
        let dims = Dims::d2(3, 4);
        let img = Image::from_fn(dims, |[_, y, x]| 2.0 * x as f64 + 5.0 * y as f64);
        let (v, g) = Stencil::new(dims, [0.0, 1.25, 1.5]).value_grad(img.data());
        assert!((v - (3.0 + 6.25)).abs() < 1e-12);
        assert_eq!(g, [0.0, 5.0, 2.0]);
        // clamped along x: zero derivative along x only
        let (_, g) = Stencil::new(dims, [0.0, 1.25, 9.0]).value_grad(img.data());
        assert_eq!(g, [0.0, 5.0, 0.0]);
    }
}
