//! Reconstruction and smoothness objectives with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::grid::{box_sums, window_before, window_zyx, DisplacementField, Dims, Image, Mask};
use crate::scalar::Real;

/// Denominator guard of the local cross-correlation.
pub const NLCC_EPS: f64 = 1e-5;

/// One evaluation of the registration objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub reconstruction: f64,
    /// Smoothness term as weighted in the objective (see [`smoothness_penalty`]).
    pub smoothness: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn new(reconstruction: f64, smoothness: f64, lambda: f64) -> Self {
        LossReport { reconstruction, smoothness, total: reconstruction + lambda * smoothness, lambda }
    }

    pub fn is_finite(&self) -> bool {
        self.reconstruction.is_finite() && self.smoothness.is_finite() && self.total.is_finite()
    }
}

fn check_pair<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(RegError::Shape(format!("image dims {} vs {}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Windowed first and second moments of an image pair.
pub(crate) struct LocalMoments<T> {
    pub s_i: Vec<T>,
    pub s_j: Vec<T>,
    pub s_ii: Vec<T>,
    pub s_jj: Vec<T>,
    pub s_ij: Vec<T>,
    /// Number of in-grid cells in each window.
    pub count: Vec<T>,
}

impl<T: Real> LocalMoments<T> {
    pub(crate) fn new(i: &[T], j: &[T], dims: Dims, w: [usize; 3]) -> Self {
        let before = w.map(window_before);
        let sums = |v: &[T]| box_sums(v, dims, w, before);
        let ii: Vec<T> = i.iter().map(|&a| a * a).collect();
        let jj: Vec<T> = j.iter().map(|&a| a * a).collect();
        let ij: Vec<T> = i.iter().zip(j).map(|(&a, &b)| a * b).collect();
        LocalMoments {
            s_i: sums(i),
            s_j: sums(j),
            s_ii: sums(&ii),
            s_jj: sums(&jj),
            s_ij: sums(&ij),
            count: sums(&vec![T::one(); i.len()]),
        }
    }

    /// Centred cross term and the two centred variances at point `p`.
    #[inline]
    pub(crate) fn centred(&self, p: usize) -> (T, T, T) {
        let w = self.count[p];
        let cross = self.s_ij[p] - self.s_i[p] * self.s_j[p] / w;
        let var_i = self.s_ii[p] - self.s_i[p] * self.s_i[p] / w;
        let var_j = self.s_jj[p] - self.s_j[p] * self.s_j[p] / w;
        (cross, var_i, var_j)
    }
}

/// Negative normalised local cross-correlation and its gradient with respect
/// to the warped image.
///
/// At each point the squared centred cross term of the window is divided by
/// the product of centred variances plus `eps`; the loss is the negated mean
/// over all grid points, so it lies in `[-1, 0]`. Windows are truncated at
/// the border and centred on the mean of their in-grid cells.
pub fn nlcc_loss<T: Real>(
    fixed: &Image<T>,
    warped: &Image<T>,
    window: &[usize],
    eps: T,
) -> Result<(T, Image<T>)> {
    check_pair(fixed, warped)?;
    let dims = fixed.dims();
    let w = window_zyx(dims, window)?;
    let i = fixed.data();
    let j = warped.data();
    let m = LocalMoments::new(i, j, dims, w);
    let n = dims.len();
    let two = T::c(2.0);

    let mut acc = T::zero();
    let mut g_ij = vec![T::zero(); n];
    let mut g_jj = vec![T::zero(); n];
    let mut g_j = vec![T::zero(); n];
    for p in 0..n {
        let (c, vi, vj) = m.centred(p);
        let d = vi * vj + eps;
        acc += c * c / d;
        let dc = two * c / d;
        let dvj = -(c * c) * vi / (d * d);
        g_ij[p] = dc;
        g_jj[p] = dvj;
        let vol = m.count[p];
        g_j[p] = -dc * m.s_i[p] / vol - dvj * two * m.s_j[p] / vol;
    }
    let scale = -T::one() / T::c(n as f64);
    let loss = acc * scale;

    // adjoint of the box sum: swap the before/after extents
    let adj_before = w.map(|wa| wa - 1 - window_before(wa));
    let a_ij = box_sums(&g_ij, dims, w, adj_before);
    let a_jj = box_sums(&g_jj, dims, w, adj_before);
    let a_j = box_sums(&g_j, dims, w, adj_before);
    let grad = (0..n)
        .map(|q| scale * (i[q] * a_ij[q] + two * j[q] * a_jj[q] + a_j[q]))
        .collect();
    Ok((loss, Image::from_raw(dims, grad)))
}

/// Sum of squared forward differences of every component along every axis.
///
/// The last slice along an axis contributes no difference on that axis.
pub fn smoothness_loss<T: Real>(
    field: &DisplacementField<T>,
) -> Result<(T, DisplacementField<T>)> {
    let dims = field.dims();
    if dims.extents().iter().any(|&e| e < 2) {
        return Err(RegError::InvalidField(format!(
            "smoothness needs at least 2 points per axis, got {dims}"
        )));
    }
    let n = dims.len();
    let e = dims.zyx();
    let two = T::c(2.0);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); field.data().len()];
    for c in 0..field.ndim() {
        let u = field.component(c);
        let g = &mut grad[c * n..(c + 1) * n];
        for axis in 0..3 {
            if !dims.axis_active(axis) {
                continue;
            }
            let stride: usize = e[axis + 1..].iter().product();
            for idx in 0..n {
                if dims.coords(idx)[axis] + 1 == e[axis] {
                    continue;
                }
                let d = u[idx + stride] - u[idx];
                loss += d * d;
                g[idx + stride] += two * d;
                g[idx] -= two * d;
            }
        }
    }
    Ok((loss, DisplacementField::from_raw(dims, grad, field.scale())))
}

/// Smoothness term as weighted in the training objective.
///
/// This is [`smoothness_loss`] divided by `|grid| * n^2`: the mean over grid
/// points, components and axes of the squared neighbour differences.
pub fn smoothness_penalty<T: Real>(
    field: &DisplacementField<T>,
) -> Result<(T, DisplacementField<T>)> {
    let (loss, mut grad) = smoothness_loss(field)?;
    let nd = field.ndim();
    let norm = T::one() / T::c((field.dims().len() * nd * nd) as f64);
    for g in grad.data_mut() {
        *g *= norm;
    }
    Ok((loss * norm, grad))
}

/// Mean squared difference over the masked points (all points without a mask).
pub fn mse<T: Real>(fixed: &Image<T>, warped: &Image<T>, mask: Option<&Mask>) -> Result<T> {
    check_pair(fixed, warped)?;
    if let Some(m) = mask {
        if m.dims() != fixed.dims() {
            return Err(RegError::Shape(format!("mask {} vs image {}", m.dims(), fixed.dims())));
        }
    }
    let mut acc = T::zero();
    let mut count = 0usize;
    for (k, (&a, &b)) in fixed.data().iter().zip(warped.data()).enumerate() {
        if mask.is_none_or(|m| m.flags()[k]) {
            acc += (a - b) * (a - b);
            count += 1;
        }
    }
    if count == 0 {
        return Err(RegError::EmptyRegion("mask selects no points".into()));
    }
    Ok(acc / T::c(count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Scale;

    fn checker(dims: Dims) -> Image<f64> {
        Image::from_fn(dims, |[z, y, x]| ((x + y + z) % 2) as f64)
    }

    #[test]
    fn self_correlation_is_minus_one() {
        let img = checker(Dims::d2(12, 12));
        let (l, _) = nlcc_loss(&img, &img, &[6, 6], NLCC_EPS).unwrap();
        assert!((l + 1.0).abs() < 1e-6, "{l}");
    }

    #[test]
    fn affine_invariance() {
        let img = checker(Dims::d2(12, 12));
        let aff = img.map(|v| 3.0 * v + 0.5);
        let (l, _) = nlcc_loss(&img, &aff, &[6, 6], NLCC_EPS).unwrap();
        assert!((l + 1.0).abs() < 1e-6, "{l}");
    }

    #[test]
    fn nlcc_shape_mismatch() {
        let a = Image::<f64>::zeros(Dims::d2(6, 6));
        let b = Image::<f64>::zeros(Dims::d2(6, 7));
        assert!(matches!(nlcc_loss(&a, &b, &[3, 3], NLCC_EPS), Err(RegError::Shape(_))));
    }

    #[test]
    fn smoothness_examples() {
        let c = DisplacementField::constant(Dims::d2(4, 5), &[1.5, -2.0], Scale::ONE);
        assert_eq!(smoothness_loss(&c).unwrap().0, 0.0);
        // one row of two points, x component [0, 3]
        let dims = Dims::d2(2, 2);
        let f = DisplacementField::new(dims, vec![0.0, 3.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0], Scale::ONE)
            .unwrap();
        // two rows each contribute 9, vertical differences vanish
        assert_eq!(smoothness_loss(&f).unwrap().0, 18.0);
        let line = DisplacementField::new(Dims::d2(2, 2), vec![0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], Scale::ONE)
            .unwrap();
        // x differences: row 0 -> 9, column 1 vertical -> 9
        assert_eq!(smoothness_loss(&line).unwrap().0, 18.0);
    }

    #[test]
    fn smoothness_single_difference() {
        // 3D grid with a single non-trivial pair along x: [0, 3]
        let dims = Dims::d3(2, 2, 2);
        let mut f = DisplacementField::<f64>::zeros(dims, Scale::ONE);
        f.component_mut(0)[dims.index(0, 0, 1)] = 3.0;
        // that point differs from its x, y and z neighbours
        assert_eq!(smoothness_loss(&f).unwrap().0, 27.0);
    }

    #[test]
    fn smoothness_rejects_thin_grid() {
        let f = DisplacementField::<f64>::zeros(Dims::d2(1, 5), Scale::ONE);
        assert!(matches!(smoothness_loss(&f), Err(RegError::InvalidField(_))));
    }

    #[test]
    fn mse_examples() {
        let dims = Dims::d2(1, 2);
        let a = Image::new(dims, vec![0.0, 1.0]).unwrap();
        let b = Image::new(dims, vec![1.0, 1.0]).unwrap();
        assert_eq!(mse(&a, &a, None).unwrap(), 0.0);
        assert_eq!(mse(&a, &b, None).unwrap(), 0.5);
        let m = Mask::new(dims, vec![false, true]).unwrap();
        assert_eq!(mse(&a, &b, Some(&m)).unwrap(), 0.0);
        let e = Mask::empty(dims);
        assert!(matches!(mse(&a, &b, Some(&e)), Err(RegError::EmptyRegion(_))));
    }

    #[test]
    fn report_total() {
        let r = LossReport::new(-0.5, 0.25, 10.0);
        assert_eq!(r.total, 2.0);
    }
}
