//! Spatial transformer: differentiable warping of a moving image.

use crate::error::{RegError, Result};
use crate::grid::{DisplacementField, Image, Stencil};
use crate::scalar::Real;

fn displaced_position<T: Real>(field: &DisplacementField<T>, idx: usize) -> [T; 3] {
    let [z, y, x] = field.dims().coords(idx);
    let u = field.vector(idx);
    [
        T::c(z as f64) + u[2],
        T::c(y as f64) + u[1],
        T::c(x as f64) + u[0],
    ]
}

fn check_field<T: Real>(moving: &Image<T>, field: &DisplacementField<T>) -> Result<()> {
    if moving.dims().ndim() != field.ndim() {
        return Err(RegError::Shape(format!(
            "moving image is {}D but field is {}D",
            moving.dims().ndim(),
            field.ndim()
        )));
    }
    if let Some(i) = field.data().iter().position(|v| !v.is_finite()) {
        return Err(RegError::InvalidField(format!("non-finite displacement at index {i}")));
    }
    Ok(())
}

/// Samples `moving` at `p + u(p)` for every point `p` of the field's grid.
///
/// Sampling is multilinear and border-clamped. The output lives on the field
/// grid, which may differ from the moving image's grid.
pub fn warp<T: Real>(moving: &Image<T>, field: &DisplacementField<T>) -> Result<Image<T>> {
    check_field(moving, field)?;
    let md = moving.dims();
    let data = (0..field.dims().len())
        .map(|idx| Stencil::new(md, displaced_position(field, idx)).value(moving.data()))
        .collect();
    Ok(Image::from_raw(field.dims(), data))
}

/// Gradient of a scalar loss with respect to the displacement, given the
/// loss gradient `upstream` with respect to the warped image.
///
/// Along axes where the sample position was clamped the derivative is zero.
pub fn warp_backward<T: Real>(
    moving: &Image<T>,
    field: &DisplacementField<T>,
    upstream: &Image<T>,
) -> Result<DisplacementField<T>> {
    check_field(moving, field)?;
    if upstream.dims() != field.dims() {
        return Err(RegError::Shape(format!(
            "upstream gradient {} does not match field {}",
            upstream.dims(),
            field.dims()
        )));
    }
    let md = moving.dims();
    let n = field.dims().len();
    let ndim = field.ndim();
    let mut grad = vec![T::zero(); n * ndim];
    for idx in 0..n {
        let g = upstream.data()[idx];
        if g.is_zero() {
            continue;
        }
        let (_, d) = Stencil::new(md, displaced_position(field, idx)).value_grad(moving.data());
        // components are (x, y, z); stencil derivatives are (z, y, x)
        for c in 0..ndim {
            grad[c * n + idx] = g * d[2 - c];
        }
    }
    Ok(DisplacementField::from_raw(field.dims(), grad, field.scale()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, Scale};

    #[test]
    fn zero_field_is_identity() {
        let dims = Dims::d2(3, 5);
        let img = Image::from_fn(dims, |[_, y, x]| (x * 7 + y * 3) as f64 * 0.01 - 0.0);
        let out = warp(&img, &DisplacementField::zeros(dims, Scale::ONE)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn shift_with_edge_clamp() {
        let dims = Dims::d2(1, 4);
        let img = Image::new(dims, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let f = DisplacementField::constant(dims, &[1.0, 0.0], Scale::ONE);
        assert_eq!(warp(&img, &f).unwrap().data(), &[1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn backward_zero_upstream_and_ramp() {
        let dims = Dims::d2(4, 6);
        let ramp = Image::from_fn(dims, |[_, _, x]| x as f64);
        let f = DisplacementField::constant(dims, &[0.3, 0.2], Scale::ONE);
        let g0 = warp_backward(&ramp, &f, &Image::zeros(dims)).unwrap();
        assert!(g0.is_zero());
        let mut up = Image::zeros(dims);
        up.data_mut()[dims.index(0, 1, 2)] = 1.0;
        let g = warp_backward(&ramp, &f, &up).unwrap();
        let i = dims.index(0, 1, 2);
        assert!((g.component(0)[i] - 1.0).abs() < 1e-12);
        assert!(g.component(1)[i].abs() < 1e-12);
    }

    #[test]
    fn backward_shape_mismatch() {
        let dims = Dims::d2(4, 6);
        let img = Image::<f64>::zeros(dims);
        let f = DisplacementField::zeros(dims, Scale::ONE);
        let r = warp_backward(&img, &f, &Image::zeros(Dims::d2(4, 5)));
        assert!(matches!(r, Err(RegError::Shape(_))));
    }

    #[test]
    fn non_finite_field_rejected() {
        let dims = Dims::d2(2, 2);
        let img = Image::<f64>::zeros(dims);
        let mut f = DisplacementField::zeros(dims, Scale::ONE);
        f.data_mut()[1] = f64::INFINITY;
        assert!(matches!(warp(&img, &f), Err(RegError::InvalidField(_))));
    }
}
