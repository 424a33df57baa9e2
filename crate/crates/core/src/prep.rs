//! Intensity normalisation and value-range masking.

use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::grid::{Image, Mask};
use crate::scalar::Real;

/// Normalisation and masking settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    /// Clip to `mean +- clip_sigmas * std` before rescaling.
    pub clip_sigmas: f64,
    /// Inclusive intensity bounds of the value-range mask.
    pub lower: f64,
    pub upper: f64,
    /// Disk radius (pixels) for dilating 2D masks; 0 disables dilation.
    pub dilation_radius: usize,
}

impl Default for NormSpec {
    fn default() -> Self {
        NormSpec { clip_sigmas: 6.0, lower: 0.005, upper: 0.995, dilation_radius: 16 }
    }
}

impl NormSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.lower)
            && (0.0..=1.0).contains(&self.upper)
            && self.lower < self.upper
            && self.clip_sigmas.is_finite()
            && self.clip_sigmas > 0.0;
        if ok {
            Ok(())
        } else {
            Err(RegError::InvalidArgument(format!("invalid normalisation spec {self:?}")))
        }
    }
}

/// Clips to `mean +- k * std`, then maps min..max linearly onto `[0, 1]`.
/// Constant images map to all zeros.
pub fn normalize_volume<T: Real>(img: &Image<T>, spec: &NormSpec) -> Image<T> {
    let n = img.dims().len() as f64;
    let mean = img.data().iter().map(|v| v.f64()).sum::<f64>() / n;
    let var = img.data().iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let (lo, hi) = (mean - spec.clip_sigmas * sd, mean + spec.clip_sigmas * sd);
    let clipped: Vec<f64> = img.data().iter().map(|v| v.f64().clamp(lo, hi)).collect();
    let min = clipped.iter().copied().fold(f64::INFINITY, f64::min);
    let max = clipped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let data = clipped
        .iter()
        .map(|&v| if range > 0.0 { T::c(((v - min) / range).clamp(0.0, 1.0)) } else { T::zero() })
        .collect();
    Image::from_raw(img.dims(), data)
}

/// Flags points with `lower <= value <= upper`; 2D masks are then dilated by
/// a disk of `dilation_radius`.
pub fn value_range_mask<T: Real>(img: &Image<T>, spec: &NormSpec) -> Mask {
    let flags = img
        .data()
        .iter()
        .map(|v| {
            let v = v.f64();
            v >= spec.lower && v <= spec.upper
        })
        .collect();
    let mask = Mask::new(img.dims(), flags).expect("same dims");
    if img.dims().ndim() == 2 && spec.dilation_radius > 0 {
        dilate_disk(&mask, spec.dilation_radius)
    } else {
        mask
    }
}

/// Integer offsets `(dy, dx)` with Euclidean norm at most `radius`.
pub fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                v.push((dy, dx));
            }
        }
    }
    v
}

/// Morphological dilation of a 2D mask with a disk structuring element.
///
/// 3D masks are returned unchanged.
pub fn dilate_disk(mask: &Mask, radius: usize) -> Mask {
    let dims = mask.dims();
    if dims.ndim() != 2 || radius == 0 {
        return mask.clone();
    }
    let [_, ny, nx] = dims.zyx();
    let offsets = disk_offsets(radius);
    let r = radius as isize;
    // per-row half-widths of the disk
    let half: Vec<isize> = (-r..=r)
        .map(|dy| offsets.iter().filter(|o| o.0 == dy).map(|o| o.1).max().unwrap_or(0))
        .collect();
    let mut out = vec![false; dims.len()];
    for y in 0..ny {
        for x in 0..nx {
            if !mask.flags()[dims.index(0, y, x)] {
                continue;
            }
            for (k, &hw) in half.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy < 0 || yy >= ny as isize {
                    continue;
                }
                let x0 = (x as isize - hw).max(0) as usize;
                let x1 = ((x as isize + hw) as usize).min(nx - 1);
                let row = dims.index(0, yy as usize, 0);
                out[row + x0..=row + x1].fill(true);
            }
        }
    }
    Mask::new(dims, out).expect("same dims")
}
