//! Convolution via im2col + GEMM, and the small tensor ops around it.
//!
//! Activations are `[channels, nz, ny, nx]` row-major with `nz == 1` for 2D.

use crate::scalar::Real;

/// Spatial geometry of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    /// Wrap out-of-range taps instead of reading zeros.
    pub periodic: bool,
}

impl ConvGeom {
    pub fn output(&self) -> [usize; 3] {
        let mut o = [0; 3];
        for a in 0..3 {
            o[a] = (self.input[a] + 2 * self.pad[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        o
    }

    pub fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn cols(&self) -> usize {
        self.output().iter().product()
    }

    /// Source index along one axis for output `o` and tap `k`, if any.
    #[inline]
    fn src(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let n = self.input[axis] as isize;
        let i = (o * self.stride[axis] + k) as isize - self.pad[axis] as isize;
        if (0..n).contains(&i) {
            Some(i as usize)
        } else if self.periodic {
            Some(i.rem_euclid(n) as usize)
        } else {
            None
        }
    }
}

/// Unfolds `input` into a `rows x cols` matrix.
pub(crate) fn im2col<T: Real>(input: &[T], g: &ConvGeom, cols: &mut Vec<T>) {
    let out = g.output();
    let p = g.cols();
    cols.clear();
    cols.resize(g.rows() * p, T::zero());
    let [nz, ny, nx] = g.input;
    let in_plane = nz * ny * nx;
    let [kd, kh, kw] = g.kernel;
    let mut r = 0;
    for ci in 0..g.cin {
        let src = &input[ci * in_plane..(ci + 1) * in_plane];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[r * p..(r + 1) * p];
                    let xs: Vec<Option<usize>> = (0..out[2]).map(|ox| g.src(2, ox, kx)).collect();
                    let mut c = 0;
                    for oz in 0..out[0] {
                        let iz = g.src(0, oz, kz);
                        for oy in 0..out[1] {
                            let iy = g.src(1, oy, ky);
                            if let (Some(iz), Some(iy)) = (iz, iy) {
                                let row = &src[(iz * ny + iy) * nx..(iz * ny + iy + 1) * nx];
                                for (d, xi) in dst[c..c + out[2]].iter_mut().zip(&xs) {
                                    if let Some(ix) = *xi {
                                        *d = row[ix];
                                    }
                                }
                            }
                            c += out[2];
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an input gradient.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, grad_in: &mut [T]) {
    let out = g.output();
    let p = g.cols();
    let [nz, ny, nx] = g.input;
    let in_plane = nz * ny * nx;
    let [kd, kh, kw] = g.kernel;
    let mut r = 0;
    for ci in 0..g.cin {
        let dst = &mut grad_in[ci * in_plane..(ci + 1) * in_plane];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[r * p..(r + 1) * p];
                    let xs: Vec<Option<usize>> = (0..out[2]).map(|ox| g.src(2, ox, kx)).collect();
                    let mut c = 0;
                    for oz in 0..out[0] {
                        let iz = g.src(0, oz, kz);
                        for oy in 0..out[1] {
                            let iy = g.src(1, oy, ky);
                            if let (Some(iz), Some(iy)) = (iz, iy) {
                                let row = &mut dst[(iz * ny + iy) * nx..(iz * ny + iy + 1) * nx];
                                for (s, xi) in src[c..c + out[2]].iter().zip(&xs) {
                                    if let Some(ix) = *xi {
                                        row[ix] += *s;
                                    }
                                }
                            }
                            c += out[2];
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// `out = W * im2col(input) + b`, weights `[cout, rows]`.
pub(crate) fn conv_forward<T: Real>(
    input: &[T],
    g: &ConvGeom,
    weight: &[T],
    bias: &[T],
    scratch: &mut Vec<T>,
) -> Vec<T> {
    let cout = bias.len();
    let k = g.rows();
    let p = g.cols();
    im2col(input, g, scratch);
    let mut out = vec![T::zero(); cout * p];
    for (c, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias[c]);
    }
    T::gemm(cout, k, p, T::one(), weight, k as isize, 1, scratch, p as isize, 1, T::one(), &mut out, p as isize, 1);
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `want_input` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    input: &[T],
    g: &ConvGeom,
    weight: &[T],
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: &mut [T],
    want_input: bool,
    scratch: &mut Vec<T>,
) -> Option<Vec<T>> {
    let cout = grad_b.len();
    let k = g.rows();
    let p = g.cols();
    for (c, row) in grad_out.chunks(p).enumerate() {
        grad_b[c] += row.iter().fold(T::zero(), |a, &b| a + b);
    }
    im2col(input, g, scratch);
    // dW += dOut * cols^T
    T::gemm(cout, p, k, T::one(), grad_out, p as isize, 1, scratch, 1, p as isize, T::one(), grad_w, k as isize, 1);
    if !want_input {
        return None;
    }
    // dcols = W^T * dOut, reusing the scratch buffer
    T::gemm(k, cout, p, T::one(), weight, 1, k as isize, grad_out, p as isize, 1, T::zero(), scratch, p as isize, 1);
    let mut grad_in = vec![T::zero(); input.len()];
    col2im(scratch, g, &mut grad_in);
    Some(grad_in)
}

/// Nearest-neighbour upsampling by 2 along the axes flagged in `active`.
pub(crate) fn upsample2<T: Real>(input: &[T], c: usize, dims: [usize; 3], active: [bool; 3]) -> (Vec<T>, [usize; 3]) {
    let f = active.map(|a| if a { 2 } else { 1 });
    let out_dims = [dims[0] * f[0], dims[1] * f[1], dims[2] * f[2]];
    let in_plane: usize = dims.iter().product();
    let out_plane: usize = out_dims.iter().product();
    let mut out = vec![T::zero(); c * out_plane];
    for ch in 0..c {
        let src = &input[ch * in_plane..(ch + 1) * in_plane];
        let dst = &mut out[ch * out_plane..(ch + 1) * out_plane];
        for z in 0..out_dims[0] {
            for y in 0..out_dims[1] {
                let srow = ((z / f[0]) * dims[1] + y / f[1]) * dims[2];
                let drow = (z * out_dims[1] + y) * out_dims[2];
                for x in 0..out_dims[2] {
                    dst[drow + x] = src[srow + x / f[2]];
                }
            }
        }
    }
    (out, out_dims)
}

/// Adjoint of [`upsample2`]: block sums.
pub(crate) fn upsample2_backward<T: Real>(grad: &[T], c: usize, dims: [usize; 3], active: [bool; 3]) -> Vec<T> {
    let f = active.map(|a| if a { 2 } else { 1 });
    let out_dims = [dims[0] * f[0], dims[1] * f[1], dims[2] * f[2]];
    let in_plane: usize = dims.iter().product();
    let out_plane: usize = out_dims.iter().product();
    let mut res = vec![T::zero(); c * in_plane];
    for ch in 0..c {
        let src = &grad[ch * out_plane..(ch + 1) * out_plane];
        let dst = &mut res[ch * in_plane..(ch + 1) * in_plane];
        for z in 0..out_dims[0] {
            for y in 0..out_dims[1] {
                let drow = ((z / f[0]) * dims[1] + y / f[1]) * dims[2];
                let srow = (z * out_dims[1] + y) * out_dims[2];
                for x in 0..out_dims[2] {
                    dst[drow + x / f[2]] += src[srow + x];
                }
            }
        }
    }
    res
}

pub(crate) fn leaky_relu<T: Real>(v: &mut [T], slope: T) {
    for x in v {
        if *x < T::zero() {
            *x *= slope;
        }
    }
}

/// Multiplies `grad` by the activation derivative, read off the activation output.
pub(crate) fn leaky_relu_backward<T: Real>(grad: &mut [T], output: &[T], slope: T) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= T::zero() {
            *g *= slope;
        }
    }
}

/// Edge-replicating pad at the high end of each axis.
pub(crate) fn pad_edge<T: Real>(input: &[T], c: usize, dims: [usize; 3], target: [usize; 3]) -> Vec<T> {
    if dims == target {
        return input.to_vec();
    }
    let in_plane: usize = dims.iter().product();
    let out_plane: usize = target.iter().product();
    let mut out = vec![T::zero(); c * out_plane];
    for ch in 0..c {
        for z in 0..target[0] {
            let sz = z.min(dims[0] - 1);
            for y in 0..target[1] {
                let sy = y.min(dims[1] - 1);
                for x in 0..target[2] {
                    let sx = x.min(dims[2] - 1);
                    out[ch * out_plane + (z * target[1] + y) * target[2] + x] =
                        input[ch * in_plane + (sz * dims[1] + sy) * dims[2] + sx];
                }
            }
        }
    }
    out
}

/// Keeps the low corner `target` of each channel.
pub(crate) fn crop<T: Real>(input: &[T], c: usize, dims: [usize; 3], target: [usize; 3]) -> Vec<T> {
    if dims == target {
        return input.to_vec();
    }
    let in_plane: usize = dims.iter().product();
    let mut out = Vec::with_capacity(c * target.iter().product::<usize>());
    for ch in 0..c {
        for z in 0..target[0] {
            for y in 0..target[1] {
                let base = ch * in_plane + (z * dims[1] + y) * dims[2];
                out.extend_from_slice(&input[base..base + target[2]]);
            }
        }
    }
    out
}

/// Adjoint of [`crop`]: zero-extends.
pub(crate) fn uncrop<T: Real>(input: &[T], c: usize, dims: [usize; 3], target: [usize; 3]) -> Vec<T> {
    if dims == target {
        return input.to_vec();
    }
    let out_plane: usize = dims.iter().product();
    let mut out = vec![T::zero(); c * out_plane];
    let mut k = 0;
    for ch in 0..c {
        for z in 0..target[0] {
            for y in 0..target[1] {
                let base = ch * out_plane + (z * dims[1] + y) * dims[2];
                out[base..base + target[2]].copy_from_slice(&input[k..k + target[2]]);
                k += target[2];
            }
        }
    }
    out
}
