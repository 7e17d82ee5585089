//! Layer kernels on HWC buffers. Convolutions are lowered to GEMM through
//! im2col; every op has a matching backward that accumulates into caller
//! buffers.

use super::Real;

/// `C (m×n) = beta·C + A·B` where `A` is `m×k` and `B` is `k×n`, both
/// row-major, optionally read transposed.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], a_t: bool, b: &[T], b_t: bool, c: &mut [T], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are asserted.
    unsafe {
        T::gemm(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Geometry of a square-kernel convolution with `pad = k / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_size(&self) -> (usize, usize) {
        let p = 2 * self.pad();
        ((self.h + p - self.k) / self.stride + 1, (self.w + p - self.k) / self.stride + 1)
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }
}

/// Patch matrix `[ho·wo, k·k·cin]`, zero outside the input.
pub fn im2col<T: Real>(x: &[T], s: &ConvShape) -> Vec<T> {
    let (ho, wo) = s.out_size();
    let plen = s.patch_len();
    let mut p = vec![T::zero(); ho * wo * plen];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut p[(oy * wo + ox) * plen..][..plen];
            for (ky, iy, kx0, ix0, n) in taps(s, oy, ox) {
                let src = (iy * s.w + ix0) * s.cin;
                let dst = (ky * s.k + kx0) * s.cin;
                row[dst..dst + n * s.cin].copy_from_slice(&x[src..src + n * s.cin]);
            }
        }
    }
    p
}

/// In-bounds kernel rows of output pixel `(oy, ox)`: `(ky, iy, kx0, ix0, n)`,
/// the `n` taps from `kx0` reading consecutive input columns from `ix0`.
fn taps(s: &ConvShape, oy: usize, ox: usize) -> impl Iterator<Item = (usize, usize, usize, usize, usize)> + '_ {
    let pad = s.pad() as isize;
    let x0 = (ox * s.stride) as isize - pad;
    let kx0 = (-x0).max(0) as usize;
    let kx1 = (s.w as isize - x0).clamp(0, s.k as isize) as usize;
    (0..s.k).filter_map(move |ky| {
        let iy = (oy * s.stride + ky) as isize - pad;
        (iy >= 0 && iy < s.h as isize && kx1 > kx0).then(|| (ky, iy as usize, kx0, (x0 + kx0 as isize) as usize, kx1 - kx0))
    })
}

/// Scatter-adds patch gradients back onto the input gradient.
pub fn col2im<T: Real>(dp: &[T], s: &ConvShape, dx: &mut [T]) {
    let (ho, wo) = s.out_size();
    let plen = s.patch_len();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &dp[(oy * wo + ox) * plen..][..plen];
            for (ky, iy, kx0, ix0, n) in taps(s, oy, ox) {
                let dst = (iy * s.w + ix0) * s.cin;
                let src = (ky * s.k + kx0) * s.cin;
                for (d, v) in dx[dst..dst + n * s.cin].iter_mut().zip(&row[src..src + n * s.cin]) {
                    *d += *v;
                }
            }
        }
    }
}

/// Returns `(output, patches)`; the kernel is `[k, k, cin, cout]`.
pub fn conv_forward<T: Real>(x: &[T], s: &ConvShape, kernel: &[T], bias: &[T]) -> (Vec<T>, Vec<T>) {
    let (ho, wo) = s.out_size();
    let p = im2col(x, s);
    let mut y = vec![T::zero(); ho * wo * s.cout];
    for row in y.chunks_exact_mut(s.cout) {
        row.copy_from_slice(bias);
    }
    matmul(ho * wo, s.patch_len(), s.cout, &p, false, kernel, false, &mut y, true);
    (y, p)
}

/// Accumulates kernel/bias gradients; returns the input gradient if asked.
pub fn conv_backward<T: Real>(
    dy: &[T],
    patches: &[T],
    s: &ConvShape,
    kernel: &[T],
    dkernel: &mut [T],
    dbias: &mut [T],
    want_dx: bool,
) -> Option<Vec<T>> {
    let (ho, wo) = s.out_size();
    let rows = ho * wo;
    matmul(s.patch_len(), rows, s.cout, patches, true, dy, false, dkernel, true);
    for row in dy.chunks_exact(s.cout) {
        for (b, g) in dbias.iter_mut().zip(row) {
            *b += *g;
        }
    }
    if !want_dx {
        return None;
    }
    let mut dp = vec![T::zero(); rows * s.patch_len()];
    matmul(rows, s.cout, s.patch_len(), dy, false, kernel, true, &mut dp, false);
    let mut dx = vec![T::zero(); s.h * s.w * s.cin];
    col2im(&dp, s, &mut dx);
    Some(dx)
}

/// `y = xᵀ·W + b` with `W` stored `[in, out]`.
pub fn linear_forward<T: Real>(x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut y = b.to_vec();
    matmul(1, x.len(), b.len(), x, false, w, false, &mut y, true);
    y
}

pub fn linear_backward<T: Real>(dy: &[T], x: &[T], w: &[T], dw: &mut [T], db: &mut [T]) -> Vec<T> {
    matmul(x.len(), 1, dy.len(), x, false, dy, false, dw, true);
    for (b, g) in db.iter_mut().zip(dy) {
        *b += *g;
    }
    let mut dx = vec![T::zero(); x.len()];
    matmul(1, dy.len(), x.len(), dy, false, w, true, &mut dx, false);
    dx
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` where the ReLU output was not positive.
pub fn relu_backward_inplace<T: Real>(dy: &mut [T], y: &[T]) {
    for (g, v) in dy.iter_mut().zip(y) {
        if *v <= T::zero() {
            *g = T::zero();
        }
    }
}

fn source_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    dst * src_len / dst_len
}

/// Nearest-neighbour resize of an HWC map.
pub fn resize_nearest<T: Real>(x: &[T], h: usize, w: usize, c: usize, ho: usize, wo: usize) -> Vec<T> {
    let mut y = vec![T::zero(); ho * wo * c];
    for oy in 0..ho {
        let iy = source_index(oy, h, ho);
        for ox in 0..wo {
            let ix = source_index(ox, w, wo);
            let src = (iy * w + ix) * c;
            y[(oy * wo + ox) * c..][..c].copy_from_slice(&x[src..src + c]);
        }
    }
    y
}

pub fn resize_nearest_backward<T: Real>(dy: &[T], h: usize, w: usize, c: usize, ho: usize, wo: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); h * w * c];
    for oy in 0..ho {
        let iy = source_index(oy, h, ho);
        for ox in 0..wo {
            let ix = source_index(ox, w, wo);
            let src = (oy * wo + ox) * c;
            let dst = (iy * w + ix) * c;
            for k in 0..c {
                dx[dst + k] += dy[src + k];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], s: &ConvShape, kernel: &[f64], bias: &[f64]) -> Vec<f64> {
        let (ho, wo) = s.out_size();
        let pad = s.pad() as isize;
        let mut y = vec![0.0; ho * wo * s.cout];
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..s.cout {
                    let mut acc = bias[co];
                    for ky in 0..s.k {
                        for kx in 0..s.k {
                            let iy = (oy * s.stride + ky) as isize - pad;
                            let ix = (ox * s.stride + kx) as isize - pad;
                            if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                continue;
                            }
                            for ci in 0..s.cin {
                                acc += x[(iy as usize * s.w + ix as usize) * s.cin + ci]
                                    * kernel[((ky * s.k + kx) * s.cin + ci) * s.cout + co];
                            }
                        }
                    }
                    y[(oy * wo + ox) * s.cout + co] = acc;
                }
            }
        }
        y
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) * scale).collect()
    }

    #[test]
    fn matmul_transposes() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3×2
        let mut c = [0.0; 4];
        matmul(2, 3, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // aᵀ (3×2) · a (2×3)
        let mut d = [0.0; 9];
        matmul(3, 2, 3, &a, true, &a, false, &mut d, false);
        assert_eq!(d, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
        let mut e = [1.0; 4];
        matmul(2, 3, 2, &a, false, &b, false, &mut e, true);
        assert_eq!(e, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (h, w, stride) in [(8, 8, 2), (7, 5, 2), (6, 6, 1), (1, 1, 2)] {
            let s = ConvShape {
                h,
                w,
                cin: 3,
                cout: 4,
                k: 3,
                stride,
            };
            let x = ramp(h * w * 3, 0.1);
            let k = ramp(s.patch_len() * 4, 0.05);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let (y, _) = conv_forward(&x, &s, &k, &b);
            let yn = naive_conv(&x, &s, &k, &b);
            for (a, b) in y.iter().zip(&yn) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_1x1_stride2_subsamples_top_left_grid() {
        let s = ConvShape {
            h: 4,
            w: 4,
            cin: 1,
            cout: 1,
            k: 1,
            stride: 2,
        };
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let (y, _) = conv_forward(&x, &s, &[1.0], &[0.0]);
        assert_eq!(y, vec![0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn upsample_2x2_to_4x4() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = resize_nearest(&x, 2, 2, 1, 4, 4);
        assert_eq!(
            y,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let dx = resize_nearest_backward(&vec![1.0; 16], 2, 2, 1, 4, 4);
        assert_eq!(dx, vec![4.0; 4]);
    }

    #[test]
    fn conv_backward_matches_adjoint() {
        // <dy, conv(x)> is linear in x, so dx must satisfy <dy, J·v> = <dxᵀ, v>.
        let s = ConvShape {
            h: 5,
            w: 6,
            cin: 2,
            cout: 3,
            k: 3,
            stride: 2,
        };
        let k = ramp(s.patch_len() * 3, 0.07);
        let zero = vec![0.0; 3];
        let v = ramp(5 * 6 * 2, 0.3);
        let (yv, p) = conv_forward(&v, &s, &k, &zero);
        let dy = ramp(yv.len(), 0.11);
        let mut dk = vec![0.0; k.len()];
        let mut db = vec![0.0; 3];
        let dx = conv_backward(&dy, &p, &s, &k, &mut dk, &mut db, true).unwrap();
        let lhs: f64 = dy.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let rhs: f64 = dx.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // Same identity for the kernel.
        let rhs_k: f64 = dk.iter().zip(&k).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_k).abs() < 1e-10);
    }
}
