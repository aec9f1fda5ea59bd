//! Matrix multiply and convolution lowering (im2col / col2im).

use super::real::Real;

/// `C[m,n] (+)= A[m,k] * B[k,n]`, all row-major contiguous slices.
/// `accumulate = false` overwrites C, `true` adds into it.
pub fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same as [`matmul`] but with A transposed: `C[m,n] (+)= A^T * B`
/// where A is stored row-major as `[k, m]`.
pub fn matmul_at<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), k * m);
    let beta = if accumulate { T::one() } else { T::zero() };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same as [`matmul`] but with B transposed: `C[m,n] (+)= A * B^T`
/// where B is stored row-major as `[n, k]`.
pub fn matmul_bt<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(b.len(), n * k);
    let beta = if accumulate { T::one() } else { T::zero() };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a "same"-padded strided convolution: output spatial dims are
/// `ceil(input / stride)`, padding split with the extra cell at bottom/right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn same(in_h: usize, in_w: usize, kh: usize, kw: usize, stride: usize) -> Self {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + kh).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + kw).saturating_sub(in_w);
        ConvGeom {
            in_h,
            in_w,
            kh,
            kw,
            stride,
            out_h,
            out_w,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }
}

/// Unfolds one `[channels, in_h, in_w]` image into a
/// `[channels * kh * kw, out_h * out_w]` patch matrix (zero padding).
pub fn im2col<T: Real>(src: &[T], channels: usize, g: &ConvGeom, dst: &mut [T]) {
    let ohw = g.out_h * g.out_w;
    debug_assert_eq!(src.len(), channels * g.in_h * g.in_w);
    debug_assert_eq!(dst.len(), channels * g.kh * g.kw * ohw);
    for c in 0..channels {
        let plane = &src[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * ohw;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    let out_base = row + oy * g.out_w;
                    if iy < 0 || iy >= g.in_h as isize {
                        dst[out_base..out_base + g.out_w]
                            .iter_mut()
                            .for_each(|v| *v = T::zero());
                        continue;
                    }
                    let in_base = iy as usize * g.in_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        dst[out_base + ox] = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            plane[in_base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back into an image
/// buffer of `[channels, in_h, in_w]`. The destination must be pre-zeroed
/// by the caller when overwrite semantics are wanted.
pub fn col2im<T: Real>(cols: &[T], channels: usize, g: &ConvGeom, dst: &mut [T]) {
    let ohw = g.out_h * g.out_w;
    debug_assert_eq!(dst.len(), channels * g.in_h * g.in_w);
    debug_assert_eq!(cols.len(), channels * g.kh * g.kw * ohw);
    for c in 0..channels {
        let plane = &mut dst[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * ohw;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let in_base = iy as usize * g.in_w;
                    let out_base = row + oy * g.out_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            plane[in_base + ix as usize] += cols[out_base + ox];
                        }
                    }
                }
            }
        }
    }
}
