//! Raw numeric kernels behind the tape ops: im2col convolution, its
//! transpose, and dense matrix products. All matrices are row-major; heavy
//! lifting goes through `Scalar::gemm` so f32 and f64 share one code path.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output spatial extent of a convolution along one axis, floor semantics:
/// o = floor((extent + 2*pad - kernel) / stride) + 1.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let padded = extent + 2 * pad;
    assert!(padded >= kernel, "kernel {kernel} larger than padded extent {padded}");
    (padded - kernel) / stride + 1
}

/// Output spatial extent of a transposed convolution along one axis:
/// o = (extent - 1) * stride + kernel - 2*pad + output_padding.
pub fn convt_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize, outpad: usize) -> usize {
    assert!(outpad < stride.max(1) + kernel, "output padding {outpad} too large");
    (extent - 1) * stride + kernel + outpad - 2 * pad
}

/// Unpacks one image [C,H,W] into a patch matrix col[C*KH*KW, OH*OW] with
/// zero fill outside the padded input.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst_base = row * oh * ow;
                for oi in 0..oh {
                    let yi = (oi * sh + ki) as isize - ph as isize;
                    let dst = &mut col[dst_base + oi * ow..dst_base + (oi + 1) * ow];
                    if yi < 0 || yi >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[yi as usize * w..(yi as usize + 1) * w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let xj = (oj * sw + kj) as isize - pw as isize;
                        *d = if xj < 0 || xj >= w as isize {
                            T::zero()
                        } else {
                            src_row[xj as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto one image [C,H,W]; the adjoint of
/// `im2col`.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src_base = row * oh * ow;
                for oi in 0..oh {
                    let yi = (oi * sh + ki) as isize - ph as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[yi as usize * w..(yi as usize + 1) * w];
                    let src = &col[src_base + oi * ow..src_base + (oi + 1) * ow];
                    for (oj, &s) in src.iter().enumerate() {
                        let xj = (oj * sw + kj) as isize - pw as isize;
                        if xj >= 0 && xj < w as isize {
                            dst_row[xj as usize] += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn grow<T: Scalar>(scratch: &mut Vec<T>, n: usize) {
    if scratch.len() < n {
        scratch.resize(n, T::zero());
    }
}

/// Convolution forward: x [N,C,H,W], k [F,C,KH,KW] -> [N,F,OH,OW].
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
    scratch: &mut Vec<T>,
) -> Tensor<T> {
    let (n, c, h, w) = shape4(x, "conv2d input");
    let (f, kc, kh, kw) = shape4(k, "conv2d kernel");
    assert_eq!(c, kc, "conv2d: input has {c} channels, kernel expects {kc}");
    let oh = conv_out_extent(h, kh, stride.0, pad.0);
    let ow = conv_out_extent(w, kw, stride.1, pad.1);
    let ck = c * kh * kw;
    let cols = oh * ow;
    grow(scratch, ck * cols);
    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    for ni in 0..n {
        let xi = &x.data()[ni * c * h * w..(ni + 1) * c * h * w];
        im2col(xi, c, h, w, kh, kw, stride, pad, oh, ow, &mut scratch[..ck * cols]);
        let oi = &mut out.data_mut()[ni * f * cols..(ni + 1) * f * cols];
        T::gemm(f, ck, cols, T::one(), k.data(), &scratch[..ck * cols], T::zero(), oi);
    }
    out
}

/// Convolution backward. Returns (dx, dk); dx is skipped when `need_dx` is
/// false (input is a leaf that takes no gradient).
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    dy: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
    need_dx: bool,
    scratch: &mut Vec<T>,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let (n, c, h, w) = shape4(x, "conv2d input");
    let (f, _, kh, kw) = shape4(k, "conv2d kernel");
    let oh = dy.shape()[2];
    let ow = dy.shape()[3];
    let ck = c * kh * kw;
    let cols = oh * ow;
    grow(scratch, 2 * ck * cols);
    let (col, dcol) = scratch[..2 * ck * cols].split_at_mut(ck * cols);
    let mut dk = Tensor::zeros(k.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for ni in 0..n {
        let xi = &x.data()[ni * c * h * w..(ni + 1) * c * h * w];
        let dyi = &dy.data()[ni * f * cols..(ni + 1) * f * cols];
        // dk += dy_i * col_i^T
        im2col(xi, c, h, w, kh, kw, stride, pad, oh, ow, col);
        gemm_nt(f, cols, ck, dyi, col, dk.data_mut());
        if let Some(dx) = dx.as_mut() {
            // dcol = k^T * dy_i, scattered back onto the input.
            gemm_tn(ck, f, cols, k.data(), dyi, dcol, false);
            let dxi = &mut dx.data_mut()[ni * c * h * w..(ni + 1) * c * h * w];
            col2im_add(dcol, c, h, w, kh, kw, stride, pad, oh, ow, dxi);
        }
    }
    (dx, dk)
}

/// Transposed convolution forward: x [N,F,H,W], k [F,C,KH,KW] ->
/// [N,C,OH,OW]. This is exactly the adjoint of `conv2d_forward` with the
/// same kernel, plus `outpad` to disambiguate strided output extents.
pub fn convt2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
    outpad: (usize, usize),
    scratch: &mut Vec<T>,
) -> Tensor<T> {
    let (n, f, h, w) = shape4(x, "conv2d_transpose input");
    let (kf, c, kh, kw) = shape4(k, "conv2d_transpose kernel");
    assert_eq!(f, kf, "conv2d_transpose: input has {f} channels, kernel expects {kf}");
    let oh = convt_out_extent(h, kh, stride.0, pad.0, outpad.0);
    let ow = convt_out_extent(w, kw, stride.1, pad.1, outpad.1);
    assert_eq!(conv_out_extent(oh, kh, stride.0, pad.0), h, "inconsistent transpose geometry");
    assert_eq!(conv_out_extent(ow, kw, stride.1, pad.1), w, "inconsistent transpose geometry");
    let ck = c * kh * kw;
    let cols = h * w;
    grow(scratch, ck * cols);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for ni in 0..n {
        let xi = &x.data()[ni * f * cols..(ni + 1) * f * cols];
        gemm_tn(ck, f, cols, k.data(), xi, &mut scratch[..ck * cols], false);
        let oi = &mut out.data_mut()[ni * c * oh * ow..(ni + 1) * c * oh * ow];
        col2im_add(&scratch[..ck * cols], c, oh, ow, kh, kw, stride, pad, h, w, oi);
    }
    out
}

/// Transposed convolution backward. Returns (dx, dk).
#[allow(clippy::too_many_arguments)]
pub fn convt2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    dy: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
    need_dx: bool,
    scratch: &mut Vec<T>,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let (n, f, h, w) = shape4(x, "conv2d_transpose input");
    let (_, c, kh, kw) = shape4(k, "conv2d_transpose kernel");
    let oh = dy.shape()[2];
    let ow = dy.shape()[3];
    let ck = c * kh * kw;
    let cols = h * w;
    grow(scratch, ck * cols);
    let col = &mut scratch[..ck * cols];
    let mut dk = Tensor::zeros(k.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for ni in 0..n {
        let dyi = &dy.data()[ni * c * oh * ow..(ni + 1) * c * oh * ow];
        im2col(dyi, c, oh, ow, kh, kw, stride, pad, h, w, col);
        let xi = &x.data()[ni * f * cols..(ni + 1) * f * cols];
        // dk += x_i * col(dy_i)^T
        gemm_nt(f, cols, ck, xi, col, dk.data_mut());
        if let Some(dx) = dx.as_mut() {
            // dx_i = k * col(dy_i): the forward convolution applied to dy.
            let dxi = &mut dx.data_mut()[ni * f * cols..(ni + 1) * f * cols];
            T::gemm(f, ck, cols, T::one(), k.data(), col, T::zero(), dxi);
        }
    }
    (dx, dk)
}

/// C[m,n] += A[m,k] * B[n,k]^T, all row-major.
fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    // B is [n,k] row-major; read it as [k,n] by swapping its strides.
    gemm_strided(m, k, n, a, k as isize, 1, b, 1, k as isize, T::one(), c);
}

/// C[m,n] = (or +=) A[k,m]^T * B[k,n], all row-major.
fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    gemm_strided(m, k, n, a, 1, m as isize, b, n as isize, 1, beta, c);
}

#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    // matrixmultiply exposes strided gemm only per concrete type; route
    // through f64 copies would be wasteful, so specialize via TypeId.
    use std::any::TypeId;
    if TypeId::of::<T>() == TypeId::of::<f32>() {
        unsafe {
            matrixmultiply::sgemm(
                m, k, n,
                1.0,
                a.as_ptr() as *const f32, rsa, csa,
                b.as_ptr() as *const f32, rsb, csb,
                beta.as_f64() as f32,
                c.as_mut_ptr() as *mut f32, n as isize, 1,
            );
        }
    } else {
        unsafe {
            matrixmultiply::dgemm(
                m, k, n,
                1.0,
                a.as_ptr() as *const f64, rsa, csa,
                b.as_ptr() as *const f64, rsb, csb,
                beta.as_f64(),
                c.as_mut_ptr() as *mut f64, n as isize, 1,
            );
        }
    }
}

/// Dense forward: x [N,D] * w [D,K] (+ bias [K]) -> [N,K].
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
    let (n, d) = shape2(x, "dense input");
    let (wd, k) = shape2(w, "dense weight");
    assert_eq!(d, wd, "dense: input width {d} vs weight rows {wd}");
    let mut out = Tensor::zeros(&[n, k]);
    T::gemm(n, d, k, T::one(), x.data(), w.data(), T::zero(), out.data_mut());
    if let Some(b) = bias {
        assert_eq!(b.numel(), k, "dense bias length");
        for row in out.data_mut().chunks_exact_mut(k) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    out
}

/// Dense backward. Returns (dx, dw, db).
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
    need_db: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Option<Tensor<T>>) {
    let (n, d) = shape2(x, "dense input");
    let (_, k) = shape2(w, "dense weight");
    let mut dw = Tensor::zeros(w.shape());
    gemm_tn(d, n, k, x.data(), dy.data(), dw.data_mut(), false);
    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        gemm_nt(n, k, d, dy.data(), w.data(), dx.data_mut());
        dx
    });
    let db = need_db.then(|| {
        let mut db = Tensor::zeros(&[k]);
        for row in dy.data().chunks_exact(k) {
            for (b, &g) in db.data_mut().iter_mut().zip(row) {
                *b += g;
            }
        }
        db
    });
    (dx, dw, db)
}

pub fn shape2<T: Scalar>(t: &Tensor<T>, what: &str) -> (usize, usize) {
    assert_eq!(t.rank(), 2, "{what}: expected rank 2, got shape {:?}", t.shape());
    (t.shape()[0], t.shape()[1])
}

pub fn shape4<T: Scalar>(t: &Tensor<T>, what: &str) -> (usize, usize, usize, usize) {
    assert_eq!(t.rank(), 4, "{what}: expected rank 4, got shape {:?}", t.shape());
    (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution for cross-checking the im2col path.
    fn conv_naive(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Tensor<f64> {
        let (n, c, h, w) = shape4(x, "x");
        let (f, _, kh, kw) = shape4(k, "k");
        let oh = conv_out_extent(h, kh, stride.0, pad.0);
        let ow = conv_out_extent(w, kw, stride.1, pad.1);
        let mut out = Tensor::zeros(&[n, f, oh, ow]);
        for ni in 0..n {
            for fi in 0..f {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let yi = (oi * stride.0 + ki) as isize - pad.0 as isize;
                                    let xj = (oj * stride.1 + kj) as isize - pad.1 as isize;
                                    if yi >= 0 && yi < h as isize && xj >= 0 && xj < w as isize {
                                        acc += x[&[ni, ci, yi as usize, xj as usize]]
                                            * k[&[fi, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((ni * f + fi) * oh + oi) * ow + oj] = acc;
                    }
                }
            }
        }
        out
    }

    fn filled(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        // 1x1 kernel with unit weight, stride 1: output equals input.
        let x = filled(&[1, 1, 4, 5], |i| i as f64 * 0.5 - 3.0);
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d_forward(&x, &k, (1, 1), (0, 0), &mut Vec::new());
        assert_eq!(y.shape(), &[1, 1, 4, 5]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_averaging_kernel_on_constant_input_is_constant() {
        let x = Tensor::full(&[1, 1, 6, 6], 2.0f64);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let y = conv2d_forward(&x, &k, (1, 1), (0, 0), &mut Vec::new());
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        for &v in y.data() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let cases = [
            ((2usize, 3usize, 9usize, 11usize), (4usize, 3usize, 3usize, 3usize), (1, 1), (0, 0)),
            ((1, 2, 10, 12), (3, 2, 5, 5), (2, 2), (0, 0)),
            ((2, 1, 8, 8), (2, 1, 3, 3), (2, 2), (1, 1)),
            ((1, 3, 7, 9), (2, 3, 3, 5), (1, 2), (2, 1)),
        ];
        for ((n, c, h, w), (f, kc, kh, kw), stride, pad) in cases {
            let x = filled(&[n, c, h, w], |i| ((i * 31 % 17) as f64 - 8.0) * 0.13);
            let k = filled(&[f, kc, kh, kw], |i| ((i * 13 % 11) as f64 - 5.0) * 0.21);
            let fast = conv2d_forward(&x, &k, stride, pad, &mut Vec::new());
            let slow = conv_naive(&x, &k, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv2d_transpose_is_adjoint_of_conv2d() {
        // <conv(x), y> == <x, convT(y)> for matching geometry.
        let stride = (2, 2);
        let pad = (0, 0);
        let x = filled(&[1, 2, 9, 10], |i| ((i * 7 % 23) as f64 - 11.0) * 0.07);
        let k = filled(&[3, 2, 3, 3], |i| ((i * 5 % 13) as f64 - 6.0) * 0.11);
        let cx = conv2d_forward(&x, &k, stride, pad, &mut Vec::new());
        let y = filled(cx.shape(), |i| ((i * 11 % 19) as f64 - 9.0) * 0.05);
        // Output padding chosen so convT(y) recovers the exact input extent.
        let oh = x.shape()[2];
        let ow = x.shape()[3];
        let base_h = convt_out_extent(cx.shape()[2], 3, stride.0, pad.0, 0);
        let base_w = convt_out_extent(cx.shape()[3], 3, stride.1, pad.1, 0);
        let ty = convt2d_forward(&y, &k, stride, pad, (oh - base_h, ow - base_w), &mut Vec::new());
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let stride = (2, 1);
        let pad = (1, 0);
        let x = filled(&[2, 2, 6, 7], |i| ((i * 29 % 13) as f64 - 6.0) * 0.09);
        let k = filled(&[3, 2, 3, 3], |i| ((i * 23 % 17) as f64 - 8.0) * 0.06);
        // Loss = weighted sum of outputs, weights fixed.
        let weight = |i: usize| ((i * 41 % 7) as f64 - 3.0) * 0.5;
        let loss = |x: &Tensor<f64>, k: &Tensor<f64>| -> f64 {
            let y = conv2d_forward(x, k, stride, pad, &mut Vec::new());
            y.data().iter().enumerate().map(|(i, &v)| weight(i) * v).sum()
        };
        let y = conv2d_forward(&x, &k, stride, pad, &mut Vec::new());
        let dy = filled(y.shape(), weight);
        let (dx, dk) = conv2d_backward(&x, &k, &dy, stride, pad, true, &mut Vec::new());
        let dx = dx.unwrap();
        let h = 1e-5;
        for probe in [0usize, 5, 17, 40, x.numel() - 1] {
            let mut xp = x.clone();
            xp.data_mut()[probe] += h;
            let mut xm = x.clone();
            xm.data_mut()[probe] -= h;
            let fd = (loss(&xp, &k) - loss(&xm, &k)) / (2.0 * h);
            assert!((dx.data()[probe] - fd).abs() < 1e-8, "dx[{probe}]");
        }
        for probe in [0usize, 7, 19, k.numel() - 1] {
            let mut kp = k.clone();
            kp.data_mut()[probe] += h;
            let mut km = k.clone();
            km.data_mut()[probe] -= h;
            let fd = (loss(&x, &kp) - loss(&x, &km)) / (2.0 * h);
            assert!((dk.data()[probe] - fd).abs() < 1e-8, "dk[{probe}]");
        }
    }

    #[test]
    fn dense_forward_matches_manual_product() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let y = dense_forward(&x, &w, Some(&b));
        assert_eq!(y.data(), &[4.5, 4.5, 10.5, 10.5]);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let x = filled(&[3, 4], |i| (i as f64 - 5.0) * 0.3);
        let w = filled(&[4, 2], |i| (i as f64 - 3.0) * 0.2);
        let b = filled(&[2], |i| i as f64 * 0.1);
        let weight = |i: usize| (i as f64 - 2.5) * 0.4;
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let y = dense_forward(x, w, Some(b));
            y.data().iter().enumerate().map(|(i, &v)| weight(i) * v).sum()
        };
        let y = dense_forward(&x, &w, Some(&b));
        let dy = filled(y.shape(), weight);
        let (dx, dw, db) = dense_backward(&x, &w, &dy, true, true);
        let (dx, db) = (dx.unwrap(), db.unwrap());
        let h = 1e-6;
        for probe in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[probe] += h;
            let mut m = x.clone();
            m.data_mut()[probe] -= h;
            let fd = (loss(&p, &w, &b) - loss(&m, &w, &b)) / (2.0 * h);
            assert!((dx.data()[probe] - fd).abs() < 1e-7);
        }
        for probe in 0..w.numel() {
            let mut p = w.clone();
            p.data_mut()[probe] += h;
            let mut m = w.clone();
            m.data_mut()[probe] -= h;
            let fd = (loss(&x, &p, &b) - loss(&x, &m, &b)) / (2.0 * h);
            assert!((dw.data()[probe] - fd).abs() < 1e-7);
        }
        for probe in 0..b.numel() {
            let mut p = b.clone();
            p.data_mut()[probe] += h;
            let mut m = b.clone();
            m.data_mut()[probe] -= h;
            let fd = (loss(&x, &w, &p) - loss(&x, &w, &m)) / (2.0 * h);
            assert!((db.data()[probe] - fd).abs() < 1e-7);
        }
    }
}
