//! Slice-level numeric kernels shared by forward ops and gradient rules.
//!
//! All matrices are row-major. Accumulation order is fixed, so every kernel
//! is bit-deterministic and each output row depends only on the matching
//! input row(s).

use crate::Element;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_nn<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Fixed-order dot product with eight partial sums.
#[inline(always)]
pub fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    let (mut lo, mut hi) = ([E::zero(); 4], [E::zero(); 4]);
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            lo[l] = lo[l] + x[l] * y[l];
            hi[l] = hi[l] + x[l + 4] * y[l + 4];
        }
    }
    let mut acc = ((lo[0] + hi[0]) + (lo[1] + hi[1])) + ((lo[2] + hi[2]) + (lo[3] + hi[3]));
    for (&x, &y) in ar.iter().zip(br) {
        acc = acc + x * y;
    }
    acc
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`. The AVX path keeps the lane layout and
/// summation order of [`dot`], so it is bit-identical to the fallback.
pub fn matmul_nt<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    {
        use std::any::TypeId;
        if std::arch::is_x86_feature_detected!("avx") {
            if TypeId::of::<E>() == TypeId::of::<f64>() {
                // SAFETY: E is f64, so the slices are reinterpreted as
                // themselves; AVX support was checked above.
                unsafe {
                    return simd::matmul_nt_f64(cast(a), cast(b), cast_mut(c), m, k, n);
                }
            }
            if TypeId::of::<E>() == TypeId::of::<f32>() {
                // SAFETY: as above, with E = f32.
                unsafe {
                    return simd::matmul_nt_f32(cast(a), cast(b), cast_mut(c), m, k, n);
                }
            }
        }
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = c[i * n + j] + dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

#[cfg(target_arch = "x86_64")]
unsafe fn cast<E, T>(s: &[E]) -> &[T] {
    std::slice::from_raw_parts(s.as_ptr().cast(), s.len())
}

#[cfg(target_arch = "x86_64")]
unsafe fn cast_mut<E, T>(s: &mut [E]) -> &mut [T] {
    std::slice::from_raw_parts_mut(s.as_mut_ptr().cast(), s.len())
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx")]
    fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
        let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
        let (ar, br) = (ac.remainder(), bc.remainder());
        let (mut lo, mut hi) = (_mm256_setzero_pd(), _mm256_setzero_pd());
        for (x, y) in ac.zip(bc) {
            let (x, y) = (x.as_ptr(), y.as_ptr());
            // SAFETY: x and y point at eight readable elements each.
            unsafe {
                lo = _mm256_add_pd(lo, _mm256_mul_pd(_mm256_loadu_pd(x), _mm256_loadu_pd(y)));
                let (x4, y4) = (x.wrapping_add(4), y.wrapping_add(4));
                hi = _mm256_add_pd(hi, _mm256_mul_pd(_mm256_loadu_pd(x4), _mm256_loadu_pd(y4)));
            }
        }
        let mut s = [0.0f64; 4];
        // SAFETY: s holds four elements.
        unsafe { _mm256_storeu_pd(s.as_mut_ptr(), _mm256_add_pd(lo, hi)) };
        let mut acc = (s[0] + s[1]) + (s[2] + s[3]);
        for (&x, &y) in ar.iter().zip(br) {
            acc += x * y;
        }
        acc
    }

    #[target_feature(enable = "avx")]
    fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
        let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
        let (ar, br) = (ac.remainder(), bc.remainder());
        let mut v = _mm256_setzero_ps();
        for (x, y) in ac.zip(bc) {
            // SAFETY: x and y hold eight elements each.
            unsafe {
                v = _mm256_add_ps(v, _mm256_mul_ps(_mm256_loadu_ps(x.as_ptr()), _mm256_loadu_ps(y.as_ptr())));
            }
        }
        let mut s = [0.0f32; 8];
        // SAFETY: s holds eight elements.
        unsafe { _mm256_storeu_ps(s.as_mut_ptr(), v) };
        let mut acc = ((s[0] + s[4]) + (s[1] + s[5])) + ((s[2] + s[6]) + (s[3] + s[7]));
        for (&x, &y) in ar.iter().zip(br) {
            acc += x * y;
        }
        acc
    }

    #[target_feature(enable = "avx")]
    pub(super) fn matmul_nt_f64(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)).take(m) {
            for (cv, b_row) in c_row.iter_mut().zip(b.chunks_exact(k)) {
                *cv += dot_f64(a_row, b_row);
            }
        }
    }

    #[target_feature(enable = "avx")]
    pub(super) fn matmul_nt_f32(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
        for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)).take(m) {
            for (cv, b_row) in c_row.iter_mut().zip(b.chunks_exact(k)) {
                *cv += dot_f32(a_row, b_row);
            }
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Softmax over the middle axis of an `[outer, len, inner]` view, with
/// max-subtraction.
pub fn softmax<E: Element>(x: &[E], y: &mut [E], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = E::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = E::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                sum = sum + e;
            }
            let inv = E::one() / sum;
            for j in 0..len {
                y[at(j)] = y[at(j)] * inv;
            }
        }
    }
}

/// Gradient of softmax: `dx = y ⊙ (dy − Σ dy⊙y)` along the middle axis.
pub fn softmax_backward<E: Element>(
    y: &[E],
    dy: &[E],
    dx: &mut [E],
    outer: usize,
    len: usize,
    inner: usize,
) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut dot = E::zero();
            for j in 0..len {
                dot = dot + dy[at(j)] * y[at(j)];
            }
            for j in 0..len {
                dx[at(j)] = dx[at(j)] + y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
}

/// Row-wise layer norm; returns per-row `(mean, 1/std)`.
pub fn layer_norm<E: Element>(
    x: &[E],
    gamma: &[E],
    beta: &[E],
    eps: E,
    y: &mut [E],
    width: usize,
) -> (Vec<E>, Vec<E>) {
    let rows = x.len() / width;
    let n = E::from_f64(width as f64);
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<E>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / n;
        let rstd = E::one() / (var + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            y[r * width + j] = (v - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

/// Standard normal CDF via erf.
#[inline]
pub fn normal_cdf<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    half * (E::one() + (x * E::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Standard normal density.
#[inline]
pub fn normal_pdf<E: Element>(x: E) -> E {
    let inv_sqrt_2pi = E::from_f64(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * E::from_f64(0.5)).exp()
}

#[inline]
pub fn gelu<E: Element>(x: E) -> E {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_grad<E: Element>(x: E) -> E {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Row-wise log-softmax of a `[rows × cols]` matrix.
pub fn log_softmax_rows<E: Element>(x: &[E], cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    for (row, out_row) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<E>().ln() + max;
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
        let mut c = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = dot(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
            }
        }
        c
    }

    fn check<E: Element>() {
        for (m, k, n) in [(1, 1, 1), (3, 7, 2), (5, 8, 4), (4, 19, 3), (2, 1024, 16), (6, 33, 5)] {
            let a: Vec<E> = (0..m * k).map(|i| E::from_f64(((i * 37 % 101) as f64 - 50.0) / 7.0)).collect();
            let b: Vec<E> = (0..n * k).map(|i| E::from_f64(((i * 53 % 97) as f64 - 48.0) / 11.0)).collect();
            let mut c = vec![E::zero(); m * n];
            matmul_nt(&a, &b, &mut c, m, k, n);
            assert_eq!(c, reference(&a, &b, m, k, n), "{m}x{k}x{n}");
        }
    }

    #[test]
    fn matmul_nt_matches_portable_dot_bitwise() {
        check::<f32>();
        check::<f64>();
    }
}
