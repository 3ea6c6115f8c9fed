//! Row-major matrix kernels. All of them accumulate into `out`.

use crate::tensor::Scalar;

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    // Eight independent lanes so the compiler can vectorize the reduction.
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ab = &a[c * 8..c * 8 + 8];
        let bb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += ab[l] * bb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    s + tail
}

/// `out[m×p] += a[m×k] · b[k×p]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    T::gemm_acc(m, k, p, (a, k, 1), (b, p, 1), (out, p, 1));
}

/// `out[m×p] += a[m×k] · b[p×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    T::gemm_acc(m, k, p, (a, k, 1), (b, 1, k), (out, p, 1));
}

/// `out[k×p] += a[m×k]ᵀ · b[m×p]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    T::gemm_acc(k, m, p, (a, 1, k), (b, p, 1), (out, p, 1));
}

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                for t in 0..k {
                    c[i * p + j] += a[i * k + t] * b[t * p + j];
                }
            }
        }
        c
    }

    #[test]
    fn nt_and_tn_agree_with_explicit_transpose() {
        let (m, k, p) = (3, 11, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * p).map(|i| (i as f64 * 0.91).cos()).collect();
        let expect = naive(&a, &b, m, k, p);

        let bt = transpose(&b, k, p);
        let mut nt = vec![0.0; m * p];
        gemm_nt(&a, &bt, &mut nt, m, k, p);

        let at = transpose(&a, m, k);
        let mut tn = vec![0.0; m * p];
        gemm_tn(&at, &b, &mut tn, k, m, p);

        for i in 0..m * p {
            assert!((nt[i] - expect[i]).abs() < 1e-12);
            assert!((tn[i] - expect[i]).abs() < 1e-12);
        }
    }
}
