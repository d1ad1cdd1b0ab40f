//! Dense kernels shared by the forward and backward passes.
//!
//! Everything is generic over the scalar so training runs in f32 while
//! gradient oracles run the identical code in f64. Kernels write each output
//! element from exactly one thread, so results are bitwise reproducible
//! regardless of thread count.

use num_traits::Float;
use rayon::prelude::*;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Scalar type for model arithmetic.
pub trait Scalar:
    Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    fn from_f64_c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Rows below this stay serial; the parallel split is per whole row so the
/// arithmetic order inside a row never changes.
const PAR_ROW_THRESHOLD: usize = 32;

#[inline]
fn row_kernel<S: Scalar>(out_row: &mut [S], a_row: &[S], b: &[S], k: usize, n: usize) {
    for t in 0..k {
        let av = a_row[t];
        if av == S::zero() {
            continue;
        }
        let b_row = &b[t * n..(t + 1) * n];
        for j in 0..n {
            out_row[j] += av * b_row[j];
        }
    }
}

/// out[m,n] = a[m,k] · b[k,n]
pub fn matmul<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    out.fill(S::zero());
    matmul_acc(out, a, b, m, k, n);
}

/// out[m,n] += a[m,k] · b[k,n]
pub fn matmul_acc<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m >= PAR_ROW_THRESHOLD {
        out.par_chunks_mut(n)
            .with_min_len(8)
            .enumerate()
            .for_each(|(i, out_row)| {
                row_kernel(out_row, &a[i * k..(i + 1) * k], b, k, n);
            });
    } else {
        for i in 0..m {
            row_kernel(&mut out[i * n..(i + 1) * n], &a[i * k..(i + 1) * k], b, k, n);
        }
    }
}

/// out[m,n] = a[m,k] · b[n,k]ᵀ. `b` is transposed into scratch first so the
/// inner product runs through the fast row kernel.
pub fn matmul_transb<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    out.fill(S::zero());
    matmul_transb_acc(out, a, b, m, k, n);
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub fn matmul_transb_acc<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose(b, n, k);
    matmul_acc(out, a, &bt, m, k, n);
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]. Used for weight gradients dW = xᵀ · dy.
pub fn matmul_transa_acc<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if k >= PAR_ROW_THRESHOLD {
        out.par_chunks_mut(n)
            .with_min_len(8)
            .enumerate()
            .for_each(|(i, out_row)| {
                for t in 0..m {
                    let av = a[t * k + i];
                    if av == S::zero() {
                        continue;
                    }
                    let b_row = &b[t * n..(t + 1) * n];
                    for j in 0..n {
                        out_row[j] += av * b_row[j];
                    }
                }
            });
    } else {
        for t in 0..m {
            let b_row = &b[t * n..(t + 1) * n];
            for i in 0..k {
                let av = a[t * k + i];
                if av == S::zero() {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    out_row[j] += av * b_row[j];
                }
            }
        }
    }
}

/// `out[n] = sum_k x[k] * w[k, n]` for a single row vector. Uses the same
/// accumulation order as [`matmul`], so one-row products agree bitwise.
pub fn vecmat<S: Scalar>(x: &[S], w: &[S], k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(x.len(), k);
    debug_assert_eq!(w.len(), k * n);
    let mut out = vec![S::zero(); n];
    row_kernel(&mut out, x, w, k, n);
    out
}

pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Numerically stable in-place softmax over one row.
pub fn softmax_row<S: Scalar>(row: &mut [S]) {
    let mut max = S::neg_infinity();
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// log(Σ exp(row)) without overflow.
pub fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let mut max = S::neg_infinity();
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    if max == S::neg_infinity() {
        return S::neg_infinity();
    }
    let mut sum = S::zero();
    for &x in row.iter() {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

pub fn silu<S: Scalar>(z: S) -> S {
    z / (S::one() + (-z).exp())
}

/// d silu / dz = σ(z) · (1 + z · (1 − σ(z)))
pub fn silu_grad<S: Scalar>(z: S) -> S {
    let sig = S::one() / (S::one() + (-z).exp());
    sig * (S::one() + z * (S::one() - sig))
}
