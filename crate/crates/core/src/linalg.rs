//! Dense row-major kernels used by every model in the crate.
//!
//! All kernels are row-independent: the value written for one output row
//! depends only on the matching input row and the shared operand. Incremental
//! decoding relies on this to reproduce teacher-forced logits bit for bit.

use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating point type the models are generic over (`f32` for training,
/// `f64` for gradient checks).
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    let x = &x[..y.len()];
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes
/// without reassociating a single running sum.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let b = &b[..a.len()];
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

const MR: usize = 4;

/// `c[n×m] += a[n×k] · b[k×m]`. Every output element starts from its current
/// value and adds its `k` products in order, so a row's result never depends
/// on which other rows share the call.
pub fn gemm_acc<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize, c: &mut [T]) {
    debug_assert!(a.len() >= n * k && b.len() >= k * m && c.len() >= n * m);
    let mut r = 0;
    while r < n {
        let rows = MR.min(n - r);
        let mut j = 0;
        while j < m {
            j += match (rows, m - j) {
                (4, w) if w >= 32 => block::<T, 4, 32>(a, b, c, r, j, k, m),
                (4, w) if w >= 16 => block::<T, 4, 16>(a, b, c, r, j, k, m),
                (4, w) if w >= 8 => block::<T, 4, 8>(a, b, c, r, j, k, m),
                (_, w) if w >= 32 => rows_block::<T, 32>(rows, a, b, c, r, j, k, m),
                (_, w) if w >= 16 => rows_block::<T, 16>(rows, a, b, c, r, j, k, m),
                (_, w) if w >= 8 => rows_block::<T, 8>(rows, a, b, c, r, j, k, m),
                (_, w) => {
                    for rr in r..r + rows {
                        let ar = &a[rr * k..(rr + 1) * k];
                        for jj in j..j + w {
                            let mut s = c[rr * m + jj];
                            for (kk, &av) in ar.iter().enumerate() {
                                s += av * b[kk * m + jj];
                            }
                            c[rr * m + jj] = s;
                        }
                    }
                    w
                }
            };
        }
        r += MR;
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn rows_block<T: Real, const W: usize>(
    rows: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    r: usize,
    j: usize,
    k: usize,
    m: usize,
) -> usize {
    match rows {
        3 => block::<T, 3, W>(a, b, c, r, j, k, m),
        2 => block::<T, 2, W>(a, b, c, r, j, k, m),
        _ => block::<T, 1, W>(a, b, c, r, j, k, m),
    }
}

#[inline(always)]
fn block<T: Real, const R: usize, const W: usize>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    r: usize,
    j: usize,
    k: usize,
    m: usize,
) -> usize {
    let mut acc = [[T::zero(); W]; R];
    for (i, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(r + i) * m + j..(r + i) * m + j + W]);
    }
    let ar: [&[T]; R] = std::array::from_fn(|i| &a[(r + i) * k..(r + i + 1) * k]);
    for kk in 0..k {
        let br: &[T; W] = b[kk * m + j..kk * m + j + W].try_into().unwrap();
        for i in 0..R {
            let av = ar[i][kk];
            for l in 0..W {
                acc[i][l] += av * br[l];
            }
        }
    }
    for (i, row) in acc.iter().enumerate() {
        c[(r + i) * m + j..(r + i) * m + j + W].copy_from_slice(row);
    }
    W
}

pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// `y[n×m] = x[n×k] · w[k×m] + b`; `y` is overwritten.
pub fn linear<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, k: usize, m: usize, y: &mut [T]) {
    debug_assert_eq!(w.len(), k * m);
    debug_assert_eq!(x.len() / k, y.len() / m);
    let n = x.len() / k;
    for yr in y.chunks_exact_mut(m) {
        match b {
            Some(b) => yr.copy_from_slice(b),
            None => yr.fill(T::zero()),
        }
    }
    gemm_acc(x, w, n, k, m, y);
}

/// Backward of [`linear`]: `dw += xᵀ·dy`, `db += Σ dy`, `dx += dy·wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    k: usize,
    m: usize,
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: Option<&mut [T]>,
) {
    let n = x.len() / k;
    let xt = transpose(x, n, k);
    gemm_acc(&xt, dy, k, n, m, dw);
    if let Some(db) = db {
        for dyr in dy.chunks_exact(m) {
            for (d, &g) in db.iter_mut().zip(dyr) {
                *d += g;
            }
        }
    }
    if let Some(dx) = dx {
        let wt = transpose(w, k, m);
        gemm_acc(dy, &wt, n, m, k, dx);
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let mut mx = row[0];
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Log-sum-exp of a row.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mut mx = T::neg_infinity();
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for &v in row {
        sum += (v - mx).exp();
    }
    mx + sum.ln()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
