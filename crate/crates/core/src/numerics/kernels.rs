//! Raw slice kernels. Inner loops accumulate in `f64`.

use std::cell::Cell;

use super::real::Real;

thread_local! {
    static MATMUL_FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulate FLOPs (2 per MAC) executed by forward matmuls on this
/// thread since the last [`reset_flop_counter`].
pub fn flop_counter() -> u64 {
    MATMUL_FLOPS.with(|c| c.get())
}

pub fn reset_flop_counter() {
    MATMUL_FLOPS.with(|c| c.set(0));
}

fn count_flops(n: u64) {
    MATMUL_FLOPS.with(|c| c.set(c.get() + n));
}

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    count_flops(2 * (m * k * n) as u64);
    matmul_uncounted(a, b, m, k, n)
}

fn matmul_uncounted<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { matmul_avx2(a, b, m, k, n) };
    }
    matmul_blocked(a, b, m, k, n)
}

/// The portable kernel compiled with wider vectors. No fused multiply-add is
/// enabled, so results are bit-identical to the baseline build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    matmul_blocked(a, b, m, k, n)
}

/// Rows of the left operand are processed four at a time so each loaded
/// row of `b` feeds four accumulators; every output element still sums its
/// products in ascending `p`.
#[inline(always)]
fn matmul_blocked<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::default(); m * n];
    let mut acc = vec![0f64; 4 * n];
    let mut i = 0;
    while i < m {
        let rows = (m - i).min(4);
        acc.iter_mut().for_each(|v| *v = 0.0);
        let (a0, rest) = acc.split_at_mut(n);
        let (a1, rest) = rest.split_at_mut(n);
        let (a2, a3) = rest.split_at_mut(n);
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let coef = |r: usize| if r < rows { a[(i + r) * k + p].to_f64() } else { 0.0 };
            let (c0, c1, c2, c3) = (coef(0), coef(1), coef(2), coef(3));
            let (a0, a1, a2, a3) = (&mut a0[..n], &mut a1[..n], &mut a2[..n], &mut a3[..n]);
            for j in 0..n {
                let bv = b_row[j].to_f64();
                a0[j] += c0 * bv;
                a1[j] += c1 * bv;
                a2[j] += c2 * bv;
                a3[j] += c3 * bv;
            }
        }
        for r in 0..rows {
            for (o, s) in out[(i + r) * n..(i + r + 1) * n].iter_mut().zip(&acc[r * n..(r + 1) * n]) {
                *o = T::from_f64(*s);
            }
        }
        i += rows;
    }
    out
}

/// `c[m×k] = g[m×n] · b[k×n]ᵀ` (gradient w.r.t. the left operand).
pub fn matmul_nt<T: Real>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    matmul_uncounted(g, &transpose(b, k, n), m, n, k)
}

/// `c[k×n] = a[m×k]ᵀ · g[m×n]` (gradient w.r.t. the right operand).
pub fn matmul_tn<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    matmul_uncounted(&transpose(a, m, k), g, k, m, n)
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::default(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn sum_f64<T: Real>(x: &[T]) -> f64 {
    x.iter().map(|&v| v.to_f64()).sum()
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::from_f64(1.0 / (1.0 + (-x.to_f64()).exp()))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let x = x.to_f64();
    T::from_f64(0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let x = x.to_f64();
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    T::from_f64(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

/// Softmax over each row of a `rows × cols` buffer, with max subtraction.
pub fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    for (src, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = src.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0f64;
        let exps: Vec<f64> = src
            .iter()
            .map(|&v| {
                let e = (v.to_f64() - max).exp();
                total += e;
                e
            })
            .collect();
        for (d, e) in dst.iter_mut().zip(exps) {
            *d = T::from_f64(e / total);
        }
    }
    out
}
