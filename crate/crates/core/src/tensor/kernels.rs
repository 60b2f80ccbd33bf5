//! Scalar kernels shared by the graph ops.

use super::Scalar;

/// Matrix layout for one gemm operand: row stride and column stride.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub const fn row_major(cols: usize) -> Self {
        Layout { rs: cols, cs: 1 }
    }

    /// Row-major storage read as its transpose.
    pub const fn transposed(cols: usize) -> Self {
        Layout { rs: 1, cs: cols }
    }

    fn span(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product.
///
/// Panics if any slice is too short for its layout.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
    lc: Layout,
) {
    assert!(a.len() >= la.span(m, k), "gemm: lhs too short");
    assert!(b.len() >= lb.span(k, n), "gemm: rhs too short");
    assert!(c.len() >= lc.span(m, n), "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

/// Writes softmax(row) into `out` and returns log-sum-exp(row).
pub fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    max + sum.ln()
}

/// Log-sum-exp of a row, accumulated in double precision.
pub fn logsumexp_f64<T: Scalar>(row: &[T]) -> f64 {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
    let sum: f64 = row.iter().map(|&x| (x.as_f64() - max).exp()).sum();
    max + sum.ln()
}
