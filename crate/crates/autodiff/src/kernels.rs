//! Dense kernels shared by forward and backward passes.

use crate::element::Element;

/// `C = A·B` (or `C += A·B` when `accumulate`), with `A` logically `[m, k]`
/// and `B` logically `[k, n]`. A transposed flag means the operand is stored
/// in the opposite layout (`[k, m]` for `A`, `[n, k]` for `B`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths are checked above, and the strides address exactly the
    // m·k, k·n and m·n elements of the three row-major buffers.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
        );
    }
}

pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    y.iter_mut().zip(x).for_each(|(y, &x)| *y = *y + alpha * x);
}

/// In-place numerically stable softmax over `row`.
pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += v.as_f64();
    }
    let inv = T::from_f64(1.0 / total);
    row.iter_mut().for_each(|v| *v = *v * inv);
}
