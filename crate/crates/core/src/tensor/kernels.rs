//! Slice-level numeric kernels shared by the graph ops and the value-level APIs.

use super::Element;

/// Row-major `c = op(a) · op(b) + beta * c`, where `op` optionally transposes.
///
/// `a` is `m×k` (stored `k×m` when `ta`), `b` is `k×n` (stored `n×k` when `tb`),
/// `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    beta: T,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index reachable from these strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable softmax of one row.
///
/// With `canonical`, the normalizer is summed in ascending order, which makes
/// the result independent of how the row's entries are permuted.
pub(crate) fn softmax_row<T: Element>(x: &[T], out: &mut [T], canonical: bool) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
    }
    let sum = if canonical {
        let mut sorted = out.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        sorted.into_iter().fold(T::zero(), |acc, v| acc + v)
    } else {
        out.iter().fold(T::zero(), |acc, &v| acc + v)
    };
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// `dx = y ⊙ (g − Σ g⊙y)` for one softmax row, scaled by `scale`.
pub(crate) fn softmax_row_backward<T: Element>(y: &[T], g: &[T], dx: &mut [T], scale: T) {
    let dot = y.iter().zip(g).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
        *d = *d + scale * yv * (gv - dot);
    }
}

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Depthwise causal convolution: `y[t,c] = bias[c] + Σ_j w[c,j] · x[t−j,c]`.
///
/// `x` and `y` are `[len, channels]` for a single sequence; `w` is `[channels, k]`.
pub(crate) fn conv_causal_seq<T: Element>(
    x: &[T],
    w: &[T],
    bias: &[T],
    len: usize,
    channels: usize,
    k: usize,
    y: &mut [T],
) {
    for t in 0..len {
        let row = &mut y[t * channels..(t + 1) * channels];
        row.copy_from_slice(bias);
        for j in 0..k.min(t + 1) {
            let src = &x[(t - j) * channels..(t - j + 1) * channels];
            for c in 0..channels {
                row[c] = row[c] + w[c * k + j] * src[c];
            }
        }
    }
}
