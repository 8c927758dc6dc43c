//! Linear recurrences `h_t = a_t ⊙ h_{t−1} + b_t` evaluated sequentially or with
//! a work-efficient (Blelloch) associative scan.
//!
//! Buffers are `[batch, len, lanes]`, row-major, with every lane an independent
//! recurrence.

use std::ops::{Add, Mul};

use rayon::prelude::*;

use crate::tensor::Element;

/// One step of a linear recurrence, read as the affine map `h ↦ a·h + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanElement<T> {
    pub a: T,
    pub b: T,
}

impl<T> ScanElement<T>
where
    T: Copy + Add<Output = T> + Mul<Output = T>,
{
    pub fn new(a: T, b: T) -> Self {
        ScanElement { a, b }
    }

    /// Composes `self` (earlier) with `later`: applying the result equals
    /// applying `self` then `later`.
    pub fn combine(self, later: Self) -> Self {
        ScanElement {
            a: self.a * later.a,
            b: later.a * self.b + later.b,
        }
    }
}

impl<T: Element> ScanElement<T> {
    pub fn identity() -> Self {
        ScanElement {
            a: T::one(),
            b: T::zero(),
        }
    }
}

pub(crate) fn scan_sequential<T: Element>(
    a: &[T],
    b: &[T],
    batch: usize,
    len: usize,
    lanes: usize,
    h: &mut [T],
) {
    let seq = len * lanes;
    for bi in 0..batch {
        let base = bi * seq;
        h[base..base + lanes].copy_from_slice(&b[base..base + lanes]);
        for t in 1..len {
            let (prev, cur) = h[base + (t - 1) * lanes..base + (t + 1) * lanes].split_at_mut(lanes);
            let off = base + t * lanes;
            for l in 0..lanes {
                cur[l] = a[off + l] * prev[l] + b[off + l];
            }
        }
    }
}

/// Below this many lane-updates per tree level, a level runs on the calling thread.
const PAR_GRAIN: usize = 1 << 14;

pub(crate) fn scan_parallel<T: Element>(
    a: &[T],
    b: &[T],
    batch: usize,
    len: usize,
    lanes: usize,
    h: &mut [T],
) {
    let seq = len * lanes;
    debug_assert_eq!(h.len(), batch * seq);
    h.par_chunks_mut(seq).enumerate().for_each(|(bi, out)| {
        let range = bi * seq..(bi + 1) * seq;
        blelloch(&a[range.clone()], &b[range], len, lanes, out);
    });
}

fn blelloch<T: Element>(a: &[T], b: &[T], len: usize, lanes: usize, out: &mut [T]) {
    let padded = len.next_power_of_two();
    let mut ta = vec![T::one(); padded * lanes];
    let mut tb = vec![T::zero(); padded * lanes];
    ta[..len * lanes].copy_from_slice(a);
    tb[..len * lanes].copy_from_slice(b);

    // Up-sweep: the last node of each 2d-block accumulates the whole block.
    let mut d = 1;
    while d < padded {
        level(&mut ta, &mut tb, d, lanes, |ea, eb, la, lb| {
            // later = node (2d−1), earlier = node (d−1)
            *lb = *la * *eb + *lb;
            *la = *ea * *la;
        });
        d *= 2;
    }

    // Down-sweep to exclusive prefixes; the root becomes the identity.
    let root = (padded - 1) * lanes;
    ta[root..root + lanes].fill(T::one());
    tb[root..root + lanes].fill(T::zero());
    let mut d = padded / 2;
    while d >= 1 {
        level(&mut ta, &mut tb, d, lanes, |ea, eb, la, lb| {
            // left child receives the parent's prefix; the right child receives
            // prefix ∘ left-block.
            let (pa, pb) = (*la, *lb);
            let (sa, sb) = (*ea, *eb);
            *ea = pa;
            *eb = pb;
            *la = pa * sa;
            *lb = sa * pb + sb;
        });
        d /= 2;
    }

    // Inclusive prefix applied to h_{−1} = 0 is the b component of prefix ∘ element.
    for t in 0..len {
        for l in 0..lanes {
            let i = t * lanes + l;
            out[i] = a[i] * tb[i] + b[i];
        }
    }
}

/// Applies `f(earlier_a, earlier_b, later_a, later_b)` to nodes `(d−1, 2d−1)` of
/// every `2d`-block, lane by lane.
fn level<T: Element>(
    ta: &mut [T],
    tb: &mut [T],
    d: usize,
    lanes: usize,
    f: impl Fn(&mut T, &mut T, &mut T, &mut T) + Sync,
) {
    let block = 2 * d * lanes;
    let run = |(ca, cb): (&mut [T], &mut [T])| {
        let (left_a, right_a) = ca.split_at_mut(d * lanes);
        let (left_b, right_b) = cb.split_at_mut(d * lanes);
        let e = (d - 1) * lanes;
        for l in 0..lanes {
            f(
                &mut left_a[e + l],
                &mut left_b[e + l],
                &mut right_a[e + l],
                &mut right_b[e + l],
            );
        }
    };
    let blocks = ta.len() / block;
    if blocks * lanes < PAR_GRAIN {
        ta.chunks_mut(block).zip(tb.chunks_mut(block)).for_each(run);
    } else {
        ta.par_chunks_mut(block)
            .zip(tb.par_chunks_mut(block))
            .for_each(run);
    }
}
