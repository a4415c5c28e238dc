//! First-order linear recurrence scans over element-wise lanes.
//!
//! Both the selective SSM and its tape operation reduce to the recurrence
//! `h_t = a_t * h_{t-1} + b_t` applied independently per lane. The
//! sequential path walks time in order; the parallel path runs a
//! work-efficient Blelloch prefix scan over the associative combinator
//!
//!   (a2, b2) ∘ (a1, b1) = (a1*a2, a2*b1 + b2)
//!
//! with a fixed balanced tree, so results are reproducible across thread
//! counts.

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScanMode {
    Sequential,
    Parallel,
}

/// One lane-step of the recurrence as a pair (decay, increment).
#[derive(Debug, Clone, Copy)]
pub struct ScanPair<R> {
    pub a: R,
    pub b: R,
}

impl<R: Real> ScanPair<R> {
    pub fn identity() -> Self {
        ScanPair {
            a: R::ONE,
            b: R::ZERO,
        }
    }
}

/// Compose `first` then `second`: applying the result to a state h gives
/// `second(first(h))`.
pub fn combine<R: Real>(first: ScanPair<R>, second: ScanPair<R>) -> ScanPair<R> {
    ScanPair {
        a: first.a * second.a,
        b: second.a * first.b + second.b,
    }
}

/// Sequential scan over `steps` time points with `lanes` independent lanes.
/// `a` and `b` are `[steps * lanes]` row-major (time-major); output is the
/// full state trajectory `h` with the same layout, starting from h_0 = 0.
pub fn scan_sequential_lanes<R: Real>(a: &[R], b: &[R], steps: usize, lanes: usize) -> Vec<R> {
    debug_assert_eq!(a.len(), steps * lanes);
    debug_assert_eq!(b.len(), steps * lanes);
    let mut h = vec![R::ZERO; steps * lanes];
    let mut prev = vec![R::ZERO; lanes];
    for t in 0..steps {
        let base = t * lanes;
        for l in 0..lanes {
            let v = a[base + l] * prev[l] + b[base + l];
            prev[l] = v;
            h[base + l] = v;
        }
    }
    h
}

/// Blelloch inclusive prefix scan with the same contract as
/// [`scan_sequential_lanes`]. Each lane runs its own fixed combination
/// tree; sequences are padded to the next power of two with identity
/// pairs, so non-power-of-two lengths are handled exactly.
pub fn scan_blelloch_lanes<R: Real>(a: &[R], b: &[R], steps: usize, lanes: usize) -> Vec<R> {
    debug_assert_eq!(a.len(), steps * lanes);
    debug_assert_eq!(b.len(), steps * lanes);
    let n = steps.next_power_of_two();
    let mut h = vec![R::ZERO; steps * lanes];
    let mut tree: Vec<ScanPair<R>> = vec![ScanPair::identity(); n];
    for lane in 0..lanes {
        for t in 0..n {
            tree[t] = if t < steps {
                ScanPair {
                    a: a[t * lanes + lane],
                    b: b[t * lanes + lane],
                }
            } else {
                ScanPair::identity()
            };
        }
        // Up-sweep: tree[k] holds the composition of its subtree.
        let mut stride = 1;
        while stride < n {
            let mut idx = 2 * stride - 1;
            while idx < n {
                tree[idx] = combine(tree[idx - stride], tree[idx]);
                idx += 2 * stride;
            }
            stride *= 2;
        }
        // Down-sweep for the exclusive scan. The right child receives the
        // parent's prefix composed with the left subtree sum, in that
        // order: the combinator is not commutative.
        tree[n - 1] = ScanPair::identity();
        stride = n / 2;
        while stride >= 1 {
            let mut idx = 2 * stride - 1;
            while idx < n {
                let left_sum = tree[idx - stride];
                let parent_prefix = tree[idx];
                tree[idx - stride] = parent_prefix;
                tree[idx] = combine(parent_prefix, left_sum);
                idx += 2 * stride;
            }
            stride /= 2;
        }
        // Inclusive value at t = exclusive prefix composed with step t,
        // applied to h_0 = 0 (so only the b component survives).
        for t in 0..steps {
            let step = ScanPair {
                a: a[t * lanes + lane],
                b: b[t * lanes + lane],
            };
            let inclusive = combine(tree[t], step);
            h[t * lanes + lane] = inclusive.b;
        }
    }
    h
}

pub fn scan_lanes<R: Real>(mode: ScanMode, a: &[R], b: &[R], steps: usize, lanes: usize) -> Vec<R> {
    match mode {
        ScanMode::Sequential => scan_sequential_lanes(a, b, steps, lanes),
        ScanMode::Parallel => scan_blelloch_lanes(a, b, steps, lanes),
    }
}
