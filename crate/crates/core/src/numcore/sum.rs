//! Order-independent reductions.
//!
//! Means in this crate must not depend on input order or on repeating the
//! whole input multiset, so sums are kept exact as Shewchuk non-overlapping
//! partials and only rounded once, after the division by the count.

use std::cmp::Ordering;

/// Exact sum of `values` as non-overlapping partials, smallest first.
fn partials<I: IntoIterator<Item = f64>>(values: I) -> Vec<f64> {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    partials
}

/// Correctly rounded value of a partials expansion (half-way cases fixed up).
fn round_partials(partials: &[f64]) -> f64 {
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

/// Correctly rounded sum of `values`. The result depends only on the
/// multiset of inputs, never on their order.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    round_partials(&partials(values))
}

/// Exact `sum - q * n` as partials.
fn residual(sum: &[f64], q: f64, n: f64) -> Vec<f64> {
    let p = q * n;
    let e = q.mul_add(n, -p);
    partials(sum.iter().copied().chain([-p, -e]))
}

/// Sign of `|a| - |b|` for two exact expansions.
fn cmp_abs(a: &[f64], b: &[f64]) -> Ordering {
    let sa = round_partials(a).signum();
    let sb = round_partials(b).signum();
    let diff = round_partials(&partials(a.iter().map(|v| v * sa).chain(b.iter().map(|v| -v * sb))));
    diff.partial_cmp(&0.0).unwrap_or(Ordering::Equal)
}

/// `sum / n` rounded to nearest (ties to even) for an exact expansion `sum`.
///
/// Depends only on the rational value `sum / n`, so `k` copies of a set give
/// the same quotient as one copy.
fn exact_quotient(sum: &[f64], n: usize) -> f64 {
    let n = n as f64;
    let mut q = round_partials(sum) / n;
    for _ in 0..4 {
        let next = q + round_partials(&residual(sum, q, n)) / n;
        if next == q || !next.is_finite() {
            break;
        }
        q = next;
    }
    let mut best = q;
    let mut best_r = residual(sum, q, n);
    for c in [q.next_down(), q.next_up()] {
        let r = residual(sum, c, n);
        let better = match cmp_abs(&r, &best_r) {
            Ordering::Less => true,
            Ordering::Equal => c.to_bits() & 1 == 0,
            Ordering::Greater => false,
        };
        if better {
            best = c;
            best_r = r;
        }
    }
    best
}

/// Mean computed as `min + (sum(v - min) / n)` with one rounding for the
/// quotient.
///
/// Invariant under permutation and under repeating the whole input any
/// number of times, and returns the common value exactly when all inputs
/// are equal.
/// Returns NaN for an empty slice.
pub fn stable_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let dev = partials(values.iter().map(|v| v - min));
    min + exact_quotient(&dev, values.len())
}

/// Column means of row vectors with [`stable_mean`] per column.
pub fn column_means<R: AsRef<[f64]>>(rows: &[R]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let dim = first.as_ref().len();
    let mut column = Vec::with_capacity(rows.len());
    (0..dim)
        .map(|c| {
            column.clear();
            column.extend(rows.iter().map(|r| r.as_ref()[c]));
            stable_mean(&column)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_sum_beats_naive_cancellation() {
        assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
        assert_eq!(exact_sum(std::iter::empty()), 0.0);
    }

    #[test]
    fn quotient_is_correctly_rounded() {
        assert_eq!(exact_quotient(&partials([1.0, 1.0, 0.0]), 3), 2.0 / 3.0);
        assert_eq!(exact_quotient(&partials([0.1, 0.1, 0.1]), 3), 0.1);
        assert_eq!(exact_quotient(&partials([1e16, 1.0, -1e16, 2.0]), 3), 1.0);
        assert_eq!(exact_quotient(&[], 5), 0.0);
    }

    #[test]
    fn constant_mean_is_exact() {
        let v = vec![std::f64::consts::LN_2; 37];
        assert_eq!(stable_mean(&v), std::f64::consts::LN_2);
    }

    proptest! {
        #[test]
        fn mean_is_permutation_and_duplication_invariant(
            mut v in proptest::collection::vec(-1e3f64..1e3, 1..60),
            seed in any::<u64>(),
        ) {
            let m = stable_mean(&v);
            let mut doubled = v.clone();
            doubled.extend_from_slice(&v);
            prop_assert_eq!(stable_mean(&doubled), m);
            let mut tripled = doubled.clone();
            tripled.extend_from_slice(&v);
            prop_assert_eq!(stable_mean(&tripled), m);
            // deterministic shuffle
            let n = v.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                v.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(stable_mean(&v), m);
        }
    }
}
