//! Correctly rounded summation.
//!
//! The result is the exact sum rounded once to the nearest `f64`, so it does
//! not depend on the order of the terms. Reductions over the entity axis use
//! it, which makes outputs exactly equivariant under entity permutations.

/// Shewchuk's algorithm with round-half-even on the final partials.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::with_capacity(8);
    for mut x in values {
        let mut i = 0;
        for k in 0..partials.len() {
            let mut y = partials[k];
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
    let Some(mut n) = partials.len().checked_sub(1) else {
        return 0.0;
    };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cancellation() {
        assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
        assert_eq!(exact_sum([]), 0.0);
        assert_eq!(exact_sum([1.0, 1e-16, 1e-16]), 1.0000000000000002);
    }

    proptest! {
        #[test]
        fn order_invariant(mut v in prop::collection::vec(-1e3f64..1e3, 0..40), seed in any::<u64>()) {
            let a = exact_sum(v.iter().copied());
            let n = v.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                v.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(a, exact_sum(v.iter().copied()));
        }

        #[test]
        fn integers_are_exact(v in prop::collection::vec(-1_000_000i64..1_000_000, 0..40)) {
            let expected: i64 = v.iter().sum();
            prop_assert_eq!(exact_sum(v.iter().map(|&x| x as f64)), expected as f64);
        }
    }
}
