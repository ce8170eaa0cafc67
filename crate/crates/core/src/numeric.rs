//! Floating-point summation helpers.

/// Exactly accumulated sum of `f64` values.
///
/// Keeps a list of non-overlapping partials (Shewchuk's algorithm), so the
/// running total is exact and [`ExactSum::value`] returns the correctly
/// rounded result. The value does not depend on the order of additions.
/// Inputs must be finite.
#[derive(Debug, Clone, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, mut x: f64) {
        debug_assert!(x.is_finite(), "ExactSum only accepts finite values");
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    /// Correctly rounded value of the exact sum.
    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // round-half-even correction when the tail straddles a halfway point
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }
}

impl ExactSum {
    /// Correctly rounded value of the exact sum divided by `count`.
    pub fn mean(&self, count: usize) -> f64 {
        let m = count as f64;
        let q = self.value() / m;
        if !q.is_finite() || q == 0.0 {
            return q;
        }
        // q is within one ulp of the exact quotient; pick the neighbour
        // with the smallest exact residual |sum - c·m|
        let residual = |c: f64| {
            let hi = c * m;
            let lo = c.mul_add(m, -hi);
            let mut r = self.clone();
            r.add(-hi);
            r.add(-lo);
            r.value().abs()
        };
        let mut best = (q, residual(q));
        for c in [q.next_down(), q.next_up()] {
            let r = residual(c);
            if r < best.1 || (r == best.1 && c.to_bits() & 1 == 0) {
                best = (c, r);
            }
        }
        best.0
    }
}

impl Extend<f64> for ExactSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.add(x);
        }
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = ExactSum::new();
        acc.extend(iter);
        acc
    }
}

/// Correctly rounded sum of `values`.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    values.into_iter().collect::<ExactSum>().value()
}

/// Sample mean and standard error of the mean.
pub fn mean_and_standard_error(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().copied().collect::<ExactSum>().mean(n);
    if n == 1 {
        return (mean, 0.0);
    }
    let ss = exact_sum(values.iter().map(|v| (v - mean) * (v - mean)));
    let var = ss / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
