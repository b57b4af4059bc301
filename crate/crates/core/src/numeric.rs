//! Deterministic reductions.

/// Pairwise (tree) summation with a fixed split order.
///
/// The result depends only on the input order, never on scheduling, and the
/// rounding error grows as O(log n) instead of O(n).
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Kahan-compensated running sum for streaming reductions.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, value: f64) {
        let y = value - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn merge(&mut self, other: KahanSum) {
        self.add(other.sum);
        self.add(-other.comp);
    }

    pub fn total(&self) -> f64 {
        self.sum
    }
}
