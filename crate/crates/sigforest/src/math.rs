//! Harmonic numbers and the expected isolation depth of a cell of `m` points.
//!
//! The depth normalizer is `E[d(m)] = 2 H(m-1) - 2 (m-1) / m`, with `H` the
//! harmonic number. Both quantities are computed by exact summation: the
//! per-split depth decomposition in [`crate::signature`] is an exact
//! telescoping identity and would not survive the usual `ln(m) + gamma`
//! shortcut.

/// `H(m) = sum_{j=1..m} 1/j`, summed in ascending order. `H(0) = 0`.
pub fn harmonic(m: usize) -> f64 {
    (1..=m).map(|j| 1.0 / j as f64).sum()
}

/// Expected isolation depth of a cell holding `m` points.
///
/// Zero for `m <= 1`: an already-isolated point needs no further splits.
pub fn expected_depth(m: usize) -> f64 {
    if m <= 1 {
        return 0.0;
    }
    2.0 * harmonic(m - 1) - 2.0 * (m - 1) as f64 / m as f64
}

/// Expected depths for every count `0..=n_max`, precomputed once per fit.
///
/// Entries agree bit-for-bit with [`expected_depth`] because the running
/// harmonic sum accumulates in the same ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedDepthTable {
    values: Vec<f64>,
}

impl ExpectedDepthTable {
    pub fn up_to(n_max: usize) -> Self {
        let mut values = Vec::with_capacity(n_max + 1);
        values.push(0.0); // m = 0, never consumed: cells are never empty
        let mut h = 0.0; // H(m - 1)
        for m in 1..=n_max {
            values.push(2.0 * h - 2.0 * (m - 1) as f64 / m as f64);
            h += 1.0 / m as f64;
        }
        ExpectedDepthTable { values }
    }

    /// Expected depth for a cell of `m` points. Panics if `m` exceeds the
    /// precomputed range.
    #[inline]
    pub fn get(&self, m: usize) -> f64 {
        self.values[m]
    }

    /// Largest count covered by the table.
    pub fn max_count(&self) -> usize {
        self.values.len() - 1
    }
}
