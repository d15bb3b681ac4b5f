// SPDX-License-Identifier: MIT OR Apache-2.0

//! Log-space running sums.
//!
//! Products of decays `Π_{k=j+1}^{i} exp(e_k)` are evaluated as
//! `exp(S_i - S_j)`, which never underflows in intermediate steps the way a
//! running product does.

/// Cumulative sums `S_i = Σ_{k≤i} e_k`.
pub fn logspace_prefix(exponents: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    exponents
        .iter()
        .map(|e| {
            acc += e;
            acc
        })
        .collect()
}

/// Compensated prefix sums with O(1) span queries.
///
/// Each prefix is held as an unevaluated `hi + lo` pair (Neumaier summation),
/// so `span(j, i)` keeps full relative precision even when both prefixes are
/// large and nearly equal.
#[derive(Debug, Clone)]
pub struct LogPrefix {
    hi: Vec<f64>,
    lo: Vec<f64>,
}

impl LogPrefix {
    pub fn new(exponents: &[f64]) -> Self {
        let mut hi = Vec::with_capacity(exponents.len() + 1);
        let mut lo = Vec::with_capacity(exponents.len() + 1);
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        hi.push(0.0);
        lo.push(0.0);
        for &e in exponents {
            let t = sum + e;
            if sum.abs() >= e.abs() {
                comp += (sum - t) + e;
            } else {
                comp += (e - t) + sum;
            }
            sum = t;
            hi.push(sum);
            lo.push(comp);
        }
        Self { hi, lo }
    }

    pub fn len(&self) -> usize {
        self.hi.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `Σ_{k=j+1}^{i} e_k` for 0-based token indices `j <= i`.
    pub fn span(&self, j: usize, i: usize) -> f64 {
        debug_assert!(j <= i);
        (self.hi[i + 1] - self.hi[j + 1]) + (self.lo[i + 1] - self.lo[j + 1])
    }

    /// `Π_{k=j+1}^{i} exp(e_k)`.
    pub fn decay(&self, j: usize, i: usize) -> f64 {
        self.span(j, i).exp()
    }
}
