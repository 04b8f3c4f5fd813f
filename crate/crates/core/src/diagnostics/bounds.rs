use serde::Serialize;

use crate::mdp::PairTable;

/// Value-error bounds implied by the magnitude of the Bellman error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundsReport {
    /// `max |eps|`.
    pub c_max: f64,
    /// `E_{d_pi} |eps|`.
    pub c_avg: f64,
    pub max_lower: f64,
    pub max_upper: f64,
    pub avg_lower: f64,
    pub avg_upper: f64,
}

impl BoundsReport {
    /// Whether measured `max |Delta|` and `E_{d_pi} |Delta|` lie inside the bounds.
    pub fn contains(&self, max_abs_delta: f64, avg_abs_delta: f64, slack: f64) -> bool {
        self.max_lower - slack <= max_abs_delta
            && max_abs_delta <= self.max_upper + slack
            && self.avg_lower - slack <= avg_abs_delta
            && avg_abs_delta <= self.avg_upper + slack
    }
}

/// `C/(1+gamma) <= |Delta| <= C/(1-gamma)` for both the max and the
/// `marginal`-weighted average of the absolute Bellman error.
///
/// The averaged pair is guaranteed only when `marginal` is invariant under the
/// policy's pair transitions (see
/// [`stationary_distribution`](crate::occupancy::stationary_distribution)).
/// The discounted occupancy from the start distribution is not invariant in
/// general and can violate it.
pub fn value_error_bounds(eps: &PairTable, gamma: f64, marginal: &[f64]) -> BoundsReport {
    assert_eq!(eps.values.len(), marginal.len(), "occupancy shape differs from table");
    let c_max = eps.max_abs();
    let c_avg: f64 = eps.values.iter().zip(marginal).map(|(e, d)| e.abs() * d).sum();
    BoundsReport {
        c_max,
        c_avg,
        max_lower: c_max / (1.0 + gamma),
        max_upper: c_max / (1.0 - gamma),
        avg_lower: c_avg / (1.0 + gamma),
        avg_upper: c_avg / (1.0 - gamma),
    }
}
