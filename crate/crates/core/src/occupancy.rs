//! Conditional discounted state-action occupancies.
//!
//! Starting from a fixed pair `(s, a)` and following `pi` afterwards, the
//! occupancy is `d(.|s,a) = (1 - gamma) * sum_t gamma^t Pr[(s_t, a_t) = .]`.
//! The `t = 0` term is the indicator of `(s, a)` itself, so the whole tensor is
//! `(1 - gamma) (I - gamma P_pi)^{-1}`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::linalg;
use crate::mdp::{pair_transition_matrix, FiniteMdp, MdpError, PairTable, PolicyTable};

#[derive(Debug, Clone, Serialize)]
pub struct OccupancyTensor {
    pub num_states: usize,
    pub num_actions: usize,
    /// Row-major `[from_pair][to_pair]`.
    pub conditional: Vec<f64>,
    /// `E_{s0 ~ d0, a0 ~ pi}[d(.|s0,a0)]`.
    pub marginal: Vec<f64>,
}

impl OccupancyTensor {
    #[inline]
    fn n(&self) -> usize {
        self.num_states * self.num_actions
    }

    /// `d(s', a' | s, a)`.
    pub fn get(&self, from: (usize, usize), to: (usize, usize)) -> f64 {
        let n = self.n();
        let i = from.0 * self.num_actions + from.1;
        let j = to.0 * self.num_actions + to.1;
        self.conditional[i * n + j]
    }

    /// The distribution over future pairs from pair index `from`.
    pub fn slice(&self, from: usize) -> &[f64] {
        let n = self.n();
        &self.conditional[from * n..(from + 1) * n]
    }

    pub fn marginal_table(&self) -> PairTable {
        PairTable {
            num_states: self.num_states,
            num_actions: self.num_actions,
            values: self.marginal.clone(),
        }
    }

    /// `E_{d(.|s,a)}[table]` for every starting pair.
    pub fn contract(&self, table: &PairTable) -> PairTable {
        let n = self.n();
        let values = (0..n)
            .map(|i| self.slice(i).iter().zip(&table.values).map(|(d, v)| d * v).sum())
            .collect();
        PairTable {
            num_states: self.num_states,
            num_actions: self.num_actions,
            values,
        }
    }

    /// `E_{d_pi}[table]` under the marginal occupancy.
    pub fn marginal_expectation(&self, table: &PairTable) -> f64 {
        self.marginal.iter().zip(&table.values).map(|(d, v)| d * v).sum()
    }

    /// Largest deviation of any slice (or the marginal) from summing to one.
    pub fn normalisation_error(&self) -> f64 {
        let n = self.n();
        let mut worst: f64 = (self.marginal.iter().sum::<f64>() - 1.0).abs();
        for i in 0..n {
            worst = worst.max((self.slice(i).iter().sum::<f64>() - 1.0).abs());
        }
        worst
    }
}

/// Computes the conditional occupancy for every starting pair by one dense inverse.
pub fn conditional_occupancy(mdp: &FiniteMdp, policy: &PolicyTable) -> Result<OccupancyTensor, MdpError> {
    policy.check_against(mdp)?;
    let n = mdp.num_pairs();
    let g = mdp.discount;
    let system = DMatrix::identity(n, n) - pair_transition_matrix(mdp, policy) * g;
    let inv = linalg::inverse(system).ok_or(MdpError::Singular)?;
    let mut conditional = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            // Clamp round-off below zero; true occupancies are non-negative.
            conditional[i * n + j] = ((1.0 - g) * inv[(i, j)]).max(0.0);
        }
    }
    let mut marginal = vec![0.0; n];
    for s0 in 0..mdp.num_states {
        let d0 = mdp.initial_dist[s0];
        if d0 == 0.0 {
            continue;
        }
        for (a0, &pi) in policy.row(s0).iter().enumerate() {
            let w = d0 * pi;
            if w == 0.0 {
                continue;
            }
            let row = &conditional[mdp.pair(s0, a0) * n..(mdp.pair(s0, a0) + 1) * n];
            for (m, d) in marginal.iter_mut().zip(row) {
                *m += w * d;
            }
        }
    }
    Ok(OccupancyTensor {
        num_states: mdp.num_states,
        num_actions: mdp.num_actions,
        conditional,
        marginal,
    })
}

/// A state-action distribution `d` with `d P_pi = d`.
///
/// Weighted by such a distribution, the averaged value-error bounds hold for
/// every Q. When several recurrent classes exist the minimum-norm solution is
/// returned, which mixes all of them with positive weight.
pub fn stationary_distribution(mdp: &FiniteMdp, policy: &PolicyTable) -> Result<Vec<f64>, MdpError> {
    policy.check_against(mdp)?;
    let n = mdp.num_pairs();
    let p = pair_transition_matrix(mdp, policy);
    let mut rows = DMatrix::zeros(n + 1, n);
    rows.view_mut((0, 0), (n, n)).copy_from(&(p.transpose() - DMatrix::identity(n, n)));
    rows.row_mut(n).fill(1.0);
    let mut rhs = DVector::zeros(n + 1);
    rhs[n] = 1.0;
    let (x, residual) = linalg::min_norm_lstsq(&rows, &rhs);
    if residual > 1e-8 {
        return Err(MdpError::Singular);
    }
    let mut d: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = d.iter().sum();
    d.iter_mut().for_each(|v| *v /= total);
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_state_occupancy_from_start() {
        let g = 0.9;
        let mdp = FiniteMdp::deterministic(
            &[vec![1], vec![1]],
            vec![vec![0.0], vec![0.0]],
            g,
            vec![1.0, 0.0],
            vec![false, false],
        )
        .unwrap();
        let occ = conditional_occupancy(&mdp, &PolicyTable::uniform(2, 1)).unwrap();
        assert!((occ.get((0, 0), (0, 0)) - (1.0 - g)).abs() < 1e-12);
        assert!((occ.get((0, 0), (1, 0)) - g).abs() < 1e-12);
        assert!((occ.get((1, 0), (1, 0)) - 1.0).abs() < 1e-12);
        assert!(occ.normalisation_error() < 1e-12);
    }

    #[test]
    fn absorbing_single_pair_has_unit_occupancy() {
        let mdp = FiniteMdp::deterministic(&[vec![0]], vec![vec![3.0]], 0.7, vec![1.0], vec![false])
            .unwrap();
        let occ = conditional_occupancy(&mdp, &PolicyTable::uniform(1, 1)).unwrap();
        assert!((occ.get((0, 0), (0, 0)) - 1.0).abs() < 1e-12);
        assert!((occ.marginal[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_distribution_of_two_state_chain() {
        // P(0 -> 1) = 0.3, P(1 -> 0) = 0.2: stationary mass (0.4, 0.6).
        let mdp = FiniteMdp::from_nested(
            vec![vec![vec![0.7, 0.3]], vec![vec![0.2, 0.8]]],
            vec![vec![0.0], vec![0.0]],
            0.9,
            vec![1.0, 0.0],
            vec![false, false],
        )
        .unwrap();
        let d = stationary_distribution(&mdp, &PolicyTable::uniform(2, 1)).unwrap();
        assert!((d[0] - 0.4).abs() < 1e-12 && (d[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn stationary_distribution_ignores_transient_states() {
        let mdp = FiniteMdp::deterministic(
            &[vec![1], vec![1]],
            vec![vec![0.0], vec![0.0]],
            0.5,
            vec![1.0, 0.0],
            vec![false, false],
        )
        .unwrap();
        let d = stationary_distribution(&mdp, &PolicyTable::uniform(2, 1)).unwrap();
        assert!(d[0].abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);
    }
}
