//! Bellman error, value error, and the identities that connect them.

mod bounds;
mod metrics;
mod signs;
mod stats;

use std::io::Write;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::{Dataset, Transition};
use crate::mdp::{
    apply_bellman_operator, exact_q, next_expectation, FiniteMdp, MdpError, PairTable, PolicyTable,
    QTable,
};
use crate::occupancy::{conditional_occupancy, OccupancyTensor};

pub use bounds::{value_error_bounds, BoundsReport};
pub use metrics::{empirical_metrics, write_metric_rows, MetricContext, MetricRecord};
pub use signs::{random_sign_abs_bellman, SignExpectation, MAX_ENUMERATED_SIGNS};
pub use stats::pearson;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sequences must have equal length >= 2 (got {0} and {1})")]
    Length(usize, usize),
    #[error("zero variance in {0}")]
    DegenerateVariance(&'static str),
    #[error("normaliser K must be positive and finite (got {0})")]
    Normaliser(f64),
    #[error("dataset pair ({0}, {1}) is outside the MDP")]
    PairOutOfRange(usize, usize),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// `eps(s,a) = Q(s,a) - E[r + gamma Q(s',a')]`, exact over `P` and `pi`.
pub fn bellman_error_table(mdp: &FiniteMdp, policy: &PolicyTable, q: &QTable) -> PairTable {
    q.sub(&apply_bellman_operator(mdp, policy, q))
}

/// `Q - Q^pi`.
pub fn value_error_table(q: &QTable, q_true: &QTable) -> PairTable {
    q.sub(q_true)
}

/// Single-transition TD error `Q(s,a) - (r + gamma Q(s',a'))` with `a' ~ pi`.
///
/// A terminal transition does not bootstrap.
pub fn td_error<R: Rng + ?Sized>(
    transition: &Transition,
    q: &QTable,
    policy: &PolicyTable,
    gamma: f64,
    rng: &mut R,
) -> f64 {
    let bootstrap = if transition.terminal {
        0.0
    } else {
        gamma * q.get(transition.s_next, policy.sample(transition.s_next, rng))
    };
    q.get(transition.s, transition.a) - (transition.r + bootstrap)
}

/// Bellman error recovered from value error: `eps = Delta - gamma E[Delta(s',a')]`.
pub fn bellman_from_value(mdp: &FiniteMdp, policy: &PolicyTable, delta: &PairTable) -> PairTable {
    let next = next_expectation(mdp, policy, delta);
    delta.zip_with(&next, |d, n| d - mdp.discount * n)
}

/// Value error recovered from Bellman error: `Delta = E_{d(.|s,a)}[eps] / (1 - gamma)`.
pub fn value_from_bellman(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    eps: &PairTable,
) -> Result<PairTable, MdpError> {
    let occ = conditional_occupancy(mdp, policy)?;
    Ok(value_from_bellman_with(&occ, mdp.discount, eps))
}

/// [`value_from_bellman`] against a precomputed occupancy.
pub fn value_from_bellman_with(occ: &OccupancyTensor, gamma: f64, eps: &PairTable) -> PairTable {
    occ.contract(eps).map(|v| v / (1.0 - gamma))
}

/// Bellman and value error of one Q-function over every pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorTable {
    pub bellman: PairTable,
    pub value: PairTable,
}

impl ErrorTable {
    pub fn compute(mdp: &FiniteMdp, policy: &PolicyTable, q: &QTable) -> Result<Self, MdpError> {
        q.check_against(mdp)?;
        let q_true = exact_q(mdp, policy)?;
        Ok(Self {
            bellman: bellman_error_table(mdp, policy, q),
            value: value_error_table(q, &q_true),
        })
    }

    /// Rows `(state, action, bellman_error, value_error)`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DiagnosticsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["state", "action", "bellman_error", "value_error"])?;
        let na = self.bellman.num_actions;
        for (i, (b, v)) in self.bellman.values.iter().zip(&self.value.values).enumerate() {
            w.serialize((i / na, i % na, b, v))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Outcome of the dataset-restricted improvement condition for one Bellman backup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ImprovementCheck {
    /// `gamma * max_D |E[Delta(s',a')]| < max_D |Delta|`.
    pub premise: bool,
    /// `max_D |Delta_{TQ}| < max_D |Delta_Q|`.
    pub conclusion: bool,
}

pub fn fqe_improvement_check(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    q: &QTable,
    dataset: &Dataset,
) -> Result<ImprovementCheck, DiagnosticsError> {
    if dataset.is_empty() {
        return Err(DiagnosticsError::EmptyDataset);
    }
    q.check_against(mdp)?;
    let pairs = dataset.unique_pairs();
    if let Some(&(s, a)) = pairs.iter().find(|(s, a)| *s >= mdp.num_states || *a >= mdp.num_actions) {
        return Err(DiagnosticsError::PairOutOfRange(s, a));
    }
    let q_true = exact_q(mdp, policy)?;
    let delta = q.sub(&q_true);
    let next_delta = next_expectation(mdp, policy, &delta);
    let delta_backup = apply_bellman_operator(mdp, policy, q).sub(&q_true);
    let max_on = |t: &PairTable| pairs.iter().fold(0.0_f64, |m, &(s, a)| m.max(t.get(s, a).abs()));
    let current = max_on(&delta);
    Ok(ImprovementCheck {
        premise: mdp.discount * max_on(&next_delta) < current,
        conclusion: max_on(&delta_backup) < current,
    })
}
