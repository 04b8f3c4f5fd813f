//! Hand-built instances that separate Bellman error from value error, each
//! returned with a numerical certificate of the property it demonstrates.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::{missing_relevant_pairs, DataError, Dataset, Transition};
use crate::diagnostics::{bellman_error_table, random_sign_abs_bellman, value_error_bounds};
use crate::linalg::min_norm_lstsq;
use crate::mdp::{exact_q, FiniteMdp, MdpError, PairTable, PolicyTable, QTable};
use crate::occupancy::stationary_distribution;

/// Tolerance every certificate is checked at.
pub const CERTIFICATE_TOLERANCE: f64 = 1e-9;

/// Relative amount by which the inverse-relation scale `k` exceeds its
/// threshold, turning the non-strict margins at the threshold into strict ones.
pub const DEFAULT_K_SLACK: f64 = 0.01;

/// Monte-Carlo draws used when sign enumeration is too large.
const SIGN_MC_SAMPLES: usize = 100_000;

#[derive(Debug, Error)]
pub enum ConstructionError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("anchor ({0}, {1}) admits no solution")]
    Infeasible(usize, usize),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Numerical evidence that a construction has its claimed property.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstructionCertificate {
    pub claim: String,
    pub measured: BTreeMap<String, f64>,
    pub passed: bool,
    pub tolerance: f64,
    pub seed: Option<u64>,
}

impl ConstructionCertificate {
    fn new(claim: &str, measured: &[(&str, f64)], passed: bool) -> Self {
        Self {
            claim: claim.to_string(),
            measured: measured.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            passed,
            tolerance: CERTIFICATE_TOLERANCE,
            seed: None,
        }
    }

    pub fn value(&self, key: &str) -> f64 {
        self.measured.get(key).copied().unwrap_or(f64::NAN)
    }
}

fn check_gamma(gamma: f64) -> Result<(), ConstructionError> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(ConstructionError::Precondition(format!("discount {gamma} must lie in (0, 1)")))
    }
}

fn check_scale(c: f64) -> Result<(), ConstructionError> {
    if c > 0.0 && c.is_finite() {
        Ok(())
    } else {
        Err(ConstructionError::Precondition(format!("C = {c} must be positive")))
    }
}

/// `s0 -> s1`, `s1 -> s1`, one action, zero reward; `Q^pi` is identically zero.
pub fn two_state_mdp(gamma: f64) -> Result<(FiniteMdp, PolicyTable), ConstructionError> {
    check_gamma(gamma)?;
    let mdp = FiniteMdp::deterministic(
        &[vec![1], vec![1]],
        vec![vec![0.0], vec![0.0]],
        gamma,
        vec![1.0, 0.0],
        vec![false, false],
    )?;
    Ok((mdp, PolicyTable::uniform(2, 1)))
}

fn first_transition_dataset() -> Dataset {
    Dataset::single_episode(vec![Transition { s: 0, a: 0, r: 0.0, s_next: 1, terminal: false, t: 0 }])
}

fn toy_instance(
    q: QTable,
    gamma: f64,
    claim: &str,
    want_eps: f64,
    want_delta: f64,
) -> Result<(QTable, Dataset, ConstructionCertificate), ConstructionError> {
    let (mdp, pi) = two_state_mdp(gamma)?;
    let eps = bellman_error_table(&mdp, &pi, &q);
    let delta = q.sub(&exact_q(&mdp, &pi)?);
    let (e0, d0) = (eps.get(0, 0), delta.get(0, 0));
    let passed = (e0 - want_eps).abs() <= CERTIFICATE_TOLERANCE && (d0 - want_delta).abs() <= CERTIFICATE_TOLERANCE;
    let cert = ConstructionCertificate::new(
        claim,
        &[
            ("bellman_error_s0", e0),
            ("value_error_s0", d0),
            ("max_abs_bellman_error", eps.max_abs()),
            ("max_abs_value_error", delta.max_abs()),
        ],
        passed,
    );
    Ok((q, first_transition_dataset(), cert))
}

/// `Q(s0) = C`, `Q(s1) = C / gamma`: zero Bellman error on the only observed
/// transition while the value error there is `C`.
pub fn hidden_bias_instance(c: f64, gamma: f64) -> Result<(QTable, Dataset, ConstructionCertificate), ConstructionError> {
    check_scale(c)?;
    check_gamma(gamma)?;
    let q = QTable::from_rows(vec![vec![c], vec![c / gamma]]);
    toy_instance(q, gamma, "bellman error 0 and value error C at (s0, a)", 0.0, c)
}

/// `Q(s0) = 0`, `Q(s1) = -C / gamma`: Bellman error `C` at `s0` with no value error there.
pub fn visible_error_instance(c: f64, gamma: f64) -> Result<(QTable, Dataset, ConstructionCertificate), ConstructionError> {
    check_scale(c)?;
    check_gamma(gamma)?;
    let q = QTable::from_rows(vec![vec![0.0], vec![-c / gamma]]);
    toy_instance(q, gamma, "bellman error C and value error 0 at (s0, a)", c, 0.0)
}

/// `Q^pi + sigma(s,a) * amplitude` with independent fair signs `sigma`.
///
/// `signs` is one seeded draw, kept so that a concrete function can be
/// materialised reproducibly; the certificate uses the exact expectation over signs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignedQ {
    pub base: QTable,
    pub amplitude: f64,
    pub signs: Vec<i8>,
    pub seed: u64,
}

impl SignedQ {
    pub fn realize(&self) -> QTable {
        let mut q = self.base.clone();
        for (v, s) in q.values.iter_mut().zip(&self.signs) {
            *v += f64::from(*s) * self.amplitude;
        }
        q
    }
}

/// Scale `k` of the inverse-relation pair before slack.
pub fn inverse_relation_scale(c: f64, gamma: f64) -> f64 {
    (c * (1.0 - gamma) / (gamma * gamma)).max(c / gamma)
}

/// `Q1 = Q^pi + k / (1 - gamma)` and `Q2 = Q^pi +- k (1 + gamma)` with
/// `k = (1 + slack) * max(C (1 - gamma) / gamma^2, C / gamma)`.
///
/// The certificate claims `|Delta_Q1| - |Delta_Q2| > C` and
/// `E|eps_Q2| - |eps_Q1| > C` at every non-terminal pair. The second margin
/// relies on each pair having a single successor pair distinct from itself.
pub fn inverse_relation_pair(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    c: f64,
    seed: u64,
    slack: f64,
) -> Result<(QTable, SignedQ, ConstructionCertificate), ConstructionError> {
    check_scale(c)?;
    let gamma = mdp.discount;
    check_gamma(gamma)?;
    if !(slack >= 0.0 && slack.is_finite()) {
        return Err(ConstructionError::Precondition(format!("slack {slack} must be non-negative")));
    }
    let q_true = exact_q(mdp, policy)?;
    let k = (1.0 + slack) * inverse_relation_scale(c, gamma);
    let q1 = q_true.add_scalar(k / (1.0 - gamma));
    let amplitude = k * (1.0 + gamma);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signs = (0..mdp.num_pairs()).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
    let q2 = SignedQ { base: q_true.clone(), amplitude, signs, seed };

    let eps1 = bellman_error_table(mdp, policy, &q1);
    let delta1 = q1.sub(&q_true);
    let expect = random_sign_abs_bellman(mdp, policy, amplitude, SIGN_MC_SAMPLES, seed);

    let mut m = Measures::default();
    for s in (0..mdp.num_states).filter(|&s| !mdp.terminal_mask[s]) {
        for a in 0..mdp.num_actions {
            let d1 = delta1.get(s, a).abs();
            let e1 = eps1.get(s, a).abs();
            let e2 = expect.mean_abs.get(s, a);
            m.min_abs_delta_q1 = m.min_abs_delta_q1.min(d1);
            m.min_abs_eps_q1 = m.min_abs_eps_q1.min(e1);
            m.max_abs_eps_q1 = m.max_abs_eps_q1.max(e1);
            m.min_mean_abs_eps_q2 = m.min_mean_abs_eps_q2.min(e2);
            m.value_margin = m.value_margin.min(d1 - amplitude - c);
            m.bellman_margin = m.bellman_margin.min(e2 - e1 - c);
            m.std_error = m.std_error.max(expect.std_error.get(s, a));
        }
    }
    let guard = CERTIFICATE_TOLERANCE + 3.0 * m.std_error;
    let passed = m.value_margin > guard && m.bellman_margin > guard;
    let mut cert = ConstructionCertificate::new(
        "|Delta_Q1| - |Delta_Q2| > C and E|eps_Q2| - |eps_Q1| > C at every pair",
        &[
            ("k", k),
            ("c", c),
            ("abs_value_error_q1_min", m.min_abs_delta_q1),
            ("abs_value_error_q2", amplitude),
            ("abs_bellman_error_q1_min", m.min_abs_eps_q1),
            ("abs_bellman_error_q1_max", m.max_abs_eps_q1),
            ("mean_abs_bellman_error_q2_min", m.min_mean_abs_eps_q2),
            ("value_margin", m.value_margin),
            ("bellman_margin", m.bellman_margin),
            ("sign_std_error", m.std_error),
            ("sign_expectation_exact", if expect.exact { 1.0 } else { 0.0 }),
        ],
        passed,
    );
    cert.seed = Some(seed);
    Ok((q1, q2, cert))
}

struct Measures {
    min_abs_delta_q1: f64,
    min_abs_eps_q1: f64,
    max_abs_eps_q1: f64,
    min_mean_abs_eps_q2: f64,
    value_margin: f64,
    bellman_margin: f64,
    std_error: f64,
}

impl Default for Measures {
    fn default() -> Self {
        Self {
            min_abs_delta_q1: f64::INFINITY,
            min_abs_eps_q1: f64::INFINITY,
            max_abs_eps_q1: 0.0,
            min_mean_abs_eps_q2: f64::INFINITY,
            value_margin: f64::INFINITY,
            bellman_margin: f64::INFINITY,
            std_error: 0.0,
        }
    }
}

/// An MDP, its evaluation policy and a Q-function attaining a bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EqualityInstance {
    pub mdp: FiniteMdp,
    pub policy: PolicyTable,
    pub q: QTable,
    pub certificate: ConstructionCertificate,
}

fn ratio_certificate(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    q: &QTable,
    claim: &str,
    expected: f64,
) -> Result<ConstructionCertificate, ConstructionError> {
    let eps = bellman_error_table(mdp, policy, q);
    let delta = q.sub(&exact_q(mdp, policy)?);
    let (e, d) = (eps.max_abs(), delta.max_abs());
    let ratio = d / e;
    let weights = stationary_distribution(mdp, policy)?;
    let avg_delta: f64 = delta.values.iter().zip(&weights).map(|(d, w)| d.abs() * w).sum();
    let bounds = value_error_bounds(&eps, mdp.discount, &weights);
    let passed = (ratio - expected).abs() <= CERTIFICATE_TOLERANCE && bounds.contains(d, avg_delta, CERTIFICATE_TOLERANCE);
    Ok(ConstructionCertificate::new(
        claim,
        &[
            ("max_abs_bellman_error", e),
            ("max_abs_value_error", d),
            ("ratio", ratio),
            ("expected_ratio", expected),
        ],
        passed,
    ))
}

/// Q-functions attaining both ends of `max|Delta| / max|eps| in [1/(1+gamma), 1/(1-gamma)]`.
///
/// Upper: a uniform shift `C / (1 - gamma)` on the two-state MDP. Lower: a
/// two-state cycle with value errors `+-C / (1 + gamma)` of alternating sign.
pub fn bound_equality_instances(c: f64, gamma: f64) -> Result<(EqualityInstance, EqualityInstance), ConstructionError> {
    check_scale(c)?;
    check_gamma(gamma)?;
    let (mdp, policy) = two_state_mdp(gamma)?;
    let q = exact_q(&mdp, &policy)?.add_scalar(c / (1.0 - gamma));
    let certificate = ratio_certificate(&mdp, &policy, &q, "|Delta| / |eps| = 1 / (1 - gamma)", 1.0 / (1.0 - gamma))?;
    let upper = EqualityInstance { mdp, policy, q, certificate };

    let mdp = FiniteMdp::deterministic(
        &[vec![1], vec![0]],
        vec![vec![1.0], vec![0.0]],
        gamma,
        vec![1.0, 0.0],
        vec![false, false],
    )?;
    let policy = PolicyTable::uniform(2, 1);
    let q_true = exact_q(&mdp, &policy)?;
    let h = c / (1.0 + gamma);
    let q = QTable::from_rows(vec![vec![q_true.get(0, 0) + h], vec![q_true.get(1, 0) - h]]);
    let certificate = ratio_certificate(&mdp, &policy, &q, "|Delta| / |eps| = 1 / (1 + gamma)", 1.0 / (1.0 + gamma))?;
    let lower = EqualityInstance { mdp, policy, q, certificate };
    Ok((upper, lower))
}

/// A Q-function with zero Bellman error on every dataset pair whose value
/// error at `anchor` is `C`.
///
/// Solves `eps(s,a) = 0` for all dataset pairs together with
/// `Delta(anchor) = C`, with the value error free on dataset pairs and missing
/// relevant pairs and zero elsewhere. Rank deficiency is resolved by the
/// minimum-norm solution; an inconsistent system is reported as infeasible.
pub fn corollary1_value(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    dataset: &Dataset,
    c: f64,
    anchor: (usize, usize),
) -> Result<(QTable, ConstructionCertificate), ConstructionError> {
    check_scale(c)?;
    let missing = missing_relevant_pairs(dataset, mdp, policy)?;
    if missing.is_empty() {
        return Err(ConstructionError::Precondition("dataset has no missing relevant pair".into()));
    }
    let present = dataset.unique_pairs();
    if !present.contains(&anchor) {
        return Err(ConstructionError::Precondition(format!("anchor {anchor:?} is not a dataset pair")));
    }
    if mdp.terminal_mask[anchor.0] {
        return Err(ConstructionError::Precondition(format!("anchor {anchor:?} is a terminal pair")));
    }
    let free: Vec<(usize, usize)> = present
        .iter()
        .chain(&missing)
        .copied()
        .filter(|&(s, _)| !mdp.terminal_mask[s])
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let column = |s: usize, a: usize| free.iter().position(|&p| p == (s, a));
    let equations: Vec<(usize, usize)> = present.iter().copied().filter(|&(s, _)| !mdp.terminal_mask[s]).collect();
    let gamma = mdp.discount;
    let rows = equations.len() + 1;
    let mut design = DMatrix::zeros(rows, free.len());
    for (i, &(s, a)) in equations.iter().enumerate() {
        if let Some(j) = column(s, a) {
            design[(i, j)] += 1.0;
        }
        for (s2, p) in mdp.successors(s, a) {
            for (a2, &pi) in policy.row(s2).iter().enumerate() {
                if pi > 0.0 {
                    if let Some(j) = column(s2, a2) {
                        design[(i, j)] -= gamma * p * pi;
                    }
                }
            }
        }
    }
    let anchor_col = column(anchor.0, anchor.1).expect("anchor is free");
    design[(rows - 1, anchor_col)] = 1.0;
    let mut targets = DVector::zeros(rows);
    targets[rows - 1] = c;
    let (x, residual) = min_norm_lstsq(&design, &targets);
    if residual > CERTIFICATE_TOLERANCE {
        return Err(ConstructionError::Infeasible(anchor.0, anchor.1));
    }

    let q_true = exact_q(mdp, policy)?;
    let mut delta = PairTable::zeros(mdp.num_states, mdp.num_actions);
    for (j, &(s, a)) in free.iter().enumerate() {
        delta.set(s, a, x[j]);
    }
    let q = q_true.add(&delta);
    let eps = bellman_error_table(mdp, policy, &q);
    let max_eps = equations.iter().fold(0.0_f64, |m, &(s, a)| m.max(eps.get(s, a).abs()));
    let anchor_delta = q.get(anchor.0, anchor.1) - q_true.get(anchor.0, anchor.1);
    let passed = max_eps <= CERTIFICATE_TOLERANCE && (anchor_delta - c).abs() <= CERTIFICATE_TOLERANCE;
    let cert = ConstructionCertificate::new(
        "bellman error 0 on every dataset pair and value error C at the anchor",
        &[
            ("max_abs_bellman_error_on_dataset", max_eps),
            ("anchor_value_error", anchor_delta),
            ("c", c),
            ("missing_relevant_pairs", missing.len() as f64),
            ("max_abs_value_error", delta.max_abs()),
        ],
        passed,
    );
    Ok((q, cert))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(n: usize, gamma: f64) -> (FiniteMdp, PolicyTable) {
        let next: Vec<Vec<usize>> = (0..n).map(|s| vec![(s + 1) % n]).collect();
        let reward = (0..n).map(|s| vec![s as f64 * 0.5 - 1.0]).collect();
        let mut d0 = vec![0.0; n];
        d0[0] = 1.0;
        let mdp = FiniteMdp::deterministic(&next, reward, gamma, d0, vec![false; n]).unwrap();
        (mdp, PolicyTable::uniform(n, 1))
    }

    #[test]
    fn two_state_has_zero_values() {
        let (mdp, pi) = two_state_mdp(0.99).unwrap();
        assert!(mdp.validate().is_empty());
        assert!(exact_q(&mdp, &pi).unwrap().max_abs() == 0.0);
        assert!(two_state_mdp(1.0).is_err());
    }

    #[test]
    fn toy_instances() {
        let (q, data, cert) = hidden_bias_instance(5.0, 0.99).unwrap();
        assert_eq!(q.get(1, 0), 5.0 / 0.99);
        assert_eq!(data.len(), 1);
        assert!(cert.passed);
        assert!(cert.value("bellman_error_s0").abs() < 1e-12);
        let (q, _, cert) = visible_error_instance(1.0, 0.5).unwrap();
        assert_eq!(q.get(1, 0), -2.0);
        assert!(cert.passed);
        assert!((cert.value("bellman_error_s0") - 1.0).abs() < 1e-12);
        assert!(hidden_bias_instance(0.0, 0.5).is_err());
    }

    #[test]
    fn inverse_pair_hand_values_at_threshold() {
        let (mdp, pi) = ring(3, 0.5);
        let (_, q2, cert) = inverse_relation_pair(&mdp, &pi, 1.0, 7, 0.0).unwrap();
        assert!((cert.value("k") - 2.0).abs() < 1e-12);
        assert!((cert.value("abs_value_error_q1_min") - 4.0).abs() < 1e-12);
        assert!((q2.amplitude - 3.0).abs() < 1e-12);
        assert!((cert.value("abs_bellman_error_q1_min") - 2.0).abs() < 1e-12);
        assert!((cert.value("mean_abs_bellman_error_q2_min") - 3.0).abs() < 1e-12);
        // Margins sit exactly at C, so the strict claim does not hold.
        assert!(!cert.passed);
        let (_, _, cert) = inverse_relation_pair(&mdp, &pi, 1.0, 7, DEFAULT_K_SLACK).unwrap();
        assert!(cert.passed);
    }

    #[test]
    fn realized_q2_has_constant_value_error() {
        let (mdp, pi) = ring(4, 0.9);
        let (_, q2, _) = inverse_relation_pair(&mdp, &pi, 2.0, 3, DEFAULT_K_SLACK).unwrap();
        let delta = q2.realize().sub(&exact_q(&mdp, &pi).unwrap());
        assert!(delta.values.iter().all(|d| (d.abs() - q2.amplitude).abs() < 1e-9));
    }

    #[test]
    fn bound_instances_hit_both_ends() {
        let (up, low) = bound_equality_instances(1.0, 0.99).unwrap();
        assert!(up.certificate.passed && low.certificate.passed);
        assert!((up.certificate.value("max_abs_value_error") - 100.0).abs() < 1e-9);
        assert!((low.certificate.value("max_abs_value_error") - 1.0 / 1.99).abs() < 1e-9);
        let (up, low) = bound_equality_instances(2.0, 0.5).unwrap();
        assert!((up.certificate.value("ratio") - 2.0).abs() < 1e-12);
        assert!((low.certificate.value("ratio") - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn missing_pair_value_recovers_hidden_bias() {
        let (mdp, pi) = two_state_mdp(0.99).unwrap();
        let (q, cert) = corollary1_value(&mdp, &pi, &first_transition_dataset(), 5.0, (0, 0)).unwrap();
        assert!(cert.passed);
        assert!((q.get(0, 0) - 5.0).abs() < 1e-9);
        assert!((q.get(1, 0) - 5.0 / 0.99).abs() < 1e-9);
    }

    #[test]
    fn missing_pair_value_requires_a_gap() {
        let (mdp, pi) = two_state_mdp(0.9).unwrap();
        let full = Dataset::single_episode(vec![
            Transition { s: 0, a: 0, r: 0.0, s_next: 1, terminal: false, t: 0 },
            Transition { s: 1, a: 0, r: 0.0, s_next: 1, terminal: false, t: 1 },
        ]);
        assert!(matches!(
            corollary1_value(&mdp, &pi, &full, 1.0, (0, 0)),
            Err(ConstructionError::Precondition(_))
        ));
    }
}
