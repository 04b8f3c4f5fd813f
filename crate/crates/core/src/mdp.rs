//! Finite MDPs, tabular policies and exact policy evaluation.
//!
//! All tensors are stored flat in row-major order. A state-action pair
//! `(s, a)` maps to the index `s * num_actions + a`; the transition entry
//! `P[s][a][s']` lives at `pair(s, a) * num_states + s'`.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("invalid MDP: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("policy evaluation system is singular or produced non-finite values")]
    Singular,
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed MDP file: {0}")]
    Format(#[from] serde_json::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Numerical tolerances used by validation and the exact solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Row sums of probability tables.
    pub probability: f64,
    /// Bellman fixed-point residual of the exact solution.
    pub fixed_point: f64,
    /// Normalisation of occupancy slices.
    pub occupancy: f64,
    /// Entries of an occupancy above this count as reachable.
    pub support: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            probability: 1e-12,
            fixed_point: 1e-10,
            occupancy: 1e-10,
            support: 1e-12,
        }
    }
}

/// One broken invariant found by [`FiniteMdp::validate`] or [`PolicyTable::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape(String),
    Discount(f64),
    RowSum { state: usize, action: usize, sum: f64 },
    NegativeProbability { state: usize, action: usize, next: usize, value: f64 },
    NonFinite { what: &'static str, index: usize },
    InitialSum(f64),
    NegativeInitial { state: usize, value: f64 },
    TerminalNotAbsorbing { state: usize, action: usize },
    TerminalReward { state: usize, action: usize, value: f64 },
    PolicyRowSum { state: usize, sum: f64 },
    NegativePolicy { state: usize, action: usize, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(m) => write!(f, "shape: {m}"),
            Violation::Discount(g) => write!(f, "discount {g} outside [0, 1)"),
            Violation::RowSum { state, action, sum } => {
                write!(f, "P[{state}][{action}] sums to {sum}")
            }
            Violation::NegativeProbability { state, action, next, value } => {
                write!(f, "P[{state}][{action}][{next}] = {value} is negative")
            }
            Violation::NonFinite { what, index } => write!(f, "{what}[{index}] is not finite"),
            Violation::InitialSum(s) => write!(f, "initial distribution sums to {s}"),
            Violation::NegativeInitial { state, value } => {
                write!(f, "initial distribution d0[{state}] = {value} is negative")
            }
            Violation::TerminalNotAbsorbing { state, action } => {
                write!(f, "terminal state {state} does not self-loop under action {action}")
            }
            Violation::TerminalReward { state, action, value } => {
                write!(f, "terminal state {state} has reward {value} under action {action}")
            }
            Violation::PolicyRowSum { state, sum } => write!(f, "pi[{state}] sums to {sum}"),
            Violation::NegativePolicy { state, action, value } => {
                write!(f, "pi[{state}][{action}] = {value} is negative")
            }
        }
    }
}

/// Tabular MDP with discount, initial distribution and absorbing terminals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MdpFile", try_from = "MdpFile")]
pub struct FiniteMdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    pub discount: f64,
    pub initial_dist: Vec<f64>,
    pub terminal_mask: Vec<bool>,
}

/// Nested on-disk layout of [`FiniteMdp`].
#[derive(Serialize, Deserialize)]
struct MdpFile {
    num_states: usize,
    num_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    discount: f64,
    initial_dist: Vec<f64>,
    terminal_mask: Vec<bool>,
}

impl From<FiniteMdp> for MdpFile {
    fn from(m: FiniteMdp) -> Self {
        let (ns, na) = (m.num_states, m.num_actions);
        MdpFile {
            num_states: ns,
            num_actions: na,
            transition: (0..ns)
                .map(|s| {
                    (0..na)
                        .map(|a| m.transition_row(s, a).to_vec())
                        .collect()
                })
                .collect(),
            reward: m.reward.chunks(na).map(|c| c.to_vec()).collect(),
            discount: m.discount,
            initial_dist: m.initial_dist,
            terminal_mask: m.terminal_mask,
        }
    }
}

impl TryFrom<MdpFile> for FiniteMdp {
    type Error = MdpError;

    fn try_from(f: MdpFile) -> Result<Self, MdpError> {
        FiniteMdp::from_nested(f.transition, f.reward, f.discount, f.initial_dist, f.terminal_mask)
    }
}

impl FiniteMdp {
    /// Builds an MDP from flat tensors and rejects it if any invariant fails.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
        initial_dist: Vec<f64>,
        terminal_mask: Vec<bool>,
    ) -> Result<Self, MdpError> {
        let mdp = Self {
            num_states,
            num_actions,
            transition,
            reward,
            discount,
            initial_dist,
            terminal_mask,
        };
        let report = mdp.validate();
        if report.is_empty() {
            Ok(mdp)
        } else {
            Err(MdpError::Invalid(report))
        }
    }

    /// Builds an MDP from `P[s][a][s']` and `r[s][a]` nested vectors.
    pub fn from_nested(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        discount: f64,
        initial_dist: Vec<f64>,
        terminal_mask: Vec<bool>,
    ) -> Result<Self, MdpError> {
        let ns = transition.len();
        let na = transition.first().map_or(0, |r| r.len());
        if ns == 0 || na == 0 {
            return Err(MdpError::Shape("MDP needs at least one state and action".into()));
        }
        if reward.len() != ns {
            return Err(MdpError::Shape(format!("reward has {} rows, expected {ns}", reward.len())));
        }
        let mut flat_p = Vec::with_capacity(ns * na * ns);
        let mut flat_r = Vec::with_capacity(ns * na);
        for (s, (prow, rrow)) in transition.into_iter().zip(reward).enumerate() {
            if prow.len() != na || rrow.len() != na {
                return Err(MdpError::Shape(format!("state {s} does not list {na} actions")));
            }
            for (a, next) in prow.into_iter().enumerate() {
                if next.len() != ns {
                    return Err(MdpError::Shape(format!(
                        "P[{s}][{a}] has {} entries, expected {ns}",
                        next.len()
                    )));
                }
                flat_p.extend(next);
            }
            flat_r.extend(rrow);
        }
        Self::new(ns, na, flat_p, flat_r, discount, initial_dist, terminal_mask)
    }

    /// Builds an MDP whose every `(s, a)` moves to `next[s][a]` with certainty.
    pub fn deterministic(
        next: &[Vec<usize>],
        reward: Vec<Vec<f64>>,
        discount: f64,
        initial_dist: Vec<f64>,
        terminal_mask: Vec<bool>,
    ) -> Result<Self, MdpError> {
        let ns = next.len();
        let transition = next
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&to| {
                        let mut p = vec![0.0; ns];
                        if to < ns {
                            p[to] = 1.0;
                        }
                        p
                    })
                    .collect()
            })
            .collect();
        Self::from_nested(transition, reward, discount, initial_dist, terminal_mask)
    }

    #[inline]
    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    #[inline]
    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    #[inline]
    pub fn unpair(&self, idx: usize) -> (usize, usize) {
        (idx / self.num_actions, idx % self.num_actions)
    }

    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = self.pair(s, a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[self.pair(s, a)]
    }

    /// Next states reachable from `(s, a)` with their probabilities.
    pub fn successors(&self, s: usize, a: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.transition_row(s, a)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(s2, &p)| (s2, p))
    }

    pub fn is_deterministic(&self) -> bool {
        self.transition.iter().all(|&p| p == 0.0 || p == 1.0)
    }

    pub fn with_discount(&self, discount: f64) -> Self {
        Self { discount, ..self.clone() }
    }

    pub fn validate(&self) -> Vec<Violation> {
        self.validate_with(&Tolerances::default())
    }

    /// Lists every violated invariant; an empty report means the MDP is valid.
    pub fn validate_with(&self, tol: &Tolerances) -> Vec<Violation> {
        let (ns, na) = (self.num_states, self.num_actions);
        let mut out = Vec::new();
        if ns == 0 || na == 0 {
            out.push(Violation::Shape("MDP needs at least one state and action".into()));
            return out;
        }
        let shapes = [
            ("transition", self.transition.len(), ns * na * ns),
            ("reward", self.reward.len(), ns * na),
            ("initial_dist", self.initial_dist.len(), ns),
            ("terminal_mask", self.terminal_mask.len(), ns),
        ];
        for (name, got, want) in shapes {
            if got != want {
                out.push(Violation::Shape(format!("{name} has {got} entries, expected {want}")));
            }
        }
        if !out.is_empty() {
            return out;
        }
        if !(0.0..1.0).contains(&self.discount) {
            out.push(Violation::Discount(self.discount));
        }
        for (i, r) in self.reward.iter().enumerate() {
            if !r.is_finite() {
                out.push(Violation::NonFinite { what: "reward", index: i });
            }
        }
        for s in 0..ns {
            for a in 0..na {
                let row = self.transition_row(s, a);
                let mut sum = 0.0;
                for (next, &p) in row.iter().enumerate() {
                    if !p.is_finite() {
                        out.push(Violation::NonFinite {
                            what: "transition",
                            index: self.pair(s, a) * ns + next,
                        });
                    } else if p < 0.0 {
                        out.push(Violation::NegativeProbability { state: s, action: a, next, value: p });
                    }
                    sum += p;
                }
                if !((sum - 1.0).abs() <= tol.probability) {
                    out.push(Violation::RowSum { state: s, action: a, sum });
                }
                if self.terminal_mask[s] {
                    if row[s] != 1.0 {
                        out.push(Violation::TerminalNotAbsorbing { state: s, action: a });
                    }
                    let r = self.reward(s, a);
                    if r != 0.0 {
                        out.push(Violation::TerminalReward { state: s, action: a, value: r });
                    }
                }
            }
        }
        let mut total = 0.0;
        for (s, &d) in self.initial_dist.iter().enumerate() {
            if !d.is_finite() {
                out.push(Violation::NonFinite { what: "initial_dist", index: s });
            } else if d < 0.0 {
                out.push(Violation::NegativeInitial { state: s, value: d });
            }
            total += d;
        }
        if !((total - 1.0).abs() <= tol.probability) {
            out.push(Violation::InitialSum(total));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("MDP serialises")
    }

    /// Parses an MDP and re-runs validation on it.
    pub fn from_json(text: &str) -> Result<Self, MdpError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MdpError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MdpError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the compact JSON encoding.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("MDP serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Stochastic policy `pi[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub num_states: usize,
    pub num_actions: usize,
    pub probs: Vec<f64>,
}

impl PolicyTable {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, MdpError> {
        let ns = rows.len();
        let na = rows.first().map_or(0, |r| r.len());
        if ns == 0 || na == 0 || rows.iter().any(|r| r.len() != na) {
            return Err(MdpError::Shape("policy rows must be non-empty and equal length".into()));
        }
        let p = Self {
            num_states: ns,
            num_actions: na,
            probs: rows.concat(),
        };
        let report = p.validate();
        if report.is_empty() {
            Ok(p)
        } else {
            Err(MdpError::Invalid(report))
        }
    }

    /// One-hot policy choosing `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], num_actions: usize) -> Self {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            assert!(a < num_actions, "action {a} out of range");
            probs[s * num_actions + a] = 1.0;
        }
        Self {
            num_states: actions.len(),
            num_actions,
            probs,
        }
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn is_deterministic(&self) -> bool {
        self.probs.iter().all(|&p| p == 0.0 || p == 1.0)
    }

    /// The chosen action when the row for `s` is one-hot.
    pub fn action(&self, s: usize) -> Option<usize> {
        let row = self.row(s);
        row.iter().position(|&p| p == 1.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_index(self.row(s), rng)
    }

    pub fn validate(&self) -> Vec<Violation> {
        self.validate_with(&Tolerances::default())
    }

    pub fn validate_with(&self, tol: &Tolerances) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.probs.len() != self.num_states * self.num_actions {
            out.push(Violation::Shape(format!(
                "policy has {} entries, expected {}",
                self.probs.len(),
                self.num_states * self.num_actions
            )));
            return out;
        }
        for s in 0..self.num_states {
            let mut sum = 0.0;
            for (a, &p) in self.row(s).iter().enumerate() {
                if !p.is_finite() {
                    out.push(Violation::NonFinite { what: "policy", index: s * self.num_actions + a });
                } else if p < 0.0 {
                    out.push(Violation::NegativePolicy { state: s, action: a, value: p });
                }
                sum += p;
            }
            if !((sum - 1.0).abs() <= tol.probability) {
                out.push(Violation::PolicyRowSum { state: s, sum });
            }
        }
        out
    }

    pub(crate) fn check_against(&self, mdp: &FiniteMdp) -> Result<(), MdpError> {
        if self.num_states != mdp.num_states || self.num_actions != mdp.num_actions {
            return Err(MdpError::Shape(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.num_states, self.num_actions, mdp.num_states, mdp.num_actions
            )));
        }
        Ok(())
    }
}

/// Draws an index from a probability vector.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// How the next action `a'` enters a bootstrapped target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NextAction {
    /// Average over `pi(.|s')` exactly.
    #[default]
    Expected,
    /// Draw one `a' ~ pi(.|s')`.
    Sampled,
}

/// A real number per state-action pair: Q-values, Bellman errors, value errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTable {
    pub num_states: usize,
    pub num_actions: usize,
    pub values: Vec<f64>,
}

pub type QTable = PairTable;

impl PairTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self::constant(num_states, num_actions, 0.0)
    }

    pub fn constant(num_states: usize, num_actions: usize, c: f64) -> Self {
        Self {
            num_states,
            num_actions,
            values: vec![c; num_states * num_actions],
        }
    }

    pub fn from_fn(num_states: usize, num_actions: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(num_states * num_actions);
        for s in 0..num_states {
            for a in 0..num_actions {
                values.push(f(s, a));
            }
        }
        Self { num_states, num_actions, values }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let num_states = rows.len();
        let num_actions = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == num_actions), "ragged table");
        Self {
            num_states,
            num_actions,
            values: rows.concat(),
        }
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.num_actions + a]
    }

    #[inline]
    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.num_actions + a] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            num_states: self.num_states,
            num_actions: self.num_actions,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(
            (self.num_states, self.num_actions),
            (other.num_states, other.num_actions),
            "table shapes differ"
        );
        Self {
            num_states: self.num_states,
            num_actions: self.num_actions,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.sub(other).max_abs()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Zeroes every entry of a terminal state.
    pub fn with_terminals_zeroed(mut self, terminal_mask: &[bool]) -> Self {
        for (s, &t) in terminal_mask.iter().enumerate() {
            if t {
                for a in 0..self.num_actions {
                    self.set(s, a, 0.0);
                }
            }
        }
        self
    }

    pub(crate) fn check_against(&self, mdp: &FiniteMdp) -> Result<(), MdpError> {
        if self.num_states != mdp.num_states || self.num_actions != mdp.num_actions {
            return Err(MdpError::Shape(format!(
                "table is {}x{}, MDP is {}x{}",
                self.num_states, self.num_actions, mdp.num_states, mdp.num_actions
            )));
        }
        Ok(())
    }
}

/// The pair-to-pair transition matrix `P_pi[(s,a),(s',a')] = P(s'|s,a) pi(a'|s')`.
pub fn pair_transition_matrix(mdp: &FiniteMdp, policy: &PolicyTable) -> DMatrix<f64> {
    let n = mdp.num_pairs();
    let na = mdp.num_actions;
    let mut m = DMatrix::zeros(n, n);
    for s in 0..mdp.num_states {
        for a in 0..na {
            let row = mdp.pair(s, a);
            for (s2, p) in mdp.successors(s, a) {
                for (a2, &pi) in policy.row(s2).iter().enumerate() {
                    if pi > 0.0 {
                        m[(row, s2 * na + a2)] += p * pi;
                    }
                }
            }
        }
    }
    m
}

/// `E[table(s', a')]` under `P(.|s,a)` and `pi` for every pair.
pub fn next_expectation(mdp: &FiniteMdp, policy: &PolicyTable, table: &PairTable) -> PairTable {
    let mut state_value = vec![0.0; mdp.num_states];
    for (s, v) in state_value.iter_mut().enumerate() {
        *v = policy
            .row(s)
            .iter()
            .enumerate()
            .map(|(a, &pi)| if pi > 0.0 { pi * table.get(s, a) } else { 0.0 })
            .sum();
    }
    PairTable::from_fn(mdp.num_states, mdp.num_actions, |s, a| {
        mdp.successors(s, a).map(|(s2, p)| p * state_value[s2]).sum()
    })
}

/// `TQ(s,a) = r(s,a) + gamma * E[Q(s',a')]`, with the expectation taken exactly.
pub fn apply_bellman_operator(mdp: &FiniteMdp, policy: &PolicyTable, q: &QTable) -> QTable {
    let next = next_expectation(mdp, policy, q);
    PairTable::from_fn(mdp.num_states, mdp.num_actions, |s, a| {
        mdp.reward(s, a) + mdp.discount * next.get(s, a)
    })
}

/// Solves `Q = r + gamma P_pi Q` directly, returning `Q^pi`.
pub fn exact_q(mdp: &FiniteMdp, policy: &PolicyTable) -> Result<QTable, MdpError> {
    policy.check_against(mdp)?;
    if !mdp.discount.is_finite() || !mdp.reward.iter().all(|r| r.is_finite()) {
        return Err(MdpError::NonFinite("rewards or discount"));
    }
    if !(0.0..1.0).contains(&mdp.discount) {
        return Err(MdpError::Singular);
    }
    let n = mdp.num_pairs();
    let system = DMatrix::identity(n, n) - pair_transition_matrix(mdp, policy) * mdp.discount;
    let rhs = DVector::from_column_slice(&mdp.reward);
    let q = linalg::solve(system, &rhs).ok_or(MdpError::Singular)?;
    Ok(PairTable {
        num_states: mdp.num_states,
        num_actions: mdp.num_actions,
        values: q.as_slice().to_vec(),
    })
}

/// Deterministic greedy policy from value iteration on the optimal values.
///
/// Ties (within `1e-9`) break toward the lowest action index; terminal states
/// pick action 0.
pub fn greedy_policy(mdp: &FiniteMdp, tol: f64) -> PolicyTable {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let mut v = vec![0.0; ns];
    let backup = |v: &[f64], s: usize, a: usize| -> f64 {
        mdp.reward(s, a) + mdp.discount * mdp.successors(s, a).map(|(s2, p)| p * v[s2]).sum::<f64>()
    };
    for _ in 0..100_000 {
        let mut delta: f64 = 0.0;
        let next: Vec<f64> = (0..ns)
            .map(|s| (0..na).map(|a| backup(&v, s, a)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        for (old, new) in v.iter().zip(&next) {
            delta = delta.max((old - new).abs());
        }
        v = next;
        if delta < tol {
            break;
        }
    }
    let actions: Vec<usize> = (0..ns)
        .map(|s| {
            if mdp.terminal_mask[s] {
                return 0;
            }
            let qs: Vec<f64> = (0..na).map(|a| backup(&v, s, a)).collect();
            let best = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            qs.iter().position(|&q| q >= best - 1e-9).unwrap_or(0)
        })
        .collect();
    PolicyTable::deterministic(&actions, na)
}
