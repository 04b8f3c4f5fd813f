#![allow(dead_code)]

use bellman_lab::envs::{random_mdp, random_policy};
use bellman_lab::{FiniteMdp, PolicyTable, QTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random stochastic MDP with 2..=max_states states and 1..=max_actions actions.
pub fn random_instance(rng: &mut ChaCha8Rng, max_states: usize, max_actions: usize) -> (FiniteMdp, PolicyTable) {
    let ns = rng.random_range(2..=max_states);
    let na = rng.random_range(1..=max_actions);
    let gamma = rng.random_range(0.1..=0.99);
    let mdp = random_mdp(rng, ns, na, gamma);
    let policy = random_policy(rng, ns, na);
    (mdp, policy)
}

pub fn random_q(rng: &mut ChaCha8Rng, ns: usize, na: usize, scale: f64) -> QTable {
    QTable::from_fn(ns, na, |_, _| rng.random_range(-scale..=scale))
}

/// `E[r + gamma Q(s', a')]` by explicit summation, terminal states contributing nothing.
pub fn backup(mdp: &FiniteMdp, policy: &PolicyTable, q: &QTable) -> QTable {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let mut out = QTable::zeros(ns, na);
    for s in 0..ns {
        for a in 0..na {
            if mdp.terminal_mask[s] {
                continue;
            }
            let mut v = mdp.reward(s, a);
            for s2 in 0..ns {
                let p = mdp.transition_row(s, a)[s2];
                if p == 0.0 || mdp.terminal_mask[s2] {
                    continue;
                }
                for a2 in 0..na {
                    v += mdp.discount * p * policy.prob(s2, a2) * q.get(s2, a2);
                }
            }
            out.set(s, a, v);
        }
    }
    out
}

/// Policy evaluation by repeated backups until the sup-norm residual drops below `tol`.
pub fn value_iteration(mdp: &FiniteMdp, policy: &PolicyTable, tol: f64) -> QTable {
    let mut q = QTable::zeros(mdp.num_states, mdp.num_actions);
    loop {
        let next = backup(mdp, policy, &q);
        let residual = next.max_abs_diff(&q);
        q = next;
        if residual < tol {
            return q;
        }
    }
}

/// Samples a successor state of `(s, a)`.
pub fn step(mdp: &FiniteMdp, s: usize, a: usize, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let row = mdp.transition_row(s, a);
    for (s2, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return s2;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap()
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
