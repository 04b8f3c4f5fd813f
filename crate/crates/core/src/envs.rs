//! Small builtin MDPs with exactly computable values.

use std::path::Path;

use rand::Rng;

use crate::constructions::two_state_mdp;
use crate::mdp::{greedy_policy, FiniteMdp, MdpError, PolicyTable};

const VALUE_ITERATION_TOL: f64 = 1e-12;

/// Chain of `n` states. Action 0 moves left (staying at the left end), action 1
/// moves right. Reaching the rightmost state pays 1 and ends the episode.
pub fn chain(n: usize, gamma: f64) -> Result<FiniteMdp, MdpError> {
    if n < 2 {
        return Err(MdpError::Shape(format!("chain needs at least 2 states, got {n}")));
    }
    let last = n - 1;
    let next: Vec<Vec<usize>> = (0..n)
        .map(|s| if s == last { vec![s, s] } else { vec![s.saturating_sub(1), s + 1] })
        .collect();
    let reward = (0..n)
        .map(|s| if s + 1 == last { vec![0.0, 1.0] } else { vec![0.0, 0.0] })
        .collect();
    let mut d0 = vec![0.0; n];
    d0[0] = 1.0;
    let mut terminal = vec![false; n];
    terminal[last] = true;
    FiniteMdp::deterministic(&next, reward, gamma, d0, terminal)
}

/// `width x height` grid with actions up, down, left, right. Moves into a wall
/// leave the agent in place. Entering the goal in the far corner pays 1 and
/// ends the episode. Starts are uniform over non-goal cells.
pub fn gridworld(width: usize, height: usize, gamma: f64) -> Result<FiniteMdp, MdpError> {
    let n = width * height;
    if n < 2 {
        return Err(MdpError::Shape(format!("gridworld {width}x{height} has fewer than 2 cells")));
    }
    let goal = n - 1;
    let cell = |x: usize, y: usize| y * width + x;
    let mut next = Vec::with_capacity(n);
    let mut reward = Vec::with_capacity(n);
    for s in 0..n {
        let (x, y) = (s % width, s / width);
        if s == goal {
            next.push(vec![s; 4]);
            reward.push(vec![0.0; 4]);
            continue;
        }
        let moves = [
            cell(x, y.saturating_sub(1)),
            cell(x, (y + 1).min(height - 1)),
            cell(x.saturating_sub(1), y),
            cell((x + 1).min(width - 1), y),
        ];
        reward.push(moves.iter().map(|&to| if to == goal { 1.0 } else { 0.0 }).collect());
        next.push(moves.to_vec());
    }
    let mut d0 = vec![1.0 / (n - 1) as f64; n];
    d0[goal] = 0.0;
    let mut terminal = vec![false; n];
    terminal[goal] = true;
    FiniteMdp::deterministic(&next, reward, gamma, d0, terminal)
}

/// Single-action cycle `0 -> 1 -> ... -> n-1 -> 0` with rewards `s / n`.
pub fn ring(n: usize, gamma: f64) -> Result<FiniteMdp, MdpError> {
    if n < 2 {
        return Err(MdpError::Shape(format!("ring needs at least 2 states, got {n}")));
    }
    let next: Vec<Vec<usize>> = (0..n).map(|s| vec![(s + 1) % n]).collect();
    let reward = (0..n).map(|s| vec![s as f64 / n as f64]).collect();
    let mut d0 = vec![0.0; n];
    d0[0] = 1.0;
    FiniteMdp::deterministic(&next, reward, gamma, d0, vec![false; n])
}

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    // Roughly half the entries are zeroed to get sparse supports.
    let keep = rng.random_range(0..n);
    let mut w: Vec<f64> = (0..n)
        .map(|i| if i == keep || rng.random::<bool>() { rng.random::<f64>() + 1e-3 } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Random MDP with `num_states x num_actions` pairs, sparse stochastic
/// transitions, rewards in `[-1, 1]` and no terminal states.
pub fn random_mdp<R: Rng + ?Sized>(rng: &mut R, num_states: usize, num_actions: usize, gamma: f64) -> FiniteMdp {
    let transition = (0..num_states)
        .map(|_| (0..num_actions).map(|_| random_simplex(rng, num_states)).collect())
        .collect();
    let reward = (0..num_states)
        .map(|_| (0..num_actions).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    let d0 = random_simplex(rng, num_states);
    FiniteMdp::from_nested(transition, reward, gamma, d0, vec![false; num_states]).expect("random MDP is well formed")
}

/// Random stochastic policy with sparse action supports.
pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, num_states: usize, num_actions: usize) -> PolicyTable {
    PolicyTable::from_rows((0..num_states).map(|_| random_simplex(rng, num_actions)).collect())
        .expect("random policy is well formed")
}

/// Resolves `two_state`, `chain-N`, `gridworld-WxH`, or a path to an MDP JSON
/// file, paired with its evaluation policy.
///
/// The policy is the greedy policy from value iteration, except for the
/// single-action two-state MDP. A file's own discount is replaced by `gamma`.
pub fn resolve(spec: &str, gamma: f64) -> Result<(FiniteMdp, PolicyTable), MdpError> {
    let mdp = if spec == "two_state" {
        return two_state_mdp(gamma).map_err(|e| MdpError::Shape(e.to_string()));
    } else if let Some(n) = spec.strip_prefix("chain-") {
        let n = n.parse().map_err(|_| MdpError::Shape(format!("bad chain length in {spec:?}")))?;
        chain(n, gamma)?
    } else if let Some(dims) = spec.strip_prefix("gridworld-") {
        let parsed = dims
            .split_once('x')
            .and_then(|(w, h)| Some((w.parse().ok()?, h.parse().ok()?)));
        let (w, h) = parsed.ok_or_else(|| MdpError::Shape(format!("bad gridworld size in {spec:?}")))?;
        gridworld(w, h, gamma)?
    } else if Path::new(spec).exists() {
        let mdp = FiniteMdp::load(spec)?.with_discount(gamma);
        let violations = mdp.validate();
        if !violations.is_empty() {
            return Err(MdpError::Invalid(violations));
        }
        mdp
    } else {
        return Err(MdpError::Shape(format!("unknown MDP {spec:?}")));
    };
    let policy = greedy_policy(&mdp, VALUE_ITERATION_TOL);
    Ok((mdp, policy))
}
