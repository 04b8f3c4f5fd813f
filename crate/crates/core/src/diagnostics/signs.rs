use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mdp::{FiniteMdp, PairTable, PolicyTable};

/// Largest number of independent signs summed over exhaustively.
pub const MAX_ENUMERATED_SIGNS: usize = 20;

/// `E|eps|` of a Q-function whose value error is an independent random sign
/// times a fixed amplitude at every pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SignExpectation {
    pub mean_abs: PairTable,
    /// Zero where the expectation was enumerated exactly.
    pub std_error: PairTable,
    /// True when no pair needed the Monte-Carlo fallback.
    pub exact: bool,
}

/// Expected absolute Bellman error of `Q^pi + sigma * amplitude` with
/// independent fair signs `sigma(s,a)`.
///
/// For each pair the Bellman error only depends on the signs of the pair itself
/// and of its successor pairs. When there are at most [`MAX_ENUMERATED_SIGNS`] of
/// them every sign pattern is enumerated; otherwise `mc_samples` draws are
/// averaged and the standard error is reported.
pub fn random_sign_abs_bellman(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    amplitude: f64,
    mc_samples: usize,
    seed: u64,
) -> SignExpectation {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let gamma = mdp.discount;
    let mut mean_abs = PairTable::zeros(ns, na);
    let mut std_error = PairTable::zeros(ns, na);
    let mut exact = true;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in 0..ns {
        for a in 0..na {
            let me = mdp.pair(s, a);
            // Coefficient of each involved sign in eps(s,a) / amplitude.
            let mut coeffs: Vec<(usize, f64)> = vec![(me, 1.0)];
            for (s2, p) in mdp.successors(s, a) {
                for (a2, &pi) in policy.row(s2).iter().enumerate() {
                    if pi > 0.0 {
                        let j = mdp.pair(s2, a2);
                        let w = -gamma * p * pi;
                        match coeffs.iter_mut().find(|(k, _)| *k == j) {
                            Some(c) => c.1 += w,
                            None => coeffs.push((j, w)),
                        }
                    }
                }
            }
            let m = coeffs.len();
            if m <= MAX_ENUMERATED_SIGNS {
                let patterns = 1u64 << m;
                let mut total = 0.0;
                for bits in 0..patterns {
                    let v: f64 = coeffs
                        .iter()
                        .enumerate()
                        .map(|(i, (_, c))| if bits >> i & 1 == 1 { *c } else { -*c })
                        .sum();
                    total += v.abs();
                }
                mean_abs.set(s, a, amplitude * total / patterns as f64);
            } else {
                exact = false;
                let (mut sum, mut sum_sq) = (0.0, 0.0);
                for _ in 0..mc_samples {
                    let v: f64 = coeffs
                        .iter()
                        .map(|(_, c)| if rng.random::<bool>() { *c } else { -*c })
                        .sum::<f64>()
                        .abs()
                        * amplitude;
                    sum += v;
                    sum_sq += v * v;
                }
                let n = mc_samples.max(2) as f64;
                let mean = sum / n;
                let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
                mean_abs.set(s, a, mean);
                std_error.set(s, a, (var / n).sqrt());
            }
        }
    }
    SignExpectation {
        mean_abs,
        std_error,
        exact,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_successor_matches_closed_form() {
        // Two-cycle: eps = A(sigma0 - gamma sigma1), E|.| = A.
        let mdp = FiniteMdp::deterministic(
            &[vec![1], vec![0]],
            vec![vec![0.0], vec![0.0]],
            0.5,
            vec![1.0, 0.0],
            vec![false, false],
        )
        .unwrap();
        let out = random_sign_abs_bellman(&mdp, &PolicyTable::uniform(2, 1), 3.0, 0, 0);
        assert!(out.exact);
        assert!(out.mean_abs.values.iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn self_loop_shares_the_sign() {
        let mdp = FiniteMdp::deterministic(&[vec![0]], vec![vec![0.0]], 0.5, vec![1.0], vec![false])
            .unwrap();
        let out = random_sign_abs_bellman(&mdp, &PolicyTable::uniform(1, 1), 2.0, 0, 0);
        assert!((out.mean_abs.get(0, 0) - 1.0).abs() < 1e-12);
    }
}
