use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{derive_seed, ExperimentConfig, ExperimentError, NamedCertificate, StudyReport};
use crate::constructions::{
    bound_equality_instances, corollary1_value, hidden_bias_instance, inverse_relation_pair, visible_error_instance,
    ConstructionCertificate, DEFAULT_K_SLACK,
};
use crate::data::{collect_transitions, Dataset};
use crate::diagnostics::{
    bellman_error_table, bellman_from_value, empirical_metrics, fqe_improvement_check, value_error_bounds,
    value_from_bellman_with, MetricContext,
};
use crate::envs::{chain, random_mdp, random_policy, ring};
use crate::mdp::{apply_bellman_operator, exact_q, FiniteMdp, NextAction, PolicyTable, QTable};
use crate::occupancy::{conditional_occupancy, stationary_distribution};

fn draw_scale_and_discount(rng: &mut ChaCha8Rng) -> (f64, f64) {
    (rng.random_range(0.1..=10.0), rng.random_range(0.1..=0.99))
}

fn named(name: String, cert: ConstructionCertificate) -> NamedCertificate {
    NamedCertificate { name, hard: true, certificate: cert }
}

/// The 5-state chain with its final non-terminal pair removed from on-policy data.
fn chain_with_gap(gamma: f64) -> Result<(FiniteMdp, PolicyTable, Dataset), ExperimentError> {
    let mdp = chain(5, gamma)?;
    let policy = PolicyTable::deterministic(&[1; 5], 2);
    let data = collect_transitions(&mdp, &policy, 4, 10, 0)?;
    let gap = data.without_pairs(&[(3, 1)].into_iter().collect());
    Ok((mdp, policy, gap))
}

fn constructions_for(seed: u64, draws: usize, gamma: f64) -> Result<Vec<NamedCertificate>, ExperimentError> {
    let mut out = Vec::new();
    let (_, _, c) = hidden_bias_instance(1.0, gamma)?;
    out.push(named(format!("hidden_bias[seed={seed},fixed]"), c));
    let (_, _, c) = visible_error_instance(1.0, gamma)?;
    out.push(named(format!("visible_error[seed={seed},fixed]"), c));
    let (up, low) = bound_equality_instances(1.0, gamma)?;
    out.push(named(format!("bound_upper[seed={seed},fixed]"), up.certificate));
    out.push(named(format!("bound_lower[seed={seed},fixed]"), low.certificate));
    let (mdp, policy, gap) = chain_with_gap(gamma)?;
    let (_, c) = corollary1_value(&mdp, &policy, &gap, 3.0, (0, 1))?;
    out.push(named(format!("corollary1[seed={seed},fixed]"), c));

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 11));
    for i in 0..draws {
        let (c, g) = draw_scale_and_discount(&mut rng);
        let tag = |name: &str| format!("{name}[seed={seed},draw={i}]");
        out.push(named(tag("hidden_bias"), hidden_bias_instance(c, g)?.2));
        out.push(named(tag("visible_error"), visible_error_instance(c, g)?.2));
        let (up, low) = bound_equality_instances(c, g)?;
        out.push(named(tag("bound_upper"), up.certificate));
        out.push(named(tag("bound_lower"), low.certificate));
        let n = rng.random_range(2..=8);
        let r = ring(n, g)?;
        let (_, _, cert) = inverse_relation_pair(&r, &PolicyTable::uniform(n, 1), c, derive_seed(seed, i as u64), DEFAULT_K_SLACK)?;
        out.push(named(tag("inverse_relation"), cert));
    }
    Ok(out)
}

/// Certificates of every construction, at the configured discount and at
/// `construction_draws` random `(C, gamma)` per seed.
pub fn run_constructions_study(config: &ExperimentConfig) -> Result<StudyReport, ExperimentError> {
    config.validate()?;
    let per_seed = config
        .seeds
        .par_iter()
        .map(|&seed| constructions_for(seed, config.construction_draws, config.gamma))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(StudyReport { certificates: per_seed.into_iter().flatten().collect(), ..Default::default() })
}

fn random_q(rng: &mut ChaCha8Rng, ns: usize, na: usize, scale: f64) -> QTable {
    QTable::from_fn(ns, na, |_, _| rng.random_range(-scale..=scale))
}

struct Check {
    name: &'static str,
    claim: &'static str,
    tolerance: f64,
    instances: usize,
    /// Largest violation statistic seen (must stay below `tolerance`).
    worst: f64,
    failures: usize,
}

impl Check {
    fn new(name: &'static str, claim: &'static str, tolerance: f64) -> Self {
        Self { name, claim, tolerance, instances: 0, worst: f64::NEG_INFINITY, failures: 0 }
    }

    fn record(&mut self, violation: f64) {
        self.instances += 1;
        self.worst = self.worst.max(violation);
        if !(violation <= self.tolerance) {
            self.failures += 1;
        }
    }

    fn finish(self, seed: u64) -> NamedCertificate {
        NamedCertificate {
            name: self.name.into(),
            hard: true,
            certificate: ConstructionCertificate {
                claim: self.claim.into(),
                measured: [
                    ("instances".to_string(), self.instances as f64),
                    ("worst".to_string(), self.worst),
                    ("failures".to_string(), self.failures as f64),
                ]
                .into_iter()
                .collect(),
                passed: self.failures == 0 && self.instances > 0,
                tolerance: self.tolerance,
                seed: Some(seed),
            },
        }
    }
}

fn random_deterministic(rng: &mut ChaCha8Rng, ns: usize, na: usize, gamma: f64) -> FiniteMdp {
    let next: Vec<Vec<usize>> = (0..ns).map(|_| (0..na).map(|_| rng.random_range(0..ns)).collect()).collect();
    let reward = (0..ns).map(|_| (0..na).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect();
    let mut d0 = vec![0.0; ns];
    d0[0] = 1.0;
    FiniteMdp::deterministic(&next, reward, gamma, d0, vec![false; ns]).expect("deterministic MDP is well formed")
}

fn random_instance(rng: &mut ChaCha8Rng) -> (FiniteMdp, PolicyTable) {
    let ns = rng.random_range(2..=20);
    let na = rng.random_range(1..=5);
    let gamma = rng.random_range(0.1..=0.99);
    let mdp = random_mdp(rng, ns, na, gamma);
    let policy = random_policy(rng, ns, na);
    (mdp, policy)
}

/// The invariant suite: decomposition identities, bounds, contraction,
/// improvement implication and every construction certificate, on seeded
/// random instances.
pub fn run_verify(seed: u64) -> Result<StudyReport, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 21));
    let mut identity = Check::new("value_from_bellman_identity", "value_from_bellman(eps_Q) = Q - Q^pi", 1e-8);
    let mut roundtrip = Check::new("bellman_from_value_identity", "bellman_from_value(Q - Q^pi) = eps_Q", 1e-8);
    let mut bounds = Check::new(
        "value_error_bounds",
        "max|Delta| and E_d|Delta| (d stationary) lie within [C/(1+gamma), C/(1-gamma)]",
        1e-9,
    );
    let mut discounted = Check::new(
        "value_error_bounds_discounted_marginal",
        "E_d|Delta| within the averaged bounds when d is the discounted occupancy from the start",
        1e-9,
    );
    let mut contraction = Check::new("contraction", "max|Delta_TQ| <= gamma max|Delta_Q|", 1e-10);
    let mut improvement = Check::new("improvement_implication", "premise implies conclusion", 0.0);
    let mut msbe = Check::new("exact_values_have_zero_msbe", "MSBE of Q^pi on sampled data < 1e-10", 1e-10);
    for i in 0..100 {
        let (mdp, policy) = random_instance(&mut rng);
        let (ns, na) = (mdp.num_states, mdp.num_actions);
        let q_true = exact_q(&mdp, &policy)?;
        let occ = conditional_occupancy(&mdp, &policy)?;
        let stationary = stationary_distribution(&mdp, &policy)?;
        for _ in 0..5 {
            let q = random_q(&mut rng, ns, na, 10.0);
            let eps = bellman_error_table(&mdp, &policy, &q);
            let delta = q.sub(&q_true);
            identity.record(value_from_bellman_with(&occ, mdp.discount, &eps).max_abs_diff(&delta));
            roundtrip.record(bellman_from_value(&mdp, &policy, &delta).max_abs_diff(&eps));
            let abs_delta = delta.map(f64::abs);
            let report = value_error_bounds(&eps, mdp.discount, &stationary);
            let avg: f64 = abs_delta.values.iter().zip(&stationary).map(|(d, w)| d * w).sum();
            bounds.record(if report.contains(delta.max_abs(), avg, 1e-9) { 0.0 } else { 1.0 });
            let report = value_error_bounds(&eps, mdp.discount, &occ.marginal);
            let avg = occ.marginal_expectation(&abs_delta);
            discounted.record(if report.contains(delta.max_abs(), avg, 1e-9) { 0.0 } else { 1.0 });
            let backup = apply_bellman_operator(&mdp, &policy, &q).sub(&q_true);
            contraction.record(backup.max_abs() - mdp.discount * delta.max_abs());
        }
        let q = random_q(&mut rng, ns, na, 10.0);
        let len = rng.random_range(1..=20);
        let data = collect_transitions(&mdp, &policy, len, 10, derive_seed(seed, i))?;
        let check = fqe_improvement_check(&mdp, &policy, &q, &data)?;
        improvement.record(if check.premise && !check.conclusion { 1.0 } else { 0.0 });

        // Sampled residuals of Q^pi vanish only without transition noise.
        let det = random_deterministic(&mut rng, ns, na, mdp.discount);
        let det_policy = PolicyTable::deterministic(&(0..ns).map(|_| rng.random_range(0..na)).collect::<Vec<_>>(), na);
        let det_true = exact_q(&det, &det_policy)?;
        let data = collect_transitions(&det, &det_policy, 50, 10, derive_seed(seed, i))?;
        let ctx = MetricContext {
            policy: &det_policy,
            discount: det.discount,
            q_true: &det_true,
            k_const: 1.0,
            next_action: NextAction::Expected,
            seed: 0,
        };
        msbe.record(empirical_metrics(&ctx, &det_true, &data)?.msbe);
    }
    let mut report = StudyReport::default();
    for c in [identity, roundtrip, bounds, contraction, improvement, msbe] {
        report.certificates.push(c.finish(seed));
    }
    let mut observed = discounted.finish(seed);
    observed.hard = false;
    report.certificates.push(observed);
    report.certificates.extend(constructions_for(seed, 50, 0.99)?);
    Ok(report)
}
