use rayon::prelude::*;

use super::cells::{evaluation_set, run_cell, onpolicy_test, Env, BEHAVIOUR_TEST};
use super::single_traj::trajectory_errors;
use super::{derive_seed, CorrelationRow, ExperimentConfig, ExperimentError, StudyReport};
use crate::data::{noisy_policy, Dataset};
use crate::diagnostics::{pearson, DiagnosticsError};
use crate::learners::LearnerKind;
use crate::mdp::{FiniteMdp, PolicyTable, QTable};

/// Mean `|BE|` and mean `|VE|` of `q` over the transitions of `data`.
fn mean_abs_errors(mdp: &FiniteMdp, policy: &PolicyTable, q_true: &QTable, q: &QTable, data: &Dataset) -> (f64, f64) {
    let errs = trajectory_errors(mdp, policy, q_true, q, &data.transitions);
    let n = errs.len().max(1) as f64;
    (
        errs.iter().map(|(b, _)| b.abs()).sum::<f64>() / n,
        errs.iter().map(|(_, v)| v.abs()).sum::<f64>() / n,
    )
}

/// Pearson coefficient between mean `|BE|` and mean `|VE|` across an ensemble
/// of Q-functions evaluated on one dataset.
pub fn ensemble_correlation(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    q_true: &QTable,
    qs: &[QTable],
    data: &Dataset,
) -> Result<f64, DiagnosticsError> {
    if data.is_empty() {
        return Err(DiagnosticsError::EmptyDataset);
    }
    let (be, ve): (Vec<f64>, Vec<f64>) = qs.iter().map(|q| mean_abs_errors(mdp, policy, q_true, q, data)).unzip();
    pearson(&be, &ve)
}

struct Point {
    learner: LearnerKind,
    train_noise: usize,
    /// `(mean |BE|, mean |VE|)` per test noise level.
    errors: Vec<(f64, f64)>,
}

/// Trains one function per `(learner, train noise, seed)` and correlates mean
/// `|BE|` with mean `|VE|` across seeds, on held-out data at every noise level.
///
/// Training noise levels above zero are also pooled under `all`. For FQE the
/// configured share of functions with the largest Bellman error is dropped
/// first. Cells whose errors have no variance report no coefficient.
pub fn run_correlation_study(config: &ExperimentConfig) -> Result<StudyReport, ExperimentError> {
    config.validate()?;
    let env = Env::load(config)?;
    let noises = &config.noise_levels;
    let tests: Vec<(Dataset, f64, Vec<Dataset>)> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let (on, k) = onpolicy_test(&env, config, seed)?;
            let held_out = noises
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    let behaviour = noisy_policy(&env.policy, n)?;
                    evaluation_set(&env, config, &behaviour, derive_seed(derive_seed(seed, BEHAVIOUR_TEST), i as u64))
                })
                .collect::<Result<Vec<_>, ExperimentError>>()?;
            Ok((on, k, held_out))
        })
        .collect::<Result<_, ExperimentError>>()?;

    let mut keys = Vec::new();
    for &learner in &config.learners {
        for noise_idx in 0..noises.len() {
            for seed_idx in 0..config.seeds.len() {
                keys.push((learner, noise_idx, seed_idx));
            }
        }
    }
    let outcomes = keys
        .par_iter()
        .map(|&(learner, noise_idx, seed_idx)| {
            let (on, k, held_out) = &tests[seed_idx];
            let cell = run_cell(&env, config, learner, noise_idx, config.seeds[seed_idx], on, *k)?;
            let point = cell.q.as_ref().map(|q| Point {
                learner,
                train_noise: noise_idx,
                errors: held_out.iter().map(|d| mean_abs_errors(&env.mdp, &env.policy, &env.q_true, q, d)).collect(),
            });
            Ok((cell, point))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;

    let mut report = StudyReport::default();
    let mut points = Vec::new();
    for (cell, point) in outcomes {
        report.rows.push(cell.row);
        report.curves.extend(cell.curves);
        points.extend(point);
    }

    let mut groups: Vec<(String, Vec<usize>)> = noises.iter().enumerate().map(|(i, n)| (n.to_string(), vec![i])).collect();
    let positive: Vec<usize> = (0..noises.len()).filter(|&i| noises[i] > 0.0).collect();
    if positive.len() >= 2 {
        groups.push(("all".into(), positive));
    }
    for &learner in &config.learners {
        for (label, members) in &groups {
            for (test_idx, test_noise) in noises.iter().enumerate() {
                let mut pairs: Vec<(f64, f64)> = points
                    .iter()
                    .filter(|p| p.learner == learner && members.contains(&p.train_noise))
                    .map(|p| p.errors[test_idx])
                    .collect();
                if learner == LearnerKind::Fqe && config.fqe_outlier_fraction > 0.0 {
                    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                    let drop = (config.fqe_outlier_fraction * pairs.len() as f64).floor() as usize;
                    pairs.truncate(pairs.len() - drop);
                }
                let (be, ve): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
                report.correlations.push(CorrelationRow {
                    learner,
                    train_data: label.clone(),
                    test_data: test_noise.to_string(),
                    functions: be.len(),
                    coefficient: pearson(&be, &ve).ok(),
                });
            }
        }
    }
    Ok(report)
}
