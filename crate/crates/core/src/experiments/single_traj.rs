use rayon::prelude::*;

use super::cells::{cell_train_config, fit, initial_model, normaliser, Env, TRAJECTORY};
use super::{
    derive_seed, ExperimentConfig, ExperimentError, NamedCertificate, RatioRow, ReportRow, StudyReport,
    TransitionErrorRow,
};
use crate::constructions::{ConstructionCertificate, CERTIFICATE_TOLERANCE};
use crate::data::{collect, single_trajectory_prepare, Dataset, Transition};
use crate::diagnostics::{empirical_metrics, MetricContext};
use crate::learners::{Evaluation, LearnerKind, TrainError};
use crate::mdp::{exact_q, FiniteMdp, NextAction, PolicyTable, QTable};

/// Per-transition `(BE, VE)`: `BE = Q(s,a) - r - gamma E_pi Q(s',.)` (no
/// bootstrap past a terminal transition) and `VE = Q(s,a) - Q^pi(s,a)`.
pub fn trajectory_errors(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    q_true: &QTable,
    q: &QTable,
    transitions: &[Transition],
) -> Vec<(f64, f64)> {
    transitions
        .iter()
        .map(|t| {
            let next = if t.terminal {
                0.0
            } else {
                policy.row(t.s_next).iter().enumerate().map(|(a, p)| p * q.get(t.s_next, a)).sum()
            };
            let qa = q.get(t.s, t.a);
            (qa - t.r - mdp.discount * next, qa - q_true.get(t.s, t.a))
        })
        .collect()
}

/// The prepared trajectory and the MDP whose reward at the final pair carries
/// the same augmentation, so that exact values match the training targets.
fn prepared_episode(env: &Env, config: &ExperimentConfig, seed: u64) -> Result<(Env, Dataset), ExperimentError> {
    let episode = collect(&env.mdp, &env.policy, 1, config.horizon, derive_seed(seed, TRAJECTORY))?;
    let traj = &episode.transitions;
    let Some(last) = traj.last().filter(|t| t.terminal) else {
        return Err(ExperimentError::Config(format!(
            "the trajectory did not terminate within {} steps",
            config.horizon
        )));
    };
    if traj[..traj.len() - 1].iter().any(|t| (t.s, t.a) == (last.s, last.a)) {
        return Err(ExperimentError::Config(
            "the final pair of the trajectory also occurs earlier, so its reward cannot be augmented".into(),
        ));
    }
    let prepared = single_trajectory_prepare(traj, config.gamma)?;
    let mut mdp = env.mdp.clone();
    let idx = mdp.pair(last.s, last.a);
    mdp.reward[idx] = prepared[prepared.len() - 1].r;
    let q_true = exact_q(&mdp, &env.policy)?;
    let data = Dataset { seed, ..Dataset::single_episode(prepared) };
    Ok((Env { mdp, policy: env.policy.clone(), q_true }, data))
}

struct Outcome {
    row: ReportRow,
    ratio: Option<RatioRow>,
    transitions: Vec<TransitionErrorRow>,
}

fn run_one(env: &Env, data: &Dataset, config: &ExperimentConfig, learner: LearnerKind, seed: u64) -> Result<Outcome, ExperimentError> {
    let k = normaliser(&env.q_true, data);
    let eval = Evaluation { mdp: &env.mdp, policy: &env.policy, q_true: &env.q_true, k_const: k, test: data };
    let model = initial_model(env, config, seed, data)?;
    let mut row = ReportRow {
        learner,
        noise: 0.0,
        seed,
        msbe_train: f64::NAN,
        nave_train: f64::NAN,
        msbe_test: f64::NAN,
        nave_test: f64::NAN,
        k,
        missing_relevant_pairs: 0,
        final_loss: f64::NAN,
        diverged: false,
    };
    let report = match fit(learner, data, model, &cell_train_config(config, seed), &eval, config.horizon) {
        Ok(r) => r,
        Err(TrainError::Diverged { loss, .. }) => {
            row.diverged = true;
            row.final_loss = loss;
            return Ok(Outcome { row, ratio: None, transitions: Vec::new() });
        }
        Err(e) => return Err(e.into()),
    };
    let q = report.final_model.q_table(&env.mdp.terminal_mask);
    let ctx = MetricContext {
        policy: &env.policy,
        discount: env.mdp.discount,
        q_true: &env.q_true,
        k_const: k,
        next_action: NextAction::Expected,
        seed: 0,
    };
    let m = empirical_metrics(&ctx, &q, data)?;
    row.msbe_train = m.msbe;
    row.nave_train = m.nave;
    row.msbe_test = m.msbe;
    row.nave_test = m.nave;
    row.final_loss = report.loss_curve.last().copied().unwrap_or(f64::NAN);

    let errs = trajectory_errors(&env.mdp, &env.policy, &env.q_true, &q, &data.transitions);
    let n = errs.len() as f64;
    let sum_be: f64 = errs.iter().map(|e| e.0.abs()).sum();
    let sum_ve: f64 = errs.iter().map(|e| e.1.abs()).sum();
    let gamma = env.mdp.discount;
    let (lower, upper) = (1.0 / (1.0 + gamma), 1.0 / (1.0 - gamma));
    let ratio = (sum_be > CERTIFICATE_TOLERANCE * n).then(|| sum_ve / sum_be);
    let within_bounds = ratio.is_none_or(|r| r >= lower - CERTIFICATE_TOLERANCE && r <= upper + CERTIFICATE_TOLERANCE);
    let ratio_row = RatioRow {
        learner,
        seed,
        transitions: errs.len(),
        mean_abs_bellman_error: sum_be / n,
        mean_abs_value_error: sum_ve / n,
        ratio,
        lower,
        upper,
        within_bounds,
    };
    let transitions = data
        .transitions
        .iter()
        .zip(&errs)
        .map(|(t, &(be, ve))| TransitionErrorRow { learner, seed, t: t.t, s: t.s, a: t.a, bellman_error: be, value_error: ve })
        .collect();
    Ok(Outcome { row, ratio: Some(ratio_row), transitions })
}

/// Trains each learner on one complete on-policy trajectory per seed and
/// reports per-transition errors and `sum |VE| / sum |BE|`.
///
/// The trajectory's final reward is augmented by
/// `gamma / ((1 - gamma) T) * sum r`; the reference values come from the MDP
/// with the same change at the final pair. Ratios are checked against
/// `[1/(1+gamma), 1/(1-gamma)]`; all-zero Bellman errors leave the ratio undefined.
pub fn run_single_trajectory_study(config: &ExperimentConfig) -> Result<StudyReport, ExperimentError> {
    config.validate()?;
    let base = Env::load(config)?;
    let episodes = config
        .seeds
        .par_iter()
        .map(|&seed| prepared_episode(&base, config, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let mut keys = Vec::new();
    for &learner in &config.learners {
        for seed_idx in 0..config.seeds.len() {
            keys.push((learner, seed_idx));
        }
    }
    let outcomes = keys
        .par_iter()
        .map(|&(learner, i)| {
            let (env, data) = &episodes[i];
            run_one(env, data, config, learner, config.seeds[i])
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut report = StudyReport::default();
    for o in outcomes {
        report.rows.push(o.row);
        report.ratios.extend(o.ratio);
        report.transitions.extend(o.transitions);
    }
    let worst_low = report.ratios.iter().filter_map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    let worst_high = report.ratios.iter().filter_map(|r| r.ratio).fold(0.0, f64::max);
    let gamma = config.gamma;
    report.certificates.push(NamedCertificate {
        name: "single_trajectory_ratio_bounds".into(),
        hard: true,
        certificate: ConstructionCertificate {
            claim: "sum |VE| / sum |BE| lies in [1/(1+gamma), 1/(1-gamma)] for every learner and seed".into(),
            measured: [
                ("min_ratio".to_string(), worst_low),
                ("max_ratio".to_string(), worst_high),
                ("lower".to_string(), 1.0 / (1.0 + gamma)),
                ("upper".to_string(), 1.0 / (1.0 - gamma)),
            ]
            .into_iter()
            .collect(),
            passed: report.ratios.iter().all(|r| r.within_bounds),
            tolerance: CERTIFICATE_TOLERANCE,
            seed: None,
        },
    });
    Ok(report)
}
