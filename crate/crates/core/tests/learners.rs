mod common;

use bellman_lab::constructions::{hidden_bias_instance, two_state_mdp};
use bellman_lab::data::{collect, collect_transitions, Dataset, Transition};
use bellman_lab::envs::{chain, random_mdp, random_policy};
use bellman_lab::learners::{
    brm_fit, fqe_fit, loss_gradient, loss_value, mc_fit, monte_carlo_returns, Evaluation, Loss, OptimizerKind,
    TargetUpdate, TrainConfig, TrainError, ValueModel,
};
use bellman_lab::mdp::{exact_q, NextAction};
use bellman_lab::{FiniteMdp, PolicyTable, QTable};
use common::{rel_err, rng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn eval<'a>(mdp: &'a FiniteMdp, policy: &'a PolicyTable, q_true: &'a QTable, test: &'a Dataset) -> Evaluation<'a> {
    Evaluation { mdp, policy, q_true, k_const: 1.0, test }
}

fn config(steps: usize, optimizer: OptimizerKind, learning_rate: f64) -> TrainConfig {
    TrainConfig { steps, optimizer, learning_rate, batch_size: 1 << 20, ..TrainConfig::default() }
}

fn random_batch(r: &mut ChaCha8Rng, ns: usize, na: usize, len: usize) -> Vec<Transition> {
    (0..len)
        .map(|t| Transition {
            s: r.random_range(0..ns),
            a: r.random_range(0..na),
            r: r.random_range(-1.0..1.0),
            s_next: r.random_range(0..ns),
            terminal: r.random_bool(0.2),
            t,
        })
        .collect()
}

fn central_difference(loss: Loss<'_>, model: &ValueModel, batch: &[Transition], policy: &PolicyTable, gamma: f64) -> Vec<f64> {
    let h = 1e-5;
    (0..model.num_params())
        .map(|i| {
            let mut up = model.clone();
            up.params[i] += h;
            let mut down = model.clone();
            down.params[i] -= h;
            (loss_value(loss, &up, batch, policy, gamma) - loss_value(loss, &down, batch, policy, gamma)) / (2.0 * h)
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut r = rng(21);
    for i in 0..50 {
        let (ns, na, dim) = (r.random_range(2..8), r.random_range(1..4), r.random_range(1..6));
        let gamma = r.random_range(0.1..0.99);
        let policy = random_policy(&mut r, ns, na);
        let params: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let model = ValueModel::random_features(ns, na, dim, i).with_params(params);
        let batch = random_batch(&mut r, ns, na, 16);
        let target: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        for loss in [Loss::Brm, Loss::Fqe { target: &target }] {
            let g = loss_gradient(loss, &model, &batch, &policy, gamma);
            let fd = central_difference(loss, &model, &batch, &policy, gamma);
            let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
            let rel = norm(&diff) / norm(&g).max(norm(&fd)).max(1e-8);
            assert!(rel < 1e-5, "instance {i} {loss:?}: relative error {rel}");
        }
    }
}

#[test]
fn tabular_brm_gradient_by_hand() {
    let model = ValueModel::tabular_from(&QTable::from_rows(vec![vec![1.0], vec![0.0]]));
    let policy = PolicyTable::uniform(2, 1);
    let t = Transition { s: 0, a: 0, r: 0.0, s_next: 1, terminal: false, t: 0 };
    let g = loss_gradient(Loss::Brm, &model, &[t], &policy, 0.99);
    assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] + 1.98).abs() < 1e-12);
}

#[test]
fn zero_residual_batches_have_zero_gradient() {
    let mut r = rng(22);
    let mdp = random_mdp(&mut r, 5, 2, 0.9);
    let policy = random_policy(&mut r, 5, 2);
    let q_true = exact_q(&mdp, &policy).unwrap();
    let model = ValueModel::tabular_from(&q_true);
    // A terminal transition rewarded with Q^pi(s,a) has zero residual at the truth.
    let batch: Vec<Transition> = (0..mdp.num_pairs())
        .map(|i| {
            let (s, a) = mdp.unpair(i);
            Transition { s, a, r: q_true.get(s, a), s_next: 0, terminal: true, t: 0 }
        })
        .collect();
    assert!(norm(&loss_gradient(Loss::Brm, &model, &batch, &policy, 0.9)) == 0.0);
    assert!(norm(&loss_gradient(Loss::Fqe { target: &model.params }, &model, &batch, &policy, 0.9)) == 0.0);
}

#[test]
fn brm_recovers_zero_values_on_the_complete_two_state_dataset() {
    let (mdp, policy) = two_state_mdp(0.9).unwrap();
    let q_true = exact_q(&mdp, &policy).unwrap();
    let data = collect_transitions(&mdp, &policy, 10, 5, 0).unwrap();
    assert_eq!(data.unique_pairs().len(), 2);
    let model = ValueModel::tabular_from(&QTable::from_rows(vec![vec![3.0], vec![-2.0]]));
    let rep = brm_fit(&data, model.clone(), &config(1, OptimizerKind::Exact, 1.0), &eval(&mdp, &policy, &q_true, &data)).unwrap();
    assert!(rep.final_model.q_table(&mdp.terminal_mask).max_abs() < 1e-10);
    let rep = brm_fit(&data, model, &config(30_000, OptimizerKind::Adam, 1e-2), &eval(&mdp, &policy, &q_true, &data)).unwrap();
    assert!(rep.final_model.q_table(&mdp.terminal_mask).max_abs() < 1e-2);
}

#[test]
fn brm_stays_put_on_the_hidden_bias_example() {
    let (c, g) = (3.0, 0.8);
    let (mdp, policy) = two_state_mdp(g).unwrap();
    let q_true = exact_q(&mdp, &policy).unwrap();
    let (q, data, _) = hidden_bias_instance(c, g).unwrap();
    let start = ValueModel::tabular_from(&q);
    let rep = brm_fit(&data, start.clone(), &config(100, OptimizerKind::Adam, 1e-2), &eval(&mdp, &policy, &q_true, &data)).unwrap();
    assert_eq!(rep.final_model.params, start.params);
    assert!(rep.loss_curve.iter().all(|&l| l == 0.0));
    assert!((rep.nave_curve.last().unwrap() - c).abs() < 1e-12);
}

/// Features of a linear model as a dense matrix with one row per pair.
fn feature_matrix(model: &ValueModel) -> DMatrix<f64> {
    let n = model.num_states * model.num_actions;
    let dim = model.num_params();
    DMatrix::from_fn(n, dim, |i, k| model.features(i / model.num_actions, i % model.num_actions).unwrap()[k])
}

/// Least-squares solution of `rows theta = b` through the normal equations.
fn normal_equations(rows: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    (rows.transpose() * rows).lu().solve(&(rows.transpose() * b)).unwrap()
}

#[test]
fn linear_brm_on_a_three_state_chain_matches_the_normal_equations() {
    let gamma = 0.9;
    let mdp = chain(3, gamma).unwrap();
    let policy = PolicyTable::uniform(3, 2);
    let q_true = exact_q(&mdp, &policy).unwrap();
    let data = collect_transitions(&mdp, &policy, 400, 50, 1).unwrap();
    let model = ValueModel::random_features(3, 2, 4, 9);
    let phi = feature_matrix(&model);
    let rows = DMatrix::from_fn(data.len(), 4, |i, k| {
        let t = &data.transitions[i];
        let mut v = phi[(mdp.pair(t.s, t.a), k)];
        if !t.terminal {
            v -= gamma * (0..2).map(|a| 0.5 * phi[(mdp.pair(t.s_next, a), k)]).sum::<f64>();
        }
        v
    });
    let b = DVector::from_iterator(data.len(), data.transitions.iter().map(|t| t.r));
    let oracle = normal_equations(&rows, &b);
    let oracle_loss = (&rows * &oracle - &b).norm_squared() / data.len() as f64;

    let rep = brm_fit(&data, model, &config(20_000, OptimizerKind::Adam, 1e-2), &eval(&mdp, &policy, &q_true, &data)).unwrap();
    let loss = *rep.loss_curve.last().unwrap();
    assert!(loss - oracle_loss < 1e-8, "{loss} vs {oracle_loss}");
    let msbe = *rep.msbe_curve.last().unwrap();
    assert!(msbe < 1e-4 || msbe - oracle_loss < 1e-8, "msbe {msbe}");
}

#[test]
fn linear_brm_reaches_small_msbe_on_complete_deterministic_data() {
    let gamma = 0.9;
    let mdp = chain(3, gamma).unwrap();
    let policy = PolicyTable::deterministic(&[1, 1, 0], 2);
    let q_true = exact_q(&mdp, &policy).unwrap();
    let data = collect_transitions(&mdp, &policy, 20, 10, 0).unwrap();
    let model = ValueModel::random_features(3, 2, 3, 4);
    let rep = brm_fit(&data, model, &config(20_000, OptimizerKind::Adam, 1e-2), &eval(&mdp, &policy, &q_true, &data)).unwrap();
    assert!(*rep.msbe_curve.last().unwrap() < 1e-4);
}

#[test]
fn tabular_fqe_converges_to_exact_values() {
    let mut r = rng(23);
    let next: Vec<Vec<usize>> = (0..6).map(|_| (0..2).map(|_| r.random_range(0..6)).collect()).collect();
    let reward = (0..6).map(|_| (0..2).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let mdp = FiniteMdp::deterministic(&next, reward, 0.9, vec![1.0 / 6.0; 6], vec![false; 6]).unwrap();
    let policy = random_policy(&mut r, 6, 2);
    let q_true = exact_q(&mdp, &policy).unwrap();
    let data = Dataset::single_episode(
        (0..12)
            .map(|i| {
                let (s, a) = mdp.unpair(i);
                Transition { s, a, r: mdp.reward(s, a), s_next: next[s][a], terminal: false, t: 0 }
            })
            .collect(),
    );
    let cfg = TrainConfig { target_update: TargetUpdate::Hard { every: 1 }, ..config(400, OptimizerKind::Exact, 1.0) };
    let rep = fqe_fit(&data, ValueModel::tabular(6, 2), &cfg, &eval(&mdp, &policy, &q_true, &data)).unwrap();
    assert!(rep.final_model.q_table(&mdp.terminal_mask).max_abs_diff(&q_true) < 1e-6);

    let adam = TrainConfig { polyak_rate: 0.05, ..config(20_000, OptimizerKind::Adam, 1e-2) };
    let rep = fqe_fit(&data, ValueModel::tabular(6, 2), &adam, &eval(&mdp, &policy, &q_true, &data)).unwrap();
    assert!(rep.final_model.q_table(&mdp.terminal_mask).max_abs_diff(&q_true) < 1e-3);
}

#[test]
fn fqe_hard_refreshes_contract_by_gamma() {
    let mut r = rng(24);
    let next: Vec<Vec<usize>> = (0..5).map(|_| (0..2).map(|_| r.random_range(0..5)).collect()).collect();
    let reward = (0..5).map(|_| (0..2).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let gamma = 0.8;
    let mdp = FiniteMdp::deterministic(&next, reward, gamma, vec![0.2; 5], vec![false; 5]).unwrap();
    let policy = random_policy(&mut r, 5, 2);
    let q_true = exact_q(&mdp, &policy).unwrap();
    let data = Dataset::single_episode(
        (0..10)
            .map(|i| {
                let (s, a) = mdp.unpair(i);
                Transition { s, a, r: mdp.reward(s, a), s_next: next[s][a], terminal: false, t: 0 }
            })
            .collect(),
    );
    let start = ValueModel::tabular_from(&common::random_q(&mut r, 5, 2, 5.0));
    let mut previous = start.q_table(&mdp.terminal_mask).sub(&q_true).max_abs();
    for k in 1..=15 {
        let cfg = TrainConfig { target_update: TargetUpdate::Hard { every: 1 }, ..config(k, OptimizerKind::Exact, 1.0) };
        let rep = fqe_fit(&data, start.clone(), &cfg, &eval(&mdp, &policy, &q_true, &data)).unwrap();
        let err = rep.final_model.q_table(&mdp.terminal_mask).sub(&q_true).max_abs();
        assert!(err <= gamma * previous + 1e-12, "refresh {k}: {err} vs {previous}");
        previous = err;
    }
}

#[test]
fn fqe_never_touches_the_missing_successor() {
    let (c, g) = (1.0, 0.5);
    let (mdp, policy) = two_state_mdp(g).unwrap();
    let q_true = exact_q(&mdp, &policy).unwrap();
    let (_, data, _) = hidden_bias_instance(c, g).unwrap();
    let init = QTable::from_rows(vec![vec![0.0], vec![4.0]]);
    let cfg = TrainConfig { polyak_rate: 0.1, ..config(5000, OptimizerKind::Adam, 1e-2) };
    let rep = fqe_fit(&data, ValueModel::tabular_from(&init), &cfg, &eval(&mdp, &policy, &q_true, &data)).unwrap();
    let q = rep.final_model.q_table(&mdp.terminal_mask);
    assert_eq!(q.get(1, 0), 4.0);
    assert!((q.get(0, 0) - g * 4.0).abs() < 1e-3);
}

#[test]
fn fqe_started_at_the_truth_stays_there() {
    let mut r = rng(25);
    let mdp = random_mdp(&mut r, 6, 2, 0.9);
    let policy = random_policy(&mut r, 6, 2);
    let q_true = exact_q(&mdp, &policy).unwrap();
    let data = collect_transitions(&mdp, &policy, 200, 20, 3).unwrap();
    // Sampled successors leave a residual under stochastic dynamics; terminal copies rewarded with Q^pi do not.
    let expected: Vec<Transition> = data.transitions.iter().map(|t| Transition { r: q_true.get(t.s, t.a), terminal: true, ..*t }).collect();
    let data = Dataset::single_episode(expected);
    let rep = fqe_fit(&data, ValueModel::tabular_from(&q_true), &config(500, OptimizerKind::Adam, 1e-3), &eval(&mdp, &policy, &q_true, &data)).unwrap();
    assert!(rep.loss_curve.iter().all(|&l| l < 1e-10));
}

#[test]
fn fqe_loss_is_zero_at_the_truth_on_deterministic_data() {
    let mdp = chain(6, 0.9).unwrap();
    let policy = PolicyTable::uniform(6, 2);
    let q_true = exact_q(&mdp, &policy).unwrap();
    let data = collect_transitions(&mdp, &policy, 300, 30, 2).unwrap();
    for opt in [OptimizerKind::Sgd, OptimizerKind::Exact] {
        let rep = fqe_fit(&data, ValueModel::tabular_from(&q_true), &config(300, opt, 0.1), &eval(&mdp, &policy, &q_true, &data)).unwrap();
        assert!(rep.loss_curve.iter().all(|&l| l < 1e-10));
    }
}

#[test]
fn tabular_mc_is_exact_on_deterministic_episodes() {
    let mdp = chain(6, 0.9).unwrap();
    let policy = PolicyTable::deterministic(&[1; 6], 2);
    let q_true = exact_q(&mdp, &policy).unwrap();
    let data = collect(&mdp, &policy, 3, 50, 0).unwrap();
    let rep = mc_fit(&data, ValueModel::tabular(6, 2), &config(1, OptimizerKind::Exact, 1.0), &eval(&mdp, &policy, &q_true, &data)).unwrap();
    let q = rep.final_model.q_table(&mdp.terminal_mask);
    for (s, a) in data.unique_pairs() {
        assert!((q.get(s, a) - q_true.get(s, a)).abs() < 1e-8);
    }
    let rep = mc_fit(&data, ValueModel::tabular(6, 2), &config(20_000, OptimizerKind::Adam, 1e-2), &eval(&mdp, &policy, &q_true, &data)).unwrap();
    assert!(*rep.nave_curve.last().unwrap() < 1e-6);
}

#[test]
fn tabular_mc_averages_returns() {
    let mdp = FiniteMdp::deterministic(&[vec![1], vec![1]], vec![vec![0.0], vec![0.0]], 0.5, vec![1.0, 0.0], vec![false, true]).unwrap();
    let policy = PolicyTable::uniform(2, 1);
    let q_true = exact_q(&mdp, &policy).unwrap();
    let data = Dataset {
        transitions: vec![
            Transition { s: 0, a: 0, r: 1.0, s_next: 1, terminal: true, t: 0 },
            Transition { s: 0, a: 0, r: 3.0, s_next: 1, terminal: true, t: 0 },
        ],
        episode_offsets: vec![0, 1],
        noise_level: 0.0,
        seed: 0,
    };
    assert_eq!(monte_carlo_returns(&data, 0.5), vec![1.0, 3.0]);
    let rep = mc_fit(&data, ValueModel::tabular(2, 1), &config(1, OptimizerKind::Exact, 1.0), &eval(&mdp, &policy, &q_true, &data)).unwrap();
    assert!((rep.final_model.predict(0, 0) - 2.0).abs() < 1e-12);
}

#[test]
fn linear_mc_matches_the_normal_equations() {
    let gamma = 0.9;
    let mdp = chain(3, gamma).unwrap();
    let policy = PolicyTable::uniform(3, 2);
    let q_true = exact_q(&mdp, &policy).unwrap();
    let data = collect(&mdp, &policy, 40, 50, 5).unwrap();
    let model = ValueModel::random_features(3, 2, 3, 2);
    let phi = feature_matrix(&model);
    let rows = DMatrix::from_fn(data.len(), 3, |i, k| {
        let t = &data.transitions[i];
        phi[(mdp.pair(t.s, t.a), k)]
    });
    let returns = DVector::from_vec(monte_carlo_returns(&data, gamma));
    let oracle = normal_equations(&rows, &returns);
    let rep = mc_fit(&data, model.clone(), &config(1, OptimizerKind::Exact, 1.0), &eval(&mdp, &policy, &q_true, &data)).unwrap();
    for (p, o) in rep.final_model.params.iter().zip(oracle.iter()) {
        assert!(rel_err(*p, *o, 1.0) < 1e-6, "{p} vs {o}");
    }
    // Full-batch gradient descent with a step below 2 / lambda_max reaches the same point.
    let hessian = rows.transpose() * &rows * (2.0 / data.len() as f64);
    let lr = 1.0 / hessian.symmetric_eigenvalues().max();
    let rep = mc_fit(&data, model, &config(200_000, OptimizerKind::Sgd, lr), &eval(&mdp, &policy, &q_true, &data)).unwrap();
    for (p, o) in rep.final_model.params.iter().zip(oracle.iter()) {
        assert!(rel_err(*p, *o, 1.0) < 1e-6, "{p} vs {o}");
    }
}

#[test]
fn seeded_training_is_bit_identical() {
    let mdp = chain(5, 0.9).unwrap();
    let policy = PolicyTable::uniform(5, 2);
    let q_true = exact_q(&mdp, &policy).unwrap();
    let data = collect_transitions(&mdp, &policy, 300, 30, 1).unwrap();
    let cfg = TrainConfig { batch_size: 32, steps: 2000, seed: 17, next_action: NextAction::Sampled, ..TrainConfig::default() };
    let run = || fqe_fit(&data, ValueModel::tabular(5, 2), &cfg, &eval(&mdp, &policy, &q_true, &data)).unwrap();
    assert_eq!(run(), run());
    let other = TrainConfig { seed: 18, ..cfg.clone() };
    let third = fqe_fit(&data, ValueModel::tabular(5, 2), &other, &eval(&mdp, &policy, &q_true, &data)).unwrap();
    assert_ne!(run().final_model.params, third.final_model.params);
}

#[test]
fn brm_rejects_double_sampling() {
    let mdp = chain(4, 0.9).unwrap();
    let policy = PolicyTable::uniform(4, 2);
    let q_true = exact_q(&mdp, &policy).unwrap();
    let data = collect_transitions(&mdp, &policy, 50, 20, 1).unwrap();
    let cfg = TrainConfig { next_action: NextAction::Sampled, ..TrainConfig::default() };
    let err = brm_fit(&data, ValueModel::tabular(4, 2), &cfg, &eval(&mdp, &policy, &q_true, &data)).unwrap_err();
    assert!(matches!(err, TrainError::DoubleSampling));
}

#[test]
fn exploding_updates_are_reported_as_divergence() {
    let mdp = chain(4, 0.99).unwrap();
    let policy = PolicyTable::uniform(4, 2);
    let q_true = exact_q(&mdp, &policy).unwrap();
    let data = collect_transitions(&mdp, &policy, 50, 20, 1).unwrap();
    let model = ValueModel::random_features(4, 2, 3, 1);
    let err = brm_fit(&data, model, &config(10_000, OptimizerKind::Sgd, 1e3), &eval(&mdp, &policy, &q_true, &data)).unwrap_err();
    assert!(matches!(err, TrainError::Diverged { .. }), "{err:?}");
}

#[test]
fn curves_have_one_entry_per_checkpoint() {
    let mdp = chain(4, 0.9).unwrap();
    let policy = PolicyTable::uniform(4, 2);
    let q_true = exact_q(&mdp, &policy).unwrap();
    let data = collect_transitions(&mdp, &policy, 50, 20, 1).unwrap();
    let cfg = TrainConfig { steps: 1000, ..TrainConfig::default() };
    let rep = brm_fit(&data, ValueModel::tabular(4, 2), &cfg, &eval(&mdp, &policy, &q_true, &data)).unwrap();
    assert_eq!(rep.steps.len(), 200);
    for curve in [&rep.loss_curve, &rep.msbe_curve, &rep.msbe_test_curve, &rep.nave_curve] {
        assert_eq!(curve.len(), rep.steps.len());
    }
    let mut buf = Vec::new();
    rep.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("step,loss,msbe_train,msbe_test,nave_test\n"));
}

