use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{accumulate, residual, Loss, Pick};
use super::model::ValueModel;
use super::optim::{Optimizer, OptimizerKind};
use super::{Evaluation, LearnerKind, TargetUpdate, TrainConfig, TrainError, TrainReport, DIVERGENCE_THRESHOLD};
use crate::data::{Dataset, Transition};
use crate::diagnostics::{empirical_metrics, MetricContext};
use crate::linalg::GramSolver;
use crate::mdp::{NextAction, PolicyTable};

const GRAM_REL_TOL: f64 = 1e-12;

struct Recorder<'a> {
    eval: &'a Evaluation<'a>,
    train: &'a Dataset,
    every: usize,
    last: usize,
    report: TrainReport,
}

impl<'a> Recorder<'a> {
    fn new(learner: LearnerKind, eval: &'a Evaluation<'a>, train: &'a Dataset, config: &TrainConfig, model: &ValueModel) -> Self {
        Self {
            eval,
            train,
            every: config.checkpoint_every(),
            last: config.steps,
            report: TrainReport {
                learner,
                steps: Vec::new(),
                loss_curve: Vec::new(),
                msbe_curve: Vec::new(),
                msbe_test_curve: Vec::new(),
                nave_curve: Vec::new(),
                final_model: model.clone(),
            },
        }
    }

    fn due(&self, step: usize) -> bool {
        step % self.every == 0 || step == self.last
    }

    fn record(&mut self, step: usize, loss: f64, model: &ValueModel) -> Result<(), TrainError> {
        let q = model.q_table(&self.eval.mdp.terminal_mask);
        let ctx = MetricContext {
            policy: self.eval.policy,
            discount: self.eval.mdp.discount,
            q_true: self.eval.q_true,
            k_const: self.eval.k_const,
            next_action: NextAction::Expected,
            seed: 0,
        };
        let train = empirical_metrics(&ctx, &q, self.train)?;
        let test = empirical_metrics(&ctx, &q, self.eval.test)?;
        let r = &mut self.report;
        r.steps.push(step);
        r.loss_curve.push(loss);
        r.msbe_curve.push(train.msbe);
        r.msbe_test_curve.push(test.msbe);
        r.nave_curve.push(test.nave);
        Ok(())
    }

    fn finish(mut self, model: ValueModel) -> TrainReport {
        self.report.final_model = model;
        self.report
    }
}

fn check_inputs(train: &Dataset, model: &ValueModel, config: &TrainConfig, eval: &Evaluation<'_>) -> Result<(), TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mdp = eval.mdp;
    if model.num_states != mdp.num_states || model.num_actions != mdp.num_actions {
        return Err(TrainError::Shape(format!(
            "model is {}x{}, MDP is {}x{}",
            model.num_states, model.num_actions, mdp.num_states, mdp.num_actions
        )));
    }
    if eval.policy.num_states != mdp.num_states || eval.policy.num_actions != mdp.num_actions {
        return Err(TrainError::Shape("policy does not match the MDP".into()));
    }
    for d in [train, eval.test] {
        d.check_against(mdp).map_err(|e| TrainError::Shape(e.to_string()))?;
    }
    if eval.test.is_empty() {
        return Err(TrainError::Shape("evaluation dataset is empty".into()));
    }
    if !model.is_finite() {
        return Err(TrainError::Shape("initial parameters are not finite".into()));
    }
    Ok(())
}

fn check_divergence(step: usize, loss: f64, model: &ValueModel) -> Result<(), TrainError> {
    if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD || !model.is_finite() {
        return Err(TrainError::Diverged { step, loss });
    }
    Ok(())
}

fn sample_batch(n: usize, batch: usize, rng: &mut ChaCha8Rng, out: &mut Vec<usize>) {
    out.clear();
    if batch >= n {
        out.extend(0..n);
    } else {
        out.extend((0..batch).map(|_| rng.random_range(0..n)));
    }
}

fn pick_for(t: &Transition, policy: &PolicyTable, mode: NextAction, rng: &mut ChaCha8Rng) -> Pick {
    match mode {
        NextAction::Sampled if !t.terminal => Pick::Action(policy.sample(t.s_next, rng)),
        _ => Pick::Expected,
    }
}

/// Gradient row of `Q(s,a) - gamma Q(s',a')` (BRM) or of `Q(s,a)` alone.
fn design_row(model: &ValueModel, policy: &PolicyTable, gamma: f64, t: &Transition, through_next: bool) -> Vec<f64> {
    let mut row = vec![0.0; model.num_params()];
    model.add_grad(t.s, t.a, 1.0, &mut row);
    if through_next && !t.terminal {
        for (a, p) in ValueModel::policy_weights(policy, t.s_next) {
            model.add_grad(t.s_next, a, -gamma * p, &mut row);
        }
    }
    row
}

/// Least-squares design `A` with a cached pseudo-inverse of `A^T A`.
struct ExactDesign {
    a: DMatrix<f64>,
    solver: GramSolver,
}

impl ExactDesign {
    fn new(rows: Vec<Vec<f64>>, p: usize) -> Self {
        let n = rows.len();
        let a = DMatrix::from_row_iterator(n, p, rows.into_iter().flatten());
        let solver = GramSolver::new(a.transpose() * &a, GRAM_REL_TOL);
        Self { a, solver }
    }

    /// Moves `params` to the least-squares solution nearest to where it starts.
    fn update(&self, params: &mut [f64], targets: &DVector<f64>) {
        let theta = DVector::from_column_slice(params);
        let resid = targets - &self.a * &theta;
        let delta = self.solver.solve(&(self.a.transpose() * resid));
        for (p, d) in params.iter_mut().zip(delta.iter()) {
            *p += d;
        }
    }
}

/// Bellman residual minimisation: minimises `mean (Q(s,a) - r - gamma Q(s',a'))^2`
/// with the gradient flowing through both sides.
pub fn brm_fit(
    train: &Dataset,
    mut model: ValueModel,
    config: &TrainConfig,
    eval: &Evaluation<'_>,
) -> Result<TrainReport, TrainError> {
    check_inputs(train, &model, config, eval)?;
    let policy = eval.policy;
    if config.next_action == NextAction::Sampled && !policy.is_deterministic() {
        return Err(TrainError::DoubleSampling);
    }
    let gamma = eval.mdp.discount;
    let data = &train.transitions;
    let mut rec = Recorder::new(LearnerKind::Brm, eval, train, config, &model);
    let full_loss = |m: &ValueModel| super::loss::loss_value(Loss::Brm, m, data, policy, gamma);

    if config.optimizer == OptimizerKind::Exact {
        let rows = data.iter().map(|t| design_row(&model, policy, gamma, t, true)).collect();
        let design = ExactDesign::new(rows, model.num_params());
        let targets = DVector::from_iterator(data.len(), data.iter().map(|t| t.r));
        design.update(&mut model.params, &targets);
        let loss = full_loss(&model);
        check_divergence(1, loss, &model)?;
        for step in 1..=config.steps {
            if rec.due(step) {
                rec.record(step, loss, &model)?;
            }
        }
        return Ok(rec.finish(model));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, model.num_params());
    let mut grad = vec![0.0; model.num_params()];
    let mut idx = Vec::new();
    for step in 1..=config.steps {
        sample_batch(data.len(), config.batch_size, &mut rng, &mut idx);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / idx.len() as f64;
        let mut batch_loss = 0.0;
        for &i in &idx {
            let t = &data[i];
            let pick = pick_for(t, policy, config.next_action, &mut rng);
            let d = accumulate(Loss::Brm, &model, policy, gamma, t, pick, scale, &mut grad);
            batch_loss += d * d * scale;
        }
        check_divergence(step, batch_loss, &model)?;
        opt.step(&mut model.params, &grad);
        if rec.due(step) {
            let loss = full_loss(&model);
            check_divergence(step, loss, &model)?;
            rec.record(step, loss, &model)?;
        }
    }
    Ok(rec.finish(model))
}

/// Fitted Q-evaluation: regresses `Q(s,a)` onto `r + gamma Qbar(s',a')` with a
/// frozen target copy that starts equal to the initial model.
pub fn fqe_fit(
    train: &Dataset,
    mut model: ValueModel,
    config: &TrainConfig,
    eval: &Evaluation<'_>,
) -> Result<TrainReport, TrainError> {
    check_inputs(train, &model, config, eval)?;
    let policy = eval.policy;
    let gamma = eval.mdp.discount;
    let data = &train.transitions;
    let mut rec = Recorder::new(LearnerKind::Fqe, eval, train, config, &model);
    let mut target = model.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let refresh = |step: usize, target: &mut Vec<f64>, params: &[f64]| match config.target_update {
        TargetUpdate::Polyak => {
            let tau = config.polyak_rate;
            for (tb, p) in target.iter_mut().zip(params) {
                *tb = (1.0 - tau) * *tb + tau * p;
            }
        }
        TargetUpdate::Hard { every } => {
            if step % every == 0 {
                target.copy_from_slice(params);
            }
        }
    };

    if config.optimizer == OptimizerKind::Exact {
        let rows = data.iter().map(|t| design_row(&model, policy, gamma, t, false)).collect();
        let design = ExactDesign::new(rows, model.num_params());
        for step in 1..=config.steps {
            let targets = DVector::from_iterator(
                data.len(),
                data.iter().map(|t| {
                    let pick = pick_for(t, policy, config.next_action, &mut rng);
                    model.predict(t.s, t.a) - residual(Loss::Fqe { target: &target }, &model, policy, gamma, t, pick)
                }),
            );
            design.update(&mut model.params, &targets);
            let loss = super::loss::loss_value(Loss::Fqe { target: &target }, &model, data, policy, gamma);
            check_divergence(step, loss, &model)?;
            refresh(step, &mut target, &model.params);
            if rec.due(step) {
                rec.record(step, loss, &model)?;
            }
        }
        return Ok(rec.finish(model));
    }

    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, model.num_params());
    let mut grad = vec![0.0; model.num_params()];
    let mut idx = Vec::new();
    for step in 1..=config.steps {
        sample_batch(data.len(), config.batch_size, &mut rng, &mut idx);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / idx.len() as f64;
        let mut batch_loss = 0.0;
        for &i in &idx {
            let t = &data[i];
            let pick = pick_for(t, policy, config.next_action, &mut rng);
            let d = accumulate(Loss::Fqe { target: &target }, &model, policy, gamma, t, pick, scale, &mut grad);
            batch_loss += d * d * scale;
        }
        check_divergence(step, batch_loss, &model)?;
        opt.step(&mut model.params, &grad);
        refresh(step, &mut target, &model.params);
        if rec.due(step) {
            let loss = super::loss::loss_value(Loss::Fqe { target: &target }, &model, data, policy, gamma);
            check_divergence(step, loss, &model)?;
            rec.record(step, loss, &model)?;
        }
    }
    Ok(rec.finish(model))
}

/// Discounted return `sum_{k >= t} gamma^{k-t} r_k` to the end of each episode.
///
/// Episodes cut by the horizon are treated as ending there.
pub fn monte_carlo_returns(dataset: &Dataset, gamma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(dataset.len());
    for ep in dataset.episodes() {
        let mut g = 0.0;
        let mut rets = vec![0.0; ep.len()];
        for (i, t) in ep.iter().enumerate().rev() {
            g = t.r + gamma * g;
            rets[i] = g;
        }
        out.extend(rets);
    }
    out
}

/// Monte-Carlo evaluation: regresses `Q(s_t, a_t)` onto observed discounted returns.
pub fn mc_fit(
    trajectories: &Dataset,
    mut model: ValueModel,
    config: &TrainConfig,
    eval: &Evaluation<'_>,
) -> Result<TrainReport, TrainError> {
    check_inputs(trajectories, &model, config, eval)?;
    let data = &trajectories.transitions;
    let returns = monte_carlo_returns(trajectories, eval.mdp.discount);
    let mut rec = Recorder::new(LearnerKind::Mc, eval, trajectories, config, &model);
    let full_loss = |m: &ValueModel| {
        data.iter()
            .zip(&returns)
            .map(|(t, g)| (m.predict(t.s, t.a) - g).powi(2))
            .sum::<f64>()
            / data.len() as f64
    };

    if config.optimizer == OptimizerKind::Exact {
        let rows = data
            .iter()
            .map(|t| {
                let mut row = vec![0.0; model.num_params()];
                model.add_grad(t.s, t.a, 1.0, &mut row);
                row
            })
            .collect();
        let design = ExactDesign::new(rows, model.num_params());
        design.update(&mut model.params, &DVector::from_column_slice(&returns));
        let loss = full_loss(&model);
        check_divergence(1, loss, &model)?;
        for step in 1..=config.steps {
            if rec.due(step) {
                rec.record(step, loss, &model)?;
            }
        }
        return Ok(rec.finish(model));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, model.num_params());
    let mut grad = vec![0.0; model.num_params()];
    let mut idx = Vec::new();
    for step in 1..=config.steps {
        sample_batch(data.len(), config.batch_size, &mut rng, &mut idx);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / idx.len() as f64;
        let mut batch_loss = 0.0;
        for &i in &idx {
            let t = &data[i];
            let d = model.predict(t.s, t.a) - returns[i];
            model.add_grad(t.s, t.a, 2.0 * d * scale, &mut grad);
            batch_loss += d * d * scale;
        }
        check_divergence(step, batch_loss, &model)?;
        opt.step(&mut model.params, &grad);
        if rec.due(step) {
            let loss = full_loss(&model);
            check_divergence(step, loss, &model)?;
            rec.record(step, loss, &model)?;
        }
    }
    Ok(rec.finish(model))
}
