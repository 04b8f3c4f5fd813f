//! Squared-residual losses of the two Bellman-based learners and their gradients.

use crate::data::Transition;
use crate::mdp::PolicyTable;

use super::model::ValueModel;

/// Which loss to differentiate.
#[derive(Debug, Clone, Copy)]
pub enum Loss<'a> {
    /// Residual minimisation: the gradient flows through both `Q(s,a)` and `Q(s',a')`.
    Brm,
    /// Fitted evaluation against frozen target parameters.
    Fqe { target: &'a [f64] },
}

/// How `a'` was resolved for one transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Pick {
    Expected,
    Action(usize),
}

fn next_value(model: &ValueModel, params: &[f64], policy: &PolicyTable, s_next: usize, pick: Pick) -> f64 {
    match pick {
        Pick::Expected => ValueModel::policy_weights(policy, s_next)
            .map(|(a, p)| p * model.predict_with(params, s_next, a))
            .sum(),
        Pick::Action(a) => model.predict_with(params, s_next, a),
    }
}

fn add_next_grad(model: &ValueModel, policy: &PolicyTable, s_next: usize, pick: Pick, scale: f64, out: &mut [f64]) {
    match pick {
        Pick::Expected => {
            for (a, p) in ValueModel::policy_weights(policy, s_next) {
                model.add_grad(s_next, a, scale * p, out);
            }
        }
        Pick::Action(a) => model.add_grad(s_next, a, scale, out),
    }
}

/// Residual `Q(s,a) - (r + gamma Q(s',a'))` of one transition.
pub(crate) fn residual(
    loss: Loss<'_>,
    model: &ValueModel,
    policy: &PolicyTable,
    gamma: f64,
    t: &Transition,
    pick: Pick,
) -> f64 {
    let boot = if t.terminal {
        0.0
    } else {
        let params = match loss {
            Loss::Brm => &model.params[..],
            Loss::Fqe { target } => target,
        };
        gamma * next_value(model, params, policy, t.s_next, pick)
    };
    model.predict(t.s, t.a) - (t.r + boot)
}

/// Adds `scale * d(residual^2)/d theta` to `out` and returns the residual.
pub(crate) fn accumulate(
    loss: Loss<'_>,
    model: &ValueModel,
    policy: &PolicyTable,
    gamma: f64,
    t: &Transition,
    pick: Pick,
    scale: f64,
    out: &mut [f64],
) -> f64 {
    let delta = residual(loss, model, policy, gamma, t, pick);
    let coef = 2.0 * delta * scale;
    model.add_grad(t.s, t.a, coef, out);
    if matches!(loss, Loss::Brm) && !t.terminal {
        add_next_grad(model, policy, t.s_next, pick, -gamma * coef, out);
    }
    delta
}

/// Mean squared residual over `batch`, with `a'` averaged exactly under `pi`.
pub fn loss_value(loss: Loss<'_>, model: &ValueModel, batch: &[Transition], policy: &PolicyTable, gamma: f64) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch
        .iter()
        .map(|t| residual(loss, model, policy, gamma, t, Pick::Expected).powi(2))
        .sum::<f64>()
        / batch.len() as f64
}

/// Analytic gradient of [`loss_value`] with respect to the model parameters.
///
/// Per transition, residual minimisation contributes
/// `2 delta (grad Q(s,a) - gamma grad Q(s',a'))`; fitted evaluation only
/// `2 delta grad Q(s,a)`.
pub fn loss_gradient(
    loss: Loss<'_>,
    model: &ValueModel,
    batch: &[Transition],
    policy: &PolicyTable,
    gamma: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; model.num_params()];
    if batch.is_empty() {
        return grad;
    }
    let scale = 1.0 / batch.len() as f64;
    for t in batch {
        accumulate(loss, model, policy, gamma, t, Pick::Expected, scale, &mut grad);
    }
    grad
}
