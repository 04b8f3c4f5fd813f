use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::DiagnosticsError;
use crate::data::Dataset;
use crate::mdp::{NextAction, PolicyTable, QTable};

/// Everything the dataset metrics need besides the Q-function itself.
#[derive(Debug, Clone, Copy)]
pub struct MetricContext<'a> {
    pub policy: &'a PolicyTable,
    pub discount: f64,
    pub q_true: &'a QTable,
    /// Normaliser for the absolute value error.
    pub k_const: f64,
    pub next_action: NextAction,
    /// Seed for `a' ~ pi` draws in [`NextAction::Sampled`] mode.
    pub seed: u64,
}

/// Mean-squared Bellman error and normalised absolute value error over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRecord {
    pub msbe: f64,
    pub nave: f64,
    pub k_const: f64,
}

/// `Q(s', .)` averaged by `pi`, or at one sampled action.
pub(crate) fn bootstrap_value(
    q: &QTable,
    policy: &PolicyTable,
    s_next: usize,
    mode: NextAction,
    rng: &mut ChaCha8Rng,
) -> f64 {
    match mode {
        NextAction::Expected => policy
            .row(s_next)
            .iter()
            .enumerate()
            .map(|(a, &p)| if p > 0.0 { p * q.get(s_next, a) } else { 0.0 })
            .sum(),
        NextAction::Sampled => q.get(s_next, policy.sample(s_next, rng)),
    }
}

/// MSBE `mean (Q(s,a) - (r + gamma Q(s',a')))^2` and NAVE `mean |Q - Q^pi| / K`
/// over the transitions of `dataset`.
pub fn empirical_metrics(
    ctx: &MetricContext<'_>,
    q: &QTable,
    dataset: &Dataset,
) -> Result<MetricRecord, DiagnosticsError> {
    if dataset.is_empty() {
        return Err(DiagnosticsError::EmptyDataset);
    }
    if !(ctx.k_const > 0.0 && ctx.k_const.is_finite()) {
        return Err(DiagnosticsError::Normaliser(ctx.k_const));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let (mut se, mut ae) = (0.0, 0.0);
    for t in &dataset.transitions {
        let boot = if t.terminal {
            0.0
        } else {
            ctx.discount * bootstrap_value(q, ctx.policy, t.s_next, ctx.next_action, &mut rng)
        };
        let delta = q.get(t.s, t.a) - (t.r + boot);
        se += delta * delta;
        ae += (q.get(t.s, t.a) - ctx.q_true.get(t.s, t.a)).abs();
    }
    let n = dataset.len() as f64;
    Ok(MetricRecord {
        msbe: se / n,
        nave: ae / (n * ctx.k_const),
        k_const: ctx.k_const,
    })
}

/// Writes `(study_id, msbe, nave, k)` rows.
pub fn write_metric_rows<W: Write>(out: W, rows: &[(String, MetricRecord)]) -> Result<(), DiagnosticsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["study_id", "msbe", "nave", "k"])?;
    for (id, m) in rows {
        w.serialize((id, m.msbe, m.nave, m.k_const))?;
    }
    w.flush()?;
    Ok(())
}
