//! Policy-evaluation learners: Bellman residual minimisation (BRM), fitted
//! Q-evaluation (FQE) and Monte-Carlo regression (MC).

mod loss;
mod model;
mod optim;
mod train;

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::mdp::{FiniteMdp, NextAction, PolicyTable, QTable};

pub use loss::{loss_gradient, loss_value, Loss};
pub use model::{ModelKind, ValueModel};
pub use optim::OptimizerKind;
pub use train::{brm_fit, fqe_fit, mc_fit, monte_carlo_returns};

/// Training aborts once the loss exceeds this or stops being finite.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model/data mismatch: {0}")]
    Shape(String),
    #[error("diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("residual minimisation with a sampled next action on a stochastic policy is biased (double sampling)")]
    DoubleSampling,
    #[error(transparent)]
    Metrics(#[from] crate::diagnostics::DiagnosticsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Brm,
    Fqe,
    Mc,
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LearnerKind::Brm => "brm",
            LearnerKind::Fqe => "fqe",
            LearnerKind::Mc => "mc",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetUpdate {
    /// `theta_bar <- (1 - tau) theta_bar + tau theta` after every step.
    #[default]
    Polyak,
    /// `theta_bar <- theta` every `every` steps.
    Hard { every: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub polyak_rate: f64,
    pub target_update: TargetUpdate,
    pub seed: u64,
    pub next_action: NextAction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 256,
            learning_rate: 3e-4,
            optimizer: OptimizerKind::Adam,
            polyak_rate: 5e-3,
            target_update: TargetUpdate::Polyak,
            seed: 0,
            next_action: NextAction::Expected,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.polyak_rate > 0.0 && self.polyak_rate <= 1.0) {
            return bad("polyak_rate must lie in (0, 1]");
        }
        if let TargetUpdate::Hard { every: 0 } = self.target_update {
            return bad("hard target period must be positive");
        }
        Ok(())
    }

    /// Report curves are sampled every `max(1, steps / 200)` updates.
    pub fn checkpoint_every(&self) -> usize {
        (self.steps / 200).max(1)
    }
}

/// Ground truth used only to score checkpoints; learners never read the dynamics.
#[derive(Debug, Clone, Copy)]
pub struct Evaluation<'a> {
    pub mdp: &'a FiniteMdp,
    pub policy: &'a PolicyTable,
    pub q_true: &'a QTable,
    pub k_const: f64,
    pub test: &'a Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub learner: LearnerKind,
    pub steps: Vec<usize>,
    pub loss_curve: Vec<f64>,
    /// MSBE on the training dataset.
    pub msbe_curve: Vec<f64>,
    pub msbe_test_curve: Vec<f64>,
    /// NAVE on the test dataset.
    pub nave_curve: Vec<f64>,
    pub final_model: ValueModel,
}

impl TrainReport {
    /// Rows `(step, loss, msbe_train, msbe_test, nave_test)`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss", "msbe_train", "msbe_test", "nave_test"])?;
        for i in 0..self.steps.len() {
            w.serialize((
                self.steps[i],
                self.loss_curve[i],
                self.msbe_curve[i],
                self.msbe_test_curve[i],
                self.nave_curve[i],
            ))?;
        }
        w.flush()?;
        Ok(())
    }
}
