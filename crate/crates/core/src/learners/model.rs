use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::mdp::{PolicyTable, QTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// One parameter per state-action pair.
    Tabular,
    /// `Q(s,a) = <theta, phi(s,a)>` with `features` stored row-major `[pair][k]`.
    Linear { dim: usize, features: Vec<f64> },
}

/// Approximate Q-function trained by the learners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueModel {
    pub num_states: usize,
    pub num_actions: usize,
    pub kind: ModelKind,
    pub params: Vec<f64>,
}

impl ValueModel {
    pub fn tabular(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            kind: ModelKind::Tabular,
            params: vec![0.0; num_states * num_actions],
        }
    }

    pub fn tabular_from(q: &QTable) -> Self {
        Self {
            num_states: q.num_states,
            num_actions: q.num_actions,
            kind: ModelKind::Tabular,
            params: q.values.clone(),
        }
    }

    /// Linear model over the given features, starting at `theta = 0`.
    pub fn linear(num_states: usize, num_actions: usize, dim: usize, features: Vec<f64>) -> Self {
        assert_eq!(features.len(), num_states * num_actions * dim, "feature matrix shape");
        Self {
            num_states,
            num_actions,
            kind: ModelKind::Linear { dim, features },
            params: vec![0.0; dim],
        }
    }

    /// Linear model over i.i.d. standard-normal features drawn from `seed`.
    pub fn random_features(num_states: usize, num_actions: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = (0..num_states * num_actions * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self::linear(num_states, num_actions, dim, features)
    }

    pub fn with_params(mut self, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), self.params.len(), "parameter count");
        self.params = params;
        self
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    #[inline]
    fn pair(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    /// Feature row of `(s, a)`; `None` for tabular models.
    pub fn features(&self, s: usize, a: usize) -> Option<&[f64]> {
        match &self.kind {
            ModelKind::Tabular => None,
            ModelKind::Linear { dim, features } => {
                let i = self.pair(s, a) * dim;
                Some(&features[i..i + dim])
            }
        }
    }

    #[inline]
    pub fn predict(&self, s: usize, a: usize) -> f64 {
        self.predict_with(&self.params, s, a)
    }

    /// Prediction under an alternative parameter vector (e.g. a target copy).
    #[inline]
    pub fn predict_with(&self, params: &[f64], s: usize, a: usize) -> f64 {
        match &self.kind {
            ModelKind::Tabular => params[self.pair(s, a)],
            ModelKind::Linear { .. } => {
                let phi = self.features(s, a).expect("linear model");
                phi.iter().zip(params).map(|(f, t)| f * t).sum()
            }
        }
    }

    /// `out += scale * grad_theta Q(s, a)`.
    #[inline]
    pub fn add_grad(&self, s: usize, a: usize, scale: f64, out: &mut [f64]) {
        match &self.kind {
            ModelKind::Tabular => out[self.pair(s, a)] += scale,
            ModelKind::Linear { .. } => {
                let phi = self.features(s, a).expect("linear model");
                for (o, f) in out.iter_mut().zip(phi) {
                    *o += scale * f;
                }
            }
        }
    }

    /// Evaluates every pair; terminal states read as zero.
    pub fn q_table(&self, terminal_mask: &[bool]) -> QTable {
        QTable::from_fn(self.num_states, self.num_actions, |s, a| {
            if terminal_mask.get(s).copied().unwrap_or(false) {
                0.0
            } else {
                self.predict(s, a)
            }
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub(crate) fn policy_weights<'p>(policy: &'p PolicyTable, s: usize) -> impl Iterator<Item = (usize, f64)> + 'p {
        policy.row(s).iter().copied().enumerate().filter(|(_, p)| *p > 0.0)
    }
}
