//! Config-driven studies and their CSV/JSON reports.

mod cells;
mod correlation;
mod single_traj;
mod verify;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::constructions::{ConstructionCertificate, ConstructionError};
use crate::data::DataError;
use crate::diagnostics::DiagnosticsError;
use crate::learners::{LearnerKind, TrainConfig, TrainError};
use crate::mdp::MdpError;

pub use cells::{run_offpolicy_sweep, run_onpolicy_study};
pub use correlation::{ensemble_correlation, run_correlation_study};
pub use single_traj::{run_single_trajectory_study, trajectory_errors};
pub use verify::{run_constructions_study, run_verify};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Construction(#[from] ConstructionError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    /// True for errors caused by the configuration rather than by a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config(_)
                | ExperimentError::Json(_)
                | ExperimentError::Mdp(MdpError::Invalid(_) | MdpError::Shape(_) | MdpError::Format(_))
                | ExperimentError::Train(TrainError::Config(_) | TrainError::DoubleSampling)
                | ExperimentError::Construction(ConstructionError::Precondition(_))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    #[default]
    Onpolicy,
    SingleTrajectory,
    OffpolicySweep,
    Correlation,
    Constructions,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    #[default]
    Tabular,
    /// Linear model over `dim` standard-normal features drawn per seed.
    RandomFeatures { dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    #[default]
    Zeros,
    /// Tabular models start at zero except on pairs missing from the training
    /// data, which start at their exact values.
    TrueOnMissing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub study: Study,
    /// `two_state`, `chain-N`, `gridworld-WxH` or a path to an MDP JSON file.
    pub mdp: String,
    pub gamma: f64,
    pub noise_levels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub learners: Vec<LearnerKind>,
    pub train: TrainConfig,
    /// Training transitions per dataset.
    pub dataset_size: usize,
    /// Evaluation transitions, drawn uniformly from a pool of `test_pool`.
    pub test_size: usize,
    pub test_pool: usize,
    /// Episode length cap during collection.
    pub horizon: usize,
    pub model: ModelSpec,
    pub init: InitSpec,
    /// Pairs removed from every training dataset.
    pub gap_pairs: Vec<(usize, usize)>,
    /// Share of highest-Bellman-error FQE functions dropped before correlating.
    pub fqe_outlier_fraction: f64,
    /// Random `(C, gamma)` draws per seed in the constructions study.
    pub construction_draws: usize,
    /// Where reports go; not part of the manifest or the config hash.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            study: Study::Onpolicy,
            mdp: "chain-10".into(),
            gamma: 0.9,
            noise_levels: vec![0.0],
            seeds: vec![0],
            learners: vec![LearnerKind::Brm, LearnerKind::Fqe, LearnerKind::Mc],
            train: TrainConfig::default(),
            dataset_size: 1000,
            test_size: 200,
            test_pool: 2000,
            horizon: 100,
            model: ModelSpec::Tabular,
            init: InitSpec::Zeros,
            gap_pairs: Vec::new(),
            fqe_outlier_fraction: 0.3,
            construction_draws: 20,
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} must lie in (0, 1)", self.gamma));
        }
        if self.study == Study::Constructions {
            return Ok(());
        }
        if self.learners.is_empty() {
            return bad("learners must not be empty".into());
        }
        if self.noise_levels.is_empty() {
            return bad("noise_levels must not be empty".into());
        }
        if let Some(n) = self.noise_levels.iter().find(|n| !(0.0..=1.0).contains(*n)) {
            return bad(format!("noise level {n} outside [0, 1]"));
        }
        if self.dataset_size == 0 || self.test_size == 0 || self.horizon == 0 {
            return bad("dataset_size, test_size and horizon must be positive".into());
        }
        if self.test_pool < self.test_size {
            return bad("test_pool must be at least test_size".into());
        }
        if !(0.0..1.0).contains(&self.fqe_outlier_fraction) {
            return bad("fqe_outlier_fraction must lie in [0, 1)".into());
        }
        if let ModelSpec::RandomFeatures { dim: 0 } = self.model {
            return bad("feature dimension must be positive".into());
        }
        if self.init == InitSpec::TrueOnMissing && self.model != ModelSpec::Tabular {
            return bad("true_on_missing initialisation needs a tabular model".into());
        }
        self.train.validate()?;
        match self.study {
            Study::Onpolicy | Study::SingleTrajectory if self.noise_levels != [0.0] => {
                bad("this study is on-policy: noise_levels must be [0]".into())
            }
            Study::OffpolicySweep if !self.noise_levels.contains(&0.0) || !self.noise_levels.iter().any(|&n| n > 0.0) => {
                bad("the sweep needs noise level 0 and at least one positive level".into())
            }
            Study::Correlation if self.seeds.len() < 5 => bad("correlation needs at least 5 seeds".into()),
            _ => Ok(()),
        }
    }
}

/// Final metrics of one `(learner, noise, seed)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub learner: LearnerKind,
    pub noise: f64,
    pub seed: u64,
    pub msbe_train: f64,
    pub nave_train: f64,
    pub msbe_test: f64,
    pub nave_test: f64,
    pub k: f64,
    pub missing_relevant_pairs: usize,
    pub final_loss: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub learner: LearnerKind,
    pub noise: f64,
    pub seed: u64,
    pub step: usize,
    pub loss: f64,
    pub msbe_train: f64,
    pub msbe_test: f64,
    pub nave_test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedCertificate {
    pub name: String,
    /// Observations are recorded but never fail a run.
    pub hard: bool,
    #[serde(flatten)]
    pub certificate: ConstructionCertificate,
}

/// One row of an algorithm x noise table, averaged over non-diverged seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub learner: LearnerKind,
    pub noise: f64,
    pub msbe_train: f64,
    pub msbe_test: f64,
    pub nave_test: f64,
    pub missing_relevant_pairs: f64,
    pub seeds: usize,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub learner: LearnerKind,
    pub train_data: String,
    pub test_data: String,
    pub functions: usize,
    /// `None` when either error has zero variance across functions.
    pub coefficient: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioRow {
    pub learner: LearnerKind,
    pub seed: u64,
    pub transitions: usize,
    pub mean_abs_bellman_error: f64,
    pub mean_abs_value_error: f64,
    /// `sum |VE| / sum |BE|`; `None` when the Bellman errors all vanish.
    pub ratio: Option<f64>,
    pub lower: f64,
    pub upper: f64,
    pub within_bounds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionErrorRow {
    pub learner: LearnerKind,
    pub seed: u64,
    pub t: usize,
    pub s: usize,
    pub a: usize,
    pub bellman_error: f64,
    pub value_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct StudyReport {
    pub rows: Vec<ReportRow>,
    pub curves: Vec<CurveRow>,
    pub certificates: Vec<NamedCertificate>,
    pub table: Vec<TableRow>,
    pub correlations: Vec<CorrelationRow>,
    pub ratios: Vec<RatioRow>,
    pub transitions: Vec<TransitionErrorRow>,
}

impl StudyReport {
    /// True when every hard certificate passed.
    pub fn all_passed(&self) -> bool {
        self.certificates.iter().filter(|c| c.hard).all(|c| c.certificate.passed)
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    study: Study,
    config_hash: String,
    version: &'static str,
    seeds: &'a [u64],
    files: Vec<&'static str>,
    config: &'a ExperimentConfig,
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.csv`, `curves.csv`, `certificates.json`, `manifest.json`
/// and any study-specific tables into `dir`. Contents depend only on the
/// config and the report, so repeated runs produce identical bytes.
pub fn write_report(report: &StudyReport, config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(dir)?;
    let mut files = vec!["report.csv", "curves.csv", "certificates.json", "manifest.json"];
    write_rows(
        &dir.join("report.csv"),
        &report.rows,
        &[
            "learner", "noise", "seed", "msbe_train", "nave_train", "msbe_test", "nave_test", "k",
            "missing_relevant_pairs", "final_loss", "diverged",
        ],
    )?;
    write_rows(
        &dir.join("curves.csv"),
        &report.curves,
        &["learner", "noise", "seed", "step", "loss", "msbe_train", "msbe_test", "nave_test"],
    )?;
    fs::write(dir.join("certificates.json"), serde_json::to_string_pretty(&report.certificates)? + "\n")?;
    if !report.table.is_empty() {
        write_rows(&dir.join("table.csv"), &report.table, &[])?;
        files.push("table.csv");
    }
    if !report.correlations.is_empty() {
        write_rows(&dir.join("correlations.csv"), &report.correlations, &[])?;
        files.push("correlations.csv");
    }
    if !report.ratios.is_empty() {
        write_rows(&dir.join("ratios.csv"), &report.ratios, &[])?;
        files.push("ratios.csv");
    }
    if !report.transitions.is_empty() {
        write_rows(&dir.join("transitions.csv"), &report.transitions, &[])?;
        files.push("transitions.csv");
    }
    let manifest = Manifest {
        study: config.study,
        config_hash: config.hash(),
        version: env!("CARGO_PKG_VERSION"),
        seeds: &config.seeds,
        files: files.clone(),
        config,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(files.into_iter().map(|f| dir.join(f)).collect())
}

/// Runs the study named in the config.
pub fn run_study(config: &ExperimentConfig) -> Result<StudyReport, ExperimentError> {
    match config.study {
        Study::Onpolicy => run_onpolicy_study(config),
        Study::SingleTrajectory => run_single_trajectory_study(config),
        Study::OffpolicySweep => run_offpolicy_sweep(config),
        Study::Correlation => run_correlation_study(config),
        Study::Constructions => run_constructions_study(config),
    }
}

/// SplitMix64 mix of `seed` and a stream tag, giving independent per-purpose seeds.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
