use std::fs;
use std::path::Path;

use bellman_lab::data::collect;
use bellman_lab::envs::resolve;
use bellman_lab::experiments::{
    ensemble_correlation, run_correlation_study, run_offpolicy_sweep, run_onpolicy_study, run_single_trajectory_study,
    run_study, trajectory_errors, write_report, ExperimentConfig, ExperimentError, InitSpec, ModelSpec, Study,
};
use bellman_lab::learners::LearnerKind;
use bellman_lab::mdp::exact_q;

fn base(study: Study, mdp: &str) -> ExperimentConfig {
    ExperimentConfig { study, mdp: mdp.into(), ..ExperimentConfig::default() }
}

fn read_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn onpolicy_two_state_learners_reach_the_truth() {
    let report = run_onpolicy_study(&base(Study::Onpolicy, "two_state")).unwrap();
    assert_eq!(report.rows.len(), 3);
    for row in &report.rows {
        assert!(row.nave_test < 1e-3, "{row:?}");
    }
}

#[test]
fn onpolicy_mc_is_exact_at_visited_pairs() {
    let cfg = ExperimentConfig { learners: vec![LearnerKind::Mc], ..base(Study::Onpolicy, "chain-8") };
    let report = run_onpolicy_study(&cfg).unwrap();
    assert!(report.rows[0].nave_train < 1e-6, "{:?}", report.rows[0]);
}

#[test]
fn every_study_writes_identical_bytes_twice() {
    let configs = [
        base(Study::Onpolicy, "gridworld-5x5"),
        ExperimentConfig { noise_levels: vec![0.0, 0.3], ..base(Study::OffpolicySweep, "chain-6") },
        ExperimentConfig {
            seeds: (0..5).collect(),
            noise_levels: vec![0.0, 0.2],
            train: bellman_lab::learners::TrainConfig { steps: 500, ..Default::default() },
            ..base(Study::Correlation, "chain-6")
        },
        ExperimentConfig { model: ModelSpec::RandomFeatures { dim: 4 }, ..base(Study::SingleTrajectory, "chain-8") },
        base(Study::Constructions, "two_state"),
    ];
    for cfg in configs {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_report(&run_study(&cfg).unwrap(), &cfg, a.path()).unwrap();
        write_report(&run_study(&cfg).unwrap(), &cfg, b.path()).unwrap();
        let (fa, fb) = (read_dir(a.path()), read_dir(b.path()));
        assert!(fa.iter().any(|(n, _)| n == "manifest.json"));
        assert_eq!(fa, fb, "{:?}", cfg.study);
    }
}

#[test]
fn manifest_records_hash_and_seeds() {
    let cfg = ExperimentConfig { seeds: vec![4, 9], ..base(Study::Onpolicy, "two_state") };
    let dir = tempfile::tempdir().unwrap();
    let files = write_report(&run_study(&cfg).unwrap(), &cfg, dir.path()).unwrap();
    assert_eq!(files.len(), 4);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], cfg.hash());
    assert_eq!(manifest["seeds"], serde_json::json!([4, 9]));
    assert_eq!(manifest["study"], "onpolicy");
    let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(report.starts_with("learner,noise,seed,msbe_train,nave_train,msbe_test,nave_test,k,missing_relevant_pairs"));
    assert_eq!(report.lines().count(), 1 + 3 * 2);
}

#[test]
fn single_trajectory_ratios_stay_in_the_interval() {
    let cfg = ExperimentConfig {
        gamma: 0.99,
        seeds: vec![0, 1, 2],
        horizon: 200,
        model: ModelSpec::RandomFeatures { dim: 8 },
        ..base(Study::SingleTrajectory, "chain-20")
    };
    let report = run_single_trajectory_study(&cfg).unwrap();
    assert!(report.all_passed());
    for r in &report.ratios {
        let ratio = r.ratio.unwrap();
        assert!((0.503..=100.0).contains(&ratio), "{r:?}");
    }
    let mc: Vec<f64> = report.ratios.iter().filter(|r| r.learner == LearnerKind::Mc).map(|r| r.ratio.unwrap()).collect();
    let mean = mc.iter().sum::<f64>() / mc.len() as f64;
    assert!((0.5..=2.0).contains(&mean), "{mc:?}");
}

#[test]
fn exact_values_have_no_trajectory_errors() {
    let (mdp, policy) = resolve("gridworld-4x4", 0.9).unwrap();
    let q_true = exact_q(&mdp, &policy).unwrap();
    let episode = collect(&mdp, &policy, 1, 50, 3).unwrap();
    for (be, ve) in trajectory_errors(&mdp, &policy, &q_true, &q_true, &episode.transitions) {
        assert!(be.abs() < 1e-12 && ve.abs() < 1e-12);
    }
}

#[test]
fn sweep_with_a_gap_keeps_bellman_error_low_but_not_value_error() {
    let learners = vec![LearnerKind::Brm, LearnerKind::Fqe];
    let clean = ExperimentConfig { learners: learners.clone(), noise_levels: vec![0.0, 0.3], ..base(Study::OffpolicySweep, "gridworld-4x4") };
    let gapped = ExperimentConfig { gap_pairs: (0..4).map(|a| (5, a)).collect(), ..clean.clone() };
    let clean = run_offpolicy_sweep(&clean).unwrap();
    let gapped = run_offpolicy_sweep(&gapped).unwrap();
    assert_eq!(clean.rows.len(), 4);
    for (c, g) in clean.rows.iter().zip(&gapped.rows) {
        assert_eq!(c.missing_relevant_pairs, 0);
        assert!(g.missing_relevant_pairs > 0);
        if c.noise == 0.0 {
            assert!(c.nave_test < 1e-2, "{c:?}");
        }
        if g.learner == LearnerKind::Brm {
            assert!(g.msbe_train < 1e-3 && g.nave_test > c.nave_test, "{g:?} vs {c:?}");
        }
    }
    let table = &gapped.table;
    assert_eq!(table.len(), 4);
}

#[test]
fn gap_with_exact_initialisation_separates_brm_from_fqe() {
    let cfg = ExperimentConfig {
        learners: vec![LearnerKind::Brm, LearnerKind::Fqe],
        gap_pairs: vec![(2, 1)],
        init: InitSpec::TrueOnMissing,
        dataset_size: 500,
        ..base(Study::Onpolicy, "chain-6")
    };
    let report = run_onpolicy_study(&cfg).unwrap();
    let (brm, fqe) = (&report.rows[0], &report.rows[1]);
    assert!(brm.missing_relevant_pairs >= 1);
    assert!(brm.msbe_train < 1e-3);
    assert!(brm.nave_test >= 2.0 * fqe.nave_test, "{brm:?} vs {fqe:?}");
}

#[test]
fn shifted_ensemble_correlates_perfectly() {
    let (mdp, policy) = resolve("chain-8", 0.9).unwrap();
    let q_true = exact_q(&mdp, &policy).unwrap();
    let data = collect(&mdp, &policy, 5, 50, 0).unwrap();
    let qs: Vec<_> = (1..=6).map(|i| q_true.add_scalar(0.5 * i as f64).with_terminals_zeroed(&mdp.terminal_mask)).collect();
    let r = ensemble_correlation(&mdp, &policy, &q_true, &qs, &data).unwrap();
    assert!((r - 1.0).abs() < 1e-12, "{r}");
    let constant = vec![q_true.clone(); 6];
    assert!(ensemble_correlation(&mdp, &policy, &q_true, &constant, &data).is_err());
}

#[test]
fn brm_on_policy_errors_correlate_positively() {
    let cfg = ExperimentConfig {
        learners: vec![LearnerKind::Brm],
        seeds: (0..8).collect(),
        train: bellman_lab::learners::TrainConfig { steps: 2000, ..Default::default() },
        dataset_size: 300,
        ..base(Study::Correlation, "chain-8")
    };
    let report = run_correlation_study(&cfg).unwrap();
    let row = report.correlations.iter().find(|r| r.train_data == "0" && r.test_data == "0").unwrap();
    assert!(row.coefficient.unwrap() > 0.0, "{row:?}");
}

#[test]
fn invalid_configs_are_validation_errors() {
    let empty = ExperimentConfig { learners: vec![], ..base(Study::OffpolicySweep, "chain-5") };
    let err = run_offpolicy_sweep(&empty).unwrap_err();
    assert!(err.is_validation(), "{err}");
    let no_positive = base(Study::OffpolicySweep, "chain-5");
    assert!(run_offpolicy_sweep(&no_positive).unwrap_err().is_validation());
    let few_seeds = base(Study::Correlation, "chain-5");
    assert!(run_correlation_study(&few_seeds).unwrap_err().is_validation());
    assert!(matches!(ExperimentConfig::from_json(r#"{"unknown": 1}"#), Err(ExperimentError::Json(_))));
    let unknown_mdp = base(Study::Onpolicy, "maze-3");
    assert!(run_study(&unknown_mdp).unwrap_err().is_validation());
}

#[test]
fn config_json_uses_defaults_for_missing_fields() {
    let cfg = ExperimentConfig::from_json(r#"{"study": "offpolicy_sweep", "mdp": "chain-4", "noise_levels": [0.0, 0.5]}"#).unwrap();
    assert_eq!(cfg.study, Study::OffpolicySweep);
    assert_eq!(cfg.seeds, vec![0]);
    assert_eq!(cfg.train.batch_size, 256);
}
