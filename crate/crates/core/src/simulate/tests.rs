use super::*;
use crate::analytic::AnalyticParams;
use crate::datagen::{PoolSource, PopulationKind};

fn point_config(n: usize, n_private: usize, algorithm: Algorithm, z: f64, ratio: f64) -> ExperimentConfig {
    let p = AnalyticParams::new(n, n_private, 4, 1, 1.0, 0.5, 0.0).unwrap();
    ExperimentConfig {
        population: PopulationSpec::from_analytic(PopulationKind::PointEstimation, &p, 11),
        algorithm,
        feo2: FeO2Config {
            ratio,
            privacy: DpConfig {
                z,
                initial_clip: 100.0,
                ..DpConfig::default()
            },
        },
        ditto: None,
        training: TrainingConfig::default(),
        rounds: 4,
        cohort_fraction: 0.5,
        master_seed: 5,
    }
}

fn shard_config(algorithm: Algorithm, z: f64, ratio: f64) -> ExperimentConfig {
    ExperimentConfig {
        population: PopulationSpec {
            kind: PopulationKind::LabelShard,
            analytic: None,
            n_clients: 40,
            samples_per_client: 10,
            rho_np: 0.1,
            skew: Some(7),
            test_fraction: 0.2,
            source: Some(PoolSource::Synthetic {
                per_class: 30,
                n_features: 6,
                n_classes: 10,
                separation: 1.0,
            }),
            seed: 3,
        },
        algorithm,
        feo2: FeO2Config {
            ratio,
            privacy: DpConfig { z, ..DpConfig::default() },
        },
        ditto: Some(DittoConfig {
            lambda_p: 0.1,
            lambda_np: 0.1,
            eta_p: 0.1,
        }),
        training: TrainingConfig {
            learning_rate: 0.1,
            epochs: 1,
            batch_size: Some(4),
            server_learning_rate: 1.0,
        },
        rounds: 5,
        cohort_fraction: 0.25,
        master_seed: 9,
    }
}

#[test]
fn noiseless_round_averages_cohort_means() {
    let cfg = point_config(30, 0, Algorithm::FeO2, 0.0, 1.0);
    let (env, mut state) = Environment::new(cfg.clone()).unwrap();
    let cohort = sample_cohort(&cfg, 0);
    assert_eq!(cohort.len(), 15);
    let expected: f64 = cohort
        .iter()
        .map(|&i| state.clients[i].dataset.local_estimate().unwrap().as_slice()[0])
        .sum::<f64>()
        / cohort.len() as f64;
    let report = run_round(&mut state, &env, &cohort).unwrap();
    assert!((state.global.as_slice()[0] - expected).abs() < 1e-12);
    assert_eq!((report.n_private, report.n_nonprivate), (0, 15));
    assert_eq!(report.round, 1);
}

#[test]
fn all_opted_out_feo2_is_fedavg() {
    let feo2 = run_experiment(&point_config(30, 0, Algorithm::FeO2, 1.0, 0.4)).unwrap();
    let fedavg = run_experiment(&point_config(30, 0, Algorithm::FedAvg, 0.0, 1.0)).unwrap();
    assert_eq!(feo2, fedavg);
}

#[test]
fn all_private_feo2_is_dp_fedavg() {
    let feo2 = run_experiment(&point_config(30, 30, Algorithm::FeO2, 1.0, 0.4)).unwrap();
    let dp = run_experiment(&point_config(30, 30, Algorithm::DpFedAvg, 1.0, 0.9)).unwrap();
    assert_eq!(feo2, dp);
}

#[test]
fn unit_ratio_without_noise_is_fedavg_on_the_global_model() {
    let feo2 = run_experiment(&point_config(30, 12, Algorithm::FeO2, 0.0, 1.0)).unwrap();
    let fedavg = run_experiment(&point_config(30, 12, Algorithm::FedAvg, 0.0, 1.0)).unwrap();
    for (a, b) in feo2.iter().zip(&fedavg) {
        assert_eq!(a.acc_g, b.acc_g);
        assert_eq!(a.clip_norm, b.clip_norm);
        assert_eq!(a.n_private + a.n_nonprivate, b.n_nonprivate);
    }
}

#[test]
fn zero_ratio_trains_only_opted_out_clients() {
    let cfg = ExperimentConfig {
        ditto: Some(DittoConfig { lambda_p: 1.0, lambda_np: 1.0, eta_p: 0.5 }),
        ..point_config(30, 20, Algorithm::FeO2, 1.0, 0.0)
    };
    let (env, mut state) = Environment::new(cfg).unwrap();
    let reports = run_from(&env, &mut state).unwrap();
    assert!(reports.iter().all(|r| r.n_private == 0));
    assert!(state
        .clients
        .iter()
        .filter(|c| c.is_private)
        .all(|c| c.personalized_model.is_none()));
    assert_eq!(state.ledger.rounds_recorded, 0);
}

#[test]
fn no_rounds_means_no_reports_and_negligible_epsilon() {
    let cfg = ExperimentConfig {
        rounds: 0,
        ..point_config(10, 5, Algorithm::FeO2, 1.0, 0.5)
    };
    let (env, mut state) = Environment::new(cfg).unwrap();
    assert!(run_from(&env, &mut state).unwrap().is_empty());
    assert!(state.epsilon(1e-5).unwrap() < 0.03);
}

#[test]
fn ledger_advances_only_with_private_participants() {
    let cfg = ExperimentConfig {
        cohort_fraction: 0.1,
        rounds: 30,
        ..point_config(20, 2, Algorithm::FeO2, 1.0, 0.5)
    };
    let (env, mut state) = Environment::new(cfg.clone()).unwrap();
    let reports = run_from(&env, &mut state).unwrap();
    let with_private = reports.iter().filter(|r| r.n_private > 0).count();
    assert!(with_private > 0 && with_private < 30);
    assert_eq!(state.ledger.rounds_recorded, with_private);

    let dp = ExperimentConfig { algorithm: Algorithm::DpFedAvg, ..cfg };
    let (env, mut state) = Environment::new(dp).unwrap();
    run_from(&env, &mut state).unwrap();
    assert_eq!(state.ledger.rounds_recorded, 30);
}

#[test]
fn noiseless_private_release_has_infinite_epsilon() {
    let reports = run_experiment(&point_config(10, 5, Algorithm::FeO2, 0.0, 0.5)).unwrap();
    assert!(reports.last().unwrap().epsilon.is_infinite());
    let json = serde_json::to_value(reports.last().unwrap()).unwrap();
    assert!(json["epsilon"].is_null());
}

#[test]
fn reports_are_independent_of_worker_count() {
    let cfg = shard_config(Algorithm::FeO2, 1.0, 0.1);
    let one = run_experiment_with_workers(&cfg, 1).unwrap();
    let eight = run_experiment_with_workers(&cfg, 8).unwrap();
    assert_eq!(one, eight);
}

#[test]
fn classification_reports_are_consistent() {
    let reports = run_experiment(&shard_config(Algorithm::FeO2, 0.5, 0.1)).unwrap();
    assert_eq!(reports.len(), 5);
    for r in &reports {
        for v in [r.acc_g, r.acc_g_p, r.acc_g_np, r.acc_l_p, r.acc_l_np].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(r.delta_g, Some(r.acc_g_np.unwrap() - r.acc_g_p.unwrap()));
        assert_eq!(r.delta_l, Some(r.acc_l_np.unwrap() - r.acc_l_p.unwrap()));
        assert!(r.epsilon.is_finite() && r.epsilon > 0.0);
    }
    let dp = run_experiment(&shard_config(Algorithm::DpFedAvg, 0.5, 1.0)).unwrap();
    assert!(dp.iter().all(|r| r.acc_g_np.is_none() && r.delta_g.is_none()));
}

#[test]
fn divergence_reports_round_and_client() {
    let cfg = ExperimentConfig {
        training: TrainingConfig { learning_rate: 1e300, epochs: 3, ..TrainingConfig::default() },
        population: PopulationSpec {
            analytic: Some(AnalyticParams::new(10, 5, 4, 1, 1e300, 0.5, 0.0).unwrap()),
            ..point_config(10, 5, Algorithm::FeO2, 1.0, 0.5).population
        },
        ..point_config(10, 5, Algorithm::FeO2, 1.0, 0.5)
    };
    match run_experiment(&cfg) {
        Err(Error::NumericFailure { round: Some(1), client: Some(_), .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad_ratio = point_config(10, 5, Algorithm::FeO2, 1.0, 1.5);
    assert_eq!(
        bad_ratio.validate(),
        Err(Error::config("algorithm.r", "r must be in [0,1]"))
    );
    let noisy_fedavg = point_config(10, 5, Algorithm::FedAvg, 1.0, 1.0);
    assert!(noisy_fedavg.validate().is_err());
}
