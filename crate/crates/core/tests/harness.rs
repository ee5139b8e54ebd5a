use proptest::prelude::*;

use semamil::bagdata::{generate_synthetic, split_monte_carlo, Dataset, SynthConfig};
use semamil::baselines::{PoolKind, PoolingBaseline};
use semamil::harness::{
    auc_binary, auc_score, mean_std, run_ablation, run_protocol, train_fold, FoldMetrics, Metrics, OptimizerConfig,
    TrainConfig,
};
use semamil::model::{MilModel, ModelConfig, SemaMilModel};

fn brute_auc(scores: &[f64], pos: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if pos[i] && !pos[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

proptest! {
    #[test]
    fn auc_equals_pairwise_count(
        data in prop::collection::vec((0u8..12, any::<bool>()), 2..200)
    ) {
        // Scores from a small alphabet so ties are frequent.
        let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 7.0).collect();
        let pos: Vec<bool> = data.iter().map(|(_, p)| *p).collect();
        let n_pos = pos.iter().filter(|&&p| p).count();
        prop_assume!(n_pos > 0 && n_pos < pos.len());
        let fast = auc_binary(&scores, &pos).unwrap();
        prop_assert!((fast - brute_auc(&scores, &pos)).abs() < 1e-12);

        let table: Vec<Vec<f64>> = scores.iter().map(|&s| vec![1.0 - s, s]).collect();
        let labels: Vec<usize> = pos.iter().map(|&p| p as usize).collect();
        prop_assert!((auc_score(&table, &labels).unwrap() - fast).abs() < 1e-12);
    }

    #[test]
    fn std_matches_two_pass_formula(values in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let (m, s) = mean_std(&values);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((m - mean).abs() < 1e-15);
        prop_assert!((s - var.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn identical_folds_have_zero_std() {
    let m = Metrics::from_folds(
        (0..10)
            .map(|fold| FoldMetrics {
                fold,
                auc: 0.83,
                acc: 0.7,
            })
            .collect(),
    );
    assert_eq!(m.mean_std, ((0.83, 0.0), (0.7, 0.0)));
}

fn small_dataset() -> Dataset {
    generate_synthetic(&SynthConfig {
        n_bags: 40,
        l_min: 12,
        l_max: 20,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        d: 8,
        hidden: 8,
        n_clusters: 4,
        k: 3,
        n_state: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let ds = small_dataset();
    let plan = split_monte_carlo(ds.bags.len(), 1, 0).unwrap();
    let model = SemaMilModel::init(&small_model(), 1).unwrap();
    for optimizer in [OptimizerConfig::Sgd, OptimizerConfig::default()] {
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 3,
            optimizer,
            early_stop_patience: 10,
            ..TrainConfig::default()
        };
        let (trained, h) = train_fold(model.clone(), &ds, &plan.folds[0], &cfg).unwrap();
        assert_eq!(trained, model);
        assert_eq!(h.epochs.len(), 3);
    }
}

#[test]
fn training_is_deterministic() {
    let ds = small_dataset();
    let plan = split_monte_carlo(ds.bags.len(), 1, 0).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 3,
        seed: 17,
        ..TrainConfig::default()
    };
    let run = || train_fold(SemaMilModel::init(&small_model(), 1).unwrap(), &ds, &plan.folds[0], &cfg).unwrap();
    let (m1, h1) = run();
    let (m2, h2) = run();
    assert_eq!(h1, h2);
    assert_eq!(m1, m2);
}

#[test]
fn non_trainable_state_matrix_stays_fixed() {
    let ds = small_dataset();
    let plan = split_monte_carlo(ds.bags.len(), 1, 0).unwrap();
    let model = SemaMilModel::init(&small_model(), 1).unwrap();
    let cfg = TrainConfig {
        lr: 1e-2,
        epochs: 2,
        ..TrainConfig::default()
    };
    let (trained, _) = train_fold(model.clone(), &ds, &plan.folds[0], &cfg).unwrap();
    for (a, b) in trained.tensors().iter().zip(model.tensors().iter()) {
        if !a.trainable {
            assert_eq!(a.data, b.data, "{}", a.name);
        }
    }
    assert_ne!(trained.w_head, model.w_head);
}

#[test]
fn train_loss_decreases_over_first_five_epochs_on_default_data() {
    let ds = generate_synthetic(&SynthConfig::default()).unwrap();
    let plan = split_monte_carlo(ds.bags.len(), 1, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        early_stop_patience: 5,
        ..TrainConfig::default()
    };
    let (_, h) = train_fold(SemaMilModel::init(&ModelConfig::default(), 0).unwrap(), &ds, &plan.folds[0], &cfg).unwrap();
    let losses: Vec<f64> = h.epochs.iter().map(|e| e.train_loss).collect();
    assert_eq!(losses.len(), 5);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn protocol_is_deterministic_and_independent_of_jobs() {
    let ds = small_dataset();
    let plan = split_monte_carlo(ds.bags.len(), 3, 5).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 2,
        ..TrainConfig::default()
    };
    let mc = small_model();
    let a = run_protocol(&ds, &plan, |s| SemaMilModel::init(&mc, s), &cfg, 1).unwrap();
    let b = run_protocol(&ds, &plan, |s| SemaMilModel::init(&mc, s), &cfg, 3).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.metrics.per_fold.len(), 3);
    let folds: Vec<usize> = a.metrics.per_fold.iter().map(|f| f.fold).collect();
    assert_eq!(folds, [0, 1, 2]);
    let again = Metrics::from_folds(a.metrics.per_fold.clone());
    assert_eq!(again, a.metrics);
}

#[test]
fn baseline_runs_through_protocol() {
    let ds = small_dataset();
    let plan = split_monte_carlo(ds.bags.len(), 2, 0).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 2,
        ..TrainConfig::default()
    };
    let r = run_protocol(&ds, &plan, |s| Ok(PoolingBaseline::init(PoolKind::Max, 32, 8, 2, s)), &cfg, 1).unwrap();
    assert!(r.metrics.per_fold.iter().all(|f| (0.0..=1.0).contains(&f.acc)));
}

#[test]
fn ablation_table_has_four_rows_in_order() {
    let ds = small_dataset();
    let plan = split_monte_carlo(ds.bags.len(), 2, 0).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 1,
        ..TrainConfig::default()
    };
    let table = run_ablation(&ds, &plan, &small_model(), &cfg, 1).unwrap();
    let flags: Vec<(bool, bool)> = table.rows.iter().map(|r| (r.spec.sr_enabled, r.spec.srsm_enabled)).collect();
    assert_eq!(flags, [(false, false), (false, true), (true, false), (true, true)]);
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("sr,srsm,auc_mean,auc_std,acc_mean,acc_std\nfalse,false,"));
}
