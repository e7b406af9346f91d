use dmida_core::classifier::{train, SoftmaxClassifier, TrainConfig};
use dmida_core::harness::{
    episode_rng, sample_episode, synth_gaussian_tasks, Mode, SynthSpec, TaskSpec,
};
use dmida_core::kernels::{gaussian_gram, hsic_estimate, permutation_independence_check};
use dmida_core::selftrain::{run_episode, run_loop, LoopConfig, LoopInput, StopReason};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng))
}

fn easy_set() -> dmida_core::embedding::EmbeddingSet {
    // means on a sphere of radius six spreads, nearly orthogonal in 64 dimensions
    let spec = SynthSpec {
        n_classes: 10,
        dim: 64,
        separation: 1.2,
        spread: 0.2,
        per_class: 40,
    };
    synth_gaussian_tasks(&mut ChaCha8Rng::seed_from_u64(21), &spec).unwrap()
}

#[test]
fn well_separated_tasks_are_solved_and_stabilize_quickly() {
    let set = easy_set().l2_normalize().unwrap();
    let cfg = LoopConfig::default();
    let spec = TaskSpec::default();
    let mut good = 0;
    for seed in 0..200 {
        let mut rng = episode_rng(seed, 0);
        let ep = sample_episode(&mut rng, &set, &spec).unwrap();
        let res = run_episode(&ep, &set, &cfg, &mut rng).unwrap();
        if res.query_accuracy >= 0.99
            && res.stop == StopReason::Stabilized
            && res.iterations.len() <= 4
        {
            good += 1;
        } else {
            eprintln!(
                "seed {seed}: acc {} stop {:?} passes {}",
                res.query_accuracy,
                res.stop,
                res.iterations.len()
            );
        }
    }
    assert!(good >= 190, "{good}/200");
}

#[test]
fn without_unlabeled_rows_the_loop_is_plain_cross_entropy() {
    let set = easy_set();
    let spec = TaskSpec {
        mode: Mode::Semi,
        u_per_class: 0,
        ..TaskSpec::default()
    };
    let ep = sample_episode(&mut episode_rng(4, 0), &set, &spec).unwrap();
    assert!(ep.unlabeled.is_empty());
    let cfg = LoopConfig::default();
    let res = run_episode(&ep, &set, &cfg, &mut episode_rng(4, 1)).unwrap();
    assert_eq!(res.stop, StopReason::NoUnlabeled);

    let support = set.gather(&ep.support);
    let init = SoftmaxClassifier::prototype_init(&support, &ep.support_labels, 5).unwrap();
    let ce = TrainConfig {
        loss: "ce".into(),
        ..cfg.train.clone()
    };
    let (plain, _) = train(
        &init,
        &support,
        &ep.support_labels,
        &DMatrix::zeros(0, set.dim()),
        &ce,
        None,
    )
    .unwrap();
    assert_eq!(res.classifier, plain);
}

#[test]
fn zero_quota_is_dependency_training_only() {
    let set = easy_set().l2_normalize().unwrap();
    let ep = sample_episode(&mut episode_rng(5, 0), &set, &TaskSpec::default()).unwrap();
    let cfg = LoopConfig {
        k_per_class: 0,
        ..LoopConfig::default()
    };
    let res = run_episode(&ep, &set, &cfg, &mut episode_rng(5, 1)).unwrap();
    assert_eq!(res.iterations.len(), 1);
    assert!(res.state.selected.is_empty());

    let support = set.gather(&ep.support);
    let unlabeled = set.gather(&ep.unlabeled);
    let init = SoftmaxClassifier::prototype_init(&support, &ep.support_labels, 5).unwrap();
    let (dm_only, _) = train(
        &init,
        &support,
        &ep.support_labels,
        &unlabeled,
        &cfg.train,
        None,
    )
    .unwrap();
    assert_eq!(res.classifier, dm_only);
}

#[test]
fn support_and_pool_stay_disjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..40 {
        let support = randn(&mut rng, 3, 4);
        let unlabeled = randn(&mut rng, 18, 4);
        let query = randn(&mut rng, 3, 4);
        let cfg = LoopConfig {
            k_per_class: 2,
            selector: "rand".into(),
            train: TrainConfig {
                lr: 0.05,
                iters: 10,
                ..TrainConfig::default()
            },
            ..LoopConfig::default()
        };
        let input = LoopInput {
            n_way: 3,
            support: &support,
            support_labels: &[0, 1, 2],
            query: &query,
            query_labels: &[0, 1, 2],
            unlabeled: &unlabeled,
            unlabeled_labels: None,
        };
        let res = run_loop(&input, &cfg, &mut rng).unwrap();
        let mut seen = [false; 18];
        for &(u, _) in &res.state.selected {
            assert!(!seen[u], "row {u} merged twice");
            seen[u] = true;
        }
        assert!(res.state.pool.iter().all(|&u| !seen[u]));
        for (i, rec) in res.iterations.iter().enumerate() {
            // the original three support rows are always present
            let merged_before: usize = res.iterations[..i].iter().map(|r| r.selected.len()).sum();
            assert_eq!(rec.support_size, 3 + merged_before);
        }
    }
}

#[test]
fn consecutive_labels_match_after_convergence() {
    let set = easy_set().l2_normalize().unwrap();
    let ep = sample_episode(&mut episode_rng(8, 0), &set, &TaskSpec::default()).unwrap();
    let res = run_episode(&ep, &set, &LoopConfig::default(), &mut episode_rng(8, 1)).unwrap();
    assert_eq!(res.stop, StopReason::Stabilized);
    assert_eq!(
        res.state.last_pseudo_labels.as_ref(),
        Some(&res.pseudo_labels)
    );
}

#[test]
fn permutation_check_separates_dependence_from_independence() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = randn(&mut rng, 40, 2);
    let dependent = &z * DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]);
    assert!(permutation_independence_check(&z, &dependent, 1.0, 200, &mut rng).unwrap() < 0.05);

    let mut above = 0;
    for _ in 0..20 {
        let a = randn(&mut rng, 40, 2);
        let b = randn(&mut rng, 40, 2);
        if permutation_independence_check(&a, &b, 1.0, 200, &mut rng).unwrap() > 0.05 {
            above += 1;
        }
    }
    assert!(above >= 15, "{above}/20");
}

#[test]
fn estimator_spread_shrinks_with_sample_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let iqr = |rng: &mut ChaCha8Rng, u: usize| {
        let mut values: Vec<f64> = (0..60)
            .map(|_| {
                let z = randn(rng, u, 1);
                let y = z.map(|v| v.sin()) + randn(rng, u, 1) * 0.5;
                let k = gaussian_gram(&z, 1.0).unwrap().into_matrix();
                let l = gaussian_gram(&y, 1.0).unwrap().into_matrix();
                hsic_estimate(&k, &l).unwrap()
            })
            .collect();
        values.sort_by(f64::total_cmp);
        values[45] - values[15]
    };
    let spreads: Vec<f64> = [20, 40, 80, 160, 320]
        .iter()
        .map(|&u| iqr(&mut rng, u))
        .collect();
    assert!(spreads.windows(2).all(|w| w[1] < w[0]), "{spreads:?}");
}
