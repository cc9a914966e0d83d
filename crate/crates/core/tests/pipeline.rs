use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smp_core::data::{join_dataset, PostRecord, UserProfile};
use smp_core::error::Error;
use smp_core::folds::{
    make_group_kfold, median_aggregate, run_ablation, run_cv_predict, PipelineConfig,
};
use smp_core::gbdt::GbdtConfig;
use smp_core::manifest::{ModelConfig, ModelFile, NEURAL_MEMBER_NOTE};
use smp_core::metrics::{ablation_csv, feature_correlation_report, AblationModel};
use smp_core::mftm::{apply_transform, fit_transform, BlockTag, TransformOptions, TransformState};
use smp_core::neuro::MlpConfig;
use smp_core::synth::{generate, SynthConfig, SynthData};

fn small() -> SynthData {
    generate(&SynthConfig {
        n_users: 60,
        seed: 7,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn quick() -> PipelineConfig {
    PipelineConfig {
        gbdt: GbdtConfig {
            num_trees: 60,
            learning_rate: 0.1,
            min_samples_leaf: 5,
            ..GbdtConfig::default()
        },
        mlp: MlpConfig {
            hidden: vec![16],
            epochs: 15,
            batch_size: 32,
            ..MlpConfig::default()
        },
        alpha: 0.7,
    }
}

#[test]
fn cv_prediction_shapes_and_fold_metrics() {
    let d = small();
    let plan = make_group_kfold(&d.train, 4, None).unwrap();
    let cfg = ModelConfig::Gbdt(quick().gbdt);
    let blocks = [BlockTag::Time, BlockTag::Eu, BlockTag::Image];
    let out = run_cv_predict(
        &d.train,
        &d.test,
        &plan,
        &cfg,
        &blocks,
        &TransformOptions::default(),
    )
    .unwrap();
    assert_eq!(out.prediction.per_fold.len(), 4);
    assert!(out
        .prediction
        .per_fold
        .iter()
        .all(|p| p.len() == d.test.len()));
    assert_eq!(out.prediction.pids, d.test.pids());
    let metrics = out.fold_metrics();
    assert_eq!(
        metrics.iter().map(|m| m.n_valid).sum::<usize>(),
        d.train.len()
    );
    assert!(metrics
        .iter()
        .all(|m| m.n_train + m.n_valid == d.train.len()));
    for f in &out.folds {
        // Blocks are stored in canonical order regardless of request order.
        assert_eq!(
            f.state.order,
            vec![BlockTag::Image, BlockTag::Time, BlockTag::Eu]
        );
    }
}

#[test]
fn cv_is_deterministic() {
    let d = small();
    let plan = make_group_kfold(&d.train, 3, None).unwrap();
    let cfg = ModelConfig::Mlp(quick().mlp);
    let run = || {
        run_cv_predict(
            &d.train,
            &d.test,
            &plan,
            &cfg,
            &[BlockTag::Eu, BlockTag::Cap],
            &TransformOptions::default(),
        )
        .unwrap()
        .prediction
    };
    assert_eq!(run(), run());
}

#[test]
fn tiny_training_portion_is_reported_with_fold() {
    let d = generate(&SynthConfig {
        n_users: 6,
        posts_min: 1,
        posts_max: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let plan = make_group_kfold(&d.train, 3, None).unwrap();
    let cfg = ModelConfig::Gbdt(GbdtConfig::default());
    let err = run_cv_predict(
        &d.train,
        &d.test,
        &plan,
        &cfg,
        &[BlockTag::Time],
        &TransformOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Fold { .. }));
    assert_eq!(err.kind(), "insufficient-data");
}

#[test]
fn ablation_rows_follow_input_order() {
    let d = small();
    let plan = make_group_kfold(&d.train, 3, None).unwrap();
    let with_eu = vec![BlockTag::Time, BlockTag::Eu];
    let without = vec![BlockTag::Time];
    let rows = run_ablation(
        &d.train,
        &d.test,
        &plan,
        &quick(),
        &[with_eu.clone(), without.clone(), with_eu.clone()],
        &[AblationModel::Gbdt],
        &TransformOptions::default(),
    )
    .unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].blocks, with_eu);
    assert_eq!(rows[1].blocks, without);
    assert_eq!((rows[0].src, rows[0].mae), (rows[2].src, rows[2].mae));
    assert!(
        rows[0].src > rows[1].src,
        "{} vs {}",
        rows[0].src,
        rows[1].src
    );
    assert_eq!(rows[0].manifest.k, Some(3));
    let csv = ablation_csv(&rows);
    assert!(csv.starts_with("blocks,model,src,mae\ntime+eu,gbdt,"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn ablation_ensemble_row_records_both_members() {
    let d = small();
    let plan = make_group_kfold(&d.train, 3, None).unwrap();
    let rows = run_ablation(
        &d.train,
        &d.test,
        &plan,
        &quick(),
        &[vec![BlockTag::Eu]],
        &[AblationModel::Ensemble, AblationModel::Mlp],
        &TransformOptions::default(),
    )
    .unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].manifest.models.len(), 2);
    assert_eq!(rows[0].manifest.alpha, Some(0.7));
    assert!(rows[1]
        .manifest
        .notes
        .iter()
        .any(|n| n == NEURAL_MEMBER_NOTE));
}

#[test]
fn report_follows_label_monotone_in_follower() {
    let d = generate(&SynthConfig {
        n_users: 80,
        beta_hour: 0.0,
        beta_embed: 0.0,
        sigma: 0.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let (fm, _) = fit_transform(
        &d.train,
        &[BlockTag::Time, BlockTag::N, BlockTag::Eu],
        &TransformOptions::default(),
    )
    .unwrap();
    let report =
        feature_correlation_report(&fm, &d.train.labels().unwrap(), &[BlockTag::Eu]).unwrap();
    assert_eq!(report.rows[0].feature, "eu.follower");
    assert_eq!(report.rows[0].abs_src, 1.0);
    assert_eq!(report.rows.len(), 5 + 1 + 8);
    let ext: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.external)
        .map(|r| r.abs_src)
        .collect();
    assert!((report.external_avg - ext.iter().sum::<f64>() / ext.len() as f64).abs() < 1e-12);
    assert!(report.rows.windows(2).all(|w| w[0].abs_src >= w[1].abs_src));
    assert!(report.to_string().contains("average of external features"));
}

#[test]
fn noise_column_is_weak_and_ties_sort_by_name() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut posts = Vec::new();
    let mut profiles = BTreeMap::new();
    for i in 0..1000u64 {
        let uid = format!("u{i}");
        let c = rng.random_range(0..1000u64);
        profiles.insert(
            uid.clone(),
            UserProfile::from_counters(
                uid.clone(),
                [
                    Some(c),
                    Some(c),
                    Some(0),
                    Some(0),
                    Some(0),
                    Some(0),
                    Some(0),
                    Some(0),
                ],
            ),
        );
        posts.push(PostRecord {
            uid,
            pid: i,
            timestamp: 1_600_000_000 + rng.random_range(0..10_000_000),
            geoaccuracy: Some(rng.random_range(1..=16)),
            label: Some(rng.random_range(0.0..1.0)),
            ..PostRecord::default()
        });
    }
    let ds = join_dataset(posts, profiles, Vec::new()).unwrap();
    let (fm, _) = fit_transform(
        &ds,
        &[BlockTag::N, BlockTag::Eu],
        &TransformOptions::default(),
    )
    .unwrap();
    let report = feature_correlation_report(&fm, &ds.labels().unwrap(), &[BlockTag::Eu]).unwrap();
    let n = report
        .rows
        .iter()
        .find(|r| r.feature == "n.geoaccuracy")
        .unwrap();
    assert!(n.abs_src < 0.1);
    let follower = report.rank_of("eu.follower").unwrap();
    let following = report.rank_of("eu.following").unwrap();
    assert_eq!(following, follower + 1);
}

#[test]
fn saved_fold_models_predict_identically() {
    let d = small();
    let plan = make_group_kfold(&d.train, 3, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for cfg in [
        ModelConfig::Gbdt(quick().gbdt),
        ModelConfig::Mlp(quick().mlp),
    ] {
        let out = run_cv_predict(
            &d.train,
            &d.test,
            &plan,
            &cfg,
            &[BlockTag::Eu, BlockTag::Image],
            &TransformOptions::default(),
        )
        .unwrap();
        let mut per_fold = Vec::new();
        for (i, f) in out.folds.iter().enumerate() {
            let path = dir.path().join(format!("{}{i}.smpm", cfg.kind()));
            ModelFile::new(f.model.clone()).save(&path).unwrap();
            let state = TransformState::from_json(&f.state.to_json().unwrap()).unwrap();
            let x = apply_transform(&d.test, &state).unwrap();
            per_fold.push(ModelFile::load(&path).unwrap().model.predict(&x).unwrap());
        }
        assert_eq!(per_fold, out.prediction.per_fold);
        assert_eq!(
            median_aggregate(&per_fold).unwrap(),
            out.prediction.aggregated
        );
    }
}

#[test]
fn ablation_row_equals_direct_cv_run() {
    let d = small();
    let plan = make_group_kfold(&d.train, 3, None).unwrap();
    let cfg = quick();
    let subset = vec![BlockTag::Time, BlockTag::Eu];
    let rows = run_ablation(
        &d.train,
        &d.test,
        &plan,
        &cfg,
        &[vec![BlockTag::Image, BlockTag::Cat], subset.clone()],
        &[AblationModel::Gbdt],
        &TransformOptions::default(),
    )
    .unwrap();
    let direct = run_cv_predict(
        &d.train,
        &d.test,
        &plan,
        &ModelConfig::Gbdt(cfg.gbdt.clone()),
        &subset,
        &TransformOptions::default(),
    )
    .unwrap();
    let y = d.test.labels().unwrap();
    let src = smp_core::metrics::spearman_src(&y, &direct.prediction.aggregated).unwrap();
    assert_eq!(rows[1].src, src.value);
    assert_eq!(
        rows[1].mae,
        smp_core::metrics::mae(&y, &direct.prediction.aggregated).unwrap()
    );
}
