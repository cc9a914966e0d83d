//! User-grouped k-fold cross-validation, median-of-folds aggregation, the
//! weighted two-model ensemble and the ablation grid runner.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gbdt::{fit_gbdt, GbdtConfig};
use crate::manifest::{FittedModel, ModelConfig, ModelKind, RunManifest, ENSEMBLE_ORDER};
use crate::metrics::{mae, spearman_src, AblationModel, AblationRow, Src};
use crate::mftm::{
    apply_transform, canonical, fit_transform, select_blocks, BlockTag, FeatureMatrix,
    TransformOptions, TransformState,
};
use crate::neuro::{fit_mlp_features, MlpConfig};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_ALPHA: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupFoldPlan {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

/// Greedy balanced partition of users into `k` folds.
///
/// Users are taken by descending post count (ties by uid) and each goes to
/// the fold holding the fewest posts so far (ties to the lowest index). With
/// `shuffle_seed` the tie order among equal counts is randomized instead.
pub fn plan_from_counts(
    counts: &BTreeMap<String, usize>,
    k: usize,
    shuffle_seed: Option<u64>,
) -> Result<GroupFoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if counts.len() < k {
        return Err(Error::InsufficientData(format!(
            "k = {k} exceeds the {} distinct uids",
            counts.len()
        )));
    }
    let mut users: Vec<(&str, usize)> = counts.iter().map(|(u, &c)| (u.as_str(), c)).collect();
    if let Some(seed) = shuffle_seed {
        users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        users.sort_by_key(|u| std::cmp::Reverse(u.1));
    } else {
        users.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    }
    let mut load = vec![0usize; k];
    let mut assignment = BTreeMap::new();
    for (uid, count) in users {
        let f = (0..k).min_by_key(|&f| (load[f], f)).unwrap();
        load[f] += count;
        assignment.insert(uid.to_string(), f);
    }
    Ok(GroupFoldPlan { k, assignment })
}

pub fn make_group_kfold(
    ds: &Dataset,
    k: usize,
    shuffle_seed: Option<u64>,
) -> Result<GroupFoldPlan> {
    let counts = ds
        .uid_counts()
        .into_iter()
        .map(|(u, c)| (u.to_string(), c))
        .collect();
    plan_from_counts(&counts, k, shuffle_seed)
}

/// Row indices of one fold: `train` excludes the fold's users, `valid` is
/// exactly those users' rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

impl GroupFoldPlan {
    pub fn fold_of(&self, uid: &str) -> Option<usize> {
        self.assignment.get(uid).copied()
    }

    /// Per-fold row splits. Every uid in `ds` must be covered by the plan.
    pub fn splits(&self, ds: &Dataset) -> Result<Vec<FoldSplit>> {
        let mut splits = vec![
            FoldSplit {
                train: Vec::new(),
                valid: Vec::new()
            };
            self.k
        ];
        for (i, p) in ds.posts.iter().enumerate() {
            let f = self
                .fold_of(&p.uid)
                .ok_or_else(|| Error::Config(format!("uid `{}` is not in the fold plan", p.uid)))?;
            for (g, s) in splits.iter_mut().enumerate() {
                if g == f {
                    s.valid.push(i);
                } else {
                    s.train.push(i);
                }
            }
        }
        Ok(splits)
    }

    /// Posts per fold in `ds`.
    pub fn fold_sizes(&self, ds: &Dataset) -> Result<Vec<usize>> {
        Ok(self.splits(ds)?.iter().map(|s| s.valid.len()).collect())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("plan serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Per-row median across folds; an even count averages the middle pair.
pub fn median_aggregate(per_fold: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_fold
        .first()
        .ok_or_else(|| Error::InsufficientData("median over zero folds".into()))?;
    if per_fold.iter().any(|p| p.len() != first.len()) {
        return Err(Error::Shape(
            "fold prediction vectors differ in length".into(),
        ));
    }
    let k = per_fold.len();
    let mut column = vec![0.0; k];
    Ok((0..first.len())
        .map(|i| {
            for (c, p) in column.iter_mut().zip(per_fold) {
                *c = p[i];
            }
            column.sort_by(f64::total_cmp);
            if k % 2 == 1 {
                column[k / 2]
            } else {
                (column[k / 2 - 1] + column[k / 2]) / 2.0
            }
        })
        .collect())
}

/// `alpha * a + (1 - alpha) * b`, elementwise.
pub fn ensemble_weighted(a: &[f64], b: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "ensemble members differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    // The endpoints return a member verbatim (no 0 * x rounding).
    if alpha == 1.0 {
        return Ok(a.to_vec());
    }
    if alpha == 0.0 {
        return Ok(b.to_vec());
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPrediction {
    pub pids: Vec<u64>,
    /// `k x n_test`
    pub per_fold: Vec<Vec<f64>>,
    pub aggregated: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_valid: usize,
    /// `None` when the fold holds fewer than two rows.
    pub src: Option<Src>,
    pub mae: f64,
}

#[derive(Debug, Clone)]
pub struct FoldFit {
    pub state: TransformState,
    pub model: FittedModel,
    pub metrics: FoldMetrics,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub prediction: CvPrediction,
    pub folds: Vec<FoldFit>,
}

impl CvOutcome {
    pub fn fold_metrics(&self) -> Vec<FoldMetrics> {
        self.folds.iter().map(|f| f.metrics.clone()).collect()
    }
}

/// Transform state for fold `fold`, fitted on that fold's training rows only.
pub fn fit_fold_state(
    train: &Dataset,
    plan: &GroupFoldPlan,
    fold: usize,
    enabled: &[BlockTag],
    opts: &TransformOptions,
) -> Result<TransformState> {
    let split = plan
        .splits(train)?
        .into_iter()
        .nth(fold)
        .ok_or_else(|| Error::Config(format!("fold {fold} out of range")))?;
    fit_transform(&train.subset(&split.train), enabled, opts)
        .map(|(_, s)| s)
        .map_err(|e| Error::Fold {
            fold,
            source: Box::new(e),
        })
}

/// Features of one fold, transformed with the fold's own state.
struct PreparedFold {
    state: TransformState,
    train_x: FeatureMatrix,
    train_y: Vec<f64>,
    valid_x: FeatureMatrix,
    valid_y: Vec<f64>,
    test_x: FeatureMatrix,
}

fn prepare_fold(
    train: &Dataset,
    test: &Dataset,
    split: &FoldSplit,
    enabled: &[BlockTag],
    opts: &TransformOptions,
    min_rows: usize,
) -> Result<PreparedFold> {
    if split.train.len() < min_rows {
        return Err(Error::InsufficientData(format!(
            "training portion has {} rows, need at least {min_rows}",
            split.train.len()
        )));
    }
    let tr = train.subset(&split.train);
    let va = train.subset(&split.valid);
    let (train_x, state) = fit_transform(&tr, enabled, opts)?;
    Ok(PreparedFold {
        train_y: tr.labels()?,
        valid_x: apply_transform(&va, &state)?,
        valid_y: va.labels()?,
        test_x: apply_transform(test, &state)?,
        train_x,
        state,
    })
}

fn prepare_all(
    train: &Dataset,
    test: &Dataset,
    plan: &GroupFoldPlan,
    enabled: &[BlockTag],
    opts: &TransformOptions,
    min_rows: usize,
) -> Result<Vec<PreparedFold>> {
    let splits = plan.splits(train)?;
    splits
        .par_iter()
        .enumerate()
        .map(|(fold, split)| {
            prepare_fold(train, test, split, enabled, opts, min_rows).map_err(|e| Error::Fold {
                fold,
                source: Box::new(e),
            })
        })
        .collect()
}

fn fit_model(cfg: &ModelConfig, x: &FeatureMatrix, y: &[f64]) -> Result<FittedModel> {
    Ok(match cfg {
        ModelConfig::Gbdt(c) => FittedModel::Gbdt(fit_gbdt(&x.values, y, c)?),
        ModelConfig::Mlp(c) => FittedModel::Mlp(fit_mlp_features(x, y, c)?),
    })
}

fn train_folds(
    prepared: &[PreparedFold],
    keep: Option<&[BlockTag]>,
    cfg: &ModelConfig,
    test_pids: Vec<u64>,
) -> Result<CvOutcome> {
    let restrict = |m: &FeatureMatrix| match keep {
        Some(k) => select_blocks(m, k),
        None => Ok(m.clone()),
    };
    let folds: Vec<(FoldFit, Vec<f64>)> = prepared
        .par_iter()
        .enumerate()
        .map(|(fold, p)| {
            let run = || -> Result<(FoldFit, Vec<f64>)> {
                let train_x = restrict(&p.train_x)?;
                let model = fit_model(cfg, &train_x, &p.train_y)?;
                let valid_pred = model.predict(&restrict(&p.valid_x)?)?;
                let test_pred = model.predict(&restrict(&p.test_x)?)?;
                let metrics = FoldMetrics {
                    fold,
                    n_train: p.train_y.len(),
                    n_valid: p.valid_y.len(),
                    src: (p.valid_y.len() >= 2)
                        .then(|| spearman_src(&p.valid_y, &valid_pred))
                        .transpose()?,
                    mae: mae(&p.valid_y, &valid_pred)?,
                };
                let state = match keep {
                    Some(k) => restrict_state(&p.state, k),
                    None => p.state.clone(),
                };
                Ok((
                    FoldFit {
                        state,
                        model,
                        metrics,
                    },
                    test_pred,
                ))
            };
            run().map_err(|e| Error::Fold {
                fold,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let (folds, per_fold): (Vec<FoldFit>, Vec<Vec<f64>>) = folds.into_iter().unzip();
    let aggregated = median_aggregate(&per_fold)?;
    Ok(CvOutcome {
        prediction: CvPrediction {
            pids: test_pids,
            per_fold,
            aggregated,
        },
        folds,
    })
}

/// A state fitted for a superset of blocks, cut down to `keep`. Equal to the
/// state a direct fit on `keep` would produce, since blocks fit independently.
fn restrict_state(state: &TransformState, keep: &[BlockTag]) -> TransformState {
    let keep = canonical(keep);
    let (order, blocks) = state
        .order
        .iter()
        .zip(&state.blocks)
        .filter(|(t, _)| keep.contains(t))
        .map(|(t, b)| (*t, b.clone()))
        .unzip();
    TransformState {
        order,
        blocks,
        ..state.clone()
    }
}

/// For each fold: fit the transform and model on the other folds' rows,
/// validate on the fold, predict the test rows. The test prediction is the
/// per-row median over folds.
pub fn run_cv_predict(
    train: &Dataset,
    test: &Dataset,
    plan: &GroupFoldPlan,
    cfg: &ModelConfig,
    enabled: &[BlockTag],
    opts: &TransformOptions,
) -> Result<CvOutcome> {
    let prepared = prepare_all(train, test, plan, enabled, opts, cfg.min_train_rows())?;
    train_folds(&prepared, None, cfg, test.pids())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub gbdt: GbdtConfig,
    pub mlp: MlpConfig,
    /// Weight of the GBDT member.
    pub alpha: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            gbdt: GbdtConfig::default(),
            mlp: MlpConfig::default(),
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl PipelineConfig {
    pub fn model(&self, kind: ModelKind) -> ModelConfig {
        match kind {
            ModelKind::Gbdt => ModelConfig::Gbdt(self.gbdt.clone()),
            ModelKind::Mlp => ModelConfig::Mlp(self.mlp.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub gbdt: CvOutcome,
    pub mlp: CvOutcome,
    pub ensemble: Vec<f64>,
}

/// Both members through cross-validation on the same folds, then the
/// weighted ensemble of their median-aggregated predictions.
pub fn run_pipeline(
    train: &Dataset,
    test: &Dataset,
    plan: &GroupFoldPlan,
    cfg: &PipelineConfig,
    enabled: &[BlockTag],
    opts: &TransformOptions,
) -> Result<PipelineOutcome> {
    let gcfg = cfg.model(ModelKind::Gbdt);
    let min_rows = gcfg.min_train_rows();
    let prepared = prepare_all(train, test, plan, enabled, opts, min_rows)?;
    let gbdt = train_folds(&prepared, None, &gcfg, test.pids())?;
    let mlp = train_folds(&prepared, None, &cfg.model(ModelKind::Mlp), test.pids())?;
    let ensemble = ensemble_weighted(
        &gbdt.prediction.aggregated,
        &mlp.prediction.aggregated,
        cfg.alpha,
    )?;
    Ok(PipelineOutcome {
        gbdt,
        mlp,
        ensemble,
    })
}

/// Manifest describing one cross-validated run.
pub fn cv_manifest(
    command: &str,
    plan: &GroupFoldPlan,
    models: &[ModelConfig],
    enabled: &[BlockTag],
    alpha: Option<f64>,
) -> RunManifest {
    let mut m = RunManifest::new(command).with_models(models);
    m.k = Some(plan.k);
    m.plan_digest = Some(plan.digest());
    m.blocks = canonical(enabled);
    m.alpha = alpha;
    if alpha.is_some() {
        m.ensemble_order = Some(ENSEMBLE_ORDER.into());
    }
    m
}

/// Runs every block subset with every requested model through the full
/// cross-validated pipeline and scores the aggregated test predictions.
///
/// Transforms are fitted once per fold on the union of all subsets and cut
/// down per subset; since blocks are fitted independently this equals a
/// separate fit per subset. Rows come back subset-major, in input order.
pub fn run_ablation(
    train: &Dataset,
    test: &Dataset,
    plan: &GroupFoldPlan,
    cfg: &PipelineConfig,
    subsets: &[Vec<BlockTag>],
    models: &[AblationModel],
    opts: &TransformOptions,
) -> Result<Vec<AblationRow>> {
    let labels = test.labels()?;
    let union: Vec<BlockTag> = canonical(&subsets.concat());
    let min_rows = if models.iter().any(|m| *m != AblationModel::Mlp) {
        cfg.gbdt.min_samples_leaf.max(1)
    } else {
        1
    };
    let prepared = prepare_all(train, test, plan, &union, opts, min_rows)?;
    let mut rows = Vec::new();
    for subset in subsets {
        let subset = canonical(subset);
        let mut cache: BTreeMap<ModelKind, Vec<f64>> = BTreeMap::new();
        let mut member = |kind: ModelKind| -> Result<Vec<f64>> {
            if let Some(p) = cache.get(&kind) {
                return Ok(p.clone());
            }
            let out = train_folds(&prepared, Some(&subset), &cfg.model(kind), test.pids())?;
            cache.insert(kind, out.prediction.aggregated.clone());
            Ok(out.prediction.aggregated)
        };
        for &model in models {
            let (pred, configs, alpha) = match model {
                AblationModel::Gbdt => (
                    member(ModelKind::Gbdt)?,
                    vec![cfg.model(ModelKind::Gbdt)],
                    None,
                ),
                AblationModel::Mlp => (
                    member(ModelKind::Mlp)?,
                    vec![cfg.model(ModelKind::Mlp)],
                    None,
                ),
                AblationModel::Ensemble => {
                    let a = member(ModelKind::Gbdt)?;
                    let b = member(ModelKind::Mlp)?;
                    (
                        ensemble_weighted(&a, &b, cfg.alpha)?,
                        vec![cfg.model(ModelKind::Gbdt), cfg.model(ModelKind::Mlp)],
                        Some(cfg.alpha),
                    )
                }
            };
            let src = spearman_src(&labels, &pred)?.value;
            let err = mae(&labels, &pred)?;
            let mut manifest = cv_manifest("ablate", plan, &configs, &subset, alpha);
            manifest.metrics.insert("src".into(), src);
            manifest.metrics.insert("mae".into(), err);
            rows.push(AblationRow {
                blocks: subset.clone(),
                model,
                src,
                mae: err,
                manifest,
            });
        }
    }
    Ok(rows)
}
