use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use log::info;
use serde_json::json;

use smp_core::data::{
    align_to_pids, attach_labels, file_digest, load_dataset_dir, load_pid_values, write_pid_values,
    Dataset, DatasetFiles,
};
use smp_core::folds::{
    cv_manifest, ensemble_weighted, make_group_kfold, median_aggregate, run_ablation,
    run_cv_predict, DEFAULT_ALPHA, DEFAULT_K,
};
use smp_core::manifest::{ModelFile, ModelKind, RunManifest};
use smp_core::metrics::{
    ablation_csv, feature_correlation_report, mae, spearman_src, AblationModel,
};
use smp_core::mftm::{apply_transform, fit_transform, parse_block_list, BlockTag, TransformState};
use smp_core::synth::generate_synthetic;

use crate::config::{need, pick, FileConfig};
use crate::{
    AblateArgs, Cli, Command, CorrelateArgs, EnsembleArgs, EvaluateArgs, PredictArgs, SynthArgs,
    TrainArgs, TransformArgs, UsageError,
};

pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    if let Some(n) = pick(cli.threads, &file.threads) {
        if n == 0 {
            bail!(UsageError("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    let config_digest = cli.config.as_deref().map(digest_of).transpose()?;
    let ctx = Ctx {
        file,
        config_path: cli.config.clone(),
        config_digest,
    };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Transform(a) => transform(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Predict(a) => predict(&ctx, a),
        Command::Ensemble(a) => ensemble(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Correlate(a) => correlate(&ctx, a),
        Command::Ablate(a) => ablate(&ctx, a),
    }
}

struct Ctx {
    file: FileConfig,
    config_path: Option<PathBuf>,
    config_digest: Option<String>,
}

impl Ctx {
    fn manifest(&self, command: &str) -> RunManifest {
        let mut m = RunManifest::new(command);
        self.stamp(&mut m);
        m
    }

    fn stamp(&self, m: &mut RunManifest) {
        if let (Some(p), Some(d)) = (&self.config_path, &self.config_digest) {
            m.inputs.insert(p.display().to_string(), d.clone());
        }
    }
}

fn digest_of(path: &Path) -> Result<String> {
    Ok(file_digest(path)?)
}

fn add_dataset_inputs(m: &mut RunManifest, dir: &Path) -> Result<()> {
    for p in DatasetFiles::discover(dir)?.all() {
        m.inputs.insert(p.display().to_string(), digest_of(p)?);
    }
    Ok(())
}

fn add_input(m: &mut RunManifest, path: &Path) -> Result<()> {
    m.inputs
        .insert(path.display().to_string(), digest_of(path)?);
    Ok(())
}

/// `preds.csv` -> `preds.csv.manifest.json`
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load(dir: &Path) -> Result<Dataset> {
    load_dataset_dir(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

/// Every block whose source data is present.
fn available_blocks(ds: &Dataset) -> Vec<BlockTag> {
    BlockTag::ALL
        .into_iter()
        .filter(|t| {
            if t.is_embedding() {
                ds.block(t.as_str()).is_some()
            } else if *t == BlockTag::Eu {
                !ds.profiles.is_empty()
            } else {
                true
            }
        })
        .collect()
}

fn blocks_for(spec: Option<String>, ds: &Dataset) -> Result<Vec<BlockTag>> {
    Ok(match spec {
        Some(s) => parse_block_list(&s.replace('+', ",").replace(' ', ""))?,
        None => available_blocks(ds),
    })
}

fn test_labels(explicit: Option<PathBuf>, test_dir: &Path) -> Option<PathBuf> {
    explicit.or_else(|| Some(test_dir.join("labels.csv")).filter(|p| p.is_file()))
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let f = &ctx.file;
    let out = need(a.out, &f.out, "out")?;
    let mut cfg = f.synth.clone().unwrap_or_default();
    if let Some(s) = pick(a.seed, &f.seed) {
        cfg.seed = s;
    }
    if let Some(s) = pick(a.sigma, &f.sigma) {
        cfg.sigma = s;
    }
    if let Some(n) = pick(a.n_users, &f.n_users) {
        cfg.n_users = n;
    }
    let m = generate_synthetic(&cfg, &out)?;
    info!("wrote {} train and {} test posts", m.n_train, m.n_test);
    println!("{}", out.display());
    Ok(())
}

fn transform(ctx: &Ctx, a: TransformArgs) -> Result<()> {
    let f = &ctx.file;
    let train_dir = need(a.train, &f.train, "train")?;
    let state_out = need(a.state_out, &f.state_out, "state-out")?;
    let ds = load(&train_dir)?;
    let blocks = blocks_for(pick(a.blocks, &f.blocks), &ds)?;
    let opts = f.transform_options();
    let (fm, state) = fit_transform(&ds, &blocks, &opts)?;

    ensure_parent(&state_out)?;
    fs::write(&state_out, state.to_json()? + "\n")
        .with_context(|| format!("writing {}", state_out.display()))?;
    if let Some(p) = pick(a.features_out, &f.features_out) {
        ensure_parent(&p)?;
        fs::write(&p, fm.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }

    let mut m = ctx.manifest("transform");
    add_dataset_inputs(&mut m, &train_dir)?;
    m.blocks = blocks;
    m.block_widths = fm
        .schema
        .iter()
        .map(|(t, _, w)| (t.as_str().to_string(), w))
        .collect();
    m.config = json!({ "transform": opts });
    m.save(&sidecar(&state_out))?;
    Ok(())
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let f = &ctx.file;
    let train_dir = need(a.train, &f.train, "train")?;
    let test_dir = need(a.test, &f.test, "test")?;
    let out = need(a.out, &f.out, "out")?;
    let kind = ModelKind::from_str(&pick(a.model, &f.model).unwrap_or_else(|| "gbdt".into()))?;
    let k = pick(a.k, &f.k).unwrap_or(DEFAULT_K);

    let train = load(&train_dir)?;
    let mut test = load(&test_dir)?;
    let labels_path = test_labels(pick(a.test_labels, &f.test_labels), &test_dir);
    if let Some(p) = &labels_path {
        attach_labels(&mut test, &load_pid_values(p)?)?;
    }
    let blocks = blocks_for(pick(a.blocks, &f.blocks), &train)?;
    let plan = make_group_kfold(&train, k, pick(a.shuffle_seed, &f.shuffle_seed))?;
    let cfg = f.pipeline().model(kind);
    let opts = f.transform_options();
    let outcome = run_cv_predict(&train, &test, &plan, &cfg, &blocks, &opts)?;

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for (i, fold) in outcome.folds.iter().enumerate() {
        ModelFile::new(fold.model.clone()).save(&out.join(format!("fold{i}.smpm")))?;
        let state_path = out.join(format!("fold{i}.state.json"));
        fs::write(&state_path, fold.state.to_json()? + "\n")
            .with_context(|| format!("writing {}", state_path.display()))?;
    }
    let pred = &outcome.prediction;
    write_pid_values(
        &out.join("predictions.csv"),
        "prediction",
        &pred.pids,
        &pred.aggregated,
    )?;
    fs::write(
        out.join("folds.json"),
        serde_json::to_string_pretty(&outcome.fold_metrics())? + "\n",
    )?;

    let mut m = cv_manifest("train", &plan, &[cfg], &blocks, None);
    ctx.stamp(&mut m);
    add_dataset_inputs(&mut m, &train_dir)?;
    add_dataset_inputs(&mut m, &test_dir)?;
    if let Some(p) = &labels_path {
        add_input(&mut m, p)?;
    }
    if let Some(s) = pick(a.shuffle_seed, &f.shuffle_seed) {
        m.seeds.insert("fold_shuffle".into(), s);
    }
    m.config = json!({ "transform": opts });
    if labels_path.is_some() {
        let y = test.labels()?;
        m.metrics
            .insert("test_src".into(), spearman_src(&y, &pred.aggregated)?.value);
        m.metrics
            .insert("test_mae".into(), mae(&y, &pred.aggregated)?);
    }
    m.save(&out.join("manifest.json"))?;
    Ok(())
}

fn fold_files(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut found = Vec::new();
    loop {
        let i = found.len();
        let model = dir.join(format!("fold{i}.smpm"));
        let state = dir.join(format!("fold{i}.state.json"));
        if !model.is_file() || !state.is_file() {
            break;
        }
        found.push((model, state));
    }
    if found.is_empty() {
        bail!(UsageError(format!(
            "no fold0.smpm/fold0.state.json in {}",
            dir.display()
        )));
    }
    Ok(found)
}

fn predict(ctx: &Ctx, a: PredictArgs) -> Result<()> {
    let f = &ctx.file;
    let models_dir = need(a.models_dir, &f.models_dir, "models-dir")?;
    let test_dir = need(a.test, &f.test, "test")?;
    let out = need(a.out, &f.out, "out")?;
    let test = load(&test_dir)?;
    let files = fold_files(&models_dir)?;

    let mut m = ctx.manifest("predict");
    add_dataset_inputs(&mut m, &test_dir)?;
    let mut per_fold = Vec::with_capacity(files.len());
    for (model_path, state_path) in &files {
        let model = ModelFile::load(model_path)?;
        let text = fs::read_to_string(state_path)
            .with_context(|| format!("reading {}", state_path.display()))?;
        let state = TransformState::from_json(&text)?;
        let x = apply_transform(&test, &state)?;
        per_fold.push(model.model.predict(&x)?);
        add_input(&mut m, model_path)?;
        add_input(&mut m, state_path)?;
        m.blocks = state.order.clone();
    }
    let agg = median_aggregate(&per_fold)?;
    ensure_parent(&out)?;
    write_pid_values(&out, "prediction", &test.pids(), &agg)?;
    m.k = Some(files.len());
    m.save(&sidecar(&out))?;
    Ok(())
}

fn ensemble(ctx: &Ctx, a: EnsembleArgs) -> Result<()> {
    let f = &ctx.file;
    let pa = need(a.pred_a, &f.pred_a, "pred-a")?;
    let pb = need(a.pred_b, &f.pred_b, "pred-b")?;
    let out = need(a.out, &f.out, "out")?;
    let alpha = pick(a.alpha, &f.alpha).unwrap_or(DEFAULT_ALPHA);

    let va = load_pid_values(&pa)?;
    let pids: Vec<u64> = va.iter().map(|p| p.0).collect();
    let a_vals: Vec<f64> = va.iter().map(|p| p.1).collect();
    let vb = load_pid_values(&pb)?;
    if vb.len() != va.len() {
        bail!(smp_core::Error::Shape(format!(
            "{} has {} rows, {} has {}",
            pa.display(),
            va.len(),
            pb.display(),
            vb.len()
        )));
    }
    let b_vals = align_to_pids(&vb, &pids)?;
    let blended = ensemble_weighted(&a_vals, &b_vals, alpha)?;
    ensure_parent(&out)?;
    write_pid_values(&out, "prediction", &pids, &blended)?;

    let mut m = ctx.manifest("ensemble");
    add_input(&mut m, &pa)?;
    add_input(&mut m, &pb)?;
    m.alpha = Some(alpha);
    m.config = json!({ "pred_a": pa, "pred_b": pb });
    m.save(&sidecar(&out))?;
    Ok(())
}

fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> Result<()> {
    let f = &ctx.file;
    let pred_path = need(a.pred, &f.pred, "pred")?;
    let labels_path = need(a.labels, &f.labels, "labels")?;
    let labels = load_pid_values(&labels_path)?;
    let pids: Vec<u64> = labels.iter().map(|p| p.0).collect();
    let y: Vec<f64> = labels.iter().map(|p| p.1).collect();
    let preds = load_pid_values(&pred_path)?;
    let p = align_to_pids(&preds, &pids)?;
    let src = spearman_src(&y, &p)?;
    let err = mae(&y, &p)?;
    let report = json!({
        "n": y.len(),
        "src": src.value,
        "src_degenerate": src.degenerate,
        "mae": err,
    });
    println!("{report}");

    if let Some(out) = pick(a.out, &f.out) {
        ensure_parent(&out)?;
        fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
        let mut m = ctx.manifest("evaluate");
        add_input(&mut m, &pred_path)?;
        add_input(&mut m, &labels_path)?;
        m.metrics = BTreeMap::from([("src".into(), src.value), ("mae".into(), err)]);
        m.save(&sidecar(&out))?;
    }
    Ok(())
}

fn correlate(ctx: &Ctx, a: CorrelateArgs) -> Result<()> {
    let f = &ctx.file;
    let train_dir = need(a.train, &f.train, "train")?;
    let out = need(a.out, &f.out, "out")?;
    let ds = load(&train_dir)?;
    let blocks = blocks_for(pick(a.blocks, &f.blocks), &ds)?;
    let external = parse_block_list(&pick(a.external, &f.external).unwrap_or_else(|| "eu".into()))?;
    let opts = f.transform_options();
    let (fm, _) = fit_transform(&ds, &blocks, &opts)?;
    let report = feature_correlation_report(&fm, &ds.labels()?, &external)?;

    ensure_parent(&out)?;
    fs::write(&out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    println!("{report}");

    let mut m = ctx.manifest("correlate");
    add_dataset_inputs(&mut m, &train_dir)?;
    m.blocks = blocks;
    m.metrics = BTreeMap::from([
        ("external_avg".into(), report.external_avg),
        ("other_avg".into(), report.other_avg),
    ]);
    m.config = json!({ "external": external, "transform": opts });
    m.save(&sidecar(&out))?;
    Ok(())
}

/// One subset per non-empty line; `#` starts a comment.
fn parse_subsets(text: &str) -> Result<Vec<Vec<BlockTag>>> {
    let mut subsets = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tags = parse_block_list(&line.replace('+', ",").replace(' ', ""))
            .with_context(|| format!("subsets line {}", i + 1))?;
        if tags.is_empty() {
            bail!(UsageError(format!(
                "subsets line {} names no blocks",
                i + 1
            )));
        }
        subsets.push(tags);
    }
    if subsets.is_empty() {
        bail!(UsageError("subsets file lists no subsets".into()));
    }
    Ok(subsets)
}

fn ablate(ctx: &Ctx, a: AblateArgs) -> Result<()> {
    let f = &ctx.file;
    let train_dir = need(a.train, &f.train, "train")?;
    let test_dir = need(a.test, &f.test, "test")?;
    let subsets_path = need(a.subsets, &f.subsets, "subsets")?;
    let out = need(a.out, &f.out, "out")?;
    let k = pick(a.k, &f.k).unwrap_or(DEFAULT_K);
    let models = pick(a.models, &f.models)
        .unwrap_or_else(|| "ensemble".into())
        .split(',')
        .map(|s| AblationModel::from_str(s.trim()))
        .collect::<smp_core::Result<Vec<_>>>()?;

    let subsets_text = fs::read_to_string(&subsets_path)
        .with_context(|| format!("reading {}", subsets_path.display()))?;
    let subsets = parse_subsets(&subsets_text)?;
    let train = load(&train_dir)?;
    let mut test = load(&test_dir)?;
    let labels_path =
        test_labels(pick(a.test_labels, &f.test_labels), &test_dir).ok_or_else(|| {
            UsageError("ablate needs test labels (--test-labels or <test>/labels.csv)".into())
        })?;
    attach_labels(&mut test, &load_pid_values(&labels_path)?)?;

    let plan = make_group_kfold(&train, k, pick(a.shuffle_seed, &f.shuffle_seed))?;
    let cfg = f.pipeline();
    let opts = f.transform_options();
    let rows = run_ablation(&train, &test, &plan, &cfg, &subsets, &models, &opts)?;

    ensure_parent(&out)?;
    fs::write(&out, ablation_csv(&rows)).with_context(|| format!("writing {}", out.display()))?;

    let mut inputs = RunManifest::default();
    add_dataset_inputs(&mut inputs, &train_dir)?;
    add_dataset_inputs(&mut inputs, &test_dir)?;
    add_input(&mut inputs, &labels_path)?;
    add_input(&mut inputs, &subsets_path)?;
    ctx.stamp(&mut inputs);
    let row_manifests: Vec<RunManifest> = rows
        .iter()
        .map(|r| {
            let mut m = r.manifest.clone();
            m.inputs.extend(inputs.inputs.clone());
            m.config = json!({ "transform": opts });
            m
        })
        .collect();
    fs::write(
        sidecar(&out),
        serde_json::to_string_pretty(&json!({ "command": "ablate", "rows": row_manifests }))?
            + "\n",
    )?;
    Ok(())
}
