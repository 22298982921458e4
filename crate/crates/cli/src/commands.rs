//! Subcommand implementations.

use crate::config::LoadedConfig;
use crate::error::{CliError, CODE_CONFIG, CODE_CONTRACT, CODE_SHAPE};
use crate::plots;
use crate::runmeta::RunManifest;
use neurovol::explain::{
    load_region_mapping, read_region_volumes, region_correlations, saliency, threshold_overlay, top_k_average,
    write_mosaic_pgm, write_region_volumes, RegionVolumes,
};
use neurovol::nets::{Network, Task};
use neurovol::stats::{
    apply_bias_correction, compare_models, evaluate, fit_bias_model, read_predictions, stratify, write_predictions,
    CohortEval, EvalOptions, EvalReport, FitTag, PredictionRecord, StratifyScheme, SubgroupReport,
    EVAL_SCHEMA_VERSION,
};
use neurovol::training::{
    load_checkpoint, load_dataset, predict_outputs, save_checkpoint, split_dataset, train_with_resume, write_loss_log,
    ResumeState, TrainItem,
};
use neurovol::volume::{
    make_cohort, phantom_region_volumes, read_manifest, write_nifti, CohortManifest, SubjectParams, Volume,
    PHANTOM_REGION_NAMES,
};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Lobes assigned to the four phantom regions; labels must come from the
/// fixed nine-group set.
const PHANTOM_REGION_LOBES: [&str; 4] = ["subcortical", "frontal", "temporal", "parietal"];

pub fn cmd_synth(loaded: &LoadedConfig, out_override: Option<&Path>, seed_override: Option<u64>) -> Result<(), CliError> {
    let phantom = loaded
        .config
        .data
        .phantom
        .as_ref()
        .ok_or_else(|| CliError::new(CODE_CONFIG, "synth needs a data.phantom section"))?;
    let out_dir = loaded.output_dir(out_override);
    std::fs::create_dir_all(&out_dir)?;
    let mut spec = phantom.spec.clone();
    if let Some(s) = seed_override {
        spec.seed = s;
    }
    let (manifest, subject_seeds) = make_cohort(
        &spec,
        phantom.n,
        phantom.sex_ratio,
        phantom.age_distribution,
        spec.seed,
        &phantom.cohort,
        &out_dir,
    )?;

    // phantom region volumes and their lobe mapping, for correlate
    let mut volumes: RegionVolumes = BTreeMap::new();
    for (row, &seed) in manifest.rows.iter().zip(&subject_seeds) {
        let subject = SubjectParams { sex: row.sex, age: row.age, seed };
        let region_vols = phantom_region_volumes(&spec, &subject)?;
        for (name, value) in PHANTOM_REGION_NAMES.iter().zip(region_vols) {
            volumes.entry((*name).to_string()).or_default().insert(row.subject_id.clone(), value);
        }
    }
    let volumes_path = out_dir.join("regions.csv");
    write_region_volumes(&volumes, &volumes_path)?;
    let map_path = out_dir.join("region_map.csv");
    let mut map_text = String::from("idp_id,region_name,lobe\n");
    for (name, lobe) in PHANTOM_REGION_NAMES.iter().zip(PHANTOM_REGION_LOBES) {
        map_text.push_str(&format!("{name},{name},{lobe}\n"));
    }
    std::fs::write(&map_path, map_text)?;

    let mut meta = RunManifest::new("synth", &loaded.raw);
    meta.seed("phantom", spec.seed);
    meta.artifact(&out_dir.join("manifest.csv"));
    meta.artifact(&volumes_path);
    meta.artifact(&map_path);
    for row in &manifest.rows {
        meta.artifact(&out_dir.join(&row.path));
    }
    meta.write(&out_dir)?;
    println!("synth: {} subjects under {}", manifest.len(), out_dir.display());
    Ok(())
}

pub fn cmd_preprocess(loaded: &LoadedConfig, out_override: Option<&Path>) -> Result<(), CliError> {
    let manifest_rel = loaded
        .config
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::new(CODE_CONFIG, "preprocess needs a data.manifest path"))?;
    let manifest_path = loaded.resolve(manifest_rel);
    let manifest = read_manifest(&manifest_path)?;
    let out_dir = loaded.output_dir(out_override).join("preprocessed");
    std::fs::create_dir_all(&out_dir)?;
    let crop = loaded.crop_target();
    let znorm = loaded.config.preprocess.znormalize;
    let mut out_rows = Vec::new();
    for row in &manifest.rows {
        let vol = neurovol::volume::read_nifti(manifest.resolve_path(&manifest_path, row))?;
        let processed = neurovol::volume::preprocess_volume(&vol, crop, znorm)?;
        let file = format!("{}.nii", row.subject_id);
        write_nifti(&processed, out_dir.join(&file))?;
        let mut new_row = row.clone();
        new_row.path = file;
        out_rows.push(new_row);
    }
    let out_manifest = CohortManifest { rows: out_rows };
    neurovol::volume::write_manifest(&out_manifest, &out_dir.join("manifest.csv"))?;
    let mut meta = RunManifest::new("preprocess", &loaded.raw);
    meta.artifact(&out_dir.join("manifest.csv"));
    meta.write(&out_dir)?;
    println!("preprocess: {} volumes into {}", out_manifest.len(), out_dir.display());
    Ok(())
}

pub fn cmd_train(
    loaded: &LoadedConfig,
    out_override: Option<&Path>,
    seed_override: Option<u64>,
    resume: bool,
) -> Result<(), CliError> {
    let model = loaded
        .config
        .model
        .clone()
        .ok_or_else(|| CliError::new(CODE_CONFIG, "train needs a model section"))?;
    let manifest_rel = loaded
        .config
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::new(CODE_CONFIG, "train needs a data.manifest path (run synth first)"))?;
    let manifest_path = loaded.resolve(manifest_rel);
    let manifest = read_manifest(&manifest_path)?;
    let mut train_cfg = loaded.config.train.clone();
    if let Some(s) = seed_override {
        train_cfg.seed = s;
    }
    let out_dir = loaded.output_dir(out_override);
    std::fs::create_dir_all(&out_dir)?;
    let stem = format!("{}_{:?}", model.arch_name(), model.task()).to_lowercase();
    let ckpt_path = out_dir.join(format!("{stem}.ckpt"));
    let log_path = out_dir.join(format!("{stem}_loss_log.csv"));

    let items = load_dataset(&manifest, &manifest_path, loaded.crop_target(), loaded.config.preprocess.znormalize, model.task())?;
    let ids: Vec<String> = items.iter().map(|it| it.subject_id.clone()).collect();
    // the 2:1 split uses its own fixed seed, independent of the training seed
    let split = split_dataset(&ids, 42).map_err(CliError::from)?;

    let (mut net, resume_state) = if resume {
        let ckpt = load_checkpoint(&ckpt_path)?;
        if ckpt.config != model {
            return Err(CliError::new(CODE_CONTRACT, "resume checkpoint config differs from the config file's model"));
        }
        let optimizer = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| CliError::new(CODE_CONTRACT, "resume checkpoint lacks optimizer state"))?;
        let net = ckpt.restore_network(Some(&model))?;
        let resume_state =
            ResumeState { optimizer, start_epoch: ckpt.epoch, best_val_loss: ckpt.best_val_loss };
        (net, Some(resume_state))
    } else {
        (Network::<f32>::build(model.clone(), train_cfg.seed)?, None)
    };

    let outcome = train_with_resume(&mut net, &items, &split, &train_cfg, resume_state)?;
    save_checkpoint(&outcome.checkpoint, &ckpt_path)?;

    // predictions of the best model on the validation split, the default
    // fitting set for the age-bias correction
    let val_preds_path = out_dir.join(format!("{stem}_val_preds.csv"));
    {
        let mut best_net = outcome.checkpoint.restore_network(Some(&model))?;
        let val_items: Vec<TrainItem> =
            items.iter().filter(|it| split.val.contains(&it.subject_id)).cloned().collect();
        let outputs = predict_outputs(&mut best_net, &val_items, train_cfg.batch_size)?;
        let records = records_from_outputs(&val_items, &manifest, &outputs, model.task());
        write_predictions(&records, &val_preds_path)?;
    }
    let mut log = Vec::new();
    if resume {
        // keep earlier epochs in the log for a continuous Fig-S4-style series
        if let Ok(prev) = std::fs::read_to_string(&log_path) {
            for line in prev.lines().skip(1) {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() == 3 {
                    if let (Ok(e), Ok(t), Ok(v)) = (f[0].parse(), f[1].parse(), f[2].parse()) {
                        log.push(neurovol::training::EpochLog { epoch: e, train_loss: t, val_loss: v });
                    }
                }
            }
        }
    }
    log.extend(outcome.log.iter().cloned());
    write_loss_log(&log, &log_path)?;

    let mut meta = RunManifest::new("train", &loaded.raw);
    meta.seed("train", train_cfg.seed);
    meta.seed("split", 42);
    meta.artifact(&ckpt_path);
    meta.artifact(&log_path);
    meta.artifact(&val_preds_path);
    meta.write(&out_dir)?;
    println!(
        "train: best epoch {} (val loss {:.6}), {} epochs logged{} -> {}",
        outcome.checkpoint.epoch,
        outcome.checkpoint.best_val_loss,
        outcome.log.len(),
        if outcome.stopped_early { ", stopped early" } else { "" },
        ckpt_path.display()
    );
    Ok(())
}

fn records_from_outputs(
    items: &[TrainItem],
    manifest: &CohortManifest,
    outputs: &[f64],
    task: Task,
) -> Vec<PredictionRecord> {
    let by_id: BTreeMap<&str, &neurovol::volume::CohortRow> =
        manifest.rows.iter().map(|r| (r.subject_id.as_str(), r)).collect();
    items
        .iter()
        .zip(outputs)
        .map(|(item, &out)| {
            let row = by_id[item.subject_id.as_str()];
            let (sex_score, age_pred_raw) = match task {
                Task::Sex | Task::BinaryGeneric => (Some(sigmoid(out)), None),
                Task::Age => (None, Some(out)),
            };
            PredictionRecord {
                subject_id: row.subject_id.clone(),
                cohort: row.cohort.clone(),
                sex_true: row.sex,
                sex_score,
                age_true: row.age,
                age_pred_raw,
                age_pred_corrected: None,
            }
        })
        .collect()
}

pub fn cmd_predict(
    loaded: &LoadedConfig,
    checkpoint: &Path,
    manifest_path: &Path,
    out: Option<&Path>,
    out_override: Option<&Path>,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let task = ckpt.config.task();
    let extent = ckpt.config.input_extent();
    let mut net = ckpt.restore_network(None)?;
    let manifest = read_manifest(manifest_path)?;
    let items = load_dataset(&manifest, manifest_path, loaded.crop_target(), loaded.config.preprocess.znormalize, task)?;
    if let Some(item) = items.iter().find(|it| it.extent != extent) {
        return Err(CliError::new(
            CODE_SHAPE,
            format!(
                "volume extent {} of {} does not match checkpoint extent {extent} (adjust preprocess.crop)",
                item.extent, item.subject_id
            ),
        ));
    }
    let outputs = predict_outputs(&mut net, &items, loaded.config.train.batch_size)?;
    let records = records_from_outputs(&items, &manifest, &outputs, task);
    let out_dir = loaded.output_dir(out_override);
    std::fs::create_dir_all(&out_dir)?;
    let out_path = match out {
        Some(p) => p.to_path_buf(),
        None => out_dir.join("predictions.csv"),
    };
    write_predictions(&records, &out_path)?;
    let mut meta = RunManifest::new("predict", &loaded.raw);
    meta.artifact(&out_path);
    meta.write(&out_dir)?;
    println!("predict: {} records -> {}", records.len(), out_path.display());
    Ok(())
}

pub struct EvaluateArgs {
    pub predictions: Vec<PathBuf>,
    pub task: Task,
    pub subgroups: bool,
    pub bias_correct: bool,
    pub fit_predictions: Vec<PathBuf>,
    pub fit_in_sample: bool,
    pub svg: bool,
}

fn model_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| "model".to_string())
}

fn correct_records(
    records: &mut [PredictionRecord],
    fit_records: Option<&[PredictionRecord]>,
) -> Result<(), CliError> {
    let (fit_pred, fit_true, tag): (Vec<f64>, Vec<f64>, FitTag) = match fit_records {
        Some(fit) => (
            fit.iter().filter_map(|r| r.age_pred_raw).collect(),
            fit.iter().filter(|r| r.age_pred_raw.is_some()).map(|r| r.age_true).collect(),
            FitTag::Validation,
        ),
        None => (
            records.iter().filter_map(|r| r.age_pred_raw).collect(),
            records.iter().filter(|r| r.age_pred_raw.is_some()).map(|r| r.age_true).collect(),
            FitTag::InSample,
        ),
    };
    let model = fit_bias_model(&fit_pred, &fit_true, tag)?;
    for r in records.iter_mut() {
        if let Some(raw) = r.age_pred_raw {
            r.age_pred_corrected = Some(apply_bias_correction(&model, &[raw])?[0]);
        }
    }
    Ok(())
}

pub fn cmd_evaluate(
    loaded: Option<&LoadedConfig>,
    args: &EvaluateArgs,
    out_override: Option<&Path>,
) -> Result<(), CliError> {
    if args.predictions.is_empty() {
        return Err(CliError::new(CODE_CONFIG, "evaluate needs at least one --predictions file"));
    }
    if args.bias_correct && args.task != Task::Age {
        return Err(CliError::new(CODE_CONFIG, "--bias-correct applies to the age task"));
    }
    if args.bias_correct && !args.fit_in_sample && args.fit_predictions.len() != args.predictions.len() {
        return Err(CliError::new(
            CODE_CONFIG,
            "--bias-correct needs one --fit-predictions per --predictions (or --fit-in-sample)",
        ));
    }
    let opts = match loaded {
        Some(l) => EvalOptions { bootstrap_seed: l.config.eval.bootstrap_seed, bootstrap_samples: l.config.eval.bootstrap_samples },
        None => EvalOptions::default(),
    };
    let out_dir = match (out_override, loaded) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(l)) => l.output_dir(None),
        (None, None) => PathBuf::from("."),
    };
    std::fs::create_dir_all(&out_dir)?;

    let classification = args.task.is_classification();
    let mut models: Vec<(String, Vec<PredictionRecord>)> = Vec::new();
    for (i, path) in args.predictions.iter().enumerate() {
        let mut records = read_predictions(path)?;
        if args.bias_correct {
            let fit_records = if args.fit_in_sample {
                None
            } else {
                Some(read_predictions(&args.fit_predictions[i])?)
            };
            correct_records(&mut records, fit_records.as_deref())?;
            let corrected_path = out_dir.join(format!("{}_corrected.csv", model_name(path)));
            write_predictions(&records, &corrected_path)?;
        }
        models.push((model_name(path), records));
    }

    // per-cohort metrics for every model
    let mut cohorts: Vec<CohortEval> = Vec::new();
    for (name, records) in &models {
        let mut tags: Vec<&str> = records.iter().map(|r| r.cohort.as_str()).collect();
        tags.sort_unstable();
        tags.dedup();
        for tag in tags {
            let subset: Vec<PredictionRecord> = records.iter().filter(|r| r.cohort == tag).cloned().collect();
            cohorts.push(evaluate(&format!("{name}/{tag}"), &subset, classification, &opts));
        }
    }

    let comparison = if models.len() >= 2 { Some(compare_models(&models, classification, &opts)?) } else { None };

    let subgroups = if args.subgroups {
        let scheme = if classification { StratifyScheme::AgeBins } else { StratifyScheme::Sex };
        let groups = stratify(&models[0].1, scheme)?;
        let mut evals = Vec::new();
        for (name, refs) in groups {
            let subset: Vec<PredictionRecord> = refs.into_iter().cloned().collect();
            evals.push(evaluate(&name, &subset, classification, &opts));
        }
        Some(SubgroupReport {
            scheme: if classification { "age_bins".to_string() } else { "sex".to_string() },
            groups: evals,
        })
    } else {
        None
    };

    let mut method_notes = vec![format!(
        "AUC confidence intervals are DeLong normal; AUPRC/MAE/r intervals are {}-resample subject bootstrap",
        opts.bootstrap_samples
    )];
    if let Some(c) = &comparison {
        method_notes.extend(c.notes.iter().cloned());
    }
    let report = EvalReport {
        schema_version: EVAL_SCHEMA_VERSION,
        task: format!("{:?}", args.task).to_lowercase(),
        bootstrap_seed: opts.bootstrap_seed,
        cohorts,
        comparison,
        subgroups,
        method_notes,
    };
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    let table_path = out_dir.join("table.txt");
    std::fs::write(&table_path, plots::render_table(&report))?;

    // raw curve/scatter data per model
    for (name, records) in &models {
        if classification {
            let scores: Vec<f64> = records.iter().filter_map(|r| r.sex_score).collect();
            let labels: Vec<u8> = records.iter().filter(|r| r.sex_score.is_some()).map(|r| r.sex_true).collect();
            if let Ok(points) = neurovol::stats::roc_points(&scores, &labels) {
                let mut csv = String::from("fpr,tpr\n");
                for (fpr, tpr) in &points {
                    csv.push_str(&format!("{fpr},{tpr}\n"));
                }
                std::fs::write(out_dir.join(format!("roc_{name}.csv")), csv)?;
            }
        } else {
            let mut csv = String::from("subject_id,age_true,age_pred_raw,age_pred_corrected\n");
            for r in records {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    r.subject_id,
                    r.age_true,
                    r.age_pred_raw.map(|v| v.to_string()).unwrap_or_default(),
                    r.age_pred_corrected.map(|v| v.to_string()).unwrap_or_default()
                ));
            }
            std::fs::write(out_dir.join(format!("scatter_{name}.csv")), csv)?;
        }
    }
    if args.svg {
        if classification {
            plots::write_roc_svg(&models, &out_dir.join("roc.svg"))?;
        } else {
            plots::write_scatter_svg(&models, &out_dir.join("scatter.svg"))?;
        }
    }

    let mut meta = RunManifest::new("evaluate", loaded.map(|l| l.raw.as_slice()).unwrap_or(b""));
    meta.seed("bootstrap", opts.bootstrap_seed);
    meta.artifact(&report_path);
    meta.artifact(&table_path);
    meta.write(&out_dir)?;
    println!("evaluate: report -> {}", report_path.display());
    Ok(())
}

pub fn cmd_explain(
    loaded: &LoadedConfig,
    checkpoint: &Path,
    manifest_path: &Path,
    k_override: Option<usize>,
    threshold_override: Option<f32>,
    out_override: Option<&Path>,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let task = ckpt.config.task();
    let mut net = ckpt.restore_network(None)?;
    let manifest = read_manifest(manifest_path)?;
    let crop = loaded.crop_target();
    let znorm = loaded.config.preprocess.znormalize;
    let k = k_override.unwrap_or(loaded.config.explain.k);
    let threshold = threshold_override.unwrap_or(loaded.config.explain.threshold);
    let gap = loaded.config.explain.mosaic_gap;

    // predictions for confidence ranking
    let items = load_dataset(&manifest, manifest_path, crop, znorm, task)?;
    let outputs = predict_outputs(&mut net, &items, loaded.config.train.batch_size)?;
    let records = records_from_outputs(&items, &manifest, &outputs, task);

    // per-subject saliency on identically preprocessed volumes
    let mut maps = Vec::with_capacity(items.len());
    let mut reference: Option<Volume> = None;
    for row in &manifest.rows {
        let vol = neurovol::volume::read_nifti(manifest.resolve_path(manifest_path, row))?;
        let vol = neurovol::volume::preprocess_volume(&vol, crop, znorm)?;
        if reference.is_none() {
            reference = Some(vol.clone());
        }
        maps.push(saliency(&mut net, &vol, &row.subject_id)?);
    }
    let (average, used) = top_k_average(&records, &maps, k, task)?;
    let masked = threshold_overlay(&average, threshold)?;

    let out_dir = loaded.output_dir(out_override);
    std::fs::create_dir_all(&out_dir)?;
    let reference = reference.expect("at least one subject");
    let nii_path = out_dir.join("saliency_topk.nii");
    write_nifti(&masked.to_volume(&reference)?, &nii_path)?;
    let mosaic_path = out_dir.join("saliency_mosaic.pgm");
    write_mosaic_pgm(&masked, &mosaic_path, gap)?;
    let meta_path = out_dir.join("saliency_meta.json");
    let meta_json = serde_json::json!({
        "task": format!("{task:?}").to_lowercase(),
        "k_requested": k,
        "k_used": used,
        "threshold": threshold,
        "subjects": masked.source_subjects,
        "degenerate": masked.degenerate,
    });
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta_json).expect("meta serializes"))?;

    let mut meta = RunManifest::new("explain", &loaded.raw);
    meta.artifact(&nii_path);
    meta.artifact(&mosaic_path);
    meta.artifact(&meta_path);
    meta.write(&out_dir)?;
    if used < k {
        eprintln!("warning: only {used} subjects available for top-{k} averaging");
    }
    println!("explain: averaged {used} maps -> {}", nii_path.display());
    Ok(())
}

pub fn cmd_correlate(
    regions: &Path,
    volumes: &Path,
    predictions: &Path,
    task: Task,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let mapping = load_region_mapping(regions)?;
    let vols = read_region_volumes(volumes)?;
    let records = read_predictions(predictions)?;
    let correlations = region_correlations(&mapping, &vols, &records, task)?;
    let out_path = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("correlations.csv"));
    let mut csv = String::from("idp_id,region,lobe,r_prediction,r_label\n");
    for c in &correlations {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            c.idp_id,
            c.region_name,
            c.lobe.name(),
            c.r_prediction.map(|v| v.to_string()).unwrap_or_default(),
            c.r_label.map(|v| v.to_string()).unwrap_or_default()
        ));
    }
    std::fs::write(&out_path, csv)?;
    println!("correlate: {} regions -> {}", correlations.len(), out_path.display());
    Ok(())
}
