//! Subcommand implementations behind the `octprog` binary. Every command
//! is a pure function of (config, input files, seed): rerunning one
//! reproduces its outputs byte for byte.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{ConfigError, RunConfig};
use crate::dataio::{
    self, derive_seed, load_manifest, save_manifest, split_folds, DataError, Manifest,
};
use crate::metrics::{evaluate_task, MetricsError};
use crate::models::{
    load_checkpoint, save_checkpoint, FusionKind, FusionModel, ModelError, PpmaeModel,
};
use crate::numerics;
use crate::preprocess::{preprocess_pair, PreprocessError};
use crate::training::{
    ensemble_predict, finetune_task2, load_fusion_dataset, load_ppmae_pairs, predict_task2,
    train_fusion, train_ppmae, write_log_csv, TrainError, TrainTask,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Refuse to write into an existing non-empty directory unless forced.
fn ensure_out_dir(out_dir: &Path, force: bool) -> Result<(), CliError> {
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir).map_err(io_err(out_dir))?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Invalid(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                out_dir.display()
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    Ok(())
}

/// Generate a labeled synthetic dataset and its manifest.
pub fn cmd_gen_synth(
    cfg: &RunConfig,
    out_dir: &Path,
    n_pairs: usize,
    force: bool,
) -> Result<PathBuf, CliError> {
    ensure_out_dir(out_dir, force)?;
    let mut synth = cfg.synth.clone();
    synth.seed = cfg.seed;
    let manifest = dataio::generate_synthetic(&synth, n_pairs, out_dir)?;
    let manifest_path = out_dir.join("manifest.csv");
    save_manifest(&manifest, &manifest_path)?;
    Ok(manifest_path)
}

/// Preprocess every pair of a manifest into a new dataset directory.
pub fn cmd_preprocess(
    cfg: &RunConfig,
    manifest_in: &Path,
    out_dir: &Path,
    force: bool,
) -> Result<PathBuf, CliError> {
    let manifest = load_manifest(manifest_in)?;
    ensure_out_dir(out_dir, force)?;
    fs::create_dir_all(out_dir.join("images")).map_err(io_err(out_dir))?;
    let mut out_records = Vec::with_capacity(manifest.len());
    for (i, record) in manifest.records.iter().enumerate() {
        let (t0, t1) = manifest.load_pair(i)?;
        let (p0, p1) = preprocess_pair(&t0, &t1, &cfg.preprocess)?;
        let rel0 = format!("images/{}_t0.pgm", record.case_id);
        let rel1 = format!("images/{}_t1.pgm", record.case_id);
        dataio::save_image(&p0, &out_dir.join(&rel0))?;
        dataio::save_image(&p1, &out_dir.join(&rel1))?;
        let mut r = record.clone();
        r.image_t0_path = rel0;
        r.image_t1_path = rel1;
        out_records.push(r);
    }
    let out_manifest = Manifest { records: out_records, source_dir: out_dir.to_path_buf() };
    let manifest_path = out_dir.join("manifest.csv");
    save_manifest(&out_manifest, &manifest_path)?;
    Ok(manifest_path)
}

fn fusion_kind_of(task: TrainTask) -> Option<FusionKind> {
    match task {
        TrainTask::FusionEarly => Some(FusionKind::Early),
        TrainTask::FusionLate => Some(FusionKind::Late),
        _ => None,
    }
}

/// Train per the config's `train.task`: fusion tasks produce one
/// checkpoint and log per fold, the autoencoder one checkpoint, and
/// fine-tuning rewrites the fold checkpoints against reconstructed
/// futures. Returns the written checkpoint paths.
pub fn cmd_train(
    cfg: &RunConfig,
    manifest_path: &Path,
    out_dir: &Path,
    force: bool,
) -> Result<Vec<PathBuf>, CliError> {
    ensure_out_dir(out_dir, force)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let mut manifest = load_manifest(manifest_path)?;
    let mut written = Vec::new();
    match train_cfg.task {
        TrainTask::FusionEarly | TrainTask::FusionLate => {
            let kind = fusion_kind_of(train_cfg.task).expect("fusion task");
            if manifest.records.iter().any(|r| r.fold.is_none()) {
                split_folds(&mut manifest, train_cfg.k_folds, cfg.seed)?;
                save_manifest(&manifest, &out_dir.join("manifest_folds.csv"))?;
            }
            let model_cfg = cfg.classifier.to_fusion_config(kind);
            let samples = load_fusion_dataset(
                &manifest,
                model_cfg.input_height,
                model_cfg.input_width,
            )?;
            for fold in 0..train_cfg.k_folds {
                let (model, log) =
                    train_fusion(&model_cfg, &samples, fold, &train_cfg, &cfg.augment)?;
                let ckpt_path = out_dir.join(format!("{}_fold{fold}.ckpt", model.kind()));
                save_checkpoint(&model.to_checkpoint(train_cfg.epochs as u64), &ckpt_path)?;
                write_log_csv(&log, &out_dir.join(format!("train_{}_fold{fold}.csv", model.kind())))?;
                written.push(ckpt_path);
            }
        }
        TrainTask::Ppmae => {
            let pairs = load_ppmae_pairs(&manifest, &cfg.ppmae)?;
            let (model, log) = train_ppmae(&cfg.ppmae, &pairs, &train_cfg, &cfg.augment)?;
            let ckpt_path = out_dir.join("ppmae.ckpt");
            save_checkpoint(&model.to_checkpoint(train_cfg.epochs as u64), &ckpt_path)?;
            write_log_csv(&log, &out_dir.join("train_ppmae.csv"))?;
            written.push(ckpt_path);
        }
        TrainTask::FinetuneTask2 => {
            let classifier_dir = cfg
                .path("classifier_dir")
                .ok_or_else(|| CliError::Invalid("config.paths.classifier_dir required for fine-tuning".into()))?;
            let ppmae_path = cfg
                .path("ppmae_checkpoint")
                .ok_or_else(|| CliError::Invalid("config.paths.ppmae_checkpoint required for fine-tuning".into()))?;
            let classifiers = load_fusion_ensemble(classifier_dir)?;
            let ppmae = PpmaeModel::from_checkpoint(&load_checkpoint(ppmae_path)?)?;
            let (models, logs) =
                finetune_task2(classifiers, &ppmae, &manifest, &train_cfg, &cfg.augment)?;
            for (fold, (model, log)) in models.iter().zip(&logs).enumerate() {
                let ckpt_path = out_dir.join(format!("{}_fold{fold}.ckpt", model.kind()));
                save_checkpoint(&model.to_checkpoint(train_cfg.epochs as u64), &ckpt_path)?;
                write_log_csv(log, &out_dir.join(format!("finetune_fold{fold}.csv")))?;
                written.push(ckpt_path);
            }
        }
    }
    Ok(written)
}

/// Load every fusion checkpoint under `dir` (sorted by file name).
pub fn load_fusion_ensemble(dir: &Path) -> Result<Vec<FusionModel>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().map(|e| e == "ckpt").unwrap_or(false)
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("fusion-"))
                    .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Invalid(format!(
            "no fusion checkpoints (fusion-*.ckpt) under {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| Ok(FusionModel::from_checkpoint(&load_checkpoint(p)?)?))
        .collect()
}

fn find_ppmae_checkpoint(dir: &Path) -> Result<PathBuf, CliError> {
    let direct = dir.join("ppmae.ckpt");
    if direct.is_file() {
        return Ok(direct);
    }
    Err(CliError::Invalid(format!("no ppmae.ckpt under {}", dir.display())))
}

/// Predictions CSV (`case_id,pred`), one row per manifest case in order.
pub fn cmd_predict(
    cfg: &RunConfig,
    task: u8,
    manifest_path: &Path,
    checkpoint_dir: &Path,
    out_csv: &Path,
) -> Result<(), CliError> {
    let manifest = load_manifest(manifest_path)?;
    let mut out = String::from("case_id,pred\n");
    match task {
        1 => {
            let models = load_fusion_ensemble(checkpoint_dir)?;
            let (h, w) = (models[0].config.input_height, models[0].config.input_width);
            for i in 0..manifest.len() {
                let (t0, t1) = manifest.load_pair(i)?;
                let t0 = dataio::resize_bilinear(&t0, h, w);
                let t1 = dataio::resize_bilinear(&t1, h, w);
                let probs = ensemble_predict(&models, &t0, &t1)?;
                let class = crate::training::argmax_tie_low(&probs);
                writeln!(out, "{},{}", manifest.records[i].case_id, class).expect("string write");
            }
        }
        2 => {
            let models = load_fusion_ensemble(checkpoint_dir)?;
            let ppmae_path = match cfg.path("ppmae_checkpoint") {
                Some(p) => p.to_path_buf(),
                None => find_ppmae_checkpoint(checkpoint_dir)?,
            };
            let ppmae = PpmaeModel::from_checkpoint(&load_checkpoint(&ppmae_path)?)?;
            for i in 0..manifest.len() {
                let (t0, _) = manifest.load_pair(i)?;
                let (class, _) =
                    predict_task2(&ppmae, &models, &t0, derive_seed(cfg.seed, &[0x9C, i as u64]))?;
                writeln!(out, "{},{}", manifest.records[i].case_id, class).expect("string write");
            }
        }
        other => return Err(CliError::Invalid(format!("task must be 1 or 2, got {other}"))),
    }
    fs::write(out_csv, out).map_err(io_err(out_csv))?;
    Ok(())
}

fn parse_predictions(path: &Path) -> Result<Vec<(String, usize)>, CliError> {
    let body = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = body.lines();
    match lines.next() {
        Some("case_id,pred") => {}
        other => {
            return Err(CliError::Invalid(format!(
                "{}: expected header `case_id,pred`, got {:?}",
                path.display(),
                other.unwrap_or("")
            )))
        }
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (case, pred) = line.split_once(',').ok_or_else(|| {
            CliError::Invalid(format!("{} row {}: missing comma", path.display(), ln + 1))
        })?;
        let pred: usize = pred.trim().parse().map_err(|_| {
            CliError::Invalid(format!(
                "{} row {}: prediction `{pred}` is not an integer",
                path.display(),
                ln + 1
            ))
        })?;
        out.push((case.to_string(), pred));
    }
    Ok(out)
}

/// Score a predictions CSV against manifest labels; the case sets must
/// match exactly. Returns the report serialized as pretty JSON.
pub fn cmd_evaluate(
    pred_csv: &Path,
    manifest_path: &Path,
    task: u8,
) -> Result<String, CliError> {
    let manifest = load_manifest(manifest_path)?;
    let preds = parse_predictions(pred_csv)?;
    let manifest_cases: BTreeSet<&str> =
        manifest.records.iter().map(|r| r.case_id.as_str()).collect();
    let pred_cases: BTreeSet<&str> = preds.iter().map(|(c, _)| c.as_str()).collect();
    if manifest_cases != pred_cases {
        let missing: Vec<&&str> = manifest_cases.difference(&pred_cases).collect();
        let extra: Vec<&&str> = pred_cases.difference(&manifest_cases).collect();
        return Err(CliError::Invalid(format!(
            "case sets differ: {} missing from predictions {missing:?}, {} unknown {extra:?}",
            missing.len(),
            extra.len()
        )));
    }
    let by_case: std::collections::BTreeMap<&str, usize> =
        preds.iter().map(|(c, p)| (c.as_str(), *p)).collect();
    let mut truth = Vec::with_capacity(manifest.len());
    let mut predicted = Vec::with_capacity(manifest.len());
    for r in &manifest.records {
        let label = match task {
            1 => r.label_task1,
            2 => r.label_task2,
            other => return Err(CliError::Invalid(format!("task must be 1 or 2, got {other}"))),
        };
        let label = label.ok_or_else(|| {
            CliError::Invalid(format!("case `{}` has no task-{task} label", r.case_id))
        })?;
        truth.push(label as usize);
        predicted.push(by_case[r.case_id.as_str()]);
    }
    let report = evaluate_task(task, &truth, &predicted)?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    Ok(json)
}

/// Finite-difference check of every primitive; returns the table and
/// whether every row passed.
pub fn cmd_gradcheck(seed: u64) -> (String, bool) {
    let results = numerics::run_suite(seed);
    let mut table = String::from("op                     max_rel_err   status\n");
    let mut all_pass = true;
    for r in &results {
        all_pass &= r.pass;
        writeln!(
            table,
            "{:<22} {:>11.3e}   {}",
            r.name,
            r.max_rel_err,
            if r.pass { "pass" } else { "FAIL" }
        )
        .expect("string write");
    }
    (table, all_pass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::SynthConfig;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk_scale();
        cfg.synth = SynthConfig {
            height: 32,
            width: 64,
            band_thickness: 12,
            tilt_range: 2.0,
            offset_range: (2, 8),
            pocket_radius: 3.0,
            ..SynthConfig::default()
        };
        cfg.preprocess.out_height = 16;
        cfg.preprocess.out_width = 32;
        cfg
    }

    #[test]
    fn gen_synth_writes_manifest_and_images() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        let cfg = small_cfg();
        let manifest_path = cmd_gen_synth(&cfg, &out, 8, false).unwrap();
        let m = load_manifest(&manifest_path).unwrap();
        assert_eq!(m.len(), 8);
        let images: Vec<_> = std::fs::read_dir(out.join("images")).unwrap().collect();
        assert_eq!(images.len(), 16);
    }

    #[test]
    fn gen_synth_refuses_nonempty_dir_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        std::fs::create_dir_all(&out).unwrap();
        std::fs::write(out.join("existing.txt"), "x").unwrap();
        let cfg = small_cfg();
        let err = cmd_gen_synth(&cfg, &out, 4, false).unwrap_err().to_string();
        assert!(err.contains("--force"), "{err}");
        cmd_gen_synth(&cfg, &out, 4, true).unwrap();
    }

    #[test]
    fn gen_synth_same_seed_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        cmd_gen_synth(&cfg, &a, 6, false).unwrap();
        cmd_gen_synth(&cfg, &b, 6, false).unwrap();
        let read = |root: &Path| {
            let mut files: Vec<PathBuf> = walk(root);
            files.sort();
            files.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(read(&a), read(&b));
    }

    fn walk(root: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(root).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn preprocess_keeps_row_count_and_resizes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let data = dir.path().join("data");
        let manifest_path = cmd_gen_synth(&cfg, &data, 4, false).unwrap();
        let proc_dir = dir.path().join("proc");
        let out_manifest = cmd_preprocess(&cfg, &manifest_path, &proc_dir, false).unwrap();
        let m = load_manifest(&out_manifest).unwrap();
        assert_eq!(m.len(), 4);
        let (t0, _) = m.load_pair(0).unwrap();
        assert_eq!((t0.height(), t0.width()), (16, 32));
    }

    #[test]
    fn evaluate_perfect_predictions_scores_one() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let data = dir.path().join("data");
        let manifest_path = cmd_gen_synth(&cfg, &data, 8, false).unwrap();
        let m = load_manifest(&manifest_path).unwrap();
        let mut csv = String::from("case_id,pred\n");
        for r in &m.records {
            csv.push_str(&format!("{},{}\n", r.case_id, r.label_task1.unwrap()));
        }
        let pred_path = dir.path().join("preds.csv");
        std::fs::write(&pred_path, csv).unwrap();
        let json = cmd_evaluate(&pred_path, &manifest_path, 1).unwrap();
        let report: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(report["f1"], 1.0);
        assert_eq!(report["rk"], 1.0);
        assert_eq!(report["specificity"], 1.0);
    }

    #[test]
    fn evaluate_rejects_case_set_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let data = dir.path().join("data");
        let manifest_path = cmd_gen_synth(&cfg, &data, 4, false).unwrap();
        let pred_path = dir.path().join("preds.csv");
        std::fs::write(&pred_path, "case_id,pred\ncase00000,1\n").unwrap();
        let err = cmd_evaluate(&pred_path, &manifest_path, 1).unwrap_err().to_string();
        assert!(err.contains("case sets differ"), "{err}");
    }

    #[test]
    fn gradcheck_command_passes() {
        let (table, ok) = cmd_gradcheck(7);
        assert!(ok, "gradcheck failed:\n{table}");
        assert!(table.contains("conv2d"));
    }
}
