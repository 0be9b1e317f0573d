//! Fold-based training of the fusion classifiers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{derive_seed, resize_bilinear, GrayImage, Manifest};
use crate::metrics::{confusion, macro_f1, macro_specificity, rk_correlation};
use crate::models::{FusionConfig, FusionModel};
use crate::numerics::{AdamW, Tape};

use super::augment::{augment_pair, AugmentSpec};
use super::{LogRow, TrainConfig, TrainError};

#[derive(Clone, Debug)]
pub struct FusionSample {
    pub t0: GrayImage,
    pub t1: GrayImage,
    pub label: usize,
    pub fold: Option<usize>,
    /// Dataset index; seeds the per-sample augmentation stream.
    pub index: usize,
}

/// Load every labeled pair, resized to the classifier input size.
pub fn load_fusion_dataset(
    manifest: &Manifest,
    input_h: usize,
    input_w: usize,
) -> Result<Vec<FusionSample>, TrainError> {
    let mut samples = Vec::with_capacity(manifest.len());
    for (i, r) in manifest.records.iter().enumerate() {
        let label = r.label_task1.ok_or_else(|| {
            TrainError::NoSamples(format!("case `{}` has no task-1 label", r.case_id))
        })? as usize;
        let (t0, t1) = manifest.load_pair(i)?;
        samples.push(FusionSample {
            t0: resize_bilinear(&t0, input_h, input_w),
            t1: resize_bilinear(&t1, input_h, input_w),
            label,
            fold: r.fold,
            index: i,
        });
    }
    if samples.is_empty() {
        return Err(TrainError::NoSamples("manifest is empty".into()));
    }
    Ok(samples)
}

/// One optimizer step over a batch; returns (mean loss, argmax predictions).
pub(crate) fn fusion_train_step(
    model: &mut FusionModel,
    opt: &mut AdamW,
    batch: &[(&GrayImage, &GrayImage)],
    labels: &[usize],
    class_slice: Option<usize>,
) -> Result<(f64, Vec<usize>), TrainError> {
    let mut tape = Tape::unchecked();
    let bind = model.params.bind(&mut tape, true);
    let (x0, x1) = model.batch_tensors(batch)?;
    let n0 = tape.constant(&x0);
    let n1 = tape.constant(&x1);
    let mut logits = model.forward_nodes(&mut tape, &bind, n0, n1)?;
    if let Some(k) = class_slice {
        logits = tape.slice(logits, 1, 0, k)?;
    }
    let preds = argmax_rows(tape.value(logits), tape.shape(logits)[1]);
    let loss = tape.cross_entropy(logits, labels)?;
    let loss_value = tape.value(loss)[0];
    tape.backward(loss)?;
    let grads = bind.gradients(&tape);
    opt.step(model.params.tensors_mut(), &grads)?;
    Ok((loss_value, preds))
}

fn argmax_rows(values: &[f64], k: usize) -> Vec<usize> {
    values.chunks_exact(k).map(super::ensemble::argmax_tie_low).collect()
}

/// Loss and predictions without gradient tracking.
pub(crate) fn fusion_eval(
    model: &FusionModel,
    samples: &[&FusionSample],
    batch_size: usize,
    class_slice: Option<usize>,
) -> Result<(f64, Vec<usize>), TrainError> {
    let mut total_loss = 0.0;
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let batch: Vec<(&GrayImage, &GrayImage)> = chunk.iter().map(|s| (&s.t0, &s.t1)).collect();
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let mut tape = Tape::unchecked();
        let bind = model.params.bind(&mut tape, false);
        let (x0, x1) = model.batch_tensors(&batch)?;
        let n0 = tape.constant(&x0);
        let n1 = tape.constant(&x1);
        let mut logits = model.forward_nodes(&mut tape, &bind, n0, n1)?;
        if let Some(k) = class_slice {
            logits = tape.slice(logits, 1, 0, k)?;
        }
        preds.extend(argmax_rows(tape.value(logits), tape.shape(logits)[1]));
        let loss = tape.cross_entropy(logits, &labels)?;
        total_loss += tape.value(loss)[0] * chunk.len() as f64;
    }
    Ok((total_loss / samples.len() as f64, preds))
}

/// Train one fold model: all folds except `fold` train, `fold` validates;
/// the best-validation-macro-F1 parameters are returned along with the
/// per-epoch log.
pub fn train_fusion(
    model_config: &FusionConfig,
    samples: &[FusionSample],
    fold: usize,
    cfg: &TrainConfig,
    spec: &AugmentSpec,
) -> Result<(FusionModel, Vec<LogRow>), TrainError> {
    cfg.validate()?;
    spec.validate()?;
    let train_idx: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].fold.map(|f| f != fold).unwrap_or(false))
        .collect();
    let val_refs: Vec<&FusionSample> =
        samples.iter().filter(|s| s.fold == Some(fold)).collect();
    if val_refs.is_empty() {
        return Err(TrainError::EmptyFold { fold });
    }
    let k = model_config.classes;
    let mut model = FusionModel::new(model_config.clone(), derive_seed(cfg.seed, &[0xF0, fold as u64]))?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut log = Vec::new();
    let mut best: Option<(f64, Vec<crate::numerics::Tensor>, u64)> = None;

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5F, fold as u64, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut train_preds = Vec::with_capacity(order.len());
        let mut train_truth = Vec::with_capacity(order.len());
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch_imgs: Vec<(GrayImage, GrayImage)> = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &samples[i];
                let pair = if cfg.augment {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.seed,
                        &[0xA6, epoch as u64, s.index as u64],
                    ));
                    augment_pair(&s.t0, &s.t1, spec, &mut rng)
                } else {
                    (s.t0.clone(), s.t1.clone())
                };
                batch_imgs.push(pair);
                labels.push(s.label);
            }
            let batch: Vec<(&GrayImage, &GrayImage)> =
                batch_imgs.iter().map(|(a, b)| (a, b)).collect();
            let (loss, preds) = fusion_train_step(&mut model, &mut opt, &batch, &labels, None)?;
            epoch_loss += loss * chunk.len() as f64;
            train_preds.extend(preds);
            train_truth.extend(labels);
        }
        let train_loss =
            if order.is_empty() { f64::NAN } else { epoch_loss / order.len() as f64 };
        let train_f1 = if train_truth.is_empty() {
            None
        } else {
            Some(macro_f1(&confusion(&train_truth, &train_preds, k)?)?)
        };
        log.push(LogRow {
            epoch,
            split: "train",
            loss: if train_loss.is_nan() { None } else { Some(train_loss) },
            f1: train_f1,
            rk: None,
            spec: None,
            qwk: None,
            mse: None,
        });

        let (val_loss, val_preds) = fusion_eval(&model, &val_refs, cfg.batch_size, None)?;
        let val_truth: Vec<usize> = val_refs.iter().map(|s| s.label).collect();
        let cm = confusion(&val_truth, &val_preds, k)?;
        let val_f1 = macro_f1(&cm)?;
        log.push(LogRow {
            epoch,
            split: "val",
            loss: Some(val_loss),
            f1: Some(val_f1),
            rk: Some(rk_correlation(&cm)),
            spec: Some(macro_specificity(&cm)),
            qwk: None,
            mse: None,
        });
        if best.as_ref().map(|(f, _, _)| val_f1 > *f).unwrap_or(true) {
            best = Some((val_f1, model.params.tensors(), epoch as u64));
        }
    }
    if let Some((_, tensors, _)) = best {
        model.params.set_tensors(tensors);
    }
    Ok((model, log))
}
