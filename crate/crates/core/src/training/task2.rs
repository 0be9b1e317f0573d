//! Single-scan progression prediction: reconstruct the future scan, then
//! classify the (current, predicted) pair with the task-1 ensemble
//! restricted to the three progression classes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{derive_seed, resize_bilinear, GrayImage, Manifest};
use crate::models::{FusionModel, PpmaeModel};
use crate::numerics::AdamW;

use super::augment::{augment_pair, AugmentSpec};
use super::ensemble::{argmax_tie_low, ensemble_predict};
use super::fusion_loop::fusion_train_step;
use super::{LogRow, TrainConfig, TrainError};

const TAG_RECON: u64 = 0x7E;
const TAG_FT_AUG: u64 = 0x7F;

/// Class probabilities over {0,1,2} and the predicted class for a single
/// baseline scan: class-3 mass is dropped and the rest renormalized.
pub fn predict_task2(
    ppmae: &PpmaeModel,
    classifiers: &[FusionModel],
    t0: &GrayImage,
    seed: u64,
) -> Result<(usize, Vec<f64>), TrainError> {
    let first = classifiers
        .first()
        .ok_or_else(|| TrainError::Ensemble("no classifier checkpoints".into()))?;
    let (h, w) = (first.config.input_height, first.config.input_width);
    let t0_sized = resize_bilinear(t0, h, w);
    let t1_hat = ppmae.reconstruct_future(&t0_sized, seed, h, w)?;
    let probs4 = ensemble_predict(classifiers, &t0_sized, &t1_hat)?;
    let mut probs3 = probs4[..3].to_vec();
    let total: f64 = probs3.iter().sum();
    if total > 0.0 {
        for p in &mut probs3 {
            *p /= total;
        }
    } else {
        probs3 = vec![1.0 / 3.0; 3];
    }
    Ok((argmax_tie_low(&probs3), probs3))
}

/// A task-2 training sample: baseline scan plus its progression label.
pub(crate) struct Task2Sample {
    pub t0: GrayImage,
    pub label: usize,
    pub index: usize,
}

pub(crate) fn load_task2_dataset(
    manifest: &Manifest,
    input_h: usize,
    input_w: usize,
) -> Result<Vec<Task2Sample>, TrainError> {
    let mut out = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let Some(label) = r.label_task2 else { continue };
        let (t0, _) = manifest.load_pair(i)?;
        out.push(Task2Sample {
            t0: resize_bilinear(&t0, input_h, input_w),
            label: label as usize,
            index: i,
        });
    }
    if out.is_empty() {
        return Err(TrainError::NoSamples("manifest has no task-2 labels".into()));
    }
    Ok(out)
}

/// Fine-tune every fold classifier on (t0, reconstructed future) pairs
/// with cross-entropy over the three progression classes (the class-3
/// logit is cut before the softmax). All data trains (no validation
/// split); zero epochs passes checkpoints through unchanged.
pub fn finetune_task2(
    mut classifiers: Vec<FusionModel>,
    ppmae: &PpmaeModel,
    manifest: &Manifest,
    cfg: &TrainConfig,
    spec: &AugmentSpec,
) -> Result<(Vec<FusionModel>, Vec<Vec<LogRow>>), TrainError> {
    cfg.validate()?;
    spec.validate()?;
    let first = classifiers
        .first()
        .ok_or_else(|| TrainError::Ensemble("no classifier checkpoints".into()))?;
    let (h, w) = (first.config.input_height, first.config.input_width);
    let samples = load_task2_dataset(manifest, h, w)?;
    if cfg.epochs == 0 {
        let logs = vec![Vec::new(); classifiers.len()];
        return Ok((classifiers, logs));
    }
    // one reconstruction per sample, shared by every fold model
    let recon: Vec<GrayImage> = samples
        .iter()
        .map(|s| {
            ppmae.reconstruct_future(&s.t0, derive_seed(cfg.seed, &[TAG_RECON, s.index as u64]), h, w)
        })
        .collect::<Result<_, _>>()?;

    let mut logs = Vec::with_capacity(classifiers.len());
    for model in classifiers.iter_mut() {
        let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
        let mut model_log = Vec::new();
        for epoch in 0..cfg.epochs {
            let mut epoch_loss = 0.0;
            for chunk in (0..samples.len()).collect::<Vec<_>>().chunks(cfg.batch_size) {
                let mut imgs: Vec<(GrayImage, GrayImage)> = Vec::with_capacity(chunk.len());
                let mut labels = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let s = &samples[i];
                    let pair = if cfg.augment {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                            cfg.seed,
                            &[TAG_FT_AUG, epoch as u64, s.index as u64],
                        ));
                        augment_pair(&s.t0, &recon[i], spec, &mut rng)
                    } else {
                        (s.t0.clone(), recon[i].clone())
                    };
                    imgs.push(pair);
                    labels.push(s.label);
                }
                let batch: Vec<(&GrayImage, &GrayImage)> =
                    imgs.iter().map(|(a, b)| (a, b)).collect();
                let (loss, _) = fusion_train_step(model, &mut opt, &batch, &labels, Some(3))?;
                epoch_loss += loss * chunk.len() as f64;
            }
            model_log.push(LogRow {
                epoch,
                split: "train",
                loss: Some(epoch_loss / samples.len() as f64),
                f1: None,
                rk: None,
                spec: None,
                qwk: None,
                mse: None,
            });
        }
        logs.push(model_log);
    }
    Ok((classifiers, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SynthConfig};
    use crate::models::{EncoderConfig, FusionConfig, FusionKind, PpmaeConfig};
    use crate::training::TrainTask;

    fn tiny_fusion(seed: u64) -> FusionModel {
        let cfg = FusionConfig {
            kind: FusionKind::Late,
            encoder: EncoderConfig {
                in_channels: 3,
                widths: vec![4],
                blocks_per_stage: 1,
                feature_dim: 8,
            },
            input_height: 16,
            input_width: 16,
            classes: 4,
        };
        FusionModel::new(cfg, seed).unwrap()
    }

    fn tiny_ppmae() -> PpmaeModel {
        let cfg = PpmaeConfig {
            image_height: 16,
            image_width: 16,
            patch: 4,
            enc_dim: 8,
            enc_depth: 1,
            enc_heads: 2,
            dec_dim: 8,
            dec_depth: 1,
            dec_heads: 2,
            mask_ratio: 0.75,
            mlp_ratio: 2,
            recon_samples: 1,
        };
        PpmaeModel::new(cfg, 21).unwrap()
    }

    #[test]
    fn prediction_is_deterministic_and_three_class() {
        let ppmae = tiny_ppmae();
        let models = vec![tiny_fusion(1), tiny_fusion(2)];
        let t0 = GrayImage::new(16, 16, (0..256).map(|i| (i % 91) as f64 / 91.0).collect());
        let (class_a, probs_a) = predict_task2(&ppmae, &models, &t0, 5).unwrap();
        let (class_b, probs_b) = predict_task2(&ppmae, &models, &t0, 5).unwrap();
        assert_eq!(class_a, class_b);
        assert_eq!(probs_a, probs_b);
        assert!(class_a < 3, "class-3 mass must never be emitted");
        assert_eq!(probs_a.len(), 3);
        assert!((probs_a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn synth_manifest(dir: &std::path::Path) -> crate::dataio::Manifest {
        let cfg = SynthConfig { height: 16, width: 16, band_thickness: 8, tilt_range: 1.0,
            offset_range: (1, 3), pocket_radius: 1.5, noise: 0.01, ..SynthConfig::default() };
        generate_synthetic(&cfg, 6, dir).unwrap()
    }

    #[test]
    fn zero_epochs_passes_checkpoints_through() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_manifest(dir.path());
        let ppmae = tiny_ppmae();
        let models = vec![tiny_fusion(1)];
        let before = models[0].params.tensors();
        let cfg = TrainConfig {
            task: TrainTask::FinetuneTask2,
            epochs: 0,
            ..Default::default()
        };
        let (after, logs) =
            finetune_task2(models, &ppmae, &manifest, &cfg, &AugmentSpec::identity()).unwrap();
        assert!(logs[0].is_empty());
        for (a, b) in after[0].params.tensors().iter().zip(before) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn one_epoch_changes_parameters_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_manifest(dir.path());
        let ppmae = tiny_ppmae();
        let cfg = TrainConfig {
            task: TrainTask::FinetuneTask2,
            epochs: 1,
            lr: 1e-5,
            batch_size: 4,
            augment: false,
            ..Default::default()
        };
        let run = || {
            let models = vec![tiny_fusion(1)];
            let (after, logs) =
                finetune_task2(models, &ppmae, &manifest, &cfg, &AugmentSpec::identity()).unwrap();
            (after[0].params.tensors(), logs)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        let before = tiny_fusion(1).params.tensors();
        assert!(a.iter().zip(&before).any(|(x, y)| x.data() != y.data()), "parameters must move");
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
    }
}
