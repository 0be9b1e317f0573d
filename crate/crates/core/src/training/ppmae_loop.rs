//! Self-supervised training of the patch-progression autoencoder on
//! registered pairs: visible baseline patches in, masked follow-up
//! patches as regression targets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{derive_seed, resize_bilinear, GrayImage, Manifest};
use crate::models::{PpmaeConfig, PpmaeModel};
use crate::numerics::{AdamW, Tape};
use crate::patchwork::{gather_patches, patchify, sample_mask};

use super::augment::{augment_pair, AugmentSpec};
use super::{LogRow, TrainConfig, TrainError};

// seed-stream tags
const TAG_SPLIT: u64 = 0x51;
const TAG_SHUFFLE: u64 = 0x52;
const TAG_PLAN: u64 = 0x53;
const TAG_AUG: u64 = 0x54;
const TAG_VAL_PLAN: u64 = 0x55;

/// Load all pairs resized to the autoencoder input; labels are not used.
pub fn load_ppmae_pairs(
    manifest: &Manifest,
    cfg: &PpmaeConfig,
) -> Result<Vec<(GrayImage, GrayImage)>, TrainError> {
    if manifest.is_empty() {
        return Err(TrainError::NoSamples("manifest is empty".into()));
    }
    let mut pairs = Vec::with_capacity(manifest.len());
    for i in 0..manifest.len() {
        let (t0, t1) = manifest.load_pair(i)?;
        pairs.push((
            resize_bilinear(&t0, cfg.image_height, cfg.image_width),
            resize_bilinear(&t1, cfg.image_height, cfg.image_width),
        ));
    }
    Ok(pairs)
}

/// Masked-patch MSE of the model on `pairs` with per-pair fixed plans.
pub fn masked_val_mse(
    model: &PpmaeModel,
    pairs: &[(GrayImage, GrayImage)],
    seed: u64,
) -> Result<f64, TrainError> {
    let n = model.config.n_patches();
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (t0, t1)) in pairs.iter().enumerate() {
        let plan = sample_mask(n, model.config.mask_ratio, derive_seed(seed, &[TAG_VAL_PLAN, i as u64]))?;
        let preds = model.predict_masked(t0, &plan)?;
        let grid1 = patchify(t1, model.config.patch)?;
        let targets = gather_patches(&grid1, &plan.masked)?;
        total += preds
            .iter()
            .zip(&targets)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>();
        count += targets.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Masked-patch MSE of copying the baseline patches into the masked
/// positions: the baseline the trained model must beat.
pub fn copy_baseline_masked_mse(
    pairs: &[(GrayImage, GrayImage)],
    cfg: &PpmaeConfig,
    seed: u64,
) -> Result<f64, TrainError> {
    let n = cfg.n_patches();
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (t0, t1)) in pairs.iter().enumerate() {
        let plan = sample_mask(n, cfg.mask_ratio, derive_seed(seed, &[TAG_VAL_PLAN, i as u64]))?;
        let g0 = patchify(t0, cfg.patch)?;
        let g1 = patchify(t1, cfg.patch)?;
        let copied = gather_patches(&g0, &plan.masked)?;
        let targets = gather_patches(&g1, &plan.masked)?;
        total += copied
            .iter()
            .zip(&targets)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>();
        count += targets.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Deterministic train/val split over pair indices.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SPLIT]));
    idx.shuffle(&mut rng);
    let train_count = ((n as f64) * ratio).floor().max(1.0) as usize;
    let train = idx[..train_count.min(n)].to_vec();
    let val = idx[train_count.min(n)..].to_vec();
    (train, val)
}

/// Train the autoencoder; returns the best-validation-MSE model (the last
/// epoch when there is no validation split) and the per-epoch log.
pub fn train_ppmae(
    model_config: &PpmaeConfig,
    pairs: &[(GrayImage, GrayImage)],
    cfg: &TrainConfig,
    spec: &AugmentSpec,
) -> Result<(PpmaeModel, Vec<LogRow>), TrainError> {
    cfg.validate()?;
    spec.validate()?;
    let spec = spec.ppmae_view();
    if pairs.is_empty() {
        return Err(TrainError::NoSamples("no training pairs".into()));
    }
    let (train_idx, val_idx) = split_indices(pairs.len(), cfg.split_ratio, cfg.seed);
    let val_pairs: Vec<(GrayImage, GrayImage)> =
        val_idx.iter().map(|&i| pairs[i].clone()).collect();
    let mut model = PpmaeModel::new(model_config.clone(), derive_seed(cfg.seed, &[0xAE]))?;
    let n_patches = model.config.n_patches();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut log = Vec::new();
    let mut best: Option<(f64, Vec<crate::numerics::Tensor>)> = None;

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::unchecked();
            let bind = model.params.bind(&mut tape, true);
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (t0, t1) = if cfg.augment {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.seed,
                        &[TAG_AUG, epoch as u64, i as u64],
                    ));
                    augment_pair(&pairs[i].0, &pairs[i].1, &spec, &mut rng)
                } else {
                    pairs[i].clone()
                };
                let plan = sample_mask(
                    n_patches,
                    model.config.mask_ratio,
                    derive_seed(cfg.seed, &[TAG_PLAN, epoch as u64, i as u64]),
                )?;
                let (patches, _) = model.patches_node(&mut tape, &t0, false)?;
                let pred = model
                    .forward(&mut tape, &bind, patches, &plan)?
                    .expect("mask ratio > 0 leaves masked patches");
                let grid1 = patchify(&t1, model.config.patch)?;
                losses.push(model.loss(&mut tape, pred, &grid1, &plan)?);
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = tape.add(total, l)?;
            }
            let batch_loss = tape.scale(total, 1.0 / losses.len() as f64)?;
            epoch_loss += tape.value(batch_loss)[0] * chunk.len() as f64;
            seen += chunk.len();
            tape.backward(batch_loss)?;
            let grads = bind.gradients(&tape);
            opt.step(model.params.tensors_mut(), &grads)?;
        }
        let train_loss = epoch_loss / seen.max(1) as f64;
        log.push(LogRow {
            epoch,
            split: "train",
            loss: Some(train_loss),
            f1: None,
            rk: None,
            spec: None,
            qwk: None,
            mse: Some(train_loss),
        });

        if !val_pairs.is_empty() {
            let val_mse = masked_val_mse(&model, &val_pairs, cfg.seed)?;
            log.push(LogRow {
                epoch,
                split: "val",
                loss: Some(val_mse),
                f1: None,
                rk: None,
                spec: None,
                qwk: None,
                mse: Some(val_mse),
            });
            if best.as_ref().map(|(m, _)| val_mse < *m).unwrap_or(true) {
                best = Some((val_mse, model.params.tensors()));
            }
        }
    }
    if let Some((_, tensors)) = best {
        model.params.set_tensors(tensors);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> PpmaeConfig {
        PpmaeConfig {
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
        }
    }

    fn toy_pairs(n: usize) -> Vec<(GrayImage, GrayImage)> {
        (0..n)
            .map(|i| {
                let v = (i % 7) as f64 / 10.0 + 0.1;
                let t0 = GrayImage::new(16, 16, vec![v; 256]);
                let t1 = GrayImage::new(16, 16, vec![(v + 0.2).min(1.0); 256]);
                (t0, t1)
            })
            .collect()
    }

    #[test]
    fn one_epoch_smoke_run() {
        let pairs = toy_pairs(8);
        let cfg = TrainConfig { epochs: 1, batch_size: 4, augment: false, ..Default::default() };
        let (model, log) =
            train_ppmae(&tiny_config(), &pairs, &cfg, &AugmentSpec::identity()).unwrap();
        assert!(log.iter().all(|r| r.loss.unwrap().is_finite()));
        assert!(model.params.tensors().iter().all(|t| t.is_finite()));
    }

    #[test]
    fn same_seed_reproduces_parameters() {
        let pairs = toy_pairs(8);
        let cfg = TrainConfig { epochs: 2, batch_size: 4, augment: false, ..Default::default() };
        let (a, la) = train_ppmae(&tiny_config(), &pairs, &cfg, &AugmentSpec::identity()).unwrap();
        let (b, lb) = train_ppmae(&tiny_config(), &pairs, &cfg, &AugmentSpec::identity()).unwrap();
        assert_eq!(la, lb);
        for (ta, tb) in a.params.tensors().iter().zip(b.params.tensors()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn stable_pairs_make_loss_match_plain_reconstruction() {
        // t1 == t0 turns the objective into ordinary masked
        // reconstruction; training on constants should drive MSE down.
        let pairs: Vec<(GrayImage, GrayImage)> = (0..8)
            .map(|i| {
                let v = 0.2 + (i % 4) as f64 * 0.2;
                let img = GrayImage::new(16, 16, vec![v; 256]);
                (img.clone(), img)
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 25,
            batch_size: 8,
            augment: false,
            lr: 3e-3,
            ..Default::default()
        };
        let (_, log) = train_ppmae(&tiny_config(), &pairs, &cfg, &AugmentSpec::identity()).unwrap();
        let first = log[0].loss.unwrap();
        let last = log[log.len() - 2].loss.unwrap();
        assert!(last < first, "loss should fall: {first} -> {last}");
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let (a_train, a_val) = split_indices(20, 0.75, 9);
        let (b_train, b_val) = split_indices(20, 0.75, 9);
        assert_eq!(a_train, b_train);
        assert_eq!(a_val, b_val);
        assert_eq!(a_train.len(), 15);
        let mut all: Vec<usize> = a_train.iter().chain(&a_val).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn copy_baseline_is_zero_for_stable_pairs() {
        let img = GrayImage::new(16, 16, (0..256).map(|i| (i % 100) as f64 / 100.0).collect());
        let pairs = vec![(img.clone(), img)];
        let mse = copy_baseline_masked_mse(&pairs, &tiny_config(), 0).unwrap();
        assert_eq!(mse, 0.0);
    }
}
