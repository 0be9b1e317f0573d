use crate::dataio::GrayImage;
use crate::models::FusionModel;

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleMode {
    /// Mean of per-model softmax probability vectors (the default).
    SoftmaxMean,
    /// Normalized argmax vote counts.
    MajorityVote,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_tie_low(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

fn check_same_architecture(models: &[FusionModel]) -> Result<(), TrainError> {
    let first = &models
        .first()
        .ok_or_else(|| TrainError::Ensemble("no checkpoints given".into()))?
        .config;
    for m in &models[1..] {
        if m.config != *first {
            return Err(TrainError::Ensemble(format!(
                "architecture mismatch: {:?} vs {:?}",
                m.config.kind, first.kind
            )));
        }
    }
    Ok(())
}

/// Combined class probabilities of several fold models for one pair.
pub fn ensemble_predict_mode(
    models: &[FusionModel],
    t0: &GrayImage,
    t1: &GrayImage,
    mode: EnsembleMode,
) -> Result<Vec<f64>, TrainError> {
    check_same_architecture(models)?;
    let k = models[0].config.classes;
    let mut acc = vec![0.0; k];
    for m in models {
        let logits = m.forward_pair(t0, t1)?;
        match mode {
            EnsembleMode::SoftmaxMean => {
                for (a, p) in acc.iter_mut().zip(softmax(&logits)) {
                    *a += p;
                }
            }
            EnsembleMode::MajorityVote => {
                acc[argmax_tie_low(&logits)] += 1.0;
            }
        }
    }
    let n = models.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(acc)
}

/// Softmax-mean ensemble probabilities.
pub fn ensemble_predict(
    models: &[FusionModel],
    t0: &GrayImage,
    t1: &GrayImage,
) -> Result<Vec<f64>, TrainError> {
    ensemble_predict_mode(models, t0, t1, EnsembleMode::SoftmaxMean)
}
