use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::GrayImage;
use crate::numerics::{NodeId, NumericsError, Tape, Tensor};

use super::checkpoint::{Checkpoint, ModelKind};
use super::encoder::{Encoder, EncoderConfig};
use super::layers::Linear;
use super::{Binding, ModelError, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    /// Scans stacked as channels of one encoder input.
    Early,
    /// Scans encoded separately by a shared encoder, features concatenated.
    Late,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub kind: FusionKind,
    pub encoder: EncoderConfig,
    pub input_height: usize,
    pub input_width: usize,
    pub classes: usize,
}

impl FusionConfig {
    pub fn desk(kind: FusionKind) -> Self {
        let in_channels = match kind {
            FusionKind::Early => 2,
            FusionKind::Late => 3,
        };
        FusionConfig {
            kind,
            encoder: EncoderConfig::desk(in_channels),
            input_height: 32,
            input_width: 80,
            classes: 4,
        }
    }

    pub fn paper(kind: FusionKind) -> Self {
        let in_channels = match kind {
            FusionKind::Early => 2,
            FusionKind::Late => 3,
        };
        FusionConfig {
            kind,
            encoder: EncoderConfig::paper(in_channels),
            input_height: 200,
            input_width: 512,
            classes: 4,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        let want = match self.kind {
            FusionKind::Early => 2,
            FusionKind::Late => 3,
        };
        if self.encoder.in_channels != want {
            return Err(ModelError::BadConfig(format!(
                "{:?} fusion needs a {want}-channel encoder, config has {}",
                self.kind, self.encoder.in_channels
            )));
        }
        if self.classes < 2 || self.input_height == 0 || self.input_width == 0 {
            return Err(ModelError::BadConfig("classes/input dims must be positive".into()));
        }
        Ok(())
    }
}

/// Pair classifier: early fusion concatenates the scans along the channel
/// dimension before one encoder; late fusion encodes each scan (replicated
/// to three channels) with the same shared-parameter encoder and
/// concatenates the two feature vectors before the head.
pub struct FusionModel {
    pub config: FusionConfig,
    pub seed: u64,
    pub params: ParamStore,
    encoder: Encoder,
    head: Linear,
}

impl FusionModel {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::create(&mut store, &mut rng, "enc", &config.encoder);
        let head_in = match config.kind {
            FusionKind::Early => config.encoder.feature_dim,
            FusionKind::Late => 2 * config.encoder.feature_dim,
        };
        let head = Linear::create_kaiming(&mut store, &mut rng, "head", head_in, config.classes);
        Ok(FusionModel { config, seed, params: store, encoder, head })
    }

    pub fn kind(&self) -> ModelKind {
        match self.config.kind {
            FusionKind::Early => ModelKind::FusionEarly,
            FusionKind::Late => ModelKind::FusionLate,
        }
    }

    /// Logits from already-inserted batch nodes `t0`, `t1` of shape
    /// `[B, 1, H, W]`.
    pub fn forward_nodes(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        t0: NodeId,
        t1: NodeId,
    ) -> Result<NodeId, NumericsError> {
        match self.config.kind {
            FusionKind::Early => {
                let fused = tape.concat(&[t0, t1], 1)?;
                let feat = self.encoder.forward(tape, bind, fused)?;
                self.head.forward(tape, bind, feat)
            }
            FusionKind::Late => {
                let x0 = tape.concat(&[t0, t0, t0], 1)?;
                let x1 = tape.concat(&[t1, t1, t1], 1)?;
                let f0 = self.encoder.forward(tape, bind, x0)?;
                let f1 = self.encoder.forward(tape, bind, x1)?;
                let fused = tape.concat(&[f0, f1], 1)?;
                self.head.forward(tape, bind, fused)
            }
        }
    }

    /// Stack a batch of pairs into two `[B, 1, H, W]` tensors.
    pub fn batch_tensors(
        &self,
        pairs: &[(&GrayImage, &GrayImage)],
    ) -> Result<(Tensor, Tensor), ModelError> {
        let (h, w) = (self.config.input_height, self.config.input_width);
        let b = pairs.len();
        let mut d0 = Vec::with_capacity(b * h * w);
        let mut d1 = Vec::with_capacity(b * h * w);
        for (t0, t1) in pairs {
            for img in [t0, t1] {
                if img.height() != h || img.width() != w {
                    return Err(ModelError::InputSize {
                        got_h: img.height(),
                        got_w: img.width(),
                        want_h: h,
                        want_w: w,
                    });
                }
            }
            d0.extend_from_slice(t0.pixels());
            d1.extend_from_slice(t1.pixels());
        }
        Ok((
            Tensor::new(vec![b, 1, h, w], d0).expect("shape/data agree"),
            Tensor::new(vec![b, 1, h, w], d1).expect("shape/data agree"),
        ))
    }

    /// Logits for one pair.
    pub fn forward_pair(&self, t0: &GrayImage, t1: &GrayImage) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::unchecked();
        let bind = self.params.bind(&mut tape, false);
        let (x0, x1) = self.batch_tensors(&[(t0, t1)])?;
        let n0 = tape.constant(&x0);
        let n1 = tape.constant(&x1);
        let logits = self.forward_nodes(&mut tape, &bind, n0, n1)?;
        Ok(tape.value(logits).to_vec())
    }

    /// Late-fusion branch features for one pair (shared encoder applied to
    /// each scan).
    pub fn late_features(
        &self,
        t0: &GrayImage,
        t1: &GrayImage,
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        if self.config.kind != FusionKind::Late {
            return Err(ModelError::BadConfig("late_features on an early-fusion model".into()));
        }
        let mut tape = Tape::unchecked();
        let bind = self.params.bind(&mut tape, false);
        let (x0, x1) = self.batch_tensors(&[(t0, t1)])?;
        let n0 = tape.constant(&x0);
        let n1 = tape.constant(&x1);
        let r0 = tape.concat(&[n0, n0, n0], 1)?;
        let r1 = tape.concat(&[n1, n1, n1], 1)?;
        let f0 = self.encoder.forward(&mut tape, &bind, r0)?;
        let f1 = self.encoder.forward(&mut tape, &bind, r1)?;
        Ok((tape.value(f0).to_vec(), tape.value(f1).to_vec()))
    }

    pub fn to_checkpoint(&self, epoch: u64) -> Checkpoint {
        Checkpoint {
            kind: self.kind(),
            seed: self.seed,
            epoch,
            config: serde_json::to_value(&self.config).expect("config serializes"),
            params: self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let config: FusionConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
        let want = match config.kind {
            FusionKind::Early => ModelKind::FusionEarly,
            FusionKind::Late => ModelKind::FusionLate,
        };
        if ckpt.kind != want {
            return Err(ModelError::WrongKind { want, got: ckpt.kind });
        }
        let mut model = FusionModel::new(config, ckpt.seed)?;
        model.params.load_named(&ckpt.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(kind: FusionKind) -> FusionConfig {
        FusionConfig {
            kind,
            encoder: EncoderConfig {
                in_channels: if kind == FusionKind::Early { 2 } else { 3 },
                widths: vec![4, 8],
                blocks_per_stage: 1,
                feature_dim: 16,
            },
            input_height: 16,
            input_width: 16,
            classes: 4,
        }
    }

    fn img(v: f64) -> GrayImage {
        GrayImage::new(16, 16, vec![v; 256])
    }

    #[test]
    fn early_fusion_stacks_channels_and_is_order_sensitive() {
        let model = FusionModel::new(tiny_config(FusionKind::Early), 3).unwrap();
        let (a, b) = (img(0.2), img(0.9));
        let fwd = model.forward_pair(&a, &b).unwrap();
        let swapped = model.forward_pair(&b, &a).unwrap();
        assert_eq!(fwd.len(), 4);
        assert_ne!(fwd, swapped, "channel order must matter");
    }

    #[test]
    fn early_fusion_builds_two_channel_input() {
        let model = FusionModel::new(tiny_config(FusionKind::Early), 3).unwrap();
        let (a, b) = (img(0.2), img(0.9));
        let (x0, x1) = model.batch_tensors(&[(&a, &b)]).unwrap();
        let mut tape = Tape::new();
        let bindings = model.params.bind(&mut tape, false);
        let n0 = tape.constant(&x0);
        let n1 = tape.constant(&x1);
        let fused = tape.concat(&[n0, n1], 1).unwrap();
        assert_eq!(tape.shape(fused), &[1, 2, 16, 16]);
        let _ = bindings;
    }

    #[test]
    fn batch_of_pairs_gives_batched_logits() {
        let model = FusionModel::new(tiny_config(FusionKind::Early), 3).unwrap();
        let pairs: Vec<(GrayImage, GrayImage)> =
            (0..3).map(|i| (img(0.1 * i as f64), img(0.2))).collect();
        let refs: Vec<(&GrayImage, &GrayImage)> = pairs.iter().map(|(a, b)| (a, b)).collect();
        let (x0, x1) = model.batch_tensors(&refs).unwrap();
        let mut tape = Tape::new();
        let bind = model.params.bind(&mut tape, false);
        let n0 = tape.constant(&x0);
        let n1 = tape.constant(&x1);
        let logits = model.forward_nodes(&mut tape, &bind, n0, n1).unwrap();
        assert_eq!(tape.shape(logits), &[3, 4]);
    }

    #[test]
    fn late_fusion_shares_the_encoder() {
        let model = FusionModel::new(tiny_config(FusionKind::Late), 5).unwrap();
        let a = img(0.4);
        // identical inputs and shared weights give identical branch features
        let (f0, f1) = model.late_features(&a, &a).unwrap();
        assert_eq!(f0, f1);
        assert_eq!(f0.len(), 16);

        // fused feature has length 2D by construction
        let (x0, x1) = model.batch_tensors(&[(&a, &a)]).unwrap();
        let mut tape = Tape::new();
        let bind = model.params.bind(&mut tape, false);
        let n0 = tape.constant(&x0);
        let n1 = tape.constant(&x1);
        let logits = model.forward_nodes(&mut tape, &bind, n0, n1).unwrap();
        assert_eq!(tape.shape(logits), &[1, 4]);

        // perturbing one encoder parameter changes BOTH branch features
        let mut perturbed = FusionModel::new(tiny_config(FusionKind::Late), 5).unwrap();
        let mut tensors = perturbed.params.tensors();
        let idx = (0..perturbed.params.len())
            .find(|&i| perturbed.params.name(i) == "enc.stage0.down.b")
            .unwrap();
        tensors[idx].data_mut()[0] += 5.0;
        perturbed.params.set_tensors(tensors);
        let b = img(0.7);
        let (p0, p1) = perturbed.late_features(&a, &b).unwrap();
        let (o0, o1) = model.late_features(&a, &b).unwrap();
        assert_ne!(p0, o0, "t0 branch must see the perturbation");
        assert_ne!(p1, o1, "t1 branch must see the perturbation");
    }

    #[test]
    fn zero_image_yields_finite_features() {
        let model = FusionModel::new(tiny_config(FusionKind::Late), 1).unwrap();
        let z = GrayImage::zeros(16, 16);
        let logits = model.forward_pair(&z, &z).unwrap();
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn paper_scale_feature_lengths() {
        // shape algebra at the published scale: D = 2048, fused 2D = 4096
        let cfg = FusionConfig::paper(FusionKind::Late);
        assert_eq!(cfg.encoder.feature_dim, 2048);
        let head_in = 2 * cfg.encoder.feature_dim;
        assert_eq!(head_in, 4096);
        // a thin-width encoder with the same projection width runs the
        // full 200x512 input and emits a 2048-length feature vector
        let thin = FusionConfig {
            kind: FusionKind::Late,
            encoder: EncoderConfig {
                in_channels: 3,
                widths: vec![4, 8],
                blocks_per_stage: 1,
                feature_dim: 2048,
            },
            input_height: 200,
            input_width: 512,
            classes: 4,
        };
        let model = FusionModel::new(thin, 0).unwrap();
        let x = GrayImage::zeros(200, 512);
        let (f0, _) = model.late_features(&x, &x).unwrap();
        assert_eq!(f0.len(), 2048);
        assert!(f0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut cfg = tiny_config(FusionKind::Early);
        cfg.encoder.in_channels = 3;
        assert!(matches!(FusionModel::new(cfg, 0), Err(ModelError::BadConfig(_))));
    }

    #[test]
    fn rejects_wrong_input_size() {
        let model = FusionModel::new(tiny_config(FusionKind::Early), 0).unwrap();
        let small = GrayImage::zeros(8, 8);
        match model.forward_pair(&small, &small) {
            Err(ModelError::InputSize { .. }) => {}
            other => panic!("expected InputSize error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn deterministic_construction_and_forward() {
        let a = FusionModel::new(tiny_config(FusionKind::Early), 42).unwrap();
        let b = FusionModel::new(tiny_config(FusionKind::Early), 42).unwrap();
        let (i0, i1) = (img(0.3), img(0.6));
        assert_eq!(a.forward_pair(&i0, &i1).unwrap(), b.forward_pair(&i0, &i1).unwrap());
    }
}
