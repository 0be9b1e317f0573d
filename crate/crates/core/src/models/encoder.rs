use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{NodeId, NumericsError, Tape};

use super::layers::{Conv, Linear};
use super::{Binding, ModelError, ParamStore};

/// Residual CNN feature extractor: per stage a stride-2 downsampling
/// convolution followed by residual blocks, then global average pooling
/// and a projection to the configured feature length.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub feature_dim: usize,
}

impl EncoderConfig {
    pub fn desk(in_channels: usize) -> Self {
        EncoderConfig { in_channels, widths: vec![8, 16, 32], blocks_per_stage: 1, feature_dim: 128 }
    }

    pub fn paper(in_channels: usize) -> Self {
        EncoderConfig {
            in_channels,
            widths: vec![256, 512, 1024, 2048],
            blocks_per_stage: 2,
            feature_dim: 2048,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels == 0 || self.feature_dim == 0 || self.blocks_per_stage == 0 {
            return Err(ModelError::BadConfig("encoder dimensions must be positive".into()));
        }
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(ModelError::BadConfig("encoder stage widths must be positive".into()));
        }
        Ok(())
    }
}

struct ResBlock {
    a: Conv,
    b: Conv,
}

pub(crate) struct Encoder {
    stages: Vec<(Conv, Vec<ResBlock>)>,
    proj: Linear,
}

impl Encoder {
    pub fn create(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &EncoderConfig,
    ) -> Self {
        let mut stages = Vec::new();
        let mut cin = cfg.in_channels;
        for (s, &width) in cfg.widths.iter().enumerate() {
            let down = Conv::create(store, rng, &format!("{prefix}.stage{s}.down"), cin, width, 3, 2);
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| ResBlock {
                    a: Conv::create(
                        store,
                        rng,
                        &format!("{prefix}.stage{s}.block{b}.a"),
                        width,
                        width,
                        3,
                        1,
                    ),
                    b: Conv::create(
                        store,
                        rng,
                        &format!("{prefix}.stage{s}.block{b}.b"),
                        width,
                        width,
                        3,
                        1,
                    ),
                })
                .collect();
            stages.push((down, blocks));
            cin = width;
        }
        let proj = Linear::create_kaiming(store, rng, &format!("{prefix}.proj"), cin, cfg.feature_dim);
        Encoder { stages, proj }
    }

    /// `x` of shape `[B, Cin, H, W]` to features `[B, D]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let mut x = x;
        for (down, blocks) in &self.stages {
            let d = down.forward(tape, bind, x)?;
            x = tape.relu(d)?;
            for block in blocks {
                let h = block.a.forward(tape, bind, x)?;
                let h = tape.relu(h)?;
                let h = block.b.forward(tape, bind, h)?;
                let sum = tape.add(x, h)?;
                x = tape.relu(sum)?;
            }
        }
        // global average pooling
        let shape = tape.shape(x).to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let flat = tape.reshape(x, vec![b * c, h * w])?;
        let pooled = tape.mean_axis(flat, 1)?;
        let gap = tape.reshape(pooled, vec![b, c])?;
        let feat = self.proj.forward(tape, bind, gap)?;
        tape.relu(feat)
    }
}
