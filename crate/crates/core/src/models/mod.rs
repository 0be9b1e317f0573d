//! Model architectures: the shared residual CNN encoder, the early- and
//! late-fusion pair classifiers, and the patch-progression masked
//! autoencoder, plus checkpoint serialization.

mod checkpoint;
mod encoder;
mod fusion;
mod layers;
mod posenc;
mod ppmae;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelKind};
pub use encoder::EncoderConfig;
pub use fusion::{FusionConfig, FusionKind, FusionModel};
pub use posenc::sincos_2d;
pub use ppmae::{PpmaeConfig, PpmaeModel};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{NodeId, NumericsError, Tape, Tensor};
use crate::patchwork::PatchError;
use crate::preprocess::PreprocessError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {path}: {source}")]
    CheckpointIo { path: std::path::PathBuf, source: std::io::Error },
    #[error("parameter `{name}`: expected shape {expected:?}, got {got:?}")]
    ParamMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("checkpoint holds a {got:?} model, expected {want:?}")]
    WrongKind { want: ModelKind, got: ModelKind },
    #[error("input image is {got_h}x{got_w}, model expects {want_h}x{want_w}")]
    InputSize { got_h: usize, got_w: usize, want_h: usize, want_w: usize },
}

pub type ParamId = usize;

/// Named, ordered parameter tensors of one model.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.tensors.clone()
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) {
        assert_eq!(tensors.len(), self.tensors.len());
        for (slot, t) in self.tensors.iter_mut().zip(tensors) {
            debug_assert_eq!(slot.shape(), t.shape());
            *slot = t;
        }
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Insert every parameter into `tape` in store order.
    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> Binding {
        let node_ids = self.tensors.iter().map(|t| tape.leaf(t, tracked)).collect();
        Binding { node_ids }
    }

    /// Overwrite values from named tensors, validating names and shapes in
    /// store order; reports the first mismatch.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<(), ModelError> {
        if named.len() != self.tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, got {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for ((name, slot), (got_name, got)) in
            self.names.iter().zip(self.tensors.iter_mut()).zip(named)
        {
            if name != got_name {
                return Err(ModelError::Checkpoint(format!(
                    "expected parameter `{name}`, found `{got_name}`"
                )));
            }
            if slot.shape() != got.shape() {
                return Err(ModelError::ParamMismatch {
                    name: name.clone(),
                    expected: slot.shape().to_vec(),
                    got: got.shape().to_vec(),
                });
            }
            *slot = got.clone();
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape node ids of one [`ParamStore::bind`] call, in store order.
pub struct Binding {
    node_ids: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.node_ids[id]
    }

    pub fn node_ids(&self) -> &[NodeId] {
        &self.node_ids
    }

    /// Collect gradients per parameter after a backward pass.
    pub fn gradients(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.node_ids
            .iter()
            .map(|&id| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(id).len()])
            })
            .collect()
    }
}

// ── weight initialization ───────────────────────────────────────────

/// Truncated normal (resample beyond two sigma).
pub(crate) fn trunc_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, sigma: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            data.push(z * sigma);
        }
    }
    Tensor::new(shape, data).expect("shape/data agree")
}

/// Kaiming fan-in scaling for conv/linear weights feeding relu.
pub(crate) fn kaiming(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let sigma = (2.0 / fan_in as f64).sqrt();
    trunc_normal(rng, shape, sigma)
}
