use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{derive_seed, resize_bilinear, GrayImage};
use crate::numerics::{NodeId, Tape, Tensor};
use crate::patchwork::{patchify, sample_mask, unpatchify, MaskPlan, PatchGrid};

use super::checkpoint::{Checkpoint, ModelKind};
use super::layers::{Block, Linear, Norm};
use super::posenc::sincos_2d;
use super::{Binding, ModelError, ParamId, ParamStore};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PpmaeConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mask_ratio: f64,
    pub mlp_ratio: usize,
    /// Mask samples drawn per reconstruction; predictions at indices
    /// masked in several samples are averaged.
    pub recon_samples: usize,
}

impl PpmaeConfig {
    pub fn desk() -> Self {
        PpmaeConfig {
            image_height: 64,
            image_width: 64,
            patch: 8,
            enc_dim: 32,
            enc_depth: 2,
            enc_heads: 4,
            dec_dim: 32,
            dec_depth: 1,
            dec_heads: 4,
            mask_ratio: 0.75,
            mlp_ratio: 2,
            recon_samples: 1,
        }
    }

    /// Published-scale shape: 224x224 inputs, ViT-Large-class encoder,
    /// patch 16. Runnable, not trainable at desk pace.
    pub fn paper() -> Self {
        PpmaeConfig {
            image_height: 224,
            image_width: 224,
            patch: 16,
            enc_dim: 1024,
            enc_depth: 24,
            enc_heads: 16,
            dec_dim: 512,
            dec_depth: 8,
            dec_heads: 16,
            mask_ratio: 0.75,
            mlp_ratio: 4,
            recon_samples: 1,
        }
    }

    pub fn grid_rows(&self) -> usize {
        self.image_height / self.patch
    }

    pub fn grid_cols(&self) -> usize {
        self.image_width / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.patch == 0
            || self.image_height % self.patch != 0
            || self.image_width % self.patch != 0
        {
            return Err(ModelError::BadConfig(format!(
                "patch {} must divide image {}x{}",
                self.patch, self.image_height, self.image_width
            )));
        }
        for (dim, heads, what) in
            [(self.enc_dim, self.enc_heads, "encoder"), (self.dec_dim, self.dec_heads, "decoder")]
        {
            if heads == 0 || dim % heads != 0 {
                return Err(ModelError::BadConfig(format!(
                    "{what} dim {dim} not divisible by {heads} heads"
                )));
            }
            if dim % 4 != 0 {
                return Err(ModelError::BadConfig(format!(
                    "{what} dim {dim} not divisible by 4 (positional embedding)"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(ModelError::BadConfig(format!(
                "mask ratio {} outside [0,1)",
                self.mask_ratio
            )));
        }
        if self.enc_depth == 0 || self.dec_depth == 0 || self.mlp_ratio == 0 {
            return Err(ModelError::BadConfig("depths and mlp ratio must be positive".into()));
        }
        if self.recon_samples == 0 {
            return Err(ModelError::BadConfig("recon_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Masked autoencoder that predicts the follow-up scan: visible baseline
/// patches go through the encoder; the decoder fills masked positions
/// with a learned token and projects them to pixel predictions of the
/// *follow-up* image at those positions.
pub struct PpmaeModel {
    pub config: PpmaeConfig,
    pub seed: u64,
    pub params: ParamStore,
    embed: Linear,
    enc_blocks: Vec<Block>,
    enc_norm: Norm,
    dec_embed: Linear,
    mask_token: ParamId,
    dec_blocks: Vec<Block>,
    dec_norm: Norm,
    head: Linear,
    enc_pos: Vec<f64>,
    dec_pos: Vec<f64>,
}

impl PpmaeModel {
    pub fn new(config: PpmaeConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p2 = config.patch * config.patch;
        let embed = Linear::create_tn(&mut store, &mut rng, "embed", p2, config.enc_dim);
        let enc_blocks = (0..config.enc_depth)
            .map(|i| {
                Block::create(
                    &mut store,
                    &mut rng,
                    &format!("enc{i}"),
                    config.enc_dim,
                    config.enc_heads,
                    config.mlp_ratio,
                )
            })
            .collect();
        let enc_norm = Norm::create(&mut store, "enc.norm", config.enc_dim);
        let dec_embed =
            Linear::create_tn(&mut store, &mut rng, "dec.embed", config.enc_dim, config.dec_dim);
        let mask_token = store.add(
            "mask_token",
            super::trunc_normal(&mut rng, vec![config.dec_dim], 0.02),
        );
        let dec_blocks = (0..config.dec_depth)
            .map(|i| {
                Block::create(
                    &mut store,
                    &mut rng,
                    &format!("dec{i}"),
                    config.dec_dim,
                    config.dec_heads,
                    config.mlp_ratio,
                )
            })
            .collect();
        let dec_norm = Norm::create(&mut store, "dec.norm", config.dec_dim);
        let head = Linear::create_tn(&mut store, &mut rng, "dec.head", config.dec_dim, p2);
        let enc_pos = sincos_2d(config.enc_dim, config.grid_rows(), config.grid_cols());
        let dec_pos = sincos_2d(config.dec_dim, config.grid_rows(), config.grid_cols());
        Ok(PpmaeModel {
            config,
            seed,
            params: store,
            embed,
            enc_blocks,
            enc_norm,
            dec_embed,
            mask_token,
            dec_blocks,
            dec_norm,
            head,
            enc_pos,
            dec_pos,
        })
    }

    fn pos_rows(&self, table: &[f64], dim: usize, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(&table[i * dim..(i + 1) * dim]);
        }
        Tensor::new(vec![indices.len(), dim], data).expect("shape/data agree")
    }

    /// Insert a baseline image's patch matrix `[N, p^2]` as a tape leaf.
    pub fn patches_node(
        &self,
        tape: &mut Tape,
        img: &GrayImage,
        tracked: bool,
    ) -> Result<(NodeId, PatchGrid), ModelError> {
        if img.height() != self.config.image_height || img.width() != self.config.image_width {
            return Err(ModelError::InputSize {
                got_h: img.height(),
                got_w: img.width(),
                want_h: self.config.image_height,
                want_w: self.config.image_width,
            });
        }
        let grid = patchify(img, self.config.patch)?;
        let t = Tensor::new(
            vec![grid.n_patches(), grid.patch_len()],
            grid.data().to_vec(),
        )
        .expect("shape/data agree");
        Ok((tape.leaf(&t, tracked), grid))
    }

    /// Predicted follow-up patches at `plan.masked` (sorted order), shape
    /// `[M, p^2]`. `None` when the plan masks nothing.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        patches: NodeId,
        plan: &MaskPlan,
    ) -> Result<Option<NodeId>, ModelError> {
        let n = self.config.n_patches();
        if plan.n != n {
            return Err(ModelError::Patch(crate::patchwork::PatchError::PlanMismatch {
                plan: plan.n,
                grid: n,
            }));
        }
        if plan.masked.is_empty() {
            return Ok(None);
        }
        if plan.visible.is_empty() {
            return Err(ModelError::BadConfig("mask plan leaves no visible patches".into()));
        }
        let e = self.config.enc_dim;
        let d = self.config.dec_dim;

        // encoder over visible tokens
        let vis = tape.gather_rows(patches, &plan.visible)?;
        let tok = self.embed.forward(tape, bind, vis)?;
        let pos_vis = self.pos_rows(&self.enc_pos, e, &plan.visible);
        let pv = tape.constant(&pos_vis);
        let mut x = tape.add(tok, pv)?;
        for block in &self.enc_blocks {
            x = block.forward(tape, bind, x)?;
        }
        x = self.enc_norm.forward(tape, bind, x)?;

        // decoder: visible tokens projected, mask tokens at masked slots
        let proj = self.dec_embed.forward(tape, bind, x)?;
        let mask_tok = tape.reshape(bind.node(self.mask_token), vec![1, d])?;
        let mask_rows = tape.broadcast(mask_tok, vec![plan.masked.len(), d])?;
        let stacked = tape.concat(&[proj, mask_rows], 0)?;
        // reorder rows from (visible ++ masked) to canonical patch order
        let mut position = vec![0usize; n];
        for (j, &v) in plan.visible.iter().enumerate() {
            position[v] = j;
        }
        for (j, &m) in plan.masked.iter().enumerate() {
            position[m] = plan.visible.len() + j;
        }
        let seq = tape.gather_rows(stacked, &position)?;
        let all_pos = self.pos_rows(&self.dec_pos, d, &(0..n).collect::<Vec<_>>());
        let ap = tape.constant(&all_pos);
        let mut y = tape.add(seq, ap)?;
        for block in &self.dec_blocks {
            y = block.forward(tape, bind, y)?;
        }
        y = self.dec_norm.forward(tape, bind, y)?;
        let out = self.head.forward(tape, bind, y)?;
        Ok(Some(tape.gather_rows(out, &plan.masked)?))
    }

    /// MSE between predictions and the follow-up image's patches at the
    /// masked positions (the cross-temporal target).
    pub fn loss(
        &self,
        tape: &mut Tape,
        predicted: NodeId,
        t1_grid: &PatchGrid,
        plan: &MaskPlan,
    ) -> Result<NodeId, ModelError> {
        let targets = crate::patchwork::gather_patches(t1_grid, plan.masked.as_slice())?;
        let t = Tensor::new(vec![plan.masked.len(), t1_grid.patch_len()], targets)
            .expect("shape/data agree");
        let tgt = tape.constant(&t);
        Ok(tape.mse_loss(predicted, tgt)?)
    }

    /// Predict the masked patches for one plan without tracking gradients.
    pub fn predict_masked(
        &self,
        t0: &GrayImage,
        plan: &MaskPlan,
    ) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::unchecked();
        let bind = self.params.bind(&mut tape, false);
        let (patches, _) = self.patches_node(&mut tape, t0, false)?;
        match self.forward(&mut tape, &bind, patches, plan)? {
            Some(pred) => Ok(tape.value(pred).to_vec()),
            None => Ok(Vec::new()),
        }
    }

    /// Composite future image: sample `recon_samples` plans from `seed`,
    /// predict masked patches, average overlapping predictions, keep
    /// baseline patches where never masked, then resize to the requested
    /// output size.
    pub fn reconstruct_future(
        &self,
        t0: &GrayImage,
        seed: u64,
        out_h: usize,
        out_w: usize,
    ) -> Result<GrayImage, ModelError> {
        let sized = resize_bilinear(t0, self.config.image_height, self.config.image_width);
        let grid = patchify(&sized, self.config.patch)?;
        let n = grid.n_patches();
        let l = grid.patch_len();
        let mut sums = vec![0.0; n * l];
        let mut counts = vec![0u32; n];
        for s in 0..self.config.recon_samples {
            let plan = sample_mask(n, self.config.mask_ratio, derive_seed(seed, &[s as u64]))?;
            let preds = self.predict_masked(&sized, &plan)?;
            for (row, &idx) in plan.masked.iter().enumerate() {
                counts[idx] += 1;
                for j in 0..l {
                    sums[idx * l + j] += preds[row * l + j];
                }
            }
        }
        let mut data = Vec::with_capacity(n * l);
        for idx in 0..n {
            if counts[idx] == 0 {
                data.extend_from_slice(grid.patch(idx));
            } else {
                let c = counts[idx] as f64;
                data.extend((0..l).map(|j| (sums[idx * l + j] / c).clamp(0.0, 1.0)));
            }
        }
        let composite_grid = crate::patchwork::PatchGrid::from_parts(
            self.config.patch,
            self.config.grid_rows(),
            self.config.grid_cols(),
            data,
        );
        let composite = unpatchify(&composite_grid);
        Ok(resize_bilinear(&composite, out_h, out_w))
    }

    pub fn to_checkpoint(&self, epoch: u64) -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Ppmae,
            seed: self.seed,
            epoch,
            config: serde_json::to_value(&self.config).expect("config serializes"),
            params: self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        if ckpt.kind != ModelKind::Ppmae {
            return Err(ModelError::WrongKind { want: ModelKind::Ppmae, got: ckpt.kind });
        }
        let config: PpmaeConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
        let mut model = PpmaeModel::new(config, ckpt.seed)?;
        model.params.load_named(&ckpt.params)?;
        Ok(model)
    }
}
