//! Patch-grid algebra: patchify/unpatchify, mask sampling, and composite
//! assembly of a predicted follow-up image from visible baseline patches
//! plus predicted patches at masked positions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::GrayImage;

#[derive(Debug, thiserror::Error)]
pub enum PatchError {
    #[error("patch size {p} does not divide image dimensions {h}x{w}")]
    NonDivisible { h: usize, w: usize, p: usize },
    #[error("mask ratio {0} outside [0,1)")]
    BadRatio(f64),
    #[error("plan covers {plan} patches but grid has {grid}")]
    PlanMismatch { plan: usize, grid: usize },
    #[error("expected {want} predicted patches of length {len}, got {got} of length {got_len}")]
    PredictionShape { want: usize, got: usize, len: usize, got_len: usize },
    #[error("patch index {index} out of range for {total} patches")]
    IndexOutOfRange { index: usize, total: usize },
}

/// An image cut into non-overlapping `p` x `p` patches, row-major patch
/// order, row-major pixels within a patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    patch: usize,
    rows: usize,
    cols: usize,
    /// `n_patches() * patch_len()` values.
    data: Vec<f64>,
}

impl PatchGrid {
    /// Assemble a grid directly from patch-major data.
    pub fn from_parts(patch: usize, rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols * patch * patch, data.len());
        PatchGrid { patch, rows, cols, data }
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn grid_rows(&self) -> usize {
        self.rows
    }

    pub fn grid_cols(&self) -> usize {
        self.cols
    }

    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch
    }

    pub fn patch(&self, index: usize) -> &[f64] {
        let l = self.patch_len();
        &self.data[index * l..(index + 1) * l]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// A sampled partition of `{0..n-1}` into visible and masked index sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub n: usize,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub ratio_millis: u32,
    pub seed: u64,
}

impl MaskPlan {
    pub fn ratio(&self) -> f64 {
        self.ratio_millis as f64 / 1000.0
    }
}

/// Cut `img` into `p` x `p` patches.
pub fn patchify(img: &GrayImage, p: usize) -> Result<PatchGrid, PatchError> {
    let (h, w) = (img.height(), img.width());
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(PatchError::NonDivisible { h, w, p });
    }
    let (rows, cols) = (h / p, w / p);
    let mut data = Vec::with_capacity(h * w);
    for gr in 0..rows {
        for gc in 0..cols {
            for dr in 0..p {
                for dc in 0..p {
                    data.push(img.get(gr * p + dr, gc * p + dc));
                }
            }
        }
    }
    Ok(PatchGrid { patch: p, rows, cols, data })
}

/// Inverse of [`patchify`].
pub fn unpatchify(grid: &PatchGrid) -> GrayImage {
    let p = grid.patch;
    let (h, w) = (grid.rows * p, grid.cols * p);
    let mut img = GrayImage::zeros(h, w);
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let patch = grid.patch(gr * grid.cols + gc);
            for dr in 0..p {
                for dc in 0..p {
                    img.set(gr * p + dr, gc * p + dc, patch[dr * p + dc]);
                }
            }
        }
    }
    img
}

/// Uniformly random visible/masked split via a seeded shuffle.
/// Visible count is `floor(n * (1 - ratio))`.
pub fn sample_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan, PatchError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(PatchError::BadRatio(ratio));
    }
    if n == 0 {
        return Err(PatchError::PlanMismatch { plan: 0, grid: 0 });
    }
    let keep = ((n as f64) * (1.0 - ratio)).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut visible: Vec<usize> = order[..keep].to_vec();
    let mut masked: Vec<usize> = order[keep..].to_vec();
    visible.sort_unstable();
    masked.sort_unstable();
    Ok(MaskPlan { n, visible, masked, ratio_millis: (ratio * 1000.0).round() as u32, seed })
}

/// Rows of `grid` at `indices`, concatenated in the order given.
pub fn gather_patches(grid: &PatchGrid, indices: &[usize]) -> Result<Vec<f64>, PatchError> {
    let total = grid.n_patches();
    if let Some(&bad) = indices.iter().find(|&&i| i >= total) {
        return Err(PatchError::IndexOutOfRange { index: bad, total });
    }
    let l = grid.patch_len();
    let mut out = Vec::with_capacity(indices.len() * l);
    for &i in indices {
        out.extend_from_slice(grid.patch(i));
    }
    Ok(out)
}

/// Assemble the composite future image: baseline patches at visible
/// indices, predictions (clamped to `[0,1]`) at masked indices.
pub fn composite(
    t0_grid: &PatchGrid,
    predicted: &[f64],
    plan: &MaskPlan,
) -> Result<GrayImage, PatchError> {
    if plan.n != t0_grid.n_patches() {
        return Err(PatchError::PlanMismatch { plan: plan.n, grid: t0_grid.n_patches() });
    }
    let l = t0_grid.patch_len();
    if predicted.len() != plan.masked.len() * l {
        return Err(PatchError::PredictionShape {
            want: plan.masked.len(),
            got: predicted.len() / l.max(1),
            len: l,
            got_len: predicted.len() % l.max(1),
        });
    }
    let mut out = t0_grid.clone();
    for (row, &idx) in plan.masked.iter().enumerate() {
        let dst = &mut out.data[idx * l..(idx + 1) * l];
        for (d, &v) in dst.iter_mut().zip(&predicted[row * l..(row + 1) * l]) {
            *d = v.clamp(0.0, 1.0);
        }
    }
    Ok(unpatchify(&out))
}
