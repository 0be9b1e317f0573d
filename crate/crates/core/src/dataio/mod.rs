//! Dataset manifests, grayscale image I/O, and the synthetic
//! longitudinal-scan generator.

mod image;
mod manifest;
mod synth;

pub use image::{load_image, resize_bilinear, save_image, GrayImage};
pub use manifest::{
    load_manifest, save_manifest, split_folds, Manifest, PairRecord, Split,
};
pub use synth::{class_sequence, generate_synthetic, pocket_area, render_pair, SynthConfig};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    BadImage { path: PathBuf, msg: String },
    #[error("{path} row {row}: {msg}")]
    BadRow { path: PathBuf, row: usize, msg: String },
    #[error("{path}: duplicate case_id `{case_id}` (rows {first} and {second})")]
    DuplicateCase { path: PathBuf, case_id: String, first: usize, second: usize },
    #[error("{path}: {msg}")]
    BadManifest { path: PathBuf, msg: String },
    #[error("referenced file missing: {path}")]
    MissingFile { path: PathBuf },
    #[error("synthetic geometry: {0}")]
    Geometry(String),
    #[error("fold split: {0}")]
    FoldSplit(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Deterministic stream derivation: mixes a base seed with context tags
/// (epoch, sample index, ...) so independent draws never share a stream.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        state = state.wrapping_add(t).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        state ^= state >> 27;
        state = state.wrapping_mul(0x94d0_49bb_1331_11eb);
        state ^= state >> 31;
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_stable_and_tag_sensitive() {
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[2]));
    }
}
