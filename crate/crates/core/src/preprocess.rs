//! Surface detection, flattening, and crop/resize.
//!
//! The retina's upper boundary is located per column by thresholding a
//! vertical moving average; several detections at different thresholds are
//! fused by elementwise median; each column is then shifted so the fused
//! surface sits on row 0, normalizing depth alignment across a pair.

use serde::{Deserialize, Serialize};

use crate::dataio::{resize_bilinear, GrayImage};

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("threshold {0} outside (0,1)")]
    BadThreshold(f64),
    #[error("smoothing window must be odd and >= 1, got {0}")]
    BadWindow(usize),
    #[error("no column crosses the detection threshold")]
    NoSurface,
    #[error("profile length {got} does not match expected {want}")]
    ProfileLength { got: usize, want: usize },
    #[error("no profiles to fuse")]
    NoProfiles,
    #[error("keep_rows {keep} invalid for image height {height}")]
    KeepRows { keep: usize, height: usize },
    #[error("output dimensions must be positive")]
    ZeroOutput,
}

/// Per-column row index of the detected retina upper boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurfaceProfile(Vec<usize>);

impl SurfaceProfile {
    pub fn new(rows: Vec<usize>) -> Self {
        SurfaceProfile(rows)
    }

    pub fn rows(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&r| r == 0)
    }
}

/// Integer median with half-up rounding when the count is even.
fn median_half_up(values: &mut [usize]) -> usize {
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2] + 1) / 2
    }
}

/// Locate the first row per column whose vertical moving average exceeds
/// `threshold`; undetected columns inherit the nearest detected neighbor
/// (ties to the left); the profile is median-filtered with `smooth_window`.
pub fn detect_surface(
    img: &GrayImage,
    threshold: f64,
    smooth_window: usize,
) -> Result<SurfaceProfile, PreprocessError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(PreprocessError::BadThreshold(threshold));
    }
    if smooth_window == 0 || smooth_window % 2 == 0 {
        return Err(PreprocessError::BadWindow(smooth_window));
    }
    let (h, w) = (img.height(), img.width());
    let half = smooth_window / 2;
    let mut detected: Vec<Option<usize>> = vec![None; w];
    for (c, slot) in detected.iter_mut().enumerate() {
        for r in 0..h {
            let lo = r.saturating_sub(half);
            let hi = (r + half).min(h - 1);
            let mut sum = 0.0;
            for rr in lo..=hi {
                sum += img.get(rr, c);
            }
            if sum / (hi - lo + 1) as f64 > threshold {
                *slot = Some(r);
                break;
            }
        }
    }
    if detected.iter().all(|d| d.is_none()) {
        return Err(PreprocessError::NoSurface);
    }
    // fill gaps from the nearest detected column, ties to the left
    let filled: Vec<usize> = (0..w)
        .map(|c| {
            if let Some(r) = detected[c] {
                return r;
            }
            let mut best = None;
            let mut best_dist = usize::MAX;
            for (cc, d) in detected.iter().enumerate() {
                if let Some(r) = d {
                    let dist = cc.abs_diff(c);
                    if dist < best_dist {
                        best_dist = dist;
                        best = Some(*r);
                    }
                }
            }
            best.expect("at least one detection")
        })
        .collect();
    // horizontal median filter with shrinking windows at the edges
    let mut smoothed = Vec::with_capacity(w);
    for c in 0..w {
        let lo = c.saturating_sub(half);
        let hi = (c + half).min(w - 1);
        let mut window: Vec<usize> = filled[lo..=hi].to_vec();
        smoothed.push(median_half_up(&mut window));
    }
    Ok(SurfaceProfile(smoothed))
}

/// Elementwise median of several equal-length profiles (even counts: mean
/// of the two central values, rounded half-up).
pub fn fuse_surfaces(profiles: &[SurfaceProfile]) -> Result<SurfaceProfile, PreprocessError> {
    let first = profiles.first().ok_or(PreprocessError::NoProfiles)?;
    let w = first.len();
    for p in profiles {
        if p.len() != w {
            return Err(PreprocessError::ProfileLength { got: p.len(), want: w });
        }
    }
    let fused = (0..w)
        .map(|c| {
            let mut column: Vec<usize> = profiles.iter().map(|p| p.0[c]).collect();
            median_half_up(&mut column)
        })
        .collect();
    Ok(SurfaceProfile(fused))
}

/// Shift every column up by its surface row; vacated bottom rows are
/// zero-filled. Output keeps the input dimensions.
pub fn flatten(img: &GrayImage, surface: &SurfaceProfile) -> Result<GrayImage, PreprocessError> {
    let (h, w) = (img.height(), img.width());
    if surface.len() != w {
        return Err(PreprocessError::ProfileLength { got: surface.len(), want: w });
    }
    let mut out = GrayImage::zeros(h, w);
    for c in 0..w {
        let shift = surface.0[c];
        for r in 0..h {
            let src = r + shift;
            if src < h {
                out.set(r, c, img.get(src, c));
            }
        }
    }
    Ok(out)
}

/// Keep the top `keep_rows` rows, then bilinearly resize to
/// `out_h` x `out_w` (pixels clamped to `[0,1]`).
pub fn crop_and_resize(
    img: &GrayImage,
    keep_rows: usize,
    out_h: usize,
    out_w: usize,
) -> Result<GrayImage, PreprocessError> {
    if keep_rows == 0 || keep_rows > img.height() {
        return Err(PreprocessError::KeepRows { keep: keep_rows, height: img.height() });
    }
    if out_h == 0 || out_w == 0 {
        return Err(PreprocessError::ZeroOutput);
    }
    let cropped = if keep_rows == img.height() {
        img.clone()
    } else {
        let w = img.width();
        GrayImage::new(keep_rows, w, img.pixels()[..keep_rows * w].to_vec())
    };
    Ok(resize_bilinear(&cropped, out_h, out_w))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessParams {
    /// Detector thresholds; multiple estimates are median-fused.
    pub thresholds: Vec<f64>,
    pub smooth_window: usize,
    /// Rows kept below the flattened surface; `None` keeps 80% of height.
    pub keep_rows: Option<usize>,
    pub out_height: usize,
    pub out_width: usize,
    /// With flattening off, images are only cropped and resized.
    pub flatten: bool,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            thresholds: vec![0.25, 0.35, 0.45],
            smooth_window: 5,
            keep_rows: None,
            out_height: 32,
            out_width: 80,
            flatten: true,
        }
    }
}

impl PreprocessParams {
    pub fn effective_keep_rows(&self, height: usize) -> usize {
        self.keep_rows.unwrap_or(((height * 4) / 5).max(1))
    }
}

/// Full single-image pipeline: detect (at each threshold), fuse, flatten,
/// crop, resize.
pub fn preprocess_image(
    img: &GrayImage,
    params: &PreprocessParams,
) -> Result<GrayImage, PreprocessError> {
    let flattened = if params.flatten {
        let profiles: Vec<SurfaceProfile> = params
            .thresholds
            .iter()
            .map(|&t| detect_surface(img, t, params.smooth_window))
            .collect::<Result<_, _>>()?;
        let fused = fuse_surfaces(&profiles)?;
        flatten(img, &fused)?
    } else {
        img.clone()
    };
    let keep = params.effective_keep_rows(flattened.height());
    crop_and_resize(&flattened, keep, params.out_height, params.out_width)
}

/// Both images of a pair, independently; labels travel with the caller.
pub fn preprocess_pair(
    t0: &GrayImage,
    t1: &GrayImage,
    params: &PreprocessParams,
) -> Result<(GrayImage, GrayImage), PreprocessError> {
    Ok((preprocess_image(t0, params)?, preprocess_image(t1, params)?))
}
