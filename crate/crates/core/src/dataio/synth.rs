//! Synthetic longitudinal scan pairs with controllable progression.
//!
//! Each pair renders a bright tilted retina band over a dark background
//! with a dark elliptical fluid pocket inside the band. The pocket area
//! changes from t0 to t1 according to the pair's class:
//!
//! - 0 (reduced): pocket shrinks by the growth factor
//! - 1 (stable): pocket unchanged
//! - 2 (worsened): pocket grows by the growth factor
//! - 3 (other): t1 is corrupted with heavy speckle, no task-2 label
//!
//! Progression is predictable from the baseline scan alone: reduced-class
//! pockets start large and worsened-class pockets start small, so a model
//! conditioned on t0 has the information it needs to predict t1.
//!
//! Every pair is a deterministic function of (seed, pair index).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{save_image, GrayImage};
use super::manifest::{Manifest, PairRecord, Split};
use super::{derive_seed, DataError};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Retina band thickness in rows.
    pub band_thickness: usize,
    /// Maximum band rise/fall across the full image width, in rows.
    pub tilt_range: f64,
    /// Integer range for the band's top row at the left edge; t0 and t1
    /// draw independently (vertical misalignment between acquisitions).
    pub offset_range: (usize, usize),
    /// Base pocket radius (rows) before class multipliers and jitter.
    pub pocket_radius: f64,
    /// Pocket area scale between t0 and t1 for reduced/worsened pairs.
    pub growth_factor: f64,
    /// Additive uniform noise amplitude.
    pub noise: f64,
    /// Relative class frequencies for classes 0..=3.
    pub class_balance: [f64; 4],
    pub pairs_per_patient: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 160,
            band_thickness: 26,
            tilt_range: 5.0,
            offset_range: (6, 20),
            pocket_radius: 6.8,
            growth_factor: 2.2,
            noise: 0.02,
            class_balance: [0.25, 0.25, 0.25, 0.25],
            pairs_per_patient: 2,
            seed: 0,
        }
    }
}

// Baseline pocket-radius multiplier per class: reduced pockets start large,
// worsened pockets start small, so t0 carries the progression signal.
const CLASS_RADIUS_MULT: [f64; 4] = [1.5, 1.0, 0.66, 1.0];
const RADIUS_JITTER: f64 = 0.03;
const BAND_LEVEL: f64 = 0.85;
const ILM_LEVEL: f64 = 0.95;
const POCKET_LEVEL: f64 = 0.08;
const BACKGROUND_LEVEL: f64 = 0.04;

impl SynthConfig {
    /// Largest pocket row-radius this config can render.
    fn max_pocket_radius(&self) -> f64 {
        let max_mult = CLASS_RADIUS_MULT
            .iter()
            .cloned()
            .fold(0.0f64, f64::max)
            .max(CLASS_RADIUS_MULT[2] * self.growth_factor);
        self.pocket_radius * max_mult * (1.0 + RADIUS_JITTER)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.height == 0 || self.width == 0 || self.band_thickness == 0 {
            return Err(DataError::Geometry("zero image or band dimension".into()));
        }
        if self.growth_factor <= 1.0 {
            return Err(DataError::Geometry(format!(
                "growth factor must be > 1, got {}",
                self.growth_factor
            )));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(DataError::Geometry(format!("noise {} outside [0,1)", self.noise)));
        }
        if self.offset_range.0 > self.offset_range.1 {
            return Err(DataError::Geometry("offset range reversed".into()));
        }
        if self.pairs_per_patient == 0 {
            return Err(DataError::Geometry("pairs_per_patient must be >= 1".into()));
        }
        if self.class_balance.iter().any(|&b| b < 0.0) || self.class_balance.iter().sum::<f64>() <= 0.0
        {
            return Err(DataError::Geometry("class balance must be nonnegative, nonzero".into()));
        }
        let max_r = self.max_pocket_radius();
        if max_r > 0.45 * self.band_thickness as f64 {
            return Err(DataError::Geometry(format!(
                "pocket cannot fit inside band: max radius {:.1} vs band thickness {}",
                max_r, self.band_thickness
            )));
        }
        let lowest = self.offset_range.1 as f64 + self.tilt_range + self.band_thickness as f64;
        if lowest >= self.height as f64 {
            return Err(DataError::Geometry(format!(
                "band extends to row {:.0} but image height is {}",
                lowest, self.height
            )));
        }
        Ok(())
    }
}

/// Deterministic proportional interleave of class labels: running credits
/// per class, highest credit wins, ties to the lower class.
pub fn class_sequence(balance: &[f64; 4], n: usize) -> Vec<u8> {
    let total: f64 = balance.iter().sum();
    let mut credit = [0.0f64; 4];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        for c in 0..4 {
            credit[c] += balance[c] / total;
        }
        let mut best = 0;
        for c in 1..4 {
            if credit[c] > credit[best] + 1e-12 {
                best = c;
            }
        }
        credit[best] -= 1.0;
        out.push(best as u8);
    }
    out
}

struct PairGeometry {
    tilt_slope: f64,
    top_t0: usize,
    top_t1: usize,
    pocket_col: f64,
    aspect: f64,
    radius_t0: f64,
    radius_t1: f64,
}

fn draw_geometry(cfg: &SynthConfig, rng: &mut ChaCha8Rng, class: u8) -> PairGeometry {
    let tilt = rng.gen_range(-cfg.tilt_range..=cfg.tilt_range);
    let top_t0 = rng.gen_range(cfg.offset_range.0..=cfg.offset_range.1);
    let top_t1 = rng.gen_range(cfg.offset_range.0..=cfg.offset_range.1);
    let pocket_col = rng.gen_range(0.45..0.55) * cfg.width as f64;
    let aspect = rng.gen_range(3.0..3.2);
    let jitter = rng.gen_range(1.0 - RADIUS_JITTER..1.0 + RADIUS_JITTER);
    let r0 = cfg.pocket_radius * CLASS_RADIUS_MULT[class as usize] * jitter;
    let r1 = match class {
        0 => r0 / cfg.growth_factor,
        2 => r0 * cfg.growth_factor,
        _ => r0,
    };
    PairGeometry {
        tilt_slope: tilt / (cfg.width.max(2) - 1) as f64,
        top_t0,
        top_t1,
        pocket_col,
        aspect,
        radius_t0: r0,
        radius_t1: r1,
    }
}

fn render_scan(
    cfg: &SynthConfig,
    geo: &PairGeometry,
    top: usize,
    radius: f64,
    rng: &mut ChaCha8Rng,
) -> GrayImage {
    let (h, w) = (cfg.height, cfg.width);
    let thickness = cfg.band_thickness;
    // pocket center anchored to the band so flattening aligns pairs
    let anchor_top = (top as f64 + geo.tilt_slope * geo.pocket_col).round();
    let center_row = anchor_top + 0.55 * thickness as f64;
    let mut img = GrayImage::zeros(h, w);
    for c in 0..w {
        let band_top = (top as f64 + geo.tilt_slope * c as f64).round() as i64;
        for r in 0..h {
            let ri = r as i64;
            let mut v = if ri >= band_top && ri < band_top + thickness as i64 {
                if ri < band_top + 2 {
                    ILM_LEVEL
                } else {
                    BAND_LEVEL
                }
            } else {
                BACKGROUND_LEVEL
            };
            let dr = (r as f64 - center_row) / radius;
            let dc = (c as f64 - geo.pocket_col) / (radius * geo.aspect);
            if dr * dr + dc * dc <= 1.0 {
                v = POCKET_LEVEL;
            }
            let noise = rng.gen_range(-cfg.noise..=cfg.noise);
            img.set(r, c, v + noise);
        }
    }
    img
}

fn corrupt(img: &mut GrayImage, rng: &mut ChaCha8Rng) {
    for p in img.pixels_mut() {
        let mult: f64 = rng.gen_range(0.1..1.9);
        let salt: f64 = rng.gen();
        let v = if salt < 0.08 {
            1.0
        } else if salt < 0.16 {
            0.0
        } else {
            *p * mult
        };
        *p = v.clamp(0.0, 1.0);
    }
}

/// Render `n_pairs` labeled pairs under `out_dir` (images in
/// `out_dir/images/`) and return the manifest describing them.
pub fn generate_synthetic(
    cfg: &SynthConfig,
    n_pairs: usize,
    out_dir: &Path,
) -> Result<Manifest, DataError> {
    cfg.validate()?;
    if n_pairs == 0 {
        return Err(DataError::Geometry("n_pairs must be > 0".into()));
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| DataError::Io { path: images_dir.clone(), source: e })?;
    let labels = class_sequence(&cfg.class_balance, n_pairs);
    let mut records = Vec::with_capacity(n_pairs);
    for (i, &class) in labels.iter().enumerate() {
        let (t0, t1) = render_pair(cfg, i, class);
        let rel_t0 = format!("images/case{i:05}_t0.pgm");
        let rel_t1 = format!("images/case{i:05}_t1.pgm");
        save_image(&t0, &out_dir.join(&rel_t0))?;
        save_image(&t1, &out_dir.join(&rel_t1))?;
        records.push(PairRecord {
            case_id: format!("case{i:05}"),
            patient_id: format!("patient{:05}", i / cfg.pairs_per_patient),
            image_t0_path: rel_t0,
            image_t1_path: rel_t1,
            label_task1: Some(class),
            label_task2: if class == 3 { None } else { Some(class) },
            split: Split::Train,
            fold: None,
        });
    }
    Ok(Manifest { records, source_dir: out_dir.to_path_buf() })
}

/// Render a single pair without touching the filesystem.
pub fn render_pair(cfg: &SynthConfig, index: usize, class: u8) -> (GrayImage, GrayImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[index as u64]));
    let geo = draw_geometry(cfg, &mut rng, class);
    let t0 = render_scan(cfg, &geo, geo.top_t0, geo.radius_t0, &mut rng);
    let mut t1 = render_scan(cfg, &geo, geo.top_t1, geo.radius_t1, &mut rng);
    if class == 3 {
        corrupt(&mut t1, &mut rng);
    }
    (t0, t1)
}

/// Count of dark pixels inside the band: the observable the class labels
/// are defined over. A row counts as band when the majority of its pixels
/// are bright; dark pixels within such rows belong to the pocket.
pub fn pocket_area(img: &GrayImage) -> usize {
    let w = img.width();
    let mut count = 0;
    for r in 0..img.height() {
        let row = &img.pixels()[r * w..(r + 1) * w];
        let bright = row.iter().filter(|&&p| p > 0.5).count();
        if bright * 2 > w {
            count += row.iter().filter(|&&p| p < 0.2).count();
        }
    }
    count
}
