//! Registration-preserving pair augmentation: one geometric draw applied
//! identically to both scans, photometric jitter and blur drawn once and
//! applied to both.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{resize_bilinear, GrayImage};

use super::TrainError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Rotation drawn uniformly from `[-rotate_deg, rotate_deg]`.
    pub rotate_deg: f64,
    /// Additive brightness jitter amplitude.
    pub brightness: f64,
    /// Multiplicative contrast jitter amplitude around 1.
    pub contrast: f64,
    /// Gaussian blur sigma range; `(0, 0)` disables blur.
    pub blur_sigma: (f64, f64),
    /// Area-scale range for random resized crop; `None` disables it.
    pub resized_crop: Option<(f64, f64)>,
    /// Reserved. Perspective warps are rejected at this scale.
    pub perspective: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotate_deg: 0.0,
            brightness: 0.05,
            contrast: 0.05,
            blur_sigma: (0.0, 0.0),
            resized_crop: None,
            perspective: false,
        }
    }
}

impl AugmentSpec {
    /// The autoencoder's augmentation subset: random resized crop and
    /// horizontal flip only.
    pub fn ppmae_view(&self) -> Self {
        AugmentSpec {
            hflip_prob: self.hflip_prob,
            resized_crop: self.resized_crop,
            ..AugmentSpec::identity()
        }
    }

    /// Identity augmentation (all probabilities zero, empty ranges).
    pub fn identity() -> Self {
        AugmentSpec {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotate_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            blur_sigma: (0.0, 0.0),
            resized_crop: None,
            perspective: false,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        for (p, name) in [(self.hflip_prob, "hflip_prob"), (self.vflip_prob, "vflip_prob")] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TrainError::BadConfig(format!("{name} {p} outside [0,1]")));
            }
        }
        if self.rotate_deg < 0.0 || self.brightness < 0.0 || self.contrast < 0.0 {
            return Err(TrainError::BadConfig("negative augmentation range".into()));
        }
        if self.blur_sigma.0 > self.blur_sigma.1 || self.blur_sigma.0 < 0.0 {
            return Err(TrainError::BadConfig(format!(
                "blur sigma range {:?} ill-ordered",
                self.blur_sigma
            )));
        }
        if let Some((lo, hi)) = self.resized_crop {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(TrainError::BadConfig(format!(
                    "resized-crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
                )));
            }
        }
        if self.perspective {
            return Err(TrainError::BadConfig(
                "perspective warps are not supported at this scale".into(),
            ));
        }
        Ok(())
    }
}

pub fn flip_horizontal(img: &GrayImage) -> GrayImage {
    let (h, w) = (img.height(), img.width());
    let mut out = GrayImage::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            out.set(r, c, img.get(r, w - 1 - c));
        }
    }
    out
}

pub fn flip_vertical(img: &GrayImage) -> GrayImage {
    let (h, w) = (img.height(), img.width());
    let mut out = GrayImage::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            out.set(r, c, img.get(h - 1 - r, c));
        }
    }
    out
}

/// Rotate about the image center by `deg` (bilinear inverse mapping,
/// zero fill outside). Zero degrees is an exact identity.
pub fn rotate(img: &GrayImage, deg: f64) -> GrayImage {
    if deg == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let theta = deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let mut out = GrayImage::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let sy = cy + dy * cos - dx * sin;
            let sx = cx + dy * sin + dx * cos;
            if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
                continue;
            }
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let v = img.get(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + img.get(y0, x1) * (1.0 - fy) * fx
                + img.get(y1, x0) * fy * (1.0 - fx)
                + img.get(y1, x1) * fy * fx;
            out.set(r, c, v);
        }
    }
    out
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (h, w) = (img.height(), img.width());
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let cc = (c as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += k * img.get(r, cc);
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = GrayImage::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let rr = (r as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[rr * w + c];
            }
            out.set(r, c, acc);
        }
    }
    out
}

fn crop_resize(img: &GrayImage, top: usize, left: usize, ch: usize, cw: usize) -> GrayImage {
    let mut cropped = GrayImage::zeros(ch, cw);
    for r in 0..ch {
        for c in 0..cw {
            cropped.set(r, c, img.get(top + r, left + c));
        }
    }
    resize_bilinear(&cropped, img.height(), img.width())
}

fn photometric(img: &GrayImage, brightness: f64, contrast: f64) -> GrayImage {
    if brightness == 0.0 && contrast == 1.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for p in out.pixels_mut() {
        *p = ((*p - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
    }
    out
}

/// One augmentation draw applied identically to both scans of a pair.
pub fn augment_pair(
    t0: &GrayImage,
    t1: &GrayImage,
    spec: &AugmentSpec,
    rng: &mut ChaCha8Rng,
) -> (GrayImage, GrayImage) {
    debug_assert_eq!((t0.height(), t0.width()), (t1.height(), t1.width()));
    let mut a = t0.clone();
    let mut b = t1.clone();

    if let Some((lo, hi)) = spec.resized_crop {
        let scale = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        if scale < 1.0 {
            let f = scale.sqrt();
            let ch = ((a.height() as f64 * f).round() as usize).clamp(1, a.height());
            let cw = ((a.width() as f64 * f).round() as usize).clamp(1, a.width());
            let top = if ch < a.height() { rng.gen_range(0..=a.height() - ch) } else { 0 };
            let left = if cw < a.width() { rng.gen_range(0..=a.width() - cw) } else { 0 };
            a = crop_resize(&a, top, left, ch, cw);
            b = crop_resize(&b, top, left, ch, cw);
        }
    }
    if spec.hflip_prob > 0.0 && rng.gen_bool(spec.hflip_prob) {
        a = flip_horizontal(&a);
        b = flip_horizontal(&b);
    }
    if spec.vflip_prob > 0.0 && rng.gen_bool(spec.vflip_prob) {
        a = flip_vertical(&a);
        b = flip_vertical(&b);
    }
    if spec.rotate_deg > 0.0 {
        let deg = rng.gen_range(-spec.rotate_deg..=spec.rotate_deg);
        a = rotate(&a, deg);
        b = rotate(&b, deg);
    }
    let brightness = if spec.brightness > 0.0 {
        rng.gen_range(-spec.brightness..=spec.brightness)
    } else {
        0.0
    };
    let contrast = if spec.contrast > 0.0 {
        1.0 + rng.gen_range(-spec.contrast..=spec.contrast)
    } else {
        1.0
    };
    a = photometric(&a, brightness, contrast);
    b = photometric(&b, brightness, contrast);
    let (blur_lo, blur_hi) = spec.blur_sigma;
    if blur_hi > 0.0 {
        let sigma = if blur_lo < blur_hi { rng.gen_range(blur_lo..=blur_hi) } else { blur_hi };
        a = gaussian_blur(&a, sigma);
        b = gaussian_blur(&b, sigma);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ramp(h: usize, w: usize) -> GrayImage {
        GrayImage::new(h, w, (0..h * w).map(|i| (i % 151) as f64 / 151.0).collect())
    }

    #[test]
    fn identity_spec_is_identity() {
        let (t0, t1) = (ramp(10, 12), ramp(10, 12));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = augment_pair(&t0, &t1, &AugmentSpec::identity(), &mut rng);
        assert_eq!(a, t0);
        assert_eq!(b, t1);
    }

    #[test]
    fn horizontal_flip_is_an_involution() {
        let img = ramp(6, 9);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert_eq!(flip_vertical(&flip_vertical(&img)), img);
        assert_ne!(flip_horizontal(&img), img);
    }

    #[test]
    fn forced_flip_applies_to_both_images() {
        let (t0, t1) = (ramp(8, 8), flip_vertical(&ramp(8, 8)));
        let spec = AugmentSpec { hflip_prob: 1.0, ..AugmentSpec::identity() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = augment_pair(&t0, &t1, &spec, &mut rng);
        assert_eq!(a, flip_horizontal(&t0));
        assert_eq!(b, flip_horizontal(&t1));
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = ramp(7, 7);
        assert_eq!(rotate(&img, 0.0), img);
    }

    #[test]
    fn rotation_preserves_center_pixel() {
        let mut img = GrayImage::zeros(9, 9);
        img.set(4, 4, 1.0);
        let r = rotate(&img, 30.0);
        assert!((r.get(4, 4) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn registration_is_preserved_for_identical_inputs() {
        // geometric + photometric draws apply identically: (x, x) -> (y, y)
        let x = ramp(12, 16);
        let spec = AugmentSpec {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotate_deg: 10.0,
            brightness: 0.1,
            contrast: 0.1,
            blur_sigma: (0.2, 0.8),
            resized_crop: Some((0.5, 1.0)),
            perspective: false,
        };
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = augment_pair(&x, &x, &spec, &mut rng);
            assert_eq!(a, b, "seed {seed}");
        }
    }

    #[test]
    fn same_seed_reproduces_the_draw() {
        let (t0, t1) = (ramp(10, 10), ramp(10, 10));
        let spec = AugmentSpec { rotate_deg: 5.0, ..AugmentSpec::default() };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(33);
            augment_pair(&t0, &t1, &spec, &mut rng)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let img = GrayImage::new(8, 8, vec![0.6; 64]);
        let out = gaussian_blur(&img, 1.0);
        assert!(out.pixels().iter().all(|&p| (p - 0.6).abs() < 1e-12));
    }

    #[test]
    fn perspective_flag_is_rejected() {
        let spec = AugmentSpec { perspective: true, ..AugmentSpec::identity() };
        assert!(spec.validate().is_err());
        assert!(AugmentSpec::default().validate().is_ok());
    }
}
