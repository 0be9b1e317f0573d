use std::fs;
use std::io::Write;
use std::path::Path;

use super::DataError;

/// Single-channel image with pixels in `[0,1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(height * width, pixels.len(), "pixel count must match dimensions");
        debug_assert!(pixels.iter().all(|&p| (0.0..=1.0).contains(&p)), "pixels out of [0,1]");
        GrayImage { height, width, pixels }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        GrayImage { height, width, pixels: vec![0.0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * self.width + col] = v.clamp(0.0, 1.0);
    }

    /// 8-bit quantization used for on-disk storage.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Self {
        assert_eq!(height * width, bytes.len());
        let pixels = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        GrayImage { height, width, pixels }
    }
}

/// Load an 8-bit grayscale PGM (P5) or PNG, scaling pixels to `[0,1]`.
pub fn load_image(path: &Path) -> Result<GrayImage, DataError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext.to_ascii_lowercase().as_str() {
        "pgm" => load_pgm(path),
        "png" => load_png(path),
        other => Err(DataError::BadImage {
            path: path.to_path_buf(),
            msg: format!("unsupported image extension `{other}` (expected pgm or png)"),
        }),
    }
}

/// Write as PGM (P5, maxval 255) or PNG depending on the extension.
pub fn save_image(img: &GrayImage, path: &Path) -> Result<(), DataError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext.to_ascii_lowercase().as_str() {
        "pgm" => save_pgm(img, path),
        "png" => save_png(img, path),
        other => Err(DataError::BadImage {
            path: path.to_path_buf(),
            msg: format!("unsupported image extension `{other}` (expected pgm or png)"),
        }),
    }
}

fn load_pgm(path: &Path) -> Result<GrayImage, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    let bad = |msg: &str| DataError::BadImage { path: path.to_path_buf(), msg: msg.to_string() };
    // header: magic, width, height, maxval as whitespace-separated tokens,
    // '#' comments allowed, then a single whitespace byte before the payload
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(
            std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?.to_string(),
        );
    }
    if tokens[0] != "P5" {
        return Err(bad(&format!("expected P5 magic, got `{}`", tokens[0])));
    }
    let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = tokens[3].parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad(&format!("expected maxval 255, got {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let expected = width * height;
    if bytes.len() < pos + expected {
        return Err(bad(&format!(
            "payload too short: expected {expected} bytes, got {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    Ok(GrayImage::from_bytes(height, width, &bytes[pos..pos + expected]))
}

fn save_pgm(img: &GrayImage, path: &Path) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(img.height * img.width + 32);
    write!(out, "P5\n{} {}\n255\n", img.width, img.height)
        .expect("in-memory write");
    out.extend_from_slice(&img.to_bytes());
    fs::write(path, out).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })
}

fn load_png(path: &Path) -> Result<GrayImage, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::BadImage { path: path.to_path_buf(), msg: e.to_string() })?;
    match img {
        image::DynamicImage::ImageLuma8(luma) => {
            let (w, h) = (luma.width() as usize, luma.height() as usize);
            Ok(GrayImage::from_bytes(h, w, luma.as_raw()))
        }
        _ => Err(DataError::BadImage {
            path: path.to_path_buf(),
            msg: "expected 8-bit grayscale PNG".to_string(),
        }),
    }
}

fn save_png(img: &GrayImage, path: &Path) -> Result<(), DataError> {
    image::save_buffer(
        path,
        &img.to_bytes(),
        img.width as u32,
        img.height as u32,
        image::ColorType::L8,
    )
    .map_err(|e| DataError::BadImage { path: path.to_path_buf(), msg: e.to_string() })
}

/// Bilinear resize with center-aligned sampling. Exact identity when the
/// output dimensions equal the input dimensions.
pub fn resize_bilinear(img: &GrayImage, out_h: usize, out_w: usize) -> GrayImage {
    assert!(out_h > 0 && out_w > 0, "zero output dimensions");
    if out_h == img.height && out_w == img.width {
        return img.clone();
    }
    let scale_y = img.height as f64 / out_h as f64;
    let scale_x = img.width as f64 / out_w as f64;
    let mut pixels = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let fx = sx - x0 as f64;
            let v = img.get(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + img.get(y0, x1) * (1.0 - fy) * fx
                + img.get(y1, x0) * fy * (1.0 - fx)
                + img.get(y1, x1) * fy * fx;
            pixels[oy * out_w + ox] = v.clamp(0.0, 1.0);
        }
    }
    GrayImage::new(out_h, out_w, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_bit_identical_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = GrayImage::new(3, 4, (0..12).map(|i| i as f64 / 11.0).collect());
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        // first round trip quantizes; a second one must be exact
        save_image(&back, &path).unwrap();
        let again = load_image(&path).unwrap();
        assert_eq!(back, again);
        assert_eq!(back.height(), 3);
        assert_eq!(back.width(), 4);
    }

    #[test]
    fn zero_image_loads_as_zeros_and_255_maps_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\n").unwrap();
        let mut payload = std::fs::read(&path).unwrap();
        payload.extend_from_slice(&[0u8; 15]);
        payload.push(255);
        std::fs::write(&path, payload).unwrap();
        let img = load_image(&path).unwrap();
        assert!(img.pixels()[..15].iter().all(|&p| p == 0.0));
        assert_eq!(img.pixels()[15], 1.0);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = GrayImage::new(5, 7, (0..35).map(|i| (i % 256) as f64 / 255.0).collect());
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn rejects_unknown_extension_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let bad_ext = dir.path().join("img.tiff");
        std::fs::write(&bad_ext, b"x").unwrap();
        assert!(load_image(&bad_ext).is_err());
        let bad_magic = dir.path().join("img.pgm");
        std::fs::write(&bad_magic, b"P2\n2 2\n255\n0 0 0 0").unwrap();
        let err = load_image(&bad_magic).unwrap_err().to_string();
        assert!(err.contains("P5"), "{err}");
    }

    #[test]
    fn resize_identity_and_constant_preservation() {
        let img = GrayImage::new(4, 6, vec![0.37; 24]);
        let same = resize_bilinear(&img, 4, 6);
        assert_eq!(img, same);
        let small = resize_bilinear(&img, 2, 3);
        assert!(small.pixels().iter().all(|&p| (p - 0.37).abs() < 1e-12));
    }

    #[test]
    fn checkerboard_to_single_pixel_is_mean() {
        let img = GrayImage::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let one = resize_bilinear(&img, 1, 1);
        assert!((one.get(0, 0) - 0.5).abs() < 1e-12);
    }
}
