//! Raster image loading and saving: binary PPM/PGM plus PNG, pixel
//! values scaled to `[0, 1]`, and dataset-directory loading with optional
//! box-filter downscaling.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::data::{normalize_dataset, Dataset, Image};
use crate::error::{Error, Result};

fn read_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Data(format!("{}: {}", path.display(), msg.into()))
}

struct PnmTokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PnmTokens<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    /// Next whitespace-delimited token, skipping `#` comments.
    fn token(&mut self) -> Option<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= self.bytes.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Some(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Option<usize> {
        std::str::from_utf8(self.token()?).ok()?.parse().ok()
    }
}

fn load_pnm(path: &Path, bytes: &[u8]) -> Result<Image> {
    let mut tokens = PnmTokens::new(bytes);
    let magic = tokens
        .token()
        .ok_or_else(|| read_err(path, "missing PNM magic"))?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(read_err(path, "expected binary PGM (P5) or PPM (P6)")),
    };
    let width = tokens.number().ok_or_else(|| read_err(path, "missing width"))?;
    let height = tokens.number().ok_or_else(|| read_err(path, "missing height"))?;
    let maxval = tokens.number().ok_or_else(|| read_err(path, "missing maxval"))?;
    if maxval == 0 || maxval > 65535 {
        return Err(read_err(path, format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    let payload = &bytes[tokens.pos + 1..];
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let expected = width * height * channels * bytes_per;
    if payload.len() < expected {
        return Err(read_err(
            path,
            format!("truncated payload: {} of {expected} bytes", payload.len()),
        ));
    }
    let mut img = Array3::zeros((height, width, channels));
    let scale = 1.0 / maxval as f64;
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let i = ((y * width + x) * channels + c) * bytes_per;
                let raw = if bytes_per == 1 {
                    payload[i] as u16
                } else {
                    u16::from_be_bytes([payload[i], payload[i + 1]])
                };
                img[(y, x, c)] = raw as f64 * scale;
            }
        }
    }
    Ok(img)
}

fn load_png(path: &Path) -> Result<Image> {
    let dynamic = image::open(path).map_err(|e| read_err(path, e.to_string()))?;
    match dynamic {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Ok(Array3::from_shape_fn(
                (h as usize, w as usize, 1),
                |(y, x, _)| g.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0,
            ))
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            Ok(Array3::from_shape_fn(
                (h as usize, w as usize, 3),
                |(y, x, c)| rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0,
            ))
        }
    }
}

/// Load one image file (.ppm, .pgm or .png) with values in `[0, 1]`.
pub fn load_image_file(path: &Path) -> Result<Image> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "ppm" | "pgm" => {
            let bytes = fs::read(path).map_err(|source| Error::Read {
                path: path.to_path_buf(),
                source,
            })?;
            load_pnm(path, &bytes)
        }
        "png" => load_png(path),
        other => Err(read_err(path, format!("unsupported image extension '{other}'"))),
    }
}

/// Write an image as binary PPM (3 channels) or PGM (1 channel), values
/// clamped to `[0, 1]` and quantized to 8 bits.
pub fn save_pnm(path: &Path, img: &Image) -> Result<()> {
    let (h, w, c) = img.dim();
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::Dimension(format!(
                "PNM supports 1 or 3 channels, image has {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = (img[(y, x, ch)].clamp(0.0, 1.0) * 255.0).round() as u8;
                out.push(v);
            }
        }
    }
    write_atomic(path, &out)
}

/// Write bytes to a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes).map_err(|source| Error::Write {
        path: tmp.clone(),
        source,
    })?;
    fs::rename(&tmp, path).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Downscale by box averaging. The source dimensions must be integer
/// multiples of the target.
pub fn box_downscale(img: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    let (h, w, c) = img.dim();
    if target_h == 0 || target_w == 0 || h % target_h != 0 || w % target_w != 0 {
        return Err(Error::Dimension(format!(
            "cannot box-average {h}x{w} down to {target_h}x{target_w}"
        )));
    }
    let (by, bx) = (h / target_h, w / target_w);
    let norm = 1.0 / (by * bx) as f64;
    let mut out = Array3::zeros((target_h, target_w, c));
    for y in 0..target_h {
        for x in 0..target_w {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in 0..by {
                    for dx in 0..bx {
                        acc += img[(y * by + dy, x * bx + dx, ch)];
                    }
                }
                out[(y, x, ch)] = acc * norm;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Box-average images down to this size after loading.
    pub resize: Option<(usize, usize)>,
    /// Apply per-channel normalization to the assembled dataset.
    pub normalize: bool,
}

/// Load every raster image in a directory, ordered by filename.
pub fn load_image_directory(dir: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let entries = fs::read_dir(dir).map_err(|source| Error::Read {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| {
                    let e = e.to_ascii_lowercase();
                    e == "ppm" || e == "pgm" || e == "png"
                })
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "no .ppm/.pgm/.png images in {}",
            dir.display()
        )));
    }
    let mut images = Vec::with_capacity(paths.len());
    for p in &paths {
        let mut img = load_image_file(p)?;
        if let Some((th, tw)) = opts.resize {
            img = box_downscale(&img, th, tw)?;
        }
        images.push(img);
    }
    let dataset = Dataset::new(images)?;
    if opts.normalize {
        normalize_dataset(&dataset)
    } else {
        Ok(dataset)
    }
}
