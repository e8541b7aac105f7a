//! Images, datasets and per-channel normalization.
//!
//! An image is a `(height, width, channels)` array of finite `f64` values.
//! A [`Dataset`] is an ordered, dimensionally homogeneous collection of
//! images together with the per-channel statistics used to normalize it.

use ndarray::Array3;

use crate::error::{Error, Result};

/// Pixel payload of a single image, indexed `(y, x, channel)`.
pub type Image = Array3<f64>;

/// Per-channel mean and standard deviation recorded by
/// [`normalize_dataset`] so reconstructions can be mapped back to the
/// original pixel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// An ordered list of images with identical dimensions.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<Image>,
    height: usize,
    width: usize,
    channels: usize,
    /// Present once the dataset has been normalized.
    pub stats: Option<NormalizationStats>,
}

impl Dataset {
    pub fn new(images: Vec<Image>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Data("dataset must contain at least one image".into()))?;
        let (height, width, channels) = first.dim();
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimension("image dimensions must be positive".into()));
        }
        for (i, img) in images.iter().enumerate() {
            if img.dim() != (height, width, channels) {
                return Err(Error::Dimension(format!(
                    "image {i} has shape {:?}, expected {:?}",
                    img.dim(),
                    (height, width, channels)
                )));
            }
            if img.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("image {i} contains non-finite pixels")));
            }
        }
        Ok(Self {
            images,
            height,
            width,
            channels,
            stats: None,
        })
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Pixel count per channel (`D` in complexity statements).
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, n: usize) -> &Image {
        &self.images[n]
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }
}

/// Scale a dataset so every channel has zero mean and unit (population)
/// variance across all pixels of all images. The statistics are recorded
/// on the returned dataset for later denormalization.
pub fn normalize_dataset(raw: &Dataset) -> Result<Dataset> {
    let c = raw.channels();
    let count = (raw.n_images() * raw.pixels()) as f64;
    let mut mean = vec![0.0; c];
    for img in raw.images() {
        for ((_, _, ch), v) in img.indexed_iter() {
            mean[ch] += v;
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut var = vec![0.0; c];
    for img in raw.images() {
        for ((_, _, ch), v) in img.indexed_iter() {
            let d = v - mean[ch];
            var[ch] += d * d;
        }
    }
    for v in &mut var {
        *v /= count;
    }
    let mut std = vec![0.0; c];
    for ch in 0..c {
        if var[ch] <= 1e-24 {
            return Err(Error::DegenerateVariance { channel: ch });
        }
        std[ch] = var[ch].sqrt();
    }
    let images = raw
        .images()
        .iter()
        .map(|img| {
            let mut out = img.clone();
            for ((_, _, ch), v) in out.indexed_iter_mut() {
                *v = (*v - mean[ch]) / std[ch];
            }
            out
        })
        .collect();
    let mut out = Dataset::new(images)?;
    out.stats = Some(NormalizationStats { mean, std });
    Ok(out)
}

/// Invert [`normalize_dataset`] on a single image.
pub fn denormalize_image(img: &Image, stats: &NormalizationStats) -> Image {
    let mut out = img.clone();
    for ((_, _, ch), v) in out.indexed_iter_mut() {
        *v = *v * stats.std[ch] + stats.mean[ch];
    }
    out
}

/// Map a value from the raw pixel scale into normalized units.
pub fn normalize_value(v: f64, stats: &NormalizationStats, channel: usize) -> f64 {
    (v - stats.mean[channel]) / stats.std[channel]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn single_channel(values: &[f64]) -> Dataset {
        let images = values
            .iter()
            .map(|&v| Array3::from_elem((1, 1, 1), v))
            .collect();
        Dataset::new(images).unwrap()
    }

    #[test]
    fn normalizes_binary_values() {
        let ds = single_channel(&[0.0, 2.0, 0.0, 2.0]);
        let norm = normalize_dataset(&ds).unwrap();
        let got: Vec<f64> = norm.images().iter().map(|i| i[(0, 0, 0)]).collect();
        assert_abs_diff_eq!(got[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(got[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn normalizes_three_values() {
        // mean 2, population variance 2/3
        let ds = single_channel(&[1.0, 2.0, 3.0]);
        let norm = normalize_dataset(&ds).unwrap();
        let expect = (3.0f64 / 2.0).sqrt();
        let got: Vec<f64> = norm.images().iter().map(|i| i[(0, 0, 0)]).collect();
        assert_abs_diff_eq!(got[0], -expect, epsilon = 1e-12);
        assert_abs_diff_eq!(got[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(got[2], expect, epsilon = 1e-12);
    }

    #[test]
    fn normalization_is_idempotent() {
        let ds = single_channel(&[1.0, 2.0, 3.0, 7.0]);
        let once = normalize_dataset(&ds).unwrap();
        let twice = normalize_dataset(&once).unwrap();
        for (a, b) in once.images().iter().zip(twice.images()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn constant_channel_is_rejected() {
        let ds = single_channel(&[5.0, 5.0, 5.0]);
        match normalize_dataset(&ds) {
            Err(Error::DegenerateVariance { channel: 0 }) => {}
            other => panic!("expected degenerate variance error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let ds = single_channel(&[0.25, -3.0, 9.5, 1.0, 2.0]);
        let norm = normalize_dataset(&ds).unwrap();
        let stats = norm.stats.clone().unwrap();
        for (orig, n) in ds.images().iter().zip(norm.images()) {
            let back = denormalize_image(n, &stats);
            for (a, b) in orig.iter().zip(back.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn normalized_moments_are_tight() {
        let ds = single_channel(&[0.0, 0.5, 1.5, 4.0, -2.0, 3.25]);
        let norm = normalize_dataset(&ds).unwrap();
        let vals: Vec<f64> = norm.images().iter().map(|i| i[(0, 0, 0)]).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let images = vec![
            Array3::zeros((2, 2, 1)),
            Array3::zeros((2, 3, 1)),
        ];
        assert!(matches!(Dataset::new(images), Err(Error::Dimension(_))));
    }
}
