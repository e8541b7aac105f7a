//! Mean-image composition, visibility indicators, residuals and Gaussian
//! log-likelihoods for all three variants.

use ndarray::{Array2, Array3};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::model::{ModelState, Variant};
use crate::parallel;
use crate::transform::{inverse_pixel_map, render_accumulate};

/// Per-pixel visible-feature map for one image: `winner[(y, x)]` is the
/// index of the uppermost unmasked active feature at that pixel, or -1
/// for background. At most one feature is visible per pixel by
/// construction.
#[derive(Debug, Clone)]
pub struct Visibility {
    pub winner: Array2<i32>,
}

impl Visibility {
    pub fn is_visible(&self, k: usize, y: usize, x: usize) -> bool {
        self.winner[(y, x)] == k as i32
    }
}

fn winner_map(state: &ModelState, n: usize, exclude: Option<usize>) -> Visibility {
    let mut winner =
        Array2::from_elem((state.data.height(), state.data.width()), -1i32);
    // Front to back; the first claim wins.
    for &k in state.depth_order.iter().rev() {
        if Some(k) == exclude || !state.z[n][k] {
            continue;
        }
        let t = state.transforms[n][k].as_ref().expect("active pair has transform");
        let mask = state.masks[n][k].as_ref().expect("active pair has mask");
        let pair = state.space.pair(t);
        for i in 0..pair.out_h {
            let y = i as i64 + t.y;
            if y < 0 || y >= state.data.height() as i64 {
                continue;
            }
            for j in 0..pair.out_w {
                let x = j as i64 + t.x;
                if x < 0 || x >= state.data.width() as i64 {
                    continue;
                }
                let (y, x) = (y as usize, x as usize);
                if winner[(y, x)] >= 0 {
                    continue;
                }
                let (sy, sx) = pair.source(i, j);
                if mask[(sy, sx)] == 1 {
                    winner[(y, x)] = k as i32;
                }
            }
        }
    }
    Visibility { winner }
}

/// Visibility indicators for image `n` (masked variant only).
pub fn visibility_indicators(state: &ModelState, n: usize) -> Result<Visibility> {
    if !state.variant.is_masked() {
        return Err(Error::Variant(
            "visibility indicators are defined for the masked variant only".into(),
        ));
    }
    Ok(winner_map(state, n, None))
}

/// The uppermost visible feature at one pixel, optionally overriding the
/// mask bit of one feature at one canvas pixel (used by the mask Gibbs
/// step to evaluate both settings without mutating state).
pub fn winner_at(
    state: &ModelState,
    n: usize,
    y: usize,
    x: usize,
    mask_override: Option<(usize, (usize, usize), u8)>,
) -> Option<usize> {
    for &k in state.depth_order.iter().rev() {
        if !state.z[n][k] {
            continue;
        }
        let t = state.transforms[n][k].as_ref().expect("active pair has transform");
        let Some((cy, cx)) = inverse_pixel_map(&state.space, t, y, x) else {
            continue;
        };
        let bit = match mask_override {
            Some((ok, od, b)) if ok == k && od == (cy, cx) => b,
            _ => state.masks[n][k].as_ref().expect("active pair has mask")[(cy, cx)],
        };
        if bit == 1 {
            return Some(k);
        }
    }
    None
}

/// Noise-free mean of image `n` under the current state.
pub fn compose_image(state: &ModelState, n: usize) -> Image {
    let (h, w, c) = (state.data.height(), state.data.width(), state.data.channels());
    let mut mean = Array3::zeros((h, w, c));
    match state.variant {
        Variant::IbpLg | Variant::LgTibp => {
            for k in 0..state.k() {
                if state.z[n][k] {
                    let t = state.transforms[n][k].as_ref().unwrap();
                    render_accumulate(&mut mean, &state.features[k].canvas, t, &state.space, 1.0);
                }
            }
        }
        Variant::MTibp => {
            let vis = winner_map(state, n, None);
            fill_masked_mean(state, n, &vis, &mut mean);
        }
    }
    mean
}

/// Like [`compose_image`] but skipping feature `exclude`.
pub fn compose_image_excluding(state: &ModelState, n: usize, exclude: usize) -> Image {
    let (h, w, c) = (state.data.height(), state.data.width(), state.data.channels());
    let mut mean = Array3::zeros((h, w, c));
    match state.variant {
        Variant::IbpLg | Variant::LgTibp => {
            for k in 0..state.k() {
                if k != exclude && state.z[n][k] {
                    let t = state.transforms[n][k].as_ref().unwrap();
                    render_accumulate(&mut mean, &state.features[k].canvas, t, &state.space, 1.0);
                }
            }
        }
        Variant::MTibp => {
            let vis = winner_map(state, n, Some(exclude));
            fill_masked_mean(state, n, &vis, &mut mean);
        }
    }
    mean
}

fn fill_masked_mean(state: &ModelState, n: usize, vis: &Visibility, mean: &mut Image) {
    let c = state.data.channels();
    for ((y, x), &k) in vis.winner.indexed_iter() {
        if k < 0 {
            continue;
        }
        let k = k as usize;
        let t = state.transforms[n][k].as_ref().unwrap();
        let (cy, cx) =
            inverse_pixel_map(&state.space, t, y, x).expect("winner must be in support");
        for ch in 0..c {
            mean[(y, x, ch)] = state.features[k].canvas[(cy, cx, ch)];
        }
    }
}

/// Gaussian log density of `x` around `mean` with iid noise `sigma_x`.
pub fn image_log_likelihood(x: &Image, mean: &Image, sigma_x: f64) -> Result<f64> {
    if x.dim() != mean.dim() {
        return Err(Error::Dimension(format!(
            "shape mismatch: {:?} vs {:?}",
            x.dim(),
            mean.dim()
        )));
    }
    if !(sigma_x > 0.0) {
        return Err(Error::Domain(format!("sigma_x must be positive, got {sigma_x}")));
    }
    let entries = x.len() as f64;
    let var = sigma_x * sigma_x;
    let mut sq = 0.0;
    for (a, b) in x.iter().zip(mean.iter()) {
        let d = a - b;
        sq += d * d;
    }
    Ok(-0.5 * entries * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var))
}

/// Log-likelihood of image `n` under the current state.
pub fn state_image_log_likelihood(state: &ModelState, n: usize) -> f64 {
    let mean = compose_image(state, n);
    image_log_likelihood(state.data.image(n), &mean, state.hyper.sigma_x)
        .expect("state dimensions are consistent")
}

/// Total data log-likelihood over all images. Per-image terms are
/// independent and evaluated in parallel, then reduced in index order.
pub fn data_log_likelihood(state: &ModelState) -> f64 {
    parallel::map_indexed(state.n_images(), |n| state_image_log_likelihood(state, n))
        .into_iter()
        .sum()
}

/// Sequential twin of [`data_log_likelihood`] for benchmarking.
pub fn data_log_likelihood_seq(state: &ModelState) -> f64 {
    parallel::map_indexed_seq(state.n_images(), |n| state_image_log_likelihood(state, n))
        .into_iter()
        .sum()
}

/// The part of image `n` left for feature `k` to explain.
///
/// Linear Gaussian variants subtract every other active feature's render
/// from the observation. The masked variant restricts the observation to
/// pixels explained by features strictly behind `k` (visibility computed
/// with `k` excluded). A candidate index `k == state.k()` denotes a
/// not-yet-instantiated feature, treated as uppermost: the masked
/// residual is then the full observation.
pub fn residual(state: &ModelState, n: usize, k: usize) -> Image {
    let x = state.data.image(n);
    match state.variant {
        Variant::IbpLg | Variant::LgTibp => {
            let mut out = x.clone();
            for j in 0..state.k() {
                if j != k && state.z[n][j] {
                    let t = state.transforms[n][j].as_ref().unwrap();
                    render_accumulate(&mut out, &state.features[j].canvas, t, &state.space, -1.0);
                }
            }
            out
        }
        Variant::MTibp => {
            if k >= state.k() {
                return x.clone();
            }
            let rank_k = state.rank(k);
            let vis = winner_map(state, n, Some(k));
            let mut out = Array3::zeros(x.dim());
            for ((y, xx), &w) in vis.winner.indexed_iter() {
                if w >= 0 && state.rank(w as usize) < rank_k {
                    for ch in 0..state.data.channels() {
                        out[(y, xx, ch)] = x[(y, xx, ch)];
                    }
                }
            }
            out
        }
    }
}

/// Residual as per-channel planes, the form the proposal machinery wants.
pub fn residual_channels(state: &ModelState, n: usize, k: usize) -> Vec<Array2<f64>> {
    let r = residual(state, n, k);
    let (h, w, c) = r.dim();
    (0..c)
        .map(|ch| Array2::from_shape_fn((h, w), |(y, x)| r[(y, x, ch)]))
        .collect()
}
