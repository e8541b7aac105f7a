//! Cross-correlation between residual images and feature templates, and
//! the exponentiated-score transformation proposal built from it.
//!
//! `cross_correlate_full` computes the full linear (zero-padded)
//! correlation over the extended lag range via 2-D FFTs; the brute-force
//! twin serves as its oracle. Per-(rotation, scale) correlations are
//! independent, so `transformation_proposal` fans them out through
//! `parallel::map_indexed` and merges in enumeration order.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::parallel;
use crate::transform::{Transformation, TransformationSpace};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// In-place 2-D FFT over a row-major `h x w` complex buffer.
fn fft2(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), h * w);
    plan(w, inverse).process(buf);
    let mut t = vec![Complex::default(); buf.len()];
    for i in 0..h {
        for j in 0..w {
            t[j * h + i] = buf[i * w + j];
        }
    }
    plan(h, inverse).process(&mut t);
    for j in 0..w {
        for i in 0..h {
            buf[i * w + j] = t[j * h + i];
        }
    }
}

fn padded_fft(values: &Array2<f64>, lh: usize, lw: usize) -> Vec<Complex<f64>> {
    let (h, w) = values.dim();
    let mut buf = vec![Complex::default(); lh * lw];
    for i in 0..h {
        for j in 0..w {
            buf[i * lw + j] = Complex::new(values[(i, j)], 0.0);
        }
    }
    fft2(&mut buf, lh, lw, false);
    buf
}

/// Correlation scores over the full lag grid for one (rotation, scale)
/// pair. `scores[(i, j)]` is the score at lag `(min_y + i, min_x + j)`.
#[derive(Debug, Clone)]
pub struct LagMap {
    pub scores: Array2<f64>,
    pub min_y: i64,
    pub min_x: i64,
}

fn check_finite(name: &str, values: &Array2<f64>) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{name} contains non-finite values")));
    }
    Ok(())
}

/// Correlate against a residual whose padded FFT is already available.
fn correlate_with_fft(
    residual_fft: &[Complex<f64>],
    lh: usize,
    lw: usize,
    template: &Array2<f64>,
) -> Array2<f64> {
    let (th, tw) = template.dim();
    let mut buf = padded_fft(template, lh, lw);
    for (t, r) in buf.iter_mut().zip(residual_fft) {
        *t = t.conj() * r;
    }
    fft2(&mut buf, lh, lw, true);
    let norm = 1.0 / (lh * lw) as f64;
    let scale = 1.0 + buf.iter().map(|c| c.re.abs()).fold(0.0, f64::max) * norm;
    let mut out = Array2::zeros((lh, lw));
    let min_y = -(th as i64 - 1);
    let min_x = -(tw as i64 - 1);
    for i in 0..lh {
        let cy = (i as i64 + min_y).rem_euclid(lh as i64) as usize;
        for j in 0..lw {
            let cx = (j as i64 + min_x).rem_euclid(lw as i64) as usize;
            let c = buf[cy * lw + cx] * norm;
            debug_assert!(c.im.abs() <= 1e-9 * scale, "imaginary residue too large");
            out[(i, j)] = c.re;
        }
    }
    out
}

/// Full linear cross-correlation `scores(t) = sum_tau template(tau) *
/// residual(t + tau)` with the residual treated as zero outside its frame,
/// computed with zero-padded FFTs.
pub fn cross_correlate_full(residual: &Array2<f64>, template: &Array2<f64>) -> Result<LagMap> {
    check_finite("residual", residual)?;
    check_finite("template", template)?;
    let (rh, rw) = residual.dim();
    let (th, tw) = template.dim();
    let lh = rh + th - 1;
    let lw = rw + tw - 1;
    let res_fft = padded_fft(residual, lh, lw);
    let scores = correlate_with_fft(&res_fft, lh, lw, template);
    Ok(LagMap {
        scores,
        min_y: -(th as i64 - 1),
        min_x: -(tw as i64 - 1),
    })
}

/// Direct-summation twin of [`cross_correlate_full`]; the test oracle.
pub fn brute_force_cross_correlate(
    residual: &Array2<f64>,
    template: &Array2<f64>,
) -> Result<LagMap> {
    check_finite("residual", residual)?;
    check_finite("template", template)?;
    let (rh, rw) = residual.dim();
    let (th, tw) = template.dim();
    let lh = rh + th - 1;
    let lw = rw + tw - 1;
    let min_y = -(th as i64 - 1);
    let min_x = -(tw as i64 - 1);
    let mut scores = Array2::zeros((lh, lw));
    for i in 0..lh {
        let ty = i as i64 + min_y;
        for j in 0..lw {
            let tx = j as i64 + min_x;
            let mut acc = 0.0;
            for u in 0..th {
                let y = ty + u as i64;
                if y < 0 || y >= rh as i64 {
                    continue;
                }
                for v in 0..tw {
                    let x = tx + v as i64;
                    if x < 0 || x >= rw as i64 {
                        continue;
                    }
                    acc += template[(u, v)] * residual[(y as usize, x as usize)];
                }
            }
            scores[(i, j)] = acc;
        }
    }
    Ok(LagMap { scores, min_y, min_x })
}

/// A normalized categorical distribution over all `T` transformations.
///
/// Log-probabilities are always finite; linear probabilities may underflow
/// to zero for scores far below the maximum, which is harmless for
/// sampling and never used in acceptance ratios (those stay in the log
/// domain).
#[derive(Debug, Clone)]
pub struct TransformationProposal {
    log_probs: Vec<f64>,
    probs: Vec<f64>,
}

impl TransformationProposal {
    /// Normalize raw scores into a proposal: divide by `temperature`,
    /// subtract the maximum, exponentiate.
    pub fn from_scores(scores: Vec<f64>, temperature: f64) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Domain("proposal over an empty space".into()));
        }
        if temperature <= 0.0 {
            return Err(Error::Domain("proposal temperature must be positive".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite correlation score".into()));
        }
        let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = scaled.iter().map(|s| (s - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        let log_probs: Vec<f64> = scaled.iter().map(|s| s - log_z).collect();
        let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Numeric(format!(
                "proposal probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self { log_probs, probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, flat: usize) -> f64 {
        self.probs[flat]
    }

    pub fn log_prob(&self, flat: usize) -> f64 {
        self.log_probs[flat]
    }

    /// Inverse-CDF draw over the canonical order given a uniform variate.
    pub fn sample_with_uniform(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }

    /// Draw a flat transformation index and return its log probability.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (usize, f64) {
        let i = self.sample_with_uniform(rng.random::<f64>());
        (i, self.log_probs[i])
    }
}

/// Build the data-driven proposal `q(r) ∝ exp{sum_c (residual_c ⋆
/// template_c)(r)}` over the whole space: per (rotation, scale) pair the
/// canvas is transformed and correlated per channel, channel maps are
/// summed, and the blocks are concatenated in enumeration order.
pub fn transformation_proposal(
    residual_channels: &[Array2<f64>],
    canvas: &Array3<f64>,
    space: &TransformationSpace,
    temperature: f64,
) -> Result<TransformationProposal> {
    let (ch_h, ch_w) = residual_channels
        .first()
        .map(|a| a.dim())
        .ok_or_else(|| Error::Dimension("residual must have at least one channel".into()))?;
    if ch_h != space.image_h() || ch_w != space.image_w() {
        return Err(Error::Dimension(format!(
            "residual is {ch_h}x{ch_w}, space expects {}x{}",
            space.image_h(),
            space.image_w()
        )));
    }
    let (fh, fw, c) = canvas.dim();
    if fh != space.canvas_h() || fw != space.canvas_w() || c != residual_channels.len() {
        return Err(Error::Dimension(format!(
            "canvas {fh}x{fw}x{c} does not match space canvas {}x{} with {} channels",
            space.canvas_h(),
            space.canvas_w(),
            residual_channels.len()
        )));
    }
    for r in residual_channels {
        check_finite("residual", r)?;
    }

    // Residual FFTs are shared across pairs of the same padded size.
    let mut sizes: Vec<(usize, usize)> = Vec::new();
    for pair in space.pairs().iter() {
        let dims = (space.image_h() + pair.out_h - 1, space.image_w() + pair.out_w - 1);
        if !sizes.contains(&dims) {
            sizes.push(dims);
        }
    }
    let res_ffts: Vec<Vec<Vec<Complex<f64>>>> = sizes
        .iter()
        .map(|&(lh, lw)| {
            residual_channels
                .iter()
                .map(|r| padded_fft(r, lh, lw))
                .collect()
        })
        .collect();

    let pair_scores: Vec<Result<Array2<f64>>> = parallel::map_indexed(space.pairs().len(), |p| {
        let pair = &space.pairs()[p];
        let lh = space.image_h() + pair.out_h - 1;
        let lw = space.image_w() + pair.out_w - 1;
        let size_idx = sizes.iter().position(|&d| d == (lh, lw)).unwrap();
        let mut sum = Array2::zeros((lh, lw));
        for ch in 0..residual_channels.len() {
            let mut template = Array2::zeros((pair.out_h, pair.out_w));
            for i in 0..pair.out_h {
                for j in 0..pair.out_w {
                    let (sy, sx) = pair.source(i, j);
                    template[(i, j)] = canvas[(sy, sx, ch)];
                }
            }
            let corr = correlate_with_fft(&res_ffts[size_idx][ch], lh, lw, &template);
            sum += &corr;
        }
        Ok(sum)
    });

    let mut scores = Vec::with_capacity(space.len());
    for (pair, block) in space.pairs().iter().zip(pair_scores) {
        let block = block?;
        match space.translations() {
            crate::transform::TranslationRange::Full => {
                debug_assert_eq!(block.dim(), (pair.lag_h, pair.lag_w));
                scores.extend(block.iter().cloned());
            }
            crate::transform::TranslationRange::IdentityOnly => {
                // Lag (0, 0) lives at array index (out_h - 1, out_w - 1).
                scores.push(block[(pair.out_h - 1, pair.out_w - 1)]);
            }
        }
    }
    TransformationProposal::from_scores(scores, temperature)
}

/// Draw a transformation from a proposal, returning it with its log
/// proposal probability.
pub fn sample_transformation<R: Rng>(
    space: &TransformationSpace,
    proposal: &TransformationProposal,
    rng: &mut R,
) -> (Transformation, f64) {
    let (flat, log_q) = proposal.sample(rng);
    (space.transformation(flat), log_q)
}
