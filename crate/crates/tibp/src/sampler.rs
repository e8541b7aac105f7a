//! The MCMC moves and the per-iteration sweep schedule.
//!
//! Move inventory:
//! - joint Metropolis-Hastings flips of `z` with data-driven
//!   transformation proposals and conditional-prior mask proposals;
//! - a per-image singleton exchange that replaces the set of features
//!   private to an image with a Poisson-proposed fresh set (this is the
//!   birth/death mechanism: proposing zero newborns kills the current
//!   singletons, gated by the usual ratio);
//! - transformation/mask resampling for active pairs;
//! - a feature recentering move that slides a canvas window one pixel
//!   while compensating every user's transformation, so a feature that
//!   captured a cropped view of a recurring pattern can drift onto it;
//! - per-pixel mask Gibbs, adjacent order swaps, conjugate feature Gibbs
//!   and conjugate hyperparameter Gibbs;
//! - the naive enumeration sampler that marginalizes transformations
//!   exactly, used as the speed baseline.
//!
//! Every acceptance ratio is computed in the log domain. A sweep mutates
//! one state sequentially; read-only likelihood evaluations inside a
//! phase may fan out over threads.

use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::likelihood::{
    compose_image, compose_image_excluding, data_log_likelihood, image_log_likelihood,
    residual_channels, state_image_log_likelihood, winner_at, Visibility,
};
use crate::model::{ModelState, Variant};
use crate::parallel;
use crate::transform::{landing_pixels, Transformation};
use crate::xcorr::{transformation_proposal, TransformationProposal};

/// Which z/r sampling strategy a sweep uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// Cross-correlation-driven Metropolis-Hastings.
    Mh,
    /// Exact enumeration over all transformations (linear Gaussian only).
    Naive,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Mh => "mh",
            SamplerKind::Naive => "naive",
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MoveStats {
    pub proposed: u64,
    pub accepted: u64,
}

/// Diagnostics for one sweep.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub iteration: u64,
    pub joint_log_likelihood: f64,
    pub k_plus: usize,
    pub flips: MoveStats,
    pub exchanges: MoveStats,
    pub births_accepted: u64,
    pub resamples: MoveStats,
    pub order_swaps: MoveStats,
    pub recenters: MoveStats,
    /// Seconds per phase: flips, exchange, resample, mask Gibbs, order
    /// swaps, feature Gibbs (with recentering), hyperparameters, prune.
    pub phase_seconds: [f64; 8],
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - d * d / (2.0 * var)
}

fn build_proposal(state: &ModelState, n: usize, k: usize) -> Result<TransformationProposal> {
    let channels = residual_channels(state, n, k);
    transformation_proposal(
        &channels,
        &state.features[k].canvas,
        &state.space,
        state.proposal_temperature,
    )
}

/// Eq-style conditional-prior probability that mask bit `d` of pair
/// `(n, k)` is on, given every other image's mask for feature `k`.
pub fn mask_proposal_probability(state: &ModelState, n: usize, k: usize, d: (usize, usize)) -> f64 {
    let beta = state.hyper.beta;
    let mut users = 0.0;
    let mut ones = 0.0;
    for m in 0..state.n_images() {
        if m == n || !state.z[m][k] {
            continue;
        }
        users += 1.0;
        ones += f64::from(state.masks[m][k].as_ref().expect("active pair has mask")[d]);
    }
    (ones + beta) / (users + 2.0 * beta)
}

/// Draw a whole mask from the conditional prior, bit by bit in row-major
/// order.
fn propose_mask<R: Rng>(state: &ModelState, n: usize, k: usize, rng: &mut R) -> Array2<u8> {
    let (fh, fw) = (state.space.canvas_h(), state.space.canvas_w());
    let mut mask = Array2::zeros((fh, fw));
    for dy in 0..fh {
        for dx in 0..fw {
            let p = mask_proposal_probability(state, n, k, (dy, dx));
            mask[(dy, dx)] = u8::from(rng.random::<f64>() < p);
        }
    }
    mask
}

/// Log acceptance ratio for flipping `z_nk` on, before the likelihood
/// term: `ln[(m/(N-m)) * (1/T) / q_r(r*)]`.
pub fn flip_on_log_prior_ratio(m_other: usize, n_images: usize, log_t: f64, log_qr: f64) -> f64 {
    (m_other as f64 / (n_images - m_other) as f64).ln() - log_t - log_qr
}

/// Propose flipping `z_nk` for a shared feature (used by at least one
/// other image), drawing the transformation from the cross-correlation
/// proposal and the mask from its conditional prior on activation.
pub fn mh_update_feature_use<R: Rng>(
    state: &mut ModelState,
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<bool> {
    let m_other = state.usage_excluding(n, k);
    if m_other == 0 {
        return Err(Error::Domain(format!(
            "feature {k} is private to image {n}; flips require another user"
        )));
    }
    let n_images = state.n_images();
    let log_t = (state.space.len() as f64).ln();
    let ll_old = state_image_log_likelihood(state, n);

    if !state.z[n][k] {
        let proposal = build_proposal(state, n, k)?;
        let (flat, log_qr) = proposal.sample(rng);
        let t = state.space.transformation(flat);
        let mask = state
            .variant
            .is_masked()
            .then(|| propose_mask(state, n, k, rng));
        state.z[n][k] = true;
        state.transforms[n][k] = Some(t);
        state.masks[n][k] = mask;
        let ll_new = state_image_log_likelihood(state, n);
        // Mask proposal equals the mask prior conditional, so those terms
        // cancel exactly.
        let log_ratio =
            ll_new - ll_old + flip_on_log_prior_ratio(m_other, n_images, log_t, log_qr);
        if rng.random::<f64>().ln() < log_ratio {
            Ok(true)
        } else {
            state.z[n][k] = false;
            state.transforms[n][k] = None;
            state.masks[n][k] = None;
            Ok(false)
        }
    } else {
        let proposal = build_proposal(state, n, k)?;
        let old_t = state.transforms[n][k].take().expect("active pair has transform");
        let old_mask = state.masks[n][k].take();
        let log_qr_old = proposal.log_prob(state.space.index_of(&old_t));
        state.z[n][k] = false;
        let ll_new = state_image_log_likelihood(state, n);
        let log_ratio =
            ll_new - ll_old - flip_on_log_prior_ratio(m_other, n_images, log_t, log_qr_old);
        if rng.random::<f64>().ln() < log_ratio {
            Ok(true)
        } else {
            state.z[n][k] = true;
            state.transforms[n][k] = Some(old_t);
            state.masks[n][k] = old_mask;
            Ok(false)
        }
    }
}

/// Landing-pixel count and per-channel data sums of every canvas pixel
/// under `t`, against a reference image.
fn conjugate_stats(
    state: &ModelState,
    reference: &Array3<f64>,
    t: &Transformation,
) -> (Array2<f64>, Array3<f64>) {
    let (fh, fw) = (state.space.canvas_h(), state.space.canvas_w());
    let c = state.data.channels();
    let mut counts = Array2::zeros((fh, fw));
    let mut sums = Array3::zeros((fh, fw, c));
    for dy in 0..fh {
        for dx in 0..fw {
            for (y, x) in landing_pixels(&state.space, t, dy, dx) {
                counts[(dy, dx)] += 1.0;
                for ch in 0..c {
                    sums[(dy, dx, ch)] += reference[(y, x, ch)];
                }
            }
        }
    }
    (counts, sums)
}

/// Per-pixel Bernoulli weights of the birth mask proposal: the mask
/// conditional evaluated at the posterior cell means, i.e. how much an
/// uppermost cell showing its fitted mean beats what the shared-feature
/// composition already shows underneath. Depends only on the
/// observation, the shared composition and the placement, so the reverse
/// move evaluates the same weights.
fn birth_mask_weights(
    state: &ModelState,
    n: usize,
    t: &Transformation,
    counts: &Array2<f64>,
    sums: &Array3<f64>,
    shared_mean: &Array3<f64>,
) -> Array2<f64> {
    let var_a = state.hyper.sigma_a * state.hyper.sigma_a;
    let var_x = state.hyper.sigma_x * state.hyper.sigma_x;
    let (fh, fw, c) = sums.dim();
    let x = state.data.image(n);
    let mut weights = Array2::from_elem((fh, fw), 0.5);
    for dy in 0..fh {
        for dx in 0..fw {
            let f = 1.0 / (1.0 / var_a + counts[(dy, dx)] / var_x);
            let mut logit = 0.0;
            for (y, xx) in landing_pixels(&state.space, t, dy, dx) {
                for ch in 0..c {
                    let mean = f * sums[(dy, dx, ch)] / var_x;
                    let on = x[(y, xx, ch)] - mean;
                    let off = x[(y, xx, ch)] - shared_mean[(y, xx, ch)];
                    logit += (off * off - on * on) / (2.0 * var_x);
                }
            }
            weights[(dy, dx)] = (1.0 / (1.0 + (-logit).exp())).clamp(1e-3, 1.0 - 1e-3);
        }
    }
    weights
}

/// Placement proposal for newborn features: window sums of a per-pixel
/// energy plane, minus the energy left in the one-pixel ring around the
/// window, exponentiated at temperature `2 sigma_x^2`. Windows that
/// fully contain concentrated energy dominate; windows that cut a
/// pattern in half leak energy into the ring and lose.
pub fn birth_placement_proposal(
    state: &ModelState,
    energy: &Array2<f64>,
) -> Result<TransformationProposal> {
    let var_x = state.hyper.sigma_x * state.hyper.sigma_x;
    let mut scores = Vec::with_capacity(state.space.len());
    for pair in state.space.pairs() {
        let window = crate::xcorr::cross_correlate_full(
            energy,
            &Array2::from_elem((pair.out_h, pair.out_w), 1.0),
        )?;
        let dilated = crate::xcorr::cross_correlate_full(
            energy,
            &Array2::from_elem((pair.out_h + 2, pair.out_w + 2), 1.0),
        )?;
        match state.space.translations() {
            crate::transform::TranslationRange::Full => {
                for i in 0..pair.lag_h {
                    for j in 0..pair.lag_w {
                        // Window lag (min_y + i, min_x + j); the dilated
                        // window starts one pixel earlier on both axes.
                        let inside = window.scores[(i, j)];
                        let ring = dilated.scores[(i + 1, j + 1)] - inside;
                        scores.push(inside - ring);
                    }
                }
            }
            crate::transform::TranslationRange::IdentityOnly => {
                let i = (-window.min_y) as usize;
                let j = (-window.min_x) as usize;
                let inside = window.scores[(i, j)];
                let ring = dilated.scores[(i + 1, j + 1)] - inside;
                scores.push(inside - ring);
            }
        }
    }
    TransformationProposal::from_scores(scores, 2.0 * var_x)
}

/// Outcome of one singleton exchange proposal.
#[derive(Debug, Clone, Copy, Default)]
pub struct BirthOutcome {
    pub proposed: bool,
    pub accepted: bool,
    /// Features added when accepted.
    pub newborns: usize,
}

struct NewbornDraw {
    canvas: Array3<f64>,
    t: Transformation,
    mask: Option<Array2<u8>>,
}

/// One birth-or-death step for image `n`'s private (singleton) features.
///
/// With probability one half, propose adding one feature: placement from
/// the window-energy proposal, mask bits from the visibility conditional
/// at the posterior cell means, unmasked cells from the conjugate
/// posterior and masked cells from the prior. Otherwise propose removing
/// a uniformly chosen singleton, scored by the same densities. The
/// Poisson(alpha/N) singleton-count prior enters the acceptance ratio,
/// so the chain targets the exchangeable IBP law exactly while proposing
/// aggressively.
pub fn mh_birth_new_features<R: Rng>(
    state: &mut ModelState,
    n: usize,
    rng: &mut R,
) -> Result<BirthOutcome> {
    let n_images = state.n_images();
    let lambda = state.hyper.alpha / n_images as f64;
    let singles: Vec<usize> = (0..state.k())
        .filter(|&k| state.z[n][k] && state.usage(k) == 1)
        .collect();
    let birth = rng.random::<f64>() < 0.5;
    if !birth && singles.is_empty() {
        return Ok(BirthOutcome::default());
    }

    let sigma_a = state.hyper.sigma_a;
    let var_a = sigma_a * sigma_a;
    let var_x = state.hyper.sigma_x * state.hyper.sigma_x;
    let masked = state.variant.is_masked();
    let (fh, fw) = (state.space.canvas_h(), state.space.canvas_w());
    let c = state.data.channels();
    let xi = singles.len() as f64;

    // Composition of everything except image n's singletons: the fill
    // reference and placement energy are evaluated against it from both
    // directions of the move.
    let x_n = state.data.image(n);
    let shared_mean: Array3<f64> = {
        let mut saved = Vec::with_capacity(singles.len());
        for &kk in &singles {
            saved.push((kk, state.transforms[n][kk].take(), state.masks[n][kk].take()));
            state.z[n][kk] = false;
        }
        let mean = compose_image(state, n);
        for (kk, t, m) in saved {
            state.z[n][kk] = true;
            state.transforms[n][kk] = t;
            state.masks[n][kk] = m;
        }
        mean
    };
    let reference: Array3<f64> = match state.variant {
        // Newborns are uppermost and show their values directly over the
        // observation.
        Variant::MTibp => x_n.clone(),
        _ => {
            let mut r = x_n.clone();
            for ((y, x, ch), v) in r.indexed_iter_mut() {
                *v -= shared_mean[(y, x, ch)];
            }
            r
        }
    };
    // Placement energy: what the shared model leaves unexplained, plus a
    // small raw-energy floor so placements over explained structure keep
    // nonvanishing reverse density.
    let energy: Array2<f64> = {
        let mut e = Array2::zeros((state.data.height(), state.data.width()));
        for ((y, x, ch), v) in x_n.indexed_iter() {
            let resid = v - shared_mean[(y, x, ch)];
            e[(y, x)] += resid * resid + 0.1 * v * v;
        }
        e
    };
    let placement = birth_placement_proposal(state, &energy)?;
    let log_t = (state.space.len() as f64).ln();
    let ll_old = state_image_log_likelihood(state, n);

    // Log density of drawing (mask, canvas) for a feature at `t`, and a
    // draw of the same when `draw` is set. The mask-off cells come from
    // the prior, whose density cancels against the feature prior.
    let mut feature_proposal = |t: &Transformation,
                                existing: Option<(&Array3<f64>, Option<&Array2<u8>>)>,
                                rng: &mut R|
     -> (f64, Array3<f64>, Option<Array2<u8>>) {
        let (counts, sums) = conjugate_stats(state, &reference, t);
        let mut log_density = 0.0;
        let mask: Option<Array2<u8>> = if masked {
            let weights = birth_mask_weights(state, n, t, &counts, &sums, &shared_mean);
            let mut mask = Array2::zeros((fh, fw));
            for dy in 0..fh {
                for dx in 0..fw {
                    let w = weights[(dy, dx)];
                    let bit = match existing {
                        Some((_, m)) => m.expect("masked variant has mask")[(dy, dx)],
                        None => u8::from(rng.random::<f64>() < w),
                    };
                    mask[(dy, dx)] = bit;
                    let q = if bit == 1 { w } else { 1.0 - w };
                    // Proposal density relative to the conditional mask
                    // prior for a sole user (one half per bit).
                    log_density += q.ln() - 0.5f64.ln();
                }
            }
            Some(mask)
        } else {
            None
        };
        let mut canvas = Array3::zeros((fh, fw, c));
        for dy in 0..fh {
            for dx in 0..fw {
                let visible = mask.as_ref().map_or(true, |m| m[(dy, dx)] == 1);
                let f = 1.0 / (1.0 / var_a + counts[(dy, dx)] / var_x);
                for ch in 0..c {
                    let v = match existing {
                        Some((canvas_old, _)) => canvas_old[(dy, dx, ch)],
                        None => {
                            if visible {
                                let mean = f * sums[(dy, dx, ch)] / var_x;
                                Normal::new(mean, f.sqrt()).unwrap().sample(rng)
                            } else {
                                Normal::new(0.0, sigma_a).unwrap().sample(rng)
                            }
                        }
                    };
                    canvas[(dy, dx, ch)] = v;
                    if visible {
                        let mean = f * sums[(dy, dx, ch)] / var_x;
                        // Density relative to the feature prior.
                        log_density += log_normal(v, mean, f) - log_normal(v, 0.0, var_a);
                    }
                }
            }
        }
        (log_density, canvas, mask)
    };

    if birth {
        let (flat, log_q_r) = placement.sample(rng);
        let t = state.space.transformation(flat);
        let (log_density, canvas, mask) = feature_proposal(&t, None, rng);
        let log_prior_terms = lambda.ln() - (xi + 1.0).ln() - log_t;
        let k = state.push_feature(canvas);
        state.z[n][k] = true;
        state.transforms[n][k] = Some(t);
        state.masks[n][k] = mask;
        let ll_new = state_image_log_likelihood(state, n);
        let log_ratio = ll_new - ll_old + log_prior_terms - log_q_r - log_density;
        if rng.random::<f64>().ln() < log_ratio {
            Ok(BirthOutcome {
                proposed: true,
                accepted: true,
                newborns: 1,
            })
        } else {
            state.remove_feature(k);
            Ok(BirthOutcome {
                proposed: true,
                accepted: false,
                newborns: 0,
            })
        }
    } else {
        let k = singles[rng.random_range(0..singles.len())];
        let t = state.transforms[n][k].expect("singleton is active");
        let canvas_old = state.features[k].canvas.clone();
        let mask_old = state.masks[n][k].clone();
        let (log_density, _, _) =
            feature_proposal(&t, Some((&canvas_old, mask_old.as_ref())), rng);
        let log_q_r = placement.log_prob(state.space.index_of(&t));
        let saved_transform = state.transforms[n][k].take();
        let saved_mask = state.masks[n][k].take();
        state.z[n][k] = false;
        let ll_new = state_image_log_likelihood(state, n);
        let log_ratio =
            ll_new - ll_old + xi.ln() - lambda.ln() + log_t + log_q_r + log_density;
        if rng.random::<f64>().ln() < log_ratio {
            state.remove_feature(k);
            Ok(BirthOutcome {
                proposed: true,
                accepted: true,
                newborns: 0,
            })
        } else {
            state.z[n][k] = true;
            state.transforms[n][k] = saved_transform;
            state.masks[n][k] = saved_mask;
            Ok(BirthOutcome {
                proposed: true,
                accepted: false,
                newborns: 0,
            })
        }
    }
}

/// Jointly repropose the transformation (and mask) of an active pair.
pub fn resample_transform_and_mask<R: Rng>(
    state: &mut ModelState,
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<bool> {
    if !state.z[n][k] {
        return Err(Error::Domain(format!(
            "cannot resample transformation of inactive pair ({n}, {k})"
        )));
    }
    let proposal = build_proposal(state, n, k)?;
    let (flat, log_q_new) = proposal.sample(rng);
    let t_new = state.space.transformation(flat);
    let mask_new = state
        .variant
        .is_masked()
        .then(|| propose_mask(state, n, k, rng));
    let ll_old = state_image_log_likelihood(state, n);
    let t_old = state.transforms[n][k].take().expect("active pair has transform");
    let mask_old = state.masks[n][k].take();
    let log_q_old = proposal.log_prob(state.space.index_of(&t_old));
    state.transforms[n][k] = Some(t_new);
    state.masks[n][k] = mask_new;
    let ll_new = state_image_log_likelihood(state, n);
    // Uniform transformation prior and conditional-prior mask proposal
    // both cancel.
    let log_ratio = ll_new - ll_old + log_q_old - log_q_new;
    if rng.random::<f64>().ln() < log_ratio {
        Ok(true)
    } else {
        state.transforms[n][k] = Some(t_old);
        state.masks[n][k] = mask_old;
        Ok(false)
    }
}

/// Canvas cells whose pre-shift source falls outside the canvas (the
/// entering edge) and cells whose content leaves (the exiting edge).
fn shift_edges(fh: usize, fw: usize, d: (i64, i64)) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let inside = |u: i64, v: i64| u >= 0 && v >= 0 && u < fh as i64 && v < fw as i64;
    let mut entering = Vec::new();
    let mut exiting = Vec::new();
    for u in 0..fh {
        for v in 0..fw {
            if !inside(u as i64 + d.0, v as i64 + d.1) {
                entering.push((u, v));
            }
            if !inside(u as i64 - d.0, v as i64 - d.1) {
                exiting.push((u, v));
            }
        }
    }
    (entering, exiting)
}

/// Conjugate fill distribution of one canvas cell given the rest of the
/// state, with the cell value itself treated as zero: landing pixels are
/// counted (visible ones for the masked variant) and the data-minus-mean
/// sums computed against the current composition.
fn fill_posterior(
    state: &ModelState,
    k: usize,
    cell: (usize, usize),
    means: &[(usize, Array3<f64>)],
) -> (f64, Vec<f64>) {
    let var_a = state.hyper.sigma_a * state.hyper.sigma_a;
    let var_x = state.hyper.sigma_x * state.hyper.sigma_x;
    let c = state.data.channels();
    let mut count = 0.0;
    let mut sums = vec![0.0; c];
    for (n, mean) in means {
        let t = state.transforms[*n][k].as_ref().expect("user is active");
        for (y, x) in landing_pixels(&state.space, t, cell.0, cell.1) {
            if state.variant.is_masked() && winner_at(state, *n, y, x, None) != Some(k) {
                continue;
            }
            count += 1.0;
            for ch in 0..c {
                sums[ch] += state.data.image(*n)[(y, x, ch)] - mean[(y, x, ch)];
            }
        }
    }
    let f = 1.0 / (1.0 / var_a + count / var_x);
    (f, sums.iter().map(|s| f * s / var_x).collect())
}

/// Propose sliding feature `k`'s canvas window one pixel in a uniformly
/// chosen direction, with every user's transformation compensated so the
/// retained content keeps its appearance. Entering cells are filled from
/// their conjugate posterior (masks from the sequential conditional
/// prior, which cancels); exiting content is scored by the reverse fill.
pub fn mh_recenter_feature<R: Rng>(
    state: &mut ModelState,
    k: usize,
    rng: &mut R,
) -> Result<bool> {
    let users: Vec<usize> = (0..state.n_images()).filter(|&n| state.z[n][k]).collect();
    if users.is_empty() {
        return Ok(false);
    }
    let d = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)][rng.random_range(0..4)];
    // Compensated transformations must stay inside the space.
    let mut new_transforms = Vec::with_capacity(users.len());
    for &n in &users {
        let t = state.transforms[n][k].expect("user is active");
        let shifted = Transformation {
            x: t.x + d.1,
            y: t.y + d.0,
            ..t
        };
        if !state.space.contains(&shifted) {
            return Ok(false);
        }
        new_transforms.push(shifted);
    }
    let (fh, fw) = (state.space.canvas_h(), state.space.canvas_w());
    let c = state.data.channels();
    let var_a = state.hyper.sigma_a * state.hyper.sigma_a;
    let (entering, exiting) = shift_edges(fh, fw, d);
    let ll_old: f64 = users
        .iter()
        .map(|&n| state_image_log_likelihood(state, n))
        .sum();

    // Reverse fill density of the exiting content, evaluated with those
    // cells zeroed out of the composition.
    let saved_canvas = state.features[k].canvas.clone();
    let saved_masks: Vec<Option<Array2<u8>>> = users.iter().map(|&n| state.masks[n][k].clone()).collect();
    let saved_transforms: Vec<Transformation> =
        users.iter().map(|&n| state.transforms[n][k].unwrap()).collect();
    let mut log_acc = 0.0;
    for &(u, v) in &exiting {
        for ch in 0..c {
            state.features[k].canvas[(u, v, ch)] = 0.0;
        }
    }
    let means_rev: Vec<(usize, Array3<f64>)> = users
        .iter()
        .map(|&n| (n, compose_image(state, n)))
        .collect();
    for &(u, v) in &exiting {
        let (f, means) = fill_posterior(state, k, (u, v), &means_rev);
        for ch in 0..c {
            let v_old = saved_canvas[(u, v, ch)];
            log_acc += log_normal(v_old, means[ch], f) - log_normal(v_old, 0.0, var_a);
        }
    }

    // Apply the shift: content moves opposite the window, transformations
    // move with it.
    let mut canvas = Array3::zeros((fh, fw, c));
    for u in 0..fh {
        for v in 0..fw {
            let (su, sv) = (u as i64 + d.0, v as i64 + d.1);
            if su >= 0 && sv >= 0 && su < fh as i64 && sv < fw as i64 {
                for ch in 0..c {
                    canvas[(u, v, ch)] = saved_canvas[(su as usize, sv as usize, ch)];
                }
            }
        }
    }
    state.features[k].canvas = canvas;
    for (i, &n) in users.iter().enumerate() {
        state.transforms[n][k] = Some(new_transforms[i]);
    }
    if state.variant.is_masked() {
        for &n in &users {
            let old = state.masks[n][k].as_ref().expect("user has mask");
            let mut shifted = Array2::zeros((fh, fw));
            for u in 0..fh {
                for v in 0..fw {
                    let (su, sv) = (u as i64 + d.0, v as i64 + d.1);
                    if su >= 0 && sv >= 0 && su < fh as i64 && sv < fw as i64 {
                        shifted[(u, v)] = old[(su as usize, sv as usize)];
                    }
                }
            }
            state.masks[n][k] = Some(shifted);
        }
        // Entering mask bits from the sequential conditional prior; the
        // density cancels against the mask prior on both sides.
        let beta = state.hyper.beta;
        for &(u, v) in &entering {
            let mut ones = 0.0;
            for (i, &n) in users.iter().enumerate() {
                let p = (ones + beta) / (i as f64 + 2.0 * beta);
                let bit = u8::from(rng.random::<f64>() < p);
                state.masks[n][k].as_mut().unwrap()[(u, v)] = bit;
                ones += f64::from(bit);
            }
        }
    }

    // Forward fill of the entering cells.
    let means_fwd: Vec<(usize, Array3<f64>)> = users
        .iter()
        .map(|&n| (n, compose_image(state, n)))
        .collect();
    for &(u, v) in &entering {
        let (f, means) = fill_posterior(state, k, (u, v), &means_fwd);
        let sd = f.sqrt();
        for ch in 0..c {
            let value = Normal::new(means[ch], sd).unwrap().sample(rng);
            state.features[k].canvas[(u, v, ch)] = value;
            log_acc += log_normal(value, 0.0, var_a) - log_normal(value, means[ch], f);
        }
    }

    let ll_new: f64 = users
        .iter()
        .map(|&n| state_image_log_likelihood(state, n))
        .sum();
    let log_ratio = ll_new - ll_old + log_acc;
    if rng.random::<f64>().ln() < log_ratio {
        Ok(true)
    } else {
        state.features[k].canvas = saved_canvas;
        for (i, &n) in users.iter().enumerate() {
            state.transforms[n][k] = Some(saved_transforms[i]);
            state.masks[n][k] = saved_masks[i].clone();
        }
        Ok(false)
    }
}

/// Gibbs-sample one mask bit from likelihood times conditional prior.
pub fn gibbs_mask_pixel<R: Rng>(
    state: &mut ModelState,
    n: usize,
    k: usize,
    d: (usize, usize),
    rng: &mut R,
) -> Result<u8> {
    if !state.variant.is_masked() {
        return Err(Error::Variant("mask Gibbs requires the masked variant".into()));
    }
    if !state.z[n][k] {
        return Err(Error::Domain(format!("pair ({n}, {k}) is inactive")));
    }
    let p1 = mask_proposal_probability(state, n, k, d);
    let t = state.transforms[n][k].clone().expect("active pair has transform");
    let affected: Vec<(usize, usize)> = landing_pixels(&state.space, &t, d.0, d.1).collect();
    let mut logit = p1.ln() - (1.0 - p1).ln();
    if !affected.is_empty() {
        let var_x = state.hyper.sigma_x * state.hyper.sigma_x;
        let x = state.data.image(n);
        let c = state.data.channels();
        for &(y, xx) in &affected {
            for bit in [1u8, 0u8] {
                let winner = winner_at(state, n, y, xx, Some((k, d, bit)));
                let mut q = 0.0;
                for ch in 0..c {
                    let mean = winner
                        .map(|w| {
                            let tw = state.transforms[n][w].as_ref().unwrap();
                            let (cy, cx) =
                                crate::transform::inverse_pixel_map(&state.space, tw, y, xx)
                                    .expect("winner in support");
                            state.features[w].canvas[(cy, cx, ch)]
                        })
                        .unwrap_or(0.0);
                    let diff = x[(y, xx, ch)] - mean;
                    q += diff * diff;
                }
                let term = -q / (2.0 * var_x);
                if bit == 1 {
                    logit += term;
                } else {
                    logit -= term;
                }
            }
        }
    }
    let p = 1.0 / (1.0 + (-logit).exp());
    let bit = u8::from(rng.random::<f64>() < p);
    state.masks[n][k].as_mut().expect("active pair has mask")[d] = bit;
    Ok(bit)
}

/// Propose swapping a uniformly chosen adjacent pair of depth ranks.
pub fn mh_swap_adjacent_order<R: Rng>(state: &mut ModelState, rng: &mut R) -> Result<bool> {
    if !state.variant.is_masked() {
        return Err(Error::Variant("order swaps require the masked variant".into()));
    }
    let k = state.depth_order.len();
    if k < 2 {
        return Ok(false);
    }
    let i = rng.random_range(0..k - 1);
    let (a, b) = (state.depth_order[i], state.depth_order[i + 1]);
    // Only images using both features see a likelihood change.
    let affected: Vec<usize> = (0..state.n_images())
        .filter(|&n| state.z[n][a] && state.z[n][b])
        .collect();
    let ll_before: f64 = affected
        .iter()
        .map(|&n| state_image_log_likelihood(state, n))
        .sum();
    state.depth_order.swap(i, i + 1);
    let ll_after: f64 = affected
        .iter()
        .map(|&n| state_image_log_likelihood(state, n))
        .sum();
    let log_ratio = ll_after - ll_before;
    if rng.random::<f64>().ln() < log_ratio {
        Ok(true)
    } else {
        state.depth_order.swap(i, i + 1);
        Ok(false)
    }
}

/// Conditional mean and variance of one feature pixel/channel given the
/// rest of the state.
pub fn feature_pixel_posterior(
    state: &ModelState,
    k: usize,
    d: (usize, usize),
    channel: usize,
) -> (f64, f64) {
    let var_a = state.hyper.sigma_a * state.hyper.sigma_a;
    let var_x = state.hyper.sigma_x * state.hyper.sigma_x;
    let mut count = 0.0;
    let mut sum = 0.0;
    for n in 0..state.n_images() {
        if !state.z[n][k] {
            continue;
        }
        let t = state.transforms[n][k].as_ref().unwrap();
        for (y, x) in landing_pixels(&state.space, t, d.0, d.1) {
            match state.variant {
                Variant::MTibp => {
                    if winner_at(state, n, y, x, None) == Some(k) {
                        count += 1.0;
                        sum += state.data.image(n)[(y, x, channel)];
                    }
                }
                _ => {
                    count += 1.0;
                    let mut others = 0.0;
                    for j in 0..state.k() {
                        if j == k || !state.z[n][j] {
                            continue;
                        }
                        let tj = state.transforms[n][j].as_ref().unwrap();
                        if let Some((cy, cx)) =
                            crate::transform::inverse_pixel_map(&state.space, tj, y, x)
                        {
                            others += state.features[j].canvas[(cy, cx, channel)];
                        }
                    }
                    sum += state.data.image(n)[(y, x, channel)] - others;
                }
            }
        }
    }
    let f = 1.0 / (1.0 / var_a + count / var_x);
    (f * sum / var_x, f)
}

/// Gibbs-sample one feature pixel/channel from its conjugate conditional.
pub fn gibbs_feature_pixel<R: Rng>(
    state: &mut ModelState,
    k: usize,
    d: (usize, usize),
    channel: usize,
    rng: &mut R,
) -> f64 {
    let (mean, var) = feature_pixel_posterior(state, k, d, channel);
    let v = Normal::new(mean, var.sqrt()).unwrap().sample(rng);
    state.features[k].canvas[(d.0, d.1, channel)] = v;
    v
}

/// Gibbs-sample every feature pixel in canonical order, sharing the
/// per-image bookkeeping across pixels of a feature.
fn gibbs_all_features<R: Rng>(state: &mut ModelState, rng: &mut R) {
    let var_a = state.hyper.sigma_a * state.hyper.sigma_a;
    let var_x = state.hyper.sigma_x * state.hyper.sigma_x;
    let (fh, fw) = (state.space.canvas_h(), state.space.canvas_w());
    let c = state.data.channels();
    // Visibility depends on masks, order and transformations only, all
    // fixed during this phase.
    let winners: Option<Vec<Visibility>> = state.variant.is_masked().then(|| {
        parallel::map_indexed(state.n_images(), |n| {
            crate::likelihood::visibility_indicators(state, n).expect("masked variant")
        })
    });
    for k in 0..state.k() {
        let users: Vec<usize> = (0..state.n_images()).filter(|&n| state.z[n][k]).collect();
        // Reference excludes feature k, so updates within k stay consistent.
        let references: Option<Vec<Array3<f64>>> = (!state.variant.is_masked()).then(|| {
            parallel::map_indexed(users.len(), |i| {
                compose_image_excluding(state, users[i], k)
            })
        });
        let mut counts = Array2::<f64>::zeros((fh, fw));
        let mut sums = Array3::<f64>::zeros((fh, fw, c));
        for (i, &n) in users.iter().enumerate() {
            let t = state.transforms[n][k].clone().unwrap();
            let x = state.data.image(n);
            for dy in 0..fh {
                for dx in 0..fw {
                    for (y, xx) in landing_pixels(&state.space, &t, dy, dx) {
                        match (&winners, &references) {
                            (Some(w), _) => {
                                if w[n].is_visible(k, y, xx) {
                                    counts[(dy, dx)] += 1.0;
                                    for ch in 0..c {
                                        sums[(dy, dx, ch)] += x[(y, xx, ch)];
                                    }
                                }
                            }
                            (None, Some(refs)) => {
                                counts[(dy, dx)] += 1.0;
                                for ch in 0..c {
                                    sums[(dy, dx, ch)] += x[(y, xx, ch)] - refs[i][(y, xx, ch)];
                                }
                            }
                            _ => unreachable!(),
                        }
                    }
                }
            }
        }
        for dy in 0..fh {
            for dx in 0..fw {
                let f = 1.0 / (1.0 / var_a + counts[(dy, dx)] / var_x);
                for ch in 0..c {
                    let mean = f * sums[(dy, dx, ch)] / var_x;
                    let v = Normal::new(mean, f.sqrt()).unwrap().sample(rng);
                    state.features[k].canvas[(dy, dx, ch)] = v;
                }
            }
        }
    }
}

/// Harmonic number `H_N`.
pub fn harmonic(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / i as f64).sum()
}

/// Gibbs-sample alpha, sigma_x^2 and sigma_a^2 from their conjugate
/// conditionals.
pub fn gibbs_hyperparameters<R: Rng>(state: &mut ModelState, rng: &mut R) {
    let n = state.n_images();
    let h_n = harmonic(n);
    let k_plus = state.k_plus();
    let shape = state.hyper.alpha_shape + k_plus as f64;
    let rate = state.hyper.alpha_rate + h_n;
    state.hyper.alpha = Gamma::new(shape, 1.0 / rate).unwrap().sample(rng);

    let entries = (n * state.data.pixels() * state.data.channels()) as f64;
    let sse: f64 = parallel::map_indexed(n, |i| {
        let mean = compose_image(state, i);
        state
            .data
            .image(i)
            .iter()
            .zip(mean.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    })
    .into_iter()
    .sum();
    let shape_x = state.hyper.sigma_x_shape + entries / 2.0;
    let b_x = state.hyper.sigma_x_scale + sse / 2.0;
    let precision = Gamma::new(shape_x, 1.0 / b_x).unwrap().sample(rng);
    state.hyper.sigma_x = (1.0 / precision).sqrt();

    let feat_entries = (state.k()
        * state.space.canvas_h()
        * state.space.canvas_w()
        * state.data.channels()) as f64;
    let feat_sq: f64 = state
        .features
        .iter()
        .map(|f| f.canvas.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let shape_a = state.hyper.sigma_a_shape + feat_entries / 2.0;
    let b_a = state.hyper.sigma_a_scale + feat_sq / 2.0;
    let precision_a = Gamma::new(shape_a, 1.0 / b_a).unwrap().sample(rng);
    state.hyper.sigma_a = (1.0 / precision_a).sqrt();
}

/// Exact conditional of `(z_nk, r_nk)` computed by enumerating every
/// transformation with a full likelihood evaluation each.
#[derive(Debug, Clone)]
pub struct NaiveConditional {
    pub log_weight_off: f64,
    pub log_weights_on: Vec<f64>,
}

impl NaiveConditional {
    pub fn probabilities(&self) -> (f64, Vec<f64>) {
        let max = self
            .log_weights_on
            .iter()
            .cloned()
            .fold(self.log_weight_off, f64::max);
        let off = (self.log_weight_off - max).exp();
        let on: Vec<f64> = self.log_weights_on.iter().map(|w| (w - max).exp()).collect();
        let z = off + on.iter().sum::<f64>();
        (off / z, on.iter().map(|w| w / z).collect())
    }
}

/// Enumerate the exact conditional for a shared feature of a linear
/// Gaussian state. Deliberately evaluates the full image likelihood for
/// every transformation; this is the baseline whose cost the
/// cross-correlation sampler avoids.
pub fn naive_conditional(state: &ModelState, n: usize, k: usize) -> Result<NaiveConditional> {
    if state.variant.is_masked() {
        return Err(Error::Variant(
            "the enumeration sampler is defined for linear Gaussian variants".into(),
        ));
    }
    let m_other = state.usage_excluding(n, k);
    if m_other == 0 {
        return Err(Error::Domain(format!(
            "feature {k} is private to image {n}; enumeration requires another user"
        )));
    }
    let n_images = state.n_images() as f64;
    let t_count = state.space.len();
    let base = compose_image_excluding(state, n, k);
    let x = state.data.image(n);
    let sigma = state.hyper.sigma_x;
    let ll_off = image_log_likelihood(x, &base, sigma)?;
    let log_weight_off = ((n_images - m_other as f64) / n_images).ln() + ll_off;
    let log_prior_on = (m_other as f64 / n_images).ln() - (t_count as f64).ln();
    let mut log_weights_on = Vec::with_capacity(t_count);
    for flat in 0..t_count {
        let t = state.space.transformation(flat);
        let mut mean = base.clone();
        crate::transform::render_accumulate(
            &mut mean,
            &state.features[k].canvas,
            &t,
            &state.space,
            1.0,
        );
        let ll = image_log_likelihood(x, &mean, sigma)?;
        log_weights_on.push(log_prior_on + ll);
    }
    Ok(NaiveConditional {
        log_weight_off,
        log_weights_on,
    })
}

/// Gibbs-sample `(z_nk, r_nk)` from the exact enumerated conditional.
/// Returns true when the state changed.
pub fn naive_enumeration_update<R: Rng>(
    state: &mut ModelState,
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<bool> {
    let cond = naive_conditional(state, n, k)?;
    let (p_off, p_on) = cond.probabilities();
    let u = rng.random::<f64>();
    let before = (state.z[n][k], state.transforms[n][k].clone());
    if u < p_off {
        state.z[n][k] = false;
        state.transforms[n][k] = None;
    } else {
        let mut acc = p_off;
        let mut chosen = p_on.len() - 1;
        for (flat, p) in p_on.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = flat;
                break;
            }
        }
        state.z[n][k] = true;
        state.transforms[n][k] = Some(state.space.transformation(chosen));
    }
    Ok((state.z[n][k], state.transforms[n][k].clone()) != before)
}

/// Log Gamma density with shape/rate parameterization.
fn log_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Log inverse-Gamma density.
fn log_inv_gamma_pdf(x: f64, shape: f64, scale: f64) -> f64 {
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Joint log density of data and latent state (up to constants that do
/// not depend on the state): data likelihood, feature and mask priors,
/// the exchangeable IBP prior over Z, uniform transformation and order
/// priors, and the hyperparameter priors.
pub fn log_joint(state: &ModelState) -> f64 {
    let mut total = data_log_likelihood(state);
    let var_a = state.hyper.sigma_a * state.hyper.sigma_a;
    for f in &state.features {
        for &v in f.canvas.iter() {
            total += log_normal(v, 0.0, var_a);
        }
    }
    let n = state.n_images();
    let used: Vec<usize> = (0..state.k()).filter(|&k| state.usage(k) > 0).collect();
    let k_plus = used.len();
    let alpha = state.hyper.alpha;
    total += k_plus as f64 * alpha.ln() - alpha * harmonic(n);
    let mut histories: std::collections::BTreeMap<Vec<bool>, f64> = Default::default();
    for &k in &used {
        let m = state.usage(k);
        total += ln_gamma((n - m + 1) as f64) + ln_gamma(m as f64) - ln_gamma((n + 1) as f64);
        let column: Vec<bool> = (0..n).map(|i| state.z[i][k]).collect();
        *histories.entry(column).or_default() += 1.0;
    }
    for count in histories.values() {
        total -= ln_gamma(count + 1.0);
    }
    let active = state
        .z
        .iter()
        .map(|row| row.iter().filter(|&&b| b).count())
        .sum::<usize>() as f64;
    total -= active * (state.space.len() as f64).ln();
    if state.variant.is_masked() {
        let beta = state.hyper.beta;
        for &k in &used {
            let m = state.usage(k) as f64;
            for dy in 0..state.space.canvas_h() {
                for dx in 0..state.space.canvas_w() {
                    let ones: f64 = (0..n)
                        .filter_map(|i| state.masks[i][k].as_ref())
                        .map(|mask| f64::from(mask[(dy, dx)]))
                        .sum();
                    total += ln_beta(beta + ones, beta + m - ones) - ln_beta(beta, beta);
                }
            }
        }
        total -= ln_gamma(k_plus as f64 + 1.0);
    }
    total += log_gamma_pdf(alpha, state.hyper.alpha_shape, state.hyper.alpha_rate);
    total += log_inv_gamma_pdf(
        state.hyper.sigma_x * state.hyper.sigma_x,
        state.hyper.sigma_x_shape,
        state.hyper.sigma_x_scale,
    );
    total += log_inv_gamma_pdf(
        var_a,
        state.hyper.sigma_a_shape,
        state.hyper.sigma_a_scale,
    );
    total
}

/// One full sweep over the schedule. `kind` selects the z/r strategy for
/// shared features; everything else is common.
pub fn sweep(state: &mut ModelState, kind: SamplerKind) -> Result<SweepReport> {
    if kind == SamplerKind::Naive && state.variant.is_masked() {
        return Err(Error::Variant(
            "the enumeration sampler does not support the masked variant".into(),
        ));
    }
    let mut rng = state.rng.clone();
    let mut report = SweepReport {
        iteration: state.iteration,
        joint_log_likelihood: 0.0,
        k_plus: 0,
        flips: MoveStats::default(),
        exchanges: MoveStats::default(),
        births_accepted: 0,
        resamples: MoveStats::default(),
        order_swaps: MoveStats::default(),
        recenters: MoveStats::default(),
        phase_seconds: [0.0; 8],
    };

    // Phase 1: per-image z (and r, s) updates for shared features. When
    // a feature with very few users gains one, its window gets a recenter
    // burst right away: the adopter's full view of the pattern is the
    // first evidence about content beyond a cropped window, and the gap
    // must move into the window before other moves explain it away.
    let t0 = Instant::now();
    let recenter_attempts = state.space.canvas_h() + state.space.canvas_w();
    for n in 0..state.n_images() {
        for k in 0..state.k() {
            if state.usage_excluding(n, k) == 0 {
                // Private or unused columns belong to the exchange move.
                continue;
            }
            let was_active = state.z[n][k];
            report.flips.proposed += 1;
            let accepted = match kind {
                SamplerKind::Mh => mh_update_feature_use(state, n, k, &mut rng)?,
                SamplerKind::Naive => naive_enumeration_update(state, n, k, &mut rng)?,
            };
            if accepted {
                report.flips.accepted += 1;
                if !was_active && state.z[n][k] && state.usage(k) <= 4 {
                    for _ in 0..recenter_attempts {
                        report.recenters.proposed += 1;
                        if mh_recenter_feature(state, k, &mut rng)? {
                            report.recenters.accepted += 1;
                        }
                    }
                }
            }
        }
    }
    report.phase_seconds[0] = t0.elapsed().as_secs_f64();

    // Phase 2: singleton exchange (births and deaths). Accepted newborns
    // get an immediate recenter burst while they are still singletons, so
    // a window that captured a cropped view locks onto the full pattern
    // before other moves react to the leftover gap.
    let t1 = Instant::now();
    let recenter_attempts = state.space.canvas_h() + state.space.canvas_w();
    for n in 0..state.n_images() {
        if state.birth_attempt_rate < 1.0 && rng.random::<f64>() >= state.birth_attempt_rate {
            continue;
        }
        let outcome = mh_birth_new_features(state, n, &mut rng)?;
        if outcome.proposed {
            report.exchanges.proposed += 1;
            if outcome.accepted {
                report.exchanges.accepted += 1;
                report.births_accepted += outcome.newborns as u64;
                for k in state.k() - outcome.newborns..state.k() {
                    for _ in 0..recenter_attempts {
                        report.recenters.proposed += 1;
                        if mh_recenter_feature(state, k, &mut rng)? {
                            report.recenters.accepted += 1;
                        }
                    }
                }
            }
        }
    }
    report.phase_seconds[1] = t1.elapsed().as_secs_f64();

    // Phase 3: transformation/mask resampling for active pairs.
    let t2 = Instant::now();
    if kind == SamplerKind::Mh {
        for n in 0..state.n_images() {
            for k in 0..state.k() {
                if state.z[n][k] {
                    report.resamples.proposed += 1;
                    if resample_transform_and_mask(state, n, k, &mut rng)? {
                        report.resamples.accepted += 1;
                    }
                }
            }
        }
    }
    report.phase_seconds[2] = t2.elapsed().as_secs_f64();

    // Phase 4: mask Gibbs over all active canvas pixels.
    let t3 = Instant::now();
    if state.variant.is_masked() {
        for n in 0..state.n_images() {
            for k in 0..state.k() {
                if !state.z[n][k] {
                    continue;
                }
                for dy in 0..state.space.canvas_h() {
                    for dx in 0..state.space.canvas_w() {
                        gibbs_mask_pixel(state, n, k, (dy, dx), &mut rng)?;
                    }
                }
            }
        }
    }
    report.phase_seconds[3] = t3.elapsed().as_secs_f64();

    // Phase 5: adjacent order swaps.
    let t4 = Instant::now();
    if state.variant.is_masked() {
        for _ in 0..state.k() {
            if state.k() < 2 {
                break;
            }
            report.order_swaps.proposed += 1;
            if mh_swap_adjacent_order(state, &mut rng)? {
                report.order_swaps.accepted += 1;
            }
        }
    }
    report.phase_seconds[4] = t4.elapsed().as_secs_f64();

    // Phase 6: recentering attempts, then conjugate feature Gibbs.
    let t5 = Instant::now();
    for k in 0..state.k() {
        if state.usage(k) == 0 {
            continue;
        }
        for _ in 0..recenter_attempts {
            report.recenters.proposed += 1;
            if mh_recenter_feature(state, k, &mut rng)? {
                report.recenters.accepted += 1;
            }
        }
    }
    gibbs_all_features(state, &mut rng);
    report.phase_seconds[5] = t5.elapsed().as_secs_f64();

    // Phase 7: conjugate hyperparameter Gibbs.
    let t6 = Instant::now();
    gibbs_hyperparameters(state, &mut rng);
    report.phase_seconds[6] = t6.elapsed().as_secs_f64();

    // Phase 8: prune empty columns and refresh shape summaries.
    let t7 = Instant::now();
    state.prune_empty_features();
    state.refresh_shapes();
    report.phase_seconds[7] = t7.elapsed().as_secs_f64();

    state.rng = rng;
    state.iteration += 1;
    report.joint_log_likelihood = log_joint(state);
    report.k_plus = state.k_plus();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::{normalize_dataset, Dataset};
    use crate::model::init_state;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn dataset_1d(rows: &[Vec<f64>]) -> Arc<Dataset> {
        let images = rows
            .iter()
            .map(|r| Array3::from_shape_fn((1, r.len(), 1), |(_, x, _)| r[x]))
            .collect();
        Arc::new(Dataset::new(images).unwrap())
    }

    fn lg_state(rows: &[Vec<f64>], fw: usize) -> ModelState {
        let cfg = RunConfig {
            variant: Variant::LgTibp,
            feature_height: 1,
            feature_width: fw,
            seed: 5,
            ..RunConfig::default()
        };
        init_state(dataset_1d(rows), &cfg).unwrap()
    }

    fn m_state(rows: &[Vec<f64>], fw: usize) -> ModelState {
        let cfg = RunConfig {
            variant: Variant::MTibp,
            feature_height: 1,
            feature_width: fw,
            seed: 5,
            ..RunConfig::default()
        };
        init_state(dataset_1d(rows), &cfg).unwrap()
    }

    fn canvas_row(vals: &[f64]) -> Array3<f64> {
        Array3::from_shape_fn((1, vals.len(), 1), |(_, x, _)| vals[x])
    }

    fn activate(state: &mut ModelState, n: usize, k: usize, t: Transformation) {
        state.z[n][k] = true;
        state.transforms[n][k] = Some(t);
        if state.variant.is_masked() {
            state.masks[n][k] = Some(ndarray::Array2::from_elem(
                (state.space.canvas_h(), state.space.canvas_w()),
                1,
            ));
        }
    }

    #[test]
    fn flip_prior_ratio_example() {
        // Equal likelihoods, m = 3, N = 4, q_r = 1/T: ratio is exactly 3.
        let log_t = 16.0f64.ln();
        let ratio = flip_on_log_prior_ratio(3, 4, log_t, -log_t);
        assert_abs_diff_eq!(ratio.exp(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn flip_ratios_are_reciprocal() {
        let log_t = 9.0f64.ln();
        let log_qr = -2.345;
        let on = flip_on_log_prior_ratio(2, 7, log_t, log_qr);
        // The 1 -> 0 move negates the same prior/proposal bundle.
        assert_abs_diff_eq!(on + (-on), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            on,
            (2.0f64 / 5.0).ln() - log_t - log_qr,
            epsilon = 1e-12
        );
    }

    #[test]
    fn mask_proposal_examples() {
        // 4 images: three other users, two with the bit on, beta = 1.
        let mut state = m_state(
            &[
                vec![0.0, 1.0],
                vec![1.0, 0.0],
                vec![0.5, 0.5],
                vec![1.0, 1.0],
            ],
            2,
        );
        state.push_feature(canvas_row(&[1.0, 1.0]));
        for n in 1..4 {
            { let id = state.space.identity(); activate(&mut state, n, 0, id); };
        }
        state.masks[3][0].as_mut().unwrap()[(0, 0)] = 0;
        assert_abs_diff_eq!(
            mask_proposal_probability(&state, 0, 0, (0, 0)),
            0.6,
            epsilon = 1e-12
        );

        // No other users: prior mean 1/2 regardless of beta.
        let mut lone = m_state(&[vec![0.0, 1.0], vec![1.0, 0.0]], 2);
        lone.push_feature(canvas_row(&[1.0, 1.0]));
        assert_abs_diff_eq!(
            mask_proposal_probability(&lone, 0, 0, (0, 1)),
            0.5,
            epsilon = 1e-12
        );

        // All other users on, beta -> 0+: probability -> 1.
        state.masks[3][0].as_mut().unwrap()[(0, 0)] = 1;
        state.hyper.beta = 1e-12;
        let p = mask_proposal_probability(&state, 0, 0, (0, 0));
        assert!(p > 1.0 - 1e-9);
    }

    #[test]
    fn flips_require_another_user() {
        let mut state = lg_state(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2);
        state.push_feature(canvas_row(&[1.0, 0.0]));
        { let id = state.space.identity(); activate(&mut state, 0, 0, id); };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mh_update_feature_use(&mut state, 0, 0, &mut rng).is_err());
    }

    #[test]
    fn resample_requires_active_pair() {
        let mut state = lg_state(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2);
        state.push_feature(canvas_row(&[1.0, 0.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(resample_transform_and_mask(&mut state, 0, 0, &mut rng).is_err());
    }

    #[test]
    fn self_proposal_always_accepts() {
        // Identity-only space: the resample proposal can only return the
        // current transformation, so the ratio is exactly one.
        let cfg = RunConfig {
            variant: Variant::IbpLg,
            feature_height: 1,
            feature_width: 2,
            ..RunConfig::default()
        };
        let mut state = init_state(dataset_1d(&[vec![1.0, 0.0], vec![0.0, 1.0]]), &cfg).unwrap();
        state.push_feature(canvas_row(&[0.3, 0.4]));
        { let id = state.space.identity(); activate(&mut state, 0, 0, id); };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            assert!(resample_transform_and_mask(&mut state, 0, 0, &mut rng).unwrap());
        }
    }

    #[test]
    fn gibbs_mask_prior_only_when_out_of_frame() {
        // Canvas pixel 1 lands out of frame under x = W - 1; the bit is then
        // drawn from the conditional prior alone (0.6 fixture).
        let mut state = m_state(
            &[
                vec![0.0, 1.0, 0.0],
                vec![1.0, 0.0, 0.5],
                vec![0.5, 0.5, 0.2],
                vec![1.0, 1.0, 0.3],
            ],
            2,
        );
        state.push_feature(canvas_row(&[1.0, 1.0]));
        for n in 0..4 {
            activate(&mut state, n, 0, Transformation { x: 2, y: 0, rotation: 0, scale: 0 });
        }
        state.masks[3][0].as_mut().unwrap()[(0, 1)] = 0;
        // For image 0: other users 1, 2, 3 with bits 1, 1, 0 and beta = 1
        // give p(on) = (2 + 1) / (3 + 2) = 0.6.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 20_000;
        let mut on = 0u32;
        for _ in 0..draws {
            if gibbs_mask_pixel(&mut state, 0, 0, (0, 1), &mut rng).unwrap() == 1 {
                on += 1;
            }
        }
        let p_hat = f64::from(on) / f64::from(draws);
        let se = (0.6 * 0.4 / f64::from(draws)).sqrt();
        assert!((p_hat - 0.6).abs() < 4.0 * se, "p_hat = {p_hat}");
    }

    #[test]
    fn gibbs_mask_gaussian_ratio() {
        // One user, prior 1/2; masking the pixel changes one squared error
        // from 0 to 8 with sigma_x = 1, so p(off) = e^-4 / (1 + e^-4).
        let v = 8.0f64.sqrt();
        let mut state = m_state(&[vec![v, 0.0], vec![0.0, 0.0]], 1);
        state.push_feature(canvas_row(&[v]));
        { let id = state.space.identity(); activate(&mut state, 0, 0, id); };
        let expect = (-4.0f64).exp() / (1.0 + (-4.0f64).exp());
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let draws = 40_000;
        let mut off = 0u32;
        for _ in 0..draws {
            state.masks[0][0].as_mut().unwrap()[(0, 0)] = 1;
            if gibbs_mask_pixel(&mut state, 0, 0, (0, 0), &mut rng).unwrap() == 0 {
                off += 1;
            }
        }
        let p_hat = f64::from(off) / f64::from(draws);
        let se = (expect * (1.0 - expect) / f64::from(draws)).sqrt();
        assert!((p_hat - expect).abs() < 4.0 * se, "p_hat = {p_hat}, expect = {expect}");
    }

    #[test]
    fn swap_without_cooccurrence_always_accepts() {
        let mut state = m_state(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2);
        state.push_feature(canvas_row(&[1.0, 0.0]));
        state.push_feature(canvas_row(&[0.0, 1.0]));
        { let id = state.space.identity(); activate(&mut state, 0, 0, id); };
        { let id = state.space.identity(); activate(&mut state, 1, 1, id); };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            assert!(mh_swap_adjacent_order(&mut state, &mut rng).unwrap());
        }
    }

    #[test]
    fn swap_that_uncovers_better_fit_is_accepted() {
        // Data equals the back feature; the wrong feature sits in front.
        let mut state = m_state(&[vec![2.0, 2.0], vec![0.0, 0.0]], 2);
        state.push_feature(canvas_row(&[2.0, 2.0])); // rank 1 (behind)
        state.push_feature(canvas_row(&[-5.0, -5.0])); // rank 2 (front)
        { let id = state.space.identity(); activate(&mut state, 0, 0, id); };
        { let id = state.space.identity(); activate(&mut state, 0, 1, id); };
        state.hyper.sigma_x = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(mh_swap_adjacent_order(&mut state, &mut rng).unwrap());
        assert_eq!(state.depth_order, vec![1, 0]);
    }

    #[test]
    fn swap_is_noop_below_two_features() {
        let mut state = m_state(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(!mh_swap_adjacent_order(&mut state, &mut rng).unwrap());
    }

    #[test]
    fn feature_pixel_posterior_closed_form() {
        // sigma_a = sigma_x = 1, one visible image with data value 2:
        // F = 1/2, mean = 1.
        let mut state = lg_state(&[vec![2.0, 0.0], vec![0.0, 0.0]], 1);
        state.push_feature(canvas_row(&[0.0]));
        { let id = state.space.identity(); activate(&mut state, 0, 0, id); };
        let (mean, var) = feature_pixel_posterior(&state, 0, (0, 0), 0);
        assert_abs_diff_eq!(var, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(mean, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn feature_pixel_prior_when_unseen() {
        let mut state = lg_state(&[vec![2.0, 0.0], vec![0.0, 0.0]], 1);
        state.hyper.sigma_a = 1.7;
        state.push_feature(canvas_row(&[0.0]));
        let (mean, var) = feature_pixel_posterior(&state, 0, (0, 0), 0);
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var, 1.7 * 1.7, epsilon = 1e-12);
    }

    #[test]
    fn feature_pixel_posterior_concentrates() {
        // Many users all showing value v: the mean approaches v.
        let v = 1.5;
        let rows: Vec<Vec<f64>> = (0..200).map(|_| vec![v, 0.0]).collect();
        let mut state = lg_state(&rows, 1);
        state.push_feature(canvas_row(&[0.0]));
        for n in 0..200 {
            { let id = state.space.identity(); activate(&mut state, n, 0, id); };
        }
        let (mean, var) = feature_pixel_posterior(&state, 0, (0, 0), 0);
        assert!((mean - v).abs() < 0.02);
        assert!(var < 0.006);
    }

    #[test]
    fn gibbs_feature_pixel_matches_closed_form_moments() {
        let mut state = lg_state(&[vec![2.0, 0.0], vec![0.0, 0.0]], 1);
        state.push_feature(canvas_row(&[0.0]));
        { let id = state.space.identity(); activate(&mut state, 0, 0, id); };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = 10_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..draws {
            // Keep the conditional fixed: the update writes the canvas, so
            // reset it (the conditional does not depend on the pixel itself).
            let v = gibbs_feature_pixel(&mut state, 0, (0, 0), 0, &mut rng);
            sum += v;
            sq += v * v;
        }
        let mean = sum / draws as f64;
        let var = sq / draws as f64 - mean * mean;
        let se_mean = (0.5f64 / draws as f64).sqrt();
        assert!((mean - 1.0).abs() < 4.0 * se_mean, "mean = {mean}");
        let se_var = 0.5 * (2.0f64 / draws as f64).sqrt();
        assert!((var - 0.5).abs() < 4.0 * se_var, "var = {var}");
    }

    #[test]
    fn alpha_update_moments() {
        // a = b = 1, K+ = 2, N = 1 (H_1 = 1): alpha ~ Gamma(3, 2), mean 1.5.
        let mut state = lg_state(&[vec![1.0, 0.0]], 1);
        state.hyper.alpha_shape = 1.0;
        state.hyper.alpha_rate = 1.0;
        state.push_feature(canvas_row(&[1.0]));
        state.push_feature(canvas_row(&[0.5]));
        { let id = state.space.identity(); activate(&mut state, 0, 0, id); };
        { let id = state.space.identity(); activate(&mut state, 0, 1, id); };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws = 10_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..draws {
            let saved = state.hyper.clone();
            gibbs_hyperparameters(&mut state, &mut rng);
            sum += state.hyper.alpha;
            sq += state.hyper.alpha * state.hyper.alpha;
            state.hyper = saved;
        }
        let mean = sum / draws as f64;
        let var = sq / draws as f64 - mean * mean;
        // Gamma(3, rate 2): mean 1.5, var 0.75.
        let se_mean = (0.75f64 / draws as f64).sqrt();
        assert!((mean - 1.5).abs() < 4.0 * se_mean, "mean = {mean}");
        assert!((var - 0.75).abs() < 0.1, "var = {var}");
        assert!(state.hyper.alpha > 0.0 && state.hyper.sigma_x > 0.0 && state.hyper.sigma_a > 0.0);
    }

    #[test]
    fn alpha_update_with_no_features() {
        // K+ = 0: the posterior is Gamma(a, b + H_N).
        let mut state = lg_state(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1);
        state.hyper.alpha_shape = 3.0;
        state.hyper.alpha_rate = 2.0;
        let h2 = 1.5;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draws = 10_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            let saved = state.hyper.clone();
            gibbs_hyperparameters(&mut state, &mut rng);
            sum += state.hyper.alpha;
            state.hyper = saved;
        }
        let mean = sum / draws as f64;
        let expect = 3.0 / (2.0 + h2);
        let sd = (3.0f64).sqrt() / (2.0 + h2);
        assert!((mean - expect).abs() < 4.0 * sd / (draws as f64).sqrt(), "mean = {mean}");
    }

    #[test]
    fn naive_requires_lg_and_sharing() {
        let mut mstate = m_state(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2);
        mstate.push_feature(canvas_row(&[1.0, 0.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(naive_enumeration_update(&mut mstate, 0, 0, &mut rng).is_err());

        let mut state = lg_state(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2);
        state.push_feature(canvas_row(&[1.0, 0.0]));
        assert!(naive_conditional(&state, 0, 0).is_err());
    }

    #[test]
    fn naive_conditional_matches_direct_oracle() {
        let mut state = lg_state(&[vec![0.9, -0.3, 0.4], vec![0.1, 0.8, -0.6]], 2);
        state.push_feature(canvas_row(&[0.7, -0.2]));
        activate(&mut state, 0, 0, Transformation { x: 1, y: 0, rotation: 0, scale: 0 });
        let cond = naive_conditional(&state, 1, 0).unwrap();
        let (p_off, p_on) = cond.probabilities();

        // Oracle: enumerate (z, r) with explicit pixel arithmetic.
        let x = state.data.image(1).clone();
        let sigma = state.hyper.sigma_x;
        let t_count = state.space.len();
        let densities = |mean: &[f64]| -> f64 {
            let mut ll = 0.0;
            for (i, m) in mean.iter().enumerate() {
                let d = x[(0, i, 0)] - m;
                ll += -0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln()
                    - d * d / (2.0 * sigma * sigma);
            }
            ll
        };
        let mut raw = vec![(0.5f64.ln() + densities(&[0.0, 0.0, 0.0]), None)];
        for flat in 0..t_count {
            let t = state.space.transformation(flat);
            let mut mean = [0.0f64; 3];
            for cx in 0..2 {
                let px = cx as i64 + t.x;
                if (0..3).contains(&px) {
                    mean[px as usize] += state.features[0].canvas[(0, cx, 0)];
                }
            }
            raw.push((
                0.5f64.ln() - (t_count as f64).ln() + densities(&mean),
                Some(flat),
            ));
        }
        let max = raw.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = raw.iter().map(|r| (r.0 - max).exp()).sum();
        let oracle: Vec<f64> = raw.iter().map(|r| (r.0 - max).exp() / z).collect();
        assert_abs_diff_eq!(p_off, oracle[0], epsilon = 1e-10);
        for flat in 0..t_count {
            assert_abs_diff_eq!(p_on[flat], oracle[flat + 1], epsilon = 1e-10);
        }
    }

    #[test]
    fn naive_with_single_transformation_is_plain_ibp_gibbs() {
        let cfg = RunConfig {
            variant: Variant::IbpLg,
            feature_height: 1,
            feature_width: 2,
            ..RunConfig::default()
        };
        let mut state = init_state(dataset_1d(&[vec![1.0, 0.0], vec![0.9, 0.1]]), &cfg).unwrap();
        state.push_feature(canvas_row(&[1.0, 0.0]));
        { let id = state.space.identity(); activate(&mut state, 0, 0, id); };
        let cond = naive_conditional(&state, 1, 0).unwrap();
        assert_eq!(cond.log_weights_on.len(), 1);
        // Prior odds m/N vs (N - m)/N with the identity likelihoods.
        let (p_off, p_on) = cond.probabilities();
        assert_abs_diff_eq!(p_off + p_on[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn death_without_singletons_is_silent() {
        let mut state = lg_state(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2);
        state.hyper.alpha = 1e-9;
        // Seed 1 draws u >= 0.5 first, selecting the death branch.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut saw_silent = false;
        for _ in 0..4 {
            let out = mh_birth_new_features(&mut state, 0, &mut rng).unwrap();
            if !out.proposed {
                saw_silent = true;
            }
            assert_eq!(out.newborns == 1, out.accepted && out.newborns == 1);
        }
        assert!(saw_silent);
        // With alpha this small nothing should survive.
        assert_eq!(state.k_plus(), 0);
    }

    #[test]
    fn birth_death_targets_poisson_singleton_counts() {
        // With a flat likelihood (huge noise) every feature-level term
        // cancels and the singleton count of an image must be stationary
        // at Poisson(alpha / N).
        let mut state = lg_state(&[vec![0.4, -0.2], vec![0.1, 0.3]], 2);
        state.hyper.alpha = 1.0; // lambda = 0.5
        state.hyper.sigma_x = 1e6;
        let lambda: f64 = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut counts = [0u32; 16];
        let iterations = 60_000;
        for _ in 0..iterations {
            mh_birth_new_features(&mut state, 0, &mut rng).unwrap();
            let xi = (0..state.k())
                .filter(|&k| state.z[0][k] && state.usage(k) == 1)
                .count();
            counts[xi.min(15)] += 1;
        }
        let total: f64 = f64::from(iterations);
        // Compare P(0), P(1), P(2) against the Poisson pmf.
        let pmf = |k: u32| -> f64 {
            let mut f = 1.0;
            for i in 1..=k {
                f *= f64::from(i);
            }
            lambda.powi(k as i32) * (-lambda).exp() / f
        };
        for k in 0..3u32 {
            let p_hat = f64::from(counts[k as usize]) / total;
            let p = pmf(k);
            // Draws are autocorrelated; allow a generous band.
            assert!(
                (p_hat - p).abs() < 0.02,
                "P({k}) = {p_hat:.4}, expected {p:.4}"
            );
        }
    }

    #[test]
    fn exchange_births_explain_residual_blobs() {
        // A strong blob in one image is picked up by a posterior-drawn
        // newborn almost surely once proposed.
        let rows = vec![vec![3.0, -2.5], vec![0.0, 0.0], vec![0.0, 0.0]];
        let mut state = lg_state(&rows, 2);
        state.hyper.alpha = 3.0; // lambda = 1 per image
        state.hyper.sigma_x = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut births = 0;
        for _ in 0..20 {
            let out = mh_birth_new_features(&mut state, 0, &mut rng).unwrap();
            births += out.newborns;
            if births > 0 {
                break;
            }
        }
        assert!(births > 0, "no birth accepted in 20 proposals");
        state.validate().unwrap();
        // The newborn should reduce the reconstruction error of image 0.
        let mean = compose_image(&state, 0);
        let x = state.data.image(0);
        let err: f64 = x.iter().zip(mean.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let base: f64 = x.iter().map(|a| a * a).sum();
        assert!(err < base * 0.5, "err = {err}, base = {base}");
    }

    #[test]
    fn sweep_stays_valid_and_deterministic() {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![(i % 2) as f64 * 2.0 - 0.5, (i % 3) as f64 - 1.0, 0.3])
            .collect();
        let images: Vec<Array3<f64>> = rows
            .iter()
            .map(|r| Array3::from_shape_fn((1, 3, 1), |(_, x, _)| r[x]))
            .collect();
        let data =
            Arc::new(normalize_dataset(&Dataset::new(images).unwrap()).unwrap());
        for variant in [Variant::LgTibp, Variant::MTibp, Variant::IbpLg] {
            let cfg = RunConfig {
                variant,
                feature_height: 1,
                feature_width: 2,
                seed: 42,
                iterations: 8,
                ..RunConfig::default()
            };
            let mut a = init_state(data.clone(), &cfg).unwrap();
            let mut b = init_state(data.clone(), &cfg).unwrap();
            for _ in 0..8 {
                let ra = sweep(&mut a, SamplerKind::Mh).unwrap();
                let rb = sweep(&mut b, SamplerKind::Mh).unwrap();
                a.validate().unwrap();
                assert_eq!(ra.joint_log_likelihood.to_bits(), rb.joint_log_likelihood.to_bits());
                assert_eq!(ra.k_plus, rb.k_plus);
            }
            assert_eq!(a.rng, b.rng);
            assert_eq!(a.k(), b.k());
            for (fa, fb) in a.features.iter().zip(&b.features) {
                assert_eq!(fa.canvas, fb.canvas);
            }
        }
    }

    #[test]
    fn naive_sweep_rejects_masked_variant() {
        let mut state = m_state(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2);
        assert!(sweep(&mut state, SamplerKind::Naive).is_err());
    }
}

#[cfg(test)]
mod recenter_tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::model::init_state;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn recenter_fixes_miscentered_window() {
        // Every image shows value 5 at pixel 1 and zero elsewhere. The
        // feature holds [5, junk] placed at x = 1, so the junk cell lands
        // on pixel 2. Sliding the window left drops the junk and opens a
        // cell over pixel 0.
        let images: Vec<Array3<f64>> = (0..6)
            .map(|_| {
                let mut img = Array3::zeros((1, 3, 1));
                img[(0, 1, 0)] = 5.0;
                img
            })
            .collect();
        let data = Arc::new(crate::data::Dataset::new(images).unwrap());
        let cfg = RunConfig {
            variant: Variant::LgTibp,
            feature_height: 1,
            feature_width: 2,
            sigma_x: 0.3,
            seed: 0,
            ..RunConfig::default()
        };
        let mut state = init_state(data, &cfg).unwrap();
        let mut canvas = Array3::zeros((1, 2, 1));
        canvas[(0, 0, 0)] = 5.0;
        canvas[(0, 1, 0)] = 3.0; // junk that lands on an empty pixel
        let k = state.push_feature(canvas);
        for n in 0..6 {
            state.z[n][k] = true;
            state.transforms[n][k] = Some(Transformation { x: 1, y: 0, rotation: 0, scale: 0 });
        }
        let ll_before: f64 = (0..6).map(|n| state_image_log_likelihood(&state, n)).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut accepted = 0;
        for _ in 0..40 {
            if mh_recenter_feature(&mut state, k, &mut rng).unwrap() {
                accepted += 1;
            }
            state.validate().unwrap();
        }
        assert!(accepted > 0, "no recenter accepted");
        let ll_after: f64 = (0..6).map(|n| state_image_log_likelihood(&state, n)).sum();
        assert!(ll_after > ll_before + 10.0, "{ll_before} -> {ll_after}");
        // The content cell must still explain pixel 1.
        for n in 0..6 {
            let t = state.transforms[n][k].unwrap();
            let mean = compose_image(&state, n);
            assert!((mean[(0, 1, 0)] - 5.0).abs() < 1.0, "t = {t:?}");
        }
    }

    #[test]
    fn recenter_is_reversible_on_masked_variant() {
        let images: Vec<Array3<f64>> = (0..4)
            .map(|i| {
                let mut img = Array3::zeros((2, 3, 1));
                img[(0, 1, 0)] = 4.0 + i as f64 * 0.01;
                img
            })
            .collect();
        let data = Arc::new(crate::data::Dataset::new(images).unwrap());
        let cfg = RunConfig {
            variant: Variant::MTibp,
            feature_height: 2,
            feature_width: 2,
            seed: 2,
            ..RunConfig::default()
        };
        let mut state = init_state(data, &cfg).unwrap();
        let mut canvas = Array3::zeros((2, 2, 1));
        canvas[(0, 0, 0)] = 4.0;
        let k = state.push_feature(canvas);
        for n in 0..4 {
            state.z[n][k] = true;
            state.transforms[n][k] = Some(Transformation { x: 1, y: 0, rotation: 0, scale: 0 });
            state.masks[n][k] = Some(ndarray::Array2::from_elem((2, 2), 1));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..60 {
            mh_recenter_feature(&mut state, k, &mut rng).unwrap();
            state.validate().unwrap();
        }
    }
}
