//! Held-out reconstruction, RMSE metrics, transformation-invariant
//! feature matching and the MH-vs-naive benchmark harness.

use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assign::min_cost_assignment;
use crate::data::{Dataset, Image, NormalizationStats};
use crate::error::{Error, Result};
use crate::likelihood::compose_image;
use crate::model::{ModelState, Variant};
use crate::parallel;
use crate::sampler::{
    mh_update_feature_use, resample_transform_and_mask, sweep, SamplerKind, SweepReport,
};
use crate::synth::{generate_synthetic_dataset, GroundTruth, SynthSpec};
use crate::transform::{render_feature, Transformation, TransformationSpace};
use crate::config::RunConfig;
use crate::model::init_state;

/// Inferred latent variables for one held-out image.
#[derive(Debug, Clone)]
pub struct TestFit {
    pub z: Vec<bool>,
    pub transforms: Vec<Option<Transformation>>,
    pub masks: Vec<Option<Array2<u8>>>,
}

/// Infer indicators, transformations and masks for a held-out image with
/// the trained features frozen, and return its reconstruction.
///
/// The test image is appended to the training rows so the IBP and mask
/// conditionals see the training usage counts; only the new row is
/// updated (existing-feature flips and transformation/mask resampling;
/// no births, no feature or hyperparameter updates).
pub fn reconstruct_test_image<R: Rng>(
    trained: &ModelState,
    x_test: &Image,
    n_sweeps: usize,
    rng: &mut R,
) -> Result<(Image, TestFit)> {
    let dims = (
        trained.data.height(),
        trained.data.width(),
        trained.data.channels(),
    );
    if x_test.dim() != dims {
        return Err(Error::Dimension(format!(
            "test image is {:?}, training data is {dims:?}",
            x_test.dim()
        )));
    }
    let mut images: Vec<Image> = trained.data.images().to_vec();
    images.push(x_test.clone());
    let data = Arc::new(Dataset::new(images)?);
    let mut state = trained.clone();
    let test_row = trained.n_images();
    state.data = data;
    state.z.push(vec![false; state.k()]);
    state.transforms.push(vec![None; state.k()]);
    state.masks.push(vec![None; state.k()]);

    for _ in 0..n_sweeps {
        for k in 0..state.k() {
            if state.usage_excluding(test_row, k) == 0 {
                continue;
            }
            mh_update_feature_use(&mut state, test_row, k, rng)?;
        }
        for k in 0..state.k() {
            if state.z[test_row][k] {
                resample_transform_and_mask(&mut state, test_row, k, rng)?;
            }
        }
    }
    let recon = compose_image(&state, test_row);
    Ok((
        recon,
        TestFit {
            z: state.z[test_row].clone(),
            transforms: state.transforms[test_row].clone(),
            masks: state.masks[test_row].clone(),
        },
    ))
}

/// Reconstruct every image of a held-out set, in parallel with one
/// deterministic RNG stream per image.
pub fn reconstruct_dataset(
    trained: &ModelState,
    test: &Dataset,
    n_sweeps: usize,
    seed: u64,
) -> Result<Vec<(Image, f64)>> {
    let results = parallel::map_indexed(test.n_images(), |n| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(n as u64 + 1)));
        reconstruct_test_image(trained, test.image(n), n_sweeps, &mut rng).map(|(recon, _)| {
            let rmse = per_pixel_rmse(&recon, test.image(n)).expect("shapes match");
            (recon, rmse)
        })
    });
    results.into_iter().collect()
}

/// Root mean squared error over all pixels and channels.
pub fn per_pixel_rmse(reconstruction: &Image, truth: &Image) -> Result<f64> {
    if reconstruction.dim() != truth.dim() {
        return Err(Error::Dimension(format!(
            "shape mismatch: {:?} vs {:?}",
            reconstruction.dim(),
            truth.dim()
        )));
    }
    let n = reconstruction.len() as f64;
    let sq: f64 = reconstruction
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sq / n).sqrt())
}

/// Mean reconstruction RMSE over the training set itself.
pub fn training_rmse(state: &ModelState) -> f64 {
    let per_image = parallel::map_indexed(state.n_images(), |n| {
        let mean = compose_image(state, n);
        per_pixel_rmse(&mean, state.data.image(n)).expect("shapes match")
    });
    per_image.iter().sum::<f64>() / per_image.len() as f64
}

/// What the learned features look like when painted: the canvas itself
/// for linear Gaussian variants; for the masked variant, canvas values
/// where the pixel is usually unmasked and zero (background) where it is
/// usually masked.
pub fn effective_canvases(state: &ModelState) -> Vec<Array3<f64>> {
    state
        .features
        .iter()
        .map(|f| match (&f.shape, state.variant) {
            (Some(shape), Variant::MTibp) => {
                let mut c = f.canvas.clone();
                for ((y, x, _), v) in c.indexed_iter_mut() {
                    if shape[(y, x)] < 0.5 {
                        *v = 0.0;
                    }
                }
                c
            }
            _ => f.canvas.clone(),
        })
        .collect()
}

/// Map raw-scale truth canvases into the normalized space the model was
/// trained in.
pub fn normalized_truth_canvases(truth: &GroundTruth, stats: &NormalizationStats) -> Vec<Array3<f64>> {
    truth
        .features
        .iter()
        .map(|f| {
            let mut c = f.canvas.clone();
            for ((_, _, ch), v) in c.indexed_iter_mut() {
                *v = (*v - stats.mean[ch]) / stats.std[ch];
            }
            c
        })
        .collect()
}

/// One matched (truth, learned) pair.
#[derive(Debug, Clone)]
pub struct FeatureMatch {
    pub truth: usize,
    pub learned: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone)]
pub struct MatchReport {
    pub pairs: Vec<FeatureMatch>,
    pub mean_matched_rmse: f64,
    /// Learned features left without a partner (surplus capacity).
    pub unmatched_learned: Vec<usize>,
}

fn paste_into_frame(canvas: &Array3<f64>, h: usize, w: usize) -> Result<Array3<f64>> {
    let (ch, cw, c) = canvas.dim();
    if ch > h || cw > w {
        return Err(Error::Dimension(format!(
            "canvas {ch}x{cw} does not fit the {h}x{w} frame"
        )));
    }
    let mut out = Array3::zeros((h, w, c));
    for y in 0..ch {
        for x in 0..cw {
            for cc in 0..c {
                out[(y, x, cc)] = canvas[(y, x, cc)];
            }
        }
    }
    Ok(out)
}

/// Transformation-invariant matching: cost of a (learned, truth) pair is
/// the minimal frame RMSE between the learned canvas rendered under any
/// transformation in the space and the truth canvas pasted at the
/// origin; pairs are then assigned one-to-one at minimal total cost.
pub fn feature_match_score(
    learned: &[Array3<f64>],
    truth: &[Array3<f64>],
    space: &TransformationSpace,
) -> Result<MatchReport> {
    if learned.is_empty() {
        return Err(Error::Data("no learned features to match".into()));
    }
    if truth.is_empty() {
        return Err(Error::Data("no truth features to match".into()));
    }
    let (h, w) = (space.image_h(), space.image_w());
    let truth_frames: Vec<Array3<f64>> = truth
        .iter()
        .map(|t| paste_into_frame(t, h, w))
        .collect::<Result<_>>()?;
    let n_t = truth.len();
    let n_l = learned.len();
    let costs: Vec<f64> = parallel::map_indexed(n_t * n_l, |idx| {
        let (ti, li) = (idx / n_l, idx % n_l);
        let mut best = f64::INFINITY;
        for flat in 0..space.len() {
            let t = space.transformation(flat);
            let rendered = render_feature(&learned[li], &t, space);
            let rmse = per_pixel_rmse(&rendered.values, &truth_frames[ti])
                .expect("frames share dimensions");
            best = best.min(rmse);
        }
        best
    });
    let cost = Array2::from_shape_fn((n_t, n_l), |(i, j)| costs[i * n_l + j]);

    let pairs: Vec<FeatureMatch> = if n_t <= n_l {
        min_cost_assignment(&cost)
            .into_iter()
            .enumerate()
            .map(|(ti, li)| FeatureMatch {
                truth: ti,
                learned: li,
                rmse: cost[(ti, li)],
            })
            .collect()
    } else {
        let transposed = Array2::from_shape_fn((n_l, n_t), |(i, j)| cost[(j, i)]);
        min_cost_assignment(&transposed)
            .into_iter()
            .enumerate()
            .map(|(li, ti)| FeatureMatch {
                truth: ti,
                learned: li,
                rmse: cost[(ti, li)],
            })
            .collect()
    };
    let mean = pairs.iter().map(|p| p.rmse).sum::<f64>() / pairs.len() as f64;
    let unmatched = (0..n_l)
        .filter(|li| pairs.iter().all(|p| p.learned != *li))
        .collect();
    Ok(MatchReport {
        pairs,
        mean_matched_rmse: mean,
        unmatched_learned: unmatched,
    })
}

/// One benchmark measurement: a single sweep of one sampler.
#[derive(Debug, Clone)]
pub struct BenchmarkRow {
    pub sampler: &'static str,
    pub image_size: usize,
    pub d_pixels: usize,
    pub iteration: u64,
    pub k_plus: usize,
    pub seconds: f64,
    pub joint_log_likelihood: f64,
}

/// Per-iteration wall time and joint log-likelihood for each sampler on
/// square glyph datasets of the given sizes. Samplers run sequentially
/// to keep timings honest.
pub fn run_benchmark(
    sizes: &[usize],
    samplers: &[SamplerKind],
    iterations: u64,
    seed: u64,
) -> Result<Vec<BenchmarkRow>> {
    let mut rows = Vec::new();
    for &size in sizes {
        let spec = SynthSpec {
            height: size,
            width: size,
            ..SynthSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (size as u64).wrapping_mul(0x5851_f42d));
        let (raw, _) = generate_synthetic_dataset(&spec, &mut rng)?;
        let data = Arc::new(crate::data::normalize_dataset(&raw)?);
        for &kind in samplers {
            let cfg = RunConfig {
                variant: Variant::LgTibp,
                feature_height: 5,
                feature_width: 5,
                seed,
                ..RunConfig::default()
            };
            let mut state = init_state(data.clone(), &cfg)?;
            for iter in 0..iterations {
                let t0 = Instant::now();
                let report: SweepReport = sweep(&mut state, kind)?;
                rows.push(BenchmarkRow {
                    sampler: kind.name(),
                    image_size: size,
                    d_pixels: size * size,
                    iteration: iter,
                    k_plus: report.k_plus,
                    seconds: t0.elapsed().as_secs_f64(),
                    joint_log_likelihood: report.joint_log_likelihood,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::normalize_dataset;
    use crate::transform::TranslationRange;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    #[test]
    fn rmse_basics() {
        let a = Array3::from_elem((2, 2, 1), 0.5);
        assert_eq!(per_pixel_rmse(&a, &a).unwrap(), 0.0);
        let b = Array3::from_elem((2, 2, 1), 1.5);
        assert_abs_diff_eq!(per_pixel_rmse(&a, &b).unwrap(), 1.0, epsilon = 1e-12);
        let c = Array3::zeros((2, 3, 1));
        assert!(per_pixel_rmse(&a, &c).is_err());
    }

    #[test]
    fn rmse_triangle_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let shape = (3, 4, 2);
            let a = Array3::from_shape_fn(shape, |_| rng.random::<f64>() * 4.0 - 2.0);
            let b = Array3::from_shape_fn(shape, |_| rng.random::<f64>() * 4.0 - 2.0);
            let c = Array3::from_shape_fn(shape, |_| rng.random::<f64>() * 4.0 - 2.0);
            let ab = per_pixel_rmse(&a, &b).unwrap();
            let bc = per_pixel_rmse(&b, &c).unwrap();
            let ac = per_pixel_rmse(&a, &c).unwrap();
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    fn match_space() -> TransformationSpace {
        TransformationSpace::new(6, 6, 2, 2, &[0, 1, 2, 3], &[1.0], TranslationRange::Full)
            .unwrap()
    }

    fn block(vals: [[f64; 2]; 2]) -> Array3<f64> {
        Array3::from_shape_fn((2, 2, 1), |(y, x, _)| vals[y][x])
    }

    #[test]
    fn match_is_zero_for_translated_truth() {
        let space = match_space();
        let truth = vec![block([[1.0, 0.0], [0.0, 2.0]])];
        // Learned feature equals the truth; any translation is matched
        // back by the search.
        let learned = vec![truth[0].clone()];
        let report = feature_match_score(&learned, &truth, &space).unwrap();
        assert!(report.mean_matched_rmse < 1e-12);
    }

    #[test]
    fn match_is_invariant_to_permutation_and_rotation() {
        let space = match_space();
        let truth = vec![
            block([[1.0, 0.0], [0.0, 0.0]]),
            block([[0.0, 2.0], [2.0, 0.0]]),
        ];
        let learned_a = vec![truth[0].clone(), truth[1].clone()];
        let learned_b = vec![
            crate::transform::rotate_scale_canvas(&truth[1], std::f64::consts::PI, 1.0).unwrap(),
            truth[0].clone(),
        ];
        let ra = feature_match_score(&learned_a, &truth, &space).unwrap();
        let rb = feature_match_score(&learned_b, &truth, &space).unwrap();
        assert_abs_diff_eq!(ra.mean_matched_rmse, rb.mean_matched_rmse, epsilon = 1e-12);
        assert!(rb.mean_matched_rmse < 1e-12);
    }

    #[test]
    fn averaged_feature_picks_cheaper_pairing() {
        let space = match_space();
        let t0 = block([[4.0, 0.0], [0.0, 0.0]]);
        let t1 = block([[0.0, 0.0], [0.0, 2.0]]);
        let avg = block([[2.0, 0.0], [0.0, 1.0]]);
        let truth = vec![t0.clone(), t1.clone()];
        let learned = vec![avg, t1.clone()];
        let report = feature_match_score(&learned, &truth, &space).unwrap();
        // Brute force over the two assignments.
        let cost = |l: &Array3<f64>, t: &Array3<f64>| {
            let mut best = f64::INFINITY;
            for flat in 0..space.len() {
                let tr = space.transformation(flat);
                let r = render_feature(l, &tr, &space);
                let frame = paste_into_frame(t, 6, 6).unwrap();
                best = best.min(per_pixel_rmse(&r.values, &frame).unwrap());
            }
            best
        };
        let direct = (cost(&learned[0], &truth[0]) + cost(&learned[1], &truth[1]))
            .min(cost(&learned[0], &truth[1]) + cost(&learned[1], &truth[0]));
        let total: f64 = report.pairs.iter().map(|p| p.rmse).sum();
        assert_abs_diff_eq!(total, direct, epsilon = 1e-12);
        assert!(report.mean_matched_rmse > 0.0);
    }

    #[test]
    fn surplus_learned_features_are_reported() {
        let space = match_space();
        let truth = vec![block([[1.0, 0.0], [0.0, 0.0]])];
        let learned = vec![
            block([[9.0, 9.0], [9.0, 9.0]]),
            block([[1.0, 0.0], [0.0, 0.0]]),
        ];
        let report = feature_match_score(&learned, &truth, &space).unwrap();
        assert_eq!(report.pairs.len(), 1);
        assert_eq!(report.pairs[0].learned, 1);
        assert_eq!(report.unmatched_learned, vec![0]);
    }

    #[test]
    fn zero_feature_model_reconstructs_zeros() {
        let images: Vec<Array3<f64>> = (0..3)
            .map(|i| Array3::from_shape_fn((2, 2, 1), |(y, x, _)| (i + y + x) as f64))
            .collect();
        let data = Arc::new(normalize_dataset(&Dataset::new(images).unwrap()).unwrap());
        let cfg = RunConfig {
            feature_height: 2,
            feature_width: 2,
            ..RunConfig::default()
        };
        let state = init_state(data, &cfg).unwrap();
        let test = Array3::zeros((2, 2, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (recon, fit) = reconstruct_test_image(&state, &test, 5, &mut rng).unwrap();
        assert!(recon.iter().all(|&v| v == 0.0));
        assert!(fit.z.is_empty());
    }

    #[test]
    fn reconstruction_is_deterministic() {
        let images: Vec<Array3<f64>> = (0..4)
            .map(|i| {
                Array3::from_shape_fn((2, 3, 1), |(y, x, _)| ((i * 7 + y * 3 + x) % 5) as f64)
            })
            .collect();
        let data = Arc::new(normalize_dataset(&Dataset::new(images).unwrap()).unwrap());
        let cfg = RunConfig {
            feature_height: 2,
            feature_width: 2,
            seed: 11,
            ..RunConfig::default()
        };
        let mut state = init_state(data, &cfg).unwrap();
        for _ in 0..5 {
            sweep(&mut state, SamplerKind::Mh).unwrap();
        }
        let test = state.data.image(0).clone();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            reconstruct_test_image(&state, &test, 10, &mut rng).unwrap().0
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn benchmark_rows_are_well_formed() {
        let rows = run_benchmark(&[7], &[SamplerKind::Mh], 2, 1).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!(r.seconds > 0.0);
            assert_eq!(r.d_pixels, 49);
            assert!(r.joint_log_likelihood.is_finite());
        }
    }
}
