//! Model state: latent features, assignments, transformations, masks,
//! depth order and hyperparameters for one MCMC chain.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::transform::{Transformation, TransformationSpace, TranslationRange};

/// Which likelihood the chain targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Linear Gaussian IBP: additive features, all transformations fixed
    /// to the identity.
    IbpLg,
    /// Linear Gaussian transformed IBP: additive transformed features.
    LgTibp,
    /// Masked transformed IBP: per-use binary masks and a global depth
    /// order; the uppermost unmasked feature owns each pixel.
    MTibp,
}

impl Variant {
    pub fn is_masked(self) -> bool {
        matches!(self, Variant::MTibp)
    }
}

/// One latent feature: a real-valued canvas and, for the masked variant,
/// the per-pixel shape probabilities (posterior mean of the collapsed
/// Beta-Bernoulli mask distribution).
#[derive(Debug, Clone)]
pub struct Feature {
    pub id: u64,
    /// `(F_h, F_w, C)`.
    pub canvas: Array3<f64>,
    /// `(F_h, F_w)`, entries strictly inside (0, 1); masked variant only.
    pub shape: Option<Array2<f64>>,
}

/// Scalar hyperparameters and their conjugate prior parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub alpha: f64,
    pub beta: f64,
    pub sigma_x: f64,
    pub sigma_a: f64,
    pub alpha_shape: f64,
    pub alpha_rate: f64,
    pub sigma_x_shape: f64,
    pub sigma_x_scale: f64,
    pub sigma_a_shape: f64,
    pub sigma_a_scale: f64,
}

impl Hyperparameters {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            alpha: cfg.alpha,
            beta: cfg.beta,
            sigma_x: cfg.sigma_x,
            sigma_a: cfg.sigma_a,
            alpha_shape: cfg.alpha_prior_shape,
            alpha_rate: cfg.alpha_prior_rate,
            sigma_x_shape: cfg.sigma_x_prior_shape,
            sigma_x_scale: cfg.sigma_x_prior_scale,
            sigma_a_shape: cfg.sigma_a_prior_shape,
            sigma_a_scale: cfg.sigma_a_prior_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("sigma_x", self.sigma_x),
            ("sigma_a", self.sigma_a),
            ("alpha_shape", self.alpha_shape),
            ("alpha_rate", self.alpha_rate),
            ("sigma_x_shape", self.sigma_x_shape),
            ("sigma_x_scale", self.sigma_x_scale),
            ("sigma_a_shape", self.sigma_a_shape),
            ("sigma_a_scale", self.sigma_a_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!(
                    "hyperparameter {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// All latent variables of one chain plus its RNG.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub variant: Variant,
    pub data: Arc<Dataset>,
    pub space: TransformationSpace,
    pub features: Vec<Feature>,
    /// `z[n][k]`.
    pub z: Vec<Vec<bool>>,
    /// `Some` exactly where `z[n][k]`.
    pub transforms: Vec<Vec<Option<Transformation>>>,
    /// Masked variant: `Some` exactly where `z[n][k]`; `(F_h, F_w)` of 0/1.
    pub masks: Vec<Vec<Option<Array2<u8>>>>,
    /// Masked variant: feature indices ordered back to front. The rank of
    /// a feature is its position + 1; higher rank occludes lower.
    pub depth_order: Vec<usize>,
    pub hyper: Hyperparameters,
    pub proposal_temperature: f64,
    pub birth_attempt_rate: f64,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub(crate) next_feature_id: u64,
}

/// Create a fresh chain state: no features by default, or `warm_start`
/// prior draws with every indicator off.
pub fn init_state(data: Arc<Dataset>, cfg: &RunConfig) -> Result<ModelState> {
    cfg.validate()?;
    if cfg.feature_height > data.height() || cfg.feature_width > data.width() {
        return Err(Error::Dimension(format!(
            "feature canvas {}x{} exceeds image {}x{}",
            cfg.feature_height,
            cfg.feature_width,
            data.height(),
            data.width()
        )));
    }
    let space = match cfg.variant {
        Variant::IbpLg => TransformationSpace::identity_only(
            data.height(),
            data.width(),
            cfg.feature_height,
            cfg.feature_width,
        )?,
        _ => TransformationSpace::new(
            data.height(),
            data.width(),
            cfg.feature_height,
            cfg.feature_width,
            &cfg.rotations,
            &cfg.scales,
            TranslationRange::Full,
        )?,
    };
    let n = data.n_images();
    let mut state = ModelState {
        variant: cfg.variant,
        data,
        space,
        features: Vec::new(),
        z: vec![Vec::new(); n],
        transforms: vec![Vec::new(); n],
        masks: vec![Vec::new(); n],
        depth_order: Vec::new(),
        hyper: Hyperparameters::from_config(cfg),
        proposal_temperature: cfg.proposal_temperature,
        birth_attempt_rate: cfg.birth_attempt_rate,
        iteration: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        next_feature_id: 0,
    };
    for _ in 0..cfg.warm_start {
        let mut rng = state.rng.clone();
        let canvas = state.prior_canvas(&mut rng);
        state.rng = rng;
        state.push_feature(canvas);
    }
    state.validate()?;
    Ok(state)
}

impl ModelState {
    pub fn n_images(&self) -> usize {
        self.data.n_images()
    }

    /// Current number of instantiated feature columns.
    pub fn k(&self) -> usize {
        self.features.len()
    }

    /// Number of represented features (columns with at least one user).
    pub fn k_plus(&self) -> usize {
        (0..self.k()).filter(|&k| self.usage(k) > 0).count()
    }

    pub fn usage(&self, k: usize) -> usize {
        self.z.iter().filter(|row| row[k]).count()
    }

    pub fn usage_excluding(&self, n: usize, k: usize) -> usize {
        self.z
            .iter()
            .enumerate()
            .filter(|&(m, row)| m != n && row[k])
            .count()
    }

    pub fn is_active(&self, n: usize, k: usize) -> bool {
        self.z[n][k]
    }

    /// Occlusion rank of feature `k` (masked variant): position in the
    /// back-to-front order plus one.
    pub fn rank(&self, k: usize) -> usize {
        self.depth_order
            .iter()
            .position(|&f| f == k)
            .map(|p| p + 1)
            .expect("feature missing from depth order")
    }

    /// Draw a canvas from the feature prior.
    pub fn prior_canvas<R: Rng>(&self, rng: &mut R) -> Array3<f64> {
        let normal = Normal::new(0.0, self.hyper.sigma_a).expect("positive sigma_a");
        Array3::from_shape_fn(
            (
                self.space.canvas_h(),
                self.space.canvas_w(),
                self.data.channels(),
            ),
            |_| normal.sample(rng),
        )
    }

    /// Append a new feature column with every indicator off.
    pub fn push_feature(&mut self, canvas: Array3<f64>) -> usize {
        let k = self.features.len();
        let shape = self.variant.is_masked().then(|| {
            Array2::from_elem((self.space.canvas_h(), self.space.canvas_w()), 0.5)
        });
        self.features.push(Feature {
            id: self.next_feature_id,
            canvas,
            shape,
        });
        self.next_feature_id += 1;
        for row in &mut self.z {
            row.push(false);
        }
        for row in &mut self.transforms {
            row.push(None);
        }
        for row in &mut self.masks {
            row.push(None);
        }
        if self.variant.is_masked() {
            // New features enter uppermost.
            self.depth_order.push(k);
        }
        k
    }

    /// Remove feature column `k`, reindexing everything above it.
    pub fn remove_feature(&mut self, k: usize) {
        self.features.remove(k);
        for row in &mut self.z {
            row.remove(k);
        }
        for row in &mut self.transforms {
            row.remove(k);
        }
        for row in &mut self.masks {
            row.remove(k);
        }
        if self.variant.is_masked() {
            self.depth_order.retain(|&f| f != k);
            for f in &mut self.depth_order {
                if *f > k {
                    *f -= 1;
                }
            }
        }
    }

    /// Drop every column with zero usage, preserving the relative depth
    /// order of the remaining features.
    pub fn prune_empty_features(&mut self) {
        let mut k = 0;
        while k < self.k() {
            if self.usage(k) == 0 {
                self.remove_feature(k);
            } else {
                k += 1;
            }
        }
    }

    /// Refresh the shape probabilities to the collapsed posterior mean
    /// `(sum of user mask bits + beta) / (users + 2 beta)`.
    pub fn refresh_shapes(&mut self) {
        if !self.variant.is_masked() {
            return;
        }
        let beta = self.hyper.beta;
        let (fh, fw) = (self.space.canvas_h(), self.space.canvas_w());
        for k in 0..self.features.len() {
            let mut ones = Array2::<f64>::zeros((fh, fw));
            let mut users = 0.0;
            for n in 0..self.n_images() {
                if let Some(mask) = &self.masks[n][k] {
                    users += 1.0;
                    for (o, &m) in ones.iter_mut().zip(mask.iter()) {
                        *o += f64::from(m);
                    }
                }
            }
            let shape = self.features[k].shape.as_mut().expect("masked variant");
            for (s, &o) in shape.iter_mut().zip(ones.iter()) {
                *s = (o + beta) / (users + 2.0 * beta);
            }
        }
    }

    /// Dimension and domain checks over every field.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_images();
        let k = self.k();
        let (fh, fw, c) = (
            self.space.canvas_h(),
            self.space.canvas_w(),
            self.data.channels(),
        );
        if self.space.image_h() != self.data.height() || self.space.image_w() != self.data.width()
        {
            return Err(Error::Dimension("space does not match dataset".into()));
        }
        self.hyper.validate()?;
        if !(self.proposal_temperature > 0.0) {
            return Err(Error::Domain("proposal temperature must be positive".into()));
        }
        if !(self.birth_attempt_rate > 0.0 && self.birth_attempt_rate <= 1.0) {
            return Err(Error::Domain("birth attempt rate must be in (0, 1]".into()));
        }
        for (idx, f) in self.features.iter().enumerate() {
            if f.canvas.dim() != (fh, fw, c) {
                return Err(Error::Dimension(format!("feature {idx} has wrong shape")));
            }
            if f.canvas.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("feature {idx} has non-finite values")));
            }
            match (&f.shape, self.variant.is_masked()) {
                (Some(s), true) => {
                    if s.dim() != (fh, fw) {
                        return Err(Error::Dimension(format!("shape {idx} has wrong size")));
                    }
                    if s.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
                        return Err(Error::Domain(format!(
                            "shape {idx} has probabilities outside (0, 1)"
                        )));
                    }
                }
                (None, false) => {}
                _ => {
                    return Err(Error::Variant(format!(
                        "feature {idx} shape presence does not match variant"
                    )))
                }
            }
        }
        if self.z.len() != n || self.transforms.len() != n || self.masks.len() != n {
            return Err(Error::Dimension("row count mismatch".into()));
        }
        for nn in 0..n {
            if self.z[nn].len() != k || self.transforms[nn].len() != k || self.masks[nn].len() != k
            {
                return Err(Error::Dimension(format!("row {nn} has wrong column count")));
            }
            for kk in 0..k {
                let active = self.z[nn][kk];
                match &self.transforms[nn][kk] {
                    Some(t) => {
                        if !active {
                            return Err(Error::Domain(format!(
                                "transformation set for inactive ({nn}, {kk})"
                            )));
                        }
                        if !self.space.contains(t) {
                            return Err(Error::Domain(format!(
                                "transformation out of space at ({nn}, {kk})"
                            )));
                        }
                    }
                    None => {
                        if active {
                            return Err(Error::Domain(format!(
                                "missing transformation for active ({nn}, {kk})"
                            )));
                        }
                    }
                }
                match (&self.masks[nn][kk], active && self.variant.is_masked()) {
                    (Some(m), true) => {
                        if m.dim() != (fh, fw) {
                            return Err(Error::Dimension(format!(
                                "mask at ({nn}, {kk}) has wrong size"
                            )));
                        }
                        if m.iter().any(|&b| b > 1) {
                            return Err(Error::Domain(format!(
                                "mask at ({nn}, {kk}) has non-binary entries"
                            )));
                        }
                    }
                    (None, false) => {}
                    _ => {
                        return Err(Error::Domain(format!(
                            "mask presence mismatch at ({nn}, {kk})"
                        )))
                    }
                }
            }
        }
        if self.variant.is_masked() {
            let mut seen = vec![false; k];
            if self.depth_order.len() != k {
                return Err(Error::Domain("depth order length mismatch".into()));
            }
            for &f in &self.depth_order {
                if f >= k || seen[f] {
                    return Err(Error::Domain("depth order is not a permutation".into()));
                }
                seen[f] = true;
            }
        } else if !self.depth_order.is_empty() {
            return Err(Error::Variant("depth order on an unmasked variant".into()));
        }
        Ok(())
    }
}
