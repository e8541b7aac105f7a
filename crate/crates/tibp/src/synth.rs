//! Synthetic datasets with known ground truth: glyph features composed
//! additively or by occlusion under uniformly drawn transformations.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::transform::{render_accumulate, Transformation, TransformationSpace, TranslationRange};

/// How drawn features combine into an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComposeMode {
    /// Features sum; overlaps blend.
    Additive,
    /// The uppermost opaque feature owns each pixel; no blending.
    Occluding,
}

impl ComposeMode {
    pub fn name(self) -> &'static str {
        match self {
            ComposeMode::Additive => "additive",
            ComposeMode::Occluding => "occluding",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(ComposeMode::Additive),
            "occluding" => Ok(ComposeMode::Occluding),
            other => Err(Error::Config(format!("unknown compose mode '{other}'"))),
        }
    }
}

/// A true feature: named canvas with per-pixel opacity derived from any
/// nonzero channel.
#[derive(Debug, Clone)]
pub struct TruthFeature {
    pub name: String,
    /// `(F_h, F_w, C)`.
    pub canvas: Array3<f64>,
}

impl TruthFeature {
    pub fn opaque(&self, y: usize, x: usize) -> bool {
        let c = self.canvas.dim().2;
        (0..c).any(|ch| self.canvas[(y, x, ch)] != 0.0)
    }
}

/// One placement of a true feature in one image.
#[derive(Debug, Clone, Copy)]
pub struct TruthUse {
    pub feature: usize,
    pub t: Transformation,
}

/// Everything needed to score a model against the generator.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mode: ComposeMode,
    pub include_prob: f64,
    pub noise: f64,
    pub rotations: Vec<u8>,
    pub scales: Vec<f64>,
    pub features: Vec<TruthFeature>,
    /// Per image, the drawn placements in feature order.
    pub uses: Vec<Vec<TruthUse>>,
    /// Feature indices back to front; later entries occlude earlier ones.
    pub depth_order: Vec<usize>,
}

/// Generation parameters.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub include_prob: f64,
    pub mode: ComposeMode,
    pub noise: f64,
    pub rotations: Vec<u8>,
    pub scales: Vec<f64>,
    pub translations: TranslationRange,
    /// None selects the built-in glyphs.
    pub features: Option<Vec<TruthFeature>>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_images: 100,
            height: 9,
            width: 9,
            include_prob: 0.5,
            mode: ComposeMode::Occluding,
            noise: 0.0,
            rotations: vec![0],
            scales: vec![1.0],
            translations: TranslationRange::Full,
            features: None,
        }
    }
}

fn stencil_feature(name: &str, rows: [&str; 5], color: [f64; 3]) -> TruthFeature {
    let mut canvas = Array3::zeros((5, 5, 3));
    for (y, row) in rows.iter().enumerate() {
        for (x, ch) in row.chars().enumerate() {
            if ch == 'X' {
                for (c, &v) in color.iter().enumerate() {
                    canvas[(y, x, c)] = v;
                }
            }
        }
    }
    TruthFeature {
        name: name.to_string(),
        canvas,
    }
}

/// The four built-in colored glyphs.
pub fn builtin_glyphs() -> Vec<TruthFeature> {
    vec![
        stencil_feature(
            "v",
            ["X...X", "X...X", ".X.X.", ".X.X.", "..X.."],
            [1.0, 0.0, 0.0],
        ),
        stencil_feature(
            "T",
            ["XXXXX", "..X..", "..X..", "..X..", "..X.."],
            [0.0, 1.0, 0.0],
        ),
        stencil_feature(
            "U",
            ["X...X", "X...X", "X...X", "X...X", ".XXX."],
            [0.0, 0.0, 1.0],
        ),
        stencil_feature(
            "x",
            ["X...X", ".X.X.", "..X..", ".X.X.", "X...X"],
            [1.0, 1.0, 0.0],
        ),
    ]
}

/// Draw a dataset and its ground truth. Deterministic given the RNG
/// state. Pixel values are on the raw scale (background zero); callers
/// normalize separately.
pub fn generate_synthetic_dataset<R: Rng>(
    spec: &SynthSpec,
    rng: &mut R,
) -> Result<(Dataset, GroundTruth)> {
    if spec.n_images == 0 {
        return Err(Error::Data("need at least one image".into()));
    }
    if !(0.0..=1.0).contains(&spec.include_prob) {
        return Err(Error::Domain("inclusion probability must be in [0, 1]".into()));
    }
    if spec.noise < 0.0 {
        return Err(Error::Domain("noise must be non-negative".into()));
    }
    let features = spec.features.clone().unwrap_or_else(builtin_glyphs);
    if features.is_empty() {
        return Err(Error::Data("need at least one feature".into()));
    }
    let (fh, fw, channels) = features[0].canvas.dim();
    for f in &features {
        if f.canvas.dim() != (fh, fw, channels) {
            return Err(Error::Dimension("feature canvases must share dimensions".into()));
        }
    }
    let space = TransformationSpace::new(
        spec.height,
        spec.width,
        fh,
        fw,
        &spec.rotations,
        &spec.scales,
        spec.translations,
    )?;
    // Feature list order is the depth order: later features are uppermost.
    let depth_order: Vec<usize> = (0..features.len()).collect();
    let noise_dist = (spec.noise > 0.0)
        .then(|| Normal::new(0.0, spec.noise).expect("positive noise"));

    let mut images = Vec::with_capacity(spec.n_images);
    let mut uses = Vec::with_capacity(spec.n_images);
    for _ in 0..spec.n_images {
        let mut drawn: Vec<TruthUse> = Vec::new();
        for k in 0..features.len() {
            if rng.random::<f64>() < spec.include_prob {
                drawn.push(TruthUse {
                    feature: k,
                    t: space.uniform(rng),
                });
            }
        }
        let mut img = Array3::zeros((spec.height, spec.width, channels));
        match spec.mode {
            ComposeMode::Additive => {
                for u in &drawn {
                    render_accumulate(&mut img, &features[u.feature].canvas, &u.t, &space, 1.0);
                }
            }
            ComposeMode::Occluding => {
                // Front to back; the first opaque claim wins.
                let mut claimed =
                    ndarray::Array2::from_elem((spec.height, spec.width), false);
                for u in drawn.iter().rev() {
                    let f = &features[u.feature];
                    let pair = space.pair(&u.t);
                    for i in 0..pair.out_h {
                        let y = i as i64 + u.t.y;
                        if y < 0 || y >= spec.height as i64 {
                            continue;
                        }
                        for j in 0..pair.out_w {
                            let x = j as i64 + u.t.x;
                            if x < 0 || x >= spec.width as i64 {
                                continue;
                            }
                            let (y, x) = (y as usize, x as usize);
                            let (sy, sx) = pair.source(i, j);
                            if claimed[(y, x)] || !f.opaque(sy, sx) {
                                continue;
                            }
                            claimed[(y, x)] = true;
                            for ch in 0..channels {
                                img[(y, x, ch)] = f.canvas[(sy, sx, ch)];
                            }
                        }
                    }
                }
            }
        }
        if let Some(dist) = &noise_dist {
            for v in img.iter_mut() {
                *v += dist.sample(rng);
            }
        }
        images.push(img);
        uses.push(drawn);
    }
    let dataset = Dataset::new(images)?;
    Ok((
        dataset,
        GroundTruth {
            height: spec.height,
            width: spec.width,
            channels,
            mode: spec.mode,
            include_prob: spec.include_prob,
            noise: spec.noise,
            rotations: spec.rotations.clone(),
            scales: spec.scales.clone(),
            features,
            uses,
            depth_order,
        },
    ))
}
