//! Feature transformations: finite spaces of translation, rotation and
//! scaling, rendering of transformed canvases into the image frame, and
//! the inverse pixel map.
//!
//! Conventions, fixed for the whole crate:
//! - application order is scale, then rotate, then translate;
//! - rotations are counterclockwise quarter turns and exact;
//! - scaling is nearest-neighbor at pixel centers with ties broken toward
//!   the smaller index;
//! - canvas pixel `(i, j)` of the scaled/rotated canvas lands at image
//!   pixel `(i + r_y, j + r_x)`; out-of-frame pixels are dropped.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// One placement of a feature: integer translation plus indices into the
/// space's rotation and scale sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Transformation {
    pub x: i64,
    pub y: i64,
    pub rotation: usize,
    pub scale: usize,
}

/// Whether a space enumerates the full lag range or only the identity
/// translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranslationRange {
    /// `r_y ∈ [-F'_h+1, H-1]`, `r_x ∈ [-F'_w+1, W-1]`: the transformed
    /// canvas may extend past every image border.
    Full,
    /// Only `(0, 0)`; combined with rotation `{0}` and scale `{1}` this is
    /// the classic untransformed model.
    IdentityOnly,
}

/// Precomputed geometry for one (rotation, scale) pair.
#[derive(Debug, Clone)]
pub struct PairGeometry {
    pub rot_idx: usize,
    pub scale_idx: usize,
    /// Transformed canvas height/width.
    pub out_h: usize,
    pub out_w: usize,
    /// Row-major source canvas pixel for each transformed pixel.
    src: Vec<(u32, u32)>,
    /// Row-major list, per canvas pixel, of transformed pixels sourcing it.
    targets: Vec<Vec<(u32, u32)>>,
    pub lag_h: usize,
    pub lag_w: usize,
    pub min_y: i64,
    pub min_x: i64,
    /// Base of this pair's block in the flat enumeration.
    pub offset: usize,
}

impl PairGeometry {
    pub fn source(&self, i: usize, j: usize) -> (usize, usize) {
        let (sy, sx) = self.src[i * self.out_w + j];
        (sy as usize, sx as usize)
    }

    pub fn targets_of(&self, cy: usize, cx: usize, canvas_w: usize) -> &[(u32, u32)] {
        &self.targets[cy * canvas_w + cx]
    }

    pub fn lag_count(&self) -> usize {
        self.lag_h * self.lag_w
    }
}

/// The finite, enumerable set of admissible transformations for one model
/// run, with cached per-pair geometry.
#[derive(Debug, Clone)]
pub struct TransformationSpace {
    image_h: usize,
    image_w: usize,
    canvas_h: usize,
    canvas_w: usize,
    rotations: Vec<u8>,
    scales: Vec<f64>,
    translations: TranslationRange,
    pairs: Vec<PairGeometry>,
    total: usize,
    identity: Transformation,
}

/// Nearest-neighbor source index at pixel centers, ties toward the
/// smaller index.
fn nn_source(i: usize, n_src: usize, n_dst: usize) -> usize {
    let pos = (i as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5;
    let s = (pos - 0.5).ceil() as i64;
    s.clamp(0, n_src as i64 - 1) as usize
}

/// Dimensions and source map of a canvas after scaling then `quarter_turns`
/// counterclockwise quarter rotations.
fn source_map(
    canvas_h: usize,
    canvas_w: usize,
    quarter_turns: u8,
    scale: f64,
) -> (usize, usize, Vec<(u32, u32)>) {
    let sh = ((scale * canvas_h as f64).round() as usize).max(1);
    let sw = ((scale * canvas_w as f64).round() as usize).max(1);
    let mut h = sh;
    let mut w = sw;
    let mut src: Vec<(u32, u32)> = (0..sh * sw)
        .map(|idx| {
            let i = idx / sw;
            let j = idx % sw;
            (
                nn_source(i, canvas_h, sh) as u32,
                nn_source(j, canvas_w, sw) as u32,
            )
        })
        .collect();
    for _ in 0..(quarter_turns % 4) {
        // One counterclockwise quarter turn: out[i][j] = in[h-1-j][i].
        let (nh, nw) = (w, h);
        let mut next = vec![(0u32, 0u32); src.len()];
        for i in 0..nh {
            for j in 0..nw {
                next[i * nw + j] = src[(h - 1 - j) * w + i];
            }
        }
        src = next;
        h = nh;
        w = nw;
    }
    (h, w, src)
}

/// Convert an angle in radians into quarter turns, rejecting anything that
/// is not a multiple of pi/2.
pub fn quarter_turns_from_angle(angle: f64) -> Result<u8> {
    let q = angle / std::f64::consts::FRAC_PI_2;
    let rounded = q.round();
    if (q - rounded).abs() > 1e-6 {
        return Err(Error::Domain(format!(
            "rotation {angle} is not a multiple of pi/2"
        )));
    }
    Ok((rounded as i64).rem_euclid(4) as u8)
}

/// Scale then rotate a canvas. Rotations must be quarter-turn multiples;
/// scaling is nearest-neighbor onto a `round(s*F_h) x round(s*F_w)` grid.
pub fn rotate_scale_canvas(canvas: &Array3<f64>, rotation: f64, scale: f64) -> Result<Array3<f64>> {
    if scale <= 0.0 {
        return Err(Error::Domain(format!("scale must be positive, got {scale}")));
    }
    let q = quarter_turns_from_angle(rotation)?;
    let (h, w, c) = canvas.dim();
    let (oh, ow, src) = source_map(h, w, q, scale);
    let mut out = Array3::zeros((oh, ow, c));
    for i in 0..oh {
        for j in 0..ow {
            let (sy, sx) = src[i * ow + j];
            for ch in 0..c {
                out[(i, j, ch)] = canvas[(sy as usize, sx as usize, ch)];
            }
        }
    }
    Ok(out)
}

impl TransformationSpace {
    /// Build a space. `rotations` are quarter-turn counts, `scales` positive
    /// reals. The identity (rotation 0, scale 1) must be present, and every
    /// scaled/rotated canvas must fit inside the image.
    pub fn new(
        image_h: usize,
        image_w: usize,
        canvas_h: usize,
        canvas_w: usize,
        rotations: &[u8],
        scales: &[f64],
        translations: TranslationRange,
    ) -> Result<Self> {
        if canvas_h == 0 || canvas_w == 0 || image_h == 0 || image_w == 0 {
            return Err(Error::Dimension("dimensions must be positive".into()));
        }
        if canvas_h > image_h || canvas_w > image_w {
            return Err(Error::Dimension(format!(
                "canvas {canvas_h}x{canvas_w} exceeds image {image_h}x{image_w}"
            )));
        }
        if rotations.is_empty() || scales.is_empty() {
            return Err(Error::Config("rotation and scale sets must be non-empty".into()));
        }
        let rot0 = rotations
            .iter()
            .position(|&r| r % 4 == 0)
            .ok_or_else(|| Error::Config("rotation set must contain 0".into()))?;
        let scale1 = scales
            .iter()
            .position(|&s| (s - 1.0).abs() < 1e-12)
            .ok_or_else(|| Error::Config("scale set must contain 1".into()))?;
        if translations == TranslationRange::IdentityOnly
            && (rotations.len() != 1 || scales.len() != 1)
        {
            return Err(Error::Config(
                "identity-only spaces admit a single rotation and scale".into(),
            ));
        }
        let mut pairs = Vec::with_capacity(scales.len() * rotations.len());
        let mut offset = 0usize;
        for (scale_idx, &s) in scales.iter().enumerate() {
            if s <= 0.0 {
                return Err(Error::Domain(format!("scale must be positive, got {s}")));
            }
            for (rot_idx, &q) in rotations.iter().enumerate() {
                let (out_h, out_w, src) = source_map(canvas_h, canvas_w, q % 4, s);
                if out_h > image_h || out_w > image_w {
                    return Err(Error::Dimension(format!(
                        "scale {s} rotation {q} maps canvas to {out_h}x{out_w}, larger than image"
                    )));
                }
                let mut targets = vec![Vec::new(); canvas_h * canvas_w];
                for i in 0..out_h {
                    for j in 0..out_w {
                        let (sy, sx) = src[i * out_w + j];
                        targets[sy as usize * canvas_w + sx as usize].push((i as u32, j as u32));
                    }
                }
                let (lag_h, lag_w, min_y, min_x) = match translations {
                    TranslationRange::Full => (
                        image_h + out_h - 1,
                        image_w + out_w - 1,
                        -(out_h as i64 - 1),
                        -(out_w as i64 - 1),
                    ),
                    TranslationRange::IdentityOnly => (1, 1, 0, 0),
                };
                pairs.push(PairGeometry {
                    rot_idx,
                    scale_idx,
                    out_h,
                    out_w,
                    src,
                    targets,
                    lag_h,
                    lag_w,
                    min_y,
                    min_x,
                    offset,
                });
                offset += lag_h * lag_w;
            }
        }
        Ok(Self {
            image_h,
            image_w,
            canvas_h,
            canvas_w,
            rotations: rotations.to_vec(),
            scales: scales.to_vec(),
            translations,
            pairs,
            total: offset,
            identity: Transformation {
                x: 0,
                y: 0,
                rotation: rot0,
                scale: scale1,
            },
        })
    }

    /// Identity-only space used by the untransformed baseline.
    pub fn identity_only(image_h: usize, image_w: usize, canvas_h: usize, canvas_w: usize) -> Result<Self> {
        Self::new(
            image_h,
            image_w,
            canvas_h,
            canvas_w,
            &[0],
            &[1.0],
            TranslationRange::IdentityOnly,
        )
    }

    /// Total number of transformations `T`.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn image_h(&self) -> usize {
        self.image_h
    }

    pub fn image_w(&self) -> usize {
        self.image_w
    }

    pub fn canvas_h(&self) -> usize {
        self.canvas_h
    }

    pub fn canvas_w(&self) -> usize {
        self.canvas_w
    }

    pub fn rotations(&self) -> &[u8] {
        &self.rotations
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn translations(&self) -> TranslationRange {
        self.translations
    }

    pub fn identity(&self) -> Transformation {
        self.identity
    }

    pub fn pairs(&self) -> &[PairGeometry] {
        &self.pairs
    }

    pub fn pair(&self, t: &Transformation) -> &PairGeometry {
        &self.pairs[t.scale * self.rotations.len() + t.rotation]
    }

    /// Canonical order: scale-major, then rotation, then row-major lag.
    pub fn transformation(&self, flat: usize) -> Transformation {
        debug_assert!(flat < self.total);
        let pair = self
            .pairs
            .iter()
            .rfind(|p| p.offset <= flat)
            .expect("flat index out of range");
        let local = flat - pair.offset;
        Transformation {
            y: pair.min_y + (local / pair.lag_w) as i64,
            x: pair.min_x + (local % pair.lag_w) as i64,
            rotation: pair.rot_idx,
            scale: pair.scale_idx,
        }
    }

    pub fn index_of(&self, t: &Transformation) -> usize {
        let pair = self.pair(t);
        pair.offset
            + ((t.y - pair.min_y) as usize) * pair.lag_w
            + (t.x - pair.min_x) as usize
    }

    pub fn contains(&self, t: &Transformation) -> bool {
        if t.rotation >= self.rotations.len() || t.scale >= self.scales.len() {
            return false;
        }
        let pair = self.pair(t);
        t.y >= pair.min_y
            && t.y < pair.min_y + pair.lag_h as i64
            && t.x >= pair.min_x
            && t.x < pair.min_x + pair.lag_w as i64
    }

    /// Full list of transformations in canonical order.
    pub fn enumerate(&self) -> Vec<Transformation> {
        (0..self.total).map(|i| self.transformation(i)).collect()
    }

    /// Draw a transformation uniformly by flat index.
    pub fn uniform<R: rand::Rng>(&self, rng: &mut R) -> Transformation {
        let flat = rng.random_range(0..self.total);
        self.transformation(flat)
    }
}

/// All transformations of a space in canonical order (scale-major, then
/// rotation, then row-major lag).
pub fn enumerate_transformations(space: &TransformationSpace) -> Vec<Transformation> {
    space.enumerate()
}

/// A feature canvas rendered into the image frame under a transformation.
#[derive(Debug, Clone)]
pub struct RenderedFeature {
    /// `(H, W, C)`; zero outside the support.
    pub values: Array3<f64>,
    /// Pixels touched by the transformed canvas.
    pub support: Array2<bool>,
}

/// Render `canvas` under `t` into an `image_h x image_w` frame.
pub fn render_feature(
    canvas: &Array3<f64>,
    t: &Transformation,
    space: &TransformationSpace,
) -> RenderedFeature {
    let c = canvas.dim().2;
    let mut values = Array3::zeros((space.image_h, space.image_w, c));
    let mut support = Array2::from_elem((space.image_h, space.image_w), false);
    let pair = space.pair(t);
    for i in 0..pair.out_h {
        let y = i as i64 + t.y;
        if y < 0 || y >= space.image_h as i64 {
            continue;
        }
        for j in 0..pair.out_w {
            let x = j as i64 + t.x;
            if x < 0 || x >= space.image_w as i64 {
                continue;
            }
            let (sy, sx) = pair.source(i, j);
            for ch in 0..c {
                values[(y as usize, x as usize, ch)] = canvas[(sy, sx, ch)];
            }
            support[(y as usize, x as usize)] = true;
        }
    }
    RenderedFeature { values, support }
}

/// Add (`sign = 1.0`) or subtract (`sign = -1.0`) a rendered canvas into an
/// accumulator image without allocating.
pub fn render_accumulate(
    acc: &mut Array3<f64>,
    canvas: &Array3<f64>,
    t: &Transformation,
    space: &TransformationSpace,
    sign: f64,
) {
    let c = canvas.dim().2;
    let pair = space.pair(t);
    for i in 0..pair.out_h {
        let y = i as i64 + t.y;
        if y < 0 || y >= space.image_h as i64 {
            continue;
        }
        for j in 0..pair.out_w {
            let x = j as i64 + t.x;
            if x < 0 || x >= space.image_w as i64 {
                continue;
            }
            let (sy, sx) = pair.source(i, j);
            for ch in 0..c {
                acc[(y as usize, x as usize, ch)] += sign * canvas[(sy, sx, ch)];
            }
        }
    }
}

/// Canvas pixel whose render lands on image pixel `(y, x)`, or None when
/// the pixel is outside the transformed footprint.
pub fn inverse_pixel_map(
    space: &TransformationSpace,
    t: &Transformation,
    y: usize,
    x: usize,
) -> Option<(usize, usize)> {
    let pair = space.pair(t);
    let i = y as i64 - t.y;
    let j = x as i64 - t.x;
    if i < 0 || j < 0 || i >= pair.out_h as i64 || j >= pair.out_w as i64 {
        return None;
    }
    Some(pair.source(i as usize, j as usize))
}

/// In-frame image pixels where canvas pixel `(cy, cx)` lands under `t`.
pub fn landing_pixels<'a>(
    space: &'a TransformationSpace,
    t: &Transformation,
    cy: usize,
    cx: usize,
) -> impl Iterator<Item = (usize, usize)> + 'a {
    let pair = space.pair(t);
    let (ih, iw) = (space.image_h as i64, space.image_w as i64);
    let (ty, tx) = (t.y, t.x);
    pair.targets_of(cy, cx, space.canvas_w)
        .iter()
        .filter_map(move |&(i, j)| {
            let y = i as i64 + ty;
            let x = j as i64 + tx;
            if y >= 0 && y < ih && x >= 0 && x < iw {
                Some((y as usize, x as usize))
            } else {
                None
            }
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn canvas_from(rows: &[&[f64]]) -> Array3<f64> {
        let h = rows.len();
        let w = rows[0].len();
        let mut c = Array3::zeros((h, w, 1));
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                c[(i, j, 0)] = *v;
            }
        }
        c
    }

    #[test]
    fn enumeration_counts() {
        let s = TransformationSpace::new(3, 3, 2, 2, &[0], &[1.0], TranslationRange::Full).unwrap();
        assert_eq!(s.len(), 16);
        let s4 =
            TransformationSpace::new(3, 3, 2, 2, &[0, 1, 2, 3], &[1.0], TranslationRange::Full)
                .unwrap();
        assert_eq!(s4.len(), 64);
        let id = TransformationSpace::identity_only(1, 1, 1, 1).unwrap();
        assert_eq!(id.len(), 1);
    }

    #[test]
    fn enumeration_has_no_duplicates_and_round_trips() {
        let s = TransformationSpace::new(
            5,
            4,
            2,
            3,
            &[0, 1, 2, 3],
            &[1.0],
            TranslationRange::Full,
        )
        .unwrap();
        let all = s.enumerate();
        assert_eq!(all.len(), s.len());
        let unique: std::collections::HashSet<_> = all.iter().cloned().collect();
        assert_eq!(unique.len(), all.len());
        for (i, t) in all.iter().enumerate() {
            assert_eq!(s.index_of(t), i);
            assert!(s.contains(t));
        }
        assert!(all.contains(&s.identity()));
    }

    #[test]
    fn rotation_is_exact_and_matches_convention() {
        let c = canvas_from(&[&[1.0], &[2.0]]); // column [a; b]
        let r = rotate_scale_canvas(&c, std::f64::consts::FRAC_PI_2, 1.0).unwrap();
        assert_eq!(r.dim(), (1, 2, 1));
        assert_eq!(r[(0, 0, 0)], 2.0);
        assert_eq!(r[(0, 1, 0)], 1.0);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let c = canvas_from(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let mut r = c.clone();
        for _ in 0..4 {
            r = rotate_scale_canvas(&r, std::f64::consts::FRAC_PI_2, 1.0).unwrap();
        }
        assert_eq!(r, c);
    }

    #[test]
    fn identity_rotation_scale_is_identity() {
        let c = canvas_from(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let r = rotate_scale_canvas(&c, 0.0, 1.0).unwrap();
        assert_eq!(r, c);
    }

    #[test]
    fn downscale_keeps_top_left_sample() {
        let c = canvas_from(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let r = rotate_scale_canvas(&c, 0.0, 0.5).unwrap();
        assert_eq!(r.dim(), (1, 1, 1));
        assert_eq!(r[(0, 0, 0)], 1.0);
    }

    #[test]
    fn upscale_duplicates_pixels() {
        let c = canvas_from(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let r = rotate_scale_canvas(&c, 0.0, 2.0).unwrap();
        assert_eq!(r.dim(), (4, 4, 1));
        assert_eq!(r[(0, 0, 0)], 1.0);
        assert_eq!(r[(0, 1, 0)], 1.0);
        assert_eq!(r[(3, 3, 0)], 4.0);
        assert_eq!(r[(2, 1, 0)], 3.0);
    }

    #[test]
    fn arbitrary_angles_rejected() {
        let c = canvas_from(&[&[1.0]]);
        assert!(rotate_scale_canvas(&c, 0.3, 1.0).is_err());
    }

    #[test]
    fn render_full_size_identity_is_identity() {
        let c = canvas_from(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let s = TransformationSpace::new(2, 2, 2, 2, &[0], &[1.0], TranslationRange::Full).unwrap();
        let r = render_feature(&c, &s.identity(), &s);
        assert_eq!(r.values, c);
        assert!(r.support.iter().all(|&b| b));
    }

    #[test]
    fn render_places_pixel() {
        let c = canvas_from(&[&[5.0]]);
        let s = TransformationSpace::new(1, 3, 1, 1, &[0], &[1.0], TranslationRange::Full).unwrap();
        let t = Transformation { x: 1, y: 0, rotation: 0, scale: 0 };
        let r = render_feature(&c, &t, &s);
        assert_eq!(r.values[(0, 0, 0)], 0.0);
        assert_eq!(r.values[(0, 1, 0)], 5.0);
        assert_eq!(r.values[(0, 2, 0)], 0.0);
        assert!(!r.support[(0, 0)] && r.support[(0, 1)] && !r.support[(0, 2)]);
    }

    #[test]
    fn render_clips_left_pixel() {
        let c = canvas_from(&[&[1.0, 2.0]]);
        let s = TransformationSpace::new(1, 3, 1, 2, &[0], &[1.0], TranslationRange::Full).unwrap();
        let t = Transformation { x: -1, y: 0, rotation: 0, scale: 0 };
        let r = render_feature(&c, &t, &s);
        assert_eq!(r.values[(0, 0, 0)], 2.0);
        assert_eq!(r.values[(0, 1, 0)], 0.0);
        assert_eq!(r.values[(0, 2, 0)], 0.0);
    }

    #[test]
    fn inverse_map_examples() {
        let s = TransformationSpace::new(1, 3, 1, 2, &[0], &[1.0], TranslationRange::Full).unwrap();
        let id = s.identity();
        assert_eq!(inverse_pixel_map(&s, &id, 0, 1), Some((0, 1)));
        let t = Transformation { x: 1, y: 0, rotation: 0, scale: 0 };
        assert_eq!(inverse_pixel_map(&s, &t, 0, 2), Some((0, 1)));
        let far = Transformation { x: -1, y: 0, rotation: 0, scale: 0 };
        assert_eq!(inverse_pixel_map(&s, &far, 0, 2), None);
    }

    #[test]
    fn render_and_inverse_map_agree_exhaustively() {
        let c = canvas_from(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let s = TransformationSpace::new(
            4,
            5,
            2,
            3,
            &[0, 1, 2, 3],
            &[1.0],
            TranslationRange::Full,
        )
        .unwrap();
        for t in s.enumerate() {
            let r = render_feature(&c, &t, &s);
            for y in 0..4 {
                for x in 0..5 {
                    match inverse_pixel_map(&s, &t, y, x) {
                        Some((cy, cx)) => {
                            assert!(r.support[(y, x)]);
                            assert_eq!(r.values[(y, x, 0)], c[(cy, cx, 0)]);
                        }
                        None => assert!(!r.support[(y, x)]),
                    }
                }
            }
        }
    }

    #[test]
    fn landing_pixels_invert_inverse_map() {
        let s = TransformationSpace::new(
            6,
            6,
            2,
            2,
            &[0, 1],
            &[1.0, 2.0],
            TranslationRange::Full,
        )
        .unwrap();
        for t in s.enumerate().iter().step_by(7) {
            for cy in 0..2 {
                for cx in 0..2 {
                    for (y, x) in landing_pixels(&s, t, cy, cx) {
                        assert_eq!(inverse_pixel_map(&s, t, y, x), Some((cy, cx)));
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_scale_rejected_at_construction() {
        let err = TransformationSpace::new(4, 4, 3, 3, &[0], &[1.0, 2.0], TranslationRange::Full);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn canvas_larger_than_image_rejected() {
        let err = TransformationSpace::new(2, 2, 3, 1, &[0], &[1.0], TranslationRange::Full);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }
}
