//! Self-describing binary checkpoints: magic `TIBP`, a format version,
//! then named arrays (row-major, little-endian, 64-bit floats or 64-bit
//! integers; each entry carries its name, element type, rank and
//! dimensions). Round trips are bit-exact, including the RNG position,
//! so interrupted chains resume identically.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, NormalizationStats};
use crate::error::{Error, Result};
use crate::io::images::write_atomic;
use crate::model::{Feature, Hyperparameters, ModelState, Variant};
use crate::transform::{Transformation, TransformationSpace, TranslationRange};

const MAGIC: &[u8; 4] = b"TIBP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    F64(Vec<f64>),
    I64(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    dims: Vec<u64>,
    payload: Payload,
}

#[derive(Debug, Default)]
struct Container {
    entries: BTreeMap<String, Entry>,
}

impl Container {
    fn put_f64(&mut self, name: &str, dims: &[u64], values: Vec<f64>) {
        debug_assert_eq!(dims.iter().product::<u64>() as usize, values.len());
        self.entries.insert(
            name.to_string(),
            Entry {
                dims: dims.to_vec(),
                payload: Payload::F64(values),
            },
        );
    }

    fn put_i64(&mut self, name: &str, dims: &[u64], values: Vec<i64>) {
        debug_assert_eq!(dims.iter().product::<u64>() as usize, values.len());
        self.entries.insert(
            name.to_string(),
            Entry {
                dims: dims.to_vec(),
                payload: Payload::I64(values),
            },
        );
    }

    fn put_scalar_f64(&mut self, name: &str, v: f64) {
        self.put_f64(name, &[], vec![v]);
    }

    fn put_scalar_i64(&mut self, name: &str, v: i64) {
        self.put_i64(name, &[], vec![v]);
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint is missing entry '{name}'")))
    }

    fn f64s(&self, name: &str) -> Result<&[f64]> {
        match &self.entry(name)?.payload {
            Payload::F64(v) => Ok(v),
            Payload::I64(_) => Err(Error::Data(format!("entry '{name}' should hold floats"))),
        }
    }

    fn i64s(&self, name: &str) -> Result<&[i64]> {
        match &self.entry(name)?.payload {
            Payload::I64(v) => Ok(v),
            Payload::F64(_) => Err(Error::Data(format!("entry '{name}' should hold integers"))),
        }
    }

    fn scalar_f64(&self, name: &str) -> Result<f64> {
        let v = self.f64s(name)?;
        if v.len() != 1 {
            return Err(Error::Data(format!("entry '{name}' is not a scalar")));
        }
        Ok(v[0])
    }

    fn scalar_i64(&self, name: &str) -> Result<i64> {
        let v = self.i64s(name)?;
        if v.len() != 1 {
            return Err(Error::Data(format!("entry '{name}' is not a scalar")));
        }
        Ok(v[0])
    }

    fn dims(&self, name: &str) -> Result<&[u64]> {
        Ok(&self.entry(name)?.dims)
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dtype: u8 = match entry.payload {
                Payload::F64(_) => 0,
                Payload::I64(_) => 1,
            };
            out.push(dtype);
            out.extend_from_slice(&(entry.dims.len() as u64).to_le_bytes());
            for d in &entry.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &entry.payload {
                Payload::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_bits().to_le_bytes());
                    }
                }
                Payload::I64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        struct Reader<'a> {
            bytes: &'a [u8],
            pos: usize,
        }
        impl<'a> Reader<'a> {
            fn take(&mut self, n: usize) -> Result<&'a [u8]> {
                if self.pos + n > self.bytes.len() {
                    return Err(Error::Data("checkpoint is truncated".into()));
                }
                let s = &self.bytes[self.pos..self.pos + n];
                self.pos += n;
                Ok(s)
            }
            fn u64(&mut self) -> Result<u64> {
                Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
            }
            fn u32(&mut self) -> Result<u32> {
                Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
            }
            fn u8(&mut self) -> Result<u8> {
                Ok(self.take(1)?[0])
            }
        }
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Data("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let count = r.u64()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u64()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Data("checkpoint entry name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            let rank = r.u64()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()?);
            }
            let len = dims.iter().product::<u64>() as usize;
            let payload = match dtype {
                0 => {
                    let mut v = Vec::with_capacity(len);
                    for _ in 0..len {
                        v.push(f64::from_bits(r.u64()?));
                    }
                    Payload::F64(v)
                }
                1 => {
                    let mut v = Vec::with_capacity(len);
                    for _ in 0..len {
                        v.push(r.u64()? as i64);
                    }
                    Payload::I64(v)
                }
                other => {
                    return Err(Error::Data(format!("unknown element type {other}")));
                }
            };
            entries.insert(name, Entry { dims, payload });
        }
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint entries".into()));
        }
        Ok(Self { entries })
    }
}

/// A parsed checkpoint, not yet bound to a dataset.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub variant: Variant,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub n_images: usize,
    pub canvas_height: usize,
    pub canvas_width: usize,
    pub rotations: Vec<u8>,
    pub scales: Vec<f64>,
    pub translations: TranslationRange,
    pub features: Vec<Feature>,
    pub z: Vec<Vec<bool>>,
    pub transforms: Vec<Vec<Option<Transformation>>>,
    pub masks: Vec<Vec<Option<Array2<u8>>>>,
    pub depth_order: Vec<usize>,
    pub hyper: Hyperparameters,
    pub proposal_temperature: f64,
    pub birth_attempt_rate: f64,
    pub stats: Option<NormalizationStats>,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub next_feature_id: u64,
}

/// Serialize a state to disk (write-temp-then-rename).
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let mut c = Container::default();
    let variant_tag: i64 = match state.variant {
        Variant::IbpLg => 0,
        Variant::LgTibp => 1,
        Variant::MTibp => 2,
    };
    c.put_scalar_i64("variant", variant_tag);
    c.put_scalar_i64("image_height", state.data.height() as i64);
    c.put_scalar_i64("image_width", state.data.width() as i64);
    c.put_scalar_i64("channels", state.data.channels() as i64);
    c.put_scalar_i64("n_images", state.n_images() as i64);
    c.put_scalar_i64("canvas_height", state.space.canvas_h() as i64);
    c.put_scalar_i64("canvas_width", state.space.canvas_w() as i64);
    c.put_i64(
        "rotations",
        &[state.space.rotations().len() as u64],
        state.space.rotations().iter().map(|&r| r as i64).collect(),
    );
    c.put_f64(
        "scales",
        &[state.space.scales().len() as u64],
        state.space.scales().to_vec(),
    );
    c.put_scalar_i64(
        "translations_full",
        i64::from(state.space.translations() == TranslationRange::Full),
    );

    let k = state.k();
    let (fh, fw, ch) = (
        state.space.canvas_h(),
        state.space.canvas_w(),
        state.data.channels(),
    );
    c.put_i64(
        "feature_ids",
        &[k as u64],
        state.features.iter().map(|f| f.id as i64).collect(),
    );
    let mut features = Vec::with_capacity(k * fh * fw * ch);
    for f in &state.features {
        features.extend(f.canvas.iter().cloned());
    }
    c.put_f64(
        "features",
        &[k as u64, fh as u64, fw as u64, ch as u64],
        features,
    );
    if state.variant.is_masked() {
        let mut shapes = Vec::with_capacity(k * fh * fw);
        for f in &state.features {
            shapes.extend(f.shape.as_ref().expect("masked variant").iter().cloned());
        }
        c.put_f64("shapes", &[k as u64, fh as u64, fw as u64], shapes);
        c.put_i64(
            "depth_order",
            &[k as u64],
            state.depth_order.iter().map(|&i| i as i64).collect(),
        );
    }
    let n = state.n_images();
    let mut z = Vec::with_capacity(n * k);
    for row in &state.z {
        z.extend(row.iter().map(|&b| i64::from(b)));
    }
    c.put_i64("z", &[n as u64, k as u64], z);

    let mut transforms = Vec::new();
    let mut masks = Vec::new();
    let mut active = 0u64;
    for nn in 0..n {
        for kk in 0..k {
            if let Some(t) = &state.transforms[nn][kk] {
                active += 1;
                transforms.extend_from_slice(&[
                    nn as i64,
                    kk as i64,
                    t.x,
                    t.y,
                    t.rotation as i64,
                    t.scale as i64,
                ]);
                if let Some(m) = &state.masks[nn][kk] {
                    masks.extend(m.iter().map(|&b| i64::from(b)));
                }
            }
        }
    }
    c.put_i64("transforms", &[active, 6], transforms);
    if state.variant.is_masked() {
        c.put_i64("masks", &[active, fh as u64, fw as u64], masks);
    }

    c.put_scalar_f64("alpha", state.hyper.alpha);
    c.put_scalar_f64("beta", state.hyper.beta);
    c.put_scalar_f64("sigma_x", state.hyper.sigma_x);
    c.put_scalar_f64("sigma_a", state.hyper.sigma_a);
    c.put_scalar_f64("alpha_prior_shape", state.hyper.alpha_shape);
    c.put_scalar_f64("alpha_prior_rate", state.hyper.alpha_rate);
    c.put_scalar_f64("sigma_x_prior_shape", state.hyper.sigma_x_shape);
    c.put_scalar_f64("sigma_x_prior_scale", state.hyper.sigma_x_scale);
    c.put_scalar_f64("sigma_a_prior_shape", state.hyper.sigma_a_shape);
    c.put_scalar_f64("sigma_a_prior_scale", state.hyper.sigma_a_scale);
    c.put_scalar_f64("proposal_temperature", state.proposal_temperature);
    c.put_scalar_f64("birth_attempt_rate", state.birth_attempt_rate);

    match &state.data.stats {
        Some(stats) => {
            c.put_scalar_i64("normalized", 1);
            c.put_f64("norm_mean", &[ch as u64], stats.mean.clone());
            c.put_f64("norm_std", &[ch as u64], stats.std.clone());
        }
        None => c.put_scalar_i64("normalized", 0),
    }

    let seed = state.rng.get_seed();
    let seed_words: Vec<i64> = seed
        .chunks_exact(8)
        .map(|w| u64::from_le_bytes(w.try_into().unwrap()) as i64)
        .collect();
    c.put_i64("rng_seed", &[4], seed_words);
    let pos = state.rng.get_word_pos();
    c.put_i64(
        "rng_word_pos",
        &[2],
        vec![(pos as u64) as i64, ((pos >> 64) as u64) as i64],
    );
    c.put_scalar_i64("iteration", state.iteration as i64);
    c.put_scalar_i64("next_feature_id", state.next_feature_id as i64);

    write_atomic(path, &c.encode())
}

/// Parse a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let c = Container::decode(&bytes)?;

    let variant = match c.scalar_i64("variant")? {
        0 => Variant::IbpLg,
        1 => Variant::LgTibp,
        2 => Variant::MTibp,
        other => return Err(Error::Data(format!("unknown variant tag {other}"))),
    };
    let image_height = c.scalar_i64("image_height")? as usize;
    let image_width = c.scalar_i64("image_width")? as usize;
    let channels = c.scalar_i64("channels")? as usize;
    let n_images = c.scalar_i64("n_images")? as usize;
    let canvas_height = c.scalar_i64("canvas_height")? as usize;
    let canvas_width = c.scalar_i64("canvas_width")? as usize;
    let rotations: Vec<u8> = c.i64s("rotations")?.iter().map(|&r| r as u8).collect();
    let scales = c.f64s("scales")?.to_vec();
    let translations = if c.scalar_i64("translations_full")? == 1 {
        TranslationRange::Full
    } else {
        TranslationRange::IdentityOnly
    };

    let fdims = c.dims("features")?.to_vec();
    if fdims.len() != 4 {
        return Err(Error::Data("features entry must have rank 4".into()));
    }
    let k = fdims[0] as usize;
    let (fh, fw, ch) = (fdims[1] as usize, fdims[2] as usize, fdims[3] as usize);
    if fh != canvas_height || fw != canvas_width || ch != channels {
        return Err(Error::Data("feature dimensions disagree with header".into()));
    }
    let fvals = c.f64s("features")?;
    let ids = c.i64s("feature_ids")?;
    if ids.len() != k {
        return Err(Error::Data("feature id count mismatch".into()));
    }
    let shapes = if variant.is_masked() {
        Some(c.f64s("shapes")?.to_vec())
    } else {
        None
    };
    let mut features = Vec::with_capacity(k);
    for i in 0..k {
        let canvas = Array3::from_shape_fn((fh, fw, ch), |(y, x, cc)| {
            fvals[((i * fh + y) * fw + x) * ch + cc]
        });
        let shape = shapes.as_ref().map(|s| {
            Array2::from_shape_fn((fh, fw), |(y, x)| s[(i * fh + y) * fw + x])
        });
        features.push(Feature {
            id: ids[i] as u64,
            canvas,
            shape,
        });
    }

    let zvals = c.i64s("z")?;
    if zvals.len() != n_images * k {
        return Err(Error::Data("z entry has wrong size".into()));
    }
    let z: Vec<Vec<bool>> = (0..n_images)
        .map(|nn| (0..k).map(|kk| zvals[nn * k + kk] == 1).collect())
        .collect();

    let tvals = c.i64s("transforms")?;
    let tdims = c.dims("transforms")?.to_vec();
    if tdims.len() != 2 || tdims[1] != 6 {
        return Err(Error::Data("transforms entry must be A x 6".into()));
    }
    let active = tdims[0] as usize;
    let mvals = if variant.is_masked() {
        Some(c.i64s("masks")?.to_vec())
    } else {
        None
    };
    let mut transforms = vec![vec![None; k]; n_images];
    let mut masks = vec![vec![None; k]; n_images];
    for a in 0..active {
        let row = &tvals[a * 6..a * 6 + 6];
        let (nn, kk) = (row[0] as usize, row[1] as usize);
        if nn >= n_images || kk >= k {
            return Err(Error::Data("transform row out of range".into()));
        }
        transforms[nn][kk] = Some(Transformation {
            x: row[2],
            y: row[3],
            rotation: row[4] as usize,
            scale: row[5] as usize,
        });
        if let Some(mv) = &mvals {
            let base = a * fh * fw;
            masks[nn][kk] = Some(Array2::from_shape_fn((fh, fw), |(y, x)| {
                mv[base + y * fw + x] as u8
            }));
        }
    }

    let depth_order: Vec<usize> = if variant.is_masked() {
        c.i64s("depth_order")?.iter().map(|&i| i as usize).collect()
    } else {
        Vec::new()
    };

    let hyper = Hyperparameters {
        alpha: c.scalar_f64("alpha")?,
        beta: c.scalar_f64("beta")?,
        sigma_x: c.scalar_f64("sigma_x")?,
        sigma_a: c.scalar_f64("sigma_a")?,
        alpha_shape: c.scalar_f64("alpha_prior_shape")?,
        alpha_rate: c.scalar_f64("alpha_prior_rate")?,
        sigma_x_shape: c.scalar_f64("sigma_x_prior_shape")?,
        sigma_x_scale: c.scalar_f64("sigma_x_prior_scale")?,
        sigma_a_shape: c.scalar_f64("sigma_a_prior_shape")?,
        sigma_a_scale: c.scalar_f64("sigma_a_prior_scale")?,
    };

    let stats = if c.scalar_i64("normalized")? == 1 {
        Some(NormalizationStats {
            mean: c.f64s("norm_mean")?.to_vec(),
            std: c.f64s("norm_std")?.to_vec(),
        })
    } else {
        None
    };

    let seed_words = c.i64s("rng_seed")?;
    if seed_words.len() != 4 {
        return Err(Error::Data("rng_seed must hold 4 words".into()));
    }
    let mut seed = [0u8; 32];
    for (i, w) in seed_words.iter().enumerate() {
        seed[i * 8..(i + 1) * 8].copy_from_slice(&(*w as u64).to_le_bytes());
    }
    let pos_words = c.i64s("rng_word_pos")?;
    if pos_words.len() != 2 {
        return Err(Error::Data("rng_word_pos must hold 2 words".into()));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos((pos_words[0] as u64 as u128) | ((pos_words[1] as u64 as u128) << 64));

    Ok(Checkpoint {
        variant,
        image_height,
        image_width,
        channels,
        n_images,
        canvas_height,
        canvas_width,
        rotations,
        scales,
        translations,
        features,
        z,
        transforms,
        masks,
        depth_order,
        hyper,
        proposal_temperature: c.scalar_f64("proposal_temperature")?,
        birth_attempt_rate: c.scalar_f64("birth_attempt_rate")?,
        stats,
        iteration: c.scalar_i64("iteration")? as u64,
        rng,
        next_feature_id: c.scalar_i64("next_feature_id")? as u64,
    })
}

impl Checkpoint {
    /// Rebuild a model state over the given dataset (which must match the
    /// recorded dimensions, e.g. the training images reloaded from disk).
    pub fn into_state(self, data: Arc<Dataset>) -> Result<ModelState> {
        if data.height() != self.image_height
            || data.width() != self.image_width
            || data.channels() != self.channels
            || data.n_images() != self.n_images
        {
            return Err(Error::Dimension(format!(
                "dataset is {}x{}x{} with {} images, checkpoint expects {}x{}x{} with {}",
                data.height(),
                data.width(),
                data.channels(),
                data.n_images(),
                self.image_height,
                self.image_width,
                self.channels,
                self.n_images,
            )));
        }
        let space = TransformationSpace::new(
            self.image_height,
            self.image_width,
            self.canvas_height,
            self.canvas_width,
            &self.rotations,
            &self.scales,
            self.translations,
        )?;
        let state = ModelState {
            variant: self.variant,
            data,
            space,
            features: self.features,
            z: self.z,
            transforms: self.transforms,
            masks: self.masks,
            depth_order: self.depth_order,
            hyper: self.hyper,
            proposal_temperature: self.proposal_temperature,
            birth_attempt_rate: self.birth_attempt_rate,
            iteration: self.iteration,
            rng: self.rng,
            next_feature_id: self.next_feature_id,
        };
        state.validate()?;
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::normalize_dataset;
    use crate::model::init_state;
    use crate::sampler::{sweep, SamplerKind};
    use ndarray::Array3;

    fn trained_state(variant: Variant, sweeps: usize) -> ModelState {
        let images: Vec<Array3<f64>> = (0..5)
            .map(|i| {
                Array3::from_shape_fn((3, 3, 2), |(y, x, c)| {
                    ((i * 5 + y * 3 + x * 2 + c) % 7) as f64 * 0.4
                })
            })
            .collect();
        let data = Arc::new(normalize_dataset(&Dataset::new(images).unwrap()).unwrap());
        let cfg = RunConfig {
            variant,
            feature_height: 2,
            feature_width: 2,
            seed: 21,
            ..RunConfig::default()
        };
        let mut state = init_state(data, &cfg).unwrap();
        for _ in 0..sweeps {
            sweep(&mut state, SamplerKind::Mh).unwrap();
        }
        state
    }

    fn assert_states_identical(a: &ModelState, b: &ModelState) {
        assert_eq!(a.k(), b.k());
        for (fa, fb) in a.features.iter().zip(&b.features) {
            assert_eq!(fa.id, fb.id);
            assert_eq!(fa.canvas, fb.canvas);
            assert_eq!(fa.shape, fb.shape);
        }
        assert_eq!(a.z, b.z);
        assert_eq!(a.transforms, b.transforms);
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.depth_order, b.depth_order);
        assert_eq!(a.hyper, b.hyper);
        assert_eq!(a.iteration, b.iteration);
        assert_eq!(a.rng, b.rng);
        assert_eq!(a.next_feature_id, b.next_feature_id);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for variant in [Variant::LgTibp, Variant::MTibp, Variant::IbpLg] {
            let state = trained_state(variant, 6);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("chain.tibp");
            save_checkpoint(&state, &path).unwrap();
            let loaded = load_checkpoint(&path)
                .unwrap()
                .into_state(state.data.clone())
                .unwrap();
            assert_states_identical(&state, &loaded);
        }
    }

    #[test]
    fn empty_model_round_trips() {
        let state = trained_state(Variant::LgTibp, 0);
        assert_eq!(state.k(), 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tibp");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path)
            .unwrap()
            .into_state(state.data.clone())
            .unwrap();
        assert_states_identical(&state, &loaded);
    }

    #[test]
    fn resume_equals_uninterrupted() {
        let mut full = trained_state(Variant::MTibp, 0);
        let mut half = full.clone();
        for _ in 0..10 {
            sweep(&mut full, SamplerKind::Mh).unwrap();
        }
        for _ in 0..5 {
            sweep(&mut half, SamplerKind::Mh).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.tibp");
        save_checkpoint(&half, &path).unwrap();
        let mut resumed = load_checkpoint(&path)
            .unwrap()
            .into_state(half.data.clone())
            .unwrap();
        for _ in 0..5 {
            sweep(&mut resumed, SamplerKind::Mh).unwrap();
        }
        assert_states_identical(&full, &resumed);
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let state = trained_state(Variant::LgTibp, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.tibp");
        save_checkpoint(&state, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = dir.path().join("truncated.tibp");
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&truncated), Err(Error::Data(_))));

        let bad_magic = dir.path().join("magic.tibp");
        let mut tampered = bytes.clone();
        tampered[0] = b'X';
        std::fs::write(&bad_magic, &tampered).unwrap();
        assert!(matches!(load_checkpoint(&bad_magic), Err(Error::Data(_))));

        let bad_version = dir.path().join("version.tibp");
        let mut tampered = bytes;
        tampered[4] = 99;
        std::fs::write(&bad_version, &tampered).unwrap();
        assert!(matches!(load_checkpoint(&bad_version), Err(Error::Data(_))));
    }

    #[test]
    fn mismatched_dataset_rejected() {
        let state = trained_state(Variant::LgTibp, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.tibp");
        save_checkpoint(&state, &path).unwrap();
        let other = Arc::new(
            Dataset::new(vec![Array3::zeros((3, 3, 2)); 4]).unwrap(),
        );
        assert!(load_checkpoint(&path).unwrap().into_state(other).is_err());
    }
}
