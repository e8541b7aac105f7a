//! Run configuration: the flat `key = value` config file and its typed
//! form shared by the library and the CLI.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::Variant;

/// Everything needed to set up and run one training chain.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub variant: Variant,
    pub feature_height: usize,
    pub feature_width: usize,
    /// Quarter-turn counts; parsed from degrees in the config file.
    pub rotations: Vec<u8>,
    pub scales: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub sigma_x: f64,
    pub sigma_a: f64,
    pub alpha_prior_shape: f64,
    pub alpha_prior_rate: f64,
    pub sigma_x_prior_shape: f64,
    pub sigma_x_prior_scale: f64,
    pub sigma_a_prior_shape: f64,
    pub sigma_a_prior_scale: f64,
    pub iterations: u64,
    pub seed: u64,
    pub proposal_temperature: f64,
    /// Probability that the per-image birth-death move is attempted in a
    /// sweep; 1 attempts it for every image every sweep.
    pub birth_attempt_rate: f64,
    pub data_dir: Option<PathBuf>,
    pub normalize: bool,
    pub warm_start: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::LgTibp,
            feature_height: 5,
            feature_width: 5,
            rotations: vec![0],
            scales: vec![1.0],
            alpha: 2.0,
            beta: 1.0,
            sigma_x: 1.0,
            sigma_a: 1.0,
            alpha_prior_shape: 2.0,
            alpha_prior_rate: 1.0,
            sigma_x_prior_shape: 2.0,
            sigma_x_prior_scale: 0.5,
            sigma_a_prior_shape: 2.0,
            sigma_a_prior_scale: 2.0,
            iterations: 100,
            seed: 0,
            proposal_temperature: 1.0,
            birth_attempt_rate: 1.0,
            data_dir: None,
            normalize: true,
            warm_start: 0,
        }
    }
}

pub fn parse_variant(s: &str) -> Result<Variant> {
    match s {
        "ibp-lg" => Ok(Variant::IbpLg),
        "lg-tibp" => Ok(Variant::LgTibp),
        "m-tibp" => Ok(Variant::MTibp),
        other => Err(Error::Config(format!(
            "unknown variant '{other}' (expected ibp-lg, lg-tibp or m-tibp)"
        ))),
    }
}

pub fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::IbpLg => "ibp-lg",
        Variant::LgTibp => "lg-tibp",
        Variant::MTibp => "m-tibp",
    }
}

/// Parse a comma-separated list of rotation angles in degrees into
/// quarter-turn counts.
pub fn parse_rotations(s: &str) -> Result<Vec<u8>> {
    s.split(',')
        .map(|tok| {
            let deg: f64 = tok
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad rotation '{tok}'")))?;
            let q = deg / 90.0;
            if (q - q.round()).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "rotation {deg} is not a multiple of 90 degrees"
                )));
            }
            Ok((q.round() as i64).rem_euclid(4) as u8)
        })
        .collect()
}

pub fn parse_scales(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|tok| {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad scale '{tok}'")))?;
            if v <= 0.0 {
                return Err(Error::Config(format!("scale {v} must be positive")));
            }
            Ok(v)
        })
        .collect()
}

impl RunConfig {
    /// Parse the flat `key = value` format. Lines starting with `#` and
    /// blank lines are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::Config(format!("line {}: bad {what} '{value}'", lineno + 1));
            match key {
                "variant" => cfg.variant = parse_variant(value)?,
                "feature_height" => cfg.feature_height = value.parse().map_err(|_| bad("integer"))?,
                "feature_width" => cfg.feature_width = value.parse().map_err(|_| bad("integer"))?,
                "rotations" => cfg.rotations = parse_rotations(value)?,
                "scales" => cfg.scales = parse_scales(value)?,
                "alpha" => cfg.alpha = value.parse().map_err(|_| bad("number"))?,
                "beta" => cfg.beta = value.parse().map_err(|_| bad("number"))?,
                "sigma_x" => cfg.sigma_x = value.parse().map_err(|_| bad("number"))?,
                "sigma_a" => cfg.sigma_a = value.parse().map_err(|_| bad("number"))?,
                "alpha_prior_shape" => cfg.alpha_prior_shape = value.parse().map_err(|_| bad("number"))?,
                "alpha_prior_rate" => cfg.alpha_prior_rate = value.parse().map_err(|_| bad("number"))?,
                "sigma_x_prior_shape" => cfg.sigma_x_prior_shape = value.parse().map_err(|_| bad("number"))?,
                "sigma_x_prior_scale" => cfg.sigma_x_prior_scale = value.parse().map_err(|_| bad("number"))?,
                "sigma_a_prior_shape" => cfg.sigma_a_prior_shape = value.parse().map_err(|_| bad("number"))?,
                "sigma_a_prior_scale" => cfg.sigma_a_prior_scale = value.parse().map_err(|_| bad("number"))?,
                "iterations" => cfg.iterations = value.parse().map_err(|_| bad("integer"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
                "proposal_temperature" => {
                    cfg.proposal_temperature = value.parse().map_err(|_| bad("number"))?
                }
                "birth_attempt_rate" => {
                    cfg.birth_attempt_rate = value.parse().map_err(|_| bad("number"))?
                }
                "data_dir" => cfg.data_dir = Some(PathBuf::from(value)),
                "normalize" => {
                    cfg.normalize = match value {
                        "true" | "1" | "yes" => true,
                        "false" | "0" | "no" => false,
                        _ => return Err(bad("boolean")),
                    }
                }
                "warm_start" => cfg.warm_start = value.parse().map_err(|_| bad("integer"))?,
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("sigma_x", self.sigma_x),
            ("sigma_a", self.sigma_a),
            ("alpha_prior_shape", self.alpha_prior_shape),
            ("alpha_prior_rate", self.alpha_prior_rate),
            ("sigma_x_prior_shape", self.sigma_x_prior_shape),
            ("sigma_x_prior_scale", self.sigma_x_prior_scale),
            ("sigma_a_prior_shape", self.sigma_a_prior_shape),
            ("sigma_a_prior_scale", self.sigma_a_prior_scale),
            ("proposal_temperature", self.proposal_temperature),
            ("birth_attempt_rate", self.birth_attempt_rate),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.feature_height == 0 || self.feature_width == 0 {
            return Err(Error::Config("feature dimensions must be positive".into()));
        }
        if self.birth_attempt_rate > 1.0 {
            return Err(Error::Config("birth_attempt_rate must be at most 1".into()));
        }
        Ok(())
    }
}
