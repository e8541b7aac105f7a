//! Ground-truth manifests for synthetic datasets: a line-oriented text
//! format listing the true features, per-image placements and depth
//! order. Floats are written in shortest round-trip form.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::io::images::write_atomic;
use crate::synth::{ComposeMode, GroundTruth, TruthFeature, TruthUse};
use crate::transform::Transformation;

const HEADER: &str = "tibp-truth 1";

pub fn save_manifest(truth: &GroundTruth, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{HEADER}");
    let _ = writeln!(out, "height {}", truth.height);
    let _ = writeln!(out, "width {}", truth.width);
    let _ = writeln!(out, "channels {}", truth.channels);
    let _ = writeln!(out, "mode {}", truth.mode.name());
    let _ = writeln!(out, "include_prob {}", truth.include_prob);
    let _ = writeln!(out, "noise {}", truth.noise);
    let rot: Vec<String> = truth.rotations.iter().map(|r| r.to_string()).collect();
    let _ = writeln!(out, "rotations {}", rot.join(","));
    let sc: Vec<String> = truth.scales.iter().map(|s| s.to_string()).collect();
    let _ = writeln!(out, "scales {}", sc.join(","));
    let _ = writeln!(out, "n_features {}", truth.features.len());
    let _ = writeln!(out, "n_images {}", truth.uses.len());
    for (i, f) in truth.features.iter().enumerate() {
        let (h, w, c) = f.canvas.dim();
        let _ = writeln!(out, "feature {i} {} {h} {w} {c}", f.name);
        for y in 0..h {
            let row: Vec<String> = (0..w)
                .flat_map(|x| (0..c).map(move |ch| (x, ch)))
                .map(|(x, ch)| f.canvas[(y, x, ch)].to_string())
                .collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    let order: Vec<String> = truth.depth_order.iter().map(|o| o.to_string()).collect();
    let _ = writeln!(out, "order {}", order.join(" "));
    for (n, uses) in truth.uses.iter().enumerate() {
        let _ = writeln!(out, "image {n} {}", uses.len());
        for u in uses {
            let _ = writeln!(
                out,
                "use {} {} {} {} {}",
                u.feature, u.t.x, u.t.y, u.t.rotation, u.t.scale
            );
        }
    }
    write_atomic(path, out.as_bytes())
}

struct Lines<'a> {
    iter: std::str::Lines<'a>,
    lineno: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        loop {
            let line = self
                .iter
                .next()
                .ok_or_else(|| Error::Data("manifest is truncated".into()))?;
            self.lineno += 1;
            if !line.trim().is_empty() {
                return Ok(line.trim());
            }
        }
    }

    fn field(&mut self, key: &str) -> Result<String> {
        let line = self.next()?;
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| Error::Data(format!("manifest line {}: expected '{key} ...'", self.lineno)))?;
        if k != key {
            return Err(Error::Data(format!(
                "manifest line {}: expected '{key}', found '{k}'",
                self.lineno
            )));
        }
        Ok(v.to_string())
    }
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Data(format!("manifest: bad {what} '{s}'")))
}

pub fn load_manifest(path: &Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = Lines {
        iter: text.lines(),
        lineno: 0,
    };
    if lines.next()? != HEADER {
        return Err(Error::Data("not a tibp-truth manifest".into()));
    }
    let height: usize = parse(&lines.field("height")?, "height")?;
    let width: usize = parse(&lines.field("width")?, "width")?;
    let channels: usize = parse(&lines.field("channels")?, "channels")?;
    let mode = ComposeMode::parse(&lines.field("mode")?)?;
    let include_prob: f64 = parse(&lines.field("include_prob")?, "include_prob")?;
    let noise: f64 = parse(&lines.field("noise")?, "noise")?;
    let rotations: Vec<u8> = lines
        .field("rotations")?
        .split(',')
        .map(|t| parse(t, "rotation"))
        .collect::<Result<_>>()?;
    let scales: Vec<f64> = lines
        .field("scales")?
        .split(',')
        .map(|t| parse(t, "scale"))
        .collect::<Result<_>>()?;
    let n_features: usize = parse(&lines.field("n_features")?, "n_features")?;
    let n_images: usize = parse(&lines.field("n_images")?, "n_images")?;

    let mut features = Vec::with_capacity(n_features);
    for i in 0..n_features {
        let head = lines.field("feature")?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        if parts.len() != 5 || parse::<usize>(parts[0], "feature index")? != i {
            return Err(Error::Data(format!("bad feature header '{head}'")));
        }
        let name = parts[1].to_string();
        let h: usize = parse(parts[2], "feature height")?;
        let w: usize = parse(parts[3], "feature width")?;
        let c: usize = parse(parts[4], "feature channels")?;
        let mut canvas = Array3::zeros((h, w, c));
        for y in 0..h {
            let row = lines.next()?;
            let values: Vec<f64> = row
                .split_whitespace()
                .map(|t| parse(t, "canvas value"))
                .collect::<Result<_>>()?;
            if values.len() != w * c {
                return Err(Error::Data(format!(
                    "feature {i} row {y} has {} values, expected {}",
                    values.len(),
                    w * c
                )));
            }
            for x in 0..w {
                for ch in 0..c {
                    canvas[(y, x, ch)] = values[x * c + ch];
                }
            }
        }
        features.push(TruthFeature { name, canvas });
    }

    let depth_order: Vec<usize> = lines
        .field("order")?
        .split_whitespace()
        .map(|t| parse(t, "order entry"))
        .collect::<Result<_>>()?;

    let mut uses = Vec::with_capacity(n_images);
    for n in 0..n_images {
        let head = lines.field("image")?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        if parts.len() != 2 || parse::<usize>(parts[0], "image index")? != n {
            return Err(Error::Data(format!("bad image header '{head}'")));
        }
        let count: usize = parse(parts[1], "use count")?;
        let mut drawn = Vec::with_capacity(count);
        for _ in 0..count {
            let body = lines.field("use")?;
            let parts: Vec<&str> = body.split_whitespace().collect();
            if parts.len() != 5 {
                return Err(Error::Data(format!("bad use line '{body}'")));
            }
            drawn.push(TruthUse {
                feature: parse(parts[0], "use feature")?,
                t: Transformation {
                    x: parse(parts[1], "use x")?,
                    y: parse(parts[2], "use y")?,
                    rotation: parse(parts[3], "use rotation")?,
                    scale: parse(parts[4], "use scale")?,
                },
            });
        }
        uses.push(drawn);
    }

    Ok(GroundTruth {
        height,
        width,
        channels,
        mode,
        include_prob,
        noise,
        rotations,
        scales,
        features,
        uses,
        depth_order,
    })
}
