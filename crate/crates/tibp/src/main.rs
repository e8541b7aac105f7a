//! Command-line interface: synthetic data generation, training,
//! held-out reconstruction, the MH-vs-enumeration benchmark and feature
//! matching against a ground-truth manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tibp::config::{parse_rotations, parse_scales, RunConfig};
use tibp::data::{denormalize_image, Dataset};
use tibp::error::{Error, Result};
use tibp::eval::{
    effective_canvases, feature_match_score, normalized_truth_canvases, reconstruct_dataset,
    run_benchmark,
};
use tibp::io::checkpoint::{load_checkpoint, save_checkpoint};
use tibp::io::images::{load_image_directory, save_pnm, LoadOptions};
use tibp::io::manifest::{load_manifest, save_manifest};
use tibp::io::trace;
use tibp::model::{init_state, ModelState, Variant};
use tibp::sampler::{sweep, SamplerKind};
use tibp::synth::{generate_synthetic_dataset, ComposeMode, SynthSpec};
use tibp::transform::TransformationSpace;

#[derive(Parser)]
#[command(name = "tibp", version, about = "Transformed Indian buffet process image models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic glyph dataset plus its truth manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "n-images", default_value_t = 100)]
        n_images: usize,
        #[arg(long, default_value_t = 9)]
        height: usize,
        #[arg(long, default_value_t = 9)]
        width: usize,
        #[arg(long, default_value = "occluding")]
        mode: String,
        #[arg(long = "include-prob", default_value_t = 0.5)]
        include_prob: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Rotation angles in degrees (multiples of 90).
        #[arg(long, default_value = "0")]
        rotations: String,
        #[arg(long, default_value = "1")]
        scales: String,
    },
    /// Run MCMC sweeps over an image directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Infer indicators and transformations for held-out images with the
    /// trained features frozen, writing reconstructions and RMSE rows.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value_t = 20)]
        sweeps: usize,
    },
    /// Per-iteration time and likelihood for each sampler over square
    /// glyph datasets.
    Benchmark {
        #[arg(long, value_delimiter = ',', default_value = "9,15")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "mh,naive")]
        samplers: Vec<String>,
        #[arg(long, default_value_t = 100)]
        iterations: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Match learned features against a truth manifest.
    Match {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}").map_err(|source| Error::Write {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

fn cmd_synth(
    out: &Path,
    n_images: usize,
    height: usize,
    width: usize,
    mode: &str,
    include_prob: f64,
    noise: f64,
    seed: u64,
    rotations: &str,
    scales: &str,
) -> Result<()> {
    let spec = SynthSpec {
        n_images,
        height,
        width,
        include_prob,
        mode: ComposeMode::parse(mode)?,
        noise,
        rotations: parse_rotations(rotations)?,
        scales: parse_scales(scales)?,
        ..SynthSpec::default()
    };
    std::fs::create_dir_all(out).map_err(|source| Error::Write {
        path: out.to_path_buf(),
        source,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dataset, truth) = generate_synthetic_dataset(&spec, &mut rng)?;
    for (i, img) in dataset.images().iter().enumerate() {
        save_pnm(&out.join(format!("image_{i:04}.ppm")), img)?;
    }
    save_manifest(&truth, &out.join("truth.manifest"))?;
    println!(
        "wrote {} images and truth.manifest to {}",
        dataset.n_images(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    data_dir: &Path,
    config_path: &Path,
    out: &Path,
    trace_path: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let opts = LoadOptions {
        resize: None,
        normalize: cfg.normalize,
    };
    let data = Arc::new(load_image_directory(data_dir, &opts)?);
    let mut state = match resume {
        Some(path) => load_checkpoint(path)?.into_state(data)?,
        None => init_state(data, &cfg)?,
    };
    let trace_file = File::create(trace_path).map_err(|source| Error::Write {
        path: trace_path.to_path_buf(),
        source,
    })?;
    let mut trace_out = BufWriter::new(trace_file);
    let werr = |source| Error::Write {
        path: trace_path.to_path_buf(),
        source,
    };
    writeln!(trace_out, "{}", trace::TRACE_HEADER).map_err(werr)?;
    for _ in 0..cfg.iterations {
        let report = sweep(&mut state, SamplerKind::Mh)?;
        writeln!(trace_out, "{}", trace::trace_row(&report)).map_err(werr)?;
        trace_out.flush().map_err(werr)?;
    }
    save_checkpoint(&state, out)?;
    println!(
        "trained {} iterations, K+ = {}, checkpoint at {}",
        cfg.iterations,
        state.k_plus(),
        out.display()
    );
    Ok(())
}

/// Rebuild the trained state from a checkpoint alone. Test-time moves
/// never read the training pixels (only the trained features, usage
/// counts and masks), so the surrogate dataset holds zeros.
fn surrogate_state(checkpoint_path: &Path) -> Result<ModelState> {
    let ck = load_checkpoint(checkpoint_path)?;
    let zeros = Array3::zeros((ck.image_height, ck.image_width, ck.channels));
    let data = Arc::new(Dataset::new(vec![zeros; ck.n_images])?);
    ck.into_state(data)
}

fn cmd_reconstruct(
    checkpoint_path: &Path,
    data_dir: &Path,
    out: &Path,
    metrics_path: &Path,
    sweeps: usize,
) -> Result<()> {
    let trained = surrogate_state(checkpoint_path)?;
    let stats = load_checkpoint(checkpoint_path)?.stats;
    let raw = load_image_directory(
        data_dir,
        &LoadOptions {
            resize: None,
            normalize: false,
        },
    )?;
    let images: Vec<Array3<f64>> = raw
        .images()
        .iter()
        .map(|img| match &stats {
            Some(s) => {
                let mut out = img.clone();
                for ((_, _, ch), v) in out.indexed_iter_mut() {
                    *v = (*v - s.mean[ch]) / s.std[ch];
                }
                out
            }
            None => img.clone(),
        })
        .collect();
    let test = Dataset::new(images)?;
    std::fs::create_dir_all(out).map_err(|source| Error::Write {
        path: out.to_path_buf(),
        source,
    })?;
    let seed = trained.rng.clone().random::<u64>();
    let results = reconstruct_dataset(&trained, &test, sweeps, seed)?;
    let mut rows = vec![trace::METRICS_HEADER.to_string()];
    for (i, (recon, rmse)) in results.iter().enumerate() {
        let visual = match &stats {
            Some(s) => denormalize_image(recon, s),
            None => recon.clone(),
        };
        save_pnm(&out.join(format!("recon_{i:04}.ppm")), &visual)?;
        rows.push(format!("{i},{rmse}"));
    }
    write_lines(metrics_path, &rows)?;
    let mean: f64 = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
    println!(
        "reconstructed {} images, mean RMSE {mean:.6} (normalized units)",
        results.len()
    );
    Ok(())
}

fn cmd_benchmark(
    sizes: &[usize],
    samplers: &[String],
    iterations: u64,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let kinds: Vec<SamplerKind> = samplers
        .iter()
        .map(|s| match s.as_str() {
            "mh" => Ok(SamplerKind::Mh),
            "naive" => Ok(SamplerKind::Naive),
            other => Err(Error::Config(format!(
                "unknown sampler '{other}' (expected mh or naive)"
            ))),
        })
        .collect::<Result<_>>()?;
    let rows = run_benchmark(sizes, &kinds, iterations, seed)?;
    let mut lines = vec![trace::BENCHMARK_HEADER.to_string()];
    lines.extend(rows.iter().map(trace::benchmark_row));
    write_lines(out, &lines)?;
    for &size in sizes {
        for kind in &kinds {
            let total: f64 = rows
                .iter()
                .filter(|r| r.image_size == size && r.sampler == kind.name())
                .map(|r| r.seconds)
                .sum();
            println!("{} at {size}x{size}: {total:.3} s total", kind.name());
        }
    }
    Ok(())
}

fn cmd_match(checkpoint_path: &Path, truth_path: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint_path)?;
    let truth = load_manifest(truth_path)?;
    let state = surrogate_state(checkpoint_path)?;
    if state.k() == 0 {
        return Err(Error::Data("checkpoint has no learned features".into()));
    }
    let learned = effective_canvases(&state);
    let truth_canvases = match &ck.stats {
        Some(stats) => normalized_truth_canvases(&truth, stats),
        None => truth.features.iter().map(|f| f.canvas.clone()).collect(),
    };
    // Match in the training space, but widen it to the full lag range for
    // the untransformed baseline so alignment is still searched.
    let space = if state.variant == Variant::IbpLg {
        TransformationSpace::new(
            ck.image_height,
            ck.image_width,
            ck.canvas_height,
            ck.canvas_width,
            &[0],
            &[1.0],
            tibp::transform::TranslationRange::Full,
        )?
    } else {
        state.space.clone()
    };
    let report = feature_match_score(&learned, &truth_canvases, &space)?;
    let names: Vec<String> = truth.features.iter().map(|f| f.name.clone()).collect();
    let mut lines = vec![trace::MATCH_HEADER.to_string()];
    lines.extend(trace::match_rows(&report, &names));
    write_lines(out, &lines)?;
    println!(
        "matched {} features, mean RMSE {:.6}",
        report.pairs.len(),
        report.mean_matched_rmse
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth {
            out,
            n_images,
            height,
            width,
            mode,
            include_prob,
            noise,
            seed,
            rotations,
            scales,
        } => cmd_synth(
            &out,
            n_images,
            height,
            width,
            &mode,
            include_prob,
            noise,
            seed,
            &rotations,
            &scales,
        ),
        Cmd::Train {
            data,
            config,
            out,
            trace,
            resume,
        } => cmd_train(&data, &config, &out, &trace, resume.as_deref()),
        Cmd::Reconstruct {
            checkpoint,
            data,
            out,
            metrics,
            sweeps,
        } => cmd_reconstruct(&checkpoint, &data, &out, &metrics, sweeps),
        Cmd::Benchmark {
            sizes,
            samplers,
            iterations,
            out,
            seed,
        } => cmd_benchmark(&sizes, &samplers, iterations, &out, seed),
        Cmd::Match {
            checkpoint,
            truth,
            out,
        } => cmd_match(&checkpoint, &truth, &out),
    }
}

fn main() -> std::process::ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Keep clap's help/version on stdout with success, everything
            // else is a usage error (exit 1).
            use clap::error::ErrorKind;
            let _ = e.print();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                std::process::ExitCode::SUCCESS
            } else {
                std::process::ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::from(e.exit_code())
        }
    }
}
