//! The `reid` command-line pipeline: extract descriptors, estimate
//! saliency, match, train, evaluate, export weights and serve the
//! annotation tool.

pub mod commands;
pub mod matrix;
pub mod weights;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use reid_core::pipeline::MatchMethod;
use reid_core::saliency::SaliencyMethod;

/// Exit status of a command that did not fail outright.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Some inputs failed; the outputs cover the rest.
    Partial,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::Partial => 2,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] reid_core::Error),
    #[error(transparent)]
    Service(#[from] reid_annotate::ServiceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Parser)]
#[command(name = "reid", version, about = "Person re-identification by learned patch saliency")]
pub struct Cli {
    /// Pipeline configuration (TOML). Defaults apply to anything not set.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract patch descriptors for every image in a manifest.
    Extract(ExtractArgs),
    /// Estimate per-patch saliency for every grid in a descriptor store.
    Saliency(SaliencyArgs),
    /// Write a probe x gallery score matrix.
    Match(MatchArgs),
    /// Train ranking weights on a labelled descriptor store.
    Train(TrainArgs),
    /// Run the random-split evaluation protocol and write CMC curves.
    Eval(EvalArgs),
    /// Write the eight weight lattices of a model as CSV files.
    ExportWeights(ExportWeightsArgs),
    /// Serve the annotation tool over HTTP.
    AnnotateServe(AnnotateServeArgs),
    /// Generate a synthetic two-camera dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// `path,camera,identity` CSV; relative paths are relative to it.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Descriptor store to write (an `.ids` sidecar is written next to it).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Rescale every image to `HEIGHTxWIDTH` first, e.g. `128x48`.
    #[arg(long, value_parser = parse_size)]
    pub resize: Option<[usize; 2]>,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub descriptors: Option<PathBuf>,
    /// Reference store. Without it each image is scored against the other
    /// camera's images of other identities in the same store.
    #[arg(long)]
    pub refs: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<SaliencyMethod>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write one PGM heat image per map into this directory.
    #[arg(long)]
    pub pgm_dir: Option<PathBuf>,
    /// Set sigma0 to the median score of these maps instead of the
    /// configured value.
    #[arg(long)]
    pub calibrate_sigma0: bool,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub method: MatchMethod,
    /// Descriptor store. Without a separate gallery store, camera A images
    /// are the probes and camera B images the gallery.
    #[arg(long)]
    pub descriptors: Option<PathBuf>,
    /// Saliency store aligned with `--descriptors`.
    #[arg(long)]
    pub saliency: Option<PathBuf>,
    #[arg(long, requires = "gallery_descriptors")]
    pub gallery_saliency: Option<PathBuf>,
    /// Gallery store; every grid in `--descriptors` is then a probe.
    #[arg(long)]
    pub gallery_descriptors: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// External `probe,gallery,value` scores fused by esalmatch, as
    /// `FILE=WEIGHT`.
    #[arg(long = "external", value_parser = parse_external)]
    pub externals: Vec<(PathBuf, f64)>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub descriptors: Option<PathBuf>,
    #[arg(long)]
    pub saliency: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-iteration CSV log of the cutting-plane solver.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Descriptor store covering the manifest; needed with `--method`.
    #[arg(long)]
    pub descriptors: Option<PathBuf>,
    /// Methods to evaluate, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "scores")]
    pub method: Vec<MatchMethod>,
    /// Evaluate a precomputed score matrix instead of a method.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long = "external", value_parser = parse_external)]
    pub externals: Vec<(PathBuf, f64)>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportWeightsArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Scale all weights by the largest absolute weight.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Args)]
pub struct AnnotateServeArgs {
    /// Holds `manifest.csv`, `parts.csv` and `events.log`.
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory for the images and `manifest.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub identities: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_size(s: &str) -> Result<[usize; 2], String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
    match (parse(h), parse(w)) {
        (Some(h), Some(w)) => Ok([h, w]),
        _ => Err(format!("expected positive HEIGHTxWIDTH, got {s:?}")),
    }
}

fn parse_external(s: &str) -> Result<(PathBuf, f64), String> {
    let (path, weight) = s
        .rsplit_once('=')
        .ok_or_else(|| format!("expected FILE=WEIGHT, got {s:?}"))?;
    let weight: f64 = weight.parse().map_err(|e| format!("bad weight in {s:?}: {e}"))?;
    if !weight.is_finite() {
        return Err(format!("weight must be finite in {s:?}"));
    }
    Ok((PathBuf::from(path), weight))
}
