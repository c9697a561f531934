//! Command-line pipeline: synthesize or ingest data, align, calibrate,
//! reconstruct, train fields, query and evaluate.

pub mod error;
pub mod manifest;
pub mod stages;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use jcr::io;
use jcr::synth::NoiseProfile;

use crate::error::{InStage, StageError};
use crate::manifest::{PipelineManifest, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "jcr", version, about = "Marker-free hand-eye calibration with scale recovery and scene fields")]
pub struct Cli {
    /// Pipeline manifest (for `synth`: a synth config).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the manifest seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// For `run`: stop after this stage.
    #[arg(long, global = true)]
    pub stage: Option<String>,
    /// Reconstruct even if calibration residuals exceed the thresholds.
    #[arg(long, global = true)]
    pub force_uncalibrated: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoisePreset {
    /// Exact data.
    Zero,
    /// 0.5° / 2 mm end-effector noise, confidence-scaled pointmap noise.
    Default,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its pipeline manifest.
    Synth {
        /// Replaces the config's noise profile.
        #[arg(long, value_enum)]
        noise: Option<NoisePreset>,
        /// Replaces the config's pose count.
        #[arg(long)]
        poses: Option<usize>,
    },
    /// Globally align pairwise pointmaps.
    Align,
    /// Solve hand-eye rotation, translation and scale.
    Calibrate,
    /// Transform confident points into the robot base frame.
    Reconstruct,
    /// Train the configured scene fields on the reconstructed cloud.
    TrainField,
    /// Query a field model at points read from CSV (columns x,y,z).
    Query {
        /// Field model file written by `train-field`.
        #[arg(long)]
        model: PathBuf,
        /// CSV with a header and columns x,y,z in meters, robot base frame.
        #[arg(long)]
        input: PathBuf,
        /// Defaults to `query_out.csv` in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Report calibration errors against ground truth, or residuals only.
    Eval {
        /// Ground-truth record; defaults to the manifest's `inputs.ground_truth`.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Run align, calibrate, reconstruct and train-field in order.
    Run,
}

fn out_dir(cli: &Cli, manifest: Option<&PipelineManifest>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| manifest.and_then(|m| m.output_dir.as_ref().map(|p| m.resolve(p))))
        .unwrap_or_else(|| PathBuf::from("jcr_out"))
}

fn load_manifest(cli: &Cli) -> Result<PipelineManifest, StageError> {
    let path = cli
        .manifest
        .as_deref()
        .ok_or_else(|| StageError::input("manifest", "--manifest is required"))?;
    let mut m = PipelineManifest::load(path)?;
    if let Some(seed) = cli.seed {
        m.seed = seed;
    }
    Ok(m)
}

fn ensure_dir(dir: &Path) -> Result<(), StageError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| StageError::input("output", format!("cannot create {}: {e}", dir.display())))
}

/// Executes one command; the error carries the exit code.
pub fn execute(cli: &Cli) -> Result<(), StageError> {
    match &cli.command {
        Command::Synth { noise, poses } => {
            let mut cfg: SynthConfig = match &cli.manifest {
                Some(p) => io::read_json(p).stage("synth")?,
                None => SynthConfig::default(),
            };
            match noise {
                Some(NoisePreset::Zero) => cfg.noise = NoiseProfile::zero(),
                Some(NoisePreset::Default) => cfg.noise = NoiseProfile::default(),
                None => {}
            }
            if let Some(n) = poses {
                cfg.trajectory.num_poses = *n;
            }
            let out = out_dir(cli, None);
            ensure_dir(&out)?;
            let seed = cli.seed.unwrap_or(cfg.pipeline.seed);
            let path = stages::synth(&cfg, seed, &out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Query { model, input, output } => {
            let out = out_dir(cli, None);
            let output = output.clone().unwrap_or_else(|| out.join("query_out.csv"));
            if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
                ensure_dir(dir)?;
            }
            let n = stages::query(model, input, &output)?;
            println!("{n} points -> {}", output.display());
            Ok(())
        }
        Command::Eval { ground_truth } => {
            let manifest = cli.manifest.as_ref().map(|_| load_manifest(cli)).transpose()?;
            let out = out_dir(cli, manifest.as_ref());
            let report = stages::eval(manifest.as_ref(), &out, ground_truth.as_deref())?;
            print!("{}", report.table());
            Ok(())
        }
        cmd => {
            let m = load_manifest(cli)?;
            let out = out_dir(cli, Some(&m));
            ensure_dir(&out)?;
            match cmd {
                Command::Align => stages::align(&m, &out).map(drop),
                Command::Calibrate => stages::calibrate_stage(&m, &out).map(drop),
                Command::Reconstruct => stages::reconstruct(&m, &out, cli.force_uncalibrated).map(drop),
                Command::TrainField => stages::train_fields(&m, &out).map(drop),
                Command::Run => stages::run(&m, &out, cli.stage.as_deref(), cli.force_uncalibrated),
                _ => unreachable!("handled above"),
            }
        }
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
