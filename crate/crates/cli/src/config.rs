//! Run configuration and command-line parsing.

use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use msreg::multiscale::ScaleSchedule;
use msreg::regnet::NetConfig;
use msreg::{Scale, RegError};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Register --moving onto --fixed.
    Register,
    /// Register consecutive frames of --frames.
    Track,
    /// Label --fixed from the most similar atlas in --atlas-dir.
    Segment,
    /// Synthetic deformation recovery suite.
    Benchmark,
    /// Population training, writes --checkpoint.
    Train,
    /// Metrics of a given or predicted field.
    Eval,
}

/// Preset scale schedules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Two scales {1/2, 1}.
    Hippo2,
    /// Four scales {1/8, 1/4, 1/2, 1}.
    Echo4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Precision {
    #[value(name = "32")]
    #[serde(rename = "32")]
    F32,
    #[value(name = "64")]
    #[serde(rename = "64")]
    F64,
}

/// Command-line surface.
#[derive(Clone, Debug, Parser)]
#[command(name = "msreg", version, about = "Multi-scale test-time-trained deformable registration")]
pub struct Cli {
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long)]
    pub moving: Option<PathBuf>,
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    /// Directory of frames (track) or images (train), sorted by file name.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    /// Directory of `<name>_image.{mft,pgm}` / `<name>_labels.mft` atlases.
    #[arg(long)]
    pub atlas_dir: Option<PathBuf>,
    /// Ground-truth labels of --fixed (segment), for Dice.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Evaluation mask of --fixed.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Existing field to evaluate (eval).
    #[arg(long)]
    pub field: Option<PathBuf>,
    /// Custom schedule, e.g. "1/4,1/2,1"; overrides --profile.
    #[arg(long)]
    pub scales: Option<String>,
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    /// Optimisation steps per scale.
    #[arg(long, default_value_t = 3500)]
    pub steps: usize,
    #[arg(long, default_value_t = 10.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Loss window: one extent for all axes or one per axis ("6" or "5,5,5").
    #[arg(long)]
    pub window: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "32")]
    pub precision: Precision,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Network parameters: read by register/segment/track/eval, written by train.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Encoder widths, e.g. "16,32,32,32".
    #[arg(long)]
    pub encoder: Option<String>,
    /// Decoder widths, e.g. "32,32,32,16".
    #[arg(long)]
    pub decoder: Option<String>,
    /// Synthetic cases (benchmark, and train without --frames).
    #[arg(long, default_value_t = 5)]
    pub cases: usize,
    /// Synthetic grid extents, e.g. "64,64".
    #[arg(long, default_value = "64,64")]
    pub size: String,
    /// Synthetic maximum displacement, pixels.
    #[arg(long, default_value_t = 5.0)]
    pub max_disp: f64,
}

/// Fully resolved run settings; serialised into the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub profile: Option<Profile>,
    /// Custom scales ("1/4", ...); `None` means the profile or the default.
    pub scales: Option<Vec<String>>,
    pub steps: usize,
    pub lambda: f64,
    pub lr: f64,
    pub window: Option<Vec<usize>>,
    pub seed: u64,
    pub precision: Precision,
    pub encoder: Option<Vec<usize>>,
    pub decoder: Option<Vec<usize>>,
    pub moving: Option<PathBuf>,
    pub fixed: Option<PathBuf>,
    pub frames: Option<PathBuf>,
    pub atlas_dir: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub field: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub cases: usize,
    pub size: Vec<usize>,
    pub max_disp: f64,
}

fn usize_list(flag: &str, s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| CliError::Config(format!("--{flag}: expected comma-separated integers, got {s:?}")))
}

impl RunConfig {
    /// Defaults for `mode`, all paths unset.
    pub fn new(mode: Mode) -> Self {
        RunConfig {
            mode,
            profile: None,
            scales: None,
            steps: 3500,
            lambda: 10.0,
            lr: 1e-3,
            window: None,
            seed: 0,
            precision: Precision::F32,
            encoder: None,
            decoder: None,
            moving: None,
            fixed: None,
            frames: None,
            atlas_dir: None,
            labels: None,
            mask: None,
            field: None,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
            cases: 5,
            size: vec![64, 64],
            max_disp: 5.0,
        }
    }

    pub fn from_cli(cli: Cli) -> Result<Self, CliError> {
        let cfg = RunConfig {
            mode: cli.mode,
            profile: cli.profile,
            scales: cli.scales.map(|s| s.split(',').map(|t| t.trim().to_string()).collect()),
            steps: cli.steps,
            lambda: cli.lambda,
            lr: cli.lr,
            window: cli.window.as_deref().map(|s| usize_list("window", s)).transpose()?,
            seed: cli.seed,
            precision: cli.precision,
            encoder: cli.encoder.as_deref().map(|s| usize_list("encoder", s)).transpose()?,
            decoder: cli.decoder.as_deref().map(|s| usize_list("decoder", s)).transpose()?,
            moving: cli.moving,
            fixed: cli.fixed,
            frames: cli.frames,
            atlas_dir: cli.atlas_dir,
            labels: cli.labels,
            mask: cli.mask,
            field: cli.field,
            checkpoint: cli.checkpoint,
            out_dir: cli.out_dir,
            cases: cli.cases,
            size: usize_list("size", &cli.size)?,
            max_disp: cli.max_disp,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks mode-required paths and numeric settings.
    pub fn validate(&self) -> Result<(), CliError> {
        let need = |p: &Option<PathBuf>, flag: &str| -> Result<(), CliError> {
            match p {
                None => Err(CliError::Config(format!("mode {:?} requires --{flag}", self.mode))),
                Some(p) if !p.exists() => Err(CliError::Config(format!("--{flag}: {} does not exist", p.display()))),
                Some(_) => Ok(()),
            }
        };
        match self.mode {
            Mode::Register => {
                need(&self.moving, "moving")?;
                need(&self.fixed, "fixed")?;
            }
            Mode::Track => need(&self.frames, "frames")?,
            Mode::Segment => {
                need(&self.fixed, "fixed")?;
                need(&self.atlas_dir, "atlas-dir")?;
            }
            Mode::Benchmark => {
                if self.cases == 0 {
                    return Err(CliError::Config("--cases must be >= 1".into()));
                }
            }
            Mode::Train => {
                if self.checkpoint.is_none() {
                    return Err(CliError::Config("mode train requires --checkpoint (output path)".into()));
                }
            }
            Mode::Eval => {
                need(&self.moving, "moving")?;
                need(&self.fixed, "fixed")?;
                if self.field.is_none() {
                    need(&self.checkpoint, "checkpoint")?;
                }
            }
        }
        for (p, flag) in [
            (&self.labels, "labels"),
            (&self.mask, "mask"),
            (&self.field, "field"),
        ] {
            if p.is_some() {
                need(p, flag)?;
            }
        }
        if self.mode != Mode::Train && self.checkpoint.is_some() {
            need(&self.checkpoint, "checkpoint")?;
        }
        if self.steps == 0 {
            return Err(CliError::Config("--steps must be >= 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(CliError::Config(format!("--lambda {} must be finite and >= 0", self.lambda)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CliError::Config(format!("--lr {} must be positive", self.lr)));
        }
        if !(self.max_disp.is_finite() && self.max_disp >= 0.0) {
            return Err(CliError::Config(format!("--max-disp {} must be >= 0", self.max_disp)));
        }
        if !(2..=3).contains(&self.size.len()) {
            return Err(CliError::Config(format!("--size needs 2 or 3 extents, got {:?}", self.size)));
        }
        if let Some(w) = &self.window {
            if w.is_empty() || w.contains(&0) {
                return Err(CliError::Config(format!("--window {w:?} must be positive")));
            }
        }
        self.schedule()?;
        if self.encoder.is_some() || self.decoder.is_some() {
            self.net_config(2)?;
        }
        Ok(())
    }

    /// Scale schedule: custom scales, then the profile, then a default of
    /// four scales.
    pub fn schedule(&self) -> Result<ScaleSchedule, CliError> {
        let sched = if let Some(list) = &self.scales {
            let scales = list
                .iter()
                .map(|s| s.parse::<Scale>())
                .collect::<Result<Vec<_>, RegError>>()
                .map_err(|e| CliError::Config(format!("--scales: {e}")))?;
            let n = scales.len();
            ScaleSchedule::new(scales, vec![self.steps; n])
        } else {
            match self.profile {
                Some(Profile::Hippo2) => Ok(ScaleSchedule::two_scale(self.steps)),
                Some(Profile::Echo4) | None => Ok(ScaleSchedule::four_scale(self.steps)),
            }
        };
        sched.map_err(|e| CliError::Config(e.to_string()))
    }

    /// Loss window for images of dimensionality `ndim`.
    pub fn window_for(&self, ndim: usize) -> Result<Vec<usize>, CliError> {
        match &self.window {
            None => Ok(vec![if ndim == 3 { 5 } else { 6 }; ndim]),
            Some(w) if w.len() == 1 => Ok(vec![w[0]; ndim]),
            Some(w) if w.len() == ndim => Ok(w.clone()),
            Some(w) => Err(CliError::Config(format!("--window {w:?} does not match {ndim}D images"))),
        }
    }

    pub fn net_config(&self, ndim: usize) -> Result<NetConfig, CliError> {
        let base = NetConfig::new(ndim);
        let cfg = NetConfig::with_widths(
            ndim,
            self.encoder.clone().unwrap_or(base.encoder.clone()),
            self.decoder.clone().unwrap_or(base.decoder.clone()),
        );
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}
