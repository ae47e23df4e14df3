//! `splatlink`: send, receive and benchmark parameter-driven Gaussian avatars.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod error;
mod transport;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use splatlink_core::motion::Preset;

use crate::error::CliError;
use crate::transport::Endpoint;

#[derive(Debug, Parser)]
#[command(name = "splatlink", version, about = "Low-bitrate Gaussian avatar streaming tools")]
pub struct Cli {
    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Use the simulated clock instead of wall time.
    #[arg(long, global = true)]
    pub virtual_time: bool,
    /// Where to write the JSON report; stdout when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub report: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stream encoded motion frames to a receiver.
    Send(SendArgs),
    /// Receive frames and run the avatar receiver loop.
    Recv(RecvArgs),
    /// Sender, simulated channel and receiver in one process.
    Bench(BenchArgs),
    /// Build, inspect and calibrate avatar packages.
    #[command(subcommand)]
    Avatar(AvatarCommand),
    /// Write a synthetic motion trace.
    Motion(MotionArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

impl OnOff {
    pub fn on(self) -> bool {
        self == OnOff::On
    }
}

/// `<repo dir>:<avatar id>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AvatarAddr {
    pub repo: PathBuf,
    pub id: String,
}

impl std::str::FromStr for AvatarAddr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.rsplit_once(':') {
            Some((repo, id)) if !repo.is_empty() && !id.is_empty() => Ok(AvatarAddr {
                repo: PathBuf::from(repo),
                id: id.to_string(),
            }),
            _ => Err(format!("expected <repo>:<id>, got {s:?}")),
        }
    }
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    Preset::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
        format!("unknown preset {s:?}; expected one of {}", names.join(", "))
    })
}

fn parse_rate(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive rate, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct SendArgs {
    /// Motion trace (`.bin` binary records, otherwise CSV).
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub trace: Option<PathBuf>,
    /// Procedural motion preset: idle-sway, wave or walk.
    #[arg(long, value_parser = parse_preset)]
    pub synthetic: Option<Preset>,
    /// Frames per second.
    #[arg(long, default_value = "60", value_parser = parse_rate)]
    pub rate: f64,
    /// Seconds of synthetic motion.
    #[arg(long, default_value_t = 10.0, conflicts_with = "frames")]
    pub duration: f64,
    /// Frame count; overrides --duration and truncates traces.
    #[arg(long)]
    pub frames: Option<usize>,
    /// `pipe:<path>`, `pipe:-` or `udp:<host:port>`.
    #[arg(long)]
    pub connect: Endpoint,
    /// Announce this avatar's manifest before the first frame.
    #[arg(long)]
    pub avatar: Option<AvatarAddr>,
}

#[derive(Debug, Args)]
pub struct RecvArgs {
    /// Avatar package to drive, `<repo>:<id>`.
    #[arg(long)]
    pub avatar: AvatarAddr,
    /// `pipe:<path>`, `pipe:-` or `udp:<host:port>`.
    #[arg(long)]
    pub listen: Endpoint,
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    pub interpolate: OnOff,
    /// Camera JSON for the reference compositor, or `off`.
    #[arg(long, default_value = "off")]
    pub composite: String,
    /// Directory for PNG dumps of composited frames.
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,
    /// Dump every n-th output frame.
    #[arg(long, default_value_t = 30)]
    pub dump_every: usize,
    /// Stop after this long without packets (UDP only).
    #[arg(long, default_value_t = 5000)]
    pub idle_timeout_ms: u64,
    /// Per-frame latency breakdown CSV.
    #[arg(long)]
    pub latency_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 50_000)]
    pub gaussians: usize,
    #[arg(long, default_value_t = 300)]
    pub frames: usize,
    /// Channel JSON: a channel config, or `{"up": ..., "down": ...}`.
    #[arg(long)]
    pub channel: Option<PathBuf>,
    /// Input frame rate.
    #[arg(long, default_value = "30", value_parser = parse_rate)]
    pub rate: f64,
    #[arg(long, default_value = "wave", value_parser = parse_preset)]
    pub preset: Preset,
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    pub interpolate: OnOff,
    /// Camera JSON for the reference compositor, or `off`.
    #[arg(long, default_value = "off")]
    pub composite: String,
    /// Rig JSON; a capsule when omitted.
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub controllers: usize,
    #[arg(long)]
    pub allow_nonstandard: bool,
    /// Repository directory for the avatar package; temporary when omitted.
    #[arg(long)]
    pub repo: Option<PathBuf>,
    /// Per-frame latency breakdown CSV.
    #[arg(long)]
    pub latency_csv: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AvatarCommand {
    /// Build a procedural avatar package.
    Build(BuildArgs),
    /// Print a package manifest.
    Inspect {
        #[arg(long)]
        avatar: AvatarAddr,
    },
    /// Refit deformation bases to target residuals.
    Calibrate(CalibrateArgs),
    /// Write target residuals produced by seeded random bases.
    Plant(PlantArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Rig JSON.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub gaussians: usize,
    #[arg(long, default_value_t = 500)]
    pub controllers: usize,
    #[arg(long, default_value_t = 8)]
    pub bases: usize,
    #[arg(long)]
    pub allow_nonstandard: bool,
    /// Destination, `<repo>:<id>`.
    #[arg(long)]
    pub out: AvatarAddr,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub avatar: AvatarAddr,
    /// Motion trace paired with the targets.
    #[arg(long)]
    pub motion: PathBuf,
    /// Target residual file.
    #[arg(long)]
    pub target: PathBuf,
    /// Ridge weight.
    #[arg(long, default_value_t = 1e-9)]
    pub lambda: f64,
    /// Destination; overwrites the input package when omitted.
    #[arg(long)]
    pub out: Option<AvatarAddr>,
}

#[derive(Debug, Args)]
pub struct PlantArgs {
    #[arg(long)]
    pub avatar: AvatarAddr,
    #[arg(long)]
    pub motion: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Half-width of the planted basis entries.
    #[arg(long, default_value_t = 0.01)]
    pub scale: f64,
}

#[derive(Debug, Args)]
pub struct MotionArgs {
    #[arg(long, value_parser = parse_preset)]
    pub preset: Preset,
    #[arg(long)]
    pub frames: usize,
    #[arg(long, default_value = "30", value_parser = parse_rate)]
    pub rate: f64,
    /// Output path; `.bin` writes binary records, anything else CSV.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
