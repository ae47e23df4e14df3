//! End-to-end runs: build or load an avatar, stream a motion preset through
//! the simulated channel into the receiver, and tabulate latency.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motion::{self, Preset};
use crate::netsim::{self, ChannelConfig, ClockMode, Conformance, NetError, SessionConfig, SessionReport, NS_PER_S};
use crate::package::{self, AvatarPackage, BuildSpec, PackageError};
use crate::params::ParamError;
use crate::receiver::{CameraSpec, Receiver, ReceiverError, ReceiverOptions, ReceiverReport};
use crate::skinning::RigSpec;
use crate::stats::{summarize, Summary};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error(transparent)]
    Receiver(#[from] ReceiverError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Channel file for a bench run: the uplink carries signaling and frames,
/// the downlink carries the answer and the avatar package.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchChannel {
    pub up: ChannelConfig,
    #[serde(default)]
    pub down: Option<ChannelConfig>,
}

impl BenchChannel {
    pub fn symmetric(c: ChannelConfig) -> Self {
        Self { up: c, down: None }
    }

    pub fn downlink(&self) -> ChannelConfig {
        self.down.clone().unwrap_or_else(|| ChannelConfig {
            seed: self.up.seed.wrapping_add(1),
            ..self.up.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub gaussians: usize,
    pub frames: usize,
    pub rate_hz: f64,
    pub preset: Preset,
    pub seed: u64,
    pub interpolate: bool,
    pub channel: BenchChannel,
    pub rig: RigSpec,
    pub controllers: usize,
    pub allow_nonstandard: bool,
    pub composite: Option<CameraSpec>,
    pub mode: ClockMode,
}

impl BenchConfig {
    pub fn new(gaussians: usize, frames: usize, seed: u64) -> Self {
        Self {
            gaussians,
            frames,
            rate_hz: 30.0,
            preset: Preset::Wave,
            seed,
            interpolate: true,
            channel: BenchChannel::symmetric(ChannelConfig::ideal()),
            rig: RigSpec::capsule(32),
            controllers: crate::gsdeform::CONTROLLER_COUNT,
            allow_nonstandard: false,
            composite: None,
            mode: ClockMode::Virtual,
        }
    }
}

/// One row of the latency table, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub content_hash: String,
    pub stages: Vec<StageRow>,
    pub channel_latency_ms: Summary,
    pub compute_ms: Summary,
    pub one_way_ms: Summary,
    pub bitrate_mbps: f64,
    pub delivered_fps: f64,
    pub output_fps: f64,
    pub conformance: Conformance,
    pub session: SessionReport,
    pub receiver: ReceiverReport,
    /// BLAKE3 digest of each rendered frame in output order.
    pub frame_digests: Vec<String>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Plain-text table of per-stage and aggregate latencies.
    pub fn table(&self) -> String {
        let mut s = format!("{:<14}{:>12}{:>12}\n", "stage", "p50 ms", "p95 ms");
        let mut row = |name: &str, a: f64, b: f64| s.push_str(&format!("{name:<14}{a:>12.3}{b:>12.3}\n"));
        for r in &self.stages {
            row(&r.stage, r.p50_ms, r.p95_ms);
        }
        row("compute", self.compute_ms.p50, self.compute_ms.p95);
        row("one-way", self.one_way_ms.p50, self.one_way_ms.p95);
        s.push_str(&format!("bitrate       {:.4} Mbps\n", self.bitrate_mbps));
        s.push_str(&format!("delivered     {:.2} FPS\n", self.delivered_fps));
        s.push_str(&format!("output        {:.2} FPS\n", self.output_fps));
        s
    }
}

pub fn build_package(cfg: &BenchConfig) -> Result<AvatarPackage, BenchError> {
    let mut spec = BuildSpec::new(cfg.rig.clone(), cfg.gaussians, cfg.seed);
    spec.controllers = cfg.controllers;
    spec.allow_nonstandard = cfg.allow_nonstandard;
    Ok(package::build_avatar(&spec)?)
}

/// Full session over the simulated channel. `repo` receives the avatar
/// package that the receiver fetches during amortization.
pub fn run_bench(cfg: &BenchConfig, repo: &Path) -> Result<BenchReport, BenchError> {
    let pkg = build_package(cfg)?;
    run_bench_with(cfg, pkg, repo, |_| {})
}

pub fn run_bench_with(
    cfg: &BenchConfig,
    pkg: AvatarPackage,
    repo: &Path,
    mut on_frame: impl FnMut(&crate::receiver::RenderFrame),
) -> Result<BenchReport, BenchError> {
    if cfg.frames == 0 {
        return Err(BenchError::Config("frames must be positive".into()));
    }
    let id = format!("bench-{}", cfg.seed);
    package::publish_avatar(repo, &id, &pkg)?;
    let source = motion::generate(cfg.preset, cfg.frames, cfg.rate_hz, cfg.seed)?;
    let session = SessionConfig {
        peer_id: "bench".into(),
        repo: repo.to_path_buf(),
        avatar_id: id,
        manifest_hash: pkg.content_hash().to_string(),
        up: cfg.channel.up.clone(),
        down: cfg.channel.downlink(),
        mode: cfg.mode,
        handshake_timeout_ms: 500.0,
        handshake_attempts: 3,
        verify_bytes_per_s: 500e6,
    };
    let opts = ReceiverOptions {
        interpolate: cfg.interpolate,
        composite: cfg.composite,
        timing: cfg.mode,
        ..Default::default()
    };
    let mut digests = Vec::new();
    let mut rx = Receiver::new(opts, |f: &crate::receiver::RenderFrame| {
        digests.push(hex::encode(f.digest));
        on_frame(f);
    });
    let sess = netsim::run_session(&session, &source, cfg.rate_hz, &mut rx)?;
    let recv = rx.finish()?;

    let link = cfg.channel.up.validate()?;
    let conformance = netsim::fluid_conformance(&link, &sess.transmissions(), NS_PER_S, 1e-3);
    let mut stages: Vec<StageRow> = vec![StageRow {
        stage: "transmission".into(),
        p50_ms: sess.latency_ms.p50,
        p95_ms: sess.latency_ms.p95,
    }];
    let order = ["buffer", "decode", "interpolate", "pose", "deform", "sort", "composite"];
    let by_name: BTreeMap<&str, &Summary> = recv.stages_us.iter().map(|(k, v)| (k.as_str(), v)).collect();
    for name in order {
        if let Some(s) = by_name.get(name) {
            stages.push(StageRow {
                stage: name.into(),
                p50_ms: s.p50 / 1e3,
                p95_ms: s.p95 / 1e3,
            });
        }
    }
    let one_way: Vec<f64> = recv.frames.iter().map(|f| f.total_us / 1e3).collect();
    Ok(BenchReport {
        config: cfg.clone(),
        content_hash: pkg.content_hash().to_string(),
        stages,
        channel_latency_ms: sess.latency_ms,
        compute_ms: recv.compute_ms,
        one_way_ms: summarize(&one_way),
        bitrate_mbps: sess.bitrate_mbps,
        delivered_fps: sess.delivered_fps,
        output_fps: recv.output_fps,
        conformance,
        session: sess,
        receiver: recv,
        frame_digests: digests,
    })
}
