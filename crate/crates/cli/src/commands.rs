use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use splatlink_core::bench::{self, BenchChannel, BenchConfig};
use splatlink_core::calibrate::{self, CalibrationReport};
use splatlink_core::codec::{self, FramePacket, MsgType, MIN_BITRATE_FRAMES};
use splatlink_core::motion;
use splatlink_core::netsim::{ChannelConfig, ClockMode};
use splatlink_core::package::{self, AvatarPackage, BuildSpec, Manifest};
use splatlink_core::params::MotionParams;
use splatlink_core::receiver::{CameraSpec, Receiver, ReceiverOptions};
use splatlink_core::skinning::RigSpec;
use splatlink_core::stats::{summarize, Summary};

use crate::error::CliError;
use crate::transport::{Endpoint, PacketReader, PacketWriter};
use crate::{AvatarAddr, AvatarCommand, BenchArgs, Cli, CliResult, Command, MotionArgs, RecvArgs, SendArgs};

pub fn run(cli: &Cli) -> CliResult<()> {
    let mode = if cli.virtual_time { ClockMode::Virtual } else { ClockMode::RealTime };
    match &cli.command {
        Command::Send(a) => {
            let to_stdout = a.connect == Endpoint::Stdio;
            let r = send(a, mode, cli.seed)?;
            emit(cli, &r, to_stdout)
        }
        Command::Recv(a) => {
            let r = recv(a, mode)?;
            emit(cli, &r, false)
        }
        Command::Bench(a) => {
            let r = run_bench(a, mode, cli.seed)?;
            eprint!("{}", r.table());
            emit(cli, &r, false)
        }
        Command::Avatar(c) => avatar(cli, c),
        Command::Motion(a) => {
            let r = write_motion(a, cli.seed)?;
            emit(cli, &r, false)
        }
    }
}

/// Writes the JSON report to `--report`, or to stdout (stderr when stdout
/// carries packets).
fn emit<T: Serialize>(cli: &Cli, report: &T, stdout_busy: bool) -> CliResult<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    match &cli.report {
        Some(p) => fs::write(p, json)?,
        None if stdout_busy => eprint!("{json}"),
        None => print!("{json}"),
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid {what} {}: {e}", path.display())))
}

fn camera_arg(s: &str) -> CliResult<Option<CameraSpec>> {
    if s == "off" {
        return Ok(None);
    }
    let cam: CameraSpec = read_json(Path::new(s), "camera")?;
    cam.basis().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Some(cam))
}

fn read_trace(path: &Path) -> CliResult<Vec<MotionParams>> {
    let f = File::open(path).map_err(|e| CliError::Data(format!("cannot open trace {}: {e}", path.display())))?;
    let r = std::io::BufReader::new(f);
    let frames = if path.extension().is_some_and(|e| e == "bin") {
        motion::read_bin(r)?
    } else {
        motion::read_csv(r)?
    };
    Ok(frames)
}

fn fetch(addr: &AvatarAddr) -> CliResult<AvatarPackage> {
    Ok(package::fetch_avatar(&addr.repo, &addr.id)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SendReport {
    pub source: String,
    pub clock: ClockMode,
    pub rate_hz: f64,
    pub frames_sent: usize,
    pub bytes_sent: usize,
    pub compressed_frames: usize,
    pub packet_bytes: Summary,
    pub duration_s: f64,
    pub achieved_fps: f64,
    pub bitrate_mbps: f64,
    /// Steady-state estimate; needs at least 300 frames.
    pub steady_state_mbps: Option<f64>,
}

fn send(a: &SendArgs, mode: ClockMode, seed: u64) -> CliResult<SendReport> {
    let (source, mut frames) = match (&a.trace, a.synthetic) {
        (Some(p), _) => (p.display().to_string(), read_trace(p)?),
        (None, Some(preset)) => {
            let n = a.frames.unwrap_or((a.rate * a.duration).round() as usize);
            (preset.name().to_string(), motion::generate(preset, n, a.rate, seed)?)
        }
        (None, None) => return Err(CliError::Usage("one of --trace or --synthetic is required".into())),
    };
    if let Some(n) = a.frames {
        frames.truncate(n);
    }
    let packets: Vec<FramePacket> = frames.iter().map(codec::encode_frame).collect::<Result<_, _>>()?;
    let mut out = PacketWriter::connect(&a.connect)?;
    if let Some(addr) = &a.avatar {
        let pkg = fetch(addr)?;
        out.send(&FramePacket::new(MsgType::AvatarManifest, 0, 0, pkg.manifest_json().into_bytes())?)?;
    }
    let t0 = Instant::now();
    let mut last_send = Duration::ZERO;
    for (i, p) in packets.iter().enumerate() {
        if mode == ClockMode::RealTime {
            let due = Duration::from_secs_f64(i as f64 / a.rate);
            if let Some(wait) = due.checked_sub(t0.elapsed()) {
                std::thread::sleep(wait);
            }
            out.send(p)?;
            last_send = t0.elapsed();
        } else {
            out.send(p)?;
        }
    }
    out.flush()?;
    let n = packets.len();
    let bytes: usize = packets.iter().map(|p| p.wire_len()).sum();
    let nominal = n as f64 / a.rate;
    let achieved_fps = match mode {
        ClockMode::Virtual => a.rate,
        ClockMode::RealTime if n > 1 && last_send > Duration::ZERO => (n - 1) as f64 / last_send.as_secs_f64(),
        ClockMode::RealTime => 0.0,
    };
    let sizes: Vec<f64> = packets.iter().map(|p| p.wire_len() as f64).collect();
    Ok(SendReport {
        source,
        clock: mode,
        rate_hz: a.rate,
        frames_sent: n,
        bytes_sent: bytes,
        compressed_frames: packets.iter().filter(|p| p.is_compressed()).count(),
        packet_bytes: summarize(&sizes),
        duration_s: match mode {
            ClockMode::Virtual => nominal,
            ClockMode::RealTime => last_send.as_secs_f64(),
        },
        achieved_fps,
        bitrate_mbps: if n > 0 { bytes as f64 * 8.0 / nominal / 1e6 } else { 0.0 },
        steady_state_mbps: if n >= MIN_BITRATE_FRAMES {
            Some(codec::steady_state_bitrate(a.rate, &[frames])?)
        } else {
            None
        },
    })
}

fn recv(a: &RecvArgs, mode: ClockMode) -> CliResult<splatlink_core::receiver::ReceiverReport> {
    let pkg = fetch(&a.avatar)?;
    let composite = camera_arg(&a.composite)?;
    if a.dump_every == 0 {
        return Err(CliError::Usage("--dump-every must be positive".into()));
    }
    if let Some(d) = &a.dump_dir {
        if composite.is_none() {
            return Err(CliError::Usage("--dump-dir needs --composite".into()));
        }
        fs::create_dir_all(d)?;
    }
    let opts = ReceiverOptions {
        interpolate: a.interpolate.on(),
        composite,
        timing: mode,
        ..Default::default()
    };
    let expected_hash = pkg.content_hash().to_string();
    let mut dump_err = None;
    let mut produced = 0usize;
    let mut rx = Receiver::with_package(opts, pkg, |f| {
        if let (Some(dir), Some(img)) = (&a.dump_dir, &f.image) {
            if produced.is_multiple_of(a.dump_every) {
                let path = dir.join(format!("frame_{:06}.png", f.half_index));
                if let Err(e) = img.write_png(&path) {
                    dump_err.get_or_insert(e);
                }
            }
        }
        produced += 1;
    })?;
    let mut input = PacketReader::listen(&a.listen, Duration::from_millis(a.idle_timeout_ms))?;
    while let Some(p) = input.next()? {
        match p.msg_type {
            MsgType::AvatarManifest => {
                let m: Manifest = serde_json::from_slice(&codec::decode_payload(&p)?)
                    .map_err(|e| CliError::Protocol(format!("malformed avatar manifest: {e}")))?;
                if m.content_hash != expected_hash {
                    return Err(CliError::Data(format!(
                        "corruption: sender announced avatar {} but the local package is {expected_hash}",
                        m.content_hash
                    )));
                }
            }
            MsgType::ParamFrame => rx.push_packet(&p, 0)?,
            MsgType::Signal | MsgType::Ack => {}
        }
    }
    let report = rx.finish()?;
    if let Some(e) = dump_err {
        return Err(e.into());
    }
    if let Some(p) = &a.latency_csv {
        report.write_latency_csv(BufWriter::new(File::create(p)?))?;
    }
    Ok(report)
}

fn run_bench(a: &BenchArgs, mode: ClockMode, seed: u64) -> CliResult<bench::BenchReport> {
    let channel = match &a.channel {
        None => BenchChannel::symmetric(ChannelConfig::ideal()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("cannot read channel {}: {e}", p.display())))?;
            match serde_json::from_str::<BenchChannel>(&text) {
                Ok(c) => c,
                Err(_) => BenchChannel::symmetric(
                    serde_json::from_str::<ChannelConfig>(&text)
                        .map_err(|e| CliError::Usage(format!("invalid channel {}: {e}", p.display())))?,
                ),
            }
        }
    };
    channel.up.validate()?;
    channel.downlink().validate()?;
    let mut cfg = BenchConfig::new(a.gaussians, a.frames, seed);
    cfg.rate_hz = a.rate;
    cfg.preset = a.preset;
    cfg.interpolate = a.interpolate.on();
    cfg.channel = channel;
    cfg.controllers = a.controllers;
    cfg.allow_nonstandard = a.allow_nonstandard;
    cfg.composite = camera_arg(&a.composite)?;
    cfg.mode = mode;
    if let Some(r) = &a.rig {
        cfg.rig = read_json::<RigSpec>(r, "rig")?;
    }
    let tmp;
    let repo = match &a.repo {
        Some(r) => r.as_path(),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path()
        }
    };
    let report = bench::run_bench(&cfg, repo)?;
    if let Some(p) = &a.latency_csv {
        report.receiver.write_latency_csv(BufWriter::new(File::create(p)?))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub repo: String,
    pub id: String,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateReport {
    pub out: String,
    #[serde(flatten)]
    pub fit: CalibrationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantReport {
    pub out: String,
    pub frames: usize,
    pub gaussians: usize,
    pub scale: f64,
    pub seed: u64,
}

fn avatar(cli: &Cli, c: &AvatarCommand) -> CliResult<()> {
    match c {
        AvatarCommand::Build(a) => {
            let rig: RigSpec = read_json(&a.spec, "rig")?;
            let mut spec = BuildSpec::new(rig, a.gaussians, cli.seed);
            spec.controllers = a.controllers;
            spec.bases = a.bases;
            spec.allow_nonstandard = a.allow_nonstandard;
            if spec.controllers != splatlink_core::gsdeform::CONTROLLER_COUNT && !spec.allow_nonstandard {
                return Err(CliError::Usage(format!(
                    "--controllers {} differs from the standard {}; pass --allow-nonstandard",
                    spec.controllers,
                    splatlink_core::gsdeform::CONTROLLER_COUNT
                )));
            }
            let pkg = package::build_avatar(&spec)?;
            package::publish_avatar(&a.out.repo, &a.out.id, &pkg)?;
            emit(
                cli,
                &BuildReport {
                    repo: a.out.repo.display().to_string(),
                    id: a.out.id.clone(),
                    manifest: pkg.manifest().clone(),
                },
                false,
            )
        }
        AvatarCommand::Inspect { avatar } => {
            let pkg = fetch(avatar)?;
            emit(cli, pkg.manifest(), false)
        }
        AvatarCommand::Calibrate(a) => {
            let pkg = fetch(&a.avatar)?;
            let motion = read_trace(&a.motion)?;
            let f = File::open(&a.target).map_err(|e| CliError::Data(format!("cannot open target {}: {e}", a.target.display())))?;
            let (_, targets) = calibrate::read_targets(std::io::BufReader::new(f))?;
            if !(a.lambda >= 0.0) || !a.lambda.is_finite() {
                return Err(CliError::Usage(format!("--lambda must be finite and >= 0, got {}", a.lambda)));
            }
            let (updated, fit) = calibrate::calibrate(&pkg, &motion, &targets, a.lambda)?;
            let out = a.out.clone().unwrap_or_else(|| a.avatar.clone());
            package::publish_avatar(&out.repo, &out.id, &updated)?;
            emit(
                cli,
                &CalibrateReport {
                    out: format!("{}:{}", out.repo.display(), out.id),
                    fit,
                },
                false,
            )
        }
        AvatarCommand::Plant(a) => {
            let pkg = fetch(&a.avatar)?;
            let motion = read_trace(&a.motion)?;
            if !(a.scale > 0.0) || !a.scale.is_finite() {
                return Err(CliError::Usage(format!("--scale must be positive, got {}", a.scale)));
            }
            let (_, targets) = calibrate::plant_targets(&pkg, &motion, cli.seed, a.scale)?;
            calibrate::write_targets(&targets, pkg.gaussians().len(), BufWriter::new(File::create(&a.out)?))?;
            emit(
                cli,
                &PlantReport {
                    out: a.out.display().to_string(),
                    frames: targets.len(),
                    gaussians: pkg.gaussians().len(),
                    scale: a.scale,
                    seed: cli.seed,
                },
                false,
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionReport {
    pub out: String,
    pub preset: motion::Preset,
    pub frames: usize,
    pub rate_hz: f64,
    pub seed: u64,
}

fn write_motion(a: &MotionArgs, seed: u64) -> CliResult<MotionReport> {
    let frames = motion::generate(a.preset, a.frames, a.rate, seed)?;
    let out = BufWriter::new(File::create(&a.out)?);
    if a.out.extension().is_some_and(|e| e == "bin") {
        motion::write_bin(&frames, out)?;
    } else {
        motion::write_csv(&frames, out)?;
    }
    Ok(MotionReport {
        out: a.out.display().to_string(),
        preset: a.preset,
        frames: frames.len(),
        rate_hz: a.rate,
        seed,
    })
}
