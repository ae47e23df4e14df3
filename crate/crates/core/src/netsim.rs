//! Session protocol and a deterministic shaped channel.
//!
//! A channel is a single FIFO serialization queue in front of a link whose
//! rate is constant or follows a looping step trace. Each packet leaves the
//! link after `bytes * 8` bits of capacity, then arrives after the base
//! delay plus a seeded jitter draw. Random loss is drawn after
//! serialization, so lost packets still consumed the link.
//!
//! Virtual time is in integer nanoseconds.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::io::Write;
use std::path::PathBuf;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecError, FramePacket, MsgType};
use crate::package::{fetch_avatar, sha256_hex, AvatarPackage, PackageError};
use crate::params::MotionParams;
use crate::stats::{summarize, Summary};

pub const NS_PER_S: u64 = 1_000_000_000;
pub const NS_PER_MS: f64 = 1e6;
pub const TRACE_STEP_S: f64 = 0.1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid channel config: {0}")]
    Config(String),
    #[error("bandwidth trace line {line}: {msg}")]
    Trace { line: u64, msg: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("illegal session transition {from:?} -> {to:?}")]
    Transition { from: Phase, to: Phase },
    #[error("handshake timed out after {0} attempts")]
    HandshakeTimeout(u32),
    #[error("manifest hash mismatch: offered {offered}, package has {actual}")]
    HashMismatch { offered: String, actual: String },
    #[error("receiver rejected the stream: {0}")]
    Sink(String),
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t_s: f64,
    pub bps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Bandwidth {
    Unlimited,
    Constant { bps: f64 },
    /// Step trace: each rate holds until the next sample; the trace loops.
    Trace { samples: Vec<TraceSample> },
}

/// Reads a `t_seconds,bits_per_second` CSV. A header row is optional.
pub fn read_bandwidth_csv<R: std::io::Read>(input: R) -> Result<Vec<TraceSample>, NetError> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let line = n as u64 + 1;
        let rec = rec.map_err(|e| NetError::Trace { line, msg: e.to_string() })?;
        if rec.len() != 2 {
            return Err(NetError::Trace { line, msg: format!("{} fields, expected 2", rec.len()) });
        }
        let t = rec[0].parse::<f64>();
        let b = rec[1].parse::<f64>();
        match (t, b) {
            (Ok(t_s), Ok(bps)) => out.push(TraceSample { t_s, bps }),
            _ if line == 1 => continue,
            (Err(e), _) | (_, Err(e)) => return Err(NetError::Trace { line, msg: e.to_string() }),
        }
    }
    Ok(out)
}

/// Link rate as a function of virtual time.
#[derive(Debug, Clone, PartialEq)]
pub enum Link {
    Unlimited,
    Constant(f64),
    Trace {
        starts_ns: Vec<u64>,
        bps: Vec<f64>,
        period_ns: u64,
        period_bits: f64,
    },
}

impl Link {
    pub fn new(b: &Bandwidth) -> Result<Self, NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        match b {
            Bandwidth::Unlimited => Ok(Link::Unlimited),
            Bandwidth::Constant { bps } => {
                if !(*bps > 0.0) || !bps.is_finite() {
                    return bad(format!("bandwidth must be positive, got {bps}"));
                }
                Ok(Link::Constant(*bps))
            }
            Bandwidth::Trace { samples } => {
                if samples.is_empty() {
                    return bad("empty bandwidth trace".into());
                }
                if samples[0].t_s != 0.0 {
                    return bad("bandwidth trace must start at t = 0".into());
                }
                if samples.iter().any(|s| !(s.bps > 0.0) || !s.bps.is_finite()) {
                    return bad("bandwidth must be positive at every trace point".into());
                }
                let starts_ns: Vec<u64> = samples.iter().map(|s| (s.t_s * 1e9).round() as u64).collect();
                if starts_ns.windows(2).any(|w| w[1] <= w[0]) || samples.iter().any(|s| !s.t_s.is_finite()) {
                    return bad("trace times must be finite and strictly increasing".into());
                }
                let last_step = match starts_ns.len() {
                    1 => (TRACE_STEP_S * 1e9) as u64,
                    n => starts_ns[n - 1] - starts_ns[n - 2],
                };
                let period_ns = starts_ns[starts_ns.len() - 1] + last_step;
                let bps: Vec<f64> = samples.iter().map(|s| s.bps).collect();
                let mut period_bits = 0.0;
                for i in 0..bps.len() {
                    let end = starts_ns.get(i + 1).copied().unwrap_or(period_ns);
                    period_bits += bps[i] * (end - starts_ns[i]) as f64 / 1e9;
                }
                Ok(Link::Trace {
                    starts_ns,
                    bps,
                    period_ns,
                    period_bits,
                })
            }
        }
    }

    /// Rate in effect at `t` and the end of that constant stretch.
    fn segment(&self, t: u64) -> (f64, u64) {
        match self {
            Link::Unlimited => (f64::INFINITY, u64::MAX),
            Link::Constant(b) => (*b, u64::MAX),
            Link::Trace {
                starts_ns,
                bps,
                period_ns,
                ..
            } => {
                let base = t - t % period_ns;
                let off = t % period_ns;
                let i = starts_ns.partition_point(|&s| s <= off) - 1;
                let end = starts_ns.get(i + 1).copied().unwrap_or(*period_ns);
                (bps[i], base + end)
            }
        }
    }

    pub fn rate_at(&self, t: u64) -> f64 {
        self.segment(t).0
    }

    /// Time at which `bits` finish serializing when started at `start`,
    /// rounded up to the next nanosecond.
    pub fn transmit_end(&self, start: u64, bits: f64) -> u64 {
        let mut t = start;
        let mut left = bits;
        loop {
            let (rate, seg_end) = self.segment(t);
            if rate.is_infinite() {
                return t;
            }
            let cap = rate * (seg_end - t) as f64 / 1e9;
            if left <= cap {
                return t + (left * 1e9 / rate).ceil() as u64;
            }
            left -= cap;
            t = seg_end;
        }
    }

    /// Link capacity in bits over `[a, b]`.
    pub fn capacity_bits(&self, a: u64, b: u64) -> f64 {
        if b <= a {
            return 0.0;
        }
        match self {
            Link::Unlimited => f64::INFINITY,
            Link::Constant(r) => r * (b - a) as f64 / 1e9,
            Link::Trace {
                period_ns,
                period_bits,
                ..
            } => {
                let mut t = a;
                let mut bits = 0.0;
                let whole = (b - a) / period_ns;
                if whole > 0 {
                    bits += whole as f64 * period_bits;
                    t += whole * period_ns;
                }
                while t < b {
                    let (rate, seg_end) = self.segment(t);
                    let e = seg_end.min(b);
                    bits += rate * (e - t) as f64 / 1e9;
                    t = e;
                }
                bits
            }
        }
    }

    /// Trace rate changes inside `[a, b]`.
    fn breakpoints(&self, a: u64, b: u64) -> Vec<u64> {
        let Link::Trace { starts_ns, period_ns, .. } = self else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut base = a - a % period_ns;
        while base <= b {
            for s in starts_ns {
                let t = base + s;
                if t >= a && t <= b {
                    out.push(t);
                }
            }
            base += period_ns;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub bandwidth: Bandwidth,
    #[serde(default)]
    pub base_delay_ms: f64,
    /// Jitter is drawn uniformly from `[0, jitter_ms]`.
    #[serde(default)]
    pub jitter_ms: f64,
    #[serde(default)]
    pub loss_rate: f64,
    #[serde(default)]
    pub reorder: bool,
    #[serde(default)]
    pub seed: u64,
    /// Bytes allowed in the serialization queue, including the packet on
    /// the wire; `None` is unbounded.
    #[serde(default)]
    pub queue_cap_bytes: Option<usize>,
}

impl ChannelConfig {
    pub fn ideal() -> Self {
        Self {
            bandwidth: Bandwidth::Unlimited,
            base_delay_ms: 0.0,
            jitter_ms: 0.0,
            loss_rate: 0.0,
            reorder: false,
            seed: 0,
            queue_cap_bytes: None,
        }
    }

    pub fn constant(bps: f64, base_delay_ms: f64) -> Self {
        Self {
            bandwidth: Bandwidth::Constant { bps },
            base_delay_ms,
            ..Self::ideal()
        }
    }

    pub fn validate(&self) -> Result<Link, NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        if !(self.base_delay_ms >= 0.0) || !self.base_delay_ms.is_finite() {
            return bad(format!("base_delay_ms must be >= 0, got {}", self.base_delay_ms));
        }
        if !(self.jitter_ms >= 0.0) || !self.jitter_ms.is_finite() {
            return bad(format!("jitter_ms must be >= 0, got {}", self.jitter_ms));
        }
        if !(0.0..1.0).contains(&self.loss_rate) {
            return bad(format!("loss_rate must be in [0, 1), got {}", self.loss_rate));
        }
        if self.queue_cap_bytes == Some(0) {
            return bad("queue_cap_bytes must be positive".into());
        }
        Link::new(&self.bandwidth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Loss,
    QueueOverflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transmission {
    pub bytes: usize,
    pub send_ns: u64,
    pub tx_start_ns: u64,
    pub tx_end_ns: u64,
    pub deliver_ns: Option<u64>,
    pub drop: Option<DropReason>,
}

/// One direction of the shaped link.
#[derive(Debug, Clone)]
pub struct Channel {
    cfg: ChannelConfig,
    link: Link,
    rng: ChaCha8Rng,
    link_free_ns: u64,
    queued: VecDeque<(u64, usize)>,
    queued_bytes: usize,
    last_send_ns: u64,
    last_deliver_ns: u64,
}

impl Channel {
    pub fn new(cfg: &ChannelConfig) -> Result<Self, NetError> {
        let link = cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            link,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            link_free_ns: 0,
            queued: VecDeque::new(),
            queued_bytes: 0,
            last_send_ns: 0,
            last_deliver_ns: 0,
        })
    }

    pub fn link(&self) -> &Link {
        &self.link
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    /// Schedules a packet offered at `t_now`. Sends must be in time order.
    pub fn send(&mut self, bytes: usize, t_now: u64) -> Result<Transmission, NetError> {
        if t_now < self.last_send_ns {
            return Err(NetError::InvalidArgument(format!(
                "send at {t_now} ns precedes previous send at {} ns",
                self.last_send_ns
            )));
        }
        self.last_send_ns = t_now;
        while let Some(&(end, b)) = self.queued.front() {
            if end > t_now {
                break;
            }
            self.queued.pop_front();
            self.queued_bytes -= b;
        }
        let lost = self.rng.gen::<f64>() < self.cfg.loss_rate;
        let jitter_ns = if self.cfg.jitter_ms > 0.0 {
            (self.rng.gen::<f64>() * self.cfg.jitter_ms * NS_PER_MS).round() as u64
        } else {
            0
        };
        if let Some(cap) = self.cfg.queue_cap_bytes {
            if self.queued_bytes + bytes > cap {
                return Ok(Transmission {
                    bytes,
                    send_ns: t_now,
                    tx_start_ns: t_now,
                    tx_end_ns: t_now,
                    deliver_ns: None,
                    drop: Some(DropReason::QueueOverflow),
                });
            }
        }
        let start = t_now.max(self.link_free_ns);
        let end = self.link.transmit_end(start, bytes as f64 * 8.0);
        self.link_free_ns = end;
        self.queued.push_back((end, bytes));
        self.queued_bytes += bytes;
        if lost {
            return Ok(Transmission {
                bytes,
                send_ns: t_now,
                tx_start_ns: start,
                tx_end_ns: end,
                deliver_ns: None,
                drop: Some(DropReason::Loss),
            });
        }
        let mut deliver = end + (self.cfg.base_delay_ms * NS_PER_MS).round() as u64 + jitter_ns;
        if !self.cfg.reorder {
            deliver = deliver.max(self.last_deliver_ns);
        }
        self.last_deliver_ns = self.last_deliver_ns.max(deliver);
        Ok(Transmission {
            bytes,
            send_ns: t_now,
            tx_start_ns: start,
            tx_end_ns: end,
            deliver_ns: Some(deliver),
            drop: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conformance {
    /// Largest delivered/capacity ratio over the checked windows.
    pub worst_ratio: f64,
    /// Windows where delivered bits exceed capacity by more than the
    /// tolerance.
    pub violations: usize,
    pub windows_checked: usize,
}

/// Checks the link against its shaping rate with fluid accounting: a
/// packet's bits count as they leave the link. Windows of `window_ns` are
/// tested at every point where the transmitted-bits or capacity curves
/// bend, which is where the excess peaks.
pub fn fluid_conformance(link: &Link, tx: &[Transmission], window_ns: u64, tol: f64) -> Conformance {
    let mut sent: Vec<&Transmission> = tx.iter().filter(|t| t.drop != Some(DropReason::QueueOverflow)).collect();
    sent.sort_by_key(|t| t.tx_start_ns);
    if sent.is_empty() || matches!(link, Link::Unlimited) {
        return Conformance { worst_ratio: 0.0, violations: 0, windows_checked: 0 };
    }
    // cumulative bits at packet boundaries
    let mut done = Vec::with_capacity(sent.len() + 1);
    done.push(0.0);
    for t in &sent {
        done.push(done.last().unwrap() + t.bytes as f64 * 8.0);
    }
    let bits_by = |time: u64| -> f64 {
        let i = sent.partition_point(|t| t.tx_end_ns <= time);
        let mut b = done[i];
        if let Some(t) = sent.get(i) {
            if time > t.tx_start_ns {
                let frac = link.capacity_bits(t.tx_start_ns, time) / link.capacity_bits(t.tx_start_ns, t.tx_end_ns);
                b += frac.min(1.0) * t.bytes as f64 * 8.0;
            }
        }
        b
    };
    let lo = sent[0].tx_start_ns;
    let hi = sent.iter().map(|t| t.tx_end_ns).max().unwrap();
    let mut points: Vec<u64> = sent.iter().flat_map(|t| [t.tx_start_ns, t.tx_end_ns]).collect();
    points.extend(link.breakpoints(lo, hi));
    let mut starts: Vec<u64> = points
        .iter()
        .flat_map(|&p| [Some(p), p.checked_sub(window_ns)])
        .flatten()
        .filter(|&a| a + window_ns >= lo && a <= hi)
        .collect();
    starts.sort_unstable();
    starts.dedup();
    let mut out = Conformance { worst_ratio: 0.0, violations: 0, windows_checked: starts.len() };
    for a in starts {
        let bits = bits_by(a + window_ns) - bits_by(a);
        let cap = link.capacity_bits(a, a + window_ns);
        out.worst_ratio = out.worst_ratio.max(bits / cap);
        if bits > cap * (1.0 + tol) {
            out.violations += 1;
        }
    }
    out
}

/// Packet-granular variant: whole packets count at their link exit time.
pub fn packet_conformance(link: &Link, tx: &[Transmission], window_ns: u64, tol: f64) -> Conformance {
    let mut ends: Vec<(u64, usize)> = tx
        .iter()
        .filter(|t| t.drop != Some(DropReason::QueueOverflow))
        .map(|t| (t.tx_end_ns, t.bytes))
        .collect();
    ends.sort_unstable();
    let mut out = Conformance { worst_ratio: 0.0, violations: 0, windows_checked: 0 };
    if matches!(link, Link::Unlimited) {
        return out;
    }
    let mut lo = 0;
    let mut bytes = 0usize;
    for i in 0..ends.len() {
        bytes += ends[i].1;
        let a = ends[i].0.saturating_sub(window_ns);
        while ends[lo].0 <= a {
            bytes -= ends[lo].1;
            lo += 1;
        }
        let cap = link.capacity_bits(a, ends[i].0);
        let bits = bytes as f64 * 8.0;
        out.windows_checked += 1;
        out.worst_ratio = out.worst_ratio.max(bits / cap);
        if bits > cap * (1.0 + tol) {
            out.violations += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    Signaling,
    Amortizing,
    Streaming,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Virtual,
    RealTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub phase: Phase,
    pub peer_id: String,
    pub avatar_manifest_hash: Option<String>,
    pub manifest_verified: bool,
    pub last_frame_index: Option<u32>,
    pub clock: ClockMode,
}

impl SessionState {
    pub fn new(peer_id: &str, clock: ClockMode) -> Self {
        Self {
            phase: Phase::Idle,
            peer_id: peer_id.to_string(),
            avatar_manifest_hash: None,
            manifest_verified: false,
            last_frame_index: None,
            clock,
        }
    }

    pub fn advance(&mut self, to: Phase) -> Result<(), NetError> {
        let ok = matches!(
            (self.phase, to),
            (Phase::Idle, Phase::Signaling)
                | (Phase::Signaling, Phase::Amortizing)
                | (Phase::Amortizing, Phase::Streaming)
                | (Phase::Streaming, Phase::Closed)
        ) && (to != Phase::Streaming || self.manifest_verified);
        if !ok {
            return Err(NetError::Transition { from: self.phase, to });
        }
        self.phase = to;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Offer {
    version: u8,
    peer_id: String,
    avatar_id: String,
    manifest_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Answer {
    accept: bool,
    manifest_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub peer_id: String,
    pub repo: PathBuf,
    pub avatar_id: String,
    /// Manifest hash the sender announces in the handshake.
    pub manifest_hash: String,
    pub up: ChannelConfig,
    pub down: ChannelConfig,
    pub mode: ClockMode,
    #[serde(default = "default_timeout")]
    pub handshake_timeout_ms: f64,
    #[serde(default = "default_attempts")]
    pub handshake_attempts: u32,
    /// Hash-verification throughput used for the virtual clock.
    #[serde(default = "default_verify_rate")]
    pub verify_bytes_per_s: f64,
}

fn default_timeout() -> f64 {
    500.0
}

fn default_attempts() -> u32 {
    3
}

fn default_verify_rate() -> f64 {
    500e6
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub packet: FramePacket,
    pub send_ns: u64,
    pub deliver_ns: u64,
}

/// Receiving end of a session.
pub trait ReceiverSink {
    fn on_package(&mut self, pkg: AvatarPackage) -> Result<(), String>;
    fn on_packet(&mut self, d: &Delivery) -> Result<(), String>;
    /// Called once after the last delivery.
    fn on_close(&mut self) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandshakeStats {
    pub attempts: u32,
    pub messages_sent: u32,
    pub completed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmortizationStats {
    pub package_bytes: usize,
    pub content_hash: String,
    pub transfer_ms: f64,
    pub verify_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: u32,
    #[serde(flatten)]
    pub tx: Transmission,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub mode: ClockMode,
    pub up: ChannelConfig,
    pub down: ChannelConfig,
    pub rate_hz: f64,
    pub handshake: HandshakeStats,
    pub amortization: AmortizationStats,
    pub stream_start_ms: f64,
    pub frames_sent: usize,
    pub frames_delivered: usize,
    pub dropped_loss: usize,
    pub dropped_queue: usize,
    pub bytes_sent: usize,
    pub bitrate_mbps: f64,
    pub delivered_fps: f64,
    pub latency_ms: Summary,
    pub frames: Vec<FrameRecord>,
}

impl SessionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Per-frame CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), std::io::Error> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| std::io::Error::other(e);
        w.write_record(["frame_index", "bytes", "send_ns", "tx_start_ns", "tx_end_ns", "deliver_ns", "latency_ms", "drop"])
            .map_err(io)?;
        for f in &self.frames {
            let t = &f.tx;
            let lat = t.deliver_ns.map(|d| format!("{:?}", (d - t.send_ns) as f64 / NS_PER_MS)).unwrap_or_default();
            let drop = match t.drop {
                Some(DropReason::Loss) => "loss",
                Some(DropReason::QueueOverflow) => "queue_overflow",
                None => "",
            };
            w.write_record([
                f.frame_index.to_string(),
                t.bytes.to_string(),
                t.send_ns.to_string(),
                t.tx_start_ns.to_string(),
                t.tx_end_ns.to_string(),
                t.deliver_ns.map(|d| d.to_string()).unwrap_or_default(),
                lat,
                drop.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()
    }

    pub fn transmissions(&self) -> Vec<Transmission> {
        self.frames.iter().map(|f| f.tx).collect()
    }
}

/// Handshake over the two channels starting at `t0`. Returns the time the
/// receiver holds the confirmation, with attempt counts.
fn handshake(
    up: &mut Channel,
    down: &mut Channel,
    offer: &Offer,
    t0: u64,
    timeout_ns: u64,
    attempts: u32,
) -> Result<(u64, HandshakeStats), NetError> {
    let offer_pkt = FramePacket::new(MsgType::AvatarManifest, 0, 0, serde_json::to_vec(offer).expect("offer"))?;
    let answer = Answer {
        accept: true,
        manifest_hash: offer.manifest_hash.clone(),
    };
    let answer_pkt = FramePacket::new(MsgType::Signal, 0, 0, serde_json::to_vec(&answer).expect("answer"))?;
    let ack_pkt = FramePacket::new(MsgType::Ack, 0, 0, Vec::new())?;
    let mut sent = 0;
    for attempt in 1..=attempts {
        let start = t0 + (attempt as u64 - 1) * timeout_ns;
        let deadline = start + timeout_ns;
        sent += 1;
        let o = up.send(offer_pkt.wire_len(), start)?;
        let Some(d1) = o.deliver_ns else { continue };
        if d1 > deadline {
            continue;
        }
        sent += 1;
        let a = down.send(answer_pkt.wire_len(), d1)?;
        let Some(d2) = a.deliver_ns else { continue };
        if d2 > deadline {
            continue;
        }
        sent += 1;
        let c = up.send(ack_pkt.wire_len(), d2)?;
        let Some(d3) = c.deliver_ns else { continue };
        if d3 > deadline {
            continue;
        }
        return Ok((
            d3,
            HandshakeStats {
                attempts: attempt,
                messages_sent: sent,
                completed_ms: (d3 - t0) as f64 / NS_PER_MS,
            },
        ));
    }
    Err(NetError::HandshakeTimeout(attempts))
}

/// Runs signaling, amortization and streaming of `source` at `rate_hz`.
pub fn run_session<S: ReceiverSink>(
    cfg: &SessionConfig,
    source: &[MotionParams],
    rate_hz: f64,
    sink: &mut S,
) -> Result<SessionReport, NetError> {
    if !(rate_hz > 0.0) || !rate_hz.is_finite() {
        return Err(NetError::InvalidArgument(format!("rate must be positive, got {rate_hz}")));
    }
    if !(cfg.handshake_timeout_ms > 0.0) || cfg.handshake_attempts == 0 || !(cfg.verify_bytes_per_s > 0.0) {
        return Err(NetError::InvalidArgument("handshake timeout, attempts and verify rate must be positive".into()));
    }
    let mut up = Channel::new(&cfg.up)?;
    let mut down = Channel::new(&cfg.down)?;
    let mut state = SessionState::new(&cfg.peer_id, cfg.mode);
    let wall0 = Instant::now();

    state.advance(Phase::Signaling)?;
    let offer = Offer {
        version: codec::VERSION,
        peer_id: cfg.peer_id.clone(),
        avatar_id: cfg.avatar_id.clone(),
        manifest_hash: cfg.manifest_hash.clone(),
    };
    let timeout_ns = (cfg.handshake_timeout_ms * NS_PER_MS).round() as u64;
    let (t_hs, hs) = handshake(&mut up, &mut down, &offer, 0, timeout_ns, cfg.handshake_attempts)?;
    state.avatar_manifest_hash = Some(offer.manifest_hash.clone());

    state.advance(Phase::Amortizing)?;
    let verify_started = Instant::now();
    let pkg = fetch_avatar(&cfg.repo, &cfg.avatar_id)?;
    let actual = sha256_hex(pkg.blocks());
    let wall_verify = verify_started.elapsed();
    if actual != cfg.manifest_hash {
        return Err(NetError::HashMismatch {
            offered: cfg.manifest_hash.clone(),
            actual,
        });
    }
    state.manifest_verified = true;
    let bytes = pkg.byte_len();
    let fetch_end = down.link().transmit_end(t_hs, bytes as f64 * 8.0) + (cfg.down.base_delay_ms * NS_PER_MS).round() as u64;
    let verify_ns = match cfg.mode {
        ClockMode::Virtual => (bytes as f64 / cfg.verify_bytes_per_s * 1e9).round() as u64,
        ClockMode::RealTime => wall_verify.as_nanos() as u64,
    };
    let amort = AmortizationStats {
        package_bytes: bytes,
        content_hash: actual,
        transfer_ms: (fetch_end - t_hs) as f64 / NS_PER_MS,
        verify_ms: verify_ns as f64 / NS_PER_MS,
    };
    sink.on_package(pkg).map_err(NetError::Sink)?;
    let t_stream = fetch_end + verify_ns;

    state.advance(Phase::Streaming)?;
    let packets: Vec<FramePacket> = source.iter().map(codec::encode_frame).collect::<Result<_, _>>()?;
    let send_at = |i: usize| t_stream + (i as f64 * 1e9 / rate_hz).round() as u64;
    let frames = match cfg.mode {
        ClockMode::Virtual => stream_virtual(&mut up, &packets, send_at, sink)?,
        ClockMode::RealTime => stream_real(up, &packets, send_at, wall0, sink)?,
    };
    if let Some(p) = packets.last() {
        state.last_frame_index = Some(p.frame_index);
    }
    sink.on_close().map_err(NetError::Sink)?;
    state.advance(Phase::Closed)?;

    let delivered: Vec<&FrameRecord> = frames.iter().filter(|f| f.tx.deliver_ns.is_some()).collect();
    let latencies: Vec<f64> = delivered
        .iter()
        .map(|f| (f.tx.deliver_ns.unwrap() - f.tx.send_ns) as f64 / NS_PER_MS)
        .collect();
    let bytes_sent: usize = frames.iter().map(|f| f.tx.bytes).sum();
    let duration_s = frames.len() as f64 / rate_hz;
    let delivered_fps = match (delivered.iter().map(|f| f.tx.deliver_ns.unwrap()).min(), delivered.iter().map(|f| f.tx.deliver_ns.unwrap()).max()) {
        (Some(a), Some(b)) if b > a => (delivered.len() - 1) as f64 / ((b - a) as f64 / 1e9),
        _ => 0.0,
    };
    Ok(SessionReport {
        mode: cfg.mode,
        up: cfg.up.clone(),
        down: cfg.down.clone(),
        rate_hz,
        handshake: hs,
        amortization: amort,
        stream_start_ms: t_stream as f64 / NS_PER_MS,
        frames_sent: frames.len(),
        frames_delivered: delivered.len(),
        dropped_loss: frames.iter().filter(|f| f.tx.drop == Some(DropReason::Loss)).count(),
        dropped_queue: frames.iter().filter(|f| f.tx.drop == Some(DropReason::QueueOverflow)).count(),
        bytes_sent,
        bitrate_mbps: if duration_s > 0.0 { bytes_sent as f64 * 8.0 / duration_s / 1e6 } else { 0.0 },
        delivered_fps,
        latency_ms: summarize(&latencies),
        frames,
    })
}

fn stream_virtual<S: ReceiverSink>(
    up: &mut Channel,
    packets: &[FramePacket],
    send_at: impl Fn(usize) -> u64,
    sink: &mut S,
) -> Result<Vec<FrameRecord>, NetError> {
    let mut records = Vec::with_capacity(packets.len());
    for (i, p) in packets.iter().enumerate() {
        let tx = up.send(p.wire_len(), send_at(i))?;
        records.push(FrameRecord { frame_index: p.frame_index, tx });
    }
    let mut order: Vec<usize> = (0..packets.len()).filter(|&i| records[i].tx.deliver_ns.is_some()).collect();
    order.sort_by_key(|&i| (records[i].tx.deliver_ns.unwrap(), i));
    for i in order {
        let tx = records[i].tx;
        sink.on_packet(&Delivery {
            packet: packets[i].clone(),
            send_ns: tx.send_ns,
            deliver_ns: tx.deliver_ns.unwrap(),
        })
        .map_err(NetError::Sink)?;
    }
    Ok(records)
}

fn sleep_until(wall0: Instant, t_ns: u64) {
    let target = wall0 + Duration::from_nanos(t_ns);
    let now = Instant::now();
    if target > now {
        std::thread::sleep(target - now);
    }
}

/// Sender thread paces packets on the wall clock and schedules them on the
/// channel; this thread releases each delivery when its time arrives.
fn stream_real<S: ReceiverSink>(
    mut up: Channel,
    packets: &[FramePacket],
    send_at: impl Fn(usize) -> u64 + Send,
    wall0: Instant,
    sink: &mut S,
) -> Result<Vec<FrameRecord>, NetError> {
    let (tx_send, rx) = mpsc::channel::<Result<(usize, Transmission), NetError>>();
    let sizes: Vec<usize> = packets.iter().map(|p| p.wire_len()).collect();
    let mut records: Vec<Option<FrameRecord>> = vec![None; packets.len()];
    std::thread::scope(|scope| -> Result<(), NetError> {
        scope.spawn(move || {
            for (i, bytes) in sizes.into_iter().enumerate() {
                sleep_until(wall0, send_at(i));
                let now = wall0.elapsed().as_nanos() as u64;
                let r = up.send(bytes, now).map(|t| (i, t));
                let stop = r.is_err();
                if tx_send.send(r).is_err() || stop {
                    break;
                }
            }
        });
        let mut pending: BinaryHeap<Reverse<(u64, usize)>> = BinaryHeap::new();
        let mut open = true;
        while open || !pending.is_empty() {
            let msg = match pending.peek() {
                Some(Reverse((due, _))) => {
                    let target = wall0 + Duration::from_nanos(*due);
                    let now = Instant::now();
                    if target <= now {
                        None
                    } else if open {
                        match rx.recv_timeout(target - now) {
                            Ok(m) => Some(m),
                            Err(mpsc::RecvTimeoutError::Timeout) => None,
                            Err(mpsc::RecvTimeoutError::Disconnected) => {
                                open = false;
                                continue;
                            }
                        }
                    } else {
                        sleep_until(wall0, *due);
                        None
                    }
                }
                None => match rx.recv() {
                    Ok(m) => Some(m),
                    Err(_) => {
                        open = false;
                        continue;
                    }
                },
            };
            match msg {
                Some(m) => {
                    let (i, t) = m?;
                    records[i] = Some(FrameRecord { frame_index: packets[i].frame_index, tx: t });
                    if let Some(d) = t.deliver_ns {
                        pending.push(Reverse((d, i)));
                    }
                }
                None => {
                    let Reverse((_, i)) = pending.pop().expect("peeked");
                    let actual = wall0.elapsed().as_nanos() as u64;
                    let rec = records[i].as_mut().expect("scheduled before delivery");
                    rec.tx.deliver_ns = Some(actual);
                    sink.on_packet(&Delivery {
                        packet: packets[i].clone(),
                        send_ns: rec.tx.send_ns,
                        deliver_ns: actual,
                    })
                    .map_err(NetError::Sink)?;
                }
            }
        }
        Ok(())
    })?;
    records
        .into_iter()
        .map(|r| r.ok_or_else(|| NetError::InvalidArgument("sender stopped early".into())))
        .collect()
}
