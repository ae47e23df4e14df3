//! Procedural motion presets and parameter trace files.

use std::f64::consts::{PI, TAU};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{self, Half16, MotionParams, ParamError, FACE_OFFSET, HAND_OFFSET, PARAM_LEN, ROOT_TRANSLATION_OFFSET};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("binary trace: {0}")]
    Binary(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    IdleSway,
    Wave,
    Walk,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::IdleSway, Preset::Wave, Preset::Walk];

    pub fn name(self) -> &'static str {
        match self {
            Preset::IdleSway => "idle-sway",
            Preset::Wave => "wave",
            Preset::Walk => "walk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

// Body joint slots in the 24-joint chain.
const PELVIS: usize = 0;
const SPINE: [usize; 3] = [3, 6, 9];
const NECK: usize = 12;
const HEAD: usize = 15;
const L_HIP: usize = 1;
const R_HIP: usize = 2;
const L_KNEE: usize = 4;
const R_KNEE: usize = 5;
const L_SHOULDER: usize = 16;
const R_SHOULDER: usize = 17;
const L_ELBOW: usize = 18;
const R_ELBOW: usize = 19;
const R_WRIST: usize = 21;

/// Smooth seeded motion sampled at `rate` Hz.
pub fn generate(preset: Preset, frames: usize, rate: f64, seed: u64) -> Result<Vec<MotionParams>, ParamError> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(ParamError::InvalidArgument(format!("rate must be positive, got {rate}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: [f64; 8] = std::array::from_fn(|_| rng.gen_range(0.0..TAU));
    let amp = rng.gen_range(0.85..1.15);
    let tempo = rng.gen_range(0.9..1.1);
    (0..frames)
        .map(|i| {
            let t = i as f64 / rate;
            let ts = (i as f64 * 1e6 / rate).floor() as u64;
            let mut v = [0.0; PARAM_LEN];
            let mut joint = |j: usize, axis: usize, x: f64| v[3 * j + axis] = x;
            let w = TAU * tempo;
            match preset {
                Preset::IdleSway => {
                    let s = (0.25 * w * t + phase[0]).sin();
                    joint(PELVIS, 2, 0.03 * amp * s);
                    for (k, j) in SPINE.iter().enumerate() {
                        joint(*j, 2, -0.02 * amp * s);
                        joint(*j, 1, 0.015 * amp * (0.17 * w * t + phase[1] + k as f64).sin());
                    }
                    joint(HEAD, 0, 0.05 * amp * (0.11 * w * t + phase[2]).sin());
                    joint(L_SHOULDER, 2, -1.2);
                    joint(R_SHOULDER, 2, 1.2);
                    v[ROOT_TRANSLATION_OFFSET] = 0.02 * amp * s;
                }
                Preset::Wave => {
                    let s = (1.1 * w * t + phase[0]).sin();
                    joint(R_SHOULDER, 2, 0.4 + 0.1 * (0.2 * w * t + phase[1]).sin());
                    joint(R_ELBOW, 1, 1.2 + 0.45 * amp * s);
                    joint(R_WRIST, 2, 0.25 * amp * (1.1 * w * t + phase[0] + PI / 3.0).sin());
                    joint(L_SHOULDER, 2, -1.2);
                    joint(NECK, 1, 0.08 * (0.3 * w * t + phase[3]).sin());
                    v[FACE_OFFSET] = 0.4 + 0.2 * (0.5 * w * t + phase[4]).sin();
                    v[FACE_OFFSET + 1] = 0.3 * (0.5 * w * t + phase[4]).sin().max(0.0);
                }
                Preset::Walk => {
                    let g = 0.9 * w * t + phase[0];
                    let (s, c) = g.sin_cos();
                    joint(L_HIP, 0, 0.45 * amp * s);
                    joint(R_HIP, 0, -0.45 * amp * s);
                    joint(L_KNEE, 0, 0.5 * amp * (0.5 + 0.5 * c).powi(2));
                    joint(R_KNEE, 0, 0.5 * amp * (0.5 - 0.5 * c).powi(2));
                    joint(L_SHOULDER, 0, -0.35 * amp * s);
                    joint(R_SHOULDER, 0, 0.35 * amp * s);
                    joint(L_SHOULDER, 2, -1.2);
                    joint(R_SHOULDER, 2, 1.2);
                    joint(L_ELBOW, 1, 0.3);
                    joint(R_ELBOW, 1, -0.3);
                    joint(PELVIS, 1, 0.08 * amp * s);
                    v[ROOT_TRANSLATION_OFFSET + 1] = 0.02 * amp * (2.0 * g).cos();
                    v[ROOT_TRANSLATION_OFFSET + 2] = 0.03 * amp * s;
                }
            }
            // relaxed finger curl shared by both hands
            let curl = 0.3 + 0.05 * (0.2 * w * t + phase[5]).sin();
            for f in 0..params::HAND_JOINTS {
                if f % 3 != 0 {
                    v[HAND_OFFSET + 3 * f + 2] = curl;
                }
            }
            MotionParams::from_values(i as u32, ts, v)
        })
        .collect()
}

pub fn csv_header() -> Vec<String> {
    let mut h = vec!["frame_index".to_string(), "timestamp_us".to_string()];
    h.extend((0..PARAM_LEN).map(params::param_name));
    h
}

pub fn write_csv<W: Write>(frames: &[MotionParams], out: W) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header()).map_err(csv_io)?;
    for p in frames {
        let mut rec = vec![p.frame_index.to_string(), p.capture_timestamp_us.to_string()];
        rec.extend(p.values().iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> TraceError {
    TraceError::Io(std::io::Error::other(e))
}

/// Reads a CSV trace with the header from [`csv_header`]. Errors carry the
/// 1-based line number.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<MotionParams>, TraceError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let parse_err = |line: u64, msg: String| TraceError::Parse { line, msg };
    let header = r.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let expected = csv_header();
    if header.len() != expected.len() || header.iter().zip(&expected).any(|(a, b)| a.trim() != b) {
        return Err(parse_err(1, format!("header must be frame_index,timestamp_us and {PARAM_LEN} parameter columns")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != expected.len() {
            return Err(parse_err(line, format!("{} fields, expected {}", rec.len(), expected.len())));
        }
        let frame_index: u32 = rec[0].trim().parse().map_err(|e| parse_err(line, format!("frame_index: {e}")))?;
        let ts: u64 = rec[1].trim().parse().map_err(|e| parse_err(line, format!("timestamp_us: {e}")))?;
        let mut v = [0.0; PARAM_LEN];
        for (k, x) in v.iter_mut().enumerate() {
            *x = rec[k + 2]
                .trim()
                .parse()
                .map_err(|e| parse_err(line, format!("{}: {e}", expected[k + 2])))?;
        }
        let p = MotionParams::from_values(frame_index, ts, v).map_err(|e| parse_err(line, e.to_string()))?;
        if let Some(prev) = out.last() {
            let prev: &MotionParams = prev;
            if p.capture_timestamp_us < prev.capture_timestamp_us {
                return Err(parse_err(line, "timestamp decreases".into()));
            }
        }
        out.push(p);
    }
    Ok(out)
}

pub const BIN_RECORD_LEN: usize = 4 + 8 + PARAM_LEN * 2;

/// Binary trace: per frame `u32 frame_index, u64 timestamp_us` and the
/// 430-byte binary16 image of the parameters, little-endian.
pub fn write_bin<W: Write>(frames: &[MotionParams], mut out: W) -> Result<(), TraceError> {
    for p in frames {
        out.write_all(&p.frame_index.to_le_bytes())?;
        out.write_all(&p.capture_timestamp_us.to_le_bytes())?;
        for h in params::to_half_vec(p.values())? {
            out.write_all(&h.0.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_bin<R: Read>(mut input: R) -> Result<Vec<MotionParams>, TraceError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() % BIN_RECORD_LEN != 0 {
        return Err(TraceError::Binary(format!(
            "{} bytes is not a whole number of {BIN_RECORD_LEN}-byte records",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(BIN_RECORD_LEN)
        .enumerate()
        .map(|(n, rec)| {
            let frame_index = u32::from_le_bytes(rec[0..4].try_into().expect("4 bytes"));
            let ts = u64::from_le_bytes(rec[4..12].try_into().expect("8 bytes"));
            let mut v = [0.0; PARAM_LEN];
            for (x, b) in v.iter_mut().zip(rec[12..].chunks_exact(2)) {
                *x = Half16(u16::from_le_bytes([b[0], b[1]])).to_f64();
            }
            MotionParams::from_values(frame_index, ts, v)
                .map_err(|e| TraceError::Binary(format!("record {n}: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec;

    #[test]
    fn presets_stay_under_budget() {
        for preset in Preset::ALL {
            let frames = generate(preset, 600, 60.0, 7).unwrap();
            let r = codec::steady_state_bitrate(60.0, &[frames]).unwrap();
            assert!(r <= 0.2, "{} at {r} Mbps", preset.name());
        }
    }

    #[test]
    fn presets_are_seeded() {
        let a = generate(Preset::Wave, 50, 30.0, 1).unwrap();
        let b = generate(Preset::Wave, 50, 30.0, 1).unwrap();
        let c = generate(Preset::Wave, 50, 30.0, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a[30].capture_timestamp_us, 1_000_000);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let frames = generate(Preset::Walk, 5, 30.0, 3).unwrap();
        let mut buf = Vec::new();
        write_csv(&frames, &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), frames);
        let text = String::from_utf8(buf).unwrap();
        let broken = text.replacen("0.3", "zz", 1);
        match read_csv(broken.as_bytes()) {
            Err(TraceError::Parse { line, .. }) => assert!(line >= 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_csv("a,b\n1,2\n".as_bytes()), Err(TraceError::Parse { line: 1, .. })));
    }

    #[test]
    fn bin_round_trip() {
        let frames = generate(Preset::IdleSway, 8, 30.0, 3).unwrap();
        let mut buf = Vec::new();
        write_bin(&frames, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 * BIN_RECORD_LEN);
        let back = read_bin(buf.as_slice()).unwrap();
        for (a, b) in frames.iter().zip(&back) {
            assert_eq!(a.frame_index, b.frame_index);
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() <= x.abs() * 2f64.powi(-11) + 1e-7);
            }
        }
        assert!(read_bin(&buf[..buf.len() - 1]).is_err());
    }
}
