//! Target residual files and basis calibration.
//!
//! Layout (little endian): magic `M3TD`, version `u8`, gaussian count
//! `u32`, frame count `u32`, then per frame the frame index `u32`, the
//! capture timestamp `u64` and `gaussians x 14` `f64` residuals.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gsdeform::{self, AttrDelta, DeformError, ATTR_DIM};
use crate::package::{AvatarPackage, PackageError};
use crate::params::MotionParams;

pub const TARGET_MAGIC: [u8; 4] = *b"M3TD";
pub const TARGET_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed target file: {0}")]
    Format(String),
    #[error("targets do not match the motion trace: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Deform(#[from] DeformError),
    #[error(transparent)]
    Package(#[from] PackageError),
}

/// Residual targets for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetFrame {
    pub frame_index: u32,
    pub capture_timestamp_us: u64,
    pub deltas: Vec<AttrDelta>,
}

pub fn write_targets<W: Write>(frames: &[TargetFrame], gaussians: usize, mut out: W) -> Result<(), CalibrateError> {
    let mut buf = Vec::with_capacity(13 + frames.len() * (12 + gaussians * ATTR_DIM * 8));
    buf.extend_from_slice(&TARGET_MAGIC);
    buf.push(TARGET_VERSION);
    buf.extend_from_slice(&(gaussians as u32).to_le_bytes());
    buf.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    for f in frames {
        if f.deltas.len() != gaussians {
            return Err(CalibrateError::Format(format!(
                "frame {} has {} residuals, expected {gaussians}",
                f.frame_index,
                f.deltas.len()
            )));
        }
        buf.extend_from_slice(&f.frame_index.to_le_bytes());
        buf.extend_from_slice(&f.capture_timestamp_us.to_le_bytes());
        for d in &f.deltas {
            d.0.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_targets<R: Read>(mut input: R) -> Result<(usize, Vec<TargetFrame>), CalibrateError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut r = crate::binio::Reader::new(&buf);
    let short = |_| CalibrateError::Format("truncated".into());
    if r.take(4).map_err(short)? != TARGET_MAGIC {
        return Err(CalibrateError::Format("bad magic".into()));
    }
    let version = r.u8().map_err(short)?;
    if version != TARGET_VERSION {
        return Err(CalibrateError::Format(format!("unsupported version {version}")));
    }
    let g = r.u32().map_err(short)? as usize;
    let n = r.u32().map_err(short)? as usize;
    let per_frame = 12 + g * ATTR_DIM * 8;
    if r.remaining() != n * per_frame {
        return Err(CalibrateError::Format(format!(
            "{} payload bytes for {n} frames of {g} gaussians",
            r.remaining()
        )));
    }
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let frame_index = r.u32().map_err(short)?;
        let capture_timestamp_us = r.u64().map_err(short)?;
        let mut deltas = Vec::with_capacity(g);
        for _ in 0..g {
            let mut d = [0.0; ATTR_DIM];
            for v in &mut d {
                *v = r.f64().map_err(short)?;
                if !v.is_finite() {
                    return Err(CalibrateError::Format(format!("non-finite residual in frame {frame_index}")));
                }
            }
            deltas.push(AttrDelta(d));
        }
        frames.push(TargetFrame {
            frame_index,
            capture_timestamp_us,
            deltas,
        });
    }
    Ok((g, frames))
}

/// Targets produced by seeded random bases of half-width `scale`. Returns
/// the planted basis table with the targets.
pub fn plant_targets(
    pkg: &AvatarPackage,
    motion: &[MotionParams],
    seed: u64,
    scale: f64,
) -> Result<(Vec<f64>, Vec<TargetFrame>), CalibrateError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted: Vec<f64> = (0..pkg.field().basis_table().len())
        .map(|_| rng.gen_range(-scale..=scale) as f32 as f64)
        .collect();
    let mut field = pkg.field().clone();
    field.set_bases(planted.clone())?;
    let frames = motion
        .iter()
        .map(|p| TargetFrame {
            frame_index: p.frame_index,
            capture_timestamp_us: p.capture_timestamp_us,
            deltas: field.deltas(p),
        })
        .collect();
    Ok((planted, frames))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub frames: usize,
    pub gaussians: usize,
    pub lambda: f64,
    pub residual_sq: f64,
    pub rms: f64,
    pub content_hash_before: String,
    pub content_hash_after: String,
}

/// Fits new bases to the targets and returns the updated package.
pub fn calibrate(
    pkg: &AvatarPackage,
    motion: &[MotionParams],
    targets: &[TargetFrame],
    lambda: f64,
) -> Result<(AvatarPackage, CalibrationReport), CalibrateError> {
    let g = pkg.gaussians().len();
    if motion.len() != targets.len() {
        return Err(CalibrateError::Mismatch(format!("{} motion frames, {} target frames", motion.len(), targets.len())));
    }
    let mut training = Vec::with_capacity(motion.len());
    for (p, t) in motion.iter().zip(targets) {
        if p.frame_index != t.frame_index {
            return Err(CalibrateError::Mismatch(format!("frame {} paired with target {}", p.frame_index, t.frame_index)));
        }
        if t.deltas.len() != g {
            return Err(CalibrateError::Mismatch(format!("target has {} gaussians, avatar has {g}", t.deltas.len())));
        }
        training.push((p.clone(), t.deltas.clone()));
    }
    let fit = gsdeform::fit_bases(pkg.field(), &training, lambda)?;
    let updated = pkg.with_bases(fit.bases)?;
    let report = CalibrationReport {
        frames: targets.len(),
        gaussians: g,
        lambda,
        residual_sq: fit.residual_sq,
        rms: fit.rms,
        content_hash_before: pkg.content_hash().to_string(),
        content_hash_after: updated.content_hash().to_string(),
    };
    Ok((updated, report))
}
