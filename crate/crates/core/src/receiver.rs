//! Receiver loop: decode, pose, deform, interpolate, sort and composite.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecError, FramePacket};
use crate::geom::{self, Vec3};
use crate::gsdeform::{self, DeformError, Gaussian, Saturation};
use crate::netsim::{ClockMode, Delivery, ReceiverSink, NS_PER_MS};
use crate::package::AvatarPackage;
use crate::par;
use crate::params::{lerp_params, MotionParams, ParamError};
use crate::skinning::{lbs_pose, ClothWobble, DeformationProvider, PosedMesh, SkinError, ZeroOffsets};
use crate::stats::{summarize, Summary};

#[derive(Debug, Error)]
pub enum ReceiverError {
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("image dimensions differ: {0:?} vs {1:?}")]
    Dimensions((usize, usize), (usize, usize)),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no avatar package loaded")]
    NoPackage,
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Skin(#[from] SkinError),
    #[error(transparent)]
    Deform(#[from] DeformError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Orthographic camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub width_m: f64,
    pub height_m: f64,
    pub image_width: usize,
    pub image_height: usize,
}

/// Camera frame: right, up and forward unit vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraBasis {
    pub origin: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
}

impl CameraSpec {
    pub fn basis(&self) -> Result<CameraBasis, ReceiverError> {
        let bad = |m: &str| Err(ReceiverError::Camera(m.into()));
        if !(self.width_m > 0.0 && self.height_m > 0.0) || self.image_width == 0 || self.image_height == 0 {
            return bad("view size and image size must be positive");
        }
        let Some(forward) = geom::normalize(geom::sub(self.look_at, self.position)) else {
            return bad("position and look_at coincide");
        };
        let Some(right) = geom::normalize(geom::cross(forward, self.up)) else {
            return bad("up is parallel to the view direction");
        };
        Ok(CameraBasis {
            origin: self.position,
            right,
            up: geom::cross(right, forward),
            forward,
        })
    }

    /// Front view along -Z framing the given points with a 10% margin.
    pub fn framing(points: &[Vec3], image_width: usize, image_height: usize) -> Self {
        let (lo, hi) = points.iter().fold(([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]), |(lo, hi), p| {
            (std::array::from_fn(|k| lo[k].min(p[k])), std::array::from_fn(|k| hi[k].max(p[k])))
        });
        let c: Vec3 = std::array::from_fn(|k| 0.5 * (lo[k] + hi[k]));
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-3) * 1.1;
        let aspect = image_width as f64 / image_height as f64;
        Self {
            position: [c[0], c[1], hi[2] + span],
            look_at: c,
            up: [0.0, 1.0, 0.0],
            width_m: span * aspect.max(1.0),
            height_m: span / aspect.min(1.0),
            image_width,
            image_height,
        }
    }

    /// World-plane coordinates of a pixel center.
    pub fn pixel_center(&self, px: usize, py: usize) -> (f64, f64) {
        let x = (px as f64 + 0.5) / self.image_width as f64 * self.width_m - 0.5 * self.width_m;
        let y = 0.5 * self.height_m - (py as f64 + 0.5) / self.image_height as f64 * self.height_m;
        (x, y)
    }
}

/// Back-to-front order from 16-bit quantized view depths. Depths are mapped
/// affinely onto `[0, 65535]` and bucketed by a stable counting sort, so
/// ties keep their original index order.
pub fn depth_sort_u16(positions: &[Vec3], camera: &CameraSpec) -> Result<Vec<u32>, ReceiverError> {
    let b = camera.basis()?;
    if positions.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ReceiverError::InvalidArgument("non-finite gaussian position".into()));
    }
    let depth: Vec<f64> = par::map_slice(positions, |p| geom::dot(geom::sub(*p, b.origin), b.forward));
    Ok(sort_depths_u16(&depth))
}

pub fn quantize_depths(depth: &[f64]) -> Vec<u16> {
    let (lo, hi) = depth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), d| (a.min(*d), b.max(*d)));
    if !(hi > lo) {
        return vec![0; depth.len()];
    }
    let s = 65535.0 / (hi - lo);
    par::map_slice(depth, |d| ((d - lo) * s).round().clamp(0.0, 65535.0) as u16)
}

pub fn sort_depths_u16(depth: &[f64]) -> Vec<u32> {
    let keys = quantize_depths(depth);
    let mut count = vec![0u32; 65537];
    for &k in &keys {
        // farthest first: bucket 0 holds key 65535
        count[(65535 - k as usize) + 1] += 1;
    }
    for i in 1..count.len() {
        count[i] += count[i - 1];
    }
    let mut out = vec![0u32; keys.len()];
    for (i, &k) in keys.iter().enumerate() {
        let slot = &mut count[65535 - k as usize];
        out[*slot as usize] = i as u32;
        *slot += 1;
    }
    out
}

/// Linear RGB image with coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![[0.0; 3]; width * height],
            alpha: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.rgb[y * width + x] = f(x, y);
                img.alpha[y * width + x] = 1.0;
            }
        }
        img
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.rgb[y * self.width + x]
    }

    fn to_u8(v: f64) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    pub fn write_ppm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.rgb.iter().flat_map(|p| p.map(Self::to_u8)).collect();
        out.write_all(&bytes)
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ReceiverError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| ReceiverError::Io(std::io::Error::other(e)))?;
        let data: Vec<u8> = self
            .rgb
            .iter()
            .zip(&self.alpha)
            .flat_map(|(p, a)| [Self::to_u8(p[0]), Self::to_u8(p[1]), Self::to_u8(p[2]), Self::to_u8(*a)])
            .collect();
        w.write_image_data(&data).map_err(|e| ReceiverError::Io(std::io::Error::other(e)))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeStats {
    pub drawn: usize,
    pub skipped_singular: usize,
}

/// Contributions below this alpha are skipped.
pub const ALPHA_CUTOFF: f64 = 1e-12;

struct Splat {
    center: (f64, f64),
    conic: [f64; 3],
    opacity: f64,
    color: Vec3,
    x_range: (usize, usize),
}

fn projected_covariance(g: &Gaussian, b: &CameraBasis) -> [f64; 3] {
    let r = g.rotation.to_matrix();
    // columns of R scaled by s: Sigma = M M^T with M = R S
    let m: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| r[i][j] * g.scale[j]));
    let pr: Vec3 = std::array::from_fn(|j| (0..3).map(|i| b.right[i] * m[i][j]).sum());
    let pu: Vec3 = std::array::from_fn(|j| (0..3).map(|i| b.up[i] * m[i][j]).sum());
    [geom::dot(pr, pr), geom::dot(pr, pu), geom::dot(pu, pu)]
}

/// Orthographic alpha compositing. `back_to_front` is a sort order such as
/// the one from [`depth_sort_u16`]; blending walks it front to back with
/// `C = sum c_i a_i prod_{j<i} (1 - a_j)`.
pub fn composite_reference(
    gaussians: &[Gaussian],
    back_to_front: &[u32],
    camera: &CameraSpec,
) -> Result<(Image, CompositeStats), ReceiverError> {
    let b = camera.basis()?;
    let (w, h) = (camera.image_width, camera.image_height);
    if back_to_front.len() != gaussians.len() {
        return Err(ReceiverError::InvalidArgument("sort order length differs from gaussian count".into()));
    }
    let mut seen = vec![false; gaussians.len()];
    for &i in back_to_front {
        let slot = seen.get_mut(i as usize).ok_or_else(|| ReceiverError::InvalidArgument("sort order index out of range".into()))?;
        if std::mem::replace(slot, true) {
            return Err(ReceiverError::InvalidArgument("sort order is not a permutation".into()));
        }
    }
    let px_w = camera.width_m / w as f64;
    let px_h = camera.height_m / h as f64;
    let mut stats = CompositeStats::default();
    let mut splats = Vec::new();
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); h];
    for &i in back_to_front.iter().rev() {
        let g = &gaussians[i as usize];
        if !(g.opacity >= ALPHA_CUTOFF) {
            continue;
        }
        let cov = projected_covariance(g, &b);
        let det = cov[0] * cov[2] - cov[1] * cov[1];
        let tr = cov[0] + cov[2];
        if !(det > 1e-15 * tr * tr) {
            stats.skipped_singular += 1;
            continue;
        }
        let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
        let rel = geom::sub(g.position, b.origin);
        let center = (geom::dot(rel, b.right), geom::dot(rel, b.up));
        // alpha >= cutoff only inside the ellipse d^T conic d <= m2
        let m2 = 2.0 * (g.opacity / ALPHA_CUTOFF).ln();
        let (ex, ey) = ((m2 * cov[0]).sqrt(), (m2 * cov[2]).sqrt());
        let to_px = |x: f64| (x + 0.5 * camera.width_m) / px_w - 0.5;
        let to_py = |y: f64| (0.5 * camera.height_m - y) / px_h - 0.5;
        let (x0, x1) = (to_px(center.0 - ex).ceil(), to_px(center.0 + ex).floor());
        let (y0, y1) = (to_py(center.1 + ey).ceil(), to_py(center.1 - ey).floor());
        if x1 < 0.0 || y1 < 0.0 || x0 > (w - 1) as f64 || y0 > (h - 1) as f64 || x0 > x1 || y0 > y1 {
            continue;
        }
        let clampx = |v: f64| v.clamp(0.0, (w - 1) as f64) as usize;
        let clampy = |v: f64| v.clamp(0.0, (h - 1) as f64) as usize;
        let idx = splats.len() as u32;
        for row in &mut rows[clampy(y0)..=clampy(y1)] {
            row.push(idx);
        }
        splats.push(Splat {
            center,
            conic,
            opacity: g.opacity,
            color: g.color,
            x_range: (clampx(x0), clampx(x1)),
        });
        stats.drawn += 1;
    }
    let mut img = Image::new(w, h);
    let mut pixels: Vec<([f64; 3], f64)> = vec![([0.0; 3], 0.0); w * h];
    par::for_each_chunk_mut(&mut pixels, w, |y, row_px| {
        for (x, out) in row_px.iter_mut().enumerate() {
            let (wx, wy) = camera.pixel_center(x, y);
            let mut c = [0.0; 3];
            let mut t = 1.0;
            for &s in &rows[y] {
                let s = &splats[s as usize];
                if x < s.x_range.0 || x > s.x_range.1 {
                    continue;
                }
                let (dx, dy) = (wx - s.center.0, wy - s.center.1);
                let power = -0.5 * (s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy);
                let a = s.opacity * power.exp();
                if a < ALPHA_CUTOFF {
                    continue;
                }
                for k in 0..3 {
                    c[k] += s.color[k] * a * t;
                }
                t *= 1.0 - a;
                if t == 0.0 {
                    break;
                }
            }
            *out = (c, 1.0 - t);
        }
    });
    for (i, (c, a)) in pixels.into_iter().enumerate() {
        img.rgb[i] = c;
        img.alpha[i] = a;
    }
    Ok((img, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub l1: f64,
    pub ssim: f64,
}

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_WINDOW: usize = 11;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] = std::array::from_fn(|i| {
        let x = i as f64 - r;
        (-0.5 * x * x / (SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable filter over the valid region.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let k = gaussian_kernel();
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>();
    let ux = filter_valid(a, w, h, &k);
    let uy = filter_valid(b, w, h, &k);
    let uxx = filter_valid(&prod(&|x, _| x * x), w, h, &k);
    let uyy = filter_valid(&prod(&|_, y| y * y), w, h, &k);
    let uxy = filter_valid(&prod(&|x, y| x * y), w, h, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = ux.len();
    (0..n)
        .map(|i| {
            let (mx, my) = (ux[i], uy[i]);
            let vx = uxx[i] - mx * mx;
            let vy = uyy[i] - my * my;
            let vxy = uxy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * vxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Mean absolute difference and SSIM over the RGB channels (data range 1,
/// 11x11 Gaussian window with sigma 1.5, valid region, channel mean).
pub fn image_metrics(a: &Image, b: &Image) -> Result<ImageMetrics, ReceiverError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(ReceiverError::Dimensions((a.width, a.height), (b.width, b.height)));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(ReceiverError::InvalidArgument(format!("images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let n = a.rgb.len() * 3;
    let l1 = a
        .rgb
        .iter()
        .zip(&b.rgb)
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).abs()).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    let ssim = (0..3)
        .map(|k| {
            let ca: Vec<f64> = a.rgb.iter().map(|p| p[k]).collect();
            let cb: Vec<f64> = b.rgb.iter().map(|p| p[k]).collect();
            ssim_channel(&ca, &cb, a.width, a.height)
        })
        .sum::<f64>()
        / 3.0;
    Ok(ImageMetrics { l1, ssim })
}

/// Mid frame between two consecutive frames.
pub fn interpolate_midframe(f0: &MotionParams, f1: &MotionParams) -> Result<MotionParams, ParamError> {
    lerp_params(f0, f1, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshMotion {
    Rigid,
    ClothWobble,
}

/// Nominal per-stage compute costs used on the virtual clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub decode_ns: f64,
    pub interpolate_ns: f64,
    pub pose_ns_per_vertex: f64,
    pub deform_ns_per_gaussian: f64,
    pub deform_ns_per_controller: f64,
    pub sort_ns_per_gaussian: f64,
    pub sort_fixed_ns: f64,
    pub composite_ns_per_pixel: f64,
    pub composite_ns_per_gaussian: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            decode_ns: 3_000.0,
            interpolate_ns: 4_000.0,
            pose_ns_per_vertex: 12.0,
            deform_ns_per_gaussian: 25.0,
            deform_ns_per_controller: 400.0,
            sort_ns_per_gaussian: 6.0,
            sort_fixed_ns: 40_000.0,
            composite_ns_per_pixel: 40.0,
            composite_ns_per_gaussian: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceiverOptions {
    pub interpolate: bool,
    /// Camera for the reference compositor; `None` skips compositing.
    pub composite: Option<CameraSpec>,
    /// Camera that defines sort depth; defaults to the composite camera or
    /// a front view of the template.
    #[serde(default)]
    pub sort_camera: Option<CameraSpec>,
    pub timing: ClockMode,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default = "default_mesh_motion")]
    pub mesh_motion: MeshMotion,
}

fn default_mesh_motion() -> MeshMotion {
    MeshMotion::Rigid
}

impl Default for ReceiverOptions {
    fn default() -> Self {
        Self {
            interpolate: true,
            composite: None,
            sort_camera: None,
            timing: ClockMode::Virtual,
            cost: CostModel::default(),
            mesh_motion: MeshMotion::Rigid,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatencies {
    pub transmission_us: f64,
    pub buffer_us: f64,
    pub decode_us: f64,
    pub interpolate_us: f64,
    pub pose_us: f64,
    pub deform_us: f64,
    pub sort_us: f64,
    pub composite_us: Option<f64>,
}

impl StageLatencies {
    pub fn compute_us(&self) -> f64 {
        self.decode_us + self.interpolate_us + self.pose_us + self.deform_us + self.sort_us + self.composite_us.unwrap_or(0.0)
    }

    pub fn total_us(&self) -> f64 {
        self.transmission_us + self.buffer_us + self.compute_us()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderFrame {
    /// Twice the frame index; odd values are interpolated frames.
    pub half_index: u64,
    pub capture_timestamp_us: u64,
    pub gaussians: Vec<Gaussian>,
    pub sort_order: Vec<u32>,
    pub stage_latencies: StageLatencies,
    pub image: Option<Image>,
    pub digest: [u8; 32],
}

impl RenderFrame {
    pub fn frame_index(&self) -> f64 {
        self.half_index as f64 / 2.0
    }

    pub fn is_interpolated(&self) -> bool {
        self.half_index % 2 == 1
    }
}

/// BLAKE3 over the posed attributes and sort order.
pub fn frame_digest(half_index: u64, gaussians: &[Gaussian], order: &[u32]) -> [u8; 32] {
    const CHUNK: usize = 1 << 16;
    let mut h = blake3::Hasher::new();
    h.update(&half_index.to_le_bytes());
    let mut buf = Vec::with_capacity(CHUNK + 14 * 8);
    for g in gaussians {
        for v in g.position.iter().chain(&g.rotation.to_array()).chain(&g.scale).chain([&g.opacity]).chain(&g.color) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if buf.len() >= CHUNK {
            h.update(&buf);
            buf.clear();
        }
    }
    for i in order {
        buf.extend_from_slice(&i.to_le_bytes());
        if buf.len() >= CHUNK {
            h.update(&buf);
            buf.clear();
        }
    }
    h.update(&buf);
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub frame_index: f64,
    pub capture_timestamp_us: u64,
    pub interpolated: bool,
    #[serde(flatten)]
    pub latency: StageLatencies,
    pub total_us: f64,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiverReport {
    pub timing: ClockMode,
    pub interpolate: bool,
    pub gaussian_count: usize,
    pub content_hash: String,
    pub packets_received: usize,
    pub input_frames: usize,
    pub output_frames: usize,
    pub interpolated_frames: usize,
    pub reordered: usize,
    pub dropped_late: usize,
    pub dropped_duplicate: usize,
    pub decode_errors: usize,
    pub lost_frames: usize,
    pub skipped_midframes: usize,
    pub input_fps: f64,
    pub output_fps: f64,
    pub stages_us: BTreeMap<String, Summary>,
    pub compute_ms: Summary,
    pub end_to_end_ms: Summary,
    pub saturation: Saturation,
    pub composite_skipped_singular: usize,
    pub chain_digest: String,
    pub frames: Vec<FrameRow>,
}

impl ReceiverReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Per-frame latency breakdown: transmission, inference stages, render.
    pub fn write_latency_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| std::io::Error::other(e);
        w.write_record([
            "frame_index",
            "interpolated",
            "transmission_us",
            "buffer_us",
            "decode_us",
            "interpolate_us",
            "pose_us",
            "deform_us",
            "sort_us",
            "composite_us",
            "total_us",
        ])
        .map_err(io)?;
        for f in &self.frames {
            let l = &f.latency;
            w.write_record([
                format!("{:?}", f.frame_index),
                f.interpolated.to_string(),
                format!("{:?}", l.transmission_us),
                format!("{:?}", l.buffer_us),
                format!("{:?}", l.decode_us),
                format!("{:?}", l.interpolate_us),
                format!("{:?}", l.pose_us),
                format!("{:?}", l.deform_us),
                format!("{:?}", l.sort_us),
                l.composite_us.map(|v| format!("{v:?}")).unwrap_or_default(),
                format!("{:?}", f.total_us),
            ])
            .map_err(io)?;
        }
        w.flush()
    }
}

struct Pending {
    params: MotionParams,
    transmission_us: f64,
    decode_us: f64,
}

/// Streaming receiver. Frames are handed to `on_frame` as they are
/// produced and then dropped.
pub struct Receiver<F: FnMut(&RenderFrame)> {
    opts: ReceiverOptions,
    pkg: Option<AvatarPackage>,
    sort_camera: Option<CameraSpec>,
    on_frame: F,
    prev: Option<MotionParams>,
    held: Option<Pending>,
    report: ReportBuilder,
}

#[derive(Default)]
struct ReportBuilder {
    packets: usize,
    input: usize,
    reordered: usize,
    late: usize,
    duplicate: usize,
    decode_errors: usize,
    lost: usize,
    skipped_mid: usize,
    saturation: Saturation,
    skipped_singular: usize,
    input_ts: Vec<u64>,
    rows: Vec<FrameRow>,
    chain: Vec<u8>,
}

impl<F: FnMut(&RenderFrame)> Receiver<F> {
    pub fn new(opts: ReceiverOptions, on_frame: F) -> Self {
        Self {
            opts,
            pkg: None,
            sort_camera: None,
            on_frame,
            prev: None,
            held: None,
            report: ReportBuilder::default(),
        }
    }

    pub fn with_package(opts: ReceiverOptions, pkg: AvatarPackage, on_frame: F) -> Result<Self, ReceiverError> {
        let mut r = Self::new(opts, on_frame);
        r.load(pkg)?;
        Ok(r)
    }

    pub fn load(&mut self, pkg: AvatarPackage) -> Result<(), ReceiverError> {
        let cam = match (self.opts.sort_camera, self.opts.composite) {
            (Some(c), _) | (None, Some(c)) => c,
            (None, None) => CameraSpec::framing(pkg.avatar().vertices(), 64, 64),
        };
        cam.basis()?;
        if let Some(c) = &self.opts.composite {
            c.basis()?;
        }
        self.sort_camera = Some(cam);
        self.pkg = Some(pkg);
        Ok(())
    }

    fn clock(&self) -> Option<Instant> {
        (self.opts.timing == ClockMode::RealTime).then(Instant::now)
    }

    fn elapsed_us(start: Option<Instant>, nominal_ns: f64) -> f64 {
        match start {
            Some(s) => s.elapsed().as_nanos() as f64 / 1e3,
            None => nominal_ns / 1e3,
        }
    }

    /// Feeds one received packet.
    pub fn push_packet(&mut self, pkt: &FramePacket, transmission_ns: u64) -> Result<(), ReceiverError> {
        self.report.packets += 1;
        let t = self.clock();
        let params = match codec::decode_frame(pkt) {
            Ok(p) => p,
            Err(_) => {
                self.report.decode_errors += 1;
                return Ok(());
            }
        };
        let decode_us = Self::elapsed_us(t, self.opts.cost.decode_ns);
        self.push_frame(Pending {
            params,
            transmission_us: transmission_ns as f64 / 1e3,
            decode_us,
        })
    }

    fn push_frame(&mut self, f: Pending) -> Result<(), ReceiverError> {
        let idx = f.params.frame_index;
        let expected = self.prev.as_ref().map(|p| p.frame_index as u64 + 1);
        let Some(e) = expected else {
            if let Some(h) = self.held.take() {
                // the first frame may itself arrive second
                return match idx.cmp(&h.params.frame_index) {
                    std::cmp::Ordering::Less => {
                        self.report.reordered += 1;
                        self.process(f)?;
                        self.push_frame(h)
                    }
                    std::cmp::Ordering::Equal => {
                        self.report.duplicate += 1;
                        self.held = Some(h);
                        Ok(())
                    }
                    std::cmp::Ordering::Greater => {
                        self.process(h)?;
                        self.push_frame(f)
                    }
                };
            }
            if idx == 0 {
                return self.process(f);
            }
            self.held = Some(f);
            return Ok(());
        };
        let idx = idx as u64;
        if idx < e {
            if idx + 1 == e || self.held.as_ref().is_some_and(|h| h.params.frame_index as u64 == idx) {
                self.report.duplicate += 1;
            } else {
                self.report.late += 1;
            }
            return Ok(());
        }
        if idx == e {
            self.process(f)?;
            if let Some(h) = self.held.take() {
                if h.params.frame_index as u64 == e + 1 {
                    self.report.reordered += 1;
                }
                return self.push_frame(h);
            }
            return Ok(());
        }
        match self.held.take() {
            None => {
                self.held = Some(f);
                Ok(())
            }
            Some(h) if h.params.frame_index as u64 == idx => {
                self.report.duplicate += 1;
                self.held = Some(h);
                Ok(())
            }
            Some(h) => {
                // the expected frame did not show up within one frame
                let (first, second) = if h.params.frame_index < f.params.frame_index { (h, f) } else { (f, h) };
                self.process(first)?;
                self.push_frame(second)
            }
        }
    }

    /// Emits everything still buffered.
    pub fn flush(&mut self) -> Result<(), ReceiverError> {
        if let Some(h) = self.held.take() {
            self.process(h)?;
        }
        Ok(())
    }

    fn process(&mut self, f: Pending) -> Result<(), ReceiverError> {
        self.report.input += 1;
        self.report.input_ts.push(f.params.capture_timestamp_us);
        let prev = self.prev.take();
        let interval_us = prev
            .as_ref()
            .map(|p| f.params.capture_timestamp_us.saturating_sub(p.capture_timestamp_us) as f64)
            .unwrap_or(0.0);
        let buffer_us = if self.opts.interpolate { interval_us } else { 0.0 };
        if let Some(p) = &prev {
            let gap = f.params.frame_index as u64 - p.frame_index as u64;
            if gap > 1 {
                self.report.lost += (gap - 1) as usize;
                if self.opts.interpolate {
                    self.report.skipped_mid += 1;
                }
            } else if self.opts.interpolate {
                let t = self.clock();
                let mid = interpolate_midframe(p, &f.params)?;
                let interp_us = Self::elapsed_us(t, self.opts.cost.interpolate_ns);
                let lat = StageLatencies {
                    transmission_us: f.transmission_us,
                    buffer_us,
                    decode_us: f.decode_us,
                    interpolate_us: interp_us,
                    ..Default::default()
                };
                self.render(&mid, 2 * p.frame_index as u64 + 1, lat)?;
            }
        }
        let lat = StageLatencies {
            transmission_us: f.transmission_us,
            buffer_us,
            decode_us: f.decode_us,
            ..Default::default()
        };
        self.render(&f.params, 2 * f.params.frame_index as u64, lat)?;
        self.prev = Some(f.params);
        Ok(())
    }

    fn render(&mut self, params: &MotionParams, half_index: u64, mut lat: StageLatencies) -> Result<(), ReceiverError> {
        let pkg = self.pkg.as_ref().ok_or(ReceiverError::NoPackage)?;
        let avatar = pkg.avatar();
        let cost = self.opts.cost;
        let g = pkg.gaussians().len() as f64;

        let t = self.clock();
        let offsets = match self.opts.mesh_motion {
            MeshMotion::Rigid => ZeroOffsets.offsets(avatar, params),
            MeshMotion::ClothWobble => ClothWobble::default().offsets(avatar, params),
        };
        let posed = PosedMesh::new(avatar, lbs_pose(avatar, &offsets, params.body_pose())?);
        lat.pose_us = Self::elapsed_us(t, cost.pose_ns_per_vertex * avatar.vertex_count() as f64);

        let t = self.clock();
        let mut gaussians = Vec::with_capacity(pkg.gaussians().len());
        let sat = gsdeform::deform_gaussians(pkg.field(), pkg.gaussians(), avatar, pkg.bindings(), &posed, params, &mut gaussians)?;
        lat.deform_us = Self::elapsed_us(
            t,
            cost.deform_ns_per_gaussian * g + cost.deform_ns_per_controller * pkg.field().controllers().len() as f64,
        );

        let t = self.clock();
        let positions: Vec<Vec3> = gaussians.iter().map(|g| g.position).collect();
        let order = depth_sort_u16(&positions, self.sort_camera.as_ref().expect("camera set on load"))?;
        lat.sort_us = Self::elapsed_us(t, cost.sort_fixed_ns + cost.sort_ns_per_gaussian * g);

        let image = match &self.opts.composite {
            Some(cam) => {
                let t = self.clock();
                let (img, st) = composite_reference(&gaussians, &order, cam)?;
                let pixels = (cam.image_width * cam.image_height) as f64;
                lat.composite_us = Some(Self::elapsed_us(
                    t,
                    cost.composite_ns_per_pixel * pixels + cost.composite_ns_per_gaussian * g,
                ));
                self.report.skipped_singular += st.skipped_singular;
                Some(img)
            }
            None => None,
        };

        self.report.saturation.scale += sat.scale;
        self.report.saturation.opacity += sat.opacity;
        self.report.saturation.color += sat.color;
        let digest = frame_digest(half_index, &gaussians, &order);
        self.report.chain.extend_from_slice(&digest);
        let frame = RenderFrame {
            half_index,
            capture_timestamp_us: params.capture_timestamp_us,
            gaussians,
            sort_order: order,
            stage_latencies: lat,
            image,
            digest,
        };
        self.report.rows.push(FrameRow {
            frame_index: frame.frame_index(),
            capture_timestamp_us: frame.capture_timestamp_us,
            interpolated: frame.is_interpolated(),
            latency: lat,
            total_us: lat.total_us(),
            digest: hex::encode(digest),
        });
        (self.on_frame)(&frame);
        Ok(())
    }

    pub fn finish(mut self) -> Result<ReceiverReport, ReceiverError> {
        self.flush()?;
        let pkg = self.pkg.as_ref().ok_or(ReceiverError::NoPackage)?;
        let r = &self.report;
        let fps = |ts: &[u64]| match (ts.first(), ts.last()) {
            (Some(a), Some(b)) if b > a => (ts.len() - 1) as f64 / ((b - a) as f64 / 1e6),
            _ => 0.0,
        };
        let out_ts: Vec<u64> = r.rows.iter().map(|f| f.capture_timestamp_us).collect();
        let mut stages = BTreeMap::new();
        let col = |f: &dyn Fn(&StageLatencies) -> Option<f64>| -> Vec<f64> { r.rows.iter().filter_map(|row| f(&row.latency)).collect() };
        stages.insert("transmission".to_string(), summarize(&col(&|l| Some(l.transmission_us))));
        stages.insert("buffer".to_string(), summarize(&col(&|l| Some(l.buffer_us))));
        stages.insert("decode".to_string(), summarize(&col(&|l| Some(l.decode_us))));
        stages.insert("interpolate".to_string(), summarize(&col(&|l| Some(l.interpolate_us))));
        stages.insert("pose".to_string(), summarize(&col(&|l| Some(l.pose_us))));
        stages.insert("deform".to_string(), summarize(&col(&|l| Some(l.deform_us))));
        stages.insert("sort".to_string(), summarize(&col(&|l| Some(l.sort_us))));
        if self.opts.composite.is_some() {
            stages.insert("composite".to_string(), summarize(&col(&|l| l.composite_us)));
        }
        let compute_ms: Vec<f64> = r.rows.iter().map(|f| f.latency.compute_us() / 1e3).collect();
        let e2e_ms: Vec<f64> = r.rows.iter().map(|f| f.total_us / 1e3).collect();
        Ok(ReceiverReport {
            timing: self.opts.timing,
            interpolate: self.opts.interpolate,
            gaussian_count: pkg.gaussians().len(),
            content_hash: pkg.content_hash().to_string(),
            packets_received: r.packets,
            input_frames: r.input,
            output_frames: r.rows.len(),
            interpolated_frames: r.rows.iter().filter(|f| f.interpolated).count(),
            reordered: r.reordered,
            dropped_late: r.late,
            dropped_duplicate: r.duplicate,
            decode_errors: r.decode_errors,
            lost_frames: r.lost,
            skipped_midframes: r.skipped_mid,
            input_fps: fps(&r.input_ts),
            output_fps: fps(&out_ts),
            stages_us: stages,
            compute_ms: summarize(&compute_ms),
            end_to_end_ms: summarize(&e2e_ms),
            saturation: r.saturation,
            composite_skipped_singular: r.skipped_singular,
            chain_digest: blake3::hash(&r.chain).to_hex().to_string(),
            frames: r.rows.clone(),
        })
    }
}

impl<F: FnMut(&RenderFrame)> ReceiverSink for Receiver<F> {
    fn on_package(&mut self, pkg: AvatarPackage) -> Result<(), String> {
        self.load(pkg).map_err(|e| e.to_string())
    }

    fn on_packet(&mut self, d: &Delivery) -> Result<(), String> {
        self.push_packet(&d.packet, d.deliver_ns - d.send_ns).map_err(|e| e.to_string())
    }

    fn on_close(&mut self) -> Result<(), String> {
        self.flush().map_err(|e| e.to_string())
    }
}

/// Runs the receiver over already-delivered packets `(packet, transmission
/// latency in ns)` in arrival order.
pub fn run_receiver(
    packets: &[(FramePacket, u64)],
    package: AvatarPackage,
    opts: &ReceiverOptions,
    on_frame: impl FnMut(&RenderFrame),
) -> Result<ReceiverReport, ReceiverError> {
    let mut r = Receiver::with_package(opts.clone(), package, on_frame)?;
    for (p, lat) in packets {
        r.push_packet(p, *lat)?;
    }
    r.finish()
}

/// Converts a latency in ns to ms.
pub fn ns_to_ms(ns: u64) -> f64 {
    ns as f64 / NS_PER_MS
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::UnitQuat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(w: usize, h: usize, size: f64) -> CameraSpec {
        CameraSpec {
            position: [0.0, 0.0, 10.0],
            look_at: [0.0; 3],
            up: [0.0, 1.0, 0.0],
            width_m: size,
            height_m: size * h as f64 / w as f64,
            image_width: w,
            image_height: h,
        }
    }

    fn splat(p: Vec3, s: f64, o: f64, c: Vec3) -> Gaussian {
        Gaussian {
            position: p,
            rotation: UnitQuat::IDENTITY,
            scale: [s, s, s],
            opacity: o,
            color: c,
        }
    }

    #[test]
    fn camera_rejects_degenerate_basis() {
        let mut c = cam(8, 8, 1.0);
        c.up = [0.0, 0.0, 1.0];
        assert!(c.basis().is_err());
        c.up = [0.0, 1.0, 0.0];
        c.look_at = c.position;
        assert!(c.basis().is_err());
    }

    #[test]
    fn sort_examples() {
        let c = cam(8, 8, 1.0);
        // camera looks down -Z from z = 10, so larger z is nearer
        let back_to_front: Vec<Vec3> = (0..10).map(|i| [0.0, 0.0, i as f64]).collect();
        assert_eq!(depth_sort_u16(&back_to_front, &c).unwrap(), (0..10).collect::<Vec<u32>>());
        let reversed: Vec<Vec3> = (0..10).map(|i| [0.0, 0.0, -i as f64]).collect();
        assert_eq!(depth_sort_u16(&reversed, &c).unwrap(), (0..10).rev().collect::<Vec<u32>>());
        let flat = vec![[1.0, 2.0, 3.0]; 7];
        assert_eq!(depth_sort_u16(&flat, &c).unwrap(), (0..7).collect::<Vec<u32>>());
        assert!(depth_sort_u16(&[[f64::NAN, 0.0, 0.0]], &c).is_err());
    }

    #[test]
    fn sort_matches_exact_order_up_to_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let d: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let order = sort_depths_u16(&d);
            let (lo, hi) = d.iter().fold((f64::MAX, f64::MIN), |(a, b), x| (a.min(*x), b.max(*x)));
            let bin = (hi - lo) / 65535.0;
            let mut seen = vec![false; d.len()];
            for w in order.windows(2) {
                assert!(d[w[0] as usize] >= d[w[1] as usize] - bin);
            }
            for &i in &order {
                assert!(!std::mem::replace(&mut seen[i as usize], true));
            }
        }
    }

    #[test]
    fn composite_examples() {
        let c = cam(11, 11, 1.1);
        let (img, _) = composite_reference(&[], &[], &c).unwrap();
        assert!(img.rgb.iter().all(|p| *p == [0.0; 3]) && img.alpha.iter().all(|a| *a == 0.0));

        let g = splat([0.0, 0.0, 0.0], 0.05, 1.0, [0.2, 0.4, 0.6]);
        let (img, _) = composite_reference(&[g], &[0], &c).unwrap();
        assert_eq!(img.pixel(5, 5), [0.2, 0.4, 0.6]);

        let front = splat([0.0, 0.0, 1.0], 0.05, 0.5, [1.0, 0.0, 0.0]);
        let back = splat([0.0, 0.0, -1.0], 0.05, 1.0, [0.0, 0.0, 1.0]);
        let gs = [front, back];
        let order = depth_sort_u16(&[front.position, back.position], &c).unwrap();
        assert_eq!(order, vec![1, 0]);
        let (img, _) = composite_reference(&gs, &order, &c).unwrap();
        let p = img.pixel(5, 5);
        assert!((p[0] - 0.5).abs() < 1e-12 && p[1].abs() < 1e-12 && (p[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn composite_skips_singular() {
        let c = cam(11, 11, 1.1);
        let mut g = splat([0.0; 3], 0.05, 1.0, [1.0; 3]);
        g.scale = [0.05, 1e-12, 1e-12];
        let (_, st) = composite_reference(&[g], &[0], &c).unwrap();
        assert_eq!(st.skipped_singular, 1);
    }

    #[test]
    fn ssim_examples() {
        let a = Image::from_fn(16, 16, |x, y| [((x + y) % 2) as f64; 3]);
        let m = image_metrics(&a, &a).unwrap();
        assert_eq!(m.l1, 0.0);
        assert!((m.ssim - 1.0).abs() < 1e-12);
        let inv = Image::from_fn(16, 16, |x, y| [1.0 - ((x + y) % 2) as f64; 3]);
        assert_eq!(image_metrics(&a, &inv).unwrap().l1, 1.0);
        let c0 = Image::from_fn(16, 16, |_, _| [0.5; 3]);
        let c1 = Image::from_fn(16, 16, |_, _| [0.6; 3]);
        let m = image_metrics(&c0, &c1).unwrap();
        assert!((m.l1 - 0.1).abs() < 1e-12);
        let c1sq = 1e-4;
        let expect = (2.0 * 0.5 * 0.6 + c1sq) / (0.25 + 0.36 + c1sq);
        assert!((m.ssim - expect).abs() < 1e-12);
        assert!(image_metrics(&c0, &Image::new(15, 16)).is_err());
    }

    #[test]
    fn ssim_matches_reference_implementation() {
        // skimage.metrics.structural_similarity(a, b, data_range=1.0, channel_axis=-1,
        // gaussian_weights=True, sigma=1.5, use_sample_covariance=False), skimage 0.25.2
        let f = |s: f64, c0: f64, p0: f64, p2: f64| {
            move |x: usize, y: usize| {
                let (x, y) = (x as f64, y as f64);
                [
                    0.5 + 0.4 * (0.3 * x + 0.2 * y + p0).sin(),
                    c0 + 0.4 * (0.25 * x - 0.1 * y).cos(),
                    0.5 + s * (0.05 * x * y + p2).sin(),
                ]
            }
        };
        let a = Image::from_fn(32, 24, f(0.3, 0.5, 0.0, 0.0));
        let b = Image::from_fn(32, 24, f(0.3, 0.45, 0.4, 0.2));
        let m = image_metrics(&a, &b).unwrap();
        assert!((m.ssim - 0.930676317248914).abs() < 1e-9, "{}", m.ssim);
        assert!((m.l1 - 0.06340353683840501).abs() < 1e-12, "{}", m.l1);
    }

    fn small_package() -> AvatarPackage {
        crate::package::build_avatar(&crate::package::BuildSpec::new(crate::skinning::RigSpec::capsule(12), 1500, 5)).unwrap()
    }

    fn packets(frames: &[MotionParams]) -> Vec<(FramePacket, u64)> {
        frames.iter().map(|p| (codec::encode_frame(p).unwrap(), 1_000_000)).collect()
    }

    fn collect(pkts: &[(FramePacket, u64)], pkg: AvatarPackage, opts: &ReceiverOptions) -> (ReceiverReport, Vec<RenderFrame>) {
        let mut out = Vec::new();
        let r = run_receiver(pkts, pkg, opts, |f| out.push(f.clone())).unwrap();
        (r, out)
    }

    #[test]
    fn interpolation_doubles_rate() {
        let frames = crate::motion::generate(crate::motion::Preset::Wave, 61, 30.0, 2).unwrap();
        let pkg = small_package();
        let (r, out) = collect(&packets(&frames), pkg.clone(), &ReceiverOptions::default());
        assert_eq!(r.input_frames, 61);
        assert_eq!(r.output_frames, 121);
        assert_eq!(r.interpolated_frames, 60);
        assert!((r.input_fps - 30.0).abs() < 0.01, "{}", r.input_fps);
        assert!((r.output_fps - 60.0).abs() < 0.03, "{}", r.output_fps);
        assert!(out.windows(2).all(|w| w[1].half_index == w[0].half_index + 1));
        assert!(out.iter().all(|f| f.stage_latencies.buffer_us > 0.0 || f.half_index == 0));

        let off = ReceiverOptions { interpolate: false, ..Default::default() };
        let (r, _) = collect(&packets(&frames), pkg, &off);
        assert_eq!(r.output_frames, 61);
        assert!((r.output_fps - r.input_fps).abs() < 1e-9);
    }

    #[test]
    fn identity_stream_reproduces_baseline() {
        let pkg = small_package();
        let frames: Vec<MotionParams> = (0..4).map(|i| MotionParams::rest(i, i as u64 * 33_333)).collect();
        let (_, out) = collect(&packets(&frames), pkg.clone(), &ReceiverOptions::default());
        let rest = PosedMesh::rest(pkg.avatar());
        let coarse = crate::skinning::coarse_positions(pkg.avatar(), pkg.bindings(), &rest.vertices, &rest.normals).unwrap();
        for f in &out {
            for ((g, b), c) in f.gaussians.iter().zip(pkg.gaussians()).zip(&coarse) {
                assert!(geom::dist(g.position, *c) < 1e-12);
                assert_eq!((g.rotation, g.scale, g.opacity, g.color), (b.rotation, b.scale, b.opacity, b.color));
            }
        }
    }

    #[test]
    fn reorder_loss_and_duplicates() {
        let frames = crate::motion::generate(crate::motion::Preset::IdleSway, 10, 30.0, 1).unwrap();
        let pkts = packets(&frames);
        let order = [0usize, 2, 1, 3, 3, 5, 7, 6, 1, 9];
        let shuffled: Vec<_> = order.iter().map(|&i| pkts[i].clone()).collect();
        let (r, out) = collect(&shuffled, small_package(), &ReceiverOptions::default());
        assert_eq!(r.reordered, 2);
        assert_eq!(r.dropped_duplicate, 1);
        assert_eq!(r.dropped_late, 1);
        // frames 4 and 8 never arrive
        assert_eq!(r.lost_frames, 2);
        assert_eq!(r.input_frames, 8);
        let idx: Vec<u64> = out.iter().map(|f| f.half_index).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4, 5, 6, 10, 11, 12, 13, 14, 18]);
        assert_eq!(r.skipped_midframes, 2);
    }

    #[test]
    fn composite_is_order_independent_for_disjoint_splats() {
        let c = cam(32, 32, 1.0);
        let gs: Vec<Gaussian> = (0..9)
            .map(|i| splat([(i % 3) as f64 * 0.3 - 0.3, (i / 3) as f64 * 0.3 - 0.3, i as f64 * 0.01], 0.02, 0.8, [0.1 * i as f64, 0.5, 0.2]))
            .collect();
        let order = depth_sort_u16(&gs.iter().map(|g| g.position).collect::<Vec<_>>(), &c).unwrap();
        let (base, _) = composite_reference(&gs, &order, &c).unwrap();
        let perm: Vec<usize> = vec![4, 8, 0, 3, 7, 1, 6, 2, 5];
        let shuffled: Vec<Gaussian> = perm.iter().map(|&i| gs[i]).collect();
        let order = depth_sort_u16(&shuffled.iter().map(|g| g.position).collect::<Vec<_>>(), &c).unwrap();
        let (img, _) = composite_reference(&shuffled, &order, &c).unwrap();
        let m = image_metrics(&base, &img).unwrap();
        assert!(m.l1 < 1e-12 && (m.ssim - 1.0).abs() < 1e-9);
    }

    #[test]
    fn report_round_trips() {
        let frames = crate::motion::generate(crate::motion::Preset::Walk, 5, 30.0, 3).unwrap();
        let opts = ReceiverOptions { composite: Some(cam(16, 16, 2.0)), ..Default::default() };
        let (r, out) = collect(&packets(&frames), small_package(), &opts);
        assert!(out.iter().all(|f| f.image.is_some()));
        assert_eq!(ReceiverReport::from_json(&r.to_json()).unwrap(), r);
        let mut csv = Vec::new();
        r.write_latency_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), r.output_frames + 1);
        let (again, _) = collect(&packets(&frames), small_package(), &opts);
        assert_eq!(again.chain_digest, r.chain_digest);
    }
}
