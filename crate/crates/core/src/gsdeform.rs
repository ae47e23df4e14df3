//! Local attribute controllers.
//!
//! Each controller sits on the canonical surface and maps the 215 driving
//! parameters to a potential `u_j` in `R^B`. A Gaussian gathers the
//! potentials of its `K` nearest controllers, weighted by virtual mass
//! `f = S_skin / (d_geo + eps)` and normalized, into a force `F_i`. The force
//! activates `B` per-Gaussian attribute bases, `dG_i = sum_b F_i[b] dG_i^b`,
//! and the position splits into the mesh-driven coarse term plus the
//! `dx` part of `dG_i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{Reader, Truncated, Writer};
use crate::geom::{self, Vec3};
use crate::par;
use crate::params::{MotionParams, UnitQuat, PARAM_LEN};
use crate::skinning::{coarse_position, GaussianBinding, PosedMesh, SkinError, SurfacePoint, TemplateAvatar};

pub const CONTROLLER_COUNT: usize = 500;
pub const DEFAULT_NEIGHBORS: usize = 3;
pub const DEFAULT_BASES: usize = 8;
pub const MAX_BASES: usize = 64;
pub const DEFAULT_EPS: f64 = 1e-4;
pub const GUIDE_NEIGHBORS: usize = 6;
/// `dx(3) dr(4) ds(3) do(1) dc(3)`.
pub const ATTR_DIM: usize = 14;
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeformError {
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("basis count mismatch: force has {got} entries, field uses {expected}")]
    BasisMismatch { expected: usize, got: usize },
    #[error("normal equations for gaussian {gaussian} are singular; use a ridge lambda > 0")]
    Singular { gaussian: usize },
    #[error(transparent)]
    Skin(#[from] SkinError),
    #[error(transparent)]
    Truncated(#[from] Truncated),
}

/// One Gaussian primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub position: Vec3,
    pub rotation: UnitQuat,
    pub scale: Vec3,
    pub opacity: f64,
    pub color: Vec3,
}

impl Gaussian {
    pub fn validate(&self) -> Result<(), DeformError> {
        let finite = self
            .position
            .iter()
            .chain(&self.scale)
            .chain(&self.color)
            .chain(&self.rotation.to_array())
            .all(|v| v.is_finite());
        if !finite {
            return Err(DeformError::InvalidArgument("non-finite gaussian attribute".into()));
        }
        if self.scale.iter().any(|s| *s <= 0.0) {
            return Err(DeformError::InvalidArgument("non-positive scale".into()));
        }
        if !(0.0..=1.0).contains(&self.opacity) || self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(DeformError::InvalidArgument("opacity or color outside [0, 1]".into()));
        }
        if (self.rotation.norm() - 1.0).abs() > 1e-6 {
            return Err(DeformError::InvalidArgument("rotation is not unit-norm".into()));
        }
        Ok(())
    }
}

pub type GaussianSet = Vec<Gaussian>;

/// Per-Gaussian attribute residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttrDelta(pub [f64; ATTR_DIM]);

impl AttrDelta {
    pub const ZERO: AttrDelta = AttrDelta([0.0; ATTR_DIM]);

    pub fn dx(&self) -> Vec3 {
        [self.0[0], self.0[1], self.0[2]]
    }

    pub fn dr(&self) -> [f64; 4] {
        [self.0[3], self.0[4], self.0[5], self.0[6]]
    }

    pub fn ds(&self) -> Vec3 {
        [self.0[7], self.0[8], self.0[9]]
    }

    pub fn dopacity(&self) -> f64 {
        self.0[10]
    }

    pub fn dc(&self) -> Vec3 {
        [self.0[11], self.0[12], self.0[13]]
    }
}

/// Small rotation increment: `(sqrt(1 - |v|^2), v)` from the imaginary part
/// when `|v| < 1`, otherwise the normalized 4-vector.
pub fn increment_quat(dr: [f64; 4]) -> UnitQuat {
    let v = [dr[1], dr[2], dr[3]];
    let n2 = geom::dot(v, v);
    if n2 < 1.0 {
        UnitQuat::new((1.0 - n2).sqrt(), v[0], v[1], v[2]).unwrap_or(UnitQuat::IDENTITY)
    } else {
        UnitQuat::new(dr[0], dr[1], dr[2], dr[3]).unwrap_or(UnitQuat::IDENTITY)
    }
}

/// Affine map from the 215 driving parameters to a `B`-dimensional
/// potential. Coefficients are `(215 + 1) x B` row-major; the last row is the
/// bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    bases: usize,
    coeffs: Vec<f64>,
}

impl AffineMap {
    pub fn zeros(bases: usize) -> Self {
        Self {
            bases,
            coeffs: vec![0.0; (PARAM_LEN + 1) * bases],
        }
    }

    pub fn from_coeffs(bases: usize, coeffs: Vec<f64>) -> Result<Self, DeformError> {
        if coeffs.len() != (PARAM_LEN + 1) * bases {
            return Err(DeformError::InvalidField(format!(
                "affine map needs {} coefficients, got {}",
                (PARAM_LEN + 1) * bases,
                coeffs.len()
            )));
        }
        Ok(Self { bases, coeffs })
    }

    /// Potential that ignores the input.
    pub fn constant(u: &[f64]) -> Self {
        let mut m = Self::zeros(u.len());
        m.coeffs[PARAM_LEN * u.len()..].copy_from_slice(u);
        m
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn eval_into(&self, p: &[f64; PARAM_LEN], out: &mut [f64]) {
        let b = self.bases;
        out.copy_from_slice(&self.coeffs[PARAM_LEN * b..]);
        for (row, &x) in self.coeffs.chunks_exact(b).zip(p.iter()) {
            if x != 0.0 {
                for (o, c) in out.iter_mut().zip(row) {
                    *o += c * x;
                }
            }
        }
    }

    pub fn eval(&self, p: &MotionParams) -> Vec<f64> {
        let mut out = vec![0.0; self.bases];
        self.eval_into(p.values(), &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub position: Vec3,
    pub weights: Vec<f64>,
    pub potential: AffineMap,
}

/// Cosine similarity of two skinning-weight vectors, in `[0, 1]` for
/// non-negative weights.
pub fn skin_similarity(a: &[f64], b: &[f64]) -> Result<f64, DeformError> {
    let (na, nb) = (a.iter().map(|x| x * x).sum::<f64>(), b.iter().map(|x| x * x).sum::<f64>());
    if na <= 0.0 || nb <= 0.0 || a.len() != b.len() {
        return Err(SkinError::InvalidAvatar("zero-norm or mismatched skinning weights".into()).into());
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((d / (na.sqrt() * nb.sqrt())).clamp(0.0, 1.0))
}

/// Coupling strength between a Gaussian anchor and a controller anchor.
pub fn virtual_mass(
    avatar: &TemplateAvatar,
    x: &SurfacePoint,
    y: &SurfacePoint,
    eps: f64,
) -> Result<f64, DeformError> {
    if !(eps > 0.0) {
        return Err(DeformError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let s = skin_similarity(&avatar.weights_at(x), &avatar.weights_at(y))?;
    Ok(s / (avatar.geodesic_distance(x, y) + eps))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub controllers: usize,
    pub bases: usize,
    pub neighbors: usize,
    pub eps: f64,
    pub allow_nonstandard: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            controllers: CONTROLLER_COUNT,
            bases: DEFAULT_BASES,
            neighbors: DEFAULT_NEIGHBORS,
            eps: DEFAULT_EPS,
            allow_nonstandard: false,
        }
    }
}

/// Controllers plus the per-Gaussian neighbor lists, masses and bases.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerField {
    controllers: Vec<Controller>,
    bases: usize,
    k: usize,
    eps: f64,
    neighbors: Vec<u32>,
    masses: Vec<f64>,
    gamma: Vec<f64>,
    /// `G x B x 14`.
    basis: Vec<f32>,
    guide_pairs: Vec<(u32, u32)>,
}

impl ControllerField {
    /// Assembles a field from precomputed parts and checks its invariants.
    pub fn from_parts(
        controllers: Vec<Controller>,
        bases: usize,
        k: usize,
        eps: f64,
        neighbors: Vec<u32>,
        masses: Vec<f64>,
        basis: Vec<f64>,
        allow_nonstandard: bool,
    ) -> Result<Self, DeformError> {
        let bad = |m: String| Err(DeformError::InvalidField(m));
        if controllers.len() != CONTROLLER_COUNT && !allow_nonstandard {
            return bad(format!(
                "{} controllers; exactly {CONTROLLER_COUNT} are required unless non-standard counts are allowed",
                controllers.len()
            ));
        }
        if controllers.is_empty() || bases == 0 || k == 0 || !(eps > 0.0) {
            return bad("controller count, B, K and eps must be positive".into());
        }
        if bases > MAX_BASES {
            return bad(format!("at most {MAX_BASES} bases are supported, got {bases}"));
        }
        if controllers.len() > u16::MAX as usize + 1 {
            return bad("too many controllers for 16-bit neighbor indices".into());
        }
        if !neighbors.len().is_multiple_of(k) || masses.len() != neighbors.len() {
            return bad("neighbor and mass tables disagree".into());
        }
        let g = neighbors.len() / k;
        if basis.len() != g * bases * ATTR_DIM {
            return bad(format!("basis table has {} entries, expected {}", basis.len(), g * bases * ATTR_DIM));
        }
        if let Some(c) = controllers.iter().position(|c| c.potential.bases != bases) {
            return bad(format!("controller {c} potential has the wrong output size"));
        }
        if neighbors.iter().any(|&j| j as usize >= controllers.len()) {
            return bad("neighbor index out of range".into());
        }
        if masses.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return bad("virtual masses must be non-negative and finite".into());
        }
        if masses.chunks_exact(k).any(|m| !(m.iter().sum::<f64>() > 0.0)) {
            return bad("every gaussian needs a neighbor with positive mass".into());
        }
        let basis = to_f32_table(basis).map_err(DeformError::InvalidField)?;
        let gamma = masses.chunks_exact(k).map(|m| 1.0 / m.iter().sum::<f64>()).collect();
        let guide_pairs = guide_pairs(&controllers);
        Ok(Self {
            controllers,
            bases,
            k,
            eps,
            neighbors,
            masses,
            gamma,
            basis,
            guide_pairs,
        })
    }

    /// Samples controllers uniformly over the surface and precomputes, per
    /// Gaussian, the K geodesically nearest controllers with overlapping
    /// skinning support and their masses. When fewer than K share support,
    /// the nearest others fill in with zero mass. Potentials and bases start
    /// at zero.
    pub fn build(
        avatar: &TemplateAvatar,
        bindings: &[GaussianBinding],
        cfg: &FieldConfig,
        seed: u64,
    ) -> Result<Self, DeformError> {
        if cfg.controllers != CONTROLLER_COUNT && !cfg.allow_nonstandard {
            return Err(DeformError::InvalidField(format!(
                "{} controllers requested; exactly {CONTROLLER_COUNT} are required unless non-standard counts are allowed",
                cfg.controllers
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = sample_surface(avatar, cfg.controllers, &mut rng);
        let controllers: Vec<Controller> = anchors
            .iter()
            .map(|p| Controller {
                position: avatar.point_position(p),
                weights: avatar.weights_at(p),
                potential: AffineMap::zeros(cfg.bases),
            })
            .collect();
        let graph = avatar.surface_graph();
        let fields: Vec<Vec<f64>> = par::map_slice(&anchors, |a| graph.distance_field(a));
        let unit = |w: &[f64]| {
            let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            w.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let ctrl_unit: Vec<Vec<f64>> = controllers.iter().map(|c| unit(&c.weights)).collect();
        let k = cfg.neighbors;
        let eps = cfg.eps;
        let per_gaussian: Vec<Result<Vec<(u32, f64)>, DeformError>> = par::map_slice(bindings, |b| {
            b.validate(avatar.faces().len())?;
            let x = b.surface_point();
            let wx = avatar.weights_at(&x);
            let wx = unit(&wx);
            let mut cand: Vec<(f64, u32, f64)> = Vec::with_capacity(anchors.len());
            let mut unrelated: Vec<(f64, u32)> = Vec::new();
            for (j, a) in anchors.iter().enumerate() {
                let s: f64 = wx.iter().zip(&ctrl_unit[j]).map(|(p, q)| p * q).sum::<f64>().clamp(0.0, 1.0);
                let d = graph.distance_from_field(&fields[j], a, &x);
                if !d.is_finite() {
                    continue;
                }
                if s > 0.0 {
                    cand.push((d, j as u32, s));
                } else {
                    unrelated.push((d, j as u32));
                }
            }
            if cand.is_empty() {
                return Err(DeformError::InvalidField(format!(
                    "no controller shares skinning support with a gaussian on face {}",
                    b.face_index
                )));
            }
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
            if cand.len() < k {
                // pad with the nearest zero-mass controllers
                unrelated.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                cand.extend(unrelated.iter().take(k - cand.len()).map(|&(d, j)| (d, j, 0.0)));
            }
            if cand.len() < k {
                return Err(DeformError::InvalidField(format!("fewer than {k} reachable controllers")));
            }
            Ok(cand[..k].iter().map(|&(d, j, s)| (j, s / (d + eps))).collect())
        });
        let mut neighbors = Vec::with_capacity(bindings.len() * k);
        let mut masses = Vec::with_capacity(bindings.len() * k);
        for r in per_gaussian {
            for (j, m) in r? {
                neighbors.push(j);
                masses.push(m);
            }
        }
        let basis = vec![0.0; bindings.len() * cfg.bases * ATTR_DIM];
        Self::from_parts(controllers, cfg.bases, k, eps, neighbors, masses, basis, cfg.allow_nonstandard)
    }

    pub fn controllers(&self) -> &[Controller] {
        &self.controllers
    }

    pub fn controllers_mut(&mut self) -> &mut [Controller] {
        &mut self.controllers
    }

    pub fn basis_count(&self) -> usize {
        self.bases
    }

    pub fn neighbor_count(&self) -> usize {
        self.k
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn gaussian_count(&self) -> usize {
        self.gamma.len()
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn masses(&self, i: usize) -> &[f64] {
        &self.masses[i * self.k..(i + 1) * self.k]
    }

    pub fn gamma(&self, i: usize) -> f64 {
        self.gamma[i]
    }

    pub fn guide_pairs(&self) -> &[(u32, u32)] {
        &self.guide_pairs
    }

    /// `B x 14` bases of Gaussian `i`, row per basis. Stored in single
    /// precision, as in the package.
    pub fn bases_of(&self, i: usize) -> &[f32] {
        let n = self.bases * ATTR_DIM;
        &self.basis[i * n..(i + 1) * n]
    }

    pub fn basis_table(&self) -> &[f32] {
        &self.basis
    }

    pub fn set_bases(&mut self, basis: Vec<f64>) -> Result<(), DeformError> {
        if basis.len() != self.basis.len() {
            return Err(DeformError::InvalidField(format!(
                "basis table has {} entries, expected {}",
                basis.len(),
                self.basis.len()
            )));
        }
        self.basis = to_f32_table(basis).map_err(DeformError::InvalidField)?;
        Ok(())
    }

    /// Fills every potential map with seeded uniform coefficients in
    /// `[-scale, scale]`. The bias stays zero, so the all-zero pose leaves
    /// the baseline untouched.
    pub fn randomize_potentials(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in &mut self.controllers {
            let b = c.potential.bases;
            c.potential.coeffs[..PARAM_LEN * b]
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-scale..=scale));
            c.potential.coeffs[PARAM_LEN * b..].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Fills the bases with seeded uniform values; `scales` gives the
    /// half-width per attribute channel.
    pub fn randomize_bases(&mut self, seed: u64, scales: &[f64; ATTR_DIM]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for row in self.basis.chunks_exact_mut(ATTR_DIM) {
            for (v, s) in row.iter_mut().zip(scales) {
                *v = if *s > 0.0 { rng.gen_range(-*s..=*s) as f32 } else { 0.0 };
            }
        }
    }

    /// Potentials of every controller, `controllers x B` row-major.
    pub fn potentials(&self, params: &MotionParams) -> Vec<f64> {
        let b = self.bases;
        let rows = par::map_slice(&self.controllers, |c| {
            let mut u = vec![0.0; b];
            c.potential.eval_into(params.values(), &mut u);
            u
        });
        rows.concat()
    }

    /// Force on Gaussian `i` from precomputed potentials.
    pub fn force_from_potentials(&self, potentials: &[f64], i: usize, out: &mut [f64]) {
        let b = self.bases;
        out.iter_mut().for_each(|v| *v = 0.0);
        let g = self.gamma[i];
        for (&j, &m) in self.neighbors(i).iter().zip(self.masses(i)) {
            let w = g * m;
            let u = &potentials[j as usize * b..(j as usize + 1) * b];
            for (o, x) in out.iter_mut().zip(u) {
                *o += w * x;
            }
        }
    }

    /// `F_i = gamma_i * sum_j f_ij u_j` over the K neighbors of `i`.
    pub fn dragging_force(&self, params: &MotionParams, i: usize) -> Result<Vec<f64>, DeformError> {
        if i >= self.gaussian_count() {
            return Err(DeformError::InvalidArgument(format!("gaussian {i} out of range")));
        }
        let b = self.bases;
        let mut out = vec![0.0; b];
        let mut u = vec![0.0; b];
        let g = self.gamma[i];
        for (&j, &m) in self.neighbors(i).iter().zip(self.masses(i)) {
            self.controllers[j as usize].potential.eval_into(params.values(), &mut u);
            for (o, x) in out.iter_mut().zip(&u) {
                *o += g * m * x;
            }
        }
        Ok(out)
    }

    /// `dG_i = sum_b F[b] dG_i^b`.
    pub fn project_bases(&self, force: &[f64], i: usize) -> Result<AttrDelta, DeformError> {
        if force.len() != self.bases {
            return Err(DeformError::BasisMismatch {
                expected: self.bases,
                got: force.len(),
            });
        }
        if i >= self.gaussian_count() {
            return Err(DeformError::InvalidArgument(format!("gaussian {i} out of range")));
        }
        Ok(self.project_unchecked(force, i))
    }

    fn delta_from_potentials(&self, potentials: &[f64], i: usize) -> AttrDelta {
        let mut f = [0.0; MAX_BASES];
        let f = &mut f[..self.bases];
        self.force_from_potentials(potentials, i, f);
        self.project_unchecked(f, i)
    }

    fn project_unchecked(&self, force: &[f64], i: usize) -> AttrDelta {
        let mut d = [0.0; ATTR_DIM];
        for (f, row) in force.iter().zip(self.bases_of(i).chunks_exact(ATTR_DIM)) {
            if *f != 0.0 {
                for (o, r) in d.iter_mut().zip(row) {
                    *o += f * *r as f64;
                }
            }
        }
        AttrDelta(d)
    }

    /// Attribute residuals for every Gaussian.
    pub fn deltas(&self, params: &MotionParams) -> Vec<AttrDelta> {
        let pots = self.potentials(params);
        par::map_range(self.gaussian_count(), |i| {
            let mut f = vec![0.0; self.bases];
            self.force_from_potentials(&pots, i, &mut f);
            self.project_unchecked(&f, i)
        })
    }

    /// Controller block: `u32 count, u8 B, u8 K, f32 eps`, per controller
    /// `y (3 f32), weights (J f32), affine ((215 + 1) x B f32)`, then per
    /// Gaussian `K u16 neighbors, K f32 masses, B x 14 f32 bases`.
    pub fn encode_block(&self, w: &mut Writer) {
        w.u32(self.controllers.len() as u32);
        w.u8(self.bases as u8);
        w.u8(self.k as u8);
        w.f32(self.eps);
        for c in &self.controllers {
            w.f32s(&c.position);
            w.f32s(&c.weights);
            w.f32s(&c.potential.coeffs);
        }
        for i in 0..self.gaussian_count() {
            self.neighbors(i).iter().for_each(|j| w.u16(*j as u16));
            w.f32s(self.masses(i));
            self.bases_of(i).iter().for_each(|v| w.f32(*v as f64));
        }
    }

    pub fn decode_block(
        r: &mut Reader,
        joint_count: usize,
        gaussian_count: usize,
        allow_nonstandard: bool,
    ) -> Result<Self, DeformError> {
        let count = r.u32()? as usize;
        let bases = r.u8()? as usize;
        let k = r.u8()? as usize;
        let eps = r.f32()?;
        let need = count * 4 * (3 + joint_count + (PARAM_LEN + 1) * bases)
            + gaussian_count * (2 * k + 4 * k + 4 * bases * ATTR_DIM);
        if r.remaining() < need {
            return Err(Truncated {
                offset: r.position(),
                needed: need,
                available: r.remaining(),
            }
            .into());
        }
        let mut controllers = Vec::with_capacity(count);
        for _ in 0..count {
            let p = r.f32s(3)?;
            let weights = r.f32s(joint_count)?;
            let coeffs = r.f32s((PARAM_LEN + 1) * bases)?;
            controllers.push(Controller {
                position: [p[0], p[1], p[2]],
                weights,
                potential: AffineMap::from_coeffs(bases, coeffs)?,
            });
        }
        let mut neighbors = Vec::with_capacity(gaussian_count * k);
        let mut masses = Vec::with_capacity(gaussian_count * k);
        let mut basis = Vec::with_capacity(gaussian_count * bases * ATTR_DIM);
        for _ in 0..gaussian_count {
            for _ in 0..k {
                neighbors.push(r.u16()? as u32);
            }
            masses.extend(r.f32s(k)?);
            basis.extend(r.f32s(bases * ATTR_DIM)?);
        }
        Self::from_parts(controllers, bases, k, eps, neighbors, masses, basis, allow_nonstandard)
    }
}

/// Directed pairs `(j, k)` with `k` among the `GUIDE_NEIGHBORS` nearest
/// controllers of `j` in canonical space.
fn guide_pairs(controllers: &[Controller]) -> Vec<(u32, u32)> {
    let rows = par::map_range(controllers.len(), |j| {
        let mut d: Vec<(f64, u32)> = controllers
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != j)
            .map(|(k, c)| (geom::dist(controllers[j].position, c.position), k as u32))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter()
            .take(GUIDE_NEIGHBORS)
            .map(|(_, k)| (j as u32, k))
            .collect::<Vec<_>>()
    });
    rows.concat()
}

/// Area-uniform surface samples.
pub fn sample_surface(avatar: &TemplateAvatar, count: usize, rng: &mut impl Rng) -> Vec<SurfacePoint> {
    let v = avatar.vertices();
    let mut cdf = Vec::with_capacity(avatar.faces().len());
    let mut acc = 0.0;
    for f in avatar.faces() {
        let (a, b, c) = (v[f[0] as usize], v[f[1] as usize], v[f[2] as usize]);
        acc += 0.5 * geom::norm(geom::cross(geom::sub(b, a), geom::sub(c, a)));
        cdf.push(acc);
    }
    (0..count)
        .map(|_| {
            let r = rng.gen_range(0.0..acc);
            let face = cdf.partition_point(|&x| x <= r).min(cdf.len() - 1) as u32;
            let (s, t): (f64, f64) = (rng.gen(), rng.gen());
            let s = s.sqrt();
            SurfacePoint::Face {
                face,
                bary: [1.0 - s, s * (1.0 - t), s * t],
            }
        })
        .collect()
}

/// Baseline Gaussians scattered over the surface, bound to their faces,
/// with positions equal to the rest-pose coarse positions.
pub fn sample_gaussians(
    avatar: &TemplateAvatar,
    count: usize,
    seed: u64,
) -> (GaussianSet, Vec<GaussianBinding>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = sample_surface(avatar, count, &mut rng);
    let rest = PosedMesh::rest(avatar);
    let spacing = (avatar.total_area() / count.max(1) as f64).sqrt();
    let (lo, hi) = bounds(avatar.vertices());
    let mut gaussians = Vec::with_capacity(count);
    let mut bindings = Vec::with_capacity(count);
    for a in anchors {
        let SurfacePoint::Face { face, bary } = a else { unreachable!() };
        let binding = GaussianBinding {
            face_index: face,
            barycentric: bary,
            normal_offset: rng.gen_range(0.0..0.25) * spacing,
        };
        let position = coarse_position(avatar.faces(), &binding, &rest.vertices, &rest.normals);
        let rot = UnitQuat::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            .unwrap_or(UnitQuat::IDENTITY);
        let scale = std::array::from_fn(|_| spacing * rng.gen_range(0.3..0.8));
        let color = std::array::from_fn(|k| {
            let span = (hi[k] - lo[k]).max(1e-9);
            (0.2 + 0.6 * (position[k] - lo[k]) / span).clamp(0.0, 1.0)
        });
        gaussians.push(Gaussian {
            position,
            rotation: rot,
            scale,
            opacity: rng.gen_range(0.5..1.0),
            color,
        });
        bindings.push(binding);
    }
    (gaussians, bindings)
}

fn bounds(v: &[Vec3]) -> (Vec3, Vec3) {
    v.iter().fold(([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]), |(lo, hi), p| {
        (std::array::from_fn(|k| lo[k].min(p[k])), std::array::from_fn(|k| hi[k].max(p[k])))
    })
}

/// Counts of post-application clamps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Saturation {
    pub scale: usize,
    pub opacity: usize,
    pub color: usize,
}

impl Saturation {
    fn add_flags(&mut self, flags: u8) {
        self.scale += (flags & 1 != 0) as usize;
        self.opacity += (flags & 2 != 0) as usize;
        self.color += (flags & 4 != 0) as usize;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformOutput {
    pub gaussians: GaussianSet,
    pub deltas: Vec<AttrDelta>,
    pub saturation: Saturation,
}

/// Applies one residual to a baseline Gaussian at the given coarse position.
/// Returns the Gaussian and a bitmask of clamps (1 scale, 2 opacity, 4 color).
pub fn apply_delta(base: &Gaussian, coarse: Vec3, d: &AttrDelta) -> (Gaussian, u8) {
    let mut flags = 0u8;
    let position = geom::add(coarse, d.dx());
    let rotation = if d.dr() == [0.0; 4] {
        base.rotation
    } else {
        base.rotation.mul(&increment_quat(d.dr()))
    };
    let ds = d.ds();
    let scale = std::array::from_fn(|k| {
        let s = base.scale[k] + ds[k];
        if !(s >= SCALE_FLOOR) {
            flags |= 1;
            SCALE_FLOOR
        } else {
            s
        }
    });
    let o = base.opacity + d.dopacity();
    let opacity = if (0.0..=1.0).contains(&o) {
        o
    } else {
        flags |= 2;
        o.clamp(0.0, 1.0)
    };
    let dc = d.dc();
    let color = std::array::from_fn(|k| {
        let c = base.color[k] + dc[k];
        if (0.0..=1.0).contains(&c) {
            c
        } else {
            flags |= 4;
            c.clamp(0.0, 1.0)
        }
    });
    (
        Gaussian {
            position,
            rotation,
            scale,
            opacity,
            color,
        },
        flags,
    )
}

fn check_deform_inputs(
    field: &ControllerField,
    baseline: &[Gaussian],
    avatar: &TemplateAvatar,
    bindings: &[GaussianBinding],
    posed: &PosedMesh,
) -> Result<(), DeformError> {
    let g = baseline.len();
    if bindings.len() != g || field.gaussian_count() != g {
        return Err(DeformError::InvalidArgument(format!(
            "{} gaussians, {} bindings, field built for {}",
            g,
            bindings.len(),
            field.gaussian_count()
        )));
    }
    if posed.vertices.len() != avatar.vertex_count() || posed.normals.len() != avatar.vertex_count() {
        return Err(SkinError::Shape("posed mesh does not match the template".into()).into());
    }
    let faces = avatar.faces();
    if let Some(b) = bindings.iter().find(|b| b.face_index as usize >= faces.len()) {
        return Err(SkinError::InvalidAvatar(format!("binding face {} out of range", b.face_index)).into());
    }
    Ok(())
}

fn to_f32_table(v: Vec<f64>) -> Result<Vec<f32>, String> {
    v.into_iter()
        .map(|b| {
            let x = b as f32;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(format!("basis entry {b} is not representable in single precision"))
            }
        })
        .collect()
}

/// Posed Gaussians for one frame: coarse position from the posed mesh plus
/// the controller-driven residuals.
pub fn deform(
    field: &ControllerField,
    baseline: &[Gaussian],
    avatar: &TemplateAvatar,
    bindings: &[GaussianBinding],
    posed: &PosedMesh,
    params: &MotionParams,
) -> Result<DeformOutput, DeformError> {
    check_deform_inputs(field, baseline, avatar, bindings, posed)?;
    let g = baseline.len();
    let faces = avatar.faces();
    let pots = field.potentials(params);
    let out = par::map_range(g, |i| {
        let d = field.delta_from_potentials(&pots, i);
        let coarse = coarse_position(faces, &bindings[i], &posed.vertices, &posed.normals);
        let (gs, flags) = apply_delta(&baseline[i], coarse, &d);
        (gs, d, flags)
    });
    let mut sat = Saturation::default();
    let mut gaussians = Vec::with_capacity(g);
    let mut deltas = Vec::with_capacity(g);
    for (gs, d, flags) in out {
        sat.add_flags(flags);
        gaussians.push(gs);
        deltas.push(d);
    }
    Ok(DeformOutput {
        gaussians,
        deltas,
        saturation: sat,
    })
}

/// Same Gaussians as [`deform`], written into `out` without keeping the
/// residuals.
pub fn deform_gaussians(
    field: &ControllerField,
    baseline: &[Gaussian],
    avatar: &TemplateAvatar,
    bindings: &[GaussianBinding],
    posed: &PosedMesh,
    params: &MotionParams,
    out: &mut Vec<Gaussian>,
) -> Result<Saturation, DeformError> {
    check_deform_inputs(field, baseline, avatar, bindings, posed)?;
    let faces = avatar.faces();
    let pots = field.potentials(params);
    out.clear();
    out.extend_from_slice(baseline);
    let chunk = 4096;
    let flags = par::map_chunks_mut(out, chunk, |ci, gs| {
        let mut sat = Saturation::default();
        for (k, g) in gs.iter_mut().enumerate() {
            let i = ci * chunk + k;
            let d = field.delta_from_potentials(&pots, i);
            let coarse = coarse_position(faces, &bindings[i], &posed.vertices, &posed.normals);
            let (posed_g, f) = apply_delta(g, coarse, &d);
            *g = posed_g;
            sat.add_flags(f);
        }
        sat
    });
    Ok(flags.into_iter().fold(Saturation::default(), |mut a, s| {
        a.scale += s.scale;
        a.opacity += s.opacity;
        a.color += s.color;
        a
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// `G x B x 14`, same layout as the field's basis table.
    pub bases: Vec<f64>,
    /// Sum of squared residuals over all Gaussians, frames and channels.
    pub residual_sq: f64,
    /// Root-mean-square residual per scalar target.
    pub rms: f64,
}

/// Least-squares bases from `(params, target residuals)` pairs. Each
/// Gaussian solves `(F^T F + lambda I) X = F^T Y` by Cholesky.
pub fn fit_bases(
    field: &ControllerField,
    training: &[(MotionParams, Vec<AttrDelta>)],
    lambda: f64,
) -> Result<FitResult, DeformError> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(DeformError::InvalidArgument(format!("ridge lambda must be finite and >= 0, got {lambda}")));
    }
    let g = field.gaussian_count();
    if training.is_empty() {
        return Err(DeformError::InvalidArgument("empty training set".into()));
    }
    if let Some(t) = training.iter().position(|(_, d)| d.len() != g) {
        return Err(DeformError::InvalidArgument(format!("frame {t} has the wrong number of targets")));
    }
    let b = field.bases;
    let pots: Vec<Vec<f64>> = training.iter().map(|(p, _)| field.potentials(p)).collect();
    let solved = par::map_range(g, |i| {
        let mut a = vec![0.0; b * b];
        let mut rhs = vec![0.0; b * ATTR_DIM];
        let mut f = vec![0.0; b];
        let mut forces = Vec::with_capacity(training.len());
        for (t, (_, targets)) in training.iter().enumerate() {
            field.force_from_potentials(&pots[t], i, &mut f);
            for r in 0..b {
                for c in 0..b {
                    a[r * b + c] += f[r] * f[c];
                }
                for c in 0..ATTR_DIM {
                    rhs[r * ATTR_DIM + c] += f[r] * targets[i].0[c];
                }
            }
            forces.push(f.clone());
        }
        for r in 0..b {
            a[r * b + r] += lambda;
        }
        let x = cholesky_solve(&mut a, &rhs, b, ATTR_DIM).ok_or(DeformError::Singular { gaussian: i })?;
        let mut res = 0.0;
        for (t, (_, targets)) in training.iter().enumerate() {
            for c in 0..ATTR_DIM {
                let pred: f64 = (0..b).map(|r| forces[t][r] * x[r * ATTR_DIM + c]).sum();
                res += (pred - targets[i].0[c]).powi(2);
            }
        }
        Ok::<_, DeformError>((x, res))
    });
    let mut bases = Vec::with_capacity(g * b * ATTR_DIM);
    let mut residual_sq = 0.0;
    for r in solved {
        let (x, res) = r?;
        bases.extend(x);
        residual_sq += res;
    }
    let n = (g * training.len() * ATTR_DIM).max(1) as f64;
    Ok(FitResult {
        bases,
        residual_sq,
        rms: (residual_sq / n).sqrt(),
    })
}

/// Solves `A X = R` for symmetric positive definite `A` (`n x n`, destroyed)
/// with `m` right-hand sides. `None` when a pivot collapses.
fn cholesky_solve(a: &mut [f64], rhs: &[f64], n: usize, m: usize) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i]).fold(0.0f64, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 1e-12 * scale) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    let mut x = rhs.to_vec();
    for c in 0..m {
        for i in 0..n {
            let mut s = x[i * m + c];
            for k in 0..i {
                s -= a[i * n + k] * x[k * m + c];
            }
            x[i * m + c] = s / a[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i * m + c];
            for k in i + 1..n {
                s -= a[k * n + i] * x[k * m + c];
            }
            x[i * m + c] = s / a[i * n + i];
        }
    }
    Some(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerMetrics {
    pub l_guide: f64,
    pub l_scale: f64,
    pub l_bind: f64,
}

/// Position offset attributed to each controller: the mass-weighted mean
/// `dx` of the Gaussians it influences. `None` for controllers that
/// influence no Gaussian.
pub fn controller_offsets(field: &ControllerField, deltas: &[AttrDelta]) -> Vec<Option<Vec3>> {
    let mut acc = vec![(geom::ZERO, 0.0); field.controllers.len()];
    for (i, d) in deltas.iter().enumerate() {
        let g = field.gamma(i);
        for (&j, &m) in field.neighbors(i).iter().zip(field.masses(i)) {
            let w = g * m;
            let e = &mut acc[j as usize];
            e.0 = geom::add(e.0, geom::scale(d.dx(), w));
            e.1 += w;
        }
    }
    acc.into_iter()
        .map(|(s, w)| (w > 0.0).then(|| geom::scale(s, 1.0 / w)))
        .collect()
}

/// Guide coherence, scale hinge and surface binding penalties.
pub fn regularizer_metrics(
    field: &ControllerField,
    deformed: &[Gaussian],
    deltas: &[AttrDelta],
    avatar: &TemplateAvatar,
    posed: &PosedMesh,
    s_thresh: f64,
) -> Result<RegularizerMetrics, DeformError> {
    if deltas.len() != field.gaussian_count() || deformed.len() != deltas.len() {
        return Err(DeformError::InvalidArgument("deformed set does not match the field".into()));
    }
    let offsets = controller_offsets(field, deltas);
    let l_guide = field
        .guide_pairs
        .iter()
        .filter_map(|&(j, k)| match (offsets[j as usize], offsets[k as usize]) {
            (Some(a), Some(b)) => {
                let d = geom::sub(a, b);
                Some(geom::dot(d, d))
            }
            _ => None,
        })
        .sum();
    let l_scale = deformed.iter().map(|g| (geom::norm(g.scale) - s_thresh).max(0.0)).sum();
    let faces = avatar.faces();
    let v = &posed.vertices;
    let per = par::map_slice(deformed, |g| {
        faces
            .iter()
            .map(|f| {
                let c = geom::closest_point_on_triangle(g.position, v[f[0] as usize], v[f[1] as usize], v[f[2] as usize]);
                let d = geom::sub(g.position, c);
                geom::dot(d, d)
            })
            .fold(f64::INFINITY, f64::min)
    });
    Ok(RegularizerMetrics {
        l_guide,
        l_scale,
        l_bind: per.iter().sum(),
    })
}

/// Gaussian block: `u32 G`, then per Gaussian 14 f32 attributes
/// `x3 r4 s3 o1 c3`, `u32 face`, `3 f32 barycentric`, `f32 normal offset`.
pub fn encode_gaussian_block(gaussians: &[Gaussian], bindings: &[GaussianBinding], w: &mut Writer) {
    w.u32(gaussians.len() as u32);
    for (g, b) in gaussians.iter().zip(bindings) {
        w.f32s(&g.position);
        w.f32s(&g.rotation.to_array());
        w.f32s(&g.scale);
        w.f32(g.opacity);
        w.f32s(&g.color);
        w.u32(b.face_index);
        w.f32s(&b.barycentric);
        w.f32(b.normal_offset);
    }
}

pub fn decode_gaussian_block(
    r: &mut Reader,
    face_count: usize,
) -> Result<(GaussianSet, Vec<GaussianBinding>), DeformError> {
    let g = r.u32()? as usize;
    if r.remaining() < g * 4 * 19 {
        return Err(Truncated {
            offset: r.position(),
            needed: g * 4 * 19,
            available: r.remaining(),
        }
        .into());
    }
    let mut gaussians = Vec::with_capacity(g);
    let mut bindings = Vec::with_capacity(g);
    for _ in 0..g {
        let a = r.f32s(14)?;
        let rotation = UnitQuat::new(a[3], a[4], a[5], a[6]).map_err(|e| DeformError::InvalidArgument(e.to_string()))?;
        let gs = Gaussian {
            position: [a[0], a[1], a[2]],
            rotation,
            scale: [a[7], a[8], a[9]],
            opacity: a[10],
            color: [a[11], a[12], a[13]],
        };
        gs.validate()?;
        let face_index = r.u32()?;
        let bary = r.f32s(3)?;
        let sum: f64 = bary.iter().sum();
        let b = GaussianBinding {
            face_index,
            barycentric: [bary[0] / sum, bary[1] / sum, bary[2] / sum],
            normal_offset: r.f32()?,
        };
        b.validate(face_count)?;
        gaussians.push(gs);
        bindings.push(b);
    }
    Ok((gaussians, bindings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skinning::{make_test_avatar, RigSpec};

    fn grid() -> TemplateAvatar {
        make_test_avatar(&RigSpec::grid(6, 6), 0).unwrap()
    }

    #[test]
    fn virtual_mass_examples() {
        let a = grid();
        let p = SurfacePoint::Vertex(7);
        assert!((virtual_mass(&a, &p, &p, 1e-4).unwrap() - 1e4).abs() < 1e-6);
        // vertices 0 and 1 are one unit apart; give them identical weights
        let v: Vec<Vec3> = (0..4).map(|i| [(i % 2) as f64, (i / 2) as f64, 0.0]).collect();
        let same = TemplateAvatar::new(v.clone(), vec![[0, 1, 3], [0, 3, 2]], vec![[0.0; 3]], vec![-1], vec![1.0; 4]).unwrap();
        let m = virtual_mass(&same, &SurfacePoint::Vertex(0), &SurfacePoint::Vertex(1), 1e-4).unwrap();
        assert!((m - 1.0 / (1.0 + 1e-4)).abs() < 1e-15);
        // disjoint joint support
        let split = TemplateAvatar::new(
            v,
            vec![[0, 1, 3], [0, 3, 2]],
            vec![[0.0; 3], [1.0, 0.0, 0.0]],
            vec![-1, 0],
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        assert_eq!(virtual_mass(&split, &SurfacePoint::Vertex(0), &SurfacePoint::Vertex(1), 1e-4).unwrap(), 0.0);
        assert!(virtual_mass(&split, &SurfacePoint::Vertex(0), &SurfacePoint::Vertex(1), 0.0).is_err());
    }

    /// Field with explicit neighbors and masses over `n` controllers.
    fn manual_field(n: usize, b: usize, potentials: Vec<Vec<f64>>, neighbors: Vec<u32>, masses: Vec<f64>, k: usize) -> ControllerField {
        let controllers = (0..n)
            .map(|j| Controller {
                position: [j as f64, 0.0, 0.0],
                weights: vec![1.0],
                potential: AffineMap::constant(&potentials[j]),
            })
            .collect();
        let g = neighbors.len() / k;
        ControllerField::from_parts(controllers, b, k, 1e-4, neighbors, masses, vec![0.0; g * b * ATTR_DIM], true).unwrap()
    }

    #[test]
    fn dragging_force_examples() {
        let rest = MotionParams::rest(0, 0);
        let zero = manual_field(3, 4, vec![vec![0.0; 4]; 3], vec![0, 1, 2], vec![1.0, 2.0, 3.0], 3);
        assert_eq!(zero.dragging_force(&rest, 0).unwrap(), vec![0.0; 4]);

        let same = manual_field(3, 2, vec![vec![0.7, -1.5]; 3], vec![0, 1, 2], vec![0.3, 5.0, 1.1], 3);
        let f = same.dragging_force(&rest, 0).unwrap();
        assert!((f[0] - 0.7).abs() < 1e-15 && (f[1] + 1.5).abs() < 1e-15);

        let mut u1 = vec![0.0; 4];
        u1[0] = 3.0;
        let mut u2 = vec![0.0; 4];
        u2[1] = 3.0;
        let two = manual_field(2, 4, vec![u1, u2], vec![0, 1], vec![2.0, 1.0], 2);
        let f = two.dragging_force(&rest, 0).unwrap();
        let expect = [2.0, 1.0, 0.0, 0.0];
        for k in 0..4 {
            assert!((f[k] - expect[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn field_rejects_nonstandard_count_and_bad_masses() {
        let c = Controller { position: [0.0; 3], weights: vec![1.0], potential: AffineMap::zeros(2) };
        let r = ControllerField::from_parts(vec![c.clone(); 3], 2, 1, 1e-4, vec![0], vec![1.0], vec![0.0; 28], false);
        assert!(matches!(r, Err(DeformError::InvalidField(_))));
        let r = ControllerField::from_parts(vec![c; 3], 2, 1, 1e-4, vec![0], vec![0.0], vec![0.0; 28], true);
        assert!(r.is_err());
    }

    #[test]
    fn projection_examples() {
        let mut f = manual_field(1, 2, vec![vec![0.0; 2]], vec![0], vec![1.0], 1);
        let b0: Vec<f64> = (0..ATTR_DIM).map(|k| k as f64).collect();
        let b1: Vec<f64> = (0..ATTR_DIM).map(|k| 10.0 - k as f64 * 0.5).collect();
        f.set_bases([b0.clone(), b1.clone()].concat()).unwrap();
        assert_eq!(f.project_bases(&[0.0, 0.0], 0).unwrap(), AttrDelta::ZERO);
        assert_eq!(f.project_bases(&[1.0, 0.0], 0).unwrap().0.to_vec(), b0);
        assert_eq!(f.project_bases(&[0.0, 1.0], 0).unwrap().0.to_vec(), b1);
        let avg = f.project_bases(&[0.5, 0.5], 0).unwrap();
        for k in 0..ATTR_DIM {
            assert!((avg.0[k] - 0.5 * (b0[k] + b1[k])).abs() < 1e-15);
        }
        assert!(matches!(f.project_bases(&[1.0], 0), Err(DeformError::BasisMismatch { expected: 2, got: 1 })));
    }

    #[test]
    fn increment_quat_branches() {
        assert_eq!(increment_quat([0.0; 4]), UnitQuat::IDENTITY);
        let q = increment_quat([0.0, 0.6, 0.0, 0.0]);
        assert!((q.w - 0.8).abs() < 1e-15 && (q.x - 0.6).abs() < 1e-15);
        let q = increment_quat([1.0, 1.0, 1.0, 1.0]);
        assert!((q.w - 0.5).abs() < 1e-15);
    }

    struct Scene {
        avatar: TemplateAvatar,
        baseline: GaussianSet,
        bindings: Vec<GaussianBinding>,
        field: ControllerField,
    }

    fn scene(gaussians: usize, controllers: usize) -> Scene {
        let avatar = make_test_avatar(&RigSpec::capsule(8), 0).unwrap();
        let (baseline, bindings) = sample_gaussians(&avatar, gaussians, 1);
        let cfg = FieldConfig { controllers, allow_nonstandard: controllers != CONTROLLER_COUNT, ..Default::default() };
        let field = ControllerField::build(&avatar, &bindings, &cfg, 2).unwrap();
        Scene { avatar, baseline, bindings, field }
    }

    #[test]
    fn built_field_invariants() {
        let s = scene(300, CONTROLLER_COUNT);
        assert_eq!(s.field.controllers().len(), 500);
        for i in 0..s.field.gaussian_count() {
            let sum: f64 = s.field.masses(i).iter().sum();
            assert!((s.field.gamma(i) * sum - 1.0).abs() < 1e-9);
            assert!(s.field.masses(i).iter().all(|m| *m > 0.0));
        }
        assert_eq!(s.field.guide_pairs().len(), 500 * GUIDE_NEIGHBORS);
        // precomputed masses agree with the pairwise definition
        for i in [0usize, 17, 299] {
            let x = s.bindings[i].surface_point();
            let j = s.field.neighbors(i)[0] as usize;
            let y_pos = s.field.controllers()[j].position;
            // recover the controller anchor by sampling with the same seed
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let anchors = sample_surface(&s.avatar, 500, &mut rng);
            assert_eq!(s.avatar.point_position(&anchors[j]), y_pos);
            let m = virtual_mass(&s.avatar, &x, &anchors[j], DEFAULT_EPS).unwrap();
            assert!((m - s.field.masses(i)[0]).abs() <= 1e-9 * m.max(1.0));
        }
        assert!(ControllerField::build(&s.avatar, &s.bindings, &FieldConfig { controllers: 20, ..Default::default() }, 0).is_err());
    }

    #[test]
    fn deform_rest_is_baseline() {
        let mut s = scene(200, 40);
        s.field.randomize_bases(3, &[0.01; ATTR_DIM]);
        let posed = PosedMesh::rest(&s.avatar);
        let out = deform(&s.field, &s.baseline, &s.avatar, &s.bindings, &posed, &MotionParams::rest(0, 0)).unwrap();
        for (a, b) in out.gaussians.iter().zip(&s.baseline) {
            assert_eq!(a, b);
        }
        assert_eq!(out.saturation, Saturation::default());
    }

    #[test]
    fn deform_gaussians_matches_deform() {
        let mut s = scene(300, 40);
        s.field.randomize_potentials(4, 0.5);
        s.field.randomize_bases(5, &[0.2; ATTR_DIM]);
        let p = MotionParams::from_values(0, 0, std::array::from_fn(|i| ((i * 7) % 11) as f64 * 0.05 - 0.25)).unwrap();
        let posed = PosedMesh::rest(&s.avatar);
        let full = deform(&s.field, &s.baseline, &s.avatar, &s.bindings, &posed, &p).unwrap();
        let mut out = Vec::new();
        let sat = deform_gaussians(&s.field, &s.baseline, &s.avatar, &s.bindings, &posed, &p, &mut out).unwrap();
        assert_eq!(out, full.gaussians);
        assert_eq!(sat, full.saturation);
        assert!(sat.opacity + sat.color > 0);
    }

    #[test]
    fn deform_root_translation_is_rigid() {
        let s = scene(150, 40);
        let mut v = [0.0; PARAM_LEN];
        v[72] = 0.25;
        v[74] = -0.1;
        let p = MotionParams::from_values(0, 0, v).unwrap();
        let posed = PosedMesh::new(
            &s.avatar,
            crate::skinning::lbs_pose(&s.avatar, &crate::skinning::MeshDeformation::zeros(s.avatar.vertex_count()), p.body_pose()).unwrap(),
        );
        let out = deform(&s.field, &s.baseline, &s.avatar, &s.bindings, &posed, &p).unwrap();
        for (a, b) in out.gaussians.iter().zip(&s.baseline) {
            assert!((a.position[0] - b.position[0] - 0.25).abs() < 1e-12);
            assert!((a.position[1] - b.position[1]).abs() < 1e-12);
            assert!((a.position[2] - b.position[2] + 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn deform_planted_force_shifts_by_basis() {
        let mut s = scene(50, 40);
        let b = s.field.basis_count();
        // every controller emits e_2, so every force is exactly e_2
        let mut e = vec![0.0; b];
        e[2] = 1.0;
        for c in s.field.controllers_mut() {
            c.potential = AffineMap::constant(&e);
        }
        let mut basis = vec![0.0; s.field.basis_table().len()];
        let target = 7;
        let planted = [0.015625, -0.03125, 0.0078125, 0.0, 0.0, 0.0, 0.0, 0.0009765625, 0.001953125, -0.0009765625, -0.125, 0.0625, -0.0625, 0.015625];
        let off = target * b * ATTR_DIM + 2 * ATTR_DIM;
        basis[off..off + ATTR_DIM].copy_from_slice(&planted);
        s.field.set_bases(basis).unwrap();
        let posed = PosedMesh::rest(&s.avatar);
        let out = deform(&s.field, &s.baseline, &s.avatar, &s.bindings, &posed, &MotionParams::rest(0, 0)).unwrap();
        for (i, (a, g)) in out.gaussians.iter().zip(&s.baseline).enumerate() {
            if i != target {
                assert_eq!(a, g);
                continue;
            }
            for k in 0..3 {
                assert!((a.position[k] - g.position[k] - planted[k]).abs() < 1e-15);
                assert!((a.scale[k] - g.scale[k] - planted[7 + k]).abs() < 1e-15);
                assert!((a.color[k] - (g.color[k] + planted[11 + k]).clamp(0.0, 1.0)).abs() < 1e-15);
            }
            assert!((a.opacity - (g.opacity + planted[10]).clamp(0.0, 1.0)).abs() < 1e-15);
            assert_eq!(a.rotation, g.rotation);
        }
    }

    #[test]
    fn deform_is_linear_in_potentials() {
        let mut s = scene(120, 40);
        s.field.randomize_potentials(4, 0.05);
        s.field.randomize_bases(5, &[0.01; ATTR_DIM]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = MotionParams::from_values(0, 0, std::array::from_fn(|_| rng.gen_range(-0.5..0.5))).unwrap();
        let d1 = s.field.deltas(&p);
        for c in s.field.controllers_mut() {
            c.potential.coeffs_mut().iter_mut().for_each(|v| *v *= 2.0);
        }
        let d2 = s.field.deltas(&p);
        for (a, b) in d1.iter().zip(&d2) {
            for k in 0..ATTR_DIM {
                assert!((2.0 * a.0[k] - b.0[k]).abs() < 1e-9);
            }
        }
    }

    fn planted_training(field: &ControllerField, frames: usize, seed: u64) -> (Vec<f64>, Vec<(MotionParams, Vec<AttrDelta>)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planted: Vec<f64> = (0..field.basis_table().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut f2 = field.clone();
        f2.set_bases(planted.clone()).unwrap();
        let training = (0..frames)
            .map(|t| {
                let p = MotionParams::from_values(t as u32, 0, std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).unwrap();
                let d = f2.deltas(&p);
                (p, d)
            })
            .collect();
        (planted, training)
    }

    #[test]
    fn fit_recovers_planted_bases() {
        let mut s = scene(40, 30);
        s.field.randomize_potentials(9, 0.3);
        let b = s.field.basis_count();
        let (planted, training) = planted_training(&s.field, 4 * b, 10);
        let fit = fit_bases(&s.field, &training, 0.0).unwrap();
        let err = fit.bases.iter().zip(&planted).map(|(a, p)| (a - p).powi(2)).sum::<f64>().sqrt();
        let norm = planted.iter().map(|p| p * p).sum::<f64>().sqrt();
        assert!(err / norm < 1e-6, "relative error {}", err / norm);
        assert!(fit.rms < 1e-9);
    }

    #[test]
    fn fit_zero_targets_and_ridge_limit() {
        let mut s = scene(20, 30);
        s.field.randomize_potentials(9, 0.3);
        let b = s.field.basis_count();
        let (_, mut training) = planted_training(&s.field, 2 * b, 11);
        let big = fit_bases(&s.field, &training, 1e12).unwrap();
        assert!(big.bases.iter().all(|v| v.abs() < 1e-6));
        for (_, d) in &mut training {
            d.iter_mut().for_each(|x| *x = AttrDelta::ZERO);
        }
        let zero = fit_bases(&s.field, &training, 0.0).unwrap();
        assert!(zero.bases.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fit_rank_deficient_needs_ridge() {
        let mut s = scene(10, 30);
        s.field.randomize_potentials(9, 0.3);
        let (_, training) = planted_training(&s.field, 3, 12);
        assert!(matches!(fit_bases(&s.field, &training, 0.0), Err(DeformError::Singular { .. })));
        assert!(fit_bases(&s.field, &training, 1e-3).is_ok());
    }

    #[test]
    fn fit_gradient_vanishes() {
        let mut s = scene(6, 30);
        s.field.randomize_potentials(13, 0.3);
        let b = s.field.basis_count();
        let (_, mut training) = planted_training(&s.field, 3 * b, 14);
        // perturb targets so the optimum has a nonzero residual
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for (_, d) in &mut training {
            for x in d.iter_mut() {
                x.0.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
            }
        }
        let lambda = 0.05;
        let fit = fit_bases(&s.field, &training, lambda).unwrap();
        let forces: Vec<Vec<Vec<f64>>> = training
            .iter()
            .map(|(p, _)| (0..s.field.gaussian_count()).map(|i| s.field.dragging_force(p, i).unwrap()).collect())
            .collect();
        let objective = |bases: &[f64]| {
            let mut o = lambda * bases.iter().map(|v| v * v).sum::<f64>();
            for ((_, d), fs) in training.iter().zip(&forces) {
                for (i, (t, f)) in d.iter().zip(fs).enumerate() {
                    for c in 0..ATTR_DIM {
                        let pred: f64 = (0..b).map(|r| f[r] * bases[(i * b + r) * ATTR_DIM + c]).sum();
                        o += (pred - t.0[c]).powi(2);
                    }
                }
            }
            o
        };
        let h = 1e-6;
        for idx in (0..fit.bases.len()).step_by(37) {
            let mut up = fit.bases.clone();
            up[idx] += h;
            let mut dn = fit.bases.clone();
            dn[idx] -= h;
            let grad = (objective(&up) - objective(&dn)) / (2.0 * h);
            assert!(grad.abs() <= 1e-6, "gradient {grad} at {idx}");
        }
    }

    #[test]
    fn regularizer_examples() {
        let avatar = make_test_avatar(&RigSpec::grid(3, 3), 0).unwrap();
        let posed = PosedMesh::rest(&avatar);
        let base = Gaussian {
            position: [0.5, 0.5, 0.0],
            rotation: UnitQuat::IDENTITY,
            scale: [0.01; 3],
            opacity: 1.0,
            color: [0.5; 3],
        };
        let field = manual_field(2, 1, vec![vec![0.0]; 2], vec![0, 1, 0, 1], vec![1.0; 4], 2);
        let deltas = vec![AttrDelta::ZERO; 2];
        let flat = vec![base, Gaussian { position: [1.2, 1.5, 0.0], ..base }];
        let m = regularizer_metrics(&field, &flat, &deltas, &avatar, &posed, 0.1).unwrap();
        assert_eq!((m.l_guide, m.l_scale, m.l_bind), (0.0, 0.0, 0.0));

        let lifted = vec![base, Gaussian { position: [1.2, 1.5, 0.1], ..base }];
        let m = regularizer_metrics(&field, &lifted, &deltas, &avatar, &posed, 0.1).unwrap();
        assert!((m.l_bind - 0.01).abs() < 1e-9);

        let s = 0.1 + 0.05;
        let big = vec![base, Gaussian { scale: [s, 0.0 + 1e-300, 0.0 + 1e-300], ..base }];
        let m = regularizer_metrics(&field, &big, &deltas, &avatar, &posed, 0.1).unwrap();
        assert!((m.l_scale - 0.05).abs() < 1e-9);
    }

    #[test]
    fn guide_loss_hand_computed() {
        // two controllers, one gaussian each, distinct dx
        let avatar = make_test_avatar(&RigSpec::grid(3, 3), 0).unwrap();
        let posed = PosedMesh::rest(&avatar);
        let field = manual_field(2, 1, vec![vec![0.0]; 2], vec![0, 1], vec![1.0, 1.0], 1);
        let g = Gaussian { position: [0.5, 0.5, 0.0], rotation: UnitQuat::IDENTITY, scale: [0.01; 3], opacity: 1.0, color: [0.5; 3] };
        let mut d0 = AttrDelta::ZERO;
        d0.0[0] = 0.1;
        let mut d1 = AttrDelta::ZERO;
        d1.0[1] = -0.2;
        let m = regularizer_metrics(&field, &[g, g], &[d0, d1], &avatar, &posed, 1.0).unwrap();
        // pairs (0,1) and (1,0): 2 * (0.1^2 + 0.2^2)
        assert!((m.l_guide - 0.1).abs() < 1e-12);
        let m = regularizer_metrics(&field, &[g, g], &[d0, d0], &avatar, &posed, 1.0).unwrap();
        assert_eq!(m.l_guide, 0.0);
    }

    #[test]
    fn blocks_round_trip() {
        let mut s = scene(60, 500);
        s.field.randomize_potentials(1, 0.1);
        s.field.randomize_bases(2, &[0.01; ATTR_DIM]);
        let mut w = Writer::new();
        encode_gaussian_block(&s.baseline, &s.bindings, &mut w);
        s.field.encode_block(&mut w);
        let bytes = w.into_inner();
        let mut r = Reader::new(&bytes);
        let (g, b) = decode_gaussian_block(&mut r, s.avatar.faces().len()).unwrap();
        let f = ControllerField::decode_block(&mut r, s.avatar.joint_count(), g.len(), false).unwrap();
        assert_eq!(r.remaining(), 0);
        assert_eq!(b.len(), 60);
        assert_eq!(f.gaussian_count(), 60);
        for i in 0..60 {
            assert_eq!(f.neighbors(i), s.field.neighbors(i));
            assert!((g[i].position[0] - s.baseline[i].position[0]).abs() < 1e-6);
        }
        let cut = &bytes[..bytes.len() - 3];
        let mut r = Reader::new(cut);
        decode_gaussian_block(&mut r, s.avatar.faces().len()).unwrap();
        assert!(ControllerField::decode_block(&mut r, s.avatar.joint_count(), 60, false).is_err());
    }
}
