//! Rigged template mesh, linear blend skinning, surface geodesics and the
//! mesh-to-Gaussian coarse position mapping.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{Reader, Truncated, Writer};
use crate::geom::{self, Mat3, Rigid, Vec3};
use crate::par;
use crate::params::{MotionParams, UnitQuat, BODY_JOINTS, BODY_LEN, ROOT_TRANSLATION_OFFSET};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkinError {
    #[error("invalid avatar: {0}")]
    InvalidAvatar(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid rig spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Truncated(#[from] Truncated),
}

const WEIGHT_TOL: f64 = 1e-6;

/// Canonical rigged mesh in T-pose.
#[derive(Debug)]
pub struct TemplateAvatar {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    joints: Vec<Vec3>,
    parents: Vec<i32>,
    /// N x J, row-major.
    skin_weights: Vec<f64>,
    joint_order: Vec<usize>,
    graph: OnceLock<SurfaceGraph>,
}

impl Clone for TemplateAvatar {
    fn clone(&self) -> Self {
        Self {
            vertices: self.vertices.clone(),
            faces: self.faces.clone(),
            joints: self.joints.clone(),
            parents: self.parents.clone(),
            skin_weights: self.skin_weights.clone(),
            joint_order: self.joint_order.clone(),
            graph: OnceLock::new(),
        }
    }
}

impl PartialEq for TemplateAvatar {
    fn eq(&self, o: &Self) -> bool {
        self.vertices == o.vertices
            && self.faces == o.faces
            && self.joints == o.joints
            && self.parents == o.parents
            && self.skin_weights == o.skin_weights
    }
}

impl TemplateAvatar {
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[u32; 3]>,
        joints: Vec<Vec3>,
        parents: Vec<i32>,
        skin_weights: Vec<f64>,
    ) -> Result<Self, SkinError> {
        let (n, j) = (vertices.len(), joints.len());
        let bad = |m: String| Err(SkinError::InvalidAvatar(m));
        if n == 0 || faces.is_empty() {
            return bad("empty mesh".into());
        }
        if j == 0 || j > BODY_JOINTS {
            return bad(format!("joint count {j} outside 1..={BODY_JOINTS}"));
        }
        if parents.len() != j {
            return bad(format!("{} parents for {j} joints", parents.len()));
        }
        if skin_weights.len() != n * j {
            return bad(format!(
                "weight matrix has {} entries, expected {n} x {j}",
                skin_weights.len()
            ));
        }
        if vertices
            .iter()
            .chain(joints.iter())
            .flatten()
            .any(|v| !v.is_finite())
        {
            return bad("non-finite coordinate".into());
        }
        for (v, row) in skin_weights.chunks_exact(j).enumerate() {
            if row.iter().any(|w| !(*w >= 0.0)) {
                return bad(format!("vertex {v} has a negative or NaN weight"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > WEIGHT_TOL {
                return bad(format!("vertex {v} weights sum to {s}"));
            }
        }
        if let Some(f) = faces.iter().position(|f| f.iter().any(|&i| i as usize >= n)) {
            return bad(format!("face {f} references a missing vertex"));
        }
        let joint_order = joint_order(&parents)?;
        if components(n, &faces) != 1 {
            return bad("mesh is not edge-connected".into());
        }
        Ok(Self {
            vertices,
            faces,
            joints,
            parents,
            skin_weights,
            joint_order,
            graph: OnceLock::new(),
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn joints(&self) -> &[Vec3] {
        &self.joints
    }

    pub fn parents(&self) -> &[i32] {
        &self.parents
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn weights(&self, v: usize) -> &[f64] {
        let j = self.joints.len();
        &self.skin_weights[v * j..(v + 1) * j]
    }

    /// Barycentric blend of the face's vertex weights.
    pub fn weights_at(&self, p: &SurfacePoint) -> Vec<f64> {
        match *p {
            SurfacePoint::Vertex(v) => self.weights(v as usize).to_vec(),
            SurfacePoint::Face { face, bary } => {
                let f = self.faces[face as usize];
                let mut out = vec![0.0; self.joint_count()];
                for k in 0..3 {
                    for (o, w) in out.iter_mut().zip(self.weights(f[k] as usize)) {
                        *o += bary[k] * w;
                    }
                }
                out
            }
        }
    }

    pub fn point_position(&self, p: &SurfacePoint) -> Vec3 {
        p.position(&self.vertices, &self.faces)
    }

    /// Edge graph, built on first use.
    pub fn surface_graph(&self) -> &SurfaceGraph {
        self.graph
            .get_or_init(|| SurfaceGraph::new(&self.vertices, &self.faces))
    }

    pub fn geodesic_distance(&self, a: &SurfacePoint, b: &SurfacePoint) -> f64 {
        self.surface_graph().distance(a, b)
    }

    pub fn total_area(&self) -> f64 {
        self.faces.iter().map(|f| face_area(&self.vertices, f)).sum()
    }

    /// Mesh block: `u32 N, u32 J, u32 M`, f32 vertices, f32 joints, i32
    /// parents, f32 weights (row-major), u32 face triples.
    pub fn encode_block(&self, w: &mut Writer) {
        w.u32(self.vertices.len() as u32);
        w.u32(self.joints.len() as u32);
        w.u32(self.faces.len() as u32);
        self.vertices.iter().for_each(|v| w.f32s(v));
        self.joints.iter().for_each(|v| w.f32s(v));
        self.parents.iter().for_each(|p| w.i32(*p));
        w.f32s(&self.skin_weights);
        self.faces.iter().flatten().for_each(|i| w.u32(*i));
    }

    pub fn decode_block(r: &mut Reader) -> Result<Self, SkinError> {
        let n = r.u32()? as usize;
        let j = r.u32()? as usize;
        let m = r.u32()? as usize;
        let need = 4 * (3 * n + 3 * j + j + n * j + 3 * m);
        if r.remaining() < need {
            return Err(Truncated {
                offset: r.position(),
                needed: need,
                available: r.remaining(),
            }
            .into());
        }
        let triple = |r: &mut Reader| -> Result<Vec3, Truncated> { Ok([r.f32()?, r.f32()?, r.f32()?]) };
        let vertices = (0..n).map(|_| triple(r)).collect::<Result<Vec<_>, _>>()?;
        let joints = (0..j).map(|_| triple(r)).collect::<Result<Vec<_>, _>>()?;
        let parents = (0..j).map(|_| r.i32()).collect::<Result<Vec<_>, _>>()?;
        let mut weights = r.f32s(n * j)?;
        // f32 storage perturbs row sums; restore the partition of unity
        for row in weights.chunks_exact_mut(j.max(1)) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() < 1e-4 && s > 0.0 {
                row.iter_mut().for_each(|w| *w /= s);
            }
        }
        let faces = (0..m)
            .map(|_| Ok([r.u32()?, r.u32()?, r.u32()?]))
            .collect::<Result<Vec<_>, Truncated>>()?;
        Self::new(vertices, faces, joints, parents, weights)
    }
}

fn joint_order(parents: &[i32]) -> Result<Vec<usize>, SkinError> {
    let j = parents.len();
    if parents[0] != -1 {
        return Err(SkinError::InvalidAvatar("joint 0 must be the root".into()));
    }
    let mut children = vec![Vec::new(); j];
    for (c, &p) in parents.iter().enumerate().skip(1) {
        if p < 0 || p as usize >= j || p as usize == c {
            return Err(SkinError::InvalidAvatar(format!(
                "joint {c} has invalid parent {p}"
            )));
        }
        children[p as usize].push(c);
    }
    let mut order = vec![0];
    let mut i = 0;
    while i < order.len() {
        order.extend(children[order[i]].iter().copied());
        i += 1;
    }
    if order.len() != j {
        return Err(SkinError::InvalidAvatar(
            "parent table has a cycle or is not rooted at joint 0".into(),
        ));
    }
    Ok(order)
}

fn components(n: usize, faces: &[[u32; 3]]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for f in faces {
        for k in 0..3 {
            let (a, b) = (find(&mut parent, f[k] as usize), find(&mut parent, f[(k + 1) % 3] as usize));
            if a != b {
                parent[a] = b;
            }
        }
    }
    (0..n).filter(|&x| find(&mut parent, x) == x).count()
}

fn face_area(v: &[Vec3], f: &[u32; 3]) -> f64 {
    let (a, b, c) = (v[f[0] as usize], v[f[1] as usize], v[f[2] as usize]);
    0.5 * geom::norm(geom::cross(geom::sub(b, a), geom::sub(c, a)))
}

/// A point on the mesh surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SurfacePoint {
    Vertex(u32),
    Face { face: u32, bary: [f64; 3] },
}

impl SurfacePoint {
    pub fn position(&self, vertices: &[Vec3], faces: &[[u32; 3]]) -> Vec3 {
        match *self {
            SurfacePoint::Vertex(v) => vertices[v as usize],
            SurfacePoint::Face { face, bary } => {
                let f = faces[face as usize];
                (0..3).fold(geom::ZERO, |acc, k| {
                    geom::add(acc, geom::scale(vertices[f[k] as usize], bary[k]))
                })
            }
        }
    }

    fn sort_key(&self) -> (u8, u32, [u64; 3]) {
        match *self {
            SurfacePoint::Vertex(v) => (0, v, [0; 3]),
            SurfacePoint::Face { face, bary } => (1, face, bary.map(f64::to_bits)),
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, u32);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then_with(|| o.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Weighted edge graph of a triangle mesh. Geodesics are approximated by
/// shortest paths along mesh edges.
#[derive(Debug, Clone)]
pub struct SurfaceGraph {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    /// CSR adjacency.
    offsets: Vec<usize>,
    targets: Vec<u32>,
    lengths: Vec<f64>,
}

impl SurfaceGraph {
    pub fn new(vertices: &[Vec3], faces: &[[u32; 3]]) -> Self {
        let n = vertices.len();
        let mut edges: Vec<(u32, u32)> = faces
            .iter()
            .flat_map(|f| (0..3).flat_map(move |k| [(f[k], f[(k + 1) % 3]), (f[(k + 1) % 3], f[k])]))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        let mut offsets = vec![0usize; n + 1];
        for &(a, _) in &edges {
            offsets[a as usize + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let targets: Vec<u32> = edges.iter().map(|e| e.1).collect();
        let lengths = edges
            .iter()
            .map(|&(a, b)| geom::dist(vertices[a as usize], vertices[b as usize]))
            .collect();
        Self {
            vertices: vertices.to_vec(),
            faces: faces.to_vec(),
            offsets,
            targets,
            lengths,
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    fn seeds(&self, p: &SurfacePoint) -> Vec<(u32, f64)> {
        match *p {
            SurfacePoint::Vertex(v) => vec![(v, 0.0)],
            SurfacePoint::Face { face, .. } => {
                let pos = p.position(&self.vertices, &self.faces);
                self.faces[face as usize]
                    .iter()
                    .map(|&v| (v, geom::dist(pos, self.vertices[v as usize])))
                    .collect()
            }
        }
    }

    /// Shortest edge-path distance from `src` to every vertex; unreachable
    /// vertices get `f64::INFINITY`.
    pub fn distance_field(&self, src: &SurfacePoint) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.vertex_count()];
        let mut heap = BinaryHeap::new();
        for (v, d) in self.seeds(src) {
            if d < dist[v as usize] {
                dist[v as usize] = d;
                heap.push(HeapItem(d, v));
            }
        }
        while let Some(HeapItem(d, v)) = heap.pop() {
            if d > dist[v as usize] {
                continue;
            }
            let (lo, hi) = (self.offsets[v as usize], self.offsets[v as usize + 1]);
            for e in lo..hi {
                let u = self.targets[e];
                let nd = d + self.lengths[e];
                if nd < dist[u as usize] {
                    dist[u as usize] = nd;
                    heap.push(HeapItem(nd, u));
                }
            }
        }
        dist
    }

    /// Distance to `dst` given a field computed from `src`.
    pub fn distance_from_field(&self, field: &[f64], src: &SurfacePoint, dst: &SurfacePoint) -> f64 {
        let mut best = self
            .seeds(dst)
            .into_iter()
            .map(|(v, d)| field[v as usize] + d)
            .fold(f64::INFINITY, f64::min);
        if let (SurfacePoint::Face { face: fa, .. }, SurfacePoint::Face { face: fb, .. }) = (src, dst) {
            if fa == fb {
                let d = geom::dist(
                    src.position(&self.vertices, &self.faces),
                    dst.position(&self.vertices, &self.faces),
                );
                best = best.min(d);
            }
        }
        best
    }

    /// Symmetric surface distance; `f64::INFINITY` across disconnected parts.
    pub fn distance(&self, a: &SurfacePoint, b: &SurfacePoint) -> f64 {
        if a == b {
            return 0.0;
        }
        // evaluate in a canonical order so d(a, b) and d(b, a) are bit-identical
        let (src, dst) = if a.sort_key() <= b.sort_key() { (a, b) } else { (b, a) };
        let field = self.distance_field(src);
        self.distance_from_field(&field, src, dst)
    }
}

/// Per-vertex corrective offsets in canonical space.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshDeformation {
    pub vertex_offsets: Vec<Vec3>,
}

pub const DEFAULT_OFFSET_BOUND: f64 = 0.2;

impl MeshDeformation {
    pub fn zeros(n: usize) -> Self {
        Self {
            vertex_offsets: vec![geom::ZERO; n],
        }
    }

    pub fn validate(&self, n: usize, bound: f64) -> Result<(), SkinError> {
        if self.vertex_offsets.len() != n {
            return Err(SkinError::Shape(format!(
                "{} offsets for {n} vertices",
                self.vertex_offsets.len()
            )));
        }
        match self
            .vertex_offsets
            .iter()
            .position(|o| !o.iter().all(|x| x.is_finite()) || geom::norm(*o) > bound)
        {
            Some(v) => Err(SkinError::Shape(format!(
                "offset of vertex {v} is non-finite or exceeds {bound} m"
            ))),
            None => Ok(()),
        }
    }
}

/// Source of non-rigid vertex offsets for a frame.
pub trait DeformationProvider: Send + Sync {
    fn offsets(&self, avatar: &TemplateAvatar, params: &MotionParams) -> MeshDeformation;
}

pub struct ZeroOffsets;

impl DeformationProvider for ZeroOffsets {
    fn offsets(&self, avatar: &TemplateAvatar, _: &MotionParams) -> MeshDeformation {
        MeshDeformation::zeros(avatar.vertex_count())
    }
}

/// Procedural radial ripple driven by the capture clock.
#[derive(Debug, Clone, Copy)]
pub struct ClothWobble {
    pub amplitude: f64,
    pub temporal_hz: f64,
    pub spatial_freq: f64,
}

impl Default for ClothWobble {
    fn default() -> Self {
        Self {
            amplitude: 0.01,
            temporal_hz: 1.5,
            spatial_freq: 12.0,
        }
    }
}

impl DeformationProvider for ClothWobble {
    fn offsets(&self, avatar: &TemplateAvatar, params: &MotionParams) -> MeshDeformation {
        let t = params.capture_timestamp_us as f64 * 1e-6;
        let amp = self.amplitude.min(DEFAULT_OFFSET_BOUND);
        let vertex_offsets = avatar
            .vertices()
            .iter()
            .map(|v| {
                let radial = geom::normalize([v[0], 0.0, v[2]]).unwrap_or(geom::ZERO);
                let phase = std::f64::consts::TAU * self.temporal_hz * t + self.spatial_freq * v[1];
                geom::scale(radial, amp * phase.sin())
            })
            .collect();
        MeshDeformation { vertex_offsets }
    }
}

/// World transform of every joint's skinning matrix for the given pose.
pub fn joint_transforms(avatar: &TemplateAvatar, body_pose: &[f64]) -> Result<Vec<Rigid>, SkinError> {
    if body_pose.len() != BODY_LEN {
        return Err(SkinError::Shape(format!(
            "body pose has {} entries, expected {BODY_LEN}",
            body_pose.len()
        )));
    }
    if body_pose.iter().any(|v| !v.is_finite()) {
        return Err(SkinError::Shape("non-finite body pose".into()));
    }
    let j = avatar.joint_count();
    let t = &body_pose[ROOT_TRANSLATION_OFFSET..ROOT_TRANSLATION_OFFSET + 3];
    let mut world = vec![Rigid::IDENTITY; j];
    for &k in &avatar.joint_order {
        let aa = [body_pose[3 * k], body_pose[3 * k + 1], body_pose[3 * k + 2]];
        let rot: Mat3 = if aa == [0.0; 3] {
            geom::IDENTITY3
        } else {
            UnitQuat::from_axis_angle(aa).to_matrix()
        };
        world[k] = match avatar.parents[k] {
            -1 => Rigid {
                rot,
                trans: geom::add(avatar.joints[k], [t[0], t[1], t[2]]),
            },
            p => {
                let local = Rigid {
                    rot,
                    trans: geom::sub(avatar.joints[k], avatar.joints[p as usize]),
                };
                world[p as usize].then_apply(&local)
            }
        };
    }
    Ok(world
        .iter()
        .zip(&avatar.joints)
        .map(|(g, rest)| Rigid {
            rot: g.rot,
            trans: geom::sub(g.trans, geom::mat_vec(&g.rot, *rest)),
        })
        .collect())
}

/// Poses `template + offsets` with linear blend skinning.
pub fn lbs_pose(
    avatar: &TemplateAvatar,
    offsets: &MeshDeformation,
    body_pose: &[f64],
) -> Result<Vec<Vec3>, SkinError> {
    if offsets.vertex_offsets.len() != avatar.vertex_count() {
        return Err(SkinError::Shape(format!(
            "{} offsets for {} vertices",
            offsets.vertex_offsets.len(),
            avatar.vertex_count()
        )));
    }
    let transforms = joint_transforms(avatar, body_pose)?;
    Ok(par::map_range(avatar.vertex_count(), |v| {
        let x = geom::add(avatar.vertices[v], offsets.vertex_offsets[v]);
        let mut rot = [[0.0; 3]; 3];
        let mut trans = geom::ZERO;
        for (w, tf) in avatar.weights(v).iter().zip(&transforms) {
            if *w == 0.0 {
                continue;
            }
            for r in 0..3 {
                for c in 0..3 {
                    rot[r][c] += w * tf.rot[r][c];
                }
                trans[r] += w * tf.trans[r];
            }
        }
        geom::add(geom::mat_vec(&rot, x), trans)
    }))
}

/// Area-weighted vertex normals; isolated or degenerate vertices get +Z.
pub fn vertex_normals(vertices: &[Vec3], faces: &[[u32; 3]]) -> Vec<Vec3> {
    let mut acc = vec![geom::ZERO; vertices.len()];
    for f in faces {
        let (a, b, c) = (vertices[f[0] as usize], vertices[f[1] as usize], vertices[f[2] as usize]);
        let n = geom::cross(geom::sub(b, a), geom::sub(c, a));
        for &i in f {
            acc[i as usize] = geom::add(acc[i as usize], n);
        }
    }
    acc.into_iter()
        .map(|n| geom::normalize(n).unwrap_or([0.0, 0.0, 1.0]))
        .collect()
}

/// Posed vertex positions with their area-weighted normals.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedMesh {
    pub vertices: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

impl PosedMesh {
    pub fn new(avatar: &TemplateAvatar, vertices: Vec<Vec3>) -> Self {
        let normals = vertex_normals(&vertices, avatar.faces());
        Self { vertices, normals }
    }

    pub fn rest(avatar: &TemplateAvatar) -> Self {
        Self::new(avatar, avatar.vertices().to_vec())
    }
}

/// Where a Gaussian is attached on the template.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBinding {
    pub face_index: u32,
    pub barycentric: [f64; 3],
    pub normal_offset: f64,
}

impl GaussianBinding {
    pub fn validate(&self, face_count: usize) -> Result<(), SkinError> {
        let b = self.barycentric;
        if self.face_index as usize >= face_count {
            return Err(SkinError::InvalidAvatar(format!(
                "binding face {} out of range",
                self.face_index
            )));
        }
        if b.iter().any(|x| !(*x >= -1e-9)) || (b.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(SkinError::InvalidAvatar(format!(
                "barycentric {b:?} is not a convex combination"
            )));
        }
        if !self.normal_offset.is_finite() {
            return Err(SkinError::InvalidAvatar("non-finite normal offset".into()));
        }
        Ok(())
    }

    pub fn surface_point(&self) -> SurfacePoint {
        SurfacePoint::Face {
            face: self.face_index,
            bary: self.barycentric,
        }
    }
}

/// Coarse Gaussian position on a posed mesh.
pub fn coarse_position(
    faces: &[[u32; 3]],
    b: &GaussianBinding,
    posed_vertices: &[Vec3],
    posed_normals: &[Vec3],
) -> Vec3 {
    let f = faces[b.face_index as usize];
    let mut p = geom::ZERO;
    let mut n = geom::ZERO;
    for k in 0..3 {
        p = geom::add(p, geom::scale(posed_vertices[f[k] as usize], b.barycentric[k]));
        n = geom::add(n, geom::scale(posed_normals[f[k] as usize], b.barycentric[k]));
    }
    if b.normal_offset == 0.0 {
        return p;
    }
    let n = geom::normalize(n).unwrap_or([0.0, 0.0, 1.0]);
    geom::add(p, geom::scale(n, b.normal_offset))
}

pub fn coarse_positions(
    avatar: &TemplateAvatar,
    bindings: &[GaussianBinding],
    posed_vertices: &[Vec3],
    posed_normals: &[Vec3],
) -> Result<Vec<Vec3>, SkinError> {
    if posed_vertices.len() != avatar.vertex_count() || posed_normals.len() != avatar.vertex_count() {
        return Err(SkinError::Shape("posed mesh does not match the template".into()));
    }
    for b in bindings {
        b.validate(avatar.faces.len())?;
    }
    Ok(par::map_slice(bindings, |b| {
        coarse_position(&avatar.faces, b, posed_vertices, posed_normals)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshMetrics {
    pub vert_l1: f64,
    pub normal_l1: f64,
}

/// Mean per-vertex L1 distance of positions and of normals.
pub fn mesh_metrics(
    pred_vertices: &[Vec3],
    gt_vertices: &[Vec3],
    pred_normals: &[Vec3],
    gt_normals: &[Vec3],
) -> Result<MeshMetrics, SkinError> {
    let n = pred_vertices.len();
    if gt_vertices.len() != n || pred_normals.len() != n || gt_normals.len() != n || n == 0 {
        return Err(SkinError::Shape("vertex counts differ or are zero".into()));
    }
    let l1 = |a: &[Vec3], b: &[Vec3]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (0..3).map(|k| (x[k] - y[k]).abs()).sum::<f64>())
            .sum::<f64>()
            / n as f64
    };
    Ok(MeshMetrics {
        vert_l1: l1(pred_vertices, gt_vertices),
        normal_l1: l1(pred_normals, gt_normals),
    })
}

/// Procedural rig description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RigSpec {
    /// Closed capsule along +Y with a 24-joint spine chain.
    Capsule {
        segments: u32,
        rings: u32,
        cap_rings: u32,
        radius: f64,
        height: f64,
        #[serde(default)]
        jitter: f64,
    },
    /// Flat `nx` x `ny` vertex grid in the XY plane, chain along +X.
    Grid { nx: u32, ny: u32, spacing: f64 },
    /// Two-bone strip along +X: shoulder, elbow, wrist.
    Arm {
        bone_length: f64,
        width: f64,
        segments_per_bone: u32,
    },
}

impl RigSpec {
    pub fn capsule(segments: u32) -> Self {
        RigSpec::Capsule {
            segments,
            rings: 2 * segments,
            cap_rings: (segments / 2).max(2),
            radius: 0.18,
            height: 1.7,
            jitter: 0.0,
        }
    }

    pub fn grid(nx: u32, ny: u32) -> Self {
        RigSpec::Grid { nx, ny, spacing: 1.0 }
    }
}

pub fn make_test_avatar(spec: &RigSpec, seed: u64) -> Result<TemplateAvatar, SkinError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bad = |m: &str| Err(SkinError::InvalidSpec(m.to_string()));
    match *spec {
        RigSpec::Capsule {
            segments,
            rings,
            cap_rings,
            radius,
            height,
            jitter,
        } => {
            if segments < 3 || rings < 2 || cap_rings < 1 {
                return bad("capsule needs segments >= 3, rings >= 2, cap_rings >= 1");
            }
            if !(radius > 0.0) || !(height > 2.0 * radius) || !(0.0..0.5).contains(&jitter) {
                return bad("capsule needs radius > 0, height > 2 radius, jitter in [0, 0.5)");
            }
            let (s, r, c) = (segments as usize, rings as usize, cap_rings as usize);
            let body = height - 2.0 * radius;
            // ring profile (y, radius) bottom to top, poles excluded
            let mut profile = Vec::new();
            for k in 1..=c {
                let phi = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::FRAC_PI_2 / c as f64;
                profile.push((radius + radius * phi.sin(), radius * phi.cos()));
            }
            for k in 1..r - 1 {
                profile.push((radius + body * k as f64 / (r - 1) as f64, radius));
            }
            for k in 0..c {
                let phi = k as f64 * std::f64::consts::FRAC_PI_2 / c as f64;
                profile.push((radius + body + radius * phi.sin(), radius * phi.cos()));
            }
            let mut vertices = vec![[0.0, 0.0, 0.0]];
            for &(y, rr) in &profile {
                for k in 0..s {
                    let th = std::f64::consts::TAU * k as f64 / s as f64;
                    let rj = if jitter > 0.0 { rr * (1.0 + jitter * rng.gen_range(-1.0..1.0)) } else { rr };
                    vertices.push([rj * th.cos(), y, rj * th.sin()]);
                }
            }
            vertices.push([0.0, height, 0.0]);
            let top = (vertices.len() - 1) as u32;
            let ring = |i: usize, k: usize| (1 + i * s + k % s) as u32;
            let mut faces = Vec::new();
            for k in 0..s {
                faces.push([0, ring(0, k), ring(0, k + 1)]);
            }
            for i in 0..profile.len() - 1 {
                for k in 0..s {
                    let (a, b, cc, d) = (ring(i, k), ring(i, k + 1), ring(i + 1, k + 1), ring(i + 1, k));
                    faces.push([a, cc, b]);
                    faces.push([a, d, cc]);
                }
            }
            let last = profile.len() - 1;
            for k in 0..s {
                faces.push([top, ring(last, k + 1), ring(last, k)]);
            }
            let (joints, weights) = chain_skeleton(&vertices, 1, 0.0, height);
            TemplateAvatar::new(vertices, faces, joints, chain_parents(), weights)
        }
        RigSpec::Grid { nx, ny, spacing } => {
            if nx < 2 || ny < 2 || !(spacing > 0.0) {
                return bad("grid needs nx, ny >= 2 and spacing > 0");
            }
            let (nx, ny) = (nx as usize, ny as usize);
            let vertices: Vec<Vec3> = (0..ny)
                .flat_map(|y| (0..nx).map(move |x| [x as f64 * spacing, y as f64 * spacing, 0.0]))
                .collect();
            let id = |x: usize, y: usize| (y * nx + x) as u32;
            let mut faces = Vec::new();
            for y in 0..ny - 1 {
                for x in 0..nx - 1 {
                    faces.push([id(x, y), id(x + 1, y), id(x + 1, y + 1)]);
                    faces.push([id(x, y), id(x + 1, y + 1), id(x, y + 1)]);
                }
            }
            let (joints, weights) = chain_skeleton(&vertices, 0, 0.0, (nx - 1) as f64 * spacing);
            TemplateAvatar::new(vertices, faces, joints, chain_parents(), weights)
        }
        RigSpec::Arm {
            bone_length,
            width,
            segments_per_bone,
        } => {
            if !(bone_length > 0.0) || !(width > 0.0) || segments_per_bone < 1 {
                return bad("arm needs positive bone length and width, segments >= 1");
            }
            let cols = 2 * segments_per_bone as usize + 1;
            let mut vertices = Vec::new();
            let mut weights = Vec::new();
            for i in 0..cols {
                let x = 2.0 * bone_length * i as f64 / (cols - 1) as f64;
                for y in [-0.5 * width, 0.5 * width] {
                    vertices.push([x, y, 0.0]);
                    // rigid segments: upper arm -> shoulder, forearm -> elbow
                    weights.extend(if x < bone_length { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] });
                }
            }
            let faces = (0..cols - 1)
                .flat_map(|i| {
                    let (a, b, c, d) = (2 * i, 2 * i + 2, 2 * i + 3, 2 * i + 1);
                    [[a as u32, b as u32, c as u32], [a as u32, c as u32, d as u32]]
                })
                .collect();
            let joints = vec![[0.0; 3], [bone_length, 0.0, 0.0], [2.0 * bone_length, 0.0, 0.0]];
            TemplateAvatar::new(vertices, faces, joints, vec![-1, 0, 1], weights)
        }
    }
}

fn chain_parents() -> Vec<i32> {
    (0..BODY_JOINTS as i32).map(|j| j - 1).collect()
}

/// 24 joints evenly spaced along `axis` in `[lo, hi]`; each vertex is
/// linearly split between the two joints bracketing it.
fn chain_skeleton(vertices: &[Vec3], axis: usize, lo: f64, hi: f64) -> (Vec<Vec3>, Vec<f64>) {
    let j = BODY_JOINTS;
    let step = (hi - lo) / (j - 1) as f64;
    let joints = (0..j)
        .map(|k| {
            let mut p = geom::ZERO;
            p[axis] = lo + k as f64 * step;
            p
        })
        .collect();
    let mut weights = vec![0.0; vertices.len() * j];
    for (v, p) in vertices.iter().enumerate() {
        let s = ((p[axis] - lo) / step).clamp(0.0, (j - 1) as f64);
        let k = (s.floor() as usize).min(j - 2);
        let frac = s - k as f64;
        weights[v * j + k] = 1.0 - frac;
        weights[v * j + k + 1] = frac;
    }
    (joints, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::PARAM_LEN;
    use std::f64::consts::FRAC_PI_2;

    fn pose_with(f: impl Fn(&mut [f64])) -> Vec<f64> {
        let mut p = vec![0.0; BODY_LEN];
        f(&mut p);
        p
    }

    fn four_vertex_arm() -> TemplateAvatar {
        // upper-arm pair bound to the shoulder, forearm pair to the elbow
        TemplateAvatar::new(
            vec![[0.5, -0.1, 0.0], [0.5, 0.1, 0.0], [1.5, -0.1, 0.0], [1.5, 0.1, 0.0]],
            vec![[0, 2, 3], [0, 3, 1]],
            vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            vec![-1, 0, 1],
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn identity_pose_is_rest() {
        let av = make_test_avatar(&RigSpec::capsule(8), 0).unwrap();
        let posed = lbs_pose(&av, &MeshDeformation::zeros(av.vertex_count()), &[0.0; BODY_LEN]).unwrap();
        assert_eq!(posed, av.vertices());
    }

    #[test]
    fn root_translation_is_rigid() {
        let av = make_test_avatar(&RigSpec::capsule(8), 0).unwrap();
        let pose = pose_with(|p| p[ROOT_TRANSLATION_OFFSET] = 0.3);
        let posed = lbs_pose(&av, &MeshDeformation::zeros(av.vertex_count()), &pose).unwrap();
        for (a, b) in posed.iter().zip(av.vertices()) {
            assert!((a[0] - b[0] - 0.3).abs() < 1e-12);
            assert!((a[1] - b[1]).abs() < 1e-12 && (a[2] - b[2]).abs() < 1e-12);
        }
    }

    #[test]
    fn elbow_quarter_turn_matches_rigid_rotation() {
        let av = four_vertex_arm();
        // joint 1 (elbow) rotates +90 degrees about Z
        let pose = pose_with(|p| p[3 + 2] = FRAC_PI_2);
        let posed = lbs_pose(&av, &MeshDeformation::zeros(4), &pose).unwrap();
        // proximal vertices stay; distal ones rotate about (1, 0, 0):
        // (1.5, -0.1) -> (1 + 0.1, 0.5), (1.5, 0.1) -> (1 - 0.1, 0.5)
        let expect = [[0.5, -0.1, 0.0], [0.5, 0.1, 0.0], [1.1, 0.5, 0.0], [0.9, 0.5, 0.0]];
        for (p, e) in posed.iter().zip(expect) {
            for k in 0..3 {
                assert!((p[k] - e[k]).abs() < 1e-12, "{p:?} vs {e:?}");
            }
        }
    }

    #[test]
    fn offsets_are_applied_before_skinning() {
        let av = four_vertex_arm();
        let mut d = MeshDeformation::zeros(4);
        d.vertex_offsets[2] = [0.0, 0.0, 0.05];
        let pose = pose_with(|p| p[3 + 2] = FRAC_PI_2);
        let posed = lbs_pose(&av, &d, &pose).unwrap();
        assert!((posed[2][2] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn rigid_composition_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let av = make_test_avatar(&RigSpec::capsule(6), 1).unwrap();
        for _ in 0..20 {
            let pose: Vec<f64> = (0..BODY_LEN).map(|_| rng.gen_range(-0.6..0.6)).collect();
            let zeros = MeshDeformation::zeros(av.vertex_count());
            let posed = lbs_pose(&av, &zeros, &pose).unwrap();
            let rq = UnitQuat::from_axis_angle([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            let g = Rigid {
                rot: rq.to_matrix(),
                trans: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            };
            // fold the global transform into the root joint
            let r0 = UnitQuat::from_axis_angle([pose[0], pose[1], pose[2]]);
            let root = rq.mul(&r0).to_axis_angle();
            let j0 = av.joints()[0];
            let t = [pose[72], pose[73], pose[74]];
            let t_new = geom::sub(g.apply(geom::add(j0, t)), j0);
            let mut composed = pose.clone();
            composed[..3].copy_from_slice(&root);
            composed[72..75].copy_from_slice(&t_new);
            let posed2 = lbs_pose(&av, &zeros, &composed).unwrap();
            for (a, b) in posed.iter().zip(&posed2) {
                let ga = g.apply(*a);
                for k in 0..3 {
                    assert!((ga[k] - b[k]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn avatar_invariants_rejected() {
        let v = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let f = vec![[0, 1, 2]];
        let ok = TemplateAvatar::new(v.clone(), f.clone(), vec![[0.0; 3]], vec![-1], vec![1.0; 3]);
        assert!(ok.is_ok());
        let unnormalized = TemplateAvatar::new(v.clone(), f.clone(), vec![[0.0; 3]], vec![-1], vec![1.0, 0.5, 1.0]);
        assert!(matches!(unnormalized, Err(SkinError::InvalidAvatar(_))));
        let cycle = TemplateAvatar::new(v.clone(), f.clone(), vec![[0.0; 3]; 3], vec![-1, 2, 1], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(cycle.is_err());
        let bad_face = TemplateAvatar::new(v.clone(), vec![[0, 1, 7]], vec![[0.0; 3]], vec![-1], vec![1.0; 3]);
        assert!(bad_face.is_err());
        let mut v2 = v.clone();
        v2.push([5.0, 5.0, 5.0]);
        let disconnected = TemplateAvatar::new(v2, f, vec![[0.0; 3]], vec![-1], vec![1.0; 4]);
        assert!(disconnected.is_err());
    }

    #[test]
    fn generators_are_valid_and_deterministic() {
        let a = make_test_avatar(&RigSpec::capsule(8), 42).unwrap();
        assert_eq!(a.joint_count(), BODY_JOINTS);
        let mut spec = RigSpec::capsule(8);
        if let RigSpec::Capsule { jitter, .. } = &mut spec {
            *jitter = 0.05;
        }
        let j1 = make_test_avatar(&spec, 9).unwrap();
        let j2 = make_test_avatar(&spec, 9).unwrap();
        let j3 = make_test_avatar(&spec, 10).unwrap();
        assert_eq!(j1, j2);
        assert_ne!(j1, j3);
        assert_eq!(make_test_avatar(&RigSpec::grid(4, 4), 0).unwrap().vertex_count(), 16);
        assert!(make_test_avatar(&RigSpec::grid(1, 4), 0).is_err());
        assert!(make_test_avatar(&RigSpec::capsule(2), 0).is_err());
        let arm = make_test_avatar(&RigSpec::Arm { bone_length: 1.0, width: 0.2, segments_per_bone: 2 }, 0).unwrap();
        assert_eq!(arm.joint_count(), 3);
    }

    #[test]
    fn capsule_faces_point_outward() {
        let a = make_test_avatar(&RigSpec::capsule(10), 0).unwrap();
        let v = a.vertices();
        let vol: f64 = a
            .faces()
            .iter()
            .map(|f| geom::dot(v[f[0] as usize], geom::cross(v[f[1] as usize], v[f[2] as usize])) / 6.0)
            .sum();
        let r: f64 = 0.18;
        let h = 1.7 - 2.0 * r;
        let exact = std::f64::consts::PI * r * r * (h + 4.0 / 3.0 * r);
        assert!(vol > 0.0 && (vol - exact).abs() / exact < 0.1, "volume {vol} vs {exact}");
        let n = vertex_normals(v, a.faces());
        // side vertex normals point away from the axis
        let mid = v.len() / 2;
        assert!(geom::dot(n[mid], [v[mid][0], 0.0, v[mid][2]]) > 0.0);
    }

    #[test]
    fn geodesic_trivial_cases() {
        let a = make_test_avatar(&RigSpec::grid(5, 5), 0).unwrap();
        let p = SurfacePoint::Vertex(7);
        assert_eq!(a.geodesic_distance(&p, &p), 0.0);
        assert_eq!(a.geodesic_distance(&SurfacePoint::Vertex(0), &SurfacePoint::Vertex(1)), 1.0);
    }

    fn floyd_warshall(vertices: &[Vec3], faces: &[[u32; 3]]) -> Vec<Vec<f64>> {
        let n = vertices.len();
        let mut d = vec![vec![f64::INFINITY; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        for f in faces {
            for k in 0..3 {
                let (a, b) = (f[k] as usize, f[(k + 1) % 3] as usize);
                let l = geom::dist(vertices[a], vertices[b]);
                d[a][b] = d[a][b].min(l);
                d[b][a] = d[b][a].min(l);
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                    }
                }
            }
        }
        d
    }

    #[test]
    fn geodesic_matches_floyd_warshall() {
        let a = make_test_avatar(&RigSpec::grid(5, 5), 0).unwrap();
        let fw = floyd_warshall(a.vertices(), a.faces());
        let corner = a.geodesic_distance(&SurfacePoint::Vertex(0), &SurfacePoint::Vertex(24));
        assert!((corner - fw[0][24]).abs() < 1e-12);
        let other = a.geodesic_distance(&SurfacePoint::Vertex(4), &SurfacePoint::Vertex(20));
        assert!((other - fw[4][20]).abs() < 1e-12);
        for i in 0..25u32 {
            for j in 0..25u32 {
                let g = a.geodesic_distance(&SurfacePoint::Vertex(i), &SurfacePoint::Vertex(j));
                assert!((g - fw[i as usize][j as usize]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn geodesic_face_points_symmetric_and_triangle_inequality() {
        let a = make_test_avatar(&RigSpec::capsule(8), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pts = Vec::new();
        for _ in 0..12 {
            let u: f64 = rng.gen();
            let v: f64 = rng.gen::<f64>() * (1.0 - u);
            pts.push(SurfacePoint::Face {
                face: rng.gen_range(0..a.faces().len() as u32),
                bary: [u, v, 1.0 - u - v],
            });
        }
        for x in &pts {
            for y in &pts {
                assert_eq!(a.geodesic_distance(x, y), a.geodesic_distance(y, x));
                for z in &pts {
                    let (xy, yz, xz) = (
                        a.geodesic_distance(x, y),
                        a.geodesic_distance(y, z),
                        a.geodesic_distance(x, z),
                    );
                    assert!(xz <= xy + yz + 1e-12);
                }
            }
        }
        // same face: straight segment
        let f = SurfacePoint::Face { face: 3, bary: [0.2, 0.3, 0.5] };
        let g = SurfacePoint::Face { face: 3, bary: [0.3, 0.3, 0.4] };
        let d = a.geodesic_distance(&f, &g);
        assert!((d - geom::dist(a.point_position(&f), a.point_position(&g))).abs() < 1e-12);
    }

    #[test]
    fn geodesic_disconnected_is_infinite() {
        let v = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 0.0, 0.0], [6.0, 0.0, 0.0], [5.0, 1.0, 0.0]];
        let g = SurfaceGraph::new(&v, &[[0, 1, 2], [3, 4, 5]]);
        assert!(g.distance(&SurfacePoint::Vertex(0), &SurfacePoint::Vertex(4)).is_infinite());
    }

    fn single_triangle() -> TemplateAvatar {
        let s = 3f64.sqrt() / 2.0;
        TemplateAvatar::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, s, 0.0]],
            vec![[0, 1, 2]],
            vec![[0.0; 3]],
            vec![-1],
            vec![1.0; 3],
        )
        .unwrap()
    }

    #[test]
    fn coarse_position_examples() {
        let a = single_triangle();
        let n = vertex_normals(a.vertices(), a.faces());
        assert_eq!(n[0], [0.0, 0.0, 1.0]);
        let b = |bary, off| GaussianBinding { face_index: 0, barycentric: bary, normal_offset: off };
        let third = 1.0 / 3.0;
        let out = coarse_positions(
            &a,
            &[b([1.0, 0.0, 0.0], 0.0), b([third; 3], 0.0), b([third; 3], 0.01)],
            a.vertices(),
            &n,
        )
        .unwrap();
        assert_eq!(out[0], a.vertices()[0]);
        let c = [0.5, 3f64.sqrt() / 6.0, 0.0];
        for k in 0..3 {
            assert!((out[1][k] - c[k]).abs() < 1e-15);
        }
        assert!((out[2][2] - 0.01).abs() < 1e-15);
        assert!(coarse_positions(&a, &[b([0.5, 0.6, 0.0], 0.0)], a.vertices(), &n).is_err());
    }

    #[test]
    fn coarse_positions_follow_rigid_motion() {
        let a = make_test_avatar(&RigSpec::capsule(8), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bindings: Vec<_> = (0..200)
            .map(|_| {
                let u: f64 = rng.gen();
                let v: f64 = rng.gen::<f64>() * (1.0 - u);
                GaussianBinding {
                    face_index: rng.gen_range(0..a.faces().len() as u32),
                    barycentric: [u, v, 1.0 - u - v],
                    normal_offset: rng.gen_range(-0.01..0.01),
                }
            })
            .collect();
        let n0 = vertex_normals(a.vertices(), a.faces());
        let base = coarse_positions(&a, &bindings, a.vertices(), &n0).unwrap();
        let g = Rigid {
            rot: UnitQuat::from_axis_angle([0.3, -0.8, 0.2]).to_matrix(),
            trans: [0.1, -0.4, 2.0],
        };
        let moved: Vec<Vec3> = a.vertices().iter().map(|v| g.apply(*v)).collect();
        let n1 = vertex_normals(&moved, a.faces());
        let out = coarse_positions(&a, &bindings, &moved, &n1).unwrap();
        for (p, q) in base.iter().zip(&out) {
            let gp = g.apply(*p);
            for k in 0..3 {
                assert!((gp[k] - q[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mesh_metric_examples() {
        let gt: Vec<Vec3> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let n = vec![[0.0, 0.0, 1.0]; 10];
        let m = mesh_metrics(&gt, &gt, &n, &n).unwrap();
        assert_eq!((m.vert_l1, m.normal_l1), (0.0, 0.0));
        let shifted: Vec<Vec3> = gt.iter().map(|v| [v[0] + 0.1, v[1], v[2]]).collect();
        assert!((mesh_metrics(&shifted, &gt, &n, &n).unwrap().vert_l1 - 0.1).abs() < 1e-12);
        let mut one = gt.clone();
        one[3][1] += 0.2;
        assert!((mesh_metrics(&one, &gt, &n, &n).unwrap().vert_l1 - 0.02).abs() < 1e-12);
        assert!(mesh_metrics(&gt[..9], &gt, &n, &n).is_err());
    }

    #[test]
    fn mesh_block_round_trip() {
        let a = make_test_avatar(&RigSpec::capsule(6), 0).unwrap();
        let mut w = Writer::new();
        a.encode_block(&mut w);
        let bytes = w.into_inner();
        let b = TemplateAvatar::decode_block(&mut Reader::new(&bytes)).unwrap();
        assert_eq!(b.vertex_count(), a.vertex_count());
        for v in 0..b.vertex_count() {
            let s: f64 = b.weights(v).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(TemplateAvatar::decode_block(&mut Reader::new(&bytes[..bytes.len() - 1])).is_err());
    }

    #[test]
    fn wobble_stays_bounded() {
        let a = make_test_avatar(&RigSpec::capsule(8), 0).unwrap();
        let p = MotionParams::from_values(0, 123_456, [0.0; PARAM_LEN]).unwrap();
        let d = ClothWobble::default().offsets(&a, &p);
        d.validate(a.vertex_count(), DEFAULT_OFFSET_BOUND).unwrap();
        assert!(d.vertex_offsets.iter().any(|o| geom::norm(*o) > 0.0));
    }
}
