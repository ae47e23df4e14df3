//! Avatar packages and the content-addressed file repository.
//!
//! On disk a package is `<repo>/<id>/manifest.json` plus `<repo>/<id>/blocks.bin`.
//! `blocks.bin` holds three `u32`-length-prefixed blocks (mesh, Gaussians,
//! controllers) and the manifest carries its SHA-256.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::binio::{Reader, Writer};
use crate::gsdeform::{self, ControllerField, DeformError, FieldConfig, GaussianSet, ATTR_DIM};
use crate::skinning::{make_test_avatar, GaussianBinding, RigSpec, SkinError, TemplateAvatar};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PackageError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("avatar {0:?} not found")]
    NotFound(String),
    #[error("corrupt package: {0}")]
    Corruption(String),
    #[error("invalid package: {0}")]
    Invalid(String),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Deform(#[from] DeformError),
    #[error(transparent)]
    Skin(#[from] SkinError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub vertex_count: usize,
    pub face_count: usize,
    pub joint_count: usize,
    pub gaussian_count: usize,
    pub controller_count: usize,
    pub bases: usize,
    pub neighbors: usize,
    pub nonstandard_controllers: bool,
    pub block_sizes: [usize; 3],
    /// Hex SHA-256 of `blocks.bin`.
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvatarPackage {
    manifest: Manifest,
    avatar: TemplateAvatar,
    gaussians: GaussianSet,
    bindings: Vec<GaussianBinding>,
    field: ControllerField,
    blocks: Vec<u8>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

impl AvatarPackage {
    /// Serializes the parts and reads them back, so the in-memory package
    /// is exactly what a fetch would return.
    pub fn assemble(
        avatar: &TemplateAvatar,
        gaussians: &[gsdeform::Gaussian],
        bindings: &[GaussianBinding],
        field: &ControllerField,
        nonstandard_controllers: bool,
    ) -> Result<Self, PackageError> {
        if gaussians.len() != bindings.len() || field.gaussian_count() != gaussians.len() {
            return Err(PackageError::Invalid(format!(
                "{} gaussians, {} bindings, field for {}",
                gaussians.len(),
                bindings.len(),
                field.gaussian_count()
            )));
        }
        let mut mesh = Writer::new();
        avatar.encode_block(&mut mesh);
        let mut gs = Writer::new();
        gsdeform::encode_gaussian_block(gaussians, bindings, &mut gs);
        let mut ctl = Writer::new();
        field.encode_block(&mut ctl);
        let sizes = [mesh.len(), gs.len(), ctl.len()];
        let mut blocks = Writer::new();
        for b in [mesh, gs, ctl] {
            let b = b.into_inner();
            blocks.u32(b.len() as u32);
            blocks.bytes(&b);
        }
        let blocks = blocks.into_inner();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            vertex_count: avatar.vertex_count(),
            face_count: avatar.faces().len(),
            joint_count: avatar.joint_count(),
            gaussian_count: gaussians.len(),
            controller_count: field.controllers().len(),
            bases: field.basis_count(),
            neighbors: field.neighbor_count(),
            nonstandard_controllers,
            block_sizes: sizes,
            content_hash: sha256_hex(&blocks),
        };
        Self::from_parts(manifest, blocks)
    }

    /// Verifies the hash and counts, then decodes the blocks.
    pub fn from_parts(manifest: Manifest, blocks: Vec<u8>) -> Result<Self, PackageError> {
        if manifest.format_version != FORMAT_VERSION {
            return Err(PackageError::Invalid(format!(
                "unsupported package format {}",
                manifest.format_version
            )));
        }
        let hash = sha256_hex(&blocks);
        if hash != manifest.content_hash {
            return Err(PackageError::Corruption(format!(
                "content hash {hash} does not match manifest {}",
                manifest.content_hash
            )));
        }
        let mut r = Reader::new(&blocks);
        let mut parts = Vec::with_capacity(3);
        for (k, size) in manifest.block_sizes.iter().enumerate() {
            let len = r.u32().map_err(|e| PackageError::Corruption(e.to_string()))? as usize;
            if len != *size {
                return Err(PackageError::Corruption(format!("block {k} is {len} bytes, manifest says {size}")));
            }
            parts.push(r.take(len).map_err(|e| PackageError::Corruption(e.to_string()))?);
        }
        if r.remaining() != 0 {
            return Err(PackageError::Corruption(format!("{} trailing bytes", r.remaining())));
        }
        let mut mr = Reader::new(parts[0]);
        let avatar = TemplateAvatar::decode_block(&mut mr)?;
        let mut gr = Reader::new(parts[1]);
        let (gaussians, bindings) = gsdeform::decode_gaussian_block(&mut gr, avatar.faces().len())?;
        let mut cr = Reader::new(parts[2]);
        let field = ControllerField::decode_block(
            &mut cr,
            avatar.joint_count(),
            gaussians.len(),
            manifest.nonstandard_controllers,
        )?;
        if mr.remaining() + gr.remaining() + cr.remaining() != 0 {
            return Err(PackageError::Corruption("block has trailing bytes".into()));
        }
        let counts = (
            avatar.vertex_count(),
            avatar.faces().len(),
            avatar.joint_count(),
            gaussians.len(),
            field.controllers().len(),
            field.basis_count(),
            field.neighbor_count(),
        );
        let declared = (
            manifest.vertex_count,
            manifest.face_count,
            manifest.joint_count,
            manifest.gaussian_count,
            manifest.controller_count,
            manifest.bases,
            manifest.neighbors,
        );
        if counts != declared {
            return Err(PackageError::Corruption(format!(
                "manifest counts {declared:?} do not match contents {counts:?}"
            )));
        }
        Ok(Self {
            manifest,
            avatar,
            gaussians,
            bindings,
            field,
            blocks,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn avatar(&self) -> &TemplateAvatar {
        &self.avatar
    }

    pub fn gaussians(&self) -> &[gsdeform::Gaussian] {
        &self.gaussians
    }

    pub fn bindings(&self) -> &[GaussianBinding] {
        &self.bindings
    }

    pub fn field(&self) -> &ControllerField {
        &self.field
    }

    pub fn blocks(&self) -> &[u8] {
        &self.blocks
    }

    pub fn content_hash(&self) -> &str {
        &self.manifest.content_hash
    }

    pub fn byte_len(&self) -> usize {
        self.blocks.len()
    }

    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n"
    }

    /// Same package with a replaced basis table.
    pub fn with_bases(&self, bases: Vec<f64>) -> Result<Self, PackageError> {
        let mut field = self.field.clone();
        field.set_bases(bases)?;
        Self::assemble(
            &self.avatar,
            &self.gaussians,
            &self.bindings,
            &field,
            self.manifest.nonstandard_controllers,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildSpec {
    pub rig: RigSpec,
    pub gaussians: usize,
    #[serde(default = "default_controllers")]
    pub controllers: usize,
    #[serde(default = "default_bases")]
    pub bases: usize,
    #[serde(default)]
    pub allow_nonstandard: bool,
    #[serde(default)]
    pub seed: u64,
    /// Half-width of the random potential coefficients.
    #[serde(default = "default_potential_scale")]
    pub potential_scale: f64,
    /// Half-width of the random basis entries per attribute channel.
    #[serde(default = "default_basis_scale")]
    pub basis_scale: f64,
}

fn default_controllers() -> usize {
    gsdeform::CONTROLLER_COUNT
}

fn default_bases() -> usize {
    gsdeform::DEFAULT_BASES
}

fn default_potential_scale() -> f64 {
    0.05
}

fn default_basis_scale() -> f64 {
    0.005
}

impl BuildSpec {
    pub fn new(rig: RigSpec, gaussians: usize, seed: u64) -> Self {
        Self {
            rig,
            gaussians,
            controllers: default_controllers(),
            bases: default_bases(),
            allow_nonstandard: false,
            seed,
            potential_scale: default_potential_scale(),
            basis_scale: default_basis_scale(),
        }
    }
}

/// Procedural avatar: surface-sampled Gaussians, uniform controllers,
/// seeded random potentials and bases.
pub fn build_avatar(spec: &BuildSpec) -> Result<AvatarPackage, PackageError> {
    if spec.gaussians == 0 {
        return Err(PackageError::Invalid("gaussian count must be positive".into()));
    }
    if spec.bases == 0 || spec.bases > gsdeform::MAX_BASES {
        return Err(PackageError::Invalid(format!("basis count {} outside 1..=64", spec.bases)));
    }
    let avatar = make_test_avatar(&spec.rig, spec.seed)?;
    let (gaussians, bindings) = gsdeform::sample_gaussians(&avatar, spec.gaussians, spec.seed.wrapping_add(1));
    let cfg = FieldConfig {
        controllers: spec.controllers,
        bases: spec.bases,
        allow_nonstandard: spec.allow_nonstandard,
        ..Default::default()
    };
    let mut field = ControllerField::build(&avatar, &bindings, &cfg, spec.seed.wrapping_add(2))?;
    field.randomize_potentials(spec.seed.wrapping_add(3), spec.potential_scale);
    let mut scales = [spec.basis_scale; ATTR_DIM];
    // rotation increments act through the imaginary part only
    scales[3] = 0.0;
    field.randomize_bases(spec.seed.wrapping_add(4), &scales);
    AvatarPackage::assemble(&avatar, &gaussians, &bindings, &field, spec.allow_nonstandard)
}

fn check_id(id: &str) -> Result<(), PackageError> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(PackageError::Invalid(format!("avatar id {id:?} must be [A-Za-z0-9._-]+")))
    }
}

fn package_dir(repo: &Path, id: &str) -> Result<PathBuf, PackageError> {
    check_id(id)?;
    Ok(repo.join(id))
}

pub fn publish_avatar(repo: &Path, id: &str, pkg: &AvatarPackage) -> Result<PathBuf, PackageError> {
    let dir = package_dir(repo, id)?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("blocks.bin"), &pkg.blocks)?;
    fs::write(dir.join("manifest.json"), pkg.manifest_json())?;
    Ok(dir)
}

pub fn fetch_avatar(repo: &Path, id: &str) -> Result<AvatarPackage, PackageError> {
    let dir = package_dir(repo, id)?;
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(PackageError::NotFound(id.to_string()));
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    let blocks = fs::read(dir.join("blocks.bin"))?;
    AvatarPackage::from_parts(manifest, blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> AvatarPackage {
        let mut spec = BuildSpec::new(RigSpec::capsule(6), 200, 5);
        spec.controllers = 60;
        spec.allow_nonstandard = true;
        build_avatar(&spec).unwrap()
    }

    #[test]
    fn build_is_deterministic_and_consistent() {
        let a = small();
        let b = small();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.manifest().gaussian_count, 200);
        assert_eq!(a.manifest().controller_count, 60);
        let again = AvatarPackage::from_parts(a.manifest().clone(), a.blocks().to_vec()).unwrap();
        assert_eq!(again, a);
    }

    #[test]
    fn nonstandard_count_needs_flag() {
        let mut spec = BuildSpec::new(RigSpec::capsule(6), 50, 5);
        spec.controllers = 60;
        assert!(build_avatar(&spec).is_err());
    }

    #[test]
    fn publish_fetch_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let a = small();
        publish_avatar(dir.path(), "alice", &a).unwrap();
        let b = fetch_avatar(dir.path(), "alice").unwrap();
        assert_eq!(a.blocks(), b.blocks());
        assert_eq!(a, b);
        assert!(matches!(fetch_avatar(dir.path(), "bob"), Err(PackageError::NotFound(_))));
        assert!(fetch_avatar(dir.path(), "../x").is_err());
        let path = dir.path().join("alice/blocks.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[100] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(fetch_avatar(dir.path(), "alice"), Err(PackageError::Corruption(_))));
    }

    #[test]
    fn mismatched_counts_are_rejected() {
        let a = small();
        let mut m = a.manifest().clone();
        m.gaussian_count += 1;
        assert!(matches!(
            AvatarPackage::from_parts(m, a.blocks().to_vec()),
            Err(PackageError::Corruption(_))
        ));
    }
}
