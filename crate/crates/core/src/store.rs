//! Parameter bundles: one self-describing `.mdab` file per domain (or the
//! backbone), composable into a routed model.
//!
//! Byte layout, all integers little-endian:
//!
//! | offset       | size         | content                               |
//! |--------------|--------------|---------------------------------------|
//! | 0            | 4            | magic `MDAB`                          |
//! | 4            | 4            | format version, `u32`                 |
//! | 8            | 8            | header length `H`, `u64`              |
//! | 16           | `H`          | UTF-8 JSON manifest                   |
//! | 16 + `H`     | `4 * N`      | `f32` values of every entry, in order |
//!
//! The manifest lists entries as `{key, shape}`; entry `i` occupies the
//! next `product(shape)` floats.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{canonical_json, fingerprint_of, ModelConfig, ParamSet};
use crate::routing::{domain_layout, DomainEntry, DomainId, DomainPlan, MdaModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MDAB";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub key: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub domain: String,
    pub domain_id: DomainId,
    /// `None` for the backbone bundle.
    pub plan: Option<DomainPlan>,
    /// Hash of the canonical model configuration and plan.
    pub config_fingerprint: String,
    pub creation_step: u64,
    pub entries: Vec<BundleEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterBundle {
    pub manifest: BundleManifest,
    pub params: ParamSet<f32>,
}

/// Fingerprint binding a bundle to one model configuration and plan.
pub fn config_fingerprint(config: &ModelConfig, plan: Option<&DomainPlan>) -> String {
    #[derive(Serialize)]
    struct Keyed<'a> {
        model: &'a ModelConfig,
        plan: Option<&'a DomainPlan>,
    }
    fingerprint_of(&canonical_json(&Keyed { model: config, plan }))
}

impl ParameterBundle {
    fn build(
        config: &ModelConfig,
        domain: &str,
        id: DomainId,
        plan: Option<&DomainPlan>,
        params: &ParamSet<f32>,
        step: u64,
    ) -> Self {
        let entries = params.iter().map(|(k, v)| BundleEntry { key: k.clone(), shape: v.shape().to_vec() }).collect();
        Self {
            manifest: BundleManifest {
                format_version: FORMAT_VERSION,
                domain: domain.to_owned(),
                domain_id: id,
                plan: plan.cloned(),
                config_fingerprint: config_fingerprint(config, plan),
                creation_step: step,
                entries,
            },
            params: params.clone(),
        }
    }

    pub fn backbone(model: &MdaModel, step: u64) -> Self {
        Self::build(model.config(), model.backbone_domain(), DomainId::BACKBONE, None, model.backbone(), step)
    }

    pub fn domain(model: &MdaModel, id: DomainId, step: u64) -> Result<Self> {
        let d = model.domain(id)?;
        Ok(Self::build(model.config(), d.name(), id, Some(&d.plan), &d.params, step))
    }

    pub fn is_backbone(&self) -> bool {
        self.manifest.plan.is_none()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let floats: usize = self.params.numel();
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.manifest.entries {
            for v in self.params.get(&e.key).expect("entry listed from params").data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a bundle and checks it against `expected`: fingerprint, then
    /// every entry's key and shape.
    pub fn from_bytes(bytes: &[u8], expected: &ModelConfig) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptHeader(m.to_owned());
        let (manifest, header_end) = parse_header(bytes)?;
        let fingerprint = config_fingerprint(expected, manifest.plan.as_ref());
        if fingerprint != manifest.config_fingerprint {
            return Err(Error::FingerprintMismatch { expected: fingerprint, found: manifest.config_fingerprint });
        }
        let floats = manifest
            .entries
            .iter()
            .try_fold(0usize, |acc, e| {
                e.shape.iter().try_fold(1usize, |p, &d| p.checked_mul(d)).and_then(|n| acc.checked_add(n))
            })
            .ok_or_else(|| corrupt("entry sizes overflow"))?;
        if bytes.len() - header_end != floats * 4 {
            return Err(corrupt(&format!("expected {} data bytes, found {}", floats * 4, bytes.len() - header_end)));
        }
        let layout = match &manifest.plan {
            None => expected.backbone_layout(),
            Some(plan) => domain_layout(expected, plan),
        };
        let listed: BTreeSet<&str> = manifest.entries.iter().map(|e| e.key.as_str()).collect();
        if let Some(missing) = layout.iter().find(|s| !listed.contains(s.key.as_str())) {
            return Err(Error::MissingParam(missing.key.clone()));
        }
        let mut params = ParamSet::new();
        let mut at = header_end;
        for e in &manifest.entries {
            let spec = layout.iter().find(|s| s.key == e.key).ok_or_else(|| Error::InvalidPath(e.key.clone()))?;
            if spec.shape != e.shape {
                return Err(Error::BundleShape {
                    key: e.key.clone(),
                    expected: spec.shape.clone(),
                    found: e.shape.clone(),
                });
            }
            let n: usize = e.shape.iter().product();
            let data = bytes[at..at + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            at += 4 * n;
            if params.insert(e.key.clone(), Tensor::new(e.shape.clone(), data)?).is_some() {
                return Err(corrupt(&format!("duplicate entry `{}`", e.key)));
            }
        }
        Ok(Self { manifest, params })
    }
}

/// Reads the preamble and manifest without checking them against a model
/// configuration. Returns the manifest and the offset of the data section.
fn parse_header(bytes: &[u8]) -> Result<(BundleManifest, usize)> {
    let corrupt = |m: &str| Error::CorruptHeader(m.to_owned());
    if bytes.len() < PREAMBLE {
        return Err(corrupt("file shorter than the fixed preamble"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(PREAMBLE))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("header extends past end of file"))?;
    let manifest: BundleManifest = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| Error::CorruptHeader(format!("manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(corrupt("manifest version disagrees with preamble"));
    }
    Ok((manifest, header_end))
}

/// The manifest of a bundle file, without loading or validating its data.
pub fn read_manifest(path: &Path) -> Result<BundleManifest> {
    Ok(parse_header(&fs::read(path)?)?.0)
}

pub fn save_bundle(bundle: &ParameterBundle, path: &Path) -> Result<()> {
    fs::write(path, bundle.to_bytes())?;
    Ok(())
}

pub fn load_bundle(path: &Path, expected: &ModelConfig) -> Result<ParameterBundle> {
    ParameterBundle::from_bytes(&fs::read(path)?, expected)
}

/// Assembles a routed model from a backbone bundle and domain bundles. The
/// result does not depend on the order of `domains`.
pub fn compose(config: &ModelConfig, backbone: ParameterBundle, domains: Vec<ParameterBundle>) -> Result<MdaModel> {
    if !backbone.is_backbone() {
        return Err(Error::Config(format!("`{}` is a domain bundle, not a backbone", backbone.manifest.domain)));
    }
    let mut model = MdaModel::new(config.clone(), backbone.manifest.domain.clone(), backbone.params)?;
    for bundle in domains {
        let Some(plan) = bundle.manifest.plan else {
            return Err(Error::DuplicateDomain(bundle.manifest.domain));
        };
        model.insert_domain(DomainEntry { id: bundle.manifest.domain_id, plan, params: bundle.params })?;
    }
    Ok(model)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleDiff {
    pub added: Vec<String>,
    pub removed: Vec<String>,
    /// Keys whose values differ, with the largest absolute change
    /// (`inf` when the shapes differ).
    pub changed: Vec<(String, f64)>,
}

impl BundleDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.changed.is_empty()
    }
}

/// Structural and numeric difference from `a` to `b`. Values are compared
/// bitwise, so any change at all is reported.
pub fn diff(a: &ParameterBundle, b: &ParameterBundle) -> BundleDiff {
    let mut out = BundleDiff::default();
    for (key, va) in a.params.iter() {
        match b.params.get(key) {
            None => out.removed.push(key.clone()),
            Some(vb) if !va.bit_eq(vb) => out.changed.push((key.clone(), va.max_abs_diff(vb).unwrap_or(f64::INFINITY))),
            Some(_) => {}
        }
    }
    out.added = b.params.keys().filter(|k| !a.params.contains(k)).cloned().collect();
    out
}
