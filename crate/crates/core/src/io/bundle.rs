//! Single-file artifact bundles: model spec + params, trapdoor registry,
//! detector, and the producing config, with a version header and a sha256
//! content hash. Writes go to a temp file and are renamed into place so a
//! bundle on disk is never partial.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detect::Detector;
use crate::model::{Model, ModelError, ModelSpec};
use crate::tensor::Tensor;
use crate::trapdoor::TrapdoorRegistry;

const MAGIC: &[u8; 8] = b"TRAPBNDL";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a bundle file (bad magic)")]
    BadMagic,
    #[error("unsupported bundle version {got} (this build reads {supported})")]
    VersionMismatch { got: u32, supported: u32 },
    #[error("content hash mismatch: bundle is corrupt or tampered")]
    HashMismatch,
    #[error("truncated bundle: {0}")]
    Truncated(String),
    #[error("malformed section {name}: {msg}")]
    MalformedSection { name: String, msg: String },
    #[error("bundle missing required section {0}")]
    MissingSection(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything one experiment stage hands to the next.
#[derive(Debug)]
pub struct ArtifactBundle {
    pub spec: ModelSpec,
    pub params: BTreeMap<String, Vec<f32>>,
    pub trained_epochs: usize,
    pub registry: Option<TrapdoorRegistry>,
    pub detector: Option<Detector>,
    pub config_text: Option<String>,
}

impl ArtifactBundle {
    pub fn from_model(model: &Model) -> ArtifactBundle {
        let params = model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.to_vec()))
            .collect();
        ArtifactBundle {
            spec: model.spec.clone(),
            params,
            trained_epochs: model.trained_epochs,
            registry: None,
            detector: None,
            config_text: None,
        }
    }

    pub fn with_registry(mut self, registry: &TrapdoorRegistry) -> Self {
        self.registry = Some(registry.clone());
        self
    }

    pub fn with_detector(mut self, detector: &Detector) -> Self {
        self.detector = Some(detector.clone());
        self
    }

    pub fn with_config_text(mut self, text: &str) -> Self {
        self.config_text = Some(text.to_string());
        self
    }

    /// Rebuild the model with the stored parameters.
    pub fn instantiate_model(&self) -> Result<Model, BundleError> {
        let mut model = Model::build(self.spec.clone(), 0)?;
        for (name, data) in &self.params {
            let param = model.params.get(name).ok_or_else(|| {
                BundleError::MalformedSection {
                    name: "params".into(),
                    msg: format!("unknown parameter {name}"),
                }
            })?;
            if param.numel() != data.len() {
                return Err(BundleError::MalformedSection {
                    name: "params".into(),
                    msg: format!(
                        "parameter {name} has {} values, spec implies {}",
                        data.len(),
                        param.numel()
                    ),
                });
            }
            param.set_data(data.clone());
        }
        model.trained_epochs = self.trained_epochs;
        // refuse bundles that omit parameters the spec requires
        if self.params.len() != model.params.len() {
            return Err(BundleError::MalformedSection {
                name: "params".into(),
                msg: format!(
                    "bundle has {} parameters, spec implies {}",
                    self.params.len(),
                    model.params.len()
                ),
            });
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: ModelSpec,
    trained_epochs: usize,
    param_order: Vec<String>,
}

fn push_section(buf: &mut Vec<u8>, name: &str, payload: &[u8]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    buf.extend_from_slice(payload);
}

/// Serialize and atomically write a bundle.
pub fn save_bundle(bundle: &ArtifactBundle, path: &Path) -> Result<(), BundleError> {
    let mut body = Vec::new();
    let meta = Meta {
        spec: bundle.spec.clone(),
        trained_epochs: bundle.trained_epochs,
        param_order: bundle.params.keys().cloned().collect(),
    };
    push_section(&mut body, "meta", &serde_json::to_vec(&meta).unwrap());
    let mut raw = Vec::new();
    for data in bundle.params.values() {
        for v in data {
            raw.extend_from_slice(&v.to_le_bytes());
        }
    }
    push_section(&mut body, "params", &raw);
    if let Some(reg) = &bundle.registry {
        push_section(&mut body, "registry", &serde_json::to_vec(reg).unwrap());
    }
    if let Some(det) = &bundle.detector {
        push_section(&mut body, "detector", &serde_json::to_vec(det).unwrap());
    }
    if let Some(cfg) = &bundle.config_text {
        push_section(&mut body, "config", cfg.as_bytes());
    }

    let mut out = Vec::with_capacity(body.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&body);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);

    let io_err = |source| BundleError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&out).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

/// Read back a bundle, verifying magic, version, and content hash.
pub fn load_bundle(path: &Path) -> Result<ArtifactBundle, BundleError> {
    let raw = std::fs::read(path).map_err(|source| BundleError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if raw.len() < MAGIC.len() + 4 + 32 {
        return Err(BundleError::Truncated("shorter than header + hash".into()));
    }
    if &raw[..8] != MAGIC {
        return Err(BundleError::BadMagic);
    }
    let version = u32::from_le_bytes(raw[8..12].try_into().unwrap());
    if version != BUNDLE_VERSION {
        return Err(BundleError::VersionMismatch {
            got: version,
            supported: BUNDLE_VERSION,
        });
    }
    let (body, stored_hash) = raw.split_at(raw.len() - 32);
    let digest = Sha256::digest(body);
    if digest[..] != stored_hash[..] {
        return Err(BundleError::HashMismatch);
    }

    let mut sections: BTreeMap<String, &[u8]> = BTreeMap::new();
    let mut cursor = 12usize;
    while cursor < body.len() {
        if cursor + 4 > body.len() {
            return Err(BundleError::Truncated("section name length".into()));
        }
        let name_len = u32::from_le_bytes(body[cursor..cursor + 4].try_into().unwrap()) as usize;
        cursor += 4;
        if cursor + name_len + 8 > body.len() {
            return Err(BundleError::Truncated("section header".into()));
        }
        let name = String::from_utf8_lossy(&body[cursor..cursor + name_len]).to_string();
        cursor += name_len;
        let payload_len =
            u64::from_le_bytes(body[cursor..cursor + 8].try_into().unwrap()) as usize;
        cursor += 8;
        if cursor + payload_len > body.len() {
            return Err(BundleError::Truncated(format!("section {name} payload")));
        }
        sections.insert(name, &body[cursor..cursor + payload_len]);
        cursor += payload_len;
    }

    let meta_bytes = sections
        .get("meta")
        .ok_or_else(|| BundleError::MissingSection("meta".into()))?;
    let meta: Meta =
        serde_json::from_slice(meta_bytes).map_err(|e| BundleError::MalformedSection {
            name: "meta".into(),
            msg: e.to_string(),
        })?;
    let params_raw = sections
        .get("params")
        .ok_or_else(|| BundleError::MissingSection("params".into()))?;

    // recover per-parameter lengths from the spec
    let probe = Model::build(meta.spec.clone(), 0)?;
    let mut params = BTreeMap::new();
    let mut offset = 0usize;
    for name in &meta.param_order {
        let numel = probe
            .params
            .get(name)
            .map(Tensor::numel)
            .ok_or_else(|| BundleError::MalformedSection {
                name: "params".into(),
                msg: format!("parameter {name} not implied by the spec"),
            })?;
        let bytes = numel * 4;
        if offset + bytes > params_raw.len() {
            return Err(BundleError::Truncated(format!("parameter {name}")));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in params_raw[offset..offset + bytes].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        params.insert(name.clone(), data);
        offset += bytes;
    }
    if offset != params_raw.len() {
        return Err(BundleError::MalformedSection {
            name: "params".into(),
            msg: "trailing bytes after parameters".into(),
        });
    }

    let registry = match sections.get("registry") {
        Some(bytes) => Some(serde_json::from_slice(bytes).map_err(|e| {
            BundleError::MalformedSection {
                name: "registry".into(),
                msg: e.to_string(),
            }
        })?),
        None => None,
    };
    let detector = match sections.get("detector") {
        Some(bytes) => Some(serde_json::from_slice(bytes).map_err(|e| {
            BundleError::MalformedSection {
                name: "detector".into(),
                msg: e.to_string(),
            }
        })?),
        None => None,
    };
    let config_text = sections
        .get("config")
        .map(|b| String::from_utf8_lossy(b).to_string());

    Ok(ArtifactBundle {
        spec: meta.spec,
        params,
        trained_epochs: meta.trained_epochs,
        registry,
        detector,
        config_text,
    })
}

/// Hex content hash of a bundle file (the stored sha256 trailer).
pub fn bundle_hash(path: &Path) -> Result<String, BundleError> {
    let raw = std::fs::read(path).map_err(|source| BundleError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if raw.len() < 32 {
        return Err(BundleError::Truncated("no hash trailer".into()));
    }
    Ok(raw[raw.len() - 32..]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{mlp_spec, Model};

    fn small_model() -> Model {
        Model::build(mlp_spec(4, &[6], 3), 9).unwrap()
    }

    #[test]
    fn round_trip_reproduces_forward_outputs_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bundle");
        let model = small_model();
        save_bundle(&ArtifactBundle::from_model(&model), &path).unwrap();
        let loaded = load_bundle(&path).unwrap().instantiate_model().unwrap();
        let probe = Tensor::new(&[3, 1, 1, 4], (0..12).map(|i| i as f32 / 12.0).collect())
            .unwrap();
        assert_eq!(
            model.forward(&probe).unwrap().to_vec(),
            loaded.forward(&probe).unwrap().to_vec(),
            "byte-identical parameters give identical outputs"
        );
        assert_eq!(model.params_hash(), loaded.params_hash());
    }

    #[test]
    fn save_load_same_content_hash() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bundle");
        let b = dir.path().join("b.bundle");
        let model = small_model();
        save_bundle(&ArtifactBundle::from_model(&model), &a).unwrap();
        save_bundle(&ArtifactBundle::from_model(&model), &b).unwrap();
        assert_eq!(bundle_hash(&a).unwrap(), bundle_hash(&b).unwrap());
    }

    #[test]
    fn tampered_byte_fails_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bundle");
        save_bundle(&ArtifactBundle::from_model(&small_model()), &path).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        let mid = raw.len() / 2;
        raw[mid] ^= 0x01;
        std::fs::write(&path, raw).unwrap();
        assert!(matches!(load_bundle(&path), Err(BundleError::HashMismatch)));
    }

    #[test]
    fn future_version_rejected_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bundle");
        save_bundle(&ArtifactBundle::from_model(&small_model()), &path).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw[8..12].copy_from_slice(&99u32.to_le_bytes());
        // fix up the hash so only the version differs
        let body_len = raw.len() - 32;
        let digest = Sha256::digest(&raw[..body_len]);
        raw[body_len..].copy_from_slice(&digest);
        std::fs::write(&path, raw).unwrap();
        assert!(matches!(
            load_bundle(&path),
            Err(BundleError::VersionMismatch { got: 99, .. })
        ));
    }

    #[test]
    fn truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bundle");
        save_bundle(&ArtifactBundle::from_model(&small_model()), &path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        std::fs::write(&path, &raw[..raw.len() - 40]).unwrap();
        let err = load_bundle(&path).unwrap_err();
        assert!(
            matches!(err, BundleError::HashMismatch | BundleError::Truncated(_)),
            "{err}"
        );
    }

    #[test]
    fn not_a_bundle_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.bundle");
        std::fs::write(&path, vec![0u8; 64]).unwrap();
        assert!(matches!(load_bundle(&path), Err(BundleError::BadMagic)));
    }
}
