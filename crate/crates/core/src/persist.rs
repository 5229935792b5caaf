//! Versioned, checksummed JSON bundles of trained artifacts, and atomic
//! file writes.
//!
//! A bundle file is `{format_version, checksum, payload}`, where `checksum`
//! is the SHA-256 (hex) of the compact JSON serialization of `payload`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cegen::ClassMeans;
use crate::classifier::{Classifier, ClassifierReport};
use crate::data::FeatureSchema;
use crate::dequant::Dequantizer;
use crate::error::{Error, Result};
use crate::flow::{FlowModel, LatentGmm};
use crate::trainer::{TrainReport, TrainedFlow};

pub const FORMAT_VERSION: &str = "ceflow-bundle/1";

/// Writes `bytes` to a temporary file next to `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Everything needed to explain predictions. Stages fill in their part:
/// classifier training, flow training, then class means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub schema: FeatureSchema,
    pub classifier: Option<Classifier>,
    pub classifier_report: Option<ClassifierReport>,
    pub flow: Option<FlowModel>,
    pub dequantizer: Option<Dequantizer>,
    pub gmm: Option<LatentGmm>,
    /// Includes the training config and seed.
    pub train_report: Option<TrainReport>,
    pub class_means: Option<ClassMeans>,
    /// Training-set median absolute deviation per continuous feature, raw units.
    pub mad: Option<Vec<f64>>,
    /// Seed used by each stage, keyed by stage name.
    pub seeds: BTreeMap<String, u64>,
}

impl ModelBundle {
    pub fn new(schema: FeatureSchema) -> Self {
        Self {
            schema,
            classifier: None,
            classifier_report: None,
            flow: None,
            dequantizer: None,
            gmm: None,
            train_report: None,
            class_means: None,
            mad: None,
            seeds: BTreeMap::new(),
        }
    }

    pub fn set_flow(&mut self, trained: TrainedFlow) {
        self.seeds.insert("flow".into(), trained.report.seed);
        self.flow = Some(trained.flow);
        self.dequantizer = Some(trained.dequantizer);
        self.gmm = Some(trained.gmm);
        self.train_report = Some(trained.report);
        self.class_means = None;
    }

    pub fn require_classifier(&self) -> Result<&Classifier> {
        self.classifier
            .as_ref()
            .ok_or_else(|| Error::Setup("bundle has no classifier; run train-clf first".into()))
    }

    pub fn require_flow(&self) -> Result<(&FlowModel, &Dequantizer, &LatentGmm)> {
        match (&self.flow, &self.dequantizer, &self.gmm) {
            (Some(f), Some(d), Some(g)) => Ok((f, d, g)),
            _ => Err(Error::Setup("bundle has no trained flow; run train-flow first".into())),
        }
    }

    pub fn require_means(&self) -> Result<&ClassMeans> {
        self.class_means
            .as_ref()
            .ok_or_else(|| Error::Setup("bundle has no class means; run means first".into()))
    }
}

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    format_version: &'a str,
    checksum: String,
    payload: &'a ModelBundle,
}

#[derive(Deserialize)]
struct EnvelopeIn {
    format_version: String,
    checksum: String,
    payload: serde_json::Value,
}

fn checksum(bundle: &ModelBundle) -> Result<String> {
    let bytes = serde_json::to_vec(bundle)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn bundle_to_bytes(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let env = EnvelopeOut {
        format_version: FORMAT_VERSION,
        checksum: checksum(bundle)?,
        payload: bundle,
    };
    let mut out = serde_json::to_vec_pretty(&env)?;
    out.push(b'\n');
    Ok(out)
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    let env: EnvelopeIn = serde_json::from_slice(bytes).map_err(|e| {
        if e.is_eof() {
            Error::Truncated(e.to_string())
        } else {
            Error::Malformed(e.to_string())
        }
    })?;
    if env.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: env.format_version,
            expected: FORMAT_VERSION.to_string(),
        });
    }
    let bundle: ModelBundle = serde_json::from_value(env.payload).map_err(|e| Error::Malformed(e.to_string()))?;
    let computed = checksum(&bundle)?;
    if computed != env.checksum {
        return Err(Error::ChecksumMismatch {
            stored: env.checksum,
            computed,
        });
    }
    Ok(bundle)
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    write_atomic(path, &bundle_to_bytes(bundle)?)
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    bundle_from_bytes(&bytes)
}
