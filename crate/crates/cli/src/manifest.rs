//! Run manifests: the full config, input and output digests, and the stage
//! fingerprint that decides whether a stage can be skipped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub fingerprint: String,
    /// The stage-relevant settings the fingerprint was computed from.
    pub key: Value,
    pub config: ExperimentConfig,
    /// Paths relative to the output root, mapped to SHA-256 digests.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_seconds: Option<f64>,
}

/// Everything a stage is keyed on, before it runs.
pub struct StageKey {
    pub stage: &'static str,
    pub key: Value,
    pub inputs: BTreeMap<String, String>,
}

impl StageKey {
    /// Digests `inputs` (paths relative to `root`).
    pub fn new(stage: &'static str, key: Value, root: &Path, inputs: &[PathBuf]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|rel| Ok((rel_string(rel), file_digest(&root.join(rel))?)))
            .collect::<Result<_>>()?;
        Ok(StageKey { stage, key, inputs })
    }

    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::json!({
            "stage": self.stage,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "key": self.key,
            "inputs": self.inputs,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }

    /// True when `dir` holds a manifest with this fingerprint and every output
    /// it lists is still present with the recorded digest.
    pub fn up_to_date(&self, root: &Path, dir: &Path) -> bool {
        let Ok(text) = std::fs::read_to_string(root.join(dir).join(MANIFEST_FILE)) else {
            return false;
        };
        let Ok(m) = serde_json::from_str::<Manifest>(&text) else {
            return false;
        };
        m.fingerprint == self.fingerprint()
            && m.outputs
                .iter()
                .all(|(rel, digest)| file_digest(&root.join(rel)).is_ok_and(|d| &d == digest))
    }

    pub fn write_manifest(
        self,
        root: &Path,
        dir: &Path,
        config: &ExperimentConfig,
        outputs: &[PathBuf],
        timing: Option<(SystemTime, f64)>,
    ) -> Result<()> {
        let outputs = outputs
            .iter()
            .map(|rel| Ok((rel_string(rel), file_digest(&root.join(rel))?)))
            .collect::<Result<_>>()?;
        let m = Manifest {
            stage: self.stage.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            fingerprint: self.fingerprint(),
            key: self.key,
            config: config.clone(),
            inputs: self.inputs,
            outputs,
            created_unix: timing.map(|(t, _)| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)),
            elapsed_seconds: timing.map(|(_, s)| s),
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        write_atomic(&root.join(dir).join(MANIFEST_FILE), text.as_bytes())
    }
}

/// Forward slashes on every platform so manifests compare equal.
fn rel_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    geoscore::stamps::write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn skip_requires_matching_fingerprint_and_outputs() {
        let root = tempfile::tempdir().unwrap();
        let root = root.path();
        write_atomic(&root.join("in.txt"), b"input").unwrap();
        let stage = || StageKey::new("t", serde_json::json!({"a": 1}), root, &[PathBuf::from("in.txt")]).unwrap();
        let dir = Path::new("d");
        assert!(!stage().up_to_date(root, dir));

        write_atomic(&root.join("d/out.txt"), b"out").unwrap();
        let cfg = ExperimentConfig::default();
        stage()
            .write_manifest(root, dir, &cfg, &[PathBuf::from("d/out.txt")], None)
            .unwrap();
        assert!(stage().up_to_date(root, dir));

        let other = StageKey::new("t", serde_json::json!({"a": 2}), root, &[PathBuf::from("in.txt")]).unwrap();
        assert!(!other.up_to_date(root, dir));

        write_atomic(&root.join("d/out.txt"), b"edited").unwrap();
        assert!(!stage().up_to_date(root, dir));

        write_atomic(&root.join("d/out.txt"), b"out").unwrap();
        write_atomic(&root.join("in.txt"), b"changed").unwrap();
        assert!(!stage().up_to_date(root, dir));
    }

    #[test]
    fn deterministic_manifests_have_no_clock_fields() {
        let root = tempfile::tempdir().unwrap();
        let root = root.path();
        let s = StageKey::new("t", Value::Null, root, &[]).unwrap();
        s.write_manifest(root, Path::new("."), &ExperimentConfig::default(), &[], None)
            .unwrap();
        let text = std::fs::read_to_string(root.join(MANIFEST_FILE)).unwrap();
        assert!(!text.contains("created_unix") && !text.contains("elapsed"));
        let m: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(m.config, ExperimentConfig::default());
    }
}
