//! Run manifest and content digests of stage inputs and outputs.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Name of the per-stage marker written next to the stage outputs.
pub const MARKER: &str = ".stage.json";

/// Digests keyed by `label/relative/path`.
pub type DigestMap = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Digest over the config hash and every input file digest.
    pub input_digest: String,
    pub inputs: DigestMap,
    pub outputs: DigestMap,
    pub seconds: f64,
    /// The stage found matching outputs from an earlier run and did nothing.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(config_hash: String, seed: u64) -> Self {
        let versions = [
            ("forge", env!("CARGO_PKG_VERSION")),
            ("checkpoint_format", "1"),
            ("frames_format", "1"),
            ("embedding_format", "1"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Self {
            config_hash,
            seed,
            versions,
            stages: Vec::new(),
        }
    }

    /// Everything in the manifest that must be reproducible: stage names with
    /// their input and output digests, but no timings or skip flags.
    pub fn digests(&self) -> Vec<(&str, &str, &DigestMap)> {
        self.stages
            .iter()
            .map(|s| (s.name.as_str(), s.input_digest.as_str(), &s.outputs))
            .collect()
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> io::Result<String> {
    Ok(digest_bytes(&fs::read(path)?))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if e.file_type()?.is_dir() {
            walk(&p, out)?;
        } else if e.file_name() != MARKER {
            out.push(p);
        }
    }
    Ok(())
}

/// Digests of a file, or of every file below a directory (markers excluded),
/// keyed by `label` joined with the path relative to `root`.
pub fn digest_tree(root: &Path, label: &str) -> io::Result<DigestMap> {
    let mut map = DigestMap::new();
    if root.is_file() {
        map.insert(label.to_string(), digest_file(root)?);
        return Ok(map);
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    for f in files {
        let rel = f.strip_prefix(root).expect("walked below root");
        let key = format!("{label}/{}", rel.to_string_lossy().replace('\\', "/"));
        map.insert(key, digest_file(&f)?);
    }
    Ok(map)
}

/// One digest over a config hash and a digest map.
pub fn combined_digest(config_hash: &str, inputs: &DigestMap) -> String {
    let mut h = Sha256::new();
    h.update(config_hash.as_bytes());
    for (k, v) in inputs {
        h.update(b"\0");
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_digest_ignores_markers_and_is_order_stable() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("b")).unwrap();
        fs::write(dir.path().join("b/x.txt"), "x").unwrap();
        fs::write(dir.path().join("a.txt"), "a").unwrap();
        fs::write(dir.path().join(MARKER), "{}").unwrap();
        let m = digest_tree(dir.path(), "out").unwrap();
        assert_eq!(m.keys().collect::<Vec<_>>(), ["out/a.txt", "out/b/x.txt"]);
        assert_eq!(m["out/a.txt"], digest_bytes(b"a"));
        let c1 = combined_digest("h", &m);
        assert_eq!(c1, combined_digest("h", &m.clone()));
        assert_ne!(c1, combined_digest("other", &m));
    }
}
