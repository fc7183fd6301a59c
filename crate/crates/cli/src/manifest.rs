use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Everything a run depends on. The resolved configs are included so two
/// runs share a hash only when they simulate the same thing.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    /// Builtin label or config path as given.
    pub model: String,
    pub hw_config: Option<String>,
    pub seed: u64,
    pub out_dir: String,
    pub model_kv: String,
    pub hw_kv: String,
    pub extra: Vec<(String, String)>,
}

impl RunManifest {
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        format!("sha256:{}", hex::encode(Sha256::digest(json)))
    }
}

/// Writes report files into one directory, stamping each with the hash.
pub struct Sink {
    dir: PathBuf,
    hash: String,
}

impl Sink {
    pub fn create(dir: &Path, manifest: &RunManifest) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        let mut s = Sink {
            dir: dir.to_path_buf(),
            hash: manifest.hash(),
        };
        let doc = serde_json::json!({ "hash": s.hash, "manifest": manifest });
        let mut body = serde_json::to_string_pretty(&doc)?;
        body.push('\n');
        s.put("manifest.json", body.as_bytes())?;
        Ok(s)
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::File::create(path)?.write_all(bytes)?;
        Ok(())
    }

    /// `key = value` text; the first line carries the hash.
    pub fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let s = format!("manifest = {}\n{body}", self.hash);
        self.put(name, s.as_bytes())
    }

    /// Comma-separated data behind one `#` comment line with the hash.
    pub fn csv(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> mevit_core::Result<()>) -> Result<(), CliError> {
        let mut buf = format!("# manifest={}\n", self.hash).into_bytes();
        fill(&mut buf)?;
        self.put(name, &buf)
    }

    /// Line-delimited JSON; the first record is `{"manifest": ...}`.
    pub fn jsonl(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> mevit_core::Result<()>) -> Result<(), CliError> {
        let mut buf = serde_json::to_vec(&serde_json::json!({ "manifest": self.hash }))?;
        buf.push(b'\n');
        fill(&mut buf)?;
        self.put(name, &buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(seed: u64) -> RunManifest {
        RunManifest {
            tool: "mevit",
            version: "0",
            command: "bram".into(),
            model: "deit-b".into(),
            hw_config: None,
            seed,
            out_dir: "out".into(),
            model_kv: String::new(),
            hw_kv: String::new(),
            extra: vec![],
        }
    }

    #[test]
    fn hash_tracks_inputs() {
        assert_eq!(manifest(1).hash(), manifest(1).hash());
        assert_ne!(manifest(1).hash(), manifest(2).hash());
        assert_eq!(manifest(0).hash().len(), "sha256:".len() + 64);
    }

    #[test]
    fn files_carry_hash() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(3);
        let mut s = Sink::create(dir.path(), &m).unwrap();
        s.text("a.txt", "x = 1\n").unwrap();
        s.csv("b.csv", |w| {
            w.extend_from_slice(b"x,y\n1,2\n");
            Ok(())
        })
        .unwrap();
        for f in ["a.txt", "b.csv", "manifest.json"] {
            let body = fs::read_to_string(dir.path().join(f)).unwrap();
            assert!(body.contains(&m.hash()), "{f}");
        }
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 3);
    }
}
