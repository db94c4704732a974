//! Run manifests: everything needed to repeat a run, written before any
//! artifact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Build {
    pub version: String,
    pub git_describe: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub precision: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<PathBuf>,
    pub build: Build,
    pub started_at: DateTime<Utc>,
}

/// SHA-256 of a file, or of every file under a directory in name order
/// (each contributing its relative path and contents).
pub fn digest(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect(path, &mut files)?;
        files.sort();
        for f in files {
            h.update(f.strip_prefix(path).unwrap_or(&f).to_string_lossy().as_bytes());
            h.update([0]);
            feed(&f, &mut h)?;
        }
    } else {
        feed(path, &mut h)?;
    }
    Ok(format!("{:x}", h.finalize()))
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = e?.path();
        if p.is_dir() {
            collect(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn feed(path: &Path, h: &mut Sha256) -> Result<()> {
    let mut r = BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            return Ok(());
        }
        h.update(&buf[..n]);
    }
}

impl RunManifest {
    pub fn new(command: &str, precision: &str) -> RunManifest {
        RunManifest {
            command: command.into(),
            argv: std::env::args().collect(),
            precision: precision.into(),
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            build: Build {
                version: env!("CARGO_PKG_VERSION").into(),
                git_describe: env!("BATKIT_GIT_DESCRIBE").into(),
            },
            started_at: Utc::now(),
        }
    }

    pub fn config(&mut self, c: &impl Serialize) -> Result<&mut Self> {
        self.config = serde_json::to_value(c)?;
        Ok(self)
    }

    pub fn seed(&mut self, name: &str, v: u64) -> &mut Self {
        self.seeds.insert(name.into(), v);
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        self.inputs.push(FileDigest {
            path: path.to_path_buf(),
            sha256: digest(path)?,
        });
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text)
            .with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// `<output>.manifest.json` next to the primary output, or
/// `batkit-<command>.manifest.json` when the command has none.
pub fn default_path(command: &str, primary: Option<&Path>) -> PathBuf {
    match primary {
        Some(p) => {
            let mut s = p.as_os_str().to_owned();
            s.push(".manifest.json");
            PathBuf::from(s)
        }
        None => PathBuf::from(format!("batkit-{command}.manifest.json")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_matches_known_vector() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, "abc").unwrap();
        assert_eq!(
            digest(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn directory_digest_depends_on_names_and_contents() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a"), "1").unwrap();
        std::fs::write(dir.path().join("b"), "2").unwrap();
        let d1 = digest(dir.path()).unwrap();
        std::fs::rename(dir.path().join("b"), dir.path().join("c")).unwrap();
        assert_ne!(d1, digest(dir.path()).unwrap());
    }

    #[test]
    fn default_paths() {
        assert_eq!(
            default_path("pretrain", Some(Path::new("out/m.bgpt"))),
            PathBuf::from("out/m.bgpt.manifest.json")
        );
        assert_eq!(
            default_path("eval", None),
            PathBuf::from("batkit-eval.manifest.json")
        );
    }
}
