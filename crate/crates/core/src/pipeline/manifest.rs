//! Stage manifests, digests and line-delimited artifact I/O.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum Status {
    Ok,
    Degenerate(String),
    Failed(String),
}

impl Status {
    pub fn is_failed(&self) -> bool {
        matches!(self, Status::Failed(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub input_digest: String,
    pub output_digest: String,
    pub statuses: BTreeMap<String, Status>,
}

impl StageManifest {
    pub fn count(&self, pred: impl Fn(&Status) -> bool) -> usize {
        self.statuses.values().filter(|s| pred(s)).count()
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a value's canonical JSON form.
pub fn digest_of<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("digest input serializes"))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    out
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedRecord(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

/// Directory layout of one stage: `<out>/<stage>/{manifest.json, <file>}`.
#[derive(Debug, Clone)]
pub struct StageDir {
    pub stage: &'static str,
    pub dir: PathBuf,
    pub file: &'static str,
}

impl StageDir {
    pub fn new(out: &Path, stage: &'static str, file: &'static str) -> Self {
        StageDir {
            stage,
            dir: out.join(stage),
            file,
        }
    }

    pub fn output(&self) -> PathBuf {
        self.dir.join(self.file)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    pub fn manifest(&self) -> Result<Option<StageManifest>> {
        let path = self.manifest_path();
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
    }

    /// Manifest of a stage another stage depends on; its output must still
    /// be intact.
    pub fn require(&self) -> Result<StageManifest> {
        let missing = || Error::MissingPrerequisiteStage(self.stage.to_string());
        let manifest = self.manifest()?.ok_or_else(missing)?;
        if !self.output().exists() || file_digest(&self.output())? != manifest.output_digest {
            return Err(missing());
        }
        Ok(manifest)
    }

    /// The manifest if this stage already ran on exactly `input_digest` and
    /// its output is unchanged.
    pub fn reusable(&self, input_digest: &str) -> Result<Option<StageManifest>> {
        match self.manifest()? {
            Some(m) if m.input_digest == input_digest => {
                let out = self.output();
                if out.exists() && file_digest(&out)? == m.output_digest {
                    Ok(Some(m))
                } else {
                    Ok(None)
                }
            }
            _ => Ok(None),
        }
    }

    /// Writes the output, then the manifest that vouches for it.
    pub fn commit(&self, input_digest: String, output: &[u8], statuses: BTreeMap<String, Status>) -> Result<StageManifest> {
        write_atomic(&self.output(), output)?;
        let manifest = StageManifest {
            stage: self.stage.to_string(),
            input_digest,
            output_digest: sha256_hex(output),
            statuses,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        write_atomic(&self.manifest_path(), &bytes)?;
        Ok(manifest)
    }
}
