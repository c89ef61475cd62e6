//! Line-oriented manifests: the persistence format shared by dataset
//! generation, separation batches, scoring, and selection.
//!
//! A manifest is UTF-8, one JSON object per line. The first line is a header
//! carrying metadata; every following line is a record. Paths inside records
//! are stored relative to the manifest's directory so a dataset tree can be
//! moved wholesale. Writes are atomic (temp file + rename).

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which model produced the pseudo ground-truth paths of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Primary,
    Reviewer,
}

/// Header line of a manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<u32>,
    /// Echo of the configuration that produced this manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    /// Creation timestamp; omitted by pipeline writers so that reruns with
    /// the same seed produce byte-identical files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
}

impl ManifestMeta {
    pub fn new(kind: impl Into<String>) -> Self {
        ManifestMeta {
            kind: kind.into(),
            ..Default::default()
        }
    }
}

/// One mixture's worth of bookkeeping. Most fields are optional because the
/// same record flows through the whole pipeline, gaining fields as it goes:
/// dataset generation fills `refs` and speaker metadata, separation fills
/// `seps`, scoring fills `scm_db`/`mscm_db`, selection fills `selected`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub mix: PathBuf,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub refs: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seps: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scm_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mscm_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Origin>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speakers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genders: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_seed: Option<u64>,
    /// Per-id processing status ("ok", "failed: ...", "unscorable: ...").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
}

impl ManifestRecord {
    pub fn new(id: impl Into<String>, mix: impl Into<PathBuf>) -> Self {
        ManifestRecord {
            id: id.into(),
            mix: mix.into(),
            refs: Vec::new(),
            seps: Vec::new(),
            scm_db: None,
            mscm_db: None,
            origin: None,
            selected: None,
            speakers: None,
            genders: None,
            snr_db: None,
            offset_seed: None,
            status: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status.as_deref().map_or(true, |s| s == "ok")
    }
}

/// A parsed manifest together with the directory its relative paths resolve
/// against.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub meta: ManifestMeta,
    pub records: Vec<ManifestRecord>,
    /// Directory of the file this manifest was read from or will be written
    /// to; base for all relative paths in the records.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(meta: ManifestMeta, base_dir: impl Into<PathBuf>) -> Self {
        Manifest {
            meta,
            records: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    /// Resolve a record-relative path against this manifest's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// Write a manifest atomically. The parent directory must exist.
pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut wr = BufWriter::new(file);
        let header = serde_json::to_string(&manifest.meta)
            .map_err(|e| Error::Config(format!("unserializable manifest meta: {e}")))?;
        writeln!(wr, "{header}").map_err(|e| Error::io(&tmp, e))?;
        for rec in &manifest.records {
            let line = serde_json::to_string(rec)
                .map_err(|e| Error::Config(format!("unserializable record {}: {e}", rec.id)))?;
            writeln!(wr, "{line}").map_err(|e| Error::io(&tmp, e))?;
        }
        wr.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Read a manifest, rejecting duplicate ids.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let rd = BufReader::new(file);
    let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();

    let mut lines = rd.lines().enumerate();
    let meta: ManifestMeta = match lines.next() {
        Some((_, Ok(line))) => serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            detail: format!("bad header: {e}"),
        })?,
        Some((_, Err(e))) => return Err(Error::io(path, e)),
        None => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                detail: "empty manifest".into(),
            })
        }
    };

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            detail: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                detail: format!("duplicate id {:?}", rec.id),
            });
        }
        records.push(rec);
    }

    Ok(Manifest {
        meta,
        records,
        base_dir,
    })
}
