//! Dataset manifests: which image belongs to which writer and split.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigproc::{read_png, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Writers used to learn features.
    Dev,
    /// Writers enrolled for verification.
    Exploit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub writer: u32,
    pub forgery: bool,
    pub split: Split,
    pub dpi: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Provenance {
    Generator { seed: u64 },
    External { source: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    canvas_set: Option<String>,
    provenance: Provenance,
}

const FORMAT: &str = "sigspp-manifest";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Canvas-set file, relative to the manifest's directory.
    pub canvas_set: Option<String>,
    pub provenance: Provenance,
}

impl DatasetManifest {
    /// Development and exploitation writers must not overlap.
    pub fn validate(&self) -> Result<()> {
        let dev = self.writers(Split::Dev);
        let shared: Vec<u32> = self.writers(Split::Exploit).intersection(&dev).copied().collect();
        if !shared.is_empty() {
            return Err(Error::Data(format!(
                "writers {shared:?} appear in both the development and exploitation splits"
            )));
        }
        Ok(())
    }

    pub fn writers(&self, split: Split) -> BTreeSet<u32> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.writer).collect()
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = (usize, &ManifestRecord)> {
        self.records.iter().enumerate().filter(move |(_, r)| r.split == split)
    }

    /// Header line followed by one JSON record per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut out = Vec::new();
        let header = Header {
            format: FORMAT.into(),
            version: 1,
            canvas_set: self.canvas_set.clone(),
            provenance: self.provenance.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes")).expect("vec write");
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r).expect("record serializes")).expect("vec write");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |n: usize, e: &dyn std::fmt::Display| Error::Data(format!("{}:{n}: {e}", path.display()));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| bad(1, &"empty manifest"))?;
        let header: Header = serde_json::from_str(first).map_err(|e| bad(1, &e))?;
        if header.format != FORMAT || header.version != 1 {
            return Err(bad(1, &format!("unsupported manifest {} v{}", header.format, header.version)));
        }
        let records = lines
            .map(|(n, l)| serde_json::from_str(l).map_err(|e| bad(n + 1, &e)))
            .collect::<Result<Vec<ManifestRecord>>>()?;
        let m = DatasetManifest { records, canvas_set: header.canvas_set, provenance: header.provenance };
        m.validate()?;
        Ok(m)
    }

    /// Reads every image, resolving paths against `root`.
    pub fn load_images(&self, root: &Path) -> Result<Vec<Raster>> {
        self.records.iter().map(|r| read_png(&root.join(&r.path))).collect()
    }
}

/// Directory that manifest-relative paths resolve against.
pub fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(writer: u32, split: Split) -> ManifestRecord {
        ManifestRecord { path: format!("w{writer}.png"), writer, forgery: false, split, dpi: 300 }
    }

    #[test]
    fn overlap_is_rejected() {
        let m = DatasetManifest {
            records: vec![rec(1, Split::Dev), rec(2, Split::Exploit), rec(1, Split::Exploit)],
            canvas_set: None,
            provenance: Provenance::External { source: "test".into() },
        };
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("[1]"), "{err}");
    }

    #[test]
    fn round_trip_and_load_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.jsonl");
        let m = DatasetManifest {
            records: vec![rec(1, Split::Dev), rec(2, Split::Exploit)],
            canvas_set: Some("canvas.json".into()),
            provenance: Provenance::Generator { seed: 4 },
        };
        m.save(&p).unwrap();
        assert_eq!(DatasetManifest::load(&p).unwrap(), m);

        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str(&serde_json::to_string(&rec(2, Split::Dev)).unwrap());
        fs::write(&p, text).unwrap();
        assert!(DatasetManifest::load(&p).is_err());
    }
}
