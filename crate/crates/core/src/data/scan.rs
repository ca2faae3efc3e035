use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::{parse_filename, DatasetManifest, ImageRecord, Label, Magnification};
use crate::error::{Error, Result};

/// A file the scanner could not use, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Recursively collects convention-named images under `root`.
///
/// Works on the public release's nested layout as well as on a flat
/// directory. Files that do not parse (or cannot be decoded) are logged and
/// listed in [`DatasetManifest::skipped`]; hidden files are ignored.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "dataset root is not a directory",
            ),
        ));
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let walker = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| e.depth() == 0 || !e.file_name().to_string_lossy().starts_with('.'));
    for entry in walker {
        let entry = entry.map_err(|e| {
            let path = e
                .path()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| root.to_path_buf());
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(root)
            .expect("walkdir yields paths under its root")
            .to_path_buf();
        let name = entry.file_name().to_string_lossy();
        let parsed = match parse_filename(&name) {
            Ok(p) => p,
            Err(e) => {
                warn!("skipping {}: {e}", rel.display());
                skipped.push(SkippedFile {
                    path: rel,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let (width, height) = match image::image_dimensions(entry.path()) {
            Ok(d) => d,
            Err(e) => {
                warn!("skipping {}: {e}", rel.display());
                skipped.push(SkippedFile {
                    path: rel,
                    reason: format!("unreadable image: {e}"),
                });
                continue;
            }
        };
        records.push(ImageRecord {
            path: rel,
            label: parsed.label,
            subtype: parsed.subtype,
            patient_id: parsed.patient_id,
            magnification: parsed.magnification,
            width,
            height,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    if !skipped.is_empty() {
        warn!(
            "{} file(s) under {} were skipped",
            skipped.len(),
            root.display()
        );
    }
    DatasetManifest::with_skipped(root, records, skipped)
}

/// Writes the manifest as CSV with columns
/// `path,label,subtype,patient_id,magnification,width,height`.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in manifest.records() {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a manifest CSV; record paths are interpreted relative to `root`.
pub fn read_manifest(path: &Path, root: &Path) -> Result<DatasetManifest> {
    let mut r = csv::Reader::from_path(path)?;
    let records = r
        .deserialize()
        .collect::<std::result::Result<Vec<ImageRecord>, _>>()?;
    if records.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    DatasetManifest::new(root, records)
}

/// Image counts per magnification and class, in the shape of the dataset's
/// published distribution table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetTally {
    /// (magnification, benign, malignant) for the four levels.
    pub rows: Vec<(Magnification, usize, usize)>,
}

impl DatasetTally {
    pub fn from_counts(counts: &BTreeMap<(Magnification, Label), usize>) -> Self {
        let get = |m, l| counts.get(&(m, l)).copied().unwrap_or(0);
        Self {
            rows: Magnification::ALL
                .into_iter()
                .map(|m| (m, get(m, Label::Benign), get(m, Label::Malignant)))
                .collect(),
        }
    }

    /// (benign, malignant, total) for one magnification.
    pub fn row(&self, mag: Magnification) -> (usize, usize, usize) {
        self.rows
            .iter()
            .find(|r| r.0 == mag)
            .map_or((0, 0, 0), |&(_, b, m)| (b, m, b + m))
    }

    /// (benign, malignant, total) over all magnifications.
    pub fn totals(&self) -> (usize, usize, usize) {
        let b = self.rows.iter().map(|r| r.1).sum::<usize>();
        let m = self.rows.iter().map(|r| r.2).sum::<usize>();
        (b, m, b + m)
    }
}

impl fmt::Display for DatasetTally {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "magnification benign malignant total")?;
        for &(mag, b, m) in &self.rows {
            writeln!(f, "{} {b} {m} {}", mag.value(), b + m)?;
        }
        let (b, m, t) = self.totals();
        write!(f, "total {b} {m} {t}")
    }
}
