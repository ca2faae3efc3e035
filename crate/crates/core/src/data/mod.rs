//! Dataset ingestion: file-name parsing, directory scanning, splitting,
//! preprocessing, augmentation and synthetic dataset generation.

mod augment;
mod filename;
mod preprocess;
mod scan;
mod split;
mod synth;

pub use augment::{apply_to_image, augment, augment_tensor, AugmentDraws};
pub use filename::{format_filename, parse_filename, ParsedName};
pub use preprocess::{
    letterbox_geometry, load_tensor, preprocess_image, resize_area, DEFAULT_INPUT_SIZE,
    IMAGENET_MEAN, IMAGENET_STD,
};
pub use scan::{read_manifest, scan_dataset, write_manifest, DatasetTally, SkippedFile};
pub use split::{make_splits, read_split_file, write_split_file, SplitSpec, Splits, SPLIT_FILES};
pub use synth::{synth_dataset, SynthSpec};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    /// 1 for the positive (malignant) class.
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Benign => 0,
            Label::Malignant => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Optical magnification of a capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Magnification {
    X40,
    X100,
    X200,
    X400,
}

impl Magnification {
    pub const ALL: [Magnification; 4] = [
        Magnification::X40,
        Magnification::X100,
        Magnification::X200,
        Magnification::X400,
    ];

    pub fn value(self) -> u32 {
        match self {
            Magnification::X40 => 40,
            Magnification::X100 => 100,
            Magnification::X200 => 200,
            Magnification::X400 => 400,
        }
    }
}

impl TryFrom<u32> for Magnification {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        match v {
            40 => Ok(Magnification::X40),
            100 => Ok(Magnification::X100),
            200 => Ok(Magnification::X200),
            400 => Ok(Magnification::X400),
            other => Err(Error::invalid(format!(
                "magnification must be one of 40, 100, 200, 400; got {other}"
            ))),
        }
    }
}

impl From<Magnification> for u32 {
    fn from(m: Magnification) -> u32 {
        m.value()
    }
}

impl FromStr for Magnification {
    type Err = Error;

    /// Accepts `40`, `40x` or `40X`.
    fn from_str(s: &str) -> Result<Self> {
        let digits = s.trim().trim_end_matches(['x', 'X']);
        let v: u32 = digits
            .parse()
            .map_err(|_| Error::invalid(format!("not a magnification: `{s}`")))?;
        Magnification::try_from(v)
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}X", self.value())
    }
}

/// Tumor subtype code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Subtype {
    /// Adenosis.
    A,
    /// Fibroadenoma.
    F,
    /// Phyllodes tumor.
    PT,
    /// Tubular adenoma.
    TA,
    /// Ductal carcinoma.
    DC,
    /// Lobular carcinoma.
    LC,
    /// Mucinous carcinoma.
    MC,
    /// Papillary carcinoma.
    PC,
}

impl Subtype {
    pub const ALL: [Subtype; 8] = [
        Subtype::A,
        Subtype::F,
        Subtype::PT,
        Subtype::TA,
        Subtype::DC,
        Subtype::LC,
        Subtype::MC,
        Subtype::PC,
    ];

    pub fn label(self) -> Label {
        match self {
            Subtype::A | Subtype::F | Subtype::PT | Subtype::TA => Label::Benign,
            Subtype::DC | Subtype::LC | Subtype::MC | Subtype::PC => Label::Malignant,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Subtype::A => "A",
            Subtype::F => "F",
            Subtype::PT => "PT",
            Subtype::TA => "TA",
            Subtype::DC => "DC",
            Subtype::LC => "LC",
            Subtype::MC => "MC",
            Subtype::PC => "PC",
        }
    }

    /// Directory name used by the public release.
    pub fn dir_name(self) -> &'static str {
        match self {
            Subtype::A => "adenosis",
            Subtype::F => "fibroadenoma",
            Subtype::PT => "phyllodes_tumor",
            Subtype::TA => "tubular_adenoma",
            Subtype::DC => "ductal_carcinoma",
            Subtype::LC => "lobular_carcinoma",
            Subtype::MC => "mucinous_carcinoma",
            Subtype::PC => "papillary_carcinoma",
        }
    }
}

impl FromStr for Subtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subtype::ALL
            .into_iter()
            .find(|t| t.code() == s)
            .ok_or_else(|| Error::invalid(format!("unknown tumor subtype `{s}`")))
    }
}

impl TryFrom<String> for Subtype {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Subtype> for String {
    fn from(s: Subtype) -> String {
        s.code().to_string()
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// One image on disk. `path` is relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub label: Label,
    pub subtype: Subtype,
    pub patient_id: String,
    pub magnification: Magnification,
    pub width: u32,
    pub height: u32,
}

/// All images found under a dataset root.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    records: Vec<ImageRecord>,
    skipped: Vec<SkippedFile>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ImageRecord>) -> Result<Self> {
        Self::with_skipped(root, records, Vec::new())
    }

    pub fn with_skipped(
        root: impl Into<PathBuf>,
        records: Vec<ImageRecord>,
        skipped: Vec<SkippedFile>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if r.subtype.label() != r.label {
                return Err(Error::Validation(format!(
                    "{}: label {} contradicts subtype {}",
                    r.path.display(),
                    r.label,
                    r.subtype
                )));
            }
            if !seen.insert(r.path.as_path()) {
                return Err(Error::DuplicatePath(r.path.clone()));
            }
        }
        Ok(Self {
            root: root.into(),
            records,
            skipped,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn skipped(&self) -> &[SkippedFile] {
        &self.skipped
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// Absolute (root-joined) path of a record.
    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Image counts per (magnification, label), recomputed from the records.
    pub fn counts(&self) -> BTreeMap<(Magnification, Label), usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry((r.magnification, r.label)).or_insert(0) += 1;
        }
        out
    }

    pub fn tally(&self) -> DatasetTally {
        DatasetTally::from_counts(&self.counts())
    }

    /// Records at one magnification, in manifest order.
    pub fn at_magnification(&self, mag: Magnification) -> Vec<ImageRecord> {
        self.records
            .iter()
            .filter(|r| r.magnification == mag)
            .cloned()
            .collect()
    }

    /// Looks up records by relative path (as stored in split files).
    pub fn lookup(&self, paths: &[PathBuf]) -> Result<Vec<ImageRecord>> {
        let index: std::collections::HashMap<&Path, &ImageRecord> =
            self.records.iter().map(|r| (r.path.as_path(), r)).collect();
        paths
            .iter()
            .map(|p| {
                index.get(p.as_path()).map(|r| (*r).clone()).ok_or_else(|| {
                    Error::Validation(format!("{} is not in the manifest", p.display()))
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn magnification_parsing() {
        assert_eq!("40".parse::<Magnification>().unwrap(), Magnification::X40);
        assert_eq!(
            "400X".parse::<Magnification>().unwrap(),
            Magnification::X400
        );
        assert!("50".parse::<Magnification>().is_err());
        assert_eq!(Magnification::X200.to_string(), "200X");
    }

    #[test]
    fn subtype_classes() {
        let benign: Vec<_> = Subtype::ALL
            .iter()
            .filter(|s| s.label() == Label::Benign)
            .collect();
        assert_eq!(benign.len(), 4);
        assert_eq!("PT".parse::<Subtype>().unwrap(), Subtype::PT);
        assert!("XX".parse::<Subtype>().is_err());
    }

    #[test]
    fn manifest_rejects_duplicates_and_contradictions() {
        let rec = ImageRecord {
            path: "a.png".into(),
            label: Label::Benign,
            subtype: Subtype::A,
            patient_id: "1-1".into(),
            magnification: Magnification::X40,
            width: 10,
            height: 10,
        };
        assert!(matches!(
            DatasetManifest::new("/", vec![rec.clone(), rec.clone()]),
            Err(Error::DuplicatePath(_))
        ));
        let bad = ImageRecord {
            label: Label::Malignant,
            ..rec
        };
        assert!(matches!(
            DatasetManifest::new("/", vec![bad]),
            Err(Error::Validation(_))
        ));
    }
}
