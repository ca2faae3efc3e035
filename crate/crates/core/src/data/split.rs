use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ImageRecord, Label, Magnification};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    /// (train, val, test) fractions.
    pub ratios: [f64; 3],
    /// Keep every patient's images inside a single split.
    pub group_by_patient: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.70, 0.15, 0.15],
            group_by_patient: true,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::invalid(format!(
                "split ratios must be positive, got {:?}",
                self.ratios
            )));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

pub const SPLIT_FILES: [&str; 3] = ["train.txt", "val.txt", "test.txt"];

impl Splits {
    pub fn parts(&self) -> [&[ImageRecord]; 3] {
        [&self.train, &self.val, &self.test]
    }

    /// Writes `train.txt`, `val.txt` and `test.txt` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, part) in SPLIT_FILES.iter().zip(self.parts()) {
            write_split_file(&dir.join(name), part)?;
        }
        Ok(())
    }

    /// Reads the three split files in `dir`, resolving paths via `manifest`.
    pub fn read_from(dir: &Path, manifest: &DatasetManifest) -> Result<Self> {
        let mut parts = SPLIT_FILES
            .iter()
            .map(|name| manifest.lookup(&read_split_file(&dir.join(name))?))
            .collect::<Result<Vec<_>>>()?;
        let test = parts.pop().expect("three parts");
        let val = parts.pop().expect("three parts");
        let train = parts.pop().expect("three parts");
        Ok(Self { train, val, test })
    }
}

/// One relative path per line.
pub fn write_split_file(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        let p = r
            .path
            .to_str()
            .ok_or_else(|| Error::invalid(format!("{} is not valid UTF-8", r.path.display())))?;
        writeln!(f, "{p}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_split_file(path: &Path) -> Result<Vec<PathBuf>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if !line.is_empty() {
            out.push(PathBuf::from(line));
        }
    }
    Ok(out)
}

/// Largest-remainder apportionment of `n` units with at least one per part.
fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    for i in 0..3 {
        while counts[i] == 0 {
            let donor = (0..3)
                .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
                .expect("non-empty");
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    counts
}

/// Splits the records at `magnification` into train/val/test.
///
/// Units (patients, or single images when `group_by_patient` is off) are
/// shuffled per class, interleaved so every prefix has roughly the overall
/// class mix, and cut into contiguous chunks sized by largest remainder.
pub fn make_splits(
    manifest: &DatasetManifest,
    spec: &SplitSpec,
    magnification: Magnification,
) -> Result<Splits> {
    spec.validate()?;
    let records = manifest.at_magnification(magnification);
    if records.is_empty() {
        return Err(Error::EmptyDataset(
            manifest.root().join(magnification.to_string()),
        ));
    }
    // unit key -> records; BTreeMap keeps the pre-shuffle order canonical
    let mut units: BTreeMap<String, Vec<ImageRecord>> = BTreeMap::new();
    for r in records {
        let key = if spec.group_by_patient {
            r.patient_id.clone()
        } else {
            r.path.to_string_lossy().into_owned()
        };
        units.entry(key).or_default().push(r);
    }
    if units.len() < 3 {
        return Err(Error::SplitInfeasible(format!(
            "{} {} at {magnification}; three non-empty splits need at least 3",
            units.len(),
            if spec.group_by_patient {
                "patient(s)"
            } else {
                "image(s)"
            },
        )));
    }
    let unit_label = |rs: &[ImageRecord]| {
        let malignant = rs.iter().filter(|r| r.label == Label::Malignant).count();
        if 2 * malignant >= rs.len() {
            Label::Malignant
        } else {
            Label::Benign
        }
    };
    let mut by_class: BTreeMap<Label, Vec<Vec<ImageRecord>>> = BTreeMap::new();
    for (_, rs) in units {
        by_class.entry(unit_label(&rs)).or_default().push(rs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut positioned = Vec::new();
    for (class_idx, (_, mut group)) in by_class.into_iter().enumerate() {
        group.shuffle(&mut rng);
        let n = group.len() as f64;
        for (i, unit) in group.into_iter().enumerate() {
            positioned.push(((i as f64 + 0.5) / n, class_idx, unit));
        }
    }
    positioned.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let counts = apportion(positioned.len(), &spec.ratios);
    let mut parts: [Vec<ImageRecord>; 3] = Default::default();
    let mut it = positioned.into_iter();
    for (part, &count) in parts.iter_mut().zip(&counts) {
        for (_, _, unit) in it.by_ref().take(count) {
            part.extend(unit);
        }
        part.sort_by(|a, b| a.path.cmp(&b.path));
    }
    let [train, val, test] = parts;
    Ok(Splits { train, val, test })
}
