//! Label manifests, exclusions, balanced sampling and train/test splits.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::classifier::{Abnormality, ClassifierError, Example};
use crate::evaluation::LabeledTriple;
use crate::exec::ExecMode;
use crate::imaging::{self, ImageFormat, ImagingError};
use crate::rng;

/// Header of the native manifest format.
pub const MANIFEST_HEADER: [&str; 5] = ["image_id", "path", "cardiomegaly", "effusion", "consolidation"];

const NIH_ID_COLUMN: &str = "Image Index";
const NIH_FINDINGS_COLUMN: &str = "Finding Labels";
const NIH_FINDINGS: [&str; 3] = ["Cardiomegaly", "Effusion", "Consolidation"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("line {line}: label {value:?} is not 0 or 1")]
    BadLabel { line: u64, value: String },
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("label file is empty")]
    EmptyFile,
    #[error("{requested} positives requested but only {available} available")]
    InsufficientPositives { requested: usize, available: usize },
    #[error("{requested} negatives requested but only {available} available")]
    InsufficientNegatives { requested: usize, available: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("train fraction {0} is not strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("csv: {0}")]
    Csv(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: ImagingError },
}

impl From<csv::Error> for DatasetError {
    fn from(e: csv::Error) -> Self {
        DatasetError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image_id: String,
    pub path: PathBuf,
    pub labels: LabeledTriple,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryItem {
    pub image_id: String,
    pub path: PathBuf,
    pub label: u8,
    /// Full triple of the source record, kept so splits can be written back
    /// in the native format.
    pub labels: LabeledTriple,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryDataset {
    pub abnormality: Abnormality,
    pub items: Vec<BinaryItem>,
}

impl BinaryDataset {
    pub fn from_records(abnormality: Abnormality, records: &[ManifestRecord]) -> Self {
        BinaryDataset {
            abnormality,
            items: records.iter().map(|r| binary_item(r, abnormality)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.items.iter().filter(|i| i.label == 1).count()
    }

    pub fn records(&self) -> Vec<ManifestRecord> {
        self.items
            .iter()
            .map(|i| ManifestRecord {
                image_id: i.image_id.clone(),
                path: i.path.clone(),
                labels: i.labels,
            })
            .collect()
    }
}

fn binary_item(r: &ManifestRecord, abnormality: Abnormality) -> BinaryItem {
    BinaryItem {
        image_id: r.image_id.clone(),
        path: r.path.clone(),
        label: u8::from(r.labels.get(abnormality)),
        labels: r.labels,
    }
}

fn reader(doc: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(doc.as_bytes())
}

fn check_unique(records: &[ManifestRecord]) -> Result<(), DatasetError> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.image_id.as_str()) {
            return Err(DatasetError::DuplicateId(r.image_id.clone()));
        }
    }
    Ok(())
}

/// Parses a native `image_id,path,cardiomegaly,effusion,consolidation` manifest.
pub fn load_manifest(doc: &str) -> Result<Vec<ManifestRecord>, DatasetError> {
    let mut rdr = reader(doc);
    let header = rdr.headers()?;
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(DatasetError::BadHeader(format!(
            "expected {:?}, found {:?}",
            MANIFEST_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let mut bits = [false; 3];
        for (k, bit) in bits.iter_mut().enumerate() {
            *bit = match &row[2 + k] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(DatasetError::BadLabel {
                        line,
                        value: other.to_string(),
                    })
                }
            };
        }
        records.push(ManifestRecord {
            image_id: row[0].to_string(),
            path: PathBuf::from(&row[1]),
            labels: LabeledTriple(bits),
        });
    }
    check_unique(&records)?;
    Ok(records)
}

/// Parses an NIH-style label file. Extra columns are ignored; each target
/// finding is set by exact membership in the `|`-separated finding list.
pub fn ingest_nih_labels(doc: &str, image_root: &Path) -> Result<Vec<ManifestRecord>, DatasetError> {
    if doc.trim().is_empty() {
        return Err(DatasetError::EmptyFile);
    }
    let mut rdr = reader(doc);
    let header = rdr.headers()?.clone();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::BadHeader(format!("missing column {name:?}")))
    };
    let (id_col, findings_col) = (column(NIH_ID_COLUMN)?, column(NIH_FINDINGS_COLUMN)?);
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let image_id = row[id_col].to_string();
        let findings: Vec<&str> = row[findings_col].split('|').map(str::trim).collect();
        let labels = LabeledTriple(NIH_FINDINGS.map(|f| findings.contains(&f)));
        records.push(ManifestRecord {
            path: image_root.join(&image_id),
            image_id,
            labels,
        });
    }
    check_unique(&records)?;
    Ok(records)
}

/// Result of [`apply_exclusions`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Excluded {
    pub records: Vec<ManifestRecord>,
    /// Ids listed for exclusion that matched no record.
    pub unknown_ids: Vec<String>,
}

/// Drops records listed in `exclusion_list` (one id per line, `#` comments).
pub fn apply_exclusions(records: Vec<ManifestRecord>, exclusion_list: &str) -> Excluded {
    let mut listed: Vec<&str> = Vec::new();
    for line in exclusion_list.lines() {
        let id = line.split('#').next().unwrap_or_default().trim();
        if !id.is_empty() && !listed.contains(&id) {
            listed.push(id);
        }
    }
    let known: HashSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    let unknown_ids = listed.iter().filter(|id| !known.contains(*id)).map(|id| id.to_string()).collect();
    let drop: HashSet<&str> = listed.into_iter().collect();
    let records = records.into_iter().filter(|r| !drop.contains(r.image_id.as_str())).collect();
    Excluded { records, unknown_ids }
}

/// Replaces the labels of records whose id appears in `overrides`.
/// Returns the ids in `overrides` that matched nothing.
pub fn apply_overrides(records: &mut [ManifestRecord], overrides: &[ManifestRecord]) -> Vec<String> {
    let mut unknown = Vec::new();
    for o in overrides {
        match records.iter_mut().find(|r| r.image_id == o.image_id) {
            Some(r) => r.labels = o.labels,
            None => unknown.push(o.image_id.clone()),
        }
    }
    unknown
}

/// Draws `n_pos` positives and `n_neg` negatives without replacement.
pub fn balanced_sample(
    records: &[ManifestRecord],
    abnormality: Abnormality,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<BinaryDataset, DatasetError> {
    let (mut pos, mut neg): (Vec<&ManifestRecord>, Vec<&ManifestRecord>) =
        records.iter().partition(|r| r.labels.get(abnormality));
    if pos.len() < n_pos {
        return Err(DatasetError::InsufficientPositives {
            requested: n_pos,
            available: pos.len(),
        });
    }
    if neg.len() < n_neg {
        return Err(DatasetError::InsufficientNegatives {
            requested: n_neg,
            available: neg.len(),
        });
    }
    let mut rng = rng::seeded(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut items: Vec<BinaryItem> = pos[..n_pos]
        .iter()
        .chain(&neg[..n_neg])
        .map(|r| binary_item(r, abnormality))
        .collect();
    items.shuffle(&mut rng);
    Ok(BinaryDataset { abnormality, items })
}

/// Number of training items for `n` items at `fraction`.
///
/// The product is nudged by 1e-9 before flooring so that fractions without an
/// exact binary representation (0.29 × 100 = 28.999…) land on the integer.
pub fn train_size(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction + 1e-9).floor() as usize).min(n)
}

/// Seeded shuffle, then the first `train_size(n, fraction)` items train.
pub fn split(
    dataset: &BinaryDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(BinaryDataset, BinaryDataset), DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(train_fraction));
    }
    if dataset.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let mut items = dataset.items.clone();
    items.shuffle(&mut rng::seeded(seed));
    let test = items.split_off(train_size(items.len(), train_fraction));
    let wrap = |items| BinaryDataset {
        abnormality: dataset.abnormality,
        items,
    };
    Ok((wrap(items), wrap(test)))
}

/// Serializes records in the native manifest format.
pub fn write_manifest(records: &[ManifestRecord]) -> Result<String, DatasetError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)?;
    for r in records {
        let bit = |b: bool| if b { "1" } else { "0" };
        let [c, e, k] = r.labels.0;
        w.write_record([r.image_id.as_str(), &r.path.to_string_lossy(), bit(c), bit(e), bit(k)])?;
    }
    let bytes = w.into_inner().map_err(|e| DatasetError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output of utf-8 input"))
}

/// Resolves relative record paths against `base`.
pub fn resolve_paths(records: &mut [ManifestRecord], base: &Path) {
    for r in records {
        if r.path.is_relative() {
            r.path = base.join(&r.path);
        }
    }
}

fn format_for(path: &Path, bytes: &[u8]) -> Result<ImageFormat, ImagingError> {
    if let Some(f) = ImageFormat::detect(bytes) {
        return Ok(f);
    }
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
    ext.parse()
}

/// Reads and preprocesses one image file.
pub fn load_image(path: &Path) -> Result<imaging::PreprocessOutput, DatasetError> {
    let bytes = std::fs::read(path).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let wrap = |source| DatasetError::Image {
        path: path.to_path_buf(),
        source,
    };
    let format = format_for(path, &bytes).map_err(wrap)?;
    imaging::preprocess(&bytes, format).map_err(wrap)
}

/// Loads every item's image and cuts the segment its abnormality is routed to.
pub fn load_examples(dataset: &BinaryDataset, exec: ExecMode) -> Result<Vec<Example>, DatasetError> {
    let segment = dataset.abnormality.segment();
    exec.map(&dataset.items, |item| {
        let pre = load_image(&item.path)?;
        Example::from_segment(pre.segment(segment), item.label).map_err(|e: ClassifierError| DatasetError::Io {
            path: item.path.clone(),
            message: e.to_string(),
        })
    })
    .into_iter()
    .collect()
}
