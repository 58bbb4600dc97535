//! Dataset manifests: one CSV row per image.
//!
//! Required columns are `image_path`, `image_id` and `subject_id`. Optional
//! columns: `side` (L/R/U), `split` (train/test/none), `fold`, `bbox_x`,
//! `bbox_y`, `bbox_w`, `bbox_h`, `landmarks_path`, `augment_seed`. Relative
//! paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{IdentityLabels, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
    None,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// As written in the manifest.
    pub image_path: String,
    pub image_id: String,
    pub subject_id: String,
    pub side: Side,
    pub split: Split,
    pub fold: Option<usize>,
    /// `(x, y, w, h)` with top-left origin.
    pub bbox: Option<[f64; 4]>,
    pub landmarks_path: Option<String>,
    /// Set on replicated rows produced by subject balancing.
    pub augment_seed: Option<u64>,
}

impl ManifestEntry {
    pub fn new(image_path: &str, image_id: &str, subject_id: &str) -> Self {
        ManifestEntry {
            image_path: image_path.to_string(),
            image_id: image_id.to_string(),
            subject_id: subject_id.to_string(),
            side: Side::Unknown,
            split: Split::None,
            fold: None,
            bbox: None,
            landmarks_path: None,
            augment_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Directory that relative paths resolve against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

const COLUMNS: [&str; 12] = [
    "image_path",
    "image_id",
    "subject_id",
    "side",
    "split",
    "fold",
    "bbox_x",
    "bbox_y",
    "bbox_w",
    "bbox_h",
    "landmarks_path",
    "augment_seed",
];

impl DatasetManifest {
    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn image_path(&self, e: &ManifestEntry) -> PathBuf {
        self.resolve(&e.image_path)
    }

    pub fn landmarks_path(&self, e: &ManifestEntry) -> Option<PathBuf> {
        e.landmarks_path.as_deref().map(|p| self.resolve(p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Result<IdentityLabels> {
        IdentityLabels::new(
            self.entries
                .iter()
                .map(|e| (e.image_id.clone(), e.subject_id.clone(), e.side))
                .collect(),
        )
    }

    pub fn filter(&self, keep: impl Fn(&ManifestEntry) -> bool) -> DatasetManifest {
        DatasetManifest {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    /// Parse manifest text. File existence is checked when `check_files` is set.
    pub fn parse(text: &str, root: &Path, check_files: bool) -> Result<DatasetManifest> {
        if text.trim().is_empty() {
            return Err(Error::parse(1, 1, "empty manifest"));
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(csv_error)?.clone();
        let mut index = [None; COLUMNS.len()];
        for (i, h) in headers.iter().enumerate() {
            match COLUMNS.iter().position(|c| *c == h) {
                Some(k) => index[k] = Some(i),
                None => return Err(Error::parse(1, i as u64 + 1, format!("unknown column `{h}`"))),
            }
        }
        for k in 0..3 {
            if index[k].is_none() {
                return Err(Error::parse(1, 1, format!("missing required column `{}`", COLUMNS[k])));
            }
        }
        let manifest_root = root.to_path_buf();
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for record in reader.records() {
            let record = record.map_err(csv_error)?;
            let line = record.position().map_or(0, |p| p.line());
            let field = |k: usize| -> Option<(&str, u64)> {
                index[k]
                    .and_then(|i| record.get(i).map(|v| (v, i as u64 + 1)))
                    .filter(|(v, _)| !v.is_empty())
            };
            let required = |k: usize| -> Result<&str> {
                field(k)
                    .map(|(v, _)| v)
                    .ok_or_else(|| Error::parse(line, index[k].unwrap() as u64 + 1, format!("empty `{}`", COLUMNS[k])))
            };
            let mut e = ManifestEntry::new(required(0)?, required(1)?, required(2)?);
            if let Some((v, col)) = field(3) {
                e.side = match v {
                    "L" | "l" => Side::Left,
                    "R" | "r" => Side::Right,
                    "U" | "u" => Side::Unknown,
                    _ => return Err(Error::parse(line, col, format!("side must be L, R or U, got `{v}`"))),
                };
            }
            if let Some((v, col)) = field(4) {
                e.split = match v {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    "none" => Split::None,
                    _ => return Err(Error::parse(line, col, format!("split must be train, test or none, got `{v}`"))),
                };
            }
            if let Some((v, col)) = field(5) {
                e.fold = Some(v.parse().map_err(|_| Error::parse(line, col, format!("bad fold `{v}`")))?);
            }
            let bbox: Vec<Option<(f64, u64)>> = (6..10)
                .map(|k| {
                    field(k)
                        .map(|(v, col)| v.parse::<f64>().map(|x| (x, col)).map_err(|_| Error::parse(line, col, format!("bad number `{v}`"))))
                        .transpose()
                })
                .collect::<Result<_>>()?;
            match bbox.iter().filter(|b| b.is_some()).count() {
                0 => {}
                4 => {
                    let b: Vec<(f64, u64)> = bbox.into_iter().flatten().collect();
                    for &(v, col) in &b {
                        if !v.is_finite() {
                            return Err(Error::parse(line, col, "bbox value is not finite"));
                        }
                    }
                    if !(b[2].0 > 0.0 && b[3].0 > 0.0) {
                        return Err(Error::parse(line, b[2].1, "bbox width and height must be positive"));
                    }
                    e.bbox = Some([b[0].0, b[1].0, b[2].0, b[3].0]);
                }
                _ => {
                    let col = index[6].unwrap_or(0) as u64 + 1;
                    return Err(Error::parse(line, col, "bbox needs all of bbox_x, bbox_y, bbox_w, bbox_h"));
                }
            }
            e.landmarks_path = field(10).map(|(v, _)| v.to_string());
            if let Some((v, col)) = field(11) {
                e.augment_seed = Some(v.parse().map_err(|_| Error::parse(line, col, format!("bad seed `{v}`")))?);
            }
            if !seen.insert(e.image_id.clone()) {
                return Err(Error::DuplicateId(e.image_id));
            }
            entries.push(e);
        }
        let manifest = DatasetManifest {
            root: manifest_root,
            entries,
        };
        if check_files {
            for e in &manifest.entries {
                let p = manifest.image_path(e);
                if !p.exists() {
                    return Err(Error::MissingFile(p));
                }
                if let Some(p) = manifest.landmarks_path(e) {
                    if !p.exists() {
                        return Err(Error::MissingFile(p));
                    }
                }
            }
        }
        Ok(manifest)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS).map_err(csv_error)?;
        for e in &self.entries {
            let side = match e.side {
                Side::Left => "L",
                Side::Right => "R",
                Side::Unknown => "U",
            };
            let bbox = e.bbox.map(|b| b.map(|v| v.to_string())).unwrap_or_default();
            let mut row = vec![
                e.image_path.clone(),
                e.image_id.clone(),
                e.subject_id.clone(),
                side.to_string(),
                e.split.as_str().to_string(),
                e.fold.map(|f| f.to_string()).unwrap_or_default(),
            ];
            row.extend(bbox);
            row.push(e.landmarks_path.clone().unwrap_or_default());
            row.push(e.augment_seed.map(|s| s.to_string()).unwrap_or_default());
            w.write_record(&row).map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Read and validate a manifest; referenced files must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::parse(&text, &root, true)
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    let (line, column) = match e.position() {
        Some(p) => (p.line(), 1),
        None => (0, 0),
    };
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(e.to_string())),
        _ => Error::parse(line, column, e.to_string()),
    }
}
