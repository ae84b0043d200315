use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Registered directory layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `image_train/`, `image_query/`, `image_test/` with `VVVV_cCCC_FFFFFFFF_N.jpg` names.
    Veri776,
    /// `train.csv`, `query.csv`, `gallery.csv` next to the images.
    Csv,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "veri776" | "veri-776" => Ok(Layout::Veri776),
            "csv" => Ok(Layout::Csv),
            _ => Err(Error::Config(format!("unknown dataset layout `{s}` (expected veri776 or csv)"))),
        }
    }
}

/// One labeled image.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub path: PathBuf,
    pub vehicle_id: u64,
    pub camera_id: usize,
    pub view_id: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub records: Vec<ImageRecord>,
    pub n_classes: usize,
}

impl DatasetManifest {
    pub fn new(split: Split, records: Vec<ImageRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::Dataset(format!("duplicate image_id {}", r.image_id)));
            }
        }
        let n_classes = records.iter().map(|r| r.vehicle_id).collect::<BTreeSet<_>>().len();
        Ok(Self { split, records, n_classes })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Dense class index per vehicle id, in ascending id order.
    pub fn class_map(&self) -> BTreeMap<u64, usize> {
        let ids: BTreeSet<u64> = self.records.iter().map(|r| r.vehicle_id).collect();
        ids.into_iter().enumerate().map(|(i, v)| (v, i)).collect()
    }

    /// Largest camera id + 1 and largest view id + 1 (1 when views are absent).
    pub fn metadata_extent(&self) -> (usize, usize) {
        let cams = self.records.iter().map(|r| r.camera_id + 1).max().unwrap_or(0);
        let views = self.records.iter().filter_map(|r| r.view_id.map(|v| v + 1)).max().unwrap_or(1);
        (cams, views)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    image_id: String,
    path: String,
    vehicle_id: u64,
    camera_id: usize,
    view_id: Option<usize>,
}

/// Writes the canonical CSV manifest; paths are stored relative to `base` when possible.
pub fn write_csv(manifest: &DatasetManifest, path: &Path, base: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &manifest.records {
        let p = r.path.strip_prefix(base).unwrap_or(&r.path);
        w.serialize(CsvRow {
            image_id: r.image_id.clone(),
            path: p.to_string_lossy().into_owned(),
            vehicle_id: r.vehicle_id,
            camera_id: r.camera_id,
            view_id: r.view_id,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV manifest; relative paths resolve against `base`.
pub fn read_csv(path: &Path, split: Split, base: &Path) -> Result<DatasetManifest> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for row in rdr.deserialize() {
        let row: CsvRow = row?;
        let p = PathBuf::from(&row.path);
        records.push(ImageRecord {
            image_id: row.image_id,
            path: if p.is_absolute() { p } else { base.join(p) },
            vehicle_id: row.vehicle_id,
            camera_id: row.camera_id,
            view_id: row.view_id,
        });
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!("no records found in {}", path.display())));
    }
    DatasetManifest::new(split, records)
}

/// Parses `0002_c002_00030600_0.jpg` into (vehicle id, zero-based camera id).
pub fn parse_veri_name(name: &str) -> Option<(u64, usize)> {
    let stem = name.rsplit_once('.')?.0;
    let mut parts = stem.split('_');
    let vid = parts.next()?.parse().ok()?;
    let cam: usize = parts.next()?.strip_prefix('c')?.parse().ok()?;
    parts.next()?;
    if cam == 0 {
        return None;
    }
    Some((vid, cam - 1))
}

fn veri_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "image_train",
        Split::Query => "image_query",
        Split::Gallery => "image_test",
    }
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("jpg" | "jpeg" | "png")
    )
}

fn load_veri(root: &Path, split: Split) -> Result<DatasetManifest> {
    let dir = root.join(veri_dir(split));
    if !dir.is_dir() {
        return Err(Error::MissingSplit(dir));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    let mut records = Vec::with_capacity(files.len());
    let mut bad = Vec::new();
    for f in files {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match parse_veri_name(&name) {
            Some((vehicle_id, camera_id)) => records.push(ImageRecord {
                image_id: name,
                path: f,
                vehicle_id,
                camera_id,
                view_id: None,
            }),
            None => bad.push(name),
        }
    }
    if !bad.is_empty() {
        return Err(Error::UnparsableNames { dir, files: bad });
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!("no records found in {}", dir.display())));
    }
    DatasetManifest::new(split, records)
}

/// Loads one split of a dataset root.
pub fn load_manifest(root: &Path, layout: Layout, split: Split) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} does not exist", root.display())));
    }
    match layout {
        Layout::Veri776 => load_veri(root, split),
        Layout::Csv => {
            let path = root.join(format!("{split}.csv"));
            if !path.is_file() {
                return Err(Error::MissingSplit(path));
            }
            read_csv(&path, split, root)
        }
    }
}
