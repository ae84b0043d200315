//! Embedding extraction and image-to-image retrieval scoring.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::dataset::{load_image, to_batch, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::trainer::metadata_of;

/// Identity of one embedding row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowLabel {
    pub image_id: String,
    pub vehicle_id: u64,
    pub camera_id: usize,
}

/// Row-major `rows x dim` descriptors with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub data: Vec<f32>,
    pub labels: Vec<RowLabel>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>, labels: Vec<RowLabel>) -> Result<Self> {
        if data.len() != dim * labels.len() {
            return Err(Error::Shape(format!("{} values for {} rows of dim {dim}", data.len(), labels.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite embedding entry in row {}", i / dim.max(1))));
        }
        Ok(Self { dim, data, labels })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Global descriptors for every record, in manifest order. Side embeddings
/// are applied iff the model has them and `use_side` is set.
pub fn extract_embeddings(model: &Model, manifest: &DatasetManifest, use_side: bool, batch_size: usize) -> Result<EmbeddingMatrix> {
    let batch_size = batch_size.max(1);
    let size = model.spec.input_size;
    let side = use_side && model.lai.is_some();
    let mut dim = None;
    let mut data = Vec::new();
    let idx: Vec<usize> = (0..manifest.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let mut imgs = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let mut img = load_image(&manifest.records[i].path, size)?;
            img.normalize();
            imgs.push(img);
        }
        let x = to_batch(&imgs)?;
        let bundle = if side {
            model.forward(&x, Some(&metadata_of(manifest, chunk)))?
        } else {
            model.forward_without_side(&x)?
        };
        let (_, d) = bundle.global.dims2()?;
        match dim {
            None => dim = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::Shape(format!("embedding dim changed from {prev} to {d} between batches")))
            }
            _ => {}
        }
        data.extend_from_slice(bundle.global.data());
        log::debug!("embedded {}/{} images", data.len() / d, manifest.len());
    }
    let labels = manifest
        .records
        .iter()
        .map(|r| RowLabel { image_id: r.image_id.clone(), vehicle_id: r.vehicle_id, camera_id: r.camera_id })
        .collect();
    EmbeddingMatrix::new(dim.unwrap_or(model.spec.global_dim()), data, labels)
}

/// Which gallery entries are discarded before a query is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    /// Drop gallery entries sharing both vehicle id and camera with the query.
    pub filter_same_camera: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Self { filter_same_camera: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub map: f64,
    /// `cmc[k - 1]`: fraction of scored queries with a correct match within rank `k`.
    pub cmc: Vec<f64>,
    /// `None` for queries without any remaining positive.
    pub per_query_ap: Vec<Option<f64>>,
    pub n_queries: usize,
    pub n_excluded: usize,
}

impl RetrievalResult {
    /// CMC at rank `k` (saturating at the gallery length).
    pub fn cmc_at(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[k.clamp(1, n) - 1],
        }
    }

    pub fn report(&self) -> RetrievalReport {
        RetrievalReport {
            map: self.map,
            cmc1: self.cmc_at(1),
            cmc5: self.cmc_at(5),
            n_queries: self.n_queries,
            n_excluded: self.n_excluded,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub n_queries: usize,
    pub n_excluded: usize,
}

/// Squared Euclidean distance accumulated in f64 in index order, so the
/// value of a pair never depends on how queries are partitioned.
pub fn sq_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

fn is_junk(q: &RowLabel, g: &RowLabel, protocol: Protocol) -> bool {
    protocol.filter_same_camera && q.vehicle_id == g.vehicle_id && q.camera_id == g.camera_id
}

/// Average precision of a ranked relevance list; `None` without positives.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, _) in relevant.iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (rank + 1) as f64;
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Ranks the gallery for every query by ascending distance (ties broken by
/// gallery order), removes junk entries, and computes mAP and CMC.
pub fn rank_and_score(query: &EmbeddingMatrix, gallery: &EmbeddingMatrix, protocol: Protocol) -> Result<RetrievalResult> {
    if query.dim != gallery.dim {
        return Err(Error::Shape(format!("query dim {} != gallery dim {}", query.dim, gallery.dim)));
    }
    let n_gallery = gallery.rows();
    let mut first_hit = vec![0usize; n_gallery];
    let mut per_query_ap = Vec::with_capacity(query.rows());
    let mut ap_sum = 0.0;
    for (qi, ql) in query.labels.iter().enumerate() {
        let q = query.row(qi);
        let mut order: Vec<(f64, usize)> = (0..n_gallery)
            .filter(|&gi| !is_junk(ql, &gallery.labels[gi], protocol))
            .map(|gi| (sq_distance(q, gallery.row(gi)), gi))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let relevant: Vec<bool> = order.iter().map(|&(_, gi)| gallery.labels[gi].vehicle_id == ql.vehicle_id).collect();
        let ap = average_precision(&relevant);
        if let Some(ap) = ap {
            ap_sum += ap;
            let first = relevant.iter().position(|&r| r).expect("a positive exists");
            first_hit[first] += 1;
        }
        per_query_ap.push(ap);
    }
    let n_queries = per_query_ap.iter().flatten().count();
    let n_excluded = query.rows() - n_queries;
    if n_queries == 0 {
        return Err(Error::Dataset(format!("none of the {} queries has a valid gallery match", query.rows())));
    }
    let mut cmc = Vec::with_capacity(n_gallery);
    let mut acc = 0usize;
    for hits in first_hit {
        acc += hits;
        cmc.push(acc as f64 / n_queries as f64);
    }
    Ok(RetrievalResult { map: ap_sum / n_queries as f64, cmc, per_query_ap, n_queries, n_excluded })
}

const MAGIC: &[u8; 4] = b"MBRE";
const VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;

/// Path of the label sidecar that accompanies an embedding file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels.csv");
    PathBuf::from(s)
}

/// Writes `MBRE`, version, rows (u64), dim (u64), dtype (u32) and the
/// little-endian f32 payload, plus a CSV sidecar of row labels.
pub fn write_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(m.rows() as u64)?;
    w.write_u64::<LittleEndian>(m.dim as u64)?;
    w.write_u32::<LittleEndian>(DTYPE_F32)?;
    for &v in &m.data {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    let mut csv = csv::Writer::from_path(sidecar_path(path))?;
    for l in &m.labels {
        csv.serialize(l)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bad = |msg: String| Error::Dataset(format!("{}: {msg}", path.display()));
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not an embedding file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let rows = r.read_u64::<LittleEndian>()? as usize;
    let dim = r.read_u64::<LittleEndian>()? as usize;
    let dtype = r.read_u32::<LittleEndian>()?;
    if dtype != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype code {dtype}")));
    }
    let mut data = vec![0f32; rows * dim];
    r.read_f32_into::<LittleEndian>(&mut data).map_err(|e| bad(format!("truncated payload: {e}")))?;
    let mut csv = csv::Reader::from_path(sidecar_path(path))?;
    let labels = csv.deserialize().collect::<std::result::Result<Vec<RowLabel>, _>>()?;
    if labels.len() != rows {
        return Err(bad(format!("{rows} rows but {} labels", labels.len())));
    }
    EmbeddingMatrix::new(dim, data, labels)
}
