//! Dataset synthesis and ingestion.
//!
//! Generators are pure functions of their arguments; batching is a seeded
//! Fisher-Yates shuffle determined by `(seed, epoch)` so shuffles replay
//! identically across reruns and resumed runs.

use std::io::Read;
use std::path::Path;

use rand_distr::{Distribution, Normal, StandardNormal};

use crate::rng::{chacha, derive_seed, fisher_yates};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("idx format error: {0}")]
    IdxFormat(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv parse error at row {row}: {msg}")]
    CsvParse { row: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Labeled classification dataset with features in rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    pub name: String,
    pub features: Tensor<S>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn from_parts(name: &str, features: Tensor<S>, labels: Vec<usize>, class_count: usize) -> Self {
        assert_eq!(features.rows(), labels.len());
        assert!(labels.iter().all(|&l| l < class_count));
        Dataset {
            name: name.to_string(),
            features,
            labels,
            class_count,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Copy of rows `start..end` as a batch tensor.
    pub fn features_slice(&self, start: usize, end: usize) -> Tensor<S> {
        let d = self.dim();
        let data = self.features.data()[start * d..end * d].to_vec();
        Tensor::from_vec(vec![end - start, d], data)
    }

    /// Gather an arbitrary set of rows.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<S>, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.features.data()[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        (Tensor::from_vec(vec![indices.len(), d], data), labels)
    }

    /// Deterministic subsample of `count` rows as a new dataset.
    pub fn subsample(&self, count: usize, seed: u64) -> Dataset<S> {
        let count = count.min(self.len());
        let mut idx: Vec<usize> = (0..self.len()).collect();
        fisher_yates(&mut idx, &mut chacha(derive_seed(seed, "subsample", &[])));
        idx.truncate(count);
        let (features, labels) = self.gather(&idx);
        Dataset {
            name: format!("{}[{}]", self.name, count),
            features,
            labels,
            class_count: self.class_count,
        }
    }
}

/// Equal-count Gaussian clusters around class centers placed deterministically
/// on the unit sphere. `spread` is the per-coordinate noise std.
pub fn make_blobs<S: Scalar>(
    seed: u64,
    n: usize,
    classes: usize,
    dim: usize,
    spread: f64,
) -> Result<Dataset<S>> {
    if classes == 0 || n == 0 || n % classes != 0 {
        return Err(DataError::InvalidCounts(format!(
            "n = {} must be a positive multiple of classes = {}",
            n, classes
        )));
    }
    let per_class = n / classes;
    let centers = blob_centers(seed, classes, dim);
    let mut rng = chacha(derive_seed(seed, "blobs-noise", &[]));
    let normal = Normal::new(0.0_f64, 1.0).unwrap();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &mu in center {
                data.push(S::from_f64(mu + spread * normal.sample(&mut rng)));
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        name: "blobs".into(),
        features: Tensor::from_vec(vec![n, dim], data),
        labels,
        class_count: classes,
    })
}

/// Class centers used by [`make_blobs`]; exposed so tests can run a
/// nearest-centroid oracle.
pub fn blob_centers(seed: u64, classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = chacha(derive_seed(seed, "blobs-centers", &[]));
    (0..classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in &mut v {
                *x /= norm;
            }
            v
        })
        .collect()
}

/// Spiral arm geometry: angular sweep per arm and the radius range. Tuned so
/// the ten-arm desk task trains to high accuracy while staying far out of
/// reach of linear classifiers.
pub const SPIRAL_TURNS: f64 = 1.1;
pub const SPIRAL_R0: f64 = 0.6;
pub const SPIRAL_R1: f64 = 2.5;

/// Interleaved spiral arms, one per class, embedded in `dim` dimensions via
/// a seeded orthonormal pair. With `noise = 0` the points lie exactly on the
/// parametric arms; the task is nonlinearly separable by construction.
pub fn make_spirals<S: Scalar>(
    seed: u64,
    n: usize,
    classes: usize,
    noise: f64,
    dim: usize,
) -> Result<Dataset<S>> {
    if classes == 0 || n == 0 || n % classes != 0 {
        return Err(DataError::InvalidCounts(format!(
            "n = {} must be a positive multiple of classes = {}",
            n, classes
        )));
    }
    if dim < 2 {
        return Err(DataError::InvalidCounts("spirals need dim >= 2".into()));
    }
    let per_class = n / classes;
    let (u, v) = plane_basis(seed, dim);
    let mut rng = chacha(derive_seed(seed, "spirals-noise", &[]));
    let normal = Normal::new(0.0_f64, 1.0).unwrap();
    let turns = SPIRAL_TURNS;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        let phase = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
        for j in 0..per_class {
            let t = (j as f64 + 0.5) / per_class as f64;
            let r = SPIRAL_R0 + (SPIRAL_R1 - SPIRAL_R0) * t;
            let theta = phase + 2.0 * std::f64::consts::PI * turns * t;
            let px = r * theta.cos() + noise * normal.sample(&mut rng);
            let py = r * theta.sin() + noise * normal.sample(&mut rng);
            for k in 0..dim {
                data.push(S::from_f64(px * u[k] + py * v[k]));
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        name: "spirals".into(),
        features: Tensor::from_vec(vec![n, dim], data),
        labels,
        class_count: classes,
    })
}

fn plane_basis(seed: u64, dim: usize) -> (Vec<f64>, Vec<f64>) {
    if dim == 2 {
        return (vec![1.0, 0.0], vec![0.0, 1.0]);
    }
    let mut rng = chacha(derive_seed(seed, "spirals-basis", &[]));
    let mut u: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut u {
        *x /= nu;
    }
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    for (x, &ux) in v.iter_mut().zip(&u) {
        *x -= dot * ux;
    }
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= nv;
    }
    (u, v)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label file pair. Pixels are scaled to `[0, 1]` and
/// images flattened row-major to `rows * cols` features.
pub fn load_idx<S: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<S>> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

pub fn parse_idx<S: Scalar>(images: &[u8], labels: &[u8]) -> Result<Dataset<S>> {
    let img_magic = read_be_u32(images, 0, "image magic")?;
    if img_magic != IDX_IMAGES_MAGIC {
        return Err(DataError::IdxFormat(format!(
            "bad image magic 0x{:08x}, want 0x{:08x}",
            img_magic, IDX_IMAGES_MAGIC
        )));
    }
    let count = read_be_u32(images, 4, "image count")? as usize;
    let rows = read_be_u32(images, 8, "image rows")? as usize;
    let cols = read_be_u32(images, 12, "image cols")? as usize;
    let dim = rows * cols;
    let payload = &images[16..];
    if payload.len() != count * dim {
        return Err(DataError::IdxFormat(format!(
            "image payload has {} bytes, want {}",
            payload.len(),
            count * dim
        )));
    }

    let lbl_magic = read_be_u32(labels, 0, "label magic")?;
    if lbl_magic != IDX_LABELS_MAGIC {
        return Err(DataError::IdxFormat(format!(
            "bad label magic 0x{:08x}, want 0x{:08x}",
            lbl_magic, IDX_LABELS_MAGIC
        )));
    }
    let lbl_count = read_be_u32(labels, 4, "label count")? as usize;
    if lbl_count != count {
        return Err(DataError::IdxFormat(format!(
            "{} labels for {} images",
            lbl_count, count
        )));
    }
    let lbl_payload = &labels[8..];
    if lbl_payload.len() != count {
        return Err(DataError::IdxFormat(format!(
            "label payload has {} bytes, want {}",
            lbl_payload.len(),
            count
        )));
    }

    let data: Vec<S> = payload.iter().map(|&b| S::from_f64(b as f64 / 255.0)).collect();
    let labels: Vec<usize> = lbl_payload.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset {
        name: "idx".into(),
        features: Tensor::from_vec(vec![count, dim], data),
        labels,
        class_count,
    })
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::IdxFormat(format!("truncated before {}", what)))
}

/// CSV ingestion: header row, last column is the integer label, the rest are
/// features. Features are used raw.
pub fn load_csv<S: Scalar>(path: &Path) -> Result<Dataset<S>> {
    let file = std::fs::File::open(path)?;
    read_csv(file)
}

pub fn read_csv<S: Scalar>(reader: impl Read) -> Result<Dataset<S>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut data: Vec<S> = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() < 2 {
            return Err(DataError::CsvParse {
                row,
                msg: "need at least one feature column and a label".into(),
            });
        }
        let d = record.len() - 1;
        if *dim.get_or_insert(d) != d {
            return Err(DataError::CsvParse {
                row,
                msg: format!("inconsistent column count {}", record.len()),
            });
        }
        for field in record.iter().take(d) {
            let v: f64 = field.trim().parse().map_err(|e| DataError::CsvParse {
                row,
                msg: format!("bad feature {:?}: {}", field, e),
            })?;
            data.push(S::from_f64(v));
        }
        let label: usize = record[d].trim().parse().map_err(|e| DataError::CsvParse {
            row,
            msg: format!("bad label {:?}: {}", &record[d], e),
        })?;
        labels.push(label);
    }
    let dim = dim.ok_or_else(|| DataError::InvalidCounts("empty csv".into()))?;
    let n = labels.len();
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset {
        name: "csv".into(),
        features: Tensor::from_vec(vec![n, dim], data),
        labels,
        class_count,
    })
}

/// Batch schedule: order is fully determined by `(seed, epoch)`.
#[derive(Debug, Clone, Copy)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: usize,
}

/// Shuffled index slices covering `0..n` exactly once; the last batch may be
/// short.
pub fn batches(n: usize, plan: &BatchPlan) -> Vec<Vec<usize>> {
    assert!(plan.batch_size >= 1, "batch_size must be >= 1");
    let mut idx: Vec<usize> = (0..n).collect();
    let seed = derive_seed(plan.seed, "batch-order", &[plan.epoch as u64]);
    fisher_yates(&mut idx, &mut chacha(seed));
    idx.chunks(plan.batch_size).map(|c| c.to_vec()).collect()
}
