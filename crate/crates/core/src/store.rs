//! Embedding sets, class-text tables and their on-disk formats.
//!
//! Embedding file (`RGBX`, little-endian):
//!
//! ```text
//! magic "RGBX" | u32 version=1 | u32 count | u32 dim
//! count × u32 labels
//! count × dim × f32 payload (row-major)
//! ```
//!
//! Class-text file (`RGBT`, little-endian):
//!
//! ```text
//! magic "RGBT" | u32 version=1 | u32 n_classes | u32 dim
//! n_classes × (u32 name_len | name_len bytes UTF-8)
//! n_classes × dim × f32 payload
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"RGBX";
pub const CLASS_TEXT_MAGIC: [u8; 4] = *b"RGBT";
pub const FORMAT_VERSION: u32 = 1;

/// Maximum allowed deviation of a stored row's norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-3;

/// A labelled matrix of unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    /// Row-major `count × dim`.
    pub data: Vec<f32>,
    pub labels: Vec<u32>,
}

impl EmbeddingSet {
    /// Builds a set and checks shape and row norms.
    pub fn new(dim: usize, data: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        let set = EmbeddingSet { dim, data, labels };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(dim: usize) -> Self {
        EmbeddingSet {
            dim,
            data: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Builds a set from f64 rows, normalizing each row.
    pub fn from_rows(dim: usize, rows: &[Vec<f64>], labels: Vec<u32>) -> Result<Self> {
        let normalized = normalize_rows(rows)?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in &normalized {
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend(row.iter().map(|&x| x as f32));
        }
        EmbeddingSet::new(dim, data, labels)
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&x| f64::from(x)).collect()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Checks shape consistency and that every row is unit norm within [`NORM_TOLERANCE`].
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidData("dim must be positive".into()));
        }
        if self.data.len() != self.labels.len() * self.dim {
            return Err(Error::InvalidData(format!(
                "payload has {} floats, expected {} rows × {} dims",
                self.data.len(),
                self.labels.len(),
                self.dim
            )));
        }
        for (i, row) in self.rows().enumerate() {
            check_unit_row(i, row)?;
        }
        Ok(())
    }

    pub fn validate_labels(&self, n_classes: usize) -> Result<()> {
        for (row, &label) in self.labels.iter().enumerate() {
            if label as usize >= n_classes {
                return Err(Error::LabelOutOfRange {
                    row,
                    label,
                    n_classes,
                });
            }
        }
        Ok(())
    }

    /// Rescales every row to exact unit norm (in f64, then rounded back to f32).
    pub fn renormalized(&self) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..self.count()).map(|i| self.row_f64(i)).collect();
        EmbeddingSet::from_rows(self.dim, &rows, self.labels.clone())
    }

    /// Selects rows by index, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        EmbeddingSet {
            dim: self.dim,
            data,
            labels,
        }
    }

    /// Indices of the rows of each class, `n_classes` buckets.
    pub fn indices_by_class(&self, n_classes: usize) -> Vec<Vec<usize>> {
        let mut buckets = vec![Vec::new(); n_classes];
        for (i, &label) in self.labels.iter().enumerate() {
            if let Some(bucket) = buckets.get_mut(label as usize) {
                bucket.push(i);
            }
        }
        buckets
    }
}

fn check_unit_row(row: usize, values: &[f32]) -> Result<()> {
    let norm = values
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::NotUnitNorm {
            row,
            norm,
            tol: NORM_TOLERANCE,
        });
    }
    Ok(())
}

/// One text embedding per class, playing the role of the prompt encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTextEmbeddings {
    pub dim: usize,
    /// Row-major `n_classes × dim`.
    pub data: Vec<f32>,
    pub class_names: Vec<String>,
}

impl ClassTextEmbeddings {
    pub fn new(dim: usize, data: Vec<f32>, class_names: Vec<String>) -> Result<Self> {
        let table = ClassTextEmbeddings {
            dim,
            data,
            class_names,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn row(&self, class: usize) -> &[f32] {
        &self.data[class * self.dim..(class + 1) * self.dim]
    }

    /// Rows widened to f64 and renormalized to exact unit norm.
    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        (0..self.n_classes())
            .map(|c| {
                let row: Vec<f64> = self.row(c).iter().map(|&x| f64::from(x)).collect();
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.into_iter().map(|x| x / n).collect()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidData("dim must be positive".into()));
        }
        if self.class_names.is_empty() {
            return Err(Error::InvalidData("class table is empty".into()));
        }
        if self.data.len() != self.class_names.len() * self.dim {
            return Err(Error::InvalidData(format!(
                "class table has {} floats, expected {} classes × {} dims",
                self.data.len(),
                self.class_names.len(),
                self.dim
            )));
        }
        for (i, row) in self.data.chunks_exact(self.dim).enumerate() {
            check_unit_row(i, row)?;
        }
        Ok(())
    }
}

/// Normalizes every row to unit Euclidean norm.
pub fn normalize_rows(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroRow(i));
            }
            Ok(row.iter().map(|x| x / norm).collect())
        })
        .collect()
}

/// Seeded random partition into `(train, val)`; both parts keep the original row order.
pub fn split_train_val(
    set: &EmbeddingSet,
    val_fraction: f64,
    seed: u64,
) -> Result<(EmbeddingSet, EmbeddingSet)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {val_fraction} is outside (0, 1)"
        )));
    }
    let count = set.count();
    if count < 2 {
        return Err(Error::InvalidArgument(
            "need at least two rows to split".into(),
        ));
    }
    let n_val = ((count as f64 * val_fraction).round() as usize).clamp(1, count - 1);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut val_idx = order[..n_val].to_vec();
    let mut train_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((set.subset(&train_idx), set.subset(&val_idx)))
}

// ---------------------------------------------------------------------------
// Binary IO

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "needed {n} bytes for {what} at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().unwrap();
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::InvalidData(format!("{what} size overflows")))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn u32s(&mut self, n: usize, what: &str) -> Result<Vec<u32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::InvalidData(format!("{what} size overflows")))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::InvalidData(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidData(format!("{what} {n} does not fit in u32")))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

pub fn encode_embedding_set(set: &EmbeddingSet) -> Result<Vec<u8>> {
    set.validate()?;
    let mut out = Vec::with_capacity(16 + set.labels.len() * 4 + set.data.len() * 4);
    out.extend_from_slice(&EMBEDDING_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, to_u32(set.count(), "count")?);
    put_u32(&mut out, to_u32(set.dim, "dim")?);
    for &label in &set.labels {
        put_u32(&mut out, label);
    }
    put_f32s(&mut out, &set.data);
    Ok(out)
}

pub fn decode_embedding_set(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut r = Reader::new(bytes);
    r.magic(EMBEDDING_MAGIC)?;
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version(version));
    }
    let count = r.u32("count")? as usize;
    let dim = r.u32("dim")? as usize;
    let labels = r.u32s(count, "labels")?;
    let data = r.f32s(
        count
            .checked_mul(dim)
            .ok_or_else(|| Error::InvalidData("payload size overflows".into()))?,
        "payload",
    )?;
    r.finish()?;
    EmbeddingSet::new(dim, data, labels)
}

/// Writes an `RGBX` file. Sets that fail validation are refused before anything is written.
pub fn write_embedding_file(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_embedding_set(set)?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    decode_embedding_set(&fs::read(path)?)
}

pub fn encode_class_text(table: &ClassTextEmbeddings) -> Result<Vec<u8>> {
    table.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(&CLASS_TEXT_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, to_u32(table.n_classes(), "n_classes")?);
    put_u32(&mut out, to_u32(table.dim, "dim")?);
    for name in &table.class_names {
        put_u32(&mut out, to_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
    }
    put_f32s(&mut out, &table.data);
    Ok(out)
}

pub fn decode_class_text(bytes: &[u8]) -> Result<ClassTextEmbeddings> {
    let mut r = Reader::new(bytes);
    r.magic(CLASS_TEXT_MAGIC)?;
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version(version));
    }
    let n_classes = r.u32("n_classes")? as usize;
    let dim = r.u32("dim")? as usize;
    let mut class_names = Vec::with_capacity(n_classes.min(1 << 16));
    for i in 0..n_classes {
        let len = r.u32("name length")? as usize;
        let raw = r.take(len, "class name")?;
        let name = std::str::from_utf8(raw)
            .map_err(|e| Error::InvalidData(format!("class name {i} is not UTF-8: {e}")))?;
        class_names.push(name.to_owned());
    }
    let data = r.f32s(
        n_classes
            .checked_mul(dim)
            .ok_or_else(|| Error::InvalidData("payload size overflows".into()))?,
        "payload",
    )?;
    r.finish()?;
    ClassTextEmbeddings::new(dim, data, class_names)
}

pub fn write_class_text_file(table: &ClassTextEmbeddings, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_class_text(table)?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_class_text_file(path: impl AsRef<Path>) -> Result<ClassTextEmbeddings> {
    decode_class_text(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Bundles

pub const TRAIN_FILE: &str = "train.rgbx";
pub const VAL_FILE: &str = "val.rgbx";
pub const TEST_IN_FILE: &str = "test_in.rgbx";
pub const TEST_OUT_FILE: &str = "test_out.rgbx";
pub const CLASS_TEXT_FILE: &str = "classes.rgbt";

/// Train/val/test splits plus the class-text table they are labelled against.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: EmbeddingSet,
    pub val: EmbeddingSet,
    pub test_in_domain: EmbeddingSet,
    pub test_out_domain: Option<EmbeddingSet>,
    pub class_text: ClassTextEmbeddings,
}

impl DatasetBundle {
    pub fn dim(&self) -> usize {
        self.class_text.dim
    }

    pub fn n_classes(&self) -> usize {
        self.class_text.n_classes()
    }

    fn members(&self) -> impl Iterator<Item = (&'static str, &EmbeddingSet)> {
        [
            ("train", Some(&self.train)),
            ("val", Some(&self.val)),
            ("test_in", Some(&self.test_in_domain)),
            ("test_out", self.test_out_domain.as_ref()),
        ]
        .into_iter()
        .filter_map(|(name, set)| set.map(|s| (name, s)))
    }

    /// Checks that every member shares the class table's dimension and label range.
    pub fn validate(&self) -> Result<()> {
        self.class_text.validate()?;
        for (name, set) in self.members() {
            set.validate()?;
            if set.dim != self.dim() {
                return Err(Error::InvalidData(format!(
                    "{name} has dim {}, class table has {}",
                    set.dim,
                    self.dim()
                )));
            }
            set.validate_labels(self.n_classes())?;
        }
        Ok(())
    }

    /// Loads the standard file layout from `dir`; `test_out.rgbx` is optional.
    /// Rows are renormalized to exact unit norm after validation.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let load = |name: &str| -> Result<EmbeddingSet> {
            read_embedding_file(dir.join(name))?.renormalized()
        };
        let out_path = dir.join(TEST_OUT_FILE);
        let bundle = DatasetBundle {
            train: load(TRAIN_FILE)?,
            val: load(VAL_FILE)?,
            test_in_domain: load(TEST_IN_FILE)?,
            test_out_domain: if out_path.exists() {
                Some(load(TEST_OUT_FILE)?)
            } else {
                None
            },
            class_text: read_class_text_file(dir.join(CLASS_TEXT_FILE))?,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Writes the bundle into `dir` and returns the written paths.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        self.validate()?;
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, set) in [
            (TRAIN_FILE, Some(&self.train)),
            (VAL_FILE, Some(&self.val)),
            (TEST_IN_FILE, Some(&self.test_in_domain)),
            (TEST_OUT_FILE, self.test_out_domain.as_ref()),
        ] {
            if let Some(set) = set {
                let path = dir.join(name);
                write_embedding_file(set, &path)?;
                written.push(path);
            }
        }
        let path = dir.join(CLASS_TEXT_FILE);
        write_class_text_file(&self.class_text, &path)?;
        written.push(path);
        Ok(written)
    }
}
