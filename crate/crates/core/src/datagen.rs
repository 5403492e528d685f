//! Synthetic multi-label dataset generation and a binary on-disk format.
//!
//! Each class owns a fixed random spatial prototype; an image's feature grid
//! is the sum of its positive classes' prototypes plus Gaussian noise, and
//! label sets are sampled from a co-occurrence matrix (base marginals on the
//! diagonal, pairwise boosts off it). Generation is a pure function of the
//! spec, so identical specs produce bitwise-identical datasets.

use std::fs;
use std::path::Path;

use crate::error::{DdpError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Magic bytes opening every serialized dataset file.
pub const DATA_MAGIC: &[u8; 8] = b"DDPDATA\0";
/// Current dataset file format version.
pub const DATA_VERSION: u32 = 1;

/// Full recipe for a synthetic multi-label dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Number of classes; prototypes and label columns are indexed 0..n.
    pub num_classes: usize,
    /// Feature grid rows.
    pub grid_rows: usize,
    /// Feature grid columns.
    pub grid_cols: usize,
    /// Feature grid channels.
    pub grid_channels: usize,
    /// Scale applied to every positive class's prototype.
    pub prototype_strength: f64,
    /// Standard deviation of the additive Gaussian feature noise.
    pub noise_std: f64,
    /// Row-major `num_classes x num_classes` co-occurrence matrix: the
    /// diagonal holds base marginal probabilities, off-diagonal entries are
    /// pairwise boosts added when the paired class is the image's anchor.
    pub cooccurrence: Vec<f64>,
    /// Training images generated per class (each class anchors this many).
    pub train_per_class: usize,
    /// Test images generated per class.
    pub test_per_class: usize,
    /// Root seed for all generation streams.
    pub seed: u64,
}

impl SyntheticSpec {
    /// Checks structural validity: positive dimensions and a symmetric
    /// co-occurrence matrix with entries in [0, 1].
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(DdpError::Config(
                "synthetic spec needs at least one class".into(),
            ));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 || self.grid_channels == 0 {
            return Err(DdpError::Config(format!(
                "feature grid {}x{}x{} has an empty dimension",
                self.grid_rows, self.grid_cols, self.grid_channels
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(DdpError::Config(
                "per-class image counts must be at least 1".into(),
            ));
        }
        if !self.prototype_strength.is_finite() || !self.noise_std.is_finite() {
            return Err(DdpError::Config(
                "prototype strength and noise std must be finite".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(DdpError::Config(format!(
                "noise std {} is negative",
                self.noise_std
            )));
        }
        let n = self.num_classes;
        if self.cooccurrence.len() != n * n {
            return Err(DdpError::Config(format!(
                "co-occurrence matrix has {} entries, expected {}",
                self.cooccurrence.len(),
                n * n
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let v = self.cooccurrence[i * n + j];
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(DdpError::Config(format!(
                        "co-occurrence entry ({i}, {j}) = {v} outside [0, 1]"
                    )));
                }
                let vt = self.cooccurrence[j * n + i];
                if v != vt {
                    return Err(DdpError::Config(format!(
                        "co-occurrence matrix asymmetric at ({i}, {j}): {v} vs {vt}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Co-occurrence entry for classes `(i, j)`.
    pub fn cooccurrence_at(&self, i: usize, j: usize) -> f64 {
        self.cooccurrence[i * self.num_classes + j]
    }

    /// Flat feature length of one image grid.
    pub fn feature_len(&self) -> usize {
        self.grid_rows * self.grid_cols * self.grid_channels
    }
}

/// The default desk-scale benchmark: 20 classes on an 8x8x4 grid, 40 train
/// and 20 test images per class, base marginal 0.03, and a 0.3 pairwise
/// boost among five confusable class pairs.
pub fn synth20(seed: u64) -> SyntheticSpec {
    let n = 20;
    let mut m = vec![0.0; n * n];
    for c in 0..n {
        m[c * n + c] = 0.03;
    }
    for &(a, b) in &[(1, 4), (3, 6), (5, 8), (7, 10), (9, 12)] {
        m[a * n + b] = 0.3;
        m[b * n + a] = 0.3;
    }
    SyntheticSpec {
        num_classes: n,
        grid_rows: 8,
        grid_cols: 8,
        grid_channels: 4,
        prototype_strength: 1.0,
        noise_std: 0.25,
        cooccurrence: m,
        train_per_class: 40,
        test_per_class: 20,
        seed,
    }
}

/// An in-memory multi-label image dataset with fully annotated labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Split name ("train" or "test" for synthetic data).
    pub split: String,
    /// Feature grid rows.
    pub grid_rows: usize,
    /// Feature grid columns.
    pub grid_cols: usize,
    /// Feature grid channels.
    pub grid_channels: usize,
    /// Class-id table; labels columns align with this ordering.
    pub class_ids: Vec<usize>,
    /// Per-image flat feature grids, each of length rows*cols*channels;
    /// values are exactly representable as 32-bit floats.
    pub features: Vec<Vec<f64>>,
    /// Per-image multi-hot labels, each of length `class_ids.len()`.
    pub labels: Vec<Vec<bool>>,
}

impl Dataset {
    /// Number of images in the split.
    pub fn num_images(&self) -> usize {
        self.features.len()
    }

    /// Number of classes in the label space.
    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Feature grid of image `i` as a `[rows, cols, channels]` tensor.
    pub fn feature(&self, i: usize) -> Result<Tensor> {
        let img = self.features.get(i).ok_or_else(|| {
            DdpError::Usage(format!("image {i} out of range {}", self.features.len()))
        })?;
        Tensor::new(
            vec![self.grid_rows, self.grid_cols, self.grid_channels],
            img.clone(),
        )
    }

    /// Label of image `i` for the class at column `class_index`.
    pub fn label(&self, i: usize, class_index: usize) -> bool {
        self.labels[i][class_index]
    }

    /// Checks internal consistency: aligned lengths, every image at least
    /// one positive label, and features exactly representable as f32.
    pub fn validate(&self) -> Result<()> {
        let flen = self.grid_rows * self.grid_cols * self.grid_channels;
        if flen == 0 {
            return Err(DdpError::Config("dataset grid has an empty dimension".into()));
        }
        if self.features.len() != self.labels.len() {
            return Err(DdpError::Config(format!(
                "{} feature rows vs {} label rows",
                self.features.len(),
                self.labels.len()
            )));
        }
        for (i, img) in self.features.iter().enumerate() {
            if img.len() != flen {
                return Err(DdpError::Config(format!(
                    "image {i} has {} features, expected {flen}",
                    img.len()
                )));
            }
            for &v in img {
                if !v.is_finite() || v != (v as f32) as f64 {
                    return Err(DdpError::Config(format!(
                        "image {i} feature {v} is not an exact 32-bit float"
                    )));
                }
            }
        }
        for (i, row) in self.labels.iter().enumerate() {
            if row.len() != self.class_ids.len() {
                return Err(DdpError::Config(format!(
                    "image {i} has {} labels, expected {}",
                    row.len(),
                    self.class_ids.len()
                )));
            }
            if !row.iter().any(|&b| b) {
                return Err(DdpError::Config(format!(
                    "image {i} has no positive label"
                )));
            }
        }
        Ok(())
    }
}

/// Generates the train and test splits for `spec`. Each split's image `i`
/// is anchored on class `i % num_classes` (guaranteeing at least one
/// positive and per-class balance); every other class joins with
/// probability `base marginal + boost(anchor, class)`, clamped to [0, 1].
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let prototypes: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|c| Rng::stream(spec.seed, "prototype", c as u64).gaussian_vec(spec.feature_len(), 1.0))
        .collect();
    let train = generate_split(spec, &prototypes, "train", spec.train_per_class)?;
    let test = generate_split(spec, &prototypes, "test", spec.test_per_class)?;
    Ok((train, test))
}

fn generate_split(
    spec: &SyntheticSpec,
    prototypes: &[Vec<f64>],
    split: &str,
    per_class: usize,
) -> Result<Dataset> {
    let n = spec.num_classes;
    let flen = spec.feature_len();
    let num_images = per_class * n;
    let label_purpose = format!("labels.{split}");
    let noise_purpose = format!("noise.{split}");
    let mut features = Vec::with_capacity(num_images);
    let mut labels = Vec::with_capacity(num_images);
    for i in 0..num_images {
        let anchor = i % n;
        let mut rng = Rng::stream(spec.seed, &label_purpose, i as u64);
        let mut row = vec![false; n];
        row[anchor] = true;
        for e in 0..n {
            if e == anchor {
                continue;
            }
            let p = (spec.cooccurrence_at(e, e) + spec.cooccurrence_at(anchor, e)).min(1.0);
            if rng.next_f64() < p {
                row[e] = true;
            }
        }
        let mut img = if spec.noise_std > 0.0 {
            Rng::stream(spec.seed, &noise_purpose, i as u64).gaussian_vec(flen, spec.noise_std)
        } else {
            vec![0.0; flen]
        };
        for (c, positive) in row.iter().enumerate() {
            if *positive {
                for (v, p) in img.iter_mut().zip(&prototypes[c]) {
                    *v += spec.prototype_strength * p;
                }
            }
        }
        for v in &mut img {
            *v = (*v as f32) as f64;
        }
        features.push(img);
        labels.push(row);
    }
    let ds = Dataset {
        split: split.to_string(),
        grid_rows: spec.grid_rows,
        grid_cols: spec.grid_cols,
        grid_channels: spec.grid_channels,
        class_ids: (0..n).collect(),
        features,
        labels,
    };
    ds.validate()?;
    Ok(ds)
}

/// Serializes `ds` to `path` in the documented binary layout: magic bytes,
/// version, little-endian header, class table, raw 32-bit float features,
/// then packed label bitmaps.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    fs::write(path, dataset_bytes(ds))?;
    Ok(())
}

/// The serialized form of `ds`, deterministic byte-for-byte.
pub fn dataset_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    let name = ds.split.as_bytes();
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name);
    out.extend_from_slice(&(ds.grid_rows as u32).to_le_bytes());
    out.extend_from_slice(&(ds.grid_cols as u32).to_le_bytes());
    out.extend_from_slice(&(ds.grid_channels as u32).to_le_bytes());
    out.extend_from_slice(&(ds.class_ids.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.features.len() as u64).to_le_bytes());
    for &id in &ds.class_ids {
        out.extend_from_slice(&(id as u32).to_le_bytes());
    }
    for img in &ds.features {
        for &v in img {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let stride = ds.class_ids.len().div_ceil(8);
    for row in &ds.labels {
        let mut bytes = vec![0u8; stride];
        for (c, &b) in row.iter().enumerate() {
            if b {
                bytes[c / 8] |= 1 << (c % 8);
            }
        }
        out.extend_from_slice(&bytes);
    }
    out
}

/// Loads a dataset previously written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    dataset_from_bytes(&bytes)
}

/// Parses a dataset from raw bytes, reporting the failing section and byte
/// offset on malformed input.
pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut cursor = 0usize;
    let magic = take(bytes, &mut cursor, 8, "magic")?;
    if magic != DATA_MAGIC {
        return Err(format_error("magic", 0, "bad magic bytes"));
    }
    let version = read_u32(bytes, &mut cursor, "version")?;
    if version != DATA_VERSION {
        return Err(format_error(
            "version",
            8,
            format!("unsupported version {version}, expected {DATA_VERSION}"),
        ));
    }
    let name_len = read_u32(bytes, &mut cursor, "split-name")? as usize;
    let name_offset = cursor;
    let name_bytes = take(bytes, &mut cursor, name_len, "split-name")?;
    let split = String::from_utf8(name_bytes.to_vec())
        .map_err(|e| format_error("split-name", name_offset as u64, e.to_string()))?;
    let grid_rows = read_u32(bytes, &mut cursor, "header")? as usize;
    let grid_cols = read_u32(bytes, &mut cursor, "header")? as usize;
    let grid_channels = read_u32(bytes, &mut cursor, "header")? as usize;
    let num_classes = read_u32(bytes, &mut cursor, "header")? as usize;
    let num_images_offset = cursor;
    let num_images_raw = take(bytes, &mut cursor, 8, "header")?;
    let num_images = u64::from_le_bytes(num_images_raw.try_into().expect("8 bytes"));
    let num_images = usize::try_from(num_images)
        .map_err(|_| format_error("header", num_images_offset as u64, "image count overflow"))?;

    let mut class_ids = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        class_ids.push(read_u32(bytes, &mut cursor, "class-table")? as usize);
    }
    let flen = grid_rows * grid_cols * grid_channels;
    let mut features = Vec::with_capacity(num_images);
    for _ in 0..num_images {
        let raw = take(bytes, &mut cursor, flen * 4, "features")?;
        let img = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        features.push(img);
    }
    let stride = num_classes.div_ceil(8);
    let mut labels = Vec::with_capacity(num_images);
    for _ in 0..num_images {
        let raw = take(bytes, &mut cursor, stride, "labels")?;
        let row = (0..num_classes)
            .map(|c| raw[c / 8] & (1 << (c % 8)) != 0)
            .collect();
        labels.push(row);
    }
    if cursor != bytes.len() {
        return Err(format_error(
            "trailing",
            cursor as u64,
            format!("{} trailing bytes", bytes.len() - cursor),
        ));
    }
    let ds = Dataset {
        split,
        grid_rows,
        grid_cols,
        grid_channels,
        class_ids,
        features,
        labels,
    };
    ds.validate()?;
    Ok(ds)
}

/// Loads a dataset described by an external-features manifest: a JSON index
/// naming the split, grid shape, class table, and per-image raw 32-bit
/// little-endian float files with class-id label lists.
pub fn load_external_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let manifest: ExternalManifest = serde_json::from_str(&text)
        .map_err(|e| format_error("manifest", 0, e.to_string()))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let flen = manifest.grid.rows * manifest.grid.cols * manifest.grid.channels;
    let mut features = Vec::with_capacity(manifest.images.len());
    let mut labels = Vec::with_capacity(manifest.images.len());
    for entry in &manifest.images {
        let raw = fs::read(dir.join(&entry.file))?;
        if raw.len() != flen * 4 {
            return Err(format_error(
                "features",
                raw.len() as u64,
                format!(
                    "{} holds {} bytes, expected {} for a {}x{}x{} grid",
                    entry.file,
                    raw.len(),
                    flen * 4,
                    manifest.grid.rows,
                    manifest.grid.cols,
                    manifest.grid.channels
                ),
            ));
        }
        let img: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let mut row = vec![false; manifest.class_ids.len()];
        for &id in &entry.labels {
            let col = manifest
                .class_ids
                .iter()
                .position(|&c| c == id)
                .ok_or_else(|| {
                    format_error(
                        "manifest",
                        0,
                        format!("{} labels unknown class {id}", entry.file),
                    )
                })?;
            row[col] = true;
        }
        features.push(img);
        labels.push(row);
    }
    let ds = Dataset {
        split: manifest.split,
        grid_rows: manifest.grid.rows,
        grid_cols: manifest.grid.cols,
        grid_channels: manifest.grid.channels,
        class_ids: manifest.class_ids,
        features,
        labels,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(serde::Deserialize)]
struct ExternalManifest {
    split: String,
    grid: ExternalGrid,
    class_ids: Vec<usize>,
    images: Vec<ExternalImage>,
}

#[derive(serde::Deserialize)]
struct ExternalGrid {
    rows: usize,
    cols: usize,
    channels: usize,
}

#[derive(serde::Deserialize)]
struct ExternalImage {
    file: String,
    labels: Vec<usize>,
}

fn format_error(section: &str, offset: u64, message: impl Into<String>) -> DdpError {
    DdpError::Format {
        section: section.to_string(),
        offset,
        message: message.into(),
    }
}

fn take<'a>(bytes: &'a [u8], cursor: &mut usize, len: usize, section: &str) -> Result<&'a [u8]> {
    let end = cursor.checked_add(len).filter(|&e| e <= bytes.len());
    match end {
        Some(end) => {
            let out = &bytes[*cursor..end];
            *cursor = end;
            Ok(out)
        }
        None => Err(format_error(
            section,
            *cursor as u64,
            format!("file truncated, needed {len} bytes"),
        )),
    }
}

fn read_u32(bytes: &[u8], cursor: &mut usize, section: &str) -> Result<u32> {
    let raw = take(bytes, cursor, 4, section)?;
    Ok(u32::from_le_bytes(raw.try_into().expect("4 bytes")))
}
