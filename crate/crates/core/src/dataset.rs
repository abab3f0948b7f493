//! Dataset ingestion: IDX image containers (optionally gzipped), CSV tables,
//! 2x2 average pooling, scaling and one-hot encoding.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matrix::{check_one_hot, Matrix};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Features (`n_0 x N`, entries in `[0, 1]`) and one-hot labels (`n_L x N`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Matrix,
    class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Matrix, class_names: Option<Vec<String>>) -> Result<Self> {
        if features.cols() != labels.cols() {
            return Err(Error::Dataset(format!(
                "{} feature columns but {} label columns",
                features.cols(),
                labels.cols()
            )));
        }
        if features.rows() == 0 || features.cols() == 0 || labels.rows() == 0 {
            return Err(Error::Dataset("empty dataset".into()));
        }
        if let Some(bad) = features.as_slice().iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Dataset(format!("feature value {bad} outside [0, 1]")));
        }
        check_one_hot(&labels)?;
        if let Some(names) = &class_names {
            if names.len() != labels.rows() {
                return Err(Error::Dataset(format!(
                    "{} class names for {} classes",
                    names.len(),
                    labels.rows()
                )));
            }
        }
        Ok(Dataset {
            features,
            labels,
            class_names,
        })
    }

    /// Builds one-hot labels from class indices.
    pub fn from_class_indices(
        features: Matrix,
        classes: &[usize],
        num_classes: usize,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let mut labels = Matrix::zeros(num_classes, classes.len());
        for (j, &c) in classes.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::Dataset(format!("class index {c} out of range")));
            }
            labels.set(c, j, 1.0);
        }
        Self::new(features, labels, class_names)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &Matrix {
        &self.labels
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn num_samples(&self) -> usize {
        self.features.cols()
    }

    pub fn num_features(&self) -> usize {
        self.features.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.rows()
    }

    pub fn class_indices(&self) -> Vec<usize> {
        label_indices(&self.labels)
    }

    /// The first `n` samples (all of them if `n` exceeds the count).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.num_samples());
        let slice = |m: &Matrix| {
            let mut out = Matrix::zeros(m.rows(), n);
            for i in 0..m.rows() {
                for j in 0..n {
                    out.set(i, j, m.get(i, j));
                }
            }
            out
        };
        Dataset {
            features: slice(&self.features),
            labels: slice(&self.labels),
            class_names: self.class_names.clone(),
        }
    }

    /// Gaussian class clusters squashed into `[0, 1]`; labels cycle through
    /// the classes so every prefix is balanced.
    pub fn synthetic_blobs(features: usize, classes: usize, samples: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..features).map(|_| rng.random_range(0.2..0.8)).collect())
            .collect();
        let noise = Normal::new(0.0, 0.08).unwrap();
        let mut x = Matrix::zeros(features, samples);
        let mut labels = Vec::with_capacity(samples);
        for j in 0..samples {
            let c = j % classes;
            labels.push(c);
            for i in 0..features {
                x.set(i, j, (centers[c][i] + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
        Dataset::from_class_indices(x, &labels, classes, None).expect("valid by construction")
    }
}

/// Row index of the 1 in each column of a one-hot matrix.
pub fn label_indices(labels: &Matrix) -> Vec<usize> {
    (0..labels.cols())
        .map(|j| (0..labels.rows()).find(|&i| labels.get(i, j) == 1.0).unwrap_or(0))
        .collect()
}

/// Decoded IDX image/label pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImages {
    pub rows: usize,
    pub cols: usize,
    /// One `rows * cols` row-major buffer per image.
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<u8>,
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx(format!("truncated {what} header ({} bytes)", bytes.len())))
}

/// Parses an IDX image container (magic `0x00000803`).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let magic = be_u32(bytes, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx(format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, "image")? as usize;
    let rows = be_u32(bytes, 8, "image")? as usize;
    let cols = be_u32(bytes, 12, "image")? as usize;
    let size = rows * cols;
    let body = &bytes[16..];
    if body.len() < count * size {
        return Err(Error::Idx(format!(
            "truncated image data: {count} images of {rows}x{cols} need {} bytes, found {}",
            count * size,
            body.len()
        )));
    }
    let images = body.chunks_exact(size.max(1)).take(count).map(<[u8]>::to_vec).collect();
    Ok((rows, cols, images))
}

/// Parses an IDX label container (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx(format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, "label")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Idx(format!(
            "truncated label data: need {count} bytes, found {}",
            body.len()
        )));
    }
    Ok(body[..count].to_vec())
}

pub fn decode_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<RawImages> {
    let (rows, cols, images) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if images.len() != labels.len() {
        return Err(Error::Idx(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    Ok(RawImages {
        rows,
        cols,
        images,
        labels,
    })
}

/// Loads an IDX image/label pair. Gzipped files are detected by their magic
/// bytes and decompressed transparently.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<RawImages> {
    let images = read_maybe_gzip(images_path.as_ref())?;
    let labels = read_maybe_gzip(labels_path.as_ref())?;
    decode_idx(&images, &labels)
}

/// Writes an uncompressed IDX pair.
pub fn write_idx(raw: &RawImages, mut images: impl Write, mut labels: impl Write) -> Result<()> {
    images.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    images.write_all(&(raw.images.len() as u32).to_be_bytes())?;
    images.write_all(&(raw.rows as u32).to_be_bytes())?;
    images.write_all(&(raw.cols as u32).to_be_bytes())?;
    for img in &raw.images {
        images.write_all(img)?;
    }
    labels.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    labels.write_all(&(raw.labels.len() as u32).to_be_bytes())?;
    labels.write_all(&raw.labels)?;
    Ok(())
}

/// 2x2 average pooling of one image, already scaled to `[0, 1]`.
pub fn pool_2x2(image: &[u8], rows: usize, cols: usize) -> Vec<f64> {
    let (pr, pc) = (rows / 2, cols / 2);
    let mut out = Vec::with_capacity(pr * pc);
    for r in 0..pr {
        for c in 0..pc {
            let at = |dr: usize, dc: usize| image[(2 * r + dr) * cols + 2 * c + dc] as u32;
            let sum = at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1);
            out.push(sum as f64 / 4.0 / 255.0);
        }
    }
    out
}

/// Scales pixels by 1/255, optionally 2x2-pools (28x28 becomes 196
/// features), optionally keeps only `classes` (relabelled by position in
/// that list), and one-hot encodes.
pub fn preprocess(raw: &RawImages, downsample: bool, classes: Option<&[u8]>) -> Result<Dataset> {
    if downsample && (!raw.rows.is_multiple_of(2) || !raw.cols.is_multiple_of(2)) {
        return Err(Error::Dataset(format!(
            "cannot 2x2-pool {}x{} images",
            raw.rows, raw.cols
        )));
    }
    let (keep, num_classes, names): (Vec<(usize, usize)>, usize, Vec<String>) = match classes {
        Some(wanted) => {
            for c in wanted {
                if !raw.labels.contains(c) {
                    return Err(Error::Dataset(format!("requested class {c} has no samples")));
                }
            }
            let keep = raw
                .labels
                .iter()
                .enumerate()
                .filter_map(|(i, l)| wanted.iter().position(|c| c == l).map(|k| (i, k)))
                .collect();
            (keep, wanted.len(), wanted.iter().map(u8::to_string).collect())
        }
        None => {
            let max = raw.labels.iter().copied().max().unwrap_or(0) as usize;
            let keep = raw.labels.iter().enumerate().map(|(i, &l)| (i, l as usize)).collect();
            (keep, max + 1, (0..=max).map(|c| c.to_string()).collect())
        }
    };
    if keep.is_empty() {
        return Err(Error::Dataset("no samples selected".into()));
    }
    let n_features = if downsample {
        (raw.rows / 2) * (raw.cols / 2)
    } else {
        raw.rows * raw.cols
    };
    let mut features = Matrix::zeros(n_features, keep.len());
    let mut targets = Vec::with_capacity(keep.len());
    for (j, &(idx, class)) in keep.iter().enumerate() {
        let img = &raw.images[idx];
        let column: Vec<f64> = if downsample {
            pool_2x2(img, raw.rows, raw.cols)
        } else {
            img.iter().map(|&v| v as f64 / 255.0).collect()
        };
        for (i, v) in column.into_iter().enumerate() {
            features.set(i, j, v);
        }
        targets.push(class);
    }
    Dataset::from_class_indices(features, &targets, num_classes, Some(names))
}

fn csv_err(row: usize, message: impl Into<String>) -> Error {
    Error::Csv {
        row,
        message: message.into(),
    }
}

/// Reads a CSV table with a header row. Feature columns are min-max scaled
/// to `[0, 1]` per column (constant columns become 0); labels are one-hot
/// encoded over their distinct values in ascending order (numeric order when
/// every label parses as a number).
pub fn read_csv(reader: impl Read, label_column: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_err(0, e.to_string()))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| csv_err(0, format!("no column named {label_column:?}")))?;
    let n_features = headers.len() - 1;
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); n_features];
    let mut raw_labels = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let row = row + 1;
        let record = record.map_err(|e| csv_err(row, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(csv_err(row, format!("expected {} fields, found {}", headers.len(), record.len())));
        }
        let mut f = 0;
        for (i, cell) in record.iter().enumerate() {
            if i == label_idx {
                raw_labels.push(cell.trim().to_string());
                continue;
            }
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| csv_err(row, format!("non-numeric value {cell:?} in column {}", headers.get(i).unwrap_or(""))))?;
            if !v.is_finite() {
                return Err(csv_err(row, format!("non-finite value {cell:?}")));
            }
            columns[f].push(v);
            f += 1;
        }
    }
    if raw_labels.is_empty() {
        return Err(csv_err(0, "no data rows"));
    }
    let n = raw_labels.len();
    let mut features = Matrix::zeros(n_features, n);
    for (i, col) in columns.iter().enumerate() {
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        for (j, &v) in col.iter().enumerate() {
            let scaled = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            features.set(i, j, scaled);
        }
    }
    let mut names: Vec<String> = raw_labels.clone();
    names.sort();
    names.dedup();
    let numeric: Option<Vec<f64>> = names.iter().map(|s| s.parse::<f64>().ok()).collect();
    if let Some(mut keyed) = numeric.map(|vals| vals.into_iter().zip(names.clone()).collect::<Vec<_>>()) {
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        names = keyed.into_iter().map(|(_, s)| s).collect();
    }
    let classes: Vec<usize> = raw_labels
        .iter()
        .map(|l| names.iter().position(|n| n == l).unwrap())
        .collect();
    let k = names.len();
    Dataset::from_class_indices(features, &classes, k, Some(names))
}

pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    read_csv(File::open(path)?, label_column)
}

/// Writes features as `f0..f{n-1}` followed by a `label` column holding the
/// class name (or index when the dataset has no names).
pub fn write_csv(data: &Dataset, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut header: Vec<String> = (0..data.num_features()).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(io)?;
    let classes = data.class_indices();
    for (j, &c) in classes.iter().enumerate() {
        let mut rec: Vec<String> = (0..data.num_features())
            .map(|i| data.features.get(i, j).to_string())
            .collect();
        rec.push(match data.class_names() {
            Some(names) => names[c].clone(),
            None => c.to_string(),
        });
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
