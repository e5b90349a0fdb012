//! Dataset ingestion (IDX, CSV, synthetic), splitting, and label embedding.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vector,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    dim: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize, split: SplitTag) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Dataset("dataset is empty".into()));
        };
        if num_classes < 1 {
            return Err(Error::Dataset("num_classes must be at least 1".into()));
        }
        let dim = first.features.dim();
        for (i, s) in samples.iter().enumerate() {
            if s.features.dim() != dim {
                return Err(Error::Dataset(format!(
                    "sample {i} has dimension {}, expected {dim}",
                    s.features.dim()
                )));
            }
            if s.label >= num_classes {
                return Err(Error::Dataset(format!(
                    "sample {i} has label {} >= num_classes {num_classes}",
                    s.label
                )));
            }
        }
        Ok(Self {
            samples,
            num_classes,
            dim,
            split,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn with_num_classes(self, num_classes: usize) -> Result<Self> {
        Self::new(self.samples, num_classes, self.split)
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    /// Contiguous sub-range `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize, split: SplitTag) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Dataset(format!(
                "slice {start}..{end} out of range for {} samples",
                self.len()
            )));
        }
        Self::new(self.samples[start..end].to_vec(), self.num_classes, split)
    }
}

// ---------------------------------------------------------------------------
// IDX

/// Raw IDX image tensor (count × rows × cols unsigned bytes).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            field: "file".into(),
            reason: e.to_string(),
        })?;
    Ok(buf)
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let err = |field: &'static str, reason: String| Error::Load {
        path: path.to_path_buf(),
        field: field.into(),
        reason,
    };
    let magic = be_u32(bytes, 0).ok_or_else(|| err("magic", "file shorter than header".into()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(err(
            "magic",
            format!("expected {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let header = |at, field| {
        be_u32(bytes, at)
            .map(|v| v as usize)
            .ok_or_else(|| err(field, "truncated header".into()))
    };
    let count = header(4, "count")?;
    let rows = header(8, "rows")?;
    let cols = header(12, "cols")?;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != need {
        return Err(err(
            "payload",
            format!(
                "expected {need} pixel bytes for {count}x{rows}x{cols}, found {}",
                payload.len()
            ),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let err = |field: &'static str, reason: String| Error::Load {
        path: path.to_path_buf(),
        field: field.into(),
        reason,
    };
    let magic = be_u32(bytes, 0).ok_or_else(|| err("magic", "file shorter than header".into()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(err(
            "magic",
            format!("expected {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4).ok_or_else(|| err("count", "truncated header".into()))? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(err(
            "payload",
            format!("expected {count} label bytes, found {}", payload.len()),
        ));
    }
    Ok(payload.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]`; the class
/// count is inferred as `max(label) + 1` (override with [`Dataset::with_num_classes`]).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx_images(&read_all(ip)?, ip)?;
    let labels = parse_idx_labels(&read_all(lp)?, lp)?;
    if images.count != labels.len() {
        return Err(Error::Load {
            path: lp.to_path_buf(),
            field: "count".into(),
            reason: format!("{} labels for {} images", labels.len(), images.count),
        });
    }
    if images.count == 0 {
        return Err(Error::Load {
            path: ip.to_path_buf(),
            field: "count".into(),
            reason: "no images".into(),
        });
    }
    let dim = images.rows * images.cols;
    let samples = images
        .pixels
        .chunks_exact(dim)
        .zip(&labels)
        .map(|(px, &l)| Sample {
            features: px.iter().map(|&p| f32::from(p) / 255.0).collect::<Vec<_>>().into(),
            label: usize::from(l),
        })
        .collect::<Vec<_>>();
    let num_classes = usize::from(*labels.iter().max().unwrap_or(&0)) + 1;
    Dataset::new(samples, num_classes, SplitTag::Train)
}

// ---------------------------------------------------------------------------
// CSV

/// Loads a CSV whose last column is an integer class label.
/// A first row that does not parse as numbers is treated as a header.
pub fn load_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::Load {
        path: path.as_ref().to_path_buf(),
        field: "file".into(),
        reason: e.to_string(),
    })?;
    parse_csv(&text, num_classes)
}

pub fn parse_csv(text: &str, num_classes: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut samples = Vec::new();
    let mut width = None;
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            reason: e.to_string(),
        })?;
        if record.len() < 2 {
            return Err(Error::Parse {
                row,
                reason: format!("expected at least 2 columns, found {}", record.len()),
            });
        }
        let numeric = record.iter().all(|c| c.parse::<f64>().is_ok());
        if idx == 0 && !numeric {
            continue;
        }
        if *width.get_or_insert(record.len()) != record.len() {
            return Err(Error::Parse {
                row,
                reason: format!("expected {} columns, found {}", width.unwrap_or(0), record.len()),
            });
        }
        let mut features = Vec::with_capacity(record.len() - 1);
        for cell in record.iter().take(record.len() - 1) {
            let v: f32 = cell.parse().map_err(|_| Error::Parse {
                row,
                reason: format!("non-numeric cell {cell:?}"),
            })?;
            features.push(v);
        }
        let label_cell = &record[record.len() - 1];
        let label: usize = label_cell.parse().map_err(|_| Error::Parse {
            row,
            reason: format!("label {label_cell:?} is not a non-negative integer"),
        })?;
        if label >= num_classes {
            return Err(Error::Parse {
                row,
                reason: format!("label {label} >= num_classes {num_classes}"),
            });
        }
        samples.push(Sample {
            features: features.into(),
            label,
        });
    }
    if samples.is_empty() {
        return Err(Error::Parse {
            row: 0,
            reason: "no data rows".into(),
        });
    }
    Dataset::new(samples, num_classes, SplitTag::Train)
}

// ---------------------------------------------------------------------------
// Splitting

/// Seeded shuffle followed by a contiguous train/validation/test partition.
pub fn split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|&f| f <= 0.0 || !f.is_finite()) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got ({ft}, {fv}, {fs})"
        )));
    }
    let n = dataset.len();
    let n_train = (n as f64 * ft).round() as usize;
    let n_val = (n as f64 * fv).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Dataset(format!(
            "fractions ({ft}, {fv}, {fs}) leave an empty split for {n} samples"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |ids: &[usize], tag| {
        Dataset::new(
            ids.iter().map(|&i| dataset.samples[i].clone()).collect(),
            dataset.num_classes,
            tag,
        )
    };
    Ok((
        take(&order[..n_train], SplitTag::Train)?,
        take(&order[n_train..n_train + n_val], SplitTag::Validation)?,
        take(&order[n_train + n_val..], SplitTag::Test)?,
    ))
}

// ---------------------------------------------------------------------------
// Label embedding

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSample {
    pub features: Vector,
    pub polarity: Polarity,
}

/// Strength of the one-hot label code written into the first `M` features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
#[derive(Default)]
pub enum LabelMagnitude {
    /// Largest feature value of the sample (1.0 if the sample has no positive value).
    #[default]
    SampleMax,
    Fixed(f32),
}

impl LabelMagnitude {
    pub fn resolve(self, x: &[f32]) -> f32 {
        match self {
            Self::Fixed(v) => v,
            Self::SampleMax => {
                let m = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                if m > 0.0 {
                    m
                } else {
                    1.0
                }
            }
        }
    }
}

#[inline]
pub(crate) fn write_label(buf: &mut [f32], label: usize, num_classes: usize, magnitude: f32) {
    buf[..num_classes].fill(0.0);
    buf[label] = magnitude;
}

#[inline]
pub(crate) fn write_neutral(buf: &mut [f32], num_classes: usize) {
    buf[..num_classes].fill(1.0 / num_classes as f32);
}

fn check_embed(x: &[f32], label: usize, num_classes: usize) -> Result<()> {
    if x.len() < num_classes {
        return Err(Error::shape("overlay_label", format!("dim >= {num_classes}"), x.len()));
    }
    if label >= num_classes {
        return Err(Error::Dataset(format!("label {label} >= num_classes {num_classes}")));
    }
    Ok(())
}

pub fn overlay_label(x: &[f32], label: usize, num_classes: usize, magnitude: f32) -> Result<EmbeddedSample> {
    check_embed(x, label, num_classes)?;
    let mut features = x.to_vec();
    write_label(&mut features, label, num_classes, magnitude);
    Ok(EmbeddedSample {
        features: features.into(),
        polarity: Polarity::Positive,
    })
}

/// Draws a label uniformly from the `M - 1` labels different from `true_label`.
pub fn wrong_label<R: Rng + ?Sized>(true_label: usize, num_classes: usize, rng: &mut R) -> usize {
    debug_assert!(num_classes >= 2);
    let draw = rng.random_range(0..num_classes - 1);
    if draw >= true_label {
        draw + 1
    } else {
        draw
    }
}

pub fn make_negative<R: Rng + ?Sized>(
    x: &[f32],
    true_label: usize,
    num_classes: usize,
    magnitude: f32,
    rng: &mut R,
) -> Result<EmbeddedSample> {
    if num_classes < 2 {
        return Err(Error::Config("negative samples need at least 2 classes".into()));
    }
    check_embed(x, true_label, num_classes)?;
    let label = wrong_label(true_label, num_classes, rng);
    let mut s = overlay_label(x, label, num_classes, magnitude)?;
    s.polarity = Polarity::Negative;
    Ok(s)
}

pub fn make_neutral(x: &[f32], num_classes: usize) -> Result<EmbeddedSample> {
    check_embed(x, 0, num_classes)?;
    let mut features = x.to_vec();
    write_neutral(&mut features, num_classes);
    Ok(EmbeddedSample {
        features: features.into(),
        polarity: Polarity::Neutral,
    })
}

/// Index of the label embedded in `features[..M]`, or `None` when the code is neutral.
pub fn embedded_label(features: &[f32], num_classes: usize) -> Option<usize> {
    let code = &features[..num_classes];
    let nonzero: Vec<usize> = (0..num_classes).filter(|&i| code[i] != 0.0).collect();
    match nonzero.as_slice() {
        [i] => Some(*i),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Isotropic unit-variance Gaussian blobs centred at `separation * e_{dim-M+c}`.
///
/// Class directions are the last `M` coordinate axes so the label overlay,
/// which occupies the first `M` features, does not erase the class signal
/// whenever `dim >= 2M`. Samples are interleaved by class.
pub fn make_synthetic(
    n_per_class: usize,
    num_classes: usize,
    dim: usize,
    separation: f32,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || dim < num_classes || n_per_class == 0 {
        return Err(Error::Config(format!(
            "synthetic data needs M >= 2, dim >= M and n_per_class >= 1 (got M={num_classes}, dim={dim}, n={n_per_class})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_per_class * num_classes);
    for _ in 0..n_per_class {
        for c in 0..num_classes {
            let mut x: Vec<f32> = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            x[dim - num_classes + c] += separation;
            samples.push(Sample {
                features: x.into(),
                label: c,
            });
        }
    }
    Dataset::new(samples, num_classes, SplitTag::Train)
}
