//! Dataset ingestion, synthetic data generation and deterministic batching.
//!
//! IDX container support covers the classic big-endian layout: a u32 magic
//! (0x00000803 for 3-D byte image arrays, 0x00000801 for label vectors),
//! one u32 per dimension, then raw bytes. Synthetic generators provide a
//! linearly separable blob task for fast tests and a 28x28 pattern-image
//! task that stands in for real image classification at desk scale.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Per-feature normalization statistics, always computed on a train split.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.shape().is_empty() || inputs.shape()[0] == 0 {
            return Err(Error::DataFormat("dataset must contain at least one example".into()));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::DataFormat(format!(
                "{} inputs vs {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::DataFormat(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if !inputs.all_finite() {
            return Err(Error::NonFinite("dataset inputs".into()));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Flattened per-example feature count.
    pub fn feature_len(&self) -> usize {
        self.inputs.shape()[1..].iter().product()
    }

    pub fn compute_stats(&self) -> NormStats {
        let n = self.len();
        let f = self.feature_len();
        let data = self.inputs.data();
        let mut mean = vec![0.0; f];
        for row in data.chunks(f) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; f];
        for row in data.chunks(f) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = x - m;
                *v += d * d;
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        NormStats { mean, std }
    }

    /// Applies `(x - mean) / std` per feature in place; features with zero
    /// std map to 0. The map is affine and invertible wherever std > 0.
    pub fn normalize_with(&mut self, stats: &NormStats) -> Result<()> {
        let f = self.feature_len();
        if stats.mean.len() != f || stats.std.len() != f {
            return Err(Error::shape(
                "normalize",
                format!("stats for {} features, data has {f}", stats.mean.len()),
            ));
        }
        for row in self.inputs.data_mut().chunks_mut(f) {
            for ((x, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
                *x = if *s > 0.0 { (*x - *m) / *s } else { 0.0 };
            }
        }
        Ok(())
    }
}

fn read_u32_be(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    if *pos + 4 > bytes.len() {
        return Err(Error::DataFormat(format!("truncated file while reading {what}")));
    }
    let v = u32::from_be_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
    *pos += 4;
    Ok(v)
}

/// Parses an IDX image/label file pair into a dataset with pixels scaled to
/// [0, 1]. Class count is the largest label plus one.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut img_bytes = Vec::new();
    fs::File::open(images_path)?.read_to_end(&mut img_bytes)?;
    let mut pos = 0;
    let magic = read_u32_be(&img_bytes, &mut pos, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::DataFormat(format!(
            "bad image magic 0x{magic:08X}, expected 0x{IDX_IMAGE_MAGIC:08X}"
        )));
    }
    let n = read_u32_be(&img_bytes, &mut pos, "image count")? as usize;
    let h = read_u32_be(&img_bytes, &mut pos, "image rows")? as usize;
    let w = read_u32_be(&img_bytes, &mut pos, "image cols")? as usize;
    let expected = n * h * w;
    if img_bytes.len() - pos < expected {
        return Err(Error::DataFormat(format!(
            "truncated image data: want {expected} bytes, have {}",
            img_bytes.len() - pos
        )));
    }
    let pixels: Vec<f64> = img_bytes[pos..pos + expected]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();

    let mut lbl_bytes = Vec::new();
    fs::File::open(labels_path)?.read_to_end(&mut lbl_bytes)?;
    let mut pos = 0;
    let magic = read_u32_be(&lbl_bytes, &mut pos, "label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::DataFormat(format!(
            "bad label magic 0x{magic:08X}, expected 0x{IDX_LABEL_MAGIC:08X}"
        )));
    }
    let n_labels = read_u32_be(&lbl_bytes, &mut pos, "label count")? as usize;
    if n_labels != n {
        return Err(Error::DataFormat(format!(
            "{n} images but {n_labels} labels"
        )));
    }
    if lbl_bytes.len() - pos < n_labels {
        return Err(Error::DataFormat(format!(
            "truncated label data: want {n_labels} bytes, have {}",
            lbl_bytes.len() - pos
        )));
    }
    let labels: Vec<usize> = lbl_bytes[pos..pos + n_labels].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(Tensor::new(vec![n, h, w], pixels)?, labels, classes.max(2))
}

/// Writes a `[N, H, W]` dataset as an IDX image/label file pair, quantizing
/// pixel values (clamped to [0, 1]) to bytes.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = dataset.inputs().shape();
    if shape.len() != 3 {
        return Err(Error::DataFormat(format!(
            "idx export wants [N, H, W] images, got {shape:?}"
        )));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    img.extend(
        dataset
            .inputs()
            .data()
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(images_path, img)?;

    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    lbl.extend(dataset.labels().iter().map(|&l| l as u8));
    fs::write(labels_path, lbl)?;
    Ok(())
}

/// Optional CSV ingestion: a header row with one column named `label`,
/// remaining columns numeric features.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::DataFormat("empty csv".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_col = columns
        .iter()
        .position(|&c| c == "label")
        .ok_or_else(|| Error::DataFormat("csv has no `label` column".into()))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (line_no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(Error::DataFormat(format!(
                "csv row {}: {} fields, header has {}",
                line_no + 2,
                fields.len(),
                columns.len()
            )));
        }
        let mut feats = Vec::with_capacity(columns.len() - 1);
        for (i, field) in fields.iter().enumerate() {
            if i == label_col {
                labels.push(field.parse::<usize>().map_err(|_| {
                    Error::DataFormat(format!("csv row {}: bad label {field:?}", line_no + 2))
                })?);
            } else {
                feats.push(field.parse::<f64>().map_err(|_| {
                    Error::DataFormat(format!("csv row {}: bad number {field:?}", line_no + 2))
                })?);
            }
        }
        rows.push(feats);
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    let inputs = Tensor::from_rows(&rows)?;
    Dataset::new(inputs, labels, classes)
}

/// Gaussian clusters with unit covariance around deterministic class
/// centers whose spread scales with `separation`. Labels interleave so any
/// prefix is class-balanced. Centers depend only on `seed`; `split`
/// selects an independent example stream, so train (0) and test (1) sets
/// share the same class geometry.
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
    split: u64,
) -> Result<Dataset> {
    if classes < 2 || per_class == 0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "blobs need classes >= 2, per_class >= 1, dim >= 1".into(),
        ));
    }
    // Centers sit on signed coordinate axes so any two classes are at
    // least separation*sqrt(2) apart; classes beyond the 2*dim axis slots
    // fall back to seeded random unit directions.
    let mut center_rng = SplitMix64::from_seed_stream(seed, 1);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if c < 2 * dim {
                let mut v = vec![0.0; dim];
                v[c % dim] = if c < dim { separation } else { -separation };
                v
            } else {
                let v: Vec<f64> = (0..dim).map(|_| center_rng.next_gaussian()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| x / norm * separation).collect()
            }
        })
        .collect();
    let n = classes * per_class;
    let mut sample_rng = SplitMix64::from_seed_stream(seed, 2 + split);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for center in &centers[class] {
            data.push(center + sample_rng.next_gaussian());
        }
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)
}

/// Smooth random 28x28 class templates plus per-example intensity jitter
/// and pixel noise: a desk-scale image classification task. All classes
/// share a common background pattern so examples are not trivially
/// separable; `class_scale` sets how strongly the class component shows
/// and `noise` the per-pixel corruption. Templates depend only on `seed`;
/// `split` selects an independent example stream (train 0, test 1).
pub fn synth_images(
    classes: usize,
    per_class: usize,
    noise: f64,
    class_scale: f64,
    seed: u64,
    split: u64,
) -> Result<Dataset> {
    if !(2..=256).contains(&classes) || per_class == 0 {
        return Err(Error::InvalidArgument(
            "image task needs 2..=256 classes and per_class >= 1".into(),
        ));
    }
    const SIDE: usize = 28;
    let smooth = |rng: &mut SplitMix64| -> Vec<f64> {
        let mut img: Vec<f64> = (0..SIDE * SIDE).map(|_| rng.next_f64()).collect();
        // Three box blurs leave large-scale structure only.
        for _ in 0..3 {
            let mut out = vec![0.0; SIDE * SIDE];
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                            if (0..SIDE as i64).contains(&yy) && (0..SIDE as i64).contains(&xx) {
                                acc += img[yy as usize * SIDE + xx as usize];
                                cnt += 1.0;
                            }
                        }
                    }
                    out[y * SIDE + x] = acc / cnt;
                }
            }
            img = out;
        }
        // Center and rescale to a fixed dynamic range.
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in &img {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = (hi - lo).max(1e-9);
        img.iter().map(|v| (v - lo) / span).collect()
    };

    let mut template_rng = SplitMix64::from_seed_stream(seed, 10);
    let background = smooth(&mut template_rng);
    let templates: Vec<Vec<f64>> = (0..classes).map(|_| smooth(&mut template_rng)).collect();

    let n = classes * per_class;
    let mut rng = SplitMix64::from_seed_stream(seed, 20 + split);
    let mut data = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let gain = 0.7 + 0.3 * rng.next_f64();
        for p in 0..SIDE * SIDE {
            let signal = (1.0 - class_scale) * background[p] + class_scale * templates[class][p];
            let value = gain * signal + noise * rng.next_gaussian();
            data.push(value.clamp(0.0, 1.0));
        }
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, SIDE, SIDE], data)?, labels, classes)
}

/// One mini-batch with its provenance.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Dataset indices the rows came from.
    pub indices: Vec<usize>,
}

/// Deterministic epoch batching. The permutation for epoch `e` comes from a
/// Fisher-Yates shuffle driven by SplitMix64 seeded with (seed, e), so
/// the batch sequence is identical across runs and platforms.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    drop_last: bool,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        dataset: &'a Dataset,
        batch_size: usize,
        seed: u64,
        shuffle: bool,
        drop_last: bool,
    ) -> Result<Self> {
        if batch_size == 0 || batch_size > dataset.len() {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} out of range for {} examples",
                dataset.len()
            )));
        }
        Ok(BatchStream {
            dataset,
            batch_size,
            seed,
            shuffle,
            drop_last,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self) -> usize {
        if self.drop_last {
            self.dataset.len() / self.batch_size
        } else {
            self.dataset.len().div_ceil(self.batch_size)
        }
    }

    pub fn batches(&self, epoch: u64) -> Result<Vec<Batch>> {
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        if self.shuffle {
            let mut rng = SplitMix64::from_seed_stream(self.seed, epoch.wrapping_add(1));
            rng.shuffle(&mut order);
        }
        let mut out = Vec::with_capacity(self.batches_per_epoch());
        for chunk in order.chunks(self.batch_size) {
            if self.drop_last && chunk.len() < self.batch_size {
                break;
            }
            out.push(Batch {
                inputs: self.dataset.inputs().gather_rows(chunk)?,
                labels: chunk.iter().map(|&i| self.dataset.labels()[i]).collect(),
                indices: chunk.to_vec(),
            });
        }
        Ok(out)
    }
}
