//! Datasets, file loaders, synthetic tasks and batch samplers.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Labelled examples; `inputs` is `[N, ...sample shape]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_categories: usize,
    split: Split,
}

/// A slice of a dataset fed to one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_categories: usize, split: Split) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Dataset("dataset must contain at least one example".into()));
        }
        if inputs.rank() < 2 || inputs.shape()[0] != n {
            return Err(Error::Dataset(format!(
                "inputs of shape {:?} do not hold {n} examples",
                inputs.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_categories) {
            return Err(Error::Dataset(format!(
                "label {bad} outside [0, {num_categories})"
            )));
        }
        Ok(Self { inputs, labels, num_categories, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Gathers the given example indices into a batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let len = self.sample_len();
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&src[i * len..(i + 1) * len]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Batch {
            inputs: Tensor::from_parts(shape, data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` examples (or all of them).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.clamp(1, self.len());
        let idx: Vec<usize> = (0..n).collect();
        let b = self.batch(&idx);
        Dataset { inputs: b.inputs, labels: b.labels, num_categories: self.num_categories, split: self.split }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(format!("decompressing {}", path.display()), e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

const IDX_LABELS: u32 = 0x0000_0801;
const IDX_IMAGES: u32 = 0x0000_0803;

/// Contents of one IDX file.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxContents {
    /// `[count, rows, cols]` pixels scaled to `[0, 1]`.
    Images { count: usize, rows: usize, cols: usize, pixels: Vec<f64> },
    Labels(Vec<usize>),
}

fn format_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), offset: offset as u64, reason: reason.into() }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, bytes.len(), "truncated header"))
}

/// Reads an IDX image (`0x00000803`) or label (`0x00000801`) file, gzipped or raw.
pub fn read_idx(path: &Path) -> Result<IdxContents> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    match magic {
        IDX_IMAGES => {
            let count = be_u32(&bytes, 4, path)? as usize;
            let rows = be_u32(&bytes, 8, path)? as usize;
            let cols = be_u32(&bytes, 12, path)? as usize;
            let need = count
                .checked_mul(rows)
                .and_then(|n| n.checked_mul(cols))
                .and_then(|n| n.checked_add(16))
                .ok_or_else(|| format_err(path, 4, "header extents overflow"))?;
            if bytes.len() < need {
                return Err(format_err(
                    path,
                    bytes.len(),
                    format!("truncated pixel data, expected {need} bytes"),
                ));
            }
            if count == 0 || rows == 0 || cols == 0 {
                return Err(format_err(path, 4, "zero extent in header"));
            }
            let pixels = bytes[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
            Ok(IdxContents::Images { count, rows, cols, pixels })
        }
        IDX_LABELS => {
            let count = be_u32(&bytes, 4, path)? as usize;
            let need = 8 + count;
            if bytes.len() < need {
                return Err(format_err(
                    path,
                    bytes.len(),
                    format!("truncated label data, expected {need} bytes"),
                ));
            }
            Ok(IdxContents::Labels(bytes[8..need].iter().map(|&b| b as usize).collect()))
        }
        other => Err(format_err(path, 0, format!("bad magic {other:#010x}"))),
    }
}

/// Pairs an IDX image file with an IDX label file. Inputs are `[N, 1, rows, cols]`.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let (count, rows, cols, pixels) = match read_idx(images)? {
        IdxContents::Images { count, rows, cols, pixels } => (count, rows, cols, pixels),
        IdxContents::Labels(_) => return Err(format_err(images, 0, "expected an image file")),
    };
    let labels_v = match read_idx(labels)? {
        IdxContents::Labels(l) => l,
        IdxContents::Images { .. } => return Err(format_err(labels, 0, "expected a label file")),
    };
    if labels_v.len() != count {
        return Err(Error::Dataset(format!(
            "{} holds {count} images but {} has {} labels",
            images.display(),
            labels.display(),
            labels_v.len()
        )));
    }
    let categories = labels_v.iter().max().map_or(1, |m| m + 1);
    Dataset::new(
        Tensor::from_parts(vec![count, 1, rows, cols], pixels),
        labels_v,
        categories,
        split,
    )
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(&candidate);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Dataset(format!(
        "{} not found in {} (fetch the dataset manually; no download is attempted)",
        stem,
        dir.display()
    )))
}

/// Loads MNIST from its standard file names (raw or `.gz`) in `dir`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = find_file(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let ds = load_idx(&images, &labels, split)?;
    Ok(Dataset { num_categories: 10, ..ds })
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Reads one CIFAR-10 binary batch: records of a label byte plus R, G, B planes.
pub fn load_cifar10_binary(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = read_maybe_gz(path)?;
    if bytes.is_empty() {
        return Err(format_err(path, 0, "empty file"));
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        let partial = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(format_err(
            path,
            partial,
            format!("file size {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(format_err(path, i * CIFAR_RECORD, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Dataset::new(Tensor::from_parts(vec![n, 3, 32, 32], pixels), labels, 10, split)
}

/// Loads the standard CIFAR-10 binary distribution from `dir`.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let part = load_cifar10_binary(&find_file(dir, &name)?, split)?;
        labels.extend_from_slice(part.labels());
        inputs.extend_from_slice(part.inputs().data());
    }
    let n = labels.len();
    Dataset::new(Tensor::from_parts(vec![n, 3, 32, 32], inputs), labels, 10, split)
}

/// Gaussian clusters: category `c` is centred at distance `separation` from
/// the origin in direction `2πc/k` of the first two coordinates (first
/// coordinate only when `dim == 1`), with unit isotropic noise.
pub fn make_synthetic(
    categories: usize,
    per_category: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if categories == 0 || per_category == 0 || dim == 0 {
        return Err(Error::InvalidArgument("synthetic task needs k, n, d >= 1".into()));
    }
    let mut rng = stream(seed, Stream::Synthetic);
    let n = categories * per_category;
    let mut order: Vec<usize> = (0..n).map(|i| i % categories).collect();
    order.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * dim);
    for &c in &order {
        let angle = std::f64::consts::TAU * c as f64 / categories as f64;
        for j in 0..dim {
            let centre = match (j, dim) {
                (0, 1) => separation * c as f64,
                (0, _) => separation * angle.cos(),
                (1, _) => separation * angle.sin(),
                _ => 0.0,
            };
            let noise: f64 = rng.sample(StandardNormal);
            data.push(centre + noise);
        }
    }
    Dataset::new(Tensor::from_parts(vec![n, dim], data), order, categories, Split::Train)
}

/// Random crop with zero padding followed by a random horizontal flip, per image.
pub fn augment_images(batch: &Batch, padding: usize, rng: &mut impl Rng) -> Batch {
    let shape = batch.inputs.shape();
    let [b, c, h, w] = shape[..] else { return batch.clone() };
    let src = batch.inputs.data();
    let mut out = vec![0.0; src.len()];
    for i in 0..b {
        let dy = rng.random_range(0..=2 * padding) as isize - padding as isize;
        let dx = rng.random_range(0..=2 * padding) as isize - padding as isize;
        let flip = rng.random_bool(0.5);
        for ch in 0..c {
            let plane = (i * c + ch) * h * w;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx >= 0 && sx < w as isize {
                        out[plane + y * w + x] = src[plane + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Batch { inputs: Tensor::from_parts(shape.to_vec(), out), labels: batch.labels.clone() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerMode {
    Shuffled,
    /// Per-category counts in every batch differ by at most one.
    ClassBalanced,
    /// One class-balanced (when possible) batch, returned on every call.
    FixedSingleBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub mode: SamplerMode,
    pub seed: u64,
}

/// Draws batches from a dataset; deterministic for a given seed.
pub struct Sampler<'a> {
    data: &'a Dataset,
    mode: SamplerMode,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pools: Vec<Vec<usize>>,
    pool_cursor: Vec<usize>,
    fixed: Option<Batch>,
    consumed: usize,
}

impl<'a> Sampler<'a> {
    /// `batch_size` is clamped to the dataset size.
    pub fn new(data: &'a Dataset, cfg: SamplerConfig) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let batch_size = cfg.batch_size.min(data.len());
        let k = data.num_categories();
        let mut pools = vec![Vec::new(); k];
        for (i, &l) in data.labels().iter().enumerate() {
            pools[l].push(i);
        }
        if cfg.mode == SamplerMode::ClassBalanced {
            if batch_size < k {
                return Err(Error::InvalidArgument(format!(
                    "class-balanced batches need batch size >= {k} categories, got {batch_size}"
                )));
            }
            if let Some(missing) = pools.iter().position(Vec::is_empty) {
                return Err(Error::Dataset(format!(
                    "class-balanced sampling: category {missing} has no examples"
                )));
            }
        }
        let mut rng = stream(cfg.seed, Stream::Sampler);
        for p in &mut pools {
            p.shuffle(&mut rng);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            data,
            mode: cfg.mode,
            batch_size,
            rng,
            order,
            cursor: 0,
            pool_cursor: vec![0; k],
            pools,
            fixed: None,
            consumed: 0,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Number of batches handed out so far.
    pub fn consumed(&self) -> usize {
        self.consumed
    }

    fn shuffled_indices(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        idx
    }

    fn balanced_indices(&mut self) -> Vec<usize> {
        let k = self.pools.len();
        let base = self.batch_size / k;
        let extra = self.batch_size % k;
        let mut cats: Vec<usize> = (0..k).collect();
        cats.shuffle(&mut self.rng);
        let mut counts = vec![base; k];
        for &c in &cats[..extra] {
            counts[c] += 1;
        }
        let mut idx = Vec::with_capacity(self.batch_size);
        for (c, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                if self.pool_cursor[c] == self.pools[c].len() {
                    self.pools[c].shuffle(&mut self.rng);
                    self.pool_cursor[c] = 0;
                }
                idx.push(self.pools[c][self.pool_cursor[c]]);
                self.pool_cursor[c] += 1;
            }
        }
        idx.shuffle(&mut self.rng);
        idx
    }

    fn balanced_possible(&self) -> bool {
        self.batch_size >= self.pools.len() && self.pools.iter().all(|p| !p.is_empty())
    }

    pub fn next_batch(&mut self) -> Batch {
        self.consumed += 1;
        match self.mode {
            SamplerMode::Shuffled => {
                let idx = self.shuffled_indices();
                self.data.batch(&idx)
            }
            SamplerMode::ClassBalanced => {
                let idx = self.balanced_indices();
                self.data.batch(&idx)
            }
            SamplerMode::FixedSingleBatch => {
                if self.fixed.is_none() {
                    let idx = if self.balanced_possible() {
                        self.balanced_indices()
                    } else {
                        self.shuffled_indices()
                    };
                    self.fixed = Some(self.data.batch(&idx));
                }
                self.fixed.clone().expect("just filled")
            }
        }
    }

    /// Draws `n` consecutive batches.
    pub fn take(&mut self, n: usize) -> Vec<Batch> {
        (0..n).map(|_| self.next_batch()).collect()
    }
}
