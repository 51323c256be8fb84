//! MNIST ingestion, permuted tasks and row-sequence mini-batches.
//!
//! An image of `rows × cols` pixels is read one row per timestep, so a
//! 28×28 digit becomes 28 timesteps of 28 features.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, LoadError, Result};
use crate::numerics::{Matrix, Real, Rng, View};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const N_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images kept as raw bytes; conversion to `[0, 1]` happens when batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    rows: usize,
    cols: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Vec<u8>, labels: Vec<u8>, rows: usize, cols: usize, split: Split) -> Result<Self> {
        let pixels = rows * cols;
        if pixels == 0 || images.len() != labels.len() * pixels {
            return Err(LoadError::CountMismatch {
                images: images.len().checked_div(pixels).unwrap_or(0),
                labels: labels.len(),
            }
            .into());
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= N_CLASSES) {
            return Err(LoadError::BadLabel {
                path: PathBuf::new(),
                index,
                label,
            }
            .into());
        }
        Ok(Dataset {
            images,
            labels,
            rows,
            cols,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Normalized pixel value.
    pub fn pixel<T: Real>(&self, i: usize, j: usize) -> T {
        T::lit(self.image(i)[j] as f64 / 255.0)
    }

    /// The examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.pixels());
        let labels = indices
            .iter()
            .map(|&i| {
                images.extend_from_slice(self.image(i));
                self.labels[i]
            })
            .collect();
        Dataset {
            images,
            labels,
            rows: self.rows,
            cols: self.cols,
            split: self.split,
        }
    }

    /// First `n` examples (or all of them if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// A seeded random subset holding `fraction` of the examples.
    pub fn sample_fraction(&self, fraction: f64, rng: &mut Rng) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::contract(
                "sample_fraction",
                format!("fraction {fraction} is outside (0, 1]"),
            ));
        }
        let n = ((self.len() as f64 * fraction).round() as usize).max(1);
        self.sample(n, rng)
    }

    /// A seeded random subset of `n` examples, kept in dataset order.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Dataset> {
        let mut idx = rng.choice(self.len(), n)?;
        idx.sort_unstable();
        Ok(self.select(&idx))
    }

    /// Builds a batch from the examples at `indices`, all tagged with `task`.
    pub fn sequence_batch<T: Real>(&self, indices: &[usize], task: usize) -> SequenceBatch<T> {
        let (n_x, n_t, n_b) = (self.cols, self.rows, indices.len());
        let width = n_t * n_b;
        let mut features = vec![T::zero(); n_x * width];
        for (j, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            for t in 0..n_t {
                for f in 0..n_x {
                    features[f * width + t * n_b + j] = T::lit(img[t * n_x + f] as f64 / 255.0);
                }
            }
        }
        SequenceBatch {
            n_x,
            n_t,
            features: Matrix::from_vec(n_x, width, features).expect("sized above"),
            labels: indices.iter().map(|&i| self.label(i)).collect(),
            task: vec![task; n_b],
            replay: vec![false; n_b],
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, LoadError> {
    let io_err = |source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io_err)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Validates an IDX header and returns `(dims, payload)`.
fn parse_idx<'a>(path: &Path, bytes: &'a [u8], magic: u32, ndims: usize) -> Result<(Vec<usize>, &'a [u8]), LoadError> {
    let header = 4 + 4 * ndims;
    if bytes.len() < 4 {
        return Err(LoadError::Truncated {
            path: path.to_path_buf(),
            expected: header,
            found: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(LoadError::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    if bytes.len() < header {
        return Err(LoadError::Truncated {
            path: path.to_path_buf(),
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndims).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(LoadError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(LoadError::TrailingBytes {
            path: path.to_path_buf(),
            found: payload.len() - expected,
        });
    }
    Ok((dims, payload))
}

/// Reads an IDX image/label pair. Either file may be gzip-compressed.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset, LoadError> {
    let img_bytes = read_file(images)?;
    let (dims, pixels) = parse_idx(images, &img_bytes, IMAGE_MAGIC, 3)?;
    let lab_bytes = read_file(labels)?;
    let (ldims, labs) = parse_idx(labels, &lab_bytes, LABEL_MAGIC, 1)?;
    if dims[0] != ldims[0] {
        return Err(LoadError::CountMismatch {
            images: dims[0],
            labels: ldims[0],
        });
    }
    if let Some((index, &label)) = labs.iter().enumerate().find(|(_, &l)| l as usize >= N_CLASSES) {
        return Err(LoadError::BadLabel {
            path: labels.to_path_buf(),
            index,
            label,
        });
    }
    Ok(Dataset {
        images: pixels.to_vec(),
        labels: labs.to_vec(),
        rows: dims[1],
        cols: dims[2],
        split,
    })
}

/// Finds `{stem}` or `{stem}.gz` in `dir`.
fn locate(dir: &Path, stem: &str) -> Result<PathBuf, LoadError> {
    let plain = dir.join(stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(LoadError::Io {
        path: plain,
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file (also tried .gz)"),
    })
}

pub const MNIST_FILES: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];

/// Paths of the four standard MNIST files, failing on the first missing one.
pub fn mnist_paths(dir: &Path) -> Result<[(PathBuf, PathBuf); 2], LoadError> {
    let find = |(i, l): (&str, &str)| -> Result<(PathBuf, PathBuf), LoadError> { Ok((locate(dir, i)?, locate(dir, l)?)) };
    Ok([find(MNIST_FILES[0])?, find(MNIST_FILES[1])?])
}

/// Loads the standard train and test splits from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset), LoadError> {
    let [(ti, tl), (vi, vl)] = mnist_paths(dir)?;
    Ok((load_idx(&ti, &tl, Split::Train)?, load_idx(&vi, &vl, Split::Test)?))
}

/// One permuted-MNIST task. `index` counts from 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    index: usize,
    seed: u64,
    permutation: Vec<usize>,
}

impl TaskSpec {
    pub fn new(index: usize, seed: u64, permutation: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; permutation.len()];
        for &p in &permutation {
            if p >= seen.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::contract("TaskSpec", "permutation is not a bijection"));
            }
        }
        Ok(TaskSpec {
            index,
            seed,
            permutation,
        })
    }

    pub fn identity(index: usize, n: usize) -> Self {
        TaskSpec {
            index,
            seed: 0,
            permutation: (0..n).collect(),
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn inverse(&self) -> TaskSpec {
        let mut inv = vec![0; self.permutation.len()];
        for (i, &p) in self.permutation.iter().enumerate() {
            inv[p] = i;
        }
        TaskSpec {
            index: self.index,
            seed: self.seed,
            permutation: inv,
        }
    }
}

/// `count` tasks over `pixels` inputs; task `t` is seeded by `(base_seed, t)`.
pub fn make_tasks(count: usize, base_seed: u64, pixels: usize) -> Result<Vec<TaskSpec>> {
    if count == 0 {
        return Err(Error::contract("make_tasks", "need at least one task"));
    }
    Ok((1..=count)
        .map(|t| {
            let mut rng = Rng::derive(base_seed, t as u64);
            TaskSpec {
                index: t,
                seed: base_seed,
                permutation: rng.permutation(pixels),
            }
        })
        .collect())
}

/// Output pixel `i` is input pixel `permutation[i]`; labels are untouched.
pub fn apply_task(ds: &Dataset, spec: &TaskSpec) -> Result<Dataset> {
    let p = ds.pixels();
    if spec.permutation.len() != p {
        return Err(Error::contract(
            "apply_task",
            format!("permutation over {} pixels applied to {p}-pixel images", spec.permutation.len()),
        ));
    }
    let mut images = vec![0u8; ds.images.len()];
    for (out, img) in images.chunks_exact_mut(p).zip(ds.images.chunks_exact(p)) {
        for (o, &src) in out.iter_mut().zip(&spec.permutation) {
            *o = img[src];
        }
    }
    Ok(Dataset {
        images,
        labels: ds.labels.clone(),
        rows: ds.rows,
        cols: ds.cols,
        split: ds.split,
    })
}

/// A mini-batch of `n_b` sequences of `n_t` steps with `n_x` features each.
///
/// `features` is `n_x × (n_t·n_b)`: the columns of timestep `t` are the
/// contiguous block `t·n_b .. (t+1)·n_b`, so one GEMM can project every
/// timestep at once and a single step is a cheap column-block view.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch<T: Real> {
    n_x: usize,
    n_t: usize,
    features: Matrix<T>,
    pub labels: Vec<usize>,
    /// Source task of each column.
    pub task: Vec<usize>,
    /// Whether each column came from the replay buffer.
    pub replay: Vec<bool>,
}

impl<T: Real> SequenceBatch<T> {
    /// Assembles a batch from flattened sequences, each `n_t·n_x` long and
    /// laid out timestep-major.
    pub fn from_sequences(n_x: usize, n_t: usize, seqs: &[&[T]], labels: Vec<usize>, task: Vec<usize>, replay: Vec<bool>) -> Result<Self> {
        let n_b = seqs.len();
        if labels.len() != n_b || task.len() != n_b || replay.len() != n_b {
            return Err(Error::contract("SequenceBatch", "tag lengths differ from the number of sequences"));
        }
        if let Some(s) = seqs.iter().find(|s| s.len() != n_x * n_t) {
            return Err(Error::contract(
                "SequenceBatch",
                format!("sequence of length {} where {n_t}×{n_x} was expected", s.len()),
            ));
        }
        let width = n_t * n_b;
        let mut data = vec![T::zero(); n_x * width];
        for (j, s) in seqs.iter().enumerate() {
            for t in 0..n_t {
                for f in 0..n_x {
                    data[f * width + t * n_b + j] = s[t * n_x + f];
                }
            }
        }
        Ok(SequenceBatch {
            n_x,
            n_t,
            features: Matrix::from_vec(n_x, width, data)?,
            labels,
            task,
            replay,
        })
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn n_b(&self) -> usize {
        self.labels.len()
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    /// Inputs of timestep `t` (0-based) as an `n_x × n_b` view.
    pub fn step(&self, t: usize) -> View<'_, T> {
        self.features.col_block(t * self.n_b(), self.n_b())
    }

    pub fn step_matrix(&self, t: usize) -> Matrix<T> {
        self.features.copy_col_block(t * self.n_b(), self.n_b())
    }

    /// Column `j` flattened timestep-major (the inverse of `from_sequences`).
    pub fn sequence(&self, j: usize) -> Vec<T> {
        let (n_b, width) = (self.n_b(), self.features.cols());
        let data = self.features.data();
        let mut out = Vec::with_capacity(self.n_x * self.n_t);
        for t in 0..self.n_t {
            for f in 0..self.n_x {
                out.push(data[f * width + t * n_b + j]);
            }
        }
        out
    }

    /// Appends the columns of `other` after those of `self`.
    pub fn concat(&self, other: &SequenceBatch<T>) -> Result<Self> {
        if (self.n_x, self.n_t) != (other.n_x, other.n_t) {
            return Err(Error::Shape {
                op: "SequenceBatch::concat",
                left: (self.n_x, self.n_t),
                right: (other.n_x, other.n_t),
            });
        }
        let (a, b) = (self.n_b(), other.n_b());
        let width = self.n_t * (a + b);
        let mut features = Matrix::zeros(self.n_x, width);
        for t in 0..self.n_t {
            features.write_col_block(t * (a + b), &self.step_matrix(t));
            features.write_col_block(t * (a + b) + a, &other.step_matrix(t));
        }
        let cat = |x: &[usize], y: &[usize]| x.iter().chain(y).copied().collect::<Vec<_>>();
        Ok(SequenceBatch {
            n_x: self.n_x,
            n_t: self.n_t,
            features,
            labels: cat(&self.labels, &other.labels),
            task: cat(&self.task, &other.task),
            replay: self.replay.iter().chain(&other.replay).copied().collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> SequenceBatch<U> {
        SequenceBatch {
            n_x: self.n_x,
            n_t: self.n_t,
            features: self.features.cast(),
            labels: self.labels.clone(),
            task: self.task.clone(),
            replay: self.replay.clone(),
        }
    }
}

/// Iterator over mini-batches of a dataset. The last batch may be short.
pub struct Batches<'a, T> {
    ds: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    n_b: usize,
    task: usize,
    _real: std::marker::PhantomData<T>,
}

impl<T: Real> Iterator for Batches<'_, T> {
    type Item = SequenceBatch<T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.n_b).min(self.order.len());
        let batch = self.ds.sequence_batch(&self.order[self.pos..end], self.task);
        self.pos = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.n_b);
        (n, Some(n))
    }
}

impl<T: Real> ExactSizeIterator for Batches<'_, T> {}

/// Mini-batches over `ds`. With `shuffle`, the order is a permutation drawn
/// from `rng`; otherwise examples come in storage order and `rng` is not
/// touched.
pub fn batches<'a, T: Real>(ds: &'a Dataset, n_b: usize, rng: &mut Rng, shuffle: bool, task: usize) -> Result<Batches<'a, T>> {
    if n_b == 0 {
        return Err(Error::contract("batches", "batch size must be at least 1"));
    }
    let order = if shuffle {
        rng.permutation(ds.len())
    } else {
        (0..ds.len()).collect()
    };
    Ok(Batches {
        ds,
        order,
        pos: 0,
        n_b,
        task,
        _real: std::marker::PhantomData,
    })
}

/// Number of batches `batches` yields for `n` examples.
pub fn batch_count(n: usize, n_b: usize) -> usize {
    n.div_ceil(n_b)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;
    use std::io::Write;

    /// A small synthetic dataset with distinct images.
    pub(crate) fn synthetic(n: usize, rows: usize, cols: usize, seed: u64) -> Dataset {
        let mut rng = Rng::new(seed);
        let images = (0..n * rows * cols).map(|_| rng.below(256) as u8).collect();
        let labels = (0..n).map(|i| (i % N_CLASSES) as u8).collect();
        Dataset::new(images, labels, rows, cols, Split::Train).unwrap()
    }

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(payload);
        out
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn parses_plain_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let pix: Vec<u8> = (0..2 * 3 * 4).map(|v| v as u8 * 10).collect();
        let img = idx_bytes(IMAGE_MAGIC, &[2, 3, 4], &pix);
        let lab = idx_bytes(LABEL_MAGIC, &[2], &[7, 1]);
        let ip = write(dir.path(), "i", &img);
        let lp = write(dir.path(), "l", &lab);
        let ds = load_idx(&ip, &lp, Split::Test).unwrap();
        assert_eq!((ds.len(), ds.rows(), ds.cols()), (2, 3, 4));
        assert_eq!(ds.label(0), 7);
        assert_eq!(ds.pixel::<f64>(1, 0), 120.0 / 255.0);

        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        gz.write_all(&img).unwrap();
        let gp = write(dir.path(), "i.gz", &gz.finish().unwrap());
        assert_eq!(load_idx(&gp, &lp, Split::Test).unwrap(), ds);
    }

    #[test]
    fn distinct_load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = idx_bytes(IMAGE_MAGIC, &[2, 2, 2], &[0; 8]);
        let lab = idx_bytes(LABEL_MAGIC, &[2], &[1, 2]);
        let ip = write(dir.path(), "i", &img);
        let lp = write(dir.path(), "l", &lab);

        let bad = write(dir.path(), "bad", &idx_bytes(LABEL_MAGIC, &[2, 2, 2], &[0; 8]));
        assert!(matches!(load_idx(&bad, &lp, Split::Train), Err(LoadError::BadMagic { .. })));

        let short = write(dir.path(), "short", &lab[..lab.len() - 1]);
        assert!(matches!(load_idx(&ip, &short, Split::Train), Err(LoadError::Truncated { .. })));

        let mut long = lab.clone();
        long.push(0);
        let long = write(dir.path(), "long", &long);
        assert!(matches!(load_idx(&ip, &long, Split::Train), Err(LoadError::TrailingBytes { found: 1, .. })));

        let three = write(dir.path(), "three", &idx_bytes(LABEL_MAGIC, &[3], &[1, 2, 3]));
        assert!(matches!(
            load_idx(&ip, &three, Split::Train),
            Err(LoadError::CountMismatch { images: 2, labels: 3 })
        ));

        let eleven = write(dir.path(), "eleven", &idx_bytes(LABEL_MAGIC, &[2], &[1, 11]));
        assert!(matches!(
            load_idx(&ip, &eleven, Split::Train),
            Err(LoadError::BadLabel { index: 1, label: 11, .. })
        ));

        let missing = dir.path().join("missing");
        assert!(matches!(load_idx(&missing, &lp, Split::Train), Err(LoadError::Io { .. })));
    }

    #[test]
    fn tasks_are_reproducible_bijections() {
        let a = make_tasks(5, 42, 784).unwrap();
        assert_eq!(a, make_tasks(5, 42, 784).unwrap());
        for spec in &a {
            let mut p = spec.permutation().to_vec();
            p.sort_unstable();
            assert_eq!(p, (0..784).collect::<Vec<_>>());
            assert_ne!(spec.permutation(), TaskSpec::identity(0, 784).permutation());
        }
        assert_ne!(a[0].permutation(), a[1].permutation());
        assert!(make_tasks(0, 1, 784).is_err());
    }

    #[test]
    fn distinct_tasks_share_few_fixed_points() {
        let mut total = 0.0;
        for seed in 0..5 {
            let t = make_tasks(2, seed, 784).unwrap();
            let shared = t[0]
                .permutation()
                .iter()
                .zip(t[1].permutation())
                .filter(|(a, b)| a == b)
                .count();
            total += shared as f64 / 784.0;
        }
        assert!(total / 5.0 < 0.05);
    }

    #[test]
    fn apply_task_semantics() {
        let ds = synthetic(100, 28, 28, 3);
        assert_eq!(apply_task(&ds, &TaskSpec::identity(1, 784)).unwrap(), ds);
        let spec = &make_tasks(1, 9, 784).unwrap()[0];
        let moved = apply_task(&ds, spec).unwrap();
        assert_eq!(moved.labels(), ds.labels());
        assert_eq!(moved.image(5)[10], ds.image(5)[spec.permutation()[10]]);
        let mut before = ds.image(7).to_vec();
        let mut after = moved.image(7).to_vec();
        before.sort_unstable();
        after.sort_unstable();
        assert_eq!(before, after);
        assert_eq!(apply_task(&moved, &spec.inverse()).unwrap(), ds);
        assert!(apply_task(&synthetic(1, 2, 2, 0), spec).is_err());
    }

    #[test]
    fn batch_counts() {
        assert_eq!(batch_count(60_000, 32), 1875);
        let ds = synthetic(70, 4, 3, 1);
        let mut rng = Rng::new(0);
        let sizes: Vec<usize> = batches::<f32>(&ds, 32, &mut rng, true, 1).unwrap().map(|b| b.n_b()).collect();
        assert_eq!(sizes, vec![32, 32, 6]);
        assert_eq!(batches::<f32>(&ds, 1, &mut rng, false, 1).unwrap().len(), 70);
        assert!(batches::<f32>(&ds, 0, &mut rng, false, 1).is_err());
    }

    #[test]
    fn row_r_is_timestep_r() {
        let ds = synthetic(5, 28, 28, 2);
        let b: SequenceBatch<f64> = ds.sequence_batch(&[3, 1], 4);
        assert_eq!((b.n_x(), b.n_t(), b.n_b()), (28, 28, 2));
        assert_eq!(b.task, vec![4, 4]);
        for t in [0, 13, 27] {
            let step = b.step_matrix(t);
            for f in 0..28 {
                assert_eq!(step.get(f, 0), ds.image(3)[t * 28 + f] as f64 / 255.0);
                assert_eq!(step.get(f, 1), ds.image(1)[t * 28 + f] as f64 / 255.0);
            }
        }
        assert!(b.features().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sequences_round_trip_and_concat() {
        let ds = synthetic(6, 3, 2, 5);
        let a: SequenceBatch<f64> = ds.sequence_batch(&[0, 1, 2], 1);
        let b: SequenceBatch<f64> = ds.sequence_batch(&[3, 4], 2);
        let seqs: Vec<Vec<f64>> = (0..3).map(|j| a.sequence(j)).collect();
        let refs: Vec<&[f64]> = seqs.iter().map(|s| s.as_slice()).collect();
        let rebuilt = SequenceBatch::from_sequences(2, 3, &refs, a.labels.clone(), a.task.clone(), a.replay.clone()).unwrap();
        assert_eq!(rebuilt, a);
        let c = a.concat(&b).unwrap();
        assert_eq!(c, ds.sequence_batch::<f64>(&[0, 1, 2, 3, 4], 0).with_tags(&[1, 1, 1, 2, 2]));
    }

    impl<T: Real> SequenceBatch<T> {
        fn with_tags(mut self, task: &[usize]) -> Self {
            self.task = task.to_vec();
            self
        }
    }

    proptest! {
        #[test]
        fn epoch_covers_every_example_once(n in 1usize..200, n_b in 1usize..40, seed in any::<u64>()) {
            let ds = synthetic(n, 2, 2, seed);
            let mut rng = Rng::new(seed);
            let mut seen: Vec<Vec<f32>> = Vec::new();
            for b in batches::<f32>(&ds, n_b, &mut rng, true, 0).unwrap() {
                for j in 0..b.n_b() {
                    seen.push(b.sequence(j));
                }
            }
            let mut want: Vec<Vec<f32>> = (0..n).map(|i| ds.sequence_batch::<f32>(&[i], 0).sequence(0)).collect();
            let key = |v: &Vec<f32>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            seen.sort_by_key(key);
            want.sort_by_key(key);
            prop_assert_eq!(seen, want);
        }

        #[test]
        fn inverse_round_trip(seed in any::<u64>()) {
            let ds = synthetic(100, 28, 28, seed);
            let spec = &make_tasks(1, seed, 784).unwrap()[0];
            let back = apply_task(&apply_task(&ds, spec).unwrap(), &spec.inverse()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
