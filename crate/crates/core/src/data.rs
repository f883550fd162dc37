//! Datasets, file loaders, public/private splits and the Poisson sampler.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Stream id used for drawing stratified subsets.
pub const SUBSET_STREAM: u64 = 0x5eed_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Public,
    Private,
}

/// Labelled examples with inputs scaled to `[0, 1]`.
///
/// `origin[i]` is the position of example `i` in the file (or generator)
/// it came from, so subsets carved from one source can be checked for
/// overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    inputs: Tensor<T>,
    labels: Vec<usize>,
    class_count: usize,
    provenance: Provenance,
    origin: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    /// `inputs` is `[N, ...]`; labels must lie in `[0, class_count)`.
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, class_count: usize, provenance: Provenance) -> Result<Self> {
        let n = inputs.dims()[0];
        if inputs.dims().len() < 2 {
            return Err(Error::shape(format!("dataset inputs need rank >= 2, got {:?}", inputs.dims())));
        }
        if labels.len() != n {
            return Err(Error::data(format!("{n} inputs but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::data(format!("label {bad} out of range for {class_count} classes")));
        }
        Ok(Dataset {
            inputs,
            labels,
            class_count,
            provenance,
            origin: (0..n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor<T> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    /// Shape of one example, e.g. `[1, 28, 28]`.
    pub fn item_dims(&self) -> &[usize] {
        &self.inputs.dims()[1..]
    }

    pub fn item_len(&self) -> usize {
        self.item_dims().iter().product()
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let k = self.item_len();
        &self.inputs.data()[i * k..(i + 1) * k]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[T]> {
        self.inputs.data().chunks_exact(self.item_len())
    }

    /// Inputs and labels of the given examples.
    pub fn gather(&self, indices: &[usize]) -> (Vec<&[T]>, Vec<usize>) {
        (
            indices.iter().map(|&i| self.sample(i)).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// Widens the label space, e.g. when a subset lacks the top class.
    pub fn with_class_count(mut self, class_count: usize) -> Result<Self> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::data(format!("label {bad} out of range for {class_count} classes")));
        }
        self.class_count = class_count;
        Ok(self)
    }

    /// Number of examples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// The examples at `indices` (positions in this dataset), keeping
    /// their origins.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::data("selection is empty"));
        }
        let k = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index { index: i, len: self.len() });
            }
            data.extend_from_slice(self.sample(i));
        }
        let mut dims = self.inputs.dims().to_vec();
        dims[0] = indices.len();
        Ok(Dataset {
            inputs: Tensor::from_parts_unchecked(Shape::new(dims)?, data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            provenance: self.provenance,
            origin: indices.iter().map(|&i| self.origin[i]).collect(),
        })
    }

    /// Examples of all parts in order, with origins renumbered as
    /// positions in the concatenation.
    pub fn concat(parts: &[Dataset<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::data("nothing to concatenate"))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut classes = 0;
        for d in parts {
            if d.item_dims() != first.item_dims() {
                return Err(Error::shape(format!(
                    "cannot concatenate items {:?} and {:?}",
                    first.item_dims(),
                    d.item_dims()
                )));
            }
            data.extend_from_slice(d.inputs.data());
            labels.extend_from_slice(&d.labels);
            classes = classes.max(d.class_count);
        }
        let mut dims = first.inputs.dims().to_vec();
        dims[0] = labels.len();
        let inputs = Tensor::from_parts_unchecked(Shape::new(dims)?, data);
        Dataset::new(inputs, labels, classes, first.provenance)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        let data = self.inputs.data().iter().map(|&v| U::of(v.real())).collect();
        Dataset {
            inputs: Tensor::from_parts_unchecked(self.inputs.shape().clone(), data),
            labels: self.labels.clone(),
            class_count: self.class_count,
            provenance: self.provenance,
            origin: self.origin.clone(),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(path, io::Error::new(io::ErrorKind::UnexpectedEof, format!("truncated {what}")))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| truncated(path, "IDX header"))
}

fn idx_header(bytes: &[u8], path: &Path, magic: u32) -> Result<(Vec<usize>, usize)> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::format(format!(
            "{}: IDX magic {found:#010x}, expected {magic:#010x}",
            path.display()
        )));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok((dims, 4 + 4 * rank))
}

fn scale_pixels<T: Scalar>(bytes: &[u8]) -> Vec<T> {
    bytes.iter().map(|&b| T::of(b as f64 / 255.0)).collect()
}

/// Parses IDX image and label files already read into memory. `path`
/// only labels error messages.
pub fn parse_idx<T: Scalar>(images: &[u8], labels: &[u8], path: &Path) -> Result<Dataset<T>> {
    let (dims, off) = idx_header(images, path, IDX_IMAGES_MAGIC)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = images
        .get(off..off + n * rows * cols)
        .ok_or_else(|| truncated(path, "IDX image data"))?;
    let (ldims, loff) = idx_header(labels, path, IDX_LABELS_MAGIC)?;
    if ldims[0] != n {
        return Err(Error::data(format!("{n} images but {} labels", ldims[0])));
    }
    if n == 0 {
        return Err(Error::data(format!("{}: no examples", path.display())));
    }
    let label_bytes = labels.get(loff..loff + n).ok_or_else(|| truncated(path, "IDX label data"))?;
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let inputs = Tensor::new(Shape::new(vec![n, 1, rows, cols])?, scale_pixels(pixels))?;
    Dataset::new(inputs, labels, classes, Provenance::Private)
}

/// Loads an IDX image file and its label file into `[N, 1, rows, cols]`.
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    // header errors name whichever file is at fault
    idx_header(&labels, labels_path, IDX_LABELS_MAGIC)?;
    parse_idx(&images, &labels, images_path)
}

/// Parses CIFAR-style records: one label byte then 3072 channel-major
/// pixel bytes.
pub fn parse_cifar<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Dataset<T>> {
    if bytes.is_empty() {
        return Err(Error::data(format!("{}: empty file", path.display())));
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(format!(
            "{}: length {} is not a multiple of {CIFAR_RECORD}",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        data.extend(scale_pixels::<T>(&rec[1..]));
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    let inputs = Tensor::new(Shape::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE])?, data)?;
    Dataset::new(inputs, labels, classes, Provenance::Private)
}

pub fn load_cifar_binary<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    parse_cifar(&read_file(path)?, path)
}

/// Per-class quotas summing to `total` by the largest-remainder rule.
fn stratified_quotas(hist: &[usize], fraction: f64, total: usize) -> Vec<usize> {
    let exact: Vec<f64> = hist.iter().map(|&c| c as f64 * fraction).collect();
    let mut quotas: Vec<usize> = exact.iter().zip(hist).map(|(&e, &c)| (e.floor() as usize).min(c)).collect();
    let mut order: Vec<usize> = (0..hist.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut missing = total.saturating_sub(quotas.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if quotas[c] < hist[c] {
            quotas[c] += 1;
            missing -= 1;
        }
    }
    quotas
}

/// `ceil(fraction * N)`, snapping products within rounding error of an
/// integer.
fn subset_size(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    (k as usize).clamp(1, n)
}

/// Positions (sorted) of a class-stratified sample of `ceil(fraction * N)`
/// examples.
fn stratified_positions<T: Scalar>(d: &Dataset<T>, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("subset fraction must lie in (0, 1], got {fraction}")));
    }
    let total = subset_size(fraction, d.len());
    let quotas = stratified_quotas(&d.class_histogram(), fraction, total);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); d.class_count()];
    for (i, &l) in d.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut stream = RngStream::new(seed, SUBSET_STREAM);
    let mut picked = Vec::with_capacity(total);
    for (members, &k) in by_class.iter_mut().zip(&quotas) {
        let n = members.len();
        for i in 0..k {
            let j = i + stream.below(n - i);
            members.swap(i, j);
        }
        picked.extend_from_slice(&members[..k]);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Class-stratified subset of `ceil(fraction * N)` examples, tagged public.
pub fn subset_fraction<T: Scalar>(d: &Dataset<T>, fraction: f64, seed: u64) -> Result<Dataset<T>> {
    let picked = stratified_positions(d, fraction, seed)?;
    Ok(d.select(&picked)?.with_provenance(Provenance::Public))
}

/// Stratified public subset and the disjoint private remainder.
pub fn split_public_private<T: Scalar>(
    d: &Dataset<T>,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    let picked = stratified_positions(d, fraction, seed)?;
    let mut is_public = vec![false; d.len()];
    for &i in &picked {
        is_public[i] = true;
    }
    let rest: Vec<usize> = (0..d.len()).filter(|&i| !is_public[i]).collect();
    let public = d.select(&picked)?.with_provenance(Provenance::Public);
    let private = d.select(&rest)?.with_provenance(Provenance::Private);
    Ok((public, private))
}

/// Fails if two datasets carved from the same source share an example.
pub fn check_disjoint<T: Scalar>(a: &Dataset<T>, b: &Dataset<T>) -> Result<()> {
    let seen: HashSet<usize> = a.origin().iter().copied().collect();
    match b.origin().iter().find(|o| seen.contains(o)) {
        Some(o) => Err(Error::data(format!("public and private data share source example {o}"))),
        None => Ok(()),
    }
}

/// Sorted, unique positions of one Poisson-sampled mini-batch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MiniBatch {
    pub indices: Vec<usize>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Includes each of `n` examples independently with probability `q`,
/// using one uniform draw per example.
pub fn poisson_sample(n: usize, q: f64, stream: &mut RngStream) -> Result<MiniBatch> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::config(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    let indices = (0..n).filter(|_| stream.uniform() < q).collect();
    Ok(MiniBatch { indices })
}

/// A seeded Gaussian-blob classification task for tests and smoke runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    /// Shape of one example, e.g. `[1, 4, 4]`.
    pub item_dims: Vec<usize>,
    pub per_class: usize,
    /// Standard deviation of each example around its class center.
    pub spread: f64,
    /// Seed of the class centers.
    pub seed: u64,
    /// Stream the examples are drawn from. Train and test sets of one task
    /// share `seed` and differ here.
    #[serde(default = "first_sample_stream")]
    pub sample_stream: u64,
}

fn first_sample_stream() -> u64 {
    1
}

/// Class centers are uniform in `[0.2, 0.8]` per coordinate (stream 0 of
/// `seed`); examples are centers plus Gaussian noise, clamped to `[0, 1]`,
/// interleaved by class.
pub fn synthetic_blobs<T: Scalar>(spec: &BlobSpec) -> Result<Dataset<T>> {
    if spec.classes < 2 || spec.per_class == 0 {
        return Err(Error::config("blob task needs at least 2 classes and 1 example per class"));
    }
    if spec.sample_stream == 0 {
        return Err(Error::config("blob sample stream 0 is reserved for class centers"));
    }
    let item = Shape::new(spec.item_dims.clone())?;
    let k = item.numel();
    let mut centers = RngStream::new(spec.seed, 0);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..k).map(|_| 0.2 + 0.6 * centers.uniform()).collect())
        .collect();
    let mut noise = RngStream::new(spec.seed, spec.sample_stream);
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * k);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        labels.push(c);
        data.extend(means[c].iter().map(|&m| T::of((m + spec.spread * noise.normal()).clamp(0.0, 1.0))));
    }
    let mut dims = vec![n];
    dims.extend_from_slice(&spec.item_dims);
    Dataset::new(Tensor::new(Shape::new(dims)?, data)?, labels, spec.classes, Provenance::Private)
}
