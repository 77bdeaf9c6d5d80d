//! Dataset ingestion and federated partitioning.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Example;
use crate::rng::{stream, Stream};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const MNIST_CLASSES: usize = 10;

/// Every client needs at least one example in each of train/val/test.
pub const MIN_CLIENT_EXAMPLES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Mnist,
    SyntheticGauss,
    SyntheticQuadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        histogram(self.examples.iter().map(|e| e.label), self.num_classes)
    }
}

fn histogram(labels: impl Iterator<Item = usize>, classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for l in labels {
        h[l] += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    /// Pool indices backing each split, in split order.
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl ClientShard {
    /// `N_i`, the number of training examples.
    pub fn num_train(&self) -> usize {
        self.train.len()
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn all_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.train_idx.iter().chain(&self.val_idx).chain(&self.test_idx).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config(format!("{name} fraction {f} must lie in (0, 1)")));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// `(train, val, test)` counts for `m >= 3` examples, each at least one.
    fn counts(&self, m: usize) -> (usize, usize, usize) {
        let mut val = ((m as f64 * self.val).round() as usize).max(1);
        let mut test = ((m as f64 * self.test).round() as usize).max(1);
        while val + test >= m {
            if val >= test && val > 1 {
                val -= 1;
            } else {
                test -= 1;
            }
        }
        (m - val - test, val, test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub n_clients: usize,
    /// Dirichlet concentration.
    pub alpha: f64,
    pub seed: u64,
    pub split: SplitFractions,
}

impl PartitionConfig {
    fn validate(&self, pool: &Dataset) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::config("n_clients must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be positive and finite, got {}", self.alpha)));
        }
        self.split.validate()?;
        if pool.len() < self.n_clients * MIN_CLIENT_EXAMPLES {
            return Err(Error::config(format!(
                "pool of {} examples cannot give {} clients {} examples each",
                pool.len(),
                self.n_clients,
                MIN_CLIENT_EXAMPLES
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// IDX files

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::Ingestion {
        file: path.to_path_buf(),
        offset: 0,
        reason: e.to_string(),
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Ingestion {
                file: path.to_path_buf(),
                offset: out.len() as u64,
                reason: format!("gzip stream: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    file: &'a Path,
}

impl IdxReader<'_> {
    fn err(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Ingestion {
            file: self.file.to_path_buf(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn u32_at(&self, offset: usize) -> Result<u32> {
        self.bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| self.err(self.bytes.len(), "truncated header"))
    }

    fn expect_magic(&self, magic: u32) -> Result<()> {
        let found = self.u32_at(0)?;
        if found != magic {
            return Err(self.err(0, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
        }
        Ok(())
    }

    fn payload(&self, start: usize, len: usize) -> Result<&[u8]> {
        if self.bytes.len() < start + len {
            return Err(self.err(
                self.bytes.len(),
                format!("truncated payload: expected {} bytes, found {}", start + len, self.bytes.len()),
            ));
        }
        Ok(&self.bytes[start..start + len])
    }
}

/// Raw IDX image file: `count` images of `rows × cols` bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    let bytes = read_maybe_gz(path)?;
    let r = IdxReader { bytes: &bytes, file: path };
    r.expect_magic(IDX_IMAGES_MAGIC)?;
    let count = r.u32_at(4)? as usize;
    let rows = r.u32_at(8)? as usize;
    let cols = r.u32_at(12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(r.err(8, "zero image dimension"));
    }
    let pixels = r.payload(16, count * rows * cols)?.to_vec();
    Ok(IdxImages { rows, cols, pixels })
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    let r = IdxReader { bytes: &bytes, file: path };
    r.expect_magic(IDX_LABELS_MAGIC)?;
    let count = r.u32_at(4)? as usize;
    let labels = r.payload(8, count)?;
    if let Some(pos) = labels.iter().position(|&l| l as usize >= MNIST_CLASSES) {
        return Err(r.err(8 + pos, format!("label {} out of range", labels[pos])));
    }
    Ok(labels.to_vec())
}

/// Uncompressed IDX image file bytes.
pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count() as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

/// Uncompressed IDX label file bytes.
pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    /// Standard file names inside `dir`, preferring `.gz` when present.
    pub fn in_dir(dir: &Path) -> Self {
        let pick = |stem: &str| {
            let gz = dir.join(format!("{stem}.gz"));
            if gz.exists() {
                gz
            } else {
                dir.join(stem)
            }
        };
        MnistFiles {
            train_images: pick("train-images-idx3-ubyte"),
            train_labels: pick("train-labels-idx1-ubyte"),
            test_images: pick("t10k-images-idx3-ubyte"),
            test_labels: pick("t10k-labels-idx1-ubyte"),
        }
    }
}

/// Loads train and test IDX files into one pool and draws a label-stratified
/// subset of `subset_size` examples. Pixels are scaled to `[0, 1]`.
pub fn load_mnist(files: &MnistFiles, subset_size: usize, seed: u64) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (img_path, lab_path) in [
        (&files.train_images, &files.train_labels),
        (&files.test_images, &files.test_labels),
    ] {
        let imgs = read_idx_images(img_path)?;
        let labs = read_idx_labels(lab_path)?;
        if imgs.count() != labs.len() {
            return Err(Error::Ingestion {
                file: lab_path.clone(),
                offset: 4,
                reason: format!("{} labels for {} images", labs.len(), imgs.count()),
            });
        }
        let dim = imgs.rows * imgs.cols;
        if let Some(first) = images.first() {
            let first: &Vec<f64> = first;
            if first.len() != dim {
                return Err(Error::Ingestion {
                    file: img_path.clone(),
                    offset: 8,
                    reason: format!("image size {dim} differs from {}", first.len()),
                });
            }
        }
        images.extend(imgs.pixels.chunks(dim).map(|c| c.iter().map(|&p| p as f64 / 255.0).collect::<Vec<_>>()));
        labels.extend(labs.into_iter().map(usize::from));
    }
    if subset_size == 0 {
        return Err(Error::config("subset_size must be positive"));
    }
    let chosen = stratified_subset(&labels, MNIST_CLASSES, subset_size, seed);
    let mut images: Vec<Option<Vec<f64>>> = images.into_iter().map(Some).collect();
    let examples = chosen
        .into_iter()
        .map(|i| Example {
            features: images[i].take().expect("each index chosen once"),
            label: labels[i],
        })
        .collect();
    Ok(Dataset {
        examples,
        num_classes: MNIST_CLASSES,
        provenance: Provenance::Mnist,
    })
}

/// Largest-remainder apportionment of `total` over `weights`; ties go to the
/// lower index.
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Sorted pool indices of a label-stratified subset.
fn stratified_subset(labels: &[usize], classes: usize, size: usize, seed: u64) -> Vec<usize> {
    if size >= labels.len() {
        return (0..labels.len()).collect();
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let weights: Vec<f64> = by_class.iter().map(|c| c.len() as f64).collect();
    let quotas = apportion(&weights, size);
    let mut chosen = Vec::with_capacity(size);
    for (c, (mut members, quota)) in by_class.into_iter().zip(quotas).enumerate() {
        let mut rng = stream(seed, Stream::Subset, c as u64);
        members.shuffle(&mut rng);
        chosen.extend(members.into_iter().take(quota));
    }
    chosen.sort_unstable();
    chosen
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Balanced Gaussian blobs: class centers are `spread · N(0, I)`, samples
/// add unit-variance noise. Examples are ordered class by class.
pub fn gen_synthetic_classification(
    n_samples: usize,
    num_classes: usize,
    input_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::config("synthetic classification needs at least 2 classes"));
    }
    if input_dim == 0 || n_samples == 0 {
        return Err(Error::config("synthetic classification needs positive n_samples and input_dim"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::config("spread must be non-negative and finite"));
    }
    let mut rng = stream(seed, Stream::Synthetic, 0);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..input_dim).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let per_class = apportion(&vec![1.0; num_classes], n_samples);
    let mut examples = Vec::with_capacity(n_samples);
    for (label, (center, count)) in centers.iter().zip(per_class).enumerate() {
        for _ in 0..count {
            let features = center.iter().map(|c| c + rng.sample::<f64, _>(StandardNormal)).collect();
            examples.push(Example { features, label });
        }
    }
    Ok(Dataset {
        examples,
        num_classes,
        provenance: Provenance::SyntheticGauss,
    })
}

// ---------------------------------------------------------------------------
// Partitioning

/// `Dirichlet(α·1)` sample computed in log space, so very small `α` cannot
/// underflow every component to zero: `ln X = ln G + ln(U)/α` with
/// `G ~ Gamma(α + 1)`.
fn dirichlet_symmetric<R: Rng>(rng: &mut R, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha validated positive");
    let logs: Vec<f64> = (0..n)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let m = logs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Moves examples from the largest shard into shards below
/// [`MIN_CLIENT_EXAMPLES`].
fn repair_small_shards(assignment: &mut [Vec<usize>]) {
    loop {
        let Some(needy) = (0..assignment.len()).find(|&i| assignment[i].len() < MIN_CLIENT_EXAMPLES) else {
            return;
        };
        let donor = (0..assignment.len())
            .max_by(|&a, &b| assignment[a].len().cmp(&assignment[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let moved = assignment[donor].pop().expect("donor has examples");
        assignment[needy].push(moved);
    }
}

fn split_shards(pool: &Dataset, assignment: Vec<Vec<usize>>, split: &SplitFractions, seed: u64) -> Vec<ClientShard> {
    assignment
        .into_iter()
        .enumerate()
        .map(|(client_id, mut idx)| {
            let mut rng = stream(seed, Stream::Split, client_id as u64);
            idx.shuffle(&mut rng);
            let (n_train, n_val, _) = split.counts(idx.len());
            let test_idx = idx.split_off(n_train + n_val);
            let val_idx = idx.split_off(n_train);
            let train_idx = idx;
            let take = |ix: &[usize]| ix.iter().map(|&i| pool.examples[i].clone()).collect();
            ClientShard {
                client_id,
                train: take(&train_idx),
                val: take(&val_idx),
                test: take(&test_idx),
                train_idx,
                val_idx,
                test_idx,
            }
        })
        .collect()
}

/// Per-class Dirichlet partition followed by per-client train/val/test
/// splits.
pub fn dirichlet_partition(pool: &Dataset, cfg: &PartitionConfig) -> Result<Vec<ClientShard>> {
    cfg.validate(pool)?;
    let n = cfg.n_clients;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); pool.num_classes];
    for (i, ex) in pool.examples.iter().enumerate() {
        if ex.label >= pool.num_classes {
            return Err(Error::config(format!("example {i} label {} >= {}", ex.label, pool.num_classes)));
        }
        by_class[ex.label].push(i);
    }
    let mut rng = stream(cfg.seed, Stream::Partition, 0);
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); n];
    for mut members in by_class {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let p = dirichlet_symmetric(&mut rng, cfg.alpha, n);
        let counts = apportion(&p, members.len());
        let mut rest = members.as_slice();
        for (client, count) in counts.into_iter().enumerate() {
            let (head, tail) = rest.split_at(count);
            assignment[client].extend_from_slice(head);
            rest = tail;
        }
    }
    repair_small_shards(&mut assignment);
    Ok(split_shards(pool, assignment, &cfg.split, cfg.seed))
}

/// Uniform shuffle split into near-equal shards (the `α → ∞` limit).
pub fn iid_partition(pool: &Dataset, n_clients: usize, split: &SplitFractions, seed: u64) -> Result<Vec<ClientShard>> {
    let cfg = PartitionConfig {
        n_clients,
        alpha: 1.0,
        seed,
        split: *split,
    };
    cfg.validate(pool)?;
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut stream(seed, Stream::Partition, 1));
    let sizes = apportion(&vec![1.0; n_clients], pool.len());
    let mut assignment = Vec::with_capacity(n_clients);
    let mut rest = idx.as_slice();
    for s in sizes {
        let (head, tail) = rest.split_at(s);
        assignment.push(head.to_vec());
        rest = tail;
    }
    Ok(split_shards(pool, assignment, split, seed))
}

/// `n_clients` copies of one shard built from the whole pool.
pub fn identical_shards(pool: &Dataset, n_clients: usize, split: &SplitFractions, seed: u64) -> Result<Vec<ClientShard>> {
    let base = iid_partition(pool, 1, split, seed)?.remove(0);
    Ok((0..n_clients)
        .map(|client_id| ClientShard {
            client_id,
            ..base.clone()
        })
        .collect())
}

/// Audit record of one client's data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub client_id: usize,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub label_histogram: Vec<usize>,
}

pub fn shard_manifests(shards: &[ClientShard], num_classes: usize) -> Vec<ShardManifest> {
    shards
        .iter()
        .map(|s| ShardManifest {
            client_id: s.client_id,
            train_indices: s.train_idx.clone(),
            val_indices: s.val_idx.clone(),
            test_indices: s.test_idx.clone(),
            label_histogram: histogram(s.train.iter().chain(&s.val).chain(&s.test).map(|e| e.label), num_classes),
        })
        .collect()
}

pub fn write_manifests(path: &Path, manifests: &[ShardManifest]) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(manifests)?)?;
    Ok(())
}

/// Label distribution of every client (all splits), keyed by client id.
pub fn client_label_distributions(shards: &[ClientShard], num_classes: usize) -> BTreeMap<usize, Vec<f64>> {
    shards
        .iter()
        .map(|s| {
            let h = histogram(s.train.iter().chain(&s.val).chain(&s.test).map(|e| e.label), num_classes);
            let total: usize = h.iter().sum();
            (s.client_id, h.into_iter().map(|c| c as f64 / total as f64).collect())
        })
        .collect()
}
