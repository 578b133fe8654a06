//! Image classification datasets: MNIST IDX files and CIFAR-10 binary batches,
//! kept as raw bytes and normalized per batch.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Section;
use crate::error::{invalid, QbitError, Result};

/// Environment variable naming the dataset root when none is configured.
pub const DATA_DIR_ENV: &str = "QBIT_DATA_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    classes: usize,
    images: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], classes: usize, images: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len == 0 || images.len() != labels.len() * len {
            return Err(invalid(format!(
                "{} image bytes for {} labels of shape {:?}",
                images.len(),
                labels.len(),
                shape
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(invalid(format!("label {l} outside {classes} classes")));
        }
        Ok(Self {
            shape,
            classes,
            images,
            labels,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let n = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            shape: self.shape,
            classes: self.classes,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Seeded shuffle, then one in `denominator` samples (rounded down) becomes
    /// the validation set. Returns `(train, validation)`.
    pub fn split_validation(&self, denominator: usize, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = self.len().checked_div(denominator).unwrap_or(0);
        let (val, train) = idx.split_at(n_val);
        let mut val = val.to_vec();
        let mut train = train.to_vec();
        val.sort_unstable();
        train.sort_unstable();
        (self.subset(&train), self.subset(&val))
    }
}

/// Per-channel `(x / 255 - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != std.len() {
            return Err(invalid("normalization needs one mean and one std per channel"));
        }
        if std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
            return Err(invalid("normalization std must be positive and finite"));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn mnist() -> Self {
        Self {
            mean: vec![0.1307],
            std: vec![0.3081],
        }
    }

    pub fn cifar10() -> Self {
        Self {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }

    /// Normalizes one `[C x HW]` image into `out`.
    pub fn apply(&self, pixels: &[u8], channels: usize, out: &mut [f64]) {
        let hw = pixels.len() / channels;
        for c in 0..channels {
            let (m, s) = (self.mean[c % self.mean.len()], self.std[c % self.std.len()]);
            for i in c * hw..(c + 1) * hw {
                out[i] = (f64::from(pixels[i]) / 255.0 - m) / s;
            }
        }
    }
}

/// One normalized mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
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

/// Random crop after zero padding and random horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augment {
    pub pad: usize,
    pub flip: bool,
}

pub fn make_batch(
    ds: &Dataset,
    indices: &[usize],
    norm: &Normalization,
    augment: Option<(Augment, &mut ChaCha8Rng)>,
) -> Batch {
    let [c, h, w] = ds.shape;
    let n = ds.image_len();
    let mut inputs = vec![0.0; indices.len() * n];
    let mut scratch = vec![0u8; n];
    let mut aug = augment;
    for (b, &i) in indices.iter().enumerate() {
        let img = ds.image(i);
        let src = match aug.as_mut() {
            Some((a, rng)) if a.pad > 0 || a.flip => {
                let dy = if a.pad > 0 { rng.gen_range(0..=2 * a.pad) as isize - a.pad as isize } else { 0 };
                let dx = if a.pad > 0 { rng.gen_range(0..=2 * a.pad) as isize - a.pad as isize } else { 0 };
                let flip = a.flip && rng.gen_bool(0.5);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let sy = y as isize + dy;
                            let sx0 = if flip { w - 1 - x } else { x } as isize + dx;
                            let v = if sy < 0 || sy >= h as isize || sx0 < 0 || sx0 >= w as isize {
                                0
                            } else {
                                img[(ch * h + sy as usize) * w + sx0 as usize]
                            };
                            scratch[(ch * h + y) * w + x] = v;
                        }
                    }
                }
                &scratch[..]
            }
            _ => img,
        };
        norm.apply(src, c, &mut inputs[b * n..(b + 1) * n]);
    }
    Batch {
        inputs,
        labels: indices.iter().map(|&i| ds.label(i)).collect(),
    }
}

fn dataset_err(path: &Path, offset: u64, message: impl Into<String>) -> QbitError {
    QbitError::Dataset {
        path: path.display().to_string(),
        offset,
        message: message.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| dataset_err(path, 0, format!("cannot read: {e}")))
}

fn be_u32(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| dataset_err(path, bytes.len() as u64, "file ends inside the header"))
}

/// Parses an IDX image file (magic `0x00000803`) and label file (`0x00000801`).
pub fn parse_idx(images: &[u8], labels: &[u8], image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let magic = be_u32(images, 0, image_path)?;
    if magic != 0x0803 {
        return Err(dataset_err(image_path, 0, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(images, 4, image_path)? as usize;
    let rows = be_u32(images, 8, image_path)? as usize;
    let cols = be_u32(images, 12, image_path)? as usize;
    let want = 16 + n * rows * cols;
    if images.len() != want {
        return Err(dataset_err(
            image_path,
            images.len().min(want) as u64,
            format!("expected {want} bytes for {n} images of {rows}x{cols}, found {}", images.len()),
        ));
    }
    let lmagic = be_u32(labels, 0, label_path)?;
    if lmagic != 0x0801 {
        return Err(dataset_err(label_path, 0, format!("bad label magic {lmagic:#010x}")));
    }
    let ln = be_u32(labels, 4, label_path)? as usize;
    if ln != n {
        return Err(dataset_err(label_path, 4, format!("{ln} labels for {n} images")));
    }
    if labels.len() != 8 + n {
        return Err(dataset_err(
            label_path,
            labels.len().min(8 + n) as u64,
            format!("expected {} bytes, found {}", 8 + n, labels.len()),
        ));
    }
    let lab = labels[8..].to_vec();
    if let Some(pos) = lab.iter().position(|&l| l >= 10) {
        return Err(dataset_err(label_path, (8 + pos) as u64, format!("label {} outside 0..10", lab[pos])));
    }
    Dataset::new([1, rows, cols], 10, images[16..].to_vec(), lab)
}

pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    parse_idx(&read_file(image_path)?, &read_file(label_path)?, image_path, label_path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses CIFAR-10 binary records: one label byte, then 3072 CHW pixel bytes.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(dataset_err(path, whole as u64, format!("truncated record ({} trailing bytes)", bytes.len() - whole)));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(dataset_err(path, (r * CIFAR_RECORD) as u64, format!("label {} outside 0..10", rec[0])));
        }
        labels.push(rec[0]);
        images.extend_from_slice(&rec[1..]);
    }
    Dataset::new([3, 32, 32], 10, images, labels)
}

pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let ds = parse_cifar10(&read_file(&f)?, &f)?;
        images.extend_from_slice(&ds.images);
        labels.extend_from_slice(&ds.labels);
    }
    Dataset::new([3, 32, 32], 10, images, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl std::str::FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mnist" => Ok(Self::Mnist),
            "cifar10" => Ok(Self::Cifar10),
            other => Err(format!("unknown dataset `{other}` (mnist, cifar10)")),
        }
    }
}

/// `[data]` section of a training config.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub root: Option<PathBuf>,
    pub normalization: Normalization,
    /// Use only the first `n` training samples.
    pub train_limit: Option<usize>,
    /// One in this many training samples is held out for validation.
    pub val_denominator: usize,
}

impl DataConfig {
    pub fn from_section(sec: &Section) -> Result<Self> {
        sec.check_keys(&["kind", "root", "mean", "std", "train_limit", "val_fraction"])?;
        let kind: DatasetKind = sec.require("kind")?;
        let default = match kind {
            DatasetKind::Mnist => Normalization::mnist(),
            DatasetKind::Cifar10 => Normalization::cifar10(),
        };
        let mean = sec.parse_list::<f64>("mean")?.unwrap_or(default.mean);
        let std = sec.parse_list::<f64>("std")?.unwrap_or(default.std);
        let normalization = Normalization::new(mean, std).map_err(|e| sec.error("std", e.to_string()))?;
        let val_denominator = match sec.get("val_fraction") {
            None => 10,
            Some(e) => {
                let v = e.value.trim();
                let den = v
                    .strip_prefix("1/")
                    .and_then(|d| d.parse::<usize>().ok())
                    .or_else(|| (v == "0").then_some(0));
                den.ok_or_else(|| sec.error("val_fraction", format!("expected `1/N` or `0`, got `{v}`")))?
            }
        };
        Ok(Self {
            kind,
            root: sec.parse::<PathBuf>("root")?,
            normalization,
            train_limit: sec.parse("train_limit")?,
            val_denominator,
        })
    }

    /// Configured root, else `$QBIT_DATA_DIR`.
    pub fn resolve_root(&self) -> Result<PathBuf> {
        resolve_root(self.root.as_deref())
    }

    pub fn load(&self, split: Split) -> Result<Dataset> {
        let root = self.resolve_root()?;
        let ds = match self.kind {
            DatasetKind::Mnist => load_mnist(&root, split)?,
            DatasetKind::Cifar10 => load_cifar10(&root, split)?,
        };
        Ok(match (split, self.train_limit) {
            (Split::Train, Some(n)) => ds.take(n),
            _ => ds,
        })
    }
}

pub fn resolve_root(configured: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = configured {
        return Ok(p.to_path_buf());
    }
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| QbitError::Dataset {
            path: String::new(),
            offset: 0,
            message: format!("no dataset root configured and {DATA_DIR_ENV} is not set"),
        })
}

/// Detects the dataset kind from the files present in `dir`.
pub fn detect(dir: &Path) -> Option<DatasetKind> {
    if dir.join("t10k-images-idx3-ubyte").exists() {
        Some(DatasetKind::Mnist)
    } else if dir.join("test_batch.bin").exists() {
        Some(DatasetKind::Cifar10)
    } else {
        None
    }
}
