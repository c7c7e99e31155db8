//! MNIST (IDX) and CIFAR-10 binary loaders, matching writers, and PGM/PPM
//! grid export.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

/// Images `(N, C, H, W)` in `[0, 1]` with one class index per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        let [n, ..] = images.dims4()?;
        if labels.len() != n {
            return Err(Error::Dimension(format!("{} labels for {n} images", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::Domain(format!("label {l} outside 0..=9")));
        }
        if !images.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Domain("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { images, labels, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Ok(Self {
            images: self.images.slice_batch(0, n)?,
            labels: self.labels[..n].to_vec(),
            name: self.name.clone(),
        })
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset: offset as u64, message: message.into() }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| parse_err(bytes.len(), format!("{what}: file ends at byte {} inside the header", bytes.len())))
}

fn require_len(bytes: &[u8], expected: usize, what: &str) -> Result<()> {
    if bytes.len() < expected {
        return Err(parse_err(
            bytes.len(),
            format!("{what}: truncated, expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok(())
}

fn pixel(b: u8) -> f64 {
    f64::from(b) / 255.0
}

/// Parses an IDX image file body. Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], limit: Option<usize>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(0, format!("images: bad magic {magic}, expected {IDX_IMAGES_MAGIC}")));
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let n = limit.map_or(count, |l| l.min(count));
    let plane = rows * cols;
    require_len(bytes, 16 + count * plane, "images")?;
    let pixels = bytes[16..16 + n * plane].iter().copied().map(pixel).collect();
    Ok((count, rows, cols, pixels))
}

/// Parses an IDX label file body. Returns `(count, labels)`.
pub fn parse_idx_labels(bytes: &[u8], limit: Option<usize>) -> Result<(usize, Vec<usize>)> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(0, format!("labels: bad magic {magic}, expected {IDX_LABELS_MAGIC}")));
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    require_len(bytes, 8 + count, "labels")?;
    let n = limit.map_or(count, |l| l.min(count));
    let labels = bytes[8..8 + n].iter().map(|&b| usize::from(b)).collect::<Vec<_>>();
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(parse_err(8 + pos, format!("labels: class {} outside 0..=9", labels[pos])));
    }
    Ok((count, labels))
}

/// Loads an MNIST image/label file pair, keeping the first `limit` samples.
pub fn load_mnist(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<LabeledDataset> {
    let img_bytes = fs::read(images_path)?;
    let lab_bytes = fs::read(labels_path)?;
    let (count, rows, cols, pixels) = parse_idx_images(&img_bytes, limit)?;
    let (label_count, labels) = parse_idx_labels(&lab_bytes, limit)?;
    if count != label_count {
        return Err(parse_err(4, format!("{count} images but {label_count} labels")));
    }
    if labels.is_empty() {
        return Err(parse_err(4, "empty dataset"));
    }
    let images = Tensor::new(vec![labels.len(), 1, rows, cols], pixels)?;
    Ok(LabeledDataset { images, labels, name: "mnist".into() })
}

/// Standard file names under an MNIST directory, `train` or `t10k` split.
pub fn mnist_paths(dir: &Path, train: bool) -> (std::path::PathBuf, std::path::PathBuf) {
    let prefix = if train { "train" } else { "t10k" };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Parses concatenated 3073-byte CIFAR-10 records.
pub fn parse_cifar10(bytes: &[u8], limit: Option<usize>) -> Result<(Vec<usize>, Vec<f64>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        let whole = bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN;
        return Err(parse_err(
            whole,
            format!("length {} is not a multiple of {CIFAR_RECORD_LEN}", bytes.len()),
        ));
    }
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).take(limit.unwrap_or(usize::MAX)).enumerate() {
        if rec[0] > 9 {
            return Err(parse_err(i * CIFAR_RECORD_LEN, format!("class {} outside 0..=9", rec[0])));
        }
        labels.push(usize::from(rec[0]));
        pixels.extend(rec[1..].iter().copied().map(pixel));
    }
    Ok((labels, pixels))
}

/// Loads CIFAR-10 batch files in order, keeping the first `limit` samples
/// overall.
pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P], limit: Option<usize>) -> Result<LabeledDataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for path in batch_paths {
        let remaining = limit.map(|l| l.saturating_sub(labels.len()));
        if remaining == Some(0) {
            break;
        }
        let (l, p) = parse_cifar10(&fs::read(path)?, remaining)?;
        labels.extend(l);
        pixels.extend(p);
    }
    if labels.is_empty() {
        return Err(parse_err(0, "empty dataset"));
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Ok(LabeledDataset { images, labels, name: "cifar10".into() })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn u32_of(n: usize) -> Result<[u8; 4]> {
    u32::try_from(n).map(u32::to_be_bytes).map_err(|_| Error::Capacity(format!("{n} exceeds u32")))
}

/// Encodes a single-channel dataset as an `(images, labels)` IDX pair,
/// quantizing pixels to 8 bits.
pub fn encode_mnist(ds: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [n, c, h, w] = ds.images.dims4()?;
    if c != 1 {
        return Err(Error::Capability(format!("IDX export needs 1 channel, got {c}")));
    }
    let mut images = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGES_MAGIC as usize, n, h, w] {
        images.extend(u32_of(v)?);
    }
    images.extend(ds.images.data().iter().map(|&v| quantize(v)));
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend(u32_of(IDX_LABELS_MAGIC as usize)?);
    labels.extend(u32_of(n)?);
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn write_mnist(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = encode_mnist(ds)?;
    fs::write(images_path, images)?;
    fs::write(labels_path, labels)?;
    Ok(())
}

pub fn encode_cifar10(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let [n, c, h, w] = ds.images.dims4()?;
    if (c, h, w) != (3, 32, 32) {
        return Err(Error::Capability(format!("CIFAR-10 records are 3x32x32, got {c}x{h}x{w}")));
    }
    let mut out = Vec::with_capacity(n * CIFAR_RECORD_LEN);
    for (label, img) in ds.labels.iter().zip(ds.images.data().chunks(CIFAR_RECORD_LEN - 1)) {
        out.push(*label as u8);
        out.extend(img.iter().map(|&v| quantize(v)));
    }
    Ok(out)
}

pub fn write_cifar10(ds: &LabeledDataset, path: &Path) -> Result<()> {
    fs::write(path, encode_cifar10(ds)?)?;
    Ok(())
}

/// Tiles `(N, C, H, W)` images row-major into one `(1, C, rows*H, cols*W)`
/// image with `cols = ceil(sqrt(N))`. Empty cells are zero.
pub fn tile_images(images: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = images.dims4()?;
    let cols = (1..=n).find(|k| k * k >= n).unwrap_or(1);
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = vec![0.0; c * gh * gw];
    let data = images.data();
    for idx in 0..n {
        let (ty, tx) = (idx / cols, idx % cols);
        for ch in 0..c {
            for y in 0..h {
                let src = ((idx * c + ch) * h + y) * w;
                let dst = (ch * gh + ty * h + y) * gw + tx * w;
                out[dst..dst + w].copy_from_slice(&data[src..src + w]);
            }
        }
    }
    Tensor::new(vec![1, c, gh, gw], out)
}

/// Tiles images as in [`tile_images`] and encodes the result as binary PGM
/// (C = 1) or PPM (C = 3). Values are clamped to `[0, 1]`.
pub fn encode_image_grid(images: &Tensor) -> Result<Vec<u8>> {
    let [_, c, _, _] = images.dims4()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Capability(format!("cannot export {c}-channel images"))),
    };
    let grid = tile_images(images)?;
    let [_, _, gh, gw] = grid.dims4()?;
    let plane = gh * gw;
    let data = grid.data();
    let mut out = format!("{magic}\n{gw} {gh}\n255\n").into_bytes();
    out.reserve(plane * c);
    for px in 0..plane {
        for ch in 0..c {
            out.push(quantize(data[ch * plane + px]));
        }
    }
    Ok(out)
}

pub fn export_image_grid(images: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_image_grid(images)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}
