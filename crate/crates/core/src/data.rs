//! MNIST (IDX) and CIFAR-10 (binary records) loading, batching and
//! augmentation.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::bufread::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SampleShape;

pub const DATA_DIR_ENV: &str = "VLQ_DATA_DIR";

const MNIST_MEAN: f32 = 0.1307;
const MNIST_STD: f32 = 0.3081;
const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    Cifar10,
    /// Gaussian class blobs, generated from the seed.
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Normalized images `[N, C, H, W]` with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: DatasetName,
    pub shape: SampleShape,
    pub classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    /// Pad-4 random crop plus horizontal flip when batches are drawn.
    pub augment: bool,
}

/// Dataset root: `explicit`, else `$VLQ_DATA_DIR`.
pub fn data_root(explicit: Option<&Path>) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p.to_path_buf()),
        None => std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("no dataset root given and {DATA_DIR_ENV} is unset"))),
    }
}

fn open(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    Ok(if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(BufReader::new(file)))
    } else {
        Box::new(BufReader::new(file))
    })
}

fn find(root: &Path, subdirs: &[&str], name: &str) -> Result<PathBuf> {
    for d in subdirs {
        for candidate in [name.to_string(), format!("{name}.gz")] {
            let p = root.join(d).join(&candidate);
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::Config(format!("{name} not found under {}", root.display())))
}

fn read_u32_be(r: &mut dyn Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::corrupt(format!("truncated IDX header: {e}")))?;
    Ok(u32::from_be_bytes(b))
}

/// IDX image file (`magic 2051`) as raw bytes plus `(count, rows, cols)`.
pub fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let mut r = open(path)?;
    let magic = read_u32_be(&mut r)?;
    if magic != 2051 {
        return Err(Error::corrupt(format!("{}: image magic {magic}, expected 2051", path.display())));
    }
    let n = read_u32_be(&mut r)? as usize;
    let rows = read_u32_be(&mut r)? as usize;
    let cols = read_u32_be(&mut r)? as usize;
    let mut data = vec![0u8; n * rows * cols];
    r.read_exact(&mut data).map_err(|e| Error::corrupt(format!("{}: {e}", path.display())))?;
    Ok((data, n, rows, cols))
}

/// IDX label file (`magic 2049`).
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = open(path)?;
    let magic = read_u32_be(&mut r)?;
    if magic != 2049 {
        return Err(Error::corrupt(format!("{}: label magic {magic}, expected 2049", path.display())));
    }
    let n = read_u32_be(&mut r)? as usize;
    let mut data = vec![0u8; n];
    r.read_exact(&mut data).map_err(|e| Error::corrupt(format!("{}: {e}", path.display())))?;
    Ok(data)
}

pub fn load_mnist(root: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dirs = ["", "mnist", "MNIST/raw"];
    let (pixels, n, rows, cols) = read_idx_images(&find(root, &dirs, &format!("{prefix}-images-idx3-ubyte"))?)?;
    let labels = read_idx_labels(&find(root, &dirs, &format!("{prefix}-labels-idx1-ubyte"))?)?;
    if labels.len() != n || rows != 28 || cols != 28 {
        return Err(Error::corrupt(format!("MNIST {prefix}: {n} images of {rows}x{cols}, {} labels", labels.len())));
    }
    if labels.iter().any(|&l| l > 9) {
        return Err(Error::corrupt("MNIST label outside 0..=9"));
    }
    let images = pixels.iter().map(|&p| (p as f32 / 255.0 - MNIST_MEAN) / MNIST_STD).collect();
    Ok(Dataset { name: DatasetName::Mnist, shape: [1, 28, 28], classes: 10, images, labels, augment: false })
}

pub fn load_cifar10(root: &Path, split: Split, augment: bool) -> Result<Dataset> {
    let dirs = ["", "cifar-10-batches-bin", "cifar10"];
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = find(root, &dirs, &f)?;
        let mut bytes = Vec::new();
        open(&path)?.read_to_end(&mut bytes)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::corrupt(format!(
                "{}: {} bytes is not a whole number of records",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks(CIFAR_RECORD) {
            if rec[0] > 9 {
                return Err(Error::corrupt(format!("{}: label {}", path.display(), rec[0])));
            }
            labels.push(rec[0]);
            for (i, &p) in rec[1..].iter().enumerate() {
                let c = i / 1024;
                images.push((p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]);
            }
        }
    }
    Ok(Dataset {
        name: DatasetName::Cifar10,
        shape: [3, 32, 32],
        classes: 10,
        images,
        labels,
        augment: augment && split == Split::Train,
    })
}

/// Linearly separable-ish Gaussian blobs around random class centers.
pub fn synthetic(count: usize, shape: SampleShape, classes: usize, noise: f64, seed: u64, split: Split) -> Dataset {
    let per: usize = shape.iter().product();
    // centers depend only on the seed so both splits share them
    let mut crng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let centers: Vec<Vec<f64>> = (0..classes).map(|_| (0..per).map(|_| unit.sample(&mut crng)).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(match split {
        Split::Train => 1,
        Split::Test => 2,
    }));
    let mut images = Vec::with_capacity(count * per);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let y = i % classes;
        labels.push(y as u8);
        images.extend(centers[y].iter().map(|&c| (c + noise * unit.sample(&mut rng)) as f32));
    }
    Dataset { name: DatasetName::Synthetic, shape, classes, images, labels, augment: false }
}

pub fn load_dataset(name: DatasetName, split: Split, root: &Path, augment: bool) -> Result<Dataset> {
    match name {
        DatasetName::Mnist => load_mnist(root, split),
        DatasetName::Cifar10 => load_cifar10(root, split, augment),
        DatasetName::Synthetic => Err(Error::Config("synthetic data is generated, not loaded".into())),
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn per_sample(&self) -> usize {
        self.shape.iter().product()
    }

    /// Keep the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        let n = n.min(self.len());
        self.labels.truncate(n);
        self.images.truncate(n * self.per_sample());
    }

    /// Shuffled sample order for `epoch`, reproducible from `seed`.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        idx.shuffle(&mut rng);
        idx
    }

    /// Gather samples `idx` as `f64`, augmenting when enabled and `rng` is given.
    pub fn gather(&self, idx: &[usize], rng: Option<&mut ChaCha8Rng>) -> (Vec<f64>, Vec<u8>) {
        let per = self.per_sample();
        let mut x = Vec::with_capacity(idx.len() * per);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        match rng {
            Some(rng) if self.augment => {
                for &i in idx {
                    let img = &self.images[i * per..(i + 1) * per];
                    let (dy, dx) = (rng.random_range(0..=8usize), rng.random_range(0..=8usize));
                    let flip = rng.random_bool(0.5);
                    x.extend(crop_flip(img, self.shape, 4, dy, dx, flip).into_iter().map(|v| v as f64));
                }
            }
            _ => {
                for &i in idx {
                    x.extend(self.images[i * per..(i + 1) * per].iter().map(|&v| v as f64));
                }
            }
        }
        (x, labels)
    }
}

/// Zero-pad by `pad`, take the window at `(dy, dx)`, optionally mirror.
pub fn crop_flip(img: &[f32], [c, h, w]: SampleShape, pad: usize, dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let ox = if flip { w - 1 - x } else { x };
                out[(ch * h + y) * w + ox] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_idx(dir: &Path, name: &str, magic: u32, dims: &[u32], body: &[u8]) {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend(d.to_be_bytes());
        }
        b.extend_from_slice(body);
        std::fs::write(dir.join(name), b).unwrap();
    }

    #[test]
    fn mnist_roundtrip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..2 * 784).map(|i| (i % 256) as u8).collect();
        write_idx(dir.path(), "t10k-images-idx3-ubyte", 2051, &[2, 28, 28], &pixels);
        write_idx(dir.path(), "t10k-labels-idx1-ubyte", 2049, &[2], &[3, 7]);
        let d = load_mnist(dir.path(), Split::Test).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![3, 7]);
        assert!((d.images[0] - (0.0 - MNIST_MEAN) / MNIST_STD).abs() < 1e-6);
        write_idx(dir.path(), "t10k-labels-idx1-ubyte", 2051, &[2], &[3, 7]);
        assert!(matches!(load_mnist(dir.path(), Split::Test), Err(Error::CorruptData(_))));
        assert!(matches!(load_mnist(dir.path(), Split::Train), Err(Error::Config(_))));
    }

    #[test]
    fn cifar_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![4u8];
        rec.extend(vec![128u8; 3072]);
        std::fs::write(dir.path().join("test_batch.bin"), &rec).unwrap();
        let d = load_cifar10(dir.path(), Split::Test, true).unwrap();
        assert_eq!((d.len(), d.shape, d.augment), (1, [3, 32, 32], false));
        std::fs::write(dir.path().join("test_batch.bin"), &rec[..100]).unwrap();
        assert!(load_cifar10(dir.path(), Split::Test, false).is_err());
    }

    #[test]
    fn crop_and_flip() {
        let img: Vec<f32> = (0..4).map(|v| v as f32 + 1.0).collect();
        assert_eq!(crop_flip(&img, [1, 2, 2], 1, 1, 1, false), img);
        assert_eq!(crop_flip(&img, [1, 2, 2], 1, 1, 1, true), vec![2.0, 1.0, 4.0, 3.0]);
        assert_eq!(crop_flip(&img, [1, 2, 2], 1, 0, 0, false), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn deterministic_batches() {
        let d = synthetic(50, [1, 2, 2], 3, 0.1, 9, Split::Train);
        assert_eq!(d.epoch_order(1, 0), d.epoch_order(1, 0));
        assert_ne!(d.epoch_order(1, 0), d.epoch_order(1, 1));
        let order = d.epoch_order(1, 0);
        assert_eq!(d.gather(&order[..5], None), d.gather(&order[..5], None));
    }
}
