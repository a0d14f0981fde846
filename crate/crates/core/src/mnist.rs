//! MNIST ingestion from the IDX container format.
//!
//! Images are scaled to `[0, 1]` by `/255` and zero-padded by two pixels on
//! every side, giving `1×32×32` inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, IdxError, Result};
use crate::numerics::{Shape, Tensor};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SOURCE_SIDE: usize = 28;
pub const PAD: usize = 2;
pub const SIDE: usize = SOURCE_SIDE + 2 * PAD;
pub const CLASSES: usize = 10;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `1×32×32`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl Dataset {
    /// Loads the four canonical MNIST files from `dir`.
    pub fn load(dir: &Path) -> Result<Self, IdxError> {
        Ok(Dataset {
            train: load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?,
            test: load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?,
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn check_header(bytes: &[u8], path: &Path, magic: u32, header_len: usize) -> Result<usize, IdxError> {
    if bytes.len() < 8 {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let actual = be_u32(bytes, 0);
    if actual != magic {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            actual,
        });
    }
    if bytes.len() < header_len {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            actual: bytes.len(),
        });
    }
    Ok(be_u32(bytes, 4) as usize)
}

/// Parses raw IDX image bytes into padded `1×32×32` tensors.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<Vec<Tensor>, IdxError> {
    let count = check_header(bytes, path, IMAGE_MAGIC, 16)?;
    let (rows, cols) = (be_u32(bytes, 8), be_u32(bytes, 12));
    if rows as usize != SOURCE_SIDE || cols as usize != SOURCE_SIDE {
        return Err(IdxError::BadDimensions {
            path: path.to_path_buf(),
            rows,
            cols,
        });
    }
    let px = SOURCE_SIDE * SOURCE_SIDE;
    let needed = 16 + count * px;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected: needed,
            actual: bytes.len(),
        });
    }
    let shape = Shape::new([1, SIDE, SIDE]).expect("static shape");
    Ok(bytes[16..needed]
        .chunks_exact(px)
        .map(|src| {
            let mut data = vec![0.0f32; SIDE * SIDE];
            for (r, row) in src.chunks_exact(SOURCE_SIDE).enumerate() {
                let dst = &mut data[(r + PAD) * SIDE + PAD..][..SOURCE_SIDE];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d = f32::from(b) / 255.0;
                }
            }
            Tensor::from_vec(shape.clone(), data).expect("padded size")
        })
        .collect())
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, IdxError> {
    let count = check_header(bytes, path, LABEL_MAGIC, 8)?;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected: needed,
            actual: bytes.len(),
        });
    }
    let labels = bytes[8..needed].to_vec();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= CLASSES) {
        return Err(IdxError::BadLabel {
            path: path.to_path_buf(),
            index,
            label,
        });
    }
    Ok(labels)
}

/// Reads an IDX image file and its label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Vec<LabeledImage>, IdxError> {
    let imgs = parse_images(&read(images)?, images)?;
    let labs = parse_labels(&read(labels)?, labels)?;
    if imgs.len() != labs.len() {
        return Err(IdxError::CountMismatch {
            images: imgs.len(),
            labels: labs.len(),
        });
    }
    Ok(imgs
        .into_iter()
        .zip(labs)
        .map(|(pixels, label)| LabeledImage { pixels, label })
        .collect())
}

/// Indices of a class-stratified sample of `count` items.
///
/// Each class gets `floor(count·n_c/N)` slots; leftover slots go one per
/// class in order of largest fractional share. The result order is
/// shuffled.
pub fn stratified_indices(data: &[LabeledImage], count: usize, seed: u64) -> Result<Vec<usize>> {
    if count > data.len() {
        return Err(Error::invalid(format!(
            "cannot draw {count} samples from a dataset of {}",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, img) in data.iter().enumerate() {
        by_class.entry(img.label).or_default().push(i);
    }
    let total = data.len().max(1);
    let mut quotas: Vec<(u8, usize)> = by_class
        .iter()
        .map(|(&c, members)| (c, count * members.len() / total))
        .collect();
    let mut residual = count - quotas.iter().map(|q| q.1).sum::<usize>();
    // Largest remainders first, lowest class on ties.
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(count * by_class[&quotas[i].0].len() % total), i));
    while residual > 0 {
        for &i in &order {
            if residual == 0 {
                break;
            }
            let (c, q) = &mut quotas[i];
            if *q < by_class[c].len() {
                *q += 1;
                residual -= 1;
            }
        }
    }
    let mut picked = Vec::with_capacity(count);
    for (c, q) in quotas {
        let mut members = by_class[&c].clone();
        members.shuffle(&mut rng);
        picked.extend_from_slice(&members[..q]);
    }
    picked.shuffle(&mut rng);
    Ok(picked)
}

pub fn stratified_subset(data: &[LabeledImage], count: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    Ok(stratified_indices(data, count, seed)?
        .into_iter()
        .map(|i| data[i].clone())
        .collect())
}

/// Default MNIST location: `$RECOS_MNIST_DIR`, else `data/mnist` under the
/// given root.
pub fn default_dir(root: &Path) -> PathBuf {
    std::env::var_os("RECOS_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| root.join("data").join("mnist"))
}
