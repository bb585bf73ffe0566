//! Dataset generation and ingestion: teacher-student sampling, seeded
//! splits, and the MNIST IDX binary format.

use crate::model::{Activation, MaskedModel, MlpSpec, ModelError, OutputHead};
use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad IDX magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { path: String, expected: u32, found: u32 },
    #[error("truncated IDX file {path}: expected {expected} data bytes, found {actual}")]
    Truncated { path: String, expected: usize, actual: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("split fractions must be nonnegative and sum to <= 1, got {0:?}")]
    BadFractions((f64, f64, f64)),
    #[error("equal-train-test split needs {needed} samples, dataset has {available}")]
    NotEnoughSamples { needed: usize, available: usize },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Regression(Array2<f64>),
    Classes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Generator {
    Teacher,
    Mnist,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: Generator,
    pub teacher_dims: Option<Vec<usize>>,
    pub sigma: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub inputs: Array2<f64>,
    pub targets: Targets,
    pub splits: SplitIndices,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.inputs.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.dim().1
    }

    fn select_inputs(&self, idx: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((idx.len(), self.input_dim()));
        for (row, &i) in idx.iter().enumerate() {
            out.row_mut(row).assign(&self.inputs.row(i));
        }
        out
    }

    /// Inputs and regression targets for a split; panics on class targets.
    pub fn regression_split(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let y = match &self.targets {
            Targets::Regression(y) => y,
            Targets::Classes(_) => panic!("regression_split on a classification dataset"),
        };
        let mut ys = Array2::zeros((idx.len(), y.dim().1));
        for (row, &i) in idx.iter().enumerate() {
            ys.row_mut(row).assign(&y.row(i));
        }
        (self.select_inputs(idx), ys)
    }

    /// Inputs and class labels for a split; panics on regression targets.
    pub fn classification_split(&self, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let labels = match &self.targets {
            Targets::Classes(l) => l,
            Targets::Regression(_) => panic!("classification_split on a regression dataset"),
        };
        (self.select_inputs(idx), idx.iter().map(|&i| labels[i]).collect())
    }
}

/// Seeded teacher network plus a dataset sampled as
/// y = teacher(x) + Normal(0, sigma^2), with x uniform on `input_domain`
/// (one (lo, hi) pair applied to every input coordinate).
pub fn gen_teacher_student(
    teacher_dims: &[usize],
    sigma: f64,
    n: usize,
    seed: u64,
    input_domain: (f64, f64),
) -> Result<(MaskedModel, LabeledDataset), DataError> {
    assert!(sigma >= 0.0 && n >= 1);
    let spec = MlpSpec::new(teacher_dims.to_vec(), Activation::Tanh, OutputHead::Linear)?;
    // Independent seed streams for teacher weights and data sampling.
    let mut teacher_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(1));
    let teacher = MaskedModel::init(spec.clone(), &mut teacher_rng, seed);

    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = spec.input_dim();
    let inputs = Array2::from_shape_fn((n, d_in), |_| data_rng.gen_range(input_domain.0..input_domain.1));
    let mut targets = teacher.forward(&inputs)?;
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("sigma >= 0");
        targets.mapv_inplace(|v| v + noise.sample(&mut data_rng));
    }
    let dataset = LabeledDataset {
        inputs,
        targets: Targets::Regression(targets),
        splits: SplitIndices::default(),
        provenance: Provenance {
            generator: Generator::Teacher,
            teacher_dims: Some(teacher_dims.to_vec()),
            sigma: Some(sigma),
            seed: Some(seed),
        },
    };
    Ok((teacher, dataset))
}

/// Seeded shuffle then contiguous train/val/test assignment. Returns a
/// warning string when a nonzero fraction rounds to zero elements.
pub fn split(
    dataset: &mut LabeledDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Option<String>, DataError> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || ft + fv + fe > 1.0 + 1e-12 {
        return Err(DataError::BadFractions(fractions));
    }
    let n = dataset.len();
    let order = shuffled_indices(n, seed);
    let n_train = (ft * n as f64).floor() as usize;
    let n_val = (fv * n as f64).floor() as usize;
    let n_test = (fe * n as f64).floor() as usize;
    let mut warning = None;
    for (frac, count, name) in [(ft, n_train, "train"), (fv, n_val, "val"), (fe, n_test, "test")] {
        if frac > 0.0 && count == 0 {
            warning = Some(format!("{name} fraction {frac} rounds to 0 elements"));
        }
    }
    dataset.splits = SplitIndices {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..n_train + n_val + n_test].to_vec(),
    };
    Ok(warning)
}

/// Equal-train-test assignment: n_train train and n_train test
/// samples, remainder to validation.
pub fn split_equal_train_test(
    dataset: &mut LabeledDataset,
    n_train: usize,
    seed: u64,
) -> Result<(), DataError> {
    let n = dataset.len();
    if 2 * n_train > n {
        return Err(DataError::NotEnoughSamples { needed: 2 * n_train, available: n });
    }
    let order = shuffled_indices(n, seed);
    dataset.splits = SplitIndices {
        train: order[..n_train].to_vec(),
        test: order[n_train..2 * n_train].to_vec(),
        val: order[2 * n_train..].to_vec(),
    };
    Ok(())
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Parse the MNIST IDX pair: pixels scaled to [0,1] and flattened, labels
/// as class indices. Counts must match between the two files.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset, DataError> {
    let images_bytes = read_file(images_path)?;
    let labels_bytes = read_file(labels_path)?;
    let (inputs, n_images) = parse_idx_images(&images_bytes, images_path)?;
    let (labels, n_labels) = parse_idx_labels(&labels_bytes, labels_path)?;
    if n_images != n_labels {
        return Err(DataError::CountMismatch { images: n_images, labels: n_labels });
    }
    Ok(LabeledDataset {
        inputs,
        targets: Targets::Classes(labels),
        splits: SplitIndices::default(),
        provenance: Provenance { generator: Generator::Mnist, teacher_dims: None, sigma: None, seed: None },
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Array2<f64>, usize), DataError> {
    let mut cursor = std::io::Cursor::new(bytes);
    let path_str = path.display().to_string();
    let io_err = |source| DataError::Io { path: path_str.clone(), source };
    let magic = cursor.read_u32::<BigEndian>().map_err(io_err)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic { path: path_str, expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let n = cursor.read_u32::<BigEndian>().map_err(|source| DataError::Io { path: path_str.clone(), source })? as usize;
    let rows = cursor.read_u32::<BigEndian>().map_err(|source| DataError::Io { path: path_str.clone(), source })? as usize;
    let cols = cursor.read_u32::<BigEndian>().map_err(|source| DataError::Io { path: path_str.clone(), source })? as usize;
    let expected = n * rows * cols;
    let actual = bytes.len() - 16;
    if actual < expected {
        return Err(DataError::Truncated { path: path_str, expected, actual });
    }
    let pixels = &bytes[16..16 + expected];
    let inputs = Array2::from_shape_fn((n, rows * cols), |(i, j)| pixels[i * rows * cols + j] as f64 / 255.0);
    Ok((inputs, n))
}

fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, usize), DataError> {
    let mut cursor = std::io::Cursor::new(bytes);
    let path_str = path.display().to_string();
    let magic = cursor
        .read_u32::<BigEndian>()
        .map_err(|source| DataError::Io { path: path_str.clone(), source })?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic { path: path_str, expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = cursor.read_u32::<BigEndian>().map_err(|source| DataError::Io { path: path_str.clone(), source })? as usize;
    let expected = n;
    let actual = bytes.len() - 8;
    if actual < expected {
        return Err(DataError::Truncated { path: path_str, expected, actual });
    }
    Ok((bytes[8..8 + n].iter().map(|&b| b as usize).collect(), n))
}

/// Write images in IDX format (big-endian header, raw u8 pixels).
pub fn write_idx_images<W: Write>(mut out: W, images: &[Vec<u8>], rows: usize, cols: usize) -> std::io::Result<()> {
    out.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    out.write_u32::<BigEndian>(images.len() as u32)?;
    out.write_u32::<BigEndian>(rows as u32)?;
    out.write_u32::<BigEndian>(cols as u32)?;
    for img in images {
        out.write_all(img)?;
    }
    Ok(())
}

pub fn write_idx_labels<W: Write>(mut out: W, labels: &[u8]) -> std::io::Result<()> {
    out.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    out.write_u32::<BigEndian>(labels.len() as u32)?;
    out.write_all(labels)?;
    Ok(())
}

/// Read a raw (x, y) CSV with d_in input columns then d_out target columns.
pub fn load_csv_regression<R: Read>(reader: R, d_in: usize, d_out: usize) -> Result<LabeledDataset, DataError> {
    let mut inputs_flat = Vec::new();
    let mut targets_flat = Vec::new();
    let mut n = 0usize;
    let content = {
        let mut buf = String::new();
        let mut r = std::io::BufReader::new(reader);
        r.read_to_string(&mut buf)
            .map_err(|source| DataError::Io { path: "<csv>".into(), source })?;
        buf
    };
    for line in content.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DataError::Io {
                path: "<csv>".into(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })?;
        if vals.len() != d_in + d_out {
            return Err(DataError::Io {
                path: "<csv>".into(),
                source: std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("expected {} columns, got {}", d_in + d_out, vals.len()),
                ),
            });
        }
        inputs_flat.extend_from_slice(&vals[..d_in]);
        targets_flat.extend_from_slice(&vals[d_in..]);
        n += 1;
    }
    Ok(LabeledDataset {
        inputs: Array2::from_shape_vec((n, d_in), inputs_flat).expect("consistent row width"),
        targets: Targets::Regression(Array2::from_shape_vec((n, d_out), targets_flat).expect("consistent row width")),
        splits: SplitIndices::default(),
        provenance: Provenance { generator: Generator::File, teacher_dims: None, sigma: None, seed: None },
    })
}
