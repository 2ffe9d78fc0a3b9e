//! Datasets: the synthetic Gaussian generator and an MNIST IDX reader.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PcnError, Result};
use crate::linalg::Matrix;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

/// Samples are columns of `inputs` and `targets`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.ncols() != targets.ncols() {
            return Err(PcnError::Shape(format!(
                "{} inputs but {} targets",
                inputs.ncols(),
                targets.ncols()
            )));
        }
        Ok(Dataset {
            name: name.into(),
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn target_dim(&self) -> usize {
        self.targets.nrows()
    }

    /// Samples `start..start + count`.
    pub fn slice(&self, start: usize, count: usize) -> Dataset {
        Dataset {
            name: self.name.clone(),
            inputs: self.inputs.columns(start, count).into_owned(),
            targets: self.targets.columns(start, count).into_owned(),
        }
    }

    /// The first `k` samples (all of them if `k` exceeds the size).
    pub fn take(&self, k: usize) -> Dataset {
        self.slice(0, k.min(self.len()))
    }

    /// Gathers the samples at `indices` into one batch.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Matrix) {
        (self.inputs.select_columns(indices), self.targets.select_columns(indices))
    }

    /// One row per sample: input columns, then target columns.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = (0..self.input_dim())
            .map(|i| format!("x{i}"))
            .chain((0..self.target_dim()).map(|i| format!("y{i}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for s in 0..self.len() {
            let row: Vec<String> = self
                .inputs
                .column(s)
                .iter()
                .chain(self.targets.column(s).iter())
                .map(|v| v.to_string())
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Inputs `N(1, 1)`, targets `N(-1, 1)`, elementwise.
pub fn synthetic_gaussian(n: usize, in_dim: usize, out_dim: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || in_dim == 0 || out_dim == 0 {
        return Err(PcnError::InvalidSettings("synthetic dataset needs n, in_dim, out_dim >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs_dist = Normal::new(1.0, 1.0).expect("valid");
    let targets_dist = Normal::new(-1.0, 1.0).expect("valid");
    let mut inputs = Matrix::zeros(in_dim, n);
    let mut targets = Matrix::zeros(out_dim, n);
    for s in 0..n {
        for i in 0..in_dim {
            inputs[(i, s)] = inputs_dist.sample(&mut rng);
        }
        for i in 0..out_dim {
            targets[(i, s)] = targets_dist.sample(&mut rng);
        }
    }
    Dataset::new("synthetic", inputs, targets)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| PcnError::Io(format!("{}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| PcnError::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| PcnError::Format("truncated header".into()))
}

/// Parses an IDX image file. Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(PcnError::Format(format!("image magic {magic}, expected {IMAGE_MAGIC}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(PcnError::Format(format!(
            "image file truncated: {} pixel bytes, header promises {need}",
            body.len()
        )));
    }
    Ok((count, rows, cols, &body[..need]))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(PcnError::Format(format!("label magic {magic}, expected {LABEL_MAGIC}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(PcnError::Format(format!(
            "label file truncated: {} label bytes, header promises {count}",
            body.len()
        )));
    }
    Ok(&body[..count])
}

/// Builds a dataset from raw IDX bytes: pixels / 255, one-hot labels over 10 classes.
pub fn mnist_from_idx_bytes(images: &[u8], labels: &[u8], limit: Option<usize>) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(PcnError::Format(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    let n = limit.map_or(count, |k| k.min(count));
    let dim = rows * cols;
    let mut inputs = Matrix::zeros(dim, n);
    let mut targets = Matrix::zeros(10, n);
    for s in 0..n {
        for (i, &p) in pixels[s * dim..(s + 1) * dim].iter().enumerate() {
            inputs[(i, s)] = f64::from(p) / 255.0;
        }
        let label = labels[s] as usize;
        if label >= 10 {
            return Err(PcnError::Format(format!("label {label} out of range at sample {s}")));
        }
        targets[(label, s)] = 1.0;
    }
    Dataset::new("mnist", inputs, targets)
}

/// Reads an IDX image/label pair (plain or gzip-compressed).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let images = read_maybe_gz(images_path)?;
    let labels = read_maybe_gz(labels_path)?;
    mnist_from_idx_bytes(&images, &labels, limit)
}

/// Index of the largest entry in each column.
pub fn argmax_columns(m: &Matrix) -> Vec<usize> {
    m.column_iter()
        .map(|c| {
            let mut best = 0;
            for i in 1..c.len() {
                if c[i] > c[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn header_constants() {
        assert_eq!(idx_images(0, 1, 1, &[])[..4], [0, 0, 8, 3]);
        assert_eq!(idx_labels(&[])[..4], [0, 0, 8, 1]);
    }

    #[test]
    fn pixels_and_labels() {
        let imgs = idx_images(2, 1, 2, &[255, 0, 51, 102]);
        let labs = idx_labels(&[7, 0]);
        let d = mnist_from_idx_bytes(&imgs, &labs, None).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.inputs[(0, 0)], 1.0);
        assert_eq!(d.inputs[(1, 0)], 0.0);
        assert_eq!(d.inputs[(0, 1)], 0.2);
        assert_eq!(d.targets.column(0).iter().position(|&v| v == 1.0), Some(7));
        assert_eq!(d.targets.column(0).sum(), 1.0);
        let first = mnist_from_idx_bytes(&imgs, &labs, Some(1)).unwrap();
        assert_eq!(first, d.take(1));
    }

    #[test]
    fn malformed_files_are_rejected() {
        let imgs = idx_images(2, 1, 2, &[1, 2, 3, 4]);
        let labs = idx_labels(&[1, 2]);
        let mut wrong = imgs.clone();
        wrong[3] = 1;
        assert!(matches!(mnist_from_idx_bytes(&wrong, &labs, None), Err(PcnError::Format(_))));
        assert!(matches!(mnist_from_idx_bytes(&imgs, &imgs, None), Err(PcnError::Format(_))));
        assert!(matches!(
            mnist_from_idx_bytes(&imgs[..imgs.len() - 1], &labs, None),
            Err(PcnError::Format(_))
        ));
        assert!(matches!(
            mnist_from_idx_bytes(&imgs, &idx_labels(&[1]), None),
            Err(PcnError::Format(_))
        ));
        assert!(matches!(mnist_from_idx_bytes(&imgs[..6], &labs, None), Err(PcnError::Format(_))));
    }

    #[test]
    fn gzip_and_plain_files_load_alike() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let imgs = idx_images(3, 2, 2, &[0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 255]);
        let labs = idx_labels(&[3, 1, 9]);
        std::fs::write(dir.path().join("i"), &imgs).unwrap();
        std::fs::write(dir.path().join("l"), &labs).unwrap();
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&imgs).unwrap();
        std::fs::write(dir.path().join("i.gz"), enc.finish().unwrap()).unwrap();
        let plain = load_mnist_idx(&dir.path().join("i"), &dir.path().join("l"), None).unwrap();
        let gz = load_mnist_idx(&dir.path().join("i.gz"), &dir.path().join("l"), None).unwrap();
        assert_eq!(plain, gz);
        assert!(matches!(
            load_mnist_idx(&dir.path().join("missing"), &dir.path().join("l"), None),
            Err(PcnError::Io(_))
        ));
    }

    #[test]
    fn synthetic_is_reproducible_with_paper_moments() {
        let a = synthetic_gaussian(2000, 5, 5, 9).unwrap();
        assert_eq!(a, synthetic_gaussian(2000, 5, 5, 9).unwrap());
        let mean_in = a.inputs.mean();
        let mean_t = a.targets.mean();
        assert!((mean_in - 1.0).abs() < 0.05, "{mean_in}");
        assert!((mean_t + 1.0).abs() < 0.05, "{mean_t}");
        assert!(synthetic_gaussian(0, 5, 5, 0).is_err());
    }

    #[test]
    fn csv_export() {
        let d = Dataset::new("t", Matrix::from_row_slice(1, 2, &[0.5, 1.0]), Matrix::from_row_slice(1, 2, &[0.0, 1.0]))
            .unwrap();
        let mut out = Vec::new();
        d.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "x0,y0\n0.5,0\n1,1\n");
    }

    #[test]
    fn argmax_examples() {
        let m = Matrix::from_row_slice(3, 2, &[0.1, 5.0, 0.9, 1.0, 0.2, 2.0]);
        assert_eq!(argmax_columns(&m), vec![1, 0]);
    }
}
