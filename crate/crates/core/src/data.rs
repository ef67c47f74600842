//! Datasets: MNIST from IDX files and a synthetic ring of Gaussians.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::genome::SampleShape;
use crate::nn::Matrix;
use crate::rng;
use crate::Error;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

/// An immutable, unlabelled-for-training dataset. Labels are kept only when
/// the source provides them (they feed the feature-extractor classifier).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    pub shape: SampleShape,
    pub samples: Matrix,
    pub labels: Option<Vec<u8>>,
    /// Mixture centers for synthetic ring data.
    pub centers: Option<Vec<[f64; 2]>>,
    pub sigma: Option<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.rows
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows == 0
    }
}

/// Maps a raw pixel to `[-1, 1]`.
pub fn scale_pixel(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

/// Inverse of `scale_pixel`, clamping and rounding to the nearest byte.
pub fn unscale_pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn be_u32(buf: &[u8], at: usize, what: &str) -> Result<u32, Error> {
    buf.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap())).ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parsed IDX image file: count, rows, cols and the raw pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(buf: &[u8]) -> Result<IdxImages, Error> {
    let magic = be_u32(buf, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad magic number {magic} for an IDX image file (expected {IDX_IMAGES_MAGIC})")));
    }
    let count = be_u32(buf, 4, "images")? as usize;
    let rows = be_u32(buf, 8, "images")? as usize;
    let cols = be_u32(buf, 12, "images")? as usize;
    let want = count * rows * cols;
    let payload = &buf[16..];
    if payload.len() < want {
        return Err(Error::Format(format!("truncated IDX image payload: {} of {want} bytes", payload.len())));
    }
    Ok(IdxImages { count, rows, cols, pixels: payload[..want].to_vec() })
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<u8>, Error> {
    let magic = be_u32(buf, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad magic number {magic} for an IDX label file (expected {IDX_LABELS_MAGIC})")));
    }
    let count = be_u32(buf, 4, "labels")? as usize;
    let payload = &buf[8..];
    if payload.len() < count {
        return Err(Error::Format(format!("truncated IDX label payload: {} of {count} bytes", payload.len())));
    }
    Ok(payload[..count].to_vec())
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, Error> {
    let file = File::open(path).map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?;
    let mut buf = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut buf)?;
    } else {
        BufReader::new(file).read_to_end(&mut buf)?;
    }
    Ok(buf)
}

fn find(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")].into_iter().map(|n| dir.join(n)).find(|p| p.exists())
}

/// Loads the MNIST training split from `dir` (`train-images-idx3-ubyte` and
/// `train-labels-idx1-ubyte`, optionally gzipped). Pixels are scaled to
/// `[-1, 1]`.
pub fn load_mnist(dir: &Path) -> Result<Dataset, Error> {
    let images_path = find(dir, "train-images-idx3-ubyte")
        .ok_or_else(|| Error::Format(format!("no train-images-idx3-ubyte[.gz] in {}", dir.display())))?;
    let images = parse_idx_images(&read_maybe_gz(&images_path)?)?;
    let labels = match find(dir, "train-labels-idx1-ubyte") {
        Some(p) => {
            let l = parse_idx_labels(&read_maybe_gz(&p)?)?;
            if l.len() != images.count {
                return Err(Error::Format(format!("{} labels do not pair with {} images", l.len(), images.count)));
            }
            Some(l)
        }
        None => None,
    };
    Ok(from_idx("mnist", images, labels))
}

pub fn from_idx(id: &str, images: IdxImages, labels: Option<Vec<u8>>) -> Dataset {
    let shape = SampleShape::Image { channels: 1, height: images.rows, width: images.cols };
    let data = images.pixels.iter().map(|&p| scale_pixel(p)).collect();
    Dataset {
        id: id.to_string(),
        shape,
        samples: Matrix::from_vec(images.count, images.rows * images.cols, data),
        labels,
        centers: None,
        sigma: None,
    }
}

pub fn ring_centers(n_modes: usize, radius: f64) -> Vec<[f64; 2]> {
    (0..n_modes)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / n_modes as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// `n` points from an equal-weight mixture of isotropic Gaussians centered
/// on a circle.
pub fn synthetic_ring(n_modes: usize, radius: f64, sigma: f64, n: usize, rng: &mut impl Rng) -> Dataset {
    assert!(n_modes >= 1, "ring needs at least one mode");
    assert!(sigma > 0.0, "ring sigma must be positive");
    let centers = ring_centers(n_modes, radius);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let c = centers[rng.random_range(0..n_modes)];
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        data.push(c[0] + sigma * dx);
        data.push(c[1] + sigma * dy);
    }
    Dataset {
        id: format!("ring{n_modes}_r{radius}_s{sigma}_n{n}"),
        shape: SampleShape::Flat { features: 2 },
        samples: Matrix::from_vec(n, 2, data),
        labels: None,
        centers: Some(centers),
        sigma: Some(sigma),
    }
}

/// Index of the nearest center and the distance to it.
pub fn nearest_center(p: [f64; 2], centers: &[[f64; 2]]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| (i, ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one center")
}

/// Number of modes that receive at least `min_fraction` of the samples,
/// counting a sample for its nearest center only when it lies within
/// `3 · sigma` of it.
pub fn covered_modes(samples: &Matrix, centers: &[[f64; 2]], sigma: f64, min_fraction: f64) -> usize {
    let mut counts = vec![0usize; centers.len()];
    for r in 0..samples.rows {
        let row = samples.row(r);
        let (i, d) = nearest_center([row[0], row[1]], centers);
        if d <= 3.0 * sigma {
            counts[i] += 1;
        }
    }
    counts.iter().filter(|&&c| c as f64 >= min_fraction * samples.rows as f64).count()
}

/// Position of a persistent shuffled-epoch stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchIterator {
    pub seed: u64,
    pub batch_size: usize,
    pub epoch: u64,
    pub position: usize,
}

impl BatchIterator {
    pub fn new(seed: u64, batch_size: usize) -> Self {
        Self { seed, batch_size, epoch: 0, position: 0 }
    }

    fn order(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(self.seed, &[rng::tag::DATA, self.epoch]));
        idx
    }

    /// Next full batch; a tail shorter than the batch size is skipped and a
    /// new epoch with a fresh permutation begins.
    pub fn next_batch(&mut self, data: &Dataset) -> Matrix {
        let n = data.len();
        assert!(self.batch_size >= 1 && self.batch_size <= n, "batch size {} for {n} samples", self.batch_size);
        if self.position + self.batch_size > n {
            self.epoch += 1;
            self.position = 0;
        }
        let order = self.order(n);
        let batch = data.samples.select_rows(&order[self.position..self.position + self.batch_size]);
        self.position += self.batch_size;
        batch
    }

    pub fn take(&mut self, data: &Dataset, count: usize) -> Vec<Matrix> {
        (0..count).map(|_| self.next_batch(data)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn idx_images(count: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn idx_parsing() {
        let img = parse_idx_images(&idx_images(2, 28, 28, &[0u8; 2 * 784])).unwrap();
        assert_eq!((img.count, img.rows, img.cols), (2, 28, 28));
        let ds = from_idx("t", img, None);
        assert_eq!((ds.samples.rows, ds.samples.cols), (2, 784));
        assert!(ds.samples.data.iter().all(|&v| v == -1.0));

        let mut bad = idx_images(1, 28, 28, &[0u8; 784]);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(Error::Format(m)) if m.contains("magic")));
        assert!(matches!(parse_idx_images(&idx_images(2, 28, 28, &[0u8; 784])), Err(Error::Format(m)) if m.contains("truncated")));
        assert!(parse_idx_images(&[0, 0]).is_err());

        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[1, 2, 3]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![1, 2, 3]);
        assert!(parse_idx_labels(&labels[..10]).is_err());
    }

    #[test]
    fn load_mnist_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), idx_images(3, 4, 4, &[255u8; 48])).unwrap();
        let ds = load_mnist(dir.path()).unwrap();
        assert_eq!(ds.shape, SampleShape::Image { channels: 1, height: 4, width: 4 });
        assert!(ds.samples.data.iter().all(|&v| v == 1.0));
        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[0, 1]);
        std::fs::write(dir.path().join("train-labels-idx1-ubyte"), labels).unwrap();
        assert!(load_mnist(dir.path()).is_err());
    }

    #[test]
    fn scaling_is_a_bijection() {
        for p in 0..=255u8 {
            assert_eq!(unscale_pixel(scale_pixel(p)), p);
        }
        assert_eq!(scale_pixel(0), -1.0);
        assert_eq!(scale_pixel(255), 1.0);
    }

    #[test]
    fn ring_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = synthetic_ring(1, 0.0, 1.0, 4000, &mut rng);
        let mean_x: f64 = (0..one.len()).map(|r| one.samples.row(r)[0]).sum::<f64>() / one.len() as f64;
        assert!(mean_x.abs() < 0.1);
        let tight = synthetic_ring(8, 2.0, 1e-9, 500, &mut rng);
        let centers = tight.centers.clone().unwrap();
        for r in 0..tight.len() {
            let row = tight.samples.row(r);
            assert!(nearest_center([row[0], row[1]], &centers).1 < 1e-6);
        }
        assert_eq!(covered_modes(&tight.samples, &centers, 1e-9, 0.02), 8);
    }

    #[test]
    fn batches_are_deterministic_and_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = synthetic_ring(4, 1.0, 0.1, 1280, &mut rng);
        let mut a = BatchIterator::new(9, 64);
        let mut b = BatchIterator::new(9, 64);
        let ba = a.take(&ds, 20);
        assert_eq!(ba, b.take(&ds, 20));
        assert_eq!(a.epoch, 0);
        let mut rows: Vec<Vec<u64>> = ba
            .iter()
            .flat_map(|m| (0..m.rows).map(|r| m.row(r).iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>())
            .collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 1280);
        a.next_batch(&ds);
        assert_eq!((a.epoch, a.position), (1, 64));

        let mut full = BatchIterator::new(3, ds.len());
        assert_eq!(full.next_batch(&ds).rows, ds.len());
    }
}
