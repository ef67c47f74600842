//! Fréchet distance between Gaussian fits of real and generated features.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::genome::{Activation, SampleShape};
use crate::nn::{self, Matrix, Network, Op, ParamSlot, RmsProp};
use crate::Error;

/// Fitness assigned when a network diverges or its statistics are unusable.
pub const FITNESS_SENTINEL: f64 = 1e9;

/// Eigenvalues above `-CLAMP_TOL` are treated as numerical zeros.
pub const CLAMP_TOL: f64 = 1e-8;
/// Eigenvalues below `-FAIL_TOL · max(1, λ_max)` mark a non-PSD input.
pub const FAIL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased (N − 1) covariance of the rows of `features`.
pub fn estimate_gaussian(features: &Matrix) -> Result<GaussianStats, Error> {
    let (n, d) = (features.rows, features.cols);
    if n < 2 {
        return Err(Error::Numeric(format!("need at least 2 samples to estimate a covariance, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = features.data.clone();
    for r in 0..n {
        for (v, m) in centered[r * d..(r + 1) * d].iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut cov = vec![0.0; d * d];
    nn::gemm(d, n, d, &centered, true, &centered, false, &mut cov, 1.0 / (n as f64 - 1.0), 0.0);
    let mut cov = DMatrix::from_row_slice(d, d, &cov);
    symmetrize(&mut cov);
    Ok(GaussianStats { mean: DVector::from_vec(mean), cov })
}

fn symmetrize(a: &mut DMatrix<f64>) {
    let t = a.transpose();
    *a += t;
    *a *= 0.5;
}

fn checked_eigen(a: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, Error> {
    if !a.is_square() {
        return Err(Error::Numeric(format!("matrix is {}x{}, not square", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let mut s = a.clone();
    symmetrize(&mut s);
    let mut eig = SymmetricEigen::new(s);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if let Some(bad) = eig.eigenvalues.iter().find(|&&l| l < -FAIL_TOL * scale) {
        return Err(Error::Numeric(format!("matrix is not positive semi-definite (eigenvalue {bad:e})")));
    }
    for l in eig.eigenvalues.iter_mut() {
        if *l < 0.0 {
            *l = 0.0;
        }
    }
    Ok(eig)
}

/// Principal square root of a symmetric positive semi-definite matrix via
/// eigendecomposition. The input is symmetrized first; round-off negative
/// eigenvalues are clamped to zero.
pub fn matrix_sqrt_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>, Error> {
    let eig = checked_eigen(a)?;
    let roots = eig.eigenvalues.map(f64::sqrt);
    let v = &eig.eigenvectors;
    let mut s = v * DMatrix::from_diagonal(&roots) * v.transpose();
    symmetrize(&mut s);
    Ok(s)
}

/// `‖μx − μg‖² + Tr(Σx + Σg − 2 (Σx Σg)^½)`, with the cross term evaluated as
/// `Tr((Σx^½ Σg Σx^½)^½)`.
pub fn fid(real: &GaussianStats, fake: &GaussianStats) -> Result<f64, Error> {
    if real.dim() != fake.dim() {
        return Err(Error::Shape(format!("feature widths differ: {} vs {}", real.dim(), fake.dim())));
    }
    let diff = &real.mean - &fake.mean;
    let sx = matrix_sqrt_psd(&real.cov)?;
    let m = &sx * &fake.cov * &sx;
    let cross: f64 = checked_eigen(&m)?.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let total = diff.norm_squared() + real.cov.trace() + fake.cov.trace() - 2.0 * cross;
    let scale = 1.0f64.max(real.cov.trace() + fake.cov.trace());
    if total < -FAIL_TOL * scale {
        return Err(Error::Numeric(format!("Fréchet distance came out negative ({total:e})")));
    }
    Ok(total.max(0.0))
}

/// Maps sample batches to fixed-width feature vectors. Implementations must
/// be deterministic.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> String;
    fn width(&self) -> usize;
    fn extract(&self, samples: &Matrix) -> Matrix;
}

/// Features are the samples themselves (low-dimensional data).
#[derive(Debug, Clone)]
pub struct Identity {
    pub width: usize,
}

impl FeatureExtractor for Identity {
    fn id(&self) -> String {
        "identity".into()
    }
    fn width(&self) -> usize {
        self.width
    }
    fn extract(&self, samples: &Matrix) -> Matrix {
        samples.clone()
    }
}

/// Features are the flattened pixels.
#[derive(Debug, Clone)]
pub struct RawPixels {
    pub width: usize,
}

impl FeatureExtractor for RawPixels {
    fn id(&self) -> String {
        "raw_pixels".into()
    }
    fn width(&self) -> usize {
        self.width
    }
    fn extract(&self, samples: &Matrix) -> Matrix {
        samples.clone()
    }
}

/// Penultimate-layer activations of a small convolutional classifier trained
/// once on labelled real data.
#[derive(Debug, Clone)]
pub struct ConvClassifier {
    body: Network,
    width: usize,
    tag: String,
}

impl ConvClassifier {
    pub const FEATURES: usize = 64;

    /// Trains `conv16 → conv32 → dense64 → dense(classes)` with softmax
    /// cross-entropy for `steps` mini-batches.
    pub fn train(
        images: &Matrix,
        labels: &[u8],
        shape: SampleShape,
        steps: usize,
        batch: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, Error> {
        let SampleShape::Image { channels, height, width } = shape else {
            return Err(Error::Shape("convolutional classifier needs image data".into()));
        };
        if labels.len() != images.rows || images.rows == 0 {
            return Err(Error::Format(format!("{} labels for {} images", labels.len(), images.rows)));
        }
        let classes = *labels.iter().max().unwrap() as usize + 1;
        let (h1, w1) = (nn::conv_out_len(height), nn::conv_out_len(width));
        let (h2, w2) = (nn::conv_out_len(h1), nn::conv_out_len(w1));
        let ops = vec![
            Op::conv(ParamSlot::Gene(0), channels, 16, height, width, rng),
            Op::Act(Activation::LeakyReLU),
            Op::conv(ParamSlot::Gene(1), 16, 32, h1, w1, rng),
            Op::Act(Activation::LeakyReLU),
            Op::dense(ParamSlot::Gene(2), 32 * h2 * w2, Self::FEATURES, rng),
            Op::Act(Activation::ReLU),
            Op::dense(ParamSlot::Head, Self::FEATURES, classes, rng),
        ];
        let mut net = Network::new(ops, shape.width(), classes);
        let mut opt = RmsProp::new(1e-3);
        let batch = batch.min(images.rows);
        for _ in 0..steps {
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..images.rows)).collect();
            let x = images.select_rows(&idx);
            let trace = net.forward_trace(&x);
            let logits = trace.output();
            let mut g = Matrix::zeros(batch, classes);
            for (r, &i) in idx.iter().enumerate() {
                let row = logits.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                for (c, out) in g.row_mut(r).iter_mut().enumerate() {
                    let p = (row[c] - max).exp() / z;
                    *out = (p - if c == labels[i] as usize { 1.0 } else { 0.0 }) / batch as f64;
                }
            }
            let (_, grads) = net.backward(&trace, &g, true);
            opt.step(&mut net, &grads);
        }
        net.ops.truncate(6);
        net.output_width = Self::FEATURES;
        Ok(Self { body: net, width: Self::FEATURES, tag: format!("conv_classifier_{steps}x{batch}") })
    }
}

impl FeatureExtractor for ConvClassifier {
    fn id(&self) -> String {
        self.tag.clone()
    }
    fn width(&self) -> usize {
        self.width
    }
    fn extract(&self, samples: &Matrix) -> Matrix {
        self.body.forward(samples)
    }
}

/// Generates `n` samples from `generator` in chunks of `chunk` latent vectors.
pub fn generate(generator: &Network, n: usize, chunk: usize, rng: &mut impl Rng) -> Matrix {
    let latent = generator.input_width;
    let mut out = Vec::with_capacity(n * generator.output_width);
    let mut done = 0;
    while done < n {
        let m = chunk.min(n - done);
        let z = Matrix::from_vec(m, latent, (0..m * latent).map(|_| rng.sample(StandardNormal)).collect());
        out.extend(generator.forward(&z).data);
        done += m;
    }
    Matrix::from_vec(n, generator.output_width, out)
}

/// FID of `n_samples` generated samples against precomputed real statistics.
/// Diverged generators (non-finite output) score the sentinel.
pub fn generator_fitness(
    generator: &Network,
    extractor: &dyn FeatureExtractor,
    real: &GaussianStats,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<f64, Error> {
    let samples = generate(generator, n_samples, 256, rng);
    if !samples.is_finite() {
        return Ok(FITNESS_SENTINEL);
    }
    let feats = extractor.extract(&samples);
    if !feats.is_finite() {
        return Ok(FITNESS_SENTINEL);
    }
    fid(real, &estimate_gaussian(&feats)?)
}

const STATS_MAGIC: &[u8; 4] = b"GSTA";

/// Cache key for real-data statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsKey {
    pub extractor: String,
    pub dataset: String,
}

impl StatsKey {
    pub fn file_name(&self) -> String {
        let clean =
            |s: &str| s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect::<String>();
        format!("{}__{}.stats", clean(&self.dataset), clean(&self.extractor))
    }
}

/// Binary record: magic `GSTA`, u32 version, u64 dim, μ, then Σ row-major;
/// all little-endian f64.
pub fn write_stats(path: &Path, stats: &GaussianStats) -> Result<(), Error> {
    let d = stats.dim();
    let mut buf = Vec::with_capacity(16 + 8 * (d + d * d));
    buf.extend_from_slice(STATS_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(d as u64).to_le_bytes());
    for v in stats.mean.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for r in 0..d {
        for c in 0..d {
            buf.extend_from_slice(&stats.cov[(r, c)].to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_stats(path: &Path) -> Result<GaussianStats, Error> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 16 || &buf[..4] != STATS_MAGIC {
        return Err(Error::Format(format!("{} is not a statistics record", path.display())));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != 1 {
        return Err(Error::Format(format!("unsupported statistics version {version}")));
    }
    let d = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let want = 16 + 8 * (d + d * d);
    if buf.len() != want {
        return Err(Error::Format(format!("statistics record is {} bytes, expected {want}", buf.len())));
    }
    let vals: Vec<f64> = buf[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(GaussianStats { mean: DVector::from_column_slice(&vals[..d]), cov: DMatrix::from_row_slice(d, d, &vals[d..]) })
}

/// Loads cached statistics for `key` from `dir`, computing and storing them
/// on a miss.
pub fn cached_stats(dir: &Path, key: &StatsKey, compute: impl FnOnce() -> Result<GaussianStats, Error>) -> Result<GaussianStats, Error> {
    let path = dir.join(key.file_name());
    if path.exists() {
        return read_stats(&path);
    }
    let stats = compute()?;
    write_stats(&path, &stats)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stats(mean: &[f64], diag: &[f64]) -> GaussianStats {
        GaussianStats { mean: DVector::from_column_slice(mean), cov: DMatrix::from_diagonal(&DVector::from_column_slice(diag)) }
    }

    #[test]
    fn gaussian_of_two_points() {
        let s = estimate_gaussian(&Matrix::from_vec(2, 2, vec![0.0, 0.0, 2.0, 2.0])).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 1.0]);
        assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]));
    }

    #[test]
    fn constant_rows_have_zero_covariance() {
        let s = estimate_gaussian(&Matrix::from_vec(5, 3, [1.5, -2.0, 0.25].repeat(5))).unwrap();
        assert!(s.cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_row_is_rejected() {
        assert!(estimate_gaussian(&Matrix::from_vec(1, 2, vec![0.0, 1.0])).is_err());
    }

    #[test]
    fn sqrt_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_psd(&i).unwrap() - &i).norm() < 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(&[4.0, 9.0]));
        let s = matrix_sqrt_psd(&d).unwrap();
        assert!((s - DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 3.0]))).norm() < 1e-12);
        let neg = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, -0.5]));
        assert!(matrix_sqrt_psd(&neg).is_err());
        let tiny = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, -1e-12]));
        assert!(matrix_sqrt_psd(&tiny).is_ok());
    }

    #[test]
    fn fid_examples() {
        let a = stats(&[0.0], &[1.0]);
        assert_eq!(fid(&a, &a).unwrap(), 0.0);
        assert!((fid(&a, &stats(&[1.0], &[1.0])).unwrap() - 1.0).abs() < 1e-9);
        let v = fid(&stats(&[0.0, 0.0], &[1.0, 1.0]), &stats(&[1.0, 1.0], &[4.0, 4.0])).unwrap();
        assert!((v - 4.0).abs() < 1e-9, "{v}");
        assert!(fid(&a, &stats(&[0.0, 0.0], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn stats_roundtrip_and_cache() {
        let dir = tempfile::tempdir().unwrap();
        let s = GaussianStats { mean: DVector::from_column_slice(&[1.0, -2.0]), cov: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]) };
        let key = StatsKey { extractor: "identity".into(), dataset: "ring/8".into() };
        let first = cached_stats(dir.path(), &key, || Ok(s.clone())).unwrap();
        let second = cached_stats(dir.path(), &key, || panic!("should hit the cache")).unwrap();
        assert_eq!(first, second);
        fs::write(dir.path().join("bad.stats"), b"nope").unwrap();
        assert!(read_stats(&dir.path().join("bad.stats")).is_err());
    }

    #[test]
    fn classifier_features_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shape = SampleShape::Image { channels: 1, height: 8, width: 8 };
        let images = Matrix::from_vec(20, 64, (0..20 * 64).map(|_| rng.random_range(-1.0..1.0)).collect());
        let labels: Vec<u8> = (0..20).map(|i| (i % 3) as u8).collect();
        let clf = ConvClassifier::train(&images, &labels, shape, 5, 8, &mut rng).unwrap();
        let a = clf.extract(&images);
        assert_eq!((a.rows, a.cols), (20, ConvClassifier::FEATURES));
        assert_eq!(a, clf.extract(&images));
    }
}
