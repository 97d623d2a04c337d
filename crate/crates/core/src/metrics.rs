//! Evaluation math: Gaussian feature statistics, Fréchet distance with an
//! eigendecomposition-based matrix square root, Inception Score, pixel and
//! perceptual distances, and the perceptual path length estimator.
//!
//! Everything here runs in f64; feature extraction happens upstream behind
//! the pluggable [`Embedder`] interface.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::image::ImageBatch;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[cfg(not(feature = "std"))]
use crate::fmath::FloatMathExt;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MetricsError {
    TooFewSamples,
    DimensionMismatch,
    InvalidSimplex { row: usize },
    Unsupported(&'static str),
}

impl core::fmt::Display for MetricsError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MetricsError::TooFewSamples => write!(f, "need at least 2 samples"),
            MetricsError::DimensionMismatch => write!(f, "feature dimension mismatch"),
            MetricsError::InvalidSimplex { row } => {
                write!(f, "row {row} is not a probability distribution")
            }
            MetricsError::Unsupported(what) => write!(f, "unsupported: {what}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MetricsError {}

/// Maps image batches to feature vectors (for FID / perceptual distance) or
/// class probabilities (for IS). Implementations must be deterministic.
pub trait Embedder {
    fn id(&self) -> &str;
    fn feature_dim(&self) -> usize;
    /// Penultimate feature vectors, `[N, F]`.
    fn embed(&self, batch: &ImageBatch) -> Tensor;
    /// Class probabilities `[N, C]`, when the embedder is a classifier.
    fn class_probs(&self, batch: &ImageBatch) -> Option<Tensor>;
    /// Designated-layer activations used for perceptual distance, `[N, P]`.
    fn perceptual(&self, batch: &ImageBatch) -> Tensor;
}

/// Flattened-pixel stub embedder: `embed` and `perceptual` return the raw
/// pixels, making perceptual distance coincide with per-pixel MSE.
pub struct IdentityEmbedder {
    dim: usize,
}

impl IdentityEmbedder {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        IdentityEmbedder { dim: c * h * w }
    }
}

impl Embedder for IdentityEmbedder {
    fn id(&self) -> &str {
        "identity"
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, batch: &ImageBatch) -> Tensor {
        let n = batch.len();
        Tensor::from_vec(&[n, self.dim], batch.tensor().data().to_vec())
    }

    fn class_probs(&self, _batch: &ImageBatch) -> Option<Tensor> {
        None
    }

    fn perceptual(&self, batch: &ImageBatch) -> Tensor {
        self.embed(batch)
    }
}

// ---------------------------------------------------------------------------
// Gaussian statistics and the Fréchet distance
// ---------------------------------------------------------------------------

/// Sample mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`, symmetric by construction.
    pub cov: Vec<f64>,
}

/// Fit mean and unbiased covariance to `[N, F]` features.
pub fn fit_gaussian(features: &Tensor) -> Result<GaussianStats, MetricsError> {
    let (n, f) = features.dims2();
    if n < 2 {
        return Err(MetricsError::TooFewSamples);
    }
    let x = features.data();
    let mut mean = vec![0.0f64; f];
    for i in 0..n {
        for j in 0..f {
            mean[j] += x[i * f + j] as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; f * f];
    let mut centered = vec![0.0f64; f];
    for i in 0..n {
        for j in 0..f {
            centered[j] = x[i * f + j] as f64 - mean[j];
        }
        for a in 0..f {
            let ca = centered[a];
            for b in a..f {
                cov[a * f + b] += ca * centered[b];
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..f {
        for b in a..f {
            let v = cov[a * f + b] / denom;
            cov[a * f + b] = v;
            cov[b * f + a] = v;
        }
    }
    Ok(GaussianStats { dim: f, mean, cov })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// `(eigenvalues, eigenvectors)` with eigenvector `j` stored in column `j`
/// of the row-major `n x n` matrix.
pub fn sym_eigen(a_in: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a_in.len(), n * n);
    let mut a = a_in.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(1e-300);
    let tol = 1e-15 * scale;
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[p * n + q].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k != p && k != q {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[p * n + k] = a[k * n + p];
                        a[k * n + q] = s * akp + c * akq;
                        a[q * n + k] = a[k * n + q];
                    }
                }
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| a[i * n + i]).collect();
    (eig, v)
}

pub(crate) fn mm64(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    c.fill(0.0);
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += ail * brow[j];
            }
        }
    }
}

/// Symmetric PSD matrix square root via eigendecomposition; tiny negative
/// eigenvalues are clamped to zero.
pub fn sqrtm_psd(mat: &[f64], n: usize) -> Vec<f64> {
    let (eig, v) = sym_eigen(mat, n);
    // out = V diag(sqrt(clamp(eig))) V^T
    let mut scaled = vec![0.0f64; n * n]; // V * diag
    for i in 0..n {
        for j in 0..n {
            scaled[i * n + j] = v[i * n + j] * eig[j].max(0.0).sqrt();
        }
    }
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..n {
                acc += scaled[i * n + l] * v[j * n + l];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Fréchet distance between Gaussian feature statistics:
/// `|m1 - m2|^2 + Tr(C1 + C2 - 2 (C1 C2)^{1/2})`, computed through the
/// symmetrized product `C1^{1/2} C2 C1^{1/2}` and clamped at zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, MetricsError> {
    if a.dim != b.dim {
        return Err(MetricsError::DimensionMismatch);
    }
    let n = a.dim;
    let mut mean_term = 0.0;
    for j in 0..n {
        let d = a.mean[j] - b.mean[j];
        mean_term += d * d;
    }
    let tr_a: f64 = (0..n).map(|i| a.cov[i * n + i]).sum();
    let tr_b: f64 = (0..n).map(|i| b.cov[i * n + i]).sum();
    let s = sqrtm_psd(&a.cov, n);
    let mut tmp = vec![0.0f64; n * n];
    mm64(n, n, n, &s, &b.cov, &mut tmp);
    let mut prod = vec![0.0f64; n * n];
    mm64(n, n, n, &tmp, &s, &mut prod);
    // symmetrize against round-off before the eigensolve
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (prod[i * n + j] + prod[j * n + i]);
            prod[i * n + j] = v;
            prod[j * n + i] = v;
        }
    }
    let (eig, _) = sym_eigen(&prod, n);
    let tr_sqrt: f64 = eig.iter().map(|&l| l.max(0.0).sqrt()).sum();
    Ok((mean_term + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0))
}

/// FID from raw feature sets.
pub fn fid_from_features(real: &Tensor, fake: &Tensor) -> Result<f64, MetricsError> {
    let a = fit_gaussian(real)?;
    let b = fit_gaussian(fake)?;
    frechet_distance(&a, &b)
}

// ---------------------------------------------------------------------------
// Inception score
// ---------------------------------------------------------------------------

/// `exp(mean_n KL(p(y|x_n) || mean_m p(y|x_m)))`, computed in log space.
/// Rows must sum to one within 1e-6.
pub fn inception_score(probs: &Tensor) -> Result<f64, MetricsError> {
    let (n, c) = probs.dims2();
    if n == 0 {
        return Err(MetricsError::TooFewSamples);
    }
    let p = probs.data();
    for i in 0..n {
        let mut sum = 0.0f64;
        for j in 0..c {
            let v = p[i * c + j] as f64;
            if !(0.0..=1.0 + 1e-6).contains(&v) {
                return Err(MetricsError::InvalidSimplex { row: i });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MetricsError::InvalidSimplex { row: i });
        }
    }
    let mut marginal = vec![0.0f64; c];
    for i in 0..n {
        for j in 0..c {
            marginal[j] += p[i * c + j] as f64;
        }
    }
    for m in marginal.iter_mut() {
        *m /= n as f64;
    }
    let mut mean_kl = 0.0f64;
    for i in 0..n {
        for j in 0..c {
            let pij = p[i * c + j] as f64;
            if pij > 0.0 && marginal[j] > 0.0 {
                mean_kl += pij * (pij.ln() - marginal[j].ln());
            }
        }
    }
    mean_kl /= n as f64;
    Ok(mean_kl.exp())
}

// ---------------------------------------------------------------------------
// Pixel / perceptual distances
// ---------------------------------------------------------------------------

/// Reduction identifier recorded in reports for the pixel distance.
pub const PIXEL_DISTANCE_REDUCTION: &str = "mean-per-image-l2";

/// Mean over images of the per-image L2 distance (root of the summed squared
/// pixel differences).
pub fn pixel_distance(x: &ImageBatch, xhat: &ImageBatch) -> Result<f64, MetricsError> {
    if x.tensor().shape() != xhat.tensor().shape() {
        return Err(MetricsError::DimensionMismatch);
    }
    let n = x.len();
    let per = x.tensor().numel() / n;
    let a = x.tensor().data();
    let b = xhat.tensor().data();
    let mut total = 0.0f64;
    for i in 0..n {
        let mut ss = 0.0f64;
        for j in 0..per {
            let d = (a[i * per + j] - b[i * per + j]) as f64;
            ss += d * d;
        }
        total += ss.sqrt();
    }
    Ok(total / n as f64)
}

/// Mean squared difference between two feature matrices of equal shape.
pub fn mean_squared_feature_diff(a: &Tensor, b: &Tensor) -> Result<f64, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::DimensionMismatch);
    }
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = (x - y) as f64;
        acc += d * d;
    }
    Ok(acc / a.numel() as f64)
}

/// Perceptual distance: mean squared difference of designated-layer
/// activations.
pub fn perceptual_distance(
    x: &ImageBatch,
    xhat: &ImageBatch,
    embedder: &dyn Embedder,
) -> Result<f64, MetricsError> {
    mean_squared_feature_diff(&embedder.perceptual(x), &embedder.perceptual(xhat))
}

// ---------------------------------------------------------------------------
// Perceptual path length
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    Lerp,
    Slerp,
}

/// PPL over explicit `(z1, z2, t)` triples:
/// `mean_i d_perc(G(i(z1,z2,t)), G(i(z1,z2,t+eps))) / eps^2` where `d_perc`
/// is the mean squared feature difference.
pub fn ppl_estimate<D, P>(
    mut decode: D,
    mut perceptual: P,
    pairs: &[(Vec<f32>, Vec<f32>, f64)],
    epsilon: f64,
    interp: Interp,
) -> f64
where
    D: FnMut(&Tensor) -> ImageBatch,
    P: FnMut(&ImageBatch) -> Tensor,
{
    assert!(epsilon > 0.0, "ppl epsilon must be positive");
    assert!(!pairs.is_empty());
    let d_z = pairs[0].0.len();
    let chunk = 64usize;
    let mut total = 0.0f64;
    for group in pairs.chunks(chunk) {
        let m = group.len();
        let mut za = vec![0.0f32; m * d_z];
        let mut zb = vec![0.0f32; m * d_z];
        for (i, (z1, z2, t)) in group.iter().enumerate() {
            let a = interpolate(interp, z1, z2, *t);
            let b = interpolate(interp, z1, z2, *t + epsilon);
            za[i * d_z..(i + 1) * d_z].copy_from_slice(&a);
            zb[i * d_z..(i + 1) * d_z].copy_from_slice(&b);
        }
        let fa = perceptual(&decode(&Tensor::from_vec(&[m, d_z], za)));
        let fb = perceptual(&decode(&Tensor::from_vec(&[m, d_z], zb)));
        let (_, p) = fa.dims2();
        let fav = fa.data();
        let fbv = fb.data();
        for i in 0..m {
            let mut acc = 0.0f64;
            for j in 0..p {
                let d = (fav[i * p + j] - fbv[i * p + j]) as f64;
                acc += d * d;
            }
            total += acc / p as f64 / (epsilon * epsilon);
        }
    }
    total / pairs.len() as f64
}

fn interpolate(interp: Interp, z1: &[f32], z2: &[f32], t: f64) -> Vec<f32> {
    match interp {
        Interp::Lerp => crate::latent::lerp(z1, z2, t as f32),
        Interp::Slerp => crate::latent::slerp(z1, z2, t as f32).z,
    }
}

/// Sampling form of the estimator: endpoints from the prior, `t` uniform on
/// `[0, 1]` ("full" path), deterministic given the stream.
pub fn perceptual_path_length<D, P>(
    decode: D,
    perceptual: P,
    d_z: usize,
    num_pairs: usize,
    epsilon: f64,
    rng: &mut RngStream,
    interp: Interp,
) -> f64
where
    D: FnMut(&Tensor) -> ImageBatch,
    P: FnMut(&ImageBatch) -> Tensor,
{
    assert!(num_pairs >= 1);
    let mut pairs = Vec::with_capacity(num_pairs);
    for _ in 0..num_pairs {
        let z1: Vec<f32> = (0..d_z).map(|_| rng.normal_f32()).collect();
        let z2: Vec<f32> = (0..d_z).map(|_| rng.normal_f32()).collect();
        let t = rng.uniform();
        pairs.push((z1, z2, t));
    }
    ppl_estimate(decode, perceptual, &pairs, epsilon, interp)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// One evaluation snapshot. Missing embedders leave fields absent. Sample
/// counts and the embedder id are always stamped so numbers are only compared
/// within an embedder.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid_sampling: Option<f64>,
    pub fid_reconstruction: Option<f64>,
    pub is_sampling: Option<f64>,
    pub is_reconstruction: Option<f64>,
    pub pixel_distance: Option<f64>,
    pub perceptual_distance: Option<f64>,
    pub ppl: Option<f64>,
    pub fid_real_count: Option<usize>,
    pub fid_fake_count: Option<usize>,
    pub ppl_pairs: Option<usize>,
    pub embedder_id: Option<String>,
    pub pixel_distance_reduction: Option<String>,
}

impl MetricsReport {
    /// Every present value finite and >= 0, except IS >= 1.
    pub fn check_invariants(&self) -> bool {
        let nonneg = |v: Option<f64>| v.map(|x| x.is_finite() && x >= 0.0).unwrap_or(true);
        let is_ok = |v: Option<f64>| v.map(|x| x.is_finite() && x >= 1.0 - 1e-9).unwrap_or(true);
        nonneg(self.fid_sampling)
            && nonneg(self.fid_reconstruction)
            && nonneg(self.pixel_distance)
            && nonneg(self.perceptual_distance)
            && nonneg(self.ppl)
            && is_ok(self.is_sampling)
            && is_ok(self.is_reconstruction)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_gaussian_degenerate_and_two_point() {
        // constant features: mean v, zero covariance
        let t = Tensor::from_vec(&[3, 2], vec![1.0, -2.0, 1.0, -2.0, 1.0, -2.0]);
        let s = fit_gaussian(&t).unwrap();
        assert_eq!(s.mean, vec![1.0, -2.0]);
        assert!(s.cov.iter().all(|&v| v.abs() < 1e-12));

        // two points +-e1: mean 0, unbiased cov diag(2, 0)
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, -1.0, 0.0]);
        let s = fit_gaussian(&t).unwrap();
        assert!(s.mean.iter().all(|&v| v.abs() < 1e-12));
        assert!((s.cov[0] - 2.0).abs() < 1e-12);
        assert!(s.cov[1].abs() < 1e-12 && s.cov[2].abs() < 1e-12 && s.cov[3].abs() < 1e-12);

        // one point is not enough
        let t = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]);
        assert_eq!(fit_gaussian(&t), Err(MetricsError::TooFewSamples));
    }

    #[test]
    fn frechet_exact_cases() {
        let eye = |d: f64, n: usize| {
            let mut c = vec![0.0f64; n * n];
            for i in 0..n {
                c[i * n + i] = d;
            }
            c
        };
        let a = GaussianStats { dim: 2, mean: vec![0.0, 0.0], cov: eye(1.0, 2) };
        // identical stats -> 0
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-12);
        // mean shift with equal covariance -> |v|^2
        let b = GaussianStats { dim: 2, mean: vec![3.0, 4.0], cov: eye(1.0, 2) };
        assert!((frechet_distance(&a, &b).unwrap() - 25.0).abs() < 1e-9);
        // equal means, C1 = I, C2 = 4I -> Tr(5I - 2*2I) = 2
        let c = GaussianStats { dim: 2, mean: vec![0.0, 0.0], cov: eye(4.0, 2) };
        assert!((frechet_distance(&a, &c).unwrap() - 2.0).abs() < 1e-9);
        // symmetry
        let d = frechet_distance(&a, &c).unwrap();
        let d2 = frechet_distance(&c, &a).unwrap();
        assert!((d - d2).abs() < 1e-8);
    }

    #[test]
    fn inception_score_extremes() {
        // uniform rows -> 1
        let t = Tensor::from_vec(&[4, 5], vec![0.2f32; 20]);
        assert!((inception_score(&t).unwrap() - 1.0).abs() < 1e-12);
        // one-hot rows, one per class -> C
        let c = 6;
        let mut data = vec![0.0f32; c * c];
        for i in 0..c {
            data[i * c + i] = 1.0;
        }
        let t = Tensor::from_vec(&[c, c], data);
        assert!((inception_score(&t).unwrap() - c as f64).abs() < 1e-9);
        // invalid rows rejected
        let t = Tensor::from_vec(&[1, 2], vec![0.7, 0.7]);
        assert!(matches!(inception_score(&t), Err(MetricsError::InvalidSimplex { row: 0 })));
    }

    #[test]
    fn pixel_distance_cases() {
        let x = ImageBatch::new(Tensor::from_vec(&[2, 1, 2, 2], vec![0.0; 8]));
        assert_eq!(pixel_distance(&x, &x).unwrap(), 0.0);
        // single-pixel difference of delta -> delta averaged over images
        let mut data = vec![0.0f32; 8];
        data[1] = 0.5;
        let y = ImageBatch::new(Tensor::from_vec(&[2, 1, 2, 2], data));
        assert!((pixel_distance(&x, &y).unwrap() - 0.25).abs() < 1e-9);
    }

    #[test]
    fn sqrtm_round_trip_small() {
        let mut rng = crate::rng::RngStream::derive(5, "sqrtm");
        let n = 24;
        // random PSD: A A^T + small ridge
        let a: Vec<f64> = (0..n * n).map(|_| rng.standard_normal()).collect();
        let mut m = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += a[i * n + k] * a[j * n + k];
                }
                m[i * n + j] = acc + if i == j { 1e-6 } else { 0.0 };
            }
        }
        let s = sqrtm_psd(&m, n);
        let mut back = vec![0.0f64; n * n];
        mm64(n, n, n, &s, &s, &mut back);
        let num: f64 = back.iter().zip(&m).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let den: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(num / den < 1e-10, "relative error {}", num / den);
    }

    #[test]
    fn ppl_constant_decoder_is_zero() {
        let decode = |z: &Tensor| {
            let n = z.shape()[0];
            ImageBatch::new(Tensor::zeros(&[n, 1, 2, 2]))
        };
        let emb = IdentityEmbedder::new(1, 2, 2);
        let mut rng = crate::rng::RngStream::derive(1, "ppl");
        let v = perceptual_path_length(
            decode,
            |b: &ImageBatch| emb.perceptual(b),
            4,
            16,
            1e-4,
            &mut rng,
            Interp::Slerp,
        );
        assert_eq!(v, 0.0);
    }
}
