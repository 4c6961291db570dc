use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{shape_err, Error, Result};
use crate::perceptual::PerceptualNet;

/// Relative asymmetry tolerated before a covariance is rejected.
const SYMMETRY_TOL: f64 = 1e-9;

/// Gaussian fitted to a pool of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    /// Mean and unbiased covariance of the rows of `features`.
    pub fn from_rows(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::Input(format!("feature statistics need at least 2 samples, got {n}")));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return shape_err("feature rows differ in length");
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mu = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
        let mut sigma = centered.transpose() * &centered / (n - 1) as f64;
        // The product is symmetric up to rounding; make it exact.
        sigma = (&sigma + sigma.transpose()) * 0.5;
        Ok(Self { mu, sigma, n })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() {
        return shape_err(format!("covariance {name} is {}x{}", m.nrows(), m.ncols()));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Input(format!("covariance {name} is not symmetric (max asymmetry {asym:e})")));
    }
    Ok(())
}

/// Square root of a symmetric positive semi-definite matrix, clipping
/// negative eigenvalues to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance `‖μa−μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^½)`.
///
/// `Tr((ΣaΣb)^½)` is the sum of square roots of the eigenvalues of the
/// symmetric matrix `Σa^½ Σb Σa^½`, which has the same spectrum.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() || a.sigma.nrows() != a.dim() || b.sigma.nrows() != b.dim() {
        return shape_err(format!("feature dimensions differ: {} vs {}", a.dim(), b.dim()));
    }
    check_symmetric(&a.sigma, "a")?;
    check_symmetric(&b.sigma, "b")?;
    let root_a = sqrt_psd(&a.sigma);
    let mut m = &root_a * &b.sigma * &root_a;
    m = (&m + m.transpose()) * 0.5;
    let tr_covmean: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let mean_term = (&a.mu - &b.mu).norm_squared();
    Ok(mean_term + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_covmean)
}

/// Statistics of the pooled perceptual features of `(B, 3, R, R)` images.
pub fn feature_stats(images: &Tensor, net: &PerceptualNet) -> Result<FeatureStats> {
    const CHUNK: usize = 32;
    let n = images.dim(0)?;
    if n < 2 {
        return Err(Error::Input(format!("feature statistics need at least 2 images, got {n}")));
    }
    let mut rows = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let chunk = images.narrow(0, start, CHUNK.min(n - start))?;
        rows.extend(net.pooled_features(&chunk)?.to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    FeatureStats::from_rows(&rows)
}
