use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Eigenvalues above `-PSD_TOLERANCE` are clamped to zero; lower ones are an error.
pub const PSD_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Tensor,
    pub covariance: Tensor,
    pub sample_count: usize,
}

impl GaussianStats {
    pub fn new(mean: Tensor, covariance: Tensor, sample_count: usize) -> Result<Self> {
        let d = mean.numel();
        if covariance.shape() != [d, d] {
            return Err(Error::shape("gaussian stats", &[d, d], covariance.shape()));
        }
        if sample_count < 2 {
            return Err(Error::Metric(format!(
                "need at least 2 samples, got {sample_count}"
            )));
        }
        let c = covariance.data();
        for i in 0..d {
            for j in 0..i {
                if (c[i * d + j] - c[j * d + i]).abs() > 1e-9 * (1.0 + c[i * d + j].abs()) {
                    return Err(Error::Metric(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self {
            mean,
            covariance,
            sample_count,
        })
    }

    /// Mean and unbiased (`n - 1`) covariance of equal-length samples.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::Metric(format!("need at least 2 samples, got {n}")));
        }
        let d = samples[0].len();
        if let Some(bad) = samples.iter().find(|s| s.len() != d) {
            return Err(Error::shape("gaussian samples", &[d], &[bad.len()]));
        }
        let mut mean = vec![0.0; d];
        for s in samples {
            mean.iter_mut().zip(s).for_each(|(m, x)| *m += x / n as f64);
        }
        let mut cov = vec![0.0; d * d];
        for s in samples {
            for i in 0..d {
                let di = s[i] - mean[i];
                for j in 0..=i {
                    cov[i * d + j] += di * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..=i {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Self::new(
            Tensor::new(vec![d], mean)?,
            Tensor::new(vec![d, d], cov)?,
            n,
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.numel()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, self.covariance.data())
    }
}

/// Symmetrises `m` and returns its eigenvalues clamped at zero, or an error
/// if any falls below `-PSD_TOLERANCE`.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    for l in e.eigenvalues.iter_mut() {
        if *l < -PSD_TOLERANCE {
            return Err(Error::Metric(format!(
                "{what} has eigenvalue {l:e}; not positive semi-definite"
            )));
        }
        *l = l.max(0.0);
    }
    Ok(e)
}

fn psd_sqrt(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let e = psd_eigen(m, what)?;
    let root = DVector::from_iterator(e.eigenvalues.len(), e.eigenvalues.iter().map(|l| l.sqrt()));
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, with the trace of
/// the square root taken as `tr sqrt(S_a^(1/2) S_b S_a^(1/2))`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet_distance", &[a.dim()], &[b.dim()]));
    }
    let mean_term: f64 = a
        .mean
        .data()
        .iter()
        .zip(b.mean.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let root_a = psd_sqrt(sa.clone(), "first covariance")?;
    psd_eigen(sb.clone(), "second covariance")?;
    let inner = &root_a * &sb * &root_a;
    let cross: f64 = psd_eigen(inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|l| l.sqrt())
        .sum();
    Ok(mean_term + sa.trace() + sb.trace() - 2.0 * cross)
}
