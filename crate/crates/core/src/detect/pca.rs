//! PCA reconstruction-error baseline over per-window token histograms.

use serde::{Deserialize, Serialize};

use super::DetectError;
use crate::windowing::Window;

/// Eigenvalues below this fraction of the largest are treated as zero.
const EIGEN_FLOOR: f64 = 1e-12;

/// Count of each token in the window; length `total_tokens`.
pub fn token_histogram(window: &Window, total_tokens: usize) -> Vec<f64> {
    let mut h = vec![0.0; total_tokens];
    for &t in &window.tokens {
        if let Some(slot) = h.get_mut(t as usize) {
            *slot += 1.0;
        }
    }
    h
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors.
pub fn symmetric_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| v.iter().map(|row| row[i]).collect()).collect();
    (values, vectors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaDetector {
    pub mean: Vec<f64>,
    /// Unit principal directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Abnormal iff reconstruction error exceeds this; set by calibration.
    pub threshold: Option<f64>,
}

/// Fits `n_components` principal directions of the sample covariance.
pub fn pca_fit(samples: &[Vec<f64>], n_components: usize) -> Result<PcaDetector, DetectError> {
    let dim = samples.first().map_or(0, Vec::len);
    if samples.is_empty() || dim == 0 {
        return Err(DetectError::Empty);
    }
    if samples.iter().any(|s| s.len() != dim) {
        return Err(DetectError::Config("samples differ in dimension".into()));
    }
    if n_components == 0 || n_components >= dim {
        return Err(DetectError::Config(format!(
            "n_components must lie in [1, {dim}), got {n_components}"
        )));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x / n;
        }
    }
    let mut cov = vec![vec![0.0; dim]; dim];
    for s in samples {
        let c: Vec<f64> = s.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..dim {
            for j in i..dim {
                cov[i][j] += c[i] * c[j] / n;
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }
    let (mut values, vectors) = symmetric_eigen(&cov);
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    for v in values.iter_mut() {
        if *v < top * EIGEN_FLOOR {
            *v = 0.0;
        }
    }
    Ok(PcaDetector {
        mean,
        components: vectors.into_iter().take(n_components).collect(),
        eigenvalues: values.into_iter().take(n_components).collect(),
        threshold: None,
    })
}

impl PcaDetector {
    /// Squared distance between `x` and its projection onto the principal
    /// subspace.
    pub fn reconstruction_error(&self, x: &[f64]) -> f64 {
        let mut residual: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let centered = residual.clone();
        for v in &self.components {
            let coef: f64 = centered.iter().zip(v).map(|(a, b)| a * b).sum();
            for (r, b) in residual.iter_mut().zip(v) {
                *r -= coef * b;
            }
        }
        residual.iter().map(|r| r * r).sum()
    }

    /// Picks the F1-maximizing threshold on labeled calibration scores.
    pub fn calibrate(&mut self, scores: &[f64], labels: &[bool]) -> f64 {
        let (threshold, f1) = super::metrics::best_f1_threshold(scores, labels);
        self.threshold = Some(threshold);
        f1
    }

    pub fn is_abnormal(&self, score: f64) -> bool {
        self.threshold.is_some_and(|t| score > t)
    }
}

pub fn pca_fit_windows(
    windows: &[Window],
    total_tokens: usize,
    n_components: usize,
) -> Result<PcaDetector, DetectError> {
    let samples: Vec<Vec<f64>> = windows.iter().map(|w| token_histogram(w, total_tokens)).collect();
    pca_fit(&samples, n_components)
}

pub fn pca_score(detector: &PcaDetector, window: &Window) -> f64 {
    detector.reconstruction_error(&token_histogram(window, detector.mean.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonalizes() {
        let m = vec![vec![4.0, 1.0, 2.0], vec![1.0, 3.0, 0.5], vec![2.0, 0.5, 5.0]];
        let (vals, vecs) = symmetric_eigen(&m);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        for (lambda, v) in vals.iter().zip(&vecs) {
            for i in 0..3 {
                let mv: f64 = (0..3).map(|j| m[i][j] * v[j]).sum();
                assert!((mv - lambda * v[i]).abs() < 1e-12);
            }
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((vals.iter().sum::<f64>() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn in_subspace_points_reconstruct_exactly() {
        // Points on the line (1, 2, 0) * s.
        let samples: Vec<Vec<f64>> = (0..6).map(|s| vec![s as f64, 2.0 * s as f64, 0.0]).collect();
        let pca = pca_fit(&samples, 1).unwrap();
        assert!(pca.reconstruction_error(&[7.0, 14.0, 0.0]) < 1e-20);
        // An orthogonal offset of length 3 costs exactly 9.
        let err = pca.reconstruction_error(&[2.5, 5.0, 3.0]);
        assert!((err - 9.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_covariance_is_handled() {
        let samples = vec![vec![1.0, 1.0, 1.0]; 5];
        let pca = pca_fit(&samples, 2).unwrap();
        assert!(pca.eigenvalues.iter().all(|&v| v == 0.0));
        assert_eq!(pca.reconstruction_error(&[1.0, 1.0, 1.0]), 0.0);
        assert!(pca_fit(&samples, 3).is_err());
        assert!(pca_fit(&[], 1).is_err());
    }

    #[test]
    fn histogram_counts_tokens() {
        let w = Window::new(vec![0, 2, 2, 4], vec![0; 4], 0);
        assert_eq!(token_histogram(&w, 5), vec![1.0, 0.0, 2.0, 0.0, 1.0]);
    }
}
