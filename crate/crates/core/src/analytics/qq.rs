//! Mahalanobis / chi-square Q-Q diagnostic for multivariate normality.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::stats::chi2_quantile;
use crate::error::{Error, Result};

/// Ridge added to the covariance, as a fraction of its mean diagonal.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqPlot {
    /// `(chi2_quantile, mahalanobis_sq_quantile)`, sorted.
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub dim: usize,
}

impl QqPlot {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
        let wrap = |e: csv::Error| Error::Argument(format!("{}: {e}", path.display()));
        w.write_record(["chi2_q", "md2_q"]).map_err(wrap)?;
        for (x, y) in &self.points {
            w.write_record([format!("{x:.17e}"), format!("{y:.17e}")]).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Squared Mahalanobis distances of the rows to their mean under the
/// ridge-regularized sample covariance.
pub fn mahalanobis_sq(x: ArrayView2<f64>) -> Result<Vec<f64>> {
    let (n, d) = x.dim();
    if d == 0 || n <= d {
        return Err(Error::Argument(format!("need more samples than dimensions, got n={n}, d={d}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite input".into()));
    }
    let m = DMatrix::from_row_iterator(n, d, x.iter().copied());
    let mean = m.row_mean();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eps = COVARIANCE_RIDGE * cov.trace() / d as f64;
    for i in 0..d {
        cov[(i, i)] += eps;
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
    Ok(centered
        .row_iter()
        .map(|r| {
            let v: DVector<f64> = r.transpose();
            let w = chol.l().solve_lower_triangular(&v).expect("cholesky factor is invertible");
            w.norm_squared()
        })
        .collect())
}

/// Sorted squared Mahalanobis distances against chi-square(d) quantiles at
/// plotting positions `(i - 0.5) / n`, with a least-squares line through the
/// scatter.
pub fn mahalanobis_qq(x: ArrayView2<f64>) -> Result<QqPlot> {
    let d = x.ncols();
    let mut md2 = mahalanobis_sq(x)?;
    md2.sort_by(f64::total_cmp);
    let n = md2.len();
    let chi: Vec<f64> = (1..=n)
        .map(|i| chi2_quantile((i as f64 - 0.5) / n as f64, d as f64))
        .collect::<Result<_>>()?;
    let (slope, intercept, r_squared) = linear_fit(&chi, &md2);
    Ok(QqPlot {
        points: chi.into_iter().zip(md2).collect(),
        slope,
        intercept,
        r_squared,
        dim: d,
    })
}

/// Ordinary least squares `y = slope * x + intercept` and R².
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}
