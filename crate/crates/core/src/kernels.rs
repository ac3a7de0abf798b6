//! Positive-definite kernels and Gram blocks.
//!
//! Everything downstream works through pairwise kernel evaluations; feature
//! maps are never materialized.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum KernelSpec {
    /// `exp(-|x - y|^2 / (2 bandwidth^2))`
    Rbf { bandwidth: f64 },
    /// `<x, y>`
    Linear,
    /// `(<x, y> + offset)^degree`
    #[serde(rename = "poly")]
    Polynomial { degree: u32, offset: f64 },
}

impl KernelSpec {
    pub fn rbf(bandwidth: f64) -> Self {
        KernelSpec::Rbf { bandwidth }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Rbf { bandwidth } if !(bandwidth.is_finite() && bandwidth > 0.0) => Err(
                Error::Argument(format!("rbf bandwidth must be positive, got {bandwidth}")),
            ),
            KernelSpec::Polynomial { degree: 0, .. } => {
                Err(Error::Argument("polynomial degree must be >= 1".into()))
            }
            KernelSpec::Polynomial { offset, .. } if !offset.is_finite() => {
                Err(Error::Argument("polynomial offset must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    /// Evaluates the kernel on two equally sized slices without checks.
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            KernelSpec::Rbf { bandwidth } => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * bandwidth * bandwidth)).exp()
            }
            KernelSpec::Linear => dot(x, y),
            KernelSpec::Polynomial { degree, offset } => (dot(x, y) + offset).powi(degree as i32),
        }
    }

    /// Adds `scale * d k(x, y) / dx` into `out`.
    pub(crate) fn accumulate_grad_first(&self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        match *self {
            KernelSpec::Rbf { bandwidth } => {
                let inv = 1.0 / (bandwidth * bandwidth);
                let k = self.eval_unchecked(x, y);
                let c = -scale * k * inv;
                for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
                    *o += c * (a - b);
                }
            }
            KernelSpec::Linear => {
                for (o, b) in out.iter_mut().zip(y) {
                    *o += scale * b;
                }
            }
            KernelSpec::Polynomial { degree, offset } => {
                let base = dot(x, y) + offset;
                let c = scale * degree as f64 * base.powi(degree as i32 - 1);
                for (o, b) in out.iter_mut().zip(y) {
                    *o += c * b;
                }
            }
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn eval_kernel(spec: &KernelSpec, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
    spec.validate()?;
    if x.len() != y.len() {
        return Err(Error::Argument(format!(
            "dimension mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let x = x.to_vec();
    let y = y.to_vec();
    Ok(spec.eval_unchecked(&x, &y))
}

/// Kernel matrix between two sample sets, `values[[i, j]] = k(x_i, y_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramBlock {
    pub values: Array2<f64>,
    pub spec: KernelSpec,
}

impl GramBlock {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    /// Full-matrix average, diagonal included.
    pub fn mean(&self) -> f64 {
        self.values.sum() / (self.rows() * self.cols()) as f64
    }
}

pub fn gram(spec: &KernelSpec, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<GramBlock> {
    spec.validate()?;
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::Argument("gram requires non-empty sample sets".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::Argument(format!(
            "feature dimension mismatch: {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    let xs = rows_of(x);
    let ys = rows_of(y);
    let values = Array2::from_shape_fn((xs.len(), ys.len()), |(i, j)| {
        spec.eval_unchecked(&xs[i], &ys[j])
    });
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("gram block contains non-finite entries".into()));
    }
    Ok(GramBlock {
        values,
        spec: *spec,
    })
}

pub(crate) fn rows_of(x: ArrayView2<f64>) -> Vec<Vec<f64>> {
    x.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
}

/// Median pairwise Euclidean distance over distinct pairs, falling back to 1.0
/// when the median is zero.
pub fn median_heuristic_bandwidth(x: ArrayView2<f64>) -> Result<f64> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Argument(format!(
            "median heuristic needs at least 2 samples, got {n}"
        )));
    }
    let xs = rows_of(x);
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = xs[i].iter().zip(&xs[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            dists.push(d2.sqrt());
        }
    }
    if dists.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numerical("non-finite pairwise distance".into()));
    }
    dists.sort_by(f64::total_cmp);
    let len = dists.len();
    let median = if len % 2 == 1 {
        dists[len / 2]
    } else {
        0.5 * (dists[len / 2 - 1] + dists[len / 2])
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}
