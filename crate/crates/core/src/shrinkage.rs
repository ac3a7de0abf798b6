//! Kernel mean shrinkage and the shrunk MMD² statistic.
//!
//! The shrunk embedding of a sample set is `(1 - rho) * mu_hat`, where
//! `mu_hat` is the empirical kernel mean and
//!
//! ```text
//! rho    = risk / (risk + |mu_hat|^2)
//! |mu|^2 = (1/m^2) sum_ij k(x_i, x_j)
//! risk   = [ (1/m) sum_i k(x_i, x_i) - (1/(m(m-1))) sum_{i != j} k(x_i, x_j) ] / m
//! ```
//!
//! MMD² between two shrunk embeddings expands into three full-block means
//! (V-statistic form, diagonals included).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::GramBlock;

/// Values in `[-NEG_TOLERANCE, 0)` are rounding noise and clamp to zero.
pub const NEG_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageEstimate {
    pub m: usize,
    pub norm_sq: f64,
    pub risk: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MmdMode {
    Shrunk,
    Plain,
}

fn require_square(k: &GramBlock) -> Result<usize> {
    if !k.is_square() {
        return Err(Error::Argument(format!(
            "expected a square gram block, got {}x{}",
            k.rows(),
            k.cols()
        )));
    }
    Ok(k.rows())
}

pub fn norm_sq_mean_embedding(k: &GramBlock) -> Result<f64> {
    let m = require_square(k)?;
    if m == 0 {
        return Err(Error::Argument("empty gram block".into()));
    }
    Ok(k.mean())
}

pub fn shrinkage_risk(k: &GramBlock) -> Result<f64> {
    let m = require_square(k)?;
    if m < 2 {
        return Err(Error::DegenerateGroup(format!(
            "shrinkage risk needs at least 2 samples, got {m}"
        )));
    }
    let diag: f64 = k.values.diag().sum();
    let off = k.values.sum() - diag;
    let mf = m as f64;
    Ok((diag / mf - off / (mf * (mf - 1.0))) / mf)
}

pub fn shrinkage_factor(k: &GramBlock) -> Result<ShrinkageEstimate> {
    let risk = shrinkage_risk(k)?;
    let norm_sq = norm_sq_mean_embedding(k)?;
    let rho = if risk == 0.0 {
        0.0
    } else {
        let denom = risk + norm_sq;
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Numerical(format!(
                "shrinkage denominator degenerate (risk {risk}, norm_sq {norm_sq})"
            )));
        }
        risk / denom
    };
    Ok(ShrinkageEstimate {
        m: k.rows(),
        norm_sq,
        risk,
        rho,
    })
}

/// MMD² together with the shrinkage factors that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mmd2 {
    pub value: f64,
    pub rho_p: f64,
    pub rho_q: f64,
}

/// Squared discrepancy for explicit shrinkage factors. Shared by the
/// training loss so that frozen factors can be plugged back in.
pub(crate) fn mmd2_with_rho(mean_xx: f64, mean_yy: f64, mean_xy: f64, rho_p: f64, rho_q: f64) -> f64 {
    let a = 1.0 - rho_p;
    let b = 1.0 - rho_q;
    a * a * mean_xx + b * b * mean_yy - 2.0 * a * b * mean_xy
}

pub(crate) fn clamp_noise(v: f64) -> Result<f64> {
    if v < -NEG_TOLERANCE || v.is_nan() {
        return Err(Error::Numerical(format!("MMD² evaluated to {v}")));
    }
    Ok(v.max(0.0))
}

pub fn mmd2_kms(
    k_xx: &GramBlock,
    k_yy: &GramBlock,
    k_xy: &GramBlock,
    mode: MmdMode,
) -> Result<Mmd2> {
    if k_xx.spec != k_yy.spec || k_xx.spec != k_xy.spec {
        return Err(Error::Argument("gram blocks built with different kernels".into()));
    }
    let m = require_square(k_xx)?;
    let n = require_square(k_yy)?;
    if k_xy.rows() != m || k_xy.cols() != n {
        return Err(Error::Argument(format!(
            "cross block is {}x{}, expected {m}x{n}",
            k_xy.rows(),
            k_xy.cols()
        )));
    }
    let (rho_p, rho_q) = match mode {
        MmdMode::Plain => (0.0, 0.0),
        MmdMode::Shrunk => (shrinkage_factor(k_xx)?.rho, shrinkage_factor(k_yy)?.rho),
    };
    let raw = mmd2_with_rho(k_xx.mean(), k_yy.mean(), k_xy.mean(), rho_p, rho_q);
    Ok(Mmd2 {
        value: clamp_noise(raw)?,
        rho_p,
        rho_q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram, KernelSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    fn block(values: Array2<f64>) -> GramBlock {
        GramBlock {
            values,
            spec: KernelSpec::rbf(1.0),
        }
    }

    #[test]
    fn two_point_hand_values() {
        let k = block(array![[1.0, 0.5], [0.5, 1.0]]);
        assert_eq!(norm_sq_mean_embedding(&k).unwrap(), 0.75);
        assert_eq!(shrinkage_risk(&k).unwrap(), 0.25);
        let est = shrinkage_factor(&k).unwrap();
        assert_eq!(est.rho, 0.25);
        assert_eq!(est.m, 2);
    }

    #[test]
    fn single_sample_cases() {
        let k = block(array![[1.0]]);
        assert_eq!(norm_sq_mean_embedding(&k).unwrap(), 1.0);
        assert!(matches!(shrinkage_risk(&k), Err(Error::DegenerateGroup(_))));
        assert!(matches!(shrinkage_factor(&k), Err(Error::DegenerateGroup(_))));
    }

    #[test]
    fn collapsed_batch() {
        let k = block(Array2::ones((4, 4)));
        assert_eq!(norm_sq_mean_embedding(&k).unwrap(), 1.0);
        assert_eq!(shrinkage_risk(&k).unwrap(), 0.0);
        assert_eq!(shrinkage_factor(&k).unwrap().rho, 0.0);
    }

    #[test]
    fn non_square_rejected() {
        let k = block(Array2::ones((2, 3)));
        assert!(matches!(norm_sq_mean_embedding(&k), Err(Error::Argument(_))));
        assert!(matches!(shrinkage_risk(&k), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_denominator_is_numerical_error() {
        // risk = -0.5, norm_sq = 0.5
        let k = GramBlock {
            values: array![[0.0, 1.0], [1.0, 0.0]],
            spec: KernelSpec::Linear,
        };
        assert!(matches!(shrinkage_factor(&k), Err(Error::Numerical(_))));
    }

    #[test]
    fn separated_duplicates_hand_value() {
        let spec = KernelSpec::rbf(1.0);
        let x = array![[0.0], [0.0]];
        let y = array![[1.0], [1.0]];
        let kxx = gram(&spec, x.view(), x.view()).unwrap();
        let kyy = gram(&spec, y.view(), y.view()).unwrap();
        let kxy = gram(&spec, x.view(), y.view()).unwrap();
        let r = mmd2_kms(&kxx, &kyy, &kxy, MmdMode::Shrunk).unwrap();
        assert_eq!((r.rho_p, r.rho_q), (0.0, 0.0));
        assert_abs_diff_eq!(r.value, 2.0 - 2.0 * (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(r.value, 0.786939, epsilon = 1e-6);
        let p = mmd2_kms(&kxx, &kyy, &kxy, MmdMode::Plain).unwrap();
        assert_eq!(p.value, r.value);
    }

    #[test]
    fn identical_sets_give_zero() {
        let spec = KernelSpec::rbf(0.9);
        let x = array![[0.0, 1.0], [2.0, 0.5]];
        let k = gram(&spec, x.view(), x.view()).unwrap();
        for mode in [MmdMode::Shrunk, MmdMode::Plain] {
            assert_abs_diff_eq!(mmd2_kms(&k, &k, &k, mode).unwrap().value, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn mismatched_kernels_rejected() {
        let x = array![[0.0], [1.0]];
        let a = gram(&KernelSpec::rbf(1.0), x.view(), x.view()).unwrap();
        let b = gram(&KernelSpec::rbf(2.0), x.view(), x.view()).unwrap();
        assert!(matches!(mmd2_kms(&a, &b, &a, MmdMode::Plain), Err(Error::Argument(_))));
    }

    #[test]
    fn shrunk_requires_two_per_group() {
        let spec = KernelSpec::rbf(1.0);
        let x = array![[0.0]];
        let y = array![[1.0], [2.0]];
        let kxx = gram(&spec, x.view(), x.view()).unwrap();
        let kyy = gram(&spec, y.view(), y.view()).unwrap();
        let kxy = gram(&spec, x.view(), y.view()).unwrap();
        assert!(matches!(
            mmd2_kms(&kxx, &kyy, &kxy, MmdMode::Shrunk),
            Err(Error::DegenerateGroup(_))
        ));
        assert!(mmd2_kms(&kxx, &kyy, &kxy, MmdMode::Plain).is_ok());
    }
}
