//! Welch's t-test, chi-square quantiles, and the resampled metric t-test
//! protocol used to compare two groups.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    /// Set when both samples have zero variance and different means.
    pub degenerate: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sample Welch t-test with a two-sided p-value.
pub fn two_sample_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Argument(format!(
            "t-test needs at least 2 samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Argument("t-test samples must be finite".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let sa = va / na;
    let sb = vb / nb;
    let se2 = sa + sb;
    let diff = ma - mb;
    if se2 == 0.0 {
        return Ok(if diff == 0.0 {
            TTest {
                t: 0.0,
                p: 1.0,
                df: na + nb - 2.0,
                degenerate: false,
            }
        } else {
            TTest {
                t: diff.signum() * f64::INFINITY,
                p: 0.0,
                df: na + nb - 2.0,
                degenerate: true,
            }
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p = if t == 0.0 {
        1.0
    } else {
        // P(|T| > |t|) = I_{df / (df + t^2)}(df / 2, 1 / 2)
        beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
    };
    Ok(TTest {
        t,
        p,
        df,
        degenerate: false,
    })
}

fn chi2_log_density(x: f64, k: f64) -> f64 {
    let a = k / 2.0;
    (a - 1.0) * x.ln() - x / 2.0 - a * std::f64::consts::LN_2 - ln_gamma(a)
}

/// Quantile of the chi-square distribution with `dof` degrees of freedom:
/// the `x` with `P(dof / 2, x / 2) = p`, found by safeguarded Newton steps on
/// the regularized lower incomplete gamma function.
pub fn chi2_quantile(p: f64, dof: f64) -> Result<f64> {
    if !(dof.is_finite() && dof > 0.0) {
        return Err(Error::Argument(format!("chi-square dof must be positive, got {dof}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Argument(format!("probability {p} outside [0, 1]")));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(f64::INFINITY);
    }
    let a = dof / 2.0;
    let cdf = |x: f64| gamma_lr(a, x / 2.0);

    let (mut lo, mut hi) = (0.0, dof.max(1.0));
    while cdf(hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    // Wilson–Hilferty start, clipped into the bracket
    let z = statrs::function::erf::erfc_inv(2.0 * p) * -std::f64::consts::SQRT_2;
    let h = 2.0 / (9.0 * dof);
    let mut x = (dof * (1.0 - h + z * h.sqrt()).powi(3)).clamp(lo, hi);
    if !(x > lo && x < hi) {
        x = 0.5 * (lo + hi);
    }
    for _ in 0..200 {
        let f = cdf(x) - p;
        if f == 0.0 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let dens = chi2_log_density(x, dof).exp();
        let mut next = x - f / dens;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.max(f64::MIN_POSITIVE) || hi - lo <= 1e-15 * hi {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Precision,
    Recall,
    F1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTTest {
    pub metric: Metric,
    pub mean_a: f64,
    pub mean_b: f64,
    pub test: TTest,
}

/// Repeatedly draws `sample_size` samples (without replacement) from each of
/// two groups, computes macro metrics per draw, and t-tests the two metric
/// samples.
#[allow(clippy::too_many_arguments)]
pub fn resampled_group_t_tests(
    predictions: &[usize],
    labels: &[usize],
    groups: &[usize],
    num_classes: usize,
    group_a: usize,
    group_b: usize,
    sample_size: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<MetricTTest>> {
    if predictions.len() != labels.len() || labels.len() != groups.len() {
        return Err(Error::Argument("predictions, labels and groups must align".into()));
    }
    if repeats < 2 {
        return Err(Error::Argument("need at least 2 repeats".into()));
    }
    let members = |g: usize| -> Vec<usize> { (0..groups.len()).filter(|&i| groups[i] == g).collect() };
    let (ma, mb) = (members(group_a), members(group_b));
    for (g, m) in [(group_a, &ma), (group_b, &mb)] {
        if m.len() < sample_size {
            return Err(Error::Argument(format!(
                "group {g} has {} samples, fewer than the resample size {sample_size}",
                m.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws: [Vec<[f64; 4]>; 2] = [Vec::new(), Vec::new()];
    for _ in 0..repeats {
        for (side, m) in [&ma, &mb].into_iter().enumerate() {
            let pick: Vec<usize> = sample(&mut rng, m.len(), sample_size).into_iter().map(|i| m[i]).collect();
            let p: Vec<usize> = pick.iter().map(|&i| predictions[i]).collect();
            let y: Vec<usize> = pick.iter().map(|&i| labels[i]).collect();
            let s = super::metrics::macro_scores(&p, &y, num_classes);
            draws[side].push([s.accuracy, s.precision, s.recall, s.f1]);
        }
    }
    [Metric::Accuracy, Metric::Precision, Metric::Recall, Metric::F1]
        .into_iter()
        .enumerate()
        .map(|(k, metric)| {
            let a: Vec<f64> = draws[0].iter().map(|d| d[k]).collect();
            let b: Vec<f64> = draws[1].iter().map(|d| d[k]).collect();
            Ok(MetricTTest {
                metric,
                mean_a: a.iter().sum::<f64>() / a.len() as f64,
                mean_b: b.iter().sum::<f64>() / b.len() as f64,
                test: two_sample_t_test(&a, &b)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identical_samples() {
        let a = [0.3, 0.9, 0.1, 0.5];
        let r = two_sample_t_test(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn reference_values() {
        // scipy.stats.ttest_ind(a, b, equal_var=False)
        let r = two_sample_t_test(&[1.0, 2.0, 3.5, 4.0], &[2.0, 2.5, 6.0, 7.5, 9.0]).unwrap();
        assert_relative_eq!(r.t, -1.8067699236993324, max_relative = 1e-12);
        assert_relative_eq!(r.p, 0.1227108342574719, max_relative = 1e-9);
    }

    #[test]
    fn extreme_separation() {
        let a = [0.0, 1e-6, -1e-6, 0.5e-6];
        let b = [1.0, 1.0 + 1e-6, 1.0 - 1e-6, 1.0 + 0.5e-6];
        let r = two_sample_t_test(&a, &b).unwrap();
        assert!(r.p < 1e-6, "{}", r.p);
        assert!(r.t < 0.0);
    }

    #[test]
    fn zero_variance_conventions() {
        let r = two_sample_t_test(&[1.0, 1.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((r.t, r.p, r.degenerate), (0.0, 1.0, false));
        let r = two_sample_t_test(&[1.0, 1.0], &[2.0, 2.0]).unwrap();
        assert_eq!(r.p, 0.0);
        assert!(r.degenerate);
        assert!(two_sample_t_test(&[1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn chi2_tabulated() {
        // scipy.stats.chi2.ppf
        for (p, k, want) in [
            (0.95, 1.0, 3.841458820694124),
            (0.5, 10.0, 9.34181776559197),
            (0.99, 10.0, 23.209251158954356),
            (0.05, 10.0, 3.9402991361190605),
            (0.001, 3.0, 0.024297585815692732),
            (0.9, 50.0, 63.167121005726315),
            (0.5, 1.0, 0.454936423119572),
            (1e-6, 1.0, 1.5707963267957187e-12),
        ] {
            let got = chi2_quantile(p, k).unwrap();
            assert_relative_eq!(got, want, max_relative = 1e-9);
        }
        // two degrees of freedom have a closed form
        for p in [1e-9, 0.01, 0.3, 0.77, 0.999999] {
            let want = -2.0 * f64::ln_1p(-p);
            assert_relative_eq!(chi2_quantile(p, 2.0).unwrap(), want, max_relative = 1e-9);
        }
    }

    #[test]
    fn chi2_rejects_bad_input() {
        assert!(chi2_quantile(1.5, 2.0).is_err());
        assert!(chi2_quantile(0.5, 0.0).is_err());
        assert_eq!(chi2_quantile(0.0, 3.0).unwrap(), 0.0);
    }
}
