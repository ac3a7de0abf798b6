//! The four debiasing loss terms and their gradients.
//!
//! Each function returns the loss value together with its gradient with
//! respect to its direct input (embeddings for the KMS term, head
//! probabilities for the three cross-entropy style terms). Chaining into
//! network parameters happens in [`crate::model`].

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gram, rows_of, KernelSpec};
use crate::shrinkage::{clamp_noise, mmd2_with_rho, shrinkage_factor};

pub const LOG_CLAMP: f64 = 1e-12;
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the KMS term.
    pub gamma: f64,
    /// Weight of the confusion term.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma: 0.17,
            beta: 0.14,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_kms: f64,
    pub l_conf: f64,
    pub l_z: f64,
    pub l_fer: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_kms: f64,
    pub l_conf: f64,
    pub l_z: f64,
    pub l_fer: f64,
    pub total: f64,
}

pub fn total_loss(parts: LossParts, weights: LossWeights) -> Result<LossBreakdown> {
    let breakdown = LossBreakdown {
        l_kms: parts.l_kms,
        l_conf: parts.l_conf,
        l_z: parts.l_z,
        l_fer: parts.l_fer,
        total: weights.gamma * parts.l_kms + weights.beta * parts.l_conf + parts.l_z + parts.l_fer,
    };
    for (term, v) in [
        ("l_kms", parts.l_kms),
        ("l_conf", parts.l_conf),
        ("l_z", parts.l_z),
        ("l_fer", parts.l_fer),
        ("total", breakdown.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term, breakdown });
        }
    }
    Ok(breakdown)
}

/// How the KMS gradient treats the shrinkage factors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RhoGrad {
    /// Shrinkage factors are batch constants.
    #[default]
    Frozen,
    /// Differentiate through the shrinkage factors as well.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTerm {
    pub groups: (usize, usize),
    pub mmd2: f64,
    pub rho: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct KmsLoss {
    pub value: f64,
    /// Same shape as the embeddings.
    pub grad: Array2<f64>,
    pub pairs: Vec<PairTerm>,
    /// Group pairs left out because one side had fewer than two samples.
    pub skipped: Vec<(usize, usize)>,
}

struct GroupStats {
    members: Vec<usize>,
    mean: f64,
    risk: f64,
    rho: f64,
}

/// Sum of shrunk MMD² over every unordered pair of sensitive groups.
pub fn kms_loss(
    embeddings: ArrayView2<f64>,
    groups: &[usize],
    num_groups: usize,
    spec: &KernelSpec,
    rho_grad: RhoGrad,
) -> Result<KmsLoss> {
    spec.validate()?;
    let n = embeddings.nrows();
    if groups.len() != n {
        return Err(Error::Argument(format!(
            "{} group labels for {n} embeddings",
            groups.len()
        )));
    }
    if let Some(&g) = groups.iter().find(|&&g| g >= num_groups) {
        return Err(Error::Argument(format!("group label {g} out of range 0..{num_groups}")));
    }
    let rows = rows_of(embeddings);
    let dim = embeddings.ncols();

    let mut members = vec![Vec::new(); num_groups];
    for (i, &g) in groups.iter().enumerate() {
        members[g].push(i);
    }
    let stats: Vec<Option<GroupStats>> = members
        .into_iter()
        .map(|idx| -> Result<Option<GroupStats>> {
            if idx.len() < 2 {
                return Ok(None);
            }
            let sub = embeddings.select(ndarray::Axis(0), &idx);
            let k = gram(spec, sub.view(), sub.view())?;
            let est = shrinkage_factor(&k)?;
            Ok(Some(GroupStats {
                members: idx,
                mean: est.norm_sq,
                risk: est.risk,
                rho: est.rho,
            }))
        })
        .collect::<Result<_>>()?;

    let mut value = 0.0;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    let mut grad = Array2::<f64>::zeros((n, dim));
    // d loss / d K_gg entries are uniform up to the diagonal, so each group
    // block carries (off-diagonal weight, diagonal weight).
    let mut block_weights = vec![(0.0f64, 0.0f64); num_groups];

    for a in 0..num_groups {
        for b in (a + 1)..num_groups {
            let (Some(sa), Some(sb)) = (&stats[a], &stats[b]) else {
                log::warn!("kms loss: skipping group pair ({a}, {b}) with fewer than 2 samples");
                skipped.push((a, b));
                continue;
            };
            let cross_mean = {
                let mut s = 0.0;
                for &i in &sa.members {
                    for &j in &sb.members {
                        s += spec.eval_unchecked(&rows[i], &rows[j]);
                    }
                }
                s / (sa.members.len() * sb.members.len()) as f64
            };
            let raw = mmd2_with_rho(sa.mean, sb.mean, cross_mean, sa.rho, sb.rho);
            let mmd2 = clamp_noise(raw)?;
            value += mmd2;
            pairs.push(PairTerm {
                groups: (a, b),
                mmd2,
                rho: (sa.rho, sb.rho),
            });

            let ca = 1.0 - sa.rho;
            let cb = 1.0 - sb.rho;
            for (g, s, c, other_c) in [(a, sa, ca, cb), (b, sb, cb, ca)] {
                let m = s.members.len() as f64;
                let base = c * c / (m * m);
                let (mut off_w, mut diag_w) = (base, base);
                if rho_grad == RhoGrad::Full {
                    let d_rho = -2.0 * c * s.mean + 2.0 * other_c * cross_mean;
                    let denom = (s.risk + s.mean).powi(2);
                    let d_mean = 1.0 / (m * m);
                    let d_risk_diag = 1.0 / (m * m);
                    let d_risk_off = -1.0 / (m * m * (m - 1.0));
                    diag_w += d_rho * (s.mean * d_risk_diag - s.risk * d_mean) / denom;
                    off_w += d_rho * (s.mean * d_risk_off - s.risk * d_mean) / denom;
                }
                block_weights[g].0 += off_w;
                block_weights[g].1 += diag_w;
            }

            let w_cross = -2.0 * ca * cb / (sa.members.len() * sb.members.len()) as f64;
            for &i in &sa.members {
                for &j in &sb.members {
                    let (gi, gj) = two_rows(&mut grad, i, j);
                    spec.accumulate_grad_first(&rows[i], &rows[j], w_cross, gi);
                    spec.accumulate_grad_first(&rows[j], &rows[i], w_cross, gj);
                }
            }
        }
    }

    for (g, s) in stats.iter().enumerate() {
        let Some(s) = s else { continue };
        let (off_w, diag_w) = block_weights[g];
        if off_w == 0.0 && diag_w == 0.0 {
            continue;
        }
        for &i in &s.members {
            for &j in &s.members {
                let w = if i == j { diag_w } else { off_w };
                // K[i][j] depends on both x_i (first slot) and x_j (second slot).
                let mut gi = vec![0.0; dim];
                spec.accumulate_grad_first(&rows[i], &rows[j], w, &mut gi);
                let mut gj = vec![0.0; dim];
                spec.accumulate_grad_first(&rows[j], &rows[i], w, &mut gj);
                for d in 0..dim {
                    grad[[i, d]] += gi[d];
                    grad[[j, d]] += gj[d];
                }
            }
        }
    }

    Ok(KmsLoss {
        value,
        grad,
        pairs,
        skipped,
    })
}

fn two_rows(grad: &mut Array2<f64>, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert_ne!(i, j);
    let dim = grad.ncols();
    let flat = grad.as_slice_mut().expect("standard layout");
    if i < j {
        let (lo, hi) = flat.split_at_mut(j * dim);
        (&mut lo[i * dim..(i + 1) * dim], &mut hi[..dim])
    } else {
        let (lo, hi) = flat.split_at_mut(i * dim);
        let gj = &mut lo[j * dim..(j + 1) * dim];
        (&mut hi[..dim], gj)
    }
}

fn check_rows(probs: ArrayView2<f64>) -> Result<()> {
    if probs.nrows() == 0 || probs.ncols() == 0 {
        return Err(Error::Argument("empty probability matrix".into()));
    }
    for (j, row) in probs.rows().into_iter().enumerate() {
        let s: f64 = row.sum();
        if !s.is_finite() || (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Argument(format!("probability row {j} sums to {s}")));
        }
    }
    Ok(())
}

fn clamped_log(p: f64) -> (f64, f64) {
    if p >= LOG_CLAMP {
        (p.ln(), 1.0 / p)
    } else {
        (LOG_CLAMP.ln(), 0.0)
    }
}

/// Pushes the attribute head toward uniform predictions; minimum `ln(zeta)`.
pub fn confusion_loss(attr_probs: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    check_rows(attr_probs)?;
    let (n, zeta) = attr_probs.dim();
    let scale = 1.0 / (zeta * n) as f64;
    let mut grad = Array2::zeros((n, zeta));
    let mut sum = 0.0;
    for ((j, i), &p) in attr_probs.indexed_iter() {
        let (lp, dlp) = clamped_log(p);
        sum += lp;
        grad[[j, i]] = -scale * dlp;
    }
    Ok((-scale * sum, grad))
}

fn labelled_ce(probs: ArrayView2<f64>, labels: &[usize], what: &str) -> Result<(f64, Array2<f64>)> {
    check_rows(probs)?;
    let (n, k) = probs.dim();
    if labels.len() != n {
        return Err(Error::Argument(format!("{} {what} labels for {n} rows", labels.len())));
    }
    let scale = 1.0 / (k * n) as f64;
    let mut grad = Array2::zeros((n, k));
    let mut sum = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Argument(format!("{what} label {y} at row {j} out of range 0..{k}")));
        }
        let (lp, dlp) = clamped_log(probs[[j, y]]);
        sum += lp;
        grad[[j, y]] = -scale * dlp;
    }
    Ok((-scale * sum, grad))
}

/// Sensitive-attribute cross-entropy, normalized by `1 / (zeta * N)`.
pub fn attribute_ce(attr_probs: ArrayView2<f64>, group_labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    labelled_ce(attr_probs, group_labels, "group")
}

/// Expression cross-entropy, normalized by `1 / (classes * N)`.
pub fn expression_ce(expr_probs: ArrayView2<f64>, class_labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    labelled_ce(expr_probs, class_labels, "class")
}
