//! Synthetic datasets with a controllable sensitive-group signal.
//!
//! A sample of class `c` in group `g` has features
//!
//! ```text
//! class_means[c] + class_group_offsets[c][g] + g * group_shift * group_direction + noise_scale * N(0, I)
//! ```
//!
//! With `group_shift = 0` and no class/group offsets the features carry no
//! information about the group beyond its correlation with the class.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetSchema, SampleBatch};
use crate::error::{Error, Result};

const PRIOR_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub feature_dim: usize,
    /// One mean vector per class.
    pub class_means: Vec<Vec<f64>>,
    /// Optional per-(class, group) mean offsets, indexed `[class][group][dim]`.
    #[serde(default)]
    pub class_group_offsets: Option<Vec<Vec<Vec<f64>>>>,
    pub group_direction: Vec<f64>,
    pub group_shift: f64,
    pub noise_scale: f64,
    pub group_priors: Vec<f64>,
    /// `[group][class]`, each row sums to one.
    pub class_given_group: Vec<Vec<f64>>,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    #[serde(default)]
    pub group_names: Option<Vec<String>>,
}

impl SynthConfig {
    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn num_groups(&self) -> usize {
        self.group_priors.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (k, z, d) = (self.num_classes(), self.num_groups(), self.feature_dim);
        let bad = |m: String| Err(Error::Config(m));
        if k < 2 || z < 2 {
            return bad("need at least 2 classes and 2 groups".into());
        }
        if d == 0 {
            return bad("feature_dim must be positive".into());
        }
        if self.class_means.iter().any(|m| m.len() != d) || self.group_direction.len() != d {
            return bad(format!("mean vectors and group_direction must have length {d}"));
        }
        if let Some(off) = &self.class_group_offsets {
            if off.len() != k || off.iter().any(|per| per.len() != z || per.iter().any(|v| v.len() != d)) {
                return bad(format!("class_group_offsets must be shaped [{k}][{z}][{d}]"));
            }
        }
        if !(self.group_shift.is_finite() && self.group_shift >= 0.0) {
            return bad(format!("group_shift must be >= 0, got {}", self.group_shift));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return bad(format!("noise_scale must be >= 0, got {}", self.noise_scale));
        }
        check_distribution("group_priors", &self.group_priors)?;
        if self.class_given_group.len() != z {
            return bad(format!("class_given_group needs {z} rows"));
        }
        for (g, row) in self.class_given_group.iter().enumerate() {
            if row.len() != k {
                return bad(format!("class_given_group[{g}] needs {k} entries"));
            }
            check_distribution(&format!("class_given_group[{g}]"), row)?;
        }
        for (what, names, want) in [("class_names", &self.class_names, k), ("group_names", &self.group_names, z)] {
            if names.as_ref().is_some_and(|n| n.len() != want) {
                return bad(format!("{what} needs {want} entries"));
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> DatasetSchema {
        let mut s = DatasetSchema::with_default_names(self.feature_dim, self.num_classes(), self.num_groups());
        if let Some(n) = &self.class_names {
            s.class_names = n.clone();
        }
        if let Some(n) = &self.group_names {
            s.group_names = n.clone();
        }
        s
    }

    /// Joint probability table `[class][group]`.
    pub fn joint(&self) -> Vec<Vec<f64>> {
        (0..self.num_classes())
            .map(|c| {
                (0..self.num_groups())
                    .map(|g| self.group_priors[g] * self.class_given_group[g][c])
                    .collect()
            })
            .collect()
    }

    /// Two classes (smiling / not smiling) and two groups (attractive / less
    /// attractive) with the joint frequencies 0.28 / 0.23 / 0.20 / 0.29.
    /// Classes differ by +-0.75 on the first coordinate; the second group is
    /// shifted by `group_shift` on each of the third and fourth coordinates.
    pub fn celeba_skew(n_samples: usize, group_shift: f64, seed: u64) -> Self {
        let d = 8;
        let mut smiling = vec![0.0; d];
        let mut neutral = vec![0.0; d];
        smiling[0] = 0.75;
        neutral[0] = -0.75;
        let mut direction = vec![0.0; d];
        direction[2] = 1.0;
        direction[3] = 1.0;
        SynthConfig {
            n_samples,
            seed,
            feature_dim: d,
            class_means: vec![smiling, neutral],
            class_group_offsets: None,
            group_direction: direction,
            group_shift,
            noise_scale: 1.0,
            group_priors: vec![0.51, 0.49],
            class_given_group: vec![vec![0.28 / 0.51, 0.23 / 0.51], vec![0.20 / 0.49, 0.29 / 0.49]],
            class_names: Some(vec!["smiling".into(), "not_smiling".into()]),
            group_names: Some(vec!["attractive".into(), "less_attractive".into()]),
        }
    }
}

fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PRIOR_TOLERANCE {
        return Err(Error::Config(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

fn draw_index(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // rounding at the upper end: last index with positive mass
    p.iter().rposition(|&w| w > 0.0).unwrap_or(p.len() - 1)
}

/// Draws `n_samples` samples: class from its marginal, then group given
/// class, then features.
pub fn gen_synthetic(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let (k, z, d) = (config.num_classes(), config.num_groups(), config.feature_dim);
    let joint = config.joint();
    let class_marginal: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let group_given_class: Vec<Vec<f64>> = joint
        .iter()
        .zip(&class_marginal)
        .map(|(r, &m)| r.iter().map(|&v| if m > 0.0 { v / m } else { 0.0 }).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_samples;
    let mut features = Array2::zeros((n, d));
    let mut classes = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for i in 0..n {
        let c = draw_index(&class_marginal, &mut rng);
        let g = draw_index(&group_given_class[c], &mut rng);
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let offset = config
                .class_group_offsets
                .as_ref()
                .map_or(0.0, |o| o[c][g][j]);
            features[[i, j]] = config.class_means[c][j]
                + offset
                + g as f64 * config.group_shift * config.group_direction[j]
                + config.noise_scale * noise;
        }
        classes.push(c);
        groups.push(g);
    }
    debug_assert!(classes.iter().all(|&c| c < k) && groups.iter().all(|&g| g < z));
    Ok(Dataset {
        schema: config.schema(),
        samples: SampleBatch {
            features,
            class_labels: classes,
            group_labels: groups,
        },
    })
}
