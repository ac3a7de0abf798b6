//! Leakage probe: how well a fresh linear head recovers the sensitive group
//! from frozen embeddings.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::metrics::multiclass_auc;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::attribute_ce;
use crate::model::{softmax_backward, softmax_rows, Activation, AdamConfig, AdamState, DenseLayer, LayerGrad, ModelParams};
use crate::training::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Full-batch epochs.
    pub epochs: usize,
    pub adam: AdamConfig,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 200,
            adam: AdamConfig::default(),
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Held-out group accuracy.
    pub accuracy: f64,
    pub auc: Option<f64>,
    /// `1 / num_groups`.
    pub chance: f64,
    /// Held-out share of the most common group.
    pub majority_rate: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub final_train_loss: f64,
    pub checksum_before: String,
    pub checksum_after: String,
}

/// Trains a new dense layer plus softmax on `encoder`'s standardized
/// embeddings to predict the group label, then scores it on a held-out split. The encoder is only
/// read; its checksum is recorded before and after.
pub fn leakage_probe(encoder: &ModelParams, dataset: &Dataset, config: &ProbeConfig) -> Result<ProbeReport> {
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction must be in (0, 1), got {}", config.train_fraction)));
    }
    let zeta = dataset.schema.num_groups;
    if encoder.num_groups() != zeta {
        return Err(Error::Argument(format!(
            "encoder was built for {} groups, dataset has {zeta}",
            encoder.num_groups()
        )));
    }
    let checksum_before = encoder.encoder_checksum();
    let (train, test) = dataset.split(config.train_fraction, config.seed);
    if train.samples.is_empty() || test.samples.is_empty() {
        return Err(Error::Argument("probe split left an empty side".into()));
    }
    let mut z_train = encoder.encode(train.samples.features.view())?;
    let mut z_test = encoder.encode(test.samples.features.view())?;
    standardize(&mut z_train, &mut z_test);

    // zero start: with a small learning rate a random start can dominate 200 steps
    let dim = encoder.embedding_dim();
    let mut head = DenseLayer {
        weights: Array2::zeros((dim, zeta)),
        bias: ndarray::Array1::zeros(zeta),
        activation: Activation::Linear,
    };
    let mut adam = AdamState::new(config.adam, &[&head]);
    let labels = &train.samples.group_labels;
    let mut final_train_loss = f64::NAN;
    for _ in 0..config.epochs {
        let probs = softmax_rows(&logits(&head, &z_train));
        let (loss, dprobs) = attribute_ce(probs.view(), labels)?;
        final_train_loss = loss;
        let dlogits = softmax_backward(&probs, &dprobs);
        let grad = LayerGrad {
            weights: z_train.t().dot(&dlogits),
            bias: dlogits.sum_axis(Axis(0)),
        };
        adam.apply(&mut [("probe".to_string(), &mut head)], &[&grad])?;
    }

    let probs = softmax_rows(&logits(&head, &z_test));
    let truth = &test.samples.group_labels;
    let correct = probs
        .rows()
        .into_iter()
        .zip(truth)
        .filter(|(r, &g)| argmax(r.iter().copied()) == g)
        .count();
    let mut counts = vec![0usize; zeta];
    for &g in truth {
        counts[g] += 1;
    }
    let n_test = truth.len() as f64;
    Ok(ProbeReport {
        accuracy: correct as f64 / n_test,
        auc: multiclass_auc(probs.view(), truth)?,
        chance: 1.0 / zeta as f64,
        majority_rate: counts.iter().copied().max().unwrap_or(0) as f64 / n_test,
        train_samples: train.samples.len(),
        test_samples: test.samples.len(),
        final_train_loss,
        checksum_before,
        checksum_after: encoder.encoder_checksum(),
    })
}

/// Scales every embedding column to zero mean and unit variance using the
/// training side's statistics. Constant columns are only centred.
fn standardize(train: &mut Array2<f64>, test: &mut Array2<f64>) {
    let n = train.nrows() as f64;
    for j in 0..train.ncols() {
        let mean = train.column(j).sum() / n;
        let var = train.column(j).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        for z in [&mut *train, &mut *test] {
            z.column_mut(j).mapv_inplace(|v| (v - mean) / scale);
        }
    }
}

fn logits(head: &DenseLayer, z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.dot(&head.weights);
    out += &head.bias;
    out
}
