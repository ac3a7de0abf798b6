//! Adversarial training loop.
//!
//! Every step routes each loss term to its own parameters:
//!
//! * expression cross-entropy updates the encoder and the expression head;
//! * `gamma * L_kms + beta * L_conf` updates the encoder only (attribute head
//!   held fixed);
//! * the attribute cross-entropy updates the attribute head only.
//!
//! All gradients come from a single forward pass. The encoder and expression
//! head are updated first, then the attribute head, each with its own Adam
//! state.

use std::io::Write;
use std::path::Path;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SampleBatch};
use crate::error::{Error, Result};
use crate::kernels::{median_heuristic_bandwidth, KernelSpec};
use crate::losses::{
    attribute_ce, confusion_loss, expression_ce, kms_loss, total_loss, LossBreakdown, LossParts, LossWeights,
    PairTerm, RhoGrad,
};
use crate::model::{adam_step, AdamConfig, AdamState, Architecture, Gradients, ModelParams, ParamGroup, RouteMask, Upstream};

/// Maximum number of samples used to pick the median-heuristic bandwidth.
pub const BANDWIDTH_SUBSET: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoKernel {
    #[serde(rename = "median-auto")]
    MedianAuto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelChoice {
    /// RBF with the median-heuristic bandwidth of the initial embeddings.
    Auto(AutoKernel),
    Fixed(KernelSpec),
}

impl Default for KernelChoice {
    fn default() -> Self {
        KernelChoice::Auto(AutoKernel::MedianAuto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub min_group_per_batch: usize,
    pub rho_grad: RhoGrad,
    pub kernel: KernelChoice,
    /// Train the attribute head on the attribute cross-entropy.
    pub adversary: bool,
    pub adam: AdamConfig,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            weights: LossWeights::default(),
            seed: 0,
            min_group_per_batch: 2,
            rho_grad: RhoGrad::Frozen,
            kernel: KernelChoice::default(),
            adversary: true,
            adam: AdamConfig::default(),
            hidden: vec![32, 16],
            embedding_dim: 8,
        }
    }
}

impl TrainConfig {
    /// Plain expression classifier: no KMS, no confusion, no adversary.
    pub fn baseline(mut self) -> Self {
        self.weights = LossWeights { gamma: 0.0, beta: 0.0 };
        self.adversary = false;
        self
    }

    pub fn validate(&self, num_groups: usize) -> Result<()> {
        self.weights.validate()?;
        if self.min_group_per_batch < 2 {
            return Err(Error::Config("min_group_per_batch must be >= 2".into()));
        }
        if self.batch_size < num_groups * self.min_group_per_batch {
            return Err(Error::Config(format!(
                "batch_size {} cannot hold {} samples for each of {num_groups} groups",
                self.batch_size, self.min_group_per_batch
            )));
        }
        if let KernelChoice::Fixed(spec) = &self.kernel {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize, num_classes: usize, num_groups: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            embedding_dim: self.embedding_dim,
            num_classes,
            num_groups,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StratifiedBatch {
    pub indices: Vec<usize>,
    /// Every group present in the dataset has at least the quota in this batch.
    pub stratified: bool,
}

/// Splits a dataset into batches that each hold at least `quota` samples of
/// every group present. Once some group can no longer meet the quota the
/// remaining samples are emitted as plain batches flagged unstratified.
pub fn stratified_batches(
    samples: &SampleBatch,
    num_groups: usize,
    batch_size: usize,
    quota: usize,
    seed: u64,
) -> Result<Vec<StratifiedBatch>> {
    stratified_batches_with(samples, num_groups, batch_size, quota, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub(crate) fn stratified_batches_with(
    samples: &SampleBatch,
    num_groups: usize,
    batch_size: usize,
    quota: usize,
    rng: &mut impl Rng,
) -> Result<Vec<StratifiedBatch>> {
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); num_groups];
    for (i, &g) in samples.group_labels.iter().enumerate() {
        if g >= num_groups {
            return Err(Error::Argument(format!("group label {g} out of range 0..{num_groups}")));
        }
        pools[g].push(i);
    }
    let present: Vec<usize> = (0..num_groups).filter(|&g| !pools[g].is_empty()).collect();
    let short: Vec<String> = present
        .iter()
        .filter(|&&g| pools[g].len() < quota)
        .map(|&g| format!("group {g} has {} samples", pools[g].len()))
        .collect();
    if !short.is_empty() {
        return Err(Error::Config(format!(
            "cannot stratify with {quota} samples per group per batch: {}",
            short.join(", ")
        )));
    }
    if batch_size < present.len() * quota {
        return Err(Error::Config(format!(
            "batch_size {batch_size} below {} groups x quota {quota}",
            present.len()
        )));
    }
    for &g in &present {
        pools[g].shuffle(rng);
    }

    let mut batches = Vec::new();
    while present.iter().all(|&g| pools[g].len() >= quota) {
        let mut batch = Vec::with_capacity(batch_size);
        for &g in &present {
            let at = pools[g].len() - quota;
            batch.extend(pools[g].drain(at..));
        }
        // fill the rest proportionally to what is left
        while batch.len() < batch_size {
            let left: usize = present.iter().map(|&g| pools[g].len()).sum();
            if left == 0 {
                break;
            }
            let mut pick = rng.random_range(0..left);
            let g = *present
                .iter()
                .find(|&&g| {
                    if pick < pools[g].len() {
                        true
                    } else {
                        pick -= pools[g].len();
                        false
                    }
                })
                .expect("pick within remaining");
            batch.push(pools[g].pop().expect("non-empty pool"));
        }
        batch.shuffle(rng);
        batches.push(StratifiedBatch {
            indices: batch,
            stratified: true,
        });
    }
    let mut rest = Vec::new();
    for &g in &present {
        rest.append(&mut pools[g]);
    }
    rest.shuffle(rng);
    for chunk in rest.chunks(batch_size) {
        let mut counts = vec![0usize; num_groups];
        for &i in chunk {
            counts[samples.group_labels[i]] += 1;
        }
        let stratified = present.iter().all(|&g| counts[g] >= quota);
        batches.push(StratifiedBatch {
            indices: chunk.to_vec(),
            stratified,
        });
    }
    Ok(batches)
}

pub struct OptimizerStates {
    pub primary: AdamState,
    pub adversary: AdamState,
}

impl OptimizerStates {
    pub fn new(config: AdamConfig, params: &ModelParams) -> Self {
        OptimizerStates {
            primary: AdamState::for_group(config, params, ParamGroup::Primary),
            adversary: AdamState::for_group(config, params, ParamGroup::Adversary),
        }
    }
}

/// Gradients each routed term contributed in one step.
#[derive(Debug, Clone)]
pub struct RoutedGradients {
    /// Expression cross-entropy, routed to encoder + expression head.
    pub fer: Gradients,
    /// `gamma * L_kms + beta * L_conf`, routed to the encoder.
    pub encoder_terms: Gradients,
    /// Attribute cross-entropy, routed to the attribute head.
    pub adversary: Gradients,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub breakdown: LossBreakdown,
    pub pairs: Vec<PairTerm>,
    pub kms_skipped: bool,
    pub routed: RoutedGradients,
}

pub fn train_step(
    params: &mut ModelParams,
    batch: &SampleBatch,
    stratified: bool,
    states: &mut OptimizerStates,
    config: &TrainConfig,
    kernel: &KernelSpec,
) -> Result<StepReport> {
    let n = batch.len();
    let fwd = params.forward(batch.features.view())?;
    let cache = &fwd.cache;

    let (l_fer, g_fer) = expression_ce(fwd.expr_probs.view(), &batch.class_labels)?;
    let fer = params.backward(
        cache,
        &Upstream {
            expr_probs: Some(g_fer),
            ..Default::default()
        },
        RouteMask::ENCODER_AND_EXPR,
    )?;

    let LossWeights { gamma, beta } = config.weights;
    let (l_conf, g_conf) = confusion_loss(fwd.attr_probs.view())?;
    let kms = if stratified {
        Some(kms_loss(
            fwd.embeddings.view(),
            &batch.group_labels,
            params.num_groups(),
            kernel,
            config.rho_grad,
        )?)
    } else {
        None
    };
    let l_kms = kms.as_ref().map_or(0.0, |k| k.value);
    let mut up = Upstream::default();
    if beta > 0.0 {
        up.attr_probs = Some(g_conf * beta);
    }
    if gamma > 0.0 {
        if let Some(k) = &kms {
            up.embeddings = Some(&k.grad * gamma);
        }
    }
    let encoder_terms = if up.attr_probs.is_some() || up.embeddings.is_some() {
        params.backward(cache, &up, RouteMask::ENCODER)?
    } else {
        params.zero_gradients(n)
    };

    let (l_z, g_z) = attribute_ce(fwd.attr_probs.view(), &batch.group_labels)?;
    let adversary = if config.adversary {
        params.backward(
            cache,
            &Upstream {
                attr_probs: Some(g_z),
                ..Default::default()
            },
            RouteMask::ATTR_HEAD,
        )?
    } else {
        params.zero_gradients(n)
    };

    let breakdown = total_loss(
        LossParts {
            l_kms,
            l_conf,
            l_z,
            l_fer,
        },
        config.weights,
    )?;

    let mut primary = fer.clone();
    primary.add_assign(&encoder_terms);
    adam_step(params, &primary, ParamGroup::Primary, &mut states.primary)?;
    if config.adversary {
        adam_step(params, &adversary, ParamGroup::Adversary, &mut states.adversary)?;
    }

    let (pairs, kms_skipped) = match kms {
        Some(k) => (k.pairs, false),
        None => (Vec::new(), true),
    };
    Ok(StepReport {
        breakdown,
        pairs,
        kms_skipped,
        routed: RoutedGradients {
            fer,
            encoder_terms,
            adversary,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMmd {
    pub groups: (usize, usize),
    pub mmd2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    /// Batch-averaged loss terms.
    pub losses: LossBreakdown,
    /// Batch-averaged shrunk MMD² per group pair, over stratified batches.
    pub pair_mmd2: Vec<PairMmd>,
    /// Sum of `pair_mmd2`.
    pub group_mmd2: f64,
    pub kms_skipped_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs_completed: usize,
    pub kernel: KernelSpec,
    pub train_accuracy: f64,
    pub train_group_accuracy: Vec<f64>,
    pub encoder_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    pub summary: RunSummary,
}

impl RunLog {
    /// One JSON object per epoch, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e).expect("serializable"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, jsonl: &Path, summary: &Path) -> Result<()> {
        let mut f = std::fs::File::create(jsonl).map_err(|e| Error::io(jsonl, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(jsonl, e))?;
        let text = serde_json::to_string_pretty(&self.summary).expect("serializable");
        std::fs::write(summary, text + "\n").map_err(|e| Error::io(summary, e))
    }
}

fn resolve_kernel(params: &ModelParams, samples: &SampleBatch, config: &TrainConfig) -> Result<KernelSpec> {
    match config.kernel {
        KernelChoice::Fixed(spec) => Ok(spec),
        KernelChoice::Auto(AutoKernel::MedianAuto) => {
            let mut idx: Vec<usize> = (0..samples.len()).collect();
            if idx.len() > BANDWIDTH_SUBSET {
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0xB4D_u64));
                idx.truncate(BANDWIDTH_SUBSET);
                idx.sort_unstable();
            }
            let emb = params.encode(samples.features.select(Axis(0), &idx).view())?;
            Ok(KernelSpec::rbf(median_heuristic_bandwidth(emb.view())?))
        }
    }
}

/// Fraction of correct argmax predictions, overall and per group.
pub fn accuracy_by_group(params: &ModelParams, samples: &SampleBatch, num_groups: usize) -> Result<(f64, Vec<f64>)> {
    let fwd = params.forward(samples.features.view())?;
    let mut hits = vec![0usize; num_groups];
    let mut totals = vec![0usize; num_groups];
    for (i, row) in fwd.expr_probs.rows().into_iter().enumerate() {
        let pred = argmax(row.iter().copied());
        let g = samples.group_labels[i];
        totals[g] += 1;
        if pred == samples.class_labels[i] {
            hits[g] += 1;
        }
    }
    let overall = hits.iter().sum::<usize>() as f64 / samples.len() as f64;
    let per = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect();
    Ok((overall, per))
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelParams, RunLog)> {
    let schema = &dataset.schema;
    schema.validate()?;
    dataset.samples.validate(schema)?;
    config.validate(schema.num_groups)?;
    let arch = config.architecture(schema.feature_dim, schema.num_classes, schema.num_groups);
    let mut params = ModelParams::init(&arch, config.seed)?;
    let kernel = resolve_kernel(&params, &dataset.samples, config)?;
    let mut states = OptimizerStates::new(config.adam, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));

    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batches = stratified_batches_with(
            &dataset.samples,
            schema.num_groups,
            config.batch_size,
            config.min_group_per_batch,
            &mut rng,
        )?;
        let mut sum = LossBreakdown::default();
        let mut pair_sums: Vec<PairMmd> = Vec::new();
        let mut pair_counts: Vec<usize> = Vec::new();
        let mut skipped = 0;
        for b in &batches {
            let batch = dataset.samples.select(&b.indices);
            let report = train_step(&mut params, &batch, b.stratified, &mut states, config, &kernel)?;
            let l = report.breakdown;
            sum.l_kms += l.l_kms;
            sum.l_conf += l.l_conf;
            sum.l_z += l.l_z;
            sum.l_fer += l.l_fer;
            sum.total += l.total;
            if report.kms_skipped {
                skipped += 1;
            }
            for p in report.pairs {
                match pair_sums.iter().position(|q| q.groups == p.groups) {
                    Some(i) => {
                        pair_sums[i].mmd2 += p.mmd2;
                        pair_counts[i] += 1;
                    }
                    None => {
                        pair_sums.push(PairMmd {
                            groups: p.groups,
                            mmd2: p.mmd2,
                        });
                        pair_counts.push(1);
                    }
                }
            }
        }
        let nb = batches.len().max(1) as f64;
        let losses = LossBreakdown {
            l_kms: sum.l_kms / nb,
            l_conf: sum.l_conf / nb,
            l_z: sum.l_z / nb,
            l_fer: sum.l_fer / nb,
            total: sum.total / nb,
        };
        for (p, &c) in pair_sums.iter_mut().zip(&pair_counts) {
            p.mmd2 /= c as f64;
        }
        pair_sums.sort_by_key(|p| p.groups);
        let group_mmd2 = pair_sums.iter().map(|p| p.mmd2).sum();
        log::info!(
            "epoch {epoch}: total {:.5} fer {:.5} kms {:.5} conf {:.5} z {:.5}",
            losses.total,
            losses.l_fer,
            losses.l_kms,
            losses.l_conf,
            losses.l_z
        );
        epochs.push(EpochRecord {
            epoch,
            batches: batches.len(),
            losses,
            pair_mmd2: pair_sums,
            group_mmd2,
            kms_skipped_batches: skipped,
        });
    }

    let (train_accuracy, train_group_accuracy) = accuracy_by_group(&params, &dataset.samples, schema.num_groups)?;
    let summary = RunSummary {
        epochs_completed: epochs.len(),
        kernel,
        train_accuracy,
        train_group_accuracy,
        encoder_checksum: params.encoder_checksum(),
    };
    Ok((params, RunLog { epochs, summary }))
}
