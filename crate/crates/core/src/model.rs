//! Feed-forward encoder with an expression head and an attribute head.
//!
//! Gradients are accumulated by hand; [`RouteMask`] selects which parameter
//! groups receive them so the trainer can route each loss term to its own
//! subset of the network.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `inputs x outputs`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = Array2::from_shape_fn((inputs, outputs), |_| rng.random_range(-a..=a));
        DenseLayer {
            weights,
            bias: Array1::zeros(outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }

    fn pre_activation(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let mut z = input.dot(&self.weights);
        z += &self.bias;
        z
    }

    fn zero_grad(&self) -> LayerGrad {
        LayerGrad {
            weights: Array2::zeros(self.weights.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGrad {
    fn add_assign(&mut self, other: &LayerGrad) {
        self.weights += &other.weights;
        self.bias += &other.bias;
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|&v| v == 0.0)
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        if self.weights.iter().any(|v| !v.is_finite()) {
            Some("weights")
        } else if self.bias.iter().any(|v| !v.is_finite()) {
            Some("bias")
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub num_groups: usize,
}

impl Architecture {
    /// input -> 32 ReLU -> 16 ReLU -> 8 linear
    pub fn default_for(input_dim: usize, num_classes: usize, num_groups: usize) -> Self {
        Architecture {
            input_dim,
            hidden: vec![32, 16],
            embedding_dim: 8,
            num_classes,
            num_groups,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embedding_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.num_classes < 2 || self.num_groups < 2 {
            return Err(Error::Config("need at least 2 classes and 2 groups".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<DenseLayer>,
    pub expr_head: DenseLayer,
    pub attr_head: DenseLayer,
    /// Bumped on every update so stale forward caches can be detected.
    generation: u64,
}

/// Which parameter groups receive gradient in a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteMask {
    pub encoder: bool,
    pub expr_head: bool,
    pub attr_head: bool,
}

impl RouteMask {
    pub const ALL: RouteMask = RouteMask {
        encoder: true,
        expr_head: true,
        attr_head: true,
    };
    pub const ENCODER: RouteMask = RouteMask {
        encoder: true,
        expr_head: false,
        attr_head: false,
    };
    pub const ENCODER_AND_EXPR: RouteMask = RouteMask {
        encoder: true,
        expr_head: true,
        attr_head: false,
    };
    pub const ATTR_HEAD: RouteMask = RouteMask {
        encoder: false,
        expr_head: false,
        attr_head: true,
    };
}

/// Optimizer partition: the adversary keeps its own Adam statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Encoder and expression head.
    Primary,
    /// Attribute head.
    Adversary,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// Input to every encoder layer, followed by the embeddings.
    activations: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    expr_probs: Array2<f64>,
    attr_probs: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub embeddings: Array2<f64>,
    pub expr_probs: Array2<f64>,
    pub attr_probs: Array2<f64>,
    pub cache: ForwardCache,
}

/// Loss gradients with respect to the network outputs.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    pub embeddings: Option<Array2<f64>>,
    pub expr_probs: Option<Array2<f64>>,
    pub attr_probs: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<LayerGrad>,
    pub expr_head: LayerGrad,
    pub attr_head: LayerGrad,
    /// Total gradient arriving at the embeddings.
    pub embeddings: Array2<f64>,
    /// Gradient with respect to the input features (only when the encoder is routed).
    pub inputs: Option<Array2<f64>>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.encoder.iter_mut().zip(&other.encoder) {
            a.add_assign(b);
        }
        self.expr_head.add_assign(&other.expr_head);
        self.attr_head.add_assign(&other.attr_head);
        self.embeddings += &other.embeddings;
        match (&mut self.inputs, &other.inputs) {
            (Some(a), Some(b)) => *a += b,
            (a @ None, Some(b)) => *a = Some(b.clone()),
            _ => {}
        }
    }

    pub fn group(&self, group: ParamGroup) -> Vec<&LayerGrad> {
        match group {
            ParamGroup::Primary => self.encoder.iter().chain(std::iter::once(&self.expr_head)).collect(),
            ParamGroup::Adversary => vec![&self.attr_head],
        }
    }
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Backprop through a row-wise softmax: `p * (g - <g, p>)`.
pub(crate) fn softmax_backward(probs: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((mut o, p), g) in out.rows_mut().into_iter().zip(probs.rows()).zip(grad.rows()) {
        let dot = p.dot(&g);
        for ((o, &p), &g) in o.iter_mut().zip(p).zip(g) {
            *o = p * (g - dot);
        }
    }
    out
}

impl ModelParams {
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![arch.input_dim];
        widths.extend(&arch.hidden);
        widths.push(arch.embedding_dim);
        let last = widths.len() - 2;
        let encoder = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::Linear } else { Activation::Relu };
                DenseLayer::init(w[0], w[1], act, &mut rng)
            })
            .collect();
        let expr_head = DenseLayer::init(arch.embedding_dim, arch.num_classes, Activation::Linear, &mut rng);
        let attr_head = DenseLayer::init(arch.embedding_dim, arch.num_groups, Activation::Linear, &mut rng);
        Ok(ModelParams {
            encoder,
            expr_head,
            attr_head,
            generation: 0,
        })
    }

    /// Assembles parameters from explicit layers, checking the shape chain.
    pub fn from_layers(encoder: Vec<DenseLayer>, expr_head: DenseLayer, attr_head: DenseLayer) -> Result<Self> {
        if encoder.is_empty() {
            return Err(Error::Argument("encoder needs at least one layer".into()));
        }
        for w in encoder.windows(2) {
            if w[0].outputs() != w[1].inputs() {
                return Err(Error::Argument(format!(
                    "encoder shape chain broken: {} outputs feed {} inputs",
                    w[0].outputs(),
                    w[1].inputs()
                )));
            }
        }
        let emb = encoder.last().map(DenseLayer::outputs).unwrap_or_default();
        for (name, head) in [("expression", &expr_head), ("attribute", &attr_head)] {
            if head.inputs() != emb {
                return Err(Error::Argument(format!(
                    "{name} head expects {} inputs, embedding has {emb}",
                    head.inputs()
                )));
            }
        }
        for l in encoder.iter().chain([&expr_head, &attr_head]) {
            if l.bias.len() != l.outputs() {
                return Err(Error::Argument("bias length does not match layer outputs".into()));
            }
        }
        Ok(ModelParams {
            encoder,
            expr_head,
            attr_head,
            generation: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].inputs()
    }

    pub fn embedding_dim(&self) -> usize {
        self.expr_head.inputs()
    }

    pub fn num_classes(&self) -> usize {
        self.expr_head.outputs()
    }

    pub fn num_groups(&self) -> usize {
        self.attr_head.outputs()
    }

    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.encoder.iter().chain([&self.expr_head, &self.attr_head])
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(DenseLayer::is_finite)
    }

    fn check_input(&self, features: ArrayView2<f64>) -> Result<()> {
        if features.ncols() != self.input_dim() {
            return Err(Error::Argument(format!(
                "feature dim {} does not match model input {}",
                features.ncols(),
                self.input_dim()
            )));
        }
        if features.nrows() == 0 {
            return Err(Error::Argument("empty feature batch".into()));
        }
        Ok(())
    }

    /// Encoder output only.
    pub fn encode(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(features)?;
        let mut h = features.to_owned();
        for layer in &self.encoder {
            let mut z = layer.pre_activation(h.view());
            if layer.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward(&self, features: ArrayView2<f64>) -> Result<Forward> {
        self.check_input(features)?;
        let mut activations = vec![features.to_owned()];
        let mut pre_activations = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let z = layer.pre_activation(activations.last().expect("input").view());
            let h = match layer.activation {
                Activation::Relu => z.mapv(|v| v.max(0.0)),
                Activation::Linear => z.clone(),
            };
            pre_activations.push(z);
            activations.push(h);
        }
        let embeddings = activations.last().expect("embeddings").clone();
        let expr_probs = softmax_rows(&self.expr_head.pre_activation(embeddings.view()));
        let attr_probs = softmax_rows(&self.attr_head.pre_activation(embeddings.view()));
        Ok(Forward {
            embeddings,
            expr_probs: expr_probs.clone(),
            attr_probs: attr_probs.clone(),
            cache: ForwardCache {
                generation: self.generation,
                activations,
                pre_activations,
                expr_probs,
                attr_probs,
            },
        })
    }

    pub fn zero_gradients(&self, batch: usize) -> Gradients {
        Gradients {
            encoder: self.encoder.iter().map(DenseLayer::zero_grad).collect(),
            expr_head: self.expr_head.zero_grad(),
            attr_head: self.attr_head.zero_grad(),
            embeddings: Array2::zeros((batch, self.embedding_dim())),
            inputs: None,
        }
    }

    /// Reverse-mode pass. Parameters outside `mask` get exactly zero gradient;
    /// a frozen head still forwards gradient into the encoder when the
    /// encoder is routed.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Upstream, mask: RouteMask) -> Result<Gradients> {
        if cache.generation != self.generation {
            return Err(Error::Usage(format!(
                "forward cache from generation {} used with parameters at generation {}",
                cache.generation, self.generation
            )));
        }
        let n = cache.activations[0].nrows();
        let embeddings = cache.activations.last().expect("embeddings");
        let mut grads = self.zero_gradients(n);
        for (name, g, k) in [
            ("embeddings", &upstream.embeddings, self.embedding_dim()),
            ("expression", &upstream.expr_probs, self.num_classes()),
            ("attribute", &upstream.attr_probs, self.num_groups()),
        ] {
            if let Some(g) = g {
                if g.dim() != (n, k) {
                    return Err(Error::Argument(format!(
                        "{name} upstream gradient has shape {:?}, expected ({n}, {k})",
                        g.dim()
                    )));
                }
            }
        }

        let mut d_emb = upstream.embeddings.clone().unwrap_or_else(|| Array2::zeros((n, self.embedding_dim())));
        for (head, probs, up, routed, out) in [
            (&self.expr_head, &cache.expr_probs, &upstream.expr_probs, mask.expr_head, &mut grads.expr_head),
            (&self.attr_head, &cache.attr_probs, &upstream.attr_probs, mask.attr_head, &mut grads.attr_head),
        ] {
            let Some(up) = up else { continue };
            let d_logits = softmax_backward(probs, up);
            if routed {
                out.weights = embeddings.t().dot(&d_logits);
                out.bias = d_logits.sum_axis(Axis(0));
            }
            if mask.encoder {
                d_emb += &d_logits.dot(&head.weights.t());
            }
        }
        grads.embeddings = d_emb.clone();

        if mask.encoder {
            let mut d_h = d_emb;
            for (l, layer) in self.encoder.iter().enumerate().rev() {
                let mut d_z = d_h;
                if layer.activation == Activation::Relu {
                    d_z.zip_mut_with(&cache.pre_activations[l], |d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
                }
                let input = &cache.activations[l];
                grads.encoder[l].weights = input.t().dot(&d_z);
                grads.encoder[l].bias = d_z.sum_axis(Axis(0));
                d_h = d_z.dot(&layer.weights.t());
            }
            grads.inputs = Some(d_h);
        }
        Ok(grads)
    }

    fn group_layers_mut(&mut self, group: ParamGroup) -> Vec<(String, &mut DenseLayer)> {
        match group {
            ParamGroup::Primary => {
                let mut v: Vec<(String, &mut DenseLayer)> = self
                    .encoder
                    .iter_mut()
                    .enumerate()
                    .map(|(i, l)| (format!("encoder[{i}]"), l))
                    .collect();
                v.push(("expr_head".to_string(), &mut self.expr_head));
                v
            }
            ParamGroup::Adversary => vec![("attr_head".to_string(), &mut self.attr_head)],
        }
    }

    pub fn group_layers(&self, group: ParamGroup) -> Vec<&DenseLayer> {
        match group {
            ParamGroup::Primary => self.encoder.iter().chain(std::iter::once(&self.expr_head)).collect(),
            ParamGroup::Adversary => vec![&self.attr_head],
        }
    }

    /// SHA-256 over the encoder's little-endian parameter bytes.
    pub fn encoder_checksum(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.encoder {
            for v in l.weights.iter().chain(l.bias.iter()) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<LayerGrad>,
    second: Vec<LayerGrad>,
}

impl AdamState {
    pub fn new(config: AdamConfig, layers: &[&DenseLayer]) -> Self {
        let zeros: Vec<LayerGrad> = layers.iter().map(|l| l.zero_grad()).collect();
        AdamState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn for_group(config: AdamConfig, params: &ModelParams, group: ParamGroup) -> Self {
        Self::new(config, &params.group_layers(group))
    }

    /// One bias-corrected Adam update over named layers. Nothing is modified
    /// if any gradient is non-finite.
    pub fn apply(&mut self, layers: &mut [(String, &mut DenseLayer)], grads: &[&LayerGrad]) -> Result<()> {
        if layers.len() != grads.len() || layers.len() != self.first.len() {
            return Err(Error::Argument(format!(
                "adam: {} layers, {} gradients, {} moment buffers",
                layers.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for ((name, layer), g) in layers.iter().zip(grads) {
            if g.weights.raw_dim() != layer.weights.raw_dim() || g.bias.len() != layer.bias.len() {
                return Err(Error::Argument(format!("adam: gradient shape mismatch for {name}")));
            }
            if let Some(part) = g.first_non_finite() {
                return Err(Error::Numerical(format!("non-finite gradient in {name}.{part}")));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((_, layer), g), (m, v)) in layers
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
            };
            ndarray::Zip::from(&mut layer.weights)
                .and(&g.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
        for (name, layer) in layers.iter() {
            if !layer.is_finite() {
                return Err(Error::Numerical(format!("parameters of {name} became non-finite")));
            }
        }
        Ok(())
    }
}

/// Applies one Adam update to a parameter group of the model.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, group: ParamGroup, state: &mut AdamState) -> Result<()> {
    let g = grads.group(group);
    let mut layers = params.group_layers_mut(group);
    state.apply(&mut layers, &g)?;
    params.generation += 1;
    Ok(())
}
