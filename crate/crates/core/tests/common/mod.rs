//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numerical code: networks are evaluated with plain
//! loops over `Vec<f64>`.
#![allow(dead_code)]

use fairkms::kernels::KernelSpec;
use fairkms::losses::{attribute_ce, confusion_loss, expression_ce, kms_loss, RhoGrad};
use fairkms::model::{Activation, Architecture, Gradients, ModelParams, RouteMask, Upstream};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so exactly-zero gradients are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;
/// Pre-activations closer than this to the ReLU kink force a redraw.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct Layer {
    /// `w[i][j]` connects input i to output j.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub relu: bool,
}

#[derive(Clone, Debug)]
pub struct Net {
    pub enc: Vec<Layer>,
    pub expr: Layer,
    pub attr: Layer,
}

fn to_layer(l: &fairkms::model::DenseLayer) -> Layer {
    Layer {
        w: l.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
        b: l.bias.to_vec(),
        relu: l.activation == Activation::Relu,
    }
}

impl Net {
    pub fn from_params(p: &ModelParams) -> Net {
        Net {
            enc: p.encoder.iter().map(to_layer).collect(),
            expr: to_layer(&p.expr_head),
            attr: to_layer(&p.attr_head),
        }
    }

    pub fn layer(&self, idx: usize) -> &Layer {
        let l = self.enc.len();
        if idx < l {
            &self.enc[idx]
        } else if idx == l {
            &self.expr
        } else {
            &self.attr
        }
    }

    fn layer_mut(&mut self, idx: usize) -> &mut Layer {
        let l = self.enc.len();
        if idx < l {
            &mut self.enc[idx]
        } else if idx == l {
            &mut self.expr
        } else {
            &mut self.attr
        }
    }

    /// Every scalar parameter: (layer index, bias?, row, col). Heads come
    /// after the encoder layers, expression head first.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for li in 0..self.enc.len() + 2 {
            let layer = self.layer(li);
            for i in 0..layer.w.len() {
                for j in 0..layer.b.len() {
                    ids.push(ParamId { layer: li, bias: false, i, j });
                }
            }
            for j in 0..layer.b.len() {
                ids.push(ParamId { layer: li, bias: true, i: 0, j });
            }
        }
        ids
    }

    pub fn nudged(&self, id: ParamId, delta: f64) -> Net {
        let mut n = self.clone();
        let l = n.layer_mut(id.layer);
        if id.bias {
            l.b[id.j] += delta;
        } else {
            l.w[id.i][id.j] += delta;
        }
        n
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ParamId {
    pub layer: usize,
    pub bias: bool,
    pub i: usize,
    pub j: usize,
}

pub fn analytic(grads: &Gradients, num_encoder: usize, id: ParamId) -> f64 {
    let g = if id.layer < num_encoder {
        &grads.encoder[id.layer]
    } else if id.layer == num_encoder {
        &grads.expr_head
    } else {
        &grads.attr_head
    };
    if id.bias {
        g.bias[id.j]
    } else {
        g.weights[[id.i, id.j]]
    }
}

fn affine(l: &Layer, x: &[f64]) -> Vec<f64> {
    let mut out = l.b.clone();
    for (i, xi) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * l.w[i][j];
        }
    }
    out
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub struct Outputs {
    pub emb: Vec<Vec<f64>>,
    pub expr: Vec<Vec<f64>>,
    pub attr: Vec<Vec<f64>>,
    /// Smallest |pre-activation| over all ReLU units.
    pub min_kink: f64,
}

pub fn forward(net: &Net, x: &[Vec<f64>]) -> Outputs {
    let mut min_kink = f64::INFINITY;
    let mut emb = Vec::new();
    for row in x {
        let mut h = row.clone();
        for l in &net.enc {
            let z = affine(l, &h);
            if l.relu {
                for v in &z {
                    min_kink = min_kink.min(v.abs());
                }
                h = z.into_iter().map(|v| v.max(0.0)).collect();
            } else {
                h = z;
            }
        }
        emb.push(h);
    }
    let expr = emb.iter().map(|e| softmax(&affine(&net.expr, e))).collect();
    let attr = emb.iter().map(|e| softmax(&affine(&net.attr, e))).collect();
    Outputs { emb, expr, attr, min_kink }
}

pub fn kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> f64 {
    match *spec {
        KernelSpec::Rbf { bandwidth } => {
            let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
            (-d2 / (2.0 * bandwidth * bandwidth)).exp()
        }
        KernelSpec::Linear => x.iter().zip(y).map(|(a, b)| a * b).sum(),
        KernelSpec::Polynomial { degree, offset } => {
            let d: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            (d + offset).powi(degree as i32)
        }
    }
}

fn block_mean(spec: &KernelSpec, a: &[&Vec<f64>], b: &[&Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += kernel(spec, x, y);
        }
    }
    s / (a.len() * b.len()) as f64
}

/// Shrinkage factor of one sample set, straight from the risk and norm
/// definitions.
pub fn rho(spec: &KernelSpec, xs: &[&Vec<f64>]) -> f64 {
    let m = xs.len() as f64;
    let mut diag = 0.0;
    let mut off = 0.0;
    for (i, x) in xs.iter().enumerate() {
        for (j, y) in xs.iter().enumerate() {
            let k = kernel(spec, x, y);
            if i == j {
                diag += k;
            } else {
                off += k;
            }
        }
    }
    let norm = (diag + off) / (m * m);
    let risk = (diag / m - off / (m * (m - 1.0))) / m;
    if risk == 0.0 {
        0.0
    } else {
        risk / (risk + norm)
    }
}

/// Per-group shrinkage factors; `None` for groups with fewer than 2 members.
pub fn group_rhos(spec: &KernelSpec, emb: &[Vec<f64>], groups: &[usize], zeta: usize) -> Vec<Option<f64>> {
    (0..zeta)
        .map(|g| {
            let xs: Vec<&Vec<f64>> = emb.iter().zip(groups).filter(|(_, &h)| h == g).map(|(e, _)| e).collect();
            (xs.len() >= 2).then(|| rho(spec, &xs))
        })
        .collect()
}

/// Sum over group pairs of the shrunk V-statistic MMD² with the given,
/// fixed shrinkage factors.
pub fn kms_frozen(spec: &KernelSpec, emb: &[Vec<f64>], groups: &[usize], rhos: &[Option<f64>]) -> f64 {
    let members = |g: usize| -> Vec<&Vec<f64>> {
        emb.iter().zip(groups).filter(|(_, &h)| h == g).map(|(e, _)| e).collect()
    };
    let mut total = 0.0;
    for a in 0..rhos.len() {
        for b in a + 1..rhos.len() {
            let (Some(ra), Some(rb)) = (rhos[a], rhos[b]) else { continue };
            let (xa, xb) = (members(a), members(b));
            let (ca, cb) = (1.0 - ra, 1.0 - rb);
            total += ca * ca * block_mean(spec, &xa, &xa) + cb * cb * block_mean(spec, &xb, &xb)
                - 2.0 * ca * cb * block_mean(spec, &xa, &xb);
        }
    }
    total
}

pub fn confusion(p: &[Vec<f64>]) -> f64 {
    let zeta = p[0].len() as f64;
    -p.iter().flatten().map(|v| v.ln()).sum::<f64>() / (zeta * p.len() as f64)
}

/// Cross-entropy with the literal `1 / (K N)` normalization, K = row width.
pub fn ce(p: &[Vec<f64>], labels: &[usize]) -> f64 {
    let k = p[0].len() as f64;
    -p.iter().zip(labels).map(|(r, &l)| r[l].ln()).sum::<f64>() / (k * p.len() as f64)
}

pub fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows[0].len();
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

/// One random small network, batch and kernel.
pub struct GradCase {
    pub params: ModelParams,
    pub x: Vec<Vec<f64>>,
    pub classes: Vec<usize>,
    pub groups: Vec<usize>,
    pub spec: KernelSpec,
}

pub fn random_case(rng: &mut ChaCha8Rng, family: usize) -> GradCase {
    loop {
        let zeta = rng.random_range(2..=3usize);
        let n = rng.random_range(2 * zeta..=16);
        let input_dim = rng.random_range(1..=8);
        let depth = rng.random_range(0..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=8)).collect();
        let arch = Architecture {
            input_dim,
            hidden,
            embedding_dim: rng.random_range(1..=8),
            num_classes: rng.random_range(2..=4),
            num_groups: zeta,
        };
        let params = ModelParams::init(&arch, rng.random()).unwrap();
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..input_dim).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let classes = (0..n).map(|_| rng.random_range(0..arch.num_classes)).collect();
        // the first 2*zeta samples guarantee two members per group
        let groups: Vec<usize> = (0..n)
            .map(|i| if i < 2 * zeta { i / 2 } else { rng.random_range(0..zeta) })
            .collect();
        let spec = match family % 3 {
            0 => KernelSpec::rbf(rng.random_range(0.5..2.0)),
            1 => KernelSpec::Linear,
            _ => KernelSpec::Polynomial {
                degree: rng.random_range(2..=3),
                offset: 1.0,
            },
        };
        if forward(&Net::from_params(&params), &x).min_kink < KINK_MARGIN {
            continue;
        }
        return GradCase {
            params,
            x,
            classes,
            groups,
            spec,
        };
    }
}

#[derive(Debug, Default)]
pub struct SuiteResult {
    pub configs: usize,
    pub checks: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Compares the library's analytic parameter gradients of every loss term,
/// and of the weighted total, against central differences of the oracle.
/// Shrinkage factors are pinned at their values for the unperturbed batch.
pub fn gradient_suite(configs: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SuiteResult::default();
    let (gamma, beta) = (0.17, 0.14);
    for c in 0..configs {
        let case = random_case(&mut rng, c);
        let p = &case.params;
        let zeta = p.num_groups();
        let xa = from_rows(&case.x);
        let fwd = p.forward(xa.view()).unwrap();
        let kms = kms_loss(fwd.embeddings.view(), &case.groups, zeta, &case.spec, RhoGrad::Frozen).unwrap();
        let (_, g_conf) = confusion_loss(fwd.attr_probs.view()).unwrap();
        let (_, g_z) = attribute_ce(fwd.attr_probs.view(), &case.groups).unwrap();
        let (_, g_fer) = expression_ce(fwd.expr_probs.view(), &case.classes).unwrap();

        let net = Net::from_params(p);
        let base = forward(&net, &case.x);
        let rhos = group_rhos(&case.spec, &base.emb, &case.groups, zeta);

        type Term<'a> = (&'a str, Upstream, Box<dyn Fn(&Outputs) -> f64 + 'a>);
        let terms: Vec<Term> = vec![
            (
                "kms",
                Upstream {
                    embeddings: Some(kms.grad.clone()),
                    ..Default::default()
                },
                Box::new(|o: &Outputs| kms_frozen(&case.spec, &o.emb, &case.groups, &rhos)),
            ),
            (
                "conf",
                Upstream {
                    attr_probs: Some(g_conf.clone()),
                    ..Default::default()
                },
                Box::new(|o: &Outputs| confusion(&o.attr)),
            ),
            (
                "attr",
                Upstream {
                    attr_probs: Some(g_z.clone()),
                    ..Default::default()
                },
                Box::new(|o: &Outputs| ce(&o.attr, &case.groups)),
            ),
            (
                "fer",
                Upstream {
                    expr_probs: Some(g_fer.clone()),
                    ..Default::default()
                },
                Box::new(|o: &Outputs| ce(&o.expr, &case.classes)),
            ),
            (
                "total",
                Upstream {
                    embeddings: Some(&kms.grad * gamma),
                    expr_probs: Some(g_fer.clone()),
                    attr_probs: Some(&g_conf * beta + &g_z),
                },
                Box::new(|o: &Outputs| {
                    gamma * kms_frozen(&case.spec, &o.emb, &case.groups, &rhos)
                        + beta * confusion(&o.attr)
                        + ce(&o.attr, &case.groups)
                        + ce(&o.expr, &case.classes)
                }),
            ),
        ];
        let ids = net.param_ids();
        for (name, up, f) in &terms {
            let grads = p.backward(&fwd.cache, up, RouteMask::ALL).unwrap();
            for &id in &ids {
                let plus = f(&forward(&net.nudged(id, FD_STEP), &case.x));
                let minus = f(&forward(&net.nudged(id, -FD_STEP), &case.x));
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                let a = analytic(&grads, net.enc.len(), id);
                let e = rel_err(a, numeric);
                out.checks += 1;
                if e > out.max_rel_err {
                    out.max_rel_err = e;
                    out.worst = format!("config {c} term {name} {id:?}: analytic {a:e} numeric {numeric:e}");
                }
            }
        }
        out.configs += 1;
    }
    out
}
