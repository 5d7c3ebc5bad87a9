#![allow(dead_code)]

pub mod oracles;

use rand::Rng;
use tmag::dataset::{AttributeTable, AttributeVector, ImplicitMatrix};
use tmag::graph::{build_graph, BipartiteGraph};
use tmag::model::{ContrastBatch, ModelParams, TaskBatch};
use tmag::params::{Objective, ParamVec};
use tmag::autoencoder::AutoencoderParams;
use tmag::rng::seeded;

pub struct Toy {
    pub m: ImplicitMatrix,
    pub graph: BipartiteGraph,
    pub user_attr: AttributeTable,
    pub item_attr: AttributeTable,
    pub params: ModelParams,
    pub batch: TaskBatch,
}

pub fn random_attr(n: usize, width: usize, rng: &mut impl Rng) -> AttributeTable {
    AttributeTable {
        width,
        rows: (0..n)
            .map(|_| {
                let mut a: Vec<usize> = (0..width).filter(|_| rng.random_bool(0.4)).collect();
                if a.is_empty() {
                    a.push(rng.random_range(0..width));
                }
                AttributeVector { active: a }
            })
            .collect(),
    }
}

pub fn random_matrix(m: usize, n: usize, density: f64, rng: &mut impl Rng) -> ImplicitMatrix {
    let mut pairs = Vec::new();
    for u in 0..m {
        let first = rng.random_range(0..n);
        pairs.push((u, first));
        for i in 0..n {
            if rng.random_bool(density) {
                pairs.push((u, i));
            }
        }
    }
    ImplicitMatrix::from_pairs(m, n, pairs).unwrap()
}

/// 8 users, 12 items, d = 4, d_z = 3.
pub fn toy(seed: u64) -> Toy {
    let (m_users, n_items, d, d_z, width) = (8, 12, 4, 3, 6);
    let mut rng = seeded(seed);
    let m = random_matrix(m_users, n_items, 0.3, &mut rng);
    let graph = build_graph(&m, None).unwrap();
    let user_attr = random_attr(m_users, width, &mut rng);
    let item_attr = random_attr(n_items, width, &mut rng);
    let mut ae_user = AutoencoderParams::init(width, d_z, &mut rng);
    let mut ae_item = AutoencoderParams::init(width, d_z, &mut rng);
    ae_user.b1.iter_mut().for_each(|b| *b = 0.3);
    ae_item.b1.iter_mut().for_each(|b| *b = 0.3);
    let params = ModelParams::init(m_users, n_items, d, ae_user, ae_item, &mut rng);
    let positives: Vec<(usize, usize)> = m.pairs().filter(|_| rng.random_bool(0.6)).collect();
    let pool: Vec<usize> = (0..n_items).collect();
    let contrast = ContrastBatch::sample((0..m_users).collect(), (0..m_users).map(|u| u % 3).collect(), &mut rng);
    let batch = TaskBatch::sample(&positives, &m, &pool, 4, contrast, &mut rng);
    Toy {
        m,
        graph,
        user_attr,
        item_attr,
        params,
        batch,
    }
}

/// Central differences of `obj` at `p`, one scalar at a time.
pub fn finite_difference<P: ParamVec, O: Objective<P>>(obj: &O, p: &P, eps: f64) -> Vec<f64> {
    let n = p.len();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let bump = |delta: f64| {
            let mut q = p.clone();
            let mut idx = 0;
            q.for_each_scalar_mut(&mut |v| {
                if idx == k {
                    *v += delta;
                }
                idx += 1;
            });
            obj.loss(&q).unwrap()
        };
        out.push((bump(eps) - bump(-eps)) / (2.0 * eps));
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    if den == 0.0 {
        0.0
    } else {
        diff / den
    }
}

pub const LAMBDA_GRID: [(f64, f64, f64); 5] = [
    (0.0, 0.0, 0.0),
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (0.1, 0.1, 0.01),
];

pub struct AeObjective<'a> {
    pub x: &'a AttributeTable,
    pub lambda: f64,
}

impl Objective<AutoencoderParams> for AeObjective<'_> {
    fn loss(&self, p: &AutoencoderParams) -> tmag::Result<f64> {
        tmag::autoencoder::ae_loss(p, self.x, self.lambda, true)
    }

    fn gradient(&self, p: &AutoencoderParams) -> tmag::Result<(f64, AutoencoderParams)> {
        tmag::autoencoder::ae_gradient(p, self.x, self.lambda, true)
    }
}

/// Contrastive term as a function of the user codes alone.
pub struct ContrastObjective<'a> {
    pub batch: &'a ContrastBatch,
    pub tau: f64,
    pub mode: tmag::model::InfoNceDenominator,
}

impl Objective<tmag::linalg::Matrix> for ContrastObjective<'_> {
    fn loss(&self, z: &tmag::linalg::Matrix) -> tmag::Result<f64> {
        Ok(tmag::model::contrastive_forward_backward(z, self.batch, self.tau, self.mode, None).unwrap_or(0.0))
    }

    fn gradient(&self, z: &tmag::linalg::Matrix) -> tmag::Result<(f64, tmag::linalg::Matrix)> {
        let mut d = z.zeros_like();
        let l = tmag::model::contrastive_forward_backward(z, self.batch, self.tau, self.mode, Some((&mut d, 1.0)))
            .unwrap_or(0.0);
        Ok((l, d))
    }
}

/// Named relative errors between analytic and finite-difference gradients
/// for the autoencoder, BPR, contrastive and joint losses on the toy.
pub fn gradient_errors(seed: u64) -> Vec<(String, f64)> {
    use tmag::graph::LayerCombine;
    use tmag::model::{InfoNceDenominator, LossWeights, ModelConfig, ModelContext, TaskObjective};

    const EPS: f64 = 1e-4;
    let t = toy(seed);
    let mut out = Vec::new();

    let ae = &t.params.ae_user;
    let obj = AeObjective { x: &t.user_attr, lambda: 0.05 };
    let (_, g) = obj.gradient(ae).unwrap();
    out.push(("autoencoder".to_string(), relative_error(&g.to_flat(), &finite_difference(&obj, ae, EPS))));

    for mode in [InfoNceDenominator::Literal, InfoNceDenominator::WithPositive] {
        let z = t.params.ae_user.encode_table(&t.user_attr).unwrap();
        let obj = ContrastObjective { batch: &t.batch.contrast, tau: 0.5, mode };
        let (_, g) = obj.gradient(&z).unwrap();
        out.push((format!("contrastive {mode:?}"), relative_error(&g.to_flat(), &finite_difference(&obj, &z, EPS))));
    }

    for combine in [LayerCombine::Last, LayerCombine::Mean] {
        for (l1, l2, l3) in LAMBDA_GRID {
            let cfg = ModelConfig {
                layers: 2,
                combine,
                weights: LossWeights { lambda1: l1, lambda2: l2, lambda3: l3, tau: 0.5 },
                finetune_ae: true,
                ..Default::default()
            };
            let ctx = ModelContext::new(&t.graph, &t.user_attr, &t.item_attr, cfg).unwrap();
            let obj = TaskObjective { ctx: &ctx, batch: &t.batch };
            let (_, g) = obj.gradient(&t.params).unwrap();
            let fd = finite_difference(&obj, &t.params, EPS);
            let name = if (l1, l2, l3) == (0.0, 0.0, 0.0) {
                format!("bpr {combine:?}")
            } else {
                format!("joint {combine:?} λ=({l1},{l2},{l3})")
            };
            out.push((name, relative_error(&g.to_flat(), &fd)));
        }
    }
    out
}
