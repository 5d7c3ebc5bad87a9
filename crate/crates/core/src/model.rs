//! Trainable parameters, the joint loss `L_pre + λ1 L_gen + λ2 L_MI + λ3 ‖Θ‖²`
//! and its hand-written reverse pass.
//!
//! The fused representation of an entity is `f = e ⊕ z`: its propagated graph
//! embedding concatenated with its attribute code. Scores are `f_uᵀ f_i`.

use std::collections::BTreeSet;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{gen_forward_backward, AugmentParams, GenCell, GenGrads};
use crate::autoencoder::AutoencoderParams;
use crate::dataset::{AttributeTable, ImplicitMatrix};
use crate::error::{Result, TmagError};
use crate::graph::{combine_backward, combine_layers, propagate, BipartiteGraph, LayerCombine};
use crate::linalg::{axpy, dot, sigmoid, softplus, xavier_bound, Matrix};
use crate::params::{self, Objective, ParamVec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Layer-0 user embeddings, `M × d`.
    pub user_emb: Matrix,
    /// Layer-0 item embeddings, `N × d`.
    pub item_emb: Matrix,
    pub aug: AugmentParams,
    pub ae_user: AutoencoderParams,
    pub ae_item: AutoencoderParams,
}

/// Gradients share the parameter layout; rows outside the batch's reach are zero.
pub type GradientBundle = ModelParams;

/// Uniform rows in `±sqrt(3/d)`.
pub fn init_rows(n: usize, d: usize, rng: &mut impl Rng) -> Matrix {
    let b = xavier_bound(d, d);
    let data = (0..n * d).map(|_| rng.random_range(-b..=b)).collect();
    Matrix::from_vec(n, d, data).expect("shape matches")
}

impl ModelParams {
    pub fn init(
        n_users: usize,
        n_items: usize,
        d: usize,
        ae_user: AutoencoderParams,
        ae_item: AutoencoderParams,
        rng: &mut impl Rng,
    ) -> Self {
        let user_emb = init_rows(n_users, d, rng);
        let item_emb = init_rows(n_items, d, rng);
        let aug = AugmentParams::zeros(d, ae_item.latent_dim());
        Self {
            user_emb,
            item_emb,
            aug,
            ae_user,
            ae_item,
        }
    }

    pub fn dim(&self) -> usize {
        self.user_emb.cols()
    }

    pub fn n_users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_emb.rows()
    }

    /// Redraw the layer-0 rows of the given users and items.
    pub fn reinit_rows(&mut self, users: &[usize], items: &[usize], rng: &mut impl Rng) {
        let d = self.dim();
        let b = xavier_bound(d, d);
        for &u in users {
            self.user_emb.row_mut(u).iter_mut().for_each(|v| *v = rng.random_range(-b..=b));
        }
        for &i in items {
            self.item_emb.row_mut(i).iter_mut().for_each(|v| *v = rng.random_range(-b..=b));
        }
    }

    fn layer0(&self) -> Matrix {
        Matrix::vstack(&self.user_emb, &self.item_emb).expect("equal widths")
    }
}

impl ParamVec for ModelParams {
    fn zeros_like(&self) -> Self {
        Self {
            user_emb: self.user_emb.zeros_like(),
            item_emb: self.item_emb.zeros_like(),
            aug: self.aug.zeros_like(),
            ae_user: self.ae_user.zeros_like(),
            ae_item: self.ae_item.zeros_like(),
        }
    }

    fn axpy(&mut self, a: f64, x: &Self) {
        self.user_emb.axpy(a, &x.user_emb);
        self.item_emb.axpy(a, &x.item_emb);
        self.aug.axpy(a, &x.aug);
        self.ae_user.axpy(a, &x.ae_user);
        self.ae_item.axpy(a, &x.ae_item);
    }

    fn dot(&self, o: &Self) -> f64 {
        ParamVec::dot(&self.user_emb, &o.user_emb)
            + ParamVec::dot(&self.item_emb, &o.item_emb)
            + self.aug.dot(&o.aug)
            + self.ae_user.dot(&o.ae_user)
            + self.ae_item.dot(&o.ae_item)
    }

    fn scale(&mut self, a: f64) {
        ParamVec::scale(&mut self.user_emb, a);
        ParamVec::scale(&mut self.item_emb, a);
        self.aug.scale(a);
        self.ae_user.scale(a);
        self.ae_item.scale(a);
    }

    fn for_each_scalar(&self, f: &mut dyn FnMut(f64)) {
        self.user_emb.for_each_scalar(f);
        self.item_emb.for_each_scalar(f);
        self.aug.for_each_scalar(f);
        self.ae_user.for_each_scalar(f);
        self.ae_item.for_each_scalar(f);
    }

    fn for_each_scalar_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.user_emb.for_each_scalar_mut(f);
        self.item_emb.for_each_scalar_mut(f);
        self.aug.for_each_scalar_mut(f);
        self.ae_user.for_each_scalar_mut(f);
        self.ae_item.for_each_scalar_mut(f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 0.01,
            tau: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TmagError::Usage(format!("{name} = {v} must be a non-negative number")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(TmagError::Usage(format!("tau = {} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// Which tensors the generator loss differentiates into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenGradFlow {
    /// Embeddings, attribute codes and `W_g`, `W_a`.
    Full,
    /// `W_g`, `W_a` only.
    AugOnly,
}

/// Denominator of the contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InfoNceDenominator {
    /// Negatives only.
    Literal,
    /// Positive plus negatives (standard InfoNCE).
    WithPositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub combine: LayerCombine,
    pub weights: LossWeights,
    /// Channel blend of the generator.
    pub alpha: f64,
    pub gen_grad: GenGradFlow,
    pub infonce: InfoNceDenominator,
    /// Train the encoder halves of both autoencoders jointly.
    pub finetune_ae: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            combine: LayerCombine::Last,
            weights: LossWeights::default(),
            alpha: 0.8,
            gen_grad: GenGradFlow::Full,
            infonce: InfoNceDenominator::Literal,
            finetune_ae: false,
        }
    }
}

/// Everything besides the parameters that a loss evaluation reads.
#[derive(Debug, Clone, Copy)]
pub struct ModelContext<'a> {
    pub graph: &'a BipartiteGraph,
    pub user_attr: &'a AttributeTable,
    pub item_attr: &'a AttributeTable,
    pub cfg: ModelConfig,
}

impl<'a> ModelContext<'a> {
    pub fn new(
        graph: &'a BipartiteGraph,
        user_attr: &'a AttributeTable,
        item_attr: &'a AttributeTable,
        cfg: ModelConfig,
    ) -> Result<Self> {
        for (what, expected, got) in [
            ("user attribute rows", graph.n_users(), user_attr.len()),
            ("item attribute rows", graph.n_items(), item_attr.len()),
        ] {
            if expected != got {
                return Err(TmagError::DimensionMismatch { what, expected, got });
            }
        }
        cfg.weights.validate()?;
        Ok(Self {
            graph,
            user_attr,
            item_attr,
            cfg,
        })
    }

    pub fn with_graph(&self, graph: &'a BipartiteGraph) -> Self {
        Self { graph, ..*self }
    }
}

/// Propagated graph embeddings and attribute codes for every entity.
#[derive(Debug, Clone)]
pub struct Forward {
    pub n_users: usize,
    /// Combined graph embeddings, users then items.
    pub nodes: Matrix,
    pub z_user: Matrix,
    pub z_item: Matrix,
}

impl Forward {
    pub fn fused_user(&self, u: usize) -> Vec<f64> {
        [self.nodes.row(u), self.z_user.row(u)].concat()
    }

    pub fn fused_item(&self, i: usize) -> Vec<f64> {
        [self.nodes.row(self.n_users + i), self.z_item.row(i)].concat()
    }

    /// `f_uᵀ f_i` without materialising the fused vectors.
    pub fn score(&self, u: usize, i: usize) -> f64 {
        dot(self.nodes.row(u), self.nodes.row(self.n_users + i)) + dot(self.z_user.row(u), self.z_item.row(i))
    }
}

pub fn forward(p: &ModelParams, ctx: &ModelContext<'_>) -> Result<Forward> {
    let g = ctx.graph;
    if p.n_users() != g.n_users() || p.n_items() != g.n_items() {
        return Err(TmagError::DimensionMismatch {
            what: "embedding rows",
            expected: g.n_nodes(),
            got: p.n_users() + p.n_items(),
        });
    }
    let table = propagate(g, &p.layer0(), ctx.cfg.layers)?;
    Ok(Forward {
        n_users: g.n_users(),
        nodes: combine_layers(&table, ctx.cfg.combine),
        z_user: p.ae_user.encode_table(ctx.user_attr)?,
        z_item: p.ae_item.encode_table(ctx.item_attr)?,
    })
}

/// `ŷ = f_uᵀ f_i`.
pub fn predict(f_u: &[f64], f_i: &[f64]) -> Result<f64> {
    if f_u.len() != f_i.len() {
        return Err(TmagError::DimensionMismatch {
            what: "fused vector",
            expected: f_u.len(),
            got: f_i.len(),
        });
    }
    Ok(dot(f_u, f_i))
}

/// Gradient sinks for the fused representation.
struct FusedGrads<'a> {
    d_nodes: &'a mut Matrix,
    d_z_user: &'a mut Matrix,
    d_z_item: &'a mut Matrix,
}

fn bpr_forward_backward(triples: &[(usize, usize, usize)], fw: &Forward, mut grads: Option<FusedGrads<'_>>) -> f64 {
    let m = fw.n_users;
    let mut loss = 0.0;
    for &(u, i, j) in triples {
        let x = fw.score(u, i) - fw.score(u, j);
        loss += softplus(-x);
        if let Some(gr) = grads.as_mut() {
            let dx = -sigmoid(-x);
            let (eu, ei, ej) = (fw.nodes.row(u), fw.nodes.row(m + i), fw.nodes.row(m + j));
            let (zu, zi, zj) = (fw.z_user.row(u), fw.z_item.row(i), fw.z_item.row(j));
            let du: Vec<f64> = ei.iter().zip(ej).map(|(a, b)| dx * (a - b)).collect();
            let dzu: Vec<f64> = zi.iter().zip(zj).map(|(a, b)| dx * (a - b)).collect();
            axpy(gr.d_nodes.row_mut(u), 1.0, &du);
            axpy(gr.d_z_user.row_mut(u), 1.0, &dzu);
            let eu = eu.to_vec();
            let zu = zu.to_vec();
            axpy(gr.d_nodes.row_mut(m + i), dx, &eu);
            axpy(gr.d_nodes.row_mut(m + j), -dx, &eu);
            axpy(gr.d_z_item.row_mut(i), dx, &zu);
            axpy(gr.d_z_item.row_mut(j), -dx, &zu);
        }
    }
    loss
}

/// `Σ −log σ(ŷ_ui − ŷ_uj)` over `(u, i⁺, j⁻)` triples.
pub fn bpr_loss(triples: &[(usize, usize, usize)], fw: &Forward) -> Result<f64> {
    if triples.is_empty() {
        return Err(TmagError::data("BPR loss over an empty triple list"));
    }
    Ok(bpr_forward_backward(triples, fw, None))
}

/// In-batch contrastive sample: batch members, their cluster labels, and a
/// pre-drawn same-cluster positive for every eligible anchor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContrastBatch {
    pub users: Vec<usize>,
    pub labels: Vec<usize>,
    /// `(anchor, positive)` as positions in `users`.
    pub pairs: Vec<(usize, usize)>,
}

impl ContrastBatch {
    /// Draw one positive per anchor that has both a same-cluster and an
    /// other-cluster batch member.
    pub fn sample(users: Vec<usize>, labels: Vec<usize>, rng: &mut impl Rng) -> Self {
        let mut pairs = Vec::new();
        for a in 0..users.len() {
            let same: Vec<usize> = (0..users.len()).filter(|&b| b != a && labels[b] == labels[a]).collect();
            let has_neg = labels.iter().any(|&l| l != labels[a]);
            if !same.is_empty() && has_neg {
                pairs.push((a, same[rng.random_range(0..same.len())]));
            }
        }
        Self { users, labels, pairs }
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// `d cos(a, b) / d a` scaled by `g`, added into `out`.
fn cosine_backward(a: &[f64], b: &[f64], g: f64, out: &mut [f64]) {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 || g == 0.0 {
        return;
    }
    let s = dot(a, b) / (na * nb);
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o += g * (y / (na * nb) - s * x / (na * na));
    }
}

/// Mean contrastive term over the batch anchors and, when `d_z` is given,
/// its gradient with respect to the rows of `z` scaled by `scale`. `None`
/// when the batch has no eligible anchor.
pub fn contrastive_forward_backward(
    z: &Matrix,
    batch: &ContrastBatch,
    tau: f64,
    mode: InfoNceDenominator,
    mut d_z: Option<(&mut Matrix, f64)>,
) -> Option<f64> {
    if batch.pairs.is_empty() {
        return None;
    }
    let n = batch.pairs.len() as f64;
    let mut loss = 0.0;
    for &(a, p) in &batch.pairs {
        let za = z.row(batch.users[a]);
        // (batch position, similarity) for each denominator member
        let mut den: Vec<(usize, f64)> = (0..batch.users.len())
            .filter(|&v| batch.labels[v] != batch.labels[a])
            .map(|v| (v, cosine(za, z.row(batch.users[v]))))
            .collect();
        let s_pos = cosine(za, z.row(batch.users[p]));
        if mode == InfoNceDenominator::WithPositive {
            den.push((p, s_pos));
        }
        let mx = den.iter().map(|d| d.1 / tau).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = den.iter().map(|d| (d.1 / tau - mx).exp()).sum();
        let lse = mx + sum.ln();
        loss += lse - s_pos / tau;

        if let Some((dz, scale)) = d_z.as_mut() {
            let w = *scale / n;
            // coefficient on each similarity
            let mut coeffs: Vec<(usize, f64)> = den
                .iter()
                .map(|&(v, s)| (v, w * (s / tau - lse).exp() / tau))
                .collect();
            coeffs.push((p, -w / tau));
            let mut d_anchor = vec![0.0; za.len()];
            for (v, c) in coeffs {
                let zv = z.row(batch.users[v]);
                cosine_backward(za, zv, c, &mut d_anchor);
                let mut d_v = vec![0.0; zv.len()];
                cosine_backward(zv, za, c, &mut d_v);
                axpy(dz.row_mut(batch.users[v]), 1.0, &d_v);
            }
            axpy(dz.row_mut(batch.users[a]), 1.0, &d_anchor);
        }
    }
    Some(loss / n)
}

/// Contrastive regularizer over the user codes; 0 (with a warning) when no
/// anchor in the batch has both a positive and a negative.
pub fn contrastive_loss(z: &Matrix, batch: &ContrastBatch, tau: f64, mode: InfoNceDenominator) -> f64 {
    contrastive_forward_backward(z, batch, tau, mode, None).unwrap_or_else(|| {
        warn!("contrastive batch of {} users has no eligible anchor", batch.users.len());
        0.0
    })
}

/// One step's worth of training signal for a task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskBatch {
    /// `(user, positive, negative)`.
    pub triples: Vec<(usize, usize, usize)>,
    pub gen_cells: Vec<GenCell>,
    pub contrast: ContrastBatch,
}

fn sample_unobserved(
    u: usize,
    pool: &[usize],
    known: &ImplicitMatrix,
    rng: &mut impl Rng,
) -> Option<usize> {
    const TRIES: usize = 64;
    (0..TRIES)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .find(|&j| !known.contains(u, j))
}

impl TaskBatch {
    /// One BPR triple and `neg_per_pos` generator negatives per positive pair.
    /// Negatives come uniformly from `pool` and avoid the items `known` lists
    /// for the user; a positive whose negatives cannot be found is dropped.
    pub fn sample(
        positives: &[(usize, usize)],
        known: &ImplicitMatrix,
        pool: &[usize],
        neg_per_pos: usize,
        contrast: ContrastBatch,
        rng: &mut impl Rng,
    ) -> Self {
        let mut triples = Vec::with_capacity(positives.len());
        let mut gen_cells = Vec::with_capacity(positives.len() * (1 + neg_per_pos));
        if !pool.is_empty() {
            for &(u, i) in positives {
                let Some(j) = sample_unobserved(u, pool, known, rng) else {
                    continue;
                };
                triples.push((u, i, j));
                gen_cells.push(GenCell { user: u, item: i, target: 1.0 });
                for _ in 0..neg_per_pos {
                    if let Some(j) = sample_unobserved(u, pool, known, rng) {
                        gen_cells.push(GenCell { user: u, item: j, target: 0.0 });
                    }
                }
            }
        }
        Self {
            triples,
            gen_cells,
            contrast,
        }
    }

    /// Users and items whose layer-0 rows the batch scores directly.
    pub fn touched(&self) -> (BTreeSet<usize>, BTreeSet<usize>) {
        let mut users = BTreeSet::new();
        let mut items = BTreeSet::new();
        for &(u, i, j) in &self.triples {
            users.insert(u);
            items.insert(i);
            items.insert(j);
        }
        for c in &self.gen_cells {
            users.insert(c.user);
            items.insert(c.item);
        }
        (users, items)
    }
}

/// Per-component values of the joint loss. Components whose weight is zero
/// are not evaluated and reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pre: f64,
    pub gen: f64,
    pub mi: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn check(self) -> Result<Self> {
        if self.total.is_finite() {
            Ok(self)
        } else {
            Err(TmagError::numeric(format!(
                "non-finite loss: pre={} gen={} mi={} reg={}",
                self.pre, self.gen, self.mi, self.reg
            )))
        }
    }
}

fn reg_norm(p: &ModelParams, batch: &TaskBatch, finetune_ae: bool) -> f64 {
    let (users, items) = batch.touched();
    let mut s: f64 = users.iter().map(|&u| dot(p.user_emb.row(u), p.user_emb.row(u))).sum();
    s += items.iter().map(|&i| dot(p.item_emb.row(i), p.item_emb.row(i))).sum::<f64>();
    s += p.aug.w_g.squared_norm() + p.aug.w_a.squared_norm();
    if finetune_ae {
        for ae in [&p.ae_user, &p.ae_item] {
            s += ae.w1.squared_norm() + dot(&ae.b1, &ae.b1);
        }
    }
    s
}

/// Pull a gradient on the codes of `table` back into the encoder half of `ae`.
fn encoder_backward(z: &Matrix, d_z: &Matrix, table: &AttributeTable, out: &mut AutoencoderParams) {
    let cols = out.w1.cols();
    for (e, x) in table.rows.iter().enumerate() {
        let (zr, dr) = (z.row(e), d_z.row(e));
        for (k, (&zk, &dk)) in zr.iter().zip(dr).enumerate() {
            if zk > 0.0 && dk != 0.0 {
                out.b1[k] += dk;
                let w = out.w1.as_mut_slice();
                for &j in &x.active {
                    w[k * cols + j] += dk;
                }
            }
        }
    }
}

fn evaluate(
    p: &ModelParams,
    ctx: &ModelContext<'_>,
    batch: &TaskBatch,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<GradientBundle>)> {
    if batch.triples.is_empty() {
        return Err(TmagError::data("task batch has no BPR triple"));
    }
    let cfg = &ctx.cfg;
    let w = cfg.weights;
    let g = ctx.graph;
    let fw = forward(p, ctx)?;

    let mut d_nodes = Matrix::zeros(g.n_nodes(), p.dim());
    let mut d_z_user = fw.z_user.zeros_like();
    let mut d_z_item = fw.z_item.zeros_like();
    let mut grad = want_grad.then(|| p.zeros_like());

    let mut out = LossBreakdown {
        pre: bpr_forward_backward(
            &batch.triples,
            &fw,
            want_grad.then_some(FusedGrads {
                d_nodes: &mut d_nodes,
                d_z_user: &mut d_z_user,
                d_z_item: &mut d_z_item,
            }),
        ),
        ..Default::default()
    };

    if w.lambda1 != 0.0 {
        let sinks = grad.as_mut().map(|gb| GenGrads {
            d_nodes: &mut d_nodes,
            d_item_z: &mut d_z_item,
            d_aug: &mut gb.aug,
            scale: w.lambda1,
            into_embeddings: cfg.gen_grad == GenGradFlow::Full,
        });
        out.gen = gen_forward_backward(&batch.gen_cells, g, &fw.nodes, &fw.z_item, &p.aug, cfg.alpha, sinks)
            .unwrap_or(0.0);
    }

    if w.lambda2 != 0.0 {
        let sink = want_grad.then_some((&mut d_z_user, w.lambda2));
        out.mi = contrastive_forward_backward(&fw.z_user, &batch.contrast, w.tau, cfg.infonce, sink).unwrap_or(0.0);
    }

    out.reg = reg_norm(p, batch, cfg.finetune_ae);
    out.total = out.pre + w.lambda1 * out.gen + w.lambda2 * out.mi + w.lambda3 * out.reg;
    let out = out.check()?;

    let Some(mut gb) = grad else {
        return Ok((out, None));
    };
    let d0 = combine_backward(g, &d_nodes, cfg.layers, cfg.combine);
    let (du, di) = d0.split_rows(g.n_users());
    gb.user_emb = du;
    gb.item_emb = di;
    if cfg.finetune_ae {
        encoder_backward(&fw.z_user, &d_z_user, ctx.user_attr, &mut gb.ae_user);
        encoder_backward(&fw.z_item, &d_z_item, ctx.item_attr, &mut gb.ae_item);
    }
    if w.lambda3 != 0.0 {
        let r = 2.0 * w.lambda3;
        let (users, items) = batch.touched();
        for u in users {
            axpy(gb.user_emb.row_mut(u), r, p.user_emb.row(u));
        }
        for i in items {
            axpy(gb.item_emb.row_mut(i), r, p.item_emb.row(i));
        }
        gb.aug.w_g.axpy(r, &p.aug.w_g);
        gb.aug.w_a.axpy(r, &p.aug.w_a);
        if cfg.finetune_ae {
            gb.ae_user.w1.axpy(r, &p.ae_user.w1);
            gb.ae_user.b1.axpy(r, &p.ae_user.b1);
            gb.ae_item.w1.axpy(r, &p.ae_item.w1);
            gb.ae_item.b1.axpy(r, &p.ae_item.b1);
        }
    }
    if !gb.is_finite() {
        return Err(TmagError::numeric(format!(
            "non-finite gradient at loss pre={} gen={} mi={} reg={}",
            out.pre, out.gen, out.mi, out.reg
        )));
    }
    Ok((out, Some(gb)))
}

/// Joint loss with its component breakdown.
pub fn total_loss(batch: &TaskBatch, p: &ModelParams, ctx: &ModelContext<'_>) -> Result<LossBreakdown> {
    Ok(evaluate(p, ctx, batch, false)?.0)
}

/// Joint loss and its gradient with respect to every trainable tensor.
/// Frozen tensors get zero gradient.
pub fn gradients(batch: &TaskBatch, p: &ModelParams, ctx: &ModelContext<'_>) -> Result<(LossBreakdown, GradientBundle)> {
    let (l, g) = evaluate(p, ctx, batch, true)?;
    Ok((l, g.expect("requested")))
}

/// The joint loss on a fixed batch, as an [`Objective`].
pub struct TaskObjective<'a, 'b> {
    pub ctx: &'b ModelContext<'a>,
    pub batch: &'b TaskBatch,
}

impl Objective<ModelParams> for TaskObjective<'_, '_> {
    fn loss(&self, p: &ModelParams) -> Result<f64> {
        Ok(total_loss(self.batch, p, self.ctx)?.total)
    }

    fn gradient(&self, p: &ModelParams) -> Result<(f64, ModelParams)> {
        let (l, g) = gradients(self.batch, p, self.ctx)?;
        Ok((l.total, g))
    }
}

/// Hessian-vector product of the joint loss at `p`.
pub fn hvp(
    batch: &TaskBatch,
    p: &ModelParams,
    ctx: &ModelContext<'_>,
    v: &GradientBundle,
    eps: f64,
) -> Result<GradientBundle> {
    params::hvp(&TaskObjective { ctx, batch }, p, v, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::AttributeVector;
    use crate::graph::build_graph;

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[1.0, 0.0], &[0.5, 2.0]).unwrap(), 0.5);
        assert_eq!(predict(&[1.0, 3.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(predict(&[1.0, 3.0], &[2.0, -1.0]).unwrap(), predict(&[2.0, -1.0], &[1.0, 3.0]).unwrap());
        assert!(predict(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn tiny_forward(nodes: Vec<Vec<f64>>, n_users: usize) -> Forward {
        let n = nodes.len();
        Forward {
            n_users,
            nodes: Matrix::from_rows(&nodes).unwrap(),
            z_user: Matrix::zeros(n_users, 1),
            z_item: Matrix::zeros(n - n_users, 1),
        }
    }

    #[test]
    fn bpr_examples() {
        let fw = tiny_forward(vec![vec![1.0, 0.0], vec![0.3, 0.0], vec![0.3, 5.0]], 1);
        let tie = bpr_loss(&[(0, 0, 1)], &fw).unwrap();
        assert!((tie - std::f64::consts::LN_2).abs() < 1e-15);

        let fw = tiny_forward(vec![vec![1.0], vec![20.0], vec![0.0]], 1);
        let far = bpr_loss(&[(0, 0, 1)], &fw).unwrap();
        assert!((far - 2.061_153_620_314_381_3e-9).abs() < 1e-20);
        assert!(bpr_loss(&[], &fw).is_err());

        let mut prev = f64::INFINITY;
        for margin in [-2.0, 0.0, 1.0, 3.0] {
            let fw = tiny_forward(vec![vec![1.0], vec![margin], vec![0.0]], 1);
            let l = bpr_loss(&[(0, 0, 1)], &fw).unwrap();
            assert!(l < prev && l >= 0.0);
            prev = l;
        }
    }

    fn contrast_fixture(z: Vec<Vec<f64>>, labels: Vec<usize>, pairs: Vec<(usize, usize)>) -> (Matrix, ContrastBatch) {
        let users = (0..z.len()).collect();
        (Matrix::from_rows(&z).unwrap(), ContrastBatch { users, labels, pairs })
    }

    #[test]
    fn contrastive_examples() {
        let (z, b) = contrast_fixture(vec![vec![1.0, 1.0]; 3], vec![0, 0, 1], vec![(0, 1)]);
        assert!(contrastive_loss(&z, &b, 0.2, InfoNceDenominator::Literal).abs() < 1e-12);

        let (z, b) = contrast_fixture(
            vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]],
            vec![0, 0, 1],
            vec![(0, 1)],
        );
        let l = contrastive_loss(&z, &b, 1.0, InfoNceDenominator::Literal);
        assert!((l + 1.0).abs() < 1e-15);
        let wp = contrastive_loss(&z, &b, 1.0, InfoNceDenominator::WithPositive);
        assert!((wp - (1.0f64.exp() + 1.0).ln() + 1.0).abs() < 1e-15);

        let (z, b) = contrast_fixture(vec![vec![1.0], vec![1.0]], vec![0, 0], vec![]);
        assert_eq!(contrastive_loss(&z, &b, 0.2, InfoNceDenominator::Literal), 0.0);
    }

    #[test]
    fn contrast_sampling_skips_ineligible_anchors() {
        let mut rng = crate::rng::seeded(3);
        let b = ContrastBatch::sample(vec![10, 11, 12, 13], vec![0, 0, 1, 2], &mut rng);
        assert_eq!(b.pairs, vec![(0, 1), (1, 0)]);
    }

    fn toy_attr(n: usize, width: usize, seed: u64) -> AttributeTable {
        let mut rng = crate::rng::seeded(seed);
        AttributeTable {
            width,
            rows: (0..n)
                .map(|_| {
                    let mut a: Vec<usize> = (0..width).filter(|_| rng.random_bool(0.5)).collect();
                    if a.is_empty() {
                        a.push(rng.random_range(0..width));
                    }
                    AttributeVector { active: a }
                })
                .collect(),
        }
    }

    #[test]
    fn cloned_gradient_leaves_original_untouched() {
        let m = ImplicitMatrix::from_pairs(2, 3, [(0, 0), (1, 1), (1, 2)]).unwrap();
        let g = build_graph(&m, None).unwrap();
        let ua = toy_attr(2, 3, 1);
        let ia = toy_attr(3, 3, 2);
        let ctx = ModelContext::new(&g, &ua, &ia, ModelConfig { layers: 1, ..Default::default() }).unwrap();
        let mut rng = crate::rng::seeded(0);
        let p = ModelParams::init(
            2,
            3,
            2,
            AutoencoderParams::init(3, 2, &mut rng),
            AutoencoderParams::init(3, 2, &mut rng),
            &mut rng,
        );
        let before = p.clone();
        let batch = TaskBatch::sample(&[(0, 0)], &m, &[0, 1, 2], 2, ContrastBatch::default(), &mut rng);
        let c = p.clone();
        let _ = gradients(&batch, &c, &ctx).unwrap();
        drop(c);
        assert_eq!(p, before);
    }
}
