//! Interaction augmentation: a structure channel and an attribute channel
//! score unobserved user-item pairs from the user's observed neighbours,
//! the two are blended, and pairs above a threshold become extra edges.
//!
//! Structure channel: `σ(Σ_{j∈N_u} e_jᵀ W_g e_i)` over final-layer item
//! embeddings. Attribute channel: `σ(Σ_{j∈N_u} z_jᵀ W_a z_i)` over item
//! latent attributes. Blend: `α E¹ + (1 − α) E²`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TmagError};
use crate::graph::{BipartiteGraph, Provenance};
use crate::linalg::{axpy, dot, sigmoid, Matrix};
use crate::params::ParamVec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// `d × d`, structure channel.
    pub w_g: Matrix,
    /// `d_z × d_z`, attribute channel.
    pub w_a: Matrix,
}

impl AugmentParams {
    pub fn init(d: usize, d_z: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            w_g: Matrix::xavier(d, d, rng),
            w_a: Matrix::xavier(d_z, d_z, rng),
        }
    }

    /// All-zero channels: every score starts at 0.5, so nothing is added
    /// before the generator has been trained.
    pub fn zeros(d: usize, d_z: usize) -> Self {
        Self {
            w_g: Matrix::zeros(d, d),
            w_a: Matrix::zeros(d_z, d_z),
        }
    }
}

impl ParamVec for AugmentParams {
    fn zeros_like(&self) -> Self {
        Self {
            w_g: self.w_g.zeros_like(),
            w_a: self.w_a.zeros_like(),
        }
    }

    fn axpy(&mut self, a: f64, x: &Self) {
        self.w_g.axpy(a, &x.w_g);
        self.w_a.axpy(a, &x.w_a);
    }

    fn dot(&self, o: &Self) -> f64 {
        ParamVec::dot(&self.w_g, &o.w_g) + ParamVec::dot(&self.w_a, &o.w_a)
    }

    fn scale(&mut self, a: f64) {
        self.w_g.scale(a);
        self.w_a.scale(a);
    }

    fn for_each_scalar(&self, f: &mut dyn FnMut(f64)) {
        self.w_g.for_each_scalar(f);
        self.w_a.for_each_scalar(f);
    }

    fn for_each_scalar_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.w_g.for_each_scalar_mut(f);
        self.w_a.for_each_scalar_mut(f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Weight of the structure channel.
    pub alpha: f64,
    /// Edge threshold `t`; strict `E > t`.
    pub threshold: f64,
    /// Sampled unobserved cells per observed positive in the generator loss.
    pub neg_per_pos: usize,
    /// Candidate cap per user when thresholding.
    pub top_per_user: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            threshold: 0.8,
            neg_per_pos: 4,
            top_per_user: 500,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TmagError::Usage(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(TmagError::Usage(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

fn neighbour_sum(rows: &Matrix, offset: usize, neighbors: &[usize]) -> Vec<f64> {
    let mut s = vec![0.0; rows.cols()];
    for &j in neighbors {
        axpy(&mut s, 1.0, rows.row(offset + j));
    }
    s
}

/// Structure-channel score for item `i` given the user's neighbour items.
/// `item_emb` rows are indexed by item id. `None` for an empty neighbourhood.
pub fn score_graph(item_emb: &Matrix, p: &AugmentParams, item: usize, neighbors: &[usize]) -> Option<f64> {
    if neighbors.is_empty() {
        return None;
    }
    let s = neighbour_sum(item_emb, 0, neighbors);
    Some(sigmoid(dot(&s, &p.w_g.matvec(item_emb.row(item)))))
}

/// Attribute-channel score for item `i` given the user's neighbour items.
pub fn score_attr(item_z: &Matrix, p: &AugmentParams, item: usize, neighbors: &[usize]) -> Option<f64> {
    if neighbors.is_empty() {
        return None;
    }
    let t = neighbour_sum(item_z, 0, neighbors);
    Some(sigmoid(dot(&t, &p.w_a.matvec(item_z.row(item)))))
}

#[inline]
pub fn blend(e1: f64, e2: f64, alpha: f64) -> f64 {
    alpha * e1 + (1.0 - alpha) * e2
}

/// Mean squared error between sampled scores and adjacency entries.
pub fn gen_loss(scores: &[f64], targets: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(TmagError::data("generator loss over an empty sample"));
    }
    if scores.len() != targets.len() {
        return Err(TmagError::DimensionMismatch {
            what: "generator targets",
            expected: scores.len(),
            got: targets.len(),
        });
    }
    let sse: f64 = scores.iter().zip(targets).map(|(e, a)| (e - a) * (e - a)).sum();
    Ok(sse / scores.len() as f64)
}

/// Pairs with score strictly above `t`.
pub fn threshold_edges(scored: &[(usize, usize, f64)], t: f64) -> Vec<(usize, usize)> {
    scored
        .iter()
        .filter(|(_, _, s)| *s > t)
        .map(|&(u, i, _)| (u, i))
        .collect()
}

/// One sampled cell of the adjacency matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenCell {
    pub user: usize,
    pub item: usize,
    pub target: f64,
}

/// Observed item neighbours of `user`.
pub fn observed_items(g: &BipartiteGraph, user: usize) -> Vec<usize> {
    let n_users = g.n_users();
    g.neighbors(user)
        .iter()
        .zip(g.neighbor_provenance(user))
        .filter(|(_, p)| **p == Provenance::Observed)
        .map(|(&v, _)| v - n_users)
        .collect()
}

/// Accumulators for [`gen_forward_backward`].
pub struct GenGrads<'a> {
    /// Gradient w.r.t. combined node embeddings (users then items).
    pub d_nodes: &'a mut Matrix,
    pub d_item_z: &'a mut Matrix,
    pub d_aug: &'a mut AugmentParams,
    /// Multiplier applied to every contribution (the loss weight).
    pub scale: f64,
    /// When false, only `d_aug` receives gradient.
    pub into_embeddings: bool,
}

/// Sampled generator loss over `cells`, and its gradient when `grads` is set.
/// Cells whose user has no observed neighbour are skipped; returns `None`
/// when no cell remains. `nodes` holds the graph-side embeddings of every
/// node (users then items).
pub fn gen_forward_backward(
    cells: &[GenCell],
    g: &BipartiteGraph,
    nodes: &Matrix,
    item_z: &Matrix,
    p: &AugmentParams,
    alpha: f64,
    mut grads: Option<GenGrads<'_>>,
) -> Option<f64> {
    let n_users = g.n_users();
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by_key(|&c| cells[c].user);
    let groups: Vec<(Vec<usize>, Vec<usize>)> = order
        .chunk_by(|&a, &b| cells[a].user == cells[b].user)
        .filter_map(|grp| {
            let nb = observed_items(g, cells[grp[0]].user);
            (!nb.is_empty()).then(|| (nb, grp.to_vec()))
        })
        .collect();
    let n_valid: usize = groups.iter().map(|(_, grp)| grp.len()).sum();
    if n_valid == 0 {
        return None;
    }
    let n = n_valid as f64;
    let mut loss = 0.0;
    for (nb, grp) in &groups {
        let s = neighbour_sum(nodes, n_users, nb);
        let t = neighbour_sum(item_z, 0, nb);
        let mut acc_a = vec![0.0; s.len()];
        let mut acc_b = vec![0.0; t.len()];
        let mut d_wg_rhs = vec![0.0; s.len()];
        let mut d_wa_rhs = vec![0.0; t.len()];
        for &c in grp {
            let c = &cells[c];
            let e_i = nodes.row(n_users + c.item);
            let z_i = item_z.row(c.item);
            // an observed target is scored without itself in the neighbourhood,
            // as every candidate is at generation time
            let own = nb.contains(&c.item);
            let (s_c, t_c) = if own {
                let mut s_c = s.clone();
                let mut t_c = t.clone();
                axpy(&mut s_c, -1.0, e_i);
                axpy(&mut t_c, -1.0, z_i);
                (s_c, t_c)
            } else {
                (s.clone(), t.clone())
            };
            let a = p.w_g.matvec(e_i);
            let b = p.w_a.matvec(z_i);
            let e1 = sigmoid(dot(&s_c, &a));
            let e2 = sigmoid(dot(&t_c, &b));
            let r = blend(e1, e2, alpha) - c.target;
            loss += r * r;
            let Some(gr) = grads.as_mut() else { continue };
            let d_e = gr.scale * 2.0 * r / n;
            let d_pre1 = d_e * alpha * e1 * (1.0 - e1);
            let d_pre2 = d_e * (1.0 - alpha) * e2 * (1.0 - e2);
            axpy(&mut d_wg_rhs, d_pre1, e_i);
            axpy(&mut d_wa_rhs, d_pre2, z_i);
            if own {
                gr.d_aug.w_g.add_outer(-d_pre1, e_i, e_i);
                gr.d_aug.w_a.add_outer(-d_pre2, z_i, z_i);
            }
            if gr.into_embeddings {
                axpy(&mut acc_a, d_pre1, &a);
                axpy(&mut acc_b, d_pre2, &b);
                if own {
                    axpy(gr.d_nodes.row_mut(n_users + c.item), -d_pre1, &a);
                    axpy(gr.d_item_z.row_mut(c.item), -d_pre2, &b);
                }
                axpy(gr.d_nodes.row_mut(n_users + c.item), d_pre1, &p.w_g.matvec_t(&s_c));
                axpy(gr.d_item_z.row_mut(c.item), d_pre2, &p.w_a.matvec_t(&t_c));
            }
        }
        let Some(gr) = grads.as_mut() else { continue };
        gr.d_aug.w_g.add_outer(1.0, &s, &d_wg_rhs);
        gr.d_aug.w_a.add_outer(1.0, &t, &d_wa_rhs);
        if gr.into_embeddings {
            for &j in nb {
                axpy(gr.d_nodes.row_mut(n_users + j), 1.0, &acc_a);
                axpy(gr.d_item_z.row_mut(j), 1.0, &acc_b);
            }
        }
    }
    Some(loss / n)
}

/// Newly generated edges with their blended scores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub edges: Vec<(usize, usize, f64)>,
}

impl Augmentation {
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|&(u, i, _)| (u, i)).collect()
    }

    pub fn mean_score(&self) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        self.edges.iter().map(|e| e.2).sum::<f64>() / self.edges.len() as f64
    }

    /// TSV `user<TAB>item<TAB>score` plus a trailing `# count=.. mean_score=..` line.
    pub fn write_report(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (u, i, s) in &self.edges {
            writeln!(w, "{u}\t{i}\t{s}")?;
        }
        writeln!(w, "# count={} mean_score={}", self.edges.len(), self.mean_score())?;
        w.flush()?;
        Ok(())
    }
}

/// Score unobserved `(user, candidate)` cells and keep those above the
/// threshold, considering at most `top_per_user` best candidates per user.
/// Users without observed neighbours are skipped.
pub fn generate(
    g: &BipartiteGraph,
    nodes: &Matrix,
    item_z: &Matrix,
    p: &AugmentParams,
    cfg: &AugmentConfig,
    users: &[usize],
    candidates: &[usize],
) -> Augmentation {
    let n_users = g.n_users();
    let per_user: Vec<Vec<(usize, usize, f64)>> = users
        .par_iter()
        .map(|&u| {
            let nb = observed_items(g, u);
            if nb.is_empty() {
                return Vec::new();
            }
            let s = neighbour_sum(nodes, n_users, &nb);
            let t = neighbour_sum(item_z, 0, &nb);
            let q1 = p.w_g.matvec_t(&s);
            let q2 = p.w_a.matvec_t(&t);
            let mut scored: Vec<(usize, f64)> = candidates
                .iter()
                .filter(|&&i| !g.has_edge(u, i))
                .map(|&i| {
                    let e1 = sigmoid(dot(&q1, nodes.row(n_users + i)));
                    let e2 = sigmoid(dot(&q2, item_z.row(i)));
                    (i, blend(e1, e2, cfg.alpha))
                })
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.truncate(cfg.top_per_user);
            scored
                .into_iter()
                .filter(|&(_, s)| s > cfg.threshold)
                .map(|(i, s)| (u, i, s))
                .collect()
        })
        .collect();
    Augmentation {
        edges: per_user.into_iter().flatten().collect(),
    }
}
