//! Matrix factorization trained with BPR, for directional comparisons.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImplicitMatrix;
use crate::error::{Result, TmagError};
use crate::eval::Scorer;
use crate::linalg::{dot, sigmoid, softplus, Matrix};
use crate::model::init_rows;
use crate::params::ParamVec;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfParams {
    pub user_emb: Matrix,
    pub item_emb: Matrix,
}

impl MfParams {
    pub fn init(n_users: usize, n_items: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            user_emb: init_rows(n_users, d, rng),
            item_emb: init_rows(n_items, d, rng),
        }
    }

    /// Redraw rows for entities unseen in training.
    pub fn reinit_rows(&mut self, users: &[usize], items: &[usize], rng: &mut impl Rng) {
        let fresh_u = init_rows(users.len(), self.user_emb.cols(), rng);
        let fresh_i = init_rows(items.len(), self.item_emb.cols(), rng);
        for (k, &u) in users.iter().enumerate() {
            self.user_emb.row_mut(u).copy_from_slice(fresh_u.row(k));
        }
        for (k, &i) in items.iter().enumerate() {
            self.item_emb.row_mut(i).copy_from_slice(fresh_i.row(k));
        }
    }
}

impl Scorer for MfParams {
    fn score(&self, user: usize, item: usize) -> f64 {
        dot(self.user_emb.row(user), self.item_emb.row(item))
    }
}

impl ParamVec for MfParams {
    fn zeros_like(&self) -> Self {
        Self {
            user_emb: self.user_emb.zeros_like(),
            item_emb: self.item_emb.zeros_like(),
        }
    }

    fn axpy(&mut self, a: f64, x: &Self) {
        self.user_emb.axpy(a, &x.user_emb);
        self.item_emb.axpy(a, &x.item_emb);
    }

    fn dot(&self, o: &Self) -> f64 {
        ParamVec::dot(&self.user_emb, &o.user_emb) + ParamVec::dot(&self.item_emb, &o.item_emb)
    }

    fn scale(&mut self, a: f64) {
        ParamVec::scale(&mut self.user_emb, a);
        ParamVec::scale(&mut self.item_emb, a);
    }

    fn for_each_scalar(&self, f: &mut dyn FnMut(f64)) {
        self.user_emb.for_each_scalar(f);
        self.item_emb.for_each_scalar(f);
    }

    fn for_each_scalar_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.user_emb.for_each_scalar_mut(f);
        self.item_emb.for_each_scalar_mut(f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfConfig {
    pub dim: usize,
    pub lr: f64,
    pub epochs: usize,
    /// L2 weight on the rows of each triple.
    pub reg: f64,
    pub seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            lr: 0.05,
            epochs: 30,
            reg: 1e-4,
            seed: 0,
        }
    }
}

/// `Σ softplus(−(ŷ_ui − ŷ_uj)) + reg Σ (‖e_u‖² + ‖e_i‖² + ‖e_j‖²)` over
/// `triples`, and its gradient.
pub fn mf_loss_and_grad(p: &MfParams, triples: &[(usize, usize, usize)], reg: f64) -> (f64, MfParams) {
    let mut g = p.zeros_like();
    let mut loss = 0.0;
    for &(u, i, j) in triples {
        let (eu, ei, ej) = (p.user_emb.row(u), p.item_emb.row(i), p.item_emb.row(j));
        let x = dot(eu, ei) - dot(eu, ej);
        loss += softplus(-x) + reg * (dot(eu, eu) + dot(ei, ei) + dot(ej, ej));
        let dx = -sigmoid(-x);
        let d = eu.len();
        for k in 0..d {
            g.user_emb[(u, k)] += dx * (ei[k] - ej[k]) + 2.0 * reg * eu[k];
            g.item_emb[(i, k)] += dx * eu[k] + 2.0 * reg * ei[k];
            g.item_emb[(j, k)] += -dx * eu[k] + 2.0 * reg * ej[k];
        }
    }
    (loss, g)
}

fn sgd_pass(
    p: &mut MfParams,
    pairs: &mut [(usize, usize)],
    known: &ImplicitMatrix,
    pool: &[usize],
    lr: f64,
    reg: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    pairs.shuffle(rng);
    let d = p.user_emb.cols();
    let mut total = 0.0;
    for &(u, i) in pairs.iter() {
        let Some(j) = (0..64).map(|_| pool[rng.random_range(0..pool.len())]).find(|&j| !known.contains(u, j)) else {
            continue;
        };
        let eu = p.user_emb.row(u).to_vec();
        let ei = p.item_emb.row(i).to_vec();
        let ej = p.item_emb.row(j).to_vec();
        let x = dot(&eu, &ei) - dot(&eu, &ej);
        total += softplus(-x);
        let dx = -sigmoid(-x);
        for k in 0..d {
            p.user_emb[(u, k)] -= lr * (dx * (ei[k] - ej[k]) + 2.0 * reg * eu[k]);
            p.item_emb[(i, k)] -= lr * (dx * eu[k] + 2.0 * reg * ei[k]);
            p.item_emb[(j, k)] -= lr * (-dx * eu[k] + 2.0 * reg * ej[k]);
        }
    }
    if !total.is_finite() {
        return Err(TmagError::numeric("MF-BPR loss became non-finite"));
    }
    Ok(total)
}

/// SGD over shuffled positives of `m`, one uniform negative from `pool`
/// per positive. Returns the parameters and the loss of each epoch.
pub fn mf_train(
    m: &ImplicitMatrix,
    pool: &[usize],
    cfg: &MfConfig,
) -> Result<(MfParams, Vec<f64>)> {
    if m.nnz() == 0 || pool.is_empty() {
        return Err(TmagError::data("MF training needs interactions and candidate items"));
    }
    let mut r = rng::stream(cfg.seed, &[rng::DOMAIN_MF, 0]);
    let mut p = MfParams::init(m.n_users(), m.n_items(), cfg.dim, &mut r);
    let mut pairs: Vec<(usize, usize)> = m.pairs().collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        losses.push(sgd_pass(&mut p, &mut pairs, m, pool, cfg.lr, cfg.reg, &mut r)? / pairs.len() as f64);
    }
    Ok((p, losses))
}

/// `steps` SGD passes over the support interactions only.
pub fn mf_finetune(
    p: &MfParams,
    support: &ImplicitMatrix,
    known: &ImplicitMatrix,
    pool: &[usize],
    lr: f64,
    steps: usize,
    cfg: &MfConfig,
) -> Result<MfParams> {
    let mut out = p.clone();
    if steps == 0 || lr == 0.0 || pool.is_empty() {
        return Ok(out);
    }
    let mut r = rng::stream(cfg.seed, &[rng::DOMAIN_MF, 1]);
    let mut pairs: Vec<(usize, usize)> = support.pairs().collect();
    for _ in 0..steps {
        sgd_pass(&mut out, &mut pairs, known, pool, lr, cfg.reg, &mut r)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_epochs_returns_init() {
        let m = ImplicitMatrix::from_pairs(2, 2, [(0, 0), (1, 1)]).unwrap();
        let cfg = MfConfig { dim: 3, epochs: 0, ..Default::default() };
        let (p, losses) = mf_train(&m, &[0, 1], &cfg).unwrap();
        let mut r = rng::stream(cfg.seed, &[rng::DOMAIN_MF, 0]);
        assert_eq!(p, MfParams::init(2, 2, 3, &mut r));
        assert!(losses.is_empty());
    }

    #[test]
    fn separable_toy_is_learned() {
        let m = ImplicitMatrix::from_pairs(2, 2, [(0, 0), (1, 1)]).unwrap();
        let cfg = MfConfig { dim: 4, epochs: 300, lr: 0.1, ..Default::default() };
        let (p, _) = mf_train(&m, &[0, 1], &cfg).unwrap();
        assert!(p.score(0, 0) > p.score(0, 1));
        assert!(p.score(1, 1) > p.score(1, 0));
    }

    #[test]
    fn finetune_noops_and_sparsity() {
        let m = ImplicitMatrix::from_pairs(3, 4, [(0, 0), (1, 1), (2, 2)]).unwrap();
        let cfg = MfConfig { dim: 3, epochs: 2, ..Default::default() };
        let (p, _) = mf_train(&m, &[0, 1, 2, 3], &cfg).unwrap();
        assert_eq!(mf_finetune(&p, &m, &m, &[0, 1, 2, 3], 0.1, 0, &cfg).unwrap(), p);
        assert_eq!(mf_finetune(&p, &m, &m, &[0, 1, 2, 3], 0.0, 5, &cfg).unwrap(), p);

        // user 2 only; negatives restricted to item 3
        let s = ImplicitMatrix::from_pairs(3, 4, [(2, 2)]).unwrap();
        let q = mf_finetune(&p, &s, &m, &[3], 0.1, 3, &cfg).unwrap();
        assert_eq!(q.user_emb.row(0), p.user_emb.row(0));
        assert_eq!(q.user_emb.row(1), p.user_emb.row(1));
        assert_eq!(q.item_emb.row(0), p.item_emb.row(0));
        assert_ne!(q.user_emb.row(2), p.user_emb.row(2));
    }
}
