//! Task-level MAML over the joint loss: inner gradient steps on a task's
//! support set, outer step from the query loss at the adapted point, with an
//! optional Hessian correction, and periodic regeneration of augmented edges.

use std::collections::BTreeMap;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, Augmentation};
use crate::dataset::{AttributeTable, ImplicitMatrix};
use crate::error::{Result, TmagError};
use crate::eval::{evaluate_users, MapNorm};
use crate::graph::{build_graph, BipartiteGraph};
use crate::model::{forward, ContrastBatch, LossBreakdown, ModelConfig, ModelContext, ModelParams, TaskBatch, TaskObjective};
use crate::params::{hvp, hvp_eps, Objective, ParamVec};
use crate::rng;
use crate::taskgen::{Task, TaskSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetaOrder {
    /// Query gradient at the adapted point applied directly.
    FirstOrder,
    /// Query gradient pulled back through each inner step with `(I − αH)`.
    SecondOrderHvp,
}

impl FromStr for MetaOrder {
    type Err = TmagError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" | "first-order" | "first_order" => Ok(Self::FirstOrder),
            "second" | "second-order" | "second_order" | "second-order-hvp" | "second_order_hvp" => {
                Ok(Self::SecondOrderHvp)
            }
            _ => Err(TmagError::Usage(format!("unknown order {s:?} (first-order|second-order-hvp)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    /// Inner steps at meta-test time; 0 evaluates the meta-learned θ as is.
    pub test_steps: usize,
    /// Step size of meta-test adaptation.
    pub test_lr: f64,
    pub order: MetaOrder,
    pub epochs: usize,
    /// Regenerate augmented edges every this many epochs; 0 never.
    pub augment_every: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Tasks whose outer gradients are computed concurrently and averaged;
    /// 1 is strictly sequential.
    pub batch_tasks: usize,
    /// Propagate each task over the edges of its own users only.
    pub task_subgraph: bool,
    pub hvp_eps_scale: f64,
    pub neg_per_pos: usize,
    /// Cap on task users in a contrastive batch.
    pub contrast_cap: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.001,
            outer_lr: 0.001,
            inner_steps: 1,
            test_steps: 1,
            test_lr: 0.001,
            order: MetaOrder::FirstOrder,
            epochs: 50,
            augment_every: 1,
            patience: 10,
            batch_tasks: 1,
            task_subgraph: false,
            hvp_eps_scale: 1e-3,
            neg_per_pos: 4,
            contrast_cap: 512,
            top_k: 10,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0) || !(self.outer_lr > 0.0) || !(self.test_lr >= 0.0) {
            return Err(TmagError::Usage("inner and outer learning rates must be positive, the test rate non-negative".into()));
        }
        if !(1..=5).contains(&self.inner_steps) {
            return Err(TmagError::Usage(format!("inner_steps {} outside 1..=5", self.inner_steps)));
        }
        if self.batch_tasks == 0 || self.top_k == 0 {
            return Err(TmagError::Usage("batch_tasks and top_k must be at least 1".into()));
        }
        if !(self.hvp_eps_scale > 0.0) {
            return Err(TmagError::Usage("hvp eps scale must be positive".into()));
        }
        Ok(())
    }
}

/// `θ'` for one task plus the iterates it passed through.
#[derive(Debug, Clone)]
pub struct AdaptedParams<P = ModelParams> {
    pub theta_prime: P,
    pub task: usize,
    pub steps: usize,
    /// Support loss before each step.
    pub inner_losses: Vec<f64>,
    /// Parameters at which each step's support gradient was taken.
    trajectory: Vec<P>,
}

/// `steps` plain gradient steps `θ ← θ − α ∇L_S(θ)` on a copy of `theta`.
pub fn inner_update<P: ParamVec, O: Objective<P> + ?Sized>(
    theta: &P,
    support: &O,
    alpha: f64,
    steps: usize,
    task: usize,
) -> Result<AdaptedParams<P>> {
    let mut cur = theta.clone();
    let mut inner_losses = Vec::with_capacity(steps);
    let mut trajectory = Vec::with_capacity(steps);
    for step in 0..steps {
        let (l, g) = support.gradient(&cur)?;
        if !l.is_finite() || !g.is_finite() {
            return Err(TmagError::numeric(format!("task {task}: non-finite inner step {step} (loss {l})")));
        }
        inner_losses.push(l);
        trajectory.push(cur.clone());
        cur.axpy(-alpha, &g);
    }
    Ok(AdaptedParams {
        theta_prime: cur,
        task,
        steps,
        inner_losses,
        trajectory,
    })
}

/// Query loss at `θ'` and the outer gradient for `θ`.
pub fn meta_gradient<P, S, Q>(
    adapted: &AdaptedParams<P>,
    support: &S,
    query: &Q,
    alpha: f64,
    order: MetaOrder,
    eps_scale: f64,
) -> Result<(f64, P)>
where
    P: ParamVec,
    S: Objective<P> + ?Sized,
    Q: Objective<P> + ?Sized,
{
    let (lq, mut g) = query.gradient(&adapted.theta_prime)?;
    if order == MetaOrder::SecondOrderHvp && alpha != 0.0 {
        for point in adapted.trajectory.iter().rev() {
            let hv = hvp(support, point, &g, hvp_eps(point, eps_scale))?;
            g.axpy(-alpha, &hv);
        }
    }
    if !lq.is_finite() || !g.is_finite() {
        return Err(TmagError::numeric(format!("task {}: non-finite query gradient (loss {lq})", adapted.task)));
    }
    Ok((lq, g))
}

/// `θ − β · meta_gradient`. Returns the new parameters and the query loss.
#[allow(clippy::too_many_arguments)]
pub fn outer_update<P, S, Q>(
    theta: &P,
    adapted: &AdaptedParams<P>,
    support: &S,
    query: &Q,
    alpha: f64,
    beta: f64,
    order: MetaOrder,
    eps_scale: f64,
) -> Result<(P, f64)>
where
    P: ParamVec,
    S: Objective<P> + ?Sized,
    Q: Objective<P> + ?Sized,
{
    let (lq, g) = meta_gradient(adapted, support, query, alpha, order, eps_scale)?;
    let mut out = theta.clone();
    out.axpy(-beta, &g);
    Ok((out, lq))
}

/// Task users (capped) plus as many other users as in-batch negatives.
pub fn contrast_batch(
    task_users: &[usize],
    labels: &[usize],
    others: &[usize],
    cap: usize,
    rng: &mut impl Rng,
) -> ContrastBatch {
    let pick = |pool: &[usize], n: usize, rng: &mut _| -> Vec<usize> {
        let n = n.min(pool.len());
        let mut v: Vec<usize> = index::sample(rng, pool.len(), n).into_iter().map(|k| pool[k]).collect();
        v.sort_unstable();
        v
    };
    let mut users = pick(task_users, cap, rng);
    let mut in_task = users.clone();
    in_task.sort_unstable();
    let outside: Vec<usize> = others.iter().copied().filter(|u| in_task.binary_search(u).is_err()).collect();
    users.extend(pick(&outside, users.len(), rng));
    let labels = users.iter().map(|&u| labels[u]).collect();
    ContrastBatch::sample(users, labels, rng)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub task: Option<usize>,
    pub inner_loss: Option<f64>,
    pub query_loss: Option<f64>,
    pub val_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub breakdown: Option<LossBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub augmented_edges: Option<usize>,
}

impl LogEntry {
    fn epoch_line(epoch: usize) -> Self {
        Self {
            epoch,
            task: None,
            inner_loss: None,
            query_loss: None,
            val_recall: None,
            breakdown: None,
            augmented_edges: None,
        }
    }
}

/// Held-out users scored with the unadapted θ for early stopping.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub users: &'a [usize],
    pub query: &'a ImplicitMatrix,
    pub candidates: &'a [usize],
}

pub struct MetaTrainInput<'a> {
    pub user_attr: &'a AttributeTable,
    pub item_attr: &'a AttributeTable,
    pub model: ModelConfig,
    /// Edges of the base graph.
    pub observed: &'a ImplicitMatrix,
    /// Pairs never drawn as negatives.
    pub known: &'a ImplicitMatrix,
    pub tasks: &'a TaskSet,
    /// Cluster label per user id.
    pub labels: &'a [usize],
    /// Negative-sampling and augmentation candidates.
    pub item_pool: &'a [usize],
    pub validation: Option<Validation<'a>>,
    pub augment: Option<AugmentConfig>,
}

#[derive(Debug, Clone)]
pub struct MetaTrainOutcome {
    pub params: ModelParams,
    pub augmentation: Augmentation,
    pub log: Vec<LogEntry>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub initial_val_recall: Option<f64>,
    pub best_val_recall: Option<f64>,
}

/// Propagate on `current`, score candidates against each user's observed
/// items and rebuild the graph as `observed` plus the new edges.
#[allow(clippy::too_many_arguments)]
pub fn regenerate_graph(
    params: &ModelParams,
    ctx: &ModelContext<'_>,
    observed: &ImplicitMatrix,
    users: &[usize],
    candidates: &[usize],
    cfg: &AugmentConfig,
) -> Result<(BipartiteGraph, Augmentation)> {
    let fw = forward(params, ctx)?;
    let base = build_graph(observed, None)?;
    let aug = augment::generate(&base, &fw.nodes, &fw.z_item, &params.aug, cfg, users, candidates);
    let g = build_graph(observed, Some(&aug.pairs()))?;
    Ok((g, aug))
}

/// Mean Recall@K of the validation users under θ.
pub fn validation_recall(params: &ModelParams, ctx: &ModelContext<'_>, v: &Validation<'_>, exclusions: &ImplicitMatrix, k: usize) -> Result<f64> {
    let fw = forward(params, ctx)?;
    let per_user = evaluate_users(&fw, v.users, v.candidates, exclusions, v.query, k, MapNorm::MinRelevantK)?;
    if per_user.is_empty() {
        return Ok(0.0);
    }
    Ok(per_user.iter().map(|m| m.recall).sum::<f64>() / per_user.len() as f64)
}

struct TaskResult {
    entry: LogEntry,
    grad: ModelParams,
}

fn run_task(
    theta: &ModelParams,
    task: &Task,
    epoch: usize,
    ctx: &ModelContext<'_>,
    input: &MetaTrainInput<'_>,
    all_users: &[usize],
    cfg: &MetaConfig,
) -> Result<Option<TaskResult>> {
    task.check_disjoint()?;
    let mut r = rng::stream(cfg.seed, &[rng::DOMAIN_TASK, epoch as u64, task.id as u64]);
    let contrast = contrast_batch(&task.users, input.labels, all_users, cfg.contrast_cap, &mut r);
    let support = TaskBatch::sample(&task.support, input.known, input.item_pool, cfg.neg_per_pos, contrast.clone(), &mut r);
    let query = TaskBatch::sample(&task.query, input.known, input.item_pool, cfg.neg_per_pos, contrast, &mut r);
    if support.triples.is_empty() || query.triples.is_empty() {
        warn!("task {} skipped: no negative could be sampled", task.id);
        return Ok(None);
    }
    let s_obj = TaskObjective { ctx, batch: &support };
    let q_obj = TaskObjective { ctx, batch: &query };
    let adapted = inner_update(theta, &s_obj, cfg.inner_lr, cfg.inner_steps, task.id)?;
    let (lq, grad) = meta_gradient(&adapted, &s_obj, &q_obj, cfg.inner_lr, cfg.order, cfg.hvp_eps_scale)?;
    let breakdown = crate::model::total_loss(&query, &adapted.theta_prime, ctx)?;
    Ok(Some(TaskResult {
        entry: LogEntry {
            task: Some(task.id),
            inner_loss: adapted.inner_losses.first().copied(),
            query_loss: Some(lq),
            breakdown: Some(breakdown),
            ..LogEntry::epoch_line(epoch)
        },
        grad,
    }))
}

/// Meta-train from `theta0`. `on_epoch` sees the parameters after every
/// epoch (for checkpointing).
pub fn meta_train(
    theta0: ModelParams,
    input: &MetaTrainInput<'_>,
    cfg: &MetaConfig,
    mut on_epoch: impl FnMut(usize, &ModelParams, &[LogEntry]) -> Result<()>,
) -> Result<MetaTrainOutcome> {
    cfg.validate()?;
    if input.tasks.is_empty() {
        return Err(TmagError::data("meta-training needs at least one task"));
    }
    let mut graph = build_graph(input.observed, None)?;
    let mut theta = theta0;
    let mut log = Vec::new();
    let mut augmentation = Augmentation::default();
    let mut all_users: Vec<usize> = input.tasks.tasks.iter().flat_map(|t| t.users.iter().copied()).collect();
    all_users.sort_unstable();
    all_users.dedup();
    let aug_users = input.observed.active_users();

    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut initial_val = None;
    if let Some(v) = &input.validation {
        let ctx = ModelContext::new(&graph, input.user_attr, input.item_attr, input.model)?;
        let r = validation_recall(&theta, &ctx, v, input.observed, cfg.top_k)?;
        initial_val = Some(r);
        best = Some((r, 0, theta.clone()));
    }
    let mut stale = 0;
    let mut stopped_early = false;
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        epochs_run = epoch + 1;
        let ctx = ModelContext::new(&graph, input.user_attr, input.item_attr, input.model)?;
        let mut order: Vec<usize> = (0..input.tasks.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::DOMAIN_ORDER, epoch as u64]));

        let one = |theta: &ModelParams, t: usize| {
            let task = &input.tasks.tasks[t];
            if cfg.task_subgraph {
                let sub = graph.restrict_to_users(&task.users);
                run_task(theta, task, epoch, &ctx.with_graph(&sub), input, &all_users, cfg)
            } else {
                run_task(theta, task, epoch, &ctx, input, &all_users, cfg)
            }
        };
        for chunk in order.chunks(cfg.batch_tasks) {
            let results: Vec<Option<TaskResult>> = if chunk.len() == 1 {
                vec![one(&theta, chunk[0])?]
            } else {
                chunk.par_iter().map(|&t| one(&theta, t)).collect::<Result<_>>()?
            };
            let done: Vec<TaskResult> = results.into_iter().flatten().collect();
            if done.is_empty() {
                continue;
            }
            let step = cfg.outer_lr / done.len() as f64;
            for r in done {
                theta.axpy(-step, &r.grad);
                log.push(r.entry);
            }
        }

        let mut line = LogEntry::epoch_line(epoch);
        if let Some(acfg) = input.augment.filter(|_| cfg.augment_every > 0 && (epoch + 1) % cfg.augment_every == 0) {
            let (g, a) = regenerate_graph(&theta, &ctx, input.observed, &aug_users, input.item_pool, &acfg)?;
            info!("epoch {epoch}: {} augmented edges", a.edges.len());
            line.augmented_edges = Some(a.edges.len());
            graph = g;
            augmentation = a;
        }
        if let Some(v) = &input.validation {
            let ctx = ModelContext::new(&graph, input.user_attr, input.item_attr, input.model)?;
            let r = validation_recall(&theta, &ctx, v, input.observed, cfg.top_k)?;
            line.val_recall = Some(r);
            let (best_r, _, _) = best.as_ref().expect("set with validation");
            if r > *best_r {
                best = Some((r, epoch + 1, theta.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log.push(line);
        on_epoch(epoch, &theta, &log)?;
        if input.validation.is_some() && stale >= cfg.patience {
            info!("early stop after epoch {epoch}");
            stopped_early = true;
            break;
        }
    }

    let (params, best_epoch, best_val) = match best {
        Some((r, e, p)) if e > 0 => (p, Some(e), Some(r)),
        Some((r, _, _)) => (theta, None, Some(r)),
        None => (theta, None, None),
    };
    Ok(MetaTrainOutcome {
        params,
        augmentation,
        log,
        epochs_run,
        best_epoch,
        stopped_early,
        initial_val_recall: initial_val,
        best_val_recall: best_val,
    })
}

pub struct MetaTestInput<'a> {
    pub ctx: ModelContext<'a>,
    /// Support interactions of the task being evaluated.
    pub support: &'a ImplicitMatrix,
    pub known: &'a ImplicitMatrix,
    /// Users to adapt for.
    pub users: &'a [usize],
    /// Cluster per user id.
    pub clusters: &'a [usize],
    pub item_pool: &'a [usize],
    /// Separates RNG streams of the evaluation tasks.
    pub task_no: u8,
}

/// Adapt θ once per cluster on the support interactions of that cluster's
/// users and hand each adapted copy to `f` together with its users. Only one
/// adapted copy is alive at a time.
pub fn meta_test_adapt_each(
    theta: &ModelParams,
    input: &MetaTestInput<'_>,
    cfg: &MetaConfig,
    mut f: impl FnMut(usize, &[usize], &ModelParams) -> Result<()>,
) -> Result<()> {
    let empty: Vec<usize> = input.users.iter().copied().filter(|&u| input.support.degree(u) == 0).collect();
    if !empty.is_empty() {
        return Err(TmagError::EmptySupport(empty));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &u in input.users {
        groups.entry(input.clusters[u]).or_default().push(u);
    }
    for (k, members) in groups {
        if cfg.test_steps == 0 {
            f(k, &members, theta)?;
            continue;
        }
        let mut r = rng::stream(cfg.seed, &[rng::DOMAIN_META_TEST, input.task_no as u64, k as u64]);
        let positives: Vec<(usize, usize)> = members
            .iter()
            .flat_map(|&u| input.support.items_of(u).iter().map(move |&i| (u, i)))
            .collect();
        let contrast = contrast_batch(&members, input.clusters, input.users, cfg.contrast_cap, &mut r);
        let batch = TaskBatch::sample(&positives, input.known, input.item_pool, cfg.neg_per_pos, contrast, &mut r);
        if batch.triples.is_empty() {
            warn!("cluster {k}: no support triple, evaluating unadapted parameters");
            f(k, &members, theta)?;
            continue;
        }
        let obj = TaskObjective { ctx: &input.ctx, batch: &batch };
        let adapted = inner_update(theta, &obj, cfg.test_lr, cfg.test_steps, k)?;
        f(k, &members, &adapted.theta_prime)?;
    }
    Ok(())
}

/// Collecting form of [`meta_test_adapt_each`]: `(cluster, users, θ'_k)`.
pub fn meta_test_adapt(
    theta: &ModelParams,
    input: &MetaTestInput<'_>,
    cfg: &MetaConfig,
) -> Result<Vec<(usize, Vec<usize>, ModelParams)>> {
    let mut out = Vec::new();
    meta_test_adapt_each(theta, input, cfg, |k, users, p| {
        out.push((k, users.to_vec(), p.clone()));
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::QuadraticObjective;

    #[test]
    fn inner_steps_on_scalar_quadratic() {
        let q = QuadraticObjective::new(vec![1.0]);
        let a = inner_update(&vec![1.0], &q, 0.1, 1, 0).unwrap();
        assert!((a.theta_prime[0] - 0.9).abs() < 1e-15);
        let a2 = inner_update(&vec![1.0], &q, 0.1, 2, 0).unwrap();
        assert!((a2.theta_prime[0] - 0.81).abs() < 1e-15);
        let flat = QuadraticObjective::new(vec![0.0]);
        assert_eq!(inner_update(&vec![3.0], &flat, 0.1, 3, 0).unwrap().theta_prime, vec![3.0]);
    }

    #[test]
    fn outer_steps_match_hand_maml() {
        let q = QuadraticObjective::new(vec![1.0]);
        let theta = vec![1.0];
        let a = inner_update(&theta, &q, 0.1, 1, 0).unwrap();
        let (fo, _) = outer_update(&theta, &a, &q, &q, 0.1, 1.0, MetaOrder::FirstOrder, 1e-3).unwrap();
        let (so, _) = outer_update(&theta, &a, &q, &q, 0.1, 1.0, MetaOrder::SecondOrderHvp, 1e-3).unwrap();
        assert!((fo[0] - 0.1).abs() < 1e-6);
        assert!((so[0] - 0.19).abs() < 1e-6);
        let (same, _) = outer_update(&theta, &a, &q, &q, 0.1, 0.0, MetaOrder::SecondOrderHvp, 1e-3).unwrap();
        assert_eq!(same, theta);
    }

    #[test]
    fn second_order_with_zero_inner_rate_is_first_order() {
        let q = QuadraticObjective::new(vec![2.0, 4.0]);
        let theta = vec![0.7, -0.2];
        let a = inner_update(&theta, &q, 0.0, 1, 0).unwrap();
        let fo = outer_update(&theta, &a, &q, &q, 0.0, 0.5, MetaOrder::FirstOrder, 1e-3).unwrap();
        let so = outer_update(&theta, &a, &q, &q, 0.0, 0.5, MetaOrder::SecondOrderHvp, 1e-3).unwrap();
        assert_eq!(fo.0, so.0);
    }

    #[test]
    fn order_parsing() {
        assert_eq!("first-order".parse::<MetaOrder>().unwrap(), MetaOrder::FirstOrder);
        assert_eq!("second_order_hvp".parse::<MetaOrder>().unwrap(), MetaOrder::SecondOrderHvp);
        assert!("third".parse::<MetaOrder>().is_err());
    }
}
