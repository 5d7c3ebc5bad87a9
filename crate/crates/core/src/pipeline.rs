//! End-to-end orchestration shared by the command line and the experiments.
//!
//! Stages pass plain values to each other; the CLI persists them between
//! commands and the experiment presets keep them in memory.

use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::Augmentation;
use crate::autoencoder::{train_autoencoder, AeTrainReport, AutoencoderParams};
use crate::baseline::{mf_finetune, mf_train, MfParams};
use crate::config::RunConfig;
use crate::dataset::{
    binarize, build_support_query, cap_support, eligible_users, encode_attributes_str, filter_users,
    parse_interactions_str, split_cold_start, AttributeSchema, AttributeTable, ColdStartPartition,
    EvalTask, IdMap, ImplicitMatrix, SupportQuery,
};
use crate::error::{Result, TmagError};
use crate::eval::{map_at_k, ndcg_at_k, rank_candidates, recall_at_k, MapNorm, MetricReport, RankedList, Scorer, UserMetrics};
use crate::graph::{build_graph, BipartiteGraph};
use crate::linalg::Matrix;
use crate::metalearn::{
    meta_test_adapt_each, meta_train, regenerate_graph, LogEntry, MetaTestInput, MetaTrainInput, MetaTrainOutcome,
    Validation,
};
use crate::model::{forward, ModelContext, ModelParams};
use crate::rng;
use crate::taskgen::{assign_new_users, build_tasks, kmeans, Clustering, TaskSet};

/// Raw input texts; attribute texts may be empty.
pub struct RawData<'a> {
    pub interactions: &'a str,
    pub users: &'a str,
    pub items: &'a str,
    /// Release year per raw item id, for the release-year item split.
    pub item_release: Option<Vec<(String, i64)>>,
}

/// Support/query sets of one evaluation task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestSplit {
    pub task: EvalTask,
    pub sq: SupportQuery,
}

/// Output of ingestion: everything later stages need about the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prepared {
    pub config: String,
    /// Raw ids of the users that survived filtering, in dense order.
    pub users: IdMap,
    pub items: IdMap,
    pub partition: ColdStartPartition,
    pub user_schema: AttributeSchema,
    pub item_schema: AttributeSchema,
    pub user_attr: AttributeTable,
    pub item_attr: AttributeTable,
    /// Meta-training users, one task row each.
    pub train: SupportQuery,
    /// Held-out existing users for early stopping.
    pub validation: SupportQuery,
    pub tests: Vec<TestSplit>,
}

impl Prepared {
    /// Meta-train interactions with every train/validation query removed.
    pub fn observed_train(&self) -> ImplicitMatrix {
        let (tq, vq) = (&self.train.query, &self.validation.query);
        self.partition
            .meta_train
            .filter(|u, i| !tq.contains(u, i) && !vq.contains(u, i))
    }

    /// History visible at test time: all meta-train interactions plus every
    /// evaluation support set.
    pub fn observed_test(&self) -> Result<ImplicitMatrix> {
        let mut m = self.partition.meta_train.clone();
        for t in &self.tests {
            m = m.union(&t.sq.support)?;
        }
        Ok(m)
    }

    pub fn candidates(&self, task: EvalTask) -> &[usize] {
        if task.new_items() {
            &self.partition.new_items
        } else {
            &self.partition.existing_items
        }
    }

    pub fn test(&self, task: EvalTask) -> Option<&TestSplit> {
        self.tests.iter().find(|t| t.task == task)
    }
}

fn read_optional(path: &str) -> Result<String> {
    if path.is_empty() {
        return Ok(String::new());
    }
    Ok(std::fs::read_to_string(path)?)
}

/// `(raw id, year)` for every item line carrying an integer `field`.
fn release_years(items: &str, field: &str) -> Vec<(String, i64)> {
    let prefix = format!("{field}:");
    items
        .lines()
        .filter_map(|line| {
            let mut cols = line.split('\t');
            let id = cols.next()?.trim();
            let year = cols.find_map(|c| c.strip_prefix(&prefix))?.trim().parse().ok()?;
            Some((id.to_owned(), year))
        })
        .collect()
}

/// Read the input files named by the configuration.
pub fn ingest(cfg: &RunConfig) -> Result<Prepared> {
    if cfg.interactions.is_empty() {
        return Err(TmagError::Usage("config key interactions is not set".into()));
    }
    let interactions = std::fs::read_to_string(&cfg.interactions)?;
    let users = read_optional(&cfg.user_attributes)?;
    let items = read_optional(&cfg.item_attributes)?;
    let item_release = (!cfg.release_field.is_empty()).then(|| release_years(&items, &cfg.release_field));
    prepare(
        cfg,
        &RawData {
            interactions: &interactions,
            users: &users,
            items: &items,
            item_release,
        },
    )
}

fn sample_validation(users: &[usize], ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = users.to_vec();
    shuffled.shuffle(&mut rng::stream(seed, &[rng::DOMAIN_SPLIT, 4]));
    let n_val = ((ratio * users.len() as f64).round() as usize).min(users.len().saturating_sub(1));
    let mut val = shuffled[..n_val].to_vec();
    let mut train = shuffled[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Parse, binarize, filter, split and encode.
pub fn prepare(cfg: &RunConfig, raw: &RawData<'_>) -> Result<Prepared> {
    cfg.validate()?;
    let origin = Path::new(if cfg.interactions.is_empty() { "<interactions>" } else { &cfg.interactions });
    let log = parse_interactions_str(raw.interactions, cfg.interaction_format()?, origin)?;
    let filtered = filter_users(
        &binarize(&log, cfg.rating_threshold),
        cfg.min_interactions as usize,
        cfg.max_interactions as usize,
    )?;
    let release: Option<Vec<Option<i64>>> = raw.item_release.as_ref().map(|pairs| {
        let mut out = vec![None; log.n_items()];
        for (id, y) in pairs {
            if let Some(e) = log.items.get(id) {
                out[e] = Some(*y);
            }
        }
        out
    });
    let mut partition = split_cold_start(&log, &filtered, release.as_deref(), cfg.split_rules()?)?;
    if cfg.train_drop > 0.0 {
        let mut r = rng::stream(cfg.seed, &[rng::DOMAIN_SPLIT, 5]);
        let before = partition.meta_train.nnz();
        partition.meta_train = partition.meta_train.filter(|_, _| r.random::<f64>() >= cfg.train_drop);
        info!("dropped {} of {before} meta-train interactions", before - partition.meta_train.nnz());
    }

    let users = log.users.select(&filtered.user_origin);
    let items = log.items.clone();
    let user_schema = AttributeSchema::infer_str(raw.users, Path::new(&cfg.user_attributes))?;
    let item_schema = AttributeSchema::infer_str(raw.items, Path::new(&cfg.item_attributes))?;
    let user_attr = encode_attributes_str(&user_schema, raw.users, Path::new(&cfg.user_attributes), &users)?;
    let item_attr = encode_attributes_str(&item_schema, raw.items, Path::new(&cfg.item_attributes), &items)?;
    if user_attr.width == 0 || item_attr.width == 0 {
        return Err(TmagError::data("user and item attribute files must define at least one field"));
    }

    let q = cfg.query_size as usize;
    let eligible = eligible_users(&partition.meta_train, &partition.existing_users, q);
    let (train_users, val_users) = sample_validation(&eligible, cfg.validation_ratio, cfg.seed);
    let train = build_support_query(&partition.meta_train, &train_users, q, cfg.seed)?;
    let validation = build_support_query(&partition.meta_train, &val_users, q, cfg.seed)?;

    let mut tests = Vec::new();
    for task in EvalTask::ALL {
        let m = partition.task(task);
        let pool = if task.new_users() { &partition.new_users } else { &partition.existing_users };
        let users = eligible_users(m, pool, q);
        if users.is_empty() {
            warn!("task {}: no user has more than {q} interactions; skipped", task.number());
            continue;
        }
        let mut sq = build_support_query(m, &users, q, cfg.seed ^ u64::from(task.number()))?;
        if cfg.support_cap > 0 {
            sq = cap_support(&sq, cfg.support_cap as usize, cfg.seed ^ u64::from(task.number()));
        }
        tests.push(TestSplit { task, sq });
    }
    info!(
        "{} users ({} new), {} items ({} new), {} train / {} validation users",
        users.len(),
        partition.new_users.len(),
        items.len(),
        partition.new_items.len(),
        train.users.len(),
        validation.users.len()
    );
    Ok(Prepared {
        config: cfg.to_text(),
        users,
        items,
        partition,
        user_schema,
        item_schema,
        user_attr,
        item_attr,
        train,
        validation,
        tests,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pretrained {
    pub ae_user: AutoencoderParams,
    pub ae_item: AutoencoderParams,
    pub user_report: AeTrainReport,
    pub item_report: AeTrainReport,
}

pub fn pretrain(cfg: &RunConfig, prep: &Prepared) -> Result<Pretrained> {
    let (ae_user, user_report) = train_autoencoder(&prep.user_attr, &cfg.ae_config(0))?;
    let (ae_item, item_report) = train_autoencoder(&prep.item_attr, &cfg.ae_config(1))?;
    info!(
        "autoencoders: user loss {:.5}, item loss {:.5}",
        user_report.losses.last().copied().unwrap_or(f64::NAN),
        item_report.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(Pretrained {
        ae_user,
        ae_item,
        user_report,
        item_report,
    })
}

/// Clustering of the existing users and a cluster label for every user.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Clusters {
    pub config: String,
    pub clustering: Clustering,
    /// Cluster per dense user id.
    pub labels: Vec<usize>,
}

fn cluster_points(cfg: &RunConfig, prep: &Prepared, ae: &Pretrained, users: &[usize]) -> Result<Matrix> {
    let table = prep.user_attr.select(users);
    if cfg.cluster_on == "raw" {
        let rows: Vec<Vec<f64>> = (0..table.len()).map(|r| table.dense_row(r)).collect();
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, table.width));
        }
        return Matrix::from_rows(&rows);
    }
    ae.ae_user.encode_table(&table)
}

pub fn cluster(cfg: &RunConfig, prep: &Prepared, ae: &Pretrained) -> Result<Clusters> {
    let existing = &prep.partition.existing_users;
    let clustering = kmeans(&cluster_points(cfg, prep, ae, existing)?, &cfg.kmeans_config())?;
    let mut labels = vec![0; prep.users.len()];
    for (&u, &c) in existing.iter().zip(&clustering.assignment) {
        labels[u] = c;
    }
    let new = &prep.partition.new_users;
    for (&u, c) in new.iter().zip(assign_new_users(&cluster_points(cfg, prep, ae, new)?, &clustering)?) {
        labels[u] = c;
    }
    info!("cluster sizes {:?}", clustering.sizes());
    Ok(Clusters {
        config: cfg.to_text(),
        clustering,
        labels,
    })
}

pub fn training_tasks(prep: &Prepared, clusters: &Clusters) -> Result<TaskSet> {
    let labels: Vec<usize> = prep.train.users.iter().map(|&u| clusters.labels[u]).collect();
    build_tasks(
        &prep.train.users,
        &labels,
        clusters.clustering.k(),
        &prep.train.support,
        &prep.train.query,
    )
}

pub fn initial_params(cfg: &RunConfig, prep: &Prepared, ae: &Pretrained) -> ModelParams {
    let mut r = rng::stream(cfg.seed, &[rng::DOMAIN_INIT, 0]);
    ModelParams::init(
        prep.users.len(),
        prep.items.len(),
        cfg.dim as usize,
        ae.ae_user.clone(),
        ae.ae_item.clone(),
        &mut r,
    )
}

pub fn train(
    cfg: &RunConfig,
    prep: &Prepared,
    ae: &Pretrained,
    clusters: &Clusters,
    on_epoch: impl FnMut(usize, &ModelParams, &[LogEntry]) -> Result<()>,
) -> Result<MetaTrainOutcome> {
    let tasks = training_tasks(prep, clusters)?;
    let observed = prep.observed_train();
    let validation = (!prep.validation.users.is_empty()).then(|| Validation {
        users: &prep.validation.users,
        query: &prep.validation.query,
        candidates: &prep.partition.existing_items,
    });
    let input = MetaTrainInput {
        user_attr: &prep.user_attr,
        item_attr: &prep.item_attr,
        model: cfg.model_config()?,
        observed: &observed,
        known: &prep.partition.meta_train,
        tasks: &tasks,
        labels: &clusters.labels,
        item_pool: &prep.partition.existing_items,
        validation,
        augment: cfg.augment.then(|| cfg.augment_config()),
    };
    meta_train(initial_params(cfg, prep, ae), &input, &cfg.meta_config()?, on_epoch)
}

/// Parameters and graph used for evaluation: new-entity rows are redrawn and
/// the test history is augmented once.
pub struct TestSetup {
    pub params: ModelParams,
    pub observed: ImplicitMatrix,
    pub graph: BipartiteGraph,
    pub augmentation: Augmentation,
}

pub fn test_setup(cfg: &RunConfig, prep: &Prepared, theta: &ModelParams) -> Result<TestSetup> {
    let mut params = theta.clone();
    let mut r = rng::stream(cfg.seed, &[rng::DOMAIN_META_TEST, 0]);
    params.reinit_rows(&prep.partition.new_users, &prep.partition.new_items, &mut r);
    let observed = prep.observed_test()?;
    let base = build_graph(&observed, None)?;
    if !cfg.augment {
        return Ok(TestSetup {
            params,
            observed,
            graph: base,
            augmentation: Augmentation::default(),
        });
    }
    let ctx = ModelContext::new(&base, &prep.user_attr, &prep.item_attr, cfg.model_config()?)?;
    let all_items: Vec<usize> = (0..prep.items.len()).collect();
    let (graph, augmentation) = regenerate_graph(
        &params,
        &ctx,
        &observed,
        &observed.active_users(),
        &all_items,
        &cfg.augment_config(),
    )?;
    info!("test graph: {} augmented edges", augmentation.edges.len());
    Ok(TestSetup {
        params,
        observed,
        graph,
        augmentation,
    })
}

/// Rankings and metrics of one task.
#[derive(Debug, Clone)]
pub struct TaskResult {
    pub task: EvalTask,
    pub rankings: Vec<RankedList>,
    pub per_user: Vec<UserMetrics>,
    pub report: MetricReport,
}

fn rank_and_score(
    scorer: &(impl Scorer + ?Sized),
    users: &[usize],
    candidates: &[usize],
    sq: &SupportQuery,
    k: usize,
    norm: MapNorm,
) -> Result<Vec<(RankedList, UserMetrics)>> {
    users
        .par_iter()
        .map(|&u| {
            let rel = sq.query.items_of(u);
            let ranked = rank_candidates(u, scorer, candidates, sq.support.items_of(u), k)?;
            let m = UserMetrics {
                user: u,
                recall: recall_at_k(&ranked, rel)?,
                ndcg: ndcg_at_k(&ranked, rel, k)?,
                map: map_at_k(&ranked, rel, k, norm)?,
            };
            Ok((ranked, m))
        })
        .collect()
}

fn finish(task: EvalTask, k: usize, mut rows: Vec<(RankedList, UserMetrics)>) -> Result<TaskResult> {
    rows.sort_by_key(|r| r.1.user);
    let (rankings, per_user): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let report = MetricReport::from_users(task, k, &per_user)?;
    Ok(TaskResult {
        task,
        rankings,
        per_user,
        report,
    })
}

/// Per-cluster adaptation on each task's support set, then ranking.
pub fn meta_test(cfg: &RunConfig, prep: &Prepared, clusters: &Clusters, setup: &TestSetup) -> Result<Vec<TaskResult>> {
    let meta = cfg.meta_config()?;
    let norm = cfg.map_norm()?;
    let k = cfg.top_k as usize;
    let ctx = ModelContext::new(&setup.graph, &prep.user_attr, &prep.item_attr, cfg.model_config()?)?;
    let mut out = Vec::new();
    for t in &prep.tests {
        let candidates = prep.candidates(t.task);
        let input = MetaTestInput {
            ctx: ctx.with_graph(&setup.graph),
            support: &t.sq.support,
            known: &setup.observed,
            users: &t.sq.users,
            clusters: &clusters.labels,
            item_pool: candidates,
            task_no: t.task.number(),
        };
        let mut rows = Vec::new();
        meta_test_adapt_each(&setup.params, &input, &meta, |_, members, p| {
            let fw = forward(p, &ctx)?;
            rows.extend(rank_and_score(&fw, members, candidates, &t.sq, k, norm)?);
            Ok(())
        })?;
        out.push(finish(t.task, k, rows)?);
    }
    Ok(out)
}

pub fn train_mf(cfg: &RunConfig, prep: &Prepared) -> Result<MfParams> {
    let (p, losses) = mf_train(&prep.partition.meta_train, &prep.partition.existing_items, &cfg.mf_config())?;
    info!("MF-BPR final epoch loss {:.5}", losses.last().copied().unwrap_or(f64::NAN));
    Ok(p)
}

/// Fine-tune MF on each task's support set, then rank.
pub fn evaluate_mf(cfg: &RunConfig, prep: &Prepared, p: &MfParams) -> Result<Vec<TaskResult>> {
    let mf = cfg.mf_config();
    let mut base = p.clone();
    let mut r = rng::stream(cfg.seed, &[rng::DOMAIN_MF, 2]);
    base.reinit_rows(&prep.partition.new_users, &prep.partition.new_items, &mut r);
    let known = prep.observed_test()?;
    let k = cfg.top_k as usize;
    let norm = cfg.map_norm()?;
    prep.tests
        .iter()
        .map(|t| {
            let candidates = prep.candidates(t.task);
            let tuned = mf_finetune(
                &base,
                &t.sq.support,
                &known,
                candidates,
                cfg.mf_finetune_lr,
                cfg.mf_finetune_steps as usize,
                &mf,
            )?;
            finish(t.task, k, rank_and_score(&tuned, &t.sq.users, candidates, &t.sq, k, norm)?)
        })
        .collect()
}

/// Everything an in-memory run produces.
pub struct RunSummary {
    pub tmag: Vec<MetricReport>,
    pub mf: Option<Vec<MetricReport>>,
    pub train: MetaTrainOutcome,
    pub test_augmented_edges: usize,
}

impl RunSummary {
    pub fn tmag_recall(&self, task: EvalTask) -> Option<f64> {
        self.tmag.iter().find(|r| r.task == task.number()).map(|r| r.recall)
    }

    pub fn mf_recall(&self, task: EvalTask) -> Option<f64> {
        self.mf.as_ref()?.iter().find(|r| r.task == task.number()).map(|r| r.recall)
    }
}

/// All stages in memory, optionally with the MF baseline.
pub fn run_all(cfg: &RunConfig, raw: &RawData<'_>, with_mf: bool) -> Result<RunSummary> {
    let prep = prepare(cfg, raw)?;
    let ae = pretrain(cfg, &prep)?;
    let clusters = cluster(cfg, &prep, &ae)?;
    let outcome = train(cfg, &prep, &ae, &clusters, |_, _, _| Ok(()))?;
    let setup = test_setup(cfg, &prep, &outcome.params)?;
    let tmag = meta_test(cfg, &prep, &clusters, &setup)?.into_iter().map(|r| r.report).collect();
    let mf = if with_mf {
        let p = train_mf(cfg, &prep)?;
        Some(evaluate_mf(cfg, &prep, &p)?.into_iter().map(|r| r.report).collect())
    } else {
        None
    };
    Ok(RunSummary {
        tmag,
        mf,
        train: outcome,
        test_augmented_edges: setup.augmentation.edges.len(),
    })
}
