//! Top-K ranking and Recall/NDCG/MAP with binary relevance.

use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{EvalTask, ImplicitMatrix};
use crate::error::{Result, TmagError};

/// Anything that scores a `(user, item)` pair.
pub trait Scorer: Sync {
    fn score(&self, user: usize, item: usize) -> f64;
}

impl Scorer for crate::model::Forward {
    fn score(&self, user: usize, item: usize) -> f64 {
        crate::model::Forward::score(self, user, item)
    }
}

impl<F: Fn(usize, usize) -> f64 + Sync> Scorer for F {
    fn score(&self, user: usize, item: usize) -> f64 {
        self(user, item)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub user: usize,
    /// Best first.
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Top `k` of `candidates` minus `exclusions` by descending score, ties to
/// the lower item id. `exclusions` must be sorted.
pub fn rank_candidates(
    user: usize,
    scorer: &(impl Scorer + ?Sized),
    candidates: &[usize],
    exclusions: &[usize],
    k: usize,
) -> Result<RankedList> {
    if k == 0 {
        return Err(TmagError::Usage("top-K cutoff must be at least 1".into()));
    }
    let mut scored: Vec<(usize, f64)> = candidates
        .iter()
        .filter(|i| exclusions.binary_search(i).is_err())
        .map(|&i| (i, scorer.score(user, i)))
        .collect();
    if scored.is_empty() {
        return Err(TmagError::data(format!("user {user} has no candidate left after exclusions")));
    }
    if let Some((i, _)) = scored.iter().find(|s| s.1.is_nan()) {
        return Err(TmagError::numeric(format!("NaN score for user {user}, item {i}")));
    }
    let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    Ok(RankedList {
        user,
        items: scored.iter().map(|s| s.0).collect(),
        scores: scored.iter().map(|s| s.1).collect(),
    })
}

fn check_relevant(relevant: &[usize]) -> Result<()> {
    if relevant.is_empty() {
        Err(TmagError::data("metric over an empty relevant set"))
    } else {
        Ok(())
    }
}

/// Hit flags of the ranking against a sorted relevant set.
fn hits(ranked: &RankedList, relevant: &[usize]) -> Vec<bool> {
    ranked.items.iter().map(|i| relevant.binary_search(i).is_ok()).collect()
}

/// `|top-K ∩ relevant| / |relevant|`. `relevant` must be sorted.
pub fn recall_at_k(ranked: &RankedList, relevant: &[usize]) -> Result<f64> {
    check_relevant(relevant)?;
    let h = hits(ranked, relevant).iter().filter(|h| **h).count();
    Ok(h as f64 / relevant.len() as f64)
}

/// Binary-gain NDCG; the ideal list holds `min(|relevant|, K)` hits.
pub fn ndcg_at_k(ranked: &RankedList, relevant: &[usize], k: usize) -> Result<f64> {
    check_relevant(relevant)?;
    let gain = |r: usize| 1.0 / ((r + 2) as f64).log2();
    let dcg: f64 = hits(ranked, relevant)
        .iter()
        .enumerate()
        .filter(|(_, h)| **h)
        .map(|(r, _)| gain(r))
        .sum();
    let idcg: f64 = (0..relevant.len().min(k)).map(gain).sum();
    Ok(dcg / idcg)
}

/// Normalizer of average precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapNorm {
    /// `min(|relevant|, K)`
    MinRelevantK,
    /// `|relevant|`
    Relevant,
}

impl FromStr for MapNorm {
    type Err = TmagError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" | "min-relevant-k" => Ok(Self::MinRelevantK),
            "relevant" => Ok(Self::Relevant),
            _ => Err(TmagError::Usage(format!("unknown MAP normalizer {s:?} (min|relevant)"))),
        }
    }
}

/// Average precision over the top-K: sum of precision at each hit, divided
/// by the normalizer.
pub fn map_at_k(ranked: &RankedList, relevant: &[usize], k: usize, norm: MapNorm) -> Result<f64> {
    check_relevant(relevant)?;
    let mut found = 0usize;
    let mut sum = 0.0;
    for (r, h) in hits(ranked, relevant).into_iter().enumerate() {
        if h {
            found += 1;
            sum += found as f64 / (r + 1) as f64;
        }
    }
    let den = match norm {
        MapNorm::MinRelevantK => relevant.len().min(k),
        MapNorm::Relevant => relevant.len(),
    };
    Ok(sum / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub map: f64,
}

/// Rank and score each user; users come back in input order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_users(
    scorer: &(impl Scorer + ?Sized),
    users: &[usize],
    candidates: &[usize],
    exclusions: &ImplicitMatrix,
    relevant: &ImplicitMatrix,
    k: usize,
    norm: MapNorm,
) -> Result<Vec<UserMetrics>> {
    users
        .par_iter()
        .map(|&u| {
            let rel = relevant.items_of(u);
            let ranked = rank_candidates(u, scorer, candidates, exclusions.items_of(u), k)?;
            Ok(UserMetrics {
                user: u,
                recall: recall_at_k(&ranked, rel)?,
                ndcg: ndcg_at_k(&ranked, rel, k)?,
                map: map_at_k(&ranked, rel, k, norm)?,
            })
        })
        .collect()
}

/// Per-task means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: u8,
    pub k: usize,
    pub n_users: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub map: f64,
}

#[derive(Serialize)]
struct MetricLine<'a> {
    task: u8,
    metric: &'a str,
    k: usize,
    value: f64,
    n_users: usize,
}

impl MetricReport {
    pub fn from_users(task: EvalTask, k: usize, users: &[UserMetrics]) -> Result<Self> {
        if users.is_empty() {
            return Err(TmagError::data(format!("task {} has no evaluable user", task.number())));
        }
        let n = users.len() as f64;
        let mean = |f: fn(&UserMetrics) -> f64| users.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            task: task.number(),
            k,
            n_users: users.len(),
            recall: mean(|m| m.recall),
            ndcg: mean(|m| m.ndcg),
            map: mean(|m| m.map),
        })
    }

    /// One JSON object per metric.
    pub fn json_lines(&self) -> String {
        let mut out = String::new();
        for (metric, value) in [("recall", self.recall), ("ndcg", self.ndcg), ("map", self.map)] {
            let line = MetricLine {
                task: self.task,
                metric,
                k: self.k,
                value,
                n_users: self.n_users,
            };
            out.push_str(&serde_json::to_string(&line).expect("plain struct"));
            out.push('\n');
        }
        out
    }
}

/// Full evaluation of one task with a single scorer.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_task(
    task: EvalTask,
    scorer: &(impl Scorer + ?Sized),
    users: &[usize],
    candidates: &[usize],
    exclusions: &ImplicitMatrix,
    relevant: &ImplicitMatrix,
    k: usize,
    norm: MapNorm,
) -> Result<MetricReport> {
    let per_user = evaluate_users(scorer, users, candidates, exclusions, relevant, k, norm)?;
    MetricReport::from_users(task, k, &per_user)
}

/// Human-readable table of several reports.
pub fn format_table(reports: &[MetricReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<6} {:>7} {:>10} {:>10} {:>10}", "task", "users", "recall@K", "ndcg@K", "map@K");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<6} {:>7} {:>10.4} {:>10.4} {:>10.4}",
            format!("T{}", r.task),
            r.n_users,
            r.recall,
            r.ndcg,
            r.map
        );
    }
    s
}

pub fn write_json_lines(reports: &[MetricReport], w: &mut impl Write) -> Result<()> {
    for r in reports {
        w.write_all(r.json_lines().as_bytes())?;
    }
    Ok(())
}
