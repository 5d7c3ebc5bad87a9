//! Synthetic rating logs with planted user clusters.
//!
//! Users belong to one of `k_true` clusters and items to one of `k_true`
//! contiguous blocks. A user's positives come from its cluster's block with
//! probability `in_block` (popularity-skewed inside the block) and uniformly
//! otherwise. User attributes agree with the cluster with probability
//! `1 - attr_noise`; an item's genre is its block.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TmagError};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub k_true: usize,
    pub min_positives: usize,
    pub max_positives: usize,
    pub in_block: f64,
    /// Zipf exponent of item popularity inside a block.
    pub skew: f64,
    pub attr_noise: f64,
    /// Extra low-rated interactions per user, as a share of its positives.
    pub low_rated: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 400,
            n_items: 200,
            k_true: 4,
            min_positives: 20,
            max_positives: 40,
            in_block: 0.9,
            skew: 0.8,
            attr_noise: 0.2,
            low_rated: 0.1,
            seed: 0,
        }
    }
}

/// Generated files as text.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    /// `user<TAB>item<TAB>rating<TAB>timestamp`
    pub interactions: String,
    pub users: String,
    pub items: String,
    pub user_cluster: Vec<usize>,
}

pub fn block_of(item: usize, cfg: &SynthConfig) -> usize {
    (item * cfg.k_true / cfg.n_items).min(cfg.k_true - 1)
}

fn weighted_pick(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (k, w) in weights.iter().enumerate() {
        if x < *w {
            return k;
        }
        x -= w;
    }
    weights.len() - 1
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.k_true == 0 || cfg.n_items < cfg.k_true || cfg.min_positives > cfg.max_positives {
        return Err(TmagError::Usage("inconsistent synthetic configuration".into()));
    }
    if cfg.max_positives * 2 > cfg.n_items {
        return Err(TmagError::Usage("max_positives too large for the item count".into()));
    }
    let mut r = rng::stream(cfg.seed, &[rng::DOMAIN_SYNTH]);
    let blocks: Vec<Vec<usize>> = (0..cfg.k_true)
        .map(|b| (0..cfg.n_items).filter(|&i| block_of(i, cfg) == b).collect())
        .collect();
    // popularity order within each block is a random permutation
    let popularity: Vec<(Vec<usize>, Vec<f64>)> = blocks
        .iter()
        .map(|items| {
            let mut order = items.clone();
            order.shuffle(&mut r);
            let w = (0..order.len()).map(|rank| 1.0 / ((rank + 1) as f64).powf(cfg.skew)).collect();
            (order, w)
        })
        .collect();

    let user_cluster: Vec<usize> = (0..cfg.n_users).map(|u| u % cfg.k_true).collect();
    let mut interactions = String::new();
    let mut clock: i64 = 1_000_000;
    for (u, &c) in user_cluster.iter().enumerate() {
        let n_pos = r.random_range(cfg.min_positives..=cfg.max_positives);
        let mut chosen = BTreeSet::new();
        while chosen.len() < n_pos {
            let item = if r.random_bool(cfg.in_block) {
                let (order, w) = &popularity[c];
                order[weighted_pick(w, &mut r)]
            } else {
                r.random_range(0..cfg.n_items)
            };
            chosen.insert(item);
        }
        let n_low = (n_pos as f64 * cfg.low_rated).round() as usize;
        let mut low = BTreeSet::new();
        while low.len() < n_low {
            let i = r.random_range(0..cfg.n_items);
            if !chosen.contains(&i) {
                low.insert(i);
            }
        }
        let mut rows: Vec<(usize, u8)> = chosen.iter().map(|&i| (i, r.random_range(4..=5))).collect();
        rows.extend(low.iter().map(|&i| (i, r.random_range(1..=3))));
        rows.shuffle(&mut r);
        for (i, rating) in rows {
            clock += r.random_range(1..60);
            let _ = writeln!(interactions, "u{u}\ti{i}\t{rating}\t{clock}");
        }
    }

    let ages = ["18-24", "25-34", "35-44", "45-54", "55+"];
    let jobs = ["artist", "engineer", "farmer", "lawyer", "nurse", "student", "teacher", "writer"];
    let pick_tied = |c: usize, n: usize, r: &mut rng::Rng| {
        if r.random_bool(1.0 - cfg.attr_noise) {
            c % n
        } else {
            r.random_range(0..n)
        }
    };
    let mut users = String::new();
    for (u, &c) in user_cluster.iter().enumerate() {
        let age = ages[pick_tied(c, ages.len(), &mut r)];
        let job = jobs[pick_tied(c * 2 + r.random_range(0..2), jobs.len(), &mut r)];
        let region = pick_tied(c, cfg.k_true, &mut r);
        let _ = writeln!(users, "u{u}\tage:{age}\toccupation:{job}\tregion:r{region}");
    }
    let mut items = String::new();
    for i in 0..cfg.n_items {
        let b = block_of(i, cfg);
        let tags: Vec<String> = (0..1 + r.random_range(0..2))
            .map(|_| format!("t{}", b * 3 + r.random_range(0..3)))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let _ = writeln!(items, "i{i}\tgenre:g{b}\ttags:{}", tags.join(","));
    }
    Ok(SynthData {
        interactions,
        users,
        items,
        user_cluster,
    })
}

impl SynthData {
    /// Write `interactions.tsv`, `users.tsv`, `items.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("interactions.tsv"), &self.interactions)?;
        fs::write(dir.join("users.tsv"), &self.users)?;
        fs::write(dir.join("items.tsv"), &self.items)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_mostly_in_block() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        let (mut inside, mut total) = (0usize, 0usize);
        for line in a.interactions.lines() {
            let f: Vec<&str> = line.split('\t').collect();
            if f[2].parse::<u8>().unwrap() <= 3 {
                continue;
            }
            let u: usize = f[0][1..].parse().unwrap();
            let i: usize = f[1][1..].parse().unwrap();
            total += 1;
            inside += usize::from(block_of(i, &cfg) == a.user_cluster[u]);
        }
        let share = inside as f64 / total as f64;
        // 90% of draws target the block, but repeats inside a 50-item block
        // are discarded, so the realized share sits somewhat lower
        assert!((0.8..0.95).contains(&share), "{share}");
        assert_eq!(a.users.lines().count(), 400);
        assert_eq!(a.items.lines().count(), 200);
    }
}
