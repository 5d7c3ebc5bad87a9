//! Desk-scale directional experiments on synthetic data.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::EvalTask;
use crate::error::Result;
use crate::pipeline::{run_all, RawData, RunSummary};
use crate::synth::{self, SynthConfig};

/// Run configuration tuned for the 400-user synthetic dataset.
pub fn synthetic_preset(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        latent_dim: 8,
        ae_epochs: 300,
        ae_lr: 0.1,
        clusters: 4,
        dim: 16,
        epochs: 60,
        patience: 15,
        inner_lr: 0.02,
        outer_lr: 0.05,
        finetune_ae: true,
        test_steps: 3,
        validation_ratio: 0.1,
        contrast_cap: 64,
        augment_top: 50,
        mf_dim: 16,
        mf_epochs: 30,
        ..RunConfig::default()
    }
}

pub fn synthetic_data(seed: u64, cfg: SynthConfig) -> Result<synth::SynthData> {
    synth::generate(&SynthConfig { seed, ..cfg })
}

fn run(cfg: &RunConfig, data: &synth::SynthData, with_mf: bool) -> Result<RunSummary> {
    run_all(
        cfg,
        &RawData {
            interactions: &data.interactions,
            users: &data.users,
            items: &data.items,
            item_release: None,
        },
        with_mf,
    )
}

fn task1(s: &RunSummary) -> f64 {
    s.tmag_recall(EvalTask::Task1).unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, Serialize)]
pub struct AlignmentRow {
    pub seed: u64,
    pub aligned: f64,
    pub single_task: f64,
    pub mf: f64,
}

/// Task1 Recall@K of K = 4 vs K = 1 vs MF-BPR per seed.
pub fn alignment(seeds: &[u64], tweak: &dyn Fn(&mut RunConfig)) -> Result<Vec<AlignmentRow>> {
    seeds
        .iter()
        .map(|&seed| {
            let data = synthetic_data(seed, SynthConfig::default())?;
            let mut cfg = synthetic_preset(seed);
            tweak(&mut cfg);
            let aligned = run(&cfg, &data, true)?;
            let single = run(&RunConfig { clusters: 1, ..cfg.clone() }, &data, false)?;
            Ok(AlignmentRow {
                seed,
                aligned: task1(&aligned),
                single_task: task1(&single),
                mf: aligned.mf_recall(EvalTask::Task1).unwrap_or(f64::NAN),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct AugmentationRow {
    pub seed: u64,
    pub augmented: f64,
    pub plain: f64,
    pub test_edges: usize,
}

/// Task1 Recall@K with and without augmentation after dropping `drop` of
/// the training interactions.
pub fn augmentation(seeds: &[u64], drop: f64, tweak: &dyn Fn(&mut RunConfig)) -> Result<Vec<AugmentationRow>> {
    seeds
        .iter()
        .map(|&seed| {
            let data = synthetic_data(seed, SynthConfig::default())?;
            let mut cfg = RunConfig {
                train_drop: drop,
                alpha: 0.8,
                threshold: 0.8,
                // a stronger generator signal; with the defaults no score clears t
                lambda1: 10.0,
                neg_per_pos: 2,
                ..synthetic_preset(seed)
            };
            tweak(&mut cfg);
            let with = run(&RunConfig { augment: true, ..cfg.clone() }, &data, false)?;
            let without = run(&RunConfig { augment: false, ..cfg }, &data, false)?;
            Ok(AugmentationRow {
                seed,
                augmented: task1(&with),
                plain: task1(&without),
                test_edges: with.test_augmented_edges,
            })
        })
        .collect()
}

/// Larger catalogue and denser users so that supports of 30 fit.
pub fn sparsity_data_config() -> SynthConfig {
    SynthConfig {
        n_items: 400,
        min_positives: 60,
        max_positives: 90,
        ..SynthConfig::default()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SparsityRow {
    pub seed: u64,
    pub support_sizes: Vec<u64>,
    pub recall: Vec<f64>,
}

/// Task1 Recall@K for each evaluation support cap.
pub fn sparsity(seeds: &[u64], sizes: &[u64], tweak: &dyn Fn(&mut RunConfig)) -> Result<Vec<SparsityRow>> {
    seeds
        .iter()
        .map(|&seed| {
            let data = synthetic_data(seed, sparsity_data_config())?;
            let recall = sizes
                .iter()
                .map(|&cap| {
                    let mut cfg = RunConfig {
                        support_cap: cap,
                        ..synthetic_preset(seed)
                    };
                    tweak(&mut cfg);
                    Ok(task1(&run(&cfg, &data, false)?))
                })
                .collect::<Result<_>>()?;
            Ok(SparsityRow {
                seed,
                support_sizes: sizes.to_vec(),
                recall,
            })
        })
        .collect()
}

pub fn format_alignment(rows: &[AlignmentRow]) -> String {
    let mut s = format!("{:<6} {:>10} {:>10} {:>10}\n", "seed", "K=4", "K=1", "MF-BPR");
    for r in rows {
        let _ = writeln!(s, "{:<6} {:>10.4} {:>10.4} {:>10.4}", r.seed, r.aligned, r.single_task, r.mf);
    }
    s
}

pub fn format_augmentation(rows: &[AugmentationRow]) -> String {
    let mut s = format!("{:<6} {:>10} {:>10} {:>8}\n", "seed", "augmented", "plain", "edges");
    for r in rows {
        let _ = writeln!(s, "{:<6} {:>10.4} {:>10.4} {:>8}", r.seed, r.augmented, r.plain, r.test_edges);
    }
    s
}

pub fn format_sparsity(rows: &[SparsityRow]) -> String {
    let mut s = String::from("seed  ");
    if let Some(r) = rows.first() {
        for n in &r.support_sizes {
            let _ = write!(s, " {:>9}", format!("S={n}"));
        }
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{:<6}", r.seed);
        for v in &r.recall {
            let _ = write!(s, " {v:>9.4}");
        }
        s.push('\n');
    }
    s
}
