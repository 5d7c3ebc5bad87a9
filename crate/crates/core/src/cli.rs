//! Command-line front end. Each stage reads its inputs from the work
//! directory and writes its artifacts there, so stages can be re-run one at
//! a time. Every artifact carries the full configuration.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::IdMap;
use crate::error::{Result, TmagError};
use crate::eval::{format_table, MetricReport};
use crate::experiment;
use crate::metalearn::LogEntry;
use crate::model::forward;
use crate::model::ModelContext;
use crate::pipeline::{self, Clusters, Prepared, Pretrained, TaskResult};
use crate::synth::{self, SynthConfig};

pub const PREPARED: &str = "prepared.json";
pub const AE_CKPT: &str = "autoencoders.ckpt";
pub const AE_REPORT: &str = "autoencoders.json";
pub const CLUSTERS: &str = "clusters.json";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const MF_CKPT: &str = "mf.ckpt";
pub const METRICS: &str = "metrics.jsonl";
pub const MF_METRICS: &str = "mf_metrics.jsonl";
pub const RANKINGS: &str = "rankings.tsv";
pub const AUG_STATS: &str = "augment_stats.json";
pub const AUG_EDGES: &str = "augmented_edges.tsv";

#[derive(Debug, Parser)]
#[command(name = "tmag", version, about = "Task-aligned meta-learning recommender for cold-start users and items")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides such as `--epochs=20` or `seed=3`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        base.with_overrides(&self.overrides)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Tmag,
    Mf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    /// K = 4 vs K = 1 vs MF-BPR.
    Table3,
    /// With vs without augmentation after dropping 30% of training data.
    Table5,
    /// Recall against evaluation support size.
    Fig3,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with planted user clusters.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 4)]
        clusters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Convert a MovieLens-1M directory into attribute files and a config
    /// using the time-based split.
    Movielens {
        /// Directory holding ratings.dat, users.dat and movies.dat.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse, filter and split the raw data.
    Ingest(Common),
    /// Train the user and item attribute autoencoders.
    PretrainAe(Common),
    /// Cluster users into aligned tasks.
    Cluster(Common),
    /// Meta-train the recommender.
    MetaTrain(Common),
    /// Augment the test-time graph and summarize the generated edges.
    AugmentStats(Common),
    /// Adapt per cluster on the evaluation supports and write rankings.
    MetaTest(Common),
    /// Score a trained model on the three evaluation tasks.
    Evaluate {
        #[arg(long, value_enum, default_value_t = Method::Tmag)]
        method: Method,
        #[command(flatten)]
        common: Common,
    },
    /// Train the MF-BPR baseline.
    Mf(Common),
    /// Write final user and item representations as TSV.
    ExportEmbeddings(Common),
    /// Every stage from ingest to evaluate.
    Run(Common),
    /// Directional experiments on synthetic data.
    Experiment {
        #[arg(value_enum)]
        which: Experiment,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Where to write the JSON result; printed only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn need(dir: &Path, name: &str, command: &'static str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(TmagError::MissingArtifact { path: p, command })
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Artifacts produced by earlier stages, loaded on demand.
struct Workdir {
    cfg: RunConfig,
    dir: PathBuf,
}

impl Workdir {
    fn open(cfg: RunConfig) -> Result<Self> {
        let dir = cfg.workdir();
        fs::create_dir_all(&dir)?;
        Ok(Self { cfg, dir })
    }

    fn prepared(&self) -> Result<Prepared> {
        read_json(&need(&self.dir, PREPARED, "ingest")?)
    }

    fn pretrained(&self) -> Result<Pretrained> {
        let c = Checkpoint::load(&need(&self.dir, AE_CKPT, "pretrain-ae")?)?;
        let reports: serde_json::Value = read_json(&need(&self.dir, AE_REPORT, "pretrain-ae")?)?;
        Ok(Pretrained {
            ae_user: checkpoint::read_autoencoder(&c, "ae_user")?,
            ae_item: checkpoint::read_autoencoder(&c, "ae_item")?,
            user_report: serde_json::from_value(reports["user"].clone())?,
            item_report: serde_json::from_value(reports["item"].clone())?,
        })
    }

    fn clusters(&self) -> Result<Clusters> {
        read_json(&need(&self.dir, CLUSTERS, "cluster")?)
    }

    fn model(&self) -> Result<crate::model::ModelParams> {
        checkpoint::read_model(&Checkpoint::load(&need(&self.dir, MODEL_CKPT, "meta-train")?)?)
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.cfg.to_text(), self.cfg.checkpoint_precision as u32)
    }
}

/// JSON lines: a config header, then one object per task and metric.
fn metrics_text(cfg: &RunConfig, method: &str, reports: &[MetricReport]) -> Result<String> {
    let mut out = serde_json::to_string(&json!({ "method": method, "config": cfg }))?;
    out.push('\n');
    for r in reports {
        out.push_str(&r.json_lines());
    }
    Ok(out)
}

fn write_metrics(w: &Workdir, file: &str, method: &str, results: &[TaskResult]) -> Result<Vec<MetricReport>> {
    let reports: Vec<MetricReport> = results.iter().map(|r| r.report).collect();
    fs::write(w.dir.join(file), metrics_text(&w.cfg, method, &reports)?)?;
    print!("{}", format_table(&reports));
    Ok(reports)
}

fn cmd_synth(out: &Path, users: usize, items: usize, clusters: usize, seed: u64) -> Result<()> {
    let cfg = SynthConfig {
        n_users: users,
        n_items: items,
        k_true: clusters,
        seed,
        ..SynthConfig::default()
    };
    let data = synth::generate(&cfg)?;
    data.write(out)?;
    write_json(&out.join("synth.json"), &cfg)?;
    // a ready-made run configuration pointing at the files
    let run = RunConfig {
        interactions: out.join("interactions.tsv").display().to_string(),
        user_attributes: out.join("users.tsv").display().to_string(),
        item_attributes: out.join("items.tsv").display().to_string(),
        workdir: out.join("run").display().to_string(),
        ..experiment::synthetic_preset(seed)
    };
    fs::write(out.join("tmag.conf"), run.to_text())?;
    println!("wrote {} users, {} items to {}", users, items, out.display());
    Ok(())
}

/// Attribute files plus a configuration for MovieLens-1M; returns the
/// configuration path.
pub fn prepare_movielens(dir: &Path, out: &Path) -> Result<PathBuf> {
    let ratings = need(dir, "ratings.dat", "a MovieLens-1M download")?;
    let read = |name: &str| -> Result<String> {
        let p = need(dir, name, "a MovieLens-1M download")?;
        Ok(String::from_utf8_lossy(&fs::read(p)?).into_owned())
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("users.tsv"), crate::dataset::movielens_users(&read("users.dat")?))?;
    fs::write(out.join("items.tsv"), crate::dataset::movielens_items(&read("movies.dat")?))?;
    let cfg = RunConfig {
        interactions: ratings.display().to_string(),
        format: "movielens_dat".into(),
        user_attributes: out.join("users.tsv").display().to_string(),
        item_attributes: out.join("items.tsv").display().to_string(),
        release_field: "year".into(),
        user_split: "first_rating_time".into(),
        item_split: "release_year".into(),
        workdir: out.join("run").display().to_string(),
        ..RunConfig::default()
    };
    cfg.validate()?;
    let path = out.join("tmag.conf");
    fs::write(&path, cfg.to_text())?;
    Ok(path)
}

fn cmd_ingest(w: &Workdir) -> Result<Prepared> {
    let prep = pipeline::ingest(&w.cfg)?;
    write_json(&w.dir.join(PREPARED), &prep)?;
    println!(
        "{} users ({} new), {} items ({} new), {} training users, {} evaluation tasks",
        prep.users.len(),
        prep.partition.new_users.len(),
        prep.items.len(),
        prep.partition.new_items.len(),
        prep.train.users.len(),
        prep.tests.len()
    );
    Ok(prep)
}

fn cmd_pretrain(w: &Workdir, prep: &Prepared) -> Result<Pretrained> {
    let ae = pipeline::pretrain(&w.cfg, prep)?;
    let mut c = w.checkpoint();
    checkpoint::push_autoencoder(&mut c, "ae_user", &ae.ae_user);
    checkpoint::push_autoencoder(&mut c, "ae_item", &ae.ae_item);
    c.save(&w.dir.join(AE_CKPT))?;
    write_json(
        &w.dir.join(AE_REPORT),
        &json!({ "config": w.cfg, "user": ae.user_report, "item": ae.item_report }),
    )?;
    Ok(ae)
}

fn cmd_cluster(w: &Workdir, prep: &Prepared, ae: &Pretrained) -> Result<Clusters> {
    let c = pipeline::cluster(&w.cfg, prep, ae)?;
    write_json(&w.dir.join(CLUSTERS), &c)?;
    println!("cluster sizes {:?}", c.clustering.sizes());
    Ok(c)
}

fn cmd_meta_train(w: &Workdir, prep: &Prepared, ae: &Pretrained, clusters: &Clusters) -> Result<()> {
    let mut log = fs::File::create(w.dir.join(TRAIN_LOG))?;
    writeln!(log, "{}", serde_json::to_string(&json!({ "config": w.cfg }))?)?;
    let mut written = 0;
    let outcome = pipeline::train(&w.cfg, prep, ae, clusters, |epoch, _, entries: &[LogEntry]| {
        for e in &entries[written..] {
            writeln!(log, "{}", serde_json::to_string(e)?)?;
        }
        written = entries.len();
        info!("epoch {epoch} done");
        Ok(())
    })?;
    for e in &outcome.log[written.min(outcome.log.len())..] {
        writeln!(log, "{}", serde_json::to_string(e)?)?;
    }
    let mut c = w.checkpoint();
    checkpoint::push_model(&mut c, &outcome.params);
    c.save(&w.dir.join(MODEL_CKPT))?;
    println!(
        "{} epochs, best epoch {:?}, validation recall {:?} -> {:?}",
        outcome.epochs_run, outcome.best_epoch, outcome.initial_val_recall, outcome.best_val_recall
    );
    Ok(())
}

fn raw_ids(map: &IdMap, ids: impl IntoIterator<Item = usize>) -> Vec<String> {
    ids.into_iter().map(|i| map.raw(i).to_owned()).collect()
}

fn cmd_augment_stats(w: &Workdir) -> Result<()> {
    let prep = w.prepared()?;
    let theta = w.model()?;
    let cfg = RunConfig {
        augment: true,
        ..w.cfg.clone()
    };
    let setup = pipeline::test_setup(&cfg, &prep, &theta)?;
    let edges = &setup.augmentation.edges;
    let mut per_user = vec![0usize; prep.users.len()];
    for &(u, _, _) in edges {
        per_user[u] += 1;
    }
    let touched = per_user.iter().filter(|&&n| n > 0).count();
    let onto_new = edges
        .iter()
        .filter(|e| prep.partition.new_items.binary_search(&e.1).is_ok())
        .count();
    let from_new = edges
        .iter()
        .filter(|e| prep.partition.new_users.binary_search(&e.0).is_ok())
        .count();
    let stats = json!({
        "config": cfg,
        "observed_edges": setup.observed.nnz(),
        "augmented_edges": edges.len(),
        "mean_score": setup.augmentation.mean_score(),
        "users_with_new_edges": touched,
        "max_edges_per_user": per_user.iter().max().copied().unwrap_or(0),
        "edges_from_new_users": from_new,
        "edges_onto_new_items": onto_new,
    });
    write_json(&w.dir.join(AUG_STATS), &stats)?;
    let mut f = fs::File::create(w.dir.join(AUG_EDGES))?;
    for &(u, i, s) in edges {
        writeln!(f, "{}\t{}\t{s}", prep.users.raw(u), prep.items.raw(i))?;
    }
    println!(
        "{} augmented edges (mean score {:.4}) over {} users; {} onto new items, {} from new users",
        edges.len(),
        setup.augmentation.mean_score(),
        touched,
        onto_new,
        from_new
    );
    Ok(())
}

fn tmag_results(w: &Workdir) -> Result<(Prepared, Vec<TaskResult>)> {
    let theta = w.model()?;
    let prep = w.prepared()?;
    let clusters = w.clusters()?;
    let setup = pipeline::test_setup(&w.cfg, &prep, &theta)?;
    let results = pipeline::meta_test(&w.cfg, &prep, &clusters, &setup)?;
    Ok((prep, results))
}

fn cmd_meta_test(w: &Workdir) -> Result<()> {
    let (prep, results) = tmag_results(w)?;
    let mut f = fs::File::create(w.dir.join(RANKINGS))?;
    writeln!(f, "# task\tuser\titems (best first)")?;
    for r in &results {
        for ranked in &r.rankings {
            let items = raw_ids(&prep.items, ranked.items.iter().copied()).join(",");
            writeln!(f, "{}\t{}\t{items}", r.task.number(), prep.users.raw(ranked.user))?;
        }
    }
    write_metrics(w, METRICS, "tmag", &results)?;
    Ok(())
}

fn cmd_evaluate(w: &Workdir, method: Method) -> Result<Vec<MetricReport>> {
    match method {
        Method::Tmag => {
            let (_, results) = tmag_results(w)?;
            write_metrics(w, METRICS, "tmag", &results)
        }
        Method::Mf => {
            let prep = w.prepared()?;
            let p = checkpoint::read_mf(&Checkpoint::load(&need(&w.dir, MF_CKPT, "mf")?)?)?;
            let results = pipeline::evaluate_mf(&w.cfg, &prep, &p)?;
            write_metrics(w, MF_METRICS, "mf-bpr", &results)
        }
    }
}

fn cmd_mf(w: &Workdir) -> Result<()> {
    let prep = w.prepared()?;
    let p = pipeline::train_mf(&w.cfg, &prep)?;
    let mut c = w.checkpoint();
    checkpoint::push_mf(&mut c, &p);
    c.save(&w.dir.join(MF_CKPT))?;
    Ok(())
}

fn write_rows(path: &Path, ids: &IdMap, rows: impl Iterator<Item = (usize, Vec<f64>)>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for (i, v) in rows {
        let v: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        writeln!(f, "{}\t{}", ids.raw(i), v.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Fused representations on the test graph, before per-cluster adaptation.
fn cmd_export(w: &Workdir) -> Result<()> {
    let prep = w.prepared()?;
    let theta = w.model()?;
    let setup = pipeline::test_setup(&w.cfg, &prep, &theta)?;
    let ctx = ModelContext::new(&setup.graph, &prep.user_attr, &prep.item_attr, w.cfg.model_config()?)?;
    let fw = forward(&setup.params, &ctx)?;
    write_rows(
        &w.dir.join("user_embeddings.tsv"),
        &prep.users,
        (0..prep.users.len()).map(|u| (u, fw.fused_user(u))),
    )?;
    write_rows(
        &w.dir.join("item_embeddings.tsv"),
        &prep.items,
        (0..prep.items.len()).map(|i| (i, fw.fused_item(i))),
    )?;
    println!("wrote embeddings to {}", w.dir.display());
    Ok(())
}

fn cmd_run(w: &Workdir) -> Result<()> {
    let prep = cmd_ingest(w)?;
    let ae = cmd_pretrain(w, &prep)?;
    let clusters = cmd_cluster(w, &prep, &ae)?;
    cmd_meta_train(w, &prep, &ae, &clusters)?;
    cmd_meta_test(w)
}

fn cmd_experiment(which: Experiment, seeds: &[u64], out: Option<&Path>, common: &Common) -> Result<()> {
    // validate the overrides once up front so a typo fails before any training
    RunConfig::default().with_overrides(&common.overrides)?;
    let tweak = |c: &mut RunConfig| {
        *c = c.with_overrides(&common.overrides).expect("validated above");
    };
    let (table, value) = match which {
        Experiment::Table3 => {
            let rows = experiment::alignment(seeds, &tweak)?;
            (experiment::format_alignment(&rows), serde_json::to_value(&rows)?)
        }
        Experiment::Table5 => {
            let rows = experiment::augmentation(seeds, 0.3, &tweak)?;
            (experiment::format_augmentation(&rows), serde_json::to_value(&rows)?)
        }
        Experiment::Fig3 => {
            let rows = experiment::sparsity(seeds, &[5, 15, 30], &tweak)?;
            (experiment::format_sparsity(&rows), serde_json::to_value(&rows)?)
        }
    };
    print!("{table}");
    if let Some(p) = out {
        write_json(p, &json!({ "experiment": format!("{which:?}").to_lowercase(), "overrides": common.overrides, "rows": value }))?;
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    let open = |c: &Common| Workdir::open(c.resolve()?);
    match &cli.command {
        Command::Synth {
            out,
            users,
            items,
            clusters,
            seed,
        } => cmd_synth(out, *users, *items, *clusters, *seed),
        Command::Movielens { dir, out } => {
            println!("wrote {}", prepare_movielens(dir, out)?.display());
            Ok(())
        }
        Command::Ingest(c) => cmd_ingest(&open(c)?).map(drop),
        Command::PretrainAe(c) => {
            let w = open(c)?;
            cmd_pretrain(&w, &w.prepared()?).map(drop)
        }
        Command::Cluster(c) => {
            let w = open(c)?;
            cmd_cluster(&w, &w.prepared()?, &w.pretrained()?).map(drop)
        }
        Command::MetaTrain(c) => {
            let w = open(c)?;
            cmd_meta_train(&w, &w.prepared()?, &w.pretrained()?, &w.clusters()?)
        }
        Command::AugmentStats(c) => cmd_augment_stats(&open(c)?),
        Command::MetaTest(c) => cmd_meta_test(&open(c)?),
        Command::Evaluate { method, common } => cmd_evaluate(&open(common)?, *method).map(drop),
        Command::Mf(c) => cmd_mf(&open(c)?),
        Command::ExportEmbeddings(c) => cmd_export(&open(c)?),
        Command::Run(c) => cmd_run(&open(c)?),
        Command::Experiment {
            which,
            seeds,
            out,
            common,
        } => cmd_experiment(*which, seeds, out.as_deref(), common),
    }
}

/// Cap rayon's pool from `TMAG_THREADS`.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("TMAG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| TmagError::Usage(format!("TMAG_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| TmagError::Usage(format!("thread pool: {e}")))
}

/// Parse arguments, run, and map the outcome to an exit status.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match init_threads().and_then(|_| execute(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
