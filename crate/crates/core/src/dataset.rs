//! Ingestion of explicit rating logs and content attributes, and the
//! cold-start partitioning built on top of them.
//!
//! Raw ids are re-indexed densely in first-seen order. Ratings are binarized
//! into an [`ImplicitMatrix`], users are filtered by activity, and users and
//! items are split into existing/new halves whose cross products give the
//! meta-training matrix and the three cold-start evaluation tasks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TmagError};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InteractionFormat {
    /// `user<TAB>item<TAB>rating<TAB>timestamp`
    Tsv,
    /// MovieLens `user::item::rating::timestamp`
    MovielensDat,
}

impl std::str::FromStr for InteractionFormat {
    type Err = TmagError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Self::Tsv),
            "movielens_dat" | "movielens-dat" | "dat" => Ok(Self::MovielensDat),
            other => Err(TmagError::Usage(format!("unknown interaction format {other:?}"))),
        }
    }
}

/// Bijection between raw string ids and dense `0..n` ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct IdMap {
    raw: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for IdMap {
    type Error = TmagError;

    fn try_from(raw: Vec<String>) -> Result<Self> {
        Self::from_raw(raw)
    }
}

impl From<IdMap> for Vec<String> {
    fn from(m: IdMap) -> Self {
        m.raw
    }
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_raw(raw: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(raw.len());
        for (i, r) in raw.iter().enumerate() {
            if index.insert(r.clone(), i).is_some() {
                return Err(TmagError::data(format!("duplicate raw id {r:?} in id map")));
            }
        }
        Ok(Self { raw, index })
    }

    /// Dense id for `raw`, allocating the next id on first sight.
    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.raw.len();
        self.raw.push(raw.to_owned());
        self.index.insert(raw.to_owned(), i);
        i
    }

    pub fn get(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, dense: usize) -> &str {
        &self.raw[dense]
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Restrict to the given dense ids, renumbered in the order given.
    pub fn select(&self, keep: &[usize]) -> IdMap {
        IdMap::from_raw(keep.iter().map(|&i| self.raw[i].clone()).collect())
            .expect("selecting from a bijection stays a bijection")
    }

    /// Two-column TSV `raw_id<TAB>dense_id`.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (i, r) in self.raw.iter().enumerate() {
            writeln!(w, "{r}\t{i}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (raw, dense) = line.split_once('\t').ok_or_else(|| TmagError::Parse {
                path: path.to_owned(),
                line: n + 1,
                msg: "expected raw_id<TAB>dense_id".into(),
            })?;
            let dense: usize = dense.trim().parse().map_err(|_| TmagError::Parse {
                path: path.to_owned(),
                line: n + 1,
                msg: format!("bad dense id {dense:?}"),
            })?;
            pairs.push((dense, raw.to_owned()));
        }
        pairs.sort();
        for (expect, (dense, _)) in pairs.iter().enumerate() {
            if *dense != expect {
                return Err(TmagError::data(format!(
                    "{}: dense ids are not contiguous at {expect}",
                    path.display()
                )));
            }
        }
        Self::from_raw(pairs.into_iter().map(|(_, r)| r).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub timestamp: i64,
}

/// Deduplicated explicit-feedback records over dense ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    pub users: IdMap,
    pub items: IdMap,
}

impl InteractionLog {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Earliest timestamp per user over all records.
    pub fn first_user_timestamps(&self) -> Vec<Option<i64>> {
        let mut out = vec![None; self.n_users()];
        for r in &self.records {
            let t: &mut Option<i64> = &mut out[r.user];
            *t = Some(t.map_or(r.timestamp, |v| v.min(r.timestamp)));
        }
        out
    }

    /// Earliest timestamp per item over all records.
    pub fn first_item_timestamps(&self) -> Vec<Option<i64>> {
        let mut out = vec![None; self.n_items()];
        for r in &self.records {
            let t: &mut Option<i64> = &mut out[r.item];
            *t = Some(t.map_or(r.timestamp, |v| v.min(r.timestamp)));
        }
        out
    }
}

pub fn parse_interactions(path: &Path, format: InteractionFormat) -> Result<InteractionLog> {
    let text = fs::read_to_string(path)?;
    parse_interactions_str(&text, format, path)
}

/// Parse interaction text; `origin` names the source in error messages.
pub fn parse_interactions_str(
    text: &str,
    format: InteractionFormat,
    origin: &Path,
) -> Result<InteractionLog> {
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let mut latest: HashMap<(usize, usize), usize> = HashMap::new();
    let mut records: Vec<Interaction> = Vec::new();

    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| TmagError::Parse {
            path: origin.to_owned(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = match format {
            InteractionFormat::Tsv => line.split('\t').collect(),
            InteractionFormat::MovielensDat => line.split("::").collect(),
        };
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let rating: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad rating {:?}", fields[2])))?;
        if !rating.is_finite() {
            return Err(bad(format!("non-finite rating {:?}", fields[2])));
        }
        let timestamp: i64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad timestamp {:?}", fields[3])))?;
        let user = users.intern(fields[0].trim());
        let item = items.intern(fields[1].trim());
        let rec = Interaction {
            user,
            item,
            rating,
            timestamp,
        };
        match latest.get(&(user, item)) {
            Some(&slot) => {
                if timestamp >= records[slot].timestamp {
                    records[slot] = rec;
                }
            }
            None => {
                latest.insert((user, item), records.len());
                records.push(rec);
            }
        }
    }
    if records.is_empty() {
        return Err(TmagError::data(format!(
            "{}: no interaction records",
            origin.display()
        )));
    }
    Ok(InteractionLog {
        records,
        users,
        items,
    })
}

/// Sparse binary user-item matrix; rows are sorted item lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImplicitMatrix {
    n_users: usize,
    n_items: usize,
    rows: Vec<Vec<usize>>,
}

impl ImplicitMatrix {
    pub fn new(n_users: usize, n_items: usize) -> Self {
        Self {
            n_users,
            n_items,
            rows: vec![Vec::new(); n_users],
        }
    }

    pub fn from_pairs(
        n_users: usize,
        n_items: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut m = Self::new(n_users, n_items);
        for (u, i) in pairs {
            if u >= n_users || i >= n_items {
                return Err(TmagError::data(format!(
                    "pair ({u},{i}) outside {n_users}x{n_items}"
                )));
            }
            m.rows[u].push(i);
        }
        for r in &mut m.rows {
            r.sort_unstable();
            r.dedup();
        }
        Ok(m)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn items_of(&self, user: usize) -> &[usize] {
        &self.rows[user]
    }

    pub fn degree(&self, user: usize) -> usize {
        self.rows[user].len()
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.rows[user].binary_search(&item).is_ok()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(u, r)| r.iter().map(move |&i| (u, i)))
    }

    /// Users with at least one positive.
    pub fn active_users(&self) -> Vec<usize> {
        (0..self.n_users).filter(|&u| !self.rows[u].is_empty()).collect()
    }

    /// Keep only the pairs accepted by `keep`.
    pub fn filter(&self, mut keep: impl FnMut(usize, usize) -> bool) -> Self {
        let rows = self
            .rows
            .iter()
            .enumerate()
            .map(|(u, r)| r.iter().copied().filter(|&i| keep(u, i)).collect())
            .collect();
        Self {
            n_users: self.n_users,
            n_items: self.n_items,
            rows,
        }
    }

    /// Union of two matrices over the same index space.
    pub fn union(&self, other: &ImplicitMatrix) -> Result<Self> {
        if self.n_users != other.n_users || self.n_items != other.n_items {
            return Err(TmagError::data("union of matrices with different shapes"));
        }
        Self::from_pairs(self.n_users, self.n_items, self.pairs().chain(other.pairs()))
    }
}

/// Keep `(u, i)` iff `rating > threshold`. Shape is preserved.
pub fn binarize(log: &InteractionLog, threshold: f64) -> ImplicitMatrix {
    let pairs = log
        .records
        .iter()
        .filter(|r| r.rating > threshold)
        .map(|r| (r.user, r.item));
    ImplicitMatrix::from_pairs(log.n_users(), log.n_items(), pairs)
        .expect("log ids are dense by construction")
}

/// A matrix whose users were re-densified by [`filter_users`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilteredMatrix {
    pub matrix: ImplicitMatrix,
    /// New dense user id → user id in the unfiltered matrix.
    pub user_origin: Vec<usize>,
}

/// Retain users whose degree lies in `[min_inter, max_inter]`.
pub fn filter_users(m: &ImplicitMatrix, min_inter: usize, max_inter: usize) -> Result<FilteredMatrix> {
    if min_inter > max_inter {
        return Err(TmagError::Usage(format!(
            "min_inter {min_inter} exceeds max_inter {max_inter}"
        )));
    }
    let user_origin: Vec<usize> = (0..m.n_users())
        .filter(|&u| (min_inter..=max_inter).contains(&m.degree(u)))
        .collect();
    if user_origin.is_empty() {
        return Err(TmagError::data(format!(
            "every user was filtered out by the [{min_inter}, {max_inter}] interaction bounds"
        )));
    }
    let rows = user_origin.iter().map(|&u| m.rows[u].clone()).collect();
    Ok(FilteredMatrix {
        matrix: ImplicitMatrix {
            n_users: user_origin.len(),
            n_items: m.n_items(),
            rows,
        },
        user_origin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UserSplitRule {
    Random,
    FirstRatingTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItemSplitRule {
    Random,
    ReleaseYear,
    FirstRatedTime,
}

impl std::str::FromStr for UserSplitRule {
    type Err = TmagError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "first_rating_time" => Ok(Self::FirstRatingTime),
            o => Err(TmagError::Usage(format!("unknown user split rule {o:?}"))),
        }
    }
}

impl std::str::FromStr for ItemSplitRule {
    type Err = TmagError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "release_year" => Ok(Self::ReleaseYear),
            "first_rated_time" => Ok(Self::FirstRatedTime),
            o => Err(TmagError::Usage(format!("unknown item split rule {o:?}"))),
        }
    }
}

/// Existing/new split of users and items with the four cross-product slices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColdStartPartition {
    pub existing_users: Vec<usize>,
    pub new_users: Vec<usize>,
    pub existing_items: Vec<usize>,
    pub new_items: Vec<usize>,
    pub is_new_user: Vec<bool>,
    pub is_new_item: Vec<bool>,
    /// Existing users × existing items.
    pub meta_train: ImplicitMatrix,
    /// New users × existing items.
    pub task1: ImplicitMatrix,
    /// Existing users × new items.
    pub task2: ImplicitMatrix,
    /// New users × new items.
    pub task3: ImplicitMatrix,
}

impl ColdStartPartition {
    pub fn task(&self, task: EvalTask) -> &ImplicitMatrix {
        match task {
            EvalTask::Task1 => &self.task1,
            EvalTask::Task2 => &self.task2,
            EvalTask::Task3 => &self.task3,
        }
    }
}

/// The three cold-start evaluation scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvalTask {
    /// Existing items for new users.
    Task1,
    /// New items for existing users.
    Task2,
    /// New items for new users.
    Task3,
}

impl EvalTask {
    pub const ALL: [EvalTask; 3] = [EvalTask::Task1, EvalTask::Task2, EvalTask::Task3];

    pub fn number(self) -> u8 {
        match self {
            EvalTask::Task1 => 1,
            EvalTask::Task2 => 2,
            EvalTask::Task3 => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(EvalTask::Task1),
            2 => Some(EvalTask::Task2),
            3 => Some(EvalTask::Task3),
            _ => None,
        }
    }

    pub fn new_users(self) -> bool {
        matches!(self, EvalTask::Task1 | EvalTask::Task3)
    }

    pub fn new_items(self) -> bool {
        matches!(self, EvalTask::Task2 | EvalTask::Task3)
    }
}

/// Number of "existing" entities out of `total`: `floor(ratio * total)`,
/// leaving at least one new entity.
pub fn existing_count(total: usize, ratio: f64) -> usize {
    let n = (ratio * total as f64).floor() as usize;
    n.min(total.saturating_sub(1))
}

/// Order entity ids so that the first `existing_count` are existing.
fn order_entities(
    n: usize,
    keys: Option<Vec<Option<i64>>>,
    raw_ids: &dyn Fn(usize) -> String,
    seed: u64,
    domain: u64,
    kind: &str,
) -> Vec<usize> {
    let keys = match keys {
        Some(k) if k.iter().all(Option::is_some) => Some(k),
        Some(_) => {
            warn!("some {kind}s have no time key; falling back to the random split rule");
            None
        }
        None => None,
    };
    let mut ids: Vec<usize> = (0..n).collect();
    match keys {
        Some(keys) => {
            ids.sort_by(|&a, &b| {
                keys[a]
                    .cmp(&keys[b])
                    .then_with(|| raw_id_cmp(&raw_ids(a), &raw_ids(b)))
            });
        }
        None => {
            let mut r = rng::stream(seed, &[rng::DOMAIN_SPLIT, domain]);
            ids.shuffle(&mut r);
        }
    }
    ids
}

/// Numeric comparison when both ids are integers, lexicographic otherwise.
fn raw_id_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SplitRules {
    pub user_rule: UserSplitRule,
    pub item_rule: ItemSplitRule,
    pub ratio: f64,
    pub seed: u64,
}

/// Split users and items into existing/new groups.
///
/// `filtered` carries the re-densified users of `log`'s binarized matrix;
/// `item_release` supplies per-item release years for
/// [`ItemSplitRule::ReleaseYear`].
pub fn split_cold_start(
    log: &InteractionLog,
    filtered: &FilteredMatrix,
    item_release: Option<&[Option<i64>]>,
    rules: SplitRules,
) -> Result<ColdStartPartition> {
    if !(rules.ratio > 0.0 && rules.ratio < 1.0) {
        return Err(TmagError::Usage(format!(
            "split ratio {} must lie in (0, 1)",
            rules.ratio
        )));
    }
    let m = &filtered.matrix;
    let n_users = m.n_users();
    let n_items = m.n_items();

    let user_keys = match rules.user_rule {
        UserSplitRule::Random => None,
        UserSplitRule::FirstRatingTime => {
            let first = log.first_user_timestamps();
            Some(filtered.user_origin.iter().map(|&o| first[o]).collect())
        }
    };
    let item_keys = match rules.item_rule {
        ItemSplitRule::Random => None,
        ItemSplitRule::FirstRatedTime => Some(log.first_item_timestamps()),
        ItemSplitRule::ReleaseYear => item_release.map(<[_]>::to_vec),
    };
    let user_raw = |u: usize| log.users.raw(filtered.user_origin[u]).to_owned();
    let item_raw = |i: usize| log.items.raw(i).to_owned();
    let user_order = order_entities(n_users, user_keys, &user_raw, rules.seed, 0, "user");
    let item_order = order_entities(n_items, item_keys, &item_raw, rules.seed, 1, "item");

    let n_eu = existing_count(n_users, rules.ratio);
    let n_ei = existing_count(n_items, rules.ratio);
    if n_eu == 0 || n_ei == 0 {
        return Err(TmagError::data(format!(
            "cold-start split leaves an empty side ({n_users} users, {n_items} items, ratio {})",
            rules.ratio
        )));
    }
    let mut is_new_user = vec![false; n_users];
    for &u in &user_order[n_eu..] {
        is_new_user[u] = true;
    }
    let mut is_new_item = vec![false; n_items];
    for &i in &item_order[n_ei..] {
        is_new_item[i] = true;
    }
    let split = |flags: &[bool], want_new: bool| -> Vec<usize> {
        (0..flags.len()).filter(|&e| flags[e] == want_new).collect()
    };
    let slice = |new_u: bool, new_i: bool| m.filter(|u, i| is_new_user[u] == new_u && is_new_item[i] == new_i);

    Ok(ColdStartPartition {
        existing_users: split(&is_new_user, false),
        new_users: split(&is_new_user, true),
        existing_items: split(&is_new_item, false),
        new_items: split(&is_new_item, true),
        meta_train: slice(false, false),
        task1: slice(true, false),
        task2: slice(false, true),
        task3: slice(true, true),
        is_new_user,
        is_new_item,
    })
}

/// Per-user disjoint support/query interaction sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportQuery {
    pub users: Vec<usize>,
    pub support: ImplicitMatrix,
    pub query: ImplicitMatrix,
}

/// Users in `users` with more than `query_size` positives in `m`.
pub fn eligible_users(m: &ImplicitMatrix, users: &[usize], query_size: usize) -> Vec<usize> {
    users
        .iter()
        .copied()
        .filter(|&u| m.degree(u) > query_size)
        .collect()
}

/// Move `query_size` random positives of each user into the query set.
pub fn build_support_query(
    m: &ImplicitMatrix,
    users: &[usize],
    query_size: usize,
    seed: u64,
) -> Result<SupportQuery> {
    let offenders: Vec<usize> = users
        .iter()
        .copied()
        .filter(|&u| m.degree(u) <= query_size)
        .collect();
    if !offenders.is_empty() {
        return Err(TmagError::data(format!(
            "users with at most {query_size} positives cannot be split into support and query: {offenders:?}"
        )));
    }
    let mut support = ImplicitMatrix::new(m.n_users(), m.n_items());
    let mut query = ImplicitMatrix::new(m.n_users(), m.n_items());
    for &u in users {
        let mut items = m.items_of(u).to_vec();
        let mut r = rng::stream(seed, &[rng::DOMAIN_SPLIT, 2, u as u64]);
        items.shuffle(&mut r);
        let (q, s) = items.split_at(query_size);
        query.rows[u] = sorted(q);
        support.rows[u] = sorted(s);
    }
    let mut users = users.to_vec();
    users.sort_unstable();
    users.dedup();
    Ok(SupportQuery {
        users,
        support,
        query,
    })
}

/// Keep at most `cap` random support items per user.
pub fn cap_support(sq: &SupportQuery, cap: usize, seed: u64) -> SupportQuery {
    let mut out = sq.clone();
    for &u in &sq.users {
        let items = sq.support.items_of(u);
        if items.len() > cap {
            let mut v = items.to_vec();
            let mut r = rng::stream(seed, &[rng::DOMAIN_SPLIT, 3, u as u64]);
            v.shuffle(&mut r);
            v.truncate(cap);
            out.support.rows[u] = sorted(&v);
        }
    }
    out
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    OneHot,
    MultiHot,
}

/// A categorical field. Its segment has one slot per vocabulary entry plus a
/// trailing UNK slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeField {
    pub name: String,
    pub kind: FieldKind,
    pub vocab: Vec<String>,
}

impl AttributeField {
    pub fn width(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn unk_index(&self) -> usize {
        self.vocab.len()
    }

    fn index_of(&self, value: &str) -> usize {
        self.vocab
            .iter()
            .position(|v| v == value)
            .unwrap_or(self.unk_index())
    }
}

/// Frozen field vocabularies for one entity kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub fields: Vec<AttributeField>,
}

type RawAttributes = Vec<(String, Vec<(String, Vec<String>)>)>;

fn parse_attribute_lines(text: &str, origin: &Path) -> Result<RawAttributes> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let id = cols.next().unwrap_or_default().trim().to_owned();
        let mut fields = Vec::new();
        for col in cols {
            if col.is_empty() {
                continue;
            }
            let (name, values) = col.split_once(':').ok_or_else(|| TmagError::Parse {
                path: origin.to_owned(),
                line: n + 1,
                msg: format!("expected field:value, got {col:?}"),
            })?;
            let values = values
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(str::to_owned)
                .collect();
            fields.push((name.trim().to_owned(), values));
        }
        out.push((id, fields));
    }
    Ok(out)
}

impl AttributeSchema {
    pub fn width(&self) -> usize {
        self.fields.iter().map(AttributeField::width).sum()
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.fields
            .iter()
            .map(|f| {
                let o = off;
                off += f.width();
                o
            })
            .collect()
    }

    /// Infer fields and vocabularies (sorted) from an attribute file.
    pub fn infer(path: &Path) -> Result<Self> {
        Self::infer_str(&fs::read_to_string(path)?, path)
    }

    pub fn infer_str(text: &str, origin: &Path) -> Result<Self> {
        let mut vocab: BTreeMap<String, (BTreeSet<String>, bool)> = BTreeMap::new();
        for (_, fields) in parse_attribute_lines(text, origin)? {
            for (name, values) in fields {
                let e = vocab.entry(name).or_default();
                e.1 |= values.len() > 1;
                e.0.extend(values);
            }
        }
        Ok(Self {
            fields: vocab
                .into_iter()
                .map(|(name, (values, multi))| AttributeField {
                    name,
                    kind: if multi { FieldKind::MultiHot } else { FieldKind::OneHot },
                    vocab: values.into_iter().collect(),
                })
                .collect(),
        })
    }
}

/// Binary sparse row of an attribute table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    /// Sorted active positions within the full concatenated width.
    pub active: Vec<usize>,
}

impl AttributeVector {
    pub fn to_dense(&self, width: usize) -> Vec<f64> {
        let mut v = vec![0.0; width];
        for &i in &self.active {
            v[i] = 1.0;
        }
        v
    }
}

/// One [`AttributeVector`] per dense entity id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeTable {
    pub width: usize,
    pub rows: Vec<AttributeVector>,
}

impl AttributeTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dense_row(&self, e: usize) -> Vec<f64> {
        self.rows[e].to_dense(self.width)
    }

    /// Keep rows `keep` in the given order.
    pub fn select(&self, keep: &[usize]) -> Self {
        Self {
            width: self.width,
            rows: keep.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

/// Encode an attribute file against a frozen schema for the entities of `ids`.
pub fn encode_attributes(schema: &AttributeSchema, raw: &Path, ids: &IdMap) -> Result<AttributeTable> {
    encode_attributes_str(schema, &fs::read_to_string(raw)?, raw, ids)
}

pub fn encode_attributes_str(
    schema: &AttributeSchema,
    text: &str,
    origin: &Path,
    ids: &IdMap,
) -> Result<AttributeTable> {
    let offsets = schema.offsets();
    let mut rows = vec![AttributeVector::default(); ids.len()];
    for (id, fields) in parse_attribute_lines(text, origin)? {
        let Some(e) = ids.get(&id) else { continue };
        let mut active = BTreeSet::new();
        for (name, values) in fields {
            let f = schema
                .fields
                .iter()
                .position(|f| f.name == name)
                .ok_or_else(|| TmagError::data(format!("{}: unknown attribute field {name:?}", origin.display())))?;
            let field = &schema.fields[f];
            let values: Vec<&String> = match field.kind {
                FieldKind::OneHot => values.iter().take(1).collect(),
                FieldKind::MultiHot => values.iter().collect(),
            };
            for v in values {
                active.insert(offsets[f] + field.index_of(v));
            }
        }
        rows[e] = AttributeVector {
            active: active.into_iter().collect(),
        };
    }
    Ok(AttributeTable {
        width: schema.width(),
        rows,
    })
}

/// Integer value of `field` per entity, e.g. a release year.
pub fn numeric_field(raw: &Path, field: &str, ids: &IdMap) -> Result<Vec<Option<i64>>> {
    let text = fs::read_to_string(raw)?;
    let mut out = vec![None; ids.len()];
    for (id, fields) in parse_attribute_lines(&text, raw)? {
        let Some(e) = ids.get(&id) else { continue };
        if let Some((_, vals)) = fields.iter().find(|(n, _)| n == field) {
            out[e] = vals.first().and_then(|v| v.parse().ok());
        }
    }
    Ok(out)
}

/// `users.dat` (`id::gender::age::occupation::zip`) as an attribute TSV.
pub fn movielens_users(text: &str) -> String {
    let mut out = String::new();
    for f in text.lines().map(|l| l.split("::").collect::<Vec<_>>()) {
        if let [id, gender, age, occupation, zip, ..] = f[..] {
            let region = zip.chars().next().unwrap_or('?');
            out.push_str(&format!("{id}\tgender:{gender}\tage:{age}\toccupation:{occupation}\tregion:{region}\n"));
        }
    }
    out
}

/// `movies.dat` (`id::title (year)::genre|genre`) as an attribute TSV with a
/// `year` field. Non-UTF-8 titles are fine: only the year is kept.
pub fn movielens_items(text: &str) -> String {
    let mut out = String::new();
    for f in text.lines().map(|l| l.split("::").collect::<Vec<_>>()) {
        if let [id, title, genres, ..] = f[..] {
            let year = title
                .trim()
                .strip_suffix(')')
                .and_then(|t| t.rsplit_once('('))
                .map(|(_, y)| y)
                .filter(|y| y.len() == 4 && y.bytes().all(|b| b.is_ascii_digit()));
            out.push_str(&format!("{id}\tgenre:{}", genres.replace('|', ",")));
            if let Some(y) = year {
                out.push_str(&format!("\tyear:{y}"));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin() -> &'static Path {
        Path::new("<test>")
    }

    #[test]
    fn movielens_line_reindexes_to_zero() {
        let log = parse_interactions_str("1::1193::5::978300760\n", InteractionFormat::MovielensDat, origin())
            .unwrap();
        assert_eq!(
            log.records,
            vec![Interaction {
                user: 0,
                item: 0,
                rating: 5.0,
                timestamp: 978300760
            }]
        );
        assert_eq!(log.users.raw(0), "1");
        assert_eq!(log.items.raw(0), "1193");
    }

    #[test]
    fn duplicate_pair_keeps_latest_timestamp() {
        let text = "u\ti\t2\t20\nu\ti\t5\t10\n";
        let log = parse_interactions_str(text, InteractionFormat::Tsv, origin()).unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.records[0].timestamp, 20);
        assert_eq!(log.records[0].rating, 2.0);
    }

    #[test]
    fn bad_rating_names_the_line() {
        let text = "1\t2\t4\t1\n1\t3\tabc\t2\n";
        let err = parse_interactions_str(text, InteractionFormat::Tsv, origin()).unwrap_err();
        match err {
            TmagError::Parse { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("abc"));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(parse_interactions_str("\n\n", InteractionFormat::Tsv, origin()).is_err());
    }

    #[test]
    fn binarize_is_strictly_above_threshold() {
        let text = "a\tx\t4\t1\na\ty\t3\t1\nb\tx\t1\t1\n";
        let log = parse_interactions_str(text, InteractionFormat::Tsv, origin()).unwrap();
        let m = binarize(&log, 3.0);
        assert!(m.contains(0, 0));
        assert!(!m.contains(0, 1));
        assert_eq!(m.nnz(), 1);

        let low = binarize(&log, 5.0);
        assert_eq!(low.nnz(), 0);
        assert_eq!((low.n_users(), low.n_items()), (2, 2));
    }

    fn matrix_with_degrees(degrees: &[usize]) -> ImplicitMatrix {
        let n_items = *degrees.iter().max().unwrap();
        let pairs = degrees
            .iter()
            .enumerate()
            .flat_map(|(u, &d)| (0..d).map(move |i| (u, i)));
        ImplicitMatrix::from_pairs(degrees.len(), n_items, pairs).unwrap()
    }

    #[test]
    fn filter_users_bounds_are_inclusive() {
        let m = matrix_with_degrees(&[12, 13, 100, 101]);
        let f = filter_users(&m, 13, 100).unwrap();
        assert_eq!(f.user_origin, vec![1, 2]);
        assert_eq!(f.matrix.n_users(), 2);
        assert_eq!(f.matrix.n_items(), m.n_items());
        assert_eq!(f.matrix.degree(0), 13);
    }

    #[test]
    fn filter_users_rejects_empty_result() {
        let m = matrix_with_degrees(&[1, 2]);
        assert!(filter_users(&m, 13, 100).is_err());
    }

    #[test]
    fn partition_rounding() {
        assert_eq!(existing_count(10, 0.8), 8);
        assert_eq!(existing_count(1, 0.8), 0);
        assert_eq!(existing_count(3, 0.99), 2);
    }

    fn toy_log(n_users: usize, n_items: usize) -> InteractionLog {
        let mut text = String::new();
        for u in 0..n_users {
            for i in 0..n_items {
                if (u + i) % 2 == 0 || i == 0 {
                    text.push_str(&format!("{u}\t{i}\t5\t{}\n", 1000 + 10 * u + i));
                }
            }
        }
        parse_interactions_str(&text, InteractionFormat::Tsv, origin()).unwrap()
    }

    #[test]
    fn random_split_counts_and_slices() {
        let log = toy_log(10, 10);
        let m = binarize(&log, 3.0);
        let f = filter_users(&m, 1, 100).unwrap();
        let rules = SplitRules {
            user_rule: UserSplitRule::Random,
            item_rule: ItemSplitRule::Random,
            ratio: 0.8,
            seed: 5,
        };
        let p = split_cold_start(&log, &f, None, rules).unwrap();
        assert_eq!(p.existing_users.len(), 8);
        assert_eq!(p.new_users.len(), 2);
        for (u, i) in p.task3.pairs() {
            assert!(p.is_new_user[u] && p.is_new_item[i]);
        }
        let total = p.meta_train.nnz() + p.task1.nnz() + p.task2.nnz() + p.task3.nnz();
        assert_eq!(total, f.matrix.nnz());

        let again = split_cold_start(&log, &f, None, rules).unwrap();
        assert_eq!(again.new_users, p.new_users);
    }

    #[test]
    fn first_rating_time_marks_latest_users_new() {
        let log = toy_log(10, 4);
        let m = binarize(&log, 3.0);
        let f = filter_users(&m, 1, 100).unwrap();
        let rules = SplitRules {
            user_rule: UserSplitRule::FirstRatingTime,
            item_rule: ItemSplitRule::Random,
            ratio: 0.8,
            seed: 1,
        };
        let p = split_cold_start(&log, &f, None, rules).unwrap();
        let raw: Vec<&str> = p.new_users.iter().map(|&u| log.users.raw(f.user_origin[u])).collect();
        assert_eq!(raw, vec!["8", "9"]);
    }

    #[test]
    fn timestamp_ties_break_by_raw_id() {
        let text = "10\ta\t5\t1\n2\ta\t5\t1\n3\ta\t5\t1\n";
        let log = parse_interactions_str(text, InteractionFormat::Tsv, origin()).unwrap();
        let f = filter_users(&binarize(&log, 3.0), 1, 10).unwrap();
        let rules = SplitRules {
            user_rule: UserSplitRule::FirstRatingTime,
            item_rule: ItemSplitRule::Random,
            ratio: 0.5,
            seed: 0,
        };
        // existing = floor(1.5) = 1; ids ordered 2 < 3 < 10 numerically
        let p = split_cold_start(&log, &f, None, rules);
        // one item only: the item split has no existing side
        assert!(p.is_err());
        let text = format!("{text}10\tb\t5\t1\n");
        let log = parse_interactions_str(&text, InteractionFormat::Tsv, origin()).unwrap();
        let f = filter_users(&binarize(&log, 3.0), 1, 10).unwrap();
        let p = split_cold_start(&log, &f, None, rules).unwrap();
        let existing: Vec<&str> = p.existing_users.iter().map(|&u| log.users.raw(f.user_origin[u])).collect();
        assert_eq!(existing, vec!["2"]);
    }

    #[test]
    fn support_query_sizes_and_disjointness() {
        let m = matrix_with_degrees(&[25, 11]);
        let sq = build_support_query(&m, &[0, 1], 10, 3).unwrap();
        assert_eq!(sq.query.degree(0), 10);
        assert_eq!(sq.support.degree(0), 15);
        assert_eq!(sq.support.degree(1), 1);
        for u in 0..2 {
            for &i in sq.query.items_of(u) {
                assert!(!sq.support.contains(u, i));
            }
        }
        let again = build_support_query(&m, &[0, 1], 10, 3).unwrap();
        assert_eq!(again.query, sq.query);
        assert_eq!(again.support, sq.support);
    }

    #[test]
    fn support_query_rejects_small_users() {
        let m = matrix_with_degrees(&[10, 30]);
        let err = build_support_query(&m, &[0, 1], 10, 3).unwrap_err();
        assert!(err.to_string().contains("[0]"));
    }

    fn ids(raw: &[&str]) -> IdMap {
        IdMap::from_raw(raw.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn one_hot_multi_hot_and_missing() {
        let text = "u1\tgender:M\tgenre:Action,Drama\nu2\tgender:F\tgenre:Comedy\n";
        let schema = AttributeSchema::infer_str(text, origin()).unwrap();
        let genre = &schema.fields[1];
        assert_eq!(genre.kind, FieldKind::MultiHot);
        assert_eq!(genre.vocab, vec!["Action", "Comedy", "Drama"]);

        let table = encode_attributes_str(&schema, text, origin(), &ids(&["u1", "u2", "u3"])).unwrap();
        // gender segment: [F, M, UNK]; genre segment: [Action, Comedy, Drama, UNK]
        assert_eq!(table.dense_row(0), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(table.dense_row(2), vec![0.0; 7]);
    }

    #[test]
    fn unknown_value_maps_to_unk_and_unknown_field_errors() {
        let schema = AttributeSchema::infer_str("a\tgender:M\n", origin()).unwrap();
        let t = encode_attributes_str(&schema, "a\tgender:X\n", origin(), &ids(&["a"])).unwrap();
        assert_eq!(t.dense_row(0), vec![0.0, 1.0]);
        assert!(encode_attributes_str(&schema, "a\tage:3\n", origin(), &ids(&["a"])).is_err());
    }

    #[test]
    fn id_map_round_trips_through_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("users.tsv");
        let m = ids(&["42", "7", "abc"]);
        m.write_tsv(&p).unwrap();
        let back = IdMap::read_tsv(&p).unwrap();
        assert_eq!(back, m);
        for d in 0..m.len() {
            assert_eq!(back.get(m.raw(d)), Some(d));
        }
    }

    #[test]
    fn movielens_attribute_adapters() {
        assert_eq!(movielens_users("1::F::1::10::48067\n"), "1\tgender:F\tage:1\toccupation:10\tregion:4\n");
        assert_eq!(
            movielens_items("1::Toy Story (1995)::Animation|Children's|Comedy\n"),
            "1\tgenre:Animation,Children's,Comedy\tyear:1995\n"
        );
        assert_eq!(movielens_items("7::Untitled::Drama\n"), "7\tgenre:Drama\n");
    }
}
