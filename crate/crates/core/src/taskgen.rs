//! Task construction: K-Means over user latent attributes, one meta-learning
//! task per cluster, and nearest-centroid assignment for new users.

use std::collections::BTreeSet;

use log::warn;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ImplicitMatrix;
use crate::error::{Result, TmagError};
use crate::linalg::{squared_distance, Matrix};
use crate::rng;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub n_init: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 40,
            max_iters: 300,
            n_init: 10,
            seed: 0,
        }
    }
}

/// Result of K-Means over the rows of a latent table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub centroids: Matrix,
    /// Cluster id per input row.
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&r| self.assignment[r] == cluster)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k()];
        self.assignment.iter().for_each(|&c| s[c] += 1);
        s
    }
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(centroids: &Matrix, z: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centroids.rows() {
        let d = squared_distance(centroids.row(k), z);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign(points: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>) {
    (0..points.rows())
        .into_par_iter()
        .map(|r| nearest(centroids, points.row(r)))
        .unzip()
}

/// k-means++ seeding: first centre uniform, the rest with probability
/// proportional to squared distance from the chosen set.
fn kmeans_pp(points: &Matrix, k: usize, r: &mut rng::Rng) -> Matrix {
    let n = points.rows();
    let mut chosen = vec![r.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|p| squared_distance(points.row(p), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = r.random::<f64>() * total;
            let mut pick = n - 1;
            for (p, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    if t < d {
                        pick = p;
                        break;
                    }
                    t -= d;
                }
            }
            // guard against landing on a zero-weight tail through rounding
            while d2[pick] == 0.0 && pick > 0 {
                pick -= 1;
            }
            pick
        } else {
            // every point coincides with a centre: take any unchosen row
            let free: Vec<usize> = (0..n).filter(|p| !chosen.contains(p)).collect();
            free[r.random_range(0..free.len())]
        };
        chosen.push(next);
        for p in 0..n {
            d2[p] = d2[p].min(squared_distance(points.row(p), points.row(next)));
        }
    }
    let mut c = Matrix::zeros(k, points.cols());
    for (j, &p) in chosen.iter().enumerate() {
        c.row_mut(j).copy_from_slice(points.row(p));
    }
    c
}

/// Centroid means of `labels`; empty clusters are reseeded at the points
/// farthest from their current centroids.
fn update_centroids(points: &Matrix, labels: &[usize], dists: &[f64], k: usize) -> Matrix {
    let mut c = Matrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (p, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        crate::linalg::axpy(c.row_mut(l), 1.0, points.row(p));
    }
    let mut far: Vec<usize> = (0..points.rows()).collect();
    far.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
    let mut far = far.into_iter();
    for j in 0..k {
        if counts[j] == 0 {
            if let Some(p) = far.next() {
                c.row_mut(j).copy_from_slice(points.row(p));
            }
        } else {
            let inv = 1.0 / counts[j] as f64;
            c.row_mut(j).iter_mut().for_each(|v| *v *= inv);
        }
    }
    c
}

fn lloyd(points: &Matrix, mut centroids: Matrix, max_iters: usize) -> Clustering {
    let k = centroids.rows();
    let (mut labels, mut dists) = assign(points, &centroids);
    let mut history = vec![dists.iter().sum::<f64>()];
    for _ in 0..max_iters {
        let next = update_centroids(points, &labels, &dists, k);
        let (new_labels, new_dists) = assign(points, &next);
        let inertia: f64 = new_dists.iter().sum();
        let prev = *history.last().expect("non-empty");
        debug_assert!(
            inertia <= prev + 1e-9 * prev.abs().max(1.0),
            "k-means inertia increased: {prev} -> {inertia}"
        );
        history.push(inertia);
        centroids = next;
        dists = new_dists;
        let stable = new_labels == labels;
        labels = new_labels;
        if stable {
            break;
        }
    }
    let empty = {
        let mut seen = vec![false; k];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|s| !**s).count()
    };
    if empty > 0 {
        warn!("k-means finished with {empty} empty clusters (duplicate points?)");
    }
    Clustering {
        centroids,
        assignment: labels,
        inertia: *history.last().expect("non-empty"),
        inertia_history: history,
    }
}

/// Lloyd's algorithm with k-means++ seeding; best of `n_init` restarts.
pub fn kmeans(points: &Matrix, cfg: &KMeansConfig) -> Result<Clustering> {
    let n = points.rows();
    if cfg.k == 0 {
        return Err(TmagError::Usage("k-means needs K >= 1".into()));
    }
    if cfg.k > n {
        return Err(TmagError::data(format!(
            "k-means with K = {} exceeds the {n} points available",
            cfg.k
        )));
    }
    let mut best: Option<Clustering> = None;
    for restart in 0..cfg.n_init.max(1) {
        let mut r = rng::stream(cfg.seed, &[rng::DOMAIN_KMEANS, restart as u64]);
        let init = kmeans_pp(points, cfg.k, &mut r);
        let c = lloyd(points, init, cfg.max_iters);
        if best.as_ref().is_none_or(|b| c.inertia < b.inertia) {
            best = Some(c);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Nearest-centroid cluster for each row of `z_new`; centroids are not moved.
pub fn assign_new_users(z_new: &Matrix, c: &Clustering) -> Result<Vec<usize>> {
    if z_new.rows() > 0 && z_new.cols() != c.centroids.cols() {
        return Err(TmagError::DimensionMismatch {
            what: "latent width vs centroids",
            expected: c.centroids.cols(),
            got: z_new.cols(),
        });
    }
    Ok(assign(z_new, &c.centroids).0)
}

/// One aligned meta-learning task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub users: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

impl Task {
    /// `S ∩ Q = ∅`
    pub fn check_disjoint(&self) -> Result<()> {
        let s: BTreeSet<_> = self.support.iter().collect();
        if let Some(p) = self.query.iter().find(|p| s.contains(p)) {
            return Err(TmagError::data(format!(
                "task {}: pair {:?} is in both support and query",
                self.id, p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub tasks: Vec<Task>,
}

impl TaskSet {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Group support/query rows by cluster. `users[r]` carries label `labels[r]`.
/// Tasks with an empty support or query set are dropped with a warning.
pub fn build_tasks(
    users: &[usize],
    labels: &[usize],
    k: usize,
    support: &ImplicitMatrix,
    query: &ImplicitMatrix,
) -> Result<TaskSet> {
    if users.len() != labels.len() {
        return Err(TmagError::DimensionMismatch {
            what: "users vs cluster labels",
            expected: users.len(),
            got: labels.len(),
        });
    }
    let mut tasks: Vec<Task> = (0..k)
        .map(|id| Task {
            id,
            users: Vec::new(),
            support: Vec::new(),
            query: Vec::new(),
        })
        .collect();
    for (&u, &l) in users.iter().zip(labels) {
        let t = tasks
            .get_mut(l)
            .ok_or_else(|| TmagError::data(format!("cluster label {l} >= K = {k}")))?;
        t.users.push(u);
        t.support.extend(support.items_of(u).iter().map(|&i| (u, i)));
        t.query.extend(query.items_of(u).iter().map(|&i| (u, i)));
    }
    let tasks = tasks
        .into_iter()
        .filter(|t| {
            let keep = !t.support.is_empty() && !t.query.is_empty();
            if !keep {
                warn!(
                    "dropping task {} ({} users): no support or query interactions",
                    t.id,
                    t.users.len()
                );
            }
            keep
        })
        .collect();
    Ok(TaskSet { tasks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn k_equals_one_gives_the_mean() {
        let p = pts(&[[0.0, 0.0], [2.0, 4.0], [4.0, 2.0]]);
        let c = kmeans(&p, &KMeansConfig { k: 1, seed: 3, ..Default::default() }).unwrap();
        assert_eq!(c.centroids.row(0), &[2.0, 2.0]);
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let p = pts(&[[0.0, 0.0], [1.0, 5.0], [7.0, 2.0], [3.0, 3.0]]);
        let c = kmeans(&p, &KMeansConfig { k: 4, seed: 9, ..Default::default() }).unwrap();
        assert_eq!(c.inertia, 0.0);
        let mut a = c.assignment.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn k_above_n_is_an_error() {
        let p = pts(&[[0.0, 0.0]]);
        assert!(kmeans(&p, &KMeansConfig { k: 2, ..Default::default() }).is_err());
        assert!(kmeans(&p, &KMeansConfig { k: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn assignment_ties_go_to_lowest_cluster() {
        let c = Clustering {
            centroids: pts(&[[-1.0, 0.0], [1.0, 0.0], [5.0, 5.0]]),
            assignment: vec![],
            inertia: 0.0,
            inertia_history: vec![],
        };
        let z = pts(&[[0.0, 0.0], [5.0, 5.0]]);
        assert_eq!(assign_new_users(&z, &c).unwrap(), vec![0, 2]);
    }

    #[test]
    fn tasks_partition_users_and_keep_query_out_of_support() {
        let support = ImplicitMatrix::from_pairs(2, 3, [(0, 0), (0, 1), (1, 2)]).unwrap();
        let query = ImplicitMatrix::from_pairs(2, 3, [(0, 2), (1, 0)]).unwrap();
        let ts = build_tasks(&[0, 1], &[0, 1], 2, &support, &query).unwrap();
        assert_eq!(ts.tasks[0].support, vec![(0, 0), (0, 1)]);
        assert_eq!(ts.tasks[0].query, vec![(0, 2)]);
        assert!(ts.tasks[1].users == vec![1]);
        for t in &ts.tasks {
            t.check_disjoint().unwrap();
        }
    }

    #[test]
    fn empty_tasks_are_dropped() {
        let support = ImplicitMatrix::from_pairs(2, 3, [(0, 0)]).unwrap();
        let query = ImplicitMatrix::from_pairs(2, 3, [(0, 1)]).unwrap();
        let ts = build_tasks(&[0, 1], &[0, 1], 2, &support, &query).unwrap();
        assert_eq!(ts.len(), 1);
        assert_eq!(ts.tasks[0].id, 0);
    }
}
