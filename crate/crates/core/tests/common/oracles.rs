//! Independent reference computations shared by the oracle tests and the
//! acceptance report.

use rand::Rng;
use tmag::dataset::ImplicitMatrix;
use tmag::eval::{map_at_k, ndcg_at_k, recall_at_k, MapNorm, RankedList};
use tmag::graph::{build_graph, propagate};
use tmag::linalg::Matrix;
use tmag::metalearn::{inner_update, outer_update, MetaOrder};
use tmag::params::{hvp, hvp_eps, QuadraticObjective};
use tmag::rng::seeded;
use tmag::taskgen::{kmeans, KMeansConfig};

/// Dense `D^{-1/2} A D^{-1/2}` applied `layers` times.
fn dense_power(adj: &[Vec<f64>], x: &[Vec<f64>], layers: usize) -> Vec<Vec<f64>> {
    let n = adj.len();
    let deg: Vec<f64> = adj.iter().map(|r| r.iter().sum()).collect();
    let norm = |a: usize, b: usize| {
        if adj[a][b] == 0.0 {
            0.0
        } else {
            adj[a][b] / (deg[a] * deg[b]).sqrt()
        }
    };
    let mut cur = x.to_vec();
    for _ in 0..layers {
        cur = (0..n)
            .map(|a| {
                (0..x[0].len())
                    .map(|c| (0..n).map(|b| norm(a, b) * cur[b][c]).sum())
                    .collect()
            })
            .collect();
    }
    cur
}

/// Largest absolute difference between sparse propagation and the dense
/// oracle over `graphs` random bipartite graphs, some with augmented edges
/// and isolated nodes.
pub fn propagation_max_error(graphs: usize, seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..graphs {
        let (m, n) = (rng.random_range(1..=20), rng.random_range(1..=20));
        let density = rng.random_range(0.05..0.6);
        let mut pairs = Vec::new();
        let mut extra = Vec::new();
        for u in 0..m {
            for i in 0..n {
                let x: f64 = rng.random();
                if x < density {
                    pairs.push((u, i));
                } else if x < density + 0.05 {
                    extra.push((u, i));
                }
            }
        }
        let obs = ImplicitMatrix::from_pairs(m, n, pairs.iter().copied()).unwrap();
        let g = build_graph(&obs, Some(&extra)).unwrap();
        let d = rng.random_range(1..=4);
        let layers = rng.random_range(1..=3);
        let x: Vec<Vec<f64>> = (0..m + n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();

        let mut adj = vec![vec![0.0; m + n]; m + n];
        for &(u, i) in pairs.iter().chain(&extra) {
            adj[u][m + i] = 1.0;
            adj[m + i][u] = 1.0;
        }
        let want = dense_power(&adj, &x, layers);
        let got = propagate(&g, &Matrix::from_rows(&x).unwrap(), layers).unwrap();
        let last = got.layers.last().unwrap();
        for (a, row) in want.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                worst = worst.max((last.row(a)[c] - v).abs());
            }
        }
    }
    worst
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for (k, &first) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(k);
        for mut p in permutations(&rest) {
            p.insert(0, first);
            out.push(p);
        }
    }
    out
}

/// Reference recall, NDCG and AP straight from the textbook definitions.
fn reference(top: &[usize], rel: &[usize], k: usize) -> (f64, f64, f64) {
    let hit: Vec<bool> = top.iter().map(|i| rel.contains(i)).collect();
    let n_hit = hit.iter().filter(|h| **h).count();
    let recall = n_hit as f64 / rel.len() as f64;
    let mut dcg = 0.0;
    let mut ap = 0.0;
    let mut seen = 0.0;
    for (r, h) in hit.iter().enumerate() {
        if *h {
            seen += 1.0;
            dcg += 1.0 / ((r + 2) as f64).log2();
            ap += seen / (r + 1) as f64;
        }
    }
    let ideal = rel.len().min(k);
    let idcg: f64 = (0..ideal).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    (recall, dcg / idcg, ap / ideal as f64)
}

/// Max deviation from the reference over every ranking of up to `max_items`
/// items, every non-empty relevant subset and every cutoff.
pub fn metric_max_error(max_items: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for n in 1..=max_items {
        let items: Vec<usize> = (0..n).collect();
        for perm in permutations(&items) {
            for mask in 1u32..(1 << n) {
                let rel: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
                for k in 1..=n {
                    let top = &perm[..k];
                    let ranked = RankedList {
                        user: 0,
                        items: top.to_vec(),
                        scores: (0..k).map(|r| -(r as f64)).collect(),
                    };
                    let (r, nd, ap) = reference(top, &rel, k);
                    worst = worst
                        .max((recall_at_k(&ranked, &rel).unwrap() - r).abs())
                        .max((ndcg_at_k(&ranked, &rel, k).unwrap() - nd).abs())
                        .max((map_at_k(&ranked, &rel, k, MapNorm::MinRelevantK).unwrap() - ap).abs());
                }
            }
        }
    }
    worst
}

/// NDCG@3 and MAP@3 of the ranking (1, 7, 2) against relevant {1, 2}.
pub fn worked_metric_values() -> (f64, f64) {
    let ranked = RankedList {
        user: 0,
        items: vec![1, 7, 2],
        scores: vec![3.0, 2.0, 1.0],
    };
    (
        ndcg_at_k(&ranked, &[1, 2], 3).unwrap(),
        map_at_k(&ranked, &[1, 2], 3, MapNorm::MinRelevantK).unwrap(),
    )
}

/// First- and second-order outer steps on `L(θ) = θ²/2` from θ = 1 with
/// α = 0.1, β = 1.
pub fn maml_quadratic() -> (f64, f64) {
    let q = QuadraticObjective::new(vec![1.0]);
    let theta = vec![1.0];
    let adapted = inner_update(&theta, &q, 0.1, 1, 0).unwrap();
    let (fo, _) = outer_update(&theta, &adapted, &q, &q, 0.1, 1.0, MetaOrder::FirstOrder, 1e-3).unwrap();
    let (so, _) = outer_update(&theta, &adapted, &q, &q, 0.1, 1.0, MetaOrder::SecondOrderHvp, 1e-3).unwrap();
    (fo[0], so[0])
}

/// Max error of the finite-difference Hessian-vector product on
/// `diag(2, 4)` over random points and directions.
pub fn hvp_max_error(trials: usize, seed: u64) -> f64 {
    let q = QuadraticObjective::new(vec![2.0, 4.0]);
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let p = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let v = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let hv = hvp(&q, &p, &v, hvp_eps(&p, 1e-3)).unwrap();
        worst = worst.max((hv[0] - 2.0 * v[0]).abs()).max((hv[1] - 4.0 * v[1]).abs());
    }
    worst
}

/// Number of random instances whose inertia ever increases between
/// assignment steps.
pub fn kmeans_monotonicity_violations(instances: usize, seed: u64) -> usize {
    let mut rng = seeded(seed);
    (0..instances)
        .filter(|&s| {
            let n = rng.random_range(2..60);
            let d = rng.random_range(1..5);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
            let cfg = KMeansConfig {
                k: rng.random_range(1..=n.min(6)),
                max_iters: 100,
                n_init: 3,
                seed: s as u64,
            };
            let c = kmeans(&Matrix::from_rows(&rows).unwrap(), &cfg).unwrap();
            c.inertia_history.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-12) + 1e-12)
        })
        .count()
}

/// Whether the four points (0,0), (0,1), (10,0), (10,1) give centroids
/// exactly (0, 0.5) and (10, 0.5) for every seed in `seeds`.
pub fn kmeans_four_points(seeds: std::ops::Range<u64>) -> bool {
    let pts = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]]).unwrap();
    seeds.into_iter().all(|seed| {
        let c = kmeans(&pts, &KMeansConfig { k: 2, max_iters: 100, n_init: 4, seed }).unwrap();
        let mut cs: Vec<Vec<f64>> = (0..2).map(|r| c.centroids.row(r).to_vec()).collect();
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        cs == vec![vec![0.0, 0.5], vec![10.0, 0.5]]
    })
}
