//! User-item bipartite graph in CSR form and light graph convolution over it.
//!
//! Nodes `0..M` are users and `M..M+N` are items. Each propagation layer is
//! `E⁽ˡ⁺¹⁾ = D^{-1/2} A D^{-1/2} E⁽ˡ⁾` with no self loops, feature transform,
//! or nonlinearity. The normalized adjacency is symmetric, so the backward
//! pass of a layer is the same operator.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ImplicitMatrix;
use crate::error::{Result, TmagError};
use crate::linalg::{axpy, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Observed,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BipartiteGraph {
    n_users: usize,
    n_items: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    provenance: Vec<Provenance>,
    /// `1 / sqrt(|N_a| |N_b|)` per stored edge.
    weights: Vec<f64>,
}

/// Build the graph from observed pairs plus optional augmented pairs. An
/// augmented pair that duplicates an observed one is kept once as observed.
pub fn build_graph(m: &ImplicitMatrix, augmented: Option<&[(usize, usize)]>) -> Result<BipartiteGraph> {
    let (n_users, n_items) = (m.n_users(), m.n_items());
    let mut edges: BTreeMap<(usize, usize), Provenance> = BTreeMap::new();
    for (u, i) in m.pairs() {
        edges.insert((u, i), Provenance::Observed);
    }
    for &(u, i) in augmented.unwrap_or(&[]) {
        if u >= n_users || i >= n_items {
            return Err(TmagError::data(format!(
                "augmented edge ({u},{i}) outside {n_users}x{n_items}"
            )));
        }
        edges.entry((u, i)).or_insert(Provenance::Augmented);
    }
    Ok(BipartiteGraph::from_edges(n_users, n_items, &edges))
}

impl BipartiteGraph {
    fn from_edges(n_users: usize, n_items: usize, edges: &BTreeMap<(usize, usize), Provenance>) -> Self {
        let n = n_users + n_items;
        let mut adj: Vec<Vec<(usize, Provenance)>> = vec![Vec::new(); n];
        for (&(u, i), &p) in edges {
            adj[u].push((n_users + i, p));
            adj[n_users + i].push((u, p));
        }
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(2 * edges.len());
        let mut provenance = Vec::with_capacity(2 * edges.len());
        indptr.push(0);
        for row in &mut adj {
            row.sort_by_key(|e| e.0);
            for &(v, p) in row.iter() {
                indices.push(v);
                provenance.push(p);
            }
            indptr.push(indices.len());
        }
        let degree = |v: usize| (indptr[v + 1] - indptr[v]) as f64;
        let mut weights = Vec::with_capacity(indices.len());
        for a in 0..n {
            for &b in &indices[indptr[a]..indptr[a + 1]] {
                weights.push(1.0 / (degree(a) * degree(b)).sqrt());
            }
        }
        Self {
            n_users,
            n_items,
            indptr,
            indices,
            provenance,
            weights,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn item_node(&self, item: usize) -> usize {
        self.n_users + item
    }

    pub fn n_edges(&self) -> usize {
        self.indices.len() / 2
    }

    pub fn n_augmented(&self) -> usize {
        self.provenance
            .iter()
            .filter(|p| **p == Provenance::Augmented)
            .count()
            / 2
    }

    pub fn degree(&self, node: usize) -> usize {
        self.indptr[node + 1] - self.indptr[node]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n_nodes()).map(|v| self.degree(v)).collect()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.indices[self.indptr[node]..self.indptr[node + 1]]
    }

    /// Provenance of each entry of [`BipartiteGraph::neighbors`].
    pub fn neighbor_provenance(&self, node: usize) -> &[Provenance] {
        &self.provenance[self.indptr[node]..self.indptr[node + 1]]
    }

    /// Item ids adjacent to `user` (observed and augmented).
    pub fn user_items(&self, user: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbors(user).iter().map(move |&v| v - self.n_users)
    }

    pub fn has_edge(&self, user: usize, item: usize) -> bool {
        self.neighbors(user).binary_search(&(self.n_users + item)).is_ok()
    }

    /// `(user, item, provenance)` for every undirected edge.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, Provenance)> + '_ {
        (0..self.n_users).flat_map(move |u| {
            (self.indptr[u]..self.indptr[u + 1]).map(move |e| (u, self.indices[e] - self.n_users, self.provenance[e]))
        })
    }

    /// Observed edges only, as a matrix.
    pub fn observed(&self) -> ImplicitMatrix {
        let pairs = self
            .edges()
            .filter(|e| e.2 == Provenance::Observed)
            .map(|(u, i, _)| (u, i));
        ImplicitMatrix::from_pairs(self.n_users, self.n_items, pairs).expect("edges are in range")
    }

    /// Keep only edges incident to `users` (with their provenance).
    pub fn restrict_to_users(&self, users: &[usize]) -> BipartiteGraph {
        let mut edges = BTreeMap::new();
        for &u in users {
            for e in self.indptr[u]..self.indptr[u + 1] {
                edges.insert((u, self.indices[e] - self.n_users), self.provenance[e]);
            }
        }
        Self::from_edges(self.n_users, self.n_items, &edges)
    }

    /// One layer: `out = D^{-1/2} A D^{-1/2} x`.
    pub fn apply_normalized(&self, x: &Matrix) -> Matrix {
        debug_assert_eq!(x.rows(), self.n_nodes());
        let d = x.cols();
        let mut out = Matrix::zeros(x.rows(), d);
        out.as_mut_slice()
            .par_chunks_mut(d.max(1))
            .enumerate()
            .for_each(|(a, row)| {
                for e in self.indptr[a]..self.indptr[a + 1] {
                    axpy(row, self.weights[e], x.row(self.indices[e]));
                }
            });
        out
    }

    /// Edge list TSV `user<TAB>item<TAB>provenance`.
    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (u, i, p) in self.edges() {
            let tag = match p {
                Provenance::Observed => "observed",
                Provenance::Augmented => "augmented",
            };
            writeln!(w, "{u}\t{i}\t{tag}")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-layer node embeddings, layer 0 first.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub n_users: usize,
    pub layers: Vec<Matrix>,
}

impl EmbeddingTable {
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn user(&self, layer: usize, u: usize) -> &[f64] {
        self.layers[layer].row(u)
    }

    pub fn item(&self, layer: usize, i: usize) -> &[f64] {
        self.layers[layer].row(self.n_users + i)
    }
}

/// Run `layers` rounds of light graph convolution from `e0` (users then items).
pub fn propagate(g: &BipartiteGraph, e0: &Matrix, layers: usize) -> Result<EmbeddingTable> {
    if e0.rows() != g.n_nodes() {
        return Err(TmagError::DimensionMismatch {
            what: "layer-0 embedding rows",
            expected: g.n_nodes(),
            got: e0.rows(),
        });
    }
    let mut out = Vec::with_capacity(layers + 1);
    out.push(e0.clone());
    for l in 0..layers {
        let next = g.apply_normalized(&out[l]);
        out.push(next);
    }
    Ok(EmbeddingTable {
        n_users: g.n_users(),
        layers: out,
    })
}

/// How the per-layer embeddings become the graph half of the final vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerCombine {
    /// The last layer only.
    Last,
    /// Average over layers `0..=L`.
    Mean,
}

pub fn combine_layers(t: &EmbeddingTable, mode: LayerCombine) -> Matrix {
    match mode {
        LayerCombine::Last => t.layers.last().expect("layer 0 always present").clone(),
        LayerCombine::Mean => {
            let mut acc = t.layers[0].clone();
            for l in &t.layers[1..] {
                acc.axpy(1.0, l);
            }
            acc.scale(1.0 / t.layers.len() as f64);
            acc
        }
    }
}

/// Pull a gradient on the combined embedding back to layer 0.
pub fn combine_backward(g: &BipartiteGraph, d_final: &Matrix, layers: usize, mode: LayerCombine) -> Matrix {
    match mode {
        LayerCombine::Last => {
            let mut d = d_final.clone();
            for _ in 0..layers {
                d = g.apply_normalized(&d);
            }
            d
        }
        LayerCombine::Mean => {
            let w = 1.0 / (layers + 1) as f64;
            let mut cur = d_final.clone();
            cur.scale(w);
            let mut acc = cur.clone();
            for _ in 0..layers {
                cur = g.apply_normalized(&cur);
                acc.axpy(1.0, &cur);
            }
            acc
        }
    }
}

/// `f = e ⊕ z`.
pub fn final_embedding(e_last: &[f64], z: Option<&[f64]>) -> Result<Vec<f64>> {
    let z = z.ok_or_else(|| TmagError::data("entity has no attribute embedding"))?;
    let mut f = Vec::with_capacity(e_last.len() + z.len());
    f.extend_from_slice(e_last);
    f.extend_from_slice(z);
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(n_users: usize, n_items: usize, pairs: &[(usize, usize)]) -> ImplicitMatrix {
        ImplicitMatrix::from_pairs(n_users, n_items, pairs.iter().copied()).unwrap()
    }

    #[test]
    fn single_edge_degrees_and_propagation() {
        let g = build_graph(&m(1, 1, &[(0, 0)]), None).unwrap();
        assert_eq!(g.degrees(), vec![1, 1]);
        let e0 = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, -1.0]]).unwrap();
        let t = propagate(&g, &e0, 1).unwrap();
        assert_eq!(t.user(1, 0), &[3.0, -1.0]);
    }

    #[test]
    fn augmented_duplicate_keeps_observed_provenance() {
        let g = build_graph(&m(2, 2, &[(0, 0)]), Some(&[(0, 0), (1, 1)])).unwrap();
        let e: Vec<_> = g.edges().collect();
        assert_eq!(e, vec![(0, 0, Provenance::Observed), (1, 1, Provenance::Augmented)]);
        assert_eq!(g.n_augmented(), 1);
        assert!(build_graph(&m(2, 2, &[]), Some(&[(2, 0)])).is_err());
    }

    #[test]
    fn empty_graph_propagates_to_zero() {
        let g = build_graph(&m(2, 3, &[]), None).unwrap();
        let e0 = Matrix::from_vec(5, 2, (0..10).map(f64::from).collect()).unwrap();
        let t = propagate(&g, &e0, 3).unwrap();
        for l in 1..=3 {
            assert!(t.layers[l].as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn two_leaf_items_average_by_sqrt2() {
        let g = build_graph(&m(1, 2, &[(0, 0), (0, 1)]), None).unwrap();
        let e0 = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        let t = propagate(&g, &e0, 1).unwrap();
        assert!((t.user(1, 0)[0] - 4.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn concat_shape() {
        assert_eq!(final_embedding(&[1.0, 2.0], Some(&[3.0])).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(final_embedding(&[1.0], None).is_err());
    }
}
