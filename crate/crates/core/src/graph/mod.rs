//! Graph data model shared by every other module.
//!
//! Graphs are undirected and simple. Adjacency is stored dense as `f64`
//! entries in `{0, 1}` so the same matrix can feed message passing and the
//! structural intervention operator directly.

pub mod io;

use std::collections::VecDeque;
use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which feature columns play which causal role. Written by the generators;
/// only tests and evaluation code read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRoles {
    pub invariant: Range<usize>,
    pub spurious: Range<usize>,
    pub irrelevant: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub adjacency: Array2<f64>,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train_mask: Vec<bool>,
    pub val_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
    pub env_id: Option<usize>,
    pub roles: Option<FeatureRoles>,
}

impl Graph {
    /// Build a graph from an undirected edge list. Duplicate edges and
    /// either orientation collapse to one; self-loops are dropped. All masks
    /// start empty.
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if features.nrows() != num_nodes || labels.len() != num_nodes {
            return Err(Error::Shape(format!(
                "expected {num_nodes} feature rows and labels, got {} and {}",
                features.nrows(),
                labels.len()
            )));
        }
        let mut adjacency = Array2::zeros((num_nodes, num_nodes));
        for &(i, j) in edges {
            if i >= num_nodes || j >= num_nodes {
                return Err(Error::Index(format!("edge ({i},{j}) with {num_nodes} nodes")));
            }
            if i != j {
                adjacency[[i, j]] = 1.0;
                adjacency[[j, i]] = 1.0;
            }
        }
        Ok(Self {
            adjacency,
            features,
            labels,
            num_classes,
            train_mask: vec![false; num_nodes],
            val_mask: vec![false; num_nodes],
            test_mask: vec![false; num_nodes],
            env_id: None,
            roles: None,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Undirected edges as `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.num_nodes();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.adjacency[[i, j]] != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.edges().len()
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency
            .row(v)
            .into_iter()
            .enumerate()
            .filter(|(_, &a)| a != 0.0)
            .map(|(j, _)| j)
            .collect::<Vec<_>>()
            .into_iter()
    }

    /// Node indices selected by a mask.
    pub fn mask_indices(mask: &[bool]) -> Vec<usize> {
        mask.iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_nodes(&self) -> Vec<usize> {
        Self::mask_indices(&self.train_mask)
    }

    pub fn val_nodes(&self) -> Vec<usize> {
        Self::mask_indices(&self.val_mask)
    }

    pub fn test_nodes(&self) -> Vec<usize> {
        Self::mask_indices(&self.test_mask)
    }

    /// Same graph with a different adjacency. Features, labels and masks are
    /// shared verbatim.
    pub fn with_adjacency(&self, adjacency: Array2<f64>) -> Self {
        Self {
            adjacency,
            ..self.clone()
        }
    }

    /// Fraction of edges joining same-label endpoints.
    pub fn homophily(&self) -> f64 {
        let edges = self.edges();
        if edges.is_empty() {
            return 0.0;
        }
        let same = edges
            .iter()
            .filter(|(i, j)| self.labels[*i] == self.labels[*j])
            .count();
        same as f64 / edges.len() as f64
    }
}

/// Report every violated [`Graph`] invariant. Empty means valid.
pub fn validate_graph(g: &Graph) -> Vec<String> {
    let mut out = Vec::new();
    let n = g.adjacency.nrows();
    if g.adjacency.ncols() != n {
        out.push(format!(
            "adjacency not square: {}x{}",
            n,
            g.adjacency.ncols()
        ));
        return out;
    }
    if n == 0 {
        out.push("graph has no nodes".to_string());
        return out;
    }
    if g.features.nrows() != n {
        out.push(format!("features have {} rows, expected {n}", g.features.nrows()));
    }
    if g.labels.len() != n {
        out.push(format!("labels have length {}, expected {n}", g.labels.len()));
    }
    for (name, m) in [
        ("train_mask", &g.train_mask),
        ("val_mask", &g.val_mask),
        ("test_mask", &g.test_mask),
    ] {
        if m.len() != n {
            out.push(format!("{name} has length {}, expected {n}", m.len()));
        }
    }
    for i in 0..n {
        if g.adjacency[[i, i]] != 0.0 {
            out.push(format!("nonzero diagonal at {i}"));
        }
        for j in 0..n {
            let a = g.adjacency[[i, j]];
            if a != 0.0 && a != 1.0 {
                out.push(format!("non-binary entry at ({i},{j})"));
            }
            if j > i && a != g.adjacency[[j, i]] {
                out.push(format!("asymmetric at ({i},{j})"));
            }
        }
    }
    for (v, &y) in g.labels.iter().enumerate() {
        if y >= g.num_classes.max(1) {
            out.push(format!("label {y} out of range at {v}"));
        }
    }
    let masks_ok = g.train_mask.len() == n && g.val_mask.len() == n && g.test_mask.len() == n;
    if masks_ok {
        for v in 0..n {
            let count = [g.train_mask[v], g.val_mask[v], g.test_mask[v]]
                .iter()
                .filter(|&&b| b)
                .count();
            if count > 1 {
                out.push(format!("masks overlap at {v}"));
            }
        }
    }
    out
}

/// `D^{-1/2} (A + I) D^{-1/2}` where `D` is the degree matrix of `A + I`.
pub fn normalized_adjacency(g: &Graph) -> Array2<f64> {
    normalize_with_self_loops(&g.adjacency)
}

pub fn normalize_with_self_loops(adjacency: &Array2<f64>) -> Array2<f64> {
    let n = adjacency.nrows();
    let mut a = adjacency.clone();
    for i in 0..n {
        a[[i, i]] += 1.0;
    }
    let dinv: Vec<f64> = a.rows().into_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            a[[i, j]] *= dinv[i] * dinv[j];
        }
    }
    a
}

/// The `L`-hop ego-graph of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoGraphSpec {
    pub center: usize,
    pub hops: usize,
    /// Sorted parent-graph ids of the ego-graph's nodes.
    pub node_list: Vec<usize>,
    pub local_adjacency: Array2<f64>,
    pub local_features: Array2<f64>,
}

impl EgoGraphSpec {
    pub fn local_index(&self, node: usize) -> Option<usize> {
        self.node_list.binary_search(&node).ok()
    }
}

pub fn extract_ego_graph(g: &Graph, center: usize, hops: usize) -> Result<EgoGraphSpec> {
    let n = g.num_nodes();
    if center >= n {
        return Err(Error::Input(format!("center {center} out of range for {n} nodes")));
    }
    if hops == 0 {
        return Err(Error::Input("ego-graph depth must be at least 1".to_string()));
    }
    let mut depth = vec![usize::MAX; n];
    depth[center] = 0;
    let mut queue = VecDeque::from([center]);
    while let Some(v) = queue.pop_front() {
        if depth[v] == hops {
            continue;
        }
        for u in g.neighbors(v) {
            if depth[u] == usize::MAX {
                depth[u] = depth[v] + 1;
                queue.push_back(u);
            }
        }
    }
    let node_list: Vec<usize> = (0..n).filter(|&v| depth[v] != usize::MAX).collect();
    let m = node_list.len();
    let local_adjacency =
        Array2::from_shape_fn((m, m), |(a, b)| g.adjacency[[node_list[a], node_list[b]]]);
    let local_features = g.features.select(ndarray::Axis(0), &node_list);
    Ok(EgoGraphSpec {
        center,
        hops,
        node_list,
        local_adjacency,
        local_features,
    })
}

/// SHA-256 over every graph's structure, features, labels, masks and
/// environment id, split by split.
pub fn dataset_hash(ds: &MultiGraphDataset) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (split, graphs) in [("train", &ds.train_graphs), ("val", &ds.val_graphs), ("test", &ds.test_graphs)] {
        h.update(split.as_bytes());
        h.update((graphs.len() as u64).to_le_bytes());
        for g in graphs.iter() {
            h.update((g.num_nodes() as u64).to_le_bytes());
            h.update((g.feature_dim() as u64).to_le_bytes());
            h.update((g.num_classes as u64).to_le_bytes());
            for (i, j) in g.edges() {
                h.update((i as u64).to_le_bytes());
                h.update((j as u64).to_le_bytes());
            }
            for v in g.features.iter() {
                h.update(v.to_le_bytes());
            }
            for &y in &g.labels {
                h.update((y as u64).to_le_bytes());
            }
            for m in [&g.train_mask, &g.val_mask, &g.test_mask] {
                h.update(m.iter().map(|&b| u8::from(b)).collect::<Vec<u8>>());
            }
            h.update(g.env_id.map_or(u64::MAX, |e| e as u64).to_le_bytes());
        }
    }
    h.update(ds.metric.to_string().as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Accuracy,
    Rocauc,
    MacroF1,
}

impl std::fmt::Display for MetricName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MetricName::Accuracy => "accuracy",
            MetricName::Rocauc => "rocauc",
            MetricName::MacroF1 => "macro_f1",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiGraphDataset {
    pub train_graphs: Vec<Graph>,
    pub val_graphs: Vec<Graph>,
    pub test_graphs: Vec<Graph>,
    pub metric: MetricName,
}

impl MultiGraphDataset {
    pub fn all_graphs(&self) -> impl Iterator<Item = &Graph> {
        self.train_graphs
            .iter()
            .chain(&self.val_graphs)
            .chain(&self.test_graphs)
    }

    pub fn feature_dim(&self) -> usize {
        self.train_graphs.first().map_or(0, Graph::feature_dim)
    }

    pub fn num_classes(&self) -> usize {
        self.train_graphs.first().map_or(0, |g| g.num_classes)
    }

    /// Every split non-empty, every graph valid, shared `d` and `C`.
    pub fn validate(&self) -> Result<()> {
        for (name, split) in [
            ("train", &self.train_graphs),
            ("val", &self.val_graphs),
            ("test", &self.test_graphs),
        ] {
            if split.is_empty() {
                return Err(Error::Input(format!("{name} split has no graphs")));
            }
        }
        let (d, c) = (self.feature_dim(), self.num_classes());
        for (i, g) in self.all_graphs().enumerate() {
            let problems = validate_graph(g);
            if !problems.is_empty() {
                return Err(Error::Input(format!("graph {i}: {}", problems.join("; "))));
            }
            if g.feature_dim() != d || g.num_classes != c {
                return Err(Error::Shape(format!(
                    "graph {i} has d={} C={}, expected d={d} C={c}",
                    g.feature_dim(),
                    g.num_classes
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    pub(crate) fn path3() -> Graph {
        Graph::from_edges(3, &[(0, 1), (1, 2)], Array2::zeros((3, 2)), vec![0, 1, 0], 2).unwrap()
    }

    #[test]
    fn path_graph_is_valid() {
        assert!(validate_graph(&path3()).is_empty());
    }

    #[test]
    fn reports_asymmetry_and_self_loops() {
        let mut g = path3();
        g.adjacency[[0, 2]] = 1.0;
        assert_eq!(validate_graph(&g), vec!["asymmetric at (0,2)".to_string()]);

        let mut g = path3();
        g.adjacency[[0, 0]] = 1.0;
        assert_eq!(validate_graph(&g), vec!["nonzero diagonal at 0".to_string()]);
    }

    #[test]
    fn reports_overlapping_masks_and_bad_labels() {
        let mut g = path3();
        g.train_mask[1] = true;
        g.test_mask[1] = true;
        g.labels[2] = 5;
        let v = validate_graph(&g);
        assert!(v.contains(&"masks overlap at 1".to_string()));
        assert!(v.contains(&"label 5 out of range at 2".to_string()));
    }

    #[test]
    fn normalized_adjacency_small_cases() {
        let single = Graph::from_edges(1, &[], Array2::zeros((1, 1)), vec![0], 1).unwrap();
        assert_eq!(normalized_adjacency(&single), array![[1.0]]);

        let pair = Graph::from_edges(2, &[(0, 1)], Array2::zeros((2, 1)), vec![0, 0], 1).unwrap();
        let a = normalized_adjacency(&pair);
        assert!(a.iter().all(|&v| (v - 0.5).abs() < 1e-15));

        let empty = Graph::from_edges(3, &[], Array2::zeros((3, 1)), vec![0; 3], 1).unwrap();
        assert_eq!(normalized_adjacency(&empty), Array2::<f64>::eye(3));
    }

    #[test]
    fn ego_graph_on_path() {
        let g = path3();
        assert_eq!(extract_ego_graph(&g, 0, 1).unwrap().node_list, vec![0, 1]);
        assert_eq!(extract_ego_graph(&g, 0, 2).unwrap().node_list, vec![0, 1, 2]);
        let ego = extract_ego_graph(&g, 1, 1).unwrap();
        assert_eq!(ego.local_adjacency, array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
    }

    #[test]
    fn ego_graph_isolated_and_errors() {
        let g = Graph::from_edges(4, &[(0, 1)], Array2::zeros((4, 1)), vec![0; 4], 1).unwrap();
        assert_eq!(extract_ego_graph(&g, 3, 5).unwrap().node_list, vec![3]);
        assert!(matches!(extract_ego_graph(&g, 4, 1), Err(Error::Input(_))));
        assert!(extract_ego_graph(&g, 0, 0).is_err());
    }

    #[test]
    fn from_edges_symmetrizes_and_drops_loops() {
        let g = Graph::from_edges(3, &[(1, 0), (0, 1), (2, 2)], Array2::zeros((3, 1)), vec![0; 3], 1)
            .unwrap();
        assert_eq!(g.edges(), vec![(0, 1)]);
        assert!(validate_graph(&g).is_empty());
    }
}
