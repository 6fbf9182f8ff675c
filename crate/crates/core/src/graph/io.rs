//! On-disk graph format.
//!
//! One directory per graph:
//!
//! ```text
//! edges.tsv        i<TAB>j, each undirected edge once (i < j)
//! features.csv     header f0,f1,... then one row per node
//! labels.csv       header `label` then one integer per node
//! train_mask.txt   0/1 per line (likewise val_mask.txt, test_mask.txt)
//! manifest.json    num_nodes, feature_dim, num_classes, env_id
//! ```
//!
//! A dataset directory holds `dataset.json` plus `train/NNN`, `val/NNN` and
//! `test/NNN` graph directories. Floats are written with the shortest
//! representation that parses back to the same bits.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Graph, MetricName, MultiGraphDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphManifest {
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub env_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub metric: MetricName,
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn mask_text(mask: &[bool]) -> String {
    let mut s = String::with_capacity(mask.len() * 2);
    for &m in mask {
        s.push(if m { '1' } else { '0' });
        s.push('\n');
    }
    s
}

fn parse_mask(path: &Path, n: usize) -> Result<Vec<bool>> {
    let text = read(path)?;
    let mask = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match l.trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::parse(path, format!("mask entry `{other}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if mask.len() != n {
        return Err(Error::parse(path, format!("{} entries, expected {n}", mask.len())));
    }
    Ok(mask)
}

pub fn write_graph(dir: &Path, g: &Graph) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut edges = String::new();
    for (i, j) in g.edges() {
        writeln!(edges, "{i}\t{j}").unwrap();
    }
    write(&dir.join("edges.tsv"), &edges)?;

    let mut feats = String::new();
    let header: Vec<String> = (0..g.feature_dim()).map(|c| format!("f{c}")).collect();
    feats.push_str(&header.join(","));
    feats.push('\n');
    for row in g.features.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        feats.push_str(&cells.join(","));
        feats.push('\n');
    }
    write(&dir.join("features.csv"), &feats)?;

    let mut labels = String::from("label\n");
    for y in &g.labels {
        writeln!(labels, "{y}").unwrap();
    }
    write(&dir.join("labels.csv"), &labels)?;

    write(&dir.join("train_mask.txt"), &mask_text(&g.train_mask))?;
    write(&dir.join("val_mask.txt"), &mask_text(&g.val_mask))?;
    write(&dir.join("test_mask.txt"), &mask_text(&g.test_mask))?;

    let manifest = GraphManifest {
        num_nodes: g.num_nodes(),
        feature_dim: g.feature_dim(),
        num_classes: g.num_classes,
        env_id: g.env_id,
    };
    write(
        &dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
}

pub fn read_graph(dir: &Path) -> Result<Graph> {
    let mpath = dir.join("manifest.json");
    let manifest: GraphManifest =
        serde_json::from_str(&read(&mpath)?).map_err(|e| Error::parse(&mpath, e.to_string()))?;
    let n = manifest.num_nodes;

    let epath = dir.join("edges.tsv");
    let mut edges = Vec::new();
    for line in read(&epath)?.lines().filter(|l| !l.trim().is_empty()) {
        let mut it = line.split('\t');
        let mut next = || -> Result<usize> {
            it.next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::parse(&epath, format!("bad edge line `{line}`")))
        };
        let (i, j) = (next()?, next()?);
        edges.push((i, j));
    }

    let fpath = dir.join("features.csv");
    let ftext = read(&fpath)?;
    let mut lines = ftext.lines();
    lines.next();
    let mut data = Vec::with_capacity(n * manifest.feature_dim);
    let mut rows = 0;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        for cell in line.split(',') {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::parse(&fpath, format!("bad number `{cell}`")))?;
            data.push(v);
        }
        rows += 1;
    }
    let features = Array2::from_shape_vec((rows, manifest.feature_dim), data)
        .map_err(|e| Error::parse(&fpath, e.to_string()))?;

    let lpath = dir.join("labels.csv");
    let labels = read(&lpath)?
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::parse(&lpath, format!("bad label `{l}`")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut g = Graph::from_edges(n, &edges, features, labels, manifest.num_classes)?;
    g.train_mask = parse_mask(&dir.join("train_mask.txt"), n)?;
    g.val_mask = parse_mask(&dir.join("val_mask.txt"), n)?;
    g.test_mask = parse_mask(&dir.join("test_mask.txt"), n)?;
    g.env_id = manifest.env_id;
    Ok(g)
}

pub fn graph_dir(root: &Path, split: &str, index: usize) -> PathBuf {
    root.join(split).join(format!("{index:03}"))
}

pub fn write_dataset(root: &Path, ds: &MultiGraphDataset) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (split, graphs) in [
        ("train", &ds.train_graphs),
        ("val", &ds.val_graphs),
        ("test", &ds.test_graphs),
    ] {
        for (i, g) in graphs.iter().enumerate() {
            write_graph(&graph_dir(root, split, i), g)?;
        }
    }
    let manifest = DatasetManifest {
        format_version: 1,
        metric: ds.metric,
        num_train: ds.train_graphs.len(),
        num_val: ds.val_graphs.len(),
        num_test: ds.test_graphs.len(),
    };
    write(
        &root.join("dataset.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
}

pub fn read_dataset(root: &Path) -> Result<MultiGraphDataset> {
    let mpath = root.join("dataset.json");
    let m: DatasetManifest =
        serde_json::from_str(&read(&mpath)?).map_err(|e| Error::parse(&mpath, e.to_string()))?;
    let load = |split: &str, count: usize| -> Result<Vec<Graph>> {
        (0..count).map(|i| read_graph(&graph_dir(root, split, i))).collect()
    };
    Ok(MultiGraphDataset {
        train_graphs: load("train", m.num_train)?,
        val_graphs: load("val", m.num_val)?,
        test_graphs: load("test", m.num_test)?,
        metric: m.metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn graph_round_trips_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 12;
        let feats = Array2::from_shape_fn((n, 3), |_| rng.random::<f64>() * 1e-3 - 7.25);
        let edges: Vec<_> = (0..20)
            .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
            .collect();
        let labels = (0..n).map(|i| i % 3).collect();
        let mut g = Graph::from_edges(n, &edges, feats, labels, 3).unwrap();
        g.train_mask[0] = true;
        g.val_mask[1] = true;
        g.test_mask[5] = true;
        g.env_id = Some(4);

        let dir = tempfile::tempdir().unwrap();
        write_graph(dir.path(), &g).unwrap();
        let back = read_graph(dir.path()).unwrap();
        assert_eq!(back, g);

        let edges_txt = fs::read_to_string(dir.path().join("edges.tsv")).unwrap();
        assert_eq!(edges_txt.lines().count(), g.num_edges());
    }

    #[test]
    fn malformed_mask_is_a_parse_error() {
        let g = Graph::from_edges(2, &[(0, 1)], Array2::zeros((2, 1)), vec![0, 0], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_graph(dir.path(), &g).unwrap();
        fs::write(dir.path().join("val_mask.txt"), "0\n2\n").unwrap();
        assert!(matches!(read_graph(dir.path()), Err(Error::Parse { .. })));
    }
}
