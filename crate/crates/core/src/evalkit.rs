//! Metrics, multi-graph evaluation, ablation grids, tables and plots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, MetricName, MultiGraphDataset};
use crate::nets::{forward_classifier, forward_phi, ModelConfig, ParameterSet};
use crate::pipeline::{self, RunConfig};

fn selected(mask: &[bool], n: usize) -> Result<Vec<usize>> {
    if mask.len() != n {
        return Err(Error::Shape(format!("mask of length {} for {n} rows", mask.len())));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(Error::Input("metric mask selects no nodes".into()));
    }
    Ok(idx)
}

fn check_rows(scores: &Array2<f64>, labels: &[usize]) -> Result<()> {
    if scores.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} score rows against {} labels",
            scores.nrows(),
            labels.len()
        )));
    }
    if scores.ncols() == 0 {
        return Err(Error::Shape("score matrix has no columns".into()));
    }
    Ok(())
}

/// Predicted class of one score row. A single column is a binary logit.
fn predict(row: ndarray::ArrayView1<f64>) -> usize {
    if row.len() == 1 {
        return usize::from(row[0] > 0.0);
    }
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

pub fn accuracy(scores: &Array2<f64>, labels: &[usize], mask: &[bool]) -> Result<f64> {
    check_rows(scores, labels)?;
    let idx = selected(mask, labels.len())?;
    let hits = idx.iter().filter(|&&i| predict(scores.row(i)) == labels[i]).count();
    Ok(hits as f64 / idx.len() as f64)
}

/// Score for the positive class: the logit itself for one column, the
/// margin of class 1 over class 0 for two.
fn positive_score(scores: &Array2<f64>, i: usize) -> Result<f64> {
    match scores.ncols() {
        1 => Ok(scores[[i, 0]]),
        2 => Ok(scores[[i, 1]] - scores[[i, 0]]),
        c => Err(Error::Input(format!("ROC-AUC needs binary scores, got {c} columns"))),
    }
}

/// Area under the ROC curve via the rank statistic, ties counted half.
pub fn rocauc(scores: &Array2<f64>, labels: &[usize], mask: &[bool]) -> Result<f64> {
    check_rows(scores, labels)?;
    let idx = selected(mask, labels.len())?;
    let mut pts = Vec::with_capacity(idx.len());
    for &i in &idx {
        if labels[i] > 1 {
            return Err(Error::Input(format!("ROC-AUC needs binary labels, found {}", labels[i])));
        }
        pts.push((positive_score(scores, i)?, labels[i] == 1));
    }
    let pos = pts.iter().filter(|p| p.1).count();
    let neg = pts.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Input("ROC-AUC needs both classes under the mask".into()));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    // average ranks over tied groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pts.len() {
        let mut j = i;
        while j + 1 < pts.len() && pts[j + 1].0 == pts[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * pts[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Unweighted mean of per-class F1 over classes that occur in the labels
/// or the predictions.
pub fn macro_f1(scores: &Array2<f64>, labels: &[usize], mask: &[bool]) -> Result<f64> {
    check_rows(scores, labels)?;
    let idx = selected(mask, labels.len())?;
    let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for &i in &idx {
        let p = predict(scores.row(i));
        let y = labels[i];
        if p == y {
            counts.entry(y).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(y).or_default().2 += 1;
        }
    }
    let total: f64 = counts
        .values()
        .map(|&(tp, fp, fneg)| {
            let denom = 2 * tp + fp + fneg;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / counts.len() as f64)
}

pub fn metric(name: MetricName, scores: &Array2<f64>, labels: &[usize], mask: &[bool]) -> Result<f64> {
    match name {
        MetricName::Accuracy => accuracy(scores, labels, mask),
        MetricName::Rocauc => rocauc(scores, labels, mask),
        MetricName::MacroF1 => macro_f1(scores, labels, mask),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricName,
    /// `(test graph index, score)`.
    pub per_graph: Vec<(usize, f64)>,
    pub mean: f64,
    /// Population standard deviation: over graphs for a single run, over
    /// seeds for an aggregate.
    pub std: f64,
    pub n_seeds: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

impl MetricReport {
    pub fn from_scores(metric: MetricName, per_graph: Vec<(usize, f64)>) -> Self {
        let vals: Vec<f64> = per_graph.iter().map(|p| p.1).collect();
        let (mean, std) = mean_std(&vals);
        Self {
            metric,
            per_graph,
            mean,
            std,
            n_seeds: 1,
        }
    }

    /// Combine single-seed reports: per-graph scores are averaged, `mean`
    /// and `std` are taken over the per-seed means.
    pub fn aggregate(reports: &[MetricReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Input("no reports to aggregate".into()))?;
        let mut per: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in reports {
            if r.metric != first.metric {
                return Err(Error::Input("reports use different metrics".into()));
            }
            for &(g, s) in &r.per_graph {
                per.entry(g).or_default().push(s);
            }
        }
        let means: Vec<f64> = reports.iter().map(|r| r.mean).collect();
        let (mean, std) = mean_std(&means);
        Ok(Self {
            metric: first.metric,
            per_graph: per.into_iter().map(|(g, v)| (g, mean_std(&v).0)).collect(),
            mean,
            std,
            n_seeds: reports.iter().map(|r| r.n_seeds).sum(),
        })
    }
}

/// Class scores of `c(Φ(G))` for every node of `g`.
pub fn predict_scores(params: &ParameterSet, model: &ModelConfig, g: &Graph, seed: u64) -> Result<Array2<f64>> {
    let h = forward_phi(params, model, g, seed)?;
    forward_classifier(params, "c", &h)
}

/// Score of one graph on the nodes of `mask`, or on every node if the mask
/// is empty.
pub fn score_graph(
    params: &ParameterSet,
    model: &ModelConfig,
    g: &Graph,
    mask: &[bool],
    metric_name: MetricName,
    seed: u64,
) -> Result<f64> {
    let s = predict_scores(params, model, g, seed)?;
    let all;
    let m = if mask.iter().any(|&b| b) {
        mask
    } else {
        all = vec![true; g.num_nodes()];
        &all
    };
    metric(metric_name, &s, &g.labels, m)
}

/// Per-test-graph scores on test nodes, with mean and std over graphs.
pub fn evaluate_multi_graph(
    params: &ParameterSet,
    model: &ModelConfig,
    ds: &MultiGraphDataset,
    seed: u64,
) -> Result<MetricReport> {
    let per = ds
        .test_graphs
        .iter()
        .enumerate()
        .map(|(i, g)| Ok((i, score_graph(params, model, g, &g.test_mask, ds.metric, seed)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_scores(ds.metric, per))
}

// ---------------------------------------------------------------------------
// Ablation grids
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    /// Dotted key into the run config, e.g. `stage_two.penalty`.
    pub key: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub base: RunConfig,
    pub axes: Vec<GridAxis>,
    pub seeds: Vec<u64>,
}

impl GridSpec {
    /// Every combination of axis values, first axis slowest.
    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut out: Vec<Vec<(String, String)>> = vec![vec![]];
        for axis in &self.axes {
            let mut next = Vec::with_capacity(out.len() * axis.values.len());
            for prefix in &out {
                for v in &axis.values {
                    let mut c = prefix.clone();
                    c.push((axis.key.clone(), v.clone()));
                    next.push(c);
                }
            }
            out = next;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub label: String,
    pub overrides: Vec<(String, String)>,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub keys: Vec<String>,
    pub cells: Vec<GridCell>,
}

fn cell_label(overrides: &[(String, String)]) -> String {
    if overrides.is_empty() {
        return "base".into();
    }
    overrides
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn run_cell(spec: &GridSpec, overrides: &[(String, String)], ds: &MultiGraphDataset) -> Result<MetricReport> {
    if spec.seeds.is_empty() {
        return Err(Error::Config("grid has no seeds".into()));
    }
    let mut cfg = spec.base.clone();
    cfg.out_dir = None;
    for (k, v) in overrides {
        cfg = pipeline::with_override(&cfg, k, v)?;
    }
    let reports = spec
        .seeds
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.seed = s;
            pipeline::run(&c, ds).map(|r| r.test)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::aggregate(&reports)
}

/// Run every cell over every seed on a pool of `jobs` threads. A failing
/// cell is recorded with its error; the others still run.
pub fn ablation_grid(spec: &GridSpec, ds: &MultiGraphDataset, jobs: usize) -> Result<GridTable> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cells = spec.cells();
    let results: Vec<GridCell> = pool.install(|| {
        cells
            .par_iter()
            .map(|ov| {
                let label = cell_label(ov);
                match run_cell(spec, ov, ds) {
                    Ok(r) => GridCell {
                        label,
                        overrides: ov.clone(),
                        report: Some(r),
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("grid cell {label} failed: {e}");
                        GridCell {
                            label,
                            overrides: ov.clone(),
                            report: None,
                            error: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect()
    });
    Ok(GridTable {
        keys: spec.axes.iter().map(|a| a.key.clone()).collect(),
        cells: results,
    })
}

impl GridTable {
    pub fn cell(&self, label: &str) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.label == label)
    }

    /// Successful cells by descending mean, then failed cells.
    pub fn ranked(&self) -> Vec<&GridCell> {
        let mut ok: Vec<&GridCell> = self.cells.iter().filter(|c| c.report.is_some()).collect();
        ok.sort_by(|a, b| {
            let (x, y) = (a.report.as_ref().unwrap().mean, b.report.as_ref().unwrap().mean);
            y.total_cmp(&x).then_with(|| a.label.cmp(&b.label))
        });
        ok.extend(self.cells.iter().filter(|c| c.report.is_none()));
        ok
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["rank".to_string(), "cell".into()];
        header.extend(self.keys.iter().cloned());
        header.extend(["mean", "std", "n_seeds", "status"].map(String::from));
        w.write_record(&header).map_err(csv_err)?;
        for (i, c) in self.ranked().into_iter().enumerate() {
            let mut row = vec![(i + 1).to_string(), c.label.clone()];
            for k in &self.keys {
                row.push(
                    c.overrides
                        .iter()
                        .find(|(kk, _)| kk == k)
                        .map(|(_, v)| v.clone())
                        .unwrap_or_default(),
                );
            }
            match (&c.report, &c.error) {
                (Some(r), _) => {
                    row.extend([format!("{:.4}", r.mean), format!("{:.4}", r.std), r.n_seeds.to_string()]);
                    row.push("ok".into());
                }
                (None, e) => {
                    row.extend([String::new(), String::new(), String::new()]);
                    row.push(format!("failed: {}", e.clone().unwrap_or_default()));
                }
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("csv: {e}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One row per method, one column per dataset, cells `mean±std`.
pub fn comparison_csv(rows: &[(String, String, MetricReport)]) -> Result<String> {
    let mut methods: Vec<&str> = Vec::new();
    let mut datasets: Vec<&str> = Vec::new();
    for (m, d, _) in rows {
        if !methods.contains(&m.as_str()) {
            methods.push(m);
        }
        if !datasets.contains(&d.as_str()) {
            datasets.push(d);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method"];
    header.extend(datasets.iter().copied());
    w.write_record(&header).map_err(csv_err)?;
    for m in &methods {
        let mut row = vec![m.to_string()];
        for d in &datasets {
            let cell = rows
                .iter()
                .find(|(mm, dd, _)| mm == m && dd == d)
                .map(|(_, _, r)| format!("{:.2}±{:.2}", 100.0 * r.mean, 100.0 * r.std))
                .unwrap_or_default();
            row.push(cell);
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    finish_csv(w)
}

// ---------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Input(format!("plot: {e}"))
}

/// Per-test-graph comparison of named reports, one line per report, in
/// `out_dir/per_graph.svg`. Returns the written files; an empty list
/// writes nothing.
pub fn emit_plots(reports: &[(String, MetricReport)], out_dir: &Path) -> Result<Vec<PathBuf>> {
    use plotters::prelude::*;

    if reports.is_empty() {
        log::warn!("no reports to plot");
        return Ok(vec![]);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("per_graph.svg");
    let max_g = reports
        .iter()
        .flat_map(|(_, r)| r.per_graph.iter().map(|p| p.0))
        .max()
        .unwrap_or(0);
    {
        let root = SVGBackend::new(&path, (640, 400)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(40)
            .build_cartesian_2d(0f64..(max_g as f64 + 1.0), 0f64..1.0)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("test graph")
            .y_desc(reports[0].1.metric.to_string())
            .draw()
            .map_err(plot_err)?;
        for (i, (name, r)) in reports.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let pts: Vec<(f64, f64)> = r.per_graph.iter().map(|&(g, s)| (g as f64 + 0.5, s)).collect();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart
                .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
                .map_err(plot_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(vec![path])
}

/// Heatmap of cell means over the first two grid axes (a single row for a
/// one-axis grid), in `out_dir/ablation.svg`.
pub fn emit_grid_heatmap(table: &GridTable, out_dir: &Path) -> Result<Option<PathBuf>> {
    use plotters::prelude::*;

    if table.cells.is_empty() {
        log::warn!("empty grid, no heatmap");
        return Ok(None);
    }
    let axis_values = |k: Option<&String>| -> Vec<String> {
        let mut vals: Vec<String> = Vec::new();
        if let Some(k) = k {
            for c in &table.cells {
                if let Some((_, v)) = c.overrides.iter().find(|(kk, _)| kk == k) {
                    if !vals.contains(v) {
                        vals.push(v.clone());
                    }
                }
            }
        }
        if vals.is_empty() {
            vals.push(String::new());
        }
        vals
    };
    let xs = axis_values(table.keys.first());
    let ys = axis_values(table.keys.get(1));
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("ablation.svg");
    {
        let root = SVGBackend::new(&path, (120 + 110 * xs.len() as u32, 80 + 50 * ys.len() as u32)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        for c in &table.cells {
            let pick = |k: Option<&String>, vals: &[String]| -> usize {
                k.and_then(|k| c.overrides.iter().find(|(kk, _)| kk == k))
                    .and_then(|(_, v)| vals.iter().position(|x| x == v))
                    .unwrap_or(0)
            };
            let xi = pick(table.keys.first(), &xs);
            let yi = pick(table.keys.get(1), &ys);
            let (x0, y0) = (100 + 110 * xi as i32, 40 + 50 * yi as i32);
            let (fill, text) = match &c.report {
                Some(r) => {
                    let v = r.mean.clamp(0.0, 1.0);
                    (HSLColor(0.6 * v, 0.7, 0.5).to_rgba(), format!("{:.3}", r.mean))
                }
                None => (RGBColor(200, 200, 200).to_rgba(), "failed".to_string()),
            };
            root.draw(&Rectangle::new([(x0, y0), (x0 + 105, y0 + 45)], fill.filled()))
                .map_err(plot_err)?;
            root.draw(&Text::new(text, (x0 + 30, y0 + 18), ("sans-serif", 14)))
                .map_err(plot_err)?;
        }
        for (i, x) in xs.iter().enumerate() {
            root.draw(&Text::new(x.clone(), (100 + 110 * i as i32, 15), ("sans-serif", 12)))
                .map_err(plot_err)?;
        }
        for (j, y) in ys.iter().enumerate() {
            root.draw(&Text::new(y.clone(), (5, 58 + 50 * j as i32), ("sans-serif", 12)))
                .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    Ok(Some(path))
}
