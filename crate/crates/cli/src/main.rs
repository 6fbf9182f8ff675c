use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::Value;

use iene_core::datagen::{generate_scm_dataset_with_truth, load_dataset, save_dataset, ScmConfig};
use iene_core::evalkit::{
    ablation_grid, comparison_csv, emit_grid_heatmap, emit_plots, evaluate_multi_graph, GridAxis, GridSpec,
    MetricReport,
};
use iene_core::graph::dataset_hash;
use iene_core::nets::load_checkpoint;
use iene_core::pipeline::{self, set_dotted, write_atomic, RunConfig, RunResult, EVAL_SEED};
use iene_core::{Error, MultiGraphDataset};

#[derive(Parser)]
#[command(name = "iene", version, about = "Environment inference and extrapolation for node-level graph OOD")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML file with [data], [run] and [grid] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Worker threads for ablation grids.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Dotted override such as `run.stage_two.beta=2`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-graph dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one method on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a trained run's checkpoint on a dataset.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a grid of config overrides over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare finished runs found under the given directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct GridSection {
    axes: Vec<GridAxis>,
    seeds: Vec<u64>,
}

/// Parsed config file plus command-line overrides, split by section.
struct Resolved {
    data: ScmConfig,
    run: RunConfig,
    grid: GridSection,
}

/// Overlay `file` onto `base`, refusing keys the base does not have.
fn merge(base: &mut Value, file: &Value, path: &str) -> Result<()> {
    let Value::Object(over) = file else {
        bail!(Error::Config(format!("`{path}` must be a table")));
    };
    for (k, v) in over {
        let key = format!("{path}.{k}");
        let slot = match base {
            Value::Object(m) => m.get_mut(k),
            _ => None,
        };
        match slot {
            Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &key)?,
            Some(slot) => *slot = v.clone(),
            None => bail!(Error::Config(format!("unknown config key `{key}`"))),
        }
    }
    Ok(())
}

fn section<T: serde::Serialize + serde::de::DeserializeOwned>(
    name: &str,
    default: &T,
    file: Option<&Value>,
    sets: &[(String, String)],
) -> Result<T> {
    let mut v = serde_json::to_value(default)?;
    if let Some(f) = file {
        merge(&mut v, f, name)?;
    }
    for (k, raw) in sets {
        if let Some(rest) = k.strip_prefix(name).and_then(|r| r.strip_prefix('.')) {
            set_dotted(&mut v, rest, raw).map_err(|_| Error::Config(format!("unknown config key `{k}`")))?;
        }
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("[{name}]: {e}")).into())
}

fn resolve(c: &Common) -> Result<Resolved> {
    let file: Value = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    let Value::Object(top) = &file else { unreachable!() };
    if let Some(k) = top.keys().find(|k| !["data", "run", "grid"].contains(&k.as_str())) {
        bail!(Error::Config(format!("unknown config section `{k}`")));
    }
    let mut sets = Vec::new();
    for s in &c.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{s}` is not KEY=VALUE")))?;
        if !["data.", "run.", "grid."].iter().any(|p| k.starts_with(p)) {
            bail!(Error::Config(format!("unknown config key `{k}`")));
        }
        sets.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut data: ScmConfig = section("data", &ScmConfig::default(), top.get("data"), &sets)?;
    let mut run: RunConfig = section("run", &RunConfig::default(), top.get("run"), &sets)?;
    let grid_default = serde_json::json!({"axes": [], "seeds": []});
    let mut gv = grid_default;
    if let Some(g) = top.get("grid") {
        merge(&mut gv, g, "grid")?;
    }
    for (k, raw) in &sets {
        if let Some(rest) = k.strip_prefix("grid.") {
            set_dotted(&mut gv, rest, raw).map_err(|_| Error::Config(format!("unknown config key `{k}`")))?;
        }
    }
    let grid: GridSection = serde_json::from_value(gv).map_err(|e| Error::Config(format!("[grid]: {e}")))?;
    if let Some(s) = c.seed {
        data.seed = s;
        run.seed = s;
    }
    Ok(Resolved { data, run, grid })
}

/// Make `dir` ready for fresh output.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.is_file() || std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            bail!(Error::Collision(dir.to_path_buf()));
        }
        if dir.is_file() {
            std::fs::remove_file(dir)?;
        } else {
            std::fs::remove_dir_all(dir)?;
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn read_data(dir: &Path) -> Result<MultiGraphDataset> {
    let (ds, _) = load_dataset(dir).with_context(|| format!("loading dataset from {}", dir.display()))?;
    Ok(ds)
}

fn summary(name: &str, r: &MetricReport) -> String {
    format!("{name}: {} {:.4} ± {:.4} over {} test graphs", r.metric, r.mean, r.std, r.per_graph.len())
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = resolve(c)?.data;
    cfg.validate()?;
    let out = c
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("gen-data needs --out".into()))?;
    prepare_out(out, c.force)?;
    let (ds, truth) = generate_scm_dataset_with_truth(&cfg)?;
    save_dataset(out, &ds, Some(&truth))?;
    println!("dataset {} written to {}", dataset_hash(&ds), out.display());
    Ok(())
}

fn train(data: &Path, c: &Common) -> Result<()> {
    let mut cfg = resolve(c)?.run;
    let ds = read_data(data)?;
    if let Some(out) = &c.out {
        prepare_out(out, c.force)?;
        cfg.out_dir = Some(out.clone());
    }
    let r = pipeline::run(&cfg, &ds)?;
    println!("{}", summary(r.method.name(), &r.test));
    println!(
        "val {:.4} train {:.4} best iteration {} of {}",
        r.val_score, r.train_score, r.best_iter, r.iterations
    );
    if let Some(p) = &r.partition {
        println!("environment agreement {:.3}", p.agreement);
    }
    if c.out.is_none() {
        println!("{}", serde_json::to_string_pretty(&r)?);
    }
    Ok(())
}

fn eval(run_dir: &Path, data: &Path, c: &Common) -> Result<()> {
    let prior = RunResult::read(&run_dir.join("result.json"))?;
    let mut cfg = prior.config.clone();
    for s in &c.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{s}` is not KEY=VALUE")))?;
        let key = k
            .trim()
            .strip_prefix("run.")
            .ok_or_else(|| Error::Config(format!("eval only takes run.* overrides, got `{k}`")))?;
        cfg = pipeline::with_override(&cfg, key, v.trim())?;
    }
    let ds = read_data(data)?;
    let hash = dataset_hash(&ds);
    if hash != prior.dataset_hash {
        log::warn!("dataset {hash} differs from the training dataset {}", prior.dataset_hash);
    }
    let model = cfg.model(&ds);
    let params = load_checkpoint(&run_dir.join("checkpoint"), &model, cfg.lr)?;
    let report = evaluate_multi_graph(&params, &model, &ds, EVAL_SEED)?;
    println!("{}", summary(prior.method.name(), &report));
    let json = serde_json::to_string_pretty(&report)?;
    match &c.out {
        Some(out) => {
            std::fs::create_dir_all(out)?;
            write_atomic(&out.join("eval.json"), &json)?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn ablate(data: &Path, c: &Common) -> Result<()> {
    let r = resolve(c)?;
    if r.grid.axes.is_empty() {
        bail!(Error::Config("[grid] needs at least one axis".into()));
    }
    let seeds = if r.grid.seeds.is_empty() {
        (0..3).map(|i| r.run.seed + i).collect()
    } else {
        r.grid.seeds.clone()
    };
    let ds = read_data(data)?;
    if let Some(out) = &c.out {
        prepare_out(out, c.force)?;
    }
    let spec = GridSpec {
        base: r.run,
        axes: r.grid.axes,
        seeds,
    };
    let table = ablation_grid(&spec, &ds, c.jobs)?;
    let csv = table.to_csv()?;
    print!("{csv}");
    if let Some(out) = &c.out {
        write_atomic(&out.join("ablation.csv"), &csv)?;
        write_atomic(&out.join("grid.json"), &serde_json::to_string_pretty(&table)?)?;
        emit_grid_heatmap(&table, out)?;
    }
    Ok(())
}

fn find_results(dir: &Path) -> Vec<PathBuf> {
    walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == "result.json")
        .map(|e| e.into_path())
        .collect()
}

fn report(runs: &[PathBuf], c: &Common) -> Result<()> {
    let mut results = Vec::new();
    for dir in runs {
        for p in find_results(dir) {
            results.push(RunResult::read(&p)?);
        }
    }
    let Some(first) = results.first() else {
        bail!(Error::Input("no result.json found under the given directories".into()));
    };
    if let Some(other) = results.iter().find(|r| r.dataset_hash != first.dataset_hash) {
        bail!(Error::Input(format!(
            "runs use different datasets ({} and {}); refusing to compare",
            first.dataset_hash, other.dataset_hash
        )));
    }
    let dataset = first.dataset_hash.chars().take(12).collect::<String>();
    let mut by_method: BTreeMap<String, Vec<MetricReport>> = BTreeMap::new();
    for r in &results {
        by_method.entry(r.method.name().to_string()).or_default().push(r.test.clone());
    }
    let mut named = Vec::new();
    for (m, reps) in by_method {
        named.push((m, MetricReport::aggregate(&reps)?));
    }
    let rows: Vec<_> = named.iter().map(|(m, r)| (m.clone(), dataset.clone(), r.clone())).collect();
    let csv = comparison_csv(&rows)?;
    print!("{csv}");
    if let Some(out) = &c.out {
        prepare_out(out, c.force)?;
        write_atomic(&out.join("comparison.csv"), &csv)?;
        for p in emit_plots(&named, out)? {
            println!("figure {}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("IENE_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::GenData { common } => gen_data(common),
        Cmd::Train { data, common } => train(data, common),
        Cmd::Eval { run, data, common } => eval(run, data, common),
        Cmd::Ablate { data, common } => ablate(data, common),
        Cmd::Report { runs, common } => report(runs, common),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
