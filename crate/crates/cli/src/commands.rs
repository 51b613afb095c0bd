use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use guide_core::classifier::{train_observed, Bundle, Mode, TrainConfig};
use guide_core::config::KvConfig;
use guide_core::harness::{self, emit_report, ExperimentConfig, ReportFormat, Variant};
use guide_core::metrics::{self, ProbeConfig};
use guide_core::pseudo_domain::{kmeans_fit, ClusterConfig, ClusterModel};
use guide_core::store::{self, Dataset, Dtype, SynthSpec};
use guide_core::{Error, Matrix};
use serde_json::json;

use crate::{ClusterArgs, DtypeArg, EvalArgs, NmiArgs, ProbeArgs, SplitArg, SweepArgs, SynthArgs, TrainArgs};

pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_io() => 3,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::IoAt { path: path.to_path_buf(), source: e })
}

fn require_seed(seed: Option<u64>, cmd: &str) -> Result<u64> {
    seed.ok_or_else(|| usage(format!("`{cmd}` needs --seed (randomized behavior is never seeded implicitly)")))
}

/// Config file (if any) with `--set KEY=VALUE` overrides applied on top.
fn layered_config(file: Option<&Path>, sets: &[String]) -> Result<KvConfig> {
    let mut cfg = match file {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::new(),
    };
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg.set(k.trim(), v.trim());
    }
    Ok(cfg)
}

fn echo_config(cmd: &str, cfg: &KvConfig) {
    eprintln!("resolved {cmd}: {cfg}");
}

fn print_json(v: &serde_json::Value) {
    // A closed pipe (e.g. `| head`) is not an error worth a panic.
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(v).expect("json value"));
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let kv = layered_config(a.spec.as_deref(), &a.set)?;
    let spec = SynthSpec::from_config(&kv)?;
    let dtype = match a.dtype {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F64 => Dtype::F64,
    };
    let mut echo = spec.to_config();
    echo.set("out_dir", a.out_dir.display().to_string());
    echo.set("dtype", if dtype == Dtype::F32 { "f32" } else { "f64" });
    echo_config("synth", &echo);

    let ds = store::generate_synthetic(&spec)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| io_err(&a.out_dir, e))?;
    ds.save(&a.out_dir, dtype)?;
    if a.common.json {
        print_json(&json!({ "out_dir": a.out_dir, "rows": ds.len(), "input_dim": ds.inputs().cols(), "psi_dim": ds.psi().cols() }));
    } else {
        println!("wrote {} rows to {}", ds.len(), a.out_dir.display());
    }
    Ok(())
}

pub fn cluster(a: ClusterArgs) -> Result<()> {
    let seed = require_seed(a.seed, "cluster")?;
    let psi = store::read_matrix(&a.psi)?;
    let cfg = ClusterConfig { n_restarts: a.restarts, ..ClusterConfig::new(a.k, seed) };
    let mut echo = KvConfig::new();
    echo.set("psi", a.psi.display().to_string());
    echo.set("k", a.k.to_string());
    echo.set("seed", seed.to_string());
    echo.set("restarts", a.restarts.to_string());
    echo.set("max_iter", cfg.max_iter.to_string());
    echo.set("tol", cfg.tol.to_string());
    echo_config("cluster", &echo);

    let model = kmeans_fit(&psi, &cfg)?;
    model.save(&a.out)?;
    if let Some(p) = &a.assignments {
        let mut w = csv::Writer::from_path(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        let write = |w: &mut csv::Writer<fs::File>| -> csv::Result<()> {
            w.write_record(["row", "label"])?;
            for (i, l) in model.assignments().iter().enumerate() {
                w.write_record([i.to_string(), l.to_string()])?;
            }
            w.flush()?;
            Ok(())
        };
        write(&mut w).map_err(|e| usage(format!("{}: {e}", p.display())))?;
    }
    if a.common.json {
        print_json(&json!({ "inertia": model.inertia(), "cluster_sizes": model.cluster_sizes(), "out": a.out }));
    } else {
        println!("inertia {}", model.inertia());
        println!("cluster sizes {:?}", model.cluster_sizes());
    }
    Ok(())
}

/// Training variant from `--mode` / `--variant` (flags win over the config keys).
fn resolve_variant(mode: Option<&str>, variant: Option<&str>) -> Result<Variant> {
    let mode: Mode = mode.unwrap_or("guide").parse()?;
    match mode {
        Mode::Erm => Ok(Variant::Erm),
        Mode::Guide => {
            let v: Variant = variant.unwrap_or("rbf").parse()?;
            if v == Variant::Erm {
                return Err(usage("--variant erm contradicts --mode guide"));
            }
            Ok(v)
        }
    }
}

fn train_split(ds: &Dataset, held_out: Option<usize>) -> Result<(Dataset, Option<Dataset>)> {
    match held_out {
        None => Ok((ds.clone(), None)),
        Some(d) => {
            let (train, test) = store::lodo_split(ds, d)?;
            Ok((train, Some(test)))
        }
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let seed = require_seed(a.seed, "train")?;
    let kv = layered_config(a.config.as_deref(), &a.set)?;
    let mode = a.mode.as_deref().or(kv.get_str("mode"));
    let variant_key = a.variant.as_deref().or(kv.get_str("variant"));
    let variant = resolve_variant(mode, variant_key)?;

    let mut rest = KvConfig::new();
    for (k, v) in kv.iter().filter(|(k, _)| !matches!(*k, "mode" | "variant" | "psi_source")) {
        rest.set(k, v);
    }
    let mut base = TrainConfig::default();
    base.apply_config(&rest)?;
    base.seed = seed;
    let cfg = variant.train_config(&base);
    cfg.validate()?;

    let ds = store::load_dataset_dir(&a.data_dir)?;
    let (train_ds, _) = train_split(&ds, a.held_out)?;

    let mut echo = cfg.to_config();
    echo.set("data_dir", a.data_dir.display().to_string());
    if let Some(d) = a.held_out {
        echo.set("held_out", d.to_string());
    }
    if let Some(k) = a.k {
        echo.set("k", k.to_string());
    }
    if let Some(p) = &a.clusters {
        echo.set("clusters", p.display().to_string());
    }
    echo_config("train", &echo);

    let clusters: Option<ClusterModel> = if variant.uses_clusters() {
        match (&a.clusters, a.k) {
            (Some(p), _) => Some(ClusterModel::load(p)?),
            (None, Some(k)) => Some(kmeans_fit(train_ds.psi(), &ClusterConfig::new(k, seed))?),
            (None, None) => return Err(usage(format!("{variant} needs --clusters <file> or --k <int>"))),
        }
    } else {
        if a.clusters.is_some() || a.k.is_some() {
            eprintln!("warning: {variant} does not use clusters; ignoring --clusters/--k");
        }
        None
    };

    let out = train_observed(train_ds.training_view(), clusters.as_ref(), &cfg, &mut |ev| log::info!("refit at step {}", ev.step))?;
    let pred = out.model.predict_rows(train_ds.inputs(), train_ds.psi())?;
    let train_acc = metrics::accuracy(&pred, train_ds.class_labels())?;

    let mut bundle = Bundle::new(out.model);
    bundle.refit_steps = out.history.refit_steps.clone();
    bundle.train_accuracy = Some(train_acc);
    bundle.held_out = a.held_out;
    bundle.config = cfg.to_config();
    bundle.save(&a.out)?;

    let hist_path = a.history.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".history.csv");
        PathBuf::from(s)
    });
    write_history(&hist_path, &out.history.losses, &out.history.refit_steps)?;

    let final_loss = out.history.losses.last().copied().unwrap_or(f64::NAN);
    if a.common.json {
        print_json(&json!({
            "bundle": a.out,
            "history": hist_path,
            "variant": variant.name(),
            "train_accuracy": train_acc,
            "final_loss": final_loss,
            "refit_steps": out.history.refit_steps,
        }));
    } else {
        println!("{variant}: train accuracy {train_acc:.6}, final loss {final_loss:.6}");
        println!("bundle {} history {}", a.out.display(), hist_path.display());
    }
    Ok(())
}

fn write_history(path: &Path, losses: &[f64], refits: &[usize]) -> Result<()> {
    let mut s = String::from("step,loss,refit\n");
    for (step, l) in losses.iter().enumerate() {
        s.push_str(&format!("{step},{l},{}\n", u8::from(refits.binary_search(&step).is_ok())));
    }
    fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let bundle = Bundle::load(&a.bundle)?;
    let ds = store::load_dataset_dir(&a.data_dir)?;
    // Held-out bundles: test = the held-out domain, train = the rest.
    // Otherwise both splits are the whole dataset.
    let (train_ds, test_ds) = train_split(&ds, bundle.held_out)?;
    let split = match (a.split, test_ds) {
        (SplitArg::Train, _) => train_ds,
        (SplitArg::Test, Some(t)) => t,
        (SplitArg::Test, None) => train_ds,
    };
    let split_name = if a.split == SplitArg::Train { "train" } else { "test" };
    let mut echo = KvConfig::new();
    echo.set("bundle", a.bundle.display().to_string());
    echo.set("data_dir", a.data_dir.display().to_string());
    echo.set("split", split_name);
    if let Some(d) = bundle.held_out {
        echo.set("held_out", d.to_string());
    }
    echo_config("eval", &echo);

    let pred = bundle.model.predict_rows(split.inputs(), split.psi())?;
    let truth = split.class_labels();
    let acc = metrics::accuracy(&pred, truth)?;
    let n_classes = bundle.model.head.n_classes();
    let mut per_class = vec![(0usize, 0usize); n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if t < n_classes {
            per_class[t].0 += 1;
            per_class[t].1 += usize::from(p == t);
        }
    }
    if a.common.json {
        let classes: Vec<_> = per_class
            .iter()
            .enumerate()
            .map(|(c, &(n, hit))| {
                json!({ "class": c, "count": n, "correct": hit, "accuracy": if n > 0 { Some(hit as f64 / n as f64) } else { None } })
            })
            .collect();
        print_json(&json!({ "split": split_name, "n": pred.len(), "accuracy": acc, "per_class": classes }));
    } else {
        println!("{split_name} accuracy {acc:.6} ({} samples)", pred.len());
        for (c, &(n, hit)) in per_class.iter().enumerate() {
            if n > 0 {
                println!("  class {c}: {hit}/{n} = {:.6}", hit as f64 / n as f64);
            }
        }
    }
    Ok(())
}

pub fn sweep(a: SweepArgs, ablation: bool) -> Result<()> {
    let cmd = if ablation { "ablate" } else { "lodo" };
    if !ablation && a.seed.is_empty() {
        return Err(usage("`lodo` needs --seed <s1,s2,...> (randomized behavior is never seeded implicitly)"));
    }
    let mut kv = layered_config(a.config.as_deref(), &a.set)?;
    if !a.seed.is_empty() {
        kv.set("seeds", a.seed.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    }
    if let Some(j) = a.jobs {
        kv.set("jobs", j.to_string());
    }
    let mut cfg = ExperimentConfig::from_config(&kv)?;
    if ablation {
        cfg.variants = Variant::ABLATION.to_vec();
    }
    let format = match &a.format {
        Some(f) => f.parse()?,
        None => ReportFormat::from_path(&a.out_report),
    };
    let mut echo = cfg.to_config();
    echo.set("out_report", a.out_report.display().to_string());
    echo_config(cmd, &echo);

    let report = if ablation { harness::run_ablation(&cfg)? } else { harness::run_lodo(&cfg)? };
    emit_report(&report, &a.out_report, format)?;
    let failed = report.cells.iter().filter(|c| !c.status.is_ok()).count();
    if failed > 0 {
        eprintln!("warning: partial report, {failed} of {} cells failed", report.cells.len());
    }
    if a.common.json {
        let rows: Vec<_> = report
            .summary
            .iter()
            .map(|s| json!({ "variant": s.variant.name(), "mean_best_k": s.mean_best_k, "mean_all": s.mean_all, "n_ok": s.n_ok, "n_failed": s.n_failed }))
            .collect();
        print_json(&json!({ "report": a.out_report, "cells": report.cells.len(), "partial": report.partial, "variants": rows }));
    } else {
        print!("{}", report.table());
        println!("{} cells -> {}", report.cells.len(), a.out_report.display());
    }
    std::io::stdout().flush().ok();
    Ok(())
}

/// Labels from one CSV column; arbitrary strings are mapped to integers in
/// order of first appearance (NMI is invariant to relabeling).
fn read_labels(path: &Path, column: Option<&str>) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let bad = |e: csv::Error| usage(format!("{}: {e}", path.display()));
    let header = rdr.headers().map_err(bad)?.clone();
    let idx = match column {
        Some(c) => header.iter().position(|h| h == c),
        None if header.len() == 1 => Some(0),
        None => header.iter().position(|h| h == "label"),
    }
    .ok_or_else(|| {
        usage(format!(
            "{}: no column {:?} (columns: {})",
            path.display(),
            column.unwrap_or("label"),
            header.iter().collect::<Vec<_>>().join(",")
        ))
    })?;
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(bad)?;
        let v = rec.get(idx).unwrap_or("").to_string();
        let next = ids.len();
        out.push(*ids.entry(v).or_insert(next));
    }
    if out.is_empty() {
        return Err(usage(format!("{}: no labels", path.display())));
    }
    Ok(out)
}

pub fn nmi(a: NmiArgs) -> Result<()> {
    let mut echo = KvConfig::new();
    echo.set("labels_a", a.labels_a.display().to_string());
    echo.set("labels_b", a.labels_b.display().to_string());
    if let Some(c) = &a.column_a {
        echo.set("column_a", c.as_str());
    }
    if let Some(c) = &a.column_b {
        echo.set("column_b", c.as_str());
    }
    echo_config("nmi", &echo);
    let u = read_labels(&a.labels_a, a.column_a.as_deref())?;
    let v = read_labels(&a.labels_b, a.column_b.as_deref())?;
    let score = metrics::nmi(&u, &v)?;
    if a.common.json {
        print_json(&json!({ "nmi": score, "n": u.len() }));
    } else {
        println!("{score:.6}");
    }
    Ok(())
}

pub fn probe(a: ProbeArgs) -> Result<()> {
    let features: Matrix = store::read_matrix(&a.features)?;
    let (_, _, domains) = store::read_meta(&a.meta)?;
    let d = ProbeConfig::default();
    let cfg = ProbeConfig {
        hidden: a.hidden.unwrap_or(d.hidden),
        steps: a.steps.unwrap_or(d.steps),
        n_splits: a.splits.unwrap_or(d.n_splits),
        seed: a.seed,
        ..d
    };
    let mut echo = KvConfig::new();
    echo.set("features", a.features.display().to_string());
    echo.set("meta", a.meta.display().to_string());
    echo.set("hidden", cfg.hidden.to_string());
    echo.set("steps", cfg.steps.to_string());
    echo.set("n_splits", cfg.n_splits.to_string());
    echo.set("train_frac", cfg.train_frac.to_string());
    echo.set("batch_size", cfg.batch_size.to_string());
    echo.set("learning_rate", cfg.learning_rate.to_string());
    echo.set("seed", cfg.seed.to_string());
    echo_config("probe", &echo);
    let r = metrics::domain_predictability(&features, domains.as_deref(), &cfg)?;
    if a.common.json {
        print_json(&json!({ "mean_accuracy": r.mean, "split_accuracies": r.split_accuracies }));
    } else {
        println!("{:.6}", r.mean);
    }
    Ok(())
}
