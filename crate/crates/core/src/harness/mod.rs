//! Leave-one-domain-out sweeps over held-out domain x cluster count x seed x
//! variant, the transformation ablation ladder, and report emission.

mod report;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

pub use report::{
    emit_report, summarize, BestK, Cell, CellStatus, EvalReport, KAggregate, ReportFormat, VariantSummary,
    CSV_HEADER,
};

use crate::classifier::{self, Mode, PsiSource, TrainConfig};
use crate::config::KvConfig;
use crate::metrics::{self, ProbeConfig};
use crate::pseudo_domain::{self, kmeans_fit, ClusterConfig, ClusterModel};
use crate::store::{self, Dataset, SynthSpec};
use crate::transform::TransformKind;
use crate::{seed, Error, Result};

/// A row of the comparison: ERM or one GUIDE configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Erm,
    GuideDirectConcat,
    GuideClusterReplace,
    GuideLinear,
    GuideRbf,
    GuideNoClustering,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Erm,
        Variant::GuideDirectConcat,
        Variant::GuideClusterReplace,
        Variant::GuideLinear,
        Variant::GuideRbf,
        Variant::GuideNoClustering,
    ];

    /// The transformation ladder in reporting order.
    pub const ABLATION: [Variant; 5] = [
        Variant::Erm,
        Variant::GuideDirectConcat,
        Variant::GuideClusterReplace,
        Variant::GuideLinear,
        Variant::GuideRbf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Erm => "ERM",
            Variant::GuideDirectConcat => "GUIDE-DirectConcat",
            Variant::GuideClusterReplace => "GUIDE-ClusterReplace",
            Variant::GuideLinear => "GUIDE-Linear",
            Variant::GuideRbf => "GUIDE-RBF",
            Variant::GuideNoClustering => "GUIDE-NoClustering",
        }
    }

    /// Whether cells of this variant depend on a clustering of `psi`.
    pub fn uses_clusters(self) -> bool {
        !matches!(self, Variant::Erm | Variant::GuideNoClustering)
    }

    /// Apply this variant's mode/transform/psi source on top of `base`.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let (mode, transform, psi_source) = match self {
            Variant::Erm => (Mode::Erm, base.transform, PsiSource::Centroid),
            Variant::GuideDirectConcat => (Mode::Guide, TransformKind::Identity, PsiSource::Centroid),
            Variant::GuideClusterReplace => (Mode::Guide, TransformKind::ClusterReplace, PsiSource::Centroid),
            Variant::GuideLinear => (Mode::Guide, TransformKind::Linear, PsiSource::Centroid),
            Variant::GuideRbf => (Mode::Guide, TransformKind::Rbf, PsiSource::Centroid),
            Variant::GuideNoClustering => (Mode::Guide, TransformKind::Identity, PsiSource::Raw),
        };
        TrainConfig { mode, transform, psi_source, ..base.clone() }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        let v = match key.as_str() {
            "erm" => Variant::Erm,
            "guide-directconcat" | "concat" | "guide-concat" => Variant::GuideDirectConcat,
            "guide-clusterreplace" | "replace" | "guide-replace" => Variant::GuideClusterReplace,
            "guide-linear" | "linear" => Variant::GuideLinear,
            "guide-rbf" | "rbf" => Variant::GuideRbf,
            "guide-noclustering" | "noclustering" | "raw" => Variant::GuideNoClustering,
            _ => return Err(Error::invalid(format!("unknown variant {s:?}"))),
        };
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SynthSpec),
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub k_multipliers: Vec<usize>,
    pub k_cap: usize,
    /// Explicit cluster counts; overrides multipliers and cap when set.
    pub k_values: Option<Vec<usize>>,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Domains to hold out; all domains when `None`.
    pub held_out: Option<Vec<usize>>,
    /// Scale every `psi` row to unit length before clustering.
    pub normalize_psi: bool,
    /// Record the domain predictability of `psi` in the report.
    pub probe: bool,
    pub probe_config: ProbeConfig,
    /// Maximum concurrent cells; 0 uses every available core.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic(SynthSpec::benchmark_v1()),
            k_multipliers: pseudo_domain::DEFAULT_MULTIPLIERS.to_vec(),
            k_cap: pseudo_domain::DEFAULT_CAP,
            k_values: None,
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            variants: vec![Variant::Erm, Variant::GuideRbf],
            held_out: None,
            normalize_psi: false,
            probe: false,
            probe_config: ProbeConfig::default(),
            jobs: 0,
        }
    }
}

const EXPERIMENT_KEYS: &[&str] =
    &["data_dir", "seeds", "variants", "k_multipliers", "k_cap", "k_values", "held_out", "normalize_psi", "probe", "jobs"];

impl ExperimentConfig {
    /// Parse a flat config. Dataset keys use the `synth.` prefix, training
    /// keys the `train.` prefix and probe keys the `probe.` prefix.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let mut out = Self::default();
        let mut synth = KvConfig::new();
        let mut train = KvConfig::new();
        let mut probe = KvConfig::new();
        for (k, v) in cfg.iter() {
            if let Some(rest) = k.strip_prefix("synth.") {
                synth.set(rest, v);
            } else if let Some(rest) = k.strip_prefix("train.") {
                train.set(rest, v);
            } else if let Some(rest) = k.strip_prefix("probe.") {
                probe.set(rest, v);
            } else if !EXPERIMENT_KEYS.contains(&k) {
                return Err(Error::invalid(format!("unknown experiment key `{k}`")));
            }
        }
        match cfg.get_str("data_dir") {
            Some(dir) => {
                if !synth.is_empty() {
                    return Err(Error::invalid("give either data_dir or synth.* keys, not both"));
                }
                out.source = DataSource::Directory(PathBuf::from(dir));
            }
            None => out.source = DataSource::Synthetic(SynthSpec::from_config(&synth)?),
        }
        if cfg.contains("train.mode") || cfg.contains("train.variant") || cfg.contains("train.psi_source") {
            return Err(Error::invalid("train.mode/variant/psi_source are set per variant; use `variants`"));
        }
        out.train.apply_config(&train)?;
        out.probe_config = probe_config(&probe)?;
        if let Some(s) = cfg.get_list::<u64>("seeds")? {
            out.seeds = s;
        }
        if let Some(v) = cfg.get_list::<Variant>("variants")? {
            out.variants = v;
        }
        if let Some(m) = cfg.get_list::<usize>("k_multipliers")? {
            out.k_multipliers = m;
        }
        out.k_cap = cfg.get_or("k_cap", out.k_cap)?;
        out.k_values = cfg.get_list::<usize>("k_values")?;
        out.held_out = cfg.get_list::<usize>("held_out")?;
        out.normalize_psi = cfg.get_or("normalize_psi", out.normalize_psi)?;
        out.probe = cfg.get_or("probe", out.probe)?;
        out.jobs = cfg.get_or("jobs", out.jobs)?;
        out.validate()?;
        Ok(out)
    }

    /// Fully resolved configuration, in the same key space as [`Self::from_config`].
    pub fn to_config(&self) -> KvConfig {
        let mut c = KvConfig::new();
        match &self.source {
            DataSource::Synthetic(spec) => {
                for (k, v) in spec.to_config().iter() {
                    c.set(&format!("synth.{k}"), v);
                }
            }
            DataSource::Directory(dir) => c.set("data_dir", dir.display().to_string()),
        }
        for (k, v) in self.train.to_config().iter() {
            if !matches!(k, "mode" | "variant" | "psi_source") {
                c.set(&format!("train.{k}"), v);
            }
        }
        let p = &self.probe_config;
        c.set("probe.n_splits", p.n_splits.to_string());
        c.set("probe.train_frac", p.train_frac.to_string());
        c.set("probe.hidden", p.hidden.to_string());
        c.set("probe.steps", p.steps.to_string());
        c.set("probe.batch_size", p.batch_size.to_string());
        c.set("probe.learning_rate", p.learning_rate.to_string());
        c.set("probe.seed", p.seed.to_string());
        c.set("seeds", join(&self.seeds));
        c.set("variants", join(&self.variants));
        c.set("k_multipliers", join(&self.k_multipliers));
        c.set("k_cap", self.k_cap.to_string());
        if let Some(k) = &self.k_values {
            c.set("k_values", join(k));
        }
        if let Some(h) = &self.held_out {
            c.set("held_out", join(h));
        }
        c.set("normalize_psi", self.normalize_psi.to_string());
        c.set("probe", self.probe.to_string());
        c.set("jobs", self.jobs.to_string());
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds must be non-empty"));
        }
        if self.variants.is_empty() {
            return Err(Error::invalid("variants must be non-empty"));
        }
        let mut v = self.variants.clone();
        v.sort();
        v.dedup();
        if v.len() != self.variants.len() {
            return Err(Error::invalid("variants contain duplicates"));
        }
        let mut s = self.seeds.clone();
        s.sort();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::invalid("seeds contain duplicates"));
        }
        match &self.k_values {
            Some(k) if k.is_empty() || k.contains(&0) => return Err(Error::invalid("k_values must be positive")),
            None if self.k_multipliers.is_empty() || self.k_multipliers.contains(&0) || self.k_cap == 0 => {
                return Err(Error::invalid("k_multipliers and k_cap must be positive"))
            }
            _ => {}
        }
        if let DataSource::Synthetic(spec) = &self.source {
            spec.validate()?;
        }
        self.train.validate()
    }

    /// Candidate cluster counts for a dataset with `n_classes` classes.
    pub fn k_candidates(&self, n_classes: usize) -> Vec<usize> {
        match &self.k_values {
            Some(k) => {
                let mut k = k.clone();
                k.sort_unstable();
                k.dedup();
                k
            }
            None => pseudo_domain::choose_k(n_classes, &self.k_multipliers, self.k_cap),
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = match &self.source {
            DataSource::Synthetic(spec) => store::generate_synthetic(spec)?,
            DataSource::Directory(dir) => store::load_dataset_dir(dir)?,
        };
        Ok(if self.normalize_psi { ds.with_unit_norm_psi() } else { ds })
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn probe_config(c: &KvConfig) -> Result<ProbeConfig> {
    c.reject_unknown(&["n_splits", "train_frac", "hidden", "steps", "batch_size", "learning_rate", "seed"])?;
    let d = ProbeConfig::default();
    Ok(ProbeConfig {
        n_splits: c.get_or("n_splits", d.n_splits)?,
        train_frac: c.get_or("train_frac", d.train_frac)?,
        hidden: c.get_or("hidden", d.hidden)?,
        steps: c.get_or("steps", d.steps)?,
        batch_size: c.get_or("batch_size", d.batch_size)?,
        learning_rate: c.get_or("learning_rate", d.learning_rate)?,
        seed: c.get_or("seed", d.seed)?,
    })
}

/// Seed used to cluster the training split of `held_out` with `k` clusters in trial `seed`.
pub fn cluster_seed(seed: u64, held_out: usize, k: usize) -> u64 {
    seed::derive(seed::derive(seed, "lodo-cluster", held_out as u64), "k", k as u64)
}

/// Seed for network initialization and batch order in trial `seed`.
/// Shared by every variant so that variants differ only in the augmentation.
pub fn train_seed(seed: u64, held_out: usize) -> u64 {
    seed::derive(seed, "lodo-train", held_out as u64)
}

/// One schedulable piece of work: a (held-out domain, seed) pair, optionally
/// with a cluster count. Cluster-free variants run once per pair and are
/// replicated across cluster counts, since their results cannot depend on K.
struct Unit {
    held_out: usize,
    seed: u64,
    k: Option<usize>,
}

pub fn run_lodo(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    run_lodo_on(cfg, &ds)
}

/// [`run_lodo`] on an already loaded dataset.
pub fn run_lodo_on(cfg: &ExperimentConfig, ds: &Dataset) -> Result<EvalReport> {
    cfg.validate()?;
    let domains = ds.domain_labels().ok_or(Error::MissingDomainLabels)?;
    let held_out: Vec<usize> = match &cfg.held_out {
        Some(h) => h.clone(),
        None => (0..ds.n_domains()).filter(|d| domains.contains(d)).collect(),
    };
    if held_out.is_empty() {
        return Err(Error::invalid("no domains to hold out"));
    }
    let ks = cfg.k_candidates(ds.n_classes());

    let mut units = Vec::new();
    for &d in &held_out {
        for &s in &cfg.seeds {
            if cfg.variants.iter().any(|v| !v.uses_clusters()) {
                units.push(Unit { held_out: d, seed: s, k: None });
            }
            if cfg.variants.iter().any(|v| v.uses_clusters()) {
                units.extend(ks.iter().map(|&k| Unit { held_out: d, seed: s, k: Some(k) }));
            }
        }
    }

    let results: Vec<Vec<Cell>> = run_units(cfg.jobs, &units, |u| run_unit(cfg, ds, &ks, u))?;
    let mut cells: Vec<Cell> = results.into_iter().flatten().collect();

    let variant_rank = |v: Variant| cfg.variants.iter().position(|&x| x == v).unwrap_or(usize::MAX);
    let seed_rank = |s: u64| cfg.seeds.iter().position(|&x| x == s).unwrap_or(usize::MAX);
    cells.sort_by_key(|c| (variant_rank(c.variant), c.held_out_domain, c.k, seed_rank(c.seed)));

    let psi_domain_predictability = if cfg.probe {
        Some(metrics::domain_predictability(ds.psi(), Some(domains), &cfg.probe_config)?.mean)
    } else {
        None
    };
    // `jobs` only affects scheduling, so it stays out of the echo and reports
    // are identical for any worker count.
    let config: Vec<(String, String)> = cfg
        .to_config()
        .iter()
        .filter(|(k, _)| *k != "jobs")
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    Ok(EvalReport::new(cells, psi_domain_predictability, config, &cfg.variants))
}

/// The transformation ladder: ERM, direct concatenation, cluster replacement,
/// linear and RBF, in that order.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let cfg = ExperimentConfig { variants: Variant::ABLATION.to_vec(), ..cfg.clone() };
    run_lodo(&cfg)
}

fn run_units<F>(jobs: usize, units: &[Unit], f: F) -> Result<Vec<Vec<Cell>>>
where
    F: Fn(&Unit) -> Vec<Cell> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if jobs == 1 {
            return Ok(units.iter().map(&f).collect());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
        Ok(pool.install(|| units.par_iter().map(&f).collect()))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
        Ok(units.iter().map(f).collect())
    }
}

fn run_unit(cfg: &ExperimentConfig, ds: &Dataset, ks: &[usize], u: &Unit) -> Vec<Cell> {
    let variants: Vec<Variant> =
        cfg.variants.iter().copied().filter(|v| v.uses_clusters() == u.k.is_some()).collect();
    let split = store::lodo_split(ds, u.held_out);
    let (train, test) = match split {
        Ok(s) => s,
        Err(e) => return fail_all(&variants, u, ks, &e),
    };

    let mut clusters: Option<ClusterModel> = None;
    let mut domain_nmi = None;
    let mut class_nmi = None;
    if let Some(k) = u.k {
        match kmeans_fit(train.psi(), &ClusterConfig::new(k, cluster_seed(u.seed, u.held_out, k))) {
            Ok(c) => {
                // Diagnostics only: labels are compared after clustering is done.
                domain_nmi = train.domain_labels().and_then(|d| metrics::nmi(c.assignments(), d).ok());
                class_nmi = metrics::nmi(c.assignments(), train.class_labels()).ok();
                clusters = Some(c);
            }
            Err(e) => return fail_all(&variants, u, ks, &e),
        }
    }

    let mut out = Vec::new();
    for v in variants {
        let mut tc = v.train_config(&cfg.train);
        tc.seed = train_seed(u.seed, u.held_out);
        let result = classifier::train(train.training_view(), clusters.as_ref(), &tc).and_then(|o| {
            let pred = o.model.predict_rows(test.inputs(), test.psi())?;
            metrics::accuracy(&pred, test.class_labels())
        });
        let (acc, status) = match result {
            Ok(a) => (Some(a), CellStatus::Ok),
            Err(e) => {
                log::warn!("cell {v} held_out={} seed={} k={:?} failed: {e}", u.held_out, u.seed, u.k);
                (None, CellStatus::Failed(e.to_string()))
            }
        };
        let ks_for_cell: Vec<usize> = match u.k {
            Some(k) => vec![k],
            None => ks.to_vec(),
        };
        for k in ks_for_cell {
            out.push(Cell {
                variant: v,
                held_out_domain: u.held_out,
                k,
                seed: u.seed,
                test_accuracy: acc,
                domain_nmi: if v.uses_clusters() { domain_nmi } else { None },
                class_nmi: if v.uses_clusters() { class_nmi } else { None },
                status: status.clone(),
            });
        }
    }
    out
}

fn fail_all(variants: &[Variant], u: &Unit, ks: &[usize], e: &Error) -> Vec<Cell> {
    log::warn!("held_out={} seed={} k={:?} failed: {e}", u.held_out, u.seed, u.k);
    let ks: Vec<usize> = u.k.map_or_else(|| ks.to_vec(), |k| vec![k]);
    variants
        .iter()
        .flat_map(|&v| {
            ks.iter().map(move |&k| Cell {
                variant: v,
                held_out_domain: u.held_out,
                k,
                seed: u.seed,
                test_accuracy: None,
                domain_nmi: None,
                class_nmi: None,
                status: CellStatus::Failed(e.to_string()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let spec = SynthSpec { samples_per_cell: 6, n_domains: 3, n_classes: 2, input_dim: 4, psi_dim: 2, ..SynthSpec::default() };
        ExperimentConfig {
            source: DataSource::Synthetic(spec),
            train: TrainConfig { steps: 30, encoder_hidden: vec![8], phi_dim: 4, ..TrainConfig::default() },
            seeds: vec![5, 6],
            k_values: Some(vec![2, 3]),
            variants: vec![Variant::Erm, Variant::GuideRbf, Variant::GuideNoClustering],
            jobs: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn cell_count_and_order() {
        let r = run_lodo(&tiny()).unwrap();
        // 3 domains x 2 K x 2 seeds x 3 variants
        assert_eq!(r.cells.len(), 36);
        assert!(!r.partial);
        assert_eq!(r.cells[0].variant, Variant::Erm);
        assert_eq!(r.cells.last().unwrap().variant, Variant::GuideNoClustering);
        for c in &r.cells {
            assert_eq!(c.domain_nmi.is_some(), c.variant == Variant::GuideRbf);
        }
        // Cluster-free cells are replicated across K.
        let erm: Vec<_> = r.cells.iter().filter(|c| c.variant == Variant::Erm && c.held_out_domain == 0 && c.seed == 5).collect();
        assert_eq!(erm.len(), 2);
        assert_eq!(erm[0].test_accuracy, erm[1].test_accuracy);
    }

    #[test]
    fn jobs_do_not_change_results() {
        let a = run_lodo(&tiny()).unwrap();
        let b = run_lodo(&ExperimentConfig { jobs: 1, ..tiny() }).unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn oversized_k_fails_cells_not_run() {
        let cfg = ExperimentConfig { k_values: Some(vec![2, 1000]), ..tiny() };
        let r = run_lodo(&cfg).unwrap();
        assert!(r.partial);
        assert!(r.cells.iter().any(|c| c.k == 1000 && c.variant == Variant::GuideRbf && !c.status.is_ok()));
        assert!(r.cells.iter().filter(|c| c.k == 2).all(|c| c.status.is_ok()));
    }

    #[test]
    fn config_round_trip() {
        let cfg = tiny();
        let back = ExperimentConfig::from_config(&cfg.to_config()).unwrap();
        assert_eq!(back, cfg);
        let mut bad = cfg.to_config();
        bad.set("bogus", "1");
        assert!(ExperimentConfig::from_config(&bad).is_err());
        let mut bad = cfg.to_config();
        bad.set("seeds", "");
        assert!(ExperimentConfig::from_config(&bad).is_err());
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("rbf".parse::<Variant>().unwrap(), Variant::GuideRbf);
        assert!("svm".parse::<Variant>().is_err());
    }
}
