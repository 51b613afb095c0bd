use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use super::Variant;
use crate::{Error, Result};

/// Column order of the CSV cell table.
pub const CSV_HEADER: [&str; 8] =
    ["variant", "held_out_domain", "k", "seed", "test_accuracy", "domain_nmi", "class_nmi", "status"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CellStatus {
    Ok,
    Failed(String),
}

impl CellStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, CellStatus::Ok)
    }

    fn label(&self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Failed(_) => "failed",
        }
    }
}

/// One (variant, held-out domain, K, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub variant: Variant,
    pub held_out_domain: usize,
    pub k: usize,
    pub seed: u64,
    pub test_accuracy: Option<f64>,
    /// Agreement of the clustering with the training domains (diagnostic).
    pub domain_nmi: Option<f64>,
    pub class_nmi: Option<f64>,
    pub status: CellStatus,
}

/// Mean and sample std over seeds for one (variant, domain, K).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KAggregate {
    #[serde(serialize_with = "ser_variant")]
    pub variant: Variant,
    pub held_out_domain: usize,
    pub k: usize,
    pub n: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

/// The K with the highest mean test accuracy for one (variant, domain);
/// smallest K on ties.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestK {
    #[serde(serialize_with = "ser_variant")]
    pub variant: Variant,
    pub held_out_domain: usize,
    pub k: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    #[serde(serialize_with = "ser_variant")]
    pub variant: Variant,
    /// Mean over held-out domains of the best-K accuracy.
    pub mean_best_k: Option<f64>,
    /// Mean over held-out domains for each fixed K.
    pub mean_by_k: BTreeMap<usize, f64>,
    /// Mean over every successful cell.
    pub mean_all: Option<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
}

impl VariantSummary {
    pub fn mean_at_k(&self, k: usize) -> Option<f64> {
        self.mean_by_k.get(&k).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub version: String,
    pub selection: &'static str,
    /// Set when at least one cell failed.
    pub partial: bool,
    pub psi_domain_predictability: Option<f64>,
    pub config: BTreeMap<String, String>,
    pub cells: Vec<Cell>,
    pub by_k: Vec<KAggregate>,
    pub best_k: Vec<BestK>,
    pub summary: Vec<VariantSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::invalid(format!("unknown report format {other:?} (csv|json)"))),
        }
    }
}

impl ReportFormat {
    /// Format implied by a file extension; JSON unless the path ends in `.csv`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); `None` below two values.
fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    Some((xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

/// Recompute every aggregate from the cells. `order` fixes the variant order
/// of the summary rows.
pub fn summarize(cells: &[Cell], order: &[Variant]) -> (Vec<KAggregate>, Vec<BestK>, Vec<VariantSummary>) {
    // Accuracies are collected in seed order so sums are independent of
    // cell order up to that permutation.
    let mut groups: BTreeMap<(usize, usize, usize), Vec<(u64, f64)>> = BTreeMap::new();
    let rank = |v: Variant| order.iter().position(|&x| x == v).unwrap_or(usize::MAX);
    for c in cells {
        if let (CellStatus::Ok, Some(a)) = (&c.status, c.test_accuracy) {
            groups.entry((rank(c.variant), c.held_out_domain, c.k)).or_default().push((c.seed, a));
        }
    }
    let mut by_k = Vec::new();
    for ((r, d, k), mut v) in groups {
        v.sort_by_key(|&(s, _)| s);
        let accs: Vec<f64> = v.iter().map(|&(_, a)| a).collect();
        by_k.push(KAggregate { variant: order[r], held_out_domain: d, k, n: accs.len(), mean: mean(&accs), std: sample_std(&accs) });
    }

    let mut best_k: Vec<BestK> = Vec::new();
    for a in &by_k {
        match best_k.last_mut() {
            Some(b) if b.variant == a.variant && b.held_out_domain == a.held_out_domain => {
                if a.mean > b.mean {
                    *b = BestK { variant: a.variant, held_out_domain: a.held_out_domain, k: a.k, mean: a.mean, std: a.std };
                }
            }
            _ => best_k.push(BestK { variant: a.variant, held_out_domain: a.held_out_domain, k: a.k, mean: a.mean, std: a.std }),
        }
    }

    let summary = order
        .iter()
        .map(|&v| {
            let best: Vec<f64> = best_k.iter().filter(|b| b.variant == v).map(|b| b.mean).collect();
            let mut per_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for a in by_k.iter().filter(|a| a.variant == v) {
                per_k.entry(a.k).or_default().push(a.mean);
            }
            let n_domains = best.len();
            let mean_by_k = per_k
                .into_iter()
                .filter(|(_, m)| m.len() == n_domains)
                .map(|(k, m)| (k, mean(&m)))
                .collect();
            let mut all: Vec<(usize, usize, u64, f64)> = cells
                .iter()
                .filter(|c| c.variant == v && c.status.is_ok())
                .filter_map(|c| c.test_accuracy.map(|a| (c.held_out_domain, c.k, c.seed, a)))
                .collect();
            all.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
            let all: Vec<f64> = all.into_iter().map(|t| t.3).collect();
            let n_failed = cells.iter().filter(|c| c.variant == v && !c.status.is_ok()).count();
            VariantSummary {
                variant: v,
                mean_best_k: (!best.is_empty()).then(|| mean(&best)),
                mean_by_k,
                mean_all: (!all.is_empty()).then(|| mean(&all)),
                n_ok: all.len(),
                n_failed,
            }
        })
        .collect();
    (by_k, best_k, summary)
}

impl EvalReport {
    pub fn new(
        cells: Vec<Cell>,
        psi_domain_predictability: Option<f64>,
        config: Vec<(String, String)>,
        order: &[Variant],
    ) -> Self {
        let (by_k, best_k, summary) = summarize(&cells, order);
        Self {
            version: crate::VERSION.to_string(),
            selection: "test-best",
            partial: cells.iter().any(|c| !c.status.is_ok()),
            psi_domain_predictability,
            config: config.into_iter().collect(),
            cells,
            by_k,
            best_k,
            summary,
        }
    }

    pub fn summary_for(&self, v: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == v)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(CSV_HEADER).map_err(io)?;
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        for c in &self.cells {
            w.write_record([
                c.variant.name().to_string(),
                c.held_out_domain.to_string(),
                c.k.to_string(),
                c.seed.to_string(),
                opt(c.test_accuracy),
                opt(c.domain_nmi),
                opt(c.class_nmi),
                c.status.label().to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(format!("csv: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct CellOut<'a> {
            variant: &'static str,
            held_out_domain: usize,
            k: usize,
            seed: u64,
            test_accuracy: Option<f64>,
            domain_nmi: Option<f64>,
            class_nmi: Option<f64>,
            status: &'static str,
            #[serde(skip_serializing_if = "Option::is_none")]
            error: Option<&'a str>,
        }
        #[derive(Serialize)]
        struct Aggregates<'a> {
            by_k: &'a [KAggregate],
            best_k: &'a [BestK],
            variants: &'a [VariantSummary],
        }
        #[derive(Serialize)]
        struct Out<'a> {
            version: &'a str,
            selection: &'a str,
            partial: bool,
            psi_domain_predictability: Option<f64>,
            config: &'a BTreeMap<String, String>,
            cells: Vec<CellOut<'a>>,
            aggregates: Aggregates<'a>,
        }
        let out = Out {
            version: &self.version,
            selection: self.selection,
            partial: self.partial,
            psi_domain_predictability: self.psi_domain_predictability,
            config: &self.config,
            cells: self
                .cells
                .iter()
                .map(|c| CellOut {
                    variant: c.variant.name(),
                    held_out_domain: c.held_out_domain,
                    k: c.k,
                    seed: c.seed,
                    test_accuracy: c.test_accuracy,
                    domain_nmi: c.domain_nmi,
                    class_nmi: c.class_nmi,
                    status: c.status.label(),
                    error: match &c.status {
                        CellStatus::Failed(m) => Some(m.as_str()),
                        CellStatus::Ok => None,
                    },
                })
                .collect(),
            aggregates: Aggregates { by_k: &self.by_k, best_k: &self.best_k, variants: &self.summary },
        };
        let mut s = serde_json::to_string_pretty(&out).map_err(|e| Error::invalid(format!("json: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    /// One row per variant: best-K mean, then the mean at each fixed K.
    pub fn table(&self) -> String {
        let ks: Vec<usize> = {
            let mut ks: Vec<usize> = self.summary.iter().flat_map(|s| s.mean_by_k.keys().copied()).collect();
            ks.sort_unstable();
            ks.dedup();
            ks
        };
        let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut out = format!("{:<22}{:>10}", "variant", "best-K");
        for k in &ks {
            let _ = write!(out, "{:>10}", format!("K={k}"));
        }
        out.push('\n');
        for s in &self.summary {
            let _ = write!(out, "{:<22}{:>10}", s.variant.name(), pct(s.mean_best_k));
            for k in &ks {
                let _ = write!(out, "{:>10}", pct(s.mean_at_k(*k)));
            }
            out.push('\n');
        }
        out
    }
}

fn ser_variant<S: serde::Serializer>(v: &Variant, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(v.name())
}

/// Write the report to `path`; the bytes depend only on the report contents.
pub fn emit_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report.to_csv()?,
        ReportFormat::Json => report.to_json()?,
    };
    std::fs::write(path, text).map_err(|e| Error::io_at(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(v: Variant, d: usize, k: usize, seed: u64, acc: f64) -> Cell {
        Cell {
            variant: v,
            held_out_domain: d,
            k,
            seed,
            test_accuracy: Some(acc),
            domain_nmi: None,
            class_nmi: None,
            status: CellStatus::Ok,
        }
    }

    #[test]
    fn aggregates_by_hand() {
        let cells = vec![
            cell(Variant::GuideRbf, 0, 4, 0, 0.5),
            cell(Variant::GuideRbf, 0, 4, 1, 0.7),
            cell(Variant::GuideRbf, 0, 8, 0, 0.9),
            cell(Variant::GuideRbf, 0, 8, 1, 0.9),
            cell(Variant::GuideRbf, 1, 4, 0, 0.8),
            cell(Variant::GuideRbf, 1, 4, 1, 0.8),
            cell(Variant::GuideRbf, 1, 8, 0, 0.6),
            cell(Variant::GuideRbf, 1, 8, 1, 0.8),
        ];
        let r = EvalReport::new(cells, None, vec![], &[Variant::GuideRbf]);
        assert_eq!(r.by_k.len(), 4);
        assert!((r.by_k[0].mean - 0.6).abs() < 1e-15);
        assert!((r.by_k[0].std.unwrap() - (0.02f64).sqrt()).abs() < 1e-15);
        assert_eq!(r.best_k.iter().map(|b| b.k).collect::<Vec<_>>(), vec![8, 4]);
        let s = r.summary_for(Variant::GuideRbf).unwrap();
        assert!((s.mean_best_k.unwrap() - 0.85).abs() < 1e-15);
        assert!((s.mean_at_k(4).unwrap() - 0.7).abs() < 1e-15);
        assert!((s.mean_at_k(8).unwrap() - 0.8).abs() < 1e-15);
        assert!(!r.partial);
    }

    #[test]
    fn best_k_tie_prefers_smaller_k() {
        let cells = vec![cell(Variant::Erm, 0, 3, 0, 0.5), cell(Variant::Erm, 0, 9, 0, 0.5)];
        let r = EvalReport::new(cells, None, vec![], &[Variant::Erm]);
        assert_eq!(r.best_k[0].k, 3);
        assert_eq!(r.by_k[0].std, None);
    }

    #[test]
    fn failed_cells_are_excluded_and_flagged() {
        let mut bad = cell(Variant::Erm, 0, 3, 1, 0.0);
        bad.test_accuracy = None;
        bad.status = CellStatus::Failed("singular kernel".into());
        let r = EvalReport::new(vec![cell(Variant::Erm, 0, 3, 0, 0.25), bad], None, vec![], &[Variant::Erm]);
        assert!(r.partial);
        let s = r.summary_for(Variant::Erm).unwrap();
        assert_eq!((s.n_ok, s.n_failed), (1, 1));
        assert_eq!(s.mean_all, Some(0.25));
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("variant,held_out_domain,k,seed,test_accuracy,domain_nmi,class_nmi,status\n"));
        assert!(csv.contains("ERM,0,3,1,,,,failed\n"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["cells"][1]["error"], "singular kernel");
        assert_eq!(json["selection"], "test-best");
    }

    #[test]
    fn emit_is_byte_stable() {
        let r = EvalReport::new(vec![cell(Variant::GuideLinear, 2, 5, 7, 1.0 / 3.0)], Some(0.5), vec![("a".into(), "1".into())], &[Variant::GuideLinear]);
        let dir = tempfile::tempdir().unwrap();
        for fmt in [ReportFormat::Csv, ReportFormat::Json] {
            let a = dir.path().join("a");
            let b = dir.path().join("b");
            emit_report(&r, &a, fmt).unwrap();
            emit_report(&r, &b, fmt).unwrap();
            assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        }
        assert_eq!(ReportFormat::from_path(Path::new("x.CSV")), ReportFormat::Csv);
        assert_eq!(ReportFormat::from_path(Path::new("x.json")), ReportFormat::Json);
    }
}
