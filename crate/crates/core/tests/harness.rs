use std::collections::BTreeMap;

use guide_core::classifier::TrainConfig;
use guide_core::harness::{run_ablation, run_lodo, DataSource, EvalReport, ExperimentConfig, Variant};
use guide_core::store::SynthSpec;

fn small(variants: Vec<Variant>, seeds: Vec<u64>) -> ExperimentConfig {
    let spec = SynthSpec { samples_per_cell: 5, n_domains: 4, n_classes: 2, input_dim: 4, psi_dim: 2, ..SynthSpec::default() };
    ExperimentConfig {
        source: DataSource::Synthetic(spec),
        train: TrainConfig { steps: 12, encoder_hidden: vec![6], phi_dim: 3, ..TrainConfig::default() },
        seeds,
        k_values: Some(vec![2, 3, 4]),
        variants,
        jobs: 1,
        ..ExperimentConfig::default()
    }
}

type Key = (String, usize, usize);

/// Mean and sample std per (variant, domain, k), parsed back from the CSV.
fn aggregates_from_csv(csv_text: &str) -> BTreeMap<Key, (f64, Option<f64>)> {
    let mut groups: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    for rec in rdr.records() {
        let rec = rec.unwrap();
        if &rec[7] != "ok" {
            continue;
        }
        let key = (rec[0].to_string(), rec[1].parse().unwrap(), rec[2].parse().unwrap());
        groups.entry(key).or_default().push(rec[4].parse().unwrap());
    }
    groups
        .into_iter()
        .map(|(k, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.len() > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
            (k, (mean, std))
        })
        .collect()
}

fn report_aggregates(r: &EvalReport) -> BTreeMap<Key, (f64, Option<f64>)> {
    r.by_k.iter().map(|a| ((a.variant.name().to_string(), a.held_out_domain, a.k), (a.mean, a.std))).collect()
}

fn assert_close(a: &BTreeMap<Key, (f64, Option<f64>)>, b: &BTreeMap<Key, (f64, Option<f64>)>) {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, (m, s)) in a {
        let (m2, s2) = b[k];
        assert!((m - m2).abs() < 1e-12, "{k:?} mean {m} vs {m2}");
        match (s, s2) {
            (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12, "{k:?} std {x} vs {y}"),
            (None, None) => {}
            other => panic!("{k:?} std {other:?}"),
        }
    }
}

#[test]
fn lodo_cell_count_and_aggregates() {
    let r = run_lodo(&small(vec![Variant::Erm, Variant::GuideRbf], vec![0, 1, 2])).unwrap();
    assert_eq!(r.cells.len(), 4 * 3 * 3 * 2);
    assert!(!r.partial);
    assert_eq!(r.selection, "test-best");
    let csv_text = r.to_csv().unwrap();
    assert_eq!(csv_text.lines().count(), 73);
    assert_eq!(csv_text.lines().next().unwrap(), "variant,held_out_domain,k,seed,test_accuracy,domain_nmi,class_nmi,status");
    assert_close(&aggregates_from_csv(&csv_text), &report_aggregates(&r));

    // Best K per domain is the argmax of the per-K means, smallest K on ties.
    let agg = report_aggregates(&r);
    for b in &r.best_k {
        let best = agg
            .iter()
            .filter(|((v, d, _), _)| v == b.variant.name() && *d == b.held_out_domain)
            .map(|((_, _, k), (m, _))| (*k, *m))
            .fold(None, |acc: Option<(usize, f64)>, (k, m)| match acc {
                Some((_, bm)) if bm >= m => acc,
                _ => Some((k, m)),
            })
            .unwrap();
        assert_eq!(b.k, best.0);
    }
    for s in &r.summary {
        let rows: Vec<f64> = r.best_k.iter().filter(|b| b.variant == s.variant).map(|b| b.mean).collect();
        let want = rows.iter().sum::<f64>() / rows.len() as f64;
        assert!((s.mean_best_k.unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn erm_cells_carry_no_cluster_diagnostics() {
    let r = run_lodo(&small(vec![Variant::Erm], vec![3])).unwrap();
    assert!(r.cells.iter().all(|c| c.domain_nmi.is_none() && c.class_nmi.is_none()));
    let g = run_lodo(&small(vec![Variant::GuideLinear], vec![3])).unwrap();
    assert!(g.cells.iter().all(|c| c.domain_nmi.is_some() && c.class_nmi.is_some()));
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let cfg = small(vec![Variant::Erm, Variant::GuideRbf], vec![1, 2]);
    let a = run_lodo(&cfg).unwrap();
    let b = run_lodo(&cfg).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
}

#[test]
fn permuting_seeds_leaves_aggregates_unchanged() {
    let a = run_lodo(&small(vec![Variant::Erm, Variant::GuideRbf], vec![4, 5, 6])).unwrap();
    let b = run_lodo(&small(vec![Variant::Erm, Variant::GuideRbf], vec![6, 4, 5])).unwrap();
    assert_close(&report_aggregates(&a), &report_aggregates(&b));
    for (x, y) in a.summary.iter().zip(&b.summary) {
        assert!((x.mean_best_k.unwrap() - y.mean_best_k.unwrap()).abs() < 1e-12);
    }
}

#[test]
fn ablation_rows_follow_the_ladder() {
    let r = run_ablation(&small(vec![Variant::Erm], vec![0])).unwrap();
    let names: Vec<&str> = r.summary.iter().map(|s| s.variant.name()).collect();
    let want: Vec<&str> = Variant::ABLATION.iter().map(|v| v.name()).collect();
    assert_eq!(names, want);
    assert_eq!(r.table().lines().filter(|l| l.starts_with("ERM") || l.starts_with("GUIDE")).count(), 5);
}
