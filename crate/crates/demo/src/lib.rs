//! WebAssembly bindings for the static page in `www/`.
//!
//! Each export takes plain numbers, returns a JSON string and reports
//! failures as `{"error": "..."}` so the page never has to catch.

use guide_core::harness::{run_lodo, DataSource, ExperimentConfig, Variant};
use guide_core::pseudo_domain::{kmeans_fit, ClusterConfig};
use guide_core::store::{generate_synthetic, SynthSpec};
use guide_core::{metrics, transform, Matrix, Result};
use serde_json::{json, Value};
use wasm_bindgen::prelude::wasm_bindgen;

fn respond(r: Result<Value>) -> String {
    r.unwrap_or_else(|e| json!({ "error": e.to_string() })).to_string()
}

/// Two-dimensional `psi` so the page can scatter it directly.
fn demo_spec(n_domains: usize, snr: f64, seed: u64) -> SynthSpec {
    SynthSpec { n_domains, psi_domain_snr: snr, psi_dim: 2, samples_per_cell: 25, seed, ..SynthSpec::default() }
}

/// Cluster a synthetic `psi` into `k` pseudo-domains and score them against
/// the hidden domain and class labels.
pub fn cluster_json(n_domains: usize, snr: f64, k: usize, seed: u64) -> Result<Value> {
    let ds = generate_synthetic(&demo_spec(n_domains, snr, seed))?;
    let model = kmeans_fit(ds.psi(), &ClusterConfig::new(k, seed))?;
    let domains = ds.domain_labels().expect("synthetic data has domains");
    let points: Vec<Value> = (0..ds.len())
        .map(|i| {
            let p = ds.psi().row(i);
            json!([p[0], p[1], model.assignments()[i], domains[i]])
        })
        .collect();
    let centroids: Vec<&[f64]> = (0..model.k()).map(|c| model.centroid(c)).collect();
    Ok(json!({
        "points": points,
        "centroids": centroids,
        "inertia": model.inertia(),
        "domain_nmi": metrics::nmi(model.assignments(), domains)?,
        "class_nmi": metrics::nmi(model.assignments(), ds.class_labels())?,
    }))
}

/// Fit a 1-D RBF kernel ridge regression through `(xs, ys)` and sample it on
/// a grid spanning the supports. `gamma <= 0` uses the median heuristic.
pub fn krr_json(xs: &[f64], ys: &[f64], lambda: f64, gamma: f64) -> Result<Value> {
    let supports = Matrix::new(xs.len(), 1, xs.to_vec())?;
    let targets = Matrix::new(ys.len(), 1, ys.to_vec())?;
    let gamma = if gamma > 0.0 { gamma } else { transform::median_gamma(&supports)? };
    let model = transform::fit_rbf(&supports, &targets, gamma, lambda)?;
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = 0.15 * (hi - lo).max(1.0);
    let n = 200;
    let mut grid = Vec::with_capacity(n);
    let mut curve = Vec::with_capacity(n);
    for i in 0..n {
        let x = lo - pad + (hi - lo + 2.0 * pad) * i as f64 / (n - 1) as f64;
        grid.push(x);
        curve.push(model.apply(&[x])?[0]);
    }
    Ok(json!({ "gamma": gamma, "grid": grid, "curve": curve }))
}

/// One-seed leave-one-domain-out comparison of ERM and GUIDE-RBF on a small
/// synthetic problem.
pub fn compare_json(shift: f64, steps: usize, seed: u64) -> Result<Value> {
    let mut cfg = ExperimentConfig {
        source: DataSource::Synthetic(SynthSpec { domain_shift_scale: shift, samples_per_cell: 30, seed, ..SynthSpec::default() }),
        seeds: vec![seed],
        variants: vec![Variant::Erm, Variant::GuideRbf],
        k_values: Some(vec![4, 8]),
        jobs: 1,
        ..ExperimentConfig::default()
    };
    cfg.train.steps = steps;
    let report = run_lodo(&cfg)?;
    let rows: Vec<Value> = report
        .best_k
        .iter()
        .map(|b| json!({ "variant": b.variant.name(), "domain": b.held_out_domain, "k": b.k, "accuracy": b.mean }))
        .collect();
    let summary: Vec<Value> =
        report.summary.iter().map(|s| json!({ "variant": s.variant.name(), "best_k": s.mean_best_k })).collect();
    Ok(json!({ "per_domain": rows, "summary": summary }))
}

#[wasm_bindgen]
pub fn cluster(n_domains: usize, snr: f64, k: usize, seed: u32) -> String {
    respond(cluster_json(n_domains, snr, k, seed.into()))
}

#[wasm_bindgen]
pub fn krr(xs: &[f64], ys: &[f64], lambda: f64, gamma: f64) -> String {
    respond(krr_json(xs, ys, lambda, gamma))
}

#[wasm_bindgen]
pub fn compare(shift: f64, steps: usize, seed: u32) -> String {
    respond(compare_json(shift, steps, seed.into()))
}
