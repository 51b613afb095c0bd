//! Synthetic datasets with a known domain structure.
//!
//! Every sample belongs to a class `c` and a domain `d`:
//!
//! ```text
//! x   = mu_c + shift_scale * M * delta_d + eps_x
//! psi = snr * g(delta_d) + leakage * P * mu_c + eps_psi
//! ```
//!
//! `mu_c` are orthogonal class anchors of norm `class_sep`. The domain codes
//! `delta_d` sit at evenly spaced points on a segment through the origin of a
//! latent space of dimension `psi_dim`, so an interior held-out domain lies
//! between two training domains. `M` maps that segment into the span of the
//! class anchors, which confounds domain shift with class identity for any
//! classifier that cannot see the domain. `g` is the identity or a fixed
//! smooth injective bend.

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::dataset::Dataset;
use crate::config::KvConfig;
use crate::seed::{self, Rng};
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_domains: usize,
    pub samples_per_cell: usize,
    pub input_dim: usize,
    pub psi_dim: usize,
    pub class_sep: f64,
    pub domain_shift_scale: f64,
    pub psi_domain_snr: f64,
    pub psi_class_leakage: f64,
    pub noise_sigma: f64,
    pub nonlinear_domain_map: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 3,
            n_domains: 4,
            samples_per_cell: 10,
            input_dim: 8,
            psi_dim: 4,
            class_sep: 4.0,
            domain_shift_scale: 1.0,
            psi_domain_snr: 3.0,
            psi_class_leakage: 0.0,
            noise_sigma: 0.5,
            nonlinear_domain_map: false,
            seed: 0,
        }
    }
}

pub const SPEC_KEYS: &[&str] = &[
    "profile",
    "n_classes",
    "n_domains",
    "samples_per_cell",
    "input_dim",
    "psi_dim",
    "class_sep",
    "domain_shift_scale",
    "psi_domain_snr",
    "psi_class_leakage",
    "noise_sigma",
    "nonlinear_domain_map",
    "seed",
];

impl SynthSpec {
    /// The fixed benchmark profile: 4 classes, 4 domains, 200 samples per
    /// (class, domain) cell, bent domain map, domain shift large enough that
    /// the per-domain optimal decision boundaries differ.
    pub fn benchmark_v1() -> Self {
        Self {
            n_classes: 4,
            n_domains: 4,
            samples_per_cell: 200,
            input_dim: 8,
            psi_dim: 2,
            class_sep: 3.0,
            domain_shift_scale: 2.0,
            psi_domain_snr: 2.0,
            psi_class_leakage: 0.0,
            noise_sigma: 0.5,
            nonlinear_domain_map: true,
            seed: 2024,
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "benchmark-v1" => Ok(Self::benchmark_v1()),
            other => Err(Error::invalid(format!("unknown synthetic profile {other:?}"))),
        }
    }

    /// Build from config keys on top of an optional `profile` base.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        cfg.reject_unknown(SPEC_KEYS)?;
        let base = match cfg.get_str("profile") {
            Some(p) => Self::profile(p)?,
            None => Self::default(),
        };
        let spec = Self {
            n_classes: cfg.get_or("n_classes", base.n_classes)?,
            n_domains: cfg.get_or("n_domains", base.n_domains)?,
            samples_per_cell: cfg.get_or("samples_per_cell", base.samples_per_cell)?,
            input_dim: cfg.get_or("input_dim", base.input_dim)?,
            psi_dim: cfg.get_or("psi_dim", base.psi_dim)?,
            class_sep: cfg.get_or("class_sep", base.class_sep)?,
            domain_shift_scale: cfg.get_or("domain_shift_scale", base.domain_shift_scale)?,
            psi_domain_snr: cfg.get_or("psi_domain_snr", base.psi_domain_snr)?,
            psi_class_leakage: cfg.get_or("psi_class_leakage", base.psi_class_leakage)?,
            noise_sigma: cfg.get_or("noise_sigma", base.noise_sigma)?,
            nonlinear_domain_map: cfg.get_or("nonlinear_domain_map", base.nonlinear_domain_map)?,
            seed: cfg.get_or("seed", base.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_config(&self) -> KvConfig {
        let mut c = KvConfig::new();
        c.set("n_classes", self.n_classes.to_string());
        c.set("n_domains", self.n_domains.to_string());
        c.set("samples_per_cell", self.samples_per_cell.to_string());
        c.set("input_dim", self.input_dim.to_string());
        c.set("psi_dim", self.psi_dim.to_string());
        c.set("class_sep", self.class_sep.to_string());
        c.set("domain_shift_scale", self.domain_shift_scale.to_string());
        c.set("psi_domain_snr", self.psi_domain_snr.to_string());
        c.set("psi_class_leakage", self.psi_class_leakage.to_string());
        c.set("noise_sigma", self.noise_sigma.to_string());
        c.set("nonlinear_domain_map", self.nonlinear_domain_map.to_string());
        c.set("seed", self.seed.to_string());
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid("synthetic spec: n_classes must be >= 2"));
        }
        if self.n_domains < 2 {
            return Err(Error::invalid("synthetic spec: n_domains must be >= 2"));
        }
        if self.samples_per_cell < 1 {
            return Err(Error::invalid("synthetic spec: samples_per_cell must be >= 1"));
        }
        if self.input_dim < self.n_classes {
            return Err(Error::invalid("synthetic spec: input_dim must be >= n_classes (orthogonal anchors)"));
        }
        if self.psi_dim < 1 {
            return Err(Error::invalid("synthetic spec: psi_dim must be >= 1"));
        }
        let scales = [
            ("class_sep", self.class_sep),
            ("domain_shift_scale", self.domain_shift_scale),
            ("psi_domain_snr", self.psi_domain_snr),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, v) in scales {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("synthetic spec: {name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.psi_class_leakage) {
            return Err(Error::invalid("synthetic spec: psi_class_leakage must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.n_classes * self.n_domains * self.samples_per_cell
    }

    /// The fixed, seed-derived structure behind the generator.
    pub fn latent(&self) -> Result<SynthLatent> {
        self.validate()?;
        let mut rng = seed::rng(seed::derive(self.seed, "synth-structure", 0));

        let anchor_dirs = orthonormal_columns(self.input_dim, self.n_classes, &mut rng);
        let class_anchors = Matrix::from_fn(self.n_classes, self.input_dim, |c, j| {
            anchor_dirs.get(j, c) * self.class_sep
        });

        let direction = unit_vector(self.psi_dim, &mut rng);
        let domain_codes = Matrix::from_fn(self.n_domains, self.psi_dim, |d, j| {
            let t = -1.0 + 2.0 * d as f64 / (self.n_domains - 1) as f64;
            t * direction[j]
        });

        // Domain codes only vary along `direction`, so only M * direction
        // matters. It is sent onto the axis separating classes 0 and 1: a
        // classifier cannot discard the shift without losing that distinction.
        let axis: Vec<f64> =
            (0..self.input_dim).map(|i| (anchor_dirs.get(i, 0) - anchor_dirs.get(i, 1)) / 2f64.sqrt()).collect();
        let shift_map = Matrix::from_fn(self.input_dim, self.psi_dim, |i, j| axis[i] * direction[j]);

        let scale = 1.0 / (self.input_dim as f64).sqrt();
        let leak_map = Matrix::from_fn(self.psi_dim, self.input_dim, |_, _| gaussian(&mut rng) * scale);

        Ok(SynthLatent { class_anchors, domain_codes, shift_map, leak_map, nonlinear: self.nonlinear_domain_map })
    }
}

/// Seed-derived structure of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthLatent {
    /// `C x input_dim`
    pub class_anchors: Matrix,
    /// `D x psi_dim`
    pub domain_codes: Matrix,
    /// `input_dim x psi_dim`
    pub shift_map: Matrix,
    /// `psi_dim x input_dim`
    pub leak_map: Matrix,
    pub nonlinear: bool,
}

impl SynthLatent {
    /// Noise-free input for `(class, domain)`.
    pub fn clean_input(&self, class: usize, domain: usize, shift_scale: f64) -> Vec<f64> {
        let mu = self.class_anchors.row(class);
        let delta = self.domain_codes.row(domain);
        (0..mu.len())
            .map(|i| {
                let shift: f64 = (0..delta.len()).map(|j| self.shift_map.get(i, j) * delta[j]).sum();
                mu[i] + shift_scale * shift
            })
            .collect()
    }

    /// Noise-free `psi` for `(class, domain)`.
    pub fn clean_psi(&self, class: usize, domain: usize, snr: f64, leakage: f64) -> Vec<f64> {
        let mu = self.class_anchors.row(class);
        let g = self.domain_signal(self.domain_codes.row(domain));
        (0..g.len())
            .map(|i| {
                let leak: f64 = (0..mu.len()).map(|j| self.leak_map.get(i, j) * mu[j]).sum();
                snr * g[i] + leakage * leak
            })
            .collect()
    }

    /// `g(delta)`: identity, or `tanh(2v) + v^3 / 4` per coordinate. The
    /// derivative `2 sech^2(2v) + 3v^2/4` is positive, so the bend is strictly
    /// monotone and distinct domains stay distinct.
    pub fn domain_signal(&self, delta: &[f64]) -> Vec<f64> {
        if self.nonlinear {
            delta.iter().map(|&v| (2.0 * v).tanh() + 0.25 * v * v * v).collect()
        } else {
            delta.to_vec()
        }
    }
}

fn gaussian(rng: &mut Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `rows x cols` matrix with orthonormal columns (Gram-Schmidt on Gaussian draws).
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Matrix::from_fn(rows, cols, |i, j| basis[j][i])
}

/// Generate the dataset for `spec`. Rows are ordered by domain, then class,
/// then sample index; ids are `d{domain}-c{class}-{index}`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    let latent = spec.latent()?;
    let mut noise = seed::rng(seed::derive(spec.seed, "synth-noise", 0));
    let n = spec.n_samples();
    let mut inputs = Vec::with_capacity(n * spec.input_dim);
    let mut psi = Vec::with_capacity(n * spec.psi_dim);
    let mut classes = Vec::with_capacity(n);
    let mut domains = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);

    for d in 0..spec.n_domains {
        for c in 0..spec.n_classes {
            let x0 = latent.clean_input(c, d, spec.domain_shift_scale);
            let p0 = latent.clean_psi(c, d, spec.psi_domain_snr, spec.psi_class_leakage);
            for i in 0..spec.samples_per_cell {
                if spec.noise_sigma > 0.0 {
                    inputs.extend(x0.iter().map(|v| v + spec.noise_sigma * gaussian(&mut noise)));
                    psi.extend(p0.iter().map(|v| v + spec.noise_sigma * gaussian(&mut noise)));
                } else {
                    inputs.extend_from_slice(&x0);
                    psi.extend_from_slice(&p0);
                }
                classes.push(c);
                domains.push(d);
                ids.push(format!("d{d}-c{c}-{i}"));
            }
        }
    }
    Dataset::new(
        Matrix::new(n, spec.input_dim, inputs)?,
        Matrix::new(n, spec.psi_dim, psi)?,
        classes,
        Some(domains),
        ids,
        Some(spec.n_classes),
        Some(spec.n_domains),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::squared_distance;

    fn small() -> SynthSpec {
        SynthSpec { n_classes: 3, n_domains: 4, samples_per_cell: 10, ..SynthSpec::default() }
    }

    #[test]
    fn sample_count() {
        let ds = generate_synthetic(&small()).unwrap();
        assert_eq!(ds.len(), 120);
        let doms = ds.domain_labels().unwrap();
        for d in 0..4 {
            assert_eq!(doms.iter().filter(|&&x| x == d).count(), 30);
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.inputs(), c.inputs());
    }

    #[test]
    fn zero_noise_structure() {
        for nonlinear in [false, true] {
            let spec = SynthSpec { noise_sigma: 0.0, psi_class_leakage: 0.0, nonlinear_domain_map: nonlinear, ..small() };
            let ds = generate_synthetic(&spec).unwrap();
            let latent = spec.latent().unwrap();
            let doms = ds.domain_labels().unwrap();
            for i in 0..ds.len() {
                let x = latent.clean_input(ds.class_labels()[i], doms[i], spec.domain_shift_scale);
                assert_eq!(ds.inputs().row(i), x.as_slice());
                for j in 0..ds.len() {
                    let dist = squared_distance(ds.psi().row(i), ds.psi().row(j));
                    if doms[i] == doms[j] {
                        assert_eq!(dist, 0.0);
                    } else {
                        assert!(dist > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn anchors_orthogonal_with_requested_norm() {
        let spec = small();
        let l = spec.latent().unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let d: f64 = l.class_anchors.row(a).iter().zip(l.class_anchors.row(b)).map(|(x, y)| x * y).sum();
                let want = if a == b { spec.class_sep * spec.class_sep } else { 0.0 };
                assert!((d - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invariants_enforced() {
        assert!(generate_synthetic(&SynthSpec { n_domains: 1, ..small() }).is_err());
        assert!(generate_synthetic(&SynthSpec { n_classes: 1, ..small() }).is_err());
        assert!(generate_synthetic(&SynthSpec { psi_class_leakage: 1.5, ..small() }).is_err());
        assert!(generate_synthetic(&SynthSpec { noise_sigma: -1.0, ..small() }).is_err());
    }

    #[test]
    fn config_round_trip() {
        let spec = SynthSpec::benchmark_v1();
        assert_eq!(SynthSpec::from_config(&spec.to_config()).unwrap(), spec);
        let mut cfg = KvConfig::new();
        cfg.set("profile", "benchmark-v1");
        cfg.set("seed", "5");
        let s = SynthSpec::from_config(&cfg).unwrap();
        assert_eq!(s.seed, 5);
        assert_eq!(s.samples_per_cell, 200);
    }
}
