//! Pseudo-domain discovery: k-means over the frozen `psi` matrix.
//!
//! Clustering runs once per experiment. The resulting [`ClusterModel`] is
//! immutable: training reads the stored assignments, inference looks up the
//! nearest centroid.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;

use crate::matrix::squared_distance;
use crate::seed::{self, Rng};
use crate::store::gft::{self, Dtype};
use crate::{Error, Matrix, Result};

/// Candidate cluster counts `min(m * n_classes, cap)` for each multiplier,
/// sorted and de-duplicated.
pub fn choose_k(n_classes: usize, multipliers: &[usize], cap: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = multipliers.iter().map(|&m| (m * n_classes).min(cap)).collect();
    ks.sort_unstable();
    ks.dedup();
    ks
}

pub const DEFAULT_MULTIPLIERS: [usize; 3] = [1, 3, 5];
pub const DEFAULT_CAP: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop when the relative inertia improvement of one Lloyd step drops below this.
    pub tol: f64,
    pub n_restarts: usize,
    pub seed: u64,
}

impl ClusterConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, max_iter: 100, tol: 1e-6, n_restarts: 10, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::invalid("k must be >= 1"));
        }
        if self.max_iter < 1 {
            return Err(Error::invalid("max_iter must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be > 0"));
        }
        if self.n_restarts < 1 {
            return Err(Error::invalid("n_restarts must be >= 1"));
        }
        Ok(())
    }
}

/// Fitted pseudo-domains: centroids plus the fixed assignment of every
/// training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    centroids: Matrix,
    assignments: Vec<usize>,
    inertia: f64,
    seed: u64,
}

impl ClusterModel {
    /// Assemble a model, checking that every assignment is in range and
    /// every cluster is used.
    pub fn new(centroids: Matrix, assignments: Vec<usize>, inertia: f64, seed: u64) -> Result<Self> {
        let k = centroids.rows();
        let mut used = vec![false; k];
        for &a in &assignments {
            if a >= k {
                return Err(Error::invalid(format!("assignment {a} out of range for k = {k}")));
            }
            used[a] = true;
        }
        if let Some(empty) = used.iter().position(|u| !u) {
            return Err(Error::EmptyCluster(empty));
        }
        if !centroids.is_finite() || !inertia.is_finite() {
            return Err(Error::NonFiniteValue("cluster model"));
        }
        Ok(Self { centroids, assignments, inertia, seed })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        self.centroids.row(k)
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Nearest centroid to `psi` and its Euclidean distance; ties go to the lowest index.
    pub fn assign_nearest(&self, psi: &[f64]) -> Result<(usize, f64)> {
        if psi.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: psi.len() });
        }
        let (k, d2) = nearest(&self.centroids, psi);
        Ok((k, d2.sqrt()))
    }

    /// Histogram of assignments.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(
            w,
            "GUIDE-CLUSTERS v1 k={} dim={} seed={} inertia={}",
            self.k(),
            self.dim(),
            self.seed,
            self.inertia
        )?;
        gft::write_block(w, &self.centroids, Dtype::F64)?;
        let a = Matrix::new(self.assignments.len(), 1, self.assignments.iter().map(|&a| a as f64).collect())?;
        gft::write_block(w, &a, Dtype::F64)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let fields = parse_header(&line, "GUIDE-CLUSTERS", "v1")?;
        let get = |key: &str| -> Result<&str> {
            fields
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::MalformedContainer(format!("cluster header missing `{key}`")))
        };
        let k: usize = parse_field(get("k")?, "k")?;
        let dim: usize = parse_field(get("dim")?, "dim")?;
        let seed: u64 = parse_field(get("seed")?, "seed")?;
        let inertia: f64 = parse_field(get("inertia")?, "inertia")?;
        let centroids = gft::read_block(r)?;
        if centroids.shape() != (k, dim) {
            return Err(Error::MalformedContainer(format!(
                "centroid block is {:?}, header says {k}x{dim}",
                centroids.shape()
            )));
        }
        let a = gft::read_block(r)?;
        if a.cols() != 1 {
            return Err(Error::MalformedContainer("assignment block must have one column".into()));
        }
        let assignments = a
            .as_slice()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::MalformedContainer(format!("bad assignment value {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(centroids, assignments, inertia, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io_at(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io_at(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io_at(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

/// Split a container header line `MAGIC VERSION k=v ...` into its fields.
pub(crate) fn parse_header(line: &str, magic: &str, version: &str) -> Result<Vec<(String, String)>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(magic) {
        return Err(Error::MalformedContainer(format!("expected `{magic}` header, got {:?}", line.trim_end())));
    }
    if parts.next() != Some(version) {
        return Err(Error::MalformedContainer(format!("unsupported {magic} version in {:?}", line.trim_end())));
    }
    parts
        .map(|p| {
            p.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::MalformedContainer(format!("bad header field {p:?}")))
        })
        .collect()
}

pub(crate) fn parse_field<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse().map_err(|_| Error::MalformedContainer(format!("cannot parse header field `{key}` = {v:?}")))
}

/// Index and squared distance of the nearest row of `centroids`; lowest index on ties.
#[inline]
fn nearest(centroids: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter_rows().enumerate() {
        let d = squared_distance(c, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Per-restart record of the inertia after every assignment step.
#[derive(Debug, Clone, Default)]
pub struct FitTrace {
    pub restarts: Vec<Vec<f64>>,
    pub best_restart: usize,
}

/// k-means with k-means++ seeding and Lloyd iterations, best of
/// `n_restarts` by inertia.
pub fn kmeans_fit(x: &Matrix, cfg: &ClusterConfig) -> Result<ClusterModel> {
    kmeans_fit_traced(x, cfg).map(|(m, _)| m)
}

pub fn kmeans_fit_traced(x: &Matrix, cfg: &ClusterConfig) -> Result<(ClusterModel, FitTrace)> {
    cfg.validate()?;
    if x.rows() < cfg.k {
        return Err(Error::TooFewSamples { n: x.rows(), k: cfg.k });
    }
    if !x.is_finite() {
        return Err(Error::NonFiniteValue("clustering input"));
    }
    let mut trace = FitTrace::default();
    let mut best: Option<Lloyd> = None;
    for r in 0..cfg.n_restarts {
        let mut rng = seed::rng(seed::derive(cfg.seed, "kmeans-restart", r as u64));
        let run = lloyd(x, cfg, &mut rng);
        trace.restarts.push(run.history.clone());
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            trace.best_restart = r;
            best = Some(run);
        }
    }
    let best = best.expect("n_restarts >= 1");
    let model = ClusterModel::new(best.centroids, best.assignments, best.inertia, cfg.seed)?;
    Ok((model, trace))
}

struct Lloyd {
    centroids: Matrix,
    assignments: Vec<usize>,
    inertia: f64,
    history: Vec<f64>,
}

fn lloyd(x: &Matrix, cfg: &ClusterConfig, rng: &mut Rng) -> Lloyd {
    let mut centroids = kmeans_plus_plus(x, cfg.k, rng);
    let mut assignments = vec![0; x.rows()];
    let mut dist = vec![0.0; x.rows()];
    let mut inertia = assign_and_repair(x, &mut centroids, &mut assignments, &mut dist);
    let mut history = vec![inertia];

    for _ in 0..cfg.max_iter {
        if inertia == 0.0 {
            break;
        }
        update_centroids(x, &mut centroids, &assignments);
        let next = assign_and_repair(x, &mut centroids, &mut assignments, &mut dist);
        history.push(next);
        let improvement = inertia - next;
        inertia = next;
        if improvement <= cfg.tol * history[history.len() - 2] {
            break;
        }
    }
    Lloyd { centroids, assignments, inertia, history }
}

/// k-means++: first centre uniform, then each next centre drawn with
/// probability proportional to squared distance to the nearest chosen centre.
fn kmeans_plus_plus(x: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = x.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("total > 0 implies a positive weight")
        } else {
            // Every point coincides with a chosen centre; empty-cluster repair sorts it out.
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(x.row(i), x.row(next)));
        }
    }
    x.select_rows(&chosen)
}

fn assign(x: &Matrix, centroids: &Matrix, assignments: &mut [usize], dist: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, row) in x.iter_rows().enumerate() {
        let (k, d) = nearest(centroids, row);
        assignments[i] = k;
        dist[i] = d;
        inertia += d;
    }
    inertia
}

/// Assign every point, then move each empty centroid onto the point farthest
/// from its current centroid (taken from a cluster with at least two members)
/// and reassign, until no cluster is empty. Moving a centroid onto a point
/// never increases any point's nearest distance.
fn assign_and_repair(x: &Matrix, centroids: &mut Matrix, assignments: &mut [usize], dist: &mut [f64]) -> f64 {
    let k = centroids.rows();
    let mut inertia = assign(x, centroids, assignments, dist);
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { break };
        let far = (0..x.rows())
            .filter(|&i| sizes[assignments[i]] > 1)
            .fold(None::<usize>, |best, i| match best {
                Some(b) if dist[b] >= dist[i] => Some(b),
                _ => Some(i),
            })
            .expect("n >= k guarantees a cluster with two members when one is empty");
        centroids.row_mut(empty).copy_from_slice(x.row(far));
        inertia = assign(x, centroids, assignments, dist);
        // Duplicate points can leave the moved centroid tied with (and losing to) a lower index.
        if assignments[far] != empty {
            assignments[far] = empty;
            inertia -= dist[far];
            dist[far] = 0.0;
        }
    }
    inertia
}

fn update_centroids(x: &Matrix, centroids: &mut Matrix, assignments: &[usize]) {
    let (k, d) = centroids.shape();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (row, &a) in x.iter_rows().zip(assignments) {
        counts[a] += 1;
        sums.row_mut(a).iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            centroids.row_mut(c).iter_mut().zip(sums.row(c)).for_each(|(dst, s)| *dst = s / n);
        }
    }
}
