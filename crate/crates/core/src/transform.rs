//! Transformations from the frozen `psi` space into the classifier's feature
//! space, fitted on (pseudo-domain centroid -> cluster mean of encoder
//! features) pairs.
//!
//! Four variants, from weakest to strongest alignment:
//! - `Identity`: the centroid itself (direct concatenation, no alignment).
//! - `ClusterReplace`: the cluster mean of the nearest support.
//! - `Linear`: least-squares affine map.
//! - `RbfKrr`: Gaussian-kernel ridge regression with a median-heuristic bandwidth.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::matrix::squared_distance;
use crate::pseudo_domain::{parse_field, parse_header};
use crate::store::gft::{self, Dtype};
use crate::{Error, Matrix, Result};

/// Default ridge added to the kernel diagonal.
pub const DEFAULT_RIDGE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransformKind {
    Identity,
    ClusterReplace,
    Linear,
    Rbf,
}

impl TransformKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::Identity => "concat",
            TransformKind::ClusterReplace => "replace",
            TransformKind::Linear => "linear",
            TransformKind::Rbf => "rbf",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" | "identity" => Ok(TransformKind::Identity),
            "replace" => Ok(TransformKind::ClusterReplace),
            "linear" => Ok(TransformKind::Linear),
            "rbf" => Ok(TransformKind::Rbf),
            other => Err(Error::invalid(format!("unknown transform variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransformModel {
    Identity {
        dim: usize,
    },
    ClusterReplace {
        supports: Matrix,
        targets: Matrix,
    },
    Linear {
        /// `out_dim x in_dim`
        weight: Matrix,
        bias: Vec<f64>,
    },
    RbfKrr {
        supports: Matrix,
        dual_coefs: Matrix,
        gamma: f64,
        lambda: f64,
        /// Added to every output; the target mean when fit on centred
        /// targets, zeros otherwise.
        offset: Vec<f64>,
    },
}

impl TransformModel {
    pub fn kind(&self) -> TransformKind {
        match self {
            TransformModel::Identity { .. } => TransformKind::Identity,
            TransformModel::ClusterReplace { .. } => TransformKind::ClusterReplace,
            TransformModel::Linear { .. } => TransformKind::Linear,
            TransformModel::RbfKrr { .. } => TransformKind::Rbf,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            TransformModel::Identity { dim } => *dim,
            TransformModel::ClusterReplace { supports, .. } | TransformModel::RbfKrr { supports, .. } => {
                supports.cols()
            }
            TransformModel::Linear { weight, .. } => weight.cols(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            TransformModel::Identity { dim } => *dim,
            TransformModel::ClusterReplace { targets, .. } => targets.cols(),
            TransformModel::Linear { weight, .. } => weight.rows(),
            TransformModel::RbfKrr { dual_coefs, .. } => dual_coefs.cols(),
        }
    }

    pub fn identity(dim: usize) -> Self {
        TransformModel::Identity { dim }
    }

    pub fn apply(&self, psi: &[f64]) -> Result<Vec<f64>> {
        if psi.len() != self.in_dim() {
            return Err(Error::DimensionMismatch { expected: self.in_dim(), actual: psi.len() });
        }
        Ok(match self {
            TransformModel::Identity { .. } => psi.to_vec(),
            TransformModel::ClusterReplace { supports, targets } => {
                let mut best = (0, f64::INFINITY);
                for (k, s) in supports.iter_rows().enumerate() {
                    let d = squared_distance(s, psi);
                    if d < best.1 {
                        best = (k, d);
                    }
                }
                targets.row(best.0).to_vec()
            }
            TransformModel::Linear { weight, bias } => weight
                .iter_rows()
                .zip(bias)
                .map(|(w, b)| w.iter().zip(psi).map(|(a, x)| a * x).sum::<f64>() + b)
                .collect(),
            TransformModel::RbfKrr { supports, dual_coefs, gamma, offset, .. } => {
                let mut out = offset.clone();
                for (k, s) in supports.iter_rows().enumerate() {
                    let w = (-gamma * squared_distance(s, psi)).exp();
                    out.iter_mut().zip(dual_coefs.row(k)).for_each(|(o, a)| *o += w * a);
                }
                out
            }
        })
    }

    /// Apply to every row of `psi`.
    pub fn apply_rows(&self, psi: &Matrix) -> Result<Matrix> {
        let rows = psi.iter_rows().map(|r| self.apply(r)).collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.out_dim()));
        }
        Matrix::from_rows(&rows)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let (gamma, lambda) = match self {
            TransformModel::RbfKrr { gamma, lambda, .. } => (*gamma, *lambda),
            _ => (0.0, 0.0),
        };
        writeln!(
            w,
            "GUIDE-TRANSFORM v1 variant={} gamma={gamma} lambda={lambda} in_dim={} out_dim={}",
            self.kind(),
            self.in_dim(),
            self.out_dim()
        )?;
        match self {
            TransformModel::Identity { .. } => {}
            TransformModel::ClusterReplace { supports, targets } => {
                gft::write_block(w, supports, Dtype::F64)?;
                gft::write_block(w, targets, Dtype::F64)?;
            }
            TransformModel::Linear { weight, bias } => {
                gft::write_block(w, weight, Dtype::F64)?;
                gft::write_block(w, &Matrix::new(1, bias.len(), bias.clone())?, Dtype::F64)?;
            }
            TransformModel::RbfKrr { supports, dual_coefs, offset, .. } => {
                gft::write_block(w, supports, Dtype::F64)?;
                gft::write_block(w, dual_coefs, Dtype::F64)?;
                gft::write_block(w, &Matrix::new(1, offset.len(), offset.clone())?, Dtype::F64)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let fields = parse_header(&line, "GUIDE-TRANSFORM", "v1")?;
        let get = |key: &str| -> Result<&str> {
            fields
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::MalformedContainer(format!("transform header missing `{key}`")))
        };
        let kind: TransformKind = get("variant")?.parse()?;
        let in_dim: usize = parse_field(get("in_dim")?, "in_dim")?;
        let out_dim: usize = parse_field(get("out_dim")?, "out_dim")?;
        let model = match kind {
            TransformKind::Identity => TransformModel::Identity { dim: in_dim },
            TransformKind::ClusterReplace => {
                let supports = gft::read_block(r)?;
                let targets = gft::read_block(r)?;
                TransformModel::ClusterReplace { supports, targets }
            }
            TransformKind::Linear => {
                let weight = gft::read_block(r)?;
                let bias = gft::read_block(r)?.into_vec();
                TransformModel::Linear { weight, bias }
            }
            TransformKind::Rbf => {
                let supports = gft::read_block(r)?;
                let dual_coefs = gft::read_block(r)?;
                let offset = gft::read_block(r)?.into_vec();
                if offset.len() != dual_coefs.cols() {
                    return Err(Error::MalformedContainer("rbf offset width disagrees with coefficients".into()));
                }
                TransformModel::RbfKrr {
                    supports,
                    dual_coefs,
                    offset,
                    gamma: parse_field(get("gamma")?, "gamma")?,
                    lambda: parse_field(get("lambda")?, "lambda")?,
                }
            }
        };
        if model.in_dim() != in_dim || model.out_dim() != out_dim {
            return Err(Error::MalformedContainer("transform blocks disagree with header dims".into()));
        }
        Ok(model)
    }
}

/// Per-cluster means of the encoder features.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiTargets {
    pub means: Matrix,
    pub counts: Vec<usize>,
}

pub fn phi_cluster_means(phi: &Matrix, assignments: &[usize], k: usize) -> Result<PhiTargets> {
    if phi.rows() != assignments.len() {
        return Err(Error::DimensionMismatch { expected: phi.rows(), actual: assignments.len() });
    }
    let mut sums = Matrix::zeros(k, phi.cols());
    let mut counts = vec![0usize; k];
    for (row, &a) in phi.iter_rows().zip(assignments) {
        if a >= k {
            return Err(Error::invalid(format!("assignment {a} out of range for k = {k}")));
        }
        counts[a] += 1;
        sums.row_mut(a).iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyCluster(empty));
    }
    for (c, &n) in counts.iter().enumerate() {
        sums.row_mut(c).iter_mut().for_each(|s| *s /= n as f64);
    }
    Ok(PhiTargets { means: sums, counts })
}

/// Median heuristic: `gamma = 1 / (2 * median^2)` over all pairwise Euclidean
/// distances between supports. Even counts use the midpoint of the two middle values.
pub fn median_gamma(supports: &Matrix) -> Result<f64> {
    let k = supports.rows();
    if k < 2 {
        return Err(Error::invalid("median heuristic needs at least two supports"));
    }
    let mut dists = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            dists.push(squared_distance(supports.row(i), supports.row(j)).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 { dists[m / 2] } else { 0.5 * (dists[m / 2 - 1] + dists[m / 2]) };
    if median <= 0.0 {
        // A zero median with some non-zero distance would give an infinite gamma as well.
        return Err(Error::DegenerateSupports);
    }
    Ok(1.0 / (2.0 * median * median))
}

/// `G_ij = exp(-gamma * |s_i - s_j|^2)`.
pub fn kernel_matrix(supports: &Matrix, gamma: f64) -> Matrix {
    let k = supports.rows();
    Matrix::from_fn(k, k, |i, j| (-gamma * squared_distance(supports.row(i), supports.row(j))).exp())
}

/// Kernel ridge regression: solve `(G + lambda I) alpha = targets` by Cholesky.
///
/// If the factorization fails the ridge is bumped by `1e-8 * trace(G) / K`
/// once and the failure is logged; a second failure is `SingularKernel`.
pub fn fit_rbf(supports: &Matrix, targets: &Matrix, gamma: f64, lambda: f64) -> Result<TransformModel> {
    fit_rbf_with(supports, targets, gamma, lambda, false)
}

/// [`fit_rbf`], optionally on column-centred targets with the mean added back
/// at apply time (so strong ridge shrinks towards the mean rather than zero).
pub fn fit_rbf_with(
    supports: &Matrix,
    targets: &Matrix,
    gamma: f64,
    lambda: f64,
    center_targets: bool,
) -> Result<TransformModel> {
    if supports.rows() != targets.rows() {
        return Err(Error::DimensionMismatch { expected: supports.rows(), actual: targets.rows() });
    }
    if supports.rows() == 0 {
        return Err(Error::invalid("kernel ridge regression needs at least one support"));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be positive and finite, got {gamma}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let k = supports.rows();
    let gram = kernel_matrix(supports, gamma).to_nalgebra();
    let offset = if center_targets { targets.column_means() } else { vec![0.0; targets.cols()] };
    let y = Matrix::from_fn(targets.rows(), targets.cols(), |i, j| targets.get(i, j) - offset[j]).to_nalgebra();

    let solve = |ridge: f64| -> Option<DMatrix<f64>> {
        let a = &gram + DMatrix::identity(k, k) * ridge;
        let chol = a.clone().cholesky()?;
        let mut x = chol.solve(&y);
        // Iterative refinement; the Gram matrix is often badly conditioned at ridge 0.
        for _ in 0..3 {
            let r = &y - &a * &x;
            x += chol.solve(&r);
        }
        x.iter().all(|v| v.is_finite()).then_some(x)
    };
    let (alpha, used) = match solve(lambda) {
        Some(a) => (a, lambda),
        None => {
            let bumped = lambda + 1e-8 * gram.trace() / k as f64;
            log::warn!("kernel solve failed at lambda = {lambda}; retrying with lambda = {bumped}");
            (solve(bumped).ok_or(Error::SingularKernel)?, bumped)
        }
    };
    Ok(TransformModel::RbfKrr {
        supports: supports.clone(),
        dual_coefs: Matrix::from_nalgebra(&alpha),
        gamma,
        lambda: used,
        offset,
    })
}

/// Least-squares affine map with an unpenalized bias. The weight is the
/// minimum-norm solution on centred data, so `K = 1` gives a zero weight and
/// the target as bias.
pub fn fit_linear(supports: &Matrix, targets: &Matrix) -> Result<TransformModel> {
    if supports.rows() != targets.rows() {
        return Err(Error::DimensionMismatch { expected: supports.rows(), actual: targets.rows() });
    }
    if supports.rows() == 0 {
        return Err(Error::invalid("linear fit needs at least one support"));
    }
    let x_mean = supports.column_means();
    let y_mean = targets.column_means();
    let xc = Matrix::from_fn(supports.rows(), supports.cols(), |i, j| supports.get(i, j) - x_mean[j]).to_nalgebra();
    let yc = Matrix::from_fn(targets.rows(), targets.cols(), |i, j| targets.get(i, j) - y_mean[j]).to_nalgebra();

    // coef: in_dim x out_dim
    let coef = if xc.iter().all(|&v| v == 0.0) {
        DMatrix::zeros(supports.cols(), targets.cols())
    } else {
        let svd = xc.svd(true, true);
        let smax = svd.singular_values.max();
        let eps = smax * f64::EPSILON * supports.rows().max(supports.cols()) as f64;
        svd.solve(&yc, eps).map_err(|e| Error::invalid(format!("least-squares solve failed: {e}")))?
    };
    let weight = Matrix::from_nalgebra(&coef.transpose());
    let bias = (0..targets.cols())
        .map(|o| y_mean[o] - (0..supports.cols()).map(|i| weight.get(o, i) * x_mean[i]).sum::<f64>())
        .collect();
    Ok(TransformModel::Linear { weight, bias })
}

pub fn fit_cluster_replace(supports: &Matrix, targets: &Matrix) -> Result<TransformModel> {
    if supports.rows() != targets.rows() {
        return Err(Error::DimensionMismatch { expected: supports.rows(), actual: targets.rows() });
    }
    Ok(TransformModel::ClusterReplace { supports: supports.clone(), targets: targets.clone() })
}

/// Fit the requested variant on `supports -> targets`. For `Rbf` the bandwidth
/// comes from the median heuristic; with a single support every bandwidth
/// gives the same fit at that support, so `gamma = 1` is used.
pub fn fit(kind: TransformKind, supports: &Matrix, targets: &Matrix, ridge: f64) -> Result<TransformModel> {
    fit_with(kind, supports, targets, ridge, false)
}

/// [`fit`] with RBF target centring selectable.
pub fn fit_with(
    kind: TransformKind,
    supports: &Matrix,
    targets: &Matrix,
    ridge: f64,
    center_targets: bool,
) -> Result<TransformModel> {
    match kind {
        TransformKind::Identity => Ok(TransformModel::identity(supports.cols())),
        TransformKind::ClusterReplace => fit_cluster_replace(supports, targets),
        TransformKind::Linear => fit_linear(supports, targets),
        TransformKind::Rbf => {
            let gamma = if supports.rows() == 1 { 1.0 } else { median_gamma(supports)? };
            fit_rbf_with(supports, targets, gamma, ridge, center_targets)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn cluster_means() {
        let phi = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let t = phi_cluster_means(&phi, &[0, 0, 0], 1).unwrap();
        assert_eq!(t.means.row(0), &[3.0, 4.0]);
        assert_eq!(t.counts, vec![3]);

        let phi = m(&[&[0.0, 0.0], &[2.0, 2.0]]);
        let t = phi_cluster_means(&phi, &[0, 1], 2).unwrap();
        assert_eq!(t.means, phi);

        let phi = m(&[&[0.0, 0.0], &[4.0, 0.0], &[0.0, 2.0]]);
        let t = phi_cluster_means(&phi, &[0, 0, 1], 2).unwrap();
        assert_eq!(t.means, m(&[&[2.0, 0.0], &[0.0, 2.0]]));
        assert_eq!(t.counts, vec![2, 1]);

        assert!(matches!(phi_cluster_means(&phi, &[0, 0, 0], 2), Err(Error::EmptyCluster(1))));
        assert!(matches!(phi_cluster_means(&phi, &[0, 0], 1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn median_gamma_examples() {
        assert_eq!(median_gamma(&m(&[&[0.0], &[1.0], &[3.0]])).unwrap(), 0.125);
        assert_eq!(median_gamma(&m(&[&[0.0], &[1.0]])).unwrap(), 0.5);
        assert!(matches!(median_gamma(&m(&[&[2.0], &[2.0], &[2.0]])), Err(Error::DegenerateSupports)));
        // four supports, six distances {1,1,2,2,3,3}... midpoint of the middle pair
        let g = median_gamma(&m(&[&[0.0], &[1.0], &[2.0], &[3.0]])).unwrap();
        let median: f64 = 1.5;
        assert!((g - 1.0 / (2.0 * median * median)).abs() < 1e-15);
    }

    #[test]
    fn single_support_closed_form() {
        let t = fit_rbf(&m(&[&[0.0]]), &m(&[&[2.0]]), 0.7, 0.1).unwrap();
        let TransformModel::RbfKrr { dual_coefs, .. } = &t else { panic!() };
        assert!((dual_coefs.get(0, 0) - 2.0 / 1.1).abs() < 1e-15);
        let y = t.apply(&[0.0]).unwrap();
        assert!((y[0] - 1.818_181_818_181_818).abs() < 1e-12);
    }

    #[test]
    fn exact_interpolation_with_zero_ridge() {
        let s = m(&[&[0.0, 0.0], &[1.0, 0.5], &[-1.0, 2.0], &[3.0, 1.0]]);
        let y = m(&[&[1.0, -1.0, 0.0], &[2.0, 0.0, 5.0], &[0.5, 0.5, 0.5], &[-3.0, 1.0, 2.0]]);
        let gamma = median_gamma(&s).unwrap();
        let t = fit_rbf(&s, &y, gamma, 0.0).unwrap();
        for k in 0..4 {
            let out = t.apply(s.row(k)).unwrap();
            for (a, b) in out.iter().zip(y.row(k)) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn duplicate_supports_with_zero_ridge_fall_back() {
        let s = m(&[&[0.0], &[0.0], &[1.0]]);
        let y = m(&[&[1.0], &[1.0], &[2.0]]);
        let t = fit_rbf(&s, &y, 1.0, 0.0).unwrap();
        let TransformModel::RbfKrr { lambda, .. } = t else { panic!() };
        assert!(lambda > 0.0 && lambda < 1e-7);
    }

    #[test]
    fn linear_fits() {
        // identity recovery, K > d and full rank
        let s = m(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[2.0, 3.0], &[-1.0, 0.5]]);
        let t = fit_linear(&s, &s).unwrap();
        let TransformModel::Linear { weight, bias } = &t else { panic!() };
        for i in 0..2 {
            for j in 0..2 {
                assert!((weight.get(i, j) - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
            assert!(bias[i].abs() < 1e-8);
        }
        // K = 1
        let t = fit_linear(&m(&[&[3.0, -2.0]]), &m(&[&[7.0]])).unwrap();
        let TransformModel::Linear { weight, bias } = &t else { panic!() };
        assert!(weight.as_slice().iter().all(|&w| w == 0.0));
        assert_eq!(bias, &vec![7.0]);
        assert_eq!(t.apply(&[100.0, 5.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn apply_variants() {
        let id = TransformModel::identity(3);
        assert_eq!(id.apply(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let rep = fit_cluster_replace(&m(&[&[0.0], &[10.0]]), &m(&[&[5.0, 5.0], &[7.0, 7.0]])).unwrap();
        assert_eq!(rep.apply(&[1.0]).unwrap(), vec![5.0, 5.0]);
        assert_eq!(rep.apply(&[5.0]).unwrap(), vec![5.0, 5.0]);
        assert!(matches!(rep.apply(&[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
        assert_eq!(rep.out_dim(), 2);
        assert_eq!(id.out_dim(), 3);
    }

    #[test]
    fn container_round_trip() {
        let s = m(&[&[0.0, 1.0], &[1.0, 0.5], &[2.0, 2.0]]);
        let y = m(&[&[1.0], &[2.0], &[0.0]]);
        for t in [
            TransformModel::identity(2),
            fit_cluster_replace(&s, &y).unwrap(),
            fit_linear(&s, &y).unwrap(),
            fit(TransformKind::Rbf, &s, &y, 1e-3).unwrap(),
        ] {
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            assert_eq!(TransformModel::read_from(&mut buf.as_slice()).unwrap(), t);
        }
    }

    #[test]
    fn kind_names() {
        for k in [TransformKind::Identity, TransformKind::ClusterReplace, TransformKind::Linear, TransformKind::Rbf] {
            assert_eq!(k.as_str().parse::<TransformKind>().unwrap(), k);
        }
        assert!("poly".parse::<TransformKind>().is_err());
    }
}
