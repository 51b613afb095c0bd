//! Label-agreement metrics (natural log throughout) and the
//! domain-predictability probe.

use std::collections::HashMap;

use crate::classifier::cross_entropy_grad;
use crate::classifier::mlp::{Mlp, MlpGrads, Scratch};
use crate::seed;
use crate::{Error, Matrix, Result};

use rand::seq::SliceRandom;

fn counts(labels: &[usize]) -> HashMap<usize, usize> {
    let mut c = HashMap::new();
    for &l in labels {
        *c.entry(l).or_insert(0) += 1;
    }
    c
}

/// Empirical entropy `-sum p ln p`.
pub fn entropy(labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let n = labels.len() as f64;
    let mut cs: Vec<usize> = counts(labels).into_values().collect();
    cs.sort_unstable();
    -cs.iter().map(|&c| c as f64 / n).map(|p| p * p.ln()).sum::<f64>()
}

/// Empirical mutual information over the joint table; empty cells contribute 0.
pub fn mutual_information(u: &[usize], v: &[usize]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch(u.len(), v.len()));
    }
    if u.is_empty() {
        return Ok(0.0);
    }
    let n = u.len() as f64;
    let cu = counts(u);
    let cv = counts(v);
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    for (&a, &b) in u.iter().zip(v) {
        *joint.entry((a, b)).or_insert(0) += 1;
    }
    let mut terms: Vec<f64> = joint
        .into_iter()
        .map(|((a, b), c)| {
            let pab = c as f64 / n;
            // p(a,b) / (p(a) p(b)) = c * n / (c_a * c_b)
            pab * (c as f64 * n / (cu[&a] as f64 * cv[&b] as f64)).ln()
        })
        .collect();
    // Summing in value order makes the result exactly symmetric in (u, v).
    terms.sort_unstable_by(f64::total_cmp);
    let mi: f64 = terms.iter().sum();
    Ok(mi.max(0.0))
}

/// `2 I(U,V) / (H(U) + H(V))`. Two constant labelings score 1; exactly one
/// constant labeling scores 0.
pub fn nmi(u: &[usize], v: &[usize]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch(u.len(), v.len()));
    }
    let hu = entropy(u);
    let hv = entropy(v);
    match (hu == 0.0, hv == 0.0) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let i = mutual_information(u, v)?;
    Ok((2.0 * i / (hu + hv)).clamp(0.0, 1.0))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::invalid("accuracy of an empty labeling"));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Settings for the domain-predictability probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub n_splits: usize,
    pub train_frac: f64,
    /// Hidden width; 0 gives a linear probe.
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { n_splits: 3, train_frac: 0.8, hidden: 256, steps: 600, batch_size: 64, learning_rate: 0.05, seed: 0 }
    }
}

/// Per-split test accuracies of the probe and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub split_accuracies: Vec<f64>,
    pub mean: f64,
}

/// Mean held-out accuracy of a small MLP trained to predict domain labels from
/// `features`, over `n_splits` seeded random train/test splits. Features are
/// standardized with statistics from each training split.
pub fn domain_predictability(features: &Matrix, domains: Option<&[usize]>, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let domains = domains.ok_or(Error::MissingDomainLabels)?;
    let n = features.rows();
    if domains.len() != n {
        return Err(Error::LengthMismatch(n, domains.len()));
    }
    if n < 5 {
        return Err(Error::invalid("domain predictability needs at least 5 samples"));
    }
    if !(cfg.train_frac > 0.0 && cfg.train_frac < 1.0) || cfg.n_splits == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("probe config: need 0 < train_frac < 1, n_splits >= 1, batch_size >= 1"));
    }
    let n_out = domains.iter().max().map_or(1, |m| m + 1);
    let n_train = ((n as f64) * cfg.train_frac).round().clamp(1.0, (n - 1) as f64) as usize;

    let mut accs = Vec::with_capacity(cfg.n_splits);
    for split in 0..cfg.n_splits {
        let mut rng = seed::rng(seed::derive(cfg.seed, "probe-split", split as u64));
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let (train, test) = idx.split_at(n_train);

        let (mean, std) = column_stats(features, train);
        let standardize = |i: usize| -> Vec<f64> {
            features.row(i).iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect()
        };
        let xtr: Vec<Vec<f64>> = train.iter().map(|&i| standardize(i)).collect();
        let ytr: Vec<usize> = train.iter().map(|&i| domains[i]).collect();

        let widths: Vec<usize> = if cfg.hidden == 0 {
            vec![features.cols(), n_out]
        } else {
            vec![features.cols(), cfg.hidden, n_out]
        };
        let mut net = Mlp::new(&widths, &mut seed::rng(seed::derive(cfg.seed, "probe-init", split as u64)));
        let mut grads = MlpGrads::zeros_like(&net);
        let mut scratch = Scratch::default();
        let mut order: Vec<usize> = (0..xtr.len()).collect();
        let mut cursor = order.len();
        let mut batch_rng = seed::rng(seed::derive(cfg.seed, "probe-batches", split as u64));
        for _ in 0..cfg.steps {
            grads.clear();
            let bs = cfg.batch_size.min(order.len());
            for _ in 0..bs {
                if cursor == order.len() {
                    order.shuffle(&mut batch_rng);
                    cursor = 0;
                }
                let i = order[cursor];
                cursor += 1;
                let logits = net.forward_cached(&xtr[i], &mut scratch);
                let (_, dlogits) = cross_entropy_grad(&logits, ytr[i]);
                net.backward(&scratch, &dlogits, &mut grads, 1.0 / bs as f64);
            }
            net.sgd_step(&grads, cfg.learning_rate, 0.0);
        }
        let hits = test
            .iter()
            .filter(|&&i| crate::classifier::argmax(&net.forward(&standardize(i))) == domains[i])
            .count();
        accs.push(hits as f64 / test.len() as f64);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    Ok(ProbeResult { split_accuracies: accs, mean })
}

fn column_stats(x: &Matrix, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in rows {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for &i in rows {
        var.iter_mut().zip(x.row(i)).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
    }
    let std = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[3, 3, 3]), 0.0);
        assert!((entropy(&[0, 1, 0, 1]) - 2f64.ln()).abs() < 1e-15);
        let want = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((entropy(&[0, 0, 0, 1]) - want).abs() < 1e-15);
        assert!((entropy(&[0, 0, 0, 1]) - 0.562_335).abs() < 1e-6);
    }

    #[test]
    fn mutual_information_examples() {
        let u = [0, 1, 2, 2, 1, 0, 0];
        assert!((mutual_information(&u, &u).unwrap() - entropy(&u)).abs() < 1e-12);
        assert!(mutual_information(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap().abs() < 1e-15);
        assert!((mutual_information(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(mutual_information(&[0], &[0, 1]), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(), 1.0);
        assert!(nmi(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap().abs() < 1e-15);
        assert_eq!(nmi(&[1, 1, 1], &[0, 0, 0]).unwrap(), 1.0);
        assert_eq!(nmi(&[1, 1, 1], &[0, 1, 0]).unwrap(), 0.0);

        // U=(0,0,1,1,2,2), V=(0,0,0,1,1,1): joint cells (0,0)=2 (1,0)=1 (1,1)=1 (2,1)=2 out of 6.
        let i = (2.0 / 6.0) * (2.0f64 * 6.0 / (2.0 * 3.0)).ln() * 2.0 + (1.0 / 6.0) * (6.0f64 / (2.0 * 3.0)).ln() * 2.0;
        let hu = 3f64.ln();
        let hv = 2f64.ln();
        let want = 2.0 * i / (hu + hv);
        let got = nmi(&[0, 0, 1, 1, 2, 2], &[0, 0, 0, 1, 1, 1]).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn probe_needs_domains() {
        let x = Matrix::zeros(10, 2);
        assert!(matches!(domain_predictability(&x, None, &ProbeConfig::default()), Err(Error::MissingDomainLabels)));
    }

    #[test]
    fn probe_one_hot_is_perfect() {
        let n = 80;
        let domains: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let x = Matrix::from_fn(n, 4, |i, j| if domains[i] == j { 1.0 } else { 0.0 });
        let cfg = ProbeConfig { steps: 200, ..ProbeConfig::default() };
        let r = domain_predictability(&x, Some(&domains), &cfg).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.split_accuracies.len(), 3);
    }
}
