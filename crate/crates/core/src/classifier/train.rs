use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::mlp::Mlp;
use super::{loss_and_grad, Augmentation, EncoderModel, Grads, HeadModel, TrainedModel, Workspace};
use crate::config::KvConfig;
use crate::pseudo_domain::ClusterModel;
use crate::seed;
use crate::store::TrainingView;
use crate::transform::{self, PhiTargets, TransformKind, TransformModel, DEFAULT_RIDGE};
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Erm,
    Guide,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Mode::Erm),
            "guide" => Ok(Mode::Guide),
            other => Err(Error::invalid(format!("unknown mode {other:?} (erm|guide)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Erm => "erm",
            Mode::Guide => "guide",
        })
    }
}

/// Where `psi'` comes from in GUIDE mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiSource {
    /// Transformed centroid of the sample's pseudo-domain.
    Centroid,
    /// The sample's own `psi`, appended as is (no clustering).
    Raw,
}

impl FromStr for PsiSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centroid" => Ok(PsiSource::Centroid),
            "raw" => Ok(PsiSource::Raw),
            other => Err(Error::invalid(format!("unknown psi source {other:?} (centroid|raw)"))),
        }
    }
}

impl fmt::Display for PsiSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PsiSource::Centroid => "centroid",
            PsiSource::Raw => "raw",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::adam()),
            other => Err(Error::invalid(format!("unknown optimizer {other:?} (sgd|adam)"))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam { .. } => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Base of the logarithmic refit schedule.
    pub schedule_base: f64,
    pub mode: Mode,
    pub transform: TransformKind,
    pub psi_source: PsiSource,
    pub ridge: f64,
    /// Fit the RBF transform on centred targets.
    pub rbf_center: bool,
    pub seed: u64,
    /// Pass inputs straight through as `phi` (no encoder parameters).
    pub identity_encoder: bool,
    pub encoder_hidden: Vec<usize>,
    pub phi_dim: usize,
    pub head_hidden: Option<usize>,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            schedule_base: 2.0,
            mode: Mode::Guide,
            transform: TransformKind::Rbf,
            psi_source: PsiSource::Centroid,
            ridge: DEFAULT_RIDGE,
            rbf_center: false,
            seed: 0,
            identity_encoder: false,
            encoder_hidden: vec![32],
            phi_dim: 16,
            head_hidden: None,
            optimizer: Optimizer::Sgd,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "steps",
    "batch_size",
    "learning_rate",
    "weight_decay",
    "schedule_base",
    "mode",
    "variant",
    "psi_source",
    "ridge",
    "rbf_center",
    "seed",
    "identity_encoder",
    "encoder_hidden",
    "phi_dim",
    "head_hidden",
    "optimizer",
];

impl TrainConfig {
    /// Full-scale reference settings: 5001 steps at learning rate 5e-5.
    pub fn reference() -> Self {
        Self { steps: 5001, learning_rate: 5e-5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        if !(self.schedule_base > 1.0) {
            return Err(Error::invalid("schedule_base must be > 1"));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::invalid("ridge must be finite and >= 0"));
        }
        if !self.identity_encoder && self.phi_dim == 0 {
            return Err(Error::invalid("phi_dim must be >= 1"));
        }
        if self.mode == Mode::Guide && self.psi_source == PsiSource::Raw && self.transform != TransformKind::Identity {
            return Err(Error::invalid("raw psi is only appended directly (variant = concat)"));
        }
        Ok(())
    }

    /// Overlay config keys on `self`. Unknown keys are rejected.
    pub fn apply_config(&mut self, cfg: &KvConfig) -> Result<()> {
        cfg.reject_unknown(TRAIN_KEYS)?;
        self.overlay(cfg)
    }

    /// Like [`Self::apply_config`] but ignores keys this config does not own.
    pub fn overlay(&mut self, cfg: &KvConfig) -> Result<()> {
        self.steps = cfg.get_or("steps", self.steps)?;
        self.batch_size = cfg.get_or("batch_size", self.batch_size)?;
        self.learning_rate = cfg.get_or("learning_rate", self.learning_rate)?;
        self.weight_decay = cfg.get_or("weight_decay", self.weight_decay)?;
        self.schedule_base = cfg.get_or("schedule_base", self.schedule_base)?;
        self.mode = cfg.get_or("mode", self.mode)?;
        self.transform = cfg.get_or("variant", self.transform)?;
        self.psi_source = cfg.get_or("psi_source", self.psi_source)?;
        self.ridge = cfg.get_or("ridge", self.ridge)?;
        self.rbf_center = cfg.get_or("rbf_center", self.rbf_center)?;
        self.seed = cfg.get_or("seed", self.seed)?;
        self.identity_encoder = cfg.get_or("identity_encoder", self.identity_encoder)?;
        if let Some(h) = cfg.get_list::<usize>("encoder_hidden")? {
            self.encoder_hidden = h;
        } else if cfg.get_str("encoder_hidden") == Some("") {
            self.encoder_hidden.clear();
        }
        self.phi_dim = cfg.get_or("phi_dim", self.phi_dim)?;
        match cfg.get_str("head_hidden") {
            None => {}
            Some("none") | Some("0") | Some("") => self.head_hidden = None,
            Some(_) => self.head_hidden = cfg.get::<usize>("head_hidden")?,
        }
        self.optimizer = cfg.get_or("optimizer", self.optimizer)?;
        Ok(())
    }

    pub fn to_config(&self) -> KvConfig {
        let mut c = KvConfig::new();
        c.set("steps", self.steps.to_string());
        c.set("batch_size", self.batch_size.to_string());
        c.set("learning_rate", self.learning_rate.to_string());
        c.set("weight_decay", self.weight_decay.to_string());
        c.set("schedule_base", self.schedule_base.to_string());
        c.set("mode", self.mode.to_string());
        c.set("variant", self.transform.to_string());
        c.set("psi_source", self.psi_source.to_string());
        c.set("ridge", self.ridge.to_string());
        c.set("rbf_center", self.rbf_center.to_string());
        c.set("seed", self.seed.to_string());
        c.set("identity_encoder", self.identity_encoder.to_string());
        c.set("encoder_hidden", self.encoder_hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
        c.set("phi_dim", self.phi_dim.to_string());
        c.set("head_hidden", self.head_hidden.map_or("none".to_string(), |h| h.to_string()));
        c.set("optimizer", self.optimizer.to_string());
        c
    }
}

/// Refit steps: `{0} ∪ {ceil(base^k) : ceil(base^k) < total_steps}`, sorted,
/// de-duplicated.
pub fn log_schedule(total_steps: usize, base: f64) -> Vec<usize> {
    assert!(base > 1.0, "schedule base must be > 1");
    let mut out = vec![0];
    let mut power = 1.0f64;
    loop {
        let step = power.ceil();
        if step >= total_steps as f64 {
            break;
        }
        let step = step as usize;
        if out.last() != Some(&step) {
            out.push(step);
        }
        power *= base;
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean batch loss at every step.
    pub losses: Vec<f64>,
    pub refit_steps: Vec<usize>,
    /// Kernel bandwidth chosen at each refit (RBF only).
    pub gammas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub model: TrainedModel,
    pub history: TrainHistory,
}

impl TrainOutput {
    pub fn encoder(&self) -> &EncoderModel {
        &self.model.encoder
    }

    pub fn head(&self) -> &HeadModel {
        &self.model.head
    }

    pub fn transform(&self) -> Option<&TransformModel> {
        match &self.model.augmentation {
            Augmentation::None => None,
            Augmentation::Centroid { transform, .. } | Augmentation::Raw { transform } => Some(transform),
        }
    }
}

/// State handed to a refit observer right after the transformation is refit.
pub struct RefitEvent<'a> {
    pub step: usize,
    pub encoder: &'a EncoderModel,
    pub targets: &'a PhiTargets,
    pub transform: &'a TransformModel,
}

pub fn train(view: TrainingView<'_>, clusters: Option<&ClusterModel>, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_observed(view, clusters, cfg, &mut |_| {})
}

/// The training loop.
///
/// GUIDE with centroid `psi'`: at every step of the logarithmic schedule the
/// cluster means of the current encoder features are recomputed and the
/// transformation is refit on `centroid_k -> mean_k`; between refits each
/// sample's `psi'` is the transformed centroid of its stored cluster. The
/// encoder and head are updated by minibatch cross-entropy. ERM skips the
/// augmentation entirely.
pub fn train_observed(
    view: TrainingView<'_>,
    clusters: Option<&ClusterModel>,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&RefitEvent<'_>),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let n = view.len();
    if n == 0 {
        return Err(Error::invalid("empty training set"));
    }
    if view.inputs.rows() != n || view.psi.rows() != n {
        return Err(Error::RowCountMismatch { what: "training view rows disagree".into() });
    }
    if let Some(&bad) = view.class_labels.iter().find(|&&c| c >= view.n_classes) {
        return Err(Error::invalid(format!("class label {bad} >= n_classes {}", view.n_classes)));
    }
    let centroid_mode = cfg.mode == Mode::Guide && cfg.psi_source == PsiSource::Centroid;
    let clusters = if centroid_mode {
        let c = clusters.ok_or_else(|| Error::invalid("GUIDE training needs a cluster model"))?;
        if c.assignments().len() != n {
            return Err(Error::RowCountMismatch {
                what: format!("cluster model has {} assignments, training set has {n} rows", c.assignments().len()),
            });
        }
        if c.dim() != view.psi.cols() {
            return Err(Error::DimensionMismatch { expected: view.psi.cols(), actual: c.dim() });
        }
        Some(c)
    } else {
        None
    };

    let mut init_rng = seed::rng(seed::derive(cfg.seed, "train-init", 0));
    let d_in = view.inputs.cols();
    let mut encoder = if cfg.identity_encoder {
        EncoderModel::Identity { dim: d_in }
    } else {
        let widths: Vec<usize> =
            std::iter::once(d_in).chain(cfg.encoder_hidden.iter().copied()).chain([cfg.phi_dim]).collect();
        EncoderModel::mlp(&widths, &mut init_rng)
    };
    let phi_dim = encoder.output_dim();
    let aug_dim = match (cfg.mode, cfg.transform) {
        (Mode::Erm, _) => None,
        (Mode::Guide, TransformKind::Identity) => Some(view.psi.cols()),
        (Mode::Guide, _) => Some(phi_dim),
    };
    let mut head = HeadModel::new(phi_dim, aug_dim, view.n_classes, cfg.head_hidden, &mut init_rng);

    let schedule = if centroid_mode { log_schedule(cfg.steps, cfg.schedule_base) } else { Vec::new() };
    let mut next_refit = 0;
    let mut transform: Option<TransformModel> = match (cfg.mode, cfg.psi_source) {
        (Mode::Guide, PsiSource::Raw) => Some(TransformModel::identity(view.psi.cols())),
        _ => None,
    };
    // psi' per cluster (centroid mode).
    let mut aug_table: Option<Matrix> = None;

    let mut history = TrainHistory::default();
    let mut grads = Grads::zeros_like(&encoder, &head);
    let mut adam = AdamState::new(&encoder, &head);
    let mut ws = Workspace::default();
    let mut batch_rng = seed::rng(seed::derive(cfg.seed, "train-batches", 0));
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let bs = cfg.batch_size.min(n);

    for step in 0..cfg.steps {
        if let Some(c) = clusters {
            if schedule.get(next_refit) == Some(&step) {
                next_refit += 1;
                let phi = encode_rows(&encoder, view.inputs)?;
                let targets = transform::phi_cluster_means(&phi, c.assignments(), c.k())?;
                let t = transform::fit_with(cfg.transform, c.centroids(), &targets.means, cfg.ridge, cfg.rbf_center)?;
                if let TransformModel::RbfKrr { gamma, .. } = &t {
                    history.gammas.push(*gamma);
                }
                aug_table = Some(t.apply_rows(c.centroids())?);
                history.refit_steps.push(step);
                observer(&RefitEvent { step, encoder: &encoder, targets: &targets, transform: &t });
                transform = Some(t);
            }
        }

        grads.clear();
        let mut loss_sum = 0.0;
        let scale = 1.0 / bs as f64;
        for _ in 0..bs {
            if cursor == n {
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let pp: Option<&[f64]> = match (cfg.mode, cfg.psi_source) {
                (Mode::Erm, _) => None,
                (Mode::Guide, PsiSource::Centroid) => {
                    let table = aug_table.as_ref().expect("refit at step 0");
                    Some(table.row(clusters.expect("centroid mode").assignments()[i]))
                }
                (Mode::Guide, PsiSource::Raw) => Some(view.psi.row(i)),
            };
            loss_sum += loss_and_grad(&encoder, &head, view.inputs.row(i), pp, view.class_labels[i], &mut grads, scale, &mut ws)?;
        }
        let loss = loss_sum / bs as f64;
        if !loss.is_finite() {
            return Err(Error::DivergedLoss(step));
        }
        history.losses.push(loss);
        adam.step(cfg, &mut encoder, &mut head, &grads);
        if !(head.net.is_finite() && encoder.net().is_none_or(Mlp::is_finite)) {
            return Err(Error::DivergedLoss(step));
        }
    }

    let augmentation = match (cfg.mode, cfg.psi_source) {
        (Mode::Erm, _) => Augmentation::None,
        (Mode::Guide, PsiSource::Centroid) => Augmentation::Centroid {
            clusters: clusters.expect("centroid mode").clone(),
            transform: transform.expect("refit at step 0"),
        },
        (Mode::Guide, PsiSource::Raw) => Augmentation::Raw { transform: transform.expect("identity transform") },
    };
    Ok(TrainOutput { model: TrainedModel { encoder, head, augmentation }, history })
}

fn encode_rows(encoder: &EncoderModel, inputs: &Matrix) -> Result<Matrix> {
    let d = encoder.output_dim();
    let mut data = Vec::with_capacity(inputs.rows() * d);
    for r in inputs.iter_rows() {
        data.extend(encoder.forward(r));
    }
    Matrix::new(inputs.rows(), d, data)
}

/// Parameter update for either optimizer. For SGD this is
/// `p <- p - lr (g + wd p)`; Adam keeps first/second moment estimates.
struct AdamState {
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    fn new(enc: &EncoderModel, head: &HeadModel) -> Self {
        let mut sizes = Vec::new();
        if let Some(net) = enc.net() {
            sizes.extend(net.layers().iter().flat_map(|l| [l.weight.as_slice().len(), l.bias.len()]));
        }
        sizes.extend(head.net.layers().iter().flat_map(|l| [l.weight.as_slice().len(), l.bias.len()]));
        Self { t: 0, m: sizes.iter().map(|&s| vec![0.0; s]).collect(), v: sizes.iter().map(|&s| vec![0.0; s]).collect() }
    }

    fn step(&mut self, cfg: &TrainConfig, enc: &mut EncoderModel, head: &mut HeadModel, grads: &Grads) {
        let mut params: Vec<&mut [f64]> = Vec::new();
        let mut gs: Vec<&[f64]> = Vec::new();
        if let (Some(net), Some(g)) = (enc.net_mut(), grads.encoder.as_ref()) {
            params.extend(net.tensors_mut());
            gs.extend(g.tensors());
        }
        params.extend(head.net.tensors_mut());
        gs.extend(grads.head.tensors());

        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.into_iter().zip(gs) {
                    super::mlp::sgd_step(p, g, cfg.learning_rate, cfg.weight_decay);
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, g), m), v) in params.into_iter().zip(gs).zip(&mut self.m).zip(&mut self.v) {
                    for j in 0..p.len() {
                        let gj = g[j] + cfg.weight_decay * p[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        p[j] -= cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(log_schedule(20, 2.0), vec![0, 1, 2, 4, 8, 16]);
        assert_eq!(log_schedule(1, 2.0), vec![0]);
        assert_eq!(log_schedule(1, 1.5), vec![0]);
        assert_eq!(log_schedule(2, 2.0), vec![0, 1]);
        for base in [1.1, 1.5, 2.0, 3.0, 10.0] {
            let s = log_schedule(5001, base);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            assert!(*s.last().unwrap() < 5001);
        }
        // Ceiling rounding only keeps gaps monotone for integer bases.
        for base in [2.0, 3.0, 10.0] {
            let s = log_schedule(5001, base);
            let gaps: Vec<usize> = s.windows(2).map(|w| w[1] - w[0]).collect();
            assert!(gaps.windows(2).all(|g| g[0] <= g[1]), "base {base}: {gaps:?}");
        }
        let s = log_schedule(100, 1.1);
        let gaps: Vec<usize> = s.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(gaps.windows(2).any(|g| g[0] > g[1]));
    }

    #[test]
    fn config_round_trip() {
        let cfg = TrainConfig { head_hidden: Some(8), encoder_hidden: vec![4, 5], optimizer: Optimizer::adam(), ..TrainConfig::default() };
        let mut back = TrainConfig::default();
        back.apply_config(&cfg.to_config()).unwrap();
        assert_eq!(back, cfg);
        let mut bad = KvConfig::new();
        bad.set("stepz", "3");
        assert!(TrainConfig::default().apply_config(&bad).is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { schedule_base: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { psi_source: PsiSource::Raw, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { psi_source: PsiSource::Raw, transform: TransformKind::Identity, ..TrainConfig::default() }
            .validate()
            .is_ok());
    }
}
