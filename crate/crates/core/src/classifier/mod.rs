//! The domain-adaptive classifier: an encoder producing `phi(x)`, a head over
//! `[phi(x), psi']`, the training loop and the inference path.

mod bundle;
pub mod mlp;
mod train;

pub use bundle::Bundle;
pub use train::{log_schedule, train, train_observed, Mode, Optimizer, PsiSource, RefitEvent, TrainConfig, TrainHistory, TrainOutput};

use mlp::{Mlp, MlpGrads, Scratch};

use crate::pseudo_domain::ClusterModel;
use crate::seed::Rng;
use crate::transform::TransformModel;
use crate::{Error, Result};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// `-log softmax(logits)[y]` with max-subtraction.
pub fn cross_entropy_loss(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    (lse - logits[y]).max(0.0)
}

/// Loss and its gradient with respect to the logits (`softmax - onehot`).
pub fn cross_entropy_grad(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let mut p = softmax(logits);
    let loss = cross_entropy_loss(logits, y);
    p[y] -= 1.0;
    (loss, p)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// The feature extractor `phi`. `Identity` passes raw inputs through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderModel {
    Identity { dim: usize },
    Mlp(Mlp),
}

impl EncoderModel {
    /// `widths = [d_in, hidden..., d_phi]`.
    pub fn mlp(widths: &[usize], rng: &mut Rng) -> Self {
        EncoderModel::Mlp(Mlp::new(widths, rng))
    }

    pub fn input_dim(&self) -> usize {
        match self {
            EncoderModel::Identity { dim } => *dim,
            EncoderModel::Mlp(m) => m.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            EncoderModel::Identity { dim } => *dim,
            EncoderModel::Mlp(m) => m.output_dim(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        match self {
            EncoderModel::Identity { .. } => x.to_vec(),
            EncoderModel::Mlp(m) => m.forward(x),
        }
    }

    fn forward_cached(&self, x: &[f64], scratch: &mut Scratch) -> Vec<f64> {
        match self {
            EncoderModel::Identity { .. } => x.to_vec(),
            EncoderModel::Mlp(m) => m.forward_cached(x, scratch),
        }
    }

    pub fn net(&self) -> Option<&Mlp> {
        match self {
            EncoderModel::Identity { .. } => None,
            EncoderModel::Mlp(m) => Some(m),
        }
    }

    pub fn net_mut(&mut self) -> Option<&mut Mlp> {
        match self {
            EncoderModel::Identity { .. } => None,
            EncoderModel::Mlp(m) => Some(m),
        }
    }
}

/// Classification head over `[phi(x), psi']`. `aug_dim` is `None` for ERM
/// (no augmentation input at all) and `Some(width of psi')` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    pub net: Mlp,
    pub phi_dim: usize,
    pub aug_dim: Option<usize>,
}

impl HeadModel {
    /// Linear head (`hidden = None`) or one hidden ReLU layer.
    pub fn new(phi_dim: usize, aug_dim: Option<usize>, n_classes: usize, hidden: Option<usize>, rng: &mut Rng) -> Self {
        let widths = head_widths(phi_dim, aug_dim, n_classes, hidden);
        Self { net: Mlp::new(&widths, rng), phi_dim, aug_dim }
    }

    pub fn zeros(phi_dim: usize, aug_dim: Option<usize>, n_classes: usize) -> Self {
        let widths = head_widths(phi_dim, aug_dim, n_classes, None);
        Self { net: Mlp::zeros(&widths), phi_dim, aug_dim }
    }

    pub fn from_net(net: Mlp, phi_dim: usize, aug_dim: Option<usize>) -> Result<Self> {
        let want = phi_dim + aug_dim.unwrap_or(0);
        if net.input_dim() != want {
            return Err(Error::WidthMismatch { expected: want.to_string(), actual: net.input_dim().to_string() });
        }
        Ok(Self { net, phi_dim, aug_dim })
    }

    pub fn n_classes(&self) -> usize {
        self.net.output_dim()
    }

    fn concat(&self, phi: &[f64], psi_prime: Option<&[f64]>) -> Result<Vec<f64>> {
        if phi.len() != self.phi_dim {
            return Err(Error::WidthMismatch { expected: format!("phi width {}", self.phi_dim), actual: phi.len().to_string() });
        }
        match (self.aug_dim, psi_prime) {
            (None, None) => Ok(phi.to_vec()),
            (Some(d), Some(p)) if p.len() == d => {
                let mut z = Vec::with_capacity(phi.len() + d);
                z.extend_from_slice(phi);
                z.extend_from_slice(p);
                Ok(z)
            }
            (None, Some(p)) => Err(Error::WidthMismatch {
                expected: "no psi' (ERM head)".into(),
                actual: format!("psi' of width {}", p.len()),
            }),
            (Some(d), None) => Err(Error::WidthMismatch { expected: format!("psi' of width {d}"), actual: "none".into() }),
            (Some(d), Some(p)) => Err(Error::WidthMismatch { expected: format!("psi' of width {d}"), actual: p.len().to_string() }),
        }
    }
}

fn head_widths(phi_dim: usize, aug_dim: Option<usize>, n_classes: usize, hidden: Option<usize>) -> Vec<usize> {
    let input = phi_dim + aug_dim.unwrap_or(0);
    match hidden {
        Some(h) => vec![input, h, n_classes],
        None => vec![input, n_classes],
    }
}

/// `logits = head([encoder(x), psi'])`, or `head(encoder(x))` for an ERM head.
pub fn forward(enc: &EncoderModel, head: &HeadModel, x: &[f64], psi_prime: Option<&[f64]>) -> Result<Vec<f64>> {
    if x.len() != enc.input_dim() {
        return Err(Error::WidthMismatch { expected: format!("input width {}", enc.input_dim()), actual: x.len().to_string() });
    }
    let z = head.concat(&enc.forward(x), psi_prime)?;
    Ok(head.net.forward(&z))
}

/// Gradients of the encoder and head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub encoder: Option<MlpGrads>,
    pub head: MlpGrads,
}

impl Grads {
    pub fn zeros_like(enc: &EncoderModel, head: &HeadModel) -> Self {
        Self { encoder: enc.net().map(MlpGrads::zeros_like), head: MlpGrads::zeros_like(&head.net) }
    }

    pub fn clear(&mut self) {
        if let Some(g) = &mut self.encoder {
            g.clear();
        }
        self.head.clear();
    }
}

/// Reusable activation buffers for [`loss_and_grad`].
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    enc: Scratch,
    head: Scratch,
}

/// Cross-entropy of one sample; accumulates `scale * gradient` into `grads`.
/// `psi_prime` is treated as a constant input.
pub fn loss_and_grad(
    enc: &EncoderModel,
    head: &HeadModel,
    x: &[f64],
    psi_prime: Option<&[f64]>,
    y: usize,
    grads: &mut Grads,
    scale: f64,
    ws: &mut Workspace,
) -> Result<f64> {
    let phi = enc.forward_cached(x, &mut ws.enc);
    let z = head.concat(&phi, psi_prime)?;
    let logits = head.net.forward_cached(&z, &mut ws.head);
    let (loss, dlogits) = cross_entropy_grad(&logits, y);
    let dz = head.net.backward(&ws.head, &dlogits, &mut grads.head, scale);
    if let (EncoderModel::Mlp(m), Some(g)) = (enc, grads.encoder.as_mut()) {
        m.backward(&ws.enc, &dz[..head.phi_dim], g, scale);
    }
    Ok(loss)
}

/// How the augmentation input is produced at inference.
#[derive(Debug, Clone, PartialEq)]
pub enum Augmentation {
    /// ERM: no augmentation.
    None,
    /// `psi' = T(centroid of the nearest pseudo-domain)`.
    Centroid { clusters: ClusterModel, transform: TransformModel },
    /// `psi' = T(psi_x)` directly, no clustering.
    Raw { transform: TransformModel },
}

/// Everything needed for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub encoder: EncoderModel,
    pub head: HeadModel,
    pub augmentation: Augmentation,
}

impl TrainedModel {
    /// `psi'` for a sample with frozen features `psi_x`.
    pub fn psi_prime(&self, psi_x: &[f64]) -> Result<Option<Vec<f64>>> {
        match &self.augmentation {
            Augmentation::None => Ok(None),
            Augmentation::Centroid { clusters, transform } => {
                let (k, _) = clusters.assign_nearest(psi_x)?;
                transform.apply(clusters.centroid(k)).map(Some)
            }
            Augmentation::Raw { transform } => transform.apply(psi_x).map(Some),
        }
    }

    pub fn logits(&self, x: &[f64], psi_x: &[f64]) -> Result<Vec<f64>> {
        let pp = self.psi_prime(psi_x)?;
        forward(&self.encoder, &self.head, x, pp.as_deref())
    }

    /// Predicted label (lowest index on ties) and class probabilities.
    pub fn predict(&self, x: &[f64], psi_x: &[f64]) -> Result<(usize, Vec<f64>)> {
        let logits = self.logits(x, psi_x)?;
        Ok((argmax(&logits), softmax(&logits)))
    }

    pub fn predict_rows(&self, inputs: &crate::Matrix, psi: &crate::Matrix) -> Result<Vec<usize>> {
        if inputs.rows() != psi.rows() {
            return Err(Error::RowCountMismatch { what: format!("inputs {} vs psi {}", inputs.rows(), psi.rows()) });
        }
        inputs.iter_rows().zip(psi.iter_rows()).map(|(x, p)| self.predict(x, p).map(|(l, _)| l)).collect()
    }
}

/// Inference for one sample: nearest pseudo-domain, transformed centroid,
/// concatenated forward pass.
pub fn predict(
    enc: &EncoderModel,
    head: &HeadModel,
    transform: &TransformModel,
    clusters: &ClusterModel,
    x: &[f64],
    psi_x: &[f64],
) -> Result<(usize, Vec<f64>)> {
    let (k, _) = clusters.assign_nearest(psi_x)?;
    let pp = transform.apply(clusters.centroid(k))?;
    let logits = forward(enc, head, x, Some(&pp))?;
    Ok((argmax(&logits), softmax(&logits)))
}
