//! Single-file container for a trained model.
//!
//! Layout: a text manifest of `key=value` lines between `GUIDE-BUNDLE v1` and
//! `end`, then one GFT1 block per parameter tensor (encoder layers, then head
//! layers; each layer is a weight block followed by a `1 x out` bias block),
//! then the embedded cluster and transform containers when present.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::mlp::{Dense, Mlp};
use super::{Augmentation, EncoderModel, HeadModel, Mode, TrainedModel};
use crate::config::KvConfig;
use crate::pseudo_domain::ClusterModel;
use crate::store::gft::{self, Dtype};
use crate::transform::TransformModel;
use crate::{Error, Matrix, Result};

const MAGIC: &str = "GUIDE-BUNDLE v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub model: TrainedModel,
    pub refit_steps: Vec<usize>,
    /// Training accuracy of the final model on its own training split.
    pub train_accuracy: Option<f64>,
    /// Domain left out of training, if any.
    pub held_out: Option<usize>,
    /// Resolved training configuration, echoed verbatim.
    pub config: KvConfig,
}

impl Bundle {
    pub fn new(model: TrainedModel) -> Self {
        Self { model, refit_steps: Vec::new(), train_accuracy: None, held_out: None, config: KvConfig::new() }
    }

    pub fn mode(&self) -> Mode {
        match self.model.augmentation {
            Augmentation::None => Mode::Erm,
            _ => Mode::Guide,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let m = &self.model;
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "mode={}", self.mode())?;
        let aug = match m.augmentation {
            Augmentation::None => "none",
            Augmentation::Centroid { .. } => "centroid",
            Augmentation::Raw { .. } => "raw",
        };
        writeln!(w, "augmentation={aug}")?;
        let (enc_kind, enc_layers) = match &m.encoder {
            EncoderModel::Identity { .. } => ("identity", 0),
            EncoderModel::Mlp(net) => ("mlp", net.layers().len()),
        };
        writeln!(w, "encoder={enc_kind}")?;
        writeln!(w, "input_dim={}", m.encoder.input_dim())?;
        writeln!(w, "phi_dim={}", m.head.phi_dim)?;
        writeln!(w, "aug_dim={}", m.head.aug_dim.map_or("none".to_string(), |d| d.to_string()))?;
        writeln!(w, "n_classes={}", m.head.n_classes())?;
        writeln!(w, "encoder_layers={enc_layers}")?;
        writeln!(w, "head_layers={}", m.head.net.layers().len())?;
        let steps: Vec<String> = self.refit_steps.iter().map(usize::to_string).collect();
        writeln!(w, "refit_steps={}", steps.join(","))?;
        if let Some(a) = self.train_accuracy {
            writeln!(w, "train_accuracy={a}")?;
        }
        if let Some(d) = self.held_out {
            writeln!(w, "held_out={d}")?;
        }
        for (k, v) in self.config.iter() {
            if v.contains('\n') {
                return Err(Error::invalid(format!("config value for `{k}` contains a newline")));
            }
            writeln!(w, "cfg.{k}={v}")?;
        }
        writeln!(w, "end")?;

        if let EncoderModel::Mlp(net) = &m.encoder {
            write_layers(w, net)?;
        }
        write_layers(w, &m.head.net)?;
        match &m.augmentation {
            Augmentation::None => {}
            Augmentation::Centroid { clusters, transform } => {
                clusters.write_to(w)?;
                transform.write_to(w)?;
            }
            Augmentation::Raw { transform } => transform.write_to(w)?,
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(Error::MalformedContainer(format!("expected `{MAGIC}` header, got {:?}", line.trim_end())));
        }
        let mut manifest = KvConfig::new();
        let mut config = KvConfig::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::MalformedContainer("bundle manifest is not terminated by `end`".into()));
            }
            let l = line.trim_end_matches(['\n', '\r']);
            if l == "end" {
                break;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::MalformedContainer(format!("bad manifest line {l:?}")))?;
            match k.strip_prefix("cfg.") {
                Some(ck) => config.set(ck, v),
                None => manifest.set(k, v),
            }
        }
        let need = |key: &str| -> Result<&str> {
            manifest
                .get_str(key)
                .ok_or_else(|| Error::MalformedContainer(format!("bundle manifest missing `{key}`")))
        };
        let num = |key: &str| -> Result<usize> {
            need(key)?.parse().map_err(|_| Error::MalformedContainer(format!("bad manifest value for `{key}`")))
        };
        let input_dim = num("input_dim")?;
        let phi_dim = num("phi_dim")?;
        let aug_dim = match need("aug_dim")? {
            "none" => None,
            v => Some(v.parse().map_err(|_| Error::MalformedContainer("bad manifest value for `aug_dim`".into()))?),
        };
        let n_classes = num("n_classes")?;

        let encoder = match need("encoder")? {
            "identity" => EncoderModel::Identity { dim: input_dim },
            "mlp" => EncoderModel::Mlp(read_layers(r, num("encoder_layers")?)?),
            other => return Err(Error::MalformedContainer(format!("unknown encoder kind {other:?}"))),
        };
        if encoder.input_dim() != input_dim || encoder.output_dim() != phi_dim {
            return Err(Error::MalformedContainer("encoder blocks disagree with manifest dims".into()));
        }
        let head_net = read_layers(r, num("head_layers")?)?;
        if head_net.output_dim() != n_classes {
            return Err(Error::MalformedContainer("head output disagrees with n_classes".into()));
        }
        let head = HeadModel::from_net(head_net, phi_dim, aug_dim)
            .map_err(|e| Error::MalformedContainer(format!("head: {e}")))?;
        let augmentation = match need("augmentation")? {
            "none" => Augmentation::None,
            "centroid" => {
                let clusters = ClusterModel::read_from(r)?;
                let transform = TransformModel::read_from(r)?;
                Augmentation::Centroid { clusters, transform }
            }
            "raw" => Augmentation::Raw { transform: TransformModel::read_from(r)? },
            other => return Err(Error::MalformedContainer(format!("unknown augmentation {other:?}"))),
        };
        let aug_out = match &augmentation {
            Augmentation::None => None,
            Augmentation::Centroid { transform, .. } | Augmentation::Raw { transform } => Some(transform.out_dim()),
        };
        if aug_out != aug_dim {
            return Err(Error::MalformedContainer("transform output width disagrees with head".into()));
        }

        let refit_steps = match need("refit_steps")? {
            "" => Vec::new(),
            s => s
                .split(',')
                .map(|t| t.parse().map_err(|_| Error::MalformedContainer(format!("bad refit step {t:?}"))))
                .collect::<Result<_>>()?,
        };
        let train_accuracy = manifest
            .get::<f64>("train_accuracy")
            .map_err(|_| Error::MalformedContainer("bad train_accuracy".into()))?;
        let held_out = manifest.get::<usize>("held_out").map_err(|_| Error::MalformedContainer("bad held_out".into()))?;
        Ok(Self { model: TrainedModel { encoder, head, augmentation }, refit_steps, train_accuracy, held_out, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        let f = File::create(path).map_err(|e| Error::io_at(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io_at(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io_at(path, e))?;
        let mut r = BufReader::new(f);
        let b = Self::read_from(&mut r)?;
        if !r.fill_buf().map_err(|e| Error::io_at(path, e))?.is_empty() {
            return Err(Error::MalformedContainer("trailing bytes after bundle".into()));
        }
        Ok(b)
    }
}

fn write_layers<W: Write>(w: &mut W, net: &Mlp) -> Result<()> {
    for layer in net.layers() {
        gft::write_block(w, &layer.weight, Dtype::F64)?;
        gft::write_block(w, &Matrix::new(1, layer.bias.len(), layer.bias.clone())?, Dtype::F64)?;
    }
    Ok(())
}

fn read_layers<R: BufRead>(r: &mut R, n: usize) -> Result<Mlp> {
    let layers = (0..n)
        .map(|_| {
            let weight = gft::read_block(r)?;
            let bias = gft::read_block(r)?.into_vec();
            Ok(Dense { weight, bias })
        })
        .collect::<Result<Vec<_>>>()?;
    Mlp::from_layers(layers).map_err(|e| Error::MalformedContainer(format!("layers: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::transform::fit_rbf;

    fn guide_bundle() -> Bundle {
        let mut rng = seed::rng(4);
        let encoder = EncoderModel::mlp(&[3, 5, 2], &mut rng);
        let head = HeadModel::new(2, Some(2), 3, Some(4), &mut rng);
        let centroids = Matrix::from_rows(&[[0.0, 0.0], [1.0, 2.0]]).unwrap();
        let clusters = ClusterModel::new(centroids.clone(), vec![0, 1, 1, 0], 0.5, 9).unwrap();
        let targets = Matrix::from_rows(&[[0.1, -0.3], [0.7, 0.2]]).unwrap();
        let transform = fit_rbf(&centroids, &targets, 0.25, 1e-3).unwrap();
        let mut b = Bundle::new(TrainedModel { encoder, head, augmentation: Augmentation::Centroid { clusters, transform } });
        b.refit_steps = vec![0, 1, 2, 4];
        b.train_accuracy = Some(0.875);
        b.held_out = Some(2);
        b.config.set("learning_rate", "0.01");
        b.config.set("encoder_hidden", "5");
        b
    }

    #[test]
    fn round_trip_guide() {
        let b = guide_bundle();
        let mut buf = Vec::new();
        b.write_to(&mut buf).unwrap();
        let back = Bundle::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.mode(), Mode::Guide);
    }

    #[test]
    fn round_trip_erm_identity() {
        let head = HeadModel::new(3, None, 2, None, &mut seed::rng(1));
        let b = Bundle::new(TrainedModel { encoder: EncoderModel::Identity { dim: 3 }, head, augmentation: Augmentation::None });
        let mut buf = Vec::new();
        b.write_to(&mut buf).unwrap();
        let back = Bundle::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.mode(), Mode::Erm);
    }

    #[test]
    fn rejects_damage() {
        let mut buf = Vec::new();
        guide_bundle().write_to(&mut buf).unwrap();
        assert!(Bundle::read_from(&mut &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Bundle::read_from(&mut bad.as_slice()), Err(Error::MalformedContainer(_))));
    }
}
