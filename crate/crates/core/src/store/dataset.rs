use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::gft::{self, Dtype};
use crate::{Error, Matrix, Result};

pub const INPUTS_FILE: &str = "inputs.gft";
pub const PSI_FILE: &str = "psi.gft";
pub const META_FILE: &str = "meta.csv";

/// Samples with raw inputs, frozen `psi` features, class labels and (for
/// evaluation only) domain labels. Rows are aligned across all fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    psi: Matrix,
    class_labels: Vec<usize>,
    domain_labels: Option<Vec<usize>>,
    ids: Vec<String>,
    n_classes: usize,
    n_domains: usize,
}

/// What the training loop is allowed to see: no domain labels, no ids.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    pub inputs: &'a Matrix,
    pub psi: &'a Matrix,
    pub class_labels: &'a [usize],
    pub n_classes: usize,
}

impl TrainingView<'_> {
    pub fn len(&self) -> usize {
        self.class_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_labels.is_empty()
    }
}

impl Dataset {
    /// `n_classes` / `n_domains` of `None` are inferred as `max label + 1`.
    pub fn new(
        inputs: Matrix,
        psi: Matrix,
        class_labels: Vec<usize>,
        domain_labels: Option<Vec<usize>>,
        ids: Vec<String>,
        n_classes: Option<usize>,
        n_domains: Option<usize>,
    ) -> Result<Self> {
        let n = ids.len();
        let counts = [
            ("inputs", inputs.rows()),
            ("psi", psi.rows()),
            ("class labels", class_labels.len()),
        ];
        for (name, rows) in counts {
            if rows != n {
                return Err(Error::RowCountMismatch { what: format!("{name} has {rows} rows, meta has {n}") });
            }
        }
        if let Some(d) = &domain_labels {
            if d.len() != n {
                return Err(Error::RowCountMismatch {
                    what: format!("domain labels has {} rows, meta has {n}", d.len()),
                });
            }
        }
        if !inputs.is_finite() {
            return Err(Error::NonFiniteValue("inputs"));
        }
        if !psi.is_finite() {
            return Err(Error::NonFiniteValue("psi"));
        }
        let inferred_c = class_labels.iter().max().map_or(0, |m| m + 1);
        let n_classes = n_classes.unwrap_or(inferred_c);
        if let Some((row, &c)) = class_labels.iter().enumerate().find(|(_, &c)| c >= n_classes) {
            return Err(Error::UnknownClassLabel { row, label: c.to_string() });
        }
        let inferred_d = domain_labels.as_ref().and_then(|d| d.iter().max()).map_or(0, |m| m + 1);
        let n_domains = n_domains.unwrap_or(inferred_d);
        if let Some(d) = &domain_labels {
            if let Some(&bad) = d.iter().find(|&&x| x >= n_domains) {
                return Err(Error::invalid(format!("domain label {bad} >= declared {n_domains} domains")));
            }
        }
        Ok(Self { inputs, psi, class_labels, domain_labels, ids, n_classes, n_domains })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn psi(&self) -> &Matrix {
        &self.psi
    }

    pub fn class_labels(&self) -> &[usize] {
        &self.class_labels
    }

    pub fn domain_labels(&self) -> Option<&[usize]> {
        self.domain_labels.as_deref()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            inputs: &self.inputs,
            psi: &self.psi,
            class_labels: &self.class_labels,
            n_classes: self.n_classes,
        }
    }

    /// Subset in the given row order; header counts are kept.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            psi: self.psi.select_rows(idx),
            class_labels: idx.iter().map(|&i| self.class_labels[i]).collect(),
            domain_labels: self.domain_labels.as_ref().map(|d| idx.iter().map(|&i| d[i]).collect()),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            n_classes: self.n_classes,
            n_domains: self.n_domains,
        }
    }

    /// Same dataset with every `psi` row scaled to unit norm.
    pub fn with_unit_norm_psi(&self) -> Self {
        Self { psi: self.psi.normalize_rows(), ..self.clone() }
    }

    /// Write `inputs.gft`, `psi.gft` and `meta.csv` into `dir`.
    pub fn save(&self, dir: &Path, dtype: Dtype) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        gft::write_matrix(&dir.join(INPUTS_FILE), &self.inputs, dtype)?;
        gft::write_matrix(&dir.join(PSI_FILE), &self.psi, dtype)?;
        let meta = dir.join(META_FILE);
        let mut w = csv::Writer::from_path(&meta).map_err(|e| csv_io(&meta, e))?;
        w.write_record(["id", "class", "domain"]).map_err(|e| csv_io(&meta, e))?;
        for i in 0..self.len() {
            let domain = self.domain_labels.as_ref().map_or(String::new(), |d| d[i].to_string());
            w.write_record([self.ids[i].as_str(), &self.class_labels[i].to_string(), &domain])
                .map_err(|e| csv_io(&meta, e))?;
        }
        w.flush().map_err(|e| Error::io_at(&meta, e))?;
        Ok(())
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io_at(path, io),
        other => Error::MalformedCsv { line: 0, message: format!("{other:?}") },
    }
}

#[derive(Debug, Deserialize)]
struct MetaRow {
    id: String,
    class: String,
    domain: String,
}

/// Rows of a meta CSV: ids, class labels, optional domain labels.
pub type MetaRows = (Vec<String>, Vec<usize>, Option<Vec<usize>>);

pub fn read_meta(path: &Path) -> Result<MetaRows> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::MalformedCsv { line: 1, message: e.to_string() })?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["id", "class", "domain"] {
        return Err(Error::MalformedCsv {
            line: 1,
            message: format!("expected header `id,class,domain`, got `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut ids = Vec::new();
    let mut classes = Vec::new();
    let mut domains: Vec<Option<usize>> = Vec::new();
    let mut seen = HashSet::new();
    for (row, rec) in rdr.deserialize::<MetaRow>().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::MalformedCsv { line, message: e.to_string() })?;
        let class = rec
            .class
            .parse::<usize>()
            .map_err(|_| Error::UnknownClassLabel { row, label: rec.class.clone() })?;
        let domain = if rec.domain.is_empty() {
            None
        } else {
            Some(rec.domain.parse::<usize>().map_err(|_| Error::MalformedCsv {
                line,
                message: format!("domain {:?} is not a non-negative integer", rec.domain),
            })?)
        };
        if !seen.insert(rec.id.clone()) {
            return Err(Error::MalformedCsv { line, message: format!("duplicate id {:?}", rec.id) });
        }
        ids.push(rec.id);
        classes.push(class);
        domains.push(domain);
    }
    let present = domains.iter().filter(|d| d.is_some()).count();
    let domain_labels = if present == 0 {
        None
    } else if present == domains.len() {
        Some(domains.into_iter().map(|d| d.expect("checked")).collect())
    } else {
        return Err(Error::MalformedCsv {
            line: 0,
            message: "domain column must be empty on all rows or on none".into(),
        });
    };
    Ok((ids, classes, domain_labels))
}

/// Load a dataset from its three files. Row order follows the meta file.
pub fn load_dataset(inputs_path: &Path, psi_path: &Path, meta_path: &Path) -> Result<Dataset> {
    let inputs = gft::read_matrix(inputs_path)?;
    let psi = gft::read_matrix(psi_path)?;
    let (ids, classes, domains) = read_meta(meta_path)?;
    if inputs.rows() != psi.rows() {
        return Err(Error::RowCountMismatch {
            what: format!("inputs has {} rows, psi has {}", inputs.rows(), psi.rows()),
        });
    }
    Dataset::new(inputs, psi, classes, domains, ids, None, None)
}

pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    load_dataset(&dir.join(INPUTS_FILE), &dir.join(PSI_FILE), &dir.join(META_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, domains: bool) -> Dataset {
        Dataset::new(
            Matrix::from_fn(n, 3, |i, j| (i * 3 + j) as f64),
            Matrix::from_fn(n, 2, |i, j| (i as f64) - j as f64),
            (0..n).map(|i| i % 2).collect(),
            domains.then(|| (0..n).map(|i| i % 4).collect()),
            (0..n).map(|i| format!("s{i}")).collect(),
            None,
            None,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_through_dir() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(120, true);
        ds.save(dir.path(), Dtype::F64).unwrap();
        let back = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 120);
        assert_eq!(back, ds);
    }

    #[test]
    fn empty_domain_column_means_absent() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(10, false);
        ds.save(dir.path(), Dtype::F32).unwrap();
        let back = load_dataset_dir(dir.path()).unwrap();
        assert!(back.domain_labels().is_none());
    }

    #[test]
    fn row_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        toy(120, true).save(dir.path(), Dtype::F64).unwrap();
        gft::write_matrix(&dir.path().join(PSI_FILE), &Matrix::zeros(119, 2), Dtype::F64).unwrap();
        assert!(matches!(load_dataset_dir(dir.path()), Err(Error::RowCountMismatch { .. })));
    }

    #[test]
    fn meta_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "id,class,domain\na,cat,0\n").unwrap();
        assert!(matches!(read_meta(&p), Err(Error::UnknownClassLabel { .. })));
        fs::write(&p, "id,class,domain\na,0,0\nb,1,\n").unwrap();
        assert!(matches!(read_meta(&p), Err(Error::MalformedCsv { .. })));
        fs::write(&p, "id,label\na,0\n").unwrap();
        assert!(matches!(read_meta(&p), Err(Error::MalformedCsv { .. })));
        fs::write(&p, "id,class,domain\na,0,1\nb,1,0\n").unwrap();
        let (ids, c, d) = read_meta(&p).unwrap();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(c, [0, 1]);
        assert_eq!(d, Some(vec![1, 0]));
    }

    #[test]
    fn non_finite_rejected() {
        let r = Dataset::new(
            Matrix::new(1, 1, vec![f64::INFINITY]).unwrap(),
            Matrix::zeros(1, 1),
            vec![0],
            None,
            vec!["a".into()],
            None,
            None,
        );
        assert!(matches!(r, Err(Error::NonFiniteValue(_))));
    }
}
