use super::Dataset;
use crate::{Error, Result};

/// Leave-one-domain-out split: `test` holds exactly the samples of
/// `held_out`, `train` everything else, both in original row order.
///
/// Both halves keep their domain labels for reporting; training code only
/// ever sees [`Dataset::training_view`], which has none.
pub fn lodo_split(ds: &Dataset, held_out: usize) -> Result<(Dataset, Dataset)> {
    let domains = ds.domain_labels().ok_or(Error::MissingDomainLabels)?;
    let (test_idx, train_idx): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| domains[i] == held_out);
    if test_idx.is_empty() || train_idx.is_empty() {
        return Err(Error::EmptySplit(held_out));
    }
    Ok((ds.select(&train_idx), ds.select(&test_idx)))
}
