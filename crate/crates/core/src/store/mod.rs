//! Datasets, their on-disk formats, synthetic generation and LODO splitting.

mod dataset;
pub mod gft;
mod split;
pub mod synth;

pub use dataset::{load_dataset, load_dataset_dir, read_meta, Dataset, MetaRows, TrainingView, INPUTS_FILE, META_FILE, PSI_FILE};
pub use gft::{read_matrix, write_matrix, Dtype};
pub use split::lodo_split;
pub use synth::{generate_synthetic, SynthLatent, SynthSpec};
