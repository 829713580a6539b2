//! Files: NIfTI volumes, preprocessing, checkpoints and dataset manifests.

pub mod checkpoint;
pub mod dataset;
pub mod preprocess;
pub mod volume_file;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dataset::{read_pair_manifest, save_dataset, PairEntry};
pub use preprocess::{preprocess, preprocess_labels, Normalization, PreprocessSpec};
pub use volume_file::{load_field, load_labels, load_volume, save_field, save_labels, save_volume};
