//! Datasets, codebooks, splits and their on-disk formats.
//!
//! A dataset directory contains:
//!
//! * `features/<instance_id>.vsef`: a `W x H x C` feature map or an `M x C` part set,
//! * `labels.csv` with header `instance_id,class_id`,
//! * `split.json` with keys `seen`, `unseen`, `train`, `test`,
//! * one codebook: `codebook_semantic.csv` (header `class_id,a1..a_d`) or
//!   `codebook_visual.vsef` (rows in sorted class order).

mod codebook;
mod dataset;
pub mod synth;
pub mod vsef;

pub use codebook::{Codebook, CodebookKind};
pub use dataset::{
    class_partition_counts, load_dataset, save_dataset, Dataset, Instance, InstanceInput,
    PartitionCounts, SplitSpec,
};
pub use synth::{generate_synthetic, InputKind, PlantedModel, SynthConfig, Synthetic};
pub use vsef::{read_tensor_file, write_tensor_file};
