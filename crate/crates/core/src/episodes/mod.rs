//! Dataset ingestion, rotation augmentation and episodic sampling.

mod dataset;
mod sampler;
pub mod synthetic;

pub use dataset::{
    augment_rotations, decode_image, load_dataset, load_split, write_pnm, ClassImages, Dataset, DatasetManifest,
    DatasetSplits, Image, ImageSpec, Split, SplitDirs,
};
pub use sampler::{sample_by_strategy, sample_episode, Episode, LabelledImage, SamplingStrategy, SamplingVariant};
