//! Manifests, identity-balanced sampling, image decoding and augmentation.

pub mod augment;
pub mod image;
pub mod manifest;
pub mod sampler;
pub mod synth;

pub use augment::{augment, AugmentationConfig, ErasingConfig};
pub use image::{load_image, to_batch, Image, MEAN, STD};
pub use manifest::{load_manifest, read_csv, write_csv, DatasetManifest, ImageRecord, Layout, Split};
pub use sampler::{PkSampler, PkSpec};
pub use synth::{synth_dataset, SynthConfig, SynthDataset};
