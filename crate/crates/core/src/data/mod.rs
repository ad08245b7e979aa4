//! Dataset machinery: synthetic generation, ingestion, manifests, splits,
//! augmentation and image IO.

mod augment;
mod image_io;
mod ingest;
mod loader;
mod manifest;
mod synth;

pub use augment::{
    apply_geometry, augment_pair, center_crop, draw_augment, normalize_diff, normalize_image,
    AugmentConfig, AugmentDraw, ChannelStats,
};
pub use image_io::{delta_path, load_image, read_raw, write_png_gray, write_raw};
pub use ingest::{ingest_gtos, IngestLayout, IngestWarning};
pub use loader::{group_view_sets, load_split, LoadedItem, LoadedSplit, ViewSet};
pub use manifest::{make_splits, Manifest, ManifestRecord, Split};
pub use synth::{
    generate_synthetic, standard_views, AngularSpec, GenerateConfig, Generated, SampleStats,
    SpatialSpec, SynthClassSpec, TextureFamily,
};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("data io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("generator: {0}")]
    Generator(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
