//! Images, padding and the synthetic training-data factory.

pub mod dataset;
pub mod degrade;
mod filters;
pub mod image;
pub mod pad;
pub mod ridge;

pub use dataset::{
    make_dataset, manifest_from_dir, sample_recipe, DatasetManifest, DistortionRanges, ImagePair,
    ManifestEntry, PairRecipe, Span,
};
pub use degrade::{degrade, degrade_with_mask, DistortionConfig, OCCLUDER_VALUE};
pub use image::{load_image, save_image, GrayImage, ImageFormat};
pub use pad::{pad_edge, pad_with, unpad, unpad_native, PadPlan, NATIVE_SIZE, PADDED_SIZE};
pub use ridge::{generate_ridge_pattern, RidgeLayout};
