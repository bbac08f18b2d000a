//! Image ingestion: manifests, preprocessing, tensor caching and splitting.

pub mod cache;
pub mod manifest;
pub mod preprocess;
pub mod resize;
pub mod split;

pub use manifest::{
    validate_manifest, Crop, DatasetManifest, ImageRecord, Modality, Split, Violation,
};
pub use preprocess::{load_and_preprocess, load_record, load_samples, load_split, Samples};
pub use resize::resize_bilinear;
pub use split::{stratified_assign, stratified_split};
