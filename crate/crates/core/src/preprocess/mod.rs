//! Modality-specific preprocessing, augmentation, metadata standardization
//! and patient-level splitting.

pub mod augment;
pub mod ct;
pub mod metadata;
pub mod raster;
pub mod split;
pub mod stain;

pub use augment::{cutmix, cutmix_pair, mixup, mixup_pair, CutBox, Sample};
pub use ct::{hu_normalize, CtPatch, LUNG_WINDOW};
pub use metadata::{standardize_metadata, MetadataStats, MetadataVector, RawMetadata};
pub use split::{patient_split, Split, SplitAssignment, DEFAULT_RATIOS};
pub use stain::{beer_lambert, estimate_stains, macenko_normalize, RgbTile, StainReference};
