//! File formats, dataset manifests, leakage-free splits and configuration.

pub mod config;
pub mod manifest;
pub mod nifti;

pub use manifest::{
    attach_augmented, group_split, AugmentedScan, Cohort, SplitEntry, SplitManifest,
};
pub use nifti::{read_mask, read_volume, write_mask, write_volume};
