//! Divergence-transformation and random affine augmentation.

mod affine;
mod divergence;
mod protocol;
mod warp;

pub use affine::{apply_affine, random_affine, AffineSampler, AffineSpec};
pub use divergence::{
    build_divergence_field, gaussian_weight, DisplacementField2D, DivergenceSpec, WarpMode,
};
pub use protocol::{
    augment_patient, placement_centres, AugmentConfig, AugmentedPair, AUGMENTATIONS_PER_PATIENT,
};
pub use warp::{warp_slicewise, warp_with};
