//! Volumetric data types and geometry: resampling, ROI crops, connected
//! components, bounding boxes and HU statistics.

mod components;
mod grid;
mod image;
mod resample;
mod roi;
mod stats;

pub use components::{
    connected_components, largest_component, slice_component_count, slice_components, Component,
    Connectivity,
};
pub use grid::Grid;
pub use image::{
    ClassSet, Interp, LabelMask, Volume3D, VoxelImage, AIR_HU, BACKGROUND, LUMEN, WALL_ILT,
};
pub use resample::{
    downsample_inplane, downsampled_grid, isotropic_grid, resample_isotropic, resample_to_grid,
};
pub use roi::{
    crop_roi, crop_roi_with_pad, extract, mask_to_bounding_box, paste, roi_placement, BoundingBox,
    Placement,
};
pub use stats::{hu_statistics, hu_statistics_of, mean_and_std, percentile_sorted, HuStats};
