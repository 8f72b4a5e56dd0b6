//! Grid-to-grid resampling: isotropic conversion and in-plane downsampling.

use super::grid::Grid;
use super::image::{Interp, VoxelImage};
use crate::error::{Error, Result};

/// Resamples `img` onto `target` by physical position. Samples outside the
/// source are clamped to its border.
pub fn resample_to_grid<T: VoxelImage>(img: &T, target: &Grid, interp: Interp) -> Result<T> {
    target.validate()?;
    let src = img.grid();
    // axes are aligned, so each output axis maps affinely onto one source axis
    let axis_map = |a: usize| -> Vec<f64> {
        (0..target.dims[a])
            .map(|i| {
                let p = target.origin[a] + i as f64 * target.spacing[a];
                (p - src.origin[a]) / src.spacing[a]
            })
            .collect()
    };
    let ux = axis_map(0);
    let uy = axis_map(1);
    let uz = axis_map(2);

    let mut out = Vec::with_capacity(target.len());
    for &z in &uz {
        for &y in &uy {
            for &x in &ux {
                out.push(img.sample([x, y, z], interp)?);
            }
        }
    }
    Ok(img.rebuild(*target, out))
}

fn round_dim(n: usize, ratio: f64) -> usize {
    // f64::round is half-away-from-zero
    ((n as f64 * ratio).round() as usize).max(1)
}

/// Grid with `(t, t, t)` spacing covering the same physical extent.
pub fn isotropic_grid(grid: &Grid, target_spacing: f64) -> Result<Grid> {
    if !(target_spacing > 0.0 && target_spacing.is_finite()) {
        return Err(Error::invalid(format!(
            "target spacing must be positive, got {target_spacing}"
        )));
    }
    let mut dims = [0; 3];
    for a in 0..3 {
        dims[a] = round_dim(grid.dims[a], grid.spacing[a] / target_spacing);
    }
    Ok(grid.respaced(dims, [target_spacing; 3]))
}

/// Converts to isotropic voxels of side `target_spacing` mm.
///
/// Output dims are `round(dim * spacing / target_spacing)` per axis (at
/// least 1). Label masks require [`Interp::Nearest`].
pub fn resample_isotropic<T: VoxelImage>(
    img: &T,
    target_spacing: f64,
    interp: Interp,
) -> Result<T> {
    let target = isotropic_grid(img.grid(), target_spacing)?;
    resample_to_grid(img, &target, interp)
}

/// Grid with in-plane dims divided by `factor` (rounded) and in-plane
/// spacing multiplied by it; z untouched.
pub fn downsampled_grid(grid: &Grid, factor: f64) -> Result<Grid> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(Error::invalid(format!(
            "downsample factor must be >= 1, got {factor}"
        )));
    }
    let dims = [
        round_dim(grid.dims[0], 1.0 / factor),
        round_dim(grid.dims[1], 1.0 / factor),
        grid.dims[2],
    ];
    let spacing = [
        grid.spacing[0] * factor,
        grid.spacing[1] * factor,
        grid.spacing[2],
    ];
    Ok(grid.respaced(dims, spacing))
}

/// In-plane downsampling by `factor` (512 -> 160 for the default 3.2).
pub fn downsample_inplane<T: VoxelImage>(img: &T, factor: f64, interp: Interp) -> Result<T> {
    let target = downsampled_grid(img.grid(), factor)?;
    resample_to_grid(img, &target, interp)
}
