//! The 10:1 offline protocol: five Gaussian centres placed around the aorta,
//! each warped once divergently and once congruently.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::divergence::{build_divergence_field, DivergenceSpec, WarpMode};
use super::warp::warp_slicewise;
use crate::error::{Error, Result};
use crate::volume::{Interp, LabelMask, Volume3D, BACKGROUND};

pub const AUGMENTATIONS_PER_PATIENT: usize = 10;
const PLACEMENTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Gaussian width, voxels.
    pub sigma: f64,
    /// Peak displacement, voxels.
    pub amplitude: f64,
    /// Ring radius as a multiple of the aorta's mean in-plane radius.
    pub ring_factor: f64,
    /// Relative uniform jitter applied to sigma and amplitude (0 = none).
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            sigma: 30.0,
            amplitude: 12.0,
            ring_factor: 1.5,
            jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub volume: Volume3D,
    pub mask: LabelMask,
    pub spec: DivergenceSpec,
}

/// Gaussian centres on a ring around the mask centroid of the axial slice
/// with the most foreground, at 0, 72, 144, 216 and 288 degrees.
pub fn placement_centres(mask: &LabelMask, ring_factor: f64) -> Result<Vec<[f64; 2]>> {
    let [nx, ny, nz] = mask.dims();
    let labels = mask.labels();
    let mut best = (0usize, 0usize);
    for k in 0..nz {
        let slice = &labels[k * nx * ny..(k + 1) * nx * ny];
        let count = slice.iter().filter(|&&l| l != BACKGROUND).count();
        if count > best.1 {
            best = (k, count);
        }
    }
    let (k, count) = best;
    if count == 0 {
        return Err(Error::invalid(
            "cannot place augmentation centres: mask has no foreground",
        ));
    }
    let slice = &labels[k * nx * ny..(k + 1) * nx * ny];
    let (mut si, mut sj) = (0.0, 0.0);
    for (p, &l) in slice.iter().enumerate() {
        if l != BACKGROUND {
            si += (p % nx) as f64;
            sj += (p / nx) as f64;
        }
    }
    let ci = si / count as f64;
    let cj = sj / count as f64;
    let radius = ring_factor * (count as f64 / std::f64::consts::PI).sqrt();
    Ok((0..PLACEMENTS)
        .map(|n| {
            let theta = (72.0 * n as f64).to_radians();
            [ci + radius * theta.cos(), cj + radius * theta.sin()]
        })
        .collect())
}

/// Produces exactly ten warped (image, mask) pairs; image and mask share
/// each field.
pub fn augment_patient<R: Rng + ?Sized>(
    vol: &Volume3D,
    mask: &LabelMask,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<AugmentedPair>> {
    vol.grid()
        .check_same_frame(mask.grid(), "augment_patient")?;
    let centres = placement_centres(mask, cfg.ring_factor)?;
    let [nx, ny, _] = vol.dims();
    let mut out = Vec::with_capacity(AUGMENTATIONS_PER_PATIENT);
    for centre in centres {
        let mut jittered = |v: f64| {
            if cfg.jitter > 0.0 {
                v * (1.0 + rng.gen_range(-cfg.jitter..=cfg.jitter))
            } else {
                v
            }
        };
        let sigma = jittered(cfg.sigma);
        let amplitude = jittered(cfg.amplitude);
        for mode in [WarpMode::Divergent, WarpMode::Congruent] {
            let spec = DivergenceSpec {
                center: centre,
                sigma,
                amplitude,
                mode,
            };
            let field = build_divergence_field([nx, ny], &spec)?;
            out.push(AugmentedPair {
                volume: warp_slicewise(vol, &field, Interp::Trilinear)?,
                mask: warp_slicewise(mask, &field, Interp::Nearest)?,
                spec,
            });
        }
    }
    debug_assert_eq!(out.len(), AUGMENTATIONS_PER_PATIENT);
    Ok(out)
}
