use rand::Rng;
use serde::{Deserialize, Serialize};

use super::warp::warp_with;
use crate::error::{Error, Result};
use crate::volume::{Interp, LabelMask, Volume3D};

/// In-plane similarity transform about the slice centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineSpec {
    /// Counter-clockwise, degrees in `[0, 15]`.
    pub rotation_deg: f64,
    /// In `[0.7, 1.3]`.
    pub scale: f64,
    /// Voxels.
    pub translation: [f64; 2],
}

impl AffineSpec {
    pub const IDENTITY: AffineSpec = AffineSpec {
        rotation_deg: 0.0,
        scale: 1.0,
        translation: [0.0, 0.0],
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=15.0).contains(&self.rotation_deg) {
            return Err(Error::invalid(format!(
                "rotation {} outside [0, 15] degrees",
                self.rotation_deg
            )));
        }
        if !(0.7..=1.3).contains(&self.scale) {
            return Err(Error::invalid(format!(
                "scale {} outside [0.7, 1.3]",
                self.scale
            )));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        Ok(())
    }
}

/// Distribution the online augmentation draws [`AffineSpec`]s from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineSampler {
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    /// Translation bound as a fraction of the in-plane extent.
    pub translation_frac: f64,
}

impl Default for AffineSampler {
    fn default() -> Self {
        AffineSampler {
            max_rotation_deg: 15.0,
            scale_range: (0.7, 1.3),
            translation_frac: 0.1,
        }
    }
}

impl AffineSampler {
    pub fn sample<R: Rng + ?Sized>(&self, dims: [usize; 2], rng: &mut R) -> AffineSpec {
        let tx = self.translation_frac * dims[0] as f64;
        let ty = self.translation_frac * dims[1] as f64;
        AffineSpec {
            rotation_deg: rng.gen_range(0.0..=self.max_rotation_deg),
            scale: rng.gen_range(self.scale_range.0..=self.scale_range.1),
            translation: [rng.gen_range(-tx..=tx), rng.gen_range(-ty..=ty)],
        }
    }
}

/// Applies the same transform to every slice: trilinear for the image,
/// nearest for the mask.
pub fn apply_affine(
    vol: &Volume3D,
    mask: &LabelMask,
    spec: &AffineSpec,
) -> Result<(Volume3D, LabelMask)> {
    vol.grid()
        .check_same_frame(mask.grid(), "affine augmentation")?;
    spec.validate()?;
    let [nx, ny, _] = vol.dims();
    let c = [(nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0];
    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
    // forward: q = c + s R (p - c) + t; sample at the inverse image of q
    let source = |i: usize, j: usize| {
        let x = i as f64 - c[0] - spec.translation[0];
        let y = j as f64 - c[1] - spec.translation[1];
        [
            c[0] + (cos * x + sin * y) / spec.scale,
            c[1] + (-sin * x + cos * y) / spec.scale,
        ]
    };
    Ok((
        warp_with(vol, source, Interp::Trilinear)?,
        warp_with(mask, source, Interp::Nearest)?,
    ))
}

pub fn random_affine<R: Rng + ?Sized>(
    vol: &Volume3D,
    mask: &LabelMask,
    sampler: &AffineSampler,
    rng: &mut R,
) -> Result<(Volume3D, LabelMask, AffineSpec)> {
    let [nx, ny, _] = vol.dims();
    let spec = sampler.sample([nx, ny], rng);
    let (v, m) = apply_affine(vol, mask, &spec)?;
    Ok((v, m, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::volume::{ClassSet, Grid};

    fn disk(n: usize, r: f64) -> (Volume3D, LabelMask) {
        let g = Grid::unit([n, n, 2]).unwrap();
        let c = (n as f64 - 1.0) / 2.0;
        let inside = |i: usize, j: usize| (i as f64 - c).hypot(j as f64 - c) <= r;
        let v = Volume3D::from_fn(g, |[i, j, _]| if inside(i, j) { 300.0 } else { 30.0 }).unwrap();
        let m =
            LabelMask::from_fn(g, ClassSet::binary(), |[i, j, _]| u8::from(inside(i, j))).unwrap();
        (v, m)
    }

    #[test]
    fn identity_spec_is_identity() {
        let (v, m) = disk(21, 6.0);
        let (v2, m2) = apply_affine(&v, &m, &AffineSpec::IDENTITY).unwrap();
        assert_eq!(m2, m);
        for (a, b) in v2.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_shrinks_disk_area() {
        let (v, m) = disk(101, 30.0);
        let spec = AffineSpec {
            rotation_deg: 0.0,
            scale: 0.7,
            translation: [0.0, 0.0],
        };
        let (_, m2) = apply_affine(&v, &m, &spec).unwrap();
        let ratio = m2.foreground_count() as f64 / m.foreground_count() as f64;
        assert!((ratio - 0.49).abs() <= 0.05 * 0.49, "ratio {ratio}");
    }

    #[test]
    fn rotation_keeps_labels_in_vocabulary() {
        let (v, m) = disk(31, 8.0);
        let spec = AffineSpec {
            rotation_deg: 15.0,
            scale: 1.3,
            translation: [2.5, -1.0],
        };
        let (_, m2) = apply_affine(&v, &m, &spec).unwrap();
        assert!(m2.labels().iter().all(|&l| m.class_set().contains(l)));
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let (v, m) = disk(25, 7.0);
        let s = AffineSampler::default();
        let a = random_affine(&v, &m, &s, &mut rng::stream(4, "affine")).unwrap();
        let b = random_affine(&v, &m, &s, &mut rng::stream(4, "affine")).unwrap();
        assert_eq!(a, b);
        let spec = a.2;
        assert!((0.0..=15.0).contains(&spec.rotation_deg));
        assert!((0.7..=1.3).contains(&spec.scale));
        assert!(spec.translation.iter().all(|t| t.abs() <= 2.5));
    }

    #[test]
    fn out_of_range_spec_rejected() {
        let (v, m) = disk(9, 2.0);
        let bad = AffineSpec {
            rotation_deg: 20.0,
            ..AffineSpec::IDENTITY
        };
        assert!(apply_affine(&v, &m, &bad).is_err());
    }
}
