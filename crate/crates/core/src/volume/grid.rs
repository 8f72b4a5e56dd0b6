use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling geometry shared by images and label masks.
///
/// Voxel `(i, j, k)` is stored at linear index `i + nx * (j + ny * k)`, so x
/// varies fastest and z slowest. `origin` is the physical position (mm) of
/// the centre of voxel `(0, 0, 0)`; axes are aligned with the physical axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let grid = Grid {
            dims,
            spacing,
            origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Unit spacing, origin at zero.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "dims must be >= 1, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!(
                "spacing must be positive and finite, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("origin must be finite"));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.dims[a])
    }

    /// Physical position of a (possibly fractional) voxel index.
    #[inline]
    pub fn to_physical(&self, idx: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + idx[0] * self.spacing[0],
            self.origin[1] + idx[1] * self.spacing[1],
            self.origin[2] + idx[2] * self.spacing[2],
        ]
    }

    /// Continuous voxel index of a physical position.
    #[inline]
    pub fn to_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Physical extent along each axis (`dims * spacing`).
    pub fn extent(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// A grid covering the same physical extent with new spacing and dims.
    /// The outer voxel edges of axis 0 line up, so origins shift by half a
    /// voxel difference.
    pub fn respaced(&self, dims: [usize; 3], spacing: [f64; 3]) -> Grid {
        let mut origin = [0.0; 3];
        for a in 0..3 {
            origin[a] = self.origin[a] - 0.5 * self.spacing[a] + 0.5 * spacing[a];
        }
        Grid {
            dims,
            spacing,
            origin,
        }
    }

    /// Grid equality up to floating point noise in spacing and origin.
    pub fn same_frame(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| {
                // headers store geometry as f32
                (self.spacing[a] - other.spacing[a]).abs() <= 1e-6 * self.spacing[a].max(1.0)
                    && (self.origin[a] - other.origin[a]).abs()
                        <= 1e-4 * self.origin[a].abs().max(1.0)
            })
    }

    pub fn check_same_frame(&self, other: &Grid, what: &str) -> Result<()> {
        if self.same_frame(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: frames differ ({:?} vs {:?})",
                self.dims, other.dims
            )))
        }
    }
}
