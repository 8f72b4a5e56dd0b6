use serde::{Deserialize, Serialize};

use super::grid::Grid;
use crate::error::{Error, Result};

/// Air, used to pad image samples that fall outside the source volume.
pub const AIR_HU: f64 = -1024.0;

pub const BACKGROUND: u8 = 0;
pub const LUMEN: u8 = 1;
pub const WALL_ILT: u8 = 2;

/// How to sample between voxel centres.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Scalar CT volume in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::shape(format!(
                "volume data has {} values, dims {:?} need {}",
                data.len(),
                grid.dims,
                grid.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite HU value at voxel {:?}",
                grid.coords(pos)
            )));
        }
        Ok(Volume3D { grid, data })
    }

    pub fn filled(grid: Grid, value: f64) -> Result<Self> {
        Self::new(grid, vec![value; grid.len()])
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut([usize; 3]) -> f64) -> Result<Self> {
        let data = (0..grid.len()).map(|idx| f(grid.coords(idx))).collect();
        Self::new(grid, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// The set of labels a mask is allowed to contain, kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSet(Vec<u8>);

impl ClassSet {
    pub fn new(mut labels: Vec<u8>) -> Result<Self> {
        labels.sort_unstable();
        labels.dedup();
        if labels.first() != Some(&BACKGROUND) {
            return Err(Error::invalid("class set must contain background label 0"));
        }
        Ok(ClassSet(labels))
    }

    /// `{0, 1}`
    pub fn binary() -> Self {
        ClassSet(vec![BACKGROUND, LUMEN])
    }

    /// `{0, 1, 2}`: background, inner lumen, outer wall + thrombus.
    pub fn aorta() -> Self {
        ClassSet(vec![BACKGROUND, LUMEN, WALL_ILT])
    }

    pub fn contains(&self, label: u8) -> bool {
        self.0.binary_search(&label).is_ok()
    }

    pub fn labels(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.0 == [BACKGROUND, LUMEN]
    }
}

/// Integer label grid co-registered with a [`Volume3D`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    grid: Grid,
    labels: Vec<u8>,
    class_set: ClassSet,
}

impl LabelMask {
    pub fn new(grid: Grid, labels: Vec<u8>, class_set: ClassSet) -> Result<Self> {
        grid.validate()?;
        if labels.len() != grid.len() {
            return Err(Error::shape(format!(
                "mask has {} labels, dims {:?} need {}",
                labels.len(),
                grid.dims,
                grid.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| !class_set.contains(l)) {
            return Err(Error::invalid(format!(
                "label {bad} not in class set {:?}",
                class_set.labels()
            )));
        }
        Ok(LabelMask {
            grid,
            labels,
            class_set,
        })
    }

    pub fn empty(grid: Grid, class_set: ClassSet) -> Result<Self> {
        Self::new(grid, vec![BACKGROUND; grid.len()], class_set)
    }

    pub fn from_fn(
        grid: Grid,
        class_set: ClassSet,
        mut f: impl FnMut([usize; 3]) -> u8,
    ) -> Result<Self> {
        let labels = (0..grid.len()).map(|idx| f(grid.coords(idx))).collect();
        Self::new(grid, labels, class_set)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn class_set(&self) -> &ClassSet {
        &self.class_set
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.labels[self.grid.index(i, j, k)]
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != BACKGROUND).count()
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Collapses every non-background label to 1.
    pub fn binarized(&self) -> LabelMask {
        LabelMask {
            grid: self.grid,
            labels: self
                .labels
                .iter()
                .map(|&l| u8::from(l != BACKGROUND))
                .collect(),
            class_set: ClassSet::binary(),
        }
    }

    /// Mask of voxels that satisfy `pred`, as a binary mask.
    pub fn select(&self, pred: impl Fn(u8) -> bool) -> LabelMask {
        LabelMask {
            grid: self.grid,
            labels: self.labels.iter().map(|&l| u8::from(pred(l))).collect(),
            class_set: ClassSet::binary(),
        }
    }

    pub fn with_class_set(mut self, class_set: ClassSet) -> Result<Self> {
        if let Some(bad) = self.labels.iter().find(|&&l| !class_set.contains(l)) {
            return Err(Error::invalid(format!(
                "label {bad} not in class set {:?}",
                class_set.labels()
            )));
        }
        self.class_set = class_set;
        Ok(self)
    }
}

/// Common access to voxel grids so geometric operations work on both images
/// and masks.
pub trait VoxelImage: Sized {
    type Voxel: Copy + PartialEq + std::fmt::Debug;

    fn grid(&self) -> &Grid;
    fn voxels(&self) -> &[Self::Voxel];
    /// Builds an image of the same kind (same class vocabulary for masks).
    fn rebuild(&self, grid: Grid, voxels: Vec<Self::Voxel>) -> Self;
    /// Value used for samples outside the grid.
    fn pad_value(&self) -> Self::Voxel;
    /// Sample at a continuous voxel index, clamping to the border.
    fn sample(&self, u: [f64; 3], interp: Interp) -> Result<Self::Voxel>;
}

impl VoxelImage for Volume3D {
    type Voxel = f64;

    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn voxels(&self) -> &[f64] {
        &self.data
    }

    fn rebuild(&self, grid: Grid, voxels: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), voxels.len());
        Volume3D { grid, data: voxels }
    }

    fn pad_value(&self) -> f64 {
        AIR_HU
    }

    fn sample(&self, u: [f64; 3], interp: Interp) -> Result<f64> {
        Ok(match interp {
            Interp::Nearest => self.data[nearest_index(&self.grid, u)],
            Interp::Trilinear => trilinear(&self.grid, &self.data, u),
        })
    }
}

impl VoxelImage for LabelMask {
    type Voxel = u8;

    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn voxels(&self) -> &[u8] {
        &self.labels
    }

    fn rebuild(&self, grid: Grid, voxels: Vec<u8>) -> Self {
        debug_assert_eq!(grid.len(), voxels.len());
        LabelMask {
            grid,
            labels: voxels,
            class_set: self.class_set.clone(),
        }
    }

    fn pad_value(&self) -> u8 {
        BACKGROUND
    }

    fn sample(&self, u: [f64; 3], interp: Interp) -> Result<u8> {
        match interp {
            Interp::Nearest => Ok(self.labels[nearest_index(&self.grid, u)]),
            Interp::Trilinear => Err(Error::invalid(
                "label masks must be resampled with nearest interpolation",
            )),
        }
    }
}

/// Nearest voxel to a continuous index, clamped into the grid.
#[inline]
pub(crate) fn nearest_index(grid: &Grid, u: [f64; 3]) -> usize {
    let mut c = [0usize; 3];
    for a in 0..3 {
        let hi = (grid.dims[a] - 1) as f64;
        c[a] = u[a].round().clamp(0.0, hi) as usize;
    }
    grid.index(c[0], c[1], c[2])
}

/// Trilinear interpolation at a continuous index with border clamping.
#[inline]
pub(crate) fn trilinear(grid: &Grid, data: &[f64], u: [f64; 3]) -> f64 {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut t = [0.0f64; 3];
    for a in 0..3 {
        let hi = (grid.dims[a] - 1) as f64;
        let x = u[a].clamp(0.0, hi);
        let f = x.floor();
        i0[a] = f as usize;
        i1[a] = (i0[a] + 1).min(grid.dims[a] - 1);
        t[a] = x - f;
    }
    let at = |i: usize, j: usize, k: usize| data[grid.index(i, j, k)];
    let c00 = at(i0[0], i0[1], i0[2]) * (1.0 - t[0]) + at(i1[0], i0[1], i0[2]) * t[0];
    let c10 = at(i0[0], i1[1], i0[2]) * (1.0 - t[0]) + at(i1[0], i1[1], i0[2]) * t[0];
    let c01 = at(i0[0], i0[1], i1[2]) * (1.0 - t[0]) + at(i1[0], i0[1], i1[2]) * t[0];
    let c11 = at(i0[0], i1[1], i1[2]) * (1.0 - t[0]) + at(i1[0], i1[1], i1[2]) * t[0];
    let c0 = c00 * (1.0 - t[1]) + c10 * t[1];
    let c1 = c01 * (1.0 - t[1]) + c11 * t[1];
    c0 * (1.0 - t[2]) + c1 * t[2]
}
