//! Bounding boxes, ROI crops and pasting crops back into their source frame.

use serde::{Deserialize, Serialize};

use super::grid::Grid;
use super::image::{LabelMask, VoxelImage, BACKGROUND};
use crate::error::{Error, Result};

/// Axis-aligned box of voxel indices, inclusive on both ends, in `frame`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub frame: Grid,
}

impl BoundingBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3], frame: Grid) -> Result<Self> {
        let b = BoundingBox { lo, hi, frame };
        b.validate()?;
        Ok(b)
    }

    pub fn whole(frame: Grid) -> Self {
        BoundingBox {
            lo: [0; 3],
            hi: [frame.dims[0] - 1, frame.dims[1] - 1, frame.dims[2] - 1],
            frame,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.lo[a] > self.hi[a] {
                return Err(Error::invalid(format!(
                    "box lo {:?} exceeds hi {:?}",
                    self.lo, self.hi
                )));
            }
            if self.hi[a] >= self.frame.dims[a] {
                return Err(Error::invalid(format!(
                    "box hi {:?} outside frame dims {:?}",
                    self.hi, self.frame.dims
                )));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0] + 1,
            self.hi[1] - self.lo[1] + 1,
            self.hi[2] - self.lo[2] + 1,
        ]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        self.contains(other.lo) && self.contains(other.hi)
    }

    /// Grows by `margin` voxels on every side, clamped to the frame.
    pub fn expanded(&self, margin: usize) -> BoundingBox {
        let mut b = *self;
        for a in 0..3 {
            b.lo[a] = self.lo[a].saturating_sub(margin);
            b.hi[a] = (self.hi[a] + margin).min(self.frame.dims[a] - 1);
        }
        b
    }

    /// Physical corners (outer voxel edges) of the box.
    pub fn physical_extent(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = self.frame.origin[a] + (self.lo[a] as f64 - 0.5) * self.frame.spacing[a];
            hi[a] = self.frame.origin[a] + (self.hi[a] as f64 + 0.5) * self.frame.spacing[a];
        }
        (lo, hi)
    }

    /// The smallest box in `target` whose voxels cover this box's physical
    /// extent, clamped to `target`'s dims.
    pub fn map_to(&self, target: &Grid) -> BoundingBox {
        let (plo, phi) = self.physical_extent();
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            let max = target.dims[a] as f64 - 1.0;
            let ulo = (plo[a] - target.origin[a]) / target.spacing[a];
            let uhi = (phi[a] - target.origin[a]) / target.spacing[a];
            // voxel centres inside the extent
            lo[a] = (ulo - 1e-9).ceil().clamp(0.0, max) as usize;
            hi[a] = (uhi + 1e-9).floor().clamp(0.0, max) as usize;
            if hi[a] < lo[a] {
                hi[a] = lo[a];
            }
        }
        BoundingBox {
            lo,
            hi,
            frame: *target,
        }
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        let mut b = *self;
        for a in 0..3 {
            b.lo[a] = self.lo[a].min(other.lo[a]);
            b.hi[a] = self.hi[a].max(other.hi[a]);
        }
        b
    }
}

/// Where a crop sits in its source frame. `offset` is the source index of the
/// crop's voxel `(0, 0, 0)` and may be negative or extend past the frame when
/// the crop was padded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub offset: [i64; 3],
    pub dims: [usize; 3],
    pub frame: Grid,
}

impl Placement {
    /// Grid of the crop, positioned in the same physical space as the frame.
    pub fn crop_grid(&self) -> Grid {
        let mut origin = [0.0; 3];
        for a in 0..3 {
            origin[a] = self.frame.origin[a] + self.offset[a] as f64 * self.frame.spacing[a];
        }
        Grid {
            dims: self.dims,
            spacing: self.frame.spacing,
            origin,
        }
    }

    pub fn overlaps_frame(&self) -> bool {
        (0..3).all(|a| {
            self.offset[a] < self.frame.dims[a] as i64 && self.offset[a] + self.dims[a] as i64 > 0
        })
    }

    /// Visits every crop voxel that lands inside the frame, as
    /// `(crop linear index, frame linear index, frame coords)`.
    pub fn for_each_in_frame(&self, mut f: impl FnMut(usize, usize, [usize; 3])) {
        let crop = Grid {
            dims: self.dims,
            spacing: self.frame.spacing,
            origin: [0.0; 3],
        };
        let range = |a: usize| {
            let lo = (-self.offset[a]).max(0) as usize;
            let hi = (self.frame.dims[a] as i64 - self.offset[a]).min(self.dims[a] as i64);
            lo..hi.max(lo as i64) as usize
        };
        let (rx, ry, rz) = (range(0), range(1), range(2));
        for k in rz {
            let sk = (k as i64 + self.offset[2]) as usize;
            for j in ry.clone() {
                let sj = (j as i64 + self.offset[1]) as usize;
                for i in rx.clone() {
                    let si = (i as i64 + self.offset[0]) as usize;
                    f(
                        crop.index(i, j, k),
                        self.frame.index(si, sj, sk),
                        [si, sj, sk],
                    );
                }
            }
        }
    }
}

/// Crop window of `out_xy x out_xy` in-plane centred on the box centroid,
/// spanning the box's full z extent.
pub fn roi_placement(bbox: &BoundingBox, out_xy: usize) -> Result<Placement> {
    bbox.validate()?;
    if out_xy == 0 {
        return Err(Error::invalid("crop size must be >= 1"));
    }
    let half = (out_xy / 2) as i64;
    let centre = |a: usize| ((bbox.lo[a] + bbox.hi[a]) / 2) as i64;
    let z = bbox.size()[2];
    Ok(Placement {
        offset: [centre(0) - half, centre(1) - half, bbox.lo[2] as i64],
        dims: [out_xy, out_xy, z],
        frame: bbox.frame,
    })
}

/// Extracts the ROI around `bbox`; out-of-frame voxels get the image's pad
/// value (-1024 HU for images, background for masks).
pub fn crop_roi<T: VoxelImage>(
    img: &T,
    bbox: &BoundingBox,
    out_xy: usize,
) -> Result<(T, Placement)> {
    let pad = img.pad_value();
    crop_roi_with_pad(img, bbox, out_xy, pad)
}

pub fn crop_roi_with_pad<T: VoxelImage>(
    img: &T,
    bbox: &BoundingBox,
    out_xy: usize,
    pad: T::Voxel,
) -> Result<(T, Placement)> {
    img.grid()
        .check_same_frame(&bbox.frame, "crop_roi box frame")?;
    let placement = roi_placement(bbox, out_xy)?;
    let out = extract(img, &placement, pad);
    Ok((out, placement))
}

/// Copies the placement window out of `img`, padding outside the frame.
pub fn extract<T: VoxelImage>(img: &T, placement: &Placement, pad: T::Voxel) -> T {
    let grid = placement.crop_grid();
    let mut data = vec![pad; grid.len()];
    let src = img.voxels();
    placement.for_each_in_frame(|ci, si, _| data[ci] = src[si]);
    img.rebuild(grid, data)
}

/// Writes the in-frame part of `crop` into `canvas` at `placement`.
pub fn paste<T: VoxelImage>(canvas: &T, crop: &T, placement: &Placement) -> Result<T> {
    canvas
        .grid()
        .check_same_frame(&placement.frame, "paste placement frame")?;
    if crop.grid().dims != placement.dims {
        return Err(Error::shape(format!(
            "crop dims {:?} do not match placement {:?}",
            crop.grid().dims,
            placement.dims
        )));
    }
    let mut data = canvas.voxels().to_vec();
    let src = crop.voxels();
    placement.for_each_in_frame(|ci, si, _| data[si] = src[ci]);
    Ok(canvas.rebuild(*canvas.grid(), data))
}

/// Tightest box around the foreground, grown by `margin` and clamped.
pub fn mask_to_bounding_box(mask: &LabelMask, margin: usize) -> Result<BoundingBox> {
    let grid = mask.grid();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (idx, &l) in mask.labels().iter().enumerate() {
        if l == BACKGROUND {
            continue;
        }
        any = true;
        let c = grid.coords(idx);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    Ok(BoundingBox {
        lo,
        hi,
        frame: *grid,
    }
    .expanded(margin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{ClassSet, Volume3D, AIR_HU};

    fn ramp(dims: [usize; 3]) -> Volume3D {
        let g = Grid::unit(dims).unwrap();
        Volume3D::from_fn(g, |[i, j, k]| (i + 1000 * j + 1_000_000 * k) as f64).unwrap()
    }

    #[test]
    fn centred_box_crop_is_exact_copy() {
        let v = ramp([200, 200, 4]);
        let b = BoundingBox::new([28, 28, 0], [171, 171, 3], *v.grid()).unwrap();
        let (c, p) = crop_roi(&v, &b, 144).unwrap();
        assert_eq!(c.dims(), [144, 144, 4]);
        // centroid 99 (floored from 99.5)
        assert_eq!(p.offset, [27, 27, 0]);
        for k in 0..4 {
            for j in 0..144 {
                for i in 0..144 {
                    assert_eq!(c.get(i, j, k), v.get(i + 27, j + 27, k));
                }
            }
        }
    }

    #[test]
    fn corner_crop_pads_with_air() {
        let v = ramp([20, 20, 2]);
        let b = BoundingBox::new([0, 0, 0], [1, 1, 1], *v.grid()).unwrap();
        let (c, p) = crop_roi(&v, &b, 8).unwrap();
        assert_eq!(p.offset, [-4, -4, 0]);
        for k in 0..2 {
            for j in 0..8 {
                for i in 0..8 {
                    let (si, sj) = (i as i64 - 4, j as i64 - 4);
                    if si < 0 || sj < 0 {
                        assert_eq!(c.get(i, j, k), AIR_HU);
                    } else {
                        assert_eq!(c.get(i, j, k), v.get(si as usize, sj as usize, k));
                    }
                }
            }
        }
    }

    #[test]
    fn window_position_by_index_arithmetic() {
        let g = Grid::unit([160, 160, 50]).unwrap();
        let b = BoundingBox::new([60, 60, 10], [100, 100, 29], g).unwrap();
        let p = roi_placement(&b, 144).unwrap();
        // centroid 80 -> 80 - 72 .. 80 + 71
        assert_eq!(p.offset[0], 8);
        assert_eq!(p.offset[0] + 143, 151);
        assert_eq!(p.offset[1], 8);
        assert_eq!(p.dims, [144, 144, 20]);
        assert_eq!(p.offset[2], 10);
    }

    #[test]
    fn crop_then_paste_restores_in_bounds_voxels() {
        let v = ramp([30, 25, 6]);
        let b = BoundingBox::new([20, 2, 1], [29, 10, 4], *v.grid()).unwrap();
        let (c, p) = crop_roi(&v, &b, 16).unwrap();
        let blank = Volume3D::filled(*v.grid(), 0.0).unwrap();
        let pasted = paste(&blank, &c, &p).unwrap();
        p.for_each_in_frame(|_, si, _| assert_eq!(pasted.data()[si], v.data()[si]));
    }

    #[test]
    fn mask_crop_pads_with_background() {
        let g = Grid::unit([10, 10, 1]).unwrap();
        let m = LabelMask::new(g, vec![1; 100], ClassSet::binary()).unwrap();
        let b = BoundingBox::new([9, 9, 0], [9, 9, 0], g).unwrap();
        let (c, _) = crop_roi(&m, &b, 6).unwrap();
        assert_eq!(c.count(0), 36 - 16);
    }

    #[test]
    fn bounding_box_cases() {
        let g = Grid::unit([10, 10, 10]).unwrap();
        let single =
            LabelMask::from_fn(g, ClassSet::binary(), |c| u8::from(c == [5, 6, 7])).unwrap();
        let b = mask_to_bounding_box(&single, 0).unwrap();
        assert_eq!((b.lo, b.hi), ([5, 6, 7], [5, 6, 7]));

        let full = LabelMask::new(g, vec![1; 1000], ClassSet::binary()).unwrap();
        assert_eq!(
            mask_to_bounding_box(&full, 3).unwrap(),
            BoundingBox::whole(g)
        );

        let slab = LabelMask::from_fn(g, ClassSet::binary(), |[i, j, _]| {
            u8::from((2..=4).contains(&i) && j == 3)
        })
        .unwrap();
        let b = mask_to_bounding_box(&slab, 1).unwrap();
        assert_eq!((b.lo, b.hi), ([1, 2, 0], [5, 4, 9]));

        let empty = LabelMask::empty(g, ClassSet::binary()).unwrap();
        assert!(matches!(
            mask_to_bounding_box(&empty, 0),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn map_between_frames_covers_extent() {
        let coarse = Grid::new([10, 10, 10], [2.0; 3], [1.0; 3]).unwrap();
        let fine = coarse.respaced([20, 20, 20], [1.0; 3]);
        let b = BoundingBox::new([2, 3, 4], [5, 5, 4], coarse).unwrap();
        let m = b.map_to(&fine);
        assert_eq!((m.lo, m.hi), ([4, 6, 8], [11, 11, 9]));
    }
}
