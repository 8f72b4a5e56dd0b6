use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::grid::Grid;
use super::image::{ClassSet, LabelMask, BACKGROUND};
use super::roi::BoundingBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face, edge and corner neighbours.
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::invalid(format!(
                "connectivity must be 6 or 26, got {other}"
            ))),
        }
    }

    fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// One connected foreground region, stored as sorted linear voxel indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub voxels: Vec<usize>,
    pub bbox: BoundingBox,
}

impl Component {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn to_mask(&self) -> LabelMask {
        let grid = self.bbox.frame;
        let mut labels = vec![BACKGROUND; grid.len()];
        for &v in &self.voxels {
            labels[v] = 1;
        }
        LabelMask::new(grid, labels, ClassSet::binary()).expect("component voxels lie in frame")
    }
}

/// Connected components of the non-background voxels, largest first, at most
/// `keep_k` of them. Equal-sized components are ordered by their first voxel.
pub fn connected_components(
    mask: &LabelMask,
    connectivity: Connectivity,
    keep_k: usize,
) -> Vec<Component> {
    let grid = *mask.grid();
    let labels = mask.labels();
    let offsets = connectivity.offsets();
    let mut seen = vec![false; grid.len()];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..grid.len() {
        if seen[start] || labels[start] == BACKGROUND {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut voxels = Vec::new();
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        while let Some(v) = queue.pop_front() {
            voxels.push(v);
            let c = grid.coords(v);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            for off in &offsets {
                let n = [
                    c[0] as i64 + off[0],
                    c[1] as i64 + off[1],
                    c[2] as i64 + off[2],
                ];
                if !grid.contains(n) {
                    continue;
                }
                let ni = grid.index(n[0] as usize, n[1] as usize, n[2] as usize);
                if !seen[ni] && labels[ni] != BACKGROUND {
                    seen[ni] = true;
                    queue.push_back(ni);
                }
            }
        }
        voxels.sort_unstable();
        comps.push(Component {
            voxels,
            bbox: BoundingBox {
                lo,
                hi,
                frame: grid,
            },
        });
    }
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a.voxels[0].cmp(&b.voxels[0])));
    comps.truncate(keep_k);
    comps
}

/// Largest component as a binary mask, or an all-background mask when the
/// input is empty.
pub fn largest_component(mask: &LabelMask, connectivity: Connectivity) -> LabelMask {
    match connected_components(mask, connectivity, 1)
        .into_iter()
        .next()
    {
        Some(c) => c.to_mask(),
        None => LabelMask::empty(*mask.grid(), ClassSet::binary()).expect("valid grid"),
    }
}

/// Number of 8-connected foreground regions in axial slice `k`.
pub fn slice_component_count(mask: &LabelMask, k: usize) -> usize {
    slice_components(mask, k).len()
}

/// 8-connected foreground regions of one axial slice, each as a list of
/// `(i, j)` pixels.
pub fn slice_components(mask: &LabelMask, k: usize) -> Vec<Vec<[usize; 2]>> {
    let grid: Grid = *mask.grid();
    let [nx, ny, _] = grid.dims;
    let labels = mask.labels();
    let mut seen = vec![false; nx * ny];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for j0 in 0..ny {
        for i0 in 0..nx {
            let p0 = i0 + nx * j0;
            if seen[p0] || labels[grid.index(i0, j0, k)] == BACKGROUND {
                continue;
            }
            seen[p0] = true;
            stack.push([i0, j0]);
            let mut pixels = Vec::new();
            while let Some([i, j]) = stack.pop() {
                pixels.push([i, j]);
                for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= nx as i64 || nj >= ny as i64 {
                            continue;
                        }
                        let (ni, nj) = (ni as usize, nj as usize);
                        let p = ni + nx * nj;
                        if !seen[p] && labels[grid.index(ni, nj, k)] != BACKGROUND {
                            seen[p] = true;
                            stack.push([ni, nj]);
                        }
                    }
                }
            }
            out.push(pixels);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(dims: [usize; 3], fg: &[[usize; 3]]) -> LabelMask {
        let g = Grid::unit(dims).unwrap();
        LabelMask::from_fn(g, ClassSet::binary(), |c| u8::from(fg.contains(&c))).unwrap()
    }

    #[test]
    fn keeps_largest_blob() {
        let mut fg = Vec::new();
        for i in 0..10 {
            fg.push([i, 0, 0]);
        }
        for i in 0..5 {
            fg.push([i, 5, 5]);
        }
        let m = mask_with([12, 8, 8], &fg);
        let comps = connected_components(&m, Connectivity::Six, 1);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].len(), 10);
        let all = connected_components(&m, Connectivity::Six, 10);
        assert_eq!(
            all.iter().map(Component::len).collect::<Vec<_>>(),
            vec![10, 5]
        );
    }

    #[test]
    fn single_voxel() {
        let m = mask_with([3, 3, 3], &[[1, 1, 1]]);
        let comps = connected_components(&m, Connectivity::TwentySix, 5);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].len(), 1);
        assert_eq!(comps[0].bbox.lo, [1, 1, 1]);
    }

    #[test]
    fn diagonal_voxels_depend_on_connectivity() {
        let m = mask_with([3, 3, 3], &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(
            connected_components(&m, Connectivity::TwentySix, 9).len(),
            1
        );
        assert_eq!(connected_components(&m, Connectivity::Six, 9).len(), 2);
    }

    #[test]
    fn empty_mask_gives_no_components() {
        let m = mask_with([4, 4, 4], &[]);
        assert!(connected_components(&m, Connectivity::Six, 3).is_empty());
    }

    #[test]
    fn slice_counts() {
        let m = mask_with([6, 6, 2], &[[0, 0, 0], [1, 1, 0], [4, 4, 0], [2, 2, 1]]);
        assert_eq!(slice_component_count(&m, 0), 2);
        assert_eq!(slice_component_count(&m, 1), 1);
    }
}
