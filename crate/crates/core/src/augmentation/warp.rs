use super::divergence::DisplacementField2D;
use crate::error::{Error, Result};
use crate::volume::{Interp, VoxelImage};

/// Backward in-plane warp: every axial slice is resampled at source
/// positions given by `source(i, j) -> (u, v)`.
///
/// Positions within half a voxel of the slice border are clamped onto it;
/// anything further out takes the image's pad value.
pub fn warp_with<T: VoxelImage>(
    img: &T,
    source: impl Fn(usize, usize) -> [f64; 2],
    interp: Interp,
) -> Result<T> {
    let grid = *img.grid();
    let [nx, ny, nz] = grid.dims;
    let pad = img.pad_value();
    let lim_x = nx as f64 - 0.5;
    let lim_y = ny as f64 - 0.5;
    let positions: Vec<Option<[f64; 2]>> = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i, j)))
        .map(|(i, j)| {
            let [u, v] = source(i, j);
            (u >= -0.5 && u < lim_x && v >= -0.5 && v < lim_y).then_some([u, v])
        })
        .collect();

    let mut out = Vec::with_capacity(grid.len());
    for k in 0..nz {
        for pos in &positions {
            out.push(match pos {
                Some([u, v]) => img.sample([*u, *v, k as f64], interp)?,
                None => pad,
            });
        }
    }
    Ok(img.rebuild(grid, out))
}

/// `output(p) = input(p - d(p))` on every axial slice with the same field.
/// Masks must use nearest-neighbour sampling.
pub fn warp_slicewise<T: VoxelImage>(
    img: &T,
    field: &DisplacementField2D,
    interp: Interp,
) -> Result<T> {
    let [nx, ny, _] = img.grid().dims;
    if field.dims != [nx, ny] {
        return Err(Error::invalid(format!(
            "field dims {:?} do not match slice dims {:?}",
            field.dims,
            [nx, ny]
        )));
    }
    warp_with(
        img,
        |i, j| {
            let d = field.at(i, j);
            [i as f64 - d[0], j as f64 - d[1]]
        },
        interp,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::{build_divergence_field, DivergenceSpec, WarpMode};
    use crate::volume::{ClassSet, Grid, LabelMask, Volume3D, AIR_HU};

    fn ramp() -> Volume3D {
        let g = Grid::unit([9, 9, 2]).unwrap();
        Volume3D::from_fn(g, |[i, j, k]| {
            (i * i) as f64 + 3.0 * j as f64 - 7.0 * k as f64
        })
        .unwrap()
    }

    #[test]
    fn zero_field_is_identity() {
        let v = ramp();
        let f = DisplacementField2D::zeros([9, 9]);
        assert_eq!(warp_slicewise(&v, &f, Interp::Nearest).unwrap(), v);
        assert_eq!(warp_slicewise(&v, &f, Interp::Trilinear).unwrap(), v);
    }

    #[test]
    fn unit_shift_translates_and_pads() {
        let v = ramp();
        let f = DisplacementField2D::constant([9, 9], [1.0, 0.0]);
        let w = warp_slicewise(&v, &f, Interp::Nearest).unwrap();
        for k in 0..2 {
            for j in 0..9 {
                assert_eq!(w.get(0, j, k), AIR_HU);
                for i in 1..9 {
                    assert_eq!(w.get(i, j, k), v.get(i - 1, j, k));
                }
            }
        }
        let g = Grid::unit([4, 4, 1]).unwrap();
        let m = LabelMask::new(g, vec![1; 16], ClassSet::binary()).unwrap();
        let wm = warp_slicewise(
            &m,
            &DisplacementField2D::constant([4, 4], [0.0, -1.0]),
            Interp::Nearest,
        )
        .unwrap();
        assert_eq!(wm.count(0), 4);
    }

    /// Bilinear interpolation written out per pixel, independent of the
    /// volume sampling helpers.
    fn oracle_bilinear(slice: &[[f64; 9]; 9], u: f64, v: f64) -> f64 {
        let u = u.clamp(0.0, 8.0);
        let v = v.clamp(0.0, 8.0);
        let (i0, j0) = (u.floor() as usize, v.floor() as usize);
        let (i1, j1) = ((i0 + 1).min(8), (j0 + 1).min(8));
        let (tu, tv) = (u - i0 as f64, v - j0 as f64);
        let top = slice[j0][i0] * (1.0 - tu) + slice[j0][i1] * tu;
        let bottom = slice[j1][i0] * (1.0 - tu) + slice[j1][i1] * tu;
        top * (1.0 - tv) + bottom * tv
    }

    #[test]
    fn matches_per_pixel_oracle_on_9x9() {
        let g = Grid::unit([9, 9, 1]).unwrap();
        let mut slice = [[0.0; 9]; 9];
        for (j, row) in slice.iter_mut().enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = ((i * 7 + j * 13) % 11) as f64 * 10.0 - 30.0;
            }
        }
        let v = Volume3D::from_fn(g, |[i, j, _]| slice[j][i]).unwrap();
        let spec = DivergenceSpec {
            center: [4.0, 4.0],
            sigma: 2.0,
            amplitude: 1.5,
            mode: WarpMode::Divergent,
        };
        let f = build_divergence_field([9, 9], &spec).unwrap();
        let w = warp_slicewise(&v, &f, Interp::Trilinear).unwrap();
        for j in 0..9 {
            for i in 0..9 {
                let (x, y) = (i as f64, j as f64);
                let (rx, ry) = (x - 4.0, y - 4.0);
                let r = (rx * rx + ry * ry).sqrt();
                let (dx, dy) = if r == 0.0 {
                    (0.0, 0.0)
                } else {
                    let g = (-(rx * rx + ry * ry) / 8.0).exp();
                    (1.5 * g * rx / r, 1.5 * g * ry / r)
                };
                let expected = oracle_bilinear(&slice, x - dx, y - dy);
                assert!(
                    (w.get(i, j, 0) - expected).abs() <= 1e-12,
                    "pixel ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn mismatched_field_is_rejected() {
        let v = ramp();
        assert!(warp_slicewise(&v, &DisplacementField2D::zeros([8, 9]), Interp::Nearest).is_err());
    }
}
