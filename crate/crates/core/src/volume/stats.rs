use serde::{Deserialize, Serialize};

use super::image::Volume3D;
use crate::error::{Error, Result};

/// Intensity summary of a scan. Computed over every voxel, air included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuStats {
    pub p25: f64,
    pub mean: f64,
    pub p75: f64,
    pub std: f64,
    pub voxel_spacing: [f64; 3],
}

/// Percentile of already sorted values by linear interpolation between
/// order statistics: rank `h = (n - 1) * q`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::invalid("percentile of empty sample"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile {q} outside [0, 1]")));
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn hu_statistics(vol: &Volume3D) -> Result<HuStats> {
    hu_statistics_of(vol.data(), vol.grid().spacing)
}

pub fn hu_statistics_of(values: &[f64], voxel_spacing: [f64; 3]) -> Result<HuStats> {
    if values.is_empty() {
        return Err(Error::invalid("HU statistics of an empty volume"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let (mean, std) = mean_and_std(values);
    Ok(HuStats {
        p25: percentile_sorted(&sorted, 0.25)?,
        mean,
        p75: percentile_sorted(&sorted, 0.75)?,
        std,
        voxel_spacing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    #[test]
    fn constant_volume() {
        let v = Volume3D::filled(Grid::unit([3, 3, 3]).unwrap(), -42.0).unwrap();
        let s = hu_statistics(&v).unwrap();
        assert_eq!((s.p25, s.mean, s.p75, s.std), (-42.0, -42.0, -42.0, 0.0));
    }

    #[test]
    fn four_values_against_sorting_oracle() {
        let g = Grid::unit([4, 1, 1]).unwrap();
        let v = Volume3D::new(g, vec![1000.0, 0.0, -1000.0, 0.0]).unwrap();
        let s = hu_statistics(&v).unwrap();
        // sorted: -1000, 0, 0, 1000; ranks 0.75 and 2.25
        let sorted = [-1000.0, 0.0, 0.0, 1000.0];
        let p25 = sorted[0] + 0.75 * (sorted[1] - sorted[0]);
        let p75 = sorted[2] + 0.25 * (sorted[3] - sorted[2]);
        let var: f64 = sorted.iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert_eq!(s.mean, 0.0);
        assert_eq!(s.p25, p25);
        assert_eq!(s.p75, p75);
        assert!((s.std - var.sqrt()).abs() < 1e-9);
        assert_eq!((s.p25, s.p75), (-250.0, 250.0));
    }

    #[test]
    fn percentile_bounds() {
        assert!(percentile_sorted(&[], 0.5).is_err());
        assert!(percentile_sorted(&[1.0], 1.5).is_err());
        assert_eq!(percentile_sorted(&[1.0, 3.0], 0.5).unwrap(), 2.0);
    }
}
