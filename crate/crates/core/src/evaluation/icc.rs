use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Icc {
    pub value: f64,
    /// Set when the data has no variance at all; `value` is then 1.
    pub degenerate: bool,
}

/// ICC(2,1): two-way random effects, absolute agreement, single rater.
/// `measurements[scan][rater]`.
///
/// ```text
/// ICC = (MSR - MSE) / (MSR + (k - 1) MSE + k (MSC - MSE) / n)
/// ```
pub fn icc(measurements: &[Vec<f64>]) -> Result<Icc> {
    let n = measurements.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "ICC needs at least 2 scans, got {n}"
        )));
    }
    let k = measurements[0].len();
    if k < 2 {
        return Err(Error::invalid(format!(
            "ICC needs at least 2 raters, got {k}"
        )));
    }
    if measurements.iter().any(|r| r.len() != k) {
        return Err(Error::invalid("every scan needs one measurement per rater"));
    }
    if measurements.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("measurements must be finite"));
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = measurements.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = measurements
        .iter()
        .map(|r| r.iter().sum::<f64>() / kf)
        .collect();
    let col_means: Vec<f64> = (0..k)
        .map(|j| measurements.iter().map(|r| r[j]).sum::<f64>() / nf)
        .collect();
    let ss_rows = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_cols = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_total = measurements
        .iter()
        .flatten()
        .map(|v| (v - grand).powi(2))
        .sum::<f64>();
    let ss_err = (ss_total - ss_rows - ss_cols).max(0.0);
    if ss_total <= f64::EPSILON * grand.abs().max(1.0) * nf * kf {
        return Ok(Icc {
            value: 1.0,
            degenerate: true,
        });
    }
    let msr = ss_rows / (nf - 1.0);
    let msc = ss_cols / (kf - 1.0);
    let mse = ss_err / ((nf - 1.0) * (kf - 1.0));
    let value = (msr - mse) / (msr + (kf - 1.0) * mse + kf * (msc - mse) / nf);
    Ok(Icc {
        value,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_agreement() {
        let m = vec![vec![1.0, 1.0], vec![5.0, 5.0], vec![2.5, 2.5]];
        assert_eq!(icc(&m).unwrap().value, 1.0);
    }

    #[test]
    fn constant_matrix_is_flagged() {
        let m = vec![vec![3.0, 3.0], vec![3.0, 3.0]];
        let r = icc(&m).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn shape_errors() {
        assert!(icc(&[vec![1.0, 2.0]]).is_err());
        assert!(icc(&[vec![1.0], vec![2.0]]).is_err());
        assert!(icc(&[vec![1.0, 2.0], vec![2.0]]).is_err());
    }
}
