use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::rng;
use crate::volume::HuStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationTest {
    /// Welch's unequal-variance t-test.
    Welch,
    /// Two-sided permutation test on the difference of means. Enumerates
    /// every relabelling when there are at most `max_exact`, otherwise
    /// draws `rounds` random ones.
    Permutation {
        max_exact: u64,
        rounds: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub field: String,
    pub mean_a: f64,
    pub sd_a: f64,
    pub mean_b: f64,
    pub sd_b: f64,
    /// `mean_a - mean_b`.
    pub diff: f64,
    /// 95% Welch interval of the difference.
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortComparison {
    pub test: LocationTest,
    pub rows: Vec<CohortRow>,
}

impl CohortComparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("field,cohort_a,cohort_b,difference,ci_95,p_value\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.1} ± {:.1},{:.1} ± {:.1},{:.1},[{:.1} {:.1}],{}",
                r.field,
                r.mean_a,
                r.sd_a,
                r.mean_b,
                r.sd_b,
                r.diff,
                r.ci_lo,
                r.ci_hi,
                format_p(r.p_value)
            );
        }
        s
    }
}

fn format_p(p: f64) -> String {
    if p < 0.001 {
        "<0.001".into()
    } else {
        format!("{p:.3}")
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = match acc.checked_mul(n - i) {
            Some(v) => v / (i + 1),
            None => return u64::MAX,
        };
    }
    acc
}

/// Advances `idx` to the next `k`-combination of `0..n` in lexicographic
/// order; false after the last one.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn permutation_p(a: &[f64], b: &[f64], max_exact: u64, rounds: usize, seed: u64) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (na, n) = (a.len(), pooled.len());
    let total: f64 = pooled.iter().sum();
    let stat = |sum_a: f64| (sum_a / na as f64 - (total - sum_a) / (n - na) as f64).abs();
    let observed = stat(a.iter().sum());
    let tol = 1e-9
        * observed
            .max(pooled.iter().map(|v| v.abs()).fold(0.0, f64::max))
            .max(1e-300);
    if binomial(n as u64, na as u64) <= max_exact {
        let mut idx: Vec<usize> = (0..na).collect();
        let (mut hits, mut count) = (0u64, 0u64);
        loop {
            let s: f64 = idx.iter().map(|&i| pooled[i]).sum();
            count += 1;
            if stat(s) >= observed - tol {
                hits += 1;
            }
            if !next_combination(&mut idx, n) {
                break;
            }
        }
        hits as f64 / count as f64
    } else {
        let mut r = rng::stream(seed, "evaluation/permutation");
        let mut perm = pooled.clone();
        let mut hits = 0usize;
        for _ in 0..rounds {
            perm.shuffle(&mut r);
            if stat(perm[..na].iter().sum()) >= observed - tol {
                hits += 1;
            }
        }
        (hits + 1) as f64 / (rounds + 1) as f64
    }
}

/// Two-sample comparison of one scalar field.
pub fn compare_samples(field: &str, a: &[f64], b: &[f64], test: LocationTest) -> Result<CohortRow> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid(format!(
            "each cohort needs at least 2 scans, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    let (va, vb) = (sa * sa / a.len() as f64, sb * sb / b.len() as f64);
    let diff = ma - mb;
    let se = (va + vb).sqrt();
    let (ci_lo, ci_hi, p_welch) = if se > 0.0 {
        let df = (va + vb).powi(2)
            / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
        let t = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
        let q = t.inverse_cdf(0.975);
        let p = 2.0 * (1.0 - t.cdf((diff / se).abs()));
        (diff - q * se, diff + q * se, p.clamp(0.0, 1.0))
    } else {
        (diff, diff, if diff == 0.0 { 1.0 } else { 0.0 })
    };
    let p_value = match test {
        LocationTest::Welch => p_welch,
        LocationTest::Permutation {
            max_exact,
            rounds,
            seed,
        } => permutation_p(a, b, max_exact, rounds, seed),
    };
    Ok(CohortRow {
        field: field.to_string(),
        mean_a: ma,
        sd_a: sa,
        mean_b: mb,
        sd_b: sb,
        diff,
        ci_lo,
        ci_hi,
        p_value,
    })
}

/// Field-by-field comparison of two cohorts' scan statistics.
pub fn compare_cohorts(
    a: &[HuStats],
    b: &[HuStats],
    test: LocationTest,
) -> Result<CohortComparison> {
    type Getter = fn(&HuStats) -> f64;
    let fields: [(&str, Getter); 7] = [
        ("HU 25th percentile", |s| s.p25),
        ("HU mean", |s| s.mean),
        ("HU 75th percentile", |s| s.p75),
        ("HU standard deviation", |s| s.std),
        ("voxel spacing x (mm)", |s| s.voxel_spacing[0]),
        ("voxel spacing y (mm)", |s| s.voxel_spacing[1]),
        ("voxel spacing z (mm)", |s| s.voxel_spacing[2]),
    ];
    let rows = fields
        .iter()
        .map(|(name, get)| {
            let va: Vec<f64> = a.iter().map(get).collect();
            let vb: Vec<f64> = b.iter().map(get).collect();
            compare_samples(name, &va, &vb, test)
        })
        .collect::<Result<_>>()?;
    Ok(CohortComparison { test, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    const PERM: LocationTest = LocationTest::Permutation {
        max_exact: 100_000,
        rounds: 2000,
        seed: 1,
    };

    #[test]
    fn identical_cohorts_permutation_p_is_one() {
        let a = [1.0, 4.0, 2.0, 8.0];
        let r = compare_samples("x", &a, &a, PERM).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.diff, 0.0);
    }

    #[test]
    fn separated_cohorts() {
        let a = [0.0, 0.01, -0.01, 0.005];
        let b = [100.0, 100.01, 99.99, 100.005];
        let r = compare_samples("x", &a, &b, LocationTest::Welch).unwrap();
        assert!(r.p_value < 0.001);
        assert!(r.ci_lo < -99.9 && r.ci_hi > -100.1 && r.ci_hi < -99.9);
        // exact permutation: only the observed split and its mirror are as
        // extreme, 2 of C(8, 4) = 70
        let p = compare_samples("x", &a, &b, PERM).unwrap().p_value;
        assert!((p - 2.0 / 70.0).abs() < 1e-15);
    }

    #[test]
    fn welch_matches_hand_computation() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0];
        let r = compare_samples("x", &a, &b, LocationTest::Welch).unwrap();
        // va = (5/3)/4, vb = 4/3, t = -1.5 / sqrt(va + vb)
        let (va, vb) = (5.0 / 12.0, 4.0 / 3.0);
        let df = (va + vb) * (va + vb) / (va * va / 3.0 + vb * vb / 2.0);
        let t = StudentsT::new(0.0, 1.0, df).unwrap();
        let p = 2.0 * (1.0 - t.cdf(1.5 / (va + vb as f64).sqrt()));
        assert!((r.p_value - p).abs() < 1e-12);
        assert!(r.p_value > 0.2 && r.p_value < 0.4);
    }

    #[test]
    fn small_cohort_rejected() {
        assert!(compare_samples("x", &[1.0], &[1.0, 2.0], LocationTest::Welch).is_err());
    }

    #[test]
    fn csv_has_interval_column() {
        let s = |m: f64| HuStats {
            p25: m,
            mean: m + 1.0,
            p75: m + 2.0,
            std: 3.0 + m / 10.0,
            voxel_spacing: [0.8, 0.8, 1.0 + m / 100.0],
        };
        let c = compare_cohorts(
            &[s(1.0), s(2.0), s(4.0)],
            &[s(3.0), s(5.0)],
            LocationTest::Welch,
        )
        .unwrap();
        let csv = c.to_csv();
        assert_eq!(csv.lines().count(), 8);
        assert!(csv.lines().nth(1).unwrap().contains(",["));
    }

    #[test]
    fn combinations_enumerate_all() {
        let mut idx = vec![0, 1];
        let mut count = 1;
        while next_combination(&mut idx, 5) {
            count += 1;
        }
        assert_eq!(count, 10);
        assert_eq!(binomial(26, 13), 10_400_600);
    }
}
