//! Patient-level cohort manifests. A patient and every scan augmented from
//! it live in exactly one cohort, and test patients are never augmented.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Cohort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Cohort::Train => "train",
            Cohort::Valid => "valid",
            Cohort::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub patient_id: String,
    /// Named scan files, e.g. `cta`, `nc`, `gt_cta`, `gt_nc`.
    #[serde(default)]
    pub scans: BTreeMap<String, String>,
    pub cohort: Cohort,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmented_from: Option<String>,
}

impl SplitEntry {
    /// The original patient this entry derives from.
    pub fn source_patient(&self) -> &str {
        self.augmented_from.as_deref().unwrap_or(&self.patient_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub entries: Vec<SplitEntry>,
}

/// An augmented scan waiting to be attached to a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedScan {
    pub id: String,
    pub source_patient: String,
    pub scans: BTreeMap<String, String>,
}

impl SplitManifest {
    /// Checks the no-leakage invariants.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::format(
                "schema_version",
                format!(
                    "expected {MANIFEST_SCHEMA_VERSION}, found {}",
                    self.schema_version
                ),
            ));
        }
        let mut ids = BTreeSet::new();
        let mut home: BTreeMap<&str, Cohort> = BTreeMap::new();
        for e in &self.entries {
            if !ids.insert(e.patient_id.as_str()) {
                return Err(Error::invalid(format!(
                    "duplicate entry id {}",
                    e.patient_id
                )));
            }
            let src = e.source_patient();
            match home.get(src) {
                Some(&c) if c != e.cohort => {
                    return Err(Error::Leakage(format!(
                        "patient {src} appears in both {c} and {} cohorts",
                        e.cohort
                    )))
                }
                _ => {
                    home.insert(src, e.cohort);
                }
            }
            if e.augmented_from.is_some() && e.cohort == Cohort::Test {
                return Err(Error::Leakage(format!(
                    "augmented scan {} in the test cohort",
                    e.patient_id
                )));
            }
        }
        Ok(())
    }

    pub fn cohort(&self, cohort: Cohort) -> impl Iterator<Item = &SplitEntry> {
        self.entries.iter().filter(move |e| e.cohort == cohort)
    }

    /// Number of scans (originals plus augmentations) in a cohort.
    pub fn count(&self, cohort: Cohort) -> usize {
        self.cohort(cohort).count()
    }

    pub fn augmented_count(&self, cohort: Cohort) -> usize {
        self.cohort(cohort)
            .filter(|e| e.augmented_from.is_some())
            .count()
    }

    /// Distinct source patients in a cohort.
    pub fn patients(&self, cohort: Cohort) -> BTreeSet<String> {
        self.cohort(cohort)
            .map(|e| e.source_patient().to_string())
            .collect()
    }

    pub fn patient_cohort(&self, patient_id: &str) -> Option<Cohort> {
        self.entries
            .iter()
            .find(|e| e.patient_id == patient_id)
            .map(|e| e.cohort)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: SplitManifest = serde_json::from_reader(File::open(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        serde_json::to_writer_pretty(File::create(path)?, self)?;
        Ok(())
    }
}

/// Random patient-level partition into `(n_train, n_valid, n_test)`,
/// deterministic for a given seed.
pub fn group_split(
    patients: &[(String, BTreeMap<String, String>)],
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<SplitManifest> {
    let (n_train, n_valid, n_test) = counts;
    if n_train + n_valid + n_test != patients.len() {
        return Err(Error::invalid(format!(
            "split counts {n_train}+{n_valid}+{n_test} do not sum to {} patients",
            patients.len()
        )));
    }
    let distinct: BTreeSet<&str> = patients.iter().map(|(id, _)| id.as_str()).collect();
    if distinct.len() != patients.len() {
        return Err(Error::invalid("patient ids must be distinct"));
    }
    let mut order: Vec<usize> = (0..patients.len()).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let mut entries = Vec::with_capacity(patients.len());
    for (rank, &idx) in order.iter().enumerate() {
        let cohort = if rank < n_train {
            Cohort::Train
        } else if rank < n_train + n_valid {
            Cohort::Valid
        } else {
            Cohort::Test
        };
        let (id, scans) = &patients[idx];
        entries.push(SplitEntry {
            patient_id: id.clone(),
            scans: scans.clone(),
            cohort,
            augmented_from: None,
        });
    }
    entries.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let manifest = SplitManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed,
        entries,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Adds augmented scans to their source patient's cohort. Augmentations of
/// test patients are refused.
pub fn attach_augmented(
    manifest: &SplitManifest,
    augmented: &[AugmentedScan],
) -> Result<SplitManifest> {
    let mut out = manifest.clone();
    for aug in augmented {
        let source = manifest
            .entries
            .iter()
            .find(|e| e.patient_id == aug.source_patient && e.augmented_from.is_none())
            .ok_or_else(|| {
                Error::invalid(format!(
                    "augmented scan {} names unknown source patient {}",
                    aug.id, aug.source_patient
                ))
            })?;
        if source.cohort == Cohort::Test {
            return Err(Error::Leakage(format!(
                "refusing to attach augmentation {} of test patient {}",
                aug.id, aug.source_patient
            )));
        }
        out.entries.push(SplitEntry {
            patient_id: aug.id.clone(),
            scans: aug.scans.clone(),
            cohort: source.cohort,
            augmented_from: Some(aug.source_patient.clone()),
        });
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<(String, BTreeMap<String, String>)> {
        (0..n)
            .map(|i| (format!("P{i:03}"), BTreeMap::new()))
            .collect()
    }

    fn augment_all(m: &SplitManifest, cohorts: &[Cohort], per: usize) -> Vec<AugmentedScan> {
        m.entries
            .iter()
            .filter(|e| cohorts.contains(&e.cohort))
            .flat_map(|e| {
                (0..per).map(move |k| AugmentedScan {
                    id: format!("{}_aug{k:02}", e.patient_id),
                    source_patient: e.patient_id.clone(),
                    scans: BTreeMap::new(),
                })
            })
            .collect()
    }

    #[test]
    fn cohort_sizes_follow_counts() {
        let m = group_split(&ids(26), (10, 3, 13), 7).unwrap();
        assert_eq!(m.count(Cohort::Train), 10);
        assert_eq!(m.count(Cohort::Valid), 3);
        assert_eq!(m.count(Cohort::Test), 13);
    }

    #[test]
    fn all_train_and_determinism() {
        let m = group_split(&ids(5), (5, 0, 0), 1).unwrap();
        assert!(m.entries.iter().all(|e| e.cohort == Cohort::Train));
        assert_eq!(
            group_split(&ids(26), (10, 3, 13), 99).unwrap(),
            group_split(&ids(26), (10, 3, 13), 99).unwrap()
        );
        assert_ne!(
            group_split(&ids(26), (10, 3, 13), 99).unwrap(),
            group_split(&ids(26), (10, 3, 13), 100).unwrap()
        );
    }

    #[test]
    fn count_mismatch_is_rejected() {
        assert!(group_split(&ids(4), (1, 1, 1), 0).is_err());
    }

    #[test]
    fn augmented_scans_follow_their_source() {
        let m = group_split(&ids(26), (10, 3, 13), 3).unwrap();
        let aug = augment_all(&m, &[Cohort::Train, Cohort::Valid], 10);
        let m2 = attach_augmented(&m, &aug).unwrap();
        assert_eq!(m2.count(Cohort::Train), 110);
        assert_eq!(m2.count(Cohort::Valid), 33);
        assert_eq!(m2.augmented_count(Cohort::Test), 0);
        assert_eq!(m2.entries.len(), 143 + 13);
    }

    #[test]
    fn test_patient_augmentation_is_refused() {
        let m = group_split(&ids(6), (2, 2, 2), 3).unwrap();
        let aug = augment_all(&m, &[Cohort::Test], 1);
        assert!(matches!(
            attach_augmented(&m, &aug[..1]),
            Err(Error::Leakage(_))
        ));
    }

    #[test]
    fn hand_built_leak_is_detected() {
        let mut m = group_split(&ids(4), (2, 1, 1), 0).unwrap();
        let train = m.cohort(Cohort::Train).next().unwrap().patient_id.clone();
        m.entries.push(SplitEntry {
            patient_id: format!("{train}_aug"),
            scans: BTreeMap::new(),
            cohort: Cohort::Valid,
            augmented_from: Some(train),
        });
        assert!(matches!(m.validate(), Err(Error::Leakage(_))));
    }
}
