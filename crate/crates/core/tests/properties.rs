use std::collections::BTreeMap;

use proptest::prelude::*;
use vesselseg::evaluation::{dice, icc, multiclass_dice};
use vesselseg::io::manifest::{attach_augmented, group_split, AugmentedScan, Cohort};
use vesselseg::volume::{
    connected_components, mask_to_bounding_box, ClassSet, Connectivity, Grid, LabelMask,
};

fn mask_strategy(max: usize, classes: u8) -> impl Strategy<Value = LabelMask> {
    (1..=max, 1..=max, 1..=max).prop_flat_map(move |(x, y, z)| {
        prop::collection::vec(0..classes, x * y * z).prop_map(move |labels| {
            let cs = if classes == 2 {
                ClassSet::binary()
            } else {
                ClassSet::aorta()
            };
            LabelMask::new(Grid::unit([x, y, z]).unwrap(), labels, cs).unwrap()
        })
    })
}

fn mask_pair(max: usize) -> impl Strategy<Value = (LabelMask, LabelMask)> {
    (1..=max, 1..=max, 1..=max).prop_flat_map(|(x, y, z)| {
        let n = x * y * z;
        (
            prop::collection::vec(0u8..3, n),
            prop::collection::vec(0u8..3, n),
        )
            .prop_map(move |(a, b)| {
                let g = Grid::unit([x, y, z]).unwrap();
                (
                    LabelMask::new(g, a, ClassSet::aorta()).unwrap(),
                    LabelMask::new(g, b, ClassSet::aorta()).unwrap(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn no_patient_crosses_cohorts(n_train in 1usize..8, n_valid in 1usize..4, n_test in 1usize..6,
                                  per in 0usize..4, seed in any::<u64>()) {
        let patients: Vec<(String, BTreeMap<String, String>)> =
            (0..n_train + n_valid + n_test).map(|i| (format!("P{i:03}"), BTreeMap::new())).collect();
        let m = group_split(&patients, (n_train, n_valid, n_test), seed).unwrap();
        let aug: Vec<AugmentedScan> = m.entries.iter()
            .filter(|e| e.cohort != Cohort::Test)
            .flat_map(|e| (0..per).map(move |k| AugmentedScan {
                id: format!("{}_aug{k}", e.patient_id),
                source_patient: e.patient_id.clone(),
                scans: BTreeMap::new(),
            }))
            .collect();
        let full = attach_augmented(&m, &aug).unwrap();
        for e in &full.entries {
            prop_assert_eq!(Some(e.cohort), full.patient_cohort(e.source_patient()));
        }
        prop_assert_eq!(full.augmented_count(Cohort::Test), 0);
        prop_assert!(full.patients(Cohort::Train).is_disjoint(&full.patients(Cohort::Test)));
        prop_assert!(full.patients(Cohort::Valid).is_disjoint(&full.patients(Cohort::Test)));
        if let Some(t) = full.entries.iter().find(|e| e.cohort == Cohort::Test) {
            let bad = AugmentedScan { id: "x".into(), source_patient: t.patient_id.clone(), scans: BTreeMap::new() };
            prop_assert!(attach_augmented(&m, &[bad]).is_err());
        }
    }

    #[test]
    fn bounding_box_contains_all_foreground(m in mask_strategy(10, 2), margin in 0usize..3) {
        match mask_to_bounding_box(&m, margin) {
            Ok(b) => {
                for (idx, &l) in m.labels().iter().enumerate() {
                    if l != 0 {
                        prop_assert!(b.contains(m.grid().coords(idx)));
                    }
                }
            }
            Err(_) => prop_assert_eq!(m.foreground_count(), 0),
        }
    }

    #[test]
    fn component_sizes_invariant_under_axis_reversal(m in mask_strategy(8, 2)) {
        // reversing x is a permutation of voxels that preserves adjacency
        let g = *m.grid();
        let [nx, _, _] = g.dims;
        let flipped = LabelMask::from_fn(g, ClassSet::binary(), |[i, j, k]| m.get(nx - 1 - i, j, k)).unwrap();
        for conn in [Connectivity::Six, Connectivity::TwentySix] {
            let a: Vec<usize> = connected_components(&m, conn, usize::MAX).iter().map(|c| c.len()).collect();
            let b: Vec<usize> = connected_components(&flipped, conn, usize::MAX).iter().map(|c| c.len()).collect();
            prop_assert_eq!(a.iter().sum::<usize>(), m.foreground_count());
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn dice_is_symmetric((a, b) in mask_pair(8)) {
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        let ab = multiclass_dice(&a, &b).unwrap();
        let ba = multiclass_dice(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn icc_is_affine_invariant(rows in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 3), 3..10),
                               scale in 0.1f64..10.0, shift in -1000.0f64..1000.0) {
        let base = icc(&rows).unwrap();
        prop_assume!(!base.degenerate);
        let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| scale * v + shift).collect()).collect();
        let t = icc(&moved).unwrap();
        prop_assert!((t.value - base.value).abs() < 1e-9, "{} vs {}", t.value, base.value);
    }
}
