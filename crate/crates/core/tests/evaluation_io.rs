use std::collections::BTreeMap;

use vesselseg::evaluation::{observer_report, volume_icc, ObserverScan, ObserverStudy, Region};
use vesselseg::io::{read_mask, read_volume, write_mask, write_volume};
use vesselseg::phantom::{generate_phantom, PhantomSpec};
use vesselseg::volume::{ClassSet, Grid, LabelMask};

fn cube(g: Grid, lo: usize, hi: usize) -> LabelMask {
    LabelMask::from_fn(g, ClassSet::binary(), |c| {
        u8::from(c.iter().all(|&v| v >= lo && v <= hi))
    })
    .unwrap()
}

#[test]
fn eroded_observer_matches_closed_form() {
    let g = Grid::new([10, 10, 10], [0.5, 0.5, 2.0], [0.0; 3]).unwrap();
    let mut scans = Vec::new();
    for (id, (lo, hi)) in [("a", (2, 7)), ("b", (1, 8))] {
        let mut sessions = BTreeMap::new();
        sessions.insert("expert".to_string(), cube(g, lo, hi));
        sessions.insert("eroded".to_string(), cube(g, lo + 1, hi - 1));
        scans.push(ObserverScan {
            scan_id: id.into(),
            sessions,
        });
    }
    let study = ObserverStudy { scans };
    let t = observer_report(&study, "expert").unwrap();
    // side s against side s-2: 2 (s-2)^3 / (s^3 + (s-2)^3)
    let oracle = |s: f64| 2.0 * (s - 2.0).powi(3) / (s.powi(3) + (s - 2.0).powi(3));
    let (da, db) = (oracle(6.0), oracle(8.0));
    let a = t.get("eroded", Region::Entire).unwrap();
    assert_eq!(a.n, 2);
    assert!((a.mean - (da + db) / 2.0).abs() < 1e-12);
    assert!((a.sem - (da - db).abs() / 2.0).abs() < 1e-12);
    assert!(t.get("eroded", Region::InnerLumen).is_none());

    // volumes (mm^3, voxel 0.5 mm^3): rater order is alphabetical
    let v = |s: f64| s.powi(3) * 0.5;
    let m = vec![vec![v(4.0), v(6.0)], vec![v(6.0), v(8.0)]];
    let direct = vesselseg::evaluation::icc(&m).unwrap();
    assert_eq!(volume_icc(&study).unwrap(), direct);
}

#[test]
fn phantom_round_trips_through_nifti() {
    let ph = generate_phantom(&PhantomSpec::toy(16)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let vp = dir.path().join("cta.nii.gz");
    let mp = dir.path().join("gt.nii.gz");
    write_volume(&vp, &ph.cta).unwrap();
    write_mask(&mp, &ph.gt_cta).unwrap();
    let v = read_volume(&vp).unwrap();
    let m = read_mask(&mp).unwrap();
    assert_eq!(m.labels(), ph.gt_cta.labels());
    assert_eq!(m.class_set(), ph.gt_cta.class_set());
    assert_eq!(v.dims(), ph.cta.dims());
    for (a, b) in v.data().iter().zip(ph.cta.data()) {
        // stored as float32
        assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0));
    }
}
