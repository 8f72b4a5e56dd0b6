use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMask, BACKGROUND, LUMEN, WALL_ILT};

/// `2 |A ∩ B| / (|A| + |B|)`, with two empty sets counting as agreement.
#[inline]
pub fn dice_from_counts(a: usize, b: usize, both: usize) -> f64 {
    if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    }
}

/// DICE of the voxels selected by `select` in two label arrays.
pub fn dice_where(a: &[u8], b: &[u8], select: impl Fn(u8) -> bool) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "mask lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut na, mut nb, mut both) = (0, 0, 0);
    for (&x, &y) in a.iter().zip(b) {
        let (sx, sy) = (select(x), select(y));
        na += sx as usize;
        nb += sy as usize;
        both += (sx && sy) as usize;
    }
    Ok(dice_from_counts(na, nb, both))
}

/// DICE of the foreground (any nonzero label) of two masks.
pub fn dice(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "mask dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    dice_where(a.labels(), b.labels(), |l| l != BACKGROUND)
}

/// DICE for every foreground class `1..num_classes` of two label arrays.
pub fn per_class_dice(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<Vec<f64>> {
    (1..num_classes as u8)
        .map(|c| dice_where(pred, gt, |l| l == c))
        .collect()
}

/// Region scores of a lumen / wall+ILT segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MulticlassDice {
    pub lumen: f64,
    pub wall_ilt: f64,
    pub entire: f64,
}

impl MulticlassDice {
    /// Mean of the lumen and wall+ILT scores.
    pub fn combined(&self) -> f64 {
        (self.lumen + self.wall_ilt) / 2.0
    }
}

pub fn multiclass_dice(pred: &LabelMask, gt: &LabelMask) -> Result<MulticlassDice> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "mask dims differ: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    if pred.class_set() != gt.class_set() {
        return Err(Error::invalid(format!(
            "class vocabularies differ: {:?} vs {:?}",
            pred.class_set().labels(),
            gt.class_set().labels()
        )));
    }
    let (p, g) = (pred.labels(), gt.labels());
    // single pass over both arrays
    let mut counts = [[0usize; 3]; 3];
    for (&x, &y) in p.iter().zip(g) {
        if x > WALL_ILT || y > WALL_ILT {
            return Err(Error::invalid("multiclass DICE expects labels {0, 1, 2}"));
        }
        counts[x as usize][y as usize] += 1;
    }
    let row = |c: usize| counts[c].iter().sum::<usize>();
    let col = |c: usize| counts.iter().map(|r| r[c]).sum::<usize>();
    let l = LUMEN as usize;
    let w = WALL_ILT as usize;
    let fg_both = counts[l][l] + counts[l][w] + counts[w][l] + counts[w][w];
    Ok(MulticlassDice {
        lumen: dice_from_counts(row(l), col(l), counts[l][l]),
        wall_ilt: dice_from_counts(row(w), col(w), counts[w][w]),
        entire: dice_from_counts(row(l) + row(w), col(l) + col(w), fg_both),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{ClassSet, Grid};

    fn mask(labels: Vec<u8>) -> LabelMask {
        let g = Grid::unit([labels.len(), 1, 1]).unwrap();
        LabelMask::new(g, labels, ClassSet::aorta()).unwrap()
    }

    #[test]
    fn formula_cases() {
        let a = mask(vec![1, 1, 1, 1, 0, 0]);
        let b = mask(vec![0, 0, 1, 1, 1, 1]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let c = mask(vec![0, 0, 0, 0, 1, 1]);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        let e = mask(vec![0; 6]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &a).unwrap(), 0.0);
    }

    #[test]
    fn swapped_classes() {
        let gt = mask(vec![1, 1, 2, 2, 0]);
        let swapped = mask(vec![2, 2, 1, 1, 0]);
        let d = multiclass_dice(&swapped, &gt).unwrap();
        assert_eq!((d.lumen, d.wall_ilt, d.entire), (0.0, 0.0, 1.0));
        let same = multiclass_dice(&gt, &gt).unwrap();
        assert_eq!((same.lumen, same.wall_ilt, same.entire), (1.0, 1.0, 1.0));
    }

    #[test]
    fn vocabulary_mismatch() {
        let a = mask(vec![1, 0]);
        let b = LabelMask::new(*a.grid(), vec![1, 0], ClassSet::binary()).unwrap();
        assert!(multiclass_dice(&a, &b).is_err());
    }
}
