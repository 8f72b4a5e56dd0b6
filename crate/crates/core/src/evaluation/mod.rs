//! Segmentation metrics, observer agreement and cohort statistics.

mod cohort;
mod dice;
mod icc;
mod report;

pub use cohort::{compare_cohorts, compare_samples, CohortComparison, CohortRow, LocationTest};
pub use dice::{
    dice, dice_from_counts, dice_where, multiclass_dice, per_class_dice, MulticlassDice,
};
pub use icc::{icc, Icc};
pub use report::{
    mask_volume_mm3, observer_report, volume_icc, Aggregate, MetricRow, MetricsReport,
    ObserverScan, ObserverStudy, ObserverTable, Region,
};
