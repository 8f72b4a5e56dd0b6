use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::dice::{dice, multiclass_dice, MulticlassDice};
use super::icc::{icc, Icc};
use crate::error::{Error, Result};
use crate::volume::LabelMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    InnerLumen,
    Entire,
    WallIlt,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::InnerLumen, Region::Entire, Region::WallIlt];

    pub fn label(self) -> &'static str {
        match self {
            Region::InnerLumen => "Inner Lumen",
            Region::Entire => "Entire Aorta",
            Region::WallIlt => "Outer Wall + ILT Only",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Region::InnerLumen => "inner_lumen",
            Region::Entire => "entire",
            Region::WallIlt => "wall_ilt",
        }
    }
}

/// Mean and standard error of the mean (sample standard deviation over
/// `sqrt(n)`; zero for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub sem: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Aggregate> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sem = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            0.0
        };
        Some(Aggregate {
            n: values.len(),
            mean,
            sem,
        })
    }

    /// `96.8 ± 0.2 %` for fractions in `[0, 1]`.
    pub fn percent(&self) -> String {
        format!("{:.1} ± {:.1} %", 100.0 * self.mean, 100.0 * self.sem)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scan_id: String,
    pub region: Region,
    pub dice: f64,
    pub model_id: String,
}

/// Per-scan DICE rows with per-model, per-region aggregates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn push(&mut self, scan_id: &str, model_id: &str, region: Region, dice: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&dice) {
            return Err(Error::invalid(format!("DICE {dice} outside [0, 1]")));
        }
        self.rows.push(MetricRow {
            scan_id: scan_id.to_string(),
            region,
            dice,
            model_id: model_id.to_string(),
        });
        Ok(())
    }

    pub fn push_multiclass(
        &mut self,
        scan_id: &str,
        model_id: &str,
        d: &MulticlassDice,
    ) -> Result<()> {
        self.push(scan_id, model_id, Region::InnerLumen, d.lumen)?;
        self.push(scan_id, model_id, Region::Entire, d.entire)?;
        self.push(scan_id, model_id, Region::WallIlt, d.wall_ilt)
    }

    /// Model IDs in order of first appearance.
    pub fn models(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.model_id) {
                out.push(r.model_id.clone());
            }
        }
        out
    }

    pub fn aggregate(&self, model_id: &str, region: Region) -> Option<Aggregate> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.model_id == model_id && r.region == region)
            .map(|r| r.dice)
            .collect();
        Aggregate::of(&v)
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from("scan_id,model_id,region,dice\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.scan_id,
                r.model_id,
                r.region.key(),
                r.dice
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("model_id,region,n,mean,sem\n");
        for m in self.models() {
            for region in Region::ALL {
                if let Some(a) = self.aggregate(&m, region) {
                    let _ = writeln!(s, "{m},{},{},{},{}", region.key(), a.n, a.mean, a.sem);
                }
            }
        }
        s
    }

    /// Regions as rows, models as columns, cells `mean ± s.e.m. %`.
    pub fn table(&self) -> String {
        let models = self.models();
        let mut s = format!("{:<24}", "Region (DICE, mean ± s.e.m.)");
        for m in &models {
            let _ = write!(s, " | {m:>18}");
        }
        s.push('\n');
        for region in Region::ALL {
            if models.iter().all(|m| self.aggregate(m, region).is_none()) {
                continue;
            }
            let _ = write!(s, "{:<24}", region.label());
            for m in &models {
                let cell = self
                    .aggregate(m, region)
                    .map(|a| a.percent())
                    .unwrap_or_else(|| "-".into());
                let _ = write!(s, " | {cell:>18}");
            }
            s.push('\n');
        }
        s
    }
}

/// Repeated segmentations of the same scans by observers or sessions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObserverStudy {
    pub scans: Vec<ObserverScan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverScan {
    pub scan_id: String,
    pub sessions: BTreeMap<String, LabelMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverTable {
    pub ground: String,
    /// `(observer, region, aggregate)`.
    pub cells: Vec<(String, Region, Aggregate)>,
}

impl ObserverTable {
    pub fn get(&self, observer: &str, region: Region) -> Option<Aggregate> {
        self.cells
            .iter()
            .find(|(o, r, _)| o == observer && *r == region)
            .map(|c| c.2)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("region,observer,n,mean,sem\n");
        for (o, r, a) in &self.cells {
            let _ = writeln!(s, "{},{o},{},{},{}", r.label(), a.n, a.mean, a.sem);
        }
        s
    }
}

/// DICE of every other session against `ground`, per region. Contrast
/// (three-class) masks report all three regions, binary masks only the
/// entire aorta.
pub fn observer_report(study: &ObserverStudy, ground: &str) -> Result<ObserverTable> {
    if study.scans.is_empty() {
        return Err(Error::invalid("observer study has no scans"));
    }
    let mut values: BTreeMap<(String, Region), Vec<f64>> = BTreeMap::new();
    for scan in &study.scans {
        let reference = scan.sessions.get(ground).ok_or_else(|| {
            Error::invalid(format!("scan {} has no '{ground}' session", scan.scan_id))
        })?;
        if scan.sessions.len() < 2 {
            return Err(Error::invalid(format!(
                "scan {} has no session to pair with",
                scan.scan_id
            )));
        }
        for (obs, mask) in scan.sessions.iter().filter(|(o, _)| o.as_str() != ground) {
            if mask.class_set().is_binary() {
                values
                    .entry((obs.clone(), Region::Entire))
                    .or_default()
                    .push(dice(mask, reference)?);
            } else {
                let d = multiclass_dice(mask, reference)?;
                for (region, v) in [
                    (Region::InnerLumen, d.lumen),
                    (Region::Entire, d.entire),
                    (Region::WallIlt, d.wall_ilt),
                ] {
                    values.entry((obs.clone(), region)).or_default().push(v);
                }
            }
        }
    }
    let cells = values
        .into_iter()
        .map(|((o, r), v)| (o, r, Aggregate::of(&v).expect("nonempty")))
        .collect();
    Ok(ObserverTable {
        ground: ground.to_string(),
        cells,
    })
}

/// Segmented volume in mm³.
pub fn mask_volume_mm3(mask: &LabelMask) -> f64 {
    let s = mask.grid().spacing;
    mask.foreground_count() as f64 * s[0] * s[1] * s[2]
}

/// ICC over total segmented volume, sessions as raters (ordered by name).
pub fn volume_icc(study: &ObserverStudy) -> Result<Icc> {
    let names: Vec<&String> = study
        .scans
        .first()
        .ok_or_else(|| Error::invalid("observer study has no scans"))?
        .sessions
        .keys()
        .collect();
    let mut m = Vec::with_capacity(study.scans.len());
    for scan in &study.scans {
        if scan.sessions.keys().collect::<Vec<_>>() != names {
            return Err(Error::invalid(format!(
                "scan {} has a different set of sessions",
                scan.scan_id
            )));
        }
        m.push(scan.sessions.values().map(mask_volume_mm3).collect());
    }
    icc(&m)
}
