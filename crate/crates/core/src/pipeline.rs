//! Two-stage cascade: low-resolution aorta detection, bounding boxes, then
//! high-resolution segmentation of each box and a merged full-volume mask.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{
    load_checkpoint, normalize_input, unet_forward, ForwardOptions, HuWindow, ModelParams, Tensor,
};
use crate::volume::{
    crop_roi, downsample_inplane, isotropic_grid, largest_component, mask_to_bounding_box,
    resample_to_grid, slice_component_count, BoundingBox, ClassSet, Connectivity, Grid, Interp,
    LabelMask, Placement, Volume3D, BACKGROUND,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Contrast,
    NonContrast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    /// Aortic arch with the top of both limbs.
    Arch,
    /// Descending aorta and abdominal aneurysm.
    Descending,
}

/// Anything that maps a volume to per-voxel class probabilities on the same
/// grid (`num_classes x dims`).
pub trait Segmenter {
    fn num_classes(&self) -> usize;
    fn predict(&self, vol: &Volume3D) -> Result<Tensor>;
}

/// A trained U-Net applied to windowed intensities.
#[derive(Debug, Clone)]
pub struct UNetSegmenter {
    pub params: ModelParams,
    pub window: HuWindow,
}

impl Segmenter for UNetSegmenter {
    fn num_classes(&self) -> usize {
        self.params.spec().num_classes
    }

    fn predict(&self, vol: &Volume3D) -> Result<Tensor> {
        let x = normalize_input(vol, self.window)?;
        unet_forward(&self.params, &x, ForwardOptions::default())
    }
}

/// Ground-truth passthrough: looks up the label at each voxel centre
/// (nearest neighbour in physical space) and returns it one-hot. Positions
/// outside the truth's extent are background.
#[derive(Debug, Clone)]
pub struct OracleSegmenter {
    truth: LabelMask,
    num_classes: usize,
}

impl OracleSegmenter {
    /// `num_classes == 2` collapses every foreground label to 1.
    pub fn new(truth: LabelMask, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("oracle needs at least 2 classes"));
        }
        let truth = if num_classes == 2 {
            truth.binarized()
        } else {
            truth
        };
        if let Some(&l) = truth.labels().iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::invalid(format!(
                "truth label {l} outside {num_classes} classes"
            )));
        }
        Ok(OracleSegmenter { truth, num_classes })
    }

    fn label_at(&self, p: [f64; 3]) -> u8 {
        let g = self.truth.grid();
        let u = g.to_index(p);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if !(u[a] >= -0.5 && u[a] < g.dims[a] as f64 - 0.5) {
                return BACKGROUND;
            }
            idx[a] = (u[a].round().max(0.0) as usize).min(g.dims[a] - 1);
        }
        self.truth.get(idx[0], idx[1], idx[2])
    }
}

impl Segmenter for OracleSegmenter {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&self, vol: &Volume3D) -> Result<Tensor> {
        let g = vol.grid();
        let n = g.len();
        let mut t = Tensor::zeros(self.num_classes, g.dims);
        for idx in 0..n {
            let c = g.coords(idx);
            let l = self.label_at(g.to_physical([c[0] as f64, c[1] as f64, c[2] as f64]));
            t.data[l as usize * n + idx] = 1.0;
        }
        Ok(t)
    }
}

/// Stage-1 detector and per-region stage-2 models for one modality.
pub struct ModelBundle {
    pub modality: Modality,
    pub roi_model: Box<dyn Segmenter>,
    pub region_models: BTreeMap<RegionKind, Box<dyn Segmenter>>,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        if self.roi_model.num_classes() != 2 {
            return Err(Error::InvalidSpec(format!(
                "ROI model must be binary, has {} classes",
                self.roi_model.num_classes()
            )));
        }
        let (needed, classes): (&[RegionKind], usize) = match self.modality {
            Modality::Contrast => (&[RegionKind::Arch, RegionKind::Descending], 3),
            Modality::NonContrast => (&[RegionKind::Descending], 2),
        };
        for r in needed {
            let m = self
                .region_models
                .get(r)
                .ok_or_else(|| Error::InvalidSpec(format!("bundle lacks a {r:?} model")))?;
            if m.num_classes() != classes {
                return Err(Error::InvalidSpec(format!(
                    "{r:?} model has {} classes, expected {classes}",
                    m.num_classes()
                )));
            }
        }
        Ok(())
    }

    /// Ground-truth passthrough bundle for closure tests.
    pub fn oracle(modality: Modality, truth: &LabelMask) -> Result<Self> {
        let mut region_models: BTreeMap<RegionKind, Box<dyn Segmenter>> = BTreeMap::new();
        match modality {
            Modality::Contrast => {
                region_models.insert(
                    RegionKind::Arch,
                    Box::new(OracleSegmenter::new(truth.clone(), 3)?),
                );
                region_models.insert(
                    RegionKind::Descending,
                    Box::new(OracleSegmenter::new(truth.clone(), 3)?),
                );
            }
            Modality::NonContrast => {
                region_models.insert(
                    RegionKind::Descending,
                    Box::new(OracleSegmenter::new(truth.clone(), 2)?),
                );
            }
        }
        Ok(ModelBundle {
            modality,
            roi_model: Box::new(OracleSegmenter::new(truth.clone(), 2)?),
            region_models,
        })
    }
}

/// On-disk description of a bundle; checkpoint paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub modality: Modality,
    pub roi_model: PathBuf,
    pub region_models: BTreeMap<RegionKind, PathBuf>,
    #[serde(default)]
    pub window: HuWindow,
}

impl BundleManifest {
    pub fn load(path: &Path) -> Result<(Self, ModelBundle)> {
        let manifest: BundleManifest = serde_json::from_reader(std::fs::File::open(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let seg = |p: &PathBuf| -> Result<Box<dyn Segmenter>> {
            Ok(Box::new(UNetSegmenter {
                params: load_checkpoint(base.join(p))?,
                window: manifest.window,
            }))
        };
        let bundle = ModelBundle {
            modality: manifest.modality,
            roi_model: seg(&manifest.roi_model)?,
            region_models: manifest
                .region_models
                .iter()
                .map(|(k, p)| Ok((*k, seg(p)?)))
                .collect::<Result<_>>()?,
        };
        bundle.validate()?;
        Ok((manifest, bundle))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// In-plane size of the stage-1 input.
    pub lowres_xy: usize,
    /// In-plane size of the stage-2 crops.
    pub roi_xy: usize,
    /// Margin added to each box in high-resolution voxels.
    pub margin: usize,
    /// Isotropic spacing of the high-resolution frame; defaults to the
    /// scan's finest in-plane spacing.
    pub iso_spacing: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            lowres_xy: 160,
            roi_xy: 144,
            margin: 12,
            iso_spacing: None,
        }
    }
}

impl PipelineConfig {
    pub fn iso_grid(&self, scan: &Grid) -> Result<Grid> {
        let t = self
            .iso_spacing
            .unwrap_or(scan.spacing[0].min(scan.spacing[1]));
        isotropic_grid(scan, t)
    }

    /// In-plane factor taking the high-resolution frame to `lowres_xy`
    /// (3.2 for 512); never upsamples.
    pub fn lowres_factor(&self, iso: &Grid) -> f64 {
        (iso.dims[0].max(iso.dims[1]) as f64 / self.lowres_xy as f64).max(1.0)
    }
}

/// Stage-1 output: boxes in the high-resolution isotropic frame plus the
/// low-resolution aorta mask they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub boxes: Vec<(RegionKind, BoundingBox)>,
    pub lowres_mask: LabelMask,
}

fn argmax_mask(probs: &Tensor, grid: Grid, class_set: ClassSet) -> Result<LabelMask> {
    LabelMask::new(grid, crate::network::argmax_labels(probs), class_set)
}

/// Inferior-most slice of the topmost run of axial slices in which the
/// aorta has two or more in-plane components.
pub fn arch_split_slice(aorta: &LabelMask) -> Option<usize> {
    let nz = aorta.dims()[2];
    let mut k = nz;
    let mut in_run = false;
    let mut lowest = None;
    while k > 0 {
        k -= 1;
        let multi = slice_component_count(aorta, k) >= 2;
        if multi {
            in_run = true;
            lowest = Some(k);
        } else if in_run {
            break;
        }
    }
    lowest
}

fn slab_box(mask: &LabelMask, z: std::ops::Range<usize>) -> Option<BoundingBox> {
    let [nx, ny, _] = mask.dims();
    let mut sub = vec![BACKGROUND; mask.labels().len()];
    let mut any = false;
    for k in z {
        let s = k * nx * ny;
        for p in s..s + nx * ny {
            if mask.labels()[p] != BACKGROUND {
                sub[p] = 1;
                any = true;
            }
        }
    }
    if !any {
        return None;
    }
    let m = LabelMask::new(*mask.grid(), sub, ClassSet::binary()).ok()?;
    mask_to_bounding_box(&m, 0).ok()
}

/// Runs stage 1 on the high-resolution isotropic volume `iso`.
pub fn detect_roi(
    iso: &Volume3D,
    roi_model: &dyn Segmenter,
    modality: Modality,
    cfg: &PipelineConfig,
) -> Result<Detection> {
    let factor = cfg.lowres_factor(iso.grid());
    let low = downsample_inplane(iso, factor, Interp::Trilinear)?;
    let probs = roi_model.predict(&low)?;
    if probs.dims != low.dims() || probs.channels != 2 {
        return Err(Error::shape("ROI model output does not match its input"));
    }
    let raw = argmax_mask(&probs, *low.grid(), ClassSet::binary())?;
    let aorta = largest_component(&raw, Connectivity::TwentySix);
    if aorta.foreground_count() == 0 {
        let max_p = probs.channel(1).iter().copied().fold(0.0, f64::max);
        return Err(Error::NoAortaFound(format!(
            "stage-1 prediction on {:?} voxels is empty (max foreground probability {max_p:.3})",
            low.dims()
        )));
    }
    let to_hi = |b: BoundingBox| b.map_to(iso.grid()).expanded(cfg.margin);
    let nz = aorta.dims()[2];
    let mut boxes = Vec::new();
    match modality {
        Modality::NonContrast => {
            boxes.push((
                RegionKind::Descending,
                to_hi(mask_to_bounding_box(&aorta, 0)?),
            ));
        }
        Modality::Contrast => match arch_split_slice(&aorta) {
            Some(split) => {
                if let Some(b) = slab_box(&aorta, split..nz) {
                    boxes.push((RegionKind::Arch, to_hi(b)));
                }
                if let Some(b) = slab_box(&aorta, 0..split) {
                    boxes.push((RegionKind::Descending, to_hi(b)));
                }
            }
            None => {
                log::warn!("no slice with two aortic limbs; emitting a single descending box");
                boxes.push((
                    RegionKind::Descending,
                    to_hi(mask_to_bounding_box(&aorta, 0)?),
                ));
            }
        },
    }
    Ok(Detection {
        boxes,
        lowres_mask: aorta,
    })
}

/// Stage-2 output for one box.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPrediction {
    pub region: RegionKind,
    pub bbox: BoundingBox,
    pub placement: Placement,
    pub probs: Tensor,
    pub mask: LabelMask,
}

/// Crops `roi_xy x roi_xy x Z` around `bbox` and segments it.
pub fn segment_region(
    iso: &Volume3D,
    region: RegionKind,
    bbox: &BoundingBox,
    model: &dyn Segmenter,
    cfg: &PipelineConfig,
) -> Result<RegionPrediction> {
    let (crop, placement) = crop_roi(iso, bbox, cfg.roi_xy)?;
    let size = bbox.size();
    if size[0] > cfg.roi_xy || size[1] > cfg.roi_xy {
        log::warn!(
            "{region:?} box {size:?} exceeds the {} crop window",
            cfg.roi_xy
        );
    }
    let probs = model.predict(&crop)?;
    if probs.dims != crop.dims() {
        return Err(Error::shape("region model output does not match its crop"));
    }
    let class_set = if probs.channels == 2 {
        ClassSet::binary()
    } else {
        ClassSet::aorta()
    };
    let mask = argmax_mask(&probs, *crop.grid(), class_set)?;
    Ok(RegionPrediction {
        region,
        bbox: *bbox,
        placement,
        probs,
        mask,
    })
}

/// Merges region predictions into `frame`. Each part only contributes
/// inside its box; where parts overlap the (part, class) with the highest
/// probability wins, background included. Uncovered voxels are background.
pub fn merge_predictions(
    frame: &Grid,
    parts: &[RegionPrediction],
    class_set: ClassSet,
) -> Result<LabelMask> {
    let mut best = vec![f64::NEG_INFINITY; frame.len()];
    let mut labels = vec![BACKGROUND; frame.len()];
    for part in parts {
        if !part.placement.frame.same_frame(frame) || !part.bbox.frame.same_frame(frame) {
            return Err(Error::shape("part placement is not in the merge frame"));
        }
        if !part.placement.overlaps_frame() {
            return Err(Error::invalid("part placement lies outside the frame"));
        }
        let n = part.probs.spatial();
        let classes = part.probs.channels;
        part.placement.for_each_in_frame(|ci, fi, coords| {
            if !part.bbox.contains(coords) {
                return;
            }
            for c in 0..classes {
                let p = part.probs.data[c * n + ci];
                if p > best[fi] {
                    best[fi] = p;
                    labels[fi] = c as u8;
                }
            }
        });
    }
    LabelMask::new(*frame, labels, class_set)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub resample_s: f64,
    pub detect_s: f64,
    pub segment_s: f64,
    pub merge_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    /// On the input scan's grid.
    pub full_mask: LabelMask,
    /// In the high-resolution isotropic frame.
    pub boxes: Vec<(RegionKind, BoundingBox)>,
    pub regions: Vec<RegionPrediction>,
    pub lowres_mask: LabelMask,
    pub timing: StageTiming,
}

/// Detection, per-box segmentation and merging, end to end.
pub fn run_pipeline(
    vol: &Volume3D,
    bundle: &ModelBundle,
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    bundle.validate().map_err(|e| e.in_stage("bundle"))?;
    let t0 = Instant::now();
    let iso_grid = cfg
        .iso_grid(vol.grid())
        .map_err(|e| e.in_stage("resample"))?;
    let iso =
        resample_to_grid(vol, &iso_grid, Interp::Trilinear).map_err(|e| e.in_stage("resample"))?;
    let t1 = Instant::now();
    let det = detect_roi(&iso, bundle.roi_model.as_ref(), bundle.modality, cfg)
        .map_err(|e| e.in_stage("detect_roi"))?;
    let t2 = Instant::now();
    let mut regions = Vec::with_capacity(det.boxes.len());
    for (region, bbox) in &det.boxes {
        let model = bundle.region_models.get(region).ok_or_else(|| {
            Error::InvalidSpec(format!("no model for {region:?}")).in_stage("segment_region")
        })?;
        regions.push(
            segment_region(&iso, *region, bbox, model.as_ref(), cfg)
                .map_err(|e| e.in_stage("segment_region"))?,
        );
    }
    let t3 = Instant::now();
    let class_set = match bundle.modality {
        Modality::Contrast => ClassSet::aorta(),
        Modality::NonContrast => ClassSet::binary(),
    };
    let merged =
        merge_predictions(&iso_grid, &regions, class_set).map_err(|e| e.in_stage("merge"))?;
    let full_mask =
        resample_to_grid(&merged, vol.grid(), Interp::Nearest).map_err(|e| e.in_stage("merge"))?;
    let t4 = Instant::now();
    let secs = |a: Instant, b: Instant| (b - a).as_secs_f64();
    Ok(PipelineResult {
        full_mask,
        boxes: det.boxes,
        regions,
        lowres_mask: det.lowres_mask,
        timing: StageTiming {
            resample_s: secs(t0, t1),
            detect_s: secs(t1, t2),
            segment_s: secs(t2, t3),
            merge_s: secs(t3, t4),
            total_s: secs(t0, t4),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn part(
        frame: Grid,
        offset: [i64; 3],
        dims: [usize; 3],
        probs: Vec<f64>,
        classes: usize,
    ) -> RegionPrediction {
        let placement = Placement {
            offset,
            dims,
            frame,
        };
        let t = Tensor::new(classes, dims, probs).unwrap();
        let mask = LabelMask::new(
            placement.crop_grid(),
            crate::network::argmax_labels(&t),
            if classes == 2 {
                ClassSet::binary()
            } else {
                ClassSet::aorta()
            },
        )
        .unwrap();
        RegionPrediction {
            region: RegionKind::Descending,
            bbox: BoundingBox::whole(frame),
            placement,
            probs: t,
            mask,
        }
    }

    #[test]
    fn max_probability_rule_on_three_voxels() {
        // voxel 0: only part A (lumen 0.6); voxel 1: A says lumen 0.55,
        // B says wall 0.7 -> wall; voxel 2: A says wall 0.5, B says
        // background 0.8 -> background
        let frame = Grid::unit([3, 1, 1]).unwrap();
        let a = part(
            frame,
            [0, 0, 0],
            [3, 1, 1],
            vec![0.3, 0.25, 0.2, 0.6, 0.55, 0.3, 0.1, 0.2, 0.5],
            3,
        );
        let b = part(
            frame,
            [1, 0, 0],
            [2, 1, 1],
            vec![0.2, 0.8, 0.1, 0.1, 0.7, 0.1],
            3,
        );
        let m = merge_predictions(&frame, &[a.clone(), b.clone()], ClassSet::aorta()).unwrap();
        assert_eq!(m.labels(), &[1, 2, 0]);
        // order does not matter when there are no exact ties
        let m2 = merge_predictions(&frame, &[b, a], ClassSet::aorta()).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn whole_frame_part_is_identity_paste() {
        let frame = Grid::unit([2, 2, 1]).unwrap();
        let p = part(
            frame,
            [0, 0, 0],
            [2, 2, 1],
            vec![0.9, 0.1, 0.4, 0.3, 0.1, 0.9, 0.6, 0.7],
            2,
        );
        let m = merge_predictions(&frame, &[p.clone()], ClassSet::binary()).unwrap();
        assert_eq!(m.labels(), p.mask.labels());
    }

    #[test]
    fn parts_only_contribute_inside_their_box() {
        let frame = Grid::unit([4, 1, 1]).unwrap();
        let mut p = part(
            frame,
            [0, 0, 0],
            [4, 1, 1],
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0],
            2,
        );
        p.bbox = BoundingBox::new([1, 0, 0], [2, 0, 0], frame).unwrap();
        let m = merge_predictions(&frame, &[p], ClassSet::binary()).unwrap();
        assert_eq!(m.labels(), &[0, 1, 1, 0]);
    }

    #[test]
    fn out_of_frame_part_rejected() {
        let frame = Grid::unit([2, 1, 1]).unwrap();
        let p = part(frame, [5, 0, 0], [1, 1, 1], vec![0.5, 0.5], 2);
        assert!(merge_predictions(&frame, &[p], ClassSet::binary()).is_err());
    }

    #[test]
    fn arch_split_finds_lowest_slice_of_top_run() {
        let g = Grid::unit([7, 3, 6]).unwrap();
        // two blobs in slices 3..=5, one in 0..=2
        let m = LabelMask::from_fn(g, ClassSet::binary(), |[i, j, k]| {
            u8::from(j == 1 && (i == 1 || (k >= 3 && i == 5)))
        })
        .unwrap();
        assert_eq!(arch_split_slice(&m), Some(3));
        let single =
            LabelMask::from_fn(g, ClassSet::binary(), |[i, _, _]| u8::from(i == 1)).unwrap();
        assert_eq!(arch_split_slice(&single), None);
    }
}
