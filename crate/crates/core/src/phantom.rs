//! Synthetic paired CTA / non-contrast CT phantoms with analytic labels.
//!
//! The aorta is modelled as a tube: a descending limb running the full z
//! range with a Gaussian aneurysmal bulge, plus (optionally) an ascending
//! limb joined to it by a semicircular arch at the top of the volume.
//! Physical axes: x left-right, y anterior to posterior, z inferior to
//! superior. Labels are rasterised by voxel-centre inclusion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::nifti;
use crate::rng;
use crate::volume::{ClassSet, Grid, LabelMask, Volume3D, BACKGROUND, LUMEN, WALL_ILT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuTable {
    pub air: f64,
    pub soft_tissue: f64,
    pub thrombus: f64,
    pub wall: f64,
    pub lumen_contrast: f64,
    pub lumen_noncontrast: f64,
    pub bone: f64,
}

impl Default for HuTable {
    fn default() -> Self {
        HuTable {
            air: -1000.0,
            soft_tissue: 30.0,
            thrombus: 40.0,
            wall: 50.0,
            lumen_contrast: 300.0,
            lumen_noncontrast: 45.0,
            bone: 700.0,
        }
    }
}

/// Aneurysmal bulge `amplitude * exp(-(z - z_center)^2 / (2 sigma_z^2))`
/// added to the outer wall radius of the descending limb (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aneurysm {
    pub z_center: f64,
    pub amplitude: f64,
    pub sigma_z: f64,
    /// Extra lumen radius at the bulge peak.
    pub lumen_amplitude: f64,
}

/// Crescent of thrombus inside the aneurysm sac. The lumen is pushed
/// `offset * g(z)` mm away from the crescent, leaving an eccentric layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThrombusCrescent {
    /// Direction of the crescent's middle, degrees in the x-y plane.
    pub angle_deg: f64,
    /// Full angular width, degrees.
    pub extent_deg: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Radius of the arch centreline (mm); the ascending limb sits
    /// `2 * radius` anterior of the descending one.
    pub radius: f64,
    /// z (mm) where the limbs turn into the arch.
    pub z_top: f64,
    /// z (mm) where the ascending limb starts.
    pub ascending_bottom: f64,
}

/// Cylindrical distractor along z (bone or enhancing organ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub center: [f64; 2],
    pub radius: f64,
    pub hu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// CTA grid dims.
    pub dims: [usize; 3],
    /// CTA spacing (mm).
    pub spacing: [f64; 3],
    /// Slice spacing of the non-contrast scan (mm).
    pub nc_z_spacing: f64,
    /// Descending limb centreline, mm from the in-plane volume centre.
    pub aorta_center: [f64; 2],
    pub lumen_radius: f64,
    pub wall_thickness: f64,
    pub aneurysm: Aneurysm,
    pub thrombus: ThrombusCrescent,
    pub arch: Option<ArchSpec>,
    /// Semi-axes of the elliptical body cross-section (mm).
    pub body_radii: [f64; 2],
    pub distractors: Vec<Distractor>,
    pub hu: HuTable,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    /// Abdominal/thoracic CTA-like phantom: 192 x 192 x 100 at
    /// 0.8 x 0.8 x 1.25 mm with an arch and a vertebra.
    fn default() -> Self {
        PhantomSpec {
            dims: [192, 192, 100],
            spacing: [0.8, 0.8, 1.25],
            nc_z_spacing: 2.5,
            aorta_center: [8.0, 14.0],
            lumen_radius: 6.0,
            wall_thickness: 2.5,
            aneurysm: Aneurysm {
                z_center: 35.0,
                amplitude: 9.0,
                sigma_z: 12.0,
                lumen_amplitude: 2.0,
            },
            thrombus: ThrombusCrescent {
                angle_deg: 135.0,
                extent_deg: 160.0,
                offset: 4.0,
            },
            arch: Some(ArchSpec {
                radius: 18.0,
                z_top: 100.0,
                ascending_bottom: 72.0,
            }),
            body_radii: [70.0, 55.0],
            distractors: vec![Distractor {
                center: [8.0, 38.0],
                radius: 9.0,
                hu: 700.0,
            }],
            hu: HuTable::default(),
            noise_sigma: 20.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Small descending-only phantom, e.g. 32^3 at 1 mm, for training tests.
    pub fn toy(n: usize) -> Self {
        let s = n as f64 / 32.0;
        PhantomSpec {
            dims: [n, n, n],
            spacing: [1.0; 3],
            nc_z_spacing: 2.0,
            aorta_center: [0.0, 0.0],
            lumen_radius: 4.0 * s,
            wall_thickness: 2.0 * s,
            aneurysm: Aneurysm {
                z_center: n as f64 / 2.0,
                amplitude: 4.0 * s,
                sigma_z: 7.0 * s,
                lumen_amplitude: 1.0 * s,
            },
            thrombus: ThrombusCrescent {
                angle_deg: 135.0,
                extent_deg: 160.0,
                offset: 2.0 * s,
            },
            arch: None,
            body_radii: [n as f64, n as f64],
            distractors: Vec::new(),
            hu: HuTable::default(),
            noise_sigma: 20.0,
            seed: 0,
        }
    }

    fn bulge(&self, z: f64) -> f64 {
        let a = &self.aneurysm;
        (-(z - a.z_center).powi(2) / (2.0 * a.sigma_z * a.sigma_z)).exp()
    }

    /// Lumen radius of the descending limb at height `z` (mm).
    pub fn lumen_radius_at(&self, z: f64) -> f64 {
        self.lumen_radius + self.aneurysm.lumen_amplitude * self.bulge(z)
    }

    /// Outer wall radius of the descending limb at height `z` (mm).
    pub fn wall_outer_radius_at(&self, z: f64) -> f64 {
        self.lumen_radius_at(z)
            + self.wall_thickness
            + (self.aneurysm.amplitude - self.aneurysm.lumen_amplitude) * self.bulge(z)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        Grid::new(self.dims, self.spacing, [0.0; 3])
            .map_err(|e| Error::InvalidSpec(e.to_string()))?;
        if !(self.nc_z_spacing > 0.0) {
            return bad(format!(
                "nc_z_spacing must be > 0, got {}",
                self.nc_z_spacing
            ));
        }
        if !(self.lumen_radius > 0.0) {
            return bad(format!(
                "lumen radius must be > 0, got {}",
                self.lumen_radius
            ));
        }
        if !(self.wall_thickness > 0.0) {
            return bad(format!(
                "wall thickness must be > 0, got {}",
                self.wall_thickness
            ));
        }
        let a = &self.aneurysm;
        if !(a.sigma_z > 0.0) || a.lumen_amplitude < 0.0 || a.amplitude < a.lumen_amplitude {
            return bad("aneurysm needs sigma_z > 0 and amplitude >= lumen_amplitude >= 0".into());
        }
        // eccentric lumen must stay inside the outer wall: over g in [0, 1]
        // lumen + offset * g < outer  <=>  (offset + la - a) * g < wall
        let excess = self.thrombus.offset.abs() + a.lumen_amplitude - a.amplitude;
        if excess.max(0.0) >= self.wall_thickness {
            return bad("thrombus offset pushes the lumen through the outer wall".into());
        }
        if let Some(arch) = &self.arch {
            if !(arch.radius > self.wall_outer_radius_at(arch.z_top)) {
                return bad("arch radius must exceed the outer wall radius".into());
            }
            if arch.ascending_bottom >= arch.z_top {
                return bad("ascending limb must start below the arch".into());
            }
        }
        let hu = &self.hu;
        let all = [
            hu.air,
            hu.soft_tissue,
            hu.thrombus,
            hu.wall,
            hu.lumen_contrast,
            hu.lumen_noncontrast,
            hu.bone,
        ];
        if all
            .iter()
            .chain(self.distractors.iter().map(|d| &d.hu))
            .any(|v| !v.is_finite())
            || !(self.noise_sigma >= 0.0)
        {
            return bad("HU values must be finite and noise_sigma >= 0".into());
        }
        Ok(())
    }

    /// CTA grid, centred in-plane on the origin with z starting at 0.
    pub fn cta_grid(&self) -> Grid {
        let o = |a: usize| -((self.dims[a] - 1) as f64) * self.spacing[a] / 2.0;
        Grid {
            dims: self.dims,
            spacing: self.spacing,
            origin: [o(0), o(1), 0.0],
        }
    }

    /// Non-contrast grid: same in-plane sampling, coarser slices, covering
    /// the abdomen below the ascending limb when an arch is present.
    pub fn nc_grid(&self) -> Grid {
        let cta = self.cta_grid();
        let z_lo = cta.origin[2] - 0.5 * self.spacing[2];
        let z_hi = match &self.arch {
            Some(arch) => arch.ascending_bottom - 2.0 * self.wall_thickness,
            None => z_lo + self.dims[2] as f64 * self.spacing[2],
        };
        let nz = (((z_hi - z_lo) / self.nc_z_spacing).floor() as usize).max(1);
        Grid {
            dims: [self.dims[0], self.dims[1], nz],
            spacing: [self.spacing[0], self.spacing[1], self.nc_z_spacing],
            origin: [cta.origin[0], cta.origin[1], z_lo + 0.5 * self.nc_z_spacing],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Air,
    Soft,
    Bone(usize),
    Wall,
    Thrombus,
    Lumen,
}

impl Tissue {
    fn label(self) -> u8 {
        match self {
            Tissue::Lumen => LUMEN,
            Tissue::Wall | Tissue::Thrombus => WALL_ILT,
            _ => BACKGROUND,
        }
    }
}

struct Geometry<'a> {
    spec: &'a PhantomSpec,
    crescent_dir: [f64; 2],
    crescent_cos: f64,
}

impl<'a> Geometry<'a> {
    fn new(spec: &'a PhantomSpec) -> Self {
        let t = spec.thrombus.angle_deg.to_radians();
        Geometry {
            spec,
            crescent_dir: [t.cos(), t.sin()],
            crescent_cos: (spec.thrombus.extent_deg.to_radians() / 2.0).cos(),
        }
    }

    /// Tissue of one tube cross-section given the in-plane offset from its
    /// centreline and the height used for the radius profile.
    fn tube(&self, dx: f64, dy: f64, z: f64, eccentric: bool) -> Option<Tissue> {
        let s = self.spec;
        let g = s.bulge(z);
        let outer = s.wall_outer_radius_at(z);
        let r = dx.hypot(dy);
        if r > outer {
            return None;
        }
        let (mut lx, mut ly) = (dx, dy);
        if eccentric {
            lx += s.thrombus.offset * g * self.crescent_dir[0];
            ly += s.thrombus.offset * g * self.crescent_dir[1];
        }
        if lx.hypot(ly) <= s.lumen_radius_at(z) {
            return Some(Tissue::Lumen);
        }
        let in_crescent = eccentric
            && g >= 0.1
            && r > 0.0
            && (dx * self.crescent_dir[0] + dy * self.crescent_dir[1]) / r >= self.crescent_cos;
        Some(if in_crescent {
            Tissue::Thrombus
        } else {
            Tissue::Wall
        })
    }

    /// Aortic tissue at a physical point, if any.
    fn aorta(&self, p: [f64; 3]) -> Option<Tissue> {
        let s = self.spec;
        let [cx, cy] = s.aorta_center;
        let (x, y, z) = (p[0], p[1], p[2]);
        let mut best: Option<Tissue> = None;
        let mut take = |t: Option<Tissue>| {
            if let Some(t) = t {
                best = Some(match best {
                    Some(Tissue::Lumen) => Tissue::Lumen,
                    _ if t == Tissue::Lumen => Tissue::Lumen,
                    Some(prev) => prev,
                    None => t,
                });
            }
        };
        match &s.arch {
            None => take(self.tube(x - cx, y - cy, z, true)),
            Some(arch) => {
                if z <= arch.z_top {
                    take(self.tube(x - cx, y - cy, z, true));
                    if z >= arch.ascending_bottom {
                        take(self.tube(x - cx, y - (cy - 2.0 * arch.radius), z, false));
                    }
                } else {
                    let yc = cy - arch.radius;
                    let rho = (y - yc).hypot(z - arch.z_top);
                    // distance from the semicircular centreline, expressed as
                    // an in-plane offset of a tube at the arch's height
                    take(self.tube(x - cx, rho - arch.radius, arch.z_top, false));
                }
            }
        }
        best
    }

    fn tissue(&self, p: [f64; 3]) -> Tissue {
        if let Some(t) = self.aorta(p) {
            return t;
        }
        let s = self.spec;
        for (n, d) in s.distractors.iter().enumerate() {
            if (p[0] - d.center[0]).hypot(p[1] - d.center[1]) <= d.radius {
                return Tissue::Bone(n);
            }
        }
        let [a, b] = s.body_radii;
        if (p[0] / a).powi(2) + (p[1] / b).powi(2) <= 1.0 {
            Tissue::Soft
        } else {
            Tissue::Air
        }
    }
}

/// One synthetic patient.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub cta: Volume3D,
    pub nc: Volume3D,
    pub gt_cta: LabelMask,
    pub gt_nc: LabelMask,
    /// z (mm) separating the arch region (above) from the descending
    /// region, when the phantom has an arch.
    pub arch_split_z: Option<f64>,
}

impl Phantom {
    /// Ground truth restricted to the arch region (empty without an arch).
    pub fn arch_region(&self) -> LabelMask {
        self.region_mask(true)
    }

    /// Ground truth restricted to the descending aorta / AAA region.
    pub fn descending_region(&self) -> LabelMask {
        self.region_mask(false)
    }

    fn region_mask(&self, upper: bool) -> LabelMask {
        let grid = *self.gt_cta.grid();
        let split = self.arch_split_z.unwrap_or(f64::INFINITY);
        let labels = self
            .gt_cta
            .labels()
            .iter()
            .enumerate()
            .map(|(idx, &l)| {
                let z = grid.origin[2] + grid.coords(idx)[2] as f64 * grid.spacing[2];
                if (z >= split) == upper {
                    l
                } else {
                    BACKGROUND
                }
            })
            .collect();
        LabelMask::new(grid, labels, self.gt_cta.class_set().clone())
            .expect("subset of valid labels")
    }
}

fn render(
    spec: &PhantomSpec,
    geo: &Geometry,
    grid: Grid,
    lumen_hu: f64,
    noise_stream: &str,
) -> Result<(Volume3D, LabelMask)> {
    let hu = &spec.hu;
    let mut rng = rng::stream(spec.seed, noise_stream);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut data = Vec::with_capacity(grid.len());
    let mut labels = Vec::with_capacity(grid.len());
    for idx in 0..grid.len() {
        let c = grid.coords(idx);
        let p = grid.to_physical([c[0] as f64, c[1] as f64, c[2] as f64]);
        let t = geo.tissue(p);
        let base = match t {
            Tissue::Air => hu.air,
            Tissue::Soft => hu.soft_tissue,
            Tissue::Bone(n) => spec.distractors[n].hu,
            Tissue::Wall => hu.wall,
            Tissue::Thrombus => hu.thrombus,
            Tissue::Lumen => lumen_hu,
        };
        let n = if spec.noise_sigma > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        data.push(base + n);
        labels.push(t.label());
    }
    Ok((
        Volume3D::new(grid, data)?,
        LabelMask::new(grid, labels, ClassSet::aorta())?,
    ))
}

/// Renders the paired CTA and non-contrast scans and their labels.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let geo = Geometry::new(spec);
    let (cta, gt_cta) = render(
        spec,
        &geo,
        spec.cta_grid(),
        spec.hu.lumen_contrast,
        "phantom/noise/cta",
    )?;
    let (nc, gt_nc) = render(
        spec,
        &geo,
        spec.nc_grid(),
        spec.hu.lumen_noncontrast,
        "phantom/noise/nc",
    )?;
    Ok(Phantom {
        cta,
        nc,
        gt_cta,
        gt_nc,
        arch_split_z: spec.arch.map(|a| a.ascending_bottom),
    })
}

/// Whether a physical point lies inside the outer aortic wall.
pub fn inside_outer_wall(spec: &PhantomSpec, p: [f64; 3]) -> bool {
    Geometry::new(spec).aorta(p).is_some()
}

/// Per-patient geometry variation for cohorts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortJitter {
    /// Relative jitter of lumen radius and wall thickness.
    pub radius: f64,
    /// Relative jitter of the bulge amplitude.
    pub bulge: f64,
    /// Absolute jitter of the aneurysm centre height (mm).
    pub z_center: f64,
    /// Absolute jitter of the centreline position (mm).
    pub center: f64,
}

impl Default for CohortJitter {
    fn default() -> Self {
        CohortJitter {
            radius: 0.15,
            bulge: 0.3,
            z_center: 6.0,
            center: 3.0,
        }
    }
}

pub fn patient_id(n: usize) -> String {
    format!("P{n:03}")
}

/// Geometry-varied specs for `n` patients, reproducible from `seed`.
pub fn cohort_specs(
    n: usize,
    base: &PhantomSpec,
    jitter: &CohortJitter,
    seed: u64,
) -> Result<Vec<(String, PhantomSpec)>> {
    if n == 0 {
        return Err(Error::invalid("cohort needs at least one patient"));
    }
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let id = patient_id(k);
        let mut r = rng::stream(seed, &format!("cohort/{id}"));
        let mut spec = base.clone();
        let mut rel = |x: f64, j: f64| x * (1.0 + r.gen_range(-j..=j));
        spec.lumen_radius = rel(base.lumen_radius, jitter.radius);
        spec.wall_thickness = rel(base.wall_thickness, jitter.radius);
        spec.aneurysm.amplitude = rel(base.aneurysm.amplitude, jitter.bulge);
        spec.aneurysm.lumen_amplitude = spec.aneurysm.lumen_amplitude.min(spec.aneurysm.amplitude);
        spec.aneurysm.z_center = base.aneurysm.z_center + r.gen_range(-1.0..=1.0) * jitter.z_center;
        spec.aorta_center = [
            base.aorta_center[0] + r.gen_range(-1.0..=1.0) * jitter.center,
            base.aorta_center[1] + r.gen_range(-1.0..=1.0) * jitter.center,
        ];
        spec.thrombus.angle_deg = r.gen_range(0.0..360.0);
        let max_offset =
            (spec.wall_thickness - spec.aneurysm.lumen_amplitude + spec.aneurysm.amplitude) * 0.8;
        spec.thrombus.offset = base.thrombus.offset.min(max_offset.max(0.0));
        spec.seed = rng::derive_seed(seed, &format!("cohort/{id}/noise"));
        spec.validate()?;
        out.push((id, spec));
    }
    Ok(out)
}

pub const COHORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortPatient {
    pub patient_id: String,
    pub scans: BTreeMap<String, String>,
    pub spec: PhantomSpec,
}

/// Index of a generated phantom dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub patients: Vec<CohortPatient>,
}

impl CohortManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: CohortManifest = serde_json::from_reader(std::fs::File::open(path)?)?;
        if m.schema_version != COHORT_SCHEMA_VERSION {
            return Err(Error::format(
                "schema_version",
                format!("unsupported version {}", m.schema_version),
            ));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        serde_json::to_writer_pretty(std::fs::File::create(path)?, self)?;
        Ok(())
    }
}

/// Generates `n` patients into `out_dir/<id>/{cta,nc,gt_cta,gt_nc}.nii.gz`
/// and writes `out_dir/cohort.json`. Scan paths in the manifest are
/// relative to `out_dir`.
pub fn generate_cohort(
    n: usize,
    base: &PhantomSpec,
    jitter: &CohortJitter,
    seed: u64,
    out_dir: &Path,
) -> Result<CohortManifest> {
    std::fs::create_dir_all(out_dir)?;
    let mut patients = Vec::with_capacity(n);
    for (id, spec) in cohort_specs(n, base, jitter, seed)? {
        let p = generate_phantom(&spec)?;
        let dir = out_dir.join(&id);
        std::fs::create_dir_all(&dir)?;
        let mut scans = BTreeMap::new();
        let mut rel = |name: &str| -> PathBuf {
            let r = format!("{id}/{name}.nii.gz");
            scans.insert(name.to_string(), r.clone());
            out_dir.join(r)
        };
        nifti::write_volume(rel("cta"), &p.cta)?;
        nifti::write_volume(rel("nc"), &p.nc)?;
        nifti::write_mask(rel("gt_cta"), &p.gt_cta)?;
        nifti::write_mask(rel("gt_nc"), &p.gt_nc)?;
        patients.push(CohortPatient {
            patient_id: id,
            scans,
            spec,
        });
    }
    let manifest = CohortManifest {
        schema_version: COHORT_SCHEMA_VERSION,
        seed,
        patients,
    };
    manifest.save(out_dir.join("cohort.json"))?;
    Ok(manifest)
}
