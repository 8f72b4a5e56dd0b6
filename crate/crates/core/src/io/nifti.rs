//! Minimal NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer.
//!
//! Only axis-aligned orientations are supported. Axes stored with a
//! negative direction are flipped on load so the in-memory grid always has
//! positive spacing; oblique affines are rejected.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ClassSet, Grid, LabelMask, Volume3D, BACKGROUND, WALL_ILT};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

/// Decoded header fields this crate cares about.
#[derive(Debug, Clone)]
struct Header {
    dims: [usize; 3],
    datatype: i16,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    /// Row-major 3x4 voxel-to-world matrix.
    affine: [[f64; 4]; 3],
    big_endian: bool,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Cursor<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.bytes[at], self.bytes[at + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let b: [u8; 4] = self.bytes[at..at + 4].try_into().unwrap();
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format("gzip stream", e.to_string()))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(
            "header",
            format!(
                "truncated: header needs bytes 0..{HEADER_SIZE}, file has {}",
                bytes.len()
            ),
        ));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => {
            return Err(Error::format(
                "sizeof_hdr",
                format!("expected 348, found {le}"),
            ))
        }
    };
    let c = Cursor { bytes, big_endian };
    if &bytes[344..347] != b"n+1" && &bytes[344..347] != b"ni1" {
        return Err(Error::format("magic", "not a NIfTI-1 file"));
    }
    if &bytes[344..347] == b"ni1" {
        return Err(Error::format(
            "magic",
            "two-file (.hdr/.img) NIfTI is not supported",
        ));
    }

    let ndim = c.i16(40);
    if !(3..=7).contains(&ndim) {
        return Err(Error::format(
            "dim[0]",
            format!("expected 3..7 dimensions, found {ndim}"),
        ));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let v = c.i16(42 + 2 * a);
        if v < 1 {
            return Err(Error::format(
                format!("dim[{}]", a + 1),
                format!("must be >= 1, found {v}"),
            ));
        }
        *d = v as usize;
    }
    for extra in 3..ndim as usize {
        let v = c.i16(42 + 2 * extra);
        if v > 1 {
            return Err(Error::format(
                format!("dim[{}]", extra + 1),
                format!("only 3-D volumes are supported, found extent {v}"),
            ));
        }
    }

    let datatype = c.i16(70);
    let vox_offset = c.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::format(
            "vox_offset",
            format!("invalid offset {vox_offset}"),
        ));
    }
    let pixdim: Vec<f64> = (0..8).map(|i| c.f32(76 + 4 * i) as f64).collect();
    let qform_code = c.i16(252);
    let sform_code = c.i16(254);

    let affine = if sform_code > 0 {
        let mut m = [[0.0; 4]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (col, v) in row.iter_mut().enumerate() {
                *v = c.f32(280 + 16 * r + 4 * col) as f64;
            }
        }
        m
    } else if qform_code > 0 {
        let (b, cq, d) = (c.f32(256) as f64, c.f32(260) as f64, c.f32(264) as f64);
        let a = (1.0 - (b * b + cq * cq + d * d)).max(0.0).sqrt();
        let r = [
            [
                a * a + b * b - cq * cq - d * d,
                2.0 * (b * cq - a * d),
                2.0 * (b * d + a * cq),
            ],
            [
                2.0 * (b * cq + a * d),
                a * a + cq * cq - b * b - d * d,
                2.0 * (cq * d - a * b),
            ],
            [
                2.0 * (b * d - a * cq),
                2.0 * (cq * d + a * b),
                a * a + d * d - b * b - cq * cq,
            ],
        ];
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let s = [pixdim[1], pixdim[2], pixdim[3] * qfac];
        let off = [c.f32(268) as f64, c.f32(272) as f64, c.f32(276) as f64];
        let mut m = [[0.0; 4]; 3];
        for row in 0..3 {
            for col in 0..3 {
                m[row][col] = r[row][col] * s[col];
            }
            m[row][3] = off[row];
        }
        m
    } else {
        [
            [pixdim[1], 0.0, 0.0, 0.0],
            [0.0, pixdim[2], 0.0, 0.0],
            [0.0, 0.0, pixdim[3], 0.0],
        ]
    };

    Ok(Header {
        dims,
        datatype,
        vox_offset: vox_offset as usize,
        scl_slope: c.f32(112),
        scl_inter: c.f32(116),
        affine,
        big_endian,
    })
}

/// Grid plus the axes that have to be flipped to make spacing positive.
fn grid_from_affine(h: &Header) -> Result<(Grid, [bool; 3])> {
    let m = &h.affine;
    let mut spacing = [0.0; 3];
    let mut flip = [false; 3];
    let mut origin = [m[0][3], m[1][3], m[2][3]];
    for a in 0..3 {
        let diag = m[a][a];
        let off: f64 = (0..3).filter(|&r| r != a).map(|r| m[r][a].abs()).sum();
        if diag == 0.0 || off > 1e-4 * diag.abs() {
            return Err(Error::format(
                "affine",
                "only axis-aligned orientations are supported",
            ));
        }
        spacing[a] = diag.abs();
        if diag < 0.0 {
            flip[a] = true;
            origin[a] += diag * (h.dims[a] - 1) as f64;
        }
    }
    let grid =
        Grid::new(h.dims, spacing, origin).map_err(|e| Error::format("pixdim", e.to_string()))?;
    Ok((grid, flip))
}

fn decode_values(h: &Header, bytes: &[u8]) -> Result<Vec<f64>> {
    let n = h.dims[0] * h.dims[1] * h.dims[2];
    let width = match h.datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::format(
                "datatype",
                format!("unsupported datatype code {other}"),
            ))
        }
    };
    let start = h.vox_offset;
    let end = start + n * width;
    if bytes.len() < end {
        return Err(Error::format(
            "voxel data",
            format!(
                "truncated: missing bytes {}..{end} (expected {start}..{end})",
                bytes.len().max(start)
            ),
        ));
    }
    let data = &bytes[start..end];
    let be = h.big_endian;
    let mut out = Vec::with_capacity(n);
    for chunk in data.chunks_exact(width) {
        let v = match h.datatype {
            DT_UINT8 => chunk[0] as f64,
            DT_INT8 => chunk[0] as i8 as f64,
            DT_INT16 => {
                let b = [chunk[0], chunk[1]];
                (if be {
                    i16::from_be_bytes(b)
                } else {
                    i16::from_le_bytes(b)
                }) as f64
            }
            DT_UINT16 => {
                let b = [chunk[0], chunk[1]];
                (if be {
                    u16::from_be_bytes(b)
                } else {
                    u16::from_le_bytes(b)
                }) as f64
            }
            DT_INT32 => {
                let b: [u8; 4] = chunk.try_into().unwrap();
                (if be {
                    i32::from_be_bytes(b)
                } else {
                    i32::from_le_bytes(b)
                }) as f64
            }
            DT_FLOAT32 => {
                let b: [u8; 4] = chunk.try_into().unwrap();
                (if be {
                    f32::from_be_bytes(b)
                } else {
                    f32::from_le_bytes(b)
                }) as f64
            }
            _ => {
                let b: [u8; 8] = chunk.try_into().unwrap();
                if be {
                    f64::from_be_bytes(b)
                } else {
                    f64::from_le_bytes(b)
                }
            }
        };
        out.push(v);
    }
    let slope = h.scl_slope as f64;
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && h.scl_inter == 0.0) {
        let inter = h.scl_inter as f64;
        for v in &mut out {
            *v = *v * slope + inter;
        }
    }
    Ok(out)
}

fn reorient<T: Copy>(values: Vec<T>, dims: [usize; 3], flip: [bool; 3]) -> Vec<T> {
    if !flip.iter().any(|&f| f) {
        return values;
    }
    let [nx, ny, nz] = dims;
    let mut out = Vec::with_capacity(values.len());
    for k in 0..nz {
        let sk = if flip[2] { nz - 1 - k } else { k };
        for j in 0..ny {
            let sj = if flip[1] { ny - 1 - j } else { j };
            for i in 0..nx {
                let si = if flip[0] { nx - 1 - i } else { i };
                out.push(values[si + nx * (sj + ny * sk)]);
            }
        }
    }
    out
}

fn load(path: &Path) -> Result<(Grid, Vec<f64>)> {
    let bytes = read_all(path)?;
    let header = parse_header(&bytes)?;
    let (grid, flip) = grid_from_affine(&header)?;
    let values = decode_values(&header, &bytes)?;
    Ok((grid, reorient(values, grid.dims, flip)))
}

fn encode_header(grid: &Grid, datatype: i16, bitpix: i16, description: &str) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 =
        |h: &mut Vec<u8>, at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 =
        |h: &mut Vec<u8>, at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, 3);
    for a in 0..3 {
        put_i16(&mut h, 42 + 2 * a, grid.dims[a] as i16);
    }
    for a in 3..7 {
        put_i16(&mut h, 42 + 2 * a, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, grid.spacing[a] as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    // millimetres
    h[123] = 2;
    let desc = description.as_bytes();
    let n = desc.len().min(79);
    h[148..148 + n].copy_from_slice(&desc[..n]);
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    for a in 0..3 {
        put_f32(&mut h, 268 + 4 * a, grid.origin[a] as f32);
    }
    for r in 0..3 {
        put_f32(&mut h, 280 + 16 * r + 4 * r, grid.spacing[r] as f32);
        put_f32(&mut h, 280 + 16 * r + 12, grid.origin[r] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn store(path: &Path, mut bytes: Vec<u8>, payload: &[u8]) -> Result<()> {
    bytes.extend_from_slice(payload);
    let mut file = File::create(path)?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&bytes)?;
        enc.finish()?;
    } else {
        file.write_all(&bytes)?;
    }
    Ok(())
}

/// Reads a scalar volume; any supported datatype is converted to HU as f64
/// after applying `scl_slope`/`scl_inter`.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let (grid, values) = load(path.as_ref())?;
    Volume3D::new(grid, values).map_err(|e| Error::format("voxel data", e.to_string()))
}

/// Writes a volume as FLOAT64 so values round-trip bit-exactly. Spacing and
/// origin are stored as float32 in the header.
pub fn write_volume(path: impl AsRef<Path>, vol: &Volume3D) -> Result<()> {
    let header = encode_header(vol.grid(), DT_FLOAT64, 64, "vesselseg volume");
    let mut payload = Vec::with_capacity(vol.data().len() * 8);
    for v in vol.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    store(path.as_ref(), header, &payload)
}

/// Label vocabulary stored next to a mask file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskDescriptor {
    pub version: u32,
    pub class_set: Vec<u8>,
    pub names: Vec<(u8, String)>,
}

fn label_name(l: u8) -> &'static str {
    match l {
        0 => "background",
        1 => "inner_lumen",
        2 => "wall_ilt",
        _ => "other",
    }
}

/// `scan.nii.gz` -> `scan.labels.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name);
    path.with_file_name(format!("{stem}.labels.json"))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let (grid, values) = load(path)?;
    let mut labels = Vec::with_capacity(values.len());
    for (idx, v) in values.iter().enumerate() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(v) {
            return Err(Error::format(
                "voxel data",
                format!("non-integer label {v} at voxel {:?}", grid.coords(idx)),
            ));
        }
        labels.push(*v as u8);
    }
    let side = sidecar_path(path);
    let class_set = if side.exists() {
        let desc: MaskDescriptor = serde_json::from_reader(File::open(&side)?)?;
        ClassSet::new(desc.class_set)?
    } else if labels.iter().any(|&l| l == WALL_ILT) {
        ClassSet::aorta()
    } else {
        let mut present: Vec<u8> = vec![BACKGROUND, 1];
        present.extend(labels.iter().copied().filter(|&l| l > 1));
        ClassSet::new(present)?
    };
    LabelMask::new(grid, labels, class_set).map_err(|e| Error::format("labels", e.to_string()))
}

/// Writes labels as UINT8 plus a `.labels.json` sidecar with the class set.
pub fn write_mask(path: impl AsRef<Path>, mask: &LabelMask) -> Result<()> {
    let path = path.as_ref();
    let header = encode_header(mask.grid(), DT_UINT8, 8, "vesselseg mask");
    store(path, header, mask.labels())?;
    let desc = MaskDescriptor {
        version: 1,
        class_set: mask.class_set().labels().to_vec(),
        names: mask
            .class_set()
            .labels()
            .iter()
            .map(|&l| (l, label_name(l).to_string()))
            .collect(),
    };
    serde_json::to_writer_pretty(File::create(sidecar_path(path))?, &desc)?;
    Ok(())
}
