//! Checkpoint container:
//!
//! ```text
//! "VSEGCKPT" | u32 version | u64 header length | JSON header | f64 data
//! ```
//!
//! All integers and floats are little-endian. The header carries the
//! network spec, its hash, the epoch and the ordered tensor names and
//! shapes; the data section holds the tensors back to back.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelParams, ParamTensor, UNetSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: UNetSpec,
    spec_hash: String,
    epoch: u64,
    tensors: Vec<ParamTensor>,
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams) -> Result<()> {
    let header = Header {
        spec: *params.spec(),
        spec_hash: params.spec().hash(),
        epoch: params.epoch,
        tensors: params.tensors().to_vec(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in params.tensors() {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("magic", "file too short for a checkpoint"))?;
    if &magic != MAGIC {
        return Err(Error::format("magic", "not a checkpoint file"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)
        .map_err(|_| Error::format("version", "truncated"))?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)
        .map_err(|_| Error::format("header", "truncated length"))?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::format("header", "truncated"))?;
    let mut header: Header = serde_json::from_slice(&json)?;
    if header.spec_hash != header.spec.hash() {
        return Err(Error::format(
            "spec_hash",
            "hash does not match the stored spec",
        ));
    }
    for t in &mut header.tensors {
        let n: usize = t.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::format("data", format!("tensor {} is truncated", t.name)))?;
        t.data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
    }
    ModelParams::from_tensors(header.spec, header.epoch, header.tensors)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    write_checkpoint(BufWriter::new(std::fs::File::create(path)?), params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_checkpoint(BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_unet;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = build_unet(&UNetSpec::new(3, 2, 4, true), 9).unwrap();
        p.epoch = 17;
        p.tensors_mut()[0].data[0] = f64::MIN_POSITIVE / 3.0;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        let q = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(q.epoch, 17);
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert_eq!(a.name, b.name);
            assert!(a
                .data
                .iter()
                .zip(&b.data)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(p, q);
    }

    #[test]
    fn corrupt_files_rejected() {
        let p = build_unet(&UNetSpec::new(2, 2, 2, false), 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut bad = buf;
        bad[8] = 9;
        assert!(matches!(
            read_checkpoint(bad.as_slice()),
            Err(Error::Format { .. })
        ));
    }
}
