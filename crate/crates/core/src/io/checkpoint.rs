//! Binary parameter checkpoints: a small header followed by little-endian
//! f64 values.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::policy::{HighPolicyDims, HighPolicyParams};
use crate::realizer::{RealizerDims, RealizerParams};

pub const CHECKPOINT_VERSION: u32 = 1;
const HIGH_MAGIC: &[u8; 4] = b"HSHP";
const LOW_MAGIC: &[u8; 4] = b"HSRZ";

fn write_raw<W: Write>(mut w: W, magic: &[u8; 4], dims: &[usize], values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * (dims.len() + values.len()));
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_raw<R: Read>(mut r: R, magic: &[u8; 4]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    if &bytes[..4] != magic {
        return Err(Error::Checkpoint(format!(
            "expected a '{}' checkpoint",
            String::from_utf8_lossy(magic)
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let (nd, nv) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + 8 * (nd + nv) {
        return Err(Error::Checkpoint(format!(
            "expected {} bytes, found {}",
            16 + 8 * (nd + nv),
            bytes.len()
        )));
    }
    let at = |k: usize| -> [u8; 8] { bytes[16 + 8 * k..24 + 8 * k].try_into().unwrap() };
    let dims = (0..nd).map(|k| u64::from_le_bytes(at(k)) as usize).collect();
    let values: Vec<f64> = (nd..nd + nv).map(|k| f64::from_le_bytes(at(k))).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    Ok((dims, values))
}

pub fn write_high<W: Write>(p: &HighPolicyParams, w: W) -> Result<()> {
    write_raw(w, HIGH_MAGIC, &[p.dims.hidden], &p.values)
}

pub fn read_high<R: Read>(r: R) -> Result<HighPolicyParams> {
    let (dims, values) = read_raw(r, HIGH_MAGIC)?;
    let [hidden] = dims[..] else {
        return Err(Error::Checkpoint("policy checkpoint needs 1 dimension".into()));
    };
    HighPolicyParams::from_values(HighPolicyDims { hidden }, values).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn write_low<W: Write>(p: &RealizerParams, w: W) -> Result<()> {
    let d = &p.dims;
    write_raw(w, LOW_MAGIC, &[d.d_z, d.d_c, d.t_h, d.t_f, d.waypoints], &p.values)
}

pub fn read_low<R: Read>(r: R) -> Result<RealizerParams> {
    let (dims, values) = read_raw(r, LOW_MAGIC)?;
    let [d_z, d_c, t_h, t_f, waypoints] = dims[..] else {
        return Err(Error::Checkpoint("realizer checkpoint needs 5 dimensions".into()));
    };
    let dims = RealizerDims {
        d_z,
        d_c,
        t_h,
        t_f,
        waypoints,
    };
    dims.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    RealizerParams::from_values(dims, values).map_err(|e| Error::Checkpoint(e.to_string()))
}
