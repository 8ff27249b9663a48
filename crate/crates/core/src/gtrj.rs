//! GTRJ trajectory records.
//!
//! Layout of one record, all little-endian:
//! `"GTRJ"`, version `u16`, `T N D D_h E` as `u32`, coordinates as `f32`
//! (frame-major, node, then dimension), node features as `f32`, `E` edge
//! pairs as `u32`, then a CRC-32 of every preceding byte of the record.
//! A file is a sequence of records.

use std::io::Write;
use std::path::Path;

use crate::error::{GeoError, Result};
use crate::geom::{Coords, GeoTrajectory};
use crate::tape::Mat;

pub const MAGIC: &[u8; 4] = b"GTRJ";
pub const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 5 * 4;

pub fn encode(traj: &GeoTrajectory<f32>, out: &mut Vec<u8>) -> Result<()> {
    traj.validate()?;
    let start = out.len();
    let c = &traj.coords;
    let dh = traj.node_features.cols;
    let fields = [c.frames, c.nodes, c.dim, dh, traj.edges.len()];
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for f in fields {
        let v = u32::try_from(f).map_err(|_| GeoError::invalid("dimension exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in c.data.iter().chain(&traj.node_features.data) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &(a, b) in &traj.edges {
        out.extend_from_slice(&(a as u32).to_le_bytes());
        out.extend_from_slice(&(b as u32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(())
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes"))
}

/// Decodes one record from the front of `bytes`; returns it and the bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(GeoTrajectory<f32>, usize)> {
    if bytes.len() < HEADER {
        return Err(GeoError::Corrupt("truncated GTRJ header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(GeoError::Corrupt("bad GTRJ magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(GeoError::Version { found: version, expected: VERSION });
    }
    let f: Vec<usize> = (0..5).map(|k| u32_at(bytes, 6 + 4 * k) as usize).collect();
    let (t, n, d, dh, e) = (f[0], f[1], f[2], f[3], f[4]);
    let n_coord = t.checked_mul(n).and_then(|v| v.checked_mul(d));
    let n_feat = n.checked_mul(dh);
    let body = n_coord
        .zip(n_feat)
        .and_then(|(a, b)| a.checked_add(b))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| e.checked_mul(8).and_then(|eb| v.checked_add(eb)))
        .ok_or_else(|| GeoError::Corrupt("GTRJ header sizes overflow".into()))?;
    let total = HEADER + body + 4;
    if bytes.len() < total {
        return Err(GeoError::Corrupt("truncated GTRJ record".into()));
    }
    let stored = u32_at(bytes, total - 4);
    if crc32fast::hash(&bytes[..total - 4]) != stored {
        return Err(GeoError::Corrupt("GTRJ checksum mismatch".into()));
    }
    let floats = |off: usize, k: usize| -> Vec<f32> {
        (0..k)
            .map(|i| f32::from_le_bytes(bytes[off + 4 * i..off + 4 * i + 4].try_into().expect("4 bytes")))
            .collect()
    };
    let (nc, nf) = (n_coord.unwrap_or(0), n_feat.unwrap_or(0));
    let coords = Coords::from_vec(t, n, d, floats(HEADER, nc))?;
    let features = Mat::from_vec(n, dh, floats(HEADER + 4 * nc, nf));
    let eoff = HEADER + 4 * (nc + nf);
    let edges = (0..e)
        .map(|k| (u32_at(bytes, eoff + 8 * k) as usize, u32_at(bytes, eoff + 8 * k + 4) as usize))
        .collect();
    let traj = GeoTrajectory::new(coords, features, edges).map_err(|e| GeoError::Corrupt(e.to_string()))?;
    Ok((traj, total))
}

pub fn encode_all(trajs: &[GeoTrajectory<f32>]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for t in trajs {
        encode(t, &mut out)?;
    }
    Ok(out)
}

pub fn decode_all(mut bytes: &[u8]) -> Result<Vec<GeoTrajectory<f32>>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (t, used) = decode(bytes)?;
        out.push(t);
        bytes = &bytes[used..];
    }
    Ok(out)
}

/// Writes atomically: temporary sibling file, then rename.
pub fn write_file(path: &Path, trajs: &[GeoTrajectory<f32>]) -> Result<()> {
    write_atomic(path, &encode_all(trajs)?)
}

pub fn read_file(path: &Path) -> Result<Vec<GeoTrajectory<f32>>> {
    decode_all(&std::fs::read(path)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GeoTrajectory<f32> {
        let coords = Coords::from_vec(2, 2, 3, (0..12).map(|i| i as f32 * 0.25 - 1.0).collect()).unwrap();
        GeoTrajectory::new(coords, Mat::from_vec(2, 1, vec![1.0, -1.0]), vec![(0, 1), (1, 0)]).unwrap()
    }

    #[test]
    fn roundtrip_and_layout() {
        let t = sample();
        let bytes = encode_all(&[t.clone(), t.clone()]).unwrap();
        let one = HEADER + 4 * (12 + 2) + 16 + 4;
        assert_eq!(bytes.len(), 2 * one);
        assert_eq!(&bytes[..4], b"GTRJ");
        assert_eq!(u32_at(&bytes, 6), 2);
        let back = decode_all(&bytes).unwrap();
        assert_eq!(back, vec![t.clone(), t]);
        assert_eq!(encode_all(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_all(&[sample()]).unwrap();
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(decode_all(&flipped), Err(GeoError::Corrupt(_))));
        assert!(matches!(decode_all(&bytes[..bytes.len() - 1]), Err(GeoError::Corrupt(_))));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(decode_all(&v), Err(GeoError::Version { found: 9, .. })));
    }
}
