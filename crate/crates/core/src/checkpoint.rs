//! Versioned, checksummed model checkpoints.
//!
//! Layout, little-endian: `"GTCK"`, version `u16`, `u32` length plus UTF-8
//! TOML echo of the run metadata, `u64` optimizer step, `u32` tensor count,
//! then per tensor a `u16` name length, name, `u32` rows, `u32` cols and
//! `f32` values; a `u8` flag followed (when set) by the Adam first and second
//! moments of every tensor; finally a CRC-32 of all preceding bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleConfig;
use crate::egtn::{EgtnConfig, EgtnModel};
use crate::error::{GeoError, Result};
use crate::gtrj::write_atomic;
use crate::nn::{Param, ParamStore};
use crate::tape::Mat;
use crate::train::{AdamState, Mode};

pub const MAGIC: &[u8; 4] = b"GTCK";
pub const VERSION: u16 = 1;

/// Everything needed to rebuild and use a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub mode: Mode,
    pub dim: usize,
    pub frames: usize,
    #[serde(default)]
    pub cond_frames: usize,
    /// Condition frames placed after the target window (interpolation models).
    #[serde(default)]
    pub tail_frames: usize,
    pub model: EgtnConfig,
    pub schedule: ScheduleConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: ModelMeta,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamState>,
}

struct Reader<'a> {
    b: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.off.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| GeoError::Corrupt("truncated checkpoint".into()))?;
        let s = &self.b[self.off..end];
        self.off = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| GeoError::Corrupt("tensor size overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = toml::to_string(&self.meta).map_err(|e| GeoError::Config(e.to_string()))?;
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let step = self.optimizer.as_ref().map_or(0, |o| o.step);
        out.extend_from_slice(&step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params.params {
            let name = p.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| GeoError::invalid("parameter name too long"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(p.value.rows as u32).to_le_bytes());
            out.extend_from_slice(&(p.value.cols as u32).to_le_bytes());
            for v in &p.value.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.optimizer {
            Some(o) => {
                out.push(1);
                for moments in [&o.m, &o.v] {
                    for (m, p) in moments.iter().zip(&self.params.params) {
                        if m.len() != p.value.data.len() {
                            return Err(GeoError::dim(format!("optimizer state of {} has the wrong size", p.name)));
                        }
                        for v in m {
                            out.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
            }
            None => out.push(0),
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 {
            return Err(GeoError::Corrupt("truncated checkpoint".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(GeoError::Corrupt("bad checkpoint magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(GeoError::Version { found: version, expected: VERSION });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(GeoError::Corrupt("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { b: body, off: 6 };
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| GeoError::Corrupt("config echo is not UTF-8".into()))?;
        let meta: ModelMeta = toml::from_str(text).map_err(|e| GeoError::Corrupt(format!("config echo: {e}")))?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let nl = r.u16()? as usize;
            let name = String::from_utf8(r.take(nl)?.to_vec()).map_err(|_| GeoError::Corrupt("tensor name is not UTF-8".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let size = rows.checked_mul(cols).ok_or_else(|| GeoError::Corrupt("tensor size overflow".into()))?;
            params.params.push(Param { name, value: Mat::from_vec(rows, cols, r.f32s(size)?) });
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let mut read = || -> Result<Vec<Vec<f32>>> {
                    params.params.iter().map(|p| r.f32s(p.value.data.len())).collect()
                };
                let m = read()?;
                let v = read()?;
                Some(AdamState { step, m, v })
            }
            f => return Err(GeoError::Corrupt(format!("bad optimizer flag {f}"))),
        };
        if r.off != body.len() {
            return Err(GeoError::Corrupt("trailing bytes in checkpoint".into()));
        }
        Ok(Self { meta, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies the stored tensors into `model`, which must have the same names and shapes.
    pub fn apply_to(&self, model: &mut EgtnModel<f32>) -> Result<()> {
        let mut problems = Vec::new();
        for p in &model.params.params {
            match self.params.params.iter().find(|q| q.name == p.name) {
                None => problems.push(format!("{}: missing from checkpoint", p.name)),
                Some(q) if (q.value.rows, q.value.cols) != (p.value.rows, p.value.cols) => problems.push(format!(
                    "{}: model {}x{}, checkpoint {}x{}",
                    p.name, p.value.rows, p.value.cols, q.value.rows, q.value.cols
                )),
                Some(_) => {}
            }
        }
        for q in &self.params.params {
            if !model.params.params.iter().any(|p| p.name == q.name) {
                problems.push(format!("{}: not present in model", q.name));
            }
        }
        if !problems.is_empty() {
            return Err(GeoError::ShapeMismatch(problems));
        }
        for p in &mut model.params.params {
            let q = self.params.params.iter().find(|q| q.name == p.name).expect("checked");
            p.value.data.copy_from_slice(&q.value.data);
        }
        Ok(())
    }

    /// Rebuilds the model described by the config echo.
    pub fn model(&self) -> Result<EgtnModel<f32>> {
        let mut m = EgtnModel::new(self.meta.model.clone(), 0)?;
        self.apply_to(&mut m)?;
        Ok(m)
    }
}

/// Model config echo without parameters, used to build fresh models for a run.
pub fn fresh_model(config: &EgtnConfig, seed: u64) -> Result<EgtnModel<f32>> {
    EgtnModel::new(config.clone(), seed)
}
