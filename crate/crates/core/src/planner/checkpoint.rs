//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `SPCK`, format version, planner config as
//! JSON, config hash, EMA step count, completed epochs, student parameters,
//! teacher parameters, then the Adam state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::{Planner, PlannerConfig, PlannerError};
use crate::diffcore::{read_params, write_params, AdamState, Array2, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SPCK";
const MAX_TEXT: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: PlannerConfig,
    pub config_hash: String,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub adam: AdamState,
    pub ema_steps: u64,
    pub epochs_done: u32,
}

fn write_text<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_text<R: Read>(r: &mut R) -> Result<String, PlannerError> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > MAX_TEXT {
        return Err(PlannerError::MalformedCheckpoint(format!("text field of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| PlannerError::MalformedCheckpoint(e.to_string()))
}

/// Moment arrays stored under the parameter names they belong to.
fn moments_store(names: &[String], arrays: &[Array2]) -> Result<ParamStore, PlannerError> {
    let mut s = ParamStore::new();
    for (n, a) in names.iter().zip(arrays) {
        s.add(n, a.clone())?;
    }
    Ok(s)
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), PlannerError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        let cfg = serde_json::to_string(&self.config).map_err(|e| PlannerError::MalformedCheckpoint(e.to_string()))?;
        write_text(w, &cfg)?;
        write_text(w, &self.config_hash)?;
        w.write_u64::<LittleEndian>(self.ema_steps)?;
        w.write_u32::<LittleEndian>(self.epochs_done)?;
        write_params(w, &self.student)?;
        write_params(w, &self.teacher)?;
        let a = &self.adam;
        for v in [a.lr, a.beta1, a.beta2, a.eps] {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_u64::<LittleEndian>(a.step)?;
        write_params(w, &moments_store(self.student.names(), &a.m)?)?;
        write_params(w, &moments_store(self.student.names(), &a.v)?)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, PlannerError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(PlannerError::MalformedCheckpoint("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(PlannerError::CheckpointVersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let config: PlannerConfig = serde_json::from_str(&read_text(r)?)
            .map_err(|e| PlannerError::MalformedCheckpoint(e.to_string()))?;
        let config_hash = read_text(r)?;
        let ema_steps = r.read_u64::<LittleEndian>()?;
        let epochs_done = r.read_u32::<LittleEndian>()?;
        let student = read_params(r)?;
        let teacher = read_params(r)?;
        let mut h = [0.0; 4];
        for v in &mut h {
            *v = r.read_f64::<LittleEndian>()?;
        }
        let step = r.read_u64::<LittleEndian>()?;
        let m = read_params(r)?.values().to_vec();
        let v = read_params(r)?.values().to_vec();
        let adam = AdamState { lr: h[0], beta1: h[1], beta2: h[2], eps: h[3], step, m, v };
        let ck = Self { config, config_hash, student, teacher, adam, ema_steps, epochs_done };
        // layout check: both stores must bind to the configured model
        Planner::bind(&ck.config, &ck.student)?;
        Planner::bind(&ck.config, &ck.teacher)?;
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, PlannerError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<(), PlannerError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PlannerError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Short content hash identifying this checkpoint in reports.
    pub fn id(&self) -> Result<String, PlannerError> {
        let digest = Sha256::digest(self.to_bytes()?);
        Ok(hex::encode(&digest[..8]))
    }
}
