//! Checkpoint files.
//!
//! Stage-1 checkpoints: magic "DBSN", u32 version, the serialized network
//! config, named tensor records in the tensor dump format, and the
//! per-image estimator registry. Student checkpoints use the same record
//! layout under the "STDN" magic. Tensor payloads narrow to f32 on save
//! and widen back on load.

use std::io::{Read, Write};
use std::path::Path;

use crate::dbsn::{DbsnConfig, DbsnParams};
use crate::error::{Error, Result};
use crate::estimator::{CnnEstParams, EstimatorRegistry};
use crate::student::{StudentConfig, StudentParams};
use crate::tensor::{read_u32, Tensor};
use crate::train::Stage1Model;

pub const STAGE1_MAGIC: &[u8; 4] = b"DBSN";
pub const STUDENT_MAGIC: &[u8; 4] = b"STDN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::format("implausible string length in checkpoint"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::format("non-utf8 string in checkpoint"))
}

fn write_records(w: &mut impl Write, records: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, tensor) in records {
        write_string(w, name)?;
        tensor.write_dump(w)?;
    }
    Ok(())
}

fn read_records(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let n = read_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(Error::format("implausible record count in checkpoint"));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = read_string(r)?;
        let tensor = Tensor::read_dump(r)?;
        out.push((name, tensor));
    }
    Ok(out)
}

/// Fills named destination tensors from loaded records, checking that
/// every expected record is present with the right shape.
fn fill_named(dst: Vec<(String, &mut Tensor)>, records: &[(String, Tensor)]) -> Result<()> {
    for (name, tensor) in dst {
        let (_, loaded) = records
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::format(format!("checkpoint missing tensor '{name}'")))?;
        if loaded.shape() != tensor.shape() {
            return Err(Error::format(format!(
                "checkpoint tensor '{name}' has shape {:?}, expected {:?}",
                loaded.shape(),
                tensor.shape()
            )));
        }
        *tensor = loaded.clone();
    }
    Ok(())
}

pub fn write_stage1(w: &mut impl Write, model: &Stage1Model) -> Result<()> {
    w.write_all(STAGE1_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(model.config.in_channels as u32).to_le_bytes())?;
    w.write_all(&(model.config.base_channels as u32).to_le_bytes())?;
    w.write_all(&(model.config.mdc_per_branch as u32).to_le_bytes())?;
    write_records(w, &model.dbsn.named())?;
    w.write_all(&(model.registry.len() as u32).to_le_bytes())?;
    for (id, params, mean) in model.registry.iter() {
        write_string(w, id)?;
        w.write_all(&mean.to_le_bytes())?;
        write_records(w, &params.named(""))?;
    }
    Ok(())
}

pub fn read_stage1(r: &mut impl Read) -> Result<Stage1Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != STAGE1_MAGIC {
        return Err(Error::format("not a stage-1 checkpoint (bad magic)"));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let in_channels = read_u32(r)? as usize;
    let base_channels = read_u32(r)? as usize;
    let mdc_per_branch = read_u32(r)? as usize;
    let config = DbsnConfig::new(in_channels, base_channels, mdc_per_branch)?;
    let records = read_records(r)?;
    let mut dbsn = DbsnParams::zeros(config)?;
    fill_named(dbsn.named_mut(), &records)?;
    let n_est = read_u32(r)? as usize;
    let mut registry = EstimatorRegistry::new();
    for _ in 0..n_est {
        let id = read_string(r)?;
        let mut mean_bytes = [0u8; 8];
        r.read_exact(&mut mean_bytes)?;
        let mean = f64::from_le_bytes(mean_bytes);
        let est_records = read_records(r)?;
        let mut params = CnnEstParams::zeros(in_channels);
        fill_named(params.named_mut(""), &est_records)?;
        registry.insert(id, params, mean);
    }
    Ok(Stage1Model { config, dbsn, registry })
}

pub fn save_stage1(path: &Path, model: &Stage1Model) -> Result<()> {
    let mut buf = Vec::new();
    write_stage1(&mut buf, model)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_stage1(path: &Path) -> Result<Stage1Model> {
    let bytes = std::fs::read(path)?;
    read_stage1(&mut bytes.as_slice())
}

pub fn write_student(w: &mut impl Write, params: &StudentParams) -> Result<()> {
    w.write_all(STUDENT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.config.in_channels as u32).to_le_bytes())?;
    w.write_all(&(params.config.depth as u32).to_le_bytes())?;
    w.write_all(&(params.config.channels as u32).to_le_bytes())?;
    write_records(w, &params.named())
}

pub fn read_student(r: &mut impl Read) -> Result<StudentParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != STUDENT_MAGIC {
        return Err(Error::format("not a student checkpoint (bad magic)"));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let config = StudentConfig {
        in_channels: read_u32(r)? as usize,
        depth: read_u32(r)? as usize,
        channels: read_u32(r)? as usize,
    };
    let records = read_records(r)?;
    let mut params = StudentParams::zeros(config)?;
    fill_named(params.named_mut(), &records)?;
    Ok(params)
}

pub fn save_student(path: &Path, params: &StudentParams) -> Result<()> {
    let mut buf = Vec::new();
    write_student(&mut buf, params)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_student(path: &Path) -> Result<StudentParams> {
    let bytes = std::fs::read(path)?;
    read_student(&mut bytes.as_slice())
}
