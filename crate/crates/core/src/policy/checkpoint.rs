//! Versioned binary container of named arrays plus the policy config.
//!
//! Layout (little endian): magic `PERACTCK`, `u32` version, `u32` metadata
//! length, metadata JSON (`{"policy_config": .., "metadata": ..}`), `u32`
//! array count, then per array: `u32` name length, UTF-8 name, `u32` rows,
//! `u32` cols, `rows * cols` `f64` values in row-major order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{ParamStore, Policy};
use super::tape::Scalar;
use super::PolicyConfig;
use crate::error::{invalid, Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PERACTCK";

/// Prefix reserved for non-parameter arrays (optimizer state and the like).
const AUX_PREFIX: &str = "aux/";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub array: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy_config: PolicyConfig,
    pub metadata: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    policy_config: PolicyConfig,
    metadata: serde_json::Value,
}

fn corrupt(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Corrupt("checkpoint is truncated".into())
    } else {
        Error::Io(e)
    }
}

impl Checkpoint {
    pub fn from_policy<F: Scalar>(policy: &Policy<F>, metadata: serde_json::Value) -> Self {
        let params = policy.params();
        let arrays = params
            .names()
            .iter()
            .zip(params.values())
            .map(|(name, v)| NamedArray { name: name.clone(), array: v.mapv(|x| x.to_f64_lossy()) })
            .collect();
        Self { policy_config: policy.config().clone(), metadata, arrays }
    }

    /// Attach an auxiliary array (not a model parameter).
    pub fn push_aux(&mut self, name: &str, array: Array2<f64>) {
        self.arrays.push(NamedArray { name: format!("{AUX_PREFIX}{name}"), array });
    }

    pub fn aux(&self, name: &str) -> Option<&Array2<f64>> {
        let full = format!("{AUX_PREFIX}{name}");
        self.arrays.iter().find(|a| a.name == full).map(|a| &a.array)
    }

    /// Rebuild the policy. When `expected` is given the stored config must
    /// match it exactly.
    pub fn policy<F: Scalar>(&self, expected: Option<&PolicyConfig>) -> Result<Policy<F>> {
        if let Some(exp) = expected {
            if exp != &self.policy_config {
                return Err(invalid(format!(
                    "checkpoint config {:?} does not match expected {:?}",
                    self.policy_config, exp
                )));
            }
        }
        let mut names = Vec::new();
        let mut values = Vec::new();
        for a in self.arrays.iter().filter(|a| !a.name.starts_with(AUX_PREFIX)) {
            names.push(a.name.clone());
            values.push(a.array.mapv(F::of));
        }
        Policy::with_params(self.policy_config.clone(), ParamStore::from_parts(names, values))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
            let header = serde_json::to_vec(&Header {
                policy_config: self.policy_config.clone(),
                metadata: self.metadata.clone(),
            })?;
            w.write_u32::<LittleEndian>(header.len() as u32)?;
            w.write_all(&header)?;
            w.write_u32::<LittleEndian>(self.arrays.len() as u32)?;
            for a in &self.arrays {
                w.write_u32::<LittleEndian>(a.name.len() as u32)?;
                w.write_all(a.name.as_bytes())?;
                w.write_u32::<LittleEndian>(a.array.nrows() as u32)?;
                w.write_u32::<LittleEndian>(a.array.ncols() as u32)?;
                for v in a.array.iter() {
                    w.write_f64::<LittleEndian>(*v)?;
                }
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(corrupt)?;
        if &magic != MAGIC {
            return Err(Error::Corrupt("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(corrupt)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible { found: version, expected: CHECKPOINT_VERSION });
        }
        let len = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header).map_err(corrupt)?;
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
        let count = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
            let mut name = vec![0u8; n];
            r.read_exact(&mut name).map_err(corrupt)?;
            let name = String::from_utf8(name).map_err(|_| Error::Corrupt("array name is not UTF-8".into()))?;
            let rows = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
            let cols = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
            let mut data = vec![0f64; rows * cols];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(corrupt)?;
            let array = Array2::from_shape_vec((rows, cols), data).expect("shape matches length");
            arrays.push(NamedArray { name, array });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Corrupt("trailing bytes after checkpoint arrays".into()));
        }
        Ok(Self { policy_config: header.policy_config, metadata: header.metadata, arrays })
    }
}
