//! Named parameter bundles and their on-disk checkpoint format.
//!
//! A checkpoint is `b"FMIBCKPT"`, a little-endian `u64` header length, a
//! JSON header (`meta` plus the name and shape of every parameter in order),
//! then every parameter's values as little-endian `f64` in row-major order.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use super::{EngineError, Matrix, Tape, Var};

const MAGIC: &[u8; 8] = b"FMIBCKPT";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parameters {
    values: BTreeMap<String, Matrix>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    params: Vec<(String, usize, usize)>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.values.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.values.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.values.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.values().map(|m| m.rows() * m.cols()).sum()
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .values
            .iter()
            .map(|(name, value)| (name.clone(), tape.param(value.clone())))
            .collect();
        ParamVars { vars }
    }

    pub fn write_to<W: Write>(&self, mut w: W, meta: &serde_json::Value) -> io::Result<()> {
        let header = Header {
            meta: meta.clone(),
            params: self
                .values
                .iter()
                .map(|(k, m)| (k.clone(), m.rows(), m.cols()))
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for m in self.values.values() {
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> io::Result<(Self, serde_json::Value)> {
        let invalid = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(invalid("not a checkpoint file"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut out = Self::new();
        let mut buf = [0u8; 8];
        for (name, rows, cols) in header.params {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let m = Matrix::from_vec(rows, cols, data).map_err(|e| invalid(&e.to_string()))?;
            out.insert(name, m);
        }
        Ok((out, header.meta))
    }
}

/// Tape handles for a registered [`Parameters`] bundle.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var, EngineError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| EngineError::UnknownParameter(name.to_string()))
    }

    /// Collects gradients after `backward`. Parameters the loss does not
    /// depend on receive a zero gradient.
    pub fn gradients(&self, tape: &Tape) -> BTreeMap<String, Matrix> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = tape.grad(v).cloned().unwrap_or_else(|| {
                    let (r, c) = tape.shape(v);
                    Matrix::zeros(r, c)
                });
                (name.clone(), g)
            })
            .collect()
    }
}
