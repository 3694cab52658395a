//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `GSCK`, u32 version, u32 length + UTF-8
//! JSON metadata, u32 tensor count, then per tensor: u16 name length, name,
//! u8 rank, rank x u32 dims, and the f32 values.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::Module;

const MAGIC: &[u8; 4] = b"GSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form metadata: model kind, encoder config, training step.
    pub meta: Value,
    /// Named tensors in a fixed order.
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    /// Appends every parameter and buffer of `module`.
    pub fn add_module(&mut self, module: &mut dyn Module) {
        let tensors = &mut self.tensors;
        module.visit_params(&mut |p| tensors.push((p.name.clone(), p.value.clone())));
        module.visit_buffers(&mut |b| tensors.push((b.name.clone(), b.value.clone())));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n.starts_with(prefix))
    }

    /// Copies stored values into `module`; every parameter and buffer must
    /// be present with a matching shape. Extra tensors are ignored.
    pub fn load_into(&self, module: &mut dyn Module) -> Result<()> {
        let mut err = None;
        let mut assign = |name: &str, dst: &mut ArrayD<f32>| {
            if err.is_some() {
                return;
            }
            match self.get(name) {
                None => err = Some(Error::MissingTensor(name.to_string())),
                Some(t) if t.shape() != dst.shape() => {
                    err = Some(Error::ShapeMismatch {
                        expected: format!("{name}: {:?}", dst.shape()),
                        actual: format!("{:?}", t.shape()),
                    })
                }
                Some(t) => dst.assign(t),
            }
        };
        module.visit_params(&mut |p| assign(&p.name, &mut p.value));
        module.visit_buffers(&mut |b| assign(&b.name, &mut b.value));
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_reader(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut meta = vec![0u8; read_u32(r)? as usize];
        r.read_exact(&mut meta)?;
        let meta = serde_json::from_slice(&meta)?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(format!("tensor name: {e}")))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let shape = (0..rank[0]).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Format(e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(&mut BufReader::new(fs::File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
