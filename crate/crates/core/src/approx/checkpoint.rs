//! Versioned binary checkpoint framing.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "MCEM" | version u32 | tensor_count u32
//! per tensor:  name_len u32 | name utf-8 | ndim u32 | dims u32... | data f64...
//! ```
//!
//! A checkpoint is a flat bundle of named tensors; higher layers namespace
//! names with `/` (e.g. `theta/agent0/w0`). Integers embedded in state
//! sections are stored as exact f64 values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MCEM";
pub const VERSION: u32 = 1;

/// A flat, ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    pub tensors: BTreeMap<String, Tensor>,
}

impl Bundle {
    pub fn new() -> Self {
        Bundle::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.insert(name, Tensor::from_vec(&[1], vec![value]).unwrap());
    }

    pub fn insert_vec(&mut self, name: impl Into<String>, values: Vec<f64>) {
        let len = values.len();
        self.insert(name, Tensor::from_vec(&[len], values).unwrap());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if t.len() != 1 {
            return Err(Error::checkpoint(format!(
                "tensor {name:?} is not a scalar"
            )));
        }
        Ok(t.data()[0])
    }

    /// All tensors whose name starts with `prefix/`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, &Tensor> {
        let full = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&full).map(|rest| (rest.to_string(), v)))
            .collect()
    }
}

pub fn save(path: &Path, bundle: &Bundle) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(bundle.tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in &bundle.tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::checkpoint("truncated checkpoint file"))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn load(path: &Path) -> Result<Bundle> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::checkpoint("truncated checkpoint file"))?;
    if magic != MAGIC {
        return Err(Error::checkpoint("bad magic bytes"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = read_u32(&mut r)?;
    let mut bundle = Bundle::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| Error::checkpoint("truncated checkpoint file"))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::checkpoint("tensor name is not valid utf-8"))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0.0f64; len];
        for v in data.iter_mut() {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)
                .map_err(|_| Error::checkpoint("truncated checkpoint file"))?;
            *v = f64::from_le_bytes(buf);
        }
        bundle.insert(name, Tensor::from_vec(&shape, data)?);
    }
    Ok(bundle)
}
