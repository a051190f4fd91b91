//! Binary checkpoint format.
//!
//! ```text
//! "LIMX" | version: u32 | tensor count: u32
//! per tensor: name length: u32 | name bytes | rank: u32 | dims: u32 * rank
//!             | payload: f64 * prod(dims)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Role, Tensor};

pub const MAGIC: &[u8; 4] = b"LIMX";
pub const VERSION: u32 = 1;

const ROLE_TENSOR: &str = "meta.role";

pub fn write_tensors<W: Write>(mut w: W, tensors: &[Tensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let n: usize = t.shape.iter().product();
        if n != t.data.len() {
            return Err(Error::Shape {
                context: format!("tensor `{}`", t.name),
                expected: n,
                got: t.data.len(),
            });
        }
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<Tensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for magic bytes".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Format("truncated tensor name".into()))?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)
                .map_err(|_| Error::Format(format!("truncated payload of `{name}`")))?;
            data.push(f64::from_le_bytes(b));
        }
        out.push(Tensor { name, shape, data });
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    write_tensors(BufWriter::new(File::create(path)?), tensors)
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor>> {
    read_tensors(BufReader::new(File::open(path)?))
}

/// Saves a parameter set; the role travels as a one-element tensor.
pub fn save(path: &Path, params: &ParamSet) -> Result<()> {
    let mut tensors = params.tensors.clone();
    tensors.push(Tensor {
        name: ROLE_TENSOR.into(),
        shape: vec![1],
        data: vec![params.role.code() as f64],
    });
    save_tensors(path, &tensors)
}

pub fn load(path: &Path) -> Result<ParamSet> {
    from_tensors(load_tensors(path)?)
}

pub fn from_tensors(mut tensors: Vec<Tensor>) -> Result<ParamSet> {
    let role = match tensors.iter().position(|t| t.name == ROLE_TENSOR) {
        Some(i) => match tensors.remove(i).data.first().map(|&v| v as u32) {
            Some(0) => Role::Shared,
            Some(1) => Role::Individual,
            Some(2) => Role::Student,
            Some(3) => Role::Baseline,
            other => return Err(Error::Format(format!("unknown role {other:?}"))),
        },
        None => Role::Individual,
    };
    let ps = ParamSet { role, tensors };
    ps.validate()?;
    Ok(ps)
}
