//! Binary tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SCDP" | u32 version (=1) | u32 count
//! per tensor: u16 name_len | name (UTF-8) | u8 dtype (0=f32, 1=f64)
//!             | u8 ndim | u32 dims[ndim] | raw LE payload
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::CheckpointError;
use crate::{Dtype, Module, Real, Tensor};

pub const MAGIC: [u8; 4] = *b"SCDP";
pub const VERSION: u32 = 1;

/// A tensor of either supported precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Bitwise equality, so NaN payloads and signed zeros compare exactly.
    pub fn bit_eq(&self, other: &AnyTensor) -> bool {
        match (self, other) {
            (AnyTensor::F32(a), AnyTensor::F32(b)) => {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (AnyTensor::F64(a), AnyTensor::F64(b)) => {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    /// Reinterpret as `Tensor<T>`, failing if the stored precision differs.
    pub fn typed<T: Real>(&self, name: &str) -> Result<Tensor<T>, CheckpointError> {
        let wrong = || CheckpointError::WrongDtype {
            name: name.to_string(),
            found: self.dtype(),
            expected: T::DTYPE,
        };
        match self {
            AnyTensor::F32(t) if T::DTYPE == Dtype::F32 => Ok(t.cast()),
            AnyTensor::F64(t) if T::DTYPE == Dtype::F64 => Ok(t.cast()),
            _ => Err(wrong()),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

pub fn to_any<T: Real>(t: Tensor<T>) -> AnyTensor {
    match T::DTYPE {
        Dtype::F32 => AnyTensor::F32(t.cast()),
        Dtype::F64 => AnyTensor::F64(t.cast()),
    }
}

/// Ordered list of named tensors, as stored in a checkpoint.
pub type NamedTensors = Vec<(String, AnyTensor)>;

/// Look up a tensor by name.
pub fn find<'a>(tensors: &'a NamedTensors, name: &str) -> Result<&'a AnyTensor, CheckpointError> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| CheckpointError::Missing(name.to_string()))
}

/// Every parameter of `module` as a checkpoint entry, optionally prefixed.
pub fn module_tensors<T: Real, M: Module<T> + ?Sized>(module: &M, prefix: &str) -> NamedTensors {
    module
        .params()
        .into_iter()
        .map(|p| (format!("{prefix}{}", p.name), to_any(p.value.clone())))
        .collect()
}

/// Overwrite the parameters of `module` from `tensors`; names, shapes and
/// precision must match exactly.
pub fn load_module<T: Real, M: Module<T> + ?Sized>(
    module: &mut M,
    tensors: &NamedTensors,
    prefix: &str,
) -> Result<(), CheckpointError> {
    for p in module.params_mut() {
        let name = format!("{prefix}{}", p.name);
        let value = find(tensors, &name)?.typed::<T>(&name)?;
        if value.shape() != p.value.shape() {
            return Err(CheckpointError::WrongShape {
                name,
                found: value.shape().to_vec(),
                expected: p.value.shape().to_vec(),
            });
        }
        p.value = value;
    }
    Ok(())
}

fn write_payload<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode(tensors: &NamedTensors) -> Result<Vec<u8>, CheckpointError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(CheckpointError::DuplicateName(name.clone()));
        }
        let len = u16::try_from(name.len()).map_err(|_| CheckpointError::NameTooLong(name.clone()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.dtype().tag());
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match tensor {
            AnyTensor::F32(t) => write_payload(t, &mut out),
            AnyTensor::F64(t) => write_payload(t, &mut out),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn read_payload<T: Real>(r: &mut Reader<'_>, shape: &[usize]) -> Result<Tensor<T>, CheckpointError> {
    let n: usize = shape.iter().product();
    let size = T::DTYPE.size();
    let raw = r.take(
        n.checked_mul(size).ok_or(CheckpointError::Truncated("payload"))?,
        "payload",
    )?;
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Ok(Tensor::from_vec(shape, data).expect("payload length matches shape"))
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = match r.take(4, "magic") {
        Ok(m) => m.try_into().unwrap(),
        Err(_) => {
            let mut m = [0u8; 4];
            m[..bytes.len()].copy_from_slice(bytes);
            return Err(CheckpointError::BadMagic(m));
        }
    };
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateName(name));
        }
        let tag = r.u8("dtype")?;
        let dtype = Dtype::from_tag(tag).ok_or(CheckpointError::UnknownDtype(tag))?;
        let ndim = r.u8("ndim")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let tensor = match dtype {
            Dtype::F32 => AnyTensor::F32(read_payload(&mut r, &shape)?),
            Dtype::F64 => AnyTensor::F64(read_payload(&mut r, &shape)?),
        };
        out.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(out)
}

/// Write via a temporary sibling file and rename, so readers never observe
/// a partial checkpoint.
pub fn save(tensors: &NamedTensors, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode(tensors)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NamedTensors, CheckpointError> {
    decode(&fs::read(path)?)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
